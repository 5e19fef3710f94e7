#include "ldm/run_config.hpp"

#include <fstream>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "ldm/config_io.hpp"
#include "ldm/errors.hpp"

namespace ldm {

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"phase", c.phase},
                     {"lr", c.lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"batch_size", c.batch_size},
                     {"steps", c.steps},
                     {"ema_decay", c.ema_decay},
                     {"seed", c.seed},
                     {"weights", c.weights},
                     {"disc_warmup", c.disc_warmup},
                     {"disc_lr", c.disc_lr},
                     {"checkpoint_every", c.checkpoint_every},
                     {"checkpoint_dir", c.checkpoint_dir.string()}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d = TrainConfig::defaults_for_phase(j.value("phase", 1));
  c.phase = j.value("phase", d.phase);
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.ema_decay = j.value("ema_decay", d.ema_decay);
  c.seed = j.value("seed", d.seed);
  c.weights = j.value("weights", d.weights);
  c.disc_warmup = j.value("disc_warmup", d.disc_warmup);
  c.disc_lr = j.value("disc_lr", d.disc_lr);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.checkpoint_dir = j.value("checkpoint_dir", std::string());
}

RunConfig RunConfig::defaults_for(const std::string& command) {
  RunConfig c;
  c.command = command;
  c.train = TrainConfig::defaults_for_phase(command == "train-diffusion" ? 2 : 1);
  return c;
}

void RunConfig::resolve_seeds() {
  toy.seed = seed;
  sampler.seed = seed;
  train.seed = seed;
  classifier.seed = seed;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"command", c.command},
                     {"seed", c.seed},
                     {"data", c.data},
                     {"eval_data", c.eval_data},
                     {"checkpoint", c.checkpoint},
                     {"vae_checkpoint", c.vae_checkpoint},
                     {"extractor", c.extractor},
                     {"gen_dir", c.gen_dir},
                     {"real_dir", c.real_dir},
                     {"relabel", c.relabel},
                     {"image_size", c.image_size},
                     {"n_per_class", c.n_per_class},
                     {"label", c.label},
                     {"n", c.n},
                     {"ref_n", c.ref_n},
                     {"sweep_steps", c.sweep_steps},
                     {"sweep_seeds", c.sweep_seeds},
                     {"batch", c.batch},
                     {"toy", c.toy},
                     {"vae", c.vae},
                     {"unet", c.unet},
                     {"schedule", c.schedule},
                     {"sampler", c.sampler},
                     {"train", c.train},
                     {"features", c.features},
                     {"classifier", c.classifier},
                     {"ssim", c.ssim},
                     {"pr", c.pr}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  const RunConfig d = RunConfig::defaults_for(j.value("command", std::string()));
  c.command = d.command;
  c.seed = j.value("seed", d.seed);
  c.data = j.value("data", d.data);
  c.eval_data = j.value("eval_data", d.eval_data);
  c.checkpoint = j.value("checkpoint", d.checkpoint);
  c.vae_checkpoint = j.value("vae_checkpoint", d.vae_checkpoint);
  c.extractor = j.value("extractor", d.extractor);
  c.gen_dir = j.value("gen_dir", d.gen_dir);
  c.real_dir = j.value("real_dir", d.real_dir);
  c.relabel = j.value("relabel", d.relabel);
  c.image_size = j.value("image_size", d.image_size);
  c.n_per_class = j.value("n_per_class", d.n_per_class);
  c.label = j.value("label", d.label);
  c.n = j.value("n", d.n);
  c.ref_n = j.value("ref_n", d.ref_n);
  c.sweep_steps = j.value("sweep_steps", d.sweep_steps);
  c.sweep_seeds = j.value("sweep_seeds", d.sweep_seeds);
  c.batch = j.value("batch", d.batch);
  c.toy = j.value("toy", d.toy);
  c.vae = j.value("vae", d.vae);
  c.unet = j.value("unet", d.unet);
  c.schedule = j.value("schedule", d.schedule);
  c.sampler = j.value("sampler", d.sampler);
  c.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
  c.features = j.value("features", d.features);
  c.classifier = j.value("classifier", d.classifier);
  c.ssim = j.value("ssim", d.ssim);
  c.pr = j.value("pr", d.pr);
}

namespace {

nlohmann::json node_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [key, value] : *t) {
      out[std::string(key.str())] = node_to_json(value);
    }
    return out;
  }
  if (const auto* a = node.as_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& value : *a) {
      out.push_back(node_to_json(value));
    }
    return out;
  }
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  if (const auto* v = node.as_string()) return v->get();
  throw ConfigError("unsupported TOML value type (dates and times are not accepted)");
}

void insert_value(toml::table& t, const std::string& key, const nlohmann::json& v);

toml::array to_toml_array(const nlohmann::json& arr) {
  toml::array out;
  for (const auto& v : arr) {
    if (v.is_object()) {
      throw ConfigError("arrays of tables are not part of the run config format");
    } else if (v.is_array()) {
      out.push_back(to_toml_array(v));
    } else if (v.is_boolean()) {
      out.push_back(v.get<bool>());
    } else if (v.is_number_integer()) {
      out.push_back(v.get<std::int64_t>());
    } else if (v.is_number_float()) {
      out.push_back(v.get<double>());
    } else if (v.is_string()) {
      out.push_back(v.get<std::string>());
    }
  }
  return out;
}

toml::table to_toml_table(const nlohmann::json& obj) {
  toml::table t;
  for (const auto& [key, value] : obj.items()) {
    insert_value(t, key, value);
  }
  return t;
}

void insert_value(toml::table& t, const std::string& key, const nlohmann::json& v) {
  if (v.is_object()) {
    t.insert(key, to_toml_table(v));
  } else if (v.is_array()) {
    t.insert(key, to_toml_array(v));
  } else if (v.is_boolean()) {
    t.insert(key, v.get<bool>());
  } else if (v.is_number_unsigned()) {
    const auto u = v.get<std::uint64_t>();
    if (u > static_cast<std::uint64_t>(INT64_MAX)) {
      throw ConfigError("value of '" + key + "' exceeds the TOML integer range");
    }
    t.insert(key, static_cast<std::int64_t>(u));
  } else if (v.is_number_integer()) {
    t.insert(key, v.get<std::int64_t>());
  } else if (v.is_number_float()) {
    t.insert(key, v.get<double>());
  } else if (v.is_string()) {
    t.insert(key, v.get<std::string>());
  } else if (!v.is_null()) {
    throw ConfigError("value of '" + key + "' has no TOML representation");
  }
}

}  // namespace

nlohmann::json toml_to_json(const std::string& text, const std::string& source) {
  try {
    return node_to_json(toml::parse(text, source));
  } catch (const toml::parse_error& e) {
    throw ParseError(source, e.source().begin.line, std::string(e.description()));
  }
}

std::string json_to_toml(const nlohmann::json& doc) {
  if (!doc.is_object()) {
    throw ConfigError("only objects map onto TOML documents");
  }
  std::ostringstream os;
  os << toml::toml_formatter(to_toml_table(doc)) << '\n';
  return os.str();
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw IoError("cannot open config " + path.string());
  }
  std::stringstream ss;
  ss << is.rdbuf();
  return toml_to_json(ss.str(), path.string()).get<RunConfig>();
}

std::string run_config_to_toml(const RunConfig& c) { return json_to_toml(nlohmann::json(c)); }

}  // namespace ldm
