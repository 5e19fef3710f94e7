#include "ldm/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "ldm/checkpoint.hpp"
#include "ldm/config_io.hpp"
#include "ldm/datapipe.hpp"
#include "ldm/errors.hpp"
#include "ldm/features.hpp"
#include "ldm/harness.hpp"
#include "ldm/hashing.hpp"
#include "ldm/png_io.hpp"
#include "ldm/run_config.hpp"

namespace ldm {

namespace fs = std::filesystem;

namespace {

const std::vector<std::pair<std::string, std::string>> kCommands{
    {"gen-toy", "write the synthetic two-class shapes dataset"},
    {"train-vae", "phase 1: train the autoencoder"},
    {"train-diffusion", "phase 2: train the latent denoiser on a frozen autoencoder"},
    {"sample", "generate class-conditional images"},
    {"recon-eval", "autoencoder reconstruction MS-SSIM and MSE"},
    {"evaluate", "FID, precision and recall between two image sets"},
    {"steps-sweep", "generation metrics across DDIM step counts and seeds"},
    {"channel-study", "train 4- and 8-channel autoencoders under one budget"}};

// Bad invocation: unknown flag, missing input file, invalid config value.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<T>(v));
    } catch (const std::exception&) {
      throw UsageError(std::string("bad ") + what + " list entry '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError(std::string("empty ") + what + " list");
  return out;
}

// "a.b.c=value" with value read as a TOML scalar or array; bare words fall
// back to strings.
void apply_set(nlohmann::json& patch, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw UsageError("--set expects key.path=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = toml_to_json("v = " + raw, "--set").at("v");
  } catch (const std::exception&) {
    value = raw;
  }
  nlohmann::json* node = &patch;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    auto& next = (*node)[parts[i]];
    if (!next.is_object()) next = nlohmann::json::object();
    node = &next;
  }
  (*node)[parts.back()] = value;
}

std::string compact_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

fs::path make_run_dir(const std::string& command, const std::string& requested) {
  fs::path dir;
  if (!requested.empty()) {
    dir = requested;
  } else {
    const char* root = std::getenv("LDM_OUTPUT_ROOT");
    const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
    const fs::path stem = base / (command + "-" + compact_timestamp());
    dir = stem;
    for (int i = 1; fs::exists(dir); ++i) {
      dir = stem.string() + "-" + std::to_string(i);
    }
  }
  fs::create_directories(dir);
  return dir;
}

void require_file(const std::string& path, const char* flag) {
  if (path.empty()) throw UsageError(std::string(flag) + " is required");
  if (!fs::exists(path)) throw UsageError(std::string(flag) + ": no such file or directory: " + path);
}

// A manifest file, a directory holding manifest.csv, or a directory of PNGs
// (sorted by name, labels unknown).
DatasetManifest load_source(const std::string& path, const std::string& relabel_spec) {
  fs::path p(path);
  DatasetManifest m;
  if (fs::is_directory(p)) {
    if (fs::exists(p / "manifest.csv")) {
      m = load_manifest(p / "manifest.csv");
    } else {
      m.name = p.filename().string();
      m.root = p;
      std::vector<std::string> files;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path().filename().string());
      }
      std::sort(files.begin(), files.end());
      if (files.empty()) throw IoError("no manifest.csv and no PNG files in " + path);
      for (const auto& f : files) m.rows.push_back({f, Label::Unknown});
      const Image8 probe = read_png(p / files.front());
      m.channels = probe.channels;
      m.native_size = std::max(probe.width, probe.height);
    }
  } else {
    m = load_manifest(p);
  }
  // Identity keeps unknown rows as they are; commands that need labels check.
  const RelabelPolicy policy = RelabelPolicy::parse(relabel_spec);
  return policy.kind == RelabelPolicy::Kind::Identity ? m : relabel(m, policy);
}

bool all_labelled(const DatasetManifest& m) { return m.count(Label::Unknown) == 0; }

// -1 for every row when any label is unknown.
torch::Tensor labels_or_unknown(const DatasetManifest& m) {
  return all_labelled(m) ? labels_tensor(m) : torch::full({static_cast<int64_t>(m.size())}, -1, torch::kInt64);
}

void require_labels(const DatasetManifest& m, const std::string& what) {
  if (!all_labelled(m)) {
    throw ConfigError(what + " has " + std::to_string(m.count(Label::Unknown)) +
                      " rows with unknown labels; choose a --relabel policy");
  }
}

struct Extractor {
  std::shared_ptr<ConvFeatureExtractor> f;
  std::string origin;
};

Checkpoint extractor_checkpoint(const ConvFeatureExtractor& f, const FeatureNetConfig& cfg, const std::string& name) {
  Checkpoint ckpt;
  ckpt.config = {{"kind", "feature-extractor"}, {"features", cfg}, {"name", name}};
  store_module(ckpt, "net.", *f.net());
  return ckpt;
}

Extractor load_extractor(const std::string& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  if (ckpt.config.value("kind", std::string()) != "feature-extractor") {
    throw IoError(path + " is not a feature-extractor checkpoint");
  }
  ConvFeatureNet net(ckpt.config.at("features").get<FeatureNetConfig>());
  load_module(ckpt, "net.", *net);
  net->eval();
  return {std::make_shared<ConvFeatureExtractor>(net, ckpt.config.value("name", std::string("feat"))), path};
}

// Trained as a classifier on labelled images; with no labels available the
// network stays at its seeded initialisation.
Extractor build_extractor(const RunConfig& c, const torch::Tensor& images, const torch::Tensor& labels,
                          bool labelled, const fs::path& save_to) {
  FeatureNetConfig fc = c.features;
  fc.in_channels = static_cast<int>(images.size(1));
  torch::manual_seed(c.classifier.seed);
  ConvFeatureNet net(fc);
  std::string name = "convfeat";
  if (labelled) {
    train_classifier(net, images, labels, c.classifier);
  } else {
    name = "convfeat-untrained";
  }
  net->eval();
  auto f = std::make_shared<ConvFeatureExtractor>(net, name);
  extractor_checkpoint(*f, fc, name).save(save_to);
  return {f, save_to.string()};
}

Extractor resolve_extractor(const RunConfig& c, const torch::Tensor& images, const torch::Tensor& labels,
                            bool labelled, const fs::path& run_dir) {
  if (!c.extractor.empty()) return load_extractor(c.extractor);
  return build_extractor(c, images, labels, labelled, run_dir / "extractor.ckpt");
}

// Training images plus labels; reference subset when ref_n > 0.
struct Reference {
  torch::Tensor images;
  torch::Tensor labels;
  std::string descriptor;
};

Reference reference_from(const DatasetManifest& m, const RunConfig& c) {
  Reference r;
  if (c.ref_n > 0) {
    const ReferenceBatch batch = build_reference_batch(m, static_cast<std::size_t>(c.ref_n), c.seed);
    DatasetManifest sub = m;
    sub.rows = batch.items;
    r.images = load_images(sub, c.image_size);
    r.labels = labels_tensor(sub);
    r.descriptor = batch.descriptor;
  } else {
    r.images = load_images(m, c.image_size);
    r.labels = labels_or_unknown(m);
    Fnv1a h;
    for (const auto& row : m.rows) {
      h.update(row.path);
      h.update("\n");
    }
    r.descriptor = h.hex();
  }
  return r;
}

void write_loss_csv(const fs::path& path, const std::vector<Phase1Log>& logs) {
  std::ostringstream os;
  os << "step,reconstruction,kl,disc\n" << std::setprecision(10);
  for (const auto& l : logs) os << l.step << ',' << l.reconstruction << ',' << l.kl << ',' << l.disc << '\n';
  write_text(path, os.str());
}

void write_loss_csv(const fs::path& path, const std::vector<double>& losses) {
  std::ostringstream os;
  os << "step,loss\n" << std::setprecision(10);
  for (std::size_t i = 0; i < losses.size(); ++i) os << i + 1 << ',' << losses[i] << '\n';
  write_text(path, os.str());
}

struct RunContext {
  RunConfig cfg;
  fs::path dir;
  nlohmann::json meta = nlohmann::json::object();
  std::ostream* out = nullptr;

  void output(const fs::path& p) { meta["outputs"].push_back(fs::relative(p, dir).string()); }
};

void cmd_gen_toy(RunContext& rc) {
  const RunConfig& c = rc.cfg;
  ToyShapesConfig toy = c.toy;
  toy.image_size = c.image_size;
  const ToyBatch batch = gen_toy_dataset(toy, c.n_per_class);
  write_dataset(rc.dir / "data", batch.images, batch.labels, "toy-shapes");
  rc.output(rc.dir / "data" / "manifest.csv");
  *rc.out << "wrote " << batch.images.size(0) << " images to " << (rc.dir / "data").string() << '\n';
}

void cmd_train_vae(RunContext& rc) {
  RunConfig& c = rc.cfg;
  require_file(c.data, "--data");
  const DatasetManifest m = load_source(c.data, c.relabel);
  const torch::Tensor images = load_images(m, c.image_size);
  const torch::Tensor labels = labels_or_unknown(m);
  c.vae.in_channels = static_cast<int>(images.size(1));
  std::optional<Extractor> ex;
  if (c.train.weights.perceptual > 0.0) {
    ex = resolve_extractor(c, images, labels, all_labelled(m), rc.dir);
    rc.meta["extractor"] = ex->f->descriptor();
  }
  TrainConfig t = c.train;
  if (t.checkpoint_every > 0 && t.checkpoint_dir.empty()) t.checkpoint_dir = rc.dir / "checkpoints";
  const Phase1Result r = train_phase1(t, c.vae, images, ex ? ex->f.get() : nullptr, c.ssim);
  r.checkpoint.save(rc.dir / "vae.ckpt");
  write_loss_csv(rc.dir / "loss.csv", r.history);
  rc.output(rc.dir / "vae.ckpt");
  rc.output(rc.dir / "loss.csv");
  if (ex && c.extractor.empty()) rc.output(rc.dir / "extractor.ckpt");
  rc.meta["vae_hash"] = hash_module(*r.vae);
  *rc.out << "trained autoencoder for " << t.steps << " steps -> " << (rc.dir / "vae.ckpt").string() << '\n';
}

void cmd_train_diffusion(RunContext& rc) {
  RunConfig& c = rc.cfg;
  require_file(c.vae_checkpoint, "--vae-checkpoint");
  require_file(c.data, "--data");
  const Checkpoint vae_ckpt = Checkpoint::load(c.vae_checkpoint);
  const DatasetManifest m = load_source(c.data, c.relabel);
  require_labels(m, c.data);
  const torch::Tensor images = load_images(m, c.image_size);
  c.unet.latent_channels = vae_ckpt.config.at("vae").at("latent_channels").get<int>();
  const Phase2Result r = train_phase2(c.train, c.unet, vae_ckpt, images, labels_tensor(m), c.schedule);
  r.checkpoint.save(rc.dir / "ldm.ckpt");
  write_loss_csv(rc.dir / "loss.csv", r.history);
  rc.output(rc.dir / "ldm.ckpt");
  rc.output(rc.dir / "loss.csv");
  rc.meta["vae_hash_before"] = r.vae_hash_before;
  rc.meta["vae_hash_after"] = r.vae_hash_after;
  *rc.out << "trained denoiser for " << c.train.steps << " steps; autoencoder hash "
          << (r.vae_hash_before == r.vae_hash_after ? "unchanged" : "CHANGED") << '\n';
  if (r.vae_hash_before != r.vae_hash_after) {
    throw NumericError("autoencoder weights changed during phase-2 training");
  }
}

void cmd_sample(RunContext& rc) {
  const RunConfig& c = rc.cfg;
  require_file(c.checkpoint, "--checkpoint");
  if (c.n <= 0) throw ConfigError("--n must be positive");
  LatentDiffusion p = pipeline_from_checkpoint(Checkpoint::load(c.checkpoint));
  const torch::Tensor labels = torch::full({c.n}, static_cast<int64_t>(c.label), torch::kInt64);
  const torch::Tensor images = generate(p, c.sampler, labels);
  const fs::path dir = rc.dir / "samples";
  fs::create_directories(dir);
  DatasetManifest m;
  m.name = "samples";
  m.root = dir;
  for (int64_t i = 0; i < images.size(0); ++i) {
    char file[64];
    std::snprintf(file, sizeof(file), "sample_%04lld.png", static_cast<long long>(i));
    write_png(dir / file, to_image8(images[i]));
    m.rows.push_back({file, c.label == 0 ? Label::Negative : Label::Positive});
    rc.output(dir / file);
  }
  write_manifest(dir / "manifest.csv", m);
  *rc.out << "wrote " << c.n << " samples of class " << c.label << " to " << dir.string() << '\n';
}

void cmd_recon_eval(RunContext& rc) {
  const RunConfig& c = rc.cfg;
  require_file(c.checkpoint, "--checkpoint");
  require_file(c.data, "--data");
  VAE vae = vae_from_checkpoint(Checkpoint::load(c.checkpoint));
  const DatasetManifest m = load_source(c.data, c.relabel);
  const Reference ref = reference_from(m, c);
  const ReconstructionReport r = eval_reconstruction(vae_reconstructor(vae), ref.images);
  std::ostringstream csv;
  csv << "index,ms_ssim,mse_1e-5\n" << std::setprecision(10);
  for (std::size_t i = 0; i < r.ms_ssim_values.size(); ++i) {
    csv << i << ',' << r.ms_ssim_values[i] << ',' << r.mse_values[i] << '\n';
  }
  write_text(rc.dir / "recon.csv", csv.str());
  const nlohmann::json j{{"ms_ssim", {{"mean", r.ms_ssim.mean}, {"std", r.ms_ssim.std}}},
                         {"mse_1e-5", {{"mean", r.mse_1e5.mean}, {"std", r.mse_1e5.std}}},
                         {"scales", r.scales},
                         {"count", r.ms_ssim_values.size()},
                         {"reference", ref.descriptor}};
  write_text(rc.dir / "recon.json", j.dump(2) + "\n");
  rc.output(rc.dir / "recon.csv");
  rc.output(rc.dir / "recon.json");
  *rc.out << std::fixed << std::setprecision(4) << "MS-SSIM " << r.ms_ssim.mean << " +- " << r.ms_ssim.std
          << "  MSE(1e-5) " << r.mse_1e5.mean << " +- " << r.mse_1e5.std << '\n';
}

void cmd_evaluate(RunContext& rc) {
  const RunConfig& c = rc.cfg;
  require_file(c.gen_dir, "--gen-dir");
  require_file(c.real_dir, "--real-dir");
  const DatasetManifest real_m = load_source(c.real_dir, c.relabel);
  const DatasetManifest gen_m = load_source(c.gen_dir, "identity");
  const Reference ref = reference_from(real_m, c);
  const torch::Tensor gen = load_images(gen_m, c.image_size);
  const Extractor ex = resolve_extractor(c, ref.images, ref.labels, all_labelled(real_m), rc.dir);
  MetricReport report;
  report.started_at = utc_timestamp();
  const FeatureMatrix fr = extract_features(*ex.f, ref.images, c.batch);
  const FeatureMatrix fg = extract_features(*ex.f, gen, c.batch);
  report.fid = fid(fr, fg);
  const PrecisionRecall pr = improved_precision_recall(fr, fg, c.pr);
  report.precision = pr.precision;
  report.recall = pr.recall;
  report.reference = ref.descriptor;
  report.extractor = ex.f->descriptor();
  report.seed = c.seed;
  report.finished_at = utc_timestamp();
  report.validate();
  write_text(rc.dir / "metrics.json", report.to_json());
  write_text(rc.dir / "metrics.csv", MetricReport::csv_header() + "\n" + report.csv_row() + "\n");
  rc.output(rc.dir / "metrics.json");
  rc.output(rc.dir / "metrics.csv");
  *rc.out << std::setprecision(6) << "FID " << report.fid << "  precision " << report.precision << "  recall "
          << report.recall << '\n';
}

void cmd_steps_sweep(RunContext& rc) {
  const RunConfig& c = rc.cfg;
  require_file(c.checkpoint, "--checkpoint");
  require_file(c.data, "--data");
  const LatentDiffusion p = pipeline_from_checkpoint(Checkpoint::load(c.checkpoint));
  const DatasetManifest m = load_source(c.data, c.relabel);
  require_labels(m, c.data);
  const Reference ref = reference_from(m, c);
  const Extractor ex = resolve_extractor(c, ref.images, ref.labels, true, rc.dir);
  const auto factory = [&](int steps) {
    SamplerConfig s = c.sampler;
    s.steps = steps;
    return pipeline_generator(p, s, c.batch);
  };
  const SweepResult r = steps_sweep(factory, c.sweep_steps, c.sweep_seeds, ref.images, ref.labels, *ex.f, c.pr);
  write_text(rc.dir / "sweep.csv", r.to_csv());
  write_text(rc.dir / "sweep.svg", r.to_svg());
  rc.output(rc.dir / "sweep.csv");
  rc.output(rc.dir / "sweep.svg");
  for (int s : c.sweep_steps) *rc.out << "steps " << s << "  median FID " << r.median_fid(s) << '\n';
}

void cmd_channel_study(RunContext& rc) {
  RunConfig& c = rc.cfg;
  require_file(c.data, "--data");
  const DatasetManifest m = load_source(c.data, c.relabel);
  const torch::Tensor images = load_images(m, c.image_size);
  torch::Tensor eval_images = images;
  if (!c.eval_data.empty()) {
    require_file(c.eval_data, "--eval-data");
    eval_images = load_images(load_source(c.eval_data, c.relabel), c.image_size);
  }
  c.vae.in_channels = static_cast<int>(images.size(1));
  std::optional<Extractor> ex;
  if (c.train.weights.perceptual > 0.0) {
    ex = resolve_extractor(c, images, labels_or_unknown(m), all_labelled(m), rc.dir);
  }
  VAEConfig cfg4 = c.vae;
  VAEConfig cfg8 = c.vae;
  cfg4.latent_channels = 4;
  cfg8.latent_channels = 8;
  const ChannelStudyReport r =
      channel_study(images, eval_images, cfg4, cfg8, c.train, ex ? ex->f.get() : nullptr, c.ssim);
  write_text(rc.dir / "channel_study.csv", r.to_csv());
  rc.output(rc.dir / "channel_study.csv");
  for (const auto& row : r.rows) {
    *rc.out << row.latent_channels << " channels (" << row.compression_ratio << "x): MS-SSIM " << row.ms_ssim.mean
            << "  MSE(1e-5) " << row.mse_1e5.mean << '\n';
  }
}

// Raw flag values; empty optionals mean "not given".
struct Flags {
  std::string config, run_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data, eval_data, checkpoint, vae_checkpoint, extractor, gen_dir, real_dir, relabel;
  std::optional<std::string> steps, seeds;
  std::optional<int> label, n, train_steps, batch_size, latent_channels, base_width, k, ref_n, n_per_class,
      image_size;
  std::optional<double> lr, eta;
  std::vector<std::string> sets;
};

void add_flags(CLI::App& sub, Flags& f) {
  sub.add_option("--config", f.config, "TOML run config; flags override its values");
  sub.add_option("--run-dir", f.run_dir, "output directory (default $LDM_OUTPUT_ROOT/<command>-<timestamp>)");
  sub.add_option("--seed", f.seed, "master seed");
  sub.add_option("--data", f.data, "manifest CSV or image directory");
  sub.add_option("--eval-data", f.eval_data, "held-out manifest (channel-study)");
  sub.add_option("--checkpoint", f.checkpoint, "vae.ckpt or ldm.ckpt");
  sub.add_option("--vae-checkpoint", f.vae_checkpoint, "autoencoder checkpoint for train-diffusion");
  sub.add_option("--extractor", f.extractor, "feature extractor checkpoint");
  sub.add_option("--gen-dir", f.gen_dir, "generated images (evaluate)");
  sub.add_option("--real-dir", f.real_dir, "reference images (evaluate)");
  sub.add_option("--relabel", f.relabel, "identity | unknown-to-0 | unknown-to-1 | mapping:<csv>");
  sub.add_option("--label", f.label, "class label for sample");
  sub.add_option("--n", f.n, "number of samples");
  sub.add_option("--steps", f.steps, "DDIM steps; comma list for steps-sweep");
  sub.add_option("--seeds", f.seeds, "comma list of sampling seeds (steps-sweep)");
  sub.add_option("--train-steps", f.train_steps, "optimizer steps");
  sub.add_option("--batch-size", f.batch_size, "training batch size");
  sub.add_option("--lr", f.lr, "learning rate");
  sub.add_option("--latent-channels", f.latent_channels, "autoencoder latent channels");
  sub.add_option("--base-width", f.base_width, "autoencoder base width");
  sub.add_option("--eta", f.eta, "DDIM eta");
  sub.add_option("--k", f.k, "k for precision/recall");
  sub.add_option("--ref-n", f.ref_n, "reference batch size (0 = all rows)");
  sub.add_option("--n-per-class", f.n_per_class, "toy images per class");
  sub.add_option("--image-size", f.image_size, "square image size after preprocessing");
  sub.add_option("--set", f.sets, "override any config key, e.g. --set unet.attention=true")->take_all();
}

nlohmann::json flags_patch(const std::string& command, const Flags& f) {
  nlohmann::json p = nlohmann::json::object();
  if (f.seed) p["seed"] = *f.seed;
  if (f.data) p["data"] = *f.data;
  if (f.eval_data) p["eval_data"] = *f.eval_data;
  if (f.checkpoint) p["checkpoint"] = *f.checkpoint;
  if (f.vae_checkpoint) p["vae_checkpoint"] = *f.vae_checkpoint;
  if (f.extractor) p["extractor"] = *f.extractor;
  if (f.gen_dir) p["gen_dir"] = *f.gen_dir;
  if (f.real_dir) p["real_dir"] = *f.real_dir;
  if (f.relabel) p["relabel"] = *f.relabel;
  if (f.label) p["label"] = *f.label;
  if (f.n) p["n"] = *f.n;
  if (f.steps) {
    if (command == "steps-sweep") {
      p["sweep_steps"] = parse_list<int>(*f.steps, "steps");
    } else {
      const auto v = parse_list<int>(*f.steps, "steps");
      if (v.size() != 1) throw UsageError("--steps takes a single value for " + command);
      p["sampler"]["steps"] = v.front();
    }
  }
  if (f.seeds) p["sweep_seeds"] = parse_list<std::uint64_t>(*f.seeds, "seeds");
  if (f.train_steps) p["train"]["steps"] = *f.train_steps;
  if (f.batch_size) p["train"]["batch_size"] = *f.batch_size;
  if (f.lr) p["train"]["lr"] = *f.lr;
  if (f.latent_channels) p["vae"]["latent_channels"] = *f.latent_channels;
  if (f.base_width) p["vae"]["base_width"] = *f.base_width;
  if (f.eta) p["sampler"]["eta"] = *f.eta;
  if (f.k) p["pr"]["k"] = *f.k;
  if (f.ref_n) p["ref_n"] = *f.ref_n;
  if (f.n_per_class) p["n_per_class"] = *f.n_per_class;
  if (f.image_size) p["image_size"] = *f.image_size;
  for (const auto& s : f.sets) apply_set(p, s);
  return p;
}

// defaults < config file < flags. Module seeds not set explicitly follow
// the master seed.
RunConfig resolve_config(const std::string& command, const Flags& f) {
  nlohmann::json patch = nlohmann::json::object();
  if (!f.config.empty()) {
    if (!fs::exists(f.config)) throw UsageError("--config: no such file: " + f.config);
    std::ifstream is(f.config);
    std::stringstream ss;
    ss << is.rdbuf();
    patch = toml_to_json(ss.str(), f.config);
  }
  patch.merge_patch(flags_patch(command, f));
  patch.erase("command");
  if (patch.contains("train")) patch["train"].erase("phase");

  nlohmann::json doc = RunConfig::defaults_for(command);
  doc.merge_patch(patch);
  const std::uint64_t seed = doc.at("seed").get<std::uint64_t>();
  for (const char* module : {"toy", "sampler", "train", "classifier"}) {
    if (!patch.contains(module) || !patch[module].contains("seed")) doc[module]["seed"] = seed;
  }
  doc["command"] = command;
  return doc.get<RunConfig>();
}

void validate(const RunConfig& c) {
  if (c.image_size < 8 || c.image_size % 8 != 0) throw ConfigError("image_size must be a positive multiple of 8");
  if (c.batch <= 0) throw ConfigError("batch must be positive");
  if (c.ref_n < 0) throw ConfigError("ref_n must be non-negative");
  c.train.validate();
  c.vae.validate();
  c.schedule.build();
  c.sampler.validate(c.schedule.steps);
  if (c.command == "gen-toy" && c.n_per_class <= 0) throw ConfigError("n_per_class must be positive");
  if (c.command == "sample" && c.label != 0 && c.label != 1) throw ConfigError("--label must be 0 or 1");
  if (c.command == "steps-sweep") {
    for (int s : c.sweep_steps) {
      SamplerConfig sc = c.sampler;
      sc.steps = s;
      sc.validate(c.schedule.steps);
    }
    if (c.sweep_seeds.empty()) throw ConfigError("sweep needs at least one seed");
  }
}

int dispatch(RunContext& rc) {
  const std::string& cmd = rc.cfg.command;
  if (cmd == "gen-toy") cmd_gen_toy(rc);
  else if (cmd == "train-vae") cmd_train_vae(rc);
  else if (cmd == "train-diffusion") cmd_train_diffusion(rc);
  else if (cmd == "sample") cmd_sample(rc);
  else if (cmd == "recon-eval") cmd_recon_eval(rc);
  else if (cmd == "evaluate") cmd_evaluate(rc);
  else if (cmd == "steps-sweep") cmd_steps_sweep(rc);
  else if (cmd == "channel-study") cmd_channel_study(rc);
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"latent diffusion toolkit"};
  app.name("ldm");
  app.require_subcommand(1);
  Flags flags;
  for (const auto& [name, about] : kCommands) add_flags(*app.add_subcommand(name, about), flags);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }
  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();

  RunContext rc;
  rc.out = &out;
  fs::path config_path;
  try {
    rc.cfg = resolve_config(command, flags);
    validate(rc.cfg);
    rc.dir = make_run_dir(command, flags.run_dir);
    config_path = rc.dir / "run_config.toml";
    write_text(config_path, run_config_to_toml(rc.cfg));
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n\n" << sub->help();
    return kExitUsage;
  }

  rc.meta["command"] = command;
  rc.meta["args"] = args;
  rc.meta["run_dir"] = rc.dir.string();
  rc.meta["config"] = nlohmann::json(rc.cfg);
  rc.meta["outputs"] = nlohmann::json::array();
  rc.meta["started_at"] = utc_timestamp();
  const auto write_meta = [&](const std::string& status) {
    rc.meta["status"] = status;
    rc.meta["finished_at"] = utc_timestamp();
    write_text(rc.dir / "run.json", rc.meta.dump(2) + "\n");
  };

  try {
    const int code = dispatch(rc);
    // Paths filled in by the command (e.g. vae.in_channels) land in the record too.
    write_text(config_path, run_config_to_toml(rc.cfg));
    rc.meta["config"] = nlohmann::json(rc.cfg);
    write_meta("ok");
    out << "run directory: " << rc.dir.string() << '\n';
    return code;
  } catch (const UsageError& e) {
    write_meta(std::string("usage error: ") + e.what());
    err << "error: " << e.what() << "\n\n" << sub->help();
    return kExitUsage;
  } catch (const std::exception& e) {
    write_meta(std::string("failed: ") + e.what());
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace ldm
