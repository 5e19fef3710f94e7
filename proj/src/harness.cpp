#include "ldm/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <map>
#include <sstream>

#include "ldm/config_io.hpp"
#include "ldm/errors.hpp"
#include "ldm/hashing.hpp"
#include "ldm/schedules.hpp"

namespace ldm {

namespace F = torch::nn::functional;

TrainConfig TrainConfig::defaults_for_phase(int phase) {
  TrainConfig c;
  c.phase = phase;
  c.lr = phase == 2 ? 2e-4 : 1e-4;
  return c;
}

void TrainConfig::validate() const {
  if (phase != 1 && phase != 2) {
    throw ConfigError("training phase must be 1 or 2");
  }
  if (!(lr > 0.0) || !(disc_lr > 0.0) || batch_size < 1 || steps < 0) {
    throw ConfigError("learning rates and batch size must be positive, steps non-negative");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) {
    throw ConfigError("EMA decay must lie in [0, 1)");
  }
  weights.validate();
}

namespace {

torch::optim::Adam make_adam(std::vector<torch::Tensor> params, double lr, const TrainConfig& cfg) {
  return torch::optim::Adam(std::move(params),
                            torch::optim::AdamOptions(lr).betas(std::make_tuple(cfg.beta1, cfg.beta2)));
}

torch::Tensor sample_batch(int64_t n, int64_t batch, torch::Generator& gen) {
  return torch::randint(n, {std::min(batch, n)}, gen, torch::kLong);
}

Checkpoint vae_checkpoint(const VAEConfig& vae_cfg, const TrainConfig& cfg, int step, VAE& vae,
                          PatchDiscriminator& disc, torch::Generator& gen) {
  Checkpoint ckpt;
  ckpt.config["kind"] = "vae";
  ckpt.config["vae"] = vae_cfg;
  ckpt.config["train"] = cfg;
  ckpt.config["step"] = step;
  store_module(ckpt, "vae.", *vae);
  store_module(ckpt, "disc.", *disc);
  store_generator(ckpt, "rng.state", gen);
  return ckpt;
}

void check_finite(double value, const char* what, int step) {
  if (!std::isfinite(value)) {
    throw NumericError(std::string(what) + " became non-finite at step " + std::to_string(step));
  }
}

}  // namespace

Phase1Result train_phase1(const TrainConfig& cfg, const VAEConfig& vae_cfg, const torch::Tensor& images,
                          const FeatureExtractor* perceptual, const SsimParams& ssim_params) {
  cfg.validate();
  vae_cfg.validate();
  if (cfg.phase != 1) {
    throw ConfigError("train_phase1 needs a phase-1 config");
  }
  if (images.dim() != 4 || images.size(1) != vae_cfg.in_channels || images.size(0) == 0) {
    throw ContractError("phase-1 data must be [N, in_channels, H, W]");
  }

  torch::manual_seed(cfg.seed);
  Phase1Result out;
  out.vae = VAE(vae_cfg);
  out.disc = PatchDiscriminator(vae_cfg.in_channels, 32, images.size(2) >= 64 ? 3 : 2);
  auto gen = make_generator(cfg.seed + 1);
  auto opt = make_adam(out.vae->parameters(), cfg.lr, cfg);
  auto disc_opt = torch::optim::Adam(out.disc->parameters(), torch::optim::AdamOptions(cfg.disc_lr).betas({0.5, 0.9}));
  const bool adversarial = cfg.weights.adv > 0.0;

  auto snapshot = [&](int step) {
    if (!cfg.checkpoint_dir.empty()) {
      vae_checkpoint(vae_cfg, cfg, step, out.vae, out.disc, gen)
          .save(cfg.checkpoint_dir / ("vae_step" + std::to_string(step) + ".ckpt"));
    }
  };

  out.vae->train();
  out.disc->train();
  for (int step = 0; step < cfg.steps; ++step) {
    try {
      const auto idx = sample_batch(images.size(0), cfg.batch_size, gen);
      const auto x = images.index_select(0, idx);
      auto enc = out.vae->encode(x);
      auto z = reparameterize(enc, gen);
      auto dec = out.vae->decode(z, &enc.skips);
      const bool critic_on = adversarial && step >= cfg.disc_warmup;
      auto terms = reconstruction_loss(dec.full, dec.half, x, cfg.weights, adversarial ? out.disc : nullptr,
                                       perceptual, ssim_params, critic_on);
      auto kl = kl_loss(enc);
      auto loss = terms.total + cfg.weights.kl * kl;

      Phase1Log log;
      log.step = step;
      log.reconstruction = terms.total.item<double>();
      log.kl = kl.item<double>();
      check_finite(log.reconstruction + log.kl, "phase-1 loss", step);

      opt.zero_grad();
      loss.backward();
      opt.step();

      if (critic_on) {
        disc_opt.zero_grad();
        auto full = adversarial_losses_from_logits(out.disc->forward(x), out.disc->forward(dec.full.detach()));
        auto half = adversarial_losses_from_logits(out.disc->forward(downsample_half(x)),
                                                   out.disc->forward(dec.half.detach()));
        auto d_loss = 0.5 * (full.d_loss + half.d_loss);
        log.disc = d_loss.item<double>();
        check_finite(log.disc, "discriminator loss", step);
        d_loss.backward();
        disc_opt.step();
      }
      out.history.push_back(log);
    } catch (const NumericError&) {
      snapshot(step);
      throw;
    }
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      snapshot(step + 1);
    }
  }
  out.vae->eval();
  out.disc->eval();
  out.checkpoint = vae_checkpoint(vae_cfg, cfg, cfg.steps, out.vae, out.disc, gen);
  return out;
}

VAE vae_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.config.contains("vae")) {
    throw IoError("checkpoint carries no autoencoder config");
  }
  VAE vae(ckpt.config.at("vae").get<VAEConfig>());
  load_module(ckpt, "vae.", *vae);
  vae->eval();
  return vae;
}

LatentDiffusion pipeline_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.config.value("kind", std::string()) != "latent-diffusion") {
    throw IoError("checkpoint is not a latent-diffusion pipeline");
  }
  LatentDiffusion p;
  p.vae = vae_from_checkpoint(ckpt);
  p.unet = UNet(ckpt.config.at("unet").get<UNetConfig>());
  load_module(ckpt, ckpt.has("ema.conv_in.weight") ? "ema." : "unet.", *p.unet);
  p.unet->eval();
  p.schedule = ckpt.config.at("schedule").get<ScheduleConfig>().build();
  p.latent_scale = ckpt.config.at("latent_scale").get<double>();
  p.image_size = ckpt.config.at("image_size").get<int64_t>();
  return p;
}

Phase2Result train_phase2(const TrainConfig& cfg, const UNetConfig& unet_cfg, const Checkpoint& vae_checkpoint,
                          const torch::Tensor& images, const torch::Tensor& labels, const ScheduleConfig& schedule) {
  cfg.validate();
  unet_cfg.validate();
  if (cfg.phase != 2) {
    throw ConfigError("train_phase2 needs a phase-2 config");
  }
  if (images.size(0) != labels.size(0) || images.size(0) == 0) {
    throw ContractError("phase-2 data needs one label per image");
  }
  Phase2Result out;
  auto& p = out.pipeline;
  p.vae = vae_from_checkpoint(vae_checkpoint);
  for (auto& param : p.vae->parameters()) {
    param.set_requires_grad(false);
  }
  if (p.vae->config().latent_channels != unet_cfg.latent_channels) {
    throw ConfigError("UNet latent_channels must match the autoencoder");
  }
  p.schedule = schedule.build();
  p.image_size = images.size(2);
  out.vae_hash_before = hash_module(*p.vae);

  // The autoencoder is frozen, so posterior moments are computed once.
  torch::Tensor mu, logvar;
  {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> mus, logvars;
    for (int64_t s = 0; s < images.size(0); s += 256) {
      auto enc = p.vae->encode(images.narrow(0, s, std::min<int64_t>(256, images.size(0) - s)));
      mus.push_back(enc.mu);
      logvars.push_back(enc.logvar);
    }
    mu = torch::cat(mus);
    logvar = torch::cat(logvars);
  }
  unet_cfg.check_latent(mu.size(2), mu.size(3));
  auto gen = make_generator(cfg.seed + 2);
  {
    const auto z = mu + torch::exp(0.5 * logvar) * make_noise(mu, gen);
    p.latent_scale = 1.0 / std::max(z.std().item<double>(), 1e-8);
  }

  torch::manual_seed(cfg.seed);
  p.unet = UNet(unet_cfg);
  UNet ema{nullptr};
  if (cfg.ema_decay > 0.0) {
    ema = UNet(unet_cfg);
    torch::NoGradGuard no_grad;
    auto src = p.unet->parameters();
    auto dst = ema->parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i].copy_(src[i]);
      dst[i].set_requires_grad(false);
    }
  }
  auto opt = make_adam(p.unet->parameters(), cfg.lr, cfg);
  const int T = p.schedule.steps();

  auto make_checkpoint = [&](int step) {
    Checkpoint ckpt;
    ckpt.config["kind"] = "latent-diffusion";
    ckpt.config["vae"] = p.vae->config();
    ckpt.config["unet"] = unet_cfg;
    ckpt.config["schedule"] = schedule;
    ckpt.config["latent_scale"] = p.latent_scale;
    ckpt.config["image_size"] = p.image_size;
    ckpt.config["train"] = cfg;
    ckpt.config["step"] = step;
    ckpt.config["vae_hash"] = hash_module(*p.vae);
    store_module(ckpt, "vae.", *p.vae);
    store_module(ckpt, "unet.", *p.unet);
    if (ema) {
      store_module(ckpt, "ema.", *ema);
    }
    store_generator(ckpt, "rng.state", gen);
    return ckpt;
  };
  auto snapshot = [&](int step) {
    if (!cfg.checkpoint_dir.empty()) {
      make_checkpoint(step).save(cfg.checkpoint_dir / ("ldm_step" + std::to_string(step) + ".ckpt"));
    }
  };

  p.unet->train();
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sample_batch(mu.size(0), cfg.batch_size, gen);
    const auto m = mu.index_select(0, idx);
    const auto lv = logvar.index_select(0, idx);
    const auto z0 = (m + torch::exp(0.5 * lv) * make_noise(m, gen)) * p.latent_scale;
    const auto t = torch::randint(1, T + 1, {z0.size(0)}, gen, torch::kLong);
    const auto eps = make_noise(z0, gen);
    const auto x_t = forward_diffuse(z0, t, eps, p.schedule);
    auto loss = diffusion_loss(p.unet->forward(x_t, t, labels.index_select(0, idx)), eps);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      snapshot(step);
      throw NumericError("diffusion loss became non-finite at step " + std::to_string(step));
    }
    out.history.push_back(value);
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (ema) {
      torch::NoGradGuard no_grad;
      auto src = p.unet->parameters();
      auto dst = ema->parameters();
      for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i].mul_(cfg.ema_decay).add_(src[i], 1.0 - cfg.ema_decay);
      }
    }
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      snapshot(step + 1);
    }
  }
  p.unet->eval();
  out.vae_hash_after = hash_module(*p.vae);

  out.checkpoint = make_checkpoint(cfg.steps);
  if (ema) {
    p.unet = ema;
    p.unet->eval();
  }
  return out;
}

ReconstructFn vae_reconstructor(VAE vae) {
  return [vae](const torch::Tensor& x) mutable {
    torch::NoGradGuard no_grad;
    vae->eval();
    return vae->reconstruct(x);
  };
}

ReconstructionReport eval_reconstruction(const ReconstructFn& reconstruct, const torch::Tensor& images,
                                         int64_t batch) {
  if (images.dim() != 4 || images.size(0) == 0) {
    throw ContractError("eval_reconstruction needs a non-empty [N, C, H, W] batch");
  }
  ReconstructionReport report;
  report.scales = max_ms_ssim_scales(images.size(2), images.size(3));
  const auto weights = ms_ssim_weights(report.scales);
  std::vector<torch::Tensor> ms, se;
  torch::NoGradGuard no_grad;
  for (int64_t s = 0; s < images.size(0); s += batch) {
    const auto x = images.narrow(0, s, std::min(batch, images.size(0) - s));
    const auto y = reconstruct(x);
    ms.push_back(ms_ssim_per_image(x, y, weights).to(torch::kDouble));
    se.push_back(mse_per_image(to_unit_range(x), to_unit_range(y)) * 1e5);
  }
  const auto ms_all = torch::cat(ms);
  const auto se_all = torch::cat(se);
  report.ms_ssim = mean_std(ms_all);
  report.mse_1e5 = mean_std(se_all);
  report.ms_ssim_values.assign(ms_all.data_ptr<double>(), ms_all.data_ptr<double>() + ms_all.numel());
  report.mse_values.assign(se_all.data_ptr<double>(), se_all.data_ptr<double>() + se_all.numel());
  return report;
}

GenerateFn pipeline_generator(LatentDiffusion pipeline, SamplerConfig sampler, int64_t batch) {
  return [pipeline, sampler, batch](const torch::Tensor& labels, std::uint64_t seed) mutable {
    std::vector<torch::Tensor> parts;
    for (int64_t s = 0, chunk = 0; s < labels.size(0); s += batch, ++chunk) {
      SamplerConfig cfg = sampler;
      cfg.seed = seed + static_cast<std::uint64_t>(chunk) * 1000003ULL;
      parts.push_back(generate(pipeline, cfg, labels.narrow(0, s, std::min(batch, labels.size(0) - s))));
    }
    return torch::cat(parts);
  };
}

MetricReport eval_generation(const GenerateFn& generate_fn, const torch::Tensor& ref_images,
                             const torch::Tensor& ref_labels, const FeatureExtractor& f, const PRConfig& pr,
                             std::uint64_t seed, const std::string& reference_descriptor) {
  if (ref_images.size(0) != ref_labels.size(0)) {
    throw ContractError("reference images and labels differ in count");
  }
  MetricReport report;
  report.started_at = utc_timestamp();
  report.seed = seed;
  report.reference = reference_descriptor;
  report.extractor = f.descriptor();
  const auto gen_images = generate_fn(ref_labels, seed);
  const auto real_f = extract_features(f, ref_images);
  const auto gen_f = extract_features(f, gen_images);
  report.fid = fid(real_f, gen_f);
  const auto prr = improved_precision_recall(real_f, gen_f, pr);
  report.precision = prr.precision;
  report.recall = prr.recall;
  report.finished_at = utc_timestamp();
  report.validate();
  return report;
}

std::string SweepResult::to_csv() const {
  std::ostringstream os;
  os << "setting,seed,fid,precision,recall\n" << std::setprecision(10);
  for (const auto& r : rows) {
    os << r.setting << ',' << r.seed << ',' << r.fid << ',' << r.precision << ',' << r.recall << '\n';
  }
  return os.str();
}

double SweepResult::median_fid(int setting) const {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.setting == setting) v.push_back(r.fid);
  }
  if (v.empty()) {
    throw ContractError("sweep has no rows for setting " + std::to_string(setting));
  }
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string SweepResult::to_svg() const {
  constexpr double W = 480, H = 320, L = 60, R = 20, T = 20, B = 50;
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (rows.empty()) {
    os << "</svg>\n";
    return os.str();
  }
  std::map<int, bool> settings;
  double lo = rows.front().fid, hi = rows.front().fid;
  for (const auto& r : rows) {
    settings[r.setting] = true;
    lo = std::min(lo, r.fid);
    hi = std::max(hi, r.fid);
  }
  if (hi - lo < 1e-12) {
    hi = lo + 1.0;
  }
  const int x_lo = settings.begin()->first, x_hi = settings.rbegin()->first;
  auto px = [&](int s) { return x_hi == x_lo ? (L + W - R) / 2 : L + (W - L - R) * (s - x_lo) / double(x_hi - x_lo); };
  auto py = [&](double v) { return H - B - (H - T - B) * (v - lo) / (hi - lo); };
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << setting_name
     << "</text>\n";
  os << "<text x=\"15\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 15 " << (T + H - B) / 2
     << ")\" text-anchor=\"middle\">FID</text>\n";
  os << "<text x=\"" << L - 5 << "\" y=\"" << py(hi) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << hi
     << "</text>\n";
  os << "<text x=\"" << L - 5 << "\" y=\"" << py(lo) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << lo
     << "</text>\n";
  std::string path;
  for (const auto& [s, unused] : settings) {
    os << "<text x=\"" << px(s) << "\" y=\"" << H - B + 15 << "\" text-anchor=\"middle\" font-size=\"10\">" << s
       << "</text>\n";
    path += (path.empty() ? "M" : " L") + std::to_string(px(s)) + " " + std::to_string(py(median_fid(s)));
  }
  os << "<path d=\"" << path << "\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n";
  for (const auto& r : rows) {
    os << "<circle cx=\"" << px(r.setting) << "\" cy=\"" << py(r.fid) << "\" r=\"3\" fill=\"darkorange\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

SweepResult steps_sweep(const StepsGeneratorFactory& factory, const std::vector<int>& steps_list,
                        const std::vector<std::uint64_t>& seeds, const torch::Tensor& ref_images,
                        const torch::Tensor& ref_labels, const FeatureExtractor& f, const PRConfig& pr) {
  if (steps_list.empty() || seeds.empty()) {
    throw ConfigError("steps sweep needs at least one setting and one seed");
  }
  SweepResult result;
  const auto real_f = extract_features(f, ref_images);
  for (int steps : steps_list) {
    const auto gen_fn = factory(steps);
    for (auto seed : seeds) {
      const auto gen_f = extract_features(f, gen_fn(ref_labels, seed));
      const auto prr = improved_precision_recall(real_f, gen_f, pr);
      result.rows.push_back({steps, seed, fid(real_f, gen_f), prr.precision, prr.recall});
    }
  }
  return result;
}

double compression_ratio(int image_channels, int latent_channels) {
  const int f = VAEConfig::kCompressionFactor;
  return static_cast<double>(image_channels * f * f) / static_cast<double>(latent_channels);
}

std::string ChannelStudyReport::to_csv() const {
  std::ostringstream os;
  os << "latent_channels,steps,compression_ratio,ms_ssim,ms_ssim_std,mse_1e-5,mse_1e-5_std\n" << std::setprecision(10);
  for (const auto& r : rows) {
    os << r.latent_channels << ',' << r.steps << ',' << r.compression_ratio << ',' << r.ms_ssim.mean << ','
       << r.ms_ssim.std << ',' << r.mse_1e5.mean << ',' << r.mse_1e5.std << '\n';
  }
  return os.str();
}

ChannelStudyReport channel_study(const torch::Tensor& train_images, const torch::Tensor& eval_images,
                                 const VAEConfig& cfg4, const VAEConfig& cfg8, const TrainConfig& train,
                                 const FeatureExtractor* perceptual, const SsimParams& ssim_params) {
  if (cfg4.latent_channels != 4 || cfg8.latent_channels != 8) {
    throw ConfigError("channel study compares a 4-channel and an 8-channel autoencoder");
  }
  ChannelStudyReport report;
  for (const auto* cfg : {&cfg4, &cfg8}) {
    auto result = train_phase1(train, *cfg, train_images, perceptual, ssim_params);
    const auto rec = eval_reconstruction(vae_reconstructor(result.vae), eval_images);
    report.rows.push_back({cfg->latent_channels, train.steps, compression_ratio(cfg->in_channels, cfg->latent_channels),
                           rec.ms_ssim, rec.mse_1e5});
  }
  return report;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace ldm
