#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ldm/autoencoder.hpp"
#include "ldm/datapipe.hpp"
#include "ldm/denoiser.hpp"
#include "ldm/features.hpp"
#include "ldm/harness.hpp"
#include "ldm/metrics.hpp"
#include "ldm/sampler.hpp"
#include "ldm/schedules.hpp"

namespace ldm {

/// Everything one CLI invocation needs. Serialized as TOML into every run
/// directory; feeding that file back through --config reproduces the run.
struct RunConfig {
  std::string command;
  /// Master seed; module seeds are derived from it by resolve_seeds().
  std::uint64_t seed = 0;

  // Inputs. Relative paths resolve against the working directory.
  std::string data;            // manifest CSV
  std::string eval_data;       // optional held-out manifest (channel-study)
  std::string checkpoint;      // vae.ckpt or ldm.ckpt depending on command
  std::string vae_checkpoint;  // train-diffusion input
  std::string extractor;       // extractor.ckpt; trained on the fly when empty
  std::string gen_dir;         // evaluate: generated images
  std::string real_dir;        // evaluate: reference images
  std::string relabel = "identity";
  int image_size = 32;

  // gen-toy
  ToyShapesConfig toy;
  int n_per_class = 1000;

  // Models and training.
  VAEConfig vae;
  UNetConfig unet;
  ScheduleConfig schedule;
  SamplerConfig sampler;
  TrainConfig train;
  FeatureNetConfig features;
  ClassifierTrainConfig classifier;
  SsimParams ssim;
  PRConfig pr;

  // sample
  int label = 0;
  int n = 4;

  // Evaluation.
  int ref_n = 0;  // reference batch size; 0 uses the largest balanced batch
  std::vector<int> sweep_steps{50, 100, 150, 200, 250};
  std::vector<std::uint64_t> sweep_seeds{0, 1, 2};
  int batch = 256;

  /// Defaults for a command (phase-2 optimizer defaults for train-diffusion).
  static RunConfig defaults_for(const std::string& command);

  /// Copies the master seed into every module seed.
  void resolve_seeds();
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// TOML text <-> JSON document. Integers, floats, booleans, strings, arrays
/// and tables are supported; `source` names the input in parse errors.
nlohmann::json toml_to_json(const std::string& text, const std::string& source);
std::string json_to_toml(const nlohmann::json& doc);

RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_to_toml(const RunConfig& c);

}  // namespace ldm
