#pragma once

// JSON mappings for every configuration struct. Missing keys fall back to
// the struct defaults, so partial config files are valid.

#include <json.hpp>

#include "ldm/autoencoder.hpp"
#include "ldm/datapipe.hpp"
#include "ldm/denoiser.hpp"
#include "ldm/features.hpp"
#include "ldm/harness.hpp"
#include "ldm/metrics.hpp"
#include "ldm/sampler.hpp"
#include "ldm/schedules.hpp"
#include "ldm/similarity.hpp"

namespace ldm {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ScheduleConfig, steps, beta_start, beta_end)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VAEConfig, in_channels, latent_channels, base_width, blocks_per_level,
                                                skip_connections_enabled)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(UNetConfig, latent_channels, widths, blocks_per_level, embed_dim,
                                                num_classes, attention)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SamplerConfig, steps, eta, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, l1, perceptual, ssim, adv, kl)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PRConfig, k)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SsimParams, window, sigma, k1, k2)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FeatureNetConfig, in_channels, widths, num_classes)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ClassifierTrainConfig, steps, batch_size, lr, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ToyShapesConfig, image_size, noise, texture_waves, seed)

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace ldm
