#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ldm/png_io.hpp"

namespace ldm {

enum class Label : int { Negative = 0, Positive = 1, Unknown = -1 };

std::string to_string(Label label);
std::optional<Label> parse_label(const std::string& text);

struct ManifestRow {
  std::string path;  // as written in the manifest
  Label label = Label::Unknown;
};

struct DatasetManifest {
  std::string name;
  std::filesystem::path root;  // directory relative paths are resolved against
  int channels = 0;            // 0 when not probed
  int native_size = 0;
  std::vector<ManifestRow> rows;

  std::size_t size() const noexcept { return rows.size(); }
  std::size_t count(Label label) const;
  std::filesystem::path resolve(const ManifestRow& row) const;
};

/// Reads a `path,label` CSV. Labels are 0, 1 or `unknown`. The first
/// existing image is probed for channel count and size.
DatasetManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);

/// Bilinear resize to target x target, then x -> 2x/255 - 1. Returns [C, H, W].
torch::Tensor preprocess(const Image8& image, int target_size);

/// Loads and preprocesses every manifest row, [N, C, S, S].
torch::Tensor load_images(const DatasetManifest& m, int target_size);
torch::Tensor labels_tensor(const DatasetManifest& m);

struct RelabelPolicy {
  enum class Kind { Identity, UnknownToNegative, UnknownToPositive, Mapping };
  Kind kind = Kind::Identity;
  std::map<std::string, Label> mapping;  // path -> label, Mapping only

  static RelabelPolicy identity() { return {}; }
  static RelabelPolicy unknown_to(Label label);
  /// CSV `path,label` listing the replacement label for unknown rows.
  static RelabelPolicy from_file(const std::filesystem::path& path);
  static RelabelPolicy parse(const std::string& text);
};

/// Resolves unknown labels; known labels are never changed.
DatasetManifest relabel(const DatasetManifest& m, const RelabelPolicy& policy);

struct ReferenceBatch {
  std::vector<std::size_t> indices;  // rows of the source manifest
  std::vector<ManifestRow> items;
  std::size_t per_class = 0;
  std::uint64_t seed = 0;
  std::string descriptor;  // hash of the ordered item list

  std::string to_json() const;
};

/// Reference-batch sizes of the three datasets in the original study.
const std::map<std::string, std::size_t>& reference_presets();

/// Seeded sampling without replacement of n / 2 items per class.
ReferenceBatch build_reference_batch(const DatasetManifest& m, std::size_t n, std::uint64_t seed);

struct ToyShapesConfig {
  int image_size = 32;
  double noise = 0.02;  // per-pixel Gaussian noise std in [-1, 1] units
  int texture_waves = 6;  // plane waves summed into the background
  std::uint64_t seed = 0;
};

struct ToyBatch {
  torch::Tensor images;  // [n, 1, S, S] in [-1, 1]
  torch::Tensor labels;  // [n] int64
  DatasetManifest manifest;
};

/// Class 0: small ellipse, class 1: large ellipse; both over a smooth
/// sinusoidal background texture. Deterministic in (cfg, n, label).
ToyBatch gen_toy_shapes(const ToyShapesConfig& cfg, int n, int label);

/// Balanced set with n_per_class images of each class, classes interleaved.
ToyBatch gen_toy_dataset(const ToyShapesConfig& cfg, int n_per_class);

/// Count of pixels above `threshold`, per image; [N] tensor.
torch::Tensor foreground_area(const torch::Tensor& images, double threshold = 0.0);

/// Writes every image as `<prefix><index>.png` plus manifest.csv in `dir`.
DatasetManifest write_dataset(const std::filesystem::path& dir, const torch::Tensor& images,
                              const torch::Tensor& labels, const std::string& name);

}  // namespace ldm
