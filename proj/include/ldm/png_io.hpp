#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ldm {

/// Interleaved 8-bit pixels, row-major, `channels` of 1 (gray) or 3 (RGB).
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

/// Decodes any PNG; alpha is dropped, gray stays single-channel.
Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

/// [C, H, W] tensor in [-1, 1] -> 8-bit via round((x + 1) / 2 * 255).
Image8 to_image8(const torch::Tensor& image);

}  // namespace ldm
