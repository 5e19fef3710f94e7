#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace ldm {

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes) noexcept;
  void update(std::string_view text) noexcept;
  void update(const torch::Tensor& t);
  std::uint64_t value() const noexcept { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

/// Hash over every named parameter and buffer (names, shapes and raw bytes).
std::string hash_module(const torch::nn::Module& m);

}  // namespace ldm
