#include "ldm/hashing.hpp"

#include <cstdio>

namespace ldm {

void Fnv1a::update(std::span<const std::byte> bytes) noexcept {
  for (auto b : bytes) {
    state_ ^= static_cast<std::uint8_t>(b);
    state_ *= 0x100000001b3ULL;
  }
}

void Fnv1a::update(std::string_view text) noexcept { update(std::as_bytes(std::span(text.data(), text.size()))); }

void Fnv1a::update(const torch::Tensor& t) {
  auto c = t.detach().contiguous().cpu();
  for (auto d : c.sizes()) {
    update(std::to_string(d) + ",");
  }
  update(std::span(static_cast<const std::byte*>(c.data_ptr()), c.nbytes()));
}

std::string Fnv1a::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
  return buf;
}

std::string hash_module(const torch::nn::Module& m) {
  Fnv1a h;
  for (const auto& item : m.named_parameters()) {
    h.update(item.key());
    h.update(item.value());
  }
  for (const auto& item : m.named_buffers()) {
    h.update(item.key());
    h.update(item.value());
  }
  return h.hex();
}

}  // namespace ldm
