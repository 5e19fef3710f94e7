#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

namespace ldm {

/// Versioned binary weight container.
///
/// Layout (little-endian):
///   "LDMCKPT\0" | u32 version | u64 config_len | config JSON bytes |
///   u64 array_count | directory | raw array bytes
/// Directory entry: u32 name_len | name | u8 dtype | u32 ndim | i64 dims[ndim] |
///   u64 offset (from start of the raw section) | u64 nbytes
class Checkpoint {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  enum class DType : std::uint8_t { Float32 = 0, Float64 = 1, Int64 = 2, UInt8 = 3 };

  struct Array {
    std::string name;
    DType dtype = DType::Float32;
    std::vector<int64_t> shape;
    std::vector<std::uint8_t> data;
  };

  nlohmann::json config = nlohmann::json::object();

  void put(const std::string& name, const torch::Tensor& t);
  bool has(const std::string& name) const;
  torch::Tensor get(const std::string& name) const;
  const std::vector<Array>& arrays() const noexcept { return arrays_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<Array> arrays_;
};

/// Stores every parameter and buffer of `m` under `prefix + name`.
void store_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& m);
/// Copies stored arrays back into `m`; missing names or shape mismatches throw.
void load_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& m);

void store_generator(Checkpoint& ckpt, const std::string& name, torch::Generator& gen);
void load_generator(const Checkpoint& ckpt, const std::string& name, torch::Generator& gen);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace ldm
