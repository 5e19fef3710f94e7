#include "ldm/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "ldm/errors.hpp"

namespace ldm {

namespace {

constexpr char kMagic[8] = {'L', 'D', 'M', 'C', 'K', 'P', 'T', '\0'};

torch::ScalarType scalar_type(Checkpoint::DType d) {
  switch (d) {
    case Checkpoint::DType::Float32:
      return torch::kFloat;
    case Checkpoint::DType::Float64:
      return torch::kDouble;
    case Checkpoint::DType::Int64:
      return torch::kLong;
    case Checkpoint::DType::UInt8:
      return torch::kUInt8;
  }
  throw IoError("unknown checkpoint dtype");
}

Checkpoint::DType dtype_of(const torch::Tensor& t) {
  switch (t.scalar_type()) {
    case torch::kFloat:
      return Checkpoint::DType::Float32;
    case torch::kDouble:
      return Checkpoint::DType::Float64;
    case torch::kLong:
      return Checkpoint::DType::Int64;
    case torch::kUInt8:
      return Checkpoint::DType::UInt8;
    default:
      throw ContractError("checkpoint arrays must be float32, float64, int64 or uint8");
  }
}

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}
  template <typename T>
  T pod() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos + n > buf.size()) {
      throw IoError("checkpoint truncated");
    }
  }
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
};

}  // namespace

void Checkpoint::put(const std::string& name, const torch::Tensor& t) {
  auto c = t.detach().cpu().contiguous();
  Array a;
  a.name = name;
  a.dtype = dtype_of(c);
  a.shape.assign(c.sizes().begin(), c.sizes().end());
  const auto* p = static_cast<const std::uint8_t*>(c.data_ptr());
  a.data.assign(p, p + c.nbytes());
  for (auto& existing : arrays_) {
    if (existing.name == name) {
      existing = std::move(a);
      return;
    }
  }
  arrays_.push_back(std::move(a));
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) return true;
  }
  return false;
}

torch::Tensor Checkpoint::get(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) {
      auto t = torch::empty(a.shape, scalar_type(a.dtype));
      if (static_cast<std::size_t>(t.nbytes()) != a.data.size()) {
        throw IoError("checkpoint array '" + name + "' has inconsistent size");
      }
      std::memcpy(t.data_ptr(), a.data.data(), a.data.size());
      return t;
    }
  }
  throw IoError("checkpoint has no array named '" + name + "'");
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod(kFormatVersion);
  const std::string json = config.dump();
  w.pod(static_cast<std::uint64_t>(json.size()));
  w.bytes(json.data(), json.size());
  w.pod(static_cast<std::uint64_t>(arrays_.size()));
  std::uint64_t offset = 0;
  for (const auto& a : arrays_) {
    w.pod(static_cast<std::uint32_t>(a.name.size()));
    w.bytes(a.name.data(), a.name.size());
    w.pod(static_cast<std::uint8_t>(a.dtype));
    w.pod(static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) {
      w.pod(static_cast<std::int64_t>(d));
    }
    w.pod(offset);
    w.pod(static_cast<std::uint64_t>(a.data.size()));
    offset += a.data.size();
  }
  for (const auto& a : arrays_) {
    w.bytes(a.data.data(), a.data.size());
  }
  return std::move(w.out);
}

Checkpoint Checkpoint::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw IoError("not a checkpoint (bad magic)");
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kFormatVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                  std::to_string(kFormatVersion) + ")");
  }
  Checkpoint ckpt;
  const auto json_len = r.pod<std::uint64_t>();
  ckpt.config = nlohmann::json::parse(r.str(json_len));
  const auto count = r.pod<std::uint64_t>();
  struct Entry {
    Array array;
    std::uint64_t offset, nbytes;
  };
  std::vector<Entry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    e.array.name = r.str(r.pod<std::uint32_t>());
    const auto dt = r.pod<std::uint8_t>();
    if (dt > static_cast<std::uint8_t>(DType::UInt8)) {
      throw IoError("checkpoint array '" + e.array.name + "' has unknown dtype");
    }
    e.array.dtype = static_cast<DType>(dt);
    const auto ndim = r.pod<std::uint32_t>();
    for (std::uint32_t d = 0; d < ndim; ++d) {
      e.array.shape.push_back(r.pod<std::int64_t>());
    }
    e.offset = r.pod<std::uint64_t>();
    e.nbytes = r.pod<std::uint64_t>();
    entries.push_back(std::move(e));
  }
  const std::size_t base = r.pos;
  for (auto& e : entries) {
    if (base + e.offset + e.nbytes > bytes.size()) {
      throw IoError("checkpoint truncated in array '" + e.array.name + "'");
    }
    e.array.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(base + e.offset),
                        bytes.begin() + static_cast<std::ptrdiff_t>(base + e.offset + e.nbytes));
    ckpt.arrays_.push_back(std::move(e.array));
  }
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

void store_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& m) {
  for (const auto& item : m.named_parameters()) {
    ckpt.put(prefix + item.key(), item.value());
  }
  for (const auto& item : m.named_buffers()) {
    ckpt.put(prefix + item.key(), item.value());
  }
}

void load_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& m) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& key, torch::Tensor target) {
    auto src = ckpt.get(prefix + key);
    if (!src.sizes().equals(target.sizes())) {
      throw IoError("checkpoint array '" + prefix + key + "' has the wrong shape");
    }
    target.copy_(src);
  };
  for (auto& item : m.named_parameters()) {
    assign(item.key(), item.value());
  }
  for (auto& item : m.named_buffers()) {
    assign(item.key(), item.value());
  }
}

void store_generator(Checkpoint& ckpt, const std::string& name, torch::Generator& gen) {
  ckpt.put(name, gen.get_state());
}

void load_generator(const Checkpoint& ckpt, const std::string& name, torch::Generator& gen) {
  gen.set_state(ckpt.get(name));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("cannot open " + path.string());
  }
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) {
    throw IoError("cannot write " + path.string());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace ldm
