#include "ldm/datapipe.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "ldm/errors.hpp"
#include "ldm/hashing.hpp"

namespace ldm {

namespace F = torch::nn::functional;

std::string to_string(Label label) {
  switch (label) {
    case Label::Negative:
      return "0";
    case Label::Positive:
      return "1";
    case Label::Unknown:
      return "unknown";
  }
  return "unknown";
}

std::optional<Label> parse_label(const std::string& text) {
  if (text == "0") return Label::Negative;
  if (text == "1") return Label::Positive;
  if (text == "unknown") return Label::Unknown;
  return std::nullopt;
}

std::size_t DatasetManifest::count(Label label) const {
  std::size_t n = 0;
  for (const auto& r : rows) {
    n += r.label == label ? 1 : 0;
  }
  return n;
}

std::filesystem::path DatasetManifest::resolve(const ManifestRow& row) const {
  std::filesystem::path p(row.path);
  return p.is_absolute() ? p : root / p;
}

namespace {

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') {
    s.pop_back();
  }
  return s;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Unbiased draw from [0, bound) by rejection.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % bound;
}

std::map<std::string, Label> read_label_csv(const std::filesystem::path& path, bool allow_unknown,
                                            std::vector<ManifestRow>* ordered) {
  std::ifstream is(path);
  if (!is) {
    throw IoError("cannot open " + path.string());
  }
  const std::string source = path.string();
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(is, line)) {
    throw ParseError(source, 1, "empty file, expected header 'path,label'");
  }
  ++lineno;
  if (strip_cr(line) != "path,label") {
    throw ParseError(source, lineno, "expected header 'path,label'");
  }
  std::map<std::string, Label> seen;
  while (std::getline(is, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) {
      continue;
    }
    const auto comma = line.rfind(',');
    if (comma == std::string::npos || comma == 0) {
      throw ParseError(source, lineno, "malformed row, expected 'path,label'");
    }
    const std::string p = line.substr(0, comma);
    const auto label = parse_label(line.substr(comma + 1));
    if (!label || (!allow_unknown && *label == Label::Unknown)) {
      throw ParseError(source, lineno, "label '" + line.substr(comma + 1) + "' is not one of 0, 1, unknown");
    }
    if (!seen.emplace(p, *label).second) {
      throw ParseError(source, lineno, "duplicate path '" + p + "'");
    }
    if (ordered != nullptr) {
      ordered->push_back({p, *label});
    }
  }
  return seen;
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw IoError("manifest not found: " + path.string());
  }
  DatasetManifest m;
  m.name = path.stem().string();
  m.root = path.parent_path();
  read_label_csv(path, true, &m.rows);
  for (const auto& row : m.rows) {
    const auto file = m.resolve(row);
    if (std::filesystem::exists(file)) {
      const auto img = read_png(file);
      m.channels = img.channels;
      m.native_size = std::max(img.width, img.height);
      break;
    }
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw IoError("cannot write manifest " + path.string());
  }
  os << "path,label\n";
  for (const auto& r : m.rows) {
    os << r.path << ',' << to_string(r.label) << '\n';
  }
}

torch::Tensor preprocess(const Image8& image, int target_size) {
  if (image.width <= 0 || image.height <= 0 || image.channels <= 0 ||
      image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw ContractError("preprocess: invalid image buffer");
  }
  if (target_size < 1) {
    throw ConfigError("target size must be positive");
  }
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(image.pixels.data()),
                              {image.height, image.width, image.channels}, torch::kUInt8);
  auto chw = hwc.permute({2, 0, 1}).to(torch::kFloat) * (2.0 / 255.0) - 1.0;
  if (image.height == target_size && image.width == target_size) {
    return chw.contiguous();
  }
  auto resized = F::interpolate(chw.unsqueeze(0), F::InterpolateFuncOptions()
                                                       .size(std::vector<int64_t>{target_size, target_size})
                                                       .mode(torch::kBilinear)
                                                       .align_corners(false));
  return resized.squeeze(0).clamp(-1.0, 1.0).contiguous();
}

torch::Tensor load_images(const DatasetManifest& m, int target_size) {
  std::vector<torch::Tensor> images;
  images.reserve(m.rows.size());
  for (const auto& row : m.rows) {
    images.push_back(preprocess(read_png(m.resolve(row)), target_size));
  }
  if (images.empty()) {
    throw ContractError("manifest " + m.name + " has no rows");
  }
  return torch::stack(images);
}

torch::Tensor labels_tensor(const DatasetManifest& m) {
  std::vector<int64_t> labels;
  labels.reserve(m.rows.size());
  for (const auto& row : m.rows) {
    if (row.label == Label::Unknown) {
      throw ContractError("manifest still contains unknown labels; relabel first");
    }
    labels.push_back(static_cast<int64_t>(row.label));
  }
  return torch::tensor(labels, torch::kLong);
}

RelabelPolicy RelabelPolicy::unknown_to(Label label) {
  if (label == Label::Unknown) {
    throw ConfigError("cannot relabel unknown to unknown");
  }
  RelabelPolicy p;
  p.kind = label == Label::Negative ? Kind::UnknownToNegative : Kind::UnknownToPositive;
  return p;
}

RelabelPolicy RelabelPolicy::from_file(const std::filesystem::path& path) {
  RelabelPolicy p;
  p.kind = Kind::Mapping;
  p.mapping = read_label_csv(path, false, nullptr);
  return p;
}

RelabelPolicy RelabelPolicy::parse(const std::string& text) {
  if (text == "identity") return identity();
  if (text == "unknown-to-0") return unknown_to(Label::Negative);
  if (text == "unknown-to-1") return unknown_to(Label::Positive);
  const std::string prefix = "mapping:";
  if (text.rfind(prefix, 0) == 0) return from_file(text.substr(prefix.size()));
  throw ConfigError("unknown relabel policy '" + text + "' (identity | unknown-to-0 | unknown-to-1 | mapping:<csv>)");
}

DatasetManifest relabel(const DatasetManifest& m, const RelabelPolicy& policy) {
  DatasetManifest out = m;
  for (auto& row : out.rows) {
    if (row.label != Label::Unknown) {
      continue;
    }
    switch (policy.kind) {
      case RelabelPolicy::Kind::Identity:
        throw ContractError("identity policy leaves unknown label for '" + row.path + "'");
      case RelabelPolicy::Kind::UnknownToNegative:
        row.label = Label::Negative;
        break;
      case RelabelPolicy::Kind::UnknownToPositive:
        row.label = Label::Positive;
        break;
      case RelabelPolicy::Kind::Mapping: {
        const auto it = policy.mapping.find(row.path);
        if (it == policy.mapping.end()) {
          throw ContractError("relabel mapping has no entry for unknown row '" + row.path + "'");
        }
        row.label = it->second;
        break;
      }
    }
  }
  return out;
}

std::string ReferenceBatch::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["n"] = items.size();
  j["per_class"] = per_class;
  j["ids_hash"] = descriptor;
  return j.dump(2) + "\n";
}

const std::map<std::string, std::size_t>& reference_presets() {
  static const std::map<std::string, std::size_t> presets{{"airogs", 6540}, {"crcdx", 19958}, {"chexpert", 15738}};
  return presets;
}

ReferenceBatch build_reference_batch(const DatasetManifest& m, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n % 2 != 0) {
    throw ContractError("reference batch size must be a positive even number");
  }
  const std::size_t half = n / 2;
  std::array<std::vector<std::size_t>, 2> pools;
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    if (m.rows[i].label != Label::Unknown) {
      pools[static_cast<std::size_t>(m.rows[i].label)].push_back(i);
    }
  }
  for (std::size_t c = 0; c < 2; ++c) {
    if (pools[c].size() < half) {
      throw ContractError("reference batch needs " + std::to_string(half) + " items of class " + std::to_string(c) +
                          " but only " + std::to_string(pools[c].size()) + " are available");
    }
  }
  ReferenceBatch batch;
  batch.seed = seed;
  batch.per_class = half;
  std::mt19937_64 rng(splitmix64(seed));
  for (auto& pool : pools) {
    // Partial Fisher-Yates: the first `half` slots become the sample.
    for (std::size_t i = 0; i < half; ++i) {
      const auto j = i + static_cast<std::size_t>(uniform_below(rng, pool.size() - i));
      std::swap(pool[i], pool[j]);
      batch.indices.push_back(pool[i]);
    }
  }
  Fnv1a h;
  for (auto idx : batch.indices) {
    batch.items.push_back(m.rows[idx]);
    h.update(m.rows[idx].path);
    h.update("\t" + to_string(m.rows[idx].label) + "\n");
  }
  batch.descriptor = h.hex();
  return batch;
}

ToyBatch gen_toy_shapes(const ToyShapesConfig& cfg, int n, int label) {
  if (n < 1) {
    throw ContractError("gen_toy_shapes needs n >= 1");
  }
  if (label != 0 && label != 1) {
    throw ContractError("toy shapes have labels 0 and 1 only");
  }
  if (cfg.image_size < 16) {
    throw ConfigError("toy image size must be >= 16");
  }
  if (cfg.texture_waves < 1 || cfg.texture_waves > 8) {
    throw ConfigError("toy texture_waves must lie in 1..8");
  }
  const int s = cfg.image_size;
  const double scale = s / 32.0;
  std::mt19937_64 rng(splitmix64(cfg.seed * 2 + static_cast<std::uint64_t>(label)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  auto images = torch::empty({n, 1, s, s}, torch::kFloat);
  auto acc = images.accessor<float, 4>();
  ToyBatch out;
  for (int k = 0; k < n; ++k) {
    const double base = uni(-0.7, -0.5);
    // Random plane waves; with several of them the background carries more
    // detail than a 4-channel latent can hold exactly.
    struct Wave {
      double amp, fx, fy, phase;
    };
    std::vector<Wave> waves;
    const double amp_scale = cfg.texture_waves == 1 ? 1.0 : 0.55;
    for (int w = 0; w < cfg.texture_waves; ++w) {
      const double lo = w == 0 ? 0.5 : 1.0, hi = w == 0 ? 2.0 : 4.0;
      const double amp = amp_scale * uni(0.05, 0.12);
      const double fx = w == 0 ? uni(lo, hi) : uni(-hi, hi);
      const double fy = uni(lo, hi);
      waves.push_back({amp, fx, fy, uni(0.0, 2.0 * std::numbers::pi)});
    }
    const double value = uni(0.5, 0.8);
    const double cx = s / 2.0 + uni(-3.0, 3.0) * scale, cy = s / 2.0 + uni(-3.0, 3.0) * scale;
    const double theta = uni(0.0, std::numbers::pi);
    const double a = (label == 0 ? uni(4.0, 6.0) : uni(9.0, 11.0)) * scale;
    const double b = a * uni(0.65, 0.9);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        double bg = base;
        for (const auto& w : waves) {
          bg += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * px + w.fy * py) / s + w.phase);
        }
        const double du = (px - cx) * ct + (py - cy) * st;
        const double dv = -(px - cx) * st + (py - cy) * ct;
        const double r = std::sqrt((du / a) * (du / a) + (dv / b) * (dv / b));
        const double mask = 1.0 / (1.0 + std::exp(-(1.0 - r) * b * 2.0));
        double v = bg + (value - bg) * mask + cfg.noise * normal(rng);
        acc[k][0][y][x] = static_cast<float>(std::clamp(v, -1.0, 1.0));
      }
    }
    char name[64];
    std::snprintf(name, sizeof(name), "toy_c%d_%06d.png", label, k);
    out.manifest.rows.push_back({name, label == 0 ? Label::Negative : Label::Positive});
  }
  out.images = images;
  out.labels = torch::full({n}, static_cast<int64_t>(label), torch::kLong);
  out.manifest.name = "toy-shapes";
  out.manifest.channels = 1;
  out.manifest.native_size = s;
  return out;
}

ToyBatch gen_toy_dataset(const ToyShapesConfig& cfg, int n_per_class) {
  auto neg = gen_toy_shapes(cfg, n_per_class, 0);
  auto pos = gen_toy_shapes(cfg, n_per_class, 1);
  ToyBatch out;
  out.images = torch::stack({neg.images, pos.images}, 1).reshape({2 * n_per_class, 1, cfg.image_size, cfg.image_size});
  out.labels = torch::stack({neg.labels, pos.labels}, 1).reshape({2 * n_per_class});
  out.manifest = neg.manifest;
  out.manifest.rows.clear();
  for (int i = 0; i < n_per_class; ++i) {
    out.manifest.rows.push_back(neg.manifest.rows[static_cast<std::size_t>(i)]);
    out.manifest.rows.push_back(pos.manifest.rows[static_cast<std::size_t>(i)]);
  }
  return out;
}

torch::Tensor foreground_area(const torch::Tensor& images, double threshold) {
  return images.gt(threshold).flatten(1).sum(1);
}

DatasetManifest write_dataset(const std::filesystem::path& dir, const torch::Tensor& images,
                              const torch::Tensor& labels, const std::string& name) {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.name = name;
  m.root = dir;
  m.channels = static_cast<int>(images.size(1));
  m.native_size = static_cast<int>(images.size(2));
  for (int64_t i = 0; i < images.size(0); ++i) {
    char file[64];
    std::snprintf(file, sizeof(file), "img_%06lld.png", static_cast<long long>(i));
    write_png(dir / file, to_image8(images[i]));
    m.rows.push_back({file, labels[i].item<int64_t>() == 0 ? Label::Negative : Label::Positive});
  }
  write_manifest(dir / "manifest.csv", m);
  return m;
}

}  // namespace ldm
