#include "testing.hpp"

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>

#include "ldm/datapipe.hpp"
#include "ldm/errors.hpp"
#include "ldm/png_io.hpp"
#include "test_util.hpp"

using namespace ldm;
namespace fs = std::filesystem;

namespace {

fs::path write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

DatasetManifest manifest(std::vector<std::pair<std::string, Label>> rows) {
  DatasetManifest m;
  m.name = "m";
  for (auto& [p, l] : rows) m.rows.push_back({p, l});
  return m;
}

int parse_error_line(const fs::path& p) {
  try {
    load_manifest(p);
  } catch (const ParseError& e) {
    return static_cast<int>(e.line());
  }
  return -1;
}

}  // namespace

TEST_SUITE("datapipe") {
  TEST_CASE("labels") {
    CHECK(parse_label("0") == Label::Negative);
    CHECK(parse_label("1") == Label::Positive);
    CHECK(parse_label("unknown") == Label::Unknown);
    CHECK_FALSE(parse_label("2").has_value());
    CHECK(to_string(Label::Unknown) == "unknown");
  }

  TEST_CASE("manifest parsing") {
    testutil::TempDir d;
    auto ok = write(d.path / "ok.csv", "path,label\na.png,0\nb.png,unknown\n");
    auto m = load_manifest(ok);
    CHECK(m.size() == 2);
    CHECK(m.rows[1].label == Label::Unknown);
    CHECK(m.resolve(m.rows[0]) == d.path / "a.png");
    auto crlf = write(d.path / "crlf.csv", "path,label\r\nx,1\r\ny,0\r\n");
    CHECK(load_manifest(crlf).count(Label::Positive) == 1);
    auto comma = write(d.path / "comma.csv", "path,label\ndir,with,commas.png,1\n");
    CHECK(load_manifest(comma).rows[0].path == "dir,with,commas.png");

    auto dup = write(d.path / "dup.csv", "path,label\na.png,0\nb.png,1\na.png,1\n");
    CHECK(parse_error_line(dup) == 4);
    CHECK_THROWS_WITH_AS(load_manifest(dup), doctest::Contains("duplicate"), ParseError);
    auto bad = write(d.path / "bad.csv", "path,label\na.png,2\n");
    CHECK(parse_error_line(bad) == 2);
    auto header = write(d.path / "hdr.csv", "file,label\na.png,0\n");
    CHECK(parse_error_line(header) == 1);
    auto malformed = write(d.path / "mal.csv", "path,label\nnocomma\n");
    CHECK(parse_error_line(malformed) == 2);
    CHECK_THROWS_AS(load_manifest(d.path / "missing.csv"), IoError);
  }

  TEST_CASE("manifest write/load round trip probes images") {
    testutil::TempDir d;
    auto batch = gen_toy_shapes(ToyShapesConfig{}, 3, 1);
    auto m = write_dataset(d.path, batch.images, batch.labels, "toy");
    auto back = load_manifest(d.path / "manifest.csv");
    CHECK(back.size() == 3);
    CHECK(back.channels == 1);
    CHECK(back.native_size == 32);
    auto imgs = load_images(back, 32);
    CHECK(imgs.sizes() == torch::IntArrayRef({3, 1, 32, 32}));
    // 8-bit quantization is the only loss.
    CHECK(testutil::max_abs(imgs, batch.images) <= 1.0 / 255.0 + 1e-6);
    CHECK(torch::equal(labels_tensor(back), batch.labels));
  }

  TEST_CASE("preprocess mapping and resize") {
    Image8 line{3, 1, 1, {0, 128, 255}};
    auto t = preprocess(line, 3);
    CHECK(t.size(1) == 3);
    Image8 row{1, 1, 1, {0}};
    CHECK(preprocess(row, 1).item<double>() == -1.0);
    row.pixels = {255};
    CHECK(preprocess(row, 1).item<double>() == 1.0);
    row.pixels = {128};
    CHECK(preprocess(row, 1).item<double>() == doctest::Approx(1.0 / 255.0).epsilon(1e-6));
    Image8 flat{10, 10, 3, std::vector<std::uint8_t>(300, 77)};
    auto out = preprocess(flat, 24);
    CHECK(out.sizes() == torch::IntArrayRef({3, 24, 24}));
    CHECK(testutil::max_abs(out, torch::full_like(out, 2.0 * 77 / 255.0 - 1.0)) <= 1e-6);
    Image8 gray{8, 8, 1, std::vector<std::uint8_t>(64)};
    for (int i = 0; i < 64; ++i) gray.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i * 4);
    auto g = preprocess(gray, 8);
    CHECK(g.size(0) == 1);
    // Same-size input is passed through unchanged.
    auto once = to_image8(g);
    CHECK(once.pixels == gray.pixels);
    CHECK(testutil::bitwise_equal(preprocess(once, 8), g));
    CHECK_THROWS_AS(preprocess(Image8{2, 2, 1, {1, 2, 3}}, 4), ContractError);
  }

  TEST_CASE("relabel policies") {
    auto m = manifest({{"p", Label::Positive}, {"n", Label::Negative}, {"u1", Label::Unknown}, {"u2", Label::Unknown}});
    auto to0 = relabel(m, RelabelPolicy::unknown_to(Label::Negative));
    CHECK(to0.size() == 4);
    CHECK(to0.count(Label::Positive) == 1);
    CHECK(to0.count(Label::Negative) == 3);
    auto to1 = relabel(m, RelabelPolicy::parse("unknown-to-1"));
    CHECK(to1.count(Label::Positive) == 3);
    CHECK_THROWS_AS(relabel(m, RelabelPolicy::identity()), ContractError);
    auto clean = manifest({{"a", Label::Positive}, {"b", Label::Negative}});
    auto same = relabel(clean, RelabelPolicy::parse("identity"));
    CHECK(same.rows[0].label == Label::Positive);
    CHECK(same.rows[1].label == Label::Negative);
    testutil::TempDir d;
    auto mapping = write(d.path / "map.csv", "path,label\nu1,1\n");
    auto pol = RelabelPolicy::parse("mapping:" + mapping.string());
    CHECK_THROWS_AS(relabel(m, pol), ContractError);
    write(mapping, "path,label\nu1,1\nu2,0\np,0\n");
    auto mapped = relabel(m, RelabelPolicy::from_file(mapping));
    CHECK(mapped.rows[0].label == Label::Positive);  // known labels untouched
    CHECK(mapped.rows[2].label == Label::Positive);
    CHECK(mapped.rows[3].label == Label::Negative);
    CHECK_THROWS_AS(RelabelPolicy::parse("nonsense"), ConfigError);
    CHECK_THROWS_AS(RelabelPolicy::unknown_to(Label::Unknown), ConfigError);
    CHECK_THROWS_AS(labels_tensor(m), ContractError);

    testutil::Gen g(3);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::pair<std::string, Label>> rows;
      const int n = g.integer(1, 40);
      for (int i = 0; i < n; ++i) rows.push_back({"r" + std::to_string(i), static_cast<Label>(g.integer(-1, 1))});
      auto src = manifest(rows);
      auto out = relabel(src, RelabelPolicy::unknown_to(g.integer(0, 1) ? Label::Positive : Label::Negative));
      REQUIRE(out.size() == src.size());
      REQUIRE(out.count(Label::Unknown) == 0);
      for (std::size_t i = 0; i < src.size(); ++i) {
        if (src.rows[i].label != Label::Unknown) REQUIRE(out.rows[i].label == src.rows[i].label);
      }
    }
  }

  TEST_CASE("reference batches") {
    auto four = manifest({{"a", Label::Positive}, {"b", Label::Positive}, {"c", Label::Negative}, {"d", Label::Negative}});
    auto rb = build_reference_batch(four, 4, 1);
    CHECK(rb.per_class == 2);
    std::set<std::string> items;
    for (auto& r : rb.items) items.insert(r.path);
    CHECK(items.size() == 4);
    std::vector<std::pair<std::string, Label>> rows{{"p0", Label::Positive}, {"p1", Label::Positive}};
    for (int i = 0; i < 10; ++i) rows.push_back({"n" + std::to_string(i), Label::Negative});
    CHECK_THROWS_WITH_AS(build_reference_batch(manifest(rows), 6, 0), doctest::Contains("only 2"), ContractError);
    CHECK_THROWS_AS(build_reference_batch(four, 3, 0), ContractError);
    CHECK(reference_presets().at("airogs") == 6540);
    CHECK(reference_presets().at("crcdx") == 19958);
    CHECK(reference_presets().at("chexpert") == 15738);

    testutil::Gen g(4);
    std::vector<std::pair<std::string, Label>> big;
    for (int i = 0; i < 200; ++i) big.push_back({"x" + std::to_string(i), static_cast<Label>(g.integer(-1, 1))});
    auto bm = manifest(big);
    const auto pos = static_cast<int>(bm.count(Label::Positive)), neg = static_cast<int>(bm.count(Label::Negative));
    for (int trial = 0; trial < 100; ++trial) {
      const auto n = static_cast<std::size_t>(2 * g.integer(1, std::min(pos, neg)));
      const auto seed = static_cast<std::uint64_t>(g.integer(0, 1 << 30));
      auto a = build_reference_batch(bm, n, seed);
      auto b = build_reference_batch(bm, n, seed);
      REQUIRE(a.descriptor == b.descriptor);
      REQUIRE(a.indices == b.indices);
      std::size_t p = 0;
      std::set<std::size_t> uniq(a.indices.begin(), a.indices.end());
      REQUIRE(uniq.size() == n);
      for (auto& r : a.items) p += r.label == Label::Positive;
      REQUIRE(p == n / 2);
      auto c = build_reference_batch(bm, n, seed + 1);
      REQUIRE((c.descriptor == a.descriptor) == (c.indices == a.indices));
    }
    auto j = nlohmann::json::parse(rb.to_json());
    CHECK(j["n"] == 4);
    CHECK(j["per_class"] == 2);
    CHECK(j["ids_hash"] == rb.descriptor);
  }

  TEST_CASE("toy shapes") {
    ToyShapesConfig cfg;
    cfg.seed = 5;
    auto a = gen_toy_shapes(cfg, 8, 1);
    auto b = gen_toy_shapes(cfg, 8, 1);
    CHECK(testutil::bitwise_equal(a.images, b.images));
    CHECK(a.images.sizes() == torch::IntArrayRef({8, 1, 32, 32}));
    CHECK(a.images.min().item<double>() >= -1.0);
    CHECK(a.images.max().item<double>() <= 1.0);
    CHECK((a.labels == 1).all().item<bool>());
    CHECK(a.manifest.size() == 8);
    auto c0 = gen_toy_shapes(cfg, 1000, 0);
    auto c1 = gen_toy_shapes(cfg, 1000, 1);
    auto area0 = foreground_area(c0.images).to(torch::kDouble);
    auto area1 = foreground_area(c1.images).to(torch::kDouble);
    CHECK(area1.mean().item<double>() > area0.mean().item<double>());
    // A single area threshold separates the classes.
    const double thr = 0.5 * (area0.mean().item<double>() + area1.mean().item<double>());
    const double acc = ((area0 < thr).sum().item<double>() + (area1 >= thr).sum().item<double>()) / 2000.0;
    CHECK(acc >= 0.99);
    auto ds = gen_toy_dataset(cfg, 5);
    CHECK(ds.images.size(0) == 10);
    CHECK(ds.labels.sum().item<int64_t>() == 5);
    CHECK_THROWS_AS(gen_toy_shapes(cfg, 0, 0), ContractError);
    CHECK_THROWS_AS(gen_toy_shapes(cfg, 1, 2), ContractError);
  }

  TEST_CASE("png io") {
    testutil::TempDir d;
    Image8 rgb{4, 3, 3, std::vector<std::uint8_t>(36)};
    for (std::size_t i = 0; i < 36; ++i) rgb.pixels[i] = static_cast<std::uint8_t>(i * 7);
    write_png(d.path / "rgb.png", rgb);
    auto back = read_png(d.path / "rgb.png");
    CHECK(back.width == 4);
    CHECK(back.height == 3);
    CHECK(back.channels == 3);
    CHECK(back.pixels == rgb.pixels);
    auto img8 = to_image8(torch::tensor({-1.0, 0.0, 1.0}).view({1, 1, 3}));
    CHECK(img8.pixels == std::vector<std::uint8_t>{0, 128, 255});
    write(d.path / "junk.png", "not a png");
    CHECK_THROWS_AS(read_png(d.path / "junk.png"), IoError);
    CHECK_THROWS_AS(read_png(d.path / "absent.png"), IoError);
  }
}
