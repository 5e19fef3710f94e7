#include "testing.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ldm/checkpoint.hpp"
#include "ldm/cli.hpp"
#include "ldm/config_io.hpp"
#include "ldm/errors.hpp"
#include "ldm/run_config.hpp"
#include "test_util.hpp"

using namespace ldm;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Result r;
  r.code = run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<fs::path> pngs(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// A tiny dataset and pipeline produced through the CLI itself.
struct Pipeline {
  testutil::TempDir dir;
  fs::path data, vae, ldm;
};

const Pipeline& pipeline() {
  static Pipeline x;
  static const bool built = [] {
    const auto d = x.dir.path;
    REQUIRE(cli({"gen-toy", "--n-per-class", "8", "--seed", "1", "--run-dir", (d / "toy").string()}).code == 0);
    x.data = d / "toy" / "data";
    REQUIRE(cli({"train-vae", "--data", x.data.string(), "--train-steps", "5", "--base-width", "8", "--set",
                 "train.weights.perceptual=0", "--run-dir", (d / "vae").string()})
                .code == 0);
    x.vae = d / "vae" / "vae.ckpt";
    REQUIRE(cli({"train-diffusion", "--data", x.data.string(), "--vae-checkpoint", x.vae.string(), "--train-steps",
                 "5", "--set", "unet.widths=[16, 32]", "--set", "unet.embed_dim=32", "--run-dir",
                 (d / "ldm").string()})
                .code == 0);
    x.ldm = d / "ldm" / "ldm.ckpt";
    return true;
  }();
  REQUIRE(built);
  return x;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 2 with usage text") {
    auto r = cli({});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("Usage") != std::string::npos);

    r = cli({"frobnicate"});
    CHECK(r.code == kExitUsage);

    testutil::TempDir d;
    r = cli({"sample", "--no-such-flag", "--run-dir", (d.path / "x").string()});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("Usage") != std::string::npos);

    r = cli({"sample", "--checkpoint", (d.path / "missing.ckpt").string(), "--run-dir", (d.path / "y").string()});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("missing.ckpt") != std::string::npos);

    r = cli({"gen-toy", "--config", (d.path / "absent.toml").string(), "--run-dir", (d.path / "z").string()});
    CHECK(r.code == kExitUsage);

    r = cli({"sample", "--steps", "0", "--run-dir", (d.path / "w").string()});
    CHECK(r.code == kExitUsage);

    r = cli({"sample", "--steps", "50,100", "--run-dir", (d.path / "v").string()});
    CHECK(r.code == kExitUsage);

    CHECK(cli({"--help"}).code == kExitOk);
  }

  TEST_CASE("runtime failures exit 1 with a diagnostic") {
    testutil::TempDir d;
    const auto junk = d.path / "junk.ckpt";
    std::ofstream(junk) << "not a checkpoint";
    const auto r = cli({"sample", "--checkpoint", junk.string(), "--run-dir", (d.path / "run").string()});
    CHECK(r.code == kExitFailure);
    CHECK(r.err.find("error:") == 0);
    const auto meta = nlohmann::json::parse(slurp(d.path / "run" / "run.json"));
    CHECK(meta.at("status").get<std::string>().rfind("failed", 0) == 0);
  }

  TEST_CASE("config precedence: defaults, then TOML, then flags") {
    testutil::TempDir d;
    const auto cfg = d.path / "cfg.toml";
    std::ofstream(cfg) << "seed = 3\nn_per_class = 2\n[sampler]\nsteps = 20\neta = 0.5\n[toy]\nnoise = 0.05\n";
    const auto run_dir = d.path / "run";
    REQUIRE(cli({"gen-toy", "--config", cfg.string(), "--seed", "5", "--eta", "0.25", "--run-dir", run_dir.string()})
                .code == 0);
    const auto c = load_run_config(run_dir / "run_config.toml");
    CHECK(c.command == "gen-toy");
    CHECK(c.seed == 5);
    CHECK(c.n_per_class == 2);
    CHECK(c.sampler.steps == 20);
    CHECK(c.sampler.eta == 0.25);
    CHECK(c.toy.noise == 0.05);
    CHECK(c.toy.seed == 5);
    CHECK(c.sampler.seed == 5);
    CHECK(c.train.seed == 5);
    CHECK(c.schedule.steps == 1000);
    CHECK(pngs(run_dir / "data").size() == 4);
  }

  TEST_CASE("explicit module seeds survive the master seed") {
    testutil::TempDir d;
    REQUIRE(cli({"gen-toy", "--n-per-class", "1", "--seed", "2", "--set", "sampler.seed=9", "--run-dir",
                 (d.path / "r").string()})
                .code == 0);
    const auto c = load_run_config(d.path / "r" / "run_config.toml");
    CHECK(c.sampler.seed == 9);
    CHECK(c.toy.seed == 2);
  }

  TEST_CASE("--set parses TOML values and falls back to strings") {
    testutil::TempDir d;
    REQUIRE(cli({"gen-toy", "--n-per-class", "1", "--set", "unet.attention=true", "--set", "unet.widths=[8, 16]",
                 "--set", "relabel=unknown=0", "--set", "train.lr=3e-4", "--run-dir", (d.path / "r").string()})
                .code == 0);
    const auto c = load_run_config(d.path / "r" / "run_config.toml");
    CHECK(c.unet.attention);
    CHECK(c.unet.widths == std::vector<int>{8, 16});
    CHECK(c.relabel == "unknown=0");
    CHECK(c.train.lr == 3e-4);
    CHECK(cli({"gen-toy", "--set", "novalue", "--run-dir", (d.path / "q").string()}).code == kExitUsage);
  }

  TEST_CASE("run config survives a TOML round trip") {
    auto c = RunConfig::defaults_for("train-diffusion");
    c.seed = 12345678901ULL;
    c.data = "a b/c,d.csv";
    c.sweep_steps = {50, 150};
    c.unet.attention = true;
    c.train.weights.kl = 1e-6;
    c.ssim.sigma = 1.5;
    c.resolve_seeds();
    const auto text = run_config_to_toml(c);
    const auto back = toml_to_json(text, "mem").get<RunConfig>();
    CHECK(nlohmann::json(back) == nlohmann::json(c));
    CHECK(back.train.phase == 2);
    CHECK(back.train.lr == 2e-4);
    CHECK(run_config_to_toml(back) == text);
  }

  TEST_CASE("TOML parse errors carry the line") {
    try {
      toml_to_json("seed = 1\n[sampler\n", "bad.toml");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
      CHECK(std::string(e.what()).find("bad.toml:2") == 0);
    }
  }

  TEST_CASE("default output root and timestamped run directories") {
    testutil::TempDir d;
    ::setenv("LDM_OUTPUT_ROOT", d.path.c_str(), 1);
    const auto a = cli({"gen-toy", "--n-per-class", "1"});
    const auto b = cli({"gen-toy", "--n-per-class", "1"});
    ::unsetenv("LDM_OUTPUT_ROOT");
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(d.path)) names.push_back(e.path().filename().string());
    REQUIRE(names.size() == 2);
    for (const auto& n : names) {
      CHECK(n.rfind("gen-toy-", 0) == 0);
      CHECK(n.size() >= std::string("gen-toy-20260101T000000Z").size());
    }
  }

  TEST_CASE("run metadata echoes the config") {
    testutil::TempDir d;
    const auto run_dir = d.path / "r";
    REQUIRE(cli({"gen-toy", "--n-per-class", "1", "--seed", "4", "--run-dir", run_dir.string()}).code == 0);
    const auto meta = nlohmann::json::parse(slurp(run_dir / "run.json"));
    CHECK(meta.at("status") == "ok");
    CHECK(meta.at("command") == "gen-toy");
    CHECK(meta.at("config") == nlohmann::json(load_run_config(run_dir / "run_config.toml")));
    CHECK_FALSE(meta.at("started_at").get<std::string>().empty());
    CHECK(meta.at("outputs").size() == 1);
  }

  TEST_CASE("gen-toy rerun from its config is byte-identical") {
    testutil::TempDir d;
    REQUIRE(cli({"gen-toy", "--n-per-class", "3", "--seed", "8", "--run-dir", (d.path / "a").string()}).code == 0);
    REQUIRE(cli({"gen-toy", "--config", (d.path / "a" / "run_config.toml").string(), "--run-dir",
                 (d.path / "b").string()})
                .code == 0);
    const auto pa = pngs(d.path / "a" / "data");
    const auto pb = pngs(d.path / "b" / "data");
    REQUIRE(pa.size() == 6);
    REQUIRE(pb.size() == 6);
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(slurp(pa[i]) == slurp(pb[i]));
    CHECK(slurp(d.path / "a" / "data" / "manifest.csv") == slurp(d.path / "b" / "data" / "manifest.csv"));
  }

  TEST_CASE("training commands write checkpoints and loss logs") {
    const auto& p = pipeline();
    const auto base = p.dir.path;
    CHECK(fs::exists(p.vae));
    CHECK(lines(slurp(base / "vae" / "loss.csv")) == 6);
    CHECK(lines(slurp(base / "ldm" / "loss.csv")) == 6);
    const auto meta = nlohmann::json::parse(slurp(base / "ldm" / "run.json"));
    CHECK(meta.at("vae_hash_before") == meta.at("vae_hash_after"));
    CHECK(Checkpoint::load(p.ldm).config.at("kind") == "latent-diffusion");
  }

  TEST_CASE("sample: four PNGs, rerun byte-identical") {
    const auto& p = pipeline();
    testutil::TempDir d;
    const std::vector<std::string> args{"sample", "--checkpoint", p.ldm.string(), "--label", "1", "--n", "4",
                                        "--steps", "150", "--seed", "7"};
    auto a = args;
    a.insert(a.end(), {"--run-dir", (d.path / "a").string()});
    auto b = args;
    b.insert(b.end(), {"--run-dir", (d.path / "b").string()});
    REQUIRE(cli(a).code == 0);
    REQUIRE(cli(b).code == 0);
    REQUIRE(cli({"sample", "--config", (d.path / "a" / "run_config.toml").string(), "--run-dir",
                 (d.path / "c").string()})
                .code == 0);
    const auto pa = pngs(d.path / "a" / "samples");
    const auto pb = pngs(d.path / "b" / "samples");
    const auto pc = pngs(d.path / "c" / "samples");
    REQUIRE(pa.size() == 4);
    REQUIRE(pb.size() == 4);
    REQUIRE(pc.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(slurp(pa[i]) == slurp(pb[i]));
      CHECK(slurp(pa[i]) == slurp(pc[i]));
    }
    REQUIRE(cli({"sample", "--checkpoint", p.ldm.string(), "--label", "1", "--n", "4", "--steps", "150", "--seed",
                 "8", "--run-dir", (d.path / "e").string()})
                .code == 0);
    CHECK(slurp(pa[0]) != slurp(pngs(d.path / "e" / "samples")[0]));
    CHECK(cli({"sample", "--checkpoint", p.ldm.string(), "--label", "2", "--run-dir", (d.path / "f").string()})
              .code == kExitUsage);
  }

  TEST_CASE("evaluate with generated = real: FID 0, precision = recall = 1") {
    const auto& p = pipeline();
    testutil::TempDir d;
    REQUIRE(cli({"evaluate", "--gen-dir", p.data.string(), "--real-dir", p.data.string(), "--set",
                 "classifier.steps=5", "--run-dir", (d.path / "e").string()})
                .code == 0);
    const auto j = nlohmann::json::parse(slurp(d.path / "e" / "metrics.json"));
    CHECK(j.at("fid").get<double>() < 1e-6);
    CHECK(j.at("precision").get<double>() == 1.0);
    CHECK(j.at("recall").get<double>() == 1.0);
    CHECK(lines(slurp(d.path / "e" / "metrics.csv")) == 2);

    // Plain image directories without a manifest.
    const auto plain = d.path / "plain";
    fs::create_directories(plain);
    for (const auto& f : pngs(p.data)) fs::copy_file(f, plain / f.filename());
    REQUIRE(cli({"evaluate", "--gen-dir", plain.string(), "--real-dir", plain.string(), "--run-dir",
                 (d.path / "p").string()})
                .code == 0);
    const auto k = nlohmann::json::parse(slurp(d.path / "p" / "metrics.json"));
    CHECK(k.at("fid").get<double>() < 1e-6);
    CHECK(k.at("precision").get<double>() == 1.0);
    CHECK(k.at("recall").get<double>() == 1.0);

    REQUIRE(cli({"evaluate", "--gen-dir", p.data.string(), "--real-dir", p.data.string(), "--extractor",
                 (d.path / "e" / "extractor.ckpt").string(), "--run-dir", (d.path / "x").string()})
                .code == 0);
    CHECK(slurp(d.path / "x" / "metrics.csv") == slurp(d.path / "e" / "metrics.csv"));
  }

  TEST_CASE("recon-eval writes per-image rows and reruns identically") {
    const auto& p = pipeline();
    testutil::TempDir d;
    REQUIRE(cli({"recon-eval", "--checkpoint", p.vae.string(), "--data", p.data.string(), "--run-dir",
                 (d.path / "a").string()})
                .code == 0);
    REQUIRE(cli({"recon-eval", "--config", (d.path / "a" / "run_config.toml").string(), "--run-dir",
                 (d.path / "b").string()})
                .code == 0);
    const auto csv = slurp(d.path / "a" / "recon.csv");
    CHECK(lines(csv) == 17);
    CHECK(csv == slurp(d.path / "b" / "recon.csv"));
    CHECK(slurp(d.path / "a" / "recon.json") == slurp(d.path / "b" / "recon.json"));
    const auto j = nlohmann::json::parse(slurp(d.path / "a" / "recon.json"));
    CHECK(j.at("count") == 16);
    CHECK(j.at("scales") == 2);
  }

  TEST_CASE("steps-sweep: five rows per seed, CSV and SVG") {
    const auto& p = pipeline();
    testutil::TempDir d;
    REQUIRE(cli({"steps-sweep", "--checkpoint", p.ldm.string(), "--data", p.data.string(), "--steps",
                 "50,100,150,200,250", "--seeds", "0,1", "--ref-n", "8", "--set", "classifier.steps=5", "--run-dir",
                 (d.path / "a").string()})
                .code == 0);
    const auto csv = slurp(d.path / "a" / "sweep.csv");
    CHECK(csv.rfind("setting,seed,fid,precision,recall\n", 0) == 0);
    CHECK(lines(csv) == 11);
    CHECK(slurp(d.path / "a" / "sweep.svg").find("<svg") != std::string::npos);
    REQUIRE(cli({"steps-sweep", "--config", (d.path / "a" / "run_config.toml").string(), "--run-dir",
                 (d.path / "b").string()})
                .code == 0);
    CHECK(slurp(d.path / "b" / "sweep.csv") == csv);
  }

  TEST_CASE("channel-study: two rows at one budget") {
    const auto& p = pipeline();
    testutil::TempDir d;
    REQUIRE(cli({"channel-study", "--data", p.data.string(), "--train-steps", "2", "--base-width", "8", "--set",
                 "train.weights.perceptual=0", "--run-dir", (d.path / "a").string()})
                .code == 0);
    const auto csv = slurp(d.path / "a" / "channel_study.csv");
    CHECK(lines(csv) == 3);
    CHECK(csv.find("\n4,2,16,") != std::string::npos);
    CHECK(csv.find("\n8,2,8,") != std::string::npos);
  }

  TEST_CASE("train-diffusion needs known labels") {
    const auto& p = pipeline();
    testutil::TempDir d;
    const auto plain = d.path / "plain";
    fs::create_directories(plain);
    for (const auto& f : pngs(p.data)) fs::copy_file(f, plain / f.filename());
    const auto r = cli({"train-diffusion", "--data", plain.string(), "--vae-checkpoint", p.vae.string(),
                        "--train-steps", "1", "--run-dir", (d.path / "r").string()});
    CHECK(r.code == kExitFailure);
    CHECK(r.err.find("relabel") != std::string::npos);
  }
}
