#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "dart/cli.hpp"
#include "dart/config.hpp"
#include "dart/data.hpp"

using namespace dart;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dart_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

ImageBuffer test_image(std::size_t w, std::size_t h, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  return synthetic_scene(w, h, c, rng);
}

const char* kTinyConfig = R"(# small enough for a unit test
model.embed_dim = 8
model.heads = 2
model.window = 4
model.blocks_per_stage = 1
cbam.reduction = 2
longir.window = 3
longir.dilation = 1
train.iters = 3
train.log_every = 1
train.warmup = 1
train.milestones =
data.patch = 8
data.image_size = 16
data.train_images = 2
data.stride = 4
data.eval_images = 2
data.eval_size = 8
)";

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("every key has a documented default and the canonical text round-trips") {
    const auto& keys = config_keys();
    CHECK(keys.size() >= 30);
    for (const auto& k : keys) {
      CHECK_FALSE(k.doc.empty());
      CHECK(k.name.find('.') != std::string::npos);
    }
    const RunConfig defaults;
    CHECK(parse_run_config(to_config_text(defaults)).model == defaults.model);
    CHECK(to_config_text(parse_run_config(to_config_text(defaults))) == to_config_text(defaults));

    RunConfig edited = parse_run_config(kTinyConfig);
    edited.train.schedule.milestones = {5, 9};
    edited.data.sigma = 12.5;
    edited.train.loss = LossKind::Charbonnier;
    edited.train.optim.mode = OptimMode::AdamW;
    CHECK(to_config_text(parse_run_config(to_config_text(edited))) == to_config_text(edited));
  }

  TEST_CASE("parsing is order-independent") {
    auto ls = lines(kTinyConfig);
    const std::string canonical = to_config_text(parse_run_config(kTinyConfig));
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
      for (std::size_t i = ls.size(); i > 1; --i) std::swap(ls[i - 1], ls[rng.below(i)]);
      std::string text;
      for (const auto& l : ls) text += l + "\n";
      CHECK(to_config_text(parse_run_config(text)) == canonical);
    }
  }

  TEST_CASE("config errors name the line") {
    auto message = [](const std::string& text) {
      try {
        parse_run_config(text);
      } catch (const ConfigError& e) {
        return std::string(e.what());
      }
      return std::string("no error");
    };
    CHECK(message("model.embed_dim = 16\nmodel.bogus = 1\n").find("line 2") != std::string::npos);
    CHECK(message("model.bogus = 1\n").find("unknown key 'model.bogus'") != std::string::npos);
    CHECK(message("train.iters = 5\ntrain.iters = 6\n").find("already set on line 1") != std::string::npos);
    CHECK(message("train.iters 5\n").find("expected 'key = value'") != std::string::npos);
    CHECK(message("train.iters = -5\n").find("line 1") != std::string::npos);
    CHECK(message("model.use_cbam = yes\n").find("true or false") != std::string::npos);
    CHECK(message("model.task = sr5\n") != "no error");
    CHECK(message("# only a comment\n\n   \n") == "no error");
  }

  TEST_CASE("usage errors exit 2") {
    CHECK(cli({}).code == kExitUsage);
    CHECK(cli({"frobnicate"}).code == kExitUsage);
    CHECK(cli({"bench", "--bogus", "1"}).code == kExitUsage);
    CHECK(cli({"bench", "--mode", "sideways"}).code == kExitUsage);
    CHECK(cli({"degrade", "--in", "a.pgm"}).code == kExitUsage);
    CHECK(cli({"degrade", "--in", "a.pgm", "--out", "b.pgm"}).code == kExitUsage);
    CHECK(cli({"degrade", "--in", "a.pgm", "--out", "b.pgm", "--sigma", "5", "--scale", "2"}).code == kExitUsage);
    const Run r = cli({"frobnicate"});
    CHECK(r.err.find("Usage") != std::string::npos);

    TempDir dir("usage");
    spit(dir / "bad.cfg", "model.embed_dim = 16\ntrain.colour = blue\n");
    const Run bad = cli({"train", "--config", dir / "bad.cfg", "--out", dir / "m.ckpt"});
    CHECK(bad.code == kExitUsage);
    CHECK(bad.err.find("unknown key 'train.colour'") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "m.ckpt"));
    CHECK(cli({"--help"}).code == kExitOk);
  }

  TEST_CASE("runtime errors exit 1 with the module's message") {
    TempDir dir("runtime");
    const Run missing = cli({"degrade", "--in", dir / "nope.pgm", "--out", dir / "o.pgm", "--sigma", "1"});
    CHECK(missing.code == kExitRuntime);
    CHECK_FALSE(missing.err.empty());
    spit(dir / "bad.pgm", "P7\n1 1\n255\n\x01");
    const Run format = cli({"degrade", "--in", dir / "bad.pgm", "--out", dir / "o.pgm", "--sigma", "1"});
    CHECK(format.code == kExitRuntime);
    spit(dir / "junk.ckpt", "not a checkpoint");
    write_pnm(dir / "a.pgm", test_image(8, 8, 1, 0));
    const Run ckpt = cli({"eval", "--ckpt", dir / "junk.ckpt", "--clean", dir / "a.pgm", "--degraded", dir / "a.pgm"});
    CHECK(ckpt.code == kExitRuntime);
    CHECK(ckpt.err.find("magic") != std::string::npos);
    spit(dir / "invalid.cfg", "model.embed_dim = 30\nmodel.heads = 4\n");
    CHECK(cli({"train", "--config", dir / "invalid.cfg", "--out", dir / "m.ckpt"}).code == kExitRuntime);
  }

  TEST_CASE("degrade with sigma 0 copies the image payload") {
    TempDir dir("sigma0");
    for (std::size_t c : {1u, 3u}) {
      const ImageBuffer img = test_image(13, 9, c, c);
      write_pnm(dir / "in.pnm", img);
      const Run r = cli({"degrade", "--in", dir / "in.pnm", "--out", dir / "out.pnm", "--sigma", "0", "--seed", "4"});
      REQUIRE(r.code == kExitOk);
      CHECK(read_pnm(dir / "out.pnm") == img);
      CHECK(slurp(dir / "out.pnm") == slurp(dir / "in.pnm"));
    }
  }

  TEST_CASE("degrade is deterministic in the seed and matches the library") {
    TempDir dir("noise");
    const ImageBuffer img = test_image(16, 12, 3, 9);
    write_pnm(dir / "in.ppm", img);
    REQUIRE(cli({"degrade", "--in", dir / "in.ppm", "--out", dir / "a.ppm", "--sigma", "25", "--seed", "7"}).code == 0);
    REQUIRE(cli({"degrade", "--in", dir / "in.ppm", "--out", dir / "b.ppm", "--sigma", "25", "--seed", "7"}).code == 0);
    REQUIRE(cli({"degrade", "--in", dir / "in.ppm", "--out", dir / "c.ppm", "--sigma", "25", "--seed", "8"}).code == 0);
    CHECK(slurp(dir / "a.ppm") == slurp(dir / "b.ppm"));
    CHECK(slurp(dir / "a.ppm") != slurp(dir / "c.ppm"));
    Rng rng(7);
    CHECK(read_pnm(dir / "a.ppm") == add_awgn(img, 25.0, rng));
    for (const auto& e : fs::directory_iterator(dir.path)) CHECK(e.path().extension() != ".tmp");
  }

  TEST_CASE("degrade resamples by the scale factor") {
    TempDir dir("scale");
    const ImageBuffer img = test_image(12, 18, 1, 2);
    write_pnm(dir / "in.pgm", img);
    REQUIRE(cli({"degrade", "--in", dir / "in.pgm", "--out", dir / "down.pgm", "--scale", "3"}).code == 0);
    const ImageBuffer down = read_pnm(dir / "down.pgm");
    CHECK(down.width == 4);
    CHECK(down.height == 6);
    CHECK(down == bicubic_resize(img, 3, false));
    REQUIRE(cli({"degrade", "--in", dir / "down.pgm", "--out", dir / "up.pgm", "--scale", "3", "--mode", "up"}).code ==
            0);
    CHECK(read_pnm(dir / "up.pgm") == bicubic_resize(down, 3, true));
  }

  TEST_CASE("bench emits one row per length and mode") {
    const Run r = cli({"bench", "--lengths", "256,512,1024,2048", "--window", "33", "--mode", "sparse,dense"});
    REQUIRE(r.code == kExitOk);
    const auto ls = lines(r.out);
    REQUIRE(ls.size() == 9);
    CHECK(ls[0] == "length,mode,ops,millis");
    std::size_t sparse = 0, dense = 0;
    for (std::size_t i = 1; i < ls.size(); ++i) {
      if (ls[i].find(",sparse,") != std::string::npos) ++sparse;
      if (ls[i].find(",dense,") != std::string::npos) ++dense;
    }
    CHECK(sparse == 4);
    CHECK(dense == 4);
    CHECK(lines(cli({"bench", "--lengths", "64,128", "--mode", "sparse"}).out).size() == 3);
  }

  TEST_CASE("train writes checkpoint and loss CSV; eval scores it") {
    TempDir dir("train");
    spit(dir / "tiny.cfg", kTinyConfig);
    const Run a = cli({"train", "--config", dir / "tiny.cfg", "--out", dir / "a.ckpt"});
    REQUIRE_MESSAGE(a.code == kExitOk, a.err);
    CHECK(fs::exists(dir / "a.ckpt"));
    const std::string loss = slurp(dir / "a.loss.csv");
    const auto rows = lines(loss);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0] == "iter,lr,loss");
    CHECK(a.out == loss);
    CHECK(a.err.find("held-out psnr") != std::string::npos);

    // Same seed: byte-identical outputs. A different seed changes them.
    REQUIRE(cli({"train", "--config", dir / "tiny.cfg", "--out", dir / "b.ckpt"}).code == kExitOk);
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
    CHECK(slurp(dir / "a.loss.csv") == slurp(dir / "b.loss.csv"));
    REQUIRE(cli({"train", "--config", dir / "tiny.cfg", "--out", dir / "c.ckpt", "--seed", "5"}).code == kExitOk);
    CHECK(slurp(dir / "a.ckpt") != slurp(dir / "c.ckpt"));
    for (const auto& e : fs::directory_iterator(dir.path)) CHECK(e.path().extension() != ".tmp");

    // The checkpoint carries its config.
    CHECK(read_checkpoint(dir / "a.ckpt").config_text == to_config_text(parse_run_config(kTinyConfig)));

    fs::create_directories(dir.path / "clean");
    fs::create_directories(dir.path / "noisy");
    for (int i = 0; i < 2; ++i) {
      const std::string name = "img" + std::to_string(i) + ".pgm";
      const ImageBuffer clean = test_image(16, 16, 1, 40 + i);
      Rng rng(i);
      write_pnm(dir.path / "clean" / name, clean);
      write_pnm(dir.path / "noisy" / name, add_awgn(clean, 25.0, rng));
    }
    const Run e = cli({"eval", "--ckpt", dir / "a.ckpt", "--clean", dir / "clean", "--degraded", dir / "noisy", "--metric",
                       "psnr,ssim", "--channel", "y", "--crop", "2"});
    REQUIRE_MESSAGE(e.code == kExitOk, e.err);
    const auto ev = lines(e.out);
    REQUIRE(ev.size() == 3);
    CHECK(ev[0] == "image,task,psnr_db,ssim");
    CHECK(ev[1].rfind("img0.pgm,denoise-gray,", 0) == 0);
    CHECK(ev[2].rfind("img1.pgm,denoise-gray,", 0) == 0);

    const Run p = cli({"eval", "--ckpt", dir / "a.ckpt", "--clean", dir / "clean", "--degraded", dir / "noisy", "--metric",
                       "psnr", "--out", dir / "m.csv"});
    REQUIRE(p.code == kExitOk);
    const auto pm = lines(slurp(dir / "m.csv"));
    REQUIRE(pm.size() == 3);
    CHECK(pm[1].substr(pm[1].size() - 4) == ",nan");
    CHECK(cli({"eval", "--ckpt", dir / "a.ckpt", "--clean", dir / "clean", "--degraded", dir / "noisy", "--metric",
               "lpips"})
              .code == kExitUsage);
    fs::remove(dir.path / "clean" / "img1.pgm");
    CHECK(cli({"eval", "--ckpt", dir / "a.ckpt", "--clean", dir / "clean", "--degraded", dir / "noisy"}).code ==
          kExitRuntime);
  }

  TEST_CASE("ablate trains the three variants and prints medians") {
    TempDir dir("ablate");
    std::string cfg = kTinyConfig;
    spit(dir / "tiny.cfg", cfg);
    const Run r = cli({"ablate", "--config", dir / "tiny.cfg", "--seeds", "0,1"});
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    const auto ls = lines(r.out);
    REQUIRE(ls.size() == 1 + 6 + 3);
    CHECK(ls[0] == "variant,seed,psnr_db");
    CHECK(ls[1].rfind("full,0,", 0) == 0);
    CHECK(ls[4].rfind("longir-only,1,", 0) == 0);
    CHECK(ls[6].rfind("cbam-only,1,", 0) == 0);
    CHECK(ls[7].rfind("full,median,", 0) == 0);
    CHECK(ls[9].rfind("cbam-only,median,", 0) == 0);
  }
}
