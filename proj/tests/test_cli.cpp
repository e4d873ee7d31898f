#include <doctest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <set>
#include <sys/wait.h>

#include <hded/image_io.hpp>
#include <hded/optics.hpp>

#include "cli_config.hpp"
#include "test_util.hpp"

using namespace hded;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

// Runs the CLI through the shell, stdout and stderr merged.
Result run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + HDED_EXE + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p);
  std::array<char, 4096> buf;
  while (auto n = std::fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("INI parsing") {
  const auto kv = cli::parse_ini("# comment\n[train]\nepochs = 12 ; trailing\n\nlearning-rate=0.5\n", "t.cfg");
  CHECK(kv.at("epochs") == "12");
  CHECK(kv.at("learning_rate") == "0.5");
  CHECK_THROWS_WITH_AS(cli::parse_ini("epochs = 1\nbogus = 2\n", "t.cfg"), "t.cfg:2: unknown key 'bogus'",
                       cli::ConfigError);
  CHECK_THROWS_AS(cli::parse_ini("no equals sign\n", "t.cfg"), cli::ConfigError);
}

TEST_CASE("config echo parses back to the same configuration") {
  auto cfg = micro_config();
  cfg.seed = 18446744073709551615ull;
  cfg.optim.learning_rate = 0.1 + 0.2;
  cfg.ablation = cfg.model.heads = HeadMode::depth_only;
  cfg.max_steps = 17;
  cfg.data.manifest = "some/where.txt";
  const auto back = cli::resolve_config(TrainConfig{}, {cli::parse_ini(cli::to_ini(cfg), "echo")});
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.out_dir == cfg.out_dir);
}

TEST_CASE("later layers win and bad values are rejected") {
  char e1[] = "HDED_EPOCHS=7";
  char e2[] = "PATH=/bin";
  char e3[] = "HDED_LEARNING_RATE=0.25";
  char* env[] = {e1, e2, e3, nullptr};
  const auto from_env = cli::env_settings(env);
  CHECK(from_env.size() == 2);
  const auto file = cli::parse_ini("epochs = 3\nbatch_size = 2\nlearning_rate = 9\n", "f");
  const std::map<std::string, std::string> flags{{"learning_rate", "0.5"}};
  const auto cfg = cli::resolve_config(TrainConfig{}, {file, from_env, flags});
  CHECK(cfg.epochs == 7);
  CHECK(cfg.batch_size == 2);
  CHECK(cfg.optim.learning_rate == 0.5);

  char bad[] = "HDED_WIDTH=3";
  char* env2[] = {bad, nullptr};
  CHECK_THROWS_AS(cli::env_settings(env2), cli::ConfigError);
  for (const auto& [k, v] : std::map<std::string, std::string>{{"epochs", "-1"}, {"epochs", "2.5"},
                                                               {"momentum", "fast"}, {"use_skips", "maybe"},
                                                               {"variant", "l2"}, {"rgb_std", "1,2"}}) {
    CAPTURE(k);
    CHECK_THROWS_AS(cli::resolve_config(TrainConfig{}, {{{k, v}}}), cli::ConfigError);
  }
  CHECK(cli::flag_name("batch_size") == "batch-size");
  CHECK(cli::env_name("batch_size") == "HDED_BATCH_SIZE");
}

TEST_CASE("every subcommand documents its flags") {
  for (const char* sub : {"synth", "train", "eval", "ablate", "grid", "gradcheck", "infer"}) {
    const auto r = run_cli(std::string(sub) + " --help");
    CAPTURE(sub);
    CHECK(r.code == 0);
    CHECK(r.out.find("Usage") != std::string::npos);
  }
  const auto train_help = run_cli("train --help").out;
  for (const auto& k : cli::config_keys()) CHECK(train_help.find("--" + cli::flag_name(k.name)) != std::string::npos);
  const auto synth_help = run_cli("synth --help").out;
  for (const char* f : {"--count", "--size", "--depth-range", "--focus-distance", "--seed", "--out"}) {
    CHECK(synth_help.find(f) != std::string::npos);
  }
  CHECK(run_cli("").code == 1);
  CHECK(run_cli("train --no-such-flag").code == 1);
  CHECK(run_cli("frobnicate").code == 1);
}

TEST_CASE("synth writes reproducible triples and a manifest") {
  const auto dir = test::scratch_dir("cli_synth");
  const auto a = dir / "a", b = dir / "b";
  REQUIRE(run_cli("synth --count 8 --size 64 --seed 7 --out " + a.string()).code == 0);
  REQUIRE(run_cli("synth --count 8 --size 64 --seed 7 --out " + b.string()).code == 0);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(a)) {
    const auto name = e.path().filename();
    CHECK(slurp(a / name) == slurp(b / name));
    ++files;
  }
  CHECK(files == 8 * 3 + 2);  // triples, manifest.txt, synth.json
  const auto m = DatasetManifest::load(a / "manifest.txt");
  CHECK(m.ids(Split::train).size() == 8);
  CHECK(read_png(a / "scene_0005_aif.png").width == 64);
  CHECK(run_cli("synth --count 2 --size 32 --seed 7 --depth-range 5,1 --out " + (dir / "bad").string()).code == 2);
  CHECK(run_cli("synth --count 2 --focal-length -1 --out " + (dir / "bad").string()).code == 1);
}

TEST_CASE("synth keeps the plane at the focus distance sharp") {
  const auto dir = test::scratch_dir("cli_focus");
  REQUIRE(run_cli("synth --count 1 --size 64 --seed 3 --out " + (dir / "ref").string()).code == 0);
  const auto depth = read_pfm(dir / "ref" / "scene_0000_depth.pfm");
  std::map<float, std::size_t> counts;
  for (float d : depth.data) ++counts[d];
  const float plane = std::max_element(counts.begin(), counts.end(), [](auto& x, auto& y) { return x.second < y.second; })->first;
  char focus[64];
  std::snprintf(focus, sizeof focus, "%.9g", plane);
  REQUIRE(run_cli(std::string("synth --count 1 --size 64 --seed 3 --focus-distance ") + focus + " --out " +
               (dir / "f").string()).code == 0);
  const auto aif = read_png(dir / "f" / "scene_0000_aif.png");
  const auto blurred = read_png(dir / "f" / "scene_0000_defocused.png");
  CHECK(slurp(dir / "f" / "scene_0000_aif.png") == slurp(dir / "ref" / "scene_0000_aif.png"));
  std::size_t on_plane = 0, off_plane_changed = 0;
  for (std::size_t i = 0; i < depth.data.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      if (depth.data[i] == plane) {
        CHECK(aif.samples[i * 3 + c] == blurred.samples[i * 3 + c]);
        ++on_plane;
      } else if (aif.samples[i * 3 + c] != blurred.samples[i * 3 + c]) {
        ++off_plane_changed;
      }
    }
  }
  CHECK(on_plane > 0);
  // Planes far enough from focus to blur by a pixel must change.
  const ThinLensCamera cam{0.07, 0.0448, plane, 1000.0};
  bool visible_blur = false;
  for (const auto& [d, n] : counts) visible_blur = visible_blur || coc_diameter(cam, d) * cam.coc_to_pixel / 4.0 >= 1.0;
  if (visible_blur) CHECK(off_plane_changed > 0);
}

TEST_CASE("train, eval and infer from a config file") {
  const auto dir = test::scratch_dir("cli_train");
  std::ofstream(dir / "micro.cfg") << "epochs = 2\nbatch_size = 4\ninput_size = 32\nwidth_scale = 0.125\n"
                                      "synthetic_train = 4\nsynthetic_test = 2\nlearning_rate = 0.05\n";
  const auto out = dir / "run";
  const auto cfg = (dir / "micro.cfg").string();
  const auto r = run_cli("train --config " + cfg + " --out " + out.string());
  REQUIRE_MESSAGE(r.code == 0, r.out);
  for (const char* f : {"model.ckpt", "model.json", "run.jsonl", "timing.jsonl", "config.ini", "metrics.csv"}) {
    CHECK(std::filesystem::exists(out / f));
  }
  CHECK(slurp(out / "config.ini").find("epochs = 2\n") != std::string::npos);
  const auto first_log = slurp(out / "run.jsonl");
  REQUIRE(run_cli("train --config " + cfg + " --out " + out.string()).code == 0);
  CHECK(slurp(out / "run.jsonl") == first_log);

  // Environment overrides the file, flags override the environment.
  REQUIRE(run_cli("train --config " + cfg + " --out " + (dir / "env").string(), "HDED_EPOCHS=1").code == 0);
  CHECK(slurp(dir / "env" / "config.ini").find("epochs = 1\n") != std::string::npos);
  REQUIRE(run_cli("train --config " + cfg + " --epochs 3 --out " + (dir / "flag").string(), "HDED_EPOCHS=1").code == 0);
  CHECK(slurp(dir / "flag" / "config.ini").find("epochs = 3\n") != std::string::npos);
  CHECK(run_cli("train --config " + cfg + " --out " + (dir / "env").string(), "HDED_EPOCH=1").code == 1);

  const auto e = run_cli("eval --checkpoint " + (out / "model.ckpt").string() + " --config " + cfg + " --split test --out " +
                      out.string());
  REQUIRE_MESSAGE(e.code == 0, e.out);
  const auto csv = slurp(out / "eval_test.csv");
  CHECK(csv.find("split,RMSE,Abs-rel,delta1,delta2,delta3,PSNR,SSIM\ntest,") != std::string::npos);
  CHECK(std::filesystem::exists(out / "eval_test.json"));

  std::mt19937_64 rng(1);
  write_png(dir / "photo.png", tensor_to_png(test::random_tensor<float>({1, 3, 40, 56}, rng, 0.0, 1.0)));
  const auto inf = run_cli("infer --checkpoint " + (out / "model.ckpt").string() + " -o " + (dir / "inf").string() + " " +
                        (dir / "photo.png").string());
  REQUIRE_MESSAGE(inf.code == 0, inf.out);
  CHECK(read_pfm(dir / "inf" / "photo_depth.pfm").width == 56);
  CHECK(read_png(dir / "inf" / "photo_aif.png").height == 40);
}

TEST_CASE("exit codes") {
  const auto dir = test::scratch_dir("cli_exit");
  CHECK(run_cli("train --manifest " + (dir / "absent.txt").string() + " --out " + dir.string()).code == 2);
  CHECK(run_cli("train --epochs zero").code == 1);
  CHECK(run_cli("train --batch-size 0 --out " + dir.string()).code == 1);
  CHECK(run_cli("train --out " + dir.string(), "HDED_EPOCHS=x").code == 1);
  std::ofstream(dir / "bad.cfg") << "bogus = 1\n";
  CHECK(run_cli("train --config " + (dir / "bad.cfg").string()).code == 1);
  CHECK(run_cli("eval --checkpoint " + (dir / "bad.cfg").string()).code == 2);
  CHECK(run_cli("gradcheck --only relu").code == 0);
  const auto faulty = run_cli("gradcheck --only conv2d --inject-fault conv2d");
  CHECK(faulty.code == 3);
  CHECK(faulty.out.find("FAIL") != std::string::npos);
  CHECK(run_cli("gradcheck --inject-fault nonsense").code == 1);
  CHECK(run_cli("train --preset micro --epochs 3 --input-size 32 --synthetic-train 2 --learning-rate 1e30 --out " +
             (dir / "nan").string()).code == 3);
}
