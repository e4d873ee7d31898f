// hded: joint depth estimation and deblurring from one defocused image.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <hded/checkpoint.hpp>
#include <hded/dataset.hpp>
#include <hded/gradcheck.hpp>
#include <hded/image_io.hpp>
#include <hded/optics.hpp>
#include <hded/trainer.hpp>

#include "cli_config.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace hded;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

int verbosity = 0;

// Config file, environment and per-key flags of one subcommand.
struct ConfigInputs {
  std::string file;
  std::string preset = "full";
  std::map<std::string, std::string> flags;
};

void add_config_options(CLI::App* app, ConfigInputs& in, const std::vector<std::string>& skip = {}) {
  app->add_option("-c,--config", in.file, "INI file of 'key = value' settings")->check(CLI::ExistingFile);
  app->add_option("--preset", in.preset, "starting point before the config file: full (256x256, full width) or micro")
      ->check(CLI::IsMember({"full", "micro"}));
  for (const auto& key : cli::config_keys()) {
    if (std::find(skip.begin(), skip.end(), key.name) != skip.end()) continue;
    const auto name = key.name;
    app->add_option_function<std::string>(
           "--" + cli::flag_name(key.name), [&in, name](const std::string& v) { in.flags[name] = v; },
           key.help + " (env " + cli::env_name(key.name) + ")")
        ->group("Settings");
  }
}

// Precedence: flags > environment > config file > preset.
TrainConfig resolve(const ConfigInputs& in) {
  TrainConfig base = in.preset == "micro" ? micro_config() : TrainConfig{};
  std::vector<std::map<std::string, std::string>> layers;
  if (!in.file.empty()) layers.push_back(cli::read_ini(in.file));
  layers.push_back(cli::env_settings(environ));
  layers.push_back(in.flags);
  auto cfg = cli::resolve_config(std::move(base), layers);
  // The model carries exactly the heads its objective trains.
  cfg.model.heads = cfg.ablation;
  try {
    cfg.data.scene.camera.validate();
  } catch (const DomainError& e) {
    throw cli::ConfigError(e.what());
  }
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

void echo_config(const TrainConfig& cfg) {
  write_file(cfg.out_dir / "config.ini", cli::to_ini(cfg));
}

void print_progress(const EpochRecord& r) {
  std::printf("epoch %4zu  lr %.3g  loss %.6g  depth %.6g  deblur %.6g\n", r.epoch + 1, r.lr, r.mean.total,
              r.mean.depth, r.mean.deblur);
  std::fflush(stdout);
}

std::string report_csv(const MetricReport& r, const std::string& run_id) {
  return "# run " + run_id + "\nsplit," + metric_csv_header() + "\n" + r.split + "," + metric_csv_row(r) + "\n";
}

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  std::size_t count = 8;
  std::size_t test_count = 0;
  std::string size = "64";
  std::vector<double> depth_range{0.7, 10.0};
  double focus_distance = 1.0;
  double focal_length = 0.07;
  double aperture = 0.0448;
  double coc_to_pixel = 1000.0;
  std::size_t blur_levels = 16;
  std::size_t min_planes = 2;
  std::size_t max_planes = 6;
  std::uint64_t seed = 0;
  std::string out;
  std::string image;
  std::string depth;
  double depth_png_scale = 0.001;
  bool coc_map = false;
};

PngImage coc_visual(const CocMap& coc) {
  const double hi = coc.max() > 0.0 ? coc.max() : 1.0;
  Tensor<float> t(Shape{1, 1, coc.height, coc.width});
  for (std::size_t i = 0; i < coc.values.size(); ++i) t.data_mut()[i] = static_cast<float>(coc.values[i] / hi);
  return tensor_to_png(t, 8);
}

int cmd_synth(const SynthArgs& a) {
  ThinLensCamera cam{a.focal_length, a.aperture, a.focus_distance, a.coc_to_pixel};
  try {
    cam.validate();
  } catch (const DomainError& e) {
    throw cli::ConfigError(e.what());
  }
  DefocusOptions opt;
  opt.levels = a.blur_levels;
  const fs::path out(a.out);
  nlohmann::json echo = {{"focal_length", cam.focal_length_m}, {"aperture", cam.aperture_m},
                         {"focus_distance", cam.focus_distance_m}, {"coc_to_pixel", cam.coc_to_pixel},
                         {"blur_levels", a.blur_levels}};

  if (!a.image.empty()) {
    // Defocus a given all-in-focus image with its depth map.
    DatasetManifest m;
    m.root = fs::path(a.image).parent_path();
    m.camera = cam;
    m.blur_levels = a.blur_levels;
    m.depth_png_scale = a.depth_png_scale;
    m.depth_min = 0.0;
    m.depth_max = std::numeric_limits<double>::max();
    m.entries.push_back({"input", fs::absolute(a.image).string(), fs::absolute(a.depth).string(), "", Split::train});
    const auto s = load_sample(m, "input");
    fs::create_directories(out);
    const auto stem = fs::path(a.image).stem().string();
    write_png(out / (stem + "_defocused.png"), tensor_to_png(s.defocused, 8));
    if (a.coc_map) write_png(out / (stem + "_coc.png"), coc_visual(coc_map(cam, s.depth_m)));
    echo["image"] = a.image;
    echo["depth"] = a.depth;
    write_file(out / "synth.json", echo.dump(2) + "\n");
    std::printf("wrote %s\n", (out / (stem + "_defocused.png")).string().c_str());
    return kOk;
  }

  if (a.depth_range.size() != 2) throw CLI::ValidationError("--depth-range", "expects MIN,MAX");
  SceneConfig scene;
  const auto x = a.size.find('x');
  try {
    scene.height = std::stoul(a.size.substr(0, x));
    scene.width = x == std::string::npos ? scene.height : std::stoul(a.size.substr(x + 1));
  } catch (const std::exception&) {
    throw CLI::ValidationError("--size", "expects N or HxW");
  }
  scene.depth_min = a.depth_range[0];
  scene.depth_max = a.depth_range[1];
  scene.camera = cam;
  scene.min_planes = a.min_planes;
  scene.max_planes = a.max_planes;
  scene.defocus = opt;
  const auto manifest = write_synthetic_dataset(scene, a.count, a.test_count, a.seed, TrainConfig{}.normalization, out);
  if (a.coc_map) {
    for (const auto& e : manifest.entries) {
      const auto depth = pfm_to_tensor(read_pfm(out / e.depth));
      write_png(out / (e.id + "_coc.png"), coc_visual(coc_map(cam, depth)));
    }
  }
  echo.update({{"count", a.count}, {"test_count", a.test_count}, {"height", scene.height}, {"width", scene.width},
               {"depth_min", scene.depth_min}, {"depth_max", scene.depth_max}, {"min_planes", a.min_planes},
               {"max_planes", a.max_planes}, {"seed", a.seed}});
  write_file(out / "synth.json", echo.dump(2) + "\n");
  std::printf("wrote %zu samples and %s\n", manifest.entries.size(), (out / "manifest.txt").string().c_str());
  return kOk;
}

// --- train / ablate / grid ---------------------------------------------------

int cmd_train(const ConfigInputs& in) {
  auto cfg = resolve(in);
  cfg.validate();
  if (verbosity > 0) cfg.on_epoch = print_progress;
  echo_config(cfg);
  const auto r = train(cfg);
  const auto& first = r.log.epochs.front().mean.total;
  const auto& last = r.log.epochs.back().mean.total;
  std::string csv = report_csv(r.train_report, r.log.run_id);
  if (r.test_report) csv += "test," + metric_csv_row(*r.test_report) + "\n";
  write_file(cfg.out_dir / "metrics.csv", csv);
  std::printf("run %s: %zu steps, epoch loss %.6g -> %.6g\n", r.log.run_id.c_str(), r.log.steps.size(), first, last);
  std::printf("%s", csv.c_str());
  std::printf("checkpoint %s\n", r.checkpoint.string().c_str());
  return kOk;
}

int cmd_ablate(const ConfigInputs& in) {
  auto cfg = resolve(in);
  if (verbosity > 0) cfg.on_epoch = print_progress;
  echo_config(cfg);
  const auto r = ablation_suite(cfg);
  std::printf("%s", r.csv.c_str());
  return kOk;
}

int cmd_grid(const ConfigInputs& in) {
  auto cfg = resolve(in);
  if (verbosity > 0) cfg.on_epoch = print_progress;
  echo_config(cfg);
  const auto r = loss_grid(cfg);
  std::printf("%s", r.csv.c_str());
  return kOk;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string split = "test";
  std::string out = ".";
  bool ranges = false;
};

int cmd_eval(const EvalArgs& a, const ConfigInputs& in) {
  ModelCard card;
  auto model = load_model(a.checkpoint, &card);
  auto cfg = resolve(in);
  cfg.model = card.model;
  const auto data = load_data(cfg);
  const auto split = parse_split(a.split);
  const auto& samples = split == Split::train ? data.train : data.test;
  if (samples.empty()) throw DataError("the " + a.split + " split is empty");
  auto report = evaluate(model, samples, card.scaling, card.normalization, cfg.metrics, a.split, a.ranges);
  const fs::path out(a.out);
  const std::string csv = report_csv(report, card.run_id);
  write_file(out / ("eval_" + a.split + ".csv"), csv);
  auto j = report.to_json();
  j["checkpoint"] = a.checkpoint;
  j["run_id"] = card.run_id;
  j["data"] = cfg.to_json()["data"];
  write_file(out / ("eval_" + a.split + ".json"), j.dump(2) + "\n");
  std::printf("%s", csv.c_str());
  return kOk;
}

// --- gradcheck -----------------------------------------------------------------

struct GradArgs {
  GradCheckOptions opt;
  std::string fault;
  double fault_factor = 1.5;
  std::string json;
  bool list = false;
};

int cmd_gradcheck(const GradArgs& a) {
  if (a.list) {
    for (const auto& n : gradcheck_case_names()) std::printf("%s\n", n.c_str());
    return kOk;
  }
  if (!a.fault.empty()) {
    const auto kinds = recorded_op_kinds();
    if (std::find(kinds.begin(), kinds.end(), a.fault) == kinds.end()) {
      std::string all;
      for (auto k : kinds) all += " " + std::string(k);
      throw CLI::ValidationError("--inject-fault", "unknown op kind '" + a.fault + "'; one of:" + all);
    }
    set_backward_fault(a.fault, a.fault_factor);
  }
  const auto report = run_gradcheck(a.opt);
  clear_backward_fault();
  std::printf("%s", report.to_text().c_str());
  if (!a.json.empty()) {
    auto j = report.to_json();
    if (!a.fault.empty()) j["injected_fault"] = {{"kind", a.fault}, {"factor", a.fault_factor}};
    write_file(a.json, j.dump(2) + "\n");
  }
  return report.passed() ? kOk : kNumerical;
}

// --- infer ---------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint;
  std::vector<std::string> images;
  std::string out = ".";
};

int cmd_infer(const InferArgs& a) {
  ModelCard card;
  auto model = load_model(a.checkpoint, &card);
  for (const auto& image : a.images) {
    const auto o = infer(model, card, image, a.out);
    for (const auto* p : {&o.depth_pfm, &o.depth_png, &o.aif_png}) {
      if (*p) std::printf("wrote %s\n", (*p)->string().c_str());
    }
  }
  return kOk;
}

int run(int argc, char** argv) {
  CLI::App app{"Joint depth estimation and deblurring from a single defocused image."};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_flag("-v,--verbose", verbosity, "print per-epoch progress");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "write synthetic defocus scenes, or defocus one image with its depth");
  s->add_option("--count", synth.count, "training scenes")->capture_default_str();
  s->add_option("--test-count", synth.test_count, "test scenes")->capture_default_str();
  s->add_option("--size", synth.size, "scene size as N or HxW")->capture_default_str();
  s->add_option("--depth-range", synth.depth_range, "nearest and farthest depth in meters")
      ->delimiter(',')
      ->expected(2)
      ->capture_default_str();
  s->add_option("--focus-distance", synth.focus_distance, "focus distance in meters")->capture_default_str();
  s->add_option("--focal-length", synth.focal_length, "focal length in meters")->capture_default_str();
  s->add_option("--aperture", synth.aperture, "aperture diameter in meters")->capture_default_str();
  s->add_option("--coc-to-pixel", synth.coc_to_pixel, "pixels per meter of blur circle")->capture_default_str();
  s->add_option("--blur-levels", synth.blur_levels, "blur layers")->capture_default_str();
  s->add_option("--min-planes", synth.min_planes, "fewest planes per scene")->capture_default_str();
  s->add_option("--max-planes", synth.max_planes, "most planes per scene")->capture_default_str();
  s->add_option("--seed", synth.seed, "dataset seed")->capture_default_str();
  s->add_option("-o,--out", synth.out, "output directory")->required();
  auto* img = s->add_option("--image", synth.image, "all-in-focus PNG to defocus instead of synthesizing")
                  ->check(CLI::ExistingFile);
  auto* dep = s->add_option("--depth", synth.depth, "depth map (PFM, or 16-bit PNG) for --image")
                  ->check(CLI::ExistingFile);
  img->needs(dep);
  dep->needs(img);
  s->add_option("--depth-png-scale", synth.depth_png_scale, "meters per PNG depth unit")->capture_default_str();
  s->add_flag("--coc-map", synth.coc_map, "also write a blur-circle visualization");

  ConfigInputs train_in;
  auto* t = app.add_subcommand("train", "train one model and write run log, metrics and checkpoint");
  add_config_options(t, train_in);

  ConfigInputs ablate_in;
  auto* ab = app.add_subcommand("ablate", "train both heads, depth only and deblur only; write ablation.csv");
  add_config_options(ab, ablate_in, {"ablation"});

  ConfigInputs grid_in;
  auto* g = app.add_subcommand("grid", "train every loss variant; write loss_grid.csv");
  add_config_options(g, grid_in, {"variant", "ablation"});

  EvalArgs eval;
  ConfigInputs eval_in;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a data split; write eval_<split>.csv");
  e->add_option("--checkpoint", eval.checkpoint, "model checkpoint (its .json card must sit next to it)")
      ->required()
      ->check(CLI::ExistingFile);
  e->add_option("--split", eval.split, "train or test")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
  e->add_option("-o,--out", eval.out, "output directory")->capture_default_str();
  e->add_flag("--ranges", eval.ranges, "also report the capped-range depth metrics");
  add_config_options(e, eval_in, {"out"});

  GradArgs grad;
  auto* gc = app.add_subcommand("gradcheck", "compare every backward rule against finite differences");
  gc->add_option("--instances", grad.opt.instances, "random problems per case")->capture_default_str();
  gc->add_option("--step", grad.opt.step, "central-difference half step")->capture_default_str();
  gc->add_option("--tolerance", grad.opt.tolerance, "max relative error")->capture_default_str();
  gc->add_option("--seed", grad.opt.seed, "problem seed")->capture_default_str();
  gc->add_option("--only", grad.opt.only, "run only cases whose name contains this");
  gc->add_option("--inject-fault", grad.fault, "scale the backward rule of this op kind (self-test)");
  gc->add_option("--fault-factor", grad.fault_factor, "gradient multiplier of --inject-fault")->capture_default_str();
  gc->add_option("--json", grad.json, "also write the report as JSON");
  gc->add_flag("--list", grad.list, "print case names and exit");

  InferArgs inf;
  auto* in = app.add_subcommand("infer", "predict depth and the sharp image for PNG inputs");
  in->add_option("--checkpoint", inf.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  in->add_option("images", inf.images, "RGB PNG files")->required()->check(CLI::ExistingFile);
  in->add_option("-o,--out", inf.out, "output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  if (s->parsed()) return cmd_synth(synth);
  if (t->parsed()) return cmd_train(train_in);
  if (ab->parsed()) return cmd_ablate(ablate_in);
  if (g->parsed()) return cmd_grid(grid_in);
  if (e->parsed()) return cmd_eval(eval, eval_in);
  if (gc->parsed()) return cmd_gradcheck(grad);
  if (in->parsed()) return cmd_infer(inf);
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CLI::Error& e) {
    std::cerr << "hded: " << e.what() << '\n';
    return kUsage;
  } catch (const cli::ConfigError& e) {
    std::cerr << "hded: config: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "hded: numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const DomainError& e) {
    std::cerr << "hded: numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const DataError& e) {
    std::cerr << "hded: data: " << e.what() << '\n';
    return kData;
  } catch (const ImageIoError& e) {
    std::cerr << "hded: data: " << e.what() << '\n';
    return kData;
  } catch (const CheckpointError& e) {
    std::cerr << "hded: checkpoint: " << e.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "hded: data: " << e.what() << '\n';
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "hded: invalid configuration: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "hded: error: " << e.what() << '\n';
    return kData;
  }
}
