#include "cli_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hded::cli {
namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("invalid value '" + value + "' for " + key + ": expected " + expected);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc{} || ptr != end) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc{} || ptr != end) bad_value(key, v, "a number");
  return out;
}

bool to_bool(const std::string& key, std::string v) {
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  bad_value(key, v, "true or false");
}

std::array<double, 3> to_triplet(const std::string& key, const std::string& v) {
  std::array<double, 3> out{};
  std::stringstream ss(v);
  std::string part;
  std::size_t n = 0;
  while (std::getline(ss, part, ',')) {
    if (n == 3) bad_value(key, v, "three comma-separated numbers");
    out[n++] = to_double(key, trim(part));
  }
  if (n == 1) out.fill(out[0]);
  else if (n != 3) bad_value(key, v, "one or three comma-separated numbers");
  return out;
}

std::string show_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string show_triplet(const std::array<double, 3>& a) {
  return show_double(a[0]) + "," + show_double(a[1]) + "," + show_double(a[2]);
}

template <typename F>
LossVariant or_usage(const std::string& key, const std::string& v, F&& parse) {
  try {
    return parse(v);
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

std::vector<ConfigKey> build_keys() {
  using C = TrainConfig;
  using S = const std::string&;
  std::vector<ConfigKey> k;
  auto size_key = [&](std::string name, std::string help, std::size_t C::*field) {
    k.push_back({name, std::move(help), [name, field](C& c, S v) { c.*field = to_size(name, v); },
                 [field](const C& c) { return std::to_string(c.*field); }});
  };
  auto real_key = [&](std::string name, std::string help, auto get) {
    k.push_back({name, std::move(help), [name, get](C& c, S v) { get(c) = to_double(name, v); },
                 [get](const C& c) { return show_double(get(const_cast<C&>(c))); }});
  };

  size_key("epochs", "passes over the training split", &C::epochs);
  size_key("batch_size", "samples per optimizer step", &C::batch_size);
  real_key("learning_rate", "SGD base learning rate", [](C& c) -> double& { return c.optim.learning_rate; });
  real_key("momentum", "SGD momentum", [](C& c) -> double& { return c.optim.momentum; });
  real_key("decay_factor", "learning-rate multiplier at the decay epoch",
           [](C& c) -> double& { return c.optim.decay_factor; });
  real_key("decay_fraction", "decay point as a fraction of epochs when epochs != 500",
           [](C& c) -> double& { return c.decay_fraction; });
  k.push_back({"variant", "loss variant: l1+charb, l1+l1, l1grad+charb, l1+charb_ssim, l1grad+charb_ssim",
               [](C& c, S v) { c.variant = or_usage("variant", v, [](S s) { return parse_loss_variant(s); }); },
               [](const C& c) { return std::string(to_string(c.variant)); }});
  real_key("mu", "gradient-smoothing weight of the depth loss", [](C& c) -> double& { return c.weights.mu; });
  real_key("psi", "SSIM weight of the deblurring loss", [](C& c) -> double& { return c.weights.psi; });
  real_key("lambda", "deblurring weight of the total loss", [](C& c) -> double& { return c.weights.lambda; });
  real_key("eps_charb", "Charbonnier epsilon", [](C& c) -> double& { return c.weights.eps_charb; });
  k.push_back({"input_size", "network input as N or HxW",
               [](C& c, S v) {
                 const auto x = v.find('x');
                 if (x == std::string::npos) {
                   c.model.input_height = c.model.input_width = to_size("input_size", v);
                 } else {
                   c.model.input_height = to_size("input_size", v.substr(0, x));
                   c.model.input_width = to_size("input_size", v.substr(x + 1));
                 }
               },
               [](const C& c) {
                 return std::to_string(c.model.input_height) + "x" + std::to_string(c.model.input_width);
               }});
  real_key("width_scale", "multiplier on the encoder channel schedule",
           [](C& c) -> double& { return c.model.width_scale; });
  k.push_back({"dense_block_layers", "3x3 layers per encoder stage",
               [](C& c, S v) { c.model.dense_block_layers = to_size("dense_block_layers", v); },
               [](const C& c) { return std::to_string(c.model.dense_block_layers); }});
  k.push_back({"use_skips", "encoder-decoder skip connections",
               [](C& c, S v) { c.model.use_skips = to_bool("use_skips", v); },
               [](const C& c) { return std::string(c.model.use_skips ? "true" : "false"); }});
  k.push_back({"ablation", "heads to train: both, depth_only, deblur_only",
               [](C& c, S v) {
                 try {
                   c.ablation = parse_head_mode(v);
                 } catch (const std::exception& e) {
                   throw ConfigError(std::string("ablation: ") + e.what());
                 }
                 c.model.heads = c.ablation;
               },
               [](const C& c) { return std::string(to_string(c.ablation)); }});
  k.push_back({"seed", "run seed; fixes data, initialization and augmentation",
               [](C& c, S v) { c.seed = to_u64("seed", v); },
               [](const C& c) { return std::to_string(c.seed); }});
  size_key("eval_every", "epochs between intermediate checkpoints (0: end only)", &C::eval_every);
  k.push_back({"max_steps", "cap on optimizer steps (0: none)",
               [](C& c, S v) {
                 const auto n = to_size("max_steps", v);
                 c.max_steps = n ? std::optional<std::size_t>(n) : std::nullopt;
               },
               [](const C& c) { return std::to_string(c.max_steps.value_or(0)); }});
  k.push_back({"normalize_depth", "regress depth mapped to [0,1] over the data range",
               [](C& c, S v) { c.normalize_depth = to_bool("normalize_depth", v); },
               [](const C& c) { return std::string(c.normalize_depth ? "true" : "false"); }});
  real_key("flip_probability", "probability of a horizontal flip per sample",
           [](C& c) -> double& { return c.flip_probability; });
  k.push_back({"rgb_mean", "input centering, one or three values",
               [](C& c, S v) { c.normalization.mean = to_triplet("rgb_mean", v); },
               [](const C& c) { return show_triplet(c.normalization.mean); }});
  k.push_back({"rgb_std", "input scaling, one or three values",
               [](C& c, S v) { c.normalization.stddev = to_triplet("rgb_std", v); },
               [](const C& c) { return show_triplet(c.normalization.stddev); }});
  k.push_back({"manifest", "dataset manifest; empty for in-memory synthetic scenes",
               [](C& c, S v) {
                 c.data.manifest = v.empty() ? std::nullopt : std::optional<std::filesystem::path>(v);
               },
               [](const C& c) { return c.data.manifest ? c.data.manifest->string() : std::string(); }});
  k.push_back({"synthetic_train", "synthetic training scenes",
               [](C& c, S v) { c.data.synthetic_train = to_size("synthetic_train", v); },
               [](const C& c) { return std::to_string(c.data.synthetic_train); }});
  k.push_back({"synthetic_test", "synthetic test scenes (0: evaluate on training scenes)",
               [](C& c, S v) { c.data.synthetic_test = to_size("synthetic_test", v); },
               [](const C& c) { return std::to_string(c.data.synthetic_test); }});
  real_key("depth_min", "nearest synthetic depth in meters", [](C& c) -> double& { return c.data.scene.depth_min; });
  real_key("depth_max", "farthest synthetic depth in meters", [](C& c) -> double& { return c.data.scene.depth_max; });
  k.push_back({"min_planes", "fewest planes per synthetic scene",
               [](C& c, S v) { c.data.scene.min_planes = to_size("min_planes", v); },
               [](const C& c) { return std::to_string(c.data.scene.min_planes); }});
  k.push_back({"max_planes", "most planes per synthetic scene",
               [](C& c, S v) { c.data.scene.max_planes = to_size("max_planes", v); },
               [](const C& c) { return std::to_string(c.data.scene.max_planes); }});
  k.push_back({"blur_levels", "blur layers of the defocus synthesis",
               [](C& c, S v) { c.data.scene.defocus.levels = to_size("blur_levels", v); },
               [](const C& c) { return std::to_string(c.data.scene.defocus.levels); }});
  real_key("focal_length", "lens focal length in meters",
           [](C& c) -> double& { return c.data.scene.camera.focal_length_m; });
  real_key("aperture", "aperture diameter in meters", [](C& c) -> double& { return c.data.scene.camera.aperture_m; });
  real_key("focus_distance", "focus distance in meters",
           [](C& c) -> double& { return c.data.scene.camera.focus_distance_m; });
  real_key("coc_to_pixel", "pixels per meter of blur-circle diameter",
           [](C& c) -> double& { return c.data.scene.camera.coc_to_pixel; });
  k.push_back({"out", "output directory",
               [](C& c, S v) {
                 if (v.empty()) throw ConfigError("out: expected a directory");
                 c.out_dir = v;
               },
               [](const C& c) { return c.out_dir.string(); }});
  return k;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

std::string flag_name(const std::string& key) {
  std::string s = key;
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

std::string env_name(const std::string& key) {
  std::string s = "HDED_" + key;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
  return s;
}

std::map<std::string, std::string> parse_ini(const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto cut = line.find_first_of("#;");
    if (cut != std::string::npos) line.erase(cut);
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '-', '_');
    if (!find_key(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

std::map<std::string, std::string> read_ini(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_ini(ss.str(), path);
}

std::map<std::string, std::string> env_settings(char** envp) {
  std::map<std::string, std::string> out;
  if (!envp) return out;
  for (char** e = envp; *e; ++e) {
    const std::string entry(*e);
    if (entry.rfind("HDED_", 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string key = entry.substr(5, eq - 5);
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    if (!find_key(key)) throw ConfigError("environment: unknown setting " + entry.substr(0, eq));
    out[key] = entry.substr(eq + 1);
  }
  return out;
}

TrainConfig resolve_config(TrainConfig base, const std::vector<std::map<std::string, std::string>>& layers) {
  for (const auto& layer : layers) {
    for (const auto& [key, value] : layer) {
      const auto* k = find_key(key);
      if (!k) throw ConfigError("unknown key '" + key + "'");
      k->apply(base, value);
    }
  }
  return base;
}

std::string to_ini(const TrainConfig& config) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.show(config) + "\n";
  return out;
}

}  // namespace hded::cli
