#include "hded/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "hded/image_io.hpp"

namespace hded {

std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + std::string(name) + "' (expected train or test)");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 over the combined words
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw DataError("manifest: '" + key + "' expects a number, got '" + value + "'");
  }
}

std::array<double, 3> parse_triplet(const std::string& key, const std::string& value) {
  std::array<double, 3> out{};
  std::stringstream ss(value);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 3) break;
    out[i++] = parse_double(key, trim(item));
  }
  if (i != 3) throw DataError("manifest: '" + key + "' expects three comma-separated numbers");
  return out;
}

std::filesystem::path resolve(const std::filesystem::path& root, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : root / path;
}

Tensor<float> load_rgb(const std::filesystem::path& path) {
  const auto png = read_png(path);
  Tensor<float> t = png_to_tensor(png);
  if (png.channels == 1) {
    const auto plane = png.width * png.height;
    Tensor<float> rgb(Shape{1, 3, png.height, png.width});
    for (std::size_t c = 0; c < 3; ++c) std::copy_n(t.data().begin(), plane, rgb.data_mut().begin() + c * plane);
    return rgb;
  }
  return t;
}

Tensor<float> load_depth(const std::filesystem::path& path, double png_scale) {
  const auto ext = path.extension().string();
  if (ext == ".pfm") {
    const auto pfm = read_pfm(path);
    if (pfm.channels != 1) throw DataError("depth map " + path.string() + " must have one channel");
    return pfm_to_tensor(pfm);
  }
  if (ext == ".png") {
    const auto png = read_png(path);
    if (png.channels != 1) throw DataError("depth map " + path.string() + " must be grayscale");
    Tensor<float> t(Shape{1, 1, png.height, png.width});
    for (std::size_t i = 0; i < png.samples.size(); ++i) {
      t.data_mut()[i] = static_cast<float>(png.samples[i] * png_scale);
    }
    return t;
  }
  throw DataError("unsupported depth format '" + ext + "' for " + path.string());
}

// Checkerboard or linear gradient between two random colors. Cells span at
// least 4 px so the pattern survives the strongest blur of the default camera
// (sigma ~0.8 px); 2 px periods sit at Nyquist and are wiped out by it.
struct Texture {
  bool checker = true;
  std::array<double, 3> a{}, b{};
  double cell = 4.0;
  double dir_x = 1.0, dir_y = 0.0;
  double offset = 0.0;

  double value(std::size_t c, double y, double x) const {
    double t;
    if (checker) {
      const auto cx = static_cast<long>(std::floor((x + offset) / cell));
      const auto cy = static_cast<long>(std::floor((y + offset) / cell));
      t = ((cx + cy) % 2 == 0) ? 0.0 : 1.0;
    } else {
      t = std::clamp(0.5 + (x * dir_x + y * dir_y) / (8.0 * cell) - offset / cell, 0.0, 1.0);
    }
    return a[c] + (b[c] - a[c]) * t;
  }
};

Texture random_texture(std::mt19937_64& rng) {
  Texture t;
  t.checker = uniform_int(rng, 0, 1) == 0;
  for (auto& v : t.a) v = uniform(rng, 0.05, 0.95);
  for (auto& v : t.b) v = uniform(rng, 0.05, 0.95);
  t.cell = uniform(rng, 4.0, 12.0);
  const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  t.dir_x = std::cos(angle);
  t.dir_y = std::sin(angle);
  t.offset = uniform(rng, 0.0, 8.0);
  return t;
}

}  // namespace

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  Split current = Split::train;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;  // plain comment
      const std::string key = trim(std::string_view(line).substr(1, eq - 1));
      const std::string value = trim(std::string_view(line).substr(eq + 1));
      if (key == "split") current = parse_split(value);
      else if (key == "depth_min") m.depth_min = parse_double(key, value);
      else if (key == "depth_max") m.depth_max = parse_double(key, value);
      else if (key == "focal_length") m.camera.focal_length_m = parse_double(key, value);
      else if (key == "aperture") m.camera.aperture_m = parse_double(key, value);
      else if (key == "focus_distance") m.camera.focus_distance_m = parse_double(key, value);
      else if (key == "coc_to_pixel") m.camera.coc_to_pixel = parse_double(key, value);
      else if (key == "seed") {
        const auto r = std::from_chars(value.data(), value.data() + value.size(), m.seed);
        if (value.empty() || r.ec != std::errc{} || r.ptr != value.data() + value.size()) {
          throw DataError("manifest: 'seed' expects an unsigned integer, got '" + value + "'");
        }
      }
      else if (key == "depth_png_scale") m.depth_png_scale = parse_double(key, value);
      else if (key == "rgb_mean") m.normalization.mean = parse_triplet(key, value);
      else if (key == "rgb_std") m.normalization.stddev = parse_triplet(key, value);
      else if (key == "blur_levels") m.blur_levels = static_cast<std::size_t>(parse_double(key, value));
      else if (key == "input_size") {
        const auto x = value.find('x');
        if (x == std::string::npos) throw DataError("manifest: input_size expects HxW");
        m.input_size = std::array<std::size_t, 2>{
            static_cast<std::size_t>(parse_double(key, value.substr(0, x))),
            static_cast<std::size_t>(parse_double(key, value.substr(x + 1)))};
      } else {
        throw DataError("manifest " + path.string() + ":" + std::to_string(lineno) +
                        ": unknown header key '" + key + "'");
      }
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() < 3 || cols.size() > 4) {
      throw DataError("manifest " + path.string() + ":" + std::to_string(lineno) +
                      ": expected id<TAB>image<TAB>depth[<TAB>defocused]");
    }
    ManifestEntry e{cols[0], cols[1], cols[2], cols.size() == 4 ? cols[3] : std::string{}, current};
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

void DatasetManifest::validate() const {
  if (!(depth_max > depth_min) || depth_min < 0.0) {
    throw DataError("manifest depth range must satisfy 0 <= min < max");
  }
  camera.validate();
  std::vector<std::string> seen;
  for (const auto& e : entries) seen.push_back(e.id);
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
    throw DataError("manifest ids must be unique (a sample cannot sit in two splits)");
  }
  for (auto s : normalization.stddev) {
    if (!(s > 0.0)) throw DataError("manifest rgb_std entries must be positive");
  }
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write manifest " + path.string());
  // Shortest text that parses back to the same double.
  const auto num = [](double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  };
  const auto& mu = normalization.mean;
  const auto& sd = normalization.stddev;
  os << "#depth_min=" << num(depth_min) << "\n#depth_max=" << num(depth_max)
     << "\n#focal_length=" << num(camera.focal_length_m) << "\n#aperture=" << num(camera.aperture_m)
     << "\n#focus_distance=" << num(camera.focus_distance_m) << "\n#coc_to_pixel=" << num(camera.coc_to_pixel)
     << "\n#seed=" << seed << "\n#depth_png_scale=" << num(depth_png_scale)
     << "\n#blur_levels=" << blur_levels << "\n#rgb_mean=" << num(mu[0]) << ',' << num(mu[1]) << ','
     << num(mu[2]) << "\n#rgb_std=" << num(sd[0]) << ',' << num(sd[1]) << ',' << num(sd[2]) << '\n';
  if (input_size) os << "#input_size=" << (*input_size)[0] << 'x' << (*input_size)[1] << '\n';
  for (auto split : {Split::train, Split::test}) {
    bool header = false;
    for (const auto& e : entries) {
      if (e.split != split) continue;
      if (!header) {
        os << "#split=" << to_string(split) << '\n';
        header = true;
      }
      os << e.id << '\t' << e.image << '\t' << e.depth;
      if (!e.defocused.empty()) os << '\t' << e.defocused;
      os << '\n';
    }
  }
}

std::vector<std::string> DatasetManifest::ids(Split split) const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(e.id);
  }
  return out;
}

const ManifestEntry& DatasetManifest::entry(std::string_view id) const {
  for (const auto& e : entries) {
    if (e.id == id) return e;
  }
  throw DataError("manifest has no sample '" + std::string(id) + "'");
}

Sample load_sample(const DatasetManifest& manifest, std::string_view id) {
  const auto& e = manifest.entry(id);
  const auto image_path = resolve(manifest.root, e.image);
  const auto depth_path = resolve(manifest.root, e.depth);
  for (const auto& p : {image_path, depth_path}) {
    if (!std::filesystem::exists(p)) throw DataError("missing file " + p.string() + " for sample " + e.id);
  }
  Sample s;
  s.id = e.id;
  try {
    s.aif = load_rgb(image_path);
    s.depth_m = load_depth(depth_path, manifest.depth_png_scale);
  } catch (const ImageIoError& err) {
    throw DataError(err.what());
  }
  if (s.aif.dim(2) != s.depth_m.dim(2) || s.aif.dim(3) != s.depth_m.dim(3)) {
    throw DataError("sample " + e.id + ": image " + to_string(s.aif.shape()) + " and depth " +
                    to_string(s.depth_m.shape()) + " differ in size");
  }
  std::size_t out_of_range = 0;
  for (float d : s.depth_m.data()) {
    if (!(d >= manifest.depth_min && d <= manifest.depth_max)) ++out_of_range;
  }
  if (out_of_range) {
    throw DataError("sample " + e.id + ": " + std::to_string(out_of_range) +
                    " depth pixel(s) outside the declared range [" + std::to_string(manifest.depth_min) +
                    ", " + std::to_string(manifest.depth_max) + "] m");
  }
  bool resized = false;
  if (manifest.input_size) {
    const auto [h, w] = *manifest.input_size;
    if (s.aif.dim(2) != h || s.aif.dim(3) != w) {
      s.aif = resize_bilinear(s.aif, h, w);
      s.depth_m = resize_nearest(s.depth_m, h, w);
      resized = true;
    }
  }
  // A stored defocused image only matches the native resolution.
  const auto defocused_path = e.defocused.empty() ? std::filesystem::path{} : resolve(manifest.root, e.defocused);
  if (!defocused_path.empty() && std::filesystem::exists(defocused_path) && !resized) {
    try {
      s.defocused = load_rgb(defocused_path);
    } catch (const ImageIoError& err) {
      throw DataError(err.what());
    }
    if (s.defocused.shape() != s.aif.shape()) {
      throw DataError("sample " + e.id + ": stored defocused image has shape " +
                      to_string(s.defocused.shape()));
    }
  } else {
    DefocusOptions opt;
    opt.levels = manifest.blur_levels;
    s.defocused = defocus_image(s.aif, s.depth_m, manifest.camera, opt);
  }
  return s;
}

void SceneConfig::validate() const {
  if (height < 2 || width < 2) throw DataError("scene size must be at least 2x2");
  if (!(depth_max > depth_min) || !(depth_min > 0.0)) {
    throw DataError("scene depth range must satisfy 0 < min < max");
  }
  if (min_planes < 1 || max_planes < min_planes) throw DataError("scene plane counts are invalid");
  camera.validate();
}

Sample synthesize_scene(const SceneConfig& config, std::uint64_t seed, std::string id) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t h = config.height, w = config.width;
  const std::size_t planes = uniform_int(rng, config.min_planes, config.max_planes);

  std::vector<std::size_t> region(h * w, 0);
  std::vector<double> depths;
  std::vector<Texture> textures;
  for (std::size_t p = 0; p < planes; ++p) {
    depths.push_back(uniform(rng, config.depth_min, config.depth_max));
    textures.push_back(random_texture(rng));
    if (p == 0) continue;  // background covers everything
    const std::size_t rw = uniform_int(rng, std::max<std::size_t>(1, w / 5), std::max<std::size_t>(1, w / 2));
    const std::size_t rh = uniform_int(rng, std::max<std::size_t>(1, h / 5), std::max<std::size_t>(1, h / 2));
    const std::size_t x0 = uniform_int(rng, 0, w - rw);
    const std::size_t y0 = uniform_int(rng, 0, h - rh);
    for (std::size_t i = y0; i < y0 + rh; ++i) {
      for (std::size_t j = x0; j < x0 + rw; ++j) region[i * w + j] = p;
    }
  }

  Sample s;
  s.id = id.empty() ? "scene_" + std::to_string(seed) : std::move(id);
  s.aif = Tensor<float>(Shape{1, 3, h, w});
  s.depth_m = Tensor<float>(Shape{1, 1, h, w});
  auto img = s.aif.data_mut();
  auto dep = s.depth_m.data_mut();
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const auto r = region[i * w + j];
      dep[i * w + j] = static_cast<float>(depths[r]);
      for (std::size_t c = 0; c < 3; ++c) {
        img[(c * h + i) * w + j] = static_cast<float>(
            std::clamp(textures[r].value(c, static_cast<double>(i), static_cast<double>(j)), 0.0, 1.0));
      }
    }
  }
  // Depths are stored in float; clamp so rounding never leaves the declared range.
  for (auto& d : dep) {
    d = std::clamp(d, static_cast<float>(config.depth_min), static_cast<float>(config.depth_max));
    if (d < config.depth_min) d = std::nextafter(d, std::numeric_limits<float>::max());
    if (d > config.depth_max) d = std::nextafter(d, 0.0f);
  }
  s.defocused = defocus_image(s.aif, s.depth_m, config.camera, config.defocus);
  return s;
}

Sample flip_horizontal(const Sample& sample) {
  auto flip = [](const Tensor<float>& t) {
    if (!t.defined()) return t;
    Tensor<float> out(t.shape());
    const auto& s = t.shape();
    const std::size_t rows = s[0] * s[1] * s[2], w = s[3];
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) out.data_mut()[r * w + j] = t.data()[r * w + (w - 1 - j)];
    }
    return out;
  };
  Sample out;
  out.id = sample.id;
  out.aif = flip(sample.aif);
  out.depth_m = flip(sample.depth_m);
  out.defocused = flip(sample.defocused);
  out.input = flip(sample.input);
  return out;
}

Tensor<float> center_scale(const Tensor<float>& rgb, const RgbNormalization& norm) {
  const auto& s = rgb.shape();
  if (s.size() != 4 || s[1] != 3) throw ShapeError("center_scale expects [N,3,H,W], got " + to_string(s));
  Tensor<float> out(s);
  const std::size_t plane = s[2] * s[3];
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t off = (n * 3 + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        out.data_mut()[off + k] =
            static_cast<float>((rgb.data()[off + k] - norm.mean[c]) / norm.stddev[c]);
      }
    }
  }
  return out;
}

Sample augment(const Sample& sample, std::mt19937_64& rng, const RgbNormalization& norm,
               double flip_probability) {
  const bool flip = uniform01(rng) < flip_probability;
  Sample out = flip ? flip_horizontal(sample) : sample;
  out.input = center_scale(out.defocused, norm);
  return out;
}

std::vector<std::vector<std::size_t>> batches(std::size_t count, std::size_t batch_size,
                                              std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
  if (count == 0) throw DataError("cannot batch an empty split");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed(seed, epoch));
  for (std::size_t i = count; i-- > 1;) std::swap(order[i], order[rng() % (i + 1)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < count; b += batch_size) {
    out.emplace_back(order.begin() + static_cast<long>(b),
                     order.begin() + static_cast<long>(std::min(count, b + batch_size)));
  }
  return out;
}

std::vector<std::vector<std::string>> batches(const DatasetManifest& manifest, Split split,
                                              std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch) {
  const auto ids = manifest.ids(split);
  std::vector<std::vector<std::string>> out;
  for (const auto& b : batches(ids.size(), batch_size, seed, epoch)) {
    std::vector<std::string> names;
    for (auto i : b) names.push_back(ids[i]);
    out.push_back(std::move(names));
  }
  return out;
}

template <typename T>
Tensor<T> DepthScaling::to_unit(const Tensor<T>& depth) const {
  Tensor<T> out = depth.clone();
  for (auto& v : out.data_mut()) v = static_cast<T>(to_unit(static_cast<double>(v)));
  return out;
}

template <typename T>
Tensor<T> DepthScaling::to_meters(const Tensor<T>& depth) const {
  Tensor<T> out = depth.clone();
  for (auto& v : out.data_mut()) v = static_cast<T>(to_meters(static_cast<double>(v)));
  return out;
}

template Tensor<float> DepthScaling::to_unit(const Tensor<float>&) const;
template Tensor<double> DepthScaling::to_unit(const Tensor<double>&) const;
template Tensor<float> DepthScaling::to_meters(const Tensor<float>&) const;
template Tensor<double> DepthScaling::to_meters(const Tensor<double>&) const;

Batch stack_batch(const std::vector<const Sample*>& samples, const DepthScaling& scaling) {
  if (samples.empty()) throw DataError("cannot stack an empty batch");
  const auto& first = *samples.front();
  if (!first.input.defined()) throw DataError("stack_batch needs augmented samples");
  const std::size_t n = samples.size(), h = first.aif.dim(2), w = first.aif.dim(3);
  Batch b;
  b.input = Tensor<float>(Shape{n, 3, h, w});
  b.aif = Tensor<float>(Shape{n, 3, h, w});
  b.defocused = Tensor<float>(Shape{n, 3, h, w});
  b.depth = Tensor<float>(Shape{n, 1, h, w});
  const std::size_t rgb = 3 * h * w, plane = h * w;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = *samples[i];
    if (s.aif.dim(2) != h || s.aif.dim(3) != w) throw DataError("batch samples differ in size");
    b.ids.push_back(s.id);
    std::copy_n(s.input.data().begin(), rgb, b.input.data_mut().begin() + i * rgb);
    std::copy_n(s.aif.data().begin(), rgb, b.aif.data_mut().begin() + i * rgb);
    std::copy_n(s.defocused.data().begin(), rgb, b.defocused.data_mut().begin() + i * rgb);
    for (std::size_t k = 0; k < plane; ++k) {
      b.depth.data_mut()[i * plane + k] = static_cast<float>(scaling.to_unit(s.depth_m.data()[k]));
    }
  }
  return b;
}

Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t height, std::size_t width) {
  const auto& s = image.shape();
  if (s.size() != 4) throw ShapeError("resize expects NCHW, got " + to_string(s));
  if (s[2] == height && s[3] == width) return image.clone();
  Tensor<float> out(Shape{s[0], s[1], height, width});
  const double sy = static_cast<double>(s[2]) / static_cast<double>(height);
  const double sx = static_cast<double>(s[3]) / static_cast<double>(width);
  for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
    const float* src = image.data().data() + p * s[2] * s[3];
    float* dst = out.data_mut().data() + p * height * width;
    for (std::size_t i = 0; i < height; ++i) {
      const double fy = std::clamp((static_cast<double>(i) + 0.5) * sy - 0.5, 0.0, static_cast<double>(s[2] - 1));
      const auto y0 = static_cast<std::size_t>(fy);
      const std::size_t y1 = std::min(y0 + 1, s[2] - 1);
      const double ty = fy - static_cast<double>(y0);
      for (std::size_t j = 0; j < width; ++j) {
        const double fx = std::clamp((static_cast<double>(j) + 0.5) * sx - 0.5, 0.0, static_cast<double>(s[3] - 1));
        const auto x0 = static_cast<std::size_t>(fx);
        const std::size_t x1 = std::min(x0 + 1, s[3] - 1);
        const double tx = fx - static_cast<double>(x0);
        const double top = src[y0 * s[3] + x0] * (1 - tx) + src[y0 * s[3] + x1] * tx;
        const double bot = src[y1 * s[3] + x0] * (1 - tx) + src[y1 * s[3] + x1] * tx;
        dst[i * width + j] = static_cast<float>(top * (1 - ty) + bot * ty);
      }
    }
  }
  return out;
}

Tensor<float> resize_nearest(const Tensor<float>& image, std::size_t height, std::size_t width) {
  const auto& s = image.shape();
  if (s.size() != 4) throw ShapeError("resize expects NCHW, got " + to_string(s));
  Tensor<float> out(Shape{s[0], s[1], height, width});
  for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
    for (std::size_t i = 0; i < height; ++i) {
      const std::size_t y = std::min(s[2] - 1, (2 * i + 1) * s[2] / (2 * height));
      for (std::size_t j = 0; j < width; ++j) {
        const std::size_t x = std::min(s[3] - 1, (2 * j + 1) * s[3] / (2 * width));
        out.data_mut()[(p * height + i) * width + j] = image.data()[(p * s[2] + y) * s[3] + x];
      }
    }
  }
  return out;
}

DatasetManifest write_synthetic_dataset(const SceneConfig& scene, std::size_t train_count,
                                        std::size_t test_count, std::uint64_t seed,
                                        const RgbNormalization& normalization,
                                        const std::filesystem::path& dir) {
  scene.validate();
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.root = dir;
  m.depth_min = scene.depth_min;
  m.depth_max = scene.depth_max;
  m.camera = scene.camera;
  m.seed = seed;
  m.normalization = normalization;
  m.blur_levels = scene.defocus.levels;
  for (std::size_t i = 0; i < train_count + test_count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene_%04zu", i);
    const auto s = synthesize_scene(scene, synthetic_scene_seed(seed, i), id);
    ManifestEntry e{id, std::string(id) + "_aif.png", std::string(id) + "_depth.pfm",
                    std::string(id) + "_defocused.png", i < train_count ? Split::train : Split::test};
    try {
      write_png(dir / e.image, tensor_to_png(s.aif, 8));
      write_pfm(dir / e.depth, tensor_to_pfm(s.depth_m));
      write_png(dir / e.defocused, tensor_to_png(s.defocused, 8));
    } catch (const ImageIoError& err) {
      throw DataError(err.what());
    }
    m.entries.push_back(std::move(e));
  }
  m.save(dir / "manifest.txt");
  return m;
}

}  // namespace hded
