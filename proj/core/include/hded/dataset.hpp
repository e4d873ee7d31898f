#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hded/optics.hpp"
#include "hded/tensor.hpp"

namespace hded {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, test };
std::string_view to_string(Split s);
Split parse_split(std::string_view name);

/// One training/evaluation unit. Images are [1,3,H,W] in [0,1]; depth is
/// [1,1,H,W] in meters.
struct Sample {
  std::string id;
  Tensor<float> aif;
  Tensor<float> depth_m;
  Tensor<float> defocused;
  Tensor<float> input;  // network input (center-scaled defocused); set by augment()
};

/// Per-channel mean/std applied to network inputs.
struct RgbNormalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
};

struct ManifestEntry {
  std::string id;
  std::string image;
  std::string depth;
  std::string defocused;  // optional; synthesized when empty or missing on disk
  Split split = Split::train;
};

/// Line-oriented index of a dataset:
///   #key=value                      header (range, camera, seed, ...)
///   #split=train | #split=test      following entries belong to that split
///   id<TAB>image<TAB>depth[<TAB>defocused]
/// Paths are relative to the manifest's directory unless absolute.
struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  double depth_min = 0.7;
  double depth_max = 10.0;
  ThinLensCamera camera;
  std::uint64_t seed = 0;
  double depth_png_scale = 0.001;  // meters per 16-bit PNG unit
  RgbNormalization normalization;
  std::size_t blur_levels = 16;
  std::optional<std::array<std::size_t, 2>> input_size;  // (H, W) resize target

  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::vector<std::string> ids(Split split) const;
  const ManifestEntry& entry(std::string_view id) const;
  void validate() const;
};

/// Reads image + depth, resizes when the manifest asks for it and synthesizes
/// the defocused image when none is stored.
Sample load_sample(const DatasetManifest& manifest, std::string_view id);

struct SceneConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  double depth_min = 0.7;
  double depth_max = 10.0;
  ThinLensCamera camera;
  std::size_t min_planes = 2;
  std::size_t max_planes = 6;
  DefocusOptions defocus;

  void validate() const;
};

/// Piecewise-planar scene: a background plane plus occluding fronto-parallel
/// rectangles, each with its own depth and checkerboard/gradient texture.
Sample synthesize_scene(const SceneConfig& config, std::uint64_t seed, std::string id = {});

Sample flip_horizontal(const Sample& sample);
Tensor<float> center_scale(const Tensor<float>& rgb, const RgbNormalization& norm);

/// Horizontal flip of every image and the depth map with probability
/// `flip_probability`, then center-scaling of the network input. Nothing that
/// changes the blur is applied.
Sample augment(const Sample& sample, std::mt19937_64& rng, const RgbNormalization& norm,
               double flip_probability = 0.5);

/// Epoch-seeded shuffled index batches; the last batch may be partial.
std::vector<std::vector<std::size_t>> batches(std::size_t count, std::size_t batch_size,
                                              std::uint64_t seed, std::uint64_t epoch);
std::vector<std::vector<std::string>> batches(const DatasetManifest& manifest, Split split,
                                              std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch);

/// Maps depth in meters to [0,1] over the dataset range, and back.
struct DepthScaling {
  bool enabled = true;
  double min_m = 0.7;
  double max_m = 10.0;

  double to_unit(double m) const { return enabled ? (m - min_m) / (max_m - min_m) : m; }
  double to_meters(double u) const { return enabled ? min_m + u * (max_m - min_m) : u; }
  template <typename T> Tensor<T> to_unit(const Tensor<T>& depth) const;
  template <typename T> Tensor<T> to_meters(const Tensor<T>& depth) const;
};

struct Batch {
  std::vector<std::string> ids;
  Tensor<float> input;      // [B,3,H,W]
  Tensor<float> aif;        // [B,3,H,W]
  Tensor<float> depth;      // [B,1,H,W], scaled by DepthScaling
  Tensor<float> defocused;  // [B,3,H,W]
};

/// Stacks already-augmented samples (their `input` must be set).
Batch stack_batch(const std::vector<const Sample*>& samples, const DepthScaling& scaling);

/// Bilinear (images) / nearest (depth) resizing to an explicit network input size.
Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t height, std::size_t width);
Tensor<float> resize_nearest(const Tensor<float>& image, std::size_t height, std::size_t width);

/// Splits `n` into a new independent 64-bit seed stream.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

/// Seed of the i-th synthetic scene of a run; shared by in-memory training and
/// datasets written to disk so both see the same scenes.
inline std::uint64_t synthetic_scene_seed(std::uint64_t run_seed, std::size_t index) {
  return mix_seed(mix_seed(run_seed, 1), index);
}

/// Writes `train_count + test_count` scenes into `dir` as <id>_aif.png,
/// <id>_depth.pfm and <id>_defocused.png plus manifest.txt. Ids are scene_NNNN.
DatasetManifest write_synthetic_dataset(const SceneConfig& scene, std::size_t train_count,
                                        std::size_t test_count, std::uint64_t seed,
                                        const RgbNormalization& normalization,
                                        const std::filesystem::path& dir);

}  // namespace hded
