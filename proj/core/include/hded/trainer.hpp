#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hded/dataset.hpp"
#include "hded/losses.hpp"
#include "hded/metrics.hpp"
#include "hded/network.hpp"
#include "hded/optim.hpp"

namespace hded {

/// Where training samples come from: a manifest on disk, or scenes synthesized
/// in memory from the run seed.
struct DataSource {
  std::optional<std::filesystem::path> manifest;
  std::size_t synthetic_train = 8;
  std::size_t synthetic_test = 0;  // 0: evaluate on the training scenes
  SceneConfig scene;               // height/width follow the model input size
};

struct EpochRecord;

struct TrainConfig {
  std::size_t epochs = 500;
  std::size_t batch_size = 4;
  OptimSettings optim;
  LossVariant variant = LossVariant::l1grad_charb_ssim;
  LossWeights weights;
  ModelConfig model;
  HeadMode ablation = HeadMode::both;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;                // epochs between checkpoints/evals; 0 = end only
  std::optional<std::size_t> max_steps;      // hard cap on optimizer steps
  double decay_fraction = 0.6;               // decay point when epochs != 500
  bool normalize_depth = true;               // regress depth mapped to [0,1]
  double flip_probability = 0.5;
  RgbNormalization normalization{{0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}};
  DataSource data;
  MetricConfig metrics;
  std::filesystem::path out_dir = "run";
  std::function<void(const EpochRecord&)> on_epoch;  // progress hook, not part of the config echo

  void validate() const;
  /// Optimizer settings with the decay epoch rescaled to this run's length.
  OptimSettings schedule() const;
  /// Everything that influences the numbers a run produces (out_dir excluded).
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Micro-scale preset: eight synthetic 64x64 scenes, 1/8 channel width,
/// full-batch SGD for 500 steps with depth regressed in meters.
TrainConfig micro_config();

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  LossComponents loss;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::size_t steps = 0;
  LossComponents mean;
};

struct EvalRecord {
  std::size_t epoch = 0;
  MetricReport report;
};

/// Line-delimited JSON training record. `run.jsonl` holds everything that is a
/// function of (seed, config); wall-clock lines go to `timing.jsonl` so that two
/// runs of the same config compare byte-for-byte.
class RunLog {
 public:
  std::string run_id;
  nlohmann::json config;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::vector<EvalRecord> evals;
  std::vector<nlohmann::json> timings;

  /// Starts streaming to `dir`; later appends are flushed line by line.
  void open(const std::filesystem::path& dir);
  void append(const StepRecord& r);
  void append(const EpochRecord& r);
  void append(const EvalRecord& r);
  void append_timing(nlohmann::json line);

  static RunLog load(const std::filesystem::path& dir);

 private:
  void write_line(std::ofstream& os, const nlohmann::json& j);
  std::ofstream run_;
  std::ofstream timing_;
};

std::string run_id_for(const nlohmann::json& config);
nlohmann::json to_json(const LossComponents& c);
LossComponents loss_components_from_json(const nlohmann::json& j);

/// In-memory dataset of a run.
struct LoadedData {
  std::vector<Sample> train;
  std::vector<Sample> test;
  DepthScaling scaling;
  RgbNormalization normalization;
};

LoadedData load_data(const TrainConfig& config);

struct TrainResult {
  RunLog log;
  Model<float> model;
  std::filesystem::path checkpoint;
  MetricReport train_report;
  std::optional<MetricReport> test_report;
};

/// Runs the full schedule and writes run.jsonl, timing.jsonl, model.ckpt and
/// model.json into config.out_dir. Throws NumericalError on a non-finite loss.
TrainResult train(const TrainConfig& config);

/// Eval-mode metrics of `model` on `samples`, depth reported in meters.
MetricReport evaluate(Model<float>& model, const std::vector<Sample>& samples,
                      const DepthScaling& scaling, const RgbNormalization& norm,
                      const MetricConfig& cfg, const std::string& split, bool with_ranges = false);

/// Everything needed to rebuild a trained model next to its checkpoint.
struct ModelCard {
  ModelConfig model;
  DepthScaling scaling;
  RgbNormalization normalization;
  std::string run_id;

  nlohmann::json to_json() const;
  static ModelCard from_json(const nlohmann::json& j);
};

void save_model(const Model<float>& model, const ModelCard& card, const std::filesystem::path& checkpoint);
/// Reads `checkpoint` and its `.json` card.
Model<float> load_model(const std::filesystem::path& checkpoint, ModelCard* card = nullptr);

struct AblationResult {
  std::vector<TrainResult> runs;  // both, depth_only, deblur_only
  std::string csv;
};

/// Trains the three head configurations from scratch under one seed and writes
/// ablation.csv into base.out_dir.
AblationResult ablation_suite(const TrainConfig& base);
std::string ablation_csv(const MetricReport& both, const MetricReport& depth_only,
                         const MetricReport& deblur_only);

struct GridResult {
  std::vector<TrainResult> runs;  // kAllLossVariants order
  std::string csv;
};

/// One run per loss variant; writes loss_grid.csv into base.out_dir.
GridResult loss_grid(const TrainConfig& base);

struct InferOutputs {
  std::optional<std::filesystem::path> depth_pfm;
  std::optional<std::filesystem::path> depth_png;
  std::optional<std::filesystem::path> aif_png;
};

/// Predicts depth and the sharp image for one RGB PNG. Outputs keep the input size.
InferOutputs infer(Model<float>& model, const ModelCard& card, const std::filesystem::path& image,
                   const std::filesystem::path& out_dir);

/// Metrics of the split the harnesses report on: test when present, train otherwise.
const MetricReport& reported(const TrainResult& r);

}  // namespace hded
