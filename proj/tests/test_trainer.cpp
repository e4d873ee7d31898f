#include <doctest.h>

#include <fstream>
#include <sstream>

#include <hded/checkpoint.hpp>
#include <hded/image_io.hpp>
#include <hded/trainer.hpp>

#include "test_util.hpp"

using namespace hded;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

TrainConfig quick(const std::string& name) {
  auto c = micro_config();
  c.model.input_height = c.model.input_width = 32;
  c.data.synthetic_train = 4;
  c.batch_size = 2;
  c.epochs = 3;
  c.flip_probability = 0.5;
  c.out_dir = test::scratch_dir(name);
  return c;
}

std::uint64_t hash_params(const Model<float>& m, const std::string& prefix) {
  std::uint64_t h = test::fnv1a("", 0);
  for (const auto& p : m.parameters()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    h = test::fnv1a(p.tensor.data().data(), p.tensor.numel() * sizeof(float), h);
  }
  return h;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  CHECK(c.schedule().decay_epoch == 300);
  CHECK(c.schedule().effective_lr(299) == 2e-4);
  CHECK(c.schedule().effective_lr(300) == doctest::Approx(2e-5).epsilon(1e-15));
  c.epochs = 10;
  CHECK(c.schedule().decay_epoch == 6);
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("runs are reproducible and logs reload") {
  auto a = quick("det_a"), b = quick("det_b");
  a.epochs = b.epochs = 5;
  const auto ra = train(a);
  const auto rb = train(b);
  CHECK(slurp(a.out_dir / "run.jsonl") == slurp(b.out_dir / "run.jsonl"));
  CHECK(slurp(a.out_dir / "model.ckpt") == slurp(b.out_dir / "model.ckpt"));
  CHECK(ra.log.run_id == rb.log.run_id);
  CHECK(ra.log.steps.size() == 10);

  // The logged rate drops tenfold at 60% of the epochs.
  const auto& ep = ra.log.epochs;
  REQUIRE(ep.size() == 5);
  CHECK(ep[2].lr == 0.05);
  CHECK(ep[3].lr == doctest::Approx(0.005).epsilon(1e-15));

  const auto back = RunLog::load(a.out_dir);
  CHECK(back.run_id == ra.log.run_id);
  REQUIRE(back.steps.size() == ra.log.steps.size());
  CHECK(back.steps[7].loss.total == ra.log.steps[7].loss.total);
  CHECK(back.epochs[4].mean.ssim_loss == ra.log.epochs[4].mean.ssim_loss);
  REQUIRE(back.evals.size() == 1);
  CHECK(back.evals[0].report.depth->rmse == ra.train_report.depth->rmse);
  CHECK(back.config == a.to_json());
  CHECK_FALSE(back.timings.empty());

  // Components sum to the total on every step.
  for (const auto& s : ra.log.steps) {
    CHECK(s.loss.depth + 0.01 * s.loss.deblur == doctest::Approx(s.loss.total).epsilon(1e-6));
    CHECK(s.loss.l1_depth + 0.001 * s.loss.grad_smooth == doctest::Approx(s.loss.depth).epsilon(1e-6));
  }

  auto other = quick("det_c");
  other.seed = 1;
  other.epochs = 5;
  CHECK(train(other).log.steps.back().loss.total != ra.log.steps.back().loss.total);
}

TEST_CASE("a single-head objective never moves the other head") {
  auto cfg = quick("iso");
  auto data = load_data(cfg);
  for (auto mode : {HeadMode::depth_only, HeadMode::deblur_only}) {
    auto model = Model<float>::build(cfg.model, 1);
    const std::string frozen = mode == HeadMode::depth_only ? "aifd." : "ded.";
    const std::string moving = mode == HeadMode::depth_only ? "ded." : "aifd.";
    const auto frozen_before = hash_params(model, frozen), moving_before = hash_params(model, moving);
    const auto enc_before = hash_params(model, "enc.");
    OptimState<float> opt(cfg.optim);
    std::mt19937_64 rng(0);
    for (int step = 0; step < 3; ++step) {
      std::vector<Sample> aug;
      for (const auto& s : data.train) aug.push_back(augment(s, rng, data.normalization, 0.5));
      std::vector<const Sample*> ptrs;
      for (const auto& s : aug) ptrs.push_back(&s);
      const auto batch = stack_batch(ptrs, data.scaling);
      model.zero_grad();
      const auto f = model.encode(batch.input);
      const auto depth = model.decode_depth(f);
      const auto aif = model.decode_aif(f, batch.defocused);
      const bool d = mode == HeadMode::depth_only;
      const auto loss = total_loss<float>(d ? &depth : nullptr, d ? &batch.depth : nullptr, d ? nullptr : &aif,
                                          d ? nullptr : &batch.aif, cfg.weights, cfg.variant, mode);
      backward(loss.total);
      auto params = model.parameter_tensors();
      sgd_step(std::span<Tensor<float>>(params), opt, 0);
      reset_tape<float>();
    }
    CAPTURE(to_string(mode));
    CHECK(hash_params(model, frozen) == frozen_before);
    CHECK(hash_params(model, moving) != moving_before);
    CHECK(hash_params(model, "enc.") != enc_before);
  }
}

TEST_CASE("ablation runs carry only their own head") {
  auto c = quick("abl_heads");
  c.ablation = HeadMode::deblur_only;
  c.model.heads = HeadMode::deblur_only;
  c.epochs = 1;
  const auto r = train(c);
  CHECK_FALSE(r.model.has_depth_head());
  CHECK_FALSE(r.train_report.depth);
  CHECK(r.train_report.psnr_db);
  CHECK(r.log.steps[0].loss.depth == 0.0);

  c.model.heads = HeadMode::depth_only;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("divergence aborts with a numerical error") {
  auto c = quick("diverge");
  c.optim.learning_rate = 1e30;
  c.epochs = 20;
  CHECK_THROWS_AS(train(c), NumericalError);
}

TEST_CASE("intermediate checkpoints and inference") {
  auto c = quick("infer");
  c.epochs = 4;
  c.eval_every = 2;
  const auto r = train(c);
  CHECK(std::filesystem::exists(c.out_dir / "model_epoch0002.ckpt"));
  CHECK(std::filesystem::exists(c.out_dir / "model_epoch0002.json"));
  CHECK(r.log.evals.size() == 2);

  ModelCard card;
  auto model = load_model(r.checkpoint, &card);
  CHECK(card.run_id == r.log.run_id);
  const auto img_path = c.out_dir / "odd.png";
  std::mt19937_64 rng(4);
  write_png(img_path, tensor_to_png(test::random_tensor<float>({1, 3, 45, 50}, rng, 0.0, 1.0)));
  const auto o1 = infer(model, card, img_path, c.out_dir / "o1");
  const auto o2 = infer(model, card, img_path, c.out_dir / "o2");
  REQUIRE(o1.depth_pfm);
  REQUIRE(o1.aif_png);
  const auto depth = read_pfm(*o1.depth_pfm);
  CHECK(depth.width == 50);
  CHECK(depth.height == 45);
  CHECK(read_png(*o1.aif_png).width == 50);
  CHECK(read_png(*o1.depth_png).height == 45);
  CHECK(slurp(*o1.depth_pfm) == slurp(*o2.depth_pfm));
  CHECK(slurp(*o1.aif_png) == slurp(*o2.aif_png));

  // A checkpoint whose deblurring head was removed still predicts depth.
  model.remove_head(HeadMode::depth_only);
  card.model.heads = HeadMode::depth_only;
  save_model(model, card, c.out_dir / "depth_only.ckpt");
  auto reduced = load_model(c.out_dir / "depth_only.ckpt", &card);
  const auto o3 = infer(reduced, card, img_path, c.out_dir / "o3");
  CHECK(o3.depth_pfm);
  CHECK_FALSE(o3.aif_png);
  CHECK(slurp(*o3.depth_pfm) == slurp(*o1.depth_pfm));

  auto j = nlohmann::json::parse(slurp(c.out_dir / "model.json"));
  j["checkpoint_version"] = 99;
  std::ofstream(c.out_dir / "model.json") << j.dump();
  CHECK_THROWS_AS(load_model(r.checkpoint), CheckpointError);
  CHECK_THROWS_AS(infer(reduced, card, c.out_dir / "none.png", c.out_dir), DataError);
}

TEST_CASE("ablation table gains are exact differences") {
  MetricReport both, depth_only, deblur_only;
  both.depth = DepthMetrics{0.3, 0.1, 0.7, 0.9, 0.95, 10};
  both.psnr_db = 31.25;
  both.ssim = 0.93;
  depth_only.depth = DepthMetrics{0.35, 0.12, 0.6, 0.85, 0.97, 10};
  deblur_only.psnr_db = 30.1;
  deblur_only.ssim = 0.91;
  const auto csv = ablation_csv(both, depth_only, deblur_only);
  std::istringstream is(csv);
  std::string line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    cols.resize(9);
    rows.push_back(cols);
  }
  REQUIRE(rows.size() == 7);
  CHECK(rows[0] == std::vector<std::string>{"section", "row", "RMSE", "Abs-rel", "delta1", "delta2", "delta3", "PSNR", "SSIM"});
  CHECK(rows[3][1] == "gain");
  CHECK(std::stod(rows[3][7]) == 31.25 - 30.1);
  CHECK(std::stod(rows[3][8]) == 0.93 - 0.91);
  CHECK(rows[6][0] == "depth");
  CHECK(std::stod(rows[6][2]) == 0.35 - 0.3);
  CHECK(std::stod(rows[6][3]) == 0.12 - 0.1);
  CHECK(std::stod(rows[6][4]) == 0.7 - 0.6);
  CHECK(std::stod(rows[6][6]) == 0.95 - 0.97);
  CHECK(csv.find("34.849") != std::string::npos);
  CHECK(csv.find("31.941") != std::string::npos);
}
