// Acceptance runner: one PASS/FAIL line per criterion.
//   hded_acceptance               all criteria
//   hded_acceptance --criterion 6 just one
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <hded/checkpoint.hpp>
#include <hded/gradcheck.hpp>
#include <hded/image_io.hpp>
#include <hded/losses.hpp>
#include <hded/metrics.hpp>
#include <hded/network.hpp>
#include <hded/ops.hpp>
#include <hded/optics.hpp>
#include <hded/trainer.hpp>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace hded;
using test::random_tensor;

namespace {

// Collects failed sub-checks and a short summary of measured values.
struct Verdict {
  std::vector<std::string> failures;
  std::string detail;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const char* fmt, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, fmt, args...);
    if (!detail.empty()) detail += "; ";
    detail += buf;
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<std::vector<std::string>> csv_rows(const std::string& csv) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(csv);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    bool quoted = false;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i < line.size() && line[i] == '"') quoted = !quoted;
      if (i == line.size() || (line[i] == ',' && !quoted)) {
        cols.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    rows.push_back(cols);
  }
  return rows;
}

bool finite_field(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    return used == s.size() && std::isfinite(v);
  } catch (const std::exception&) {
    return false;
  }
}

// Short micro-scale runs for the harness criteria.
TrainConfig harness_config(const std::string& name, std::size_t epochs) {
  auto c = micro_config();
  c.epochs = epochs;
  c.out_dir = test::scratch_dir(name);
  return c;
}

void gradient_suite(Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run_gradcheck();
  const double secs = seconds_since(t0);
  std::size_t min_instances = std::numeric_limits<std::size_t>::max();
  for (const auto& c : r.cases) {
    v.expect(c.passed, "gradcheck case " + c.name);
    min_instances = std::min(min_instances, c.instances);
  }
  v.expect(r.cases.size() == gradcheck_case_names().size(), "case count");
  v.expect(min_instances >= 5, "at least 5 instances per case");
  v.expect(r.tolerance <= 1e-4, "tolerance");
  v.expect(secs < 120.0, "runtime under 2 min");
  v.note("%zu cases, max rel err %.3g, %.1f s", r.cases.size(), r.max_error(), secs);
}

void oracle_equivalence(Verdict& v) {
  struct G {
    std::size_t n, cin, cout, h, w, k, stride, pad;
  };
  const G geoms[] = {{1, 1, 1, 5, 5, 3, 1, 1}, {2, 3, 4, 7, 6, 3, 1, 1}, {2, 3, 2, 8, 8, 4, 2, 1},
                     {1, 2, 3, 9, 7, 3, 2, 1}, {1, 4, 2, 6, 6, 3, 1, 0}, {2, 8, 4, 16, 16, 4, 2, 1}};
  std::mt19937_64 rng(101);
  double conv_err = 0.0, adj_err = 0.0;
  for (const auto& g : geoms) {
    const auto x = random_tensor<double>({g.n, g.cin, g.h, g.w}, rng);
    const auto w = random_tensor<double>({g.cout, g.cin, g.k, g.k}, rng);
    const auto b = random_tensor<double>({g.cout}, rng);
    const auto got = conv2d(x, w, b, g.stride, g.pad);
    const auto want = oracle::direct_conv(x, w, &b, g.stride, g.pad);
    conv_err = std::max(conv_err, test::max_abs_diff(got.data(), want.data()));
    if ((g.h + 2 * g.pad - g.k) % g.stride || (g.w + 2 * g.pad - g.k) % g.stride) continue;
    const auto ax = conv2d(x, w, Tensor<double>{}, g.stride, g.pad);
    const auto y = random_tensor<double>(ax.shape(), rng);
    const auto aty = conv_transpose2d(y, w, Tensor<double>{}, g.stride, g.pad);
    const double lhs = inner(ax, y), rhs = inner(x, aty);
    adj_err = std::max(adj_err, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
  }
  double ssim_err = 0.0;
  for (int t = 0; t < 4; ++t) {
    const auto x = random_tensor<double>({1, 3, static_cast<std::size_t>(20 + t), 24}, rng, 0.0, 1.0);
    auto y = x.clone();
    std::normal_distribution<double> noise(0.0, 0.1);
    for (auto& e : y.data_mut()) e = std::clamp(e + noise(rng), 0.0, 1.0);
    ssim_err = std::max(ssim_err, std::abs(ssim_mean(x, y, SsimConfig{}).item() - oracle::ssim_reference(x, y)));
  }
  v.expect(conv_err <= 1e-12, "conv2d vs direct oracle");
  v.expect(adj_err <= 1e-10, "adjoint identity");
  v.expect(ssim_err <= 1e-6, "SSIM vs scalar reference");
  v.note("conv %.2g, adjoint %.2g, ssim %.2g", conv_err, adj_err, ssim_err);
}

void loss_identities(Verdict& v) {
  std::mt19937_64 rng(102);
  const auto depth = random_tensor<double>({2, 1, 16, 16}, rng, 0.7, 10.0);
  const auto img = random_tensor<double>({2, 3, 16, 16}, rng, 0.0, 1.0);
  const LossWeights w;
  v.expect(w.mu == 0.001 && w.psi == 4.0 && w.lambda == 0.01 && w.eps_charb == 1e-3, "published weights");
  v.expect(l1_depth(depth, depth).item() == 0.0, "L1 = 0");
  v.expect(grad_smooth(depth, depth).item() == 0.0, "L_grad = 0");
  v.expect(charbonnier(img, img, w.eps_charb).item() == 1e-3, "L_charb = 1e-3");
  v.expect(ssim_loss(img, img, SsimConfig{}).item() == 0.0, "L_SSIM = 0");
  const double total = total_loss<double>(&depth, &depth, &img, &img, w, LossVariant::l1grad_charb_ssim).total.item();
  v.expect(total == 1e-5, "total = 1e-5");

  Tensor<double> ramp(Shape{1, 1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) ramp.at(0, 0, i, j) = static_cast<double>(j);
  const double g = grad_smooth(ramp, Tensor<double>(Shape{1, 1, 4, 4}, 0.0)).item();
  v.expect(g == 0.75, "ramp grad_smooth = 0.75");
  v.note("total %.17g, ramp %.17g", total, g);
}

void defocus_physics(Verdict& v) {
  const ThinLensCamera cam{0.07, 0.0448, 2.0, 1000.0};
  v.expect(coc_diameter(cam, 2.0) == 0.0, "coc(S) = 0");
  bool mono = true;
  for (double x = 2.05, prev = 0.0; x < 20.0; x += 0.05) {
    const double c = coc_diameter(cam, x);
    mono = mono && c > prev;
    prev = c;
  }
  for (double x = 1.95, prev = 0.0; x > 0.3; x -= 0.05) {
    const double c = coc_diameter(cam, x);
    mono = mono && c > prev;
    prev = c;
  }
  v.expect(mono, "monotone on both sides of S");

  std::mt19937_64 rng(103);
  const auto aif = random_tensor<double>({1, 3, 21, 17}, rng, 0.0, 1.0);
  double blur_err = 0.0;
  for (double depth : {0.5, 0.8, 9.0}) {
    const Tensor<double> d(Shape{1, 1, 21, 17}, depth);
    const double sigma = oracle::coc_reference(0.07, 0.0448, 2.0, depth) * 1000.0 / 4.0;
    const auto got = defocus_image(aif, d, cam);
    const auto want = oracle::blur_reference(aif, sigma);
    blur_err = std::max(blur_err, test::max_abs_diff(got.data(), want.data()));
  }
  v.expect(blur_err <= 1e-6, "constant-depth blur vs single-kernel oracle");

  Tensor<double> depth(Shape{1, 1, 21, 17});
  for (std::size_t i = 0; i < 21; ++i)
    for (std::size_t j = 0; j < 17; ++j) depth.at(0, 0, i, j) = j < 8 ? 2.0 : 0.7 + 0.45 * i;
  const auto out = defocus_image(aif, depth, cam);
  bool sharp = true;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 21; ++i)
      for (std::size_t j = 0; j < 8; ++j) sharp = sharp && out.at(0, c, i, j) == aif.at(0, c, i, j);
  v.expect(sharp, "focus-plane pixels identical");
  v.note("blur oracle err %.2g", blur_err);
}

void shape_contract(Verdict& v) {
  const ModelConfig cfg;
  auto m = Model<float>::build(cfg, 0);
  const std::size_t chain[] = {3, 64, 128, 256, 512, 1024};
  bool schedule = m.encoder().size() == 5;
  for (std::size_t s = 0; schedule && s < 5; ++s) {
    schedule = m.encoder()[s].down.weight.shape() == Shape{chain[s + 1], chain[s], 4, 4} &&
               m.encoder()[s].dense.back().weight.dim(0) == chain[s + 1];
  }
  v.expect(schedule, "encoder channels 3-64-128-256-512-1024");
  m.set_mode(NormMode::eval);
  std::mt19937_64 rng(104);
  NoGradGuard guard;
  const auto p = m.forward(random_tensor<float>({1, 3, 256, 256}, rng, -2.0, 2.0));
  v.expect(p.depth && p.depth->shape() == Shape{1, 1, 256, 256}, "depth 1x1x256x256");
  v.expect(p.aif && p.aif->shape() == Shape{1, 3, 256, 256}, "AiF 1x3x256x256");
  v.note("%zu parameters", m.count_params());
}

void micro_overfit(Verdict& v) {
  auto c = micro_config();
  c.out_dir = test::scratch_dir("accept_micro");
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = train(c);
  const double secs = seconds_since(t0);
  const double first = r.log.epochs.front().mean.total, last = r.log.epochs.back().mean.total;
  const double drop = 1.0 - last / first;
  const double psnr = r.train_report.psnr_db.value_or(0.0);
  const double rmse = r.train_report.depth ? r.train_report.depth->rmse : 1e9;
  v.expect(r.log.steps.size() <= 500, "at most 500 steps");
  v.expect(drop >= 0.9, "loss drop >= 90%");
  v.expect(psnr >= 30.0, "deblur PSNR >= 30 dB");
  v.expect(rmse <= 0.1, "depth RMSE <= 0.1 m");
  v.expect(secs <= 600.0, "runtime <= 10 min");
  v.note("%zu steps, drop %.1f%%, PSNR %.2f dB, RMSE %.3f m, %.0f s", r.log.steps.size(), 100.0 * drop, psnr, rmse,
         secs);
}

void ablation_harness(Verdict& v) {
  auto c = harness_config("accept_ablate", 30);
  const auto r = ablation_suite(c);
  v.expect(r.runs.size() == 3, "three runs");
  v.expect(std::filesystem::exists(c.out_dir / "ablation.csv"), "ablation.csv written");
  const auto rows = csv_rows(slurp(c.out_dir / "ablation.csv"));
  v.expect(rows.size() == 7, "header plus six rows");
  if (rows.size() != 7) return;
  const auto& both = reported(r.runs[0]);
  const auto& depth_only = reported(r.runs[1]);
  const auto& deblur_only = reported(r.runs[2]);
  bool finite = true;
  for (std::size_t i = 1; i < rows.size(); ++i)
    for (std::size_t k = 2; k < rows[i].size(); ++k)
      if (!rows[i][k].empty()) finite = finite && finite_field(rows[i][k]);
  v.expect(finite, "finite entries");
  // Gain rows must be the exact difference of the values printed above them.
  auto num = [&](std::size_t row, std::size_t col) { return std::stod(rows[row][col]); };
  bool exact = num(3, 7) == num(1, 7) - num(2, 7) && num(3, 8) == num(1, 8) - num(2, 8) &&
               num(6, 2) == num(5, 2) - num(4, 2) && num(6, 3) == num(5, 3) - num(4, 3) &&
               num(6, 4) == num(4, 4) - num(5, 4) && num(6, 5) == num(4, 5) - num(5, 5) &&
               num(6, 6) == num(4, 6) - num(5, 6);
  exact = exact && num(1, 7) == *both.psnr_db && num(2, 7) == *deblur_only.psnr_db &&
          num(5, 2) == depth_only.depth->rmse;
  v.expect(exact, "exact gain rows");
  v.expect(!r.runs[1].model.has_aif_head() && !r.runs[2].model.has_depth_head(), "single-head runs");
  v.note("PSNR gain %+.3f dB, RMSE gain %+.4f m (trend only)", num(3, 7), num(6, 2));
}

void loss_grid_harness(Verdict& v) {
  auto c = harness_config("accept_grid", 30);
  const auto r = loss_grid(c);
  const auto rows = csv_rows(slurp(c.out_dir / "loss_grid.csv"));
  v.expect(r.runs.size() == 5, "five runs");
  v.expect(rows.size() == 6, "header plus five rows");
  if (rows.size() != 6) return;
  bool order = true, finite = true;
  for (std::size_t i = 0; i < 5; ++i) {
    order = order && rows[i + 1][0] == to_string(kAllLossVariants[i]);
    for (std::size_t k = 2; k < rows[i + 1].size(); ++k) finite = finite && finite_field(rows[i + 1][k]);
  }
  v.expect(order, "rows in table order");
  v.expect(finite, "finite entries");
  std::string names;
  for (std::size_t i = 1; i < rows.size(); ++i) names += (i > 1 ? " " : "") + rows[i][0];
  v.note("%s", names.c_str());
}

void determinism(Verdict& v) {
  auto a = harness_config("accept_det_a", 4), b = harness_config("accept_det_b", 4);
  a.flip_probability = b.flip_probability = 0.5;
  a.model.input_height = a.model.input_width = b.model.input_height = b.model.input_width = 32;
  train(a);
  train(b);
  const auto log = slurp(a.out_dir / "run.jsonl");
  v.expect(log == slurp(b.out_dir / "run.jsonl"), "RunLog bit-identical");
  v.expect(slurp(a.out_dir / "model.ckpt") == slurp(b.out_dir / "model.ckpt"), "checkpoint bit-identical");

  ModelConfig mc;
  mc.input_height = mc.input_width = 64;
  mc.width_scale = 0.125;
  auto m = Model<float>::build(mc, 5);
  m.set_mode(NormMode::eval);
  const auto path = a.out_dir / "roundtrip.ckpt";
  save_checkpoint(m, path);
  auto back = Model<float>::build(mc, 6);
  load_checkpoint(back, path);
  back.set_mode(NormMode::eval);
  std::mt19937_64 rng(105);
  const auto x = random_tensor<float>({2, 3, 64, 64}, rng, -2.0, 2.0);
  NoGradGuard guard;
  const auto p = m.forward(x), q = back.forward(x);
  const auto same = [](const Tensor<float>& s, const Tensor<float>& t) {
    return std::memcmp(s.data().data(), t.data().data(), s.numel() * sizeof(float)) == 0;
  };
  v.expect(same(*p.depth, *q.depth) && same(*p.aif, *q.aif), "save-load-forward bit-exact");

  PfmImage pfm{19, 7, 1, {}};
  std::uniform_real_distribution<float> u(-1e6f, 1e6f);
  for (std::size_t i = 0; i < 19 * 7; ++i) pfm.data.push_back(u(rng));
  pfm.data[0] = std::numeric_limits<float>::denorm_min();
  pfm.data[1] = -0.0f;
  pfm.data[2] = std::numeric_limits<float>::max();
  write_pfm(a.out_dir / "d.pfm", pfm);
  const auto pb = read_pfm(a.out_dir / "d.pfm");
  v.expect(pb.width == 19 && pb.height == 7 &&
               std::memcmp(pb.data.data(), pfm.data.data(), pfm.data.size() * sizeof(float)) == 0,
           "PFM roundtrip bit-exact");
  v.note("run.jsonl %zu bytes, %zu parameter tensors, %zu PFM values", log.size(), m.parameters().size(),
         pfm.data.size());
}

void metric_correctness(Verdict& v) {
  std::mt19937_64 rng(106);
  bool nested = true;
  for (int t = 0; t < 100; ++t) {
    const auto gt = random_tensor<double>({1, 1, 8, 8}, rng, 0.5, 10.0);
    const auto pred = random_tensor<double>({1, 1, 8, 8}, rng, 0.1, 12.0);
    const auto m = depth_metrics(pred, gt, MetricConfig{});
    nested = nested && m.delta1 <= m.delta2 && m.delta2 <= m.delta3;
  }
  v.expect(nested, "delta nesting");
  const auto gt = random_tensor<float>({1, 1, 12, 12}, rng, 0.7f, 10.0f);
  Tensor<float> pred(gt.shape());
  for (std::size_t i = 0; i < gt.numel(); ++i) pred.data_mut()[i] = 1.3f * gt.data()[i];
  const auto m = depth_metrics(pred, gt, MetricConfig{});
  v.expect(m.delta1 == 0.0 && m.delta2 == 1.0 && m.delta3 == 1.0, "1.3x case gives (0,1,1)");
  const Tensor<double> a(Shape{1, 3, 8, 8}, 0.25), b(Shape{1, 3, 8, 8}, 0.25 + 16.0 / 255.0);
  const double db = psnr(b, a, 1.0).db;
  const double closed_form = 20.0 * std::log10(255.0 / 16.0);
  v.expect(std::abs(db - closed_form) <= 1e-9, "uniform-diff PSNR matches 20 log10(255/16)");
  v.note("PSNR %.4f dB (closed form %.4f; distance to 24.03 is %.4f)", db, closed_form, std::abs(db - 24.03));
}

struct Criterion {
  const char* title;
  std::function<void(Verdict&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hded acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {"gradient suite", gradient_suite},       {"oracle equivalence", oracle_equivalence},
      {"loss identities", loss_identities},     {"defocus physics", defocus_physics},
      {"shape contract", shape_contract},       {"micro overfit", micro_overfit},
      {"ablation harness", ablation_harness},   {"loss grid", loss_grid_harness},
      {"determinism and persistence", determinism}, {"metric correctness", metric_correctness},
  };
  int failed = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (only && static_cast<std::size_t>(only) != i + 1) continue;
    Verdict v;
    try {
      all[i].run(v);
    } catch (const std::exception& e) {
      v.failures.push_back(std::string("exception: ") + e.what());
    }
    std::string line = v.failures.empty() ? "PASS" : "FAIL";
    std::printf("criterion %2zu %s  %s  [%s]", i + 1, line.c_str(), all[i].title, v.detail.c_str());
    if (!v.failures.empty()) {
      std::printf("  failed:");
      for (const auto& f : v.failures) std::printf(" {%s}", f.c_str());
    }
    std::printf("\n");
    std::fflush(stdout);
    failed += !v.failures.empty();
  }
  return failed ? 1 : 0;
}
