#include <doctest.h>

#include <hded/losses.hpp>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace hded;
using hded::oracle::ssim_reference;
using test::random_tensor;

TEST_CASE("identical prediction and target") {
  std::mt19937_64 rng(1);
  const auto depth = random_tensor<double>({2, 1, 16, 16}, rng, 0.7, 10.0);
  const auto img = random_tensor<double>({2, 3, 16, 16}, rng, 0.0, 1.0);
  const LossWeights w;
  CHECK(w.mu == 0.001);
  CHECK(w.psi == 4.0);
  CHECK(w.lambda == 0.01);
  CHECK(w.eps_charb == 1e-3);
  CHECK(l1_depth(depth, depth).item() == 0.0);
  CHECK(grad_smooth(depth, depth).item() == 0.0);
  CHECK(charbonnier(img, img, w.eps_charb).item() == 1e-3);
  CHECK(ssim_loss(img, img, SsimConfig{}).item() == 0.0);
  const auto r = total_loss<double>(&depth, &depth, &img, &img, w, LossVariant::l1grad_charb_ssim);
  CHECK(r.total.item() == 1e-5);
  CHECK(r.components.total == 1e-5);
}

TEST_CASE("unit ramp residual gives grad_smooth 12/16") {
  Tensor<double> pred(Shape{1, 1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) pred.at(0, 0, i, j) = static_cast<double>(j);
  const Tensor<double> gt(Shape{1, 1, 4, 4}, 0.0);
  CHECK(grad_smooth(pred, gt).item() == 0.75);
  // A ramp in the target cancels a ramp in the prediction.
  CHECK(grad_smooth(pred, pred.clone()).item() == 0.0);
  CHECK(l1_depth(pred, gt).item() == 1.5);
  CHECK(depth_loss(pred, gt, LossWeights{}).item() == doctest::Approx(1.5 + 0.001 * 0.75).epsilon(1e-15));
}

TEST_CASE("charbonnier and L1 on known residuals") {
  Tensor<double> a(Shape{1, 1, 1, 4}, std::vector<double>{0.0, 0.5, -0.25, 1.0});
  const Tensor<double> b(Shape{1, 1, 1, 4}, 0.0);
  double want = 0.0;
  for (double r : {0.0, 0.5, -0.25, 1.0}) want += std::sqrt(r * r + 1e-6);
  CHECK(charbonnier(a, b, 1e-3).item() == doctest::Approx(want / 4).epsilon(1e-15));
  CHECK(l1_image(a, b).item() == 0.4375);
}

TEST_CASE("SSIM matches the scalar reference") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 4; ++trial) {
    const auto x = random_tensor<double>({1, 3, 19 + trial, 23}, rng, 0.0, 1.0);
    auto y = x.clone();
    std::normal_distribution<double> noise(0.0, 0.05 * (trial + 1));
    for (auto& v : y.data_mut()) v = std::clamp(v + noise(rng), 0.0, 1.0);
    CHECK(std::abs(ssim_mean(x, y, SsimConfig{}).item() - ssim_reference(x, y)) <= 1e-6);
  }
  const auto x = random_tensor<double>({2, 1, 12, 12}, rng, 0.0, 1.0);
  const auto y = random_tensor<double>({2, 1, 12, 12}, rng, 0.0, 1.0);
  CHECK(std::abs(ssim_mean(x, y, SsimConfig{}).item() - ssim_reference(x, y)) <= 1e-6);
  CHECK_THROWS(ssim_mean(random_tensor<double>({1, 1, 8, 8}, rng), random_tensor<double>({1, 1, 8, 8}, rng),
                         SsimConfig{}));
}

TEST_CASE("variant objectives are assembled from their terms") {
  std::mt19937_64 rng(3);
  const auto dp = random_tensor<double>({2, 1, 12, 12}, rng, 0.0, 1.0);
  const auto dg = random_tensor<double>({2, 1, 12, 12}, rng, 0.0, 1.0);
  const auto ip = random_tensor<double>({2, 3, 12, 12}, rng, 0.0, 1.0);
  const auto ig = random_tensor<double>({2, 3, 12, 12}, rng, 0.0, 1.0);
  const LossWeights w;
  const double l1 = l1_depth(dp, dg).item(), gs = grad_smooth(dp, dg).item();
  const double ch = charbonnier(ip, ig, 1e-3).item(), li = l1_image(ip, ig).item();
  const double ss = ssim_loss(ip, ig, SsimConfig{}).item();

  struct Want {
    LossVariant v;
    double total;
  };
  const Want wants[] = {
      {LossVariant::l1_charb, l1 + 0.01 * ch},
      {LossVariant::l1_l1, l1 + 0.01 * li},
      {LossVariant::l1grad_charb, l1 + 0.001 * gs + 0.01 * ch},
      {LossVariant::l1_charb_ssim, l1 + 0.01 * (ch + 4 * ss)},
      {LossVariant::l1grad_charb_ssim, l1 + 0.001 * gs + 0.01 * (ch + 4 * ss)},
  };
  for (const auto& want : wants) {
    CAPTURE(to_string(want.v));
    const auto r = total_loss<double>(&dp, &dg, &ip, &ig, w, want.v);
    CHECK(r.total.item() == doctest::Approx(want.total).epsilon(1e-13));
    CHECK(r.components.total == r.total.item());
    CHECK(r.components.depth + w.lambda * r.components.deblur == doctest::Approx(r.components.total).epsilon(1e-13));
    CHECK(parse_loss_variant(to_string(want.v)) == want.v);
  }
  const auto depth_only = total_loss<double>(&dp, &dg, nullptr, nullptr, w, LossVariant::l1grad_charb_ssim,
                                             HeadMode::depth_only);
  CHECK(depth_only.total.item() == doctest::Approx(l1 + 0.001 * gs).epsilon(1e-13));
  CHECK(depth_only.components.deblur == 0.0);
  const auto deblur_only = total_loss<double>(nullptr, nullptr, &ip, &ig, w, LossVariant::l1grad_charb_ssim,
                                              HeadMode::deblur_only);
  CHECK(deblur_only.total.item() == doctest::Approx(ch + 4 * ss).epsilon(1e-13));
  CHECK(deblur_only.components.depth == 0.0);
  CHECK_THROWS(parse_loss_variant("l2"));
  CHECK(kAllLossVariants.size() == 5);
}
