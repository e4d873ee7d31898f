#include <doctest.h>

#include <hded/gradcheck.hpp>
#include <hded/ops.hpp>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace hded;
using namespace hded::oracle;
using hded::test::random_tensor;

namespace {

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  return test::max_abs_diff(a.data(), b.data());
}

struct Geometry {
  std::size_t n, cin, cout, h, w, k, stride, pad;
};

constexpr Geometry kGeometries[] = {
    {1, 1, 1, 5, 5, 3, 1, 1}, {2, 3, 4, 7, 6, 3, 1, 1}, {2, 3, 2, 8, 8, 4, 2, 1},
    {1, 2, 3, 9, 7, 3, 2, 1}, {1, 4, 2, 6, 6, 3, 1, 0}, {3, 2, 5, 5, 8, 1, 1, 0},
};

}  // namespace

TEST_CASE("conv2d matches the nested-loop oracle") {
  std::mt19937_64 rng(11);
  for (const auto& g : kGeometries) {
    const auto x = random_tensor<double>({g.n, g.cin, g.h, g.w}, rng);
    const auto w = random_tensor<double>({g.cout, g.cin, g.k, g.k}, rng);
    const auto b = random_tensor<double>({g.cout}, rng);
    CHECK(max_diff(conv2d(x, w, b, g.stride, g.pad), direct_conv(x, w, &b, g.stride, g.pad)) <= 1e-12);
    CHECK(max_diff(conv2d(x, w, Tensor<double>{}, g.stride, g.pad), direct_conv(x, w, nullptr, g.stride, g.pad)) <=
          1e-12);
  }
}

TEST_CASE("conv_transpose2d matches the scatter oracle") {
  std::mt19937_64 rng(12);
  for (const auto& g : kGeometries) {
    if (g.k < 2 * g.pad + 1) continue;
    const auto x = random_tensor<double>({g.n, g.cin, g.h, g.w}, rng);
    const auto w = random_tensor<double>({g.cin, g.cout, g.k, g.k}, rng);
    CHECK(max_diff(conv_transpose2d(x, w, Tensor<double>{}, g.stride, g.pad),
                   direct_conv_transpose(x, w, g.stride, g.pad)) <= 1e-12);
  }
}

TEST_CASE("conv2d and conv_transpose2d are adjoint") {
  std::mt19937_64 rng(13);
  for (const auto& g : kGeometries) {
    if ((g.h + 2 * g.pad - g.k) % g.stride || (g.w + 2 * g.pad - g.k) % g.stride) continue;
    const auto x = random_tensor<double>({g.n, g.cin, g.h, g.w}, rng);
    const auto w = random_tensor<double>({g.cout, g.cin, g.k, g.k}, rng);
    const auto ax = conv2d(x, w, Tensor<double>{}, g.stride, g.pad);
    const auto y = random_tensor<double>(ax.shape(), rng);
    const auto aty = conv_transpose2d(y, w, Tensor<double>{}, g.stride, g.pad);
    REQUIRE(aty.shape() == x.shape());
    const double lhs = inner(ax, y), rhs = inner(x, aty);
    CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("batch_norm2d normalizes with batch statistics and tracks running ones") {
  std::mt19937_64 rng(14);
  const auto x = random_tensor<double>({3, 2, 4, 5}, rng, -2.0, 3.0);
  Tensor<double> gamma(Shape{2}, std::vector<double>{1.5, -0.5});
  Tensor<double> beta(Shape{2}, std::vector<double>{0.25, 2.0});
  BatchNormState<double> st(2);
  const auto y = batch_norm2d(x, gamma, beta, NormMode::train, st);
  const double m = 3.0 * 4 * 5;
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j) mean += x.at(n, c, i, j);
    mean /= m;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j) var += (x.at(n, c, i, j) - mean) * (x.at(n, c, i, j) - mean);
    const double biased = var / m, unbiased = var / (m - 1);
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
          const double want = gamma.data()[c] * (x.at(n, c, i, j) - mean) / std::sqrt(biased + 1e-5) + beta.data()[c];
          CHECK(y.at(n, c, i, j) == doctest::Approx(want).epsilon(1e-12));
        }
    CHECK(st.running_mean.data()[c] == doctest::Approx(0.1 * mean).epsilon(1e-12));
    CHECK(st.running_var.data()[c] == doctest::Approx(0.9 + 0.1 * unbiased).epsilon(1e-12));
  }
  const auto e = batch_norm2d(x, gamma, beta, NormMode::eval, st);
  const double want = gamma.data()[1] * (x.at(1, 1, 2, 3) - st.running_mean.data()[1]) /
                          std::sqrt(st.running_var.data()[1] + 1e-5) +
                      beta.data()[1];
  CHECK(e.at(1, 1, 2, 3) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("elementwise ops") {
  Tensor<double> a(Shape{1, 1, 2, 3}, std::vector<double>{-2, -0.5, 0, 1, 2, 4});
  Tensor<double> b(Shape{1, 1, 2, 3}, std::vector<double>{1, 2, 4, -1, 0.5, 8});
  const std::vector<double> relu_want{0, 0, 0, 1, 2, 4};
  const std::vector<double> abs_want{2, 0.5, 0, 1, 2, 4};
  const std::vector<double> div_want{-2, -0.25, 0, -1, 4, 0.5};
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(relu(a).data()[i] == relu_want[i]);
    CHECK(hded::abs(a).data()[i] == abs_want[i]);
    CHECK(div(a, b).data()[i] == div_want[i]);
    CHECK(square(a).data()[i] == a.data()[i] * a.data()[i]);
    CHECK(sub(a, b).data()[i] == a.data()[i] - b.data()[i]);
  }
  CHECK(reduce_sum(a).item() == 4.5);
  CHECK(reduce_mean(a).item() == 0.75);
  CHECK(sqrt_shifted(a, 2.0).data()[0] == 0.0);
  CHECK_THROWS_AS(sqrt_shifted(a, 1.0), DomainError);
  CHECK_THROWS_AS(add(a, reshape(b, Shape{1, 1, 3, 2})), ShapeError);

  const auto d = spatial_diff(a);
  CHECK(d.dx.shape() == Shape{1, 1, 2, 2});
  CHECK(d.dy.shape() == Shape{1, 1, 1, 3});
  CHECK(d.dx.at(0, 0, 0, 0) == 1.5);
  CHECK(d.dx.at(0, 0, 1, 1) == 2.0);
  CHECK(d.dy.at(0, 0, 0, 1) == 2.5);

  const auto c = concat_channels(a, b);
  CHECK(c.shape() == Shape{1, 2, 2, 3});
  CHECK(c.at(0, 1, 1, 2) == 8.0);
  CHECK(c.at(0, 0, 1, 2) == 4.0);
}

TEST_CASE("tape: leaves accumulate, no-grad scopes record nothing") {
  reset_tape<double>();
  Tensor<double> x(Shape{3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad(true);
  auto loss = reduce_sum(square(x));
  backward(loss);
  CHECK(x.grad()[2] == 6.0);
  backward(loss);
  CHECK(x.grad()[2] == 12.0);  // second pass adds to the leaf
  x.zero_grad();
  CHECK(x.grad()[2] == 0.0);

  const auto before = Tape<double>::current().size();
  {
    NoGradGuard guard;
    auto y = reduce_sum(square(x));
    CHECK_FALSE(y.on_tape());
    CHECK_THROWS_AS(backward(y), TapeError);
  }
  CHECK(Tape<double>::current().size() == before);

  Tensor<double> plain(Shape{2}, 1.0);
  CHECK_FALSE(reduce_sum(plain).on_tape());
  CHECK_THROWS_AS(backward(square(x)), TapeError);  // not a scalar
  reset_tape<double>();
  CHECK(Tape<double>::current().size() == 0);
}

TEST_CASE("tape: injected backward fault changes exactly the targeted rule") {
  reset_tape<double>();
  Tensor<double> x(Shape{2}, std::vector<double>{1.0, -3.0});
  x.set_requires_grad(true);
  set_backward_fault("square", 2.0);
  backward(reduce_sum(square(x)));
  clear_backward_fault();
  CHECK(x.grad()[0] == 4.0);
  CHECK(x.grad()[1] == -12.0);
  x.zero_grad();
  backward(reduce_sum(square(x)));
  CHECK(x.grad()[0] == 2.0);
  reset_tape<double>();
}

TEST_CASE("gradient suite passes and covers every op and loss") {
  const auto names = gradcheck_case_names();
  for (const char* required :
       {"conv2d", "conv_transpose2d", "batch_norm2d", "relu", "abs", "square", "sqrt_shifted", "add", "sub",
        "mul", "div", "scale", "add_scalar", "concat_channels", "reduce_sum", "reduce_mean", "reshape",
        "spatial_diff", "loss.l1_depth", "loss.grad_smooth", "loss.depth", "loss.charbonnier", "loss.l1_image",
        "loss.ssim", "loss.deblur", "loss.total"}) {
    CHECK_MESSAGE(std::any_of(names.begin(), names.end(),
                              [&](const std::string& n) { return n.rfind(required, 0) == 0; }),
                  required);
  }
  GradCheckOptions opt;
  opt.only = "conv";
  const auto report = run_gradcheck(opt);
  CHECK(report.passed());
  CHECK(report.cases.size() >= 8);
  for (const auto& c : report.cases) CHECK(c.instances >= 5);

  set_backward_fault("conv2d", 1.01);
  opt.only = "conv2d";
  const auto broken = run_gradcheck(opt);
  clear_backward_fault();
  CHECK_FALSE(broken.passed());
}
