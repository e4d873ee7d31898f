#include <doctest.h>

#include <set>

#include <hded/network.hpp>

#include "test_util.hpp"

using namespace hded;

namespace {

ModelConfig small(HeadMode heads = HeadMode::both) {
  ModelConfig c;
  c.input_height = 64;
  c.input_width = 32;
  c.width_scale = 0.125;
  c.heads = heads;
  return c;
}

}  // namespace

TEST_CASE("encoder channel schedule") {
  ModelConfig c;
  CHECK(c.encoder_channels() == std::vector<std::size_t>{64, 128, 256, 512, 1024});
  c.width_scale = 0.125;
  CHECK(c.encoder_channels() == std::vector<std::size_t>{8, 16, 32, 64, 128});
  c.width_scale = 0.001;
  CHECK(c.encoder_channels() == std::vector<std::size_t>{1, 1, 1, 1, 1});
}

TEST_CASE("default model wiring by introspection") {
  const auto m = Model<float>::build(ModelConfig{}, 0);
  const std::size_t chain[] = {3, 64, 128, 256, 512, 1024};
  REQUIRE(m.encoder().size() == 5);
  for (std::size_t s = 0; s < 5; ++s) {
    const auto& down = m.encoder()[s].down;
    CHECK(down.weight.shape() == Shape{chain[s + 1], chain[s], 4, 4});
    CHECK(down.stride == 2);
    CHECK(m.encoder()[s].dense.back().weight.dim(0) == chain[s + 1]);
  }
  REQUIRE(m.depth_head());
  REQUIRE(m.aif_head());
  CHECK(m.depth_head()->pred_out.weight.dim(0) == 1);
  CHECK(m.aif_head()->pred_out.weight.dim(0) == 3);
  CHECK(m.aif_head()->pred_out.weight.dim(1) == 64 + 3);
}

TEST_CASE("forward shapes, head removal and determinism") {
  std::mt19937_64 rng(1);
  const auto x = test::random_tensor<float>({2, 3, 64, 32}, rng, -2.0, 2.0);
  auto a = Model<float>::build(small(), 9);
  auto b = Model<float>::build(small(), 9);
  a.set_mode(NormMode::eval);
  b.set_mode(NormMode::eval);
  NoGradGuard guard;
  const auto pa = a.forward(x);
  REQUIRE(pa.depth);
  REQUIRE(pa.aif);
  CHECK(pa.depth->shape() == Shape{2, 1, 64, 32});
  CHECK(pa.aif->shape() == Shape{2, 3, 64, 32});
  const auto pb = b.forward(x);
  CHECK(std::equal(pa.depth->data().begin(), pa.depth->data().end(), pb.depth->data().begin()));

  b.remove_head(HeadMode::depth_only);
  CHECK(b.config().heads == HeadMode::depth_only);
  CHECK_FALSE(b.has_aif_head());
  const auto pd = b.forward(x);
  CHECK_FALSE(pd.aif);
  CHECK(std::equal(pa.depth->data().begin(), pa.depth->data().end(), pd.depth->data().begin()));
  CHECK(b.count_params() < a.count_params());
  CHECK_THROWS(b.decode_aif(b.encode(x), x));

  auto c = Model<float>::build(small(), 10);
  c.set_mode(NormMode::eval);
  const auto pc = c.forward(x);
  CHECK_FALSE(std::equal(pa.depth->data().begin(), pa.depth->data().end(), pc.depth->data().begin()));
  CHECK_THROWS_AS(a.forward(test::random_tensor<float>({1, 3, 48, 32}, rng)), ShapeError);
}

TEST_CASE("single-head builds and parameter naming") {
  const auto both = Model<float>::build(small(), 0);
  const auto depth = Model<float>::build(small(HeadMode::depth_only), 0);
  const auto deblur = Model<float>::build(small(HeadMode::deblur_only), 0);
  std::set<std::string> names;
  for (const auto& p : both.parameters()) CHECK(names.insert(p.name).second);
  std::size_t enc = 0, ded = 0, aifd = 0;
  for (const auto& n : names) {
    enc += n.rfind("enc.", 0) == 0;
    ded += n.rfind("ded.", 0) == 0;
    aifd += n.rfind("aifd.", 0) == 0;
  }
  CHECK(enc + ded + aifd == names.size());
  CHECK(depth.parameters().size() == enc + ded);
  CHECK(deblur.parameters().size() == enc + aifd);
  CHECK_FALSE(depth.has_aif_head());
  CHECK_FALSE(deblur.has_depth_head());
  CHECK(both.buffers().size() > 0);
}

TEST_CASE("deblurring head starts as a pass-through of its input") {
  std::mt19937_64 rng(2);
  auto m = Model<float>::build(small(HeadMode::deblur_only), 3);
  m.set_mode(NormMode::eval);
  NoGradGuard guard;
  const auto x = test::random_tensor<float>({1, 3, 64, 32}, rng, 0.0, 1.0);
  const auto out = *m.forward(x).aif;
  const auto& bias = m.aif_head()->pred_out.bias;
  double worst = 0.0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 64; ++i)
      for (std::size_t j = 0; j < 32; ++j)
        worst = std::max(worst, std::abs(double(out.at(0, c, i, j)) - x.at(0, c, i, j) - bias.data()[c]));
  CHECK(worst < 1e-6);
}
