#include <gtest/gtest.h>

#include "covsev/arch3d.hpp"
#include "covsev/errors.hpp"
#include "gradcheck.hpp"

using namespace covsev;

namespace {

// Convolution output length, written out independently of the model code.
std::int64_t conv_out(std::int64_t n, std::int64_t k, std::int64_t s, std::int64_t p) { return (n + 2 * p - k) / s + 1; }

HybridDeCoVNetConfig small_config() {
  auto c = HybridDeCoVNetConfig::width_reduced();
  c.size = 32;
  return c;
}

}  // namespace

TEST(HybridDeCoVNet, StemWeightShape) {
  HybridDeCoVNet model(HybridDeCoVNetConfig{});
  auto w = model.stem->ptr(0)->named_parameters()["weight"];
  EXPECT_EQ(w.sizes().vec(), (std::vector<std::int64_t>{16, 2, 5, 7, 7}));
}

TEST(HybridDeCoVNet, ReferenceGeometryTrace) {
  torch::manual_seed(0);
  HybridDeCoVNetConfig c;  // 2 x 64 x 224 x 224
  HybridDeCoVNet model(c);
  model.eval();
  torch::NoGradGuard g;
  auto trace = model.trace({torch::rand({1, 2, 64, 224, 224})});

  std::int64_t d = conv_out(64, 5, 1, 2), s = conv_out(224, 7, 2, 3);
  ShapeTrace expected{{"stem", {1, 16, d, s, s}}};
  for (int i = 0; i < 4; ++i) {
    d = conv_out(d, 3, 2, 1);
    s = conv_out(s, 3, 2, 1);
    expected.push_back({"layer" + std::to_string(i + 1), {1, c.ladder[static_cast<std::size_t>(i)], d, s, s}});
  }
  expected.push_back({"head", {1, 64}});
  expected.push_back({"logits", {1, 4}});
  EXPECT_EQ(trace, expected);
  // Spelled out: 64x112x112 after the stem, 4x7x7 after layer4.
  EXPECT_EQ(trace[0].second, (std::vector<std::int64_t>{1, 16, 64, 112, 112}));
  EXPECT_EQ(trace[4].second, (std::vector<std::int64_t>{1, 512, 4, 7, 7}));
}

TEST(HybridDeCoVNet, DecisionLayerHas260Parameters) {
  HybridDeCoVNet model(HybridDeCoVNetConfig{});
  EXPECT_EQ(count_parameters(*model.decision), 64 * 4 + 4);
}

TEST(HybridDeCoVNet, VariableDepthAcceptsMultiplesOf16) {
  torch::manual_seed(1);
  auto c = small_config();
  c.variable_depth = true;
  HybridDeCoVNet model(c);
  model.eval();
  torch::NoGradGuard g;
  for (std::int64_t depth : {16, 32, 48}) {
    auto y = model.forward({torch::rand({2, 2, depth, 32, 32})});
    EXPECT_EQ(y.sizes().vec(), (std::vector<std::int64_t>{2, 4})) << depth;
  }
  EXPECT_THROW(model.forward({torch::rand({1, 2, 24, 32, 32})}), ShapeError);
}

TEST(HybridDeCoVNet, FixedDepthRejectsOtherDepths) {
  HybridDeCoVNet model(small_config());
  try {
    model.forward({torch::rand({1, 2, 32, 32, 32})});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("hybrid-decovnet input"), std::string::npos);
  }
  EXPECT_THROW(model.forward({torch::rand({1, 3, 16, 32, 32})}), ShapeError);
  EXPECT_THROW(model.forward({}), ShapeError);
}

TEST(HybridDeCoVNet, WidthReducedOddSizesHalveUpward) {
  torch::manual_seed(2);
  auto c = HybridDeCoVNetConfig::width_reduced();  // 56 -> 28 -> 14 -> 7 -> 4 -> 2
  HybridDeCoVNet model(c);
  model.eval();
  torch::NoGradGuard g;
  auto trace = model.trace({torch::rand({1, 2, 16, 56, 56})});
  std::int64_t s = conv_out(56, 7, 2, 3);
  for (int i = 0; i < 4; ++i) s = conv_out(s, 3, 2, 1);
  EXPECT_EQ(trace[4].second, (std::vector<std::int64_t>{1, 32, 1, s, s}));
  EXPECT_EQ(s, 2);
}

TEST(ResBlock3d, IdentityShortcutPassesNonNegativeInputThrough) {
  ResBlock3d block(8, 8, 1);
  EXPECT_TRUE(block->projection.is_empty());
  {
    torch::NoGradGuard g;
    block->conv1->weight.zero_();
    block->conv2->weight.zero_();
  }
  block->eval();
  auto x = torch::rand({2, 8, 4, 6, 6});
  EXPECT_TRUE(torch::allclose(block(x), x, 0.0, 0.0));
}

TEST(ResBlock3d, StridedBlockProjects) {
  ResBlock3d block(4, 8, 2);
  EXPECT_FALSE(block->projection.is_empty());
  block->eval();
  auto y = block(torch::rand({1, 4, 8, 10, 9}));
  EXPECT_EQ(y.sizes().vec(), (std::vector<std::int64_t>{1, 8, 4, 5, 5}));
}

TEST(HybridDeCoVNet, GradientsMatchFiniteDifferences) {
  torch::manual_seed(3);
  auto c = HybridDeCoVNetConfig::width_reduced();
  HybridDeCoVNet model(c);
  model.train();
  {
    torch::NoGradGuard g;
    for (int i = 0; i < 3; ++i) model.forward({torch::rand({2, 2, 16, 56, 56})});
  }
  model.to(torch::kFloat64);
  model.eval();
  auto x = torch::rand({2, 2, 16, 56, 56}, torch::kFloat64);
  auto proj = torch::randn({2, 4}, torch::kFloat64);
  auto loss = [&] { return (model.forward({x}) * proj).sum(); };
  auto r = gradcheck::finite_difference_check(model, loss, 50, 1e-6, 11);
  EXPECT_EQ(r.checked, 50);
  EXPECT_LT(r.worst_error, 1e-5) << r.worst_param;
}

TEST(HybridDeCoVNet, InferenceIsDeterministic) {
  torch::manual_seed(4);
  HybridDeCoVNet model(small_config());
  model.eval();
  auto x = torch::rand({3, 2, 16, 32, 32});
  EXPECT_TRUE(torch::equal(model.forward({x}), model.forward({x})));
}

TEST(HybridDeCoVNet, ConfigJsonRoundTripAndValidation) {
  auto c = HybridDeCoVNetConfig::width_reduced();
  c.blocks_per_layer = 2;
  const auto j = c.to_json();
  EXPECT_EQ(j.at("arch"), "hybrid-decovnet");
  EXPECT_EQ(HybridDeCoVNetConfig::from_json(j).to_json(), j);

  auto bad = c;
  bad.depth = 24;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.size = 8;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.ladder[2] = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
