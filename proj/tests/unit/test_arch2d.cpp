#include <gtest/gtest.h>

#include "covsev/arch2d.hpp"
#include "covsev/errors.hpp"
#include "gradcheck.hpp"

using namespace covsev;

namespace {

TwoBranchConfig tiny_config() {
  TwoBranchConfig c;
  c.lung_depth = 3;
  c.infection_depth = 2;
  c.image_size = 16;
  c.backbone.width = 4;
  c.backbone.feature_dim = 8;
  c.hidden = 8;
  return c;
}

std::vector<torch::Tensor> inputs_for(const TwoBranchConfig& c, std::int64_t batch,
                                      torch::Dtype dtype = torch::kFloat32) {
  return {torch::rand({batch, c.lung_depth, c.image_size, c.image_size}, dtype),
          torch::rand({batch, c.infection_depth, c.image_size, c.image_size}, dtype)};
}

}  // namespace

TEST(ConvLayer, MapsAnyDepthToThreeChannelsKeepingSize) {
  torch::manual_seed(0);
  ConvLayer layer(32);
  auto y = layer(torch::rand({2, 32, 299, 299}));
  EXPECT_EQ(y.sizes().vec(), (std::vector<std::int64_t>{2, 3, 299, 299}));
  EXPECT_GE(y.min().item<float>(), 0.0f);
}

TEST(ConvLayer, RejectsChannelMismatch) {
  ConvLayer layer(32);
  try {
    layer(torch::rand({1, 16, 20, 20}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 32 input channels, got 16"), std::string::npos);
  }
}

TEST(BackboneKind, StringRoundTrip) {
  for (auto k : {BackboneKind::Compact, BackboneKind::InceptionResNet})
    EXPECT_EQ(backbone_kind_from_string(backbone_kind_to_string(k)), k);
  EXPECT_THROW(backbone_kind_from_string("resnet50"), std::invalid_argument);
}

TEST(TwoBranch, ReferenceGeometryShapes) {
  torch::manual_seed(1);
  TwoBranchConfig c;  // 32 + 16 slices at 299 px
  TwoBranchModel model(c);
  model.eval();
  torch::NoGradGuard g;
  auto trace = model.trace(inputs_for(c, 1));
  const auto F = c.backbone.feature_dim;
  const ShapeTrace expected{{"lung_conv", {1, 3, 299, 299}},      {"infection_conv", {1, 3, 299, 299}},
                            {"lung_features", {1, F}},            {"infection_features", {1, F}},
                            {"concat", {1, 2 * F}},               {"logits", {1, 4}}};
  EXPECT_EQ(trace, expected);
}

TEST(TwoBranch, BatchOfFour) {
  torch::manual_seed(2);
  TwoBranchModel model(TwoBranchConfig{});
  model.eval();
  torch::NoGradGuard g;
  auto y = model.forward(inputs_for(model.config(), 4));
  EXPECT_EQ(y.sizes().vec(), (std::vector<std::int64_t>{4, 4}));
  EXPECT_TRUE(torch::isfinite(y).all().item<bool>());
}

TEST(TwoBranch, InceptionResNetTrunkYields1536Features) {
  torch::manual_seed(3);
  TwoBranchConfig c;
  c.backbone.kind = BackboneKind::InceptionResNet;
  c.backbone.repeats = {1, 1, 1};  // same stage layout, fewer repeated blocks
  TwoBranchModel model(c);
  model.eval();
  torch::NoGradGuard g;
  auto trace = model.trace(inputs_for(c, 1));
  ASSERT_EQ(trace.size(), 6u);
  EXPECT_EQ(trace[2].second, (std::vector<std::int64_t>{1, 1536}));
  EXPECT_EQ(trace[4].second, (std::vector<std::int64_t>{1, 3072}));
  EXPECT_EQ(trace[5].second, (std::vector<std::int64_t>{1, 4}));
}

TEST(TwoBranch, InceptionResNetNeedsAtLeast75Pixels) {
  TwoBranchConfig c;
  c.backbone.kind = BackboneKind::InceptionResNet;
  c.image_size = 64;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TwoBranch, HeadParameterCount) {
  for (auto [F, h] : {std::pair<std::int64_t, std::int64_t>{64, 512}, {8, 8}, {1536, 512}}) {
    TwoBranchConfig c = tiny_config();
    c.backbone.feature_dim = F;
    c.hidden = h;
    TwoBranchModel model(c);
    const auto expected = (2 * F + 1) * h + (h + 1) * 4;
    EXPECT_EQ(count_parameters(*model.fc1) + count_parameters(*model.fc2), expected) << "F=" << F << " h=" << h;
  }
}

TEST(TwoBranch, BranchesHaveIndependentParameters) {
  TwoBranchModel model(tiny_config());
  EXPECT_NE(model.lung_conv->conv->weight.data_ptr(), model.infection_conv->conv->weight.data_ptr());
  auto lp = model.lung_backbone->parameters();
  auto ip = model.infection_backbone->parameters();
  ASSERT_EQ(lp.size(), ip.size());
  for (std::size_t i = 0; i < lp.size(); ++i) EXPECT_NE(lp[i].data_ptr(), ip[i].data_ptr());
}

TEST(TwoBranch, LungFeaturesIgnoreInfectionInput) {
  torch::manual_seed(4);
  auto c = tiny_config();
  TwoBranchModel model(c);
  model.eval();
  torch::NoGradGuard g;
  auto in = inputs_for(c, 2);
  auto lung_a = model.lung_backbone->forward(model.lung_conv(in[0]));
  auto logits_a = model.forward(in);
  in[1] = torch::rand_like(in[1]);
  auto lung_b = model.lung_backbone->forward(model.lung_conv(in[0]));
  auto logits_b = model.forward(in);
  EXPECT_TRUE(torch::equal(lung_a, lung_b));
  EXPECT_FALSE(torch::equal(logits_a, logits_b));
}

TEST(TwoBranch, RejectsWrongInputs) {
  auto c = tiny_config();
  TwoBranchModel model(c);
  auto in = inputs_for(c, 1);
  EXPECT_THROW(model.forward({in[0]}), ShapeError);
  EXPECT_THROW(model.forward({in[1], in[0]}), ShapeError);
  EXPECT_THROW(model.forward({in[0], torch::rand({2, c.infection_depth, 16, 16})}), ShapeError);
  try {
    model.forward({torch::rand({1, 3, 17, 16}), in[1]});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("two-branch input (lungs)"), std::string::npos);
  }
}

TEST(TwoBranch, InferenceIsDeterministicTrainingIsNot) {
  torch::manual_seed(5);
  auto c = tiny_config();
  c.dropout = 0.5;
  TwoBranchModel model(c);
  auto in = inputs_for(c, 4);
  model.eval();
  EXPECT_TRUE(torch::equal(model.forward(in), model.forward(in)));
  model.train();
  EXPECT_FALSE(torch::equal(model.forward(in), model.forward(in)));
}

TEST(TwoBranch, GradientsMatchFiniteDifferences) {
  torch::manual_seed(6);
  auto c = tiny_config();
  TwoBranchModel model(c);
  // Populate running statistics so eval-mode batch norm is not the identity.
  model.train();
  {
    torch::NoGradGuard g;
    for (int i = 0; i < 3; ++i) model.forward(inputs_for(c, 4));
  }
  model.to(torch::kFloat64);
  model.eval();
  auto in = inputs_for(c, 3, torch::kFloat64);
  auto proj = torch::randn({3, 4}, torch::kFloat64);
  auto loss = [&] { return (model.forward(in) * proj).sum(); };
  auto r = gradcheck::finite_difference_check(model, loss, 50, 1e-6, 7);
  EXPECT_EQ(r.checked, 50);
  EXPECT_LT(r.worst_error, 1e-5) << r.worst_param;
}

TEST(TwoBranch, ConfigJsonRoundTrip) {
  TwoBranchConfig c;
  c.backbone.kind = BackboneKind::InceptionResNet;
  c.hidden = 256;
  c.dropout = 0.1;
  const auto j = c.to_json();
  EXPECT_EQ(j.at("arch"), "two-branch");
  EXPECT_EQ(TwoBranchConfig::from_json(j).to_json(), j);
}

TEST(TwoBranch, ConfigValidation) {
  auto bad = tiny_config();
  bad.dropout = 1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = tiny_config();
  bad.lung_depth = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = tiny_config();
  bad.image_size = 8;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
