#include "covsev/arch2d.hpp"

#include "covsev/errors.hpp"

namespace covsev {

namespace F = torch::nn::functional;
namespace nn = torch::nn;

ConvLayerImpl::ConvLayerImpl(std::int64_t in_channels, std::int64_t out_channels)
    : in_channels_(in_channels) {
  conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
  bn = register_module("bn", nn::BatchNorm2d(out_channels));
}

torch::Tensor ConvLayerImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != in_channels_)
    throw ShapeError("ConvLayer: expected " + std::to_string(in_channels_) + " input channels, got " +
                     (x.dim() == 4 ? std::to_string(x.size(1)) : "rank " + std::to_string(x.dim())));
  return torch::relu(bn(conv(x)));
}

std::string backbone_kind_to_string(BackboneKind kind) {
  return kind == BackboneKind::Compact ? "compact" : "inception-resnet";
}

BackboneKind backbone_kind_from_string(std::string_view text) {
  if (text == "compact") return BackboneKind::Compact;
  if (text == "inception-resnet") return BackboneKind::InceptionResNet;
  throw std::invalid_argument("unknown backbone '" + std::string(text) +
                              "' (expected compact or inception-resnet)");
}

namespace {

Stack conv_bn_relu(std::int64_t in, std::int64_t out, std::int64_t stride) {
  return Stack(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)),
                        nn::BatchNorm2d(out), nn::ReLU());
}

// Inception-ResNet building blocks. BatchNorm eps 1e-3 matches the usual
// pretrained weights.
Stack basic(std::int64_t in, std::int64_t out, std::vector<std::int64_t> kernel,
                     std::int64_t stride = 1, std::vector<std::int64_t> pad = {0, 0}) {
  return Stack(
      nn::Conv2d(nn::Conv2dOptions(in, out, torch::IntArrayRef(kernel)).stride(stride)
                     .padding(torch::IntArrayRef(pad)).bias(false)),
      nn::BatchNorm2d(nn::BatchNorm2dOptions(out).eps(1e-3)), nn::ReLU());
}
Stack basic(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1,
                     std::int64_t pad = 0) {
  return basic(in, out, {k, k}, stride, {pad, pad});
}

class ConcatImpl : public nn::Module {
 public:
  explicit ConcatImpl(std::vector<Stack> branches) {
    for (std::size_t i = 0; i < branches.size(); ++i)
      branches_.push_back(register_module("branch" + std::to_string(i), branches[i]));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    std::vector<torch::Tensor> outs;
    for (auto& b : branches_) outs.push_back(b->forward(x));
    return torch::cat(outs, 1);
  }

 private:
  std::vector<Stack> branches_;
};
TORCH_MODULE(Concat);

class ScaledResidualImpl : public nn::Module {
 public:
  ScaledResidualImpl(Concat branches, std::int64_t mixed, std::int64_t channels, double scale,
                     bool relu)
      : scale_(scale), relu_(relu) {
    branches_ = register_module("branches", branches);
    conv_ = register_module("conv2d", nn::Conv2d(nn::Conv2dOptions(mixed, channels, 1)));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto out = conv_(branches_(x)) * scale_ + x;
    return relu_ ? torch::relu(out) : out;
  }

 private:
  Concat branches_{nullptr};
  nn::Conv2d conv_{nullptr};
  double scale_;
  bool relu_;
};
TORCH_MODULE(ScaledResidual);

Stack max_pool_branch() { return Stack(nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2))); }

ScaledResidual block35(double scale) {
  return ScaledResidual(
      Concat(std::vector<Stack>{
          basic(320, 32, 1),
          Stack(basic(320, 32, 1), basic(32, 32, 3, 1, 1)),
          Stack(basic(320, 32, 1), basic(32, 48, 3, 1, 1), basic(48, 64, 3, 1, 1))}),
      128, 320, scale, true);
}

ScaledResidual block17(double scale) {
  return ScaledResidual(
      Concat(std::vector<Stack>{
          basic(1088, 192, 1),
          Stack(basic(1088, 128, 1), basic(128, 160, {1, 7}, 1, {0, 3}),
                         basic(160, 192, {7, 1}, 1, {3, 0}))}),
      384, 1088, scale, true);
}

ScaledResidual block8(double scale, bool relu) {
  return ScaledResidual(
      Concat(std::vector<Stack>{
          basic(2080, 192, 1),
          Stack(basic(2080, 192, 1), basic(192, 224, {1, 3}, 1, {0, 1}),
                         basic(224, 256, {3, 1}, 1, {1, 0}))}),
      448, 2080, scale, relu);
}

}  // namespace

CompactBackbone::CompactBackbone(std::int64_t width, std::int64_t feature_dim) : feature_dim_(feature_dim) {
  if (width < 1 || feature_dim < 1) throw std::invalid_argument("compact backbone: width and feature_dim must be >= 1");
  body_ = register_module(
      "body", Stack(conv_bn_relu(3, width, 2), conv_bn_relu(width, 2 * width, 2),
                             conv_bn_relu(2 * width, 4 * width, 2), conv_bn_relu(4 * width, feature_dim, 2),
                             nn::AdaptiveAvgPool2d(1), nn::Flatten()));
}

torch::Tensor CompactBackbone::forward(const torch::Tensor& x) { return body_->forward(x); }

InceptionResNetV2::InceptionResNetV2(std::array<int, 3> repeats) {
  for (int r : repeats)
    if (r < 1) throw std::invalid_argument("inception-resnet: block repeats must be >= 1");
  stem_ = register_module(
      "stem", Stack(basic(3, 32, 3, 2), basic(32, 32, 3), basic(32, 64, 3, 1, 1),
                             nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2)), basic(64, 80, 1),
                             basic(80, 192, 3), nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2))));
  mixed_5b_ = register_module(
      "mixed_5b",
      Stack(Concat(std::vector<Stack>{
          basic(192, 96, 1),
          Stack(basic(192, 48, 1), basic(48, 64, 5, 1, 2)),
          Stack(basic(192, 64, 1), basic(64, 96, 3, 1, 1), basic(96, 96, 3, 1, 1)),
          Stack(nn::AvgPool2d(nn::AvgPool2dOptions(3).stride(1).padding(1).count_include_pad(false)),
                         basic(192, 64, 1))})));
  repeat_ = register_module("repeat", Stack());
  for (int i = 0; i < repeats[0]; ++i) repeat_->push_back(block35(0.17));
  mixed_6a_ = register_module(
      "mixed_6a", Stack(Concat(std::vector<Stack>{
                      basic(320, 384, 3, 2),
                      Stack(basic(320, 256, 1), basic(256, 256, 3, 1, 1), basic(256, 384, 3, 2)),
                      max_pool_branch()})));
  repeat_1_ = register_module("repeat_1", Stack());
  for (int i = 0; i < repeats[1]; ++i) repeat_1_->push_back(block17(0.10));
  mixed_7a_ = register_module(
      "mixed_7a", Stack(Concat(std::vector<Stack>{
                      Stack(basic(1088, 256, 1), basic(256, 384, 3, 2)),
                      Stack(basic(1088, 256, 1), basic(256, 288, 3, 2)),
                      Stack(basic(1088, 256, 1), basic(256, 288, 3, 1, 1), basic(288, 320, 3, 2)),
                      max_pool_branch()})));
  // The last Block8 has no activation.
  repeat_2_ = register_module("repeat_2", Stack());
  for (int i = 0; i < repeats[2] - 1; ++i) repeat_2_->push_back(block8(0.20, true));
  repeat_2_->push_back(block8(1.0, false));
  conv2d_7b_ = register_module("conv2d_7b", Stack(basic(2080, 1536, 1), nn::AdaptiveAvgPool2d(1),
                                                           nn::Flatten()));
}

torch::Tensor InceptionResNetV2::forward(const torch::Tensor& x) {
  auto h = stem_->forward(x);
  h = repeat_->forward(mixed_5b_->forward(h));
  h = repeat_1_->forward(mixed_6a_->forward(h));
  h = repeat_2_->forward(mixed_7a_->forward(h));
  return conv2d_7b_->forward(h);
}

std::shared_ptr<Backbone2D> make_backbone(const BackboneSpec& spec) {
  std::shared_ptr<Backbone2D> b;
  if (spec.kind == BackboneKind::Compact)
    b = std::make_shared<CompactBackbone>(spec.width, spec.feature_dim);
  else
    b = std::make_shared<InceptionResNetV2>(spec.repeats);
  if (spec.weights) {
    torch::serialize::InputArchive archive;
    try {
      archive.load_from(spec.weights->string());
      b->load(archive);
    } catch (const c10::Error& e) {
      throw IoError("cannot load backbone weights " + spec.weights->string() + ": " + e.what_without_backtrace());
    }
  }
  return b;
}

void TwoBranchConfig::validate() const {
  if (lung_depth < 1 || infection_depth < 1) throw std::invalid_argument("2d config: depths must be >= 1");
  if (image_size < 16) throw std::invalid_argument("2d config: image_size must be >= 16");
  if (hidden < 1) throw std::invalid_argument("2d config: hidden must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("2d config: dropout must be in [0, 1)");
  if (backbone.kind == BackboneKind::InceptionResNet && image_size < 75)
    throw std::invalid_argument("2d config: inception-resnet needs image_size >= 75");
}

nlohmann::json TwoBranchConfig::to_json() const {
  nlohmann::json bb{{"kind", backbone_kind_to_string(backbone.kind)}};
  if (backbone.kind == BackboneKind::Compact) {
    bb["feature_dim"] = backbone.feature_dim;
    bb["width"] = backbone.width;
  } else {
    bb["repeats"] = backbone.repeats;
  }
  return {{"arch", "two-branch"},  {"lung_depth", lung_depth}, {"infection_depth", infection_depth},
          {"image_size", image_size}, {"backbone", bb},          {"hidden", hidden},
          {"dropout", dropout}};
}

TwoBranchConfig TwoBranchConfig::from_json(const nlohmann::json& j) {
  TwoBranchConfig c;
  c.lung_depth = j.value("lung_depth", c.lung_depth);
  c.infection_depth = j.value("infection_depth", c.infection_depth);
  c.image_size = j.value("image_size", c.image_size);
  c.hidden = j.value("hidden", c.hidden);
  c.dropout = j.value("dropout", c.dropout);
  if (j.contains("backbone")) {
    const auto& bb = j["backbone"];
    c.backbone.kind = backbone_kind_from_string(bb.value("kind", std::string("compact")));
    c.backbone.feature_dim = bb.value("feature_dim", c.backbone.feature_dim);
    c.backbone.width = bb.value("width", c.backbone.width);
    if (bb.contains("repeats")) c.backbone.repeats = bb["repeats"].get<std::array<int, 3>>();
  }
  c.validate();
  return c;
}

TwoBranchModel::TwoBranchModel(TwoBranchConfig config) : config_(std::move(config)) {
  config_.validate();
  lung_conv = register_module("lung_conv", ConvLayer(config_.lung_depth));
  infection_conv = register_module("infection_conv", ConvLayer(config_.infection_depth));
  lung_backbone = register_module("lung_backbone", make_backbone(config_.backbone));
  infection_backbone = register_module("infection_backbone", make_backbone(config_.backbone));
  const auto f = lung_backbone->feature_dim();
  fc1 = register_module("fc1", nn::Linear(2 * f, config_.hidden));
  dropout = register_module("dropout", nn::Dropout(config_.dropout));
  fc2 = register_module("fc2", nn::Linear(config_.hidden, 4));
}

torch::Tensor TwoBranchModel::run(const std::vector<torch::Tensor>& inputs, ShapeTrace* trace) {
  if (inputs.size() != 2)
    throw ShapeError("two-branch input: expected 2 tensors (lungs, infection), got " + std::to_string(inputs.size()));
  const auto s = config_.image_size;
  expect_shape(inputs[0], {-1, config_.lung_depth, s, s}, "two-branch input (lungs)");
  expect_shape(inputs[1], {-1, config_.infection_depth, s, s}, "two-branch input (infection)");
  if (inputs[0].size(0) != inputs[1].size(0)) throw ShapeError("two-branch input: batch sizes differ");

  auto l = lung_conv(inputs[0]);
  auto i = infection_conv(inputs[1]);
  record(trace, "lung_conv", l);
  record(trace, "infection_conv", i);
  l = lung_backbone->forward(l);
  i = infection_backbone->forward(i);
  record(trace, "lung_features", l);
  record(trace, "infection_features", i);
  auto h = torch::cat({l, i}, 1);
  record(trace, "concat", h);
  auto logits = fc2(dropout(torch::relu(fc1(h))));
  record(trace, "logits", logits);
  return logits;
}

}  // namespace covsev
