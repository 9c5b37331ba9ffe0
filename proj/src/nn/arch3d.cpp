#include "covsev/arch3d.hpp"

#include "covsev/errors.hpp"

namespace covsev {

namespace nn = torch::nn;

void HybridDeCoVNetConfig::validate() const {
  if (in_channels < 1 || stem_channels < 1) throw std::invalid_argument("3d config: channel counts must be >= 1");
  for (auto c : ladder)
    if (c < 1) throw std::invalid_argument("3d config: ladder channels must be >= 1");
  for (auto c : head_channels)
    if (c < 1) throw std::invalid_argument("3d config: head channels must be >= 1");
  for (auto p : head_pool)
    if (p < 1) throw std::invalid_argument("3d config: head pool must be >= 1");
  if (blocks_per_layer < 1) throw std::invalid_argument("3d config: blocks_per_layer must be >= 1");
  // Stem halves H/W, each layer halves D/H/W once (rounding up).
  if (depth < 16 || depth % 16 != 0) throw std::invalid_argument("3d config: depth must be a multiple of 16");
  if (size < 16) throw std::invalid_argument("3d config: size must be >= 16");
}

nlohmann::json HybridDeCoVNetConfig::to_json() const {
  return {{"arch", "hybrid-decovnet"}, {"in_channels", in_channels}, {"stem_channels", stem_channels},
          {"ladder", ladder},          {"blocks_per_layer", blocks_per_layer},
          {"head_channels", head_channels}, {"head_pool", head_pool},     {"depth", depth},
          {"size", size},              {"variable_depth", variable_depth}};
}

HybridDeCoVNetConfig HybridDeCoVNetConfig::from_json(const nlohmann::json& j) {
  HybridDeCoVNetConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.stem_channels = j.value("stem_channels", c.stem_channels);
  if (j.contains("ladder")) c.ladder = j["ladder"].get<std::array<std::int64_t, 4>>();
  c.blocks_per_layer = j.value("blocks_per_layer", c.blocks_per_layer);
  if (j.contains("head_channels")) c.head_channels = j["head_channels"].get<std::array<std::int64_t, 3>>();
  if (j.contains("head_pool")) c.head_pool = j["head_pool"].get<std::array<std::int64_t, 3>>();
  c.depth = j.value("depth", c.depth);
  c.size = j.value("size", c.size);
  c.variable_depth = j.value("variable_depth", c.variable_depth);
  c.validate();
  return c;
}

HybridDeCoVNetConfig HybridDeCoVNetConfig::width_reduced() {
  HybridDeCoVNetConfig c;
  c.stem_channels = 4;
  c.ladder = {4, 8, 16, 32};
  c.head_channels = {16, 8, 4};
  c.depth = 16;
  c.size = 56;
  return c;
}

ResBlock3dImpl::ResBlock3dImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t stride) {
  conv1 = register_module("conv1", nn::Conv3d(nn::Conv3dOptions(in_channels, out_channels, 3)
                                                  .stride(stride).padding(1).bias(false)));
  bn1 = register_module("bn1", nn::BatchNorm3d(out_channels));
  conv2 = register_module("conv2", nn::Conv3d(nn::Conv3dOptions(out_channels, out_channels, 3).padding(1).bias(false)));
  bn2 = register_module("bn2", nn::BatchNorm3d(out_channels));
  if (stride != 1 || in_channels != out_channels)
    projection = register_module(
        "projection", Stack(nn::Conv3d(nn::Conv3dOptions(in_channels, out_channels, 1).stride(stride).bias(false)),
                                     nn::BatchNorm3d(out_channels)));
}

torch::Tensor ResBlock3dImpl::forward(const torch::Tensor& x) {
  auto main = bn2(conv2(torch::relu(bn1(conv1(x)))));
  auto shortcut = projection ? projection->forward(x) : x;
  return torch::relu(main + shortcut);
}

HybridDeCoVNet::HybridDeCoVNet(HybridDeCoVNetConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  stem = register_module(
      "stem", Stack(nn::Conv3d(nn::Conv3dOptions(c.in_channels, c.stem_channels, {5, 7, 7})
                                            .stride({1, 2, 2}).padding({2, 3, 3}).bias(false)),
                             nn::BatchNorm3d(c.stem_channels), nn::ReLU()));
  std::int64_t in = c.stem_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    Stack layer;
    for (int b = 0; b < c.blocks_per_layer; ++b) {
      layer->push_back(ResBlock3d(in, c.ladder[i], b == 0 ? 2 : 1));
      in = c.ladder[i];
    }
    layers[i] = register_module("layer" + std::to_string(i + 1), layer);
  }
  Stack h(nn::AdaptiveMaxPool3d(nn::AdaptiveMaxPool3dOptions(
      {c.head_pool[0], c.head_pool[1], c.head_pool[2]})));
  for (auto out : c.head_channels) {
    h->push_back(nn::Conv3d(nn::Conv3dOptions(in, out, 3).padding(1).bias(false)));
    h->push_back(nn::BatchNorm3d(out));
    h->push_back(nn::ReLU());
    in = out;
  }
  h->push_back(nn::AdaptiveMaxPool3d(nn::AdaptiveMaxPool3dOptions(1)));
  h->push_back(nn::Flatten());
  head = register_module("head", h);
  decision = register_module("decision", nn::Linear(in, 4));
}

torch::Tensor HybridDeCoVNet::run(const std::vector<torch::Tensor>& inputs, ShapeTrace* trace) {
  if (inputs.size() != 1)
    throw ShapeError("hybrid-decovnet input: expected 1 tensor, got " + std::to_string(inputs.size()));
  const auto& x = inputs[0];
  const auto& c = config_;
  expect_shape(x, {-1, c.in_channels, c.variable_depth ? -1 : c.depth, c.size, c.size}, "hybrid-decovnet input");
  if (c.variable_depth && (x.size(2) < 16 || x.size(2) % 16 != 0))
    throw ShapeError("hybrid-decovnet input: depth must be a multiple of 16, got " + std::to_string(x.size(2)));

  const auto b = x.size(0);
  auto d = x.size(2), s = (c.size + 1) / 2;
  auto h = stem->forward(x);
  expect_shape(h, {b, c.stem_channels, d, s, s}, "stem");
  record(trace, "stem", h);
  for (std::size_t i = 0; i < 4; ++i) {
    h = layers[i]->forward(h);
    d /= 2;
    s = (s + 1) / 2;
    expect_shape(h, {b, c.ladder[i], d, s, s}, "layer" + std::to_string(i + 1));
    record(trace, "layer" + std::to_string(i + 1), h);
  }
  h = head->forward(h);
  expect_shape(h, {b, c.head_channels[2]}, "head");
  record(trace, "head", h);
  auto logits = decision(h);
  record(trace, "logits", logits);
  return logits;
}

}  // namespace covsev
