#pragma once

#include <array>

#include "covsev/model.hpp"

namespace covsev {

struct HybridDeCoVNetConfig {
  std::int64_t in_channels = 2;
  std::int64_t stem_channels = 16;
  std::array<std::int64_t, 4> ladder{64, 128, 256, 512};
  int blocks_per_layer = 1;
  std::array<std::int64_t, 3> head_channels{256, 128, 64};
  std::array<std::int64_t, 3> head_pool{2, 4, 4};
  std::int64_t depth = 64;
  std::int64_t size = 224;
  /// Accept any depth >= 16 divisible by 16 instead of exactly `depth`.
  bool variable_depth = false;

  void validate() const;
  nlohmann::json to_json() const;
  static HybridDeCoVNetConfig from_json(const nlohmann::json& j);

  /// Channels 4/8/16/32 on 2x16x56x56 inputs.
  static HybridDeCoVNetConfig width_reduced();
};

/// Two 3x3x3 conv+BN stages with an identity or 1x1x1 projection shortcut.
class ResBlock3dImpl : public torch::nn::Module {
 public:
  ResBlock3dImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv3d conv1{nullptr}, conv2{nullptr};
  torch::nn::BatchNorm3d bn1{nullptr}, bn2{nullptr};
  /// Empty when the shortcut is the identity.
  Stack projection{nullptr};
};
TORCH_MODULE(ResBlock3d);

/// Stem -> four residual layers -> adaptive max pool, three conv3d, global
/// max pool -> single FC decision layer.
class HybridDeCoVNet : public SeverityNet {
 public:
  explicit HybridDeCoVNet(HybridDeCoVNetConfig config);

  std::string kind() const override { return "3d"; }
  nlohmann::json arch_config() const override { return config_.to_json(); }
  std::size_t num_inputs() const override { return 1; }
  const HybridDeCoVNetConfig& config() const { return config_; }

  Stack stem{nullptr};
  std::array<Stack, 4> layers{nullptr, nullptr, nullptr, nullptr};
  Stack head{nullptr};
  torch::nn::Linear decision{nullptr};

 protected:
  torch::Tensor run(const std::vector<torch::Tensor>& inputs, ShapeTrace* trace) override;

 private:
  HybridDeCoVNetConfig config_;
};

}  // namespace covsev
