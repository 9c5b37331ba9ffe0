#pragma once

#include <filesystem>
#include <memory>
#include <optional>

#include "covsev/model.hpp"

namespace covsev {

/// conv3x3 (in -> 3) + batch norm + ReLU; spatial size preserved.
class ConvLayerImpl : public torch::nn::Module {
 public:
  explicit ConvLayerImpl(std::int64_t in_channels, std::int64_t out_channels = 3);
  torch::Tensor forward(const torch::Tensor& x);

  std::int64_t in_channels() const { return in_channels_; }
  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};

 private:
  std::int64_t in_channels_;
};
TORCH_MODULE(ConvLayer);

/// Maps (B, 3, H, W) to (B, feature_dim).
class Backbone2D : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& x) = 0;
  virtual std::int64_t feature_dim() const = 0;
};

enum class BackboneKind { Compact, InceptionResNet };

struct BackboneSpec {
  BackboneKind kind = BackboneKind::Compact;
  /// Compact only; the Inception-ResNet trunk always yields 1536.
  std::int64_t feature_dim = 64;
  /// Compact only: channels of the first strided stage (doubled twice).
  std::int64_t width = 16;
  /// Inception-ResNet only: Block35 / Block17 / Block8 repeats.
  std::array<int, 3> repeats{10, 20, 10};
  /// Optional parameter archive restored into the trunk after construction.
  std::optional<std::filesystem::path> weights;
};

std::string backbone_kind_to_string(BackboneKind kind);
BackboneKind backbone_kind_from_string(std::string_view text);

/// Four strided conv3x3+BN+ReLU stages and global average pooling.
class CompactBackbone : public Backbone2D {
 public:
  CompactBackbone(std::int64_t width, std::int64_t feature_dim);
  torch::Tensor forward(const torch::Tensor& x) override;
  std::int64_t feature_dim() const override { return feature_dim_; }

 private:
  Stack body_{nullptr};
  std::int64_t feature_dim_;
};

/// Inception-ResNet-v2 trunk (stem, 5b, Block35 xN, 6a, Block17 xN, 7a,
/// Block8 xN, conv 7b) followed by global average pooling.
class InceptionResNetV2 : public Backbone2D {
 public:
  explicit InceptionResNetV2(std::array<int, 3> repeats = {10, 20, 10});
  torch::Tensor forward(const torch::Tensor& x) override;
  std::int64_t feature_dim() const override { return 1536; }

 private:
  Stack stem_{nullptr}, mixed_5b_{nullptr}, repeat_{nullptr}, mixed_6a_{nullptr},
      repeat_1_{nullptr}, mixed_7a_{nullptr}, repeat_2_{nullptr}, conv2d_7b_{nullptr};
};

std::shared_ptr<Backbone2D> make_backbone(const BackboneSpec& spec);

struct TwoBranchConfig {
  std::int64_t lung_depth = 32;
  std::int64_t infection_depth = 16;
  std::int64_t image_size = 299;
  BackboneSpec backbone;
  std::int64_t hidden = 512;
  double dropout = 0.3;

  void validate() const;
  nlohmann::json to_json() const;
  static TwoBranchConfig from_json(const nlohmann::json& j);
};

/// Lungs and infection volumes each go through their own ConvLayer and
/// backbone; the features are concatenated and classified by FC-ReLU-Dropout-FC.
class TwoBranchModel : public SeverityNet {
 public:
  explicit TwoBranchModel(TwoBranchConfig config);

  std::string kind() const override { return "2d"; }
  nlohmann::json arch_config() const override { return config_.to_json(); }
  std::size_t num_inputs() const override { return 2; }
  const TwoBranchConfig& config() const { return config_; }

  ConvLayer lung_conv{nullptr}, infection_conv{nullptr};
  std::shared_ptr<Backbone2D> lung_backbone, infection_backbone;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
  torch::nn::Dropout dropout{nullptr};

 protected:
  torch::Tensor run(const std::vector<torch::Tensor>& inputs, ShapeTrace* trace) override;

 private:
  TwoBranchConfig config_;
};

}  // namespace covsev
