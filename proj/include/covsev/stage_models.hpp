#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>

#include <torch/torch.h>

#include "covsev/model.hpp"
#include "covsev/preprocess.hpp"

namespace covsev {

/// Shared settings of the two learned preprocessing stages. Slices are
/// resized to work_size x work_size before entering either network.
struct StageModelConfig {
  std::int64_t work_size = 64;
  std::int64_t width = 16;
  int epochs = 12;
  int batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static StageModelConfig from_json(const nlohmann::json& j);
};

/// Compact ResNeXt-style binary classifier: (B,1,S,S) -> (B) lung logits.
class SliceClassifierImpl : public torch::nn::Module {
 public:
  explicit SliceClassifierImpl(std::int64_t width = 16, std::int64_t cardinality = 4);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  Stack stem_{nullptr}, blocks_{nullptr};
  torch::nn::Linear fc_{nullptr};
};
TORCH_MODULE(SliceClassifier);

/// Two-level U-Net with attention-gated skips: (B,1,S,S) -> (B,2,S,S) logits
/// for (lung, infection). S must be divisible by 4.
class AttentionUNetImpl : public torch::nn::Module {
 public:
  explicit AttentionUNetImpl(std::int64_t width = 16);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  Stack enc1_{nullptr}, enc2_{nullptr}, bottleneck_{nullptr}, dec2_{nullptr}, dec1_{nullptr};
  Stack gate2_{nullptr}, gate1_{nullptr};
  torch::nn::ConvTranspose2d up2_{nullptr}, up1_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(AttentionUNet);

/// Trains on every slice of `scans`; the target is whether the ground-truth
/// lung mask is non-empty. Scans must carry ground-truth masks.
SliceClassifier train_slice_classifier(std::span<const ScanRecord> scans, const StageModelConfig& config,
                                       std::ostream* log = nullptr);

/// Trains on the lung-bearing slices of `scans` against ground-truth masks.
AttentionUNet train_segmenter(std::span<const ScanRecord> scans, const StageModelConfig& config,
                              std::ostream* log = nullptr);

/// Wraps a trained classifier as the filter stage's predictor.
SlicePredictor slice_predictor(SliceClassifier model, std::int64_t work_size);
/// Wraps a trained U-Net as the segmentation stage (threshold at p = 0.5).
Segmenter unet_segmenter(AttentionUNet model, std::int64_t work_size);

void save_stage_model(torch::nn::Module& module, const std::filesystem::path& path);
void load_stage_model(torch::nn::Module& module, const std::filesystem::path& path);

}  // namespace covsev
