#pragma once

#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "covsev/grid.hpp"
#include "covsev/preprocess.hpp"

namespace covsev {

/// One scan as model inputs: (lungs, infection) for the 2D model, (volume)
/// for the 3D model. Tensors carry no batch dimension.
struct TensorSample {
  std::string scan_id;
  std::vector<torch::Tensor> inputs;
  /// Class index 0..3, or -1 when unlabeled.
  int label = -1;
};

torch::Tensor to_tensor(const VolumeTensor& volume);
VolumeTensor from_tensor(const torch::Tensor& tensor);

TensorSample to_tensor_sample(std::string scan_id, const TwoBranchSample& sample);
TensorSample to_tensor_sample(std::string scan_id, const VoxelSample3D& sample);

/// Stacks input `slot` of the selected samples into a batch.
torch::Tensor collate(std::span<const TensorSample> samples, std::span<const std::size_t> indices,
                      std::size_t slot);

/// Labels as class indices; throws std::invalid_argument naming an unlabeled sample.
std::vector<int> sample_labels(std::span<const TensorSample> samples);

}  // namespace covsev
