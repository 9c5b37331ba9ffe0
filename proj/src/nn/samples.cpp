#include "covsev/samples.hpp"

#include <cstring>

#include "covsev/errors.hpp"

namespace covsev {

torch::Tensor to_tensor(const VolumeTensor& volume) {
  if (static_cast<std::int64_t>(volume.values.size()) != volume.numel())
    throw ShapeError("volume: value count does not match shape " + shape_string(volume.shape));
  auto t = torch::empty(volume.shape, torch::kFloat32);
  std::memcpy(t.data_ptr<float>(), volume.values.data(), volume.values.size() * sizeof(float));
  return t;
}

VolumeTensor from_tensor(const torch::Tensor& tensor) {
  auto t = tensor.detach().to(torch::kFloat32).contiguous();
  VolumeTensor v;
  v.shape = t.sizes().vec();
  v.values.resize(static_cast<std::size_t>(t.numel()));
  std::memcpy(v.values.data(), t.data_ptr<float>(), v.values.size() * sizeof(float));
  return v;
}

TensorSample to_tensor_sample(std::string scan_id, const TwoBranchSample& sample) {
  return {std::move(scan_id), {to_tensor(sample.lungs), to_tensor(sample.infection)},
          sample.label ? class_index(*sample.label) : -1};
}

TensorSample to_tensor_sample(std::string scan_id, const VoxelSample3D& sample) {
  return {std::move(scan_id), {to_tensor(sample.volume)}, sample.label ? class_index(*sample.label) : -1};
}

torch::Tensor collate(std::span<const TensorSample> samples, std::span<const std::size_t> indices,
                      std::size_t slot) {
  std::vector<torch::Tensor> parts;
  parts.reserve(indices.size());
  for (auto i : indices) {
    const auto& s = samples[i];
    if (slot >= s.inputs.size())
      throw ShapeError("sample " + s.scan_id + ": missing input " + std::to_string(slot));
    parts.push_back(s.inputs[slot]);
  }
  try {
    return torch::stack(parts);
  } catch (const c10::Error&) {
    throw ShapeError("cannot batch input " + std::to_string(slot) + ": samples have different shapes");
  }
}

std::vector<int> sample_labels(std::span<const TensorSample> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.label < 0 || s.label > 3) throw std::invalid_argument("sample " + s.scan_id + " has no label");
    out.push_back(s.label);
  }
  return out;
}

}  // namespace covsev
