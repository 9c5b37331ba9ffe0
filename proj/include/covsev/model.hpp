#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace covsev {

/// (stage name, output shape) pairs recorded by a traced forward pass.
using ShapeTrace = std::vector<std::pair<std::string, std::vector<std::int64_t>>>;

/// Sequential container with a concrete forward, so stacks can nest.
class StackImpl : public torch::nn::SequentialImpl {
 public:
  using SequentialImpl::SequentialImpl;
  torch::Tensor forward(torch::Tensor x) { return SequentialImpl::forward(std::move(x)); }
};
TORCH_MODULE(Stack);

/// Common interface of the severity classifiers: a list of input tensors in,
/// (B, 4) logits out.
class SeverityNet : public torch::nn::Module {
 public:
  torch::Tensor forward(const std::vector<torch::Tensor>& inputs) { return run(inputs, nullptr); }
  ShapeTrace trace(const std::vector<torch::Tensor>& inputs) {
    ShapeTrace t;
    run(inputs, &t);
    return t;
  }

  /// "2d" or "3d".
  virtual std::string kind() const = 0;
  /// Full architecture description; its hash guards checkpoint loading.
  virtual nlohmann::json arch_config() const = 0;
  /// Number of input tensors forward() expects.
  virtual std::size_t num_inputs() const = 0;

 protected:
  virtual torch::Tensor run(const std::vector<torch::Tensor>& inputs, ShapeTrace* trace) = 0;
};

/// Throws ShapeError naming `stage` unless `t` has exactly `expected` sizes.
/// A negative entry matches any size.
void expect_shape(const torch::Tensor& t, const std::vector<std::int64_t>& expected,
                  const std::string& stage);

inline void record(ShapeTrace* trace, const std::string& stage, const torch::Tensor& t) {
  if (trace) trace->emplace_back(stage, t.sizes().vec());
}

std::int64_t count_parameters(const torch::nn::Module& module);

}  // namespace covsev
