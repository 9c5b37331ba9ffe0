#include "covsev/model.hpp"

#include "covsev/errors.hpp"
#include "covsev/grid.hpp"

namespace covsev {

void expect_shape(const torch::Tensor& t, const std::vector<std::int64_t>& expected,
                  const std::string& stage) {
  const auto actual = t.sizes().vec();
  bool ok = actual.size() == expected.size();
  for (std::size_t i = 0; ok && i < expected.size(); ++i)
    ok = expected[i] < 0 || expected[i] == actual[i];
  if (!ok) {
    std::string want = "(";
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (i) want += ", ";
      want += expected[i] < 0 ? "*" : std::to_string(expected[i]);
    }
    want += ")";
    throw ShapeError(stage + ": expected shape " + want + ", got " + shape_string(actual));
  }
}

std::int64_t count_parameters(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace covsev
