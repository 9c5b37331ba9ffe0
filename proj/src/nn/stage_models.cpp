#include "covsev/stage_models.hpp"

#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "covsev/errors.hpp"
#include "covsev/volume.hpp"

namespace covsev {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

nlohmann::json StageModelConfig::to_json() const {
  return {{"work_size", work_size}, {"width", width}, {"epochs", epochs},
          {"batch_size", batch_size}, {"lr", lr},     {"seed", seed}};
}

StageModelConfig StageModelConfig::from_json(const nlohmann::json& j) {
  StageModelConfig c;
  c.work_size = j.value("work_size", c.work_size);
  c.width = j.value("width", c.width);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  if (c.work_size < 8 || c.work_size % 4 != 0) throw std::invalid_argument("stage model: work_size must be a multiple of 4, >= 8");
  if (c.epochs < 1 || c.batch_size < 1) throw std::invalid_argument("stage model: epochs and batch_size must be >= 1");
  return c;
}

namespace {

Stack cbr(std::int64_t in, std::int64_t out, std::int64_t stride = 1, std::int64_t groups = 1,
                   std::int64_t k = 3) {
  return Stack(
      nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).groups(groups).bias(false)),
      nn::BatchNorm2d(out), nn::ReLU());
}

// Bottleneck with a grouped 3x3 convolution.
class ResNeXtBlockImpl : public nn::Module {
 public:
  ResNeXtBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride, std::int64_t cardinality) {
    const auto mid = std::max(cardinality, out / 2);
    body_ = register_module(
        "body", Stack(cbr(in, mid, 1, 1, 1), cbr(mid, mid, stride, cardinality),
                               nn::Conv2d(nn::Conv2dOptions(mid, out, 1).bias(false)), nn::BatchNorm2d(out)));
    if (stride != 1 || in != out)
      shortcut_ = register_module(
          "shortcut", Stack(nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                                     nn::BatchNorm2d(out)));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    return torch::relu(body_->forward(x) + (shortcut_ ? shortcut_->forward(x) : x));
  }

 private:
  Stack body_{nullptr}, shortcut_{nullptr};
};
TORCH_MODULE(ResNeXtBlock);

torch::Tensor resize(const torch::Tensor& x, std::int64_t h, std::int64_t w) {
  if (x.size(-2) == h && x.size(-1) == w) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

torch::Tensor image_tensor(const Image2D& img) {
  return torch::from_blob(const_cast<float*>(img.data.data()), {1, 1, img.height, img.width}, torch::kFloat32)
      .clone();
}

torch::Tensor mask_tensor(const Mask2D& m) {
  return torch::from_blob(const_cast<std::uint8_t*>(m.data.data()), {1, 1, m.height, m.width}, torch::kUInt8)
      .to(torch::kFloat32);
}

void require_masks(const ScanRecord& s) {
  if (s.ground_truth_masks.size() != s.slices.size())
    throw ContractError("scan " + s.scan_id + ": stage-model training needs ground-truth masks");
}

template <typename Step>
void fit(nn::Module& model, std::size_t n, const StageModelConfig& cfg, const char* name, std::ostream* log,
         Step step) {
  torch::manual_seed(cfg.seed);
  std::mt19937_64 rng(cfg.seed);
  torch::optim::Adam opt(model.parameters(), torch::optim::AdamOptions(cfg.lr));
  std::vector<std::size_t> order(n);
  model.train();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto len = std::min(static_cast<std::size_t>(cfg.batch_size), n - start);
      if (len < 2) continue;
      std::vector<std::int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(start + len));
      opt.zero_grad();
      torch::Tensor loss = step(torch::tensor(idx, torch::kLong));
      loss.backward();
      opt.step();
      total += loss.item<double>() * static_cast<double>(len);
    }
    if (log) *log << "[" << name << "] epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << total / n << "\n";
  }
  model.eval();
}

}  // namespace

SliceClassifierImpl::SliceClassifierImpl(std::int64_t width, std::int64_t cardinality) {
  stem_ = register_module("stem", cbr(1, width, 2));
  blocks_ = register_module("blocks", Stack(ResNeXtBlock(width, 2 * width, 2, cardinality),
                                                     ResNeXtBlock(2 * width, 4 * width, 2, cardinality),
                                                     nn::AdaptiveAvgPool2d(1), nn::Flatten()));
  fc_ = register_module("fc", nn::Linear(4 * width, 1));
}

torch::Tensor SliceClassifierImpl::forward(const torch::Tensor& x) {
  return fc_(blocks_->forward(stem_->forward(x))).squeeze(1);
}

AttentionUNetImpl::AttentionUNetImpl(std::int64_t w) {
  enc1_ = register_module("enc1", Stack(cbr(1, w), cbr(w, w)));
  enc2_ = register_module("enc2", Stack(cbr(w, 2 * w, 2), cbr(2 * w, 2 * w)));
  bottleneck_ = register_module("bottleneck", Stack(cbr(2 * w, 4 * w, 2), cbr(4 * w, 4 * w)));
  up2_ = register_module("up2", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(4 * w, 2 * w, 2).stride(2)));
  up1_ = register_module("up1", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(2 * w, w, 2).stride(2)));
  // Gate input is [skip, upsampled] stacked on channels; output is a
  // per-pixel weight applied to the skip features.
  gate2_ = register_module("gate2", Stack(cbr(4 * w, w, 1, 1, 1), nn::Conv2d(nn::Conv2dOptions(w, 1, 1)),
                                                   nn::Sigmoid()));
  gate1_ = register_module("gate1", Stack(cbr(2 * w, w, 1, 1, 1), nn::Conv2d(nn::Conv2dOptions(w, 1, 1)),
                                                   nn::Sigmoid()));
  dec2_ = register_module("dec2", Stack(cbr(4 * w, 2 * w), cbr(2 * w, 2 * w)));
  dec1_ = register_module("dec1", Stack(cbr(2 * w, w), cbr(w, w)));
  out_ = register_module("out", nn::Conv2d(nn::Conv2dOptions(w, 2, 1)));
}

torch::Tensor AttentionUNetImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 1 || x.size(2) % 4 != 0 || x.size(3) % 4 != 0)
    throw ShapeError("attention u-net: expected (B, 1, H, W) with H, W divisible by 4");
  auto e1 = enc1_->forward(x);
  auto e2 = enc2_->forward(e1);
  auto b = bottleneck_->forward(e2);
  auto u2 = up2_(b);
  auto s2 = e2 * gate2_->forward(torch::cat({e2, u2}, 1));
  auto d2 = dec2_->forward(torch::cat({s2, u2}, 1));
  auto u1 = up1_(d2);
  auto s1 = e1 * gate1_->forward(torch::cat({e1, u1}, 1));
  auto d1 = dec1_->forward(torch::cat({s1, u1}, 1));
  return out_(d1);
}

SliceClassifier train_slice_classifier(std::span<const ScanRecord> scans, const StageModelConfig& cfg,
                                       std::ostream* log) {
  std::vector<torch::Tensor> xs;
  std::vector<float> ys;
  for (const auto& s : scans) {
    require_masks(s);
    for (std::size_t i = 0; i < s.slices.size(); ++i) {
      xs.push_back(resize(image_tensor(s.slices[i]), cfg.work_size, cfg.work_size));
      const auto& lung = s.ground_truth_masks[i].lung.data;
      ys.push_back(std::any_of(lung.begin(), lung.end(), [](std::uint8_t v) { return v != 0; }) ? 1.0f : 0.0f);
    }
  }
  if (xs.empty()) throw std::invalid_argument("slice classifier: no training slices");
  auto x = torch::cat(xs, 0);
  auto y = torch::tensor(ys);
  torch::manual_seed(cfg.seed);
  SliceClassifier model(cfg.width);
  fit(*model, xs.size(), cfg, "slice-filter", log, [&](const torch::Tensor& idx) {
    return F::binary_cross_entropy_with_logits(model(x.index_select(0, idx)), y.index_select(0, idx));
  });
  return model;
}

AttentionUNet train_segmenter(std::span<const ScanRecord> scans, const StageModelConfig& cfg, std::ostream* log) {
  std::vector<torch::Tensor> xs, ys;
  for (const auto& s : scans) {
    require_masks(s);
    for (std::size_t i = 0; i < s.slices.size(); ++i) {
      const auto& m = s.ground_truth_masks[i];
      if (std::none_of(m.lung.data.begin(), m.lung.data.end(), [](std::uint8_t v) { return v != 0; })) continue;
      xs.push_back(resize(image_tensor(s.slices[i]), cfg.work_size, cfg.work_size));
      auto target = torch::cat({mask_tensor(m.lung), mask_tensor(m.infection)}, 1);
      ys.push_back(resize(target, cfg.work_size, cfg.work_size));
    }
  }
  if (xs.empty()) throw std::invalid_argument("segmenter: no lung-bearing training slices");
  auto x = torch::cat(xs, 0);
  auto y = torch::cat(ys, 0);
  torch::manual_seed(cfg.seed);
  AttentionUNet model(cfg.width);
  fit(*model, xs.size(), cfg, "segmenter", log, [&](const torch::Tensor& idx) {
    return F::binary_cross_entropy_with_logits(model(x.index_select(0, idx)), y.index_select(0, idx));
  });
  return model;
}

SlicePredictor slice_predictor(SliceClassifier model, std::int64_t work_size) {
  model->eval();
  return [model, work_size](const Image2D& slice, std::size_t) mutable {
    torch::NoGradGuard guard;
    auto x = resize(image_tensor(slice), work_size, work_size);
    return torch::sigmoid(model->forward(x).to(torch::kFloat64)).item<double>();
  };
}

Segmenter unet_segmenter(AttentionUNet model, std::int64_t work_size) {
  model->eval();
  return {[model, work_size](const Image2D& slice, std::size_t) mutable {
    torch::NoGradGuard guard;
    auto logits = model->forward(resize(image_tensor(slice), work_size, work_size));
    auto full = resize(logits, slice.height, slice.width);
    auto bin = (full > 0).to(torch::kUInt8).contiguous();
    MaskPair out{Mask2D(slice.height, slice.width), Mask2D(slice.height, slice.width)};
    const auto plane = static_cast<std::size_t>(slice.height * slice.width);
    const auto* p = bin.data_ptr<std::uint8_t>();
    std::copy(p, p + plane, out.lung.data.begin());
    std::copy(p + plane, p + 2 * plane, out.infection.data.begin());
    return out;
  }};
}

void save_stage_model(nn::Module& module, const std::filesystem::path& path) {
  torch::serialize::OutputArchive archive;
  module.save(archive);
  std::ostringstream blob;
  archive.save_to(blob);
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, blob.str());
}

void load_stage_model(nn::Module& module, const std::filesystem::path& path) {
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    module.load(archive);
  } catch (const c10::Error& e) {
    throw IoError("cannot read stage model " + path.string() + ": " + e.what_without_backtrace());
  }
}

}  // namespace covsev
