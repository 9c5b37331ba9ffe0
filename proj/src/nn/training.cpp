#include "covsev/training.hpp"

#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "covsev/checkpoint.hpp"

namespace covsev {

namespace fs = std::filesystem;

std::vector<double> class_weights(std::span<const TensorSample> samples) {
  std::array<double, kNumClasses> counts{};
  for (auto y : sample_labels(samples)) counts[static_cast<std::size_t>(y)] += 1;
  std::vector<double> w(kNumClasses, 0.0);
  const double n = static_cast<double>(samples.size());
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (counts[c] > 0) w[c] = n / (kNumClasses * counts[c]);
  return w;
}

torch::Tensor predict_logits(SeverityNet& model, std::span<const TensorSample> samples, std::int64_t batch_size) {
  if (samples.empty()) return torch::empty({0, kNumClasses});
  if (batch_size < 1) throw std::invalid_argument("predict: batch_size must be >= 1");
  const bool was_training = model.is_training();
  model.eval();
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> chunks;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(samples.size(), start + static_cast<std::size_t>(batch_size)); ++i)
      idx.push_back(i);
    std::vector<torch::Tensor> inputs;
    for (std::size_t k = 0; k < model.num_inputs(); ++k) inputs.push_back(collate(samples, idx, k));
    chunks.push_back(model.forward(inputs));
  }
  model.train(was_training);
  return torch::cat(chunks, 0);
}

ProbMatrix predict_probs(SeverityNet& model, std::span<const TensorSample> samples, std::int64_t batch_size) {
  auto logits = predict_logits(model, samples, batch_size).to(torch::kFloat64).contiguous();
  ProbMatrix out(static_cast<std::size_t>(logits.size(0)));
  const double* p = logits.data_ptr<double>();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = softmax(std::span<const double>(p + i * kNumClasses, kNumClasses));
  return out;
}

ScanProbabilities probability_table(SeverityNet& model, std::span<const TensorSample> samples,
                                    std::int64_t batch_size) {
  ScanProbabilities t;
  for (const auto& s : samples) {
    t.scan_ids.push_back(s.scan_id);
    t.labels.push_back(s.label >= 0 ? std::optional(severity_from_index(s.label)) : std::nullopt);
  }
  t.probs = predict_probs(model, samples, batch_size);
  return t;
}

namespace {

double score(SeverityNet& model, std::span<const TensorSample> samples, std::int64_t batch) {
  const auto probs = predict_probs(model, samples, batch);
  return macro_f1(sample_labels(samples), argmax_rows(probs));
}

// Flips every input of sample i along the same axes: width always, depth
// too for (B, C, D, H, W) volumes.
void flip_samples(std::vector<torch::Tensor>& inputs, std::mt19937_64& rng) {
  const auto n = inputs.front().size(0);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::pair<bool, bool>> flips(static_cast<std::size_t>(n));
  for (auto& f : flips) f = {coin(rng), coin(rng)};
  for (auto& x : inputs) {
    std::vector<torch::Tensor> rows;
    for (std::int64_t i = 0; i < n; ++i) {
      auto r = x[i];
      std::vector<std::int64_t> dims;
      if (flips[static_cast<std::size_t>(i)].first) dims.push_back(r.dim() - 1);
      if (r.dim() == 4 && flips[static_cast<std::size_t>(i)].second) dims.push_back(1);
      rows.push_back(dims.empty() ? r : r.flip(dims));
    }
    x = torch::stack(rows, 0);
  }
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

}  // namespace

TrainResult train_model(SeverityNet& model, std::span<const TensorSample> train, std::span<const TensorSample> val,
                        const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("train_model: empty training set");
  const auto train_labels = sample_labels(train);
  if (!val.empty()) sample_labels(val);

  torch::manual_seed(config.seed);
  std::mt19937_64 shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::mt19937_64 augment_rng(config.seed ^ 0xbf58476d1ce4e5b9ULL);

  torch::optim::Adam opt(model.parameters(), torch::optim::AdamOptions(config.initial_lr)
                                                 .betas({config.adam_beta1, config.adam_beta2})
                                                 .weight_decay(config.weight_decay));
  torch::Tensor weight;
  if (config.class_weighted_loss) {
    auto w = class_weights(train);
    weight = torch::tensor(w, torch::kFloat32);
  }
  auto ce = torch::nn::functional::CrossEntropyFuncOptions();
  if (weight.defined()) ce.weight(weight);

  const bool save = !options.checkpoint_dir.empty();
  TrainResult result;
  if (save) {
    fs::create_directories(options.checkpoint_dir);
    result.best_checkpoint = options.checkpoint_dir / (options.name + "_best.pt");
    result.final_checkpoint = options.checkpoint_dir / (options.name + "_final.pt");
    result.history_path = options.checkpoint_dir / (options.name + "_history.csv");
  }

  std::vector<std::size_t> order(train.size());
  const auto bs = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at_epoch(config, epoch);
    set_lr(opt, lr);
    model.train();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++batch_no) {
      std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      // A single-sample batch cannot estimate batch-norm statistics.
      if (idx.size() == 1 && order.size() > 1) continue;
      std::vector<torch::Tensor> inputs;
      for (std::size_t k = 0; k < model.num_inputs(); ++k) inputs.push_back(collate(train, idx, k));
      if (config.augment_flips) flip_samples(inputs, augment_rng);
      std::vector<std::int64_t> y;
      for (auto i : idx) y.push_back(train_labels[i]);
      auto target = torch::tensor(y, torch::kLong);

      opt.zero_grad();
      auto logits = model.forward(inputs);
      auto loss = torch::nn::functional::cross_entropy(logits, target, ce);
      const double lv = loss.item<double>();
      if (!std::isfinite(lv))
        throw TrainingError("training " + options.name + ": non-finite loss at epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(batch_no));
      loss.backward();
      opt.step();
      loss_sum += lv * static_cast<double>(idx.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.train_f1 = score(model, train, config.batch_size);
    rec.val_f1 = val.empty() ? std::nan("") : score(model, val, config.batch_size);
    result.history.epochs.push_back(rec);

    const double sel = val.empty() ? rec.train_f1 : rec.val_f1;
    if (result.best_epoch < 0 || sel > result.best_val_f1) {
      result.best_epoch = epoch;
      result.best_val_f1 = sel;
      if (save) save_checkpoint(model, result.best_checkpoint, {.config_hash = options.config_hash, .epoch = epoch, .val_f1 = sel});
    }
    if (options.log)
      *options.log << "[" << options.name << "] epoch " << epoch + 1 << "/" << config.epochs << " lr "
                   << format_double(lr) << " loss " << rec.train_loss << " train_f1 " << rec.train_f1
                   << " val_f1 " << rec.val_f1 << "\n"
                   << std::flush;
    if (options.on_epoch) options.on_epoch(rec);
  }
  if (save) {
    const auto& last = result.history.epochs.back();
    save_checkpoint(model, result.final_checkpoint,
                    {.config_hash = options.config_hash, .epoch = last.epoch,
                     .val_f1 = val.empty() ? last.train_f1 : last.val_f1});
    write_history_csv(result.history, result.history_path);
  }
  return result;
}

}  // namespace covsev
