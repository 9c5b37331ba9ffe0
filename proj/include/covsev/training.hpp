#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>

#include "covsev/evaluate.hpp"
#include "covsev/model.hpp"
#include "covsev/samples.hpp"
#include "covsev/schedule.hpp"

namespace covsev {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  /// When set, `<name>_best.pt`, `<name>_final.pt` and `<name>_history.csv`
  /// are written here.
  std::filesystem::path checkpoint_dir;
  std::string name = "model";
  std::string config_hash;
  /// Per-epoch progress lines; null for silence.
  std::ostream* log = nullptr;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  TrainHistory history;
  int best_epoch = -1;
  double best_val_f1 = 0.0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path final_checkpoint;
  std::filesystem::path history_path;
};

/// Adam + cross-entropy with the step schedule of `config`. Each epoch
/// shuffles with a generator seeded from config.seed, then scores train and
/// val macro F1 in inference mode. Selection uses val F1 (train F1 when val is
/// empty); the model is left holding the final-epoch parameters.
TrainResult train_model(SeverityNet& model, std::span<const TensorSample> train,
                        std::span<const TensorSample> val, const TrainConfig& config,
                        const TrainOptions& options = {});

/// Inverse-frequency weights N / (4 n_c); absent classes get 0.
std::vector<double> class_weights(std::span<const TensorSample> samples);

/// Logits of every sample, in inference mode.
torch::Tensor predict_logits(SeverityNet& model, std::span<const TensorSample> samples,
                             std::int64_t batch_size = 16);

/// Softmax rows computed in double precision. Empty input gives empty output.
ProbMatrix predict_probs(SeverityNet& model, std::span<const TensorSample> samples,
                         std::int64_t batch_size = 16);

/// Probability table for the samples (labels copied when present).
ScanProbabilities probability_table(SeverityNet& model, std::span<const TensorSample> samples,
                                    std::int64_t batch_size = 16);

}  // namespace covsev
