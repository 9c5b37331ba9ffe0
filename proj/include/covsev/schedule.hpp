#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace covsev {

enum class OptimizerKind { Adam };

struct TrainConfig {
  int epochs = 40;
  int batch_size = 16;
  double initial_lr = 1e-4;
  std::vector<int> lr_decay_epochs{15, 30};
  double lr_decay_factor = 0.1;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  bool class_weighted_loss = false;
  /// L2 penalty passed to Adam.
  double weight_decay = 0.0;
  /// Random left-right flips per sample (plus craniocaudal flips for
  /// volumetric inputs). Off in both reference protocols.
  bool augment_flips = false;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on a broken invariant.
  void validate() const;

  /// 40 epochs, decay at 15 and 30.
  static TrainConfig reference_2d();
  /// 100 epochs, decay at 40 and 75.
  static TrainConfig reference_3d();
};

/// initial_lr * factor^(number of decay epochs <= epoch).
double lr_at_epoch(const TrainConfig& config, int epoch);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_f1 = 0.0;
  double val_f1 = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

/// CSV `epoch,lr,train_loss,train_f1,val_f1`, values printed round-trip exact.
void write_history_csv(const TrainHistory& history, const std::filesystem::path& path);
TrainHistory read_history_csv(const std::filesystem::path& path);

/// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);

}  // namespace covsev
