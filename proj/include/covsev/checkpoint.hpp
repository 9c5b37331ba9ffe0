#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "covsev/model.hpp"

namespace covsev {

/// Sidecar of a checkpoint blob `x.pt`, stored as `x.json`.
struct CheckpointMeta {
  std::string kind;
  nlohmann::json arch_config;
  /// content_hash of arch_config; checked before parameters are restored.
  std::string arch_hash;
  /// Hash of the pipeline configuration that produced the checkpoint.
  std::string config_hash;
  int epoch = -1;
  double val_f1 = 0.0;
};

std::string arch_hash(const nlohmann::json& arch_config);

/// Writes the parameter blob and its sidecar atomically.
void save_checkpoint(SeverityNet& model, const std::filesystem::path& path, CheckpointMeta meta);

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

/// Restores parameters into `model`. Throws ContractError when the stored
/// architecture hash differs from the model's, or when `expected_config_hash`
/// is given and differs from the stored one.
CheckpointMeta load_checkpoint(SeverityNet& model, const std::filesystem::path& path,
                               const std::optional<std::string>& expected_config_hash = std::nullopt);

/// Builds an untrained model from an arch_config JSON ("two-branch" or
/// "hybrid-decovnet").
std::shared_ptr<SeverityNet> make_model(const nlohmann::json& arch_config);

/// make_model from the sidecar, then load_checkpoint.
std::shared_ptr<SeverityNet> load_model(const std::filesystem::path& path,
                                        const std::optional<std::string>& expected_config_hash = std::nullopt);

}  // namespace covsev
