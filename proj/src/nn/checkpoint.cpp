#include "covsev/checkpoint.hpp"

#include <sstream>

#include "covsev/arch2d.hpp"
#include "covsev/arch3d.hpp"
#include "covsev/errors.hpp"
#include "covsev/hash.hpp"
#include "covsev/volume.hpp"

namespace covsev {

namespace fs = std::filesystem;

namespace {
fs::path meta_path(const fs::path& blob) {
  auto p = blob;
  p.replace_extension(".json");
  return p;
}
}  // namespace

std::string arch_hash(const nlohmann::json& arch_config) { return content_hash(arch_config.dump()); }

void save_checkpoint(SeverityNet& model, const fs::path& path, CheckpointMeta meta) {
  meta.kind = model.kind();
  meta.arch_config = model.arch_config();
  meta.arch_hash = arch_hash(meta.arch_config);

  torch::serialize::OutputArchive archive;
  model.save(archive);
  std::ostringstream blob;
  archive.save_to(blob);
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  write_file_atomic(path, blob.str());

  nlohmann::json j{{"kind", meta.kind},
                   {"arch_config", meta.arch_config},
                   {"arch_hash", meta.arch_hash},
                   {"config_hash", meta.config_hash},
                   {"epoch", meta.epoch},
                   {"val_f1", meta.val_f1}};
  write_file_atomic(meta_path(path), j.dump(2) + "\n");
}

CheckpointMeta read_checkpoint_meta(const fs::path& path) {
  const auto mp = meta_path(path);
  if (!fs::exists(mp)) throw IoError("checkpoint sidecar missing: " + mp.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(mp));
    CheckpointMeta m;
    m.kind = j.at("kind").get<std::string>();
    m.arch_config = j.at("arch_config");
    m.arch_hash = j.at("arch_hash").get<std::string>();
    m.config_hash = j.value("config_hash", std::string{});
    m.epoch = j.value("epoch", -1);
    m.val_f1 = j.value("val_f1", 0.0);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint sidecar " + mp.string() + ": " + e.what());
  }
}

CheckpointMeta load_checkpoint(SeverityNet& model, const fs::path& path,
                               const std::optional<std::string>& expected_config_hash) {
  auto meta = read_checkpoint_meta(path);
  const auto want = arch_hash(model.arch_config());
  if (meta.arch_hash != want || arch_hash(meta.arch_config) != meta.arch_hash)
    throw ContractError("checkpoint " + path.string() + ": architecture hash " + meta.arch_hash +
                        " does not match model (" + want + ")");
  if (expected_config_hash && meta.config_hash != *expected_config_hash)
    throw ContractError("checkpoint " + path.string() + ": config hash " + meta.config_hash +
                        " does not match " + *expected_config_hash);
  if (!fs::exists(path)) throw IoError("checkpoint blob missing: " + path.string());
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    model.load(archive);
  } catch (const c10::Error& e) {
    throw IoError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  return meta;
}

std::shared_ptr<SeverityNet> make_model(const nlohmann::json& arch_config) {
  const auto arch = arch_config.value("arch", std::string{});
  if (arch == "two-branch") return std::make_shared<TwoBranchModel>(TwoBranchConfig::from_json(arch_config));
  if (arch == "hybrid-decovnet")
    return std::make_shared<HybridDeCoVNet>(HybridDeCoVNetConfig::from_json(arch_config));
  throw std::invalid_argument("unknown architecture '" + arch + "'");
}

std::shared_ptr<SeverityNet> load_model(const fs::path& path, const std::optional<std::string>& expected_config_hash) {
  auto meta = read_checkpoint_meta(path);
  auto model = make_model(meta.arch_config);
  load_checkpoint(*model, path, expected_config_hash);
  return model;
}

}  // namespace covsev
