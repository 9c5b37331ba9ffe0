#include "covsev/pipeline.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "covsev/checkpoint.hpp"
#include "covsev/errors.hpp"
#include "covsev/hash.hpp"
#include "covsev/training.hpp"
#include "covsev/volume.hpp"

namespace covsev {

namespace fs = std::filesystem;

std::string to_string(Scenario s) { return s == Scenario::TrainVal ? "train-val" : "cv5"; }
Scenario scenario_from_string(std::string_view t) {
  if (t == "train-val") return Scenario::TrainVal;
  if (t == "cv5") return Scenario::CV5;
  throw std::invalid_argument("unknown scenario '" + std::string(t) + "' (expected train-val or cv5)");
}

std::string to_string(FilterKind k) {
  switch (k) {
    case FilterKind::Model: return "model";
    case FilterKind::Heuristic: return "heuristic";
    case FilterKind::Oracle: return "oracle";
  }
  return "?";
}
std::string to_string(SegmenterKind k) { return k == SegmenterKind::Model ? "model" : "oracle"; }
FilterKind filter_kind_from_string(std::string_view t) {
  if (t == "model") return FilterKind::Model;
  if (t == "heuristic") return FilterKind::Heuristic;
  if (t == "oracle") return FilterKind::Oracle;
  throw std::invalid_argument("unknown filter '" + std::string(t) + "' (expected model, heuristic or oracle)");
}
SegmenterKind segmenter_kind_from_string(std::string_view t) {
  if (t == "model") return SegmenterKind::Model;
  if (t == "oracle") return SegmenterKind::Oracle;
  throw std::invalid_argument("unknown segmenter '" + std::string(t) + "' (expected model or oracle)");
}

std::string to_string(Arch a) { return a == Arch::TwoD ? "2d" : "3d"; }
Arch arch_from_string(std::string_view t) {
  if (t == "2d") return Arch::TwoD;
  if (t == "3d") return Arch::ThreeD;
  throw std::invalid_argument("unknown arch '" + std::string(t) + "' (expected 2d or 3d)");
}

// ---------------------------------------------------------------------------
// TOML loading

namespace {

void check_keys(const toml::table& t, const std::string& where, std::initializer_list<std::string_view> allowed) {
  for (const auto& [k, v] : t) {
    (void)v;
    bool ok = false;
    for (auto a : allowed) ok = ok || k.str() == a;
    if (!ok) throw ParseError("config: unknown key '" + std::string(k.str()) + "' in " + where, 0);
  }
}

template <typename T>
T get_or(const toml::table& t, std::string_view key, T fallback) {
  const auto* node = t.get(key);
  if (!node) return fallback;
  if constexpr (std::is_same_v<T, double>) {
    if (auto v = node->value<double>()) return *v;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (auto v = node->value<bool>()) return *v;
  } else if constexpr (std::is_integral_v<T>) {
    if (auto v = node->value<std::int64_t>()) return static_cast<T>(*v);
  } else {
    if (auto v = node->value<std::string>()) return *v;
  }
  throw ParseError("config: key '" + std::string(key) + "' has the wrong type", 0);
}

template <typename T>
std::vector<T> get_list(const toml::table& t, std::string_view key, std::vector<T> fallback) {
  const auto* node = t.get(key);
  if (!node) return fallback;
  const auto* arr = node->as_array();
  if (!arr) throw ParseError("config: key '" + std::string(key) + "' must be an array", 0);
  std::vector<T> out;
  for (const auto& e : *arr) {
    auto v = e.value<std::int64_t>();
    if (!v) throw ParseError("config: key '" + std::string(key) + "' must hold integers", 0);
    out.push_back(static_cast<T>(*v));
  }
  return out;
}

template <typename T, std::size_t N>
std::array<T, N> get_array(const toml::table& t, std::string_view key, std::array<T, N> fallback) {
  auto v = get_list<T>(t, key, std::vector<T>(fallback.begin(), fallback.end()));
  if (v.size() != N)
    throw ParseError("config: key '" + std::string(key) + "' needs " + std::to_string(N) + " entries", 0);
  std::array<T, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

const toml::table& sub(const toml::table& root, std::string_view name) {
  static const toml::table empty;
  const auto* n = root.get(name);
  if (!n) return empty;
  if (const auto* t = n->as_table()) return *t;
  throw ParseError("config: '" + std::string(name) + "' must be a table", 0);
}

TrainConfig read_train(const toml::table& t, TrainConfig c, const std::string& where) {
  check_keys(t, where, {"epochs", "batch_size", "lr", "lr_decay_epochs", "lr_decay_factor", "class_weighted_loss",
                        "adam_beta1", "adam_beta2", "weight_decay", "augment_flips"});
  c.epochs = get_or<int>(t, "epochs", c.epochs);
  c.batch_size = get_or<int>(t, "batch_size", c.batch_size);
  c.initial_lr = get_or<double>(t, "lr", c.initial_lr);
  c.lr_decay_epochs = get_list<int>(t, "lr_decay_epochs", c.lr_decay_epochs);
  c.lr_decay_factor = get_or<double>(t, "lr_decay_factor", c.lr_decay_factor);
  c.class_weighted_loss = get_or<bool>(t, "class_weighted_loss", c.class_weighted_loss);
  c.adam_beta1 = get_or<double>(t, "adam_beta1", c.adam_beta1);
  c.adam_beta2 = get_or<double>(t, "adam_beta2", c.adam_beta2);
  c.weight_decay = get_or<double>(t, "weight_decay", c.weight_decay);
  c.augment_flips = get_or<bool>(t, "augment_flips", c.augment_flips);
  return c;
}

nlohmann::json train_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.initial_lr},
          {"lr_decay_epochs", c.lr_decay_epochs},
          {"lr_decay_factor", c.lr_decay_factor},
          {"optimizer", "adam"},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"class_weighted_loss", c.class_weighted_loss},
          {"weight_decay", c.weight_decay},
          {"augment_flips", c.augment_flips},
          {"seed", c.seed}};
}

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

std::int64_t sum(const std::vector<std::int64_t>& v) {
  std::int64_t s = 0;
  for (auto x : v) s += x;
  return s;
}

}  // namespace

PipelineConfig PipelineConfig::from_toml(std::string_view text, const fs::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    throw ParseError(std::string("config: ") + std::string(e.description()), e.source().begin.line);
  }
  check_keys(root, "top level", {"seed", "scenario", "folds", "select", "threads", "paths", "preprocess",
                                 "stage_models", "arch2d", "arch3d", "train2d", "train3d"});
  PipelineConfig c;
  c.seed = get_or<std::uint64_t>(root, "seed", 0);
  c.scenario = scenario_from_string(get_or<std::string>(root, "scenario", "train-val"));
  c.folds = get_or<int>(root, "folds", 5);
  const auto select = get_or<std::string>(root, "select", "best");
  if (select != "best" && select != "final") throw ParseError("config: select must be best or final", 0);
  c.select_best = select == "best";
  c.threads = get_or<int>(root, "threads", 1);

  const auto& paths = sub(root, "paths");
  check_keys(paths, "[paths]", {"manifest", "work_dir", "cache_dir", "checkpoint_dir", "report_dir"});
  c.manifest = resolve(base_dir, get_or<std::string>(paths, "manifest", ""));
  c.work_dir = resolve(base_dir, get_or<std::string>(paths, "work_dir", "runs"));
  c.cache_dir = resolve(base_dir, get_or<std::string>(paths, "cache_dir", ""));
  c.checkpoint_dir = resolve(base_dir, get_or<std::string>(paths, "checkpoint_dir", ""));
  c.report_dir = resolve(base_dir, get_or<std::string>(paths, "report_dir", ""));

  const auto& pre = sub(root, "preprocess");
  check_keys(pre, "[preprocess]", {"filter", "threshold", "min_keep", "segmenter", "mask_mode", "lung_depths",
                                   "infection_depths", "size2d", "depth3d", "size3d"});
  auto& p = c.preprocess;
  p.filter = filter_kind_from_string(get_or<std::string>(pre, "filter", to_string(p.filter)));
  p.threshold = get_or<double>(pre, "threshold", p.threshold);
  p.min_keep = get_or<std::size_t>(pre, "min_keep", p.min_keep);
  p.segmenter = segmenter_kind_from_string(get_or<std::string>(pre, "segmenter", to_string(p.segmenter)));
  p.packing.mask_mode = mask_mode_from_string(get_or<std::string>(pre, "mask_mode", std::string(to_string(p.packing.mask_mode))));
  p.packing.lung_depths = get_list<std::int64_t>(pre, "lung_depths", p.packing.lung_depths);
  p.packing.infection_depths = get_list<std::int64_t>(pre, "infection_depths", p.packing.infection_depths);
  p.packing.size2d = get_or<std::int64_t>(pre, "size2d", p.packing.size2d);
  p.packing.depth3d = get_or<std::int64_t>(pre, "depth3d", p.packing.depth3d);
  p.packing.size3d = get_or<std::int64_t>(pre, "size3d", p.packing.size3d);

  const auto& stage = sub(root, "stage_models");
  check_keys(stage, "[stage_models]", {"work_size", "width", "epochs", "batch_size", "lr"});
  nlohmann::json sj = p.stage.to_json();
  for (const auto& [k, v] : stage) {
    if (auto d = v.value<double>(); d && k.str() == "lr") sj["lr"] = *d;
    else if (auto i = v.value<std::int64_t>()) sj[std::string(k.str())] = *i;
    else throw ParseError("config: [stage_models] " + std::string(k.str()) + " must be a number", 0);
  }
  p.stage = StageModelConfig::from_json(sj);

  const auto& a2 = sub(root, "arch2d");
  check_keys(a2, "[arch2d]", {"backbone", "feature_dim", "width", "repeats", "hidden", "dropout"});
  c.arch2d.backbone.kind = backbone_kind_from_string(get_or<std::string>(a2, "backbone", "compact"));
  c.arch2d.backbone.feature_dim = get_or<std::int64_t>(a2, "feature_dim", c.arch2d.backbone.feature_dim);
  c.arch2d.backbone.width = get_or<std::int64_t>(a2, "width", c.arch2d.backbone.width);
  c.arch2d.backbone.repeats = get_array<int, 3>(a2, "repeats", c.arch2d.backbone.repeats);
  c.arch2d.hidden = get_or<std::int64_t>(a2, "hidden", c.arch2d.hidden);
  c.arch2d.dropout = get_or<double>(a2, "dropout", c.arch2d.dropout);

  const auto& a3 = sub(root, "arch3d");
  check_keys(a3, "[arch3d]", {"stem_channels", "ladder", "blocks_per_layer", "head_channels", "head_pool"});
  c.arch3d.stem_channels = get_or<std::int64_t>(a3, "stem_channels", c.arch3d.stem_channels);
  c.arch3d.ladder = get_array<std::int64_t, 4>(a3, "ladder", c.arch3d.ladder);
  c.arch3d.blocks_per_layer = get_or<int>(a3, "blocks_per_layer", c.arch3d.blocks_per_layer);
  c.arch3d.head_channels = get_array<std::int64_t, 3>(a3, "head_channels", c.arch3d.head_channels);
  c.arch3d.head_pool = get_array<std::int64_t, 3>(a3, "head_pool", c.arch3d.head_pool);

  c.train2d = read_train(sub(root, "train2d"), c.train2d, "[train2d]");
  c.train3d = read_train(sub(root, "train3d"), c.train3d, "[train3d]");
  c.finalize();
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& toml_path) {
  if (!fs::exists(toml_path)) throw IoError("config not found: " + toml_path.string());
  return from_toml(read_text_file(toml_path), fs::absolute(toml_path).parent_path());
}

void PipelineConfig::finalize() {
  if (cache_dir.empty()) cache_dir = work_dir / "cache";
  if (checkpoint_dir.empty()) checkpoint_dir = work_dir / "checkpoints";
  if (report_dir.empty()) report_dir = work_dir / "reports";
  const auto& pk = preprocess.packing;
  arch2d.lung_depth = sum(pk.lung_depths);
  arch2d.infection_depth = sum(pk.infection_depths);
  arch2d.image_size = pk.size2d;
  arch3d.depth = pk.depth3d;
  arch3d.size = pk.size3d;
  train2d.seed = seed;
  train3d.seed = seed + 1;
  preprocess.stage.seed = seed;
}

void PipelineConfig::validate() const {
  if (manifest.empty()) throw std::invalid_argument("config: paths.manifest is required");
  if (folds < 2) throw std::invalid_argument("config: folds must be >= 2");
  if (threads < 1) throw std::invalid_argument("config: threads must be >= 1");
  if (preprocess.threshold < 0.0 || preprocess.threshold > 1.0)
    throw std::invalid_argument("config: preprocess.threshold must be in [0, 1]");
  const auto& pk = preprocess.packing;
  if (pk.lung_depths.empty() || pk.infection_depths.empty())
    throw std::invalid_argument("config: lung_depths and infection_depths must be non-empty");
  if (arch2d.lung_depth != sum(pk.lung_depths) || arch2d.image_size != pk.size2d || arch3d.depth != pk.depth3d ||
      arch3d.size != pk.size3d)
    throw std::invalid_argument("config: architecture geometry disagrees with packing (call finalize)");
  arch2d.validate();
  arch3d.validate();
  train2d.validate();
  train3d.validate();
}

nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json pre{{"filter", to_string(preprocess.filter)},
                     {"threshold", preprocess.threshold},
                     {"min_keep", preprocess.min_keep},
                     {"segmenter", to_string(preprocess.segmenter)},
                     {"mask_mode", std::string(covsev::to_string(preprocess.packing.mask_mode))},
                     {"lung_depths", preprocess.packing.lung_depths},
                     {"infection_depths", preprocess.packing.infection_depths},
                     {"size2d", preprocess.packing.size2d},
                     {"depth3d", preprocess.packing.depth3d},
                     {"size3d", preprocess.packing.size3d}};
  // Stage models only matter when one of them is in use.
  if (preprocess.filter == FilterKind::Model || preprocess.segmenter == SegmenterKind::Model)
    pre["stage_models"] = preprocess.stage.to_json();
  return {{"seed", seed},
          {"scenario", to_string(scenario)},
          {"folds", folds},
          {"select", select_best ? "best" : "final"},
          {"preprocess", pre},
          {"arch2d", arch2d.to_json()},
          {"arch3d", arch3d.to_json()},
          {"train2d", train_json(train2d)},
          {"train3d", train_json(train3d)}};
}

std::string PipelineConfig::preprocess_hash() const { return content_hash(to_json()["preprocess"].dump()); }

std::string config_hash(const PipelineConfig& config, const DatasetManifest& manifest,
                        const std::map<std::string, std::string>& fingerprints) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : manifest.records) {
    nlohmann::json row{r.scan_id, r.label ? severity_value(*r.label) : 0, r.split};
    if (auto it = fingerprints.find(r.scan_id); it != fingerprints.end()) row.push_back(it->second);
    rows.push_back(std::move(row));
  }
  return content_hash(nlohmann::json{{"config", config.to_json()}, {"manifest", rows}}.dump());
}

std::string model_name(const PipelineConfig& config, Arch arch) {
  if (arch == Arch::ThreeD) return "Hybrid-DeCoVNet";
  return config.arch2d.backbone.kind == BackboneKind::InceptionResNet ? "2B-InceptResnet" : "2B-Compact";
}

// ---------------------------------------------------------------------------

namespace {

// True when `lock` names a pid that no longer exists on this host.
bool lock_is_stale(const fs::path& lock) {
  std::ifstream in(lock);
  long pid = 0;
  if (!(in >> pid) || pid <= 0) return false;
  return ::kill(static_cast<pid_t>(pid), 0) != 0 && errno == ESRCH;
}

}  // namespace

WorkDirLock::WorkDirLock(const fs::path& dir) : path_(dir / ".covsev.lock") {
  fs::create_directories(dir);
  int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0 && errno == EEXIST && lock_is_stale(path_)) {
    fs::remove(path_);
    fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  }
  if (fd < 0) {
    if (errno == EEXIST)
      throw IoError("work directory " + dir.string() + " is locked by another run (remove " + path_.string() +
                    " if no run is active)");
    throw IoError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  const auto pid = std::to_string(::getpid()) + "\n";
  if (::write(fd, pid.data(), pid.size()) < 0) {
    // The lock holds without the pid; it is informational only.
  }
  ::close(fd);
}

WorkDirLock::~WorkDirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

void write_probability_artifact(const ScanProbabilities& table, const fs::path& path, const std::string& hash,
                                const std::string& model, const std::string& scenario) {
  fs::create_directories(path.parent_path());
  write_probabilities_csv(table, path);
  auto meta = path;
  meta.replace_extension(".json");
  write_file_atomic(meta, nlohmann::json{{"config_hash", hash}, {"model", model}, {"scenario", scenario}}.dump(2) + "\n");
}

ScanProbabilities read_probability_artifact(const fs::path& path, const std::optional<std::string>& expected,
                                            std::string* recorded) {
  auto meta = path;
  meta.replace_extension(".json");
  std::string hash;
  if (fs::exists(meta)) {
    try {
      hash = nlohmann::json::parse(read_text_file(meta)).value("config_hash", std::string{});
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed probability sidecar " + meta.string() + ": " + e.what());
    }
  }
  if (expected && hash != *expected)
    throw ContractError("probability file " + path.string() + " has config hash '" + hash + "', expected " +
                        *expected);
  if (recorded) *recorded = hash;
  return read_probabilities_csv(path);
}

// ---------------------------------------------------------------------------

Pipeline::Pipeline(PipelineConfig config, std::ostream& log) : config_(std::move(config)), log_(log) {
  config_.finalize();
  config_.validate();
  manifest_ = load_manifest(config_.manifest);
  for (const auto& r : manifest_.records) fingerprints_[r.scan_id] = source_fingerprint(r);
  hash_ = config_hash(config_, manifest_, fingerprints_);
  lock_ = std::make_unique<WorkDirLock>(config_.work_dir);
  torch::set_num_threads(config_.threads);
}

void Pipeline::ensure_stage_models() {
  const auto& p = config_.preprocess;
  const bool want_filter = p.filter == FilterKind::Model && !filter_model_;
  const bool want_seg = p.segmenter == SegmenterKind::Model && !segmenter_model_;
  if (!want_filter && !want_seg) return;

  const auto dir = config_.cache_dir / "stage_models";
  std::string stamp_text = config_.preprocess_hash();
  for (const auto& r : manifest_.records)
    if (r.split == "train") stamp_text += "|" + r.scan_id + ":" + fingerprints_.at(r.scan_id);
  const auto stamp = content_hash(stamp_text);
  auto stamp_ok = [&](const fs::path& blob) {
    auto meta = blob;
    meta.replace_extension(".json");
    if (!fs::exists(blob) || !fs::exists(meta)) return false;
    try {
      return nlohmann::json::parse(read_text_file(meta)).value("stamp", std::string{}) == stamp;
    } catch (const nlohmann::json::exception&) {
      return false;
    }
  };
  auto write_stamp = [&](const fs::path& blob) {
    auto meta = blob;
    meta.replace_extension(".json");
    write_file_atomic(meta, nlohmann::json{{"stamp", stamp}, {"config", p.stage.to_json()}}.dump(2) + "\n");
  };

  std::vector<ScanRecord> train_scans;
  auto load_train = [&]() {
    if (!train_scans.empty()) return;
    for (const auto& r : manifest_.records)
      if (r.split == "train") train_scans.push_back(load_scan(r));
    if (train_scans.empty()) throw ManifestError("stage models need scans with split 'train'");
  };

  if (want_filter) {
    const auto blob = dir / "slice_filter.pt";
    SliceClassifier model(p.stage.width);
    if (stamp_ok(blob)) {
      load_stage_model(*model, blob);
      log_ << "[preprocess] slice filter: reusing " << blob.string() << "\n";
    } else {
      load_train();
      log_ << "[preprocess] slice filter: training on " << train_scans.size() << " scans\n";
      model = train_slice_classifier(train_scans, p.stage, &log_);
      save_stage_model(*model, blob);
      write_stamp(blob);
    }
    filter_model_ = SliceFilterModel{slice_predictor(model, p.stage.work_size), p.threshold, p.min_keep};
  }
  if (want_seg) {
    const auto blob = dir / "segmenter.pt";
    AttentionUNet model(p.stage.width);
    if (stamp_ok(blob)) {
      load_stage_model(*model, blob);
      log_ << "[preprocess] segmenter: reusing " << blob.string() << "\n";
    } else {
      load_train();
      log_ << "[preprocess] segmenter: training on " << train_scans.size() << " scans\n";
      model = train_segmenter(train_scans, p.stage, &log_);
      save_stage_model(*model, blob);
      write_stamp(blob);
    }
    segmenter_model_ = unet_segmenter(model, p.stage.work_size);
  }
}

PreparedScan Pipeline::prepare_scan(const ScanRecord& record) {
  const auto dir = config_.cache_dir / record.scan_id;
  // Regenerate when either the preprocessing settings or the scan data change.
  const auto stamp = content_hash(config_.preprocess_hash() + "|" + fingerprints_.at(record.scan_id));
  const std::array<fs::path, 3> files{dir / "lungs.f32", dir / "infection.f32", dir / "voxel.f32"};

  std::array<CacheLookup, 3> hits;
  bool all_hit = true;
  for (std::size_t i = 0; i < 3; ++i) {
    hits[i] = probe_volume_cache(files[i], record.scan_id, stamp);
    if (hits[i].status != CacheStatus::Hit) {
      all_hit = false;
      if (hits[i].status == CacheStatus::Corrupt || hits[i].status == CacheStatus::Stale)
        log_ << "[preprocess] warning: " << record.scan_id << ": " << files[i].filename().string() << " "
             << (hits[i].status == CacheStatus::Corrupt ? "corrupt" : "stale") << " (" << hits[i].detail
             << "), regenerating\n";
    }
  }

  TwoBranchSample two;
  VoxelSample3D three;
  if (all_hit) {
    two.lungs = squeeze_channel(std::move(*hits[0].volume));
    two.infection = squeeze_channel(std::move(*hits[1].volume));
    three.volume = std::move(*hits[2].volume);
  } else {
    const auto scan = load_scan(record);
    const auto& p = config_.preprocess;
    std::vector<std::size_t> kept;
    if (p.filter == FilterKind::Model) {
      ensure_stage_models();
      kept = filter_slices(scan, *filter_model_);
    } else {
      SliceFilterModel f{p.filter == FilterKind::Oracle ? oracle_slice_predictor(scan) : heuristic_slice_predictor(),
                         p.threshold, p.min_keep};
      kept = filter_slices(scan, f);
    }
    std::vector<MaskPair> masks;
    if (p.segmenter == SegmenterKind::Model) {
      ensure_stage_models();
      masks = segment_scan(scan, kept, *segmenter_model_);
    } else {
      masks = segment_scan(scan, kept, oracle_segmenter(scan));
    }
    two = build_two_branch_sample(scan, kept, masks, p.packing);
    three = build_voxel_sample(scan, kept, masks, p.packing);
    fs::create_directories(dir);
    write_volume_file(files[0], two.lungs, record.scan_id, stamp);
    write_volume_file(files[1], two.infection, record.scan_id, stamp);
    write_volume_file(files[2], three.volume, record.scan_id, stamp);
  }
  two.label = record.label;
  three.label = record.label;
  return {to_tensor_sample(record.scan_id, two), to_tensor_sample(record.scan_id, three)};
}

const std::map<std::string, PreparedScan>& Pipeline::prepare() {
  std::size_t fresh = 0;
  for (const auto& r : manifest_.records) {
    if (!r.label || prepared_.count(r.scan_id)) continue;
    const bool cached = fs::exists(config_.cache_dir / r.scan_id / "voxel.f32");
    prepared_.emplace(r.scan_id, prepare_scan(r));
    fresh += !cached;
  }
  log_ << "[preprocess] " << prepared_.size() << " scans ready (" << prepared_.size() - fresh << " from cache)\n";
  return prepared_;
}

std::vector<EvalUnit> Pipeline::units() {
  std::vector<EvalUnit> out;
  if (config_.scenario == Scenario::TrainVal) {
    EvalUnit u{"train-val", "train-val", {}, {}};
    for (const auto& r : manifest_.labeled()) {
      if (r.split == "train") u.train_ids.push_back(r.scan_id);
      else if (r.split == "val") u.val_ids.push_back(r.scan_id);
    }
    if (u.train_ids.empty() || u.val_ids.empty())
      throw ManifestError("train-val scenario needs labeled scans with split 'train' and 'val'");
    out.push_back(std::move(u));
    return out;
  }
  const auto labeled = manifest_.labeled();
  const auto fold_file = config_.report_dir / "cv5" / "folds.csv";
  FoldAssignment folds;
  if (fs::exists(fold_file)) {
    folds = read_fold_csv(fold_file, labeled, config_.folds);
    log_ << "[cv5] reusing fold file " << fold_file.string() << "\n";
  } else {
    folds = stratified_kfold(labeled, config_.folds, config_.seed);
    for (const auto& w : folds.warnings) log_ << "[cv5] warning: " << w << "\n";
    fs::create_directories(fold_file.parent_path());
    write_fold_csv(folds, fold_file);
  }
  for (int f = 0; f < config_.folds; ++f) {
    EvalUnit u{"fold" + std::to_string(f + 1), fs::path("cv5") / ("fold" + std::to_string(f + 1)), {}, {}};
    for (const auto& r : labeled) (folds.fold_of.at(r.scan_id) == f ? u.val_ids : u.train_ids).push_back(r.scan_id);
    out.push_back(std::move(u));
  }
  return out;
}

fs::path Pipeline::checkpoint_path(const EvalUnit& unit, Arch arch, bool best) const {
  return config_.checkpoint_dir / unit.rel / (to_string(arch) + (best ? "_best.pt" : "_final.pt"));
}
fs::path Pipeline::probs_path(const fs::path& rel, const std::string& key) const {
  return config_.report_dir / rel / ("probs_" + key + ".csv");
}
fs::path Pipeline::report_path(const fs::path& rel, const std::string& key) const {
  return config_.report_dir / rel / ("report_" + key + ".json");
}

std::vector<TensorSample> Pipeline::gather(const std::vector<std::string>& ids, Arch arch) {
  if (prepared_.empty()) prepare();
  std::vector<TensorSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = prepared_.find(id);
    if (it == prepared_.end()) throw ManifestError("scan " + id + " was not prepared");
    out.push_back(arch == Arch::TwoD ? it->second.two_d : it->second.three_d);
  }
  return out;
}

void Pipeline::train(const EvalUnit& unit, Arch arch) {
  const auto best = checkpoint_path(unit, arch, true), final = checkpoint_path(unit, arch, false);
  const auto history = config_.checkpoint_dir / unit.rel / (to_string(arch) + "_history.csv");
  const std::string tag = unit.name + "/" + to_string(arch);
  if (fs::exists(best) && fs::exists(final) && fs::exists(history)) {
    try {
      if (read_checkpoint_meta(best).config_hash == hash_ && read_checkpoint_meta(final).config_hash == hash_) {
        log_ << "[train " << tag << "] reusing checkpoints in " << best.parent_path().string() << "\n";
        return;
      }
      log_ << "[train " << tag << "] checkpoints carry another config hash, retraining\n";
    } catch (const IoError& e) {
      log_ << "[train " << tag << "] unreadable checkpoint (" << e.what() << "), retraining\n";
    }
  }
  const auto train = gather(unit.train_ids, arch);
  const auto val = gather(unit.val_ids, arch);
  const auto& cfg = arch == Arch::TwoD ? config_.train2d : config_.train3d;
  torch::manual_seed(cfg.seed);
  auto model = arch == Arch::TwoD ? make_model(config_.arch2d.to_json()) : make_model(config_.arch3d.to_json());
  log_ << "[train " << tag << "] " << train.size() << " train / " << val.size() << " val scans, "
       << count_parameters(*model) << " parameters, " << cfg.epochs << " epochs\n";
  TrainOptions opts;
  opts.checkpoint_dir = best.parent_path();
  opts.name = to_string(arch);
  opts.config_hash = hash_;
  opts.log = &log_;
  const auto result = train_model(*model, train, val, cfg, opts);
  log_ << "[train " << tag << "] best val macro F1 " << result.best_val_f1 << " at epoch " << result.best_epoch + 1
       << "\n";
}

MetricsReport Pipeline::write_outputs(const fs::path& rel, const std::string& key, const std::string& scenario,
                                      const std::string& model, const ScanProbabilities& table) {
  write_probability_artifact(table, probs_path(rel, key), hash_, model, scenario);
  auto report = make_report(label_indices(table), table.probs, {scenario, model, hash_});
  write_report(report, report_path(rel, key));
  log_ << "[eval] " << scenario << " " << model << ": macro F1 " << round2(report.macro_f1) << "\n";
  return report;
}

MetricsReport Pipeline::evaluate(const EvalUnit& unit, Arch arch) {
  const auto ckpt = checkpoint_path(unit, arch, config_.select_best);
  if (!fs::exists(ckpt))
    throw IoError("evaluate " + unit.name + "/" + to_string(arch) + ": no checkpoint at " + ckpt.string());
  auto model = load_model(ckpt, hash_);
  const auto val = gather(unit.val_ids, arch);
  const auto table = probability_table(*model, val);
  return write_outputs(unit.rel, to_string(arch), unit.name, model_name(config_, arch), table);
}

MetricsReport Pipeline::ensemble(const EvalUnit& unit) {
  std::vector<ScanProbabilities> tables{read_probability_artifact(probs_path(unit.rel, "2d"), hash_),
                                        read_probability_artifact(probs_path(unit.rel, "3d"), hash_)};
  return write_outputs(unit.rel, "ensemble", unit.name, kEnsembleName, ensemble_tables(tables));
}

RunSummary Pipeline::run() {
  RunSummary summary{hash_, {}, {}};
  log_ << "[run] scenario " << to_string(config_.scenario) << ", config hash " << hash_ << "\n";
  prepare();
  std::vector<MetricsReport> reports;
  const auto list = units();
  for (const auto& unit : list) {
    for (Arch a : {Arch::TwoD, Arch::ThreeD}) {
      train(unit, a);
      reports.push_back(evaluate(unit, a));
      summary.reports.push_back(report_path(unit.rel, to_string(a)));
    }
    reports.push_back(ensemble(unit));
    summary.reports.push_back(report_path(unit.rel, "ensemble"));
  }

  std::vector<std::string> scenarios;
  for (const auto& u : list) scenarios.push_back(u.name);
  const std::vector<std::string> models{model_name(config_, Arch::ThreeD), model_name(config_, Arch::TwoD),
                                        kEnsembleName};
  fs::path table_dir = config_.report_dir / to_string(config_.scenario);

  if (config_.scenario == Scenario::CV5) {
    // Out-of-fold: every scan scored once, by the model of its held-out fold.
    const fs::path rel = fs::path("cv5") / "oof";
    const std::string scen = "cv5-oof";
    std::map<std::string, ScanProbabilities> oof;
    for (const std::string key : {"2d", "3d"}) {
      ScanProbabilities all;
      for (const auto& u : list) {
        auto t = read_probability_artifact(probs_path(u.rel, key), hash_);
        all.scan_ids.insert(all.scan_ids.end(), t.scan_ids.begin(), t.scan_ids.end());
        all.labels.insert(all.labels.end(), t.labels.begin(), t.labels.end());
        all.probs.insert(all.probs.end(), t.probs.begin(), t.probs.end());
      }
      const auto name = model_name(config_, key == "2d" ? Arch::TwoD : Arch::ThreeD);
      reports.push_back(write_outputs(rel, key, scen, name, all));
      summary.reports.push_back(report_path(rel, key));
      oof[key] = std::move(all);
    }
    std::vector<ScanProbabilities> both{oof["2d"], oof["3d"]};
    reports.push_back(write_outputs(rel, "ensemble", scen, kEnsembleName, ensemble_tables(both)));
    summary.reports.push_back(report_path(rel, "ensemble"));
    scenarios.push_back(scen);
  }
  summary.table = table_dir / "table.csv";
  write_comparison_table(reports, models, scenarios, summary.table);
  log_ << "[run] table written to " << summary.table.string() << "\n";
  return summary;
}

}  // namespace covsev
