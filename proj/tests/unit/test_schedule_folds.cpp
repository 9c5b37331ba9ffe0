#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "covsev/dataset.hpp"
#include "covsev/errors.hpp"
#include "covsev/folds.hpp"
#include "covsev/schedule.hpp"
#include "covsev/volume.hpp"

namespace fs = std::filesystem;
using namespace covsev;

namespace {
const fs::path kFixtures = COVSEV_FIXTURE_DIR;
}

TEST(LrSchedule, ReferenceTwoDimensionalValues) {
  const auto cfg = TrainConfig::reference_2d();
  EXPECT_EQ(cfg.epochs, 40);
  EXPECT_EQ(cfg.batch_size, 16);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 0), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 14), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 15), 1e-5);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 29), 1e-5);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 30), 1e-6);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 39), 1e-6);
}

TEST(LrSchedule, ReferenceThreeDimensionalConfig) {
  const auto cfg = TrainConfig::reference_3d();
  EXPECT_EQ(cfg.epochs, 100);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 39), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 40), 1e-5);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 99), 1e-6);
}

TEST(LrSchedule, OutOfRangeEpoch) {
  const auto cfg = TrainConfig::reference_2d();
  EXPECT_THROW(lr_at_epoch(cfg, -1), std::out_of_range);
  EXPECT_THROW(lr_at_epoch(cfg, 40), std::out_of_range);
}

TEST(LrSchedule, PiecewiseConstantNonIncreasing) {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    TrainConfig cfg;
    cfg.epochs = std::uniform_int_distribution<int>(2, 120)(rng);
    std::set<int> decays;
    const int n = std::uniform_int_distribution<int>(0, std::min(5, cfg.epochs - 1))(rng);
    while (static_cast<int>(decays.size()) < n) decays.insert(std::uniform_int_distribution<int>(1, cfg.epochs - 1)(rng));
    cfg.lr_decay_epochs.assign(decays.begin(), decays.end());
    cfg.lr_decay_factor = std::uniform_real_distribution<double>(0.05, 0.9)(rng);
    cfg.validate();
    int drops = 0;
    for (int e = 1; e < cfg.epochs; ++e) {
      const double prev = lr_at_epoch(cfg, e - 1), cur = lr_at_epoch(cfg, e);
      ASSERT_LE(cur, prev);
      drops += cur < prev;
    }
    ASSERT_EQ(drops, n);
  }
}

TEST(TrainConfigValidation, RejectsBrokenInvariants) {
  TrainConfig c;
  c.epochs = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lr_decay_epochs = {30, 15};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.lr_decay_epochs = {15, 40};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(History, CsvRoundTrip) {
  TrainHistory h;
  for (int e = 0; e < 5; ++e) h.epochs.push_back({e, 1e-4 / (e + 1), 1.0 / 3.0 + e, 50.0 + e, 25.0 / 7.0});
  auto p = fs::temp_directory_path() / "covsev_history.csv";
  write_history_csv(h, p);
  auto back = read_history_csv(p);
  ASSERT_EQ(back.epochs.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(back.epochs[i].epoch, h.epochs[i].epoch);
    EXPECT_EQ(back.epochs[i].lr, h.epochs[i].lr);
    EXPECT_EQ(back.epochs[i].train_loss, h.epochs[i].train_loss);
    EXPECT_EQ(back.epochs[i].val_f1, h.epochs[i].val_f1);
  }
}

TEST(History, RunsWithoutValidationRoundTrip) {
  TrainHistory h;
  h.epochs.push_back({0, 1e-3, 0.5, 25.0, std::nan("")});
  auto p = fs::temp_directory_path() / "covsev_history_noval.csv";
  write_history_csv(h, p);
  auto back = read_history_csv(p);
  ASSERT_EQ(back.epochs.size(), 1u);
  EXPECT_TRUE(std::isnan(back.epochs[0].val_f1));
  EXPECT_EQ(back.epochs[0].train_f1, 25.0);

  write_file_atomic(p, "epoch,lr,train_loss,train_f1,val_f1\n0,1e-3,0.5,25\n");
  EXPECT_THROW(read_history_csv(p), ParseError);
  write_file_atomic(p, "epoch,lr,train_loss,train_f1,val_f1\n0,1e-3x,0.5,25,1\n");
  EXPECT_THROW(read_history_csv(p), ParseError);
}

class FixtureFolds : public ::testing::Test {
 protected:
  void SetUp() override { records_ = load_manifest(kFixtures / "cov19ctdb_train.csv").records; }
  std::vector<ScanRecord> records_;
};

TEST_F(FixtureFolds, CriticalClassSplitsSevenAndEights) {
  auto folds = stratified_kfold(records_, 5, 42);
  auto counts = fold_class_counts(folds, records_);
  std::vector<std::int64_t> critical;
  for (const auto& c : counts) critical.push_back(c[3]);
  std::sort(critical.begin(), critical.end());
  EXPECT_EQ(critical, (std::vector<std::int64_t>{7, 8, 8, 8, 8}));
  EXPECT_TRUE(folds.warnings.empty());
}

TEST_F(FixtureFolds, PartitionAndBalance) {
  for (std::uint64_t seed : {0ull, 1ull, 42ull, 123456789ull}) {
    auto folds = stratified_kfold(records_, 5, seed);
    ASSERT_EQ(folds.fold_of.size(), records_.size());
    std::size_t total = 0;
    std::set<std::string> seen;
    for (int f = 0; f < 5; ++f) {
      for (const auto& id : folds.members(f)) ASSERT_TRUE(seen.insert(id).second);
      total += folds.members(f).size();
    }
    ASSERT_EQ(total, records_.size());
    auto counts = fold_class_counts(folds, records_);
    for (int c = 0; c < 4; ++c) {
      std::int64_t lo = INT64_MAX, hi = 0;
      for (const auto& fc : counts) {
        lo = std::min(lo, fc[static_cast<std::size_t>(c)]);
        hi = std::max(hi, fc[static_cast<std::size_t>(c)]);
      }
      ASSERT_LE(hi - lo, 1);
    }
    std::int64_t lo = INT64_MAX, hi = 0;
    for (int f = 0; f < 5; ++f) {
      const auto n = static_cast<std::int64_t>(folds.members(f).size());
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    EXPECT_LE(hi - lo, 1);
  }
}

TEST_F(FixtureFolds, DeterministicPerSeed) {
  auto a = stratified_kfold(records_, 5, 9);
  auto b = stratified_kfold(records_, 5, 9);
  auto c = stratified_kfold(records_, 5, 10);
  EXPECT_EQ(a.fold_of, b.fold_of);
  EXPECT_NE(a.fold_of, c.fold_of);
}

TEST_F(FixtureFolds, FoldFileRoundTripValidatesPartition) {
  auto folds = stratified_kfold(records_, 5, 1);
  auto p = fs::temp_directory_path() / "covsev_folds.csv";
  write_fold_csv(folds, p);
  auto back = read_fold_csv(p, records_, 5);
  EXPECT_EQ(back.fold_of, folds.fold_of);
  auto fewer = records_;
  fewer.pop_back();
  EXPECT_THROW(read_fold_csv(p, fewer, 5), ManifestError);
  auto more = records_;
  more.push_back(records_.front());
  more.back().scan_id = "extra";
  EXPECT_THROW(read_fold_csv(p, more, 5), ManifestError);
}

TEST(Folds, SmallClassWarnsButSucceeds) {
  auto m = generate_synthetic_dataset(3, 1, {8, 8, 8});
  auto folds = stratified_kfold(m.records, 5, 0);
  EXPECT_EQ(folds.fold_of.size(), 12u);
  EXPECT_EQ(folds.warnings.size(), 4u);
}

TEST(Folds, Errors) {
  auto m = generate_synthetic_dataset(1, 1, {8, 8, 8});
  EXPECT_THROW(stratified_kfold(m.records, 1, 0), std::invalid_argument);
  auto missing = m.records;
  missing.pop_back();
  EXPECT_THROW(stratified_kfold(missing, 2, 0), std::invalid_argument);
  missing = m.records;
  missing[0].label.reset();
  EXPECT_THROW(stratified_kfold(missing, 2, 0), std::invalid_argument);
}
