#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "covsev/arch2d.hpp"
#include "covsev/arch3d.hpp"
#include "covsev/checkpoint.hpp"
#include "covsev/dataset.hpp"
#include "covsev/errors.hpp"
#include "covsev/preprocess.hpp"
#include "covsev/training.hpp"

using namespace covsev;
namespace fs = std::filesystem;

namespace {

PackingConfig small_packing() {
  PackingConfig p;
  p.lung_depths = {8};
  p.infection_depths = {4};
  p.size2d = 32;
  p.depth3d = 16;
  p.size3d = 32;
  return p;
}

struct Samples {
  std::vector<TensorSample> two_d, three_d;
};

// Synthetic scans through the oracle filter and segmenter.
Samples synthetic_samples(int n_per_class, std::uint64_t seed) {
  const auto manifest = generate_synthetic_dataset(n_per_class, seed, {24, 32, 32});
  const auto packing = small_packing();
  Samples out;
  for (const auto& scan : manifest.records) {
    const auto kept = filter_slices(scan, SliceFilterModel{oracle_slice_predictor(scan), 0.5, 8});
    const auto masks = segment_scan(scan, kept, oracle_segmenter(scan));
    out.two_d.push_back(to_tensor_sample(scan.scan_id, build_two_branch_sample(scan, kept, masks, packing)));
    out.three_d.push_back(to_tensor_sample(scan.scan_id, build_voxel_sample(scan, kept, masks, packing)));
  }
  return out;
}

TwoBranchConfig small_2d() {
  TwoBranchConfig c;
  c.lung_depth = 8;
  c.infection_depth = 4;
  c.image_size = 32;
  c.backbone.width = 8;
  c.backbone.feature_dim = 16;
  c.hidden = 32;
  return c;
}

HybridDeCoVNetConfig small_3d() {
  auto c = HybridDeCoVNetConfig::width_reduced();
  c.size = 32;
  return c;
}

TrainConfig quick(int epochs, std::uint64_t seed = 0) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.initial_lr = 1e-3;
  t.lr_decay_epochs = {};
  t.seed = seed;
  return t;
}

int first_perfect_epoch(const TrainHistory& h) {
  for (const auto& e : h.epochs)
    if (e.train_f1 == 100.0) return e.epoch;
  return -1;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("covsev_test_training_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Training, CompactTwoBranchOverfitsEightScans) {
  const auto s = synthetic_samples(2, 21);
  ASSERT_EQ(s.two_d.size(), 8u);
  torch::manual_seed(0);
  TwoBranchModel model(small_2d());
  auto r = train_model(model, s.two_d, s.two_d, quick(200));
  const int hit = first_perfect_epoch(r.history);
  EXPECT_GE(hit, 0) << "train macro F1 never reached 100 in 200 epochs";
  EXPECT_EQ(r.history.epochs.back().train_f1, 100.0);
}

TEST(Training, WidthReducedHybridOverfitsEightScans) {
  const auto s = synthetic_samples(2, 22);
  torch::manual_seed(0);
  HybridDeCoVNet model(small_3d());
  auto r = train_model(model, s.three_d, s.three_d, quick(200));
  EXPECT_GE(first_perfect_epoch(r.history), 0) << "train macro F1 never reached 100 in 200 epochs";
  EXPECT_EQ(r.history.epochs.back().train_f1, 100.0);
}

TEST(Training, HistoryFollowsStepSchedule) {
  const auto s = synthetic_samples(1, 23);
  TwoBranchModel model(small_2d());
  auto cfg = quick(7);
  cfg.lr_decay_epochs = {2, 5};
  cfg.lr_decay_factor = 0.5;
  auto r = train_model(model, s.two_d, {}, cfg);
  ASSERT_EQ(r.history.epochs.size(), 7u);
  const double expected[] = {1e-3, 1e-3, 5e-4, 5e-4, 5e-4, 2.5e-4, 2.5e-4};
  for (int e = 0; e < 7; ++e) {
    EXPECT_EQ(r.history.epochs[static_cast<std::size_t>(e)].epoch, e);
    EXPECT_DOUBLE_EQ(r.history.epochs[static_cast<std::size_t>(e)].lr, expected[e]);
    EXPECT_TRUE(std::isnan(r.history.epochs[static_cast<std::size_t>(e)].val_f1));
    EXPECT_TRUE(std::isfinite(r.history.epochs[static_cast<std::size_t>(e)].train_loss));
  }
}

TEST(Training, SameSeedSameRunDifferentSeedDifferentRun) {
  const auto s = synthetic_samples(1, 24);
  auto run = [&](std::uint64_t seed) {
    torch::manual_seed(99);  // train_model must reseed on its own
    TwoBranchModel model(small_2d());
    auto cfg = quick(3, seed);
    auto r = train_model(model, s.two_d, s.two_d, cfg);
    return std::pair{r.history.epochs.back().train_loss, predict_logits(model, s.two_d)};
  };
  auto [loss_a, logits_a] = run(5);
  auto [loss_b, logits_b] = run(5);
  auto [loss_c, logits_c] = run(6);
  EXPECT_EQ(loss_a, loss_b);
  EXPECT_TRUE(torch::equal(logits_a, logits_b));
  EXPECT_NE(loss_a, loss_c);
}

TEST(Training, FlipAugmentationIsSeededAndChangesTraining) {
  const auto s = synthetic_samples(1, 25);
  auto run = [&](bool flips) {
    torch::manual_seed(4);
    TwoBranchModel model(small_2d());
    auto cfg = quick(3, 1);
    cfg.augment_flips = flips;
    return train_model(model, s.two_d, {}, cfg).history.epochs.back().train_loss;
  };
  EXPECT_EQ(run(true), run(true));
  EXPECT_NE(run(true), run(false));
}

TEST(Training, CheckpointsRoundTrip) {
  const auto dir = fresh_dir("ckpt");
  const auto s = synthetic_samples(1, 26);
  TwoBranchModel model(small_2d());
  TrainOptions opt;
  opt.checkpoint_dir = dir;
  opt.name = "2d";
  opt.config_hash = "abc123";
  auto r = train_model(model, s.two_d, s.two_d, quick(4), opt);
  ASSERT_TRUE(fs::exists(r.best_checkpoint));
  ASSERT_TRUE(fs::exists(r.final_checkpoint));
  EXPECT_EQ(read_history_csv(r.history_path).epochs.size(), 4u);

  // The model holds the final parameters; the final checkpoint reproduces them.
  auto restored = load_model(r.final_checkpoint, std::string("abc123"));
  EXPECT_TRUE(torch::equal(predict_logits(model, s.two_d), predict_logits(*restored, s.two_d)));
  const auto meta = read_checkpoint_meta(r.final_checkpoint);
  EXPECT_EQ(meta.epoch, 3);
  EXPECT_EQ(meta.kind, "2d");
  EXPECT_EQ(meta.arch_hash, arch_hash(small_2d().to_json()));
  EXPECT_EQ(read_checkpoint_meta(r.best_checkpoint).epoch, r.best_epoch);
  EXPECT_DOUBLE_EQ(read_checkpoint_meta(r.best_checkpoint).val_f1, r.best_val_f1);

  EXPECT_THROW(load_model(r.final_checkpoint, std::string("other")), ContractError);
  auto wider = small_2d();
  wider.hidden = 64;
  TwoBranchModel mismatched(wider);
  EXPECT_THROW(load_checkpoint(mismatched, r.final_checkpoint), ContractError);
  HybridDeCoVNet wrong_kind(small_3d());
  EXPECT_THROW(load_checkpoint(wrong_kind, r.final_checkpoint), ContractError);
  fs::remove_all(dir);
}

TEST(Training, NonFiniteLossAborts) {
  auto s = synthetic_samples(1, 27).two_d;
  s[2].inputs[0][0][0][0] = std::nanf("");
  TwoBranchModel model(small_2d());
  auto cfg = quick(2);
  cfg.batch_size = 8;
  try {
    train_model(model, s, {}, cfg, {.name = "nan-run"});
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite loss at epoch 0, batch 0"), std::string::npos) << e.what();
  }
}

TEST(Training, RejectsEmptyOrUnlabeledData) {
  auto s = synthetic_samples(1, 28).two_d;
  TwoBranchModel model(small_2d());
  EXPECT_THROW(train_model(model, {}, {}, quick(1)), std::invalid_argument);
  s[1].label = -1;
  EXPECT_THROW(train_model(model, s, {}, quick(1)), std::invalid_argument);
  auto bad = quick(1);
  bad.weight_decay = -1.0;
  EXPECT_THROW(train_model(model, synthetic_samples(1, 28).two_d, {}, bad), std::invalid_argument);
}

TEST(Training, ClassWeightsAreInverseFrequency) {
  auto s = synthetic_samples(1, 29).two_d;
  // Labels 0,1,1,2,2,2 -> N = 6 with counts {1,2,3,0}.
  std::vector<TensorSample> v{s[0], s[1], s[1], s[2], s[2], s[2]};
  const auto w = class_weights(v);
  ASSERT_EQ(w.size(), 4u);
  EXPECT_DOUBLE_EQ(w[0], 6.0 / 4.0);
  EXPECT_DOUBLE_EQ(w[1], 6.0 / 8.0);
  EXPECT_DOUBLE_EQ(w[2], 6.0 / 12.0);
  EXPECT_EQ(w[3], 0.0);

  TwoBranchModel model(small_2d());
  auto cfg = quick(2);
  cfg.class_weighted_loss = true;
  EXPECT_NO_THROW(train_model(model, v, {}, cfg));
}

TEST(Prediction, ProbabilitiesAreNormalizedAndBatchInvariant) {
  const auto s = synthetic_samples(2, 30).three_d;
  torch::manual_seed(3);
  HybridDeCoVNet model(small_3d());
  model.train();
  const auto a = predict_probs(model, s, 1);
  const auto b = predict_probs(model, s, 16);
  EXPECT_TRUE(model.is_training()) << "predict must restore the training flag";
  ASSERT_EQ(a.size(), s.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      sum += a[i][c];
      EXPECT_NEAR(a[i][c], b[i][c], 1e-6);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Prediction, EmptyInputGivesEmptyOutput) {
  TwoBranchModel model(small_2d());
  EXPECT_TRUE(predict_probs(model, {}).empty());
  EXPECT_EQ(predict_logits(model, {}).size(0), 0);
  EXPECT_THROW(predict_logits(model, synthetic_samples(1, 31).two_d, 0), std::invalid_argument);
}

TEST(Prediction, ProbabilityTableKeepsIdsAndLabels) {
  auto s = synthetic_samples(1, 32).two_d;
  s[3].label = -1;
  TwoBranchModel model(small_2d());
  const auto t = probability_table(model, s);
  ASSERT_EQ(t.scan_ids.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(t.scan_ids[i], s[i].scan_id);
  EXPECT_EQ(t.labels[0], Severity::Mild);
  EXPECT_FALSE(t.labels[3].has_value());
}
