// covsev: synthesize data, preprocess, train, evaluate and ensemble severity
// classifiers for CT scans.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "covsev/dataset.hpp"
#include "covsev/errors.hpp"
#include "covsev/pipeline.hpp"

namespace fs = std::filesystem;
using namespace covsev;

namespace {

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string scenario;
  std::string work_dir;
  std::string manifest;
  std::optional<int> threads;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "Pipeline TOML file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", a.seed, "Override the configured seed");
  cmd->add_option("--scenario", a.scenario, "Override the scenario (train-val | cv5)")
      ->check(CLI::IsMember({"train-val", "cv5"}));
  cmd->add_option("--work-dir", a.work_dir, "Override paths.work_dir (and the directories derived from it)");
  cmd->add_option("--manifest", a.manifest, "Override paths.manifest")->check(CLI::ExistingFile);
  cmd->add_option("--threads", a.threads, "Intra-op threads (default from config, 1)");
}

PipelineConfig load_config(const CommonArgs& a) {
  auto cfg = PipelineConfig::load(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (!a.scenario.empty()) cfg.scenario = scenario_from_string(a.scenario);
  if (a.threads) cfg.threads = *a.threads;
  if (!a.manifest.empty()) cfg.manifest = fs::absolute(a.manifest);
  if (!a.work_dir.empty()) {
    cfg.work_dir = fs::absolute(a.work_dir);
    cfg.cache_dir.clear();
    cfg.checkpoint_dir.clear();
    cfg.report_dir.clear();
  }
  cfg.finalize();
  cfg.validate();
  return cfg;
}

std::vector<EvalUnit> select_units(Pipeline& p, std::optional<int> fold) {
  auto all = p.units();
  if (!fold) return all;
  if (p.config().scenario != Scenario::CV5) throw std::invalid_argument("--fold only applies to the cv5 scenario");
  if (*fold < 1 || *fold > static_cast<int>(all.size()))
    throw std::invalid_argument("--fold must be in 1.." + std::to_string(all.size()));
  return {all[static_cast<std::size_t>(*fold - 1)]};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CT-scan COVID-19 severity pipeline"};
  app.require_subcommand(1);
  std::string stage;

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic labeled dataset (PNG slices, masks, manifest)");
  std::string synth_out;
  int n_per_class = 10, val_per_class = 5;
  std::int64_t slices = 40, size = 64;
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--n-per-class", n_per_class, "Training scans per class")->check(CLI::PositiveNumber);
  synth->add_option("--val-per-class", val_per_class, "Validation scans per class")->check(CLI::NonNegativeNumber);
  synth->add_option("--slices", slices, "Slices per scan")->check(CLI::Range(8, 4096));
  synth->add_option("--size", size, "Slice height and width")->check(CLI::Range(8, 4096));
  synth->add_option("--seed", synth_seed, "Generator seed");

  CommonArgs pre_args, train_args, eval_args, ens_args, run_args;
  auto* pre = app.add_subcommand("preprocess", "Filter, segment and pack every labeled scan into the cache");
  add_common(pre, pre_args);

  std::string train_arch, eval_arch;
  std::optional<int> train_fold, eval_fold, ens_fold;
  auto* train = app.add_subcommand("train", "Train one architecture on the scenario's split(s)");
  add_common(train, train_args);
  train->add_option("--arch", train_arch, "2d | 3d")->required()->check(CLI::IsMember({"2d", "3d"}));
  train->add_option("--fold", train_fold, "cv5 only: train a single fold (1-based)");

  auto* eval = app.add_subcommand("eval", "Score validation scans and write probabilities and a report");
  add_common(eval, eval_args);
  eval->add_option("--arch", eval_arch, "2d | 3d")->required()->check(CLI::IsMember({"2d", "3d"}));
  eval->add_option("--fold", eval_fold, "cv5 only: a single fold (1-based)");

  auto* ens = app.add_subcommand("ensemble", "Average 2D and 3D probabilities into an ensemble report");
  std::vector<std::string> ens_probs;
  std::string ens_out, ens_scenario = "custom";
  ens->add_option("--config", ens_args.config, "Pipeline TOML file (ensembles the run's 2d and 3d outputs)")
      ->check(CLI::ExistingFile);
  ens->add_option("--scenario", ens_args.scenario, "Override the scenario")->check(CLI::IsMember({"train-val", "cv5"}));
  ens->add_option("--work-dir", ens_args.work_dir, "Override paths.work_dir");
  ens->add_option("--manifest", ens_args.manifest, "Override paths.manifest")->check(CLI::ExistingFile);
  ens->add_option("--seed", ens_args.seed, "Override the configured seed");
  ens->add_option("--fold", ens_fold, "cv5 only: a single fold (1-based)");
  ens->add_option("--probs", ens_probs, "Probability CSV files to average (explicit mode)")->check(CLI::ExistingFile);
  ens->add_option("--out", ens_out, "Report path (explicit mode)");
  ens->add_option("--tag", ens_scenario, "Scenario tag written into the report (explicit mode)");

  auto* run = app.add_subcommand("run", "Run a full scenario: preprocess, train, evaluate, ensemble");
  add_common(run, run_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      stage = "synth";
      const ScanDims dims{slices, size, size};
      auto train_m = generate_synthetic_dataset(n_per_class, synth_seed, dims, "synth", "train");
      if (val_per_class > 0) {
        auto val_m = generate_synthetic_dataset(val_per_class, synth_seed + 1000003, dims, "synthval", "val");
        for (auto& r : val_m.records) train_m.records.push_back(std::move(r));
      }
      fs::create_directories(synth_out);
      auto on_disk = write_scan_directories(train_m, fs::path(synth_out) / "scans");
      write_manifest(on_disk, fs::path(synth_out) / "manifest.csv");
      std::cout << "wrote " << on_disk.records.size() << " scans and " << (fs::path(synth_out) / "manifest.csv").string()
                << "\n";
      return 0;
    }
    if (pre->parsed()) {
      stage = "preprocess";
      Pipeline p(load_config(pre_args), std::cerr);
      p.prepare();
      return 0;
    }
    if (train->parsed()) {
      stage = "train";
      Pipeline p(load_config(train_args), std::cerr);
      for (const auto& u : select_units(p, train_fold)) p.train(u, arch_from_string(train_arch));
      return 0;
    }
    if (eval->parsed()) {
      stage = "eval";
      Pipeline p(load_config(eval_args), std::cerr);
      for (const auto& u : select_units(p, eval_fold)) {
        const auto r = p.evaluate(u, arch_from_string(eval_arch));
        std::cout << p.report_path(u.rel, eval_arch).string() << " macro_f1=" << round2(r.macro_f1) << "\n";
      }
      return 0;
    }
    if (ens->parsed()) {
      stage = "ensemble";
      if (!ens_probs.empty()) {
        if (ens_out.empty()) throw std::invalid_argument("--out is required with --probs");
        std::vector<ScanProbabilities> tables;
        std::string first;
        for (std::size_t i = 0; i < ens_probs.size(); ++i) {
          std::string h;
          tables.push_back(read_probability_artifact(ens_probs[i], std::nullopt, &h));
          if (i == 0) first = h;
          else if (h != first)
            throw ContractError("refusing to mix probability files from config hashes '" + first + "' and '" + h + "'");
        }
        const auto t = ensemble_tables(tables);
        const auto report = make_report(label_indices(t), t.probs, {ens_scenario, kEnsembleName, first});
        write_report(report, ens_out);
        std::cout << ens_out << " macro_f1=" << round2(report.macro_f1) << "\n";
        return 0;
      }
      if (ens_args.config.empty()) throw std::invalid_argument("either --config or --probs is required");
      Pipeline p(load_config(ens_args), std::cerr);
      for (const auto& u : select_units(p, ens_fold)) {
        const auto r = p.ensemble(u);
        std::cout << p.report_path(u.rel, "ensemble").string() << " macro_f1=" << round2(r.macro_f1) << "\n";
      }
      return 0;
    }
    if (run->parsed()) {
      stage = "run";
      Pipeline p(load_config(run_args), std::cerr);
      const auto summary = p.run();
      for (const auto& r : summary.reports) std::cout << r.string() << "\n";
      std::cout << summary.table.string() << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "covsev " << stage << ": error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
