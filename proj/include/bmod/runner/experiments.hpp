#pragma once

#include "bmod/runner/train.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace bmod::runner {

// Seeds base.seed, base.seed + 1, ... share one dataset; each experiment is
// named "<variant>/seed<k>".

// full, nonmoving_bg, full_map_reg, unweighted_bce.
std::vector<ExperimentResult> run_ablation_suite(const TrainConfig& base, int num_seeds = 3);

// estimated (noisy), estimated_filtered, gt guidance with the full objective.
std::vector<ExperimentResult> run_noise_study(const TrainConfig& base, int num_seeds = 3);

// BMOD (full) against the same model without a reserved background slot.
std::vector<ExperimentResult> run_baseline_comparison(const TrainConfig& base, int num_seeds = 3);

std::vector<ExperimentResult> run_suite(const std::string& suite, const TrainConfig& base, int num_seeds = 3);

struct TableRow {
  std::string variant;
  int runs = 0;
  double fg_ari = 0.0;
  double all_ari = 0.0;
  double jaccard_fg = 0.0;
  double jaccard_bg = 0.0;
};

// Means over seeds per variant, in order of first appearance.
std::vector<TableRow> summarize(const std::vector<ExperimentResult>& results);
const TableRow& table_row(const std::vector<TableRow>& table, const std::string& variant);

// Writes results.json, metrics.json, metrics.csv, table.csv, loss_curves.csv,
// per_frame/<experiment>.csv and triptychs/<experiment>_seqNN.png
// (input | baseline | BMOD). When the results contain no background-free
// baseline the middle panel shows the ground truth instead.
void emit_report(const std::vector<ExperimentResult>& results, const std::filesystem::path& out_dir);

// Reads results.json from `in_dir` and re-emits everything into `out_dir`.
void emit_report_from(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir);

}  // namespace bmod::runner
