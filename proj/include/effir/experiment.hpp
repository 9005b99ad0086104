#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "effir/encoder.hpp"
#include "effir/evalbench.hpp"
#include "effir/redundancy.hpp"
#include "effir/retrieval.hpp"

namespace effir {

// ---- desk presets ----
// Reference configuration for the redundancy experiments and the CLI: an
// 8-layer last-token model on a 16-keyword task, sized so one seed trains to
// the ranking ceiling in roughly three minutes on a single core. At the
// ceiling the score margins absorb the perturbation from dropping the
// lowest-importance sublayers, which is the regime the directional
// comparisons need.

EncoderConfig desk_encoder();
SyntheticTask desk_task(std::uint64_t seed);
TrainConfig desk_train(std::uint64_t seed);
// 64 task-corpus samples of doc length; seed is split under "calib"
CalibrationSet desk_calibration(const EncoderConfig& cfg, std::uint64_t seed);

struct GridRow {
  std::string name;  // "Full", "Drop-2M", "Drop-2M+FT", ...
  DropMode mode = DropMode::combined;
  std::size_t k = 0;  // sublayers dropped per selected group
  bool retrained = false;
  double ndcg10 = 0.0;
  std::size_t params = 0;
  // Structural, so retrained rows reuse their direct counterpart's numbers.
  // 1.0 by definition for Full and k = 0 rows; 0.0 when benching is off.
  double query_speedup = 1.0;
  double doc_speedup = 1.0;
  std::vector<std::size_t> dropped_attn, dropped_mlp;
};

// dropped[k][l]: whether sublayer l is gone once the k lowest-importance
// sublayers of the group are pruned. Row 0 is the untouched model; sublayers
// absent from the model read as dropped in every row.
struct DropOrderGrid {
  std::vector<std::vector<bool>> attn, mlp;
  std::size_t n_layers = 0;
};

struct RedundancyReport {
  std::vector<GridRow> rows;
  ImportanceReport importance;
  DropOrderGrid drop_order;
};

struct ExperimentConfig {
  std::vector<std::size_t> ks = {0, 2, 4};
  std::vector<DropMode> modes = {DropMode::attn_only, DropMode::mlp_only, DropMode::block};
  std::size_t ndcg_k = 10;
  // Contrastive fine-tuning after the drop; k = 0 rows never retrain (they
  // alias the Full row). LoRA retraining merges adapters before evaluating.
  bool include_retrained = false;
  TrainConfig retrain = desk_train(0);
  // Throughput columns are the slow part; tests shrink the workload instead
  // of skipping the plumbing.
  bool include_bench = true;
  BenchWorkload workload;

  void validate(std::size_t n_layers) const;
};

// Scores the base model once on the calibration set, then evaluates one row
// per (mode, k): drop the k lowest-scoring sublayers of the mode's group(s),
// measure nDCG@10, parameter count, and (optionally) speedup vs the base
// model. Everything except the speedup columns reproduces bitwise.
RedundancyReport redundancy_experiment(const EncoderModel& base, const SyntheticDataset& data,
                                       const CalibrationSet& calib, const ExperimentConfig& cfg);

const GridRow* find_row(const RedundancyReport& report, const std::string& name);

DropOrderGrid drop_order_grid(const ImportanceReport& report);

// Two stacked panels (attn, mlp); dropped cells blue, retained orange.
// Deterministic string, no timestamps.
std::string render_drop_order_svg(const DropOrderGrid& grid);
void save_drop_order_svg(const DropOrderGrid& grid, const std::string& path);

// Fixed-width table of the grid rows for logs and the report command.
std::string render_grid(const RedundancyReport& report);

// One full desk seed: generate, train, score, grid. The trained model is
// returned for reuse (checkpointing, benching).
struct DeskRun {
  std::uint64_t seed = 0;
  SyntheticDataset data;
  EncoderModel model;
  TrainResult train_log;
  RedundancyReport report;
};
DeskRun desk_redundancy_run(std::uint64_t seed, const ExperimentConfig& cfg);

}  // namespace effir
