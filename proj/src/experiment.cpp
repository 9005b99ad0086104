#include "effir/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>

namespace effir {

EncoderConfig desk_encoder() {
  EncoderConfig cfg;
  cfg.vocab_size = 512;
  // 24 wide: narrow enough that an 8-layer stack is worth its depth on the
  // desk task, wide enough that from-scratch training is seed-stable.
  cfg.d_model = 24;
  cfg.n_layers = 8;
  cfg.n_heads = 4;
  cfg.d_ff = 48;
  cfg.max_seq_len = 64;
  cfg.pooling = Pooling::last_token;
  return cfg;
}

SyntheticTask desk_task(std::uint64_t seed) {
  SyntheticTask t;
  t.vocab_size = 512;
  t.corpus_size = 256;  // 16 keywords, 16 docs each
  t.query_len = 6;
  t.doc_len = 12;
  t.train_queries = 12288;  // one epoch of fresh queries reaches the ceiling
  t.eval_queries = 256;
  t.negatives_per_query = 7;
  t.seed = seed;
  return t;
}

TrainConfig desk_train(std::uint64_t seed) {
  TrainConfig t;
  // From-scratch recipe: the pretrained-scale defaults (tau 0.02, lr 1e-4)
  // saturate the softmax at random init and never leave the plateau.
  t.tau = 0.1f;
  t.lr = 3e-3f;
  t.seed = seed;
  return t;
}

CalibrationSet desk_calibration(const EncoderConfig& cfg, std::uint64_t seed) {
  return make_calibration(cfg, 64, 12, CalibSource::task_corpus, split_seed(seed, "calib"));
}

namespace {

std::size_t n_present(const std::vector<bool>& present) {
  return static_cast<std::size_t>(std::count(present.begin(), present.end(), true));
}

const char* mode_suffix(DropMode mode) {
  switch (mode) {
    case DropMode::attn_only: return "A";
    case DropMode::mlp_only: return "M";
    case DropMode::block: return "B";
    case DropMode::combined: return "AM";
  }
  return "?";
}

PruningPlan plan_for(const ImportanceReport& rep, DropMode mode, std::size_t k) {
  const std::size_t pa = n_present(rep.attn_present);
  const std::size_t pm = n_present(rep.mlp_present);
  const auto need = [&](std::size_t present, const char* group) {
    if (k > present)
      throw ContractError("redundancy_experiment: cannot drop " + std::to_string(k) + " of " +
                          std::to_string(present) + " present " + group + " sublayers");
    return present - k;
  };
  PruningPlan plan;
  switch (mode) {
    case DropMode::attn_only:
      plan = select_retained(rep, need(pa, "attn"), pm);
      break;
    case DropMode::mlp_only:
      plan = select_retained(rep, pa, need(pm, "mlp"));
      break;
    case DropMode::combined:
      plan = select_retained(rep, need(pa, "attn"), need(pm, "mlp"));
      break;
    case DropMode::block:
      plan = select_retained_blocks(rep, need(rep.s_attn.size(), "block"));
      break;
  }
  plan.mode = mode;
  return plan;
}

std::vector<std::size_t> dropped_of(const std::vector<bool>& present,
                                    const std::vector<std::size_t>& retained) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < present.size(); ++l)
    if (present[l] && !std::binary_search(retained.begin(), retained.end(), l)) out.push_back(l);
  return out;
}

double grid_ndcg(const EncoderModel& m, const SyntheticDataset& data, std::size_t k) {
  return ndcg_at_k(brute_force_search(m, data.eval, k), data.eval.qrels, k);
}

}  // namespace

void ExperimentConfig::validate(std::size_t n_layers) const {
  if (ks.empty()) throw ContractError("ExperimentConfig: at least one k required");
  if (modes.empty()) throw ContractError("ExperimentConfig: at least one drop mode required");
  if (std::set<std::size_t>(ks.begin(), ks.end()).size() != ks.size())
    throw ContractError("ExperimentConfig: duplicate k values");
  for (DropMode m : modes)
    if (std::count(modes.begin(), modes.end(), m) != 1)
      throw ContractError("ExperimentConfig: duplicate drop modes");
  for (std::size_t k : ks)
    if (k > n_layers)
      throw ContractError("ExperimentConfig: k " + std::to_string(k) + " exceeds layer count " +
                          std::to_string(n_layers));
  if (ndcg_k < 1) throw ContractError("ExperimentConfig: ndcg_k must be >= 1");
}

RedundancyReport redundancy_experiment(const EncoderModel& base, const SyntheticDataset& data,
                                       const CalibrationSet& calib, const ExperimentConfig& cfg) {
  cfg.validate(base.config.n_layers);
  RedundancyReport out;
  out.importance = score_sublayers(base, calib);
  out.drop_order = drop_order_grid(out.importance);

  GridRow full;
  full.name = "Full";
  full.ndcg10 = grid_ndcg(base, data, cfg.ndcg_k);
  full.params = count_params(base);
  out.rows.push_back(full);

  for (DropMode mode : cfg.modes) {
    for (std::size_t k : cfg.ks) {
      GridRow row;
      row.mode = mode;
      row.k = k;
      row.name = "Drop-" + std::to_string(k) + mode_suffix(mode);
      if (k == 0) {  // no-op plan: alias the Full measurements verbatim
        row.ndcg10 = full.ndcg10;
        row.params = full.params;
        out.rows.push_back(row);
        continue;
      }
      const PruningPlan plan = plan_for(out.importance, mode, k);
      EncoderModel dropped = clone_model(base);
      apply_drop(dropped, plan);
      row.dropped_attn = dropped_of(out.importance.attn_present, plan.t_attn);
      row.dropped_mlp = dropped_of(out.importance.mlp_present, plan.t_mlp);
      row.ndcg10 = grid_ndcg(dropped, data, cfg.ndcg_k);
      row.params = count_params(dropped);
      if (cfg.include_bench) {
        const BenchReport bench = throughput_bench(dropped, base, "full", cfg.workload);
        row.query_speedup = bench.query_speedup;
        row.doc_speedup = bench.doc_speedup;
      } else {
        row.query_speedup = row.doc_speedup = 0.0;
      }
      out.rows.push_back(row);

      if (cfg.include_retrained) {
        GridRow ft = row;
        ft.name += "+FT";
        ft.retrained = true;
        EncoderModel m = clone_model(base);
        apply_drop(m, plan);
        train(m, data.train, cfg.retrain);
        bool has_lora = false;
        for (const auto& b : m.blocks) has_lora = has_lora || !b.loras.empty();
        if (has_lora) merge_lora(m);  // evaluate what would actually ship
        ft.ndcg10 = grid_ndcg(m, data, cfg.ndcg_k);
        ft.params = count_params(m);
        out.rows.push_back(ft);
      }
    }
  }
  return out;
}

const GridRow* find_row(const RedundancyReport& report, const std::string& name) {
  for (const GridRow& row : report.rows)
    if (row.name == name) return &row;
  return nullptr;
}

DropOrderGrid drop_order_grid(const ImportanceReport& report) {
  DropOrderGrid grid;
  grid.n_layers = report.s_attn.size();
  const auto build = [&](const std::vector<double>& scores, const std::vector<bool>& present) {
    std::vector<std::size_t> idx;
    for (std::size_t l = 0; l < scores.size(); ++l)
      if (present[l]) idx.push_back(l);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<std::vector<bool>> rows;
    std::vector<bool> row(grid.n_layers, false);
    for (std::size_t l = 0; l < grid.n_layers; ++l)
      if (!present[l]) row[l] = true;
    rows.push_back(row);
    for (std::size_t l : idx) {
      row[l] = true;
      rows.push_back(row);
    }
    return rows;
  };
  grid.attn = build(report.s_attn, report.attn_present);
  grid.mlp = build(report.s_mlp, report.mlp_present);
  return grid;
}

namespace {

constexpr int kCell = 18, kGap = 2, kLeft = 56, kTitle = 26, kPanelGap = 20, kFoot = 22;

void svg_panel(std::string& s, const char* title, const std::vector<std::vector<bool>>& rows,
               std::size_t n_layers, int y0) {
  s += "<text x=\"" + std::to_string(kLeft) + "\" y=\"" + std::to_string(y0 + 14) +
       "\" font-family=\"monospace\" font-size=\"13\">" + title + "</text>\n";
  const int grid0 = y0 + kTitle;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int y = grid0 + static_cast<int>(r) * (kCell + kGap);
    s += "<text x=\"6\" y=\"" + std::to_string(y + 13) +
         "\" font-family=\"monospace\" font-size=\"11\">k=" + std::to_string(r) + "</text>\n";
    for (std::size_t l = 0; l < n_layers; ++l) {
      const int x = kLeft + static_cast<int>(l) * (kCell + kGap);
      s += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
           std::to_string(kCell) + "\" height=\"" + std::to_string(kCell) + "\" fill=\"" +
           (rows[r][l] ? "#3b6bb0" : "#e8913d") + "\"/>\n";
    }
  }
  const int yl = grid0 + static_cast<int>(rows.size()) * (kCell + kGap) + 13;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const int x = kLeft + static_cast<int>(l) * (kCell + kGap) + kCell / 2 - 3;
    s += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(yl) +
         "\" font-family=\"monospace\" font-size=\"11\">" + std::to_string(l) + "</text>\n";
  }
}

}  // namespace

std::string render_drop_order_svg(const DropOrderGrid& grid) {
  const int panel_a = kTitle + static_cast<int>(grid.attn.size()) * (kCell + kGap) + kFoot;
  const int panel_m = kTitle + static_cast<int>(grid.mlp.size()) * (kCell + kGap) + kFoot;
  const int width = kLeft + static_cast<int>(grid.n_layers) * (kCell + kGap) + 12;
  const int height = panel_a + kPanelGap + panel_m;
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
                  "\" height=\"" + std::to_string(height) + "\">\n";
  svg_panel(s, "attention drop order", grid.attn, grid.n_layers, 0);
  svg_panel(s, "mlp drop order", grid.mlp, grid.n_layers, panel_a + kPanelGap);
  s += "</svg>\n";
  return s;
}

void save_drop_order_svg(const DropOrderGrid& grid, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("save_drop_order_svg: cannot open " + path);
  out << render_drop_order_svg(grid);
  if (!out) throw CheckpointError("save_drop_order_svg: write failed for " + path);
}

std::string render_grid(const RedundancyReport& report) {
  const auto join = [](const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
    return s;
  };
  std::string out =
      "name            mode  k  FT   params   nDCG@10  q-speed  d-speed  dropped\n";
  char line[256];
  for (const GridRow& row : report.rows) {
    std::string dropped;
    if (!row.dropped_attn.empty()) dropped += "attn " + join(row.dropped_attn);
    if (!row.dropped_mlp.empty())
      dropped += (dropped.empty() ? "" : "; ") + std::string("mlp ") + join(row.dropped_mlp);
    if (dropped.empty()) dropped = "-";
    std::snprintf(line, sizeof line, "%-14s  %-4s %2zu  %-3s %8zu  %8.4f %8.3f %8.3f  %s\n",
                  row.name.c_str(), row.name == "Full" ? "-" : mode_suffix(row.mode), row.k,
                  row.retrained ? "yes" : "no", row.params, row.ndcg10, row.query_speedup,
                  row.doc_speedup, dropped.c_str());
    out += line;
  }
  return out;
}

DeskRun desk_redundancy_run(std::uint64_t seed, const ExperimentConfig& cfg) {
  DeskRun run;
  run.seed = seed;
  run.data = generate_synthetic(desk_task(seed));
  const EncoderConfig ecfg = desk_encoder();
  run.model = init_encoder<float>(ecfg, split_seed(seed, "model"));
  run.train_log = train(run.model, run.data.train, desk_train(seed));
  run.report = redundancy_experiment(run.model, run.data, desk_calibration(ecfg, seed), cfg);
  return run;
}

}  // namespace effir
