#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "effir/experiment.hpp"

using namespace effir;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 8;
  cfg.n_layers = 3;
  cfg.n_heads = 2;
  cfg.d_ff = 4;
  cfg.max_seq_len = 8;
  cfg.pooling = Pooling::mean;
  return cfg;
}

SyntheticDataset tiny_dataset(std::uint64_t seed) {
  SyntheticTask task;
  task.vocab_size = 32;
  task.corpus_size = 32;
  task.query_len = 4;
  task.doc_len = 6;
  task.train_queries = 8;
  task.eval_queries = 8;
  task.negatives_per_query = 3;
  task.seed = seed;
  return generate_synthetic(task);
}

ExperimentConfig fast_config() {
  ExperimentConfig cfg;
  cfg.ks = {0, 1};
  cfg.modes = {DropMode::attn_only, DropMode::mlp_only, DropMode::block};
  cfg.workload.batch = 1;
  cfg.workload.query_len = 3;
  cfg.workload.doc_len = 5;
  cfg.workload.reps = 3;
  cfg.workload.warmups = 1;
  return cfg;
}

bool same_weights(const EncoderModel& a, const EncoderModel& b) {
  const auto pa = collect_params(a);
  const auto pb = collect_params(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first) return false;
    const Tensor& ta = pa[i].second;
    const Tensor& tb = pb[i].second;
    if (ta.shape() != tb.shape()) return false;
    for (std::size_t j = 0; j < ta.numel(); ++j)
      if (ta.at(j) != tb.at(j)) return false;
  }
  return true;
}

std::size_t argmin_present(const std::vector<double>& s, const std::vector<bool>& present) {
  std::size_t best = s.size();
  for (std::size_t l = 0; l < s.size(); ++l) {
    if (!present[l]) continue;
    if (best == s.size() || s[l] < s[best]) best = l;
  }
  return best;
}

}  // namespace

TEST_CASE("desk presets match the tuned recipe") {
  const EncoderConfig cfg = desk_encoder();
  CHECK(cfg.n_layers == 8);
  CHECK(cfg.d_model == 24);
  CHECK(cfg.n_heads == 4);
  CHECK(cfg.d_ff == 48);
  CHECK(cfg.vocab_size == 512);
  CHECK(cfg.max_seq_len == 64);
  CHECK(cfg.pooling == Pooling::last_token);

  const SyntheticTask task = desk_task(7);
  CHECK(task.corpus_size == 256);
  CHECK(task.train_queries == 12288);
  CHECK(task.eval_queries == 256);
  CHECK(task.seed == 7);
  const SyntheticDataset probe = [&] {
    SyntheticTask small = task;
    small.train_queries = 4;  // keyword split depends only on corpus and vocab
    small.eval_queries = 4;
    return generate_synthetic(small);
  }();
  CHECK(probe.n_keywords == 16);

  const TrainConfig tcfg = desk_train(3);
  CHECK(tcfg.tau == 0.1f);
  CHECK(tcfg.lr == 3e-3f);
  CHECK(tcfg.seed == 3);
  CHECK(tcfg.epochs == 1);

  const CalibrationSet a = desk_calibration(cfg, 11);
  const CalibrationSet b = desk_calibration(cfg, 11);
  CHECK(a.samples.size() == 64);
  CHECK(a.samples.front().size() == 12);
  CHECK(a.samples == b.samples);
  CHECK(desk_calibration(cfg, 12).samples != a.samples);
}

TEST_CASE("k = 0 rows alias the Full row exactly") {
  const EncoderModel model = init_encoder<float>(tiny_config(), 5);
  const SyntheticDataset data = tiny_dataset(5);
  const CalibrationSet calib = make_calibration(model.config, 4, 5, CalibSource::random_tokens, 9);
  const RedundancyReport rep = redundancy_experiment(model, data, calib, fast_config());

  const std::vector<std::string> names = {"Full",    "Drop-0A", "Drop-1A", "Drop-0M",
                                          "Drop-1M", "Drop-0B", "Drop-1B"};
  REQUIRE(rep.rows.size() == names.size());
  for (std::size_t i = 0; i < names.size(); ++i) CHECK(rep.rows[i].name == names[i]);

  const GridRow* full = find_row(rep, "Full");
  REQUIRE(full != nullptr);
  CHECK(full->params == count_params(model));
  CHECK(full->query_speedup == 1.0);
  CHECK(full->doc_speedup == 1.0);
  for (const char* name : {"Drop-0A", "Drop-0M", "Drop-0B"}) {
    const GridRow* row = find_row(rep, name);
    REQUIRE(row != nullptr);
    CHECK(row->ndcg10 == full->ndcg10);
    CHECK(row->params == full->params);
    CHECK(row->query_speedup == full->query_speedup);
    CHECK(row->doc_speedup == full->doc_speedup);
    CHECK(row->dropped_attn.empty());
    CHECK(row->dropped_mlp.empty());
  }
  for (const char* name : {"Drop-1A", "Drop-1M", "Drop-1B"}) {
    const GridRow* row = find_row(rep, name);
    REQUIRE(row != nullptr);
    CHECK(row->query_speedup > 0.0);
    CHECK(row->doc_speedup > 0.0);
    CHECK(row->ndcg10 >= 0.0);
    CHECK(row->ndcg10 <= 1.0);
  }
  CHECK(find_row(rep, "Drop-9Z") == nullptr);
}

TEST_CASE("parameter columns match the analytic deltas") {
  const EncoderConfig cfg = tiny_config();
  const EncoderModel model = init_encoder<float>(cfg, 5);
  const SyntheticDataset data = tiny_dataset(5);
  const CalibrationSet calib = make_calibration(cfg, 4, 5, CalibSource::random_tokens, 9);
  ExperimentConfig ecfg = fast_config();
  ecfg.include_bench = false;
  const RedundancyReport rep = redundancy_experiment(model, data, calib, ecfg);

  const std::size_t d = cfg.d_model, n = cfg.d_ff;
  const std::size_t attn_cost = 4 * d * d + d;
  const std::size_t mlp_cost = 3 * d * n + d;
  const std::size_t full = find_row(rep, "Full")->params;
  CHECK(find_row(rep, "Drop-1A")->params == full - attn_cost);
  CHECK(find_row(rep, "Drop-1M")->params == full - mlp_cost);
  CHECK(find_row(rep, "Drop-1B")->params == full - attn_cost - mlp_cost);
}

TEST_CASE("dropped indices follow the importance ranking") {
  const EncoderModel model = init_encoder<float>(tiny_config(), 21);
  const SyntheticDataset data = tiny_dataset(3);
  const CalibrationSet calib = make_calibration(model.config, 4, 5, CalibSource::random_tokens, 9);
  ExperimentConfig ecfg = fast_config();
  ecfg.include_bench = false;
  const RedundancyReport rep = redundancy_experiment(model, data, calib, ecfg);

  const std::size_t worst_attn = argmin_present(rep.importance.s_attn, rep.importance.attn_present);
  const std::size_t worst_mlp = argmin_present(rep.importance.s_mlp, rep.importance.mlp_present);
  const GridRow* a1 = find_row(rep, "Drop-1A");
  CHECK(a1->dropped_attn == std::vector<std::size_t>{worst_attn});
  CHECK(a1->dropped_mlp.empty());
  const GridRow* m1 = find_row(rep, "Drop-1M");
  CHECK(m1->dropped_mlp == std::vector<std::size_t>{worst_mlp});
  CHECK(m1->dropped_attn.empty());

  // replaying the plan by hand reproduces the row's nDCG bitwise
  EncoderModel replay = clone_model(model);
  PruningPlan plan = select_retained(rep.importance, 3, 2);
  apply_drop(replay, plan);
  const double ndcg =
      ndcg_at_k(brute_force_search(replay, data.eval, 10), data.eval.qrels, 10);
  CHECK(ndcg == m1->ndcg10);
}

TEST_CASE("rerun reproduces everything except wall clock") {
  const EncoderModel model = init_encoder<float>(tiny_config(), 5);
  const EncoderModel snapshot = clone_model(model);
  const SyntheticDataset data = tiny_dataset(5);
  const CalibrationSet calib = make_calibration(model.config, 4, 5, CalibSource::random_tokens, 9);
  const ExperimentConfig ecfg = fast_config();
  const RedundancyReport r1 = redundancy_experiment(model, data, calib, ecfg);
  const RedundancyReport r2 = redundancy_experiment(model, data, calib, ecfg);

  CHECK(same_weights(model, snapshot));  // experiment never mutates its input
  CHECK(r1.importance.s_attn == r2.importance.s_attn);
  CHECK(r1.importance.s_mlp == r2.importance.s_mlp);
  CHECK(r1.drop_order.attn == r2.drop_order.attn);
  CHECK(r1.drop_order.mlp == r2.drop_order.mlp);
  REQUIRE(r1.rows.size() == r2.rows.size());
  for (std::size_t i = 0; i < r1.rows.size(); ++i) {
    CHECK(r1.rows[i].name == r2.rows[i].name);
    CHECK(r1.rows[i].ndcg10 == r2.rows[i].ndcg10);
    CHECK(r1.rows[i].params == r2.rows[i].params);
    CHECK(r1.rows[i].dropped_attn == r2.rows[i].dropped_attn);
    CHECK(r1.rows[i].dropped_mlp == r2.rows[i].dropped_mlp);
  }
}

TEST_CASE("bench-free runs mark speedups as unmeasured") {
  const EncoderModel model = init_encoder<float>(tiny_config(), 5);
  const SyntheticDataset data = tiny_dataset(5);
  const CalibrationSet calib = make_calibration(model.config, 4, 5, CalibSource::random_tokens, 9);
  ExperimentConfig ecfg = fast_config();
  ecfg.include_bench = false;
  const RedundancyReport rep = redundancy_experiment(model, data, calib, ecfg);
  CHECK(find_row(rep, "Full")->query_speedup == 1.0);  // definitional, no timing
  CHECK(find_row(rep, "Drop-0M")->query_speedup == 1.0);
  CHECK(find_row(rep, "Drop-1M")->query_speedup == 0.0);
  CHECK(find_row(rep, "Drop-1M")->doc_speedup == 0.0);
}

TEST_CASE("retrained rows evaluate what would ship") {
  const EncoderModel model = init_encoder<float>(tiny_config(), 5);
  const SyntheticDataset data = tiny_dataset(5);
  const CalibrationSet calib = make_calibration(model.config, 4, 5, CalibSource::random_tokens, 9);
  ExperimentConfig ecfg = fast_config();
  ecfg.include_bench = false;
  ecfg.ks = {0, 1};
  ecfg.modes = {DropMode::mlp_only};
  ecfg.include_retrained = true;

  SUBCASE("zero learning rate leaves the direct row's numbers intact") {
    ecfg.retrain.lr = 0.0f;
    ecfg.retrain.seed = 3;
    const RedundancyReport rep = redundancy_experiment(model, data, calib, ecfg);
    const std::vector<std::string> names = {"Full", "Drop-0M", "Drop-1M", "Drop-1M+FT"};
    REQUIRE(rep.rows.size() == names.size());
    for (std::size_t i = 0; i < names.size(); ++i) CHECK(rep.rows[i].name == names[i]);
    const GridRow* direct = find_row(rep, "Drop-1M");
    const GridRow* ft = find_row(rep, "Drop-1M+FT");
    CHECK(ft->retrained);
    CHECK_FALSE(direct->retrained);
    CHECK(ft->ndcg10 == direct->ndcg10);
    CHECK(ft->params == direct->params);
    CHECK(ft->dropped_mlp == direct->dropped_mlp);
  }

  SUBCASE("lora retraining merges the adapters before measuring") {
    ecfg.retrain.lr = 1e-3f;
    ecfg.retrain.use_lora = true;
    ecfg.retrain.lora_rank = 2;
    ecfg.retrain.lora_alpha = 4.0f;
    ecfg.retrain.seed = 3;
    const RedundancyReport rep = redundancy_experiment(model, data, calib, ecfg);
    const GridRow* direct = find_row(rep, "Drop-1M");
    const GridRow* ft = find_row(rep, "Drop-1M+FT");
    REQUIRE(ft != nullptr);
    CHECK(ft->params == direct->params);  // merged adapters add nothing
    CHECK(ft->ndcg10 >= 0.0);
    CHECK(ft->ndcg10 <= 1.0);
  }
}

TEST_CASE("drop order grid marks absences and ascending importance") {
  ImportanceReport rep;
  rep.s_attn = {0.5, 0.1, 0.3};
  rep.attn_present = {true, true, true};
  rep.s_mlp = {0.2, 0.0, 0.2};
  rep.mlp_present = {true, false, true};

  const DropOrderGrid grid = drop_order_grid(rep);
  CHECK(grid.n_layers == 3);
  const std::vector<std::vector<bool>> attn_expect = {
      {false, false, false}, {false, true, false}, {false, true, true}, {true, true, true}};
  CHECK(grid.attn == attn_expect);
  // absent mlp at layer 1 reads as dropped everywhere; the 0.2 tie keeps
  // the lower layer first
  const std::vector<std::vector<bool>> mlp_expect = {
      {false, true, false}, {true, true, false}, {true, true, true}};
  CHECK(grid.mlp == mlp_expect);
}

TEST_CASE("svg rendering is deterministic and complete") {
  ImportanceReport rep;
  rep.s_attn = {0.5, 0.1, 0.3};
  rep.attn_present = {true, true, true};
  rep.s_mlp = {0.2, 0.0, 0.2};
  rep.mlp_present = {true, false, true};
  const DropOrderGrid grid = drop_order_grid(rep);

  const std::string svg = render_drop_order_svg(grid);
  CHECK(svg == render_drop_order_svg(grid));
  CHECK(svg.rfind("<svg xmlns=", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(svg.find("attention drop order") != std::string::npos);
  CHECK(svg.find("mlp drop order") != std::string::npos);
  std::size_t rects = 0;
  for (std::size_t pos = svg.find("<rect"); pos != std::string::npos;
       pos = svg.find("<rect", pos + 1))
    ++rects;
  CHECK(rects == (grid.attn.size() + grid.mlp.size()) * grid.n_layers);

  const std::string path = "test_drop_order.svg";
  save_drop_order_svg(grid, path);
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  CHECK(buf.str() == svg);
  std::remove(path.c_str());

  CHECK_THROWS_AS(save_drop_order_svg(grid, "no-such-dir/x.svg"), CheckpointError);
}

TEST_CASE("render_grid formats every row") {
  const EncoderModel model = init_encoder<float>(tiny_config(), 5);
  const SyntheticDataset data = tiny_dataset(5);
  const CalibrationSet calib = make_calibration(model.config, 4, 5, CalibSource::random_tokens, 9);
  ExperimentConfig ecfg = fast_config();
  ecfg.include_bench = false;
  const RedundancyReport rep = redundancy_experiment(model, data, calib, ecfg);

  const std::string table = render_grid(rep);
  CHECK(table.find("Full") != std::string::npos);
  CHECK(table.find("Drop-1M") != std::string::npos);
  CHECK(table.find("nDCG@10") != std::string::npos);
  const std::size_t lines = std::count(table.begin(), table.end(), '\n');
  CHECK(lines == rep.rows.size() + 1);
}

TEST_CASE("config validation rejects misuse") {
  const EncoderModel model = init_encoder<float>(tiny_config(), 5);
  const SyntheticDataset data = tiny_dataset(5);
  const CalibrationSet calib = make_calibration(model.config, 4, 5, CalibSource::random_tokens, 9);

  ExperimentConfig ecfg = fast_config();
  ecfg.ks = {};
  CHECK_THROWS_AS(redundancy_experiment(model, data, calib, ecfg), ContractError);
  ecfg = fast_config();
  ecfg.modes = {};
  CHECK_THROWS_AS(redundancy_experiment(model, data, calib, ecfg), ContractError);
  ecfg = fast_config();
  ecfg.ks = {0, 0};
  CHECK_THROWS_AS(redundancy_experiment(model, data, calib, ecfg), ContractError);
  ecfg = fast_config();
  ecfg.modes = {DropMode::mlp_only, DropMode::mlp_only};
  CHECK_THROWS_AS(redundancy_experiment(model, data, calib, ecfg), ContractError);
  ecfg = fast_config();
  ecfg.ks = {4};  // exceeds the 3-layer model
  CHECK_THROWS_AS(redundancy_experiment(model, data, calib, ecfg), ContractError);
  ecfg = fast_config();
  ecfg.ndcg_k = 0;
  CHECK_THROWS_AS(redundancy_experiment(model, data, calib, ecfg), ContractError);

  // dropping more sublayers than the group still has
  EncoderModel partial = clone_model(model);
  partial.blocks[1].attn.reset();
  ecfg = fast_config();
  ecfg.ks = {3};
  ecfg.modes = {DropMode::attn_only};
  ecfg.include_bench = false;
  CHECK_THROWS_AS(redundancy_experiment(partial, data, calib, ecfg), ContractError);
}
