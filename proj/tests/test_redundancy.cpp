#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "effir/redundancy.hpp"

using namespace effir;

namespace {

EncoderConfig base_config() {
  EncoderConfig cfg;
  cfg.vocab_size = 48;
  cfg.d_model = 16;
  cfg.n_layers = 3;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.max_seq_len = 12;
  cfg.pooling = Pooling::mean;
  return cfg;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.at(i) != b.at(i)) return false;
  return true;
}

void zero_tensor(Tensor t) {
  for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = 0.0f;
}

ImportanceReport hand_report(std::vector<double> attn, std::vector<double> mlp) {
  ImportanceReport rep;
  rep.s_attn = std::move(attn);
  rep.s_mlp = std::move(mlp);
  rep.attn_present.assign(rep.s_attn.size(), true);
  rep.mlp_present.assign(rep.s_mlp.size(), true);
  return rep;
}

}  // namespace

TEST_CASE("sample_mean_distance hand values") {
  std::size_t skipped = 0;
  SUBCASE("orthogonal rows score 1") {
    const Tensor before = Tensor::from({1, 2}, {1.0f, 0.0f});
    const Tensor after = Tensor::from({1, 2}, {0.0f, 1.0f});
    auto s = sample_mean_distance(before, after, skipped);
    REQUIRE(s.has_value());
    CHECK(*s == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(skipped == 0);
  }
  SUBCASE("45-degree rotation scores 1 - 1/sqrt(2)") {
    const Tensor before = Tensor::from({1, 2}, {1.0f, 0.0f});
    const Tensor after = Tensor::from({1, 2}, {1.0f, 1.0f});
    auto s = sample_mean_distance(before, after, skipped);
    REQUIRE(s.has_value());
    CHECK(*s == doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)).epsilon(1e-9));
  }
  SUBCASE("identical rows score exactly 0") {
    const Tensor x = Tensor::from({2, 2}, {0.3f, -0.7f, 1.5f, 2.0f});
    auto s = sample_mean_distance(x, x, skipped);
    REQUIRE(s.has_value());
    CHECK(*s == 0.0);
  }
  SUBCASE("zero-norm positions are skipped and tallied") {
    const Tensor before = Tensor::from({2, 2}, {0.0f, 0.0f, 1.0f, 0.0f});
    const Tensor after = Tensor::from({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
    auto s = sample_mean_distance(before, after, skipped);
    REQUIRE(s.has_value());
    CHECK(skipped == 1);
    CHECK(*s == doctest::Approx(1.0).epsilon(1e-12));
    const Tensor zero = Tensor::zeros({2, 2});
    std::size_t sk2 = 0;
    CHECK_FALSE(sample_mean_distance(zero, after, sk2).has_value());
    CHECK(sk2 == 2);
  }
  SUBCASE("opposite rows score 2, the metric's upper bound") {
    const Tensor before = Tensor::from({1, 2}, {1.0f, 0.0f});
    const Tensor after = Tensor::from({1, 2}, {-1.0f, 0.0f});
    auto s = sample_mean_distance(before, after, skipped);
    CHECK(*s == doctest::Approx(2.0).epsilon(1e-12));
  }
}

TEST_CASE("scoring is bitwise invariant under power-of-two rescaling") {
  Rng rng(split_seed(7, "test/scale"));
  Tensor before({4, 8});
  Tensor after({4, 8});
  for (std::size_t i = 0; i < before.numel(); ++i) {
    before.at(i) = static_cast<float>(rng.normal());
    after.at(i) = static_cast<float>(rng.normal());
  }
  Tensor sb = before.clone(), sa = after.clone();
  for (std::size_t i = 0; i < sb.numel(); ++i) {
    sb.at(i) *= 4.0f;
    sa.at(i) *= 4.0f;
  }
  std::size_t sk1 = 0, sk2 = 0;
  auto s1 = sample_mean_distance(before, after, sk1);
  auto s2 = sample_mean_distance(sb, sa, sk2);
  REQUIRE(s1.has_value());
  REQUIRE(s2.has_value());
  CHECK(*s1 == *s2);
}

TEST_CASE("score_sublayers on a real model") {
  const EncoderConfig cfg = base_config();
  EncoderModel model = init_encoder<float>(cfg, 19);
  const CalibrationSet calib = make_calibration(cfg, 8, 6, CalibSource::random_tokens, 3);

  SUBCASE("scores are finite, in range, and sized per layer") {
    const ImportanceReport rep = score_sublayers(model, calib);
    REQUIRE(rep.s_attn.size() == 3);
    REQUIRE(rep.s_mlp.size() == 3);
    CHECK(rep.samples == 8);
    for (std::size_t l = 0; l < 3; ++l) {
      CHECK(rep.s_attn[l] >= 0.0);
      CHECK(rep.s_attn[l] <= 2.0);
      CHECK(rep.s_mlp[l] >= 0.0);
      CHECK(rep.s_mlp[l] <= 2.0);
      CHECK(std::isfinite(rep.s_attn[l]));
      CHECK(std::isfinite(rep.s_mlp[l]));
      CHECK(rep.attn_present[l]);
      CHECK(rep.mlp_present[l]);
    }
  }
  SUBCASE("a zero-function sublayer scores exactly 0") {
    zero_tensor(model.blocks[1].mlp->w_down);
    const ImportanceReport rep = score_sublayers(model, calib);
    CHECK(rep.s_mlp[1] == 0.0);
    CHECK(rep.s_mlp[0] > 0.0);
  }
  SUBCASE("dropped sublayers report score 0 and absence") {
    model.blocks[2].attn.reset();
    const ImportanceReport rep = score_sublayers(model, calib);
    CHECK(rep.s_attn[2] == 0.0);
    CHECK_FALSE(rep.attn_present[2]);
    CHECK(rep.mlp_present[2]);
  }
  SUBCASE("determinism: identical calibration gives identical reports") {
    const ImportanceReport a = score_sublayers(model, calib);
    const ImportanceReport b = score_sublayers(model, calib);
    CHECK(a.s_attn == b.s_attn);
    CHECK(a.s_mlp == b.s_mlp);
  }
  SUBCASE("contract errors") {
    CHECK_THROWS_AS(score_sublayers(model, CalibrationSet{}), ContractError);
    CalibrationSet bad;
    bad.samples = {{1, 2}, {}};
    CHECK_THROWS_AS(score_sublayers(model, bad), ContractError);
    EncoderModel empty_model;
    empty_model.config = cfg;
    CHECK_THROWS_AS(score_sublayers(empty_model, calib), ContractError);
  }
}

TEST_CASE("all-zero hidden states raise a numeric error") {
  const EncoderConfig cfg = base_config();
  EncoderModel model = init_encoder<float>(cfg, 23);
  zero_tensor(model.tok_emb);  // pos_emb starts zero, so the stream is zero everywhere
  const CalibrationSet calib = make_calibration(cfg, 2, 4, CalibSource::random_tokens, 5);
  CHECK_THROWS_AS(score_sublayers(model, calib), NumericError);
}

TEST_CASE("select_retained picks top-k with lower-index ties") {
  SUBCASE("direct argmax") {
    const auto rep = hand_report({0.5, 0.6, 0.7, 0.8}, {0.05, 0.40, 0.35, 0.10});
    const PruningPlan plan = select_retained(rep, 4, 2);
    CHECK(plan.t_mlp == std::vector<std::size_t>{1, 2});
    CHECK(plan.t_attn == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(plan.k_mlp == 2);
    CHECK(plan.n_layers == 4);
  }
  SUBCASE("ties retain the lower index") {
    const auto rep = hand_report({0.3, 0.3, 0.1}, {0.3, 0.3, 0.1});
    const PruningPlan plan = select_retained(rep, 1, 1);
    CHECK(plan.t_attn == std::vector<std::size_t>{0});
    CHECK(plan.t_mlp == std::vector<std::size_t>{0});
  }
  SUBCASE("k equal to L retains everything") {
    const auto rep = hand_report({0.2, 0.1}, {0.4, 0.3});
    const PruningPlan plan = select_retained(rep, 2, 2);
    CHECK(plan.t_attn == std::vector<std::size_t>{0, 1});
    CHECK(plan.t_mlp == std::vector<std::size_t>{0, 1});
  }
  SUBCASE("k past L is a contract error") {
    const auto rep = hand_report({0.2, 0.1}, {0.4, 0.3});
    CHECK_THROWS_AS(select_retained(rep, 3, 2), ContractError);
    CHECK_THROWS_AS(select_retained(rep, 2, 3), ContractError);
  }
  SUBCASE("dropped sublayers are not selectable") {
    auto rep = hand_report({0.9, 0.2}, {0.4, 0.3});
    rep.attn_present[0] = false;
    rep.s_attn[0] = 0.0;
    const PruningPlan plan = select_retained(rep, 1, 2);
    CHECK(plan.t_attn == std::vector<std::size_t>{1});
    CHECK_THROWS_AS(select_retained(rep, 2, 2), ContractError);
  }
  SUBCASE("selection is deterministic and idempotent") {
    const auto rep = hand_report({0.5, 0.5, 0.2}, {0.1, 0.9, 0.9});
    const PruningPlan a = select_retained(rep, 2, 2);
    const PruningPlan b = select_retained(rep, 2, 2);
    CHECK(a.t_attn == b.t_attn);
    CHECK(a.t_mlp == b.t_mlp);
  }
}

TEST_CASE("block selection uses the mean of the two sublayer scores") {
  const auto rep = hand_report({0.8, 0.1, 0.5}, {0.2, 0.3, 0.6});
  // block means: 0.5, 0.2, 0.55
  const PruningPlan plan = select_retained_blocks(rep, 2);
  CHECK(plan.mode == DropMode::block);
  CHECK(plan.t_attn == std::vector<std::size_t>{0, 2});
  CHECK(plan.t_mlp == std::vector<std::size_t>{0, 2});
  CHECK_THROWS_AS(select_retained_blocks(rep, 4), ContractError);
}

TEST_CASE("apply_drop") {
  const EncoderConfig cfg = base_config();
  EncoderModel model = init_encoder<float>(cfg, 29);
  const std::vector<std::size_t> probe = {5, 9, 2, 2, 7};

  SUBCASE("retain-everything plan is a bitwise no-op") {
    const Tensor before = encode(model, probe, nullptr);
    PruningPlan plan;
    plan.n_layers = 3;
    plan.t_attn = {0, 1, 2};
    plan.t_mlp = {0, 1, 2};
    plan.k_attn = plan.k_mlp = 3;
    apply_drop(model, plan);
    CHECK(model.blocks[0].attn.has_value());
    CHECK(bitwise_equal(before, encode(model, probe, nullptr)));
  }
  SUBCASE("dropping equals forcing the sublayer function to zero, bitwise") {
    EncoderModel zeroed = clone_model(model);
    zero_tensor(zeroed.blocks[1].mlp->w_down);  // F_l == 0 while the sublayer stays
    PruningPlan plan;
    plan.n_layers = 3;
    plan.t_attn = {0, 1, 2};
    plan.t_mlp = {0, 2};
    plan.k_attn = 3;
    plan.k_mlp = 2;
    apply_drop(model, plan);
    CHECK_FALSE(model.blocks[1].mlp.has_value());
    CHECK(bitwise_equal(encode(model, probe, nullptr), encode(zeroed, probe, nullptr)));
  }
  SUBCASE("parameter delta matches the analytic formula exactly") {
    const std::size_t before = count_params(model);
    PruningPlan plan;
    plan.n_layers = 3;
    plan.t_attn = {0, 2};
    plan.t_mlp = {1};
    plan.k_attn = 2;
    plan.k_mlp = 1;
    apply_drop(model, plan);
    const std::size_t d = cfg.d_model, n = cfg.d_ff;
    const std::size_t attn_cost = 4 * d * d + d;  // four projections plus pre-norm
    const std::size_t mlp_cost = 3 * d * n + d;
    CHECK(before - count_params(model) == attn_cost + 2 * mlp_cost);
    // full analytic count for the pruned shape
    const std::size_t expect = cfg.vocab_size * d + (cfg.max_seq_len + 1) * d + 2 * attn_cost + 1 * mlp_cost;
    CHECK(count_params(model) == expect);
  }
  SUBCASE("dropping removes the sublayer's adapters with it") {
    attach_lora(model, lora_target_names(), 2, 4.0f, 99);
    PruningPlan plan;
    plan.n_layers = 3;
    plan.t_attn = {1, 2};
    plan.t_mlp = {0, 1, 2};
    plan.k_attn = 2;
    plan.k_mlp = 3;
    apply_drop(model, plan);
    CHECK(model.blocks[0].loras.count("q_proj") == 0);
    CHECK(model.blocks[0].loras.count("o_proj") == 0);
    CHECK(model.blocks[0].loras.count("gate_proj") == 1);
    CHECK(model.blocks[1].loras.count("q_proj") == 1);
  }
  SUBCASE("plan/model mismatches are contract errors") {
    PruningPlan plan;
    plan.n_layers = 2;
    CHECK_THROWS_AS(apply_drop(model, plan), ContractError);
    plan.n_layers = 3;
    plan.t_attn = {0};
    plan.t_mlp = {};
    apply_drop(model, plan);  // drops attn 1,2 and every mlp
    PruningPlan again;
    again.n_layers = 3;
    again.t_attn = {1};  // attn 1 no longer exists
    CHECK_THROWS_AS(apply_drop(model, again), ContractError);
  }
}

TEST_CASE("block mode removes attention and MLP together") {
  const EncoderConfig cfg = base_config();
  EncoderModel model = init_encoder<float>(cfg, 37);
  const auto rep = hand_report({0.8, 0.1, 0.5}, {0.2, 0.3, 0.6});
  const PruningPlan plan = select_retained_blocks(rep, 2);  // drops block 1
  apply_drop(model, plan);
  CHECK(model.blocks[0].attn.has_value());
  CHECK(model.blocks[0].mlp.has_value());
  CHECK_FALSE(model.blocks[1].attn.has_value());
  CHECK_FALSE(model.blocks[1].mlp.has_value());
  CHECK(model.blocks[2].attn.has_value());
  CHECK(model.blocks[2].mlp.has_value());
}

TEST_CASE("drop_order_trace sorts ascending with stable ties") {
  const EncoderConfig cfg = base_config();
  EncoderModel model = init_encoder<float>(cfg, 41);
  const CalibrationSet calib = make_calibration(cfg, 6, 6, CalibSource::random_tokens, 11);

  SUBCASE("zero-function sublayers drop first, lower index leading ties") {
    zero_tensor(model.blocks[2].mlp->w_down);
    zero_tensor(model.blocks[0].mlp->w_down);  // two exact-0 scores: tie
    const auto order = drop_order_trace(model, calib);
    REQUIRE(order.size() == 6);
    std::vector<const DropOrderEntry*> mlp_entries;
    for (const auto& e : order)
      if (e.group == Sublayer::mlp) mlp_entries.push_back(&e);
    REQUIRE(mlp_entries.size() == 3);
    CHECK(mlp_entries[0]->layer == 0);
    CHECK(mlp_entries[0]->score == 0.0);
    CHECK(mlp_entries[1]->layer == 2);
    CHECK(mlp_entries[1]->score == 0.0);
    CHECK(mlp_entries[2]->layer == 1);
  }
  SUBCASE("scores ascend within each group and dropped sublayers are absent") {
    model.blocks[1].attn.reset();
    const auto order = drop_order_trace(model, calib);
    REQUIRE(order.size() == 5);
    double last_attn = -1.0, last_mlp = -1.0;
    for (const auto& e : order) {
      if (e.group == Sublayer::attn) {
        CHECK(e.layer != 1);
        CHECK(e.score >= last_attn);
        last_attn = e.score;
      } else {
        CHECK(e.score >= last_mlp);
        last_mlp = e.score;
      }
    }
  }
}

TEST_CASE("make_calibration modes") {
  const EncoderConfig cfg = base_config();
  SUBCASE("task corpus mode is deterministic and sized") {
    const CalibrationSet a = make_calibration(cfg, 5, 7, CalibSource::task_corpus, 13);
    const CalibrationSet b = make_calibration(cfg, 5, 7, CalibSource::task_corpus, 13);
    CHECK(a.samples == b.samples);
    REQUIRE(a.samples.size() == 5);
    for (const auto& s : a.samples) CHECK(s.size() == 7);
  }
  SUBCASE("random token mode stays inside the vocabulary") {
    const CalibrationSet c = make_calibration(cfg, 4, 6, CalibSource::random_tokens, 17);
    for (const auto& s : c.samples)
      for (std::size_t id : s) {
        CHECK(id >= 1);
        CHECK(id < cfg.vocab_size);
      }
  }
  SUBCASE("bad sizes are contract errors") {
    CHECK_THROWS_AS(make_calibration(cfg, 0, 6, CalibSource::random_tokens, 1), ContractError);
    CHECK_THROWS_AS(make_calibration(cfg, 4, 0, CalibSource::random_tokens, 1), ContractError);
    CHECK_THROWS_AS(make_calibration(cfg, 4, 99, CalibSource::random_tokens, 1), ContractError);
  }
}
