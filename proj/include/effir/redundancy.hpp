#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "effir/encoder.hpp"
#include "effir/retrieval.hpp"

namespace effir {

struct CalibrationSet {
  std::vector<std::vector<std::size_t>> samples;
  std::uint64_t seed = 0;
};

enum class CalibSource { task_corpus, random_tokens };

// Default calibration: synthetic docs from the retrieval generator. The
// random_tokens mode is the task-agnostic alternative (uniform non-eos ids).
inline CalibrationSet make_calibration(const EncoderConfig& cfg, std::size_t n_samples,
                                       std::size_t len, CalibSource source, std::uint64_t seed) {
  if (n_samples < 1 || len < 1)
    throw ContractError("make_calibration: need at least one sample of length >= 1");
  if (len > cfg.max_seq_len)
    throw ContractError("make_calibration: length " + std::to_string(len) +
                        " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  CalibrationSet calib;
  calib.seed = seed;
  if (source == CalibSource::task_corpus) {
    SyntheticTask task;
    task.vocab_size = cfg.vocab_size;
    task.corpus_size = std::max<std::size_t>(2, n_samples);
    task.doc_len = len;
    task.train_queries = 0;
    task.eval_queries = 0;
    task.negatives_per_query = 0;
    task.seed = seed;
    SyntheticDataset ds = generate_synthetic(task);
    ds.eval.docs.resize(n_samples);
    calib.samples = std::move(ds.eval.docs);
  } else {
    Rng rng(split_seed(seed, "calib/random"));
    calib.samples.resize(n_samples);
    for (auto& s : calib.samples) {
      s.resize(len);
      for (auto& id : s) id = 1 + rng.uniform_int(cfg.vocab_size - 1);
    }
  }
  return calib;
}

struct ImportanceReport {
  std::vector<double> s_attn;  // length L; exactly 0 for dropped sublayers
  std::vector<double> s_mlp;
  std::vector<bool> attn_present;
  std::vector<bool> mlp_present;
  std::string aggregation = "per-token 1-cosine, mean over positions then samples";
  std::size_t samples = 0;
  std::size_t skipped_positions = 0;  // zero-norm hidden states
};

// Mean over valid token positions of 1 - cos(before_p, after_p); positions
// where either side has zero norm are skipped and tallied. Empty result means
// every position was skipped.
template <typename T>
std::optional<double> sample_mean_distance(const TensorT<T>& before, const TensorT<T>& after,
                                           std::size_t& skipped) {
  const std::size_t rows = before.dim(0), cols = before.dim(1);
  double sum = 0.0;
  std::size_t valid = 0;
  for (std::size_t p = 0; p < rows; ++p) {
    double ab = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double a = before.at(p, j), b = after.at(p, j);
      ab += a * b;
      na += a * a;
      nb += b * b;
    }
    if (na == 0.0 || nb == 0.0) {
      ++skipped;
      continue;
    }
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): identical inputs then
    // give ab == na == nb and sqrt(x * x) == x exactly, so the distance is 0.
    sum += 1.0 - ab / std::sqrt(na * nb);
    ++valid;
  }
  if (valid == 0) return std::nullopt;
  return sum / static_cast<double>(valid);
}

template <typename T>
ImportanceReport score_sublayers(const EncoderModelT<T>& model, const CalibrationSet& calib) {
  const std::size_t L = model.blocks.size();
  if (L < 1) throw ContractError("score_sublayers: model has no blocks");
  if (calib.samples.empty()) throw ContractError("score_sublayers: empty calibration set");
  for (const auto& s : calib.samples)
    if (s.empty()) throw ContractError("score_sublayers: calibration sample is empty");

  ImportanceReport rep;
  rep.s_attn.assign(L, 0.0);
  rep.s_mlp.assign(L, 0.0);
  rep.attn_present.resize(L);
  rep.mlp_present.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    rep.attn_present[l] = model.blocks[l].attn.has_value();
    rep.mlp_present[l] = model.blocks[l].mlp.has_value();
  }
  rep.samples = calib.samples.size();

  // per sublayer: sum of per-sample means and how many samples contributed
  std::vector<double> attn_sum(L, 0.0), mlp_sum(L, 0.0);
  std::vector<std::size_t> attn_n(L, 0), mlp_n(L, 0);
  for (const auto& seq : calib.samples) {
    ForwardTraceT<T> trace;
    encode(model, seq, nullptr, &trace);
    for (const auto& e : trace.entries) {
      auto mean = sample_mean_distance(e.before, e.after, rep.skipped_positions);
      if (!mean) continue;
      if (e.kind == Sublayer::attn) {
        attn_sum[e.layer] += *mean;
        ++attn_n[e.layer];
      } else {
        mlp_sum[e.layer] += *mean;
        ++mlp_n[e.layer];
      }
    }
  }
  for (std::size_t l = 0; l < L; ++l) {
    if (rep.attn_present[l]) {
      if (attn_n[l] == 0)
        throw NumericError("score_sublayers: every position skipped for attn layer " +
                           std::to_string(l));
      rep.s_attn[l] = attn_sum[l] / static_cast<double>(attn_n[l]);
    }
    if (rep.mlp_present[l]) {
      if (mlp_n[l] == 0)
        throw NumericError("score_sublayers: every position skipped for mlp layer " +
                           std::to_string(l));
      rep.s_mlp[l] = mlp_sum[l] / static_cast<double>(mlp_n[l]);
    }
  }
  return rep;
}

enum class DropMode { attn_only, mlp_only, combined, block };

struct PruningPlan {
  std::vector<std::size_t> t_attn;  // retained layer indices, ascending
  std::vector<std::size_t> t_mlp;
  std::size_t k_attn = 0, k_mlp = 0;
  std::size_t n_layers = 0;
  DropMode mode = DropMode::combined;
};

namespace detail {

// top-k by score, ties keep the lower index; dropped sublayers not selectable
inline std::vector<std::size_t> top_k_present(const std::vector<double>& scores,
                                              const std::vector<bool>& present, std::size_t k,
                                              const char* group) {
  if (k > scores.size())
    throw ContractError(std::string("select_retained: k for ") + group + " exceeds layer count " +
                        std::to_string(scores.size()));
  std::vector<std::size_t> idx;
  for (std::size_t l = 0; l < scores.size(); ++l)
    if (present[l]) idx.push_back(l);
  if (k > idx.size())
    throw ContractError(std::string("select_retained: only ") + std::to_string(idx.size()) + " " +
                        group + " sublayers present, cannot retain " + std::to_string(k));
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

inline PruningPlan select_retained(const ImportanceReport& rep, std::size_t k_attn,
                                   std::size_t k_mlp) {
  PruningPlan plan;
  plan.n_layers = rep.s_attn.size();
  plan.k_attn = k_attn;
  plan.k_mlp = k_mlp;
  plan.t_attn = detail::top_k_present(rep.s_attn, rep.attn_present, k_attn, "attn");
  plan.t_mlp = detail::top_k_present(rep.s_mlp, rep.mlp_present, k_mlp, "mlp");
  plan.mode = DropMode::combined;
  return plan;
}

// Block score = mean of the block's two sublayer scores (dropped ones count
// as 0); retains the k highest-scoring blocks whole.
inline PruningPlan select_retained_blocks(const ImportanceReport& rep, std::size_t k_blocks) {
  const std::size_t L = rep.s_attn.size();
  if (k_blocks > L)
    throw ContractError("select_retained_blocks: k " + std::to_string(k_blocks) +
                        " exceeds layer count " + std::to_string(L));
  std::vector<double> block_score(L);
  std::vector<bool> all(L, true);
  for (std::size_t l = 0; l < L; ++l) block_score[l] = 0.5 * (rep.s_attn[l] + rep.s_mlp[l]);
  PruningPlan plan;
  plan.n_layers = L;
  plan.k_attn = plan.k_mlp = k_blocks;
  plan.t_attn = detail::top_k_present(block_score, all, k_blocks, "block");
  plan.t_mlp = plan.t_attn;
  plan.mode = DropMode::block;
  return plan;
}

// Removes every sublayer outside the retained sets, pre-norm gamma and any
// attached adapters included. Residual passthrough is what remains.
template <typename T>
void apply_drop(EncoderModelT<T>& m, const PruningPlan& plan) {
  const std::size_t L = m.blocks.size();
  if (plan.n_layers != L)
    throw ContractError("apply_drop: plan built for " + std::to_string(plan.n_layers) +
                        " layers, model has " + std::to_string(L));
  for (std::size_t i : plan.t_attn)
    if (i >= L || !m.blocks[i].attn)
      throw ContractError("apply_drop: plan retains attn layer " + std::to_string(i) +
                          " which is absent");
  for (std::size_t i : plan.t_mlp)
    if (i >= L || !m.blocks[i].mlp)
      throw ContractError("apply_drop: plan retains mlp layer " + std::to_string(i) +
                          " which is absent");
  const auto keeps = [](const std::vector<std::size_t>& t, std::size_t l) {
    return std::binary_search(t.begin(), t.end(), l);
  };
  static const char* attn_targets[] = {"q_proj", "k_proj", "v_proj", "o_proj"};
  static const char* mlp_targets[] = {"gate_proj", "up_proj", "down_proj"};
  for (std::size_t l = 0; l < L; ++l) {
    auto& b = m.blocks[l];
    if (b.attn && !keeps(plan.t_attn, l)) {
      b.attn.reset();
      for (const char* t : attn_targets) b.loras.erase(t);
    }
    if (b.mlp && !keeps(plan.t_mlp, l)) {
      b.mlp.reset();
      for (const char* t : mlp_targets) b.loras.erase(t);
    }
  }
}

struct DropOrderEntry {
  Sublayer group;
  std::size_t layer = 0;
  double score = 0.0;
};

// All present sublayers by ascending importance, attn group first then mlp,
// ties keeping the lower layer index. Already-dropped sublayers are not
// listed (nothing left to drop).
template <typename T>
std::vector<DropOrderEntry> drop_order_trace(const EncoderModelT<T>& model,
                                             const CalibrationSet& calib) {
  const ImportanceReport rep = score_sublayers(model, calib);
  std::vector<DropOrderEntry> order;
  const auto append_group = [&](Sublayer group, const std::vector<double>& scores,
                                const std::vector<bool>& present) {
    std::vector<std::size_t> idx;
    for (std::size_t l = 0; l < scores.size(); ++l)
      if (present[l]) idx.push_back(l);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    for (std::size_t l : idx) order.push_back({group, l, scores[l]});
  };
  append_group(Sublayer::attn, rep.s_attn, rep.attn_present);
  append_group(Sublayer::mlp, rep.s_mlp, rep.mlp_present);
  return order;
}

}  // namespace effir
