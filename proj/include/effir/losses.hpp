#pragma once

#include <cstddef>
#include <vector>

#include "effir/ops.hpp"
#include "effir/tensor.hpp"

namespace effir {

// Mean over rows of -log softmax(logits / tau) at the row's target index.
// Computing on pre-divided logits with tau = 1 yields the identical loss.
template <typename T>
TensorT<T> infonce_from_logits(TensorT<T> logits, const std::vector<std::size_t>& targets, T tau,
                               TapePtr<T> tape) {
  if (!(tau > T(0))) throw ContractError("infonce: tau must be positive");
  if (logits.rank() != 2 || targets.size() != logits.dim(0))
    throw ContractError("infonce: logits " + shape_str(logits.shape()) + " need one target per row");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  for (std::size_t t : targets)
    if (t >= cols) throw ContractError("infonce: target column out of range");
  TensorT<T> ls = log_softmax(scale(std::move(logits), T(1) / tau, tape), 1, tape);
  std::vector<TensorT<T>> picked;
  picked.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) picked.push_back(take(ls, r * cols + targets[r], tape));
  return scale(sum_all(stack_scalars(std::move(picked), tape), tape), T(-1) / static_cast<T>(rows), tape);
}

// Contrastive loss over encoded sequences. Candidates are every item's
// positive followed by its explicit negatives, laid out item by item; with
// in-batch negatives disabled each row sees only its own candidates.
template <typename T>
TensorT<T> infonce_loss(const std::vector<TensorT<T>>& q_embs, const std::vector<TensorT<T>>& pos_embs,
                        const std::vector<std::vector<TensorT<T>>>& neg_embs, bool in_batch_pool, T tau,
                        TapePtr<T> tape) {
  const std::size_t b = q_embs.size();
  if (b == 0) throw ContractError("infonce: empty batch");
  if (pos_embs.size() != b || neg_embs.size() != b)
    throw ContractError("infonce: batch size mismatch between queries, positives and negatives");
  const std::size_t k = neg_embs[0].size();
  for (const auto& negs : neg_embs)
    if (negs.size() != k) throw ContractError("infonce: ragged negative lists");

  TensorT<T> q = stack_rows(q_embs, tape);
  std::vector<TensorT<T>> cand;
  cand.reserve(b * (1 + k));
  for (std::size_t i = 0; i < b; ++i) {
    cand.push_back(pos_embs[i]);
    for (const auto& n : neg_embs[i]) cand.push_back(n);
  }
  TensorT<T> sims = matmul_nt(std::move(q), stack_rows(std::move(cand), tape), tape);  // [b, b*(1+k)]

  if (in_batch_pool) {
    std::vector<std::size_t> targets(b);
    for (std::size_t i = 0; i < b; ++i) targets[i] = i * (1 + k);
    return infonce_from_logits(std::move(sims), targets, tau, tape);
  }
  // restrict each row to its own candidate span
  std::vector<TensorT<T>> rows;
  rows.reserve(b);
  for (std::size_t i = 0; i < b; ++i)
    rows.push_back(take_row(slice_cols(sims, i * (1 + k), (i + 1) * (1 + k), tape), i, tape));
  return infonce_from_logits(stack_rows(std::move(rows), tape), std::vector<std::size_t>(b, 0), tau, tape);
}

// KL(softmax(teacher/tau) || softmax(student/tau)), mean over rows. The
// teacher is a constant; gradients flow only through the student scores.
template <typename T>
TensorT<T> distill_kl(TensorT<T> student_scores, TensorT<T> teacher_scores, T tau, TapePtr<T> tape) {
  if (!(tau > T(0))) throw ContractError("distill: tau must be positive");
  if (student_scores.shape() != teacher_scores.shape())
    throw ContractError("distill: shape mismatch " + shape_str(student_scores.shape()) + " vs " +
                        shape_str(teacher_scores.shape()));
  if (student_scores.rank() != 2) throw ContractError("distill: expected rank-2 score matrices");
  const std::size_t rows = student_scores.dim(0);

  TensorT<T> p = softmax(scale(teacher_scores, T(1) / tau, nullptr), 1, nullptr);
  T entropy_term = T(0);  // sum p log p, with 0 log 0 = 0
  for (std::size_t i = 0; i < p.numel(); ++i)
    if (p.at(i) > T(0)) entropy_term += p.at(i) * std::log(p.at(i));

  TensorT<T> ls = log_softmax(scale(std::move(student_scores), T(1) / tau, tape), 1, tape);
  TensorT<T> cross = scale(sum_all(mul(std::move(ls), p, tape), tape), T(-1) / static_cast<T>(rows), tape);
  return add_scalar(std::move(cross), entropy_term / static_cast<T>(rows), tape);
}

// Sigmoid relaxation of the l0 norm: sum_i sigmoid(beta * |z_i|). Each entry
// contributes at least 0.5 (at z_i = 0) and strictly less than 1.
template <typename T>
TensorT<T> l0_surrogate(TensorT<T> z_all, T beta, TapePtr<T> tape) {
  if (!(beta > T(0))) throw ContractError("l0_surrogate: beta must be positive");
  return sum_all(sigmoid(scale(abs(std::move(z_all), tape), beta, tape), tape), tape);
}

}  // namespace effir
