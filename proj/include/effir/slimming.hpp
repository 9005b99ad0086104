#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "effir/encoder.hpp"
#include "effir/losses.hpp"
#include "effir/optimizer.hpp"
#include "effir/retrieval.hpp"

namespace effir {

struct SlimConfig {
  float lambda = 1e-8f;
  float beta = 5.0f;
  std::size_t steps = 500;
  float prune_ratio = 0.30f;
  float lr = 1e-3f;  // gate-only phase; the retrain phase uses TrainConfig.lr

  void validate() const {
    if (lambda < 0.0f) throw ConfigError("slim config: lambda must be >= 0");
    if (!(beta > 0.0f)) throw ConfigError("slim config: beta must be > 0");
    if (prune_ratio < 0.0f || prune_ratio >= 1.0f)
      throw ConfigError("slim config: prune_ratio must lie in [0, 1)");
    if (!(lr > 0.0f)) throw ConfigError("slim config: lr must be > 0");
  }
};

// z = 1^n on every present MLP: a bitwise no-op on model function. Marks the
// gates as the only trainable tensors for the slimming phase.
template <typename T>
void install_gates(EncoderModelT<T>& m) {
  std::size_t mlps = 0;
  for (const auto& b : m.blocks) {
    if (!b.mlp) continue;
    ++mlps;
    if (b.mlp->z) throw ContractError("install_gates: gates already installed");
  }
  if (mlps == 0) throw ContractError("install_gates: model has no MLP sublayers");
  for (auto& [name, t] : collect_params(m)) t.set_requires_grad(false);
  for (auto& b : m.blocks) {
    if (!b.mlp) continue;
    TensorT<T> z = TensorT<T>::ones({b.mlp->width()});
    z.set_requires_grad(true);
    b.mlp->z = std::move(z);
  }
}

template <typename T>
std::vector<TensorT<T>> gate_tensors(EncoderModelT<T>& m) {
  std::vector<TensorT<T>> zs;
  for (auto& b : m.blocks)
    if (b.mlp && b.mlp->z) zs.push_back(*b.mlp->z);
  return zs;
}

template <typename T>
struct SlimLossPartsT {
  TensorT<T> infonce;
  TensorT<T> surrogate;  // raw sum over gates, before the lambda weight
  TensorT<T> total;
};

// L = InfoNCE + lambda * sum_l R~(z_l). Summing per-layer surrogates equals
// the surrogate of the concatenated gate vector.
template <typename T>
SlimLossPartsT<T> slim_loss(const EncoderModelT<T>& m, const std::vector<RetrievalExample>& batch,
                            T lambda, T beta, T tau, bool in_batch_negatives, TapePtr<T> tape) {
  if (batch.empty()) throw ContractError("slim_loss: empty batch");
  std::vector<TensorT<T>> zs;
  for (const auto& b : m.blocks) {
    if (!b.mlp) continue;
    if (!b.mlp->z) throw ContractError("slim_loss: gates not installed");
    zs.push_back(*b.mlp->z);
  }
  if (zs.empty()) throw ContractError("slim_loss: model has no MLP sublayers");
  std::vector<TensorT<T>> q, pos;
  std::vector<std::vector<TensorT<T>>> negs;
  for (const auto& ex : batch) {
    q.push_back(encode(m, ex.query, tape));
    pos.push_back(encode(m, ex.positive, tape));
    std::vector<TensorT<T>> n;
    n.reserve(ex.negatives.size());
    for (const auto& seq : ex.negatives) n.push_back(encode(m, seq, tape));
    negs.push_back(std::move(n));
  }
  SlimLossPartsT<T> parts;
  parts.infonce = infonce_loss(q, pos, negs, in_batch_negatives, tau, tape);
  parts.surrogate = l0_surrogate(zs[0], beta, tape);
  for (std::size_t i = 1; i < zs.size(); ++i)
    parts.surrogate = add(parts.surrogate, l0_surrogate(zs[i], beta, tape), tape);
  parts.total = add(parts.infonce, scale(parts.surrogate, lambda, tape), tape);
  return parts;
}

struct SlimStepLoss {
  float infonce = 0.0f;
  float surrogate = 0.0f;
  float total = 0.0f;
};

// One gate-only gradient step; the optimizer must hold exactly the gates.
inline SlimStepLoss slim_train_step(EncoderModel& m, const std::vector<RetrievalExample>& batch,
                                    const SlimConfig& cfg, const TrainConfig& tcfg, Adam& opt) {
  Tape tape;
  SlimLossPartsT<float> parts = slim_loss(m, batch, cfg.lambda, cfg.beta, tcfg.tau,
                                          tcfg.use_in_batch_negatives, &tape);
  SlimStepLoss out{parts.infonce.item(), parts.surrogate.item(), parts.total.item()};
  if (!std::isfinite(out.total))
    throw NumericError("slim_train_step: non-finite loss " + std::to_string(out.total));
  tape.backward(parts.total);
  opt.step();
  return out;
}

// Gate-training phase: cfg.steps batches cycled over a shuffled copy of the
// data, Adam over the gates alone.
inline std::vector<SlimStepLoss> slim_train(EncoderModel& m,
                                            const std::vector<RetrievalExample>& data,
                                            const SlimConfig& cfg, const TrainConfig& tcfg) {
  cfg.validate();
  if (data.empty()) throw ContractError("slim_train: empty dataset");
  if (tcfg.batch_size < 1) throw ConfigError("slim_train: batch_size must be >= 1");
  std::vector<Tensor> zs = gate_tensors(m);
  if (zs.empty()) throw ContractError("slim_train: gates not installed");
  for (auto& z : zs) z.set_requires_grad(true);
  AdamConfig<float> acfg;
  acfg.lr = cfg.lr;
  Adam opt(zs, acfg);

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng(split_seed(tcfg.seed, "slim/shuffle"));
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

  std::vector<SlimStepLoss> losses;
  losses.reserve(cfg.steps);
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<RetrievalExample> batch;
    batch.reserve(tcfg.batch_size);
    for (std::size_t i = 0; i < tcfg.batch_size; ++i) {
      batch.push_back(data[order[cursor]]);
      cursor = (cursor + 1) % order.size();
    }
    losses.push_back(slim_train_step(m, batch, cfg, tcfg, opt));
  }
  for (auto& z : zs) z.set_requires_grad(false);
  return losses;
}

struct PruneMask {
  // aligned with blocks; empty entry = block has no MLP
  std::vector<std::vector<std::uint8_t>> layers;

  std::size_t zeros() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      for (std::uint8_t kept : l) n += kept == 0;
    return n;
  }
};

// Ranks ReLU(z) across all layers and freezes the globally lowest
// round(ratio * N) entries to 0, the rest to 1, writing the binary values
// back into z. Ties prune the lower (layer, neuron) pair first.
template <typename T>
PruneMask global_prune(EncoderModelT<T>& m, double prune_ratio) {
  if (prune_ratio < 0.0 || prune_ratio >= 1.0)
    throw ContractError("global_prune: ratio must lie in [0, 1)");
  struct GateRef {
    double value;
    std::size_t layer, neuron;
  };
  std::vector<GateRef> entries;
  PruneMask mask;
  mask.layers.resize(m.blocks.size());
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& b = m.blocks[l];
    if (!b.mlp) continue;
    if (!b.mlp->z) throw ContractError("global_prune: gates not installed");
    mask.layers[l].assign(b.mlp->width(), 1);
    for (std::size_t i = 0; i < b.mlp->z->numel(); ++i) {
      const double v = std::max(0.0, static_cast<double>(b.mlp->z->at(i)));
      entries.push_back({v, l, i});
    }
  }
  if (entries.empty()) throw ContractError("global_prune: model has no gates");
  const auto zero_count =
      static_cast<std::size_t>(std::llround(prune_ratio * static_cast<double>(entries.size())));
  if (zero_count >= entries.size())
    throw ContractError("global_prune: ratio would zero every gate in the model");
  std::sort(entries.begin(), entries.end(), [](const GateRef& a, const GateRef& b) {
    return std::tie(a.value, a.layer, a.neuron) < std::tie(b.value, b.layer, b.neuron);
  });
  for (std::size_t i = 0; i < zero_count; ++i) mask.layers[entries[i].layer][entries[i].neuron] = 0;
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& b = m.blocks[l];
    if (!b.mlp) continue;
    b.mlp->z->set_requires_grad(false);
    for (std::size_t i = 0; i < b.mlp->z->numel(); ++i)
      b.mlp->z->at(i) = static_cast<T>(mask.layers[l][i]);
  }
  return mask;
}

// Physically removes masked intermediate dimensions: masked rows of
// W_gate/W_up, masked columns of W_down, and the gates themselves. A layer
// masked to all zeros degenerates to a coarse drop of the whole MLP.
template <typename T>
void shrink(EncoderModelT<T>& m, const PruneMask& mask) {
  if (mask.layers.size() != m.blocks.size())
    throw ContractError("shrink: mask covers " + std::to_string(mask.layers.size()) +
                        " blocks, model has " + std::to_string(m.blocks.size()));
  static const char* mlp_targets[] = {"gate_proj", "up_proj", "down_proj"};
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& b = m.blocks[l];
    const auto& ml = mask.layers[l];
    if (!b.mlp) {
      if (!ml.empty())
        throw ContractError("shrink: mask has entries for block " + std::to_string(l) +
                            " which has no MLP");
      continue;
    }
    if (!b.mlp->z) throw ContractError("shrink: gates not installed at block " + std::to_string(l));
    const std::size_t n = b.mlp->width(), d = m.config.d_model;
    if (ml.size() != n)
      throw ContractError("shrink: mask length " + std::to_string(ml.size()) + " vs gate width " +
                          std::to_string(n) + " at block " + std::to_string(l));
    for (const char* t : mlp_targets)
      if (b.loras.count(t))
        throw ContractError("shrink: merge or detach MLP adapters before shrinking block " +
                            std::to_string(l));
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < n; ++i)
      if (ml[i]) kept.push_back(i);
    if (kept.empty()) {
      b.mlp.reset();  // gate annihilation: pure residual, same as a coarse drop
      continue;
    }
    if (kept.size() == n) {
      b.mlp->z.reset();
      continue;
    }
    std::vector<T> gate(kept.size() * d), up(kept.size() * d), down(d * kept.size());
    for (std::size_t r = 0; r < kept.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) {
        gate[r * d + c] = b.mlp->w_gate.at(kept[r], c);
        up[r * d + c] = b.mlp->w_up.at(kept[r], c);
      }
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < kept.size(); ++c) down[r * kept.size() + c] = b.mlp->w_down.at(r, kept[c]);
    b.mlp->w_gate = TensorT<T>::from({kept.size(), d}, std::move(gate));
    b.mlp->w_up = TensorT<T>::from({kept.size(), d}, std::move(up));
    b.mlp->w_down = TensorT<T>::from({d, kept.size()}, std::move(down));
    b.mlp->z.reset();
  }
}

}  // namespace effir
