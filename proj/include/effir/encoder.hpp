#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "effir/ops.hpp"
#include "effir/rng.hpp"
#include "effir/tensor.hpp"

namespace effir {

enum class Pooling { last_token, mean };
enum class Activation { silu, gelu, relu };

// reserved vocabulary id appended to every sequence by encode()
inline constexpr std::size_t kEosId = 0;

struct EncoderConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_seq_len = 64;
  Pooling pooling = Pooling::last_token;
  Activation activation = Activation::silu;

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1)
      throw ConfigError("encoder config: all sizes must be >= 1");
    if (d_model % n_heads != 0)
      throw ConfigError("encoder config: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
  }
};

template <typename T>
struct LoraAdapterT {
  TensorT<T> A;  // r x in, gaussian init
  TensorT<T> B;  // out x r, zero init so attach is a no-op
  std::size_t rank = 0;
  T alpha = T(0);
};

// All projections are stored out x in and applied to row-major token
// matrices as x * W^T.
template <typename T>
struct AttentionT {
  TensorT<T> norm;  // pre-norm gamma, lives and dies with the sublayer
  TensorT<T> w_q, w_k, w_v, w_o;
};

template <typename T>
struct GatedMlpT {
  TensorT<T> norm;
  TensorT<T> w_gate, w_up;  // n x d
  TensorT<T> w_down;        // d x n
  std::optional<TensorT<T>> z;  // length-n slimming gate, present only while installed

  std::size_t width() const { return w_gate.dim(0); }
};

template <typename T>
struct EncoderBlockT {
  std::optional<AttentionT<T>> attn;
  std::optional<GatedMlpT<T>> mlp;
  std::map<std::string, LoraAdapterT<T>> loras;  // keyed by target name
};

template <typename T>
struct EncoderModelT {
  EncoderConfig config;
  TensorT<T> tok_emb;  // vocab_size x d
  TensorT<T> pos_emb;  // (max_seq_len + 1) x d to fit the appended <eos>; zero init
  std::vector<EncoderBlockT<T>> blocks;
};

using EncoderModel = EncoderModelT<float>;

inline const std::vector<std::string>& lora_target_names() {
  static const std::vector<std::string> names = {"q_proj",    "k_proj",    "v_proj",  "o_proj",
                                                 "gate_proj", "up_proj", "down_proj"};
  return names;
}

enum class Sublayer { attn, mlp };

inline const char* sublayer_name(Sublayer s) { return s == Sublayer::attn ? "attn" : "mlp"; }

// Hidden-state capture for importance scoring and layerwise diagnostics.
template <typename T>
struct ForwardTraceT {
  struct Entry {
    Sublayer kind;
    std::size_t layer;
    TensorT<T> before;  // stream entering the sublayer slot (post previous residual)
    TensorT<T> after;   // stream after this sublayer's residual
  };
  std::vector<Entry> entries;
  // stream at block boundaries: embedding output plus one per block
  std::vector<TensorT<T>> block_stream;
};

using ForwardTrace = ForwardTraceT<float>;

// ---- initialization ----

template <typename T>
TensorT<T> init_weight(Shape shape, std::uint64_t seed, const std::string& tag) {
  Rng rng(split_seed(seed, "init/" + tag));
  const double stddev = 1.0 / std::sqrt(static_cast<double>(shape.back()));
  return TensorT<T>::randn(std::move(shape), rng, stddev);
}

template <typename T>
EncoderModelT<T> init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model, n = config.d_ff;
  EncoderModelT<T> m;
  m.config = config;
  m.tok_emb = init_weight<T>({config.vocab_size, d}, seed, "tok_emb");
  m.pos_emb = TensorT<T>::zeros({config.max_seq_len + 1, d});
  m.blocks.resize(config.n_layers);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    AttentionT<T> attn;
    attn.norm = TensorT<T>::ones({d});
    attn.w_q = init_weight<T>({d, d}, seed, p + "attn.w_q");
    attn.w_k = init_weight<T>({d, d}, seed, p + "attn.w_k");
    attn.w_v = init_weight<T>({d, d}, seed, p + "attn.w_v");
    attn.w_o = init_weight<T>({d, d}, seed, p + "attn.w_o");
    m.blocks[l].attn = std::move(attn);
    GatedMlpT<T> mlp;
    mlp.norm = TensorT<T>::ones({d});
    mlp.w_gate = init_weight<T>({n, d}, seed, p + "mlp.w_gate");
    mlp.w_up = init_weight<T>({n, d}, seed, p + "mlp.w_up");
    mlp.w_down = init_weight<T>({d, n}, seed, p + "mlp.w_down");
    m.blocks[l].mlp = std::move(mlp);
  }
  return m;
}

// Deep copy: fresh storage for every tensor, so the copy can diverge from the
// source (plain struct copies share storage through the shallow handles).
template <typename T>
EncoderModelT<T> clone_model(const EncoderModelT<T>& m) {
  EncoderModelT<T> c;
  c.config = m.config;
  c.tok_emb = m.tok_emb.clone();
  c.pos_emb = m.pos_emb.clone();
  c.blocks.resize(m.blocks.size());
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& b = m.blocks[l];
    auto& cb = c.blocks[l];
    if (b.attn) {
      AttentionT<T> a;
      a.norm = b.attn->norm.clone();
      a.w_q = b.attn->w_q.clone();
      a.w_k = b.attn->w_k.clone();
      a.w_v = b.attn->w_v.clone();
      a.w_o = b.attn->w_o.clone();
      cb.attn = std::move(a);
    }
    if (b.mlp) {
      GatedMlpT<T> g;
      g.norm = b.mlp->norm.clone();
      g.w_gate = b.mlp->w_gate.clone();
      g.w_up = b.mlp->w_up.clone();
      g.w_down = b.mlp->w_down.clone();
      if (b.mlp->z) g.z = b.mlp->z->clone();
      cb.mlp = std::move(g);
    }
    for (const auto& [target, lora] : b.loras) {
      LoraAdapterT<T> la;
      la.A = lora.A.clone();
      la.B = lora.B.clone();
      la.rank = lora.rank;
      la.alpha = lora.alpha;
      cb.loras.emplace(target, std::move(la));
    }
  }
  return c;
}

// ---- parameter walking ----

template <typename T>
using NamedParams = std::vector<std::pair<std::string, TensorT<T>>>;

// Every trainable tensor with a stable, checkpoint-friendly name. Order is
// deterministic: embeddings first, then blocks in layer order. Handles are
// shallow, so the caller may mutate through them; const here only promises
// the model structure is untouched.
template <typename T>
NamedParams<T> collect_params(const EncoderModelT<T>& m) {
  NamedParams<T> out;
  out.emplace_back("tok_emb", m.tok_emb);
  out.emplace_back("pos_emb", m.pos_emb);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    const auto& b = m.blocks[l];
    if (b.attn) {
      out.emplace_back(p + "attn.norm", b.attn->norm);
      out.emplace_back(p + "attn.w_q", b.attn->w_q);
      out.emplace_back(p + "attn.w_k", b.attn->w_k);
      out.emplace_back(p + "attn.w_v", b.attn->w_v);
      out.emplace_back(p + "attn.w_o", b.attn->w_o);
    }
    if (b.mlp) {
      out.emplace_back(p + "mlp.norm", b.mlp->norm);
      out.emplace_back(p + "mlp.w_gate", b.mlp->w_gate);
      out.emplace_back(p + "mlp.w_up", b.mlp->w_up);
      out.emplace_back(p + "mlp.w_down", b.mlp->w_down);
      if (b.mlp->z) out.emplace_back(p + "mlp.z", *b.mlp->z);
    }
    for (const auto& [target, lora] : b.loras) {
      out.emplace_back(p + "lora." + target + ".A", lora.A);
      out.emplace_back(p + "lora." + target + ".B", lora.B);
    }
  }
  return out;
}

template <typename T>
std::size_t count_params(const EncoderModelT<T>& m) {
  std::size_t n = 0;
  for (auto& [name, t] : collect_params(m)) n += t.numel();
  return n;
}

// MLP share of a full decoder-style parameter budget, computed from shape
// arithmetic alone (supports grouped-query attention and counts the LM head,
// which real checkpoints of this family carry).
inline double mlp_param_fraction(std::size_t d, std::size_t n, std::size_t layers,
                                 std::size_t vocab, std::size_t heads, std::size_t kv_heads) {
  const double head_dim = static_cast<double>(d) / static_cast<double>(heads);
  const double kv = static_cast<double>(kv_heads) * head_dim;
  const double attn = static_cast<double>(layers) * (2.0 * double(d) * double(d) + 2.0 * kv * double(d));
  const double mlp = static_cast<double>(layers) * 3.0 * double(d) * double(n);
  const double norms = static_cast<double>(layers) * 2.0 * double(d) + double(d);
  const double emb = double(vocab) * double(d);
  const double lm_head = double(vocab) * double(d);
  return mlp / (emb + attn + mlp + norms + lm_head);
}

// ---- forward ----

namespace detail {

// x * W^T plus the adapter path (alpha/r) * (x * A^T) * B^T when attached
template <typename T>
TensorT<T> project(TensorT<T> x, TensorT<T> w, const EncoderBlockT<T>& block,
                   const std::string& target, TapePtr<T> tape) {
  TensorT<T> y = matmul_nt(x, std::move(w), tape);
  auto it = block.loras.find(target);
  if (it == block.loras.end()) return y;
  const LoraAdapterT<T>& lora = it->second;
  TensorT<T> delta = matmul_nt(matmul_nt(std::move(x), lora.A, tape), lora.B, tape);
  return add(std::move(y), scale(std::move(delta), lora.alpha / static_cast<T>(lora.rank), tape), tape);
}

template <typename T>
TensorT<T> causal_mask(std::size_t s) {
  TensorT<T> mask(Shape{s, s});
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = i + 1; j < s; ++j) mask.at(i, j) = T(-1e30);
  return mask;
}

template <typename T>
TensorT<T> attention_core(const EncoderBlockT<T>& block, const EncoderConfig& cfg, TensorT<T> h,
                          TapePtr<T> tape) {
  const AttentionT<T>& attn = *block.attn;
  const std::size_t s = h.dim(0), d = cfg.d_model, nh = cfg.n_heads, dh = d / nh;
  TensorT<T> q = project(h, attn.w_q, block, "q_proj", tape);
  TensorT<T> k = project(h, attn.w_k, block, "k_proj", tape);
  TensorT<T> v = project(h, attn.w_v, block, "v_proj", tape);
  TensorT<T> mask = causal_mask<T>(s);
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<TensorT<T>> heads;
  heads.reserve(nh);
  for (std::size_t hd = 0; hd < nh; ++hd) {
    TensorT<T> qh = slice_cols(q, hd * dh, (hd + 1) * dh, tape);
    TensorT<T> kh = slice_cols(k, hd * dh, (hd + 1) * dh, tape);
    TensorT<T> vh = slice_cols(v, hd * dh, (hd + 1) * dh, tape);
    TensorT<T> logits = scale(matmul_nt(std::move(qh), std::move(kh), tape), inv_sqrt_dh, tape);
    TensorT<T> weights = softmax(add(std::move(logits), mask, tape), 1, tape);
    heads.push_back(matmul(std::move(weights), std::move(vh), tape));
  }
  return project(concat_cols(std::move(heads), tape), attn.w_o, block, "o_proj", tape);
}

// ReLU(z) ⊙ Act(W_gate x) ⊙ (W_up x) pushed through W_down, no residual
template <typename T>
TensorT<T> gated_mlp_core(const EncoderBlockT<T>& block, const GatedMlpT<T>& mlp,
                          Activation act, TensorT<T> h, TapePtr<T> tape) {
  if (h.shape().back() != mlp.w_gate.dim(1))
    throw ContractError("gated mlp input dim " + shape_str(h.shape()) + " does not match " +
                        shape_str(mlp.w_gate.shape()));
  if (mlp.z && mlp.z->numel() != mlp.width())
    throw ContractError("slimming gate length " + std::to_string(mlp.z->numel()) +
                        " does not match mlp width " + std::to_string(mlp.width()));
  TensorT<T> gate = project(h, mlp.w_gate, block, "gate_proj", tape);
  TensorT<T> up = project(h, mlp.w_up, block, "up_proj", tape);
  TensorT<T> a = act == Activation::silu  ? silu(std::move(gate), tape)
                 : act == Activation::gelu ? gelu(std::move(gate), tape)
                                           : relu(std::move(gate), tape);
  TensorT<T> t = mul(std::move(a), std::move(up), tape);
  if (mlp.z) t = mul_rowvec(std::move(t), relu(*mlp.z, tape), tape);
  return project(std::move(t), mlp.w_down, block, "down_proj", tape);
}

}  // namespace detail

// Standalone Eq. 6 / Eq. 7 form with its own residual: x + core(x). The
// encoder block instead adds the core of a normed stream onto the raw stream.
template <typename T>
TensorT<T> gated_mlp_forward(const GatedMlpT<T>& mlp, Activation act, TensorT<T> x, TapePtr<T> tape) {
  EncoderBlockT<T> no_loras;
  return add(detail::gated_mlp_core(no_loras, mlp, act, x, tape), x, tape);
}

// Runs the block stack over already-embedded tokens.
template <typename T>
TensorT<T> forward_blocks(const EncoderModelT<T>& m, TensorT<T> x, TapePtr<T> tape,
                          ForwardTraceT<T>* trace = nullptr) {
  if (trace) trace->block_stream.push_back(x);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& block = m.blocks[l];
    if (block.attn) {
      TensorT<T> before = x;
      TensorT<T> normed = rms_norm(x, block.attn->norm, T(1e-6), tape);
      x = add(x, detail::attention_core(block, m.config, std::move(normed), tape), tape);
      if (trace) trace->entries.push_back({Sublayer::attn, l, before, x});
    }
    if (block.mlp) {
      TensorT<T> before = x;
      TensorT<T> normed = rms_norm(x, block.mlp->norm, T(1e-6), tape);
      x = add(x, detail::gated_mlp_core(block, *block.mlp, m.config.activation, std::move(normed), tape),
              tape);
      if (trace) trace->entries.push_back({Sublayer::mlp, l, before, x});
    }
    if (trace) trace->block_stream.push_back(x);
  }
  return x;
}

template <typename T>
TensorT<T> embed_tokens(const EncoderModelT<T>& m, const std::vector<std::size_t>& ids_with_eos,
                        TapePtr<T> tape) {
  std::vector<std::size_t> positions(ids_with_eos.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  return add(gather_rows(m.tok_emb, ids_with_eos, tape), gather_rows(m.pos_emb, positions, tape), tape);
}

// Appends <eos>, runs the stack, pools, L2-normalizes. The returned embedding
// feeds cosine similarity directly.
template <typename T>
TensorT<T> encode(const EncoderModelT<T>& m, const std::vector<std::size_t>& token_ids,
                  TapePtr<T> tape, ForwardTraceT<T>* trace = nullptr) {
  if (token_ids.empty()) throw ContractError("encode: empty token sequence");
  if (token_ids.size() > m.config.max_seq_len)
    throw ContractError("encode: sequence length " + std::to_string(token_ids.size()) +
                        " exceeds max_seq_len " + std::to_string(m.config.max_seq_len));
  for (std::size_t id : token_ids)
    if (id >= m.config.vocab_size)
      throw ContractError("encode: unknown token id " + std::to_string(id));
  std::vector<std::size_t> ids = token_ids;
  ids.push_back(kEosId);
  TensorT<T> x = forward_blocks(m, embed_tokens(m, ids, tape), tape, trace);
  TensorT<T> pooled =
      m.config.pooling == Pooling::last_token ? take_row(x, x.dim(0) - 1, tape) : mean_rows(x, tape);
  return l2_normalize(std::move(pooled), tape);
}

// ---- LoRA ----

template <typename T>
void attach_lora(EncoderModelT<T>& m, const std::vector<std::string>& targets, std::size_t rank,
                 T alpha, std::uint64_t seed) {
  if (rank < 1) throw ContractError("attach_lora: rank must be >= 1");
  const std::size_t d = m.config.d_model;
  for (const auto& target : targets) {
    const auto& known = lora_target_names();
    if (std::find(known.begin(), known.end(), target) == known.end())
      throw ContractError("attach_lora: unknown target " + target);
  }
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& block = m.blocks[l];
    for (const auto& target : targets) {
      const bool is_attn = target == "q_proj" || target == "k_proj" || target == "v_proj" || target == "o_proj";
      if (is_attn && !block.attn) continue;
      if (!is_attn && !block.mlp) continue;
      if (block.loras.count(target))
        throw ContractError("attach_lora: target " + target + " already attached at layer " +
                            std::to_string(l));
      std::size_t in = d, out = d;
      if (target == "gate_proj" || target == "up_proj") out = block.mlp->width();
      if (target == "down_proj") {
        in = block.mlp->width();
        out = d;
      }
      LoraAdapterT<T> lora;
      lora.rank = rank;
      lora.alpha = alpha;
      lora.A = init_weight<T>({rank, in}, seed, "blocks." + std::to_string(l) + ".lora." + target + ".A");
      lora.B = TensorT<T>::zeros({out, rank});
      block.loras.emplace(target, std::move(lora));
    }
  }
}

// Folds (alpha/r) * B * A into the base weights and removes the adapters.
template <typename T>
void merge_lora(EncoderModelT<T>& m) {
  for (auto& block : m.blocks) {
    for (auto& [target, lora] : block.loras) {
      TensorT<T>* w = nullptr;
      if (target == "q_proj") w = &block.attn->w_q;
      else if (target == "k_proj") w = &block.attn->w_k;
      else if (target == "v_proj") w = &block.attn->w_v;
      else if (target == "o_proj") w = &block.attn->w_o;
      else if (target == "gate_proj") w = &block.mlp->w_gate;
      else if (target == "up_proj") w = &block.mlp->w_up;
      else if (target == "down_proj") w = &block.mlp->w_down;
      TensorT<T> delta = matmul(lora.B, lora.A, nullptr);
      const T s = lora.alpha / static_cast<T>(lora.rank);
      for (std::size_t i = 0; i < w->numel(); ++i) w->at(i) += s * delta.at(i);
    }
    block.loras.clear();
  }
}

}  // namespace effir
