#include "effir/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <unordered_set>
#include <utility>

#include <json.hpp>

#include "effir/losses.hpp"
#include "effir/optimizer.hpp"

namespace effir {

namespace {

// Id layout: [0] <eos> | [kw0, kw0+n_keywords) keywords | doc fillers |
// query fillers. Query fillers never appear in docs, so query/doc token
// overlap counts keywords only.
struct VocabSplit {
  std::size_t n_keywords = 0;
  std::size_t kw0 = 1;
  std::size_t doc0 = 0, n_doc_fillers = 0;
  std::size_t query0 = 0, n_query_fillers = 0;
};

VocabSplit partition_vocab(const SyntheticTask& t) {
  if (t.corpus_size < 2) throw ContractError("generate_synthetic: need at least 2 docs");
  if (t.query_len < 1 || t.doc_len < 1)
    throw ContractError("generate_synthetic: query_len and doc_len must be >= 1");
  VocabSplit v;
  v.n_keywords = std::max<std::size_t>(
      2, std::min(t.corpus_size / 16, (t.vocab_size > 0 ? t.vocab_size - 1 : 0) / 3));
  if (t.vocab_size < 1 + v.n_keywords + 2)
    throw ContractError("generate_synthetic: vocab size " + std::to_string(t.vocab_size) +
                        " too small for " + std::to_string(v.n_keywords) +
                        " keywords plus filler ranges");
  const std::size_t fillers = t.vocab_size - 1 - v.n_keywords;
  v.doc0 = v.kw0 + v.n_keywords;
  v.n_doc_fillers = fillers / 2;
  v.query0 = v.doc0 + v.n_doc_fillers;
  v.n_query_fillers = fillers - v.n_doc_fillers;
  // worst case the query keyword owns ceil(corpus/nk) docs; the rest must
  // still cover K distinct negatives
  const std::size_t max_per_kw = (t.corpus_size + v.n_keywords - 1) / v.n_keywords;
  if (t.corpus_size - max_per_kw < t.negatives_per_query)
    throw ContractError("generate_synthetic: corpus of " + std::to_string(t.corpus_size) +
                        " cannot supply " + std::to_string(t.negatives_per_query) +
                        " keyword-disjoint negatives");
  return v;
}

std::vector<std::size_t> make_sequence(std::size_t keyword_id, std::size_t len,
                                       std::size_t filler0, std::size_t n_fillers, Rng& rng) {
  const std::size_t kw_pos = rng.uniform_int(len);
  std::vector<std::size_t> tokens(len);
  for (std::size_t j = 0; j < len; ++j)
    tokens[j] = j == kw_pos ? keyword_id : filler0 + rng.uniform_int(n_fillers);
  return tokens;
}

}  // namespace

double keyword_overlap(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::unordered_set<std::size_t> sa(a.begin(), a.end());
  std::unordered_set<std::size_t> sb(b.begin(), b.end());
  std::size_t n = 0;
  for (std::size_t id : sa) n += sb.count(id);
  return static_cast<double>(n);
}

SyntheticDataset generate_synthetic(const SyntheticTask& task) {
  const VocabSplit v = partition_vocab(task);
  SyntheticDataset ds;
  ds.n_keywords = v.n_keywords;

  // doc i carries keyword i % nk, so every keyword is populated and qrels
  // are the arithmetic progression k, k+nk, ...
  Rng doc_rng(split_seed(task.seed, "synth/docs"));
  ds.eval.docs.reserve(task.corpus_size);
  for (std::size_t i = 0; i < task.corpus_size; ++i)
    ds.eval.docs.push_back(
        make_sequence(v.kw0 + i % v.n_keywords, task.doc_len, v.doc0, v.n_doc_fillers, doc_rng));

  Rng train_rng(split_seed(task.seed, "synth/train"));
  ds.train.reserve(task.train_queries);
  for (std::size_t i = 0; i < task.train_queries; ++i) {
    const std::size_t k = i % v.n_keywords;
    RetrievalExample ex;
    ex.query = make_sequence(v.kw0 + k, task.query_len, v.query0, v.n_query_fillers, train_rng);
    const std::size_t n_with_k =
        task.corpus_size / v.n_keywords + (k < task.corpus_size % v.n_keywords ? 1 : 0);
    ex.positive = ds.eval.docs[k + v.n_keywords * train_rng.uniform_int(n_with_k)];
    std::unordered_set<std::size_t> used;
    while (ex.negatives.size() < task.negatives_per_query) {
      const std::size_t j = train_rng.uniform_int(task.corpus_size);
      if (j % v.n_keywords == k || used.count(j)) continue;
      used.insert(j);
      ex.negatives.push_back(ds.eval.docs[j]);
    }
    if (task.emit_teacher_scores) {
      ex.teacher_scores.push_back(static_cast<float>(keyword_overlap(ex.query, ex.positive)));
      for (const auto& neg : ex.negatives)
        ex.teacher_scores.push_back(static_cast<float>(keyword_overlap(ex.query, neg)));
    }
    ds.train.push_back(std::move(ex));
  }

  Rng eval_rng(split_seed(task.seed, "synth/eval"));
  ds.eval.queries.reserve(task.eval_queries);
  for (std::size_t i = 0; i < task.eval_queries; ++i) {
    const std::size_t k = i % v.n_keywords;
    ds.eval.queries.push_back(
        make_sequence(v.kw0 + k, task.query_len, v.query0, v.n_query_fillers, eval_rng));
    std::vector<std::size_t> rel;
    for (std::size_t j = k; j < task.corpus_size; j += v.n_keywords) rel.push_back(j);
    ds.eval.qrels.push_back(std::move(rel));
  }
  return ds;
}

// ---- dataset files ----
// JSONL with a "kind" discriminator per line: one meta record, then docs in
// id order, eval queries, train triplets. nlohmann keeps object keys sorted,
// so serialization is byte-stable and the round trip is bit-exact (token ids
// are integers; teacher scores survive float -> double -> shortest-repr).

void save_dataset(const SyntheticDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("save_dataset: cannot open " + path);
  nlohmann::json meta{{"kind", "meta"}, {"n_keywords", ds.n_keywords}};
  out << meta.dump() << "\n";
  for (std::size_t i = 0; i < ds.eval.docs.size(); ++i) {
    nlohmann::json rec{{"kind", "doc"}, {"id", i}, {"tokens", ds.eval.docs[i]}};
    out << rec.dump() << "\n";
  }
  for (std::size_t i = 0; i < ds.eval.queries.size(); ++i) {
    nlohmann::json rec{
        {"kind", "eval_query"}, {"tokens", ds.eval.queries[i]}, {"qrels", ds.eval.qrels[i]}};
    out << rec.dump() << "\n";
  }
  for (const auto& ex : ds.train) {
    nlohmann::json rec{{"kind", "triplet"},
                       {"query", ex.query},
                       {"positive", ex.positive},
                       {"negatives", ex.negatives}};
    if (!ex.teacher_scores.empty()) rec["teacher_scores"] = ex.teacher_scores;
    out << rec.dump() << "\n";
  }
  if (!out) throw CheckpointError("save_dataset: write failed on " + path);
}

SyntheticDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("load_dataset: cannot open " + path);
  SyntheticDataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError("load_dataset: " + path + ":" + std::to_string(lineno) + ": " +
                            e.what());
    }
    const std::string kind = rec.value("kind", "");
    if (kind == "meta") {
      ds.n_keywords = rec.at("n_keywords").get<std::size_t>();
    } else if (kind == "doc") {
      const std::size_t id = rec.at("id").get<std::size_t>();
      if (id != ds.eval.docs.size())
        throw CheckpointError("load_dataset: " + path + ":" + std::to_string(lineno) +
                              ": doc ids must be contiguous from 0");
      ds.eval.docs.push_back(rec.at("tokens").get<std::vector<std::size_t>>());
    } else if (kind == "eval_query") {
      ds.eval.queries.push_back(rec.at("tokens").get<std::vector<std::size_t>>());
      ds.eval.qrels.push_back(rec.at("qrels").get<std::vector<std::size_t>>());
    } else if (kind == "triplet") {
      RetrievalExample ex;
      ex.query = rec.at("query").get<std::vector<std::size_t>>();
      ex.positive = rec.at("positive").get<std::vector<std::size_t>>();
      ex.negatives = rec.at("negatives").get<std::vector<std::vector<std::size_t>>>();
      if (rec.contains("teacher_scores"))
        ex.teacher_scores = rec.at("teacher_scores").get<std::vector<float>>();
      ds.train.push_back(std::move(ex));
    } else {
      throw CheckpointError("load_dataset: " + path + ":" + std::to_string(lineno) +
                            ": unknown record kind '" + kind + "'");
    }
  }
  return ds;
}

// ---- training loop ----

TrainResult train(EncoderModel& model, const std::vector<RetrievalExample>& dataset,
                  const TrainConfig& config) {
  if (dataset.empty()) throw ContractError("train: empty dataset");
  if (!(config.tau > 0.0f)) throw ConfigError("train: tau must be positive");
  // lr 0 is the documented degenerate no-op step; only negative rates are
  // rejected
  if (config.lr < 0.0f || !std::isfinite(config.lr))
    throw ConfigError("train: invalid learning rate");
  if (config.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");

  if (config.use_lora) {
    bool attached = false;
    for (const auto& b : model.blocks) attached = attached || !b.loras.empty();
    if (!attached)
      attach_lora(model, lora_target_names(), config.lora_rank, config.lora_alpha, config.seed);
  }

  NamedParams<float> all = collect_params(model);
  std::vector<Tensor> selected;
  for (auto& [name, t] : all) {
    const bool is_adapter = name.find(".lora.") != std::string::npos;
    const bool is_gate = name.ends_with("mlp.z");
    if (config.use_lora ? is_adapter : !is_gate) selected.push_back(t);
  }
  if (selected.empty()) throw ContractError("train: no trainable parameters selected");
  // only the selected set carries grads, so everything else stays bitwise
  // untouched by construction
  for (auto& t : selected) t.set_requires_grad(true);

  AdamConfig<float> acfg;
  acfg.lr = config.lr;
  acfg.warmup_steps = config.warmup_steps;
  Adam opt(selected, acfg);

  TrainResult result;
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng(split_seed(config.seed, "train/shuffle/" + std::to_string(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      Tape tape;
      std::vector<Tensor> q_embs, pos_embs;
      std::vector<std::vector<Tensor>> neg_embs;
      for (std::size_t b = start; b < stop; ++b) {
        const RetrievalExample& ex = dataset[order[b]];
        q_embs.push_back(encode(model, ex.query, &tape));
        pos_embs.push_back(encode(model, ex.positive, &tape));
        std::vector<Tensor> negs;
        negs.reserve(ex.negatives.size());
        for (const auto& n : ex.negatives) negs.push_back(encode(model, n, &tape));
        neg_embs.push_back(std::move(negs));
      }
      Tensor loss =
          infonce_loss(q_embs, pos_embs, neg_embs, config.use_in_batch_negatives, config.tau, &tape);
      StepLoss sl;
      sl.infonce = loss.item();

      // distillation covers the batch rows that carry teacher scores; the
      // recorded value is the raw KL, the weight only enters the total
      std::vector<Tensor> student_rows;
      std::vector<float> teacher_flat;
      if (config.distill_weight != 0.0f) {
        for (std::size_t b = start; b < stop; ++b) {
          const RetrievalExample& ex = dataset[order[b]];
          if (ex.teacher_scores.empty()) continue;
          if (ex.teacher_scores.size() != 1 + ex.negatives.size())
            throw ContractError("train: teacher scores per example must cover the positive and " +
                                std::to_string(ex.negatives.size()) + " negatives");
          const std::size_t i = b - start;
          std::vector<Tensor> row;
          row.push_back(dot(q_embs[i], pos_embs[i], &tape));
          for (auto& n : neg_embs[i]) row.push_back(dot(q_embs[i], n, &tape));
          student_rows.push_back(stack_scalars(std::move(row), &tape));
          teacher_flat.insert(teacher_flat.end(), ex.teacher_scores.begin(),
                              ex.teacher_scores.end());
        }
      }
      if (!student_rows.empty()) {
        const std::size_t rows = student_rows.size();
        Tensor teacher = Tensor::from({rows, teacher_flat.size() / rows}, teacher_flat);
        Tensor kl =
            distill_kl(stack_rows(std::move(student_rows), &tape), teacher, config.tau, &tape);
        sl.distill = kl.item();
        loss = add(std::move(loss), scale(std::move(kl), config.distill_weight, &tape), &tape);
      }

      sl.total = loss.item();
      if (!std::isfinite(sl.total))
        throw NumericError("train: non-finite loss " + std::to_string(sl.total) + " at step " +
                           std::to_string(result.losses.size()));
      tape.backward(loss);
      opt.step();
      result.losses.push_back(sl);
    }
  }

  for (auto& [name, t] : all) t.set_requires_grad(false);
  result.steps = result.losses.size();
  return result;
}

}  // namespace effir
