#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "effir/encoder.hpp"

namespace effir {

// Synthetic shared-keyword retrieval task. The vocabulary splits into
// disjoint ranges: <eos>, keyword ids, doc filler ids, query filler ids.
// Every doc carries exactly one keyword; a query is relevant to precisely
// the docs carrying its keyword. Query fillers never occur in docs, so
// token overlap between a query and a doc is driven by the keyword alone.
struct SyntheticTask {
  std::size_t vocab_size = 512;
  std::size_t corpus_size = 2000;
  std::size_t query_len = 6;
  std::size_t doc_len = 12;
  std::size_t train_queries = 256;
  std::size_t eval_queries = 64;
  std::size_t negatives_per_query = 7;
  bool emit_teacher_scores = false;
  std::uint64_t seed = 0;
};

struct RetrievalExample {
  std::vector<std::size_t> query;
  std::vector<std::size_t> positive;
  std::vector<std::vector<std::size_t>> negatives;
  std::vector<float> teacher_scores;  // empty, or one score per {positive, negatives...}

  bool operator==(const RetrievalExample&) const = default;
};

struct EvalCorpus {
  std::vector<std::vector<std::size_t>> docs;  // doc id = index
  std::vector<std::vector<std::size_t>> queries;
  std::vector<std::vector<std::size_t>> qrels;  // per query: relevant doc ids, ascending

  bool operator==(const EvalCorpus&) const = default;
};

struct SyntheticDataset {
  std::vector<RetrievalExample> train;
  EvalCorpus eval;
  std::size_t n_keywords = 0;

  bool operator==(const SyntheticDataset&) const = default;
};

// |tokens(a) ∩ tokens(b)| as sets; the desk-scale teacher and eval oracle
double keyword_overlap(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b);

SyntheticDataset generate_synthetic(const SyntheticTask& task);

// JSONL: one record per line, kinds "doc", "eval_query", "triplet".
// Round-trips bit-exactly.
void save_dataset(const SyntheticDataset& ds, const std::string& path);
SyntheticDataset load_dataset(const std::string& path);

struct TrainConfig {
  float tau = 0.02f;
  float lr = 1e-4f;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  bool use_in_batch_negatives = true;
  float distill_weight = 1.0f;  // engages only when examples carry teacher scores
  bool use_lora = false;
  std::size_t lora_rank = 32;
  float lora_alpha = 64.0f;
  std::size_t warmup_steps = 10;
  std::uint64_t seed = 0;
};

struct StepLoss {
  float infonce = 0.0f;
  float distill = 0.0f;
  float total = 0.0f;
};

struct TrainResult {
  std::vector<StepLoss> losses;
  std::size_t steps = 0;
};

// Adam with linear warmup over the selected parameter set: LoRA adapters
// when config.use_lora, otherwise every parameter except slimming gates.
// Deterministic under a fixed seed. Non-finite loss aborts.
TrainResult train(EncoderModel& model, const std::vector<RetrievalExample>& dataset,
                  const TrainConfig& config);

}  // namespace effir
