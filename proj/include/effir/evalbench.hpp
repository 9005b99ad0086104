#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "effir/encoder.hpp"
#include "effir/retrieval.hpp"

namespace effir {

// Worker cap from EFFIRLAB_THREADS; unset, empty, or unparsable means 1.
std::size_t max_threads();

struct RunResult {
  struct Entry {
    std::size_t doc_id = 0;
    double score = 0.0;
  };
  std::vector<std::vector<Entry>> ranked;  // per query, scores non-increasing
  std::size_t cutoff = 0;                  // requested k; lists may be shorter
};

// Forward-only batch encode; parallelizes over sequences up to max_threads().
std::vector<Tensor> encode_all(const EncoderModel& model,
                               const std::vector<std::vector<std::size_t>>& seqs);

// Exact top-k by cosine over the full corpus, ties broken by doc id ascending.
RunResult brute_force_search(const EncoderModel& model, const EvalCorpus& corpus, std::size_t k);

// Graded qrels: doc id -> relevance, gain 2^rel - 1. Queries with no positive
// relevance are excluded from the mean; if that excludes everything, the call
// is a contract error.
using QrelMap = std::map<std::size_t, double>;
double ndcg_at_k(const RunResult& run, const std::vector<QrelMap>& qrels, std::size_t k = 10);
// binary convenience overload matching EvalCorpus::qrels
double ndcg_at_k(const RunResult& run, const std::vector<std::vector<std::size_t>>& qrels,
                 std::size_t k = 10);

struct BenchWorkload {
  std::size_t batch = 8;
  std::size_t query_len = 16;  // query-side mode: short sequences
  std::size_t doc_len = 64;    // doc-side mode: long sequences
  std::size_t reps = 20;
  std::size_t warmups = 3;
  std::uint64_t seed = 0;
};

// Everything except the *_median_sec timing fields is reproducible bitwise.
struct BenchReport {
  std::size_t model_params = 0;
  std::size_t baseline_params = 0;
  std::string baseline_name;
  double query_tokens_per_sec = 0.0;
  double doc_tokens_per_sec = 0.0;
  double query_speedup = 1.0;  // baseline median / model median
  double doc_speedup = 1.0;
  double query_median_sec = 0.0;
  double doc_median_sec = 0.0;
  double baseline_query_median_sec = 0.0;
  double baseline_doc_median_sec = 0.0;
  std::size_t batch = 0, query_len = 0, doc_len = 0, reps = 0, warmups = 0;
  std::size_t threads = 1;  // benchmarks always run the model single-threaded
};

// Median wall-clock seconds per repetition (one repetition = encoding the
// whole batch), after discarding warmups.
double median_encode_seconds(const EncoderModel& model, std::size_t batch, std::size_t len,
                             std::size_t reps, std::size_t warmups, std::uint64_t seed);

BenchReport throughput_bench(const EncoderModel& model, const EncoderModel& baseline,
                             const std::string& baseline_name, const BenchWorkload& wl);

// cos(query, doc) at every block boundary (embedding included), pooled and
// normalized per the model's pooling mode: one length-(blocks+1) trace per doc.
std::vector<std::vector<double>> layerwise_similarity(const EncoderModel& model,
                                                      const std::vector<std::size_t>& query,
                                                      const std::vector<std::vector<std::size_t>>& docs);

// mean pairwise cosine over distinct pairs; the paper's isotropy diagnostic
double isotropy(const std::vector<Tensor>& embeddings);

// ---- evaluation artifact files ----
// queries/corpus: "<id>\t<space-separated token ids>" per line, ids contiguous
// from 0. qrels: "<query id>\t<doc id>\t<relevance>" per line.
void save_eval_corpus(const EvalCorpus& c, const std::string& queries_path,
                      const std::string& corpus_path, const std::string& qrels_path);
EvalCorpus load_eval_corpus(const std::string& queries_path, const std::string& corpus_path,
                            const std::string& qrels_path);

// TREC layout: "<qid> Q0 <docid> <rank> <score> <tag>"
void save_trec_run(const RunResult& run, const std::string& path, const std::string& tag);
RunResult load_trec_run(const std::string& path);

}  // namespace effir
