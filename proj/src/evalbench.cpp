#include "effir/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace effir {

std::size_t max_threads() {
  const char* env = std::getenv("EFFIRLAB_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const unsigned long v = std::strtoul(env, &end, 10);
  if (end == env || *end != '\0' || v == 0) return 1;
  return static_cast<std::size_t>(v);
}

std::vector<Tensor> encode_all(const EncoderModel& model,
                               const std::vector<std::vector<std::size_t>>& seqs) {
  std::vector<Tensor> out(seqs.size());
  const std::size_t workers = std::min(max_threads(), seqs.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < seqs.size(); ++i) out[i] = encode(model, seqs[i], nullptr);
    return out;
  }
  // strided partition: each slot is written by exactly one worker, so the
  // result is identical to the serial order
  std::exception_ptr first_error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < seqs.size(); i += workers)
          out[i] = encode(model, seqs[i], nullptr);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

namespace {

double dot_d(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    s += static_cast<double>(a.at(i)) * static_cast<double>(b.at(i));
  return s;
}

double cosine_d(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return ab / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> pool_rows(const Tensor& h, Pooling mode) {
  const std::size_t rows = h.dim(0), cols = h.dim(1);
  std::vector<double> v(cols, 0.0);
  if (mode == Pooling::last_token) {
    for (std::size_t j = 0; j < cols; ++j) v[j] = h.at(rows - 1, j);
  } else {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) v[j] += h.at(i, j);
    for (std::size_t j = 0; j < cols; ++j) v[j] /= static_cast<double>(rows);
  }
  return v;
}

}  // namespace

RunResult brute_force_search(const EncoderModel& model, const EvalCorpus& corpus, std::size_t k) {
  if (k < 1) throw ContractError("brute_force_search: k must be >= 1");
  if (corpus.docs.empty()) throw ContractError("brute_force_search: empty document corpus");
  if (corpus.queries.empty()) throw ContractError("brute_force_search: no queries");
  const std::vector<Tensor> q_embs = encode_all(model, corpus.queries);
  const std::vector<Tensor> d_embs = encode_all(model, corpus.docs);
  const std::size_t depth = std::min(k, corpus.docs.size());
  RunResult run;
  run.cutoff = k;
  run.ranked.reserve(q_embs.size());
  for (const Tensor& q : q_embs) {
    std::vector<RunResult::Entry> entries(d_embs.size());
    for (std::size_t j = 0; j < d_embs.size(); ++j) entries[j] = {j, dot_d(q, d_embs[j])};
    std::partial_sort(entries.begin(), entries.begin() + depth, entries.end(),
                      [](const RunResult::Entry& a, const RunResult::Entry& b) {
                        if (a.score != b.score) return a.score > b.score;
                        return a.doc_id < b.doc_id;
                      });
    entries.resize(depth);
    run.ranked.push_back(std::move(entries));
  }
  return run;
}

double ndcg_at_k(const RunResult& run, const std::vector<QrelMap>& qrels, std::size_t k) {
  if (k < 1) throw ContractError("ndcg: k must be >= 1");
  if (run.ranked.size() != qrels.size())
    throw ContractError("ndcg: " + std::to_string(run.ranked.size()) + " ranked lists vs " +
                        std::to_string(qrels.size()) + " qrel entries");
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t q = 0; q < qrels.size(); ++q) {
    std::vector<double> rels;
    for (const auto& [doc, rel] : qrels[q])
      if (rel > 0.0) rels.push_back(rel);
    if (rels.empty()) continue;  // no positive relevance: excluded from the mean
    const auto& list = run.ranked[q];
    double dcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, list.size()); ++i) {
      const auto it = qrels[q].find(list[i].doc_id);
      if (it == qrels[q].end() || it->second <= 0.0) continue;
      dcg += (std::exp2(it->second) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
    }
    std::sort(rels.begin(), rels.end(), std::greater<double>());
    double idcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, rels.size()); ++i)
      idcg += (std::exp2(rels[i]) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
    sum += dcg / idcg;
    ++counted;
  }
  if (counted == 0) throw ContractError("ndcg: every query lacks qrels");
  return sum / static_cast<double>(counted);
}

double ndcg_at_k(const RunResult& run, const std::vector<std::vector<std::size_t>>& qrels,
                 std::size_t k) {
  std::vector<QrelMap> graded(qrels.size());
  for (std::size_t q = 0; q < qrels.size(); ++q)
    for (std::size_t doc : qrels[q]) graded[q][doc] = 1.0;
  return ndcg_at_k(run, graded, k);
}

namespace {

std::vector<std::vector<std::size_t>> bench_sequences(const EncoderConfig& cfg, std::size_t batch,
                                                      std::size_t len, std::uint64_t seed) {
  Rng rng(split_seed(seed, "bench/len/" + std::to_string(len)));
  std::vector<std::vector<std::size_t>> seqs(batch);
  for (auto& s : seqs) {
    s.resize(len);
    for (auto& id : s) id = 1 + rng.uniform_int(cfg.vocab_size - 1);
  }
  return seqs;
}

void check_bench_args(const EncoderModel& model, std::size_t batch, std::size_t len,
                      std::size_t reps, std::size_t warmups) {
  if (batch < 1 || len < 1 || reps < 1 || warmups < 1)
    throw ContractError("bench: batch, length, reps, and warmups must all be >= 1");
  if (len > model.config.max_seq_len)
    throw ContractError("bench: sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                        std::to_string(model.config.max_seq_len));
}

double timed_batch(const EncoderModel& model, const std::vector<std::vector<std::size_t>>& seqs) {
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& s : seqs) encode(model, s, nullptr);
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count();
}

double median_of(std::vector<double> times) {
  std::sort(times.begin(), times.end());
  const std::size_t mid = times.size() / 2;
  return times.size() % 2 == 1 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
}

// Alternating repetitions so clock-speed drift over the measurement window
// hits both models equally; otherwise speedup ratios pick up a systematic
// slot-order bias and reciprocal consistency breaks.
std::pair<double, double> interleaved_medians(const EncoderModel& model,
                                              const EncoderModel& baseline, std::size_t batch,
                                              std::size_t len, std::size_t reps,
                                              std::size_t warmups, std::uint64_t seed) {
  check_bench_args(model, batch, len, reps, warmups);
  check_bench_args(baseline, batch, len, reps, warmups);
  const auto seqs = bench_sequences(model.config, batch, len, seed);
  for (std::size_t w = 0; w < warmups; ++w) {
    timed_batch(model, seqs);
    timed_batch(baseline, seqs);
  }
  std::vector<double> tm(reps), tb(reps);
  for (std::size_t r = 0; r < reps; ++r) {
    tm[r] = timed_batch(model, seqs);
    tb[r] = timed_batch(baseline, seqs);
  }
  return {median_of(std::move(tm)), median_of(std::move(tb))};
}

}  // namespace

double median_encode_seconds(const EncoderModel& model, std::size_t batch, std::size_t len,
                             std::size_t reps, std::size_t warmups, std::uint64_t seed) {
  check_bench_args(model, batch, len, reps, warmups);
  const auto seqs = bench_sequences(model.config, batch, len, seed);
  for (std::size_t w = 0; w < warmups; ++w) timed_batch(model, seqs);
  std::vector<double> times(reps);
  for (std::size_t r = 0; r < reps; ++r) times[r] = timed_batch(model, seqs);
  return median_of(std::move(times));
}

BenchReport throughput_bench(const EncoderModel& model, const EncoderModel& baseline,
                             const std::string& baseline_name, const BenchWorkload& wl) {
  BenchReport rep;
  rep.model_params = count_params(model);
  rep.baseline_params = count_params(baseline);
  rep.baseline_name = baseline_name;
  rep.batch = wl.batch;
  rep.query_len = wl.query_len;
  rep.doc_len = wl.doc_len;
  rep.reps = wl.reps;
  rep.warmups = wl.warmups;
  rep.threads = 1;
  std::tie(rep.query_median_sec, rep.baseline_query_median_sec) =
      interleaved_medians(model, baseline, wl.batch, wl.query_len, wl.reps, wl.warmups, wl.seed);
  std::tie(rep.doc_median_sec, rep.baseline_doc_median_sec) =
      interleaved_medians(model, baseline, wl.batch, wl.doc_len, wl.reps, wl.warmups, wl.seed);
  rep.query_tokens_per_sec = static_cast<double>(wl.batch * wl.query_len) / rep.query_median_sec;
  rep.doc_tokens_per_sec = static_cast<double>(wl.batch * wl.doc_len) / rep.doc_median_sec;
  rep.query_speedup = rep.baseline_query_median_sec / rep.query_median_sec;
  rep.doc_speedup = rep.baseline_doc_median_sec / rep.doc_median_sec;
  return rep;
}

std::vector<std::vector<double>> layerwise_similarity(
    const EncoderModel& model, const std::vector<std::size_t>& query,
    const std::vector<std::vector<std::size_t>>& docs) {
  if (docs.empty()) throw ContractError("layerwise_similarity: need at least one doc");
  ForwardTrace q_trace;
  encode(model, query, nullptr, &q_trace);
  std::vector<std::vector<double>> q_levels;
  q_levels.reserve(q_trace.block_stream.size());
  for (const Tensor& h : q_trace.block_stream)
    q_levels.push_back(pool_rows(h, model.config.pooling));
  std::vector<std::vector<double>> traces;
  traces.reserve(docs.size());
  for (const auto& doc : docs) {
    ForwardTrace d_trace;
    encode(model, doc, nullptr, &d_trace);
    std::vector<double> trace(q_levels.size());
    for (std::size_t l = 0; l < q_levels.size(); ++l)
      trace[l] = cosine_d(q_levels[l], pool_rows(d_trace.block_stream[l], model.config.pooling));
    traces.push_back(std::move(trace));
  }
  return traces;
}

double isotropy(const std::vector<Tensor>& embeddings) {
  if (embeddings.size() < 2) throw ContractError("isotropy: need at least two embeddings");
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    for (std::size_t j = i + 1; j < embeddings.size(); ++j) {
      std::vector<double> a(embeddings[i].data(), embeddings[i].data() + embeddings[i].numel());
      std::vector<double> b(embeddings[j].data(), embeddings[j].data() + embeddings[j].numel());
      sum += cosine_d(a, b);
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

// ---- evaluation artifact files ----

namespace {

void write_id_tokens(const std::string& path, const std::vector<std::vector<std::size_t>>& rows,
                     const char* what) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(std::string("save: cannot open ") + path);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << i << '\t';
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      if (j) out << ' ';
      out << rows[i][j];
    }
    out << '\n';
  }
  if (!out) throw CheckpointError(std::string("save: write failed for ") + what + " at " + path);
}

std::vector<std::vector<std::size_t>> read_id_tokens(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(std::string("load: cannot open ") + path);
  std::vector<std::vector<std::size_t>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t id = 0;
    if (!(ls >> id) || id != rows.size())
      throw CheckpointError(std::string("load: ") + what + " ids must be contiguous from 0 (" +
                            path + ":" + std::to_string(lineno) + ")");
    std::vector<std::size_t> tokens;
    std::size_t tok = 0;
    while (ls >> tok) tokens.push_back(tok);
    rows.push_back(std::move(tokens));
  }
  return rows;
}

}  // namespace

void save_eval_corpus(const EvalCorpus& c, const std::string& queries_path,
                      const std::string& corpus_path, const std::string& qrels_path) {
  write_id_tokens(queries_path, c.queries, "queries");
  write_id_tokens(corpus_path, c.docs, "corpus");
  std::ofstream out(qrels_path, std::ios::binary);
  if (!out) throw CheckpointError("save: cannot open " + qrels_path);
  for (std::size_t q = 0; q < c.qrels.size(); ++q)
    for (std::size_t doc : c.qrels[q]) out << q << '\t' << doc << '\t' << 1 << '\n';
  if (!out) throw CheckpointError("save: write failed for qrels at " + qrels_path);
}

EvalCorpus load_eval_corpus(const std::string& queries_path, const std::string& corpus_path,
                            const std::string& qrels_path) {
  EvalCorpus c;
  c.queries = read_id_tokens(queries_path, "queries");
  c.docs = read_id_tokens(corpus_path, "corpus");
  c.qrels.assign(c.queries.size(), {});
  std::ifstream in(qrels_path, std::ios::binary);
  if (!in) throw CheckpointError("load: cannot open " + qrels_path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t qid = 0, doc = 0;
    long rel = 0;
    if (!(ls >> qid >> doc >> rel) || qid >= c.queries.size() || doc >= c.docs.size())
      throw CheckpointError("load: bad qrel record at " + qrels_path + ":" +
                            std::to_string(lineno));
    if (rel > 0) c.qrels[qid].push_back(doc);
  }
  return c;
}

void save_trec_run(const RunResult& run, const std::string& path, const std::string& tag) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("save_trec_run: cannot open " + path);
  char score_buf[64];
  for (std::size_t q = 0; q < run.ranked.size(); ++q) {
    for (std::size_t r = 0; r < run.ranked[q].size(); ++r) {
      std::snprintf(score_buf, sizeof score_buf, "%.6f", run.ranked[q][r].score);
      out << q << " Q0 " << run.ranked[q][r].doc_id << ' ' << (r + 1) << ' ' << score_buf << ' '
          << tag << '\n';
    }
  }
  if (!out) throw CheckpointError("save_trec_run: write failed on " + path);
}

RunResult load_trec_run(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("load_trec_run: cannot open " + path);
  RunResult run;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t qid = 0, doc = 0, rank = 0;
    std::string iter, tag;
    double score = 0.0;
    if (!(ls >> qid >> iter >> doc >> rank >> score >> tag))
      throw CheckpointError("load_trec_run: bad record at " + path + ":" +
                            std::to_string(lineno));
    if (qid >= run.ranked.size()) run.ranked.resize(qid + 1);
    run.ranked[qid].push_back({doc, score});
    run.cutoff = std::max(run.cutoff, rank);
  }
  return run;
}

}  // namespace effir
