// effirlab: one binary driving the pipeline
//   profile -> drop -> slim -> train -> eval -> bench
// plus `report` for the full redundancy grid. Configuration comes from a JSON
// file; flags override it. Exit codes: 0 ok, 1 usage/config, 2 runtime.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "effir/checkpoint.hpp"
#include "effir/encoder.hpp"
#include "effir/errors.hpp"
#include "effir/evalbench.hpp"
#include "effir/experiment.hpp"
#include "effir/redundancy.hpp"
#include "effir/retrieval.hpp"
#include "effir/rng.hpp"
#include "effir/slimming.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace effir;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr std::size_t kEvalCutoff = 10;

std::string hex16(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- enum spellings ----

DropMode mode_from(const std::string& s) {
  if (s == "attn" || s == "attn_only") return DropMode::attn_only;
  if (s == "mlp" || s == "mlp_only") return DropMode::mlp_only;
  if (s == "combined") return DropMode::combined;
  if (s == "block") return DropMode::block;
  throw ConfigError("unknown drop mode '" + s + "' (expected attn|mlp|combined|block)");
}

const char* mode_name(DropMode m) {
  switch (m) {
    case DropMode::attn_only: return "attn_only";
    case DropMode::mlp_only: return "mlp_only";
    case DropMode::combined: return "combined";
    case DropMode::block: return "block";
  }
  return "?";
}

Pooling pooling_from(const std::string& s) {
  if (s == "last_token") return Pooling::last_token;
  if (s == "mean") return Pooling::mean;
  throw ConfigError("unknown pooling '" + s + "' (expected last_token|mean)");
}

Activation activation_from(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + s + "' (expected silu|gelu|relu)");
}

const char* pooling_name(Pooling p) { return p == Pooling::last_token ? "last_token" : "mean"; }

const char* activation_name(Activation a) {
  return a == Activation::silu ? "silu" : a == Activation::gelu ? "gelu" : "relu";
}

// ---- strict JSON config ----

void check_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError(std::string("config: unknown key '") + item.key() + "' in " + where);
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad value for '") + key + "'");
  }
}

void read_enum(const json& j, const char* key, std::string& out) { read_field(j, key, out); }

struct CliConfig {
  std::uint64_t seed = 0;
  std::vector<std::string> stages;  // optional declared order, validated only
  EncoderConfig encoder = desk_encoder();
  SyntheticTask task = desk_task(0);
  TrainConfig train = desk_train(0);
  SlimConfig slim;
  struct {
    std::size_t samples = 64;
    std::size_t len = 12;
    std::string source = "task_corpus";
  } calib;
  BenchWorkload bench;
  std::string bench_baseline;         // checkpoint dir; empty = self-baseline
  std::string eval_scorer = "model";  // model | overlap
  struct {
    std::vector<std::size_t> ks = {0, 2, 4};
    std::vector<std::string> modes = {"attn", "mlp", "block"};
    bool include_retrained = false;
    bool include_bench = false;  // speedup columns break bitwise re-runs
    std::size_t ndcg_k = 10;
  } experiment;
};

const std::vector<std::string>& canonical_stages() {
  static const std::vector<std::string> order = {"profile", "drop", "slim",
                                                 "train",   "eval", "bench"};
  return order;
}

void validate_stages(const std::vector<std::string>& stages) {
  const auto& order = canonical_stages();
  std::size_t cursor = 0;
  for (const auto& s : stages) {
    std::size_t rank = order.size();
    for (std::size_t i = 0; i < order.size(); ++i)
      if (order[i] == s) rank = i;
    if (rank == order.size()) throw ConfigError("config: unknown stage '" + s + "'");
    if (rank < cursor)
      throw ConfigError("config: stage '" + s + "' out of order (expected " +
                        "profile -> drop -> slim -> train -> eval -> bench)");
    cursor = rank + 1;  // each stage at most once, in pipeline order
  }
}

void apply_config(const json& j, CliConfig& c) {
  check_keys(j, "top level",
             {"seed", "stages", "encoder", "task", "train", "slim", "calib", "bench", "eval",
              "experiment"});
  read_field(j, "seed", c.seed);
  read_field(j, "stages", c.stages);
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    check_keys(e, "encoder",
               {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "pooling",
                "activation"});
    read_field(e, "vocab_size", c.encoder.vocab_size);
    read_field(e, "d_model", c.encoder.d_model);
    read_field(e, "n_layers", c.encoder.n_layers);
    read_field(e, "n_heads", c.encoder.n_heads);
    read_field(e, "d_ff", c.encoder.d_ff);
    read_field(e, "max_seq_len", c.encoder.max_seq_len);
    std::string s;
    read_enum(e, "pooling", s);
    if (!s.empty()) c.encoder.pooling = pooling_from(s);
    s.clear();
    read_enum(e, "activation", s);
    if (!s.empty()) c.encoder.activation = activation_from(s);
  }
  if (j.contains("task")) {
    const json& t = j.at("task");
    check_keys(t, "task",
               {"vocab_size", "corpus_size", "query_len", "doc_len", "train_queries",
                "eval_queries", "negatives_per_query", "emit_teacher_scores"});
    read_field(t, "vocab_size", c.task.vocab_size);
    read_field(t, "corpus_size", c.task.corpus_size);
    read_field(t, "query_len", c.task.query_len);
    read_field(t, "doc_len", c.task.doc_len);
    read_field(t, "train_queries", c.task.train_queries);
    read_field(t, "eval_queries", c.task.eval_queries);
    read_field(t, "negatives_per_query", c.task.negatives_per_query);
    read_field(t, "emit_teacher_scores", c.task.emit_teacher_scores);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train",
               {"tau", "lr", "epochs", "batch_size", "use_in_batch_negatives", "distill_weight",
                "use_lora", "lora_rank", "lora_alpha", "warmup_steps"});
    read_field(t, "tau", c.train.tau);
    read_field(t, "lr", c.train.lr);
    read_field(t, "epochs", c.train.epochs);
    read_field(t, "batch_size", c.train.batch_size);
    read_field(t, "use_in_batch_negatives", c.train.use_in_batch_negatives);
    read_field(t, "distill_weight", c.train.distill_weight);
    read_field(t, "use_lora", c.train.use_lora);
    read_field(t, "lora_rank", c.train.lora_rank);
    read_field(t, "lora_alpha", c.train.lora_alpha);
    read_field(t, "warmup_steps", c.train.warmup_steps);
  }
  if (j.contains("slim")) {
    const json& s = j.at("slim");
    check_keys(s, "slim", {"lambda", "beta", "steps", "prune_ratio", "lr"});
    read_field(s, "lambda", c.slim.lambda);
    read_field(s, "beta", c.slim.beta);
    read_field(s, "steps", c.slim.steps);
    read_field(s, "prune_ratio", c.slim.prune_ratio);
    read_field(s, "lr", c.slim.lr);
  }
  if (j.contains("calib")) {
    const json& k = j.at("calib");
    check_keys(k, "calib", {"samples", "len", "source"});
    read_field(k, "samples", c.calib.samples);
    read_field(k, "len", c.calib.len);
    read_field(k, "source", c.calib.source);
    if (c.calib.source != "task_corpus" && c.calib.source != "random_tokens")
      throw ConfigError("config: calib.source must be task_corpus|random_tokens");
  }
  if (j.contains("bench")) {
    const json& b = j.at("bench");
    check_keys(b, "bench", {"batch", "query_len", "doc_len", "reps", "warmups", "baseline"});
    read_field(b, "batch", c.bench.batch);
    read_field(b, "query_len", c.bench.query_len);
    read_field(b, "doc_len", c.bench.doc_len);
    read_field(b, "reps", c.bench.reps);
    read_field(b, "warmups", c.bench.warmups);
    read_field(b, "baseline", c.bench_baseline);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, "eval", {"scorer"});
    read_field(e, "scorer", c.eval_scorer);
    if (c.eval_scorer != "model" && c.eval_scorer != "overlap")
      throw ConfigError("config: eval.scorer must be model|overlap");
  }
  if (j.contains("experiment")) {
    const json& x = j.at("experiment");
    check_keys(x, "experiment", {"ks", "modes", "include_retrained", "include_bench", "ndcg_k"});
    read_field(x, "ks", c.experiment.ks);
    read_field(x, "modes", c.experiment.modes);
    read_field(x, "include_retrained", c.experiment.include_retrained);
    read_field(x, "include_bench", c.experiment.include_bench);
    read_field(x, "ndcg_k", c.experiment.ndcg_k);
    for (const auto& m : c.experiment.modes) mode_from(m);  // spelling check up front
  }
  validate_stages(c.stages);
}

json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file " + path + ": root must be an object");
  return j;
}

json resolved_json(const CliConfig& c) {
  return json{
      {"seed", c.seed},
      {"stages", c.stages},
      {"encoder",
       {{"vocab_size", c.encoder.vocab_size},
        {"d_model", c.encoder.d_model},
        {"n_layers", c.encoder.n_layers},
        {"n_heads", c.encoder.n_heads},
        {"d_ff", c.encoder.d_ff},
        {"max_seq_len", c.encoder.max_seq_len},
        {"pooling", pooling_name(c.encoder.pooling)},
        {"activation", activation_name(c.encoder.activation)}}},
      {"task",
       {{"vocab_size", c.task.vocab_size},
        {"corpus_size", c.task.corpus_size},
        {"query_len", c.task.query_len},
        {"doc_len", c.task.doc_len},
        {"train_queries", c.task.train_queries},
        {"eval_queries", c.task.eval_queries},
        {"negatives_per_query", c.task.negatives_per_query},
        {"emit_teacher_scores", c.task.emit_teacher_scores}}},
      {"train",
       {{"tau", c.train.tau},
        {"lr", c.train.lr},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"use_in_batch_negatives", c.train.use_in_batch_negatives},
        {"distill_weight", c.train.distill_weight},
        {"use_lora", c.train.use_lora},
        {"lora_rank", c.train.lora_rank},
        {"lora_alpha", c.train.lora_alpha},
        {"warmup_steps", c.train.warmup_steps}}},
      {"slim",
       {{"lambda", c.slim.lambda},
        {"beta", c.slim.beta},
        {"steps", c.slim.steps},
        {"prune_ratio", c.slim.prune_ratio},
        {"lr", c.slim.lr}}},
      {"calib",
       {{"samples", c.calib.samples}, {"len", c.calib.len}, {"source", c.calib.source}}},
      {"bench",
       {{"batch", c.bench.batch},
        {"query_len", c.bench.query_len},
        {"doc_len", c.bench.doc_len},
        {"reps", c.bench.reps},
        {"warmups", c.bench.warmups},
        {"baseline", c.bench_baseline}}},
      {"eval", {{"scorer", c.eval_scorer}}},
      {"experiment",
       {{"ks", c.experiment.ks},
        {"modes", c.experiment.modes},
        {"include_retrained", c.experiment.include_retrained},
        {"include_bench", c.experiment.include_bench},
        {"ndcg_k", c.experiment.ndcg_k}}},
  };
}

// ---- filesystem plumbing ----

// One writer per output directory; the lock file names its holder.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw CheckpointError("cannot create " + dir.string() + ": " + ec.message());
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST)
        throw CheckpointError("output directory " + dir.string() +
                              " is locked by another writer (remove " + path_.string() +
                              " if stale)");
      throw CheckpointError("cannot create lock file " + path_.string());
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) {
      // lock still holds; the pid note is best-effort
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;
  ~DirLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

void write_text(const fs::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out << body;
  out.flush();
  if (!out) throw CheckpointError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json_file(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw CheckpointError(std::string(what) + " " + path.string() + " is unreadable");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string(what) + " " + path.string() + ": " + e.what());
  }
}

// ---- shared stage inputs ----

SyntheticDataset make_data(const CliConfig& c) {
  SyntheticTask t = c.task;
  t.seed = c.seed;
  return generate_synthetic(t);
}

// Calibration follows the loaded model's config, not the config file: a
// shrunk or dropped checkpoint still profiles against its own vocab/seq caps.
CalibrationSet make_calib(const CliConfig& c, const EncoderConfig& enc) {
  const CalibSource src =
      c.calib.source == "random_tokens" ? CalibSource::random_tokens : CalibSource::task_corpus;
  return make_calibration(enc, c.calib.samples, c.calib.len, src, split_seed(c.seed, "calib"));
}

TrainConfig train_config(const CliConfig& c) {
  TrainConfig t = c.train;
  t.seed = c.seed;
  return t;
}

// ---- command context ----

struct Ctx {
  std::string command;
  CliConfig cfg;
  std::string hash;  // over resolved config + command + args
  fs::path out;
  std::string model_path;
  std::string report_path;
  bool k_attn_set = false, k_mlp_set = false;
  std::size_t k_attn = 0, k_mlp = 0;
  DropMode mode = DropMode::combined;
  std::string mode_str = "combined";
};

json base_artifact(const Ctx& ctx) {
  return json{{"config_hash", ctx.hash}, {"seed", ctx.cfg.seed}};
}

// ---- commands ----

json cmd_profile(const Ctx& ctx) {
  LoadedCheckpoint lc = load_checkpoint(ctx.model_path);
  const CalibrationSet calib = make_calib(ctx.cfg, lc.model.config);
  const ImportanceReport rep = score_sublayers(lc.model, calib);
  const DropOrderGrid grid = drop_order_grid(rep);

  json sublayers = json::array();
  const std::size_t L = rep.s_attn.size();
  for (std::size_t l = 0; l < L; ++l)
    if (rep.attn_present[l])
      sublayers.push_back({{"group", "attn"}, {"layer", l}, {"score", rep.s_attn[l]}});
  for (std::size_t l = 0; l < L; ++l)
    if (rep.mlp_present[l])
      sublayers.push_back({{"group", "mlp"}, {"layer", l}, {"score", rep.s_mlp[l]}});

  json report = base_artifact(ctx);
  report["aggregation"] = rep.aggregation;
  report["samples"] = rep.samples;
  report["skipped_positions"] = rep.skipped_positions;
  report["s_attn"] = rep.s_attn;
  report["s_mlp"] = rep.s_mlp;
  report["attn_present"] = rep.attn_present;
  report["mlp_present"] = rep.mlp_present;
  report["sublayers"] = sublayers;  // dropped sublayers score 0, excluded here
  report["drop_order"] = {{"attn", grid.attn}, {"mlp", grid.mlp}, {"n_layers", grid.n_layers}};
  report["model_fingerprint"] = lc.fingerprint;
  write_json(ctx.out / "importance.json", report);
  save_drop_order_svg(grid, (ctx.out / "drop_order.svg").string());

  return json{{"model", ctx.model_path},
              {"model_fingerprint", lc.fingerprint},
              {"sublayers", sublayers.size()}};
}

ImportanceReport report_from_json(const json& rj, const fs::path& path) {
  ImportanceReport rep;
  try {
    rep.s_attn = rj.at("s_attn").get<std::vector<double>>();
    rep.s_mlp = rj.at("s_mlp").get<std::vector<double>>();
    rep.attn_present = rj.at("attn_present").get<std::vector<bool>>();
    rep.mlp_present = rj.at("mlp_present").get<std::vector<bool>>();
    rep.samples = rj.value("samples", std::size_t{0});
    rep.skipped_positions = rj.value("skipped_positions", std::size_t{0});
    rep.aggregation = rj.value("aggregation", rep.aggregation);
  } catch (const json::exception& e) {
    throw CheckpointError("report " + path.string() + ": " + e.what());
  }
  if (rep.s_attn.size() != rep.s_mlp.size() || rep.s_attn.size() != rep.attn_present.size() ||
      rep.s_attn.size() != rep.mlp_present.size())
    throw CheckpointError("report " + path.string() + ": inconsistent layer counts");
  return rep;
}

json cmd_drop(const Ctx& ctx) {
  LoadedCheckpoint lc = load_checkpoint(ctx.model_path);
  const json rj = read_json_file(ctx.report_path, "report");
  const std::string recorded = rj.value("model_fingerprint", "");
  if (recorded != lc.fingerprint)
    throw CheckpointError("report " + ctx.report_path + " was profiled against fingerprint " +
                          (recorded.empty() ? "<missing>" : recorded) + ", model has " +
                          lc.fingerprint + "; re-run profile");
  const ImportanceReport rep = report_from_json(rj, ctx.report_path);
  if (rep.s_attn.size() != lc.model.blocks.size())
    throw CheckpointError("report covers " + std::to_string(rep.s_attn.size()) +
                          " layers, model has " + std::to_string(lc.model.blocks.size()));

  std::size_t present_attn = 0, present_mlp = 0;
  for (std::size_t l = 0; l < rep.s_attn.size(); ++l) {
    present_attn += rep.attn_present[l];
    present_mlp += rep.mlp_present[l];
  }

  // --k-attn / --k-mlp count sublayers to retain; unset means keep all.
  PruningPlan plan;
  if (ctx.mode == DropMode::block) {
    if (ctx.k_attn_set && ctx.k_mlp_set && ctx.k_attn != ctx.k_mlp)
      throw ConfigError("drop: mode block retains whole blocks, --k-attn and --k-mlp must agree");
    const std::size_t k = ctx.k_attn_set ? ctx.k_attn
                          : ctx.k_mlp_set ? ctx.k_mlp
                                          : rep.s_attn.size();
    plan = select_retained_blocks(rep, k);
  } else {
    std::size_t ka = ctx.k_attn_set ? ctx.k_attn : present_attn;
    std::size_t km = ctx.k_mlp_set ? ctx.k_mlp : present_mlp;
    if (ctx.mode == DropMode::attn_only) {
      if (ctx.k_mlp_set) throw ConfigError("drop: mode attn leaves MLPs alone, drop --k-mlp");
      km = present_mlp;
    }
    if (ctx.mode == DropMode::mlp_only) {
      if (ctx.k_attn_set) throw ConfigError("drop: mode mlp leaves attention alone, drop --k-attn");
      ka = present_attn;
    }
    plan = select_retained(rep, ka, km);
    plan.mode = ctx.mode;
  }

  EncoderModel pruned = clone_model(lc.model);
  const std::size_t params_before = count_params(pruned);
  apply_drop(pruned, plan);
  const std::size_t params_after = count_params(pruned);

  std::vector<std::size_t> dropped_attn, dropped_mlp;
  const auto in = [](const std::vector<std::size_t>& v, std::size_t l) {
    return std::find(v.begin(), v.end(), l) != v.end();
  };
  for (std::size_t l = 0; l < rep.s_attn.size(); ++l) {
    if (rep.attn_present[l] && !in(plan.t_attn, l)) dropped_attn.push_back(l);
    if (rep.mlp_present[l] && !in(plan.t_mlp, l)) dropped_mlp.push_back(l);
  }

  CheckpointExtras extras = lc.extras;
  extras.seed = ctx.cfg.seed;
  extras.pruning.k_attn = dropped_attn.size();
  extras.pruning.k_mlp = dropped_mlp.size();
  extras.pruning.mode = mode_name(plan.mode);
  save_checkpoint(pruned, ctx.out.string(), extras);

  json diff = base_artifact(ctx);
  diff["params_before"] = params_before;
  diff["params_after"] = params_after;
  diff["params_delta"] = params_before - params_after;
  diff["dropped_attn"] = dropped_attn;
  diff["dropped_mlp"] = dropped_mlp;
  diff["retained_attn"] = plan.t_attn;
  diff["retained_mlp"] = plan.t_mlp;
  diff["mode"] = mode_name(plan.mode);
  diff["model_fingerprint_in"] = lc.fingerprint;
  diff["model_fingerprint_out"] = model_fingerprint(pruned);
  write_json(ctx.out / "diff.json", diff);

  return json{{"model", ctx.model_path},
              {"report", ctx.report_path},
              {"params_before", params_before},
              {"params_after", params_after},
              {"dropped_attn", dropped_attn},
              {"dropped_mlp", dropped_mlp}};
}

json cmd_slim(const Ctx& ctx) {
  LoadedCheckpoint lc = load_checkpoint(ctx.model_path);
  if (lc.extras.slim_phase != "none")
    throw ContractError("slim: checkpoint is already slimmed (phase '" + lc.extras.slim_phase +
                        "'); train finishes the pipeline from here");
  const SyntheticDataset data = make_data(ctx.cfg);
  if (data.train.empty()) throw ConfigError("slim: config yields no training examples");

  EncoderModel model = std::move(lc.model);
  install_gates(model);
  const auto losses = slim_train(model, data.train, ctx.cfg.slim, train_config(ctx.cfg));
  const PruneMask mask = global_prune(model, ctx.cfg.slim.prune_ratio);

  std::size_t gates_total = 0;
  for (const auto& l : mask.layers) gates_total += l.size();

  CheckpointExtras extras = lc.extras;
  extras.seed = ctx.cfg.seed;
  extras.slim_phase = "masked";
  save_checkpoint(model, ctx.out.string(), extras);

  return json{{"model", ctx.model_path},
              {"steps", losses.size()},
              {"final_infonce", losses.back().infonce},
              {"final_surrogate", losses.back().surrogate},
              {"final_loss", losses.back().total},
              {"gates_zeroed", mask.zeros()},
              {"gates_total", gates_total}};
}

json cmd_train(const Ctx& ctx) {
  EncoderModel model;
  CheckpointExtras extras;
  if (!ctx.model_path.empty()) {
    LoadedCheckpoint lc = load_checkpoint(ctx.model_path);
    model = std::move(lc.model);
    extras = lc.extras;
  } else {
    model = init_encoder<float>(ctx.cfg.encoder, split_seed(ctx.cfg.seed, "model"));
  }
  const SyntheticDataset data = make_data(ctx.cfg);
  if (data.train.empty()) throw ConfigError("train: config yields no training examples");

  const TrainResult res = train(model, data.train, train_config(ctx.cfg));

  bool merged = false;
  for (const auto& b : model.blocks)
    if (!b.loras.empty()) {
      merge_lora(model);  // ship plain weights; also unblocks shrink below
      merged = true;
      break;
    }

  if (extras.slim_phase == "masked") {
    // The mask lives in the (binary, frozen) gates; materialize it.
    PruneMask mask;
    mask.layers.resize(model.blocks.size());
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
      const auto& b = model.blocks[l];
      if (!b.mlp || !b.mlp->z) continue;
      mask.layers[l].resize(b.mlp->z->numel());
      for (std::size_t i = 0; i < b.mlp->z->numel(); ++i)
        mask.layers[l][i] = b.mlp->z->at(i) != 0.0f;
    }
    shrink(model, mask);
    extras.slim_phase = "shrunk";
  }

  extras.seed = ctx.cfg.seed;
  save_checkpoint(model, ctx.out.string(), extras);

  return json{{"model", ctx.model_path.empty() ? json() : json(ctx.model_path)},
              {"steps", res.steps},
              {"final_loss", res.losses.back().total},
              {"merged_lora", merged},
              {"slim_phase", extras.slim_phase},
              {"params", count_params(model)}};
}

json cmd_eval(const Ctx& ctx) {
  const SyntheticDataset data = make_data(ctx.cfg);
  const EvalCorpus& corpus = data.eval;
  if (corpus.queries.empty()) throw ConfigError("eval: config yields no eval queries");

  RunResult run;
  std::string fingerprint;
  if (ctx.cfg.eval_scorer == "overlap") {
    // Oracle ranking by shared-token count; same tie-break as the encoder
    // path (score desc, doc id asc).
    run.cutoff = kEvalCutoff;
    run.ranked.resize(corpus.queries.size());
    for (std::size_t q = 0; q < corpus.queries.size(); ++q) {
      auto& entries = run.ranked[q];
      entries.resize(corpus.docs.size());
      for (std::size_t d = 0; d < corpus.docs.size(); ++d)
        entries[d] = {d, keyword_overlap(corpus.queries[q], corpus.docs[d])};
      std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.doc_id < b.doc_id;
      });
      if (entries.size() > kEvalCutoff) entries.resize(kEvalCutoff);
    }
  } else {
    LoadedCheckpoint lc = load_checkpoint(ctx.model_path);
    fingerprint = lc.fingerprint;
    run = brute_force_search(lc.model, corpus, kEvalCutoff);
  }
  const double nd = ndcg_at_k(run, corpus.qrels, kEvalCutoff);

  save_trec_run(run, (ctx.out / "run.trec").string(), "effirlab");
  json summary = base_artifact(ctx);
  summary["ndcg10"] = nd;
  summary["cutoff"] = kEvalCutoff;
  summary["queries"] = corpus.queries.size();
  summary["scorer"] = ctx.cfg.eval_scorer;
  summary["model_fingerprint"] = fingerprint.empty() ? json() : json(fingerprint);
  write_json(ctx.out / "eval.json", summary);

  return json{{"ndcg10", nd}, {"queries", corpus.queries.size()}, {"scorer", ctx.cfg.eval_scorer}};
}

json cmd_bench(const Ctx& ctx) {
  LoadedCheckpoint lc = load_checkpoint(ctx.model_path);
  EncoderModel baseline;
  std::string baseline_name;
  if (!ctx.cfg.bench_baseline.empty()) {
    LoadedCheckpoint lb = load_checkpoint(ctx.cfg.bench_baseline);
    baseline = std::move(lb.model);
    baseline_name = ctx.cfg.bench_baseline;
  } else {
    baseline = clone_model(lc.model);
    baseline_name = "self";
  }
  BenchWorkload wl = ctx.cfg.bench;
  wl.seed = ctx.cfg.seed;
  const BenchReport rep = throughput_bench(lc.model, baseline, baseline_name, wl);

  json out = base_artifact(ctx);
  out["model_params"] = rep.model_params;
  out["baseline_params"] = rep.baseline_params;
  out["baseline"] = rep.baseline_name;
  out["batch"] = rep.batch;
  out["query_len"] = rep.query_len;
  out["doc_len"] = rep.doc_len;
  out["reps"] = rep.reps;
  out["warmups"] = rep.warmups;
  out["threads"] = rep.threads;
  out["model_fingerprint"] = lc.fingerprint;
  // Wall-clock results live under "timing" so everything else stays
  // byte-comparable across runs.
  out["timing"] = {{"query_median_sec", rep.query_median_sec},
                   {"doc_median_sec", rep.doc_median_sec},
                   {"baseline_query_median_sec", rep.baseline_query_median_sec},
                   {"baseline_doc_median_sec", rep.baseline_doc_median_sec},
                   {"query_tokens_per_sec", rep.query_tokens_per_sec},
                   {"doc_tokens_per_sec", rep.doc_tokens_per_sec},
                   {"query_speedup", rep.query_speedup},
                   {"doc_speedup", rep.doc_speedup}};
  write_json(ctx.out / "bench.json", out);

  return json{{"model", ctx.model_path}, {"baseline", baseline_name}};
}

json cmd_report(const Ctx& ctx) {
  LoadedCheckpoint lc = load_checkpoint(ctx.model_path);
  const SyntheticDataset data = make_data(ctx.cfg);
  const CalibrationSet calib = make_calib(ctx.cfg, lc.model.config);

  ExperimentConfig ec;
  ec.ks = ctx.cfg.experiment.ks;
  ec.modes.clear();
  for (const auto& m : ctx.cfg.experiment.modes) ec.modes.push_back(mode_from(m));
  ec.ndcg_k = ctx.cfg.experiment.ndcg_k;
  ec.include_retrained = ctx.cfg.experiment.include_retrained;
  ec.retrain = train_config(ctx.cfg);
  ec.include_bench = ctx.cfg.experiment.include_bench;
  ec.workload = ctx.cfg.bench;
  ec.workload.seed = ctx.cfg.seed;
  ec.validate(lc.model.blocks.size());

  const RedundancyReport rr = redundancy_experiment(lc.model, data, calib, ec);

  json rows = json::array();
  for (const auto& row : rr.rows)
    rows.push_back({{"name", row.name},
                    {"mode", mode_name(row.mode)},
                    {"k", row.k},
                    {"retrained", row.retrained},
                    {"ndcg10", row.ndcg10},
                    {"params", row.params},
                    {"dropped_attn", row.dropped_attn},
                    {"dropped_mlp", row.dropped_mlp},
                    {"timing", {{"query_speedup", row.query_speedup},
                                {"doc_speedup", row.doc_speedup}}}});
  json grid = base_artifact(ctx);
  grid["rows"] = rows;
  grid["importance"] = {{"s_attn", rr.importance.s_attn},
                        {"s_mlp", rr.importance.s_mlp},
                        {"attn_present", rr.importance.attn_present},
                        {"mlp_present", rr.importance.mlp_present},
                        {"samples", rr.importance.samples}};
  grid["model_fingerprint"] = lc.fingerprint;
  grid["bench_enabled"] = ec.include_bench;
  write_json(ctx.out / "grid.json", grid);
  write_text(ctx.out / "grid.txt", render_grid(rr));
  save_drop_order_svg(rr.drop_order, (ctx.out / "drop_order.svg").string());

  return json{{"model", ctx.model_path},
              {"rows", rr.rows.size()},
              {"bench_enabled", ec.include_bench}};
}

// ---- wiring ----

struct Args {
  std::string config_path, out, model, report;
  std::string mode = "combined", pooling = "last_token";
  std::uint64_t seed = 0;
  std::size_t k_attn = 0, k_mlp = 0, epochs = 1;
  double ratio = 0.30, tau = 0.1, lr = 3e-3;
};

void add_common(CLI::App* s, Args& a, bool model_required) {
  s->add_option("--config", a.config_path, "JSON config file; flags override its values")
      ->check(CLI::ExistingFile);
  s->add_option("--seed", a.seed, "root seed; every stage splits its randomness from it");
  s->add_option("--out", a.out, "output directory for this stage's artifacts")->required();
  auto* m = s->add_option("--model", a.model, "input checkpoint directory");
  if (model_required) m->required();
  s->add_option("--tau", a.tau, "InfoNCE temperature override");
  s->add_option("--lr", a.lr, "learning-rate override");
  s->add_option("--epochs", a.epochs, "training-epochs override");
  s->add_option("--ratio", a.ratio, "global prune-ratio override");
  s->add_option("--pooling", a.pooling, "pooling override: last_token|mean");
}

int dispatch(const Ctx& ctx, json& extras) {
  if (ctx.command == "profile") extras = cmd_profile(ctx);
  else if (ctx.command == "drop") extras = cmd_drop(ctx);
  else if (ctx.command == "slim") extras = cmd_slim(ctx);
  else if (ctx.command == "train") extras = cmd_train(ctx);
  else if (ctx.command == "eval") extras = cmd_eval(ctx);
  else if (ctx.command == "bench") extras = cmd_bench(ctx);
  else if (ctx.command == "report") extras = cmd_report(ctx);
  else return 1;
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"effirlab: depth-then-width structured pruning for tiny dense retrievers"};
  app.require_subcommand(1);
  app.footer(
      "Pipeline order: profile -> drop -> slim -> train -> eval -> bench.\n"
      "EFFIRLAB_THREADS caps intra-command parallelism.");

  Args a;
  CLI::App* profile = app.add_subcommand("profile", "score sublayer importance on calibration data");
  add_common(profile, a, true);
  CLI::App* drop = app.add_subcommand("drop", "remove the lowest-importance sublayers");
  add_common(drop, a, true);
  drop->add_option("report", a.report, "importance report written by profile")
      ->required()
      ->check(CLI::ExistingFile);
  drop->add_option("--k-attn", a.k_attn, "attention sublayers to retain (default: all present)");
  drop->add_option("--k-mlp", a.k_mlp, "MLP sublayers to retain (default: all present)");
  drop->add_option("--mode", a.mode, "attn|mlp|combined|block");
  CLI::App* slim = app.add_subcommand("slim", "learn and freeze a width mask over MLP neurons");
  add_common(slim, a, true);
  CLI::App* train = app.add_subcommand("train", "contrastive training; shrinks masked checkpoints");
  add_common(train, a, false);
  CLI::App* eval = app.add_subcommand("eval", "rank the eval corpus, write TREC run + nDCG@10");
  add_common(eval, a, false);
  CLI::App* bench = app.add_subcommand("bench", "throughput vs a baseline checkpoint (or self)");
  add_common(bench, a, true);
  CLI::App* report = app.add_subcommand("report", "full redundancy grid: drop variants vs quality");
  add_common(report, a, true);
  (void)profile;
  (void)slim;
  (void)train;
  (void)eval;
  (void)bench;
  (void)report;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  const auto has = [&](const char* name) { return sub->count(name) > 0; };

  Ctx ctx;
  try {
    ctx.command = sub->get_name();
    if (!a.config_path.empty()) apply_config(load_config_file(a.config_path), ctx.cfg);
    if (has("--seed")) ctx.cfg.seed = a.seed;
    if (has("--tau")) ctx.cfg.train.tau = static_cast<float>(a.tau);
    if (has("--lr")) ctx.cfg.train.lr = static_cast<float>(a.lr);
    if (has("--epochs")) ctx.cfg.train.epochs = a.epochs;
    if (has("--ratio")) ctx.cfg.slim.prune_ratio = static_cast<float>(a.ratio);
    if (has("--pooling")) ctx.cfg.encoder.pooling = pooling_from(a.pooling);
    ctx.cfg.encoder.validate();
    ctx.cfg.slim.validate();
    if (ctx.command == "train" && ctx.cfg.train.epochs < 1)
      throw ConfigError("train: epochs must be >= 1");
    if (ctx.command == "slim" && ctx.cfg.slim.steps < 1)
      throw ConfigError("slim: steps must be >= 1");

    ctx.out = a.out;
    ctx.model_path = a.model;
    ctx.report_path = a.report;
    if (ctx.command == "drop") {
      ctx.k_attn_set = has("--k-attn");
      ctx.k_mlp_set = has("--k-mlp");
      ctx.k_attn = a.k_attn;
      ctx.k_mlp = a.k_mlp;
      ctx.mode_str = a.mode;
      ctx.mode = mode_from(a.mode);
    }
    if (ctx.command == "eval" && ctx.cfg.eval_scorer == "model" && ctx.model_path.empty())
      throw ConfigError("eval: --model is required for the model scorer");

    // Referenced paths must resolve before any work starts.
    if (!ctx.model_path.empty() && !fs::exists(ctx.model_path))
      throw ConfigError("model checkpoint " + ctx.model_path + " does not exist");
    if (!ctx.cfg.bench_baseline.empty() && !fs::exists(ctx.cfg.bench_baseline))
      throw ConfigError("bench baseline " + ctx.cfg.bench_baseline + " does not exist");

    json invocation{{"command", ctx.command},
                    {"config", resolved_json(ctx.cfg)},
                    {"args",
                     {{"model", ctx.model_path},
                      {"report", ctx.report_path},
                      {"k_attn", ctx.k_attn_set ? json(ctx.k_attn) : json()},
                      {"k_mlp", ctx.k_mlp_set ? json(ctx.k_mlp) : json()},
                      {"mode", ctx.mode_str}}}};
    ctx.hash = hex16(fnv1a64(invocation.dump()));
  } catch (const ConfigError& e) {
    std::cerr << "effirlab: " << e.what() << "\n";
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "effirlab: " << e.what() << "\n";
    return 1;
  }

  try {
    DirLock lock(ctx.out);
    const auto t0 = std::chrono::steady_clock::now();
    json extras;
    if (dispatch(ctx, extras) != 0) {
      std::cerr << "effirlab: unknown command " << ctx.command << "\n";
      return 1;
    }
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    json record{{"command", ctx.command},
                {"config_hash", ctx.hash},
                {"seed", ctx.cfg.seed},
                {"versions",
                 {{"effirlab", kVersion}, {"checkpoint_format", kCheckpointVersion}}},
                {"timing", {{"wall_sec", wall}}}};
    record.update(extras);
    write_json(ctx.out / "run.json", record);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "effirlab: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "effirlab: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
