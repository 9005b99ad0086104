#include "effir/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

namespace effir {

namespace {

using nlohmann::json;

const char* pooling_name(Pooling p) { return p == Pooling::last_token ? "last_token" : "mean"; }

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::silu: return "silu";
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
  }
  return "?";
}

Pooling pooling_from(const std::string& s) {
  if (s == "last_token") return Pooling::last_token;
  if (s == "mean") return Pooling::mean;
  throw CheckpointError("checkpoint: unknown pooling '" + s + "'");
}

Activation activation_from(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw CheckpointError("checkpoint: unknown activation '" + s + "'");
}

json config_json(const EncoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
          {"pooling", pooling_name(c.pooling)},
          {"activation", activation_name(c.activation)}};
}

EncoderConfig config_from(const json& j) {
  EncoderConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.pooling = pooling_from(j.at("pooling").get<std::string>());
  c.activation = activation_from(j.at("activation").get<std::string>());
  return c;
}

void append_f32le(std::string& blob, float v) {
  std::uint32_t u = 0;
  std::memcpy(&u, &v, 4);
  blob.push_back(static_cast<char>(u & 0xff));
  blob.push_back(static_cast<char>((u >> 8) & 0xff));
  blob.push_back(static_cast<char>((u >> 16) & 0xff));
  blob.push_back(static_cast<char>((u >> 24) & 0xff));
}

float read_f32le(const unsigned char* p) {
  const std::uint32_t u = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                          (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  float v = 0.0f;
  std::memcpy(&v, &u, 4);
  return v;
}

std::string weights_blob(const EncoderModel& m) {
  std::string blob;
  for (const auto& [name, t] : collect_params(m)) {
    (void)name;
    for (std::size_t i = 0; i < t.numel(); ++i) append_f32le(blob, t.at(i));
  }
  return blob;
}

std::string fingerprint_of(const EncoderConfig& cfg, const std::string& blob) {
  std::uint64_t h = fnv1a64(config_json(cfg).dump());
  h = fnv1a64(blob, h);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

std::string model_fingerprint(const EncoderModel& m) {
  return fingerprint_of(m.config, weights_blob(m));
}

void save_checkpoint(const EncoderModel& m, const std::string& dir,
                     const CheckpointExtras& extras) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw CheckpointError("save_checkpoint: cannot create " + dir + ": " + ec.message());

  const auto params = collect_params(m);
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : params) {
    const std::size_t bytes = t.numel() * 4;
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }

  json blocks = json::array();
  for (const auto& b : m.blocks) {
    json jb = {{"attn", b.attn.has_value()},
               {"mlp", b.mlp.has_value()},
               {"slim_gate", b.mlp.has_value() && b.mlp->z.has_value()}};
    json loras = json::array();
    for (const auto& [target, lora] : b.loras)
      loras.push_back({{"target", target}, {"rank", lora.rank}, {"alpha", lora.alpha}});
    jb["loras"] = std::move(loras);
    blocks.push_back(std::move(jb));
  }

  const std::string blob = weights_blob(m);
  json manifest = {{"format_version", kCheckpointVersion},
                   {"config", config_json(m.config)},
                   {"blocks", std::move(blocks)},
                   {"tensors", std::move(tensors)},
                   {"seed", extras.seed},
                   {"slim_phase", extras.slim_phase},
                   {"pruning",
                    {{"k_attn", extras.pruning.k_attn},
                     {"k_mlp", extras.pruning.k_mlp},
                     {"mode", extras.pruning.mode}}},
                   {"fingerprint", fingerprint_of(m.config, blob)}};

  std::ofstream mf(dir + "/manifest.json", std::ios::binary);
  if (!mf) throw CheckpointError("save_checkpoint: cannot write " + dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
  std::ofstream wf(dir + "/weights.bin", std::ios::binary);
  if (!wf) throw CheckpointError("save_checkpoint: cannot write " + dir + "/weights.bin");
  wf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!mf.flush() || !wf.flush())
    throw CheckpointError("save_checkpoint: write failed under " + dir);
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json", std::ios::binary);
  if (!mf) throw CheckpointError("load_checkpoint: missing " + dir + "/manifest.json");
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw CheckpointError("load_checkpoint: unreadable manifest: " + std::string(e.what()));
  }

  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kCheckpointVersion)
      throw CheckpointError("load_checkpoint: format version " + std::to_string(version) +
                            " is not supported (expected " + std::to_string(kCheckpointVersion) +
                            ")");

    LoadedCheckpoint out;
    out.model.config = config_from(manifest.at("config"));
    try {
      out.model.config.validate();
    } catch (const ConfigError& e) {
      throw CheckpointError("load_checkpoint: manifest config invalid: " + std::string(e.what()));
    }

    const json& blocks = manifest.at("blocks");
    if (blocks.size() != out.model.config.n_layers)
      throw CheckpointError("load_checkpoint: manifest lists " + std::to_string(blocks.size()) +
                            " blocks for an " + std::to_string(out.model.config.n_layers) +
                            "-layer config");

    // the tensor table must spell out collect_params order exactly
    std::vector<std::string> expected = {"tok_emb", "pos_emb"};
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const json& b = blocks[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      if (b.at("attn").get<bool>())
        for (const char* n : {"attn.norm", "attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"})
          expected.push_back(p + n);
      if (b.at("mlp").get<bool>()) {
        for (const char* n : {"mlp.norm", "mlp.w_gate", "mlp.w_up", "mlp.w_down"})
          expected.push_back(p + n);
        if (b.at("slim_gate").get<bool>()) expected.push_back(p + "mlp.z");
      } else if (b.at("slim_gate").get<bool>()) {
        throw CheckpointError("load_checkpoint: block " + std::to_string(l) +
                              " declares a slim gate without an mlp");
      }
      for (const json& lora : b.at("loras")) {
        const std::string target = lora.at("target").get<std::string>();
        expected.push_back(p + "lora." + target + ".A");
        expected.push_back(p + "lora." + target + ".B");
      }
    }

    const json& table = manifest.at("tensors");
    if (table.size() != expected.size())
      throw CheckpointError("load_checkpoint: tensor table has " + std::to_string(table.size()) +
                            " entries, structure needs " + std::to_string(expected.size()));
    std::size_t total = 0;
    for (std::size_t i = 0; i < table.size(); ++i) {
      const json& e = table[i];
      if (e.at("name").get<std::string>() != expected[i])
        throw CheckpointError("load_checkpoint: tensor " + std::to_string(i) + " is '" +
                              e.at("name").get<std::string>() + "', expected '" + expected[i] +
                              "'");
      if (e.at("offset").get<std::size_t>() != total)
        throw CheckpointError("load_checkpoint: tensor '" + expected[i] +
                              "' offset does not continue the blob");
      const Shape shape = e.at("shape").get<Shape>();
      if (e.at("bytes").get<std::size_t>() != shape_numel(shape) * 4)
        throw CheckpointError("load_checkpoint: tensor '" + expected[i] +
                              "' byte length disagrees with its shape");
      total += e.at("bytes").get<std::size_t>();
    }

    std::ifstream wf(dir + "/weights.bin", std::ios::binary);
    if (!wf) throw CheckpointError("load_checkpoint: missing " + dir + "/weights.bin");
    std::string blob((std::istreambuf_iterator<char>(wf)), std::istreambuf_iterator<char>());
    if (blob.size() != total)
      throw CheckpointError("load_checkpoint: weights blob is " + std::to_string(blob.size()) +
                            " bytes, manifest declares " + std::to_string(total));

    const auto read_tensor = [&](const json& e) {
      const Shape shape = e.at("shape").get<Shape>();
      const std::size_t offset = e.at("offset").get<std::size_t>();
      std::vector<float> values(shape_numel(shape));
      const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = read_f32le(p + 4 * i);
      return Tensor::from(shape, std::move(values));
    };

    std::size_t ti = 0;
    out.model.tok_emb = read_tensor(table[ti++]);
    out.model.pos_emb = read_tensor(table[ti++]);
    out.model.blocks.resize(blocks.size());
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const json& b = blocks[l];
      auto& mb = out.model.blocks[l];
      if (b.at("attn").get<bool>()) {
        AttentionT<float> attn;
        attn.norm = read_tensor(table[ti++]);
        attn.w_q = read_tensor(table[ti++]);
        attn.w_k = read_tensor(table[ti++]);
        attn.w_v = read_tensor(table[ti++]);
        attn.w_o = read_tensor(table[ti++]);
        mb.attn = std::move(attn);
      }
      if (b.at("mlp").get<bool>()) {
        GatedMlpT<float> mlp;
        mlp.norm = read_tensor(table[ti++]);
        mlp.w_gate = read_tensor(table[ti++]);
        mlp.w_up = read_tensor(table[ti++]);
        mlp.w_down = read_tensor(table[ti++]);
        if (b.at("slim_gate").get<bool>()) mlp.z = read_tensor(table[ti++]);
        mb.mlp = std::move(mlp);
      }
      for (const json& jl : b.at("loras")) {
        LoraAdapterT<float> lora;
        lora.rank = jl.at("rank").get<std::size_t>();
        lora.alpha = jl.at("alpha").get<float>();
        lora.A = read_tensor(table[ti++]);
        lora.B = read_tensor(table[ti++]);
        if (lora.A.dim(0) != lora.rank)
          throw CheckpointError("load_checkpoint: lora rank " + std::to_string(lora.rank) +
                                " disagrees with A shape " + shape_str(lora.A.shape()));
        mb.loras.emplace(jl.at("target").get<std::string>(), std::move(lora));
      }
    }

    out.fingerprint = manifest.at("fingerprint").get<std::string>();
    if (fingerprint_of(out.model.config, blob) != out.fingerprint)
      throw CheckpointError("load_checkpoint: weights do not hash to the recorded fingerprint");

    out.extras.seed = manifest.at("seed").get<std::uint64_t>();
    out.extras.slim_phase = manifest.at("slim_phase").get<std::string>();
    out.extras.pruning.k_attn = manifest.at("pruning").at("k_attn").get<std::size_t>();
    out.extras.pruning.k_mlp = manifest.at("pruning").at("k_mlp").get<std::size_t>();
    out.extras.pruning.mode = manifest.at("pruning").at("mode").get<std::string>();
    return out;
  } catch (const json::exception& e) {
    throw CheckpointError("load_checkpoint: malformed manifest: " + std::string(e.what()));
  }
}

}  // namespace effir
