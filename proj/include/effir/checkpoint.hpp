#pragma once

#include <cstdint>
#include <string>

#include "effir/encoder.hpp"

namespace effir {

inline constexpr int kCheckpointVersion = 1;

struct PruningMeta {
  std::size_t k_attn = 0, k_mlp = 0;
  std::string mode = "none";
};

// Provenance recorded alongside the weights: where the model sits in the
// profile -> drop -> slim -> train pipeline.
struct CheckpointExtras {
  std::uint64_t seed = 0;
  std::string slim_phase = "none";  // none | masked | shrunk
  PruningMeta pruning;
};

// Hex FNV-1a over the serialized config plus the little-endian weights blob.
// Any change to shapes, structure, values, or function-relevant config breaks
// it; reports carry it so stages can refuse stale inputs.
std::string model_fingerprint(const EncoderModel& m);

// Writes dir/manifest.json (config, per-block structure, provenance, tensor
// table) and dir/weights.bin (32-bit little-endian floats concatenated in
// table order). Creates the directory; both files are byte-reproducible.
void save_checkpoint(const EncoderModel& m, const std::string& dir,
                     const CheckpointExtras& extras = {});

struct LoadedCheckpoint {
  EncoderModel model;
  CheckpointExtras extras;
  std::string fingerprint;
};

// Refuses rather than guesses: unknown format version, tensor names out of
// order, offset gaps, a blob whose length differs from the declared total,
// or bytes that no longer hash to the recorded fingerprint.
LoadedCheckpoint load_checkpoint(const std::string& dir);

}  // namespace effir
