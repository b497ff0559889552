#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "tim/config.hpp"
#include "tim/data.hpp"
#include "tim/network.hpp"
#include "tim/trainer.hpp"

namespace tim {

/// Unreadable, truncated or incompatible checkpoint file.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "TIM1", a little-endian u32 version, then sections each framed by a
/// little-endian u64 byte length: config text, layout manifest, params,
/// EMA params, Adam m, Adam v, Adam step, rng state, step, normalization
/// statistics. Parameter and moment payloads are little-endian float32.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  RunConfig config;
  TrainState state;
  NormStats stats;

  bool operator==(const Checkpoint& o) const;
};

/// Statistics as they survive the float32 checkpoint payload.
NormStats float_rounded(const NormStats& stats);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace tim
