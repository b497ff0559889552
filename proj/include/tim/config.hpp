#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tim/data.hpp"
#include "tim/network.hpp"
#include "tim/sampler.hpp"
#include "tim/trainer.hpp"
#include "tim/transport.hpp"

namespace tim {

struct SamplerConfig {
  int steps = 1;
  ScheduleKind schedule = ScheduleKind::Uniform;
  double shift_ratio = 0.0;  ///< used by the shifted schedule
  double rho = 0.0;
  double cfg_omega = 1.0;
  int n = 1000;
  bool eps_at_same_time = false;
  bool use_ema = true;

  bool operator==(const SamplerConfig&) const = default;
};

/// Complete description of a run. One seed drives the dataset, network
/// initialization, training and sampling streams.
struct RunConfig {
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  ///< 0 = final checkpoint only
  int workers = 1;
  DatasetConfig dataset;
  TransportSpec transport;
  NetworkConfig network = [] {
    NetworkConfig n;
    n.dim = 0;  // filled from the dataset
    return n;
  }();
  TrainConfig trainer;
  SamplerConfig sampler;

  bool operator==(const RunConfig&) const = default;
};

/// Parses the sectioned key = value format ([run], [dataset], [transport],
/// [network], [trainer], [sampler]). Missing keys keep their defaults;
/// transport constants default per kind. The run seed and worker count are
/// copied into the sub-configs. Unknown sections or keys throw ConfigError
/// naming the key.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Writes every key; doubles use the shortest exact decimal form so parsing
/// the output reproduces the structure exactly.
std::string serialize_run_config(const RunConfig& cfg);

/// Applies "section.key=value" overrides on top of a config document.
std::string apply_overrides(const std::string& text, const std::vector<std::string>& overrides);

/// Fills network.dim from the dataset when it is 0 and validates every
/// section. Throws ConfigError when the pieces do not fit together.
RunConfig resolve(const RunConfig& cfg, Eigen::Index data_dim);

ToyDataset make_dataset(const RunConfig& cfg);
SampleSchedule make_schedule(const RunConfig& cfg);

}  // namespace tim
