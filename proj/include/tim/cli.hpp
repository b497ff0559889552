#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tim/config.hpp"
#include "tim/sampler.hpp"
#include "tim/trainer.hpp"

namespace tim {

/// Exit codes shared by the subcommands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

/// Environment variable naming the directory under which relative run
/// directories are created.
inline constexpr const char* kRunRootEnv = "TIM_RUN_ROOT";

/// Resolves an output directory: relative paths go under $TIM_RUN_ROOT when
/// it is set; an empty path becomes <root or "runs">/<config stem>.
std::string resolve_run_dir(const std::string& out_dir, const std::string& config_path);

struct TrainArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;  ///< section.key=value
  std::string resume;                  ///< checkpoint to continue from
};

/// Trains, writing config.ini, metrics.jsonl, periodic ckpt_<step>.tim and
/// final.tim into the run directory.
int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);

/// trainer::run on the sections of a resolved config.
TrainReport run_training(const RunConfig& cfg, const ToyDataset& data, const RunHooks& hooks = {},
                         std::optional<TrainState> resume = std::nullopt);

struct SampleArgs {
  std::string checkpoint;
  int steps = 1;
  int n = 1000;
  double rho = 0.0;
  double omega = 1.0;
  std::string out_csv;
  std::optional<std::uint64_t> seed;  ///< defaults to the run seed
  bool ema = true;
  ScheduleKind schedule = ScheduleKind::Uniform;
  std::optional<double> shift_ratio;
  std::string ppm;  ///< optional scatter image
};

/// Samples from a checkpoint into a CSV (data space) plus a JSON sidecar
/// at <out_csv>.json; prints the NFE and wall-clock.
int cmd_sample(const SampleArgs& args, std::ostream& out, std::ostream& err);

struct VerifyArgs {
  bool full = false;
  bool corrupt_db_dt = false;
};

/// Prints a pass/fail table; exit 0 iff every check passes.
int cmd_verify(const VerifyArgs& args, std::ostream& out);

struct BenchArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  int repetitions = 3;
};

/// Times training steps with the DDE branch against df_dt injected as zero
/// over trainer.iterations steps and reports the median overhead ratio.
/// Also counts the DDE's network evaluations per sample.
int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err);

}  // namespace tim
