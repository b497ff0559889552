#include "tim/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "tim/checkpoint.hpp"
#include "tim/config.hpp"
#include "tim/errors.hpp"
#include "tim/verify.hpp"

namespace tim {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct LoadedRun {
  RunConfig cfg;
  std::optional<ToyDataset> data;
};

// Throws ConfigError for anything wrong with the document or its contents.
LoadedRun load_run(const std::string& path, const std::vector<std::string>& overrides) {
  std::string text = read_text(path);
  if (!overrides.empty()) text = apply_overrides(text, overrides);
  LoadedRun run;
  run.cfg = parse_run_config(text);
  run.data.emplace(make_dataset(run.cfg));
  run.cfg = resolve(run.cfg, run.data->dim());
  return run;
}

std::string checkpoint_name(long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%08ld.tim", step);
  return buf;
}

// Fields that may change between a run and its resumption.
RunConfig resumable_part(RunConfig c) {
  c.trainer.iterations = 0;
  c.trainer.probe_every = 0;
  c.trainer.probe_samples = 0;
  c.checkpoint_every = 0;
  c.sampler = SamplerConfig{};
  return c;
}

}  // namespace

std::string resolve_run_dir(const std::string& out_dir, const std::string& config_path) {
  const char* root_env = std::getenv(kRunRootEnv);
  const fs::path root = root_env && *root_env ? fs::path(root_env) : fs::path();
  if (out_dir.empty()) {
    const fs::path base = root.empty() ? fs::path("runs") : root;
    return (base / fs::path(config_path).stem()).string();
  }
  const fs::path p(out_dir);
  if (p.is_relative() && !root.empty()) return (root / p).string();
  return p.string();
}

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  LoadedRun run;
  std::optional<TrainState> resume;
  try {
    run = load_run(args.config_path, args.overrides);
    if (!args.resume.empty()) {
      Checkpoint ck = load_checkpoint(args.resume);
      if (!(resumable_part(ck.config) == resumable_part(run.cfg)))
        throw ConfigError("resume: checkpoint '" + args.resume + "' was trained with a different configuration");
      if (!(ck.stats == float_rounded(run.data->stats())))
        throw ConfigError("resume: dataset statistics differ from the checkpoint");
      if (ck.state.step > run.cfg.trainer.iterations)
        throw ConfigError("resume: checkpoint is already past trainer.iterations");
      resume = std::move(ck.state);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitConfig;
  }

  const RunConfig& cfg = run.cfg;
  const fs::path dir = resolve_run_dir(args.out_dir, args.config_path);
  try {
    fs::create_directories(dir);
    std::ofstream(dir / "config.ini") << serialize_run_config(cfg);
    const std::string metrics_path = (dir / "metrics.jsonl").string();
    if (!resume) std::ofstream(metrics_path, std::ios::trunc);
    const MetricsWriter metrics(metrics_path);
    const NormStats stats = float_rounded(run.data->stats());

    RunHooks hooks;
    hooks.checkpoint_every = cfg.checkpoint_every;
    hooks.on_checkpoint = [&](const TrainState& s) {
      save_checkpoint((dir / checkpoint_name(s.step)).string(), Checkpoint{kCheckpointVersion, cfg, s, stats});
    };
    hooks.on_probe = [&](const ProbeRow& row) {
      metrics.write(row);
      out << "step " << row.step << "  loss " << row.loss << "  energy@1/4/16 " << row.energy[0] << ' '
          << row.energy[1] << ' ' << row.energy[2] << '\n';
    };
    const long start_step = resume ? resume->step : 0;
    TrainReport report = run_training(cfg, *run.data, hooks, std::move(resume));
    const std::string final_path = (dir / "final.tim").string();
    save_checkpoint(final_path, Checkpoint{kCheckpointVersion, cfg, report.final_state, stats});
    char secs[32];
    std::snprintf(secs, sizeof secs, "%.2f", report.seconds);
    out << "trained steps " << start_step << " -> " << report.final_state.step << " in " << secs << " s\n";
    if (!report.loss.empty()) out << "final loss " << report.loss.back() << '\n';
    out << "checkpoint " << final_path << '\n';
  } catch (const NumericAbort& e) {
    err << "numeric abort: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

TrainReport run_training(const RunConfig& cfg, const ToyDataset& data, const RunHooks& hooks,
                         std::optional<TrainState> resume) {
  return run(cfg.transport, cfg.trainer, cfg.network, data, hooks, std::move(resume));
}

int cmd_sample(const SampleArgs& args, std::ostream& out, std::ostream& err) {
  Checkpoint ck;
  SampleSchedule sched;
  try {
    ck = load_checkpoint(args.checkpoint);
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitConfig;
  }
  const RunConfig& cfg = ck.config;
  try {
    if (args.n < 1) throw ConfigError("n must be positive");
    sched = build_schedule(cfg.transport, args.steps, args.schedule, args.shift_ratio);
    sched.rho = args.rho;
    sched.cfg_omega = args.omega;
    sched.seed = args.seed.value_or(cfg.seed);
    sched.eps_at_same_time = cfg.sampler.eps_at_same_time;
    validate(sched);
    if (args.omega > 1 && cfg.network.n_classes == 0)
      throw ConfigError("guidance (omega > 1) needs a class-conditional network");
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  const Network<float> net(cfg.network, cfg.transport);
  if (!(net.layout() == ck.state.params.layout)) {
    err << "checkpoint error: parameter layout does not match the network configuration\n";
    return kExitConfig;
  }
  std::vector<int> classes;
  for (int i = 0; cfg.network.n_classes > 0 && i < args.n; ++i) classes.push_back(i % cfg.network.n_classes);
  const NetworkParams<float>& params = args.ema ? ck.state.ema : ck.state.params;
  Rng rng = Rng::derive(sched.seed, 2001);
  try {
    const auto start = Clock::now();
    const Eigen::MatrixXd x =
        sample(as_transition_fn(net, params), cfg.transport, sched, cfg.network.dim, args.n, classes, rng);
    const double secs = seconds_since(start);
    const Eigen::MatrixXd raw = denormalize(x, ck.stats);
    write_samples_csv(args.out_csv, raw);
    write_sample_metadata(args.out_csv + ".json",
                          SampleMetadata{std::string(to_string(cfg.transport.kind)), sched, args.n,
                                         nfe_count(sched), args.ema});
    if (!args.ppm.empty()) write_scatter_ppm(args.ppm, raw);
    out << "nfe " << nfe_count(sched) << '\n' << "wall_clock_s " << secs << '\n';
  } catch (const NumericAbort& e) {
    err << "numeric abort: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_verify(const VerifyArgs& args, std::ostream& out) {
  VerifyOptions opts;
  opts.full = args.full;
  opts.corrupt_db_dt = args.corrupt_db_dt;
  const auto start = Clock::now();
  const std::vector<CheckResult> results = run_verify(opts);
  std::size_t width = 5;
  for (const auto& r : results) width = std::max(width, r.name.size());
  out << std::left << std::setw(static_cast<int>(width)) << "check" << "  result  value        bound\n";
  std::vector<std::string> failed;
  for (const auto& r : results) {
    char nums[64];
    std::snprintf(nums, sizeof nums, "%-11.4g  %-.4g", r.value, r.threshold);
    out << std::left << std::setw(static_cast<int>(width)) << r.name << "  " << (r.passed ? "PASS  " : "FAIL  ")
        << "  " << nums;
    if (!r.detail.empty()) out << "  (" << r.detail << ')';
    out << '\n';
    if (!r.passed) failed.push_back(r.name);
  }
  out << (args.full ? "full" : "fast") << " level: " << results.size() - failed.size() << '/' << results.size()
      << " passed in " << seconds_since(start) << " s\n";
  if (failed.empty()) return kExitOk;
  out << "failed:\n";
  for (const auto& f : failed) out << "  " << f << '\n';
  return kExitFailure;
}

int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err) {
  LoadedRun run;
  try {
    run = load_run(args.config_path, args.overrides);
    if (args.repetitions < 1) throw ConfigError("repetitions must be positive");
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  const RunConfig& cfg = run.cfg;
  const int steps = cfg.trainer.iterations;
  if (steps == 0) {
    out << "bench: 0 iterations, empty report\n";
    return kExitOk;
  }
  const Network<float> net(cfg.network, cfg.transport);
  auto time_steps = [&](bool zero_df_dt, StepInstrument& inst) {
    TrainState state = init_state(net, cfg.trainer);
    Rng data_rng = Rng::derive(cfg.seed, 3001);
    inst.zero_df_dt = zero_df_dt;
    const auto start = Clock::now();
    for (int i = 0; i < steps; ++i)
      train_step(state, net, cfg.transport, cfg.trainer, run.data->draw_batch(cfg.trainer.batch_size, data_rng),
                 &inst);
    return seconds_since(start) / steps;
  };
  std::vector<double> with_dde, without, ratio;
  StepInstrument counted;
  try {
    for (int rep = 0; rep < args.repetitions; ++rep) {
      StepInstrument off;
      with_dde.push_back(time_steps(false, counted));
      without.push_back(time_steps(true, off));
      ratio.push_back(with_dde.back() / without.back());
    }
  } catch (const NumericAbort& e) {
    err << "numeric abort: " << e.what() << '\n';
    return kExitNumeric;
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  };
  const double samples = static_cast<double>(steps) * cfg.trainer.batch_size * args.repetitions;
  const double evals_per_sample = static_cast<double>(counted.dde_columns) / samples;
  out << "steps per repetition " << steps << ", repetitions " << args.repetitions << '\n';
  out << "ms per step with DDE       " << 1e3 * median(with_dde) << '\n';
  out << "ms per step, df_dt = 0     " << 1e3 * median(without) << '\n';
  out << "DDE overhead ratio (median) " << median(ratio) << '\n';
  out << "DDE forward evaluations per sample per step " << evals_per_sample << " (" << counted.dde_calls
      << " batched calls)\n";
  if (evals_per_sample != 2.0) {
    err << "DDE evaluation count is not exactly 2 per sample\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace tim
