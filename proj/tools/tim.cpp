#include <CLI11.hpp>
#include <iostream>

#include "tim/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Transition-model training and sampling on toy data"};
  app.require_subcommand(1);

  tim::TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train from a config file");
  train_cmd->add_option("config", train.config_path, "Run config (INI)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("-o,--out", train.out_dir, "Run directory (relative paths go under $TIM_RUN_ROOT)");
  train_cmd->add_option("--set", train.overrides, "Override a key: section.key=value");
  train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");

  tim::SampleArgs sample;
  std::string schedule = "uniform";
  double shift_ratio = 0;
  std::uint64_t seed = 0;
  bool raw_params = false;
  auto* sample_cmd = app.add_subcommand("sample", "Sample from a checkpoint");
  sample_cmd->add_option("checkpoint", sample.checkpoint, "Checkpoint file")->required();
  sample_cmd->add_option("--steps", sample.steps, "Sampling steps")->capture_default_str();
  sample_cmd->add_option("-n,--n", sample.n, "Number of samples")->capture_default_str();
  sample_cmd->add_option("--rho", sample.rho, "Stochasticity ratio")->capture_default_str();
  sample_cmd->add_option("--omega", sample.omega, "Guidance scale")->capture_default_str();
  sample_cmd->add_option("-o,--out", sample.out_csv, "Output CSV")->required();
  auto* seed_opt = sample_cmd->add_option("--seed", seed, "Sampling seed (default: run seed)");
  sample_cmd->add_flag("--raw", raw_params, "Use raw parameters instead of the EMA");
  sample_cmd->add_option("--schedule", schedule, "uniform or shifted")
      ->check(CLI::IsMember({"uniform", "shifted"}))
      ->capture_default_str();
  auto* shift_opt = sample_cmd->add_option("--shift-ratio", shift_ratio, "m/n for the shifted schedule");
  sample_cmd->add_option("--ppm", sample.ppm, "Also write a scatter image (PPM)");

  tim::VerifyArgs verify;
  std::string level = "fast";
  auto* verify_cmd = app.add_subcommand("verify", "Run the invariant battery");
  verify_cmd->add_option("--level", level, "fast or full")->check(CLI::IsMember({"fast", "full"}))->capture_default_str();
  verify_cmd->add_flag("--corrupt-db-dt", verify.corrupt_db_dt, "Test hook: perturb dB/dt");

  tim::BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Measure the DDE overhead per training step");
  bench_cmd->add_option("config", bench.config_path, "Run config (INI)")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--set", bench.overrides, "Override a key: section.key=value");
  bench_cmd->add_option("--repetitions", bench.repetitions, "Timing repetitions")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  if (*train_cmd) return tim::cmd_train(train, std::cout, std::cerr);
  if (*sample_cmd) {
    sample.ema = !raw_params;
    if (*seed_opt) sample.seed = seed;
    sample.schedule = schedule == "shifted" ? tim::ScheduleKind::Shifted : tim::ScheduleKind::Uniform;
    if (*shift_opt) sample.shift_ratio = shift_ratio;
    return tim::cmd_sample(sample, std::cout, std::cerr);
  }
  if (*verify_cmd) {
    verify.full = level == "full";
    return tim::cmd_verify(verify, std::cout);
  }
  return tim::cmd_bench(bench, std::cout, std::cerr);
}
