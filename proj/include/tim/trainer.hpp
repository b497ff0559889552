#pragma once

#include <Eigen/Dense>
#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tim/data.hpp"
#include "tim/network.hpp"
#include "tim/rng.hpp"
#include "tim/transition.hpp"
#include "tim/transport.hpp"

namespace tim {

enum class OptimizerKind { Sgd, Adam };

std::string_view to_string(OptimizerKind k);
OptimizerKind optimizer_kind_from_string(std::string_view name);

struct TrainConfig {
  int batch_size = 256;
  int iterations = 20000;
  double lr = 2e-4;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_opt = 1e-8;
  double grad_clip = 0.0;  ///< global norm clip, 0 = off
  double ema_decay = 0.999;
  double dde_eps = 0.005;
  WeightScheme weight;
  double frac_t_eq_r = 0.5;
  double frac_r_eq_0 = 0.1;
  double loss_norm_c = 1e-3;
  double cosine_loss_scale = 0.0;
  double guidance_omega = 1.75;
  bool guidance_enabled = false;
  int guidance_warmup_iters = -1;  ///< -1 = 10% of iterations
  double cond_dropout = 0.1;
  std::uint64_t seed = 0;
  int workers = 1;
  int probe_every = 0;  ///< 0 = final probe only
  int probe_samples = 512;

  int warmup_iters() const {
    return guidance_warmup_iters >= 0 ? guidance_warmup_iters : iterations / 10;
  }
  bool operator==(const TrainConfig&) const = default;
};

/// Throws ConfigError when the knobs are inconsistent with each other or
/// with the transport (e.g. a tangent warp past pi/2).
void validate(const TrainConfig& cfg, const TransportSpec& spec);

/// Two time draws ordered as (max, min), then the mixing overrides: with
/// probability frac_t_eq_r r = t, with probability frac_r_eq_0 r = t_min.
std::pair<double, double> sample_tr_pair(const TransportSpec& spec, const TrainConfig& cfg, Rng& rng);

struct AdamState {
  Eigen::VectorXf m, v;
  long step = 0;
  bool operator==(const AdamState& o) const {
    return step == o.step && m.size() == o.m.size() && v.size() == o.v.size() && m == o.m && v == o.v;
  }
};

/// Everything needed to continue a run bit-exactly.
struct TrainState {
  NetworkParams<float> params;
  NetworkParams<float> ema;
  AdamState opt;
  Rng rng;
  long step = 0;
};

TrainState init_state(const Network<float>& net, const TrainConfig& cfg);

/// Random quantities of one step, drawn before any model evaluation.
struct StepInputs {
  Eigen::MatrixXd x, eps, x_t;
  Eigen::VectorXd t, r;
  std::vector<int> classes;  ///< after conditional dropout; empty if unlabeled
};

StepInputs draw_step_inputs(const TransportSpec& spec, const TrainConfig& cfg, const Batch& batch,
                            bool conditional, Rng& rng);

/// DDE of the frozen network along each sample's path (two batched forwards).
Eigen::MatrixXd frozen_df_dt(const Network<float>& net, const NetworkParams<float>& frozen,
                             const TransportSpec& spec, const TrainConfig& cfg, const StepInputs& in);

/// Per-sample learning targets; guidance adds (omega - 1)(f_ema(t,t|c) - f_ema(t,t|null)).
Eigen::MatrixXd build_targets(const TransportSpec& spec, const StepInputs& in, const Eigen::MatrixXd& df_dt,
                              const TransitionFn* guidance_ema = nullptr, double omega = 1.0);

struct LossResult {
  double loss = 0;                 ///< mean normalized weighted loss
  Eigen::VectorXd per_sample;      ///< raw L_i
  Eigen::VectorXd weights;         ///< w(t_i, r_i)
  NetworkGrads<float> grads;
};

/// Loss and parameter gradient for fixed targets. The targets carry no
/// gradient. Sub-batches fan out over cfg.workers threads and are reduced
/// in chunk order.
LossResult loss_and_grad(const Network<float>& net, const NetworkParams<float>& params,
                         const TransportSpec& spec, const TrainConfig& cfg, const StepInputs& in,
                         const Eigen::MatrixXd& targets);

/// One optimizer update in place; returns the gradient norm before clipping.
double apply_update(NetworkParams<float>& params, AdamState& opt, const NetworkGrads<float>& grads,
                    const TrainConfig& cfg);

struct StepResult {
  double loss = 0;
  double grad_norm = 0;
  std::array<double, 4> interval_loss{};  ///< mean L_i per interval bucket, NaN when empty
};

/// Benchmark instrumentation for train_step.
struct StepInstrument {
  bool zero_df_dt = false;  ///< skip the DDE and use df_dt = 0
  long dde_calls = 0;       ///< accumulated network calls made by the DDE
  long dde_columns = 0;     ///< accumulated samples evaluated by the DDE
};

/// One step of the training loop on a normalized batch. Throws
/// NumericAbort with a diagnostic when the loss is not finite.
StepResult train_step(TrainState& state, const Network<float>& net, const TransportSpec& spec,
                      const TrainConfig& cfg, const Batch& batch, StepInstrument* instrument = nullptr);

/// Interval bucket of a (t, r) pair: 0 for t = r, then thirds of the time range.
int interval_bucket(const TransportSpec& spec, double t, double r);

struct ProbeRow {
  long step = 0;
  double loss = 0;
  std::array<double, 3> energy{};  ///< NFE 1, 4, 16
  double seconds = 0;
};

inline constexpr std::array<int, 3> kProbeSteps{1, 4, 16};

/// Energy distance between EMA samples and fresh data at 1, 4 and 16 steps.
/// Uses its own seeded streams and never touches the training rng.
std::array<double, 3> probe_energy(const Network<float>& net, const NetworkParams<float>& params,
                                   const TransportSpec& spec, const ToyDataset& data, int n,
                                   std::uint64_t seed);

struct TrainReport {
  std::vector<double> loss;
  std::vector<double> grad_norm;
  std::vector<std::array<double, 4>> interval_loss;
  std::vector<ProbeRow> probes;
  double seconds = 0;
  TrainState final_state;
};

struct RunHooks {
  int checkpoint_every = 0;
  std::function<void(const TrainState&)> on_checkpoint;
  std::function<void(const ProbeRow&)> on_probe;
};

/// Runs until state.step reaches cfg.iterations, starting from resume if
/// given. Deterministic for a fixed seed and worker count.
TrainReport run(const TransportSpec& spec, const TrainConfig& cfg, const NetworkConfig& net_cfg,
                const ToyDataset& data, const RunHooks& hooks = {},
                std::optional<TrainState> resume = std::nullopt);

/// Appends one JSON object per line.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::string path) : path_(std::move(path)) {}
  void write(const ProbeRow& row) const;

 private:
  std::string path_;
};

}  // namespace tim
