#include "tim/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numbers>
#include <sstream>
#include <thread>

#include "tim/errors.hpp"
#include "tim/oracle.hpp"
#include "tim/sampler.hpp"

namespace tim {

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_kind_from_string(std::string_view name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

void validate(const TrainConfig& c, const TransportSpec& spec) {
  auto fail = [](const std::string& m) { throw ConfigError("trainer." + m); };
  if (c.batch_size < 1) fail("batch_size must be positive");
  if (c.iterations < 0) fail("iterations must be non-negative");
  if (!(c.lr > 0)) fail("lr must be positive");
  if (!(c.beta1 >= 0 && c.beta1 < 1) || !(c.beta2 >= 0 && c.beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(c.eps_opt > 0)) fail("eps_opt must be positive");
  if (!(c.grad_clip >= 0)) fail("grad_clip must be non-negative");
  if (!(c.ema_decay >= 0 && c.ema_decay < 1)) fail("ema_decay must lie in [0, 1)");
  if (!(c.dde_eps > 0)) fail("dde_eps must be positive");
  if (!(c.frac_t_eq_r >= 0 && c.frac_t_eq_r <= 1)) fail("frac_t_eq_r must lie in [0, 1]");
  if (!(c.frac_r_eq_0 >= 0 && c.frac_r_eq_0 <= 1)) fail("frac_r_eq_0 must lie in [0, 1]");
  if (c.frac_t_eq_r + c.frac_r_eq_0 > 1 + 1e-12) fail("frac_t_eq_r + frac_r_eq_0 must not exceed 1");
  if (!(c.loss_norm_c > 0)) fail("loss_norm_c must be positive");
  if (!(c.cosine_loss_scale >= 0)) fail("cosine_loss_scale must be non-negative");
  if (!(c.guidance_omega >= 1)) fail("guidance_omega must be at least 1");
  if (!(c.cond_dropout >= 0 && c.cond_dropout <= 1)) fail("cond_dropout must lie in [0, 1]");
  if (c.workers < 1) fail("workers must be positive");
  if (c.probe_every < 0 || c.probe_samples < 0) fail("probe settings must be non-negative");
  if (!(c.weight.sigma_data > 0)) fail("weight sigma_data must be positive");
  if (c.weight.warp == TimeWarp::Tangent && spec.t_max >= std::numbers::pi / 2)
    fail("tangent weight warp needs t_max < pi/2 for this transport");
  if (c.weight.warp == TimeWarp::Rational && spec.t_max >= 1)
    fail("rational weight warp needs t_max < 1 for this transport");
  if (spec.t_max - spec.t_min <= 2 * c.dde_eps) fail("dde_eps too large for the time range");
}

std::pair<double, double> sample_tr_pair(const TransportSpec& spec, const TrainConfig& cfg, Rng& rng) {
  const double a = sample_time(spec, rng), b = sample_time(spec, rng);
  double t = std::max(a, b), r = std::min(a, b);
  const double u = rng.uniform();
  if (u < cfg.frac_t_eq_r)
    r = t;
  else if (u < cfg.frac_t_eq_r + cfg.frac_r_eq_0)
    r = spec.t_min;
  return {t, r};
}

TrainState init_state(const Network<float>& net, const TrainConfig& cfg) {
  TrainState s;
  s.params = net.init_params();
  s.ema = s.params;
  s.opt.m = Eigen::VectorXf::Zero(s.params.values.size());
  s.opt.v = Eigen::VectorXf::Zero(s.params.values.size());
  s.rng = Rng::derive(cfg.seed, 0);
  return s;
}

StepInputs draw_step_inputs(const TransportSpec& spec, const TrainConfig& cfg, const Batch& batch,
                            bool conditional, Rng& rng) {
  const Eigen::Index n = batch.x.cols(), d = batch.x.rows();
  StepInputs in;
  in.x = batch.x;
  in.t.resize(n);
  in.r.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto [t, r] = sample_tr_pair(spec, cfg, rng);
    const double tc = clamp_for_dde(spec, t, cfg.dde_eps);
    in.t(j) = tc;
    in.r(j) = r == t ? tc : std::min(r, tc);
  }
  in.eps.resize(d, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < d; ++i) in.eps(i, j) = rng.normal();
  if (conditional && !batch.classes.empty()) {
    in.classes.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) in.classes[j] = rng.uniform() < cfg.cond_dropout ? -1 : batch.classes[j];
  }
  in.x_t.resize(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const CoeffBundle c = coeffs(spec, in.t(j));
    in.x_t.col(j) = c.alpha * in.x.col(j) + c.sigma * in.eps.col(j);
  }
  return in;
}

Eigen::MatrixXd frozen_df_dt(const Network<float>& net, const NetworkParams<float>& frozen,
                             const TransportSpec& spec, const TrainConfig& cfg, const StepInputs& in) {
  return dde_batch(as_transition_fn(net, frozen), in.x, in.eps, in.t, in.r, in.classes, spec, cfg.dde_eps);
}

Eigen::MatrixXd build_targets(const TransportSpec& spec, const StepInputs& in, const Eigen::MatrixXd& df_dt,
                              const TransitionFn* guidance_ema, double omega) {
  const Eigen::Index n = in.x.cols();
  Eigen::MatrixXd target(in.x.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const CoeffBundle at_t = coeffs(spec, in.t(j));
    const TransitionCoeffs tr = transition_coeffs(at_t, coeffs(spec, in.r(j)));
    target.col(j) = tim_target(in.x.col(j), in.eps.col(j), df_dt.col(j), at_t, tr);
  }
  if (guidance_ema && !in.classes.empty()) {
    const std::vector<int> null_ids(n, -1);
    const Eigen::MatrixXd cond = (*guidance_ema)(in.x_t, in.t, in.t, in.classes);
    const Eigen::MatrixXd uncond = (*guidance_ema)(in.x_t, in.t, in.t, null_ids);
    target += (omega - 1.0) * (cond - uncond);
  }
  return target;
}

namespace {

struct ChunkResult {
  double loss = 0;
  NetworkGrads<float> grads;
};

}  // namespace

LossResult loss_and_grad(const Network<float>& net, const NetworkParams<float>& params,
                         const TransportSpec& spec, const TrainConfig& cfg, const StepInputs& in,
                         const Eigen::MatrixXd& targets) {
  (void)spec;
  const Eigen::Index n = in.x.cols(), d = in.x.rows();
  LossResult out;
  out.per_sample.resize(n);
  out.weights.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) out.weights(j) = interval_weight(in.t(j), in.r(j), cfg.weight);

  const double lambda = cfg.cosine_loss_scale;
  auto run_chunk = [&](Eigen::Index begin, Eigen::Index end, ChunkResult& res) {
    const Eigen::Index m = end - begin;
    std::span<const int> cls;
    if (!in.classes.empty()) cls = std::span<const int>(in.classes).subspan(begin, m);
    ForwardCache<float> cache;
    const Eigen::MatrixXd f =
        net.forward(params, in.x_t.middleCols(begin, m).cast<float>(), in.t.segment(begin, m),
                    in.r.segment(begin, m), cls, &cache)
            .cast<double>();
    Eigen::MatrixXd dout(d, m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const Eigen::Index j = begin + k;
      const Eigen::VectorXd fj = f.col(k), tj = targets.col(j);
      const Eigen::VectorXd diff = fj - tj;
      Eigen::VectorXd grad = 2.0 * diff;
      double l = diff.squaredNorm();
      if (lambda > 0) {
        const double nf = fj.norm(), nt = tj.norm(), dot = fj.dot(tj);
        const double denom = nf * nt + 1e-8;
        l += lambda * (1.0 - dot / denom);
        Eigen::VectorXd dcos = tj / denom;
        if (nf > 0) dcos -= dot * nt / (denom * denom * nf) * fj;
        grad -= lambda * dcos;
      }
      out.per_sample(j) = l;
      const double scale = out.weights(j) / (l + cfg.loss_norm_c) / static_cast<double>(n);
      res.loss += scale * l;
      dout.col(k) = scale * grad;
    }
    res.grads = net.backward(params, cache, dout.cast<float>());
  };

  const int workers = static_cast<int>(std::min<Eigen::Index>(cfg.workers, n));
  std::vector<ChunkResult> chunks(workers);
  std::vector<Eigen::Index> bounds(workers + 1);
  for (int w = 0; w <= workers; ++w) bounds[w] = n * w / workers;
  if (workers == 1) {
    run_chunk(0, n, chunks[0]);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          run_chunk(bounds[w], bounds[w + 1], chunks[w]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  out.grads = std::move(chunks[0].grads);
  out.loss = chunks[0].loss;
  for (int w = 1; w < workers; ++w) {
    out.grads.values += chunks[w].grads.values;
    out.loss += chunks[w].loss;
  }
  return out;
}

double apply_update(NetworkParams<float>& params, AdamState& opt, const NetworkGrads<float>& grads,
                    const TrainConfig& cfg) {
  const double norm = grads.values.cast<double>().norm();
  Eigen::VectorXf g = grads.values;
  if (cfg.grad_clip > 0 && norm > cfg.grad_clip) g *= static_cast<float>(cfg.grad_clip / norm);
  const auto lr = static_cast<float>(cfg.lr);
  if (cfg.optimizer == OptimizerKind::Sgd) {
    params.values -= lr * g;
    ++opt.step;
    return norm;
  }
  if (opt.m.size() != g.size()) {
    opt.m = Eigen::VectorXf::Zero(g.size());
    opt.v = Eigen::VectorXf::Zero(g.size());
  }
  ++opt.step;
  const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  opt.m = b1 * opt.m + (1.0f - b1) * g;
  opt.v = b2 * opt.v + (1.0f - b2) * g.cwiseProduct(g);
  const auto c1 = static_cast<float>(1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step)));
  const auto c2 = static_cast<float>(1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step)));
  const auto eps = static_cast<float>(cfg.eps_opt);
  params.values.array() -= lr * (opt.m.array() / c1) / ((opt.v.array() / c2).sqrt() + eps);
  return norm;
}

int interval_bucket(const TransportSpec& spec, double t, double r) {
  if (t == r) return 0;
  const double frac = (t - r) / (spec.t_max - spec.t_min);
  return 1 + std::min(2, static_cast<int>(frac * 3));
}

namespace {

[[noreturn]] void abort_non_finite(const TransportSpec& spec, const StepInputs& in,
                                   const Eigen::VectorXd* per_sample, long step, const std::string& what) {
  std::ostringstream os;
  os << what << " at step " << step << "; offending (t, r):";
  int shown = 0;
  for (Eigen::Index j = 0; j < in.t.size() && shown < 5; ++j) {
    const bool bad = per_sample ? !std::isfinite((*per_sample)(j)) : !in.x_t.col(j).allFinite();
    if (bad) {
      os << " (" << in.t(j) << ", " << in.r(j) << ")";
      ++shown;
    }
  }
  if (shown == 0) os << " none isolated";
  constexpr int kBins = 10;
  std::array<int, kBins> hist{};
  const double span = spec.t_max - spec.t_min;
  for (Eigen::Index j = 0; j < in.t.size(); ++j)
    ++hist[std::clamp(static_cast<int>((in.t(j) - in.r(j)) / span * kBins), 0, kBins - 1)];
  os << "; dt histogram over [0, " << span << "]:";
  for (int h : hist) os << ' ' << h;
  throw NumericAbort(os.str());
}

}  // namespace

StepResult train_step(TrainState& state, const Network<float>& net, const TransportSpec& spec,
                      const TrainConfig& cfg, const Batch& batch, StepInstrument* instrument) {
  const bool conditional = net.config().n_classes > 0;
  const StepInputs in = draw_step_inputs(spec, cfg, batch, conditional, state.rng);
  LossResult lr;
  try {
    Eigen::MatrixXd df_dt;
    if (!instrument) {
      df_dt = frozen_df_dt(net, state.params, spec, cfg, in);
    } else if (instrument->zero_df_dt) {
      df_dt = Eigen::MatrixXd::Zero(in.x.rows(), in.x.cols());
    } else {
      CountingFn counter(as_transition_fn(net, state.params));
      df_dt = dde_batch(counter.fn(), in.x, in.eps, in.t, in.r, in.classes, spec, cfg.dde_eps);
      instrument->dde_calls += counter.calls();
      instrument->dde_columns += counter.columns();
    }
    Eigen::MatrixXd targets;
    if (cfg.guidance_enabled && conditional && state.step >= cfg.warmup_iters()) {
      const TransitionFn ema_fn = as_transition_fn(net, state.ema);
      targets = build_targets(spec, in, df_dt, &ema_fn, cfg.guidance_omega);
    } else {
      targets = build_targets(spec, in, df_dt);
    }
    lr = loss_and_grad(net, state.params, spec, cfg, in, targets);
  } catch (const NumericAbort& e) {
    abort_non_finite(spec, in, nullptr, state.step, e.what());
  }
  if (!std::isfinite(lr.loss) || !lr.grads.values.allFinite())
    abort_non_finite(spec, in, &lr.per_sample, state.step, "non-finite loss");

  StepResult res;
  res.loss = lr.loss;
  res.grad_norm = apply_update(state.params, state.opt, lr.grads, cfg);
  ema_update(state.ema, state.params, cfg.ema_decay);
  ++state.step;

  std::array<double, 4> sum{};
  std::array<int, 4> count{};
  for (Eigen::Index j = 0; j < in.t.size(); ++j) {
    const int b = interval_bucket(spec, in.t(j), in.r(j));
    sum[b] += lr.per_sample(j);
    ++count[b];
  }
  for (int b = 0; b < 4; ++b)
    res.interval_loss[b] = count[b] ? sum[b] / count[b] : std::numeric_limits<double>::quiet_NaN();
  return res;
}

std::array<double, 3> probe_energy(const Network<float>& net, const NetworkParams<float>& params,
                                   const TransportSpec& spec, const ToyDataset& data, int n,
                                   std::uint64_t seed) {
  Rng ref_rng = Rng::derive(seed, 1001);
  const Batch ref = data.draw_raw(n, ref_rng);
  const Eigen::MatrixXd ref_x = data.normalize(ref.x);
  std::span<const int> classes;
  if (net.config().n_classes > 0) classes = ref.classes;
  const TransitionFn f = as_transition_fn(net, params);
  std::array<double, 3> out{};
  for (std::size_t k = 0; k < kProbeSteps.size(); ++k) {
    Rng rng = Rng::derive(seed, 1002);
    try {
      const Eigen::MatrixXd x =
          sample(f, spec, build_schedule(spec, kProbeSteps[k], ScheduleKind::Uniform), data.dim(), n, classes, rng);
      out[k] = energy_distance(x, ref_x);
    } catch (const NumericAbort&) {
      out[k] = std::numeric_limits<double>::infinity();
    }
  }
  return out;
}

TrainReport run(const TransportSpec& spec, const TrainConfig& cfg, const NetworkConfig& net_cfg,
                const ToyDataset& data, const RunHooks& hooks, std::optional<TrainState> resume) {
  validate(spec);
  validate(cfg, spec);
  if (net_cfg.dim != data.dim()) throw ConfigError("network.dim does not match the dataset dimension");
  if (net_cfg.n_classes > 0 && data.n_classes() == 0)
    throw ConfigError("network.n_classes > 0 needs a labeled dataset");
  if (net_cfg.n_classes > 0 && net_cfg.n_classes < data.n_classes())
    throw ConfigError("network.n_classes is smaller than the dataset's label count");
  const Network<float> net(net_cfg, spec);
  TrainState state = resume ? std::move(*resume) : init_state(net, cfg);
  if (!(state.params.layout == net.layout()) || !(state.ema.layout == net.layout()))
    throw ConfigError("resume state does not match the network layout");

  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(Clock::now() - start).count(); };
  TrainReport report;
  long last_probe = -1;
  auto probe = [&](double loss) {
    ProbeRow row;
    row.step = state.step;
    row.loss = loss;
    row.energy = probe_energy(net, state.ema, spec, data, cfg.probe_samples, cfg.seed);
    row.seconds = elapsed();
    report.probes.push_back(row);
    last_probe = state.step;
    if (hooks.on_probe) hooks.on_probe(row);
  };

  while (state.step < cfg.iterations) {
    const Batch batch = data.draw_batch(cfg.batch_size, state.rng);
    const StepResult res = train_step(state, net, spec, cfg, batch);
    report.loss.push_back(res.loss);
    report.grad_norm.push_back(res.grad_norm);
    report.interval_loss.push_back(res.interval_loss);
    if (cfg.probe_samples > 0 && cfg.probe_every > 0 && state.step % cfg.probe_every == 0) probe(res.loss);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && state.step % hooks.checkpoint_every == 0)
      hooks.on_checkpoint(state);
  }
  if (cfg.probe_samples > 0 && !report.loss.empty() && last_probe != state.step) probe(report.loss.back());
  report.seconds = elapsed();
  report.final_state = std::move(state);
  return report;
}

void MetricsWriter::write(const ProbeRow& row) const {
  nlohmann::json j;
  j["step"] = row.step;
  j["loss"] = row.loss;
  for (std::size_t k = 0; k < kProbeSteps.size(); ++k)
    j["energy_nfe" + std::to_string(kProbeSteps[k])] = row.energy[k];
  j["seconds"] = row.seconds;
  std::ofstream out(path_, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to '" + path_ + "'");
  out << j.dump() << '\n';
}

}  // namespace tim
