#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>

#include "tim/errors.hpp"
#include "tim/oracle.hpp"
#include "tim/sampler.hpp"
#include "tim/trainer.hpp"

using namespace tim;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

NetworkConfig small_net(int n_classes = 0) {
  NetworkConfig c;
  c.dim = 2;
  c.width = 32;
  c.depth = 2;
  c.embed_dim = 16;
  c.fourier_bands = 3;
  c.n_classes = n_classes;
  c.seed = 11;
  return c;
}

TrainConfig small_train() {
  TrainConfig c;
  c.batch_size = 32;
  c.iterations = 5;
  c.seed = 3;
  c.probe_samples = 0;
  return c;
}

ToyDataset gaussians(std::uint64_t seed = 1) {
  DatasetConfig d;
  d.kind = DatasetKind::EightGaussians;
  d.seed = seed;
  d.fit_samples = 5000;
  return ToyDataset(d);
}

}  // namespace

TEST_CASE("tr pair mixing frequencies") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  TrainConfig cfg;
  Rng rng(17);
  const int n = 100000;
  int same = 0, to_min = 0;
  for (int i = 0; i < n; ++i) {
    const auto [t, r] = sample_tr_pair(spec, cfg, rng);
    REQUIRE(t >= r);
    same += t == r;
    to_min += r == spec.t_min && t != r;
  }
  CHECK(std::abs(same / double(n) - 0.5) < 0.02);
  CHECK(std::abs(to_min / double(n) - 0.1) < 0.02);

  cfg.frac_t_eq_r = 1.0;
  for (int i = 0; i < 1000; ++i) {
    const auto [t, r] = sample_tr_pair(spec, cfg, rng);
    CHECK(t == r);
  }
}

TEST_CASE("unmixed pairs follow two-sample order statistics") {
  const TransportSpec spec = make_transport(TransportKind::TrigFlow);
  TrainConfig cfg;
  cfg.frac_t_eq_r = 0;
  cfg.frac_r_eq_0 = 0;
  Rng rng(5), direct(6);
  const int n = 40000;
  std::vector<double> ts, rs, single;
  for (int i = 0; i < n; ++i) {
    const auto [t, r] = sample_tr_pair(spec, cfg, rng);
    CHECK(t > r);
    ts.push_back(t);
    rs.push_back(r);
    single.push_back(sample_time(spec, direct));
  }
  std::sort(single.begin(), single.end());
  auto cdf = [](const std::vector<double>& v, double x) {
    return static_cast<double>(std::count_if(v.begin(), v.end(), [x](double y) { return y <= x; })) / v.size();
  };
  double worst = 0;
  for (int q = 1; q < 20; ++q) {
    const double x = single[single.size() * q / 20];
    const double f = cdf(single, x);
    worst = std::max(worst, std::abs(cdf(ts, x) - f * f));
    worst = std::max(worst, std::abs(cdf(rs, x) - (1 - (1 - f) * (1 - f))));
  }
  CHECK(worst < 0.015);
}

TEST_CASE("config validation") {
  const TransportSpec ot = make_transport(TransportKind::OtFm);
  CHECK_NOTHROW(validate(TrainConfig{}, ot));
  CHECK_THROWS_AS(validate(TrainConfig{}, make_transport(TransportKind::Edm)), ConfigError);
  CHECK_THROWS_AS(validate(TrainConfig{}, make_transport(TransportKind::Ve)), ConfigError);
  TrainConfig bad;
  bad.frac_t_eq_r = 0.95;
  bad.frac_r_eq_0 = 0.1;
  CHECK_THROWS_AS(validate(bad, ot), ConfigError);
  bad = TrainConfig{};
  bad.guidance_omega = 0.5;
  CHECK_THROWS_AS(validate(bad, ot), ConfigError);
  TrainConfig edm_ok;
  edm_ok.weight.warp = TimeWarp::Identity;
  CHECK_NOTHROW(validate(edm_ok, make_transport(TransportKind::Edm)));
  CHECK(optimizer_kind_from_string(to_string(OptimizerKind::Sgd)) == OptimizerKind::Sgd);
  CHECK_THROWS_AS(optimizer_kind_from_string("lion"), ConfigError);
}

TEST_CASE("first step on one point from zero-init output") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  const Network<float> net(small_net(), spec);
  TrainConfig cfg = small_train();
  cfg.cosine_loss_scale = 1.0;
  TrainState state = init_state(net, cfg);
  Batch batch;
  batch.x = MatrixXd::Constant(2, 1, 0.7);
  const StepResult res = train_step(state, net, spec, cfg, batch);
  CHECK(std::isfinite(res.loss));
  CHECK(res.loss > 0);
  CHECK(res.grad_norm > 0);
  CHECK(state.step == 1);
  CHECK(!(state.params == net.init_params()));
}

TEST_CASE("diffusion reduction when every pair has t = r") {
  const TransportSpec spec = make_transport(TransportKind::TrigFlow);
  const Network<float> net(small_net(), spec);
  const NetworkParams<float> params = net.random_params(4, 0.5);
  TrainConfig cfg = small_train();
  cfg.frac_t_eq_r = 1.0;
  cfg.frac_r_eq_0 = 0.0;
  const ToyDataset data = gaussians();
  Rng rng(9);
  const Batch batch = data.draw_batch(64, rng);
  const StepInputs in = draw_step_inputs(spec, cfg, batch, false, rng);
  const MatrixXd targets = build_targets(spec, in, frozen_df_dt(net, params, spec, cfg, in));
  const LossResult lr = loss_and_grad(net, params, spec, cfg, in, targets);
  const MatrixXd f = as_transition_fn(net, params)(in.x_t, in.t, in.r, {});
  double expected = 0;
  for (Eigen::Index j = 0; j < in.x.cols(); ++j) {
    CHECK(in.t(j) == in.r(j));
    const double t = in.t(j);
    const VectorXd diffusion = -std::sin(t) * in.x.col(j) + std::cos(t) * in.eps.col(j);
    CHECK((targets.col(j) - diffusion).cwiseAbs().maxCoeff() < 1e-15);
    const double l = (f.col(j) - targets.col(j)).squaredNorm();
    const double w = 1.0 / std::sqrt(cfg.weight.sigma_data);  // tan(t) - tan(r) = 0
    expected += w * l / (l + cfg.loss_norm_c) / in.x.cols();
  }
  CHECK(lr.loss == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("stop-gradient: injected df_dt gives identical gradients") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  const Network<float> net(small_net(), spec);
  const NetworkParams<float> params = net.random_params(8, 0.5);
  const TrainConfig cfg = small_train();
  const ToyDataset data = gaussians();
  Rng rng(2);
  const StepInputs in = draw_step_inputs(spec, cfg, data.draw_batch(32, rng), false, rng);
  const MatrixXd df = frozen_df_dt(net, params, spec, cfg, in);
  const MatrixXd injected = MatrixXd::Map(df.data(), df.rows(), df.cols());
  const LossResult a = loss_and_grad(net, params, spec, cfg, in, build_targets(spec, in, df));
  const LossResult b = loss_and_grad(net, params, spec, cfg, in, build_targets(spec, in, injected));
  CHECK(a.grads.values == b.grads.values);

  // A different frozen copy changes the targets but not how gradients flow:
  // same targets always give the same gradient.
  const NetworkParams<float> other = net.random_params(9, 0.5);
  const MatrixXd df_other = frozen_df_dt(net, other, spec, cfg, in);
  const LossResult c = loss_and_grad(net, params, spec, cfg, in, build_targets(spec, in, df_other));
  CHECK(!(c.grads.values == a.grads.values));
}

TEST_CASE("loss gradient matches finite differences of the detached surrogate") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  NetworkConfig nc = small_net();
  nc.width = 8;
  nc.embed_dim = 8;
  const Network<float> net(nc, spec);
  NetworkParams<float> params = net.random_params(21, 0.7);
  TrainConfig cfg = small_train();
  cfg.cosine_loss_scale = 0.5;
  const ToyDataset data = gaussians();
  Rng rng(4);
  const StepInputs in = draw_step_inputs(spec, cfg, data.draw_batch(8, rng), false, rng);
  const MatrixXd targets = build_targets(spec, in, frozen_df_dt(net, params, spec, cfg, in));
  const LossResult lr = loss_and_grad(net, params, spec, cfg, in, targets);

  // Independent evaluation: sum_i w_i L_i(theta) / (L_i(theta0) + c) / n.
  auto surrogate = [&](const NetworkParams<float>& p) {
    const MatrixXd f = net.forward(p, in.x_t.cast<float>(), in.t, in.r).cast<double>();
    double s = 0;
    for (Eigen::Index j = 0; j < f.cols(); ++j) {
      const VectorXd fj = f.col(j), tj = targets.col(j);
      const double cosv = fj.dot(tj) / (fj.norm() * tj.norm() + 1e-8);
      const double l = (fj - tj).squaredNorm() + cfg.cosine_loss_scale * (1 - cosv);
      s += lr.weights(j) * l / (lr.per_sample(j) + cfg.loss_norm_c) / f.cols();
    }
    return s;
  };
  const Eigen::Index size = params.values.size();
  int checked = 0;
  for (Eigen::Index k = 0; k < size; k += std::max<Eigen::Index>(1, size / 40)) {
    const float orig = params.values(k);
    const float h = 1e-2f;
    params.values(k) = orig + h;
    const double up = surrogate(params);
    params.values(k) = orig - h;
    const double down = surrogate(params);
    params.values(k) = orig;
    const double fd = (up - down) / (2.0 * h);
    const double an = lr.grads.values(k);
    CHECK(std::abs(fd - an) <= 2e-2 * std::max(1e-2, std::abs(fd)));
    ++checked;
  }
  CHECK(checked >= 40);
}

TEST_CASE("normalized loss is non-negative and bounded by the weight") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  const Network<float> net(small_net(), spec);
  const NetworkParams<float> params = net.random_params(1, 1.0);
  TrainConfig cfg = small_train();
  cfg.cosine_loss_scale = 1.0;
  const ToyDataset data = gaussians();
  Rng rng(12);
  const StepInputs in = draw_step_inputs(spec, cfg, data.draw_batch(128, rng), false, rng);
  const LossResult lr =
      loss_and_grad(net, params, spec, cfg, in, build_targets(spec, in, frozen_df_dt(net, params, spec, cfg, in)));
  double bound = 0;
  for (Eigen::Index j = 0; j < in.t.size(); ++j) {
    CHECK(lr.per_sample(j) >= 0);
    bound += lr.weights(j) / in.t.size();
  }
  CHECK(lr.loss >= 0);
  CHECK(lr.loss <= bound);
}

TEST_CASE("guidance with omega = 1 equals guidance off; warmup gates it") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  const ToyDataset data = gaussians();
  const Network<float> net(small_net(8), spec);
  TrainConfig off = small_train();
  TrainConfig on = off;
  on.guidance_enabled = true;
  on.guidance_omega = 1.0;
  on.guidance_warmup_iters = 0;
  TrainState a = init_state(net, off), b = init_state(net, on);
  a.params = a.ema = b.params = b.ema = net.random_params(5, 0.5);
  Rng data_rng(1);
  for (int i = 0; i < 3; ++i) {
    const Batch batch = data.draw_batch(32, data_rng);
    train_step(a, net, spec, off, batch);
    train_step(b, net, spec, on, batch);
  }
  CHECK(a.params == b.params);

  TrainConfig strong = on;
  strong.guidance_omega = 2.0;
  strong.guidance_warmup_iters = 2;
  TrainState c = init_state(net, strong), d = init_state(net, off);
  c.params = c.ema = d.params = d.ema = net.random_params(5, 0.5);
  Rng r1(1), r2(1);
  for (int i = 0; i < 2; ++i) {
    train_step(c, net, spec, strong, data.draw_batch(32, r1));
    train_step(d, net, spec, off, data.draw_batch(32, r2));
  }
  CHECK(c.params == d.params);
  train_step(c, net, spec, strong, data.draw_batch(32, r1));
  train_step(d, net, spec, off, data.draw_batch(32, r2));
  CHECK(!(c.params == d.params));
}

TEST_CASE("guided targets add (omega - 1)(cond - uncond)") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  const Network<float> net(small_net(8), spec);
  const NetworkParams<float> ema = net.random_params(3, 0.5);
  const ToyDataset data = gaussians();
  TrainConfig cfg = small_train();
  cfg.cond_dropout = 0;
  Rng rng(8);
  const StepInputs in = draw_step_inputs(spec, cfg, data.draw_batch(16, rng), true, rng);
  const MatrixXd df = MatrixXd::Zero(2, 16);
  const TransitionFn fn = as_transition_fn(net, ema);
  const MatrixXd plain = build_targets(spec, in, df);
  const MatrixXd guided = build_targets(spec, in, df, &fn, 1.75);
  const std::vector<int> null_ids(16, -1);
  const MatrixXd expected = plain + 0.75 * (fn(in.x_t, in.t, in.t, in.classes) - fn(in.x_t, in.t, in.t, null_ids));
  CHECK((guided - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("conditional dropout of one selects the null embedding") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  const Network<float> net(small_net(8), spec);
  const NetworkParams<float> params = net.random_params(6, 0.5);
  const ToyDataset data = gaussians();
  TrainConfig cfg = small_train();
  cfg.cond_dropout = 1.0;
  Rng rng(3);
  const Batch batch = data.draw_batch(64, rng);
  const StepInputs in = draw_step_inputs(spec, cfg, batch, true, rng);
  REQUIRE(in.classes.size() == 64);
  for (int c : in.classes) CHECK(c == -1);
  const auto with_drop = net.conditioning(params, in.t, in.r, in.classes);
  const auto null_only = net.conditioning(params, in.t, in.r, {});
  CHECK(with_drop == null_only);

  cfg.cond_dropout = 0.0;
  Rng rng2(3);
  const StepInputs kept = draw_step_inputs(spec, cfg, data.draw_batch(64, rng2), true, rng2);
  CHECK(kept.classes == data.draw_batch(64, *std::make_unique<Rng>(3)).classes);
}

TEST_CASE("adam update matches the scalar recurrence") {
  ParamLayout layout;
  layout.add("w", 3, 1);
  NetworkParams<float> p{layout, Eigen::VectorXf(3)};
  p.values << 1.0f, -2.0f, 0.5f;
  NetworkGrads<float> g{layout, Eigen::VectorXf(3)};
  AdamState opt;
  TrainConfig cfg;
  cfg.lr = 0.1;
  double m[3] = {0, 0, 0}, v[3] = {0, 0, 0}, x[3] = {1.0, -2.0, 0.5};
  const double grads[2][3] = {{0.3, -1.0, 0.0}, {-0.2, 0.4, 2.0}};
  for (int k = 0; k < 2; ++k) {
    for (int i = 0; i < 3; ++i) g.values(i) = static_cast<float>(grads[k][i]);
    apply_update(p, opt, g, cfg);
    for (int i = 0; i < 3; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[k][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[k][i] * grads[k][i];
      const double mh = m[i] / (1 - std::pow(0.9, k + 1)), vh = v[i] / (1 - std::pow(0.999, k + 1));
      x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(p.values(i) == doctest::Approx(x[i]).epsilon(1e-5));
    }
  }
  CHECK(opt.step == 2);

  cfg.optimizer = OptimizerKind::Sgd;
  cfg.grad_clip = 0.5;
  g.values << 3.0f, 4.0f, 0.0f;
  const Eigen::VectorXf before = p.values;
  const double norm = apply_update(p, opt, g, cfg);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(before(0) - p.values(0) == doctest::Approx(0.1 * 0.3).epsilon(1e-4));
  CHECK(before(1) - p.values(1) == doctest::Approx(0.1 * 0.4).epsilon(1e-4));
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  const Network<float> net(small_net(), spec);
  const TrainConfig cfg = small_train();
  TrainState state = init_state(net, cfg);
  Batch batch;
  batch.x = MatrixXd::Zero(2, 4);
  batch.x(0, 2) = std::numeric_limits<double>::quiet_NaN();
  try {
    train_step(state, net, spec, cfg, batch);
    FAIL("expected NumericAbort");
  } catch (const NumericAbort& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(t, r)") != std::string::npos);
    CHECK(msg.find("histogram") != std::string::npos);
  }
}

TEST_CASE("interval buckets") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  CHECK(interval_bucket(spec, 0.5, 0.5) == 0);
  CHECK(interval_bucket(spec, 0.5, 0.4) == 1);
  CHECK(interval_bucket(spec, 0.9, 0.4) == 2);
  CHECK(interval_bucket(spec, spec.t_max, spec.t_min) == 3);
}

TEST_CASE("run: zero iterations, determinism, resume") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  const ToyDataset data = gaussians();
  const NetworkConfig nc = small_net();
  TrainConfig cfg = small_train();

  cfg.iterations = 0;
  const TrainReport empty = run(spec, cfg, nc, data);
  CHECK(empty.loss.empty());
  CHECK(empty.probes.empty());
  CHECK(empty.final_state.params == Network<float>(nc, spec).init_params());

  cfg.iterations = 6;
  const TrainReport a = run(spec, cfg, nc, data);
  const TrainReport b = run(spec, cfg, nc, data);
  CHECK(a.loss.size() == 6);
  CHECK(a.final_state.params == b.final_state.params);
  CHECK(a.final_state.ema == b.final_state.ema);
  CHECK(a.loss == b.loss);

  TrainConfig half = cfg;
  half.iterations = 3;
  std::vector<long> seen;
  RunHooks hooks;
  hooks.checkpoint_every = 1;
  hooks.on_checkpoint = [&](const TrainState& s) { seen.push_back(s.step); };
  TrainReport first = run(spec, half, nc, data, hooks);
  CHECK(seen == std::vector<long>{1, 2, 3});
  const TrainReport resumed = run(spec, cfg, nc, data, {}, std::move(first.final_state));
  CHECK(resumed.loss.size() == 3);
  CHECK(resumed.final_state.step == 6);
  CHECK(resumed.final_state.params == a.final_state.params);
  CHECK(resumed.final_state.ema == a.final_state.ema);
  CHECK(resumed.final_state.opt == a.final_state.opt);

  TrainConfig other = cfg;
  other.seed = 4;
  CHECK(!(run(spec, other, nc, data).final_state.params == a.final_state.params));
}

TEST_CASE("multi-worker runs are reproducible and agree with one worker") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  const ToyDataset data = gaussians();
  const NetworkConfig nc = small_net();
  TrainConfig cfg = small_train();
  cfg.iterations = 3;
  cfg.workers = 3;
  const TrainReport a = run(spec, cfg, nc, data);
  const TrainReport b = run(spec, cfg, nc, data);
  CHECK(a.final_state.params == b.final_state.params);
  cfg.workers = 1;
  const TrainReport single = run(spec, cfg, nc, data);
  CHECK((a.final_state.params.values - single.final_state.params.values).cwiseAbs().maxCoeff() < 1e-4f);
}

TEST_CASE("probes and metrics log") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  const ToyDataset data = gaussians();
  TrainConfig cfg = small_train();
  cfg.iterations = 4;
  cfg.probe_every = 2;
  cfg.probe_samples = 64;
  const std::string path = "test_trainer_metrics.jsonl";
  std::remove(path.c_str());
  const MetricsWriter writer(path);
  RunHooks hooks;
  hooks.on_probe = [&](const ProbeRow& row) { writer.write(row); };
  const TrainReport rep = run(spec, cfg, small_net(), data, hooks);
  REQUIRE(rep.probes.size() == 2);
  CHECK(rep.probes[0].step == 2);
  CHECK(rep.probes[1].step == 4);
  for (double e : rep.probes[1].energy) CHECK(std::isfinite(e));

  // Probing never consumes training randomness.
  TrainConfig quiet = cfg;
  quiet.probe_samples = 0;
  CHECK(run(spec, quiet, small_net(), data).final_state.params == rep.final_state.params);

  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("energy_nfe16"));
    ++lines;
  }
  CHECK(lines == 2);
  std::remove(path.c_str());
}

TEST_CASE("delta data: a trained net lands one-step samples near the point") {
  const TransportSpec spec = make_transport(TransportKind::OtFm);
  DatasetConfig dc;
  dc.kind = DatasetKind::DeltaPoint;
  const ToyDataset data(dc);
  const VectorXd x0 = (VectorXd(2) << 0.5, -0.5).finished();
  const SampleSchedule one = build_schedule(spec, 1, ScheduleKind::Uniform);

  // The exact oracle through the same sampler sets the floor.
  Rng orng(7);
  const MatrixXd exact = sample(delta_oracle_fn({x0, spec}), spec, one, 2, 256, {}, orng);
  const double exact_err = (exact.colwise() - x0).colwise().norm().mean();
  CHECK(exact_err < 1e-3);

  NetworkConfig nc = small_net();
  nc.width = 64;
  TrainConfig cfg;
  cfg.iterations = 2000;
  cfg.batch_size = 64;
  cfg.lr = 1e-3;
  cfg.seed = 1;
  cfg.probe_samples = 0;
  const TrainReport rep = run(spec, cfg, nc, data);
  const Network<float> net(nc, spec);
  Rng rng(7);
  const MatrixXd x = sample(as_transition_fn(net, rep.final_state.params), spec, one, 2, 256, {}, rng);
  const double err = (data.denormalize(x).colwise() - x0).colwise().norm().mean();
  MESSAGE("mean one-step distance to x0: " << err);
  CHECK(err <= 0.1);
}
