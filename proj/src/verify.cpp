#include "tim/verify.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>

#include "tim/gradcheck.hpp"
#include "tim/oracle.hpp"
#include "tim/sampler.hpp"
#include "tim/transition.hpp"
#include "tim/transport.hpp"

namespace tim {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr TransportKind kAllKinds[] = {TransportKind::OtFm, TransportKind::TrigFlow, TransportKind::Edm,
                                       TransportKind::Vp, TransportKind::Ve};

VectorXd normals(Rng& rng, Eigen::Index n) {
  VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

double fit_slope(const std::vector<double>& lx, const std::vector<double>& ly) {
  const double n = static_cast<double>(lx.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sx += lx[i];
    sy += ly[i];
    sxx += lx[i] * lx[i];
    sxy += lx[i] * ly[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

struct Battery {
  const VerifyOptions& opts;
  std::vector<CheckResult> results;

  TransitionCoeffs coeffs_for(const TransportSpec& spec, double t, double r) const {
    TransitionCoeffs tr = transition_coeffs(spec, t, r);
    if (opts.corrupt_db_dt) tr.db_dt *= 1.5;
    return tr;
  }

  VectorXd target(const TransportSpec& spec, const VectorXd& x, const VectorXd& eps, double t, double r,
                  const VectorXd& df_dt) const {
    return tim_target(x, eps, df_dt, coeffs(spec, t), coeffs_for(spec, t, r));
  }

  void add(std::string name, double value, double threshold, bool passed, std::string detail = {}) {
    results.push_back({std::move(name), passed && std::isfinite(value), value, threshold, std::move(detail)});
  }

  // Interior time and an earlier time, both away from the endpoints.
  std::pair<double, double> pair(const TransportSpec& spec, Rng& rng) const {
    const double span = spec.t_max - spec.t_min;
    const double t = spec.t_min + span * (0.05 + 0.9 * rng.uniform());
    const double r = spec.t_min + (t - spec.t_min) * (0.05 + 0.9 * rng.uniform());
    return {t, r};
  }

  void transport_derivatives() {
    Rng rng(101);
    double worst = 0;
    std::string where;
    for (TransportKind k : kAllKinds) {
      const TransportSpec spec = make_transport(k);
      for (int i = 0; i < 50; ++i) {
        const double t = pair(spec, rng).first;
        const double h = 1e-6 * std::max(1.0, std::abs(t));
        const CoeffBundle c = coeffs(spec, t);
        const CoeffBundle p = coeffs_unchecked(spec, t + h), m = coeffs_unchecked(spec, t - h);
        const double fd[4] = {(p.alpha - m.alpha) / (2 * h), (p.sigma - m.sigma) / (2 * h),
                              (p.alpha_hat - m.alpha_hat) / (2 * h), (p.sigma_hat - m.sigma_hat) / (2 * h)};
        const double an[4] = {c.d_alpha, c.d_sigma, c.d_alpha_hat, c.d_sigma_hat};
        for (int j = 0; j < 4; ++j) {
          const double err = std::abs(fd[j] - an[j]) / std::max(1.0, std::abs(an[j]));
          if (err > worst) {
            worst = err;
            where = std::string(to_string(k));
          }
        }
      }
    }
    add("transport derivatives vs finite differences", worst, 1e-6, worst < 1e-6, where);
  }

  void closed_forms() {
    Rng rng(102);
    double worst = 0;
    for (TransportKind k : {TransportKind::OtFm, TransportKind::TrigFlow, TransportKind::Ve}) {
      const TransportSpec spec = make_transport(k);
      for (int i = 0; i < 100; ++i) {
        const auto [t, r] = pair(spec, rng);
        double a = 1, b = 0, db = 0;
        switch (k) {
          case TransportKind::OtFm: a = 1; b = r - t; db = -1; break;
          case TransportKind::TrigFlow: a = std::cos(t - r); b = std::sin(r - t); db = -std::cos(r - t); break;
          default: a = 1; b = t - r; db = 1; break;
        }
        const TransitionCoeffs tr = coeffs_for(spec, t, r);
        worst = std::max({worst, std::abs(tr.a - a), std::abs(tr.b - b), std::abs(tr.db_dt - db)});
      }
    }
    add("closed-form A, B, dB/dt (OT-FM, TrigFlow, VE)", worst, 1e-12, worst < 1e-12);

    double worst_fd = 0;
    for (TransportKind k : {TransportKind::Vp, TransportKind::Edm}) {
      const TransportSpec spec = make_transport(k);
      for (int i = 0; i < 100; ++i) {
        const auto [t, r] = pair(spec, rng);
        const double h = 1e-5 * std::max(1.0, t);
        const CoeffBundle at_r = coeffs(spec, r);
        const double fd = (transition_coeffs(coeffs_unchecked(spec, t + h), at_r).b -
                           transition_coeffs(coeffs_unchecked(spec, t - h), at_r).b) /
                          (2 * h);
        const double an = coeffs_for(spec, t, r).db_dt;
        worst_fd = std::max(worst_fd, std::abs(fd - an) / std::max(1.0, std::abs(an)));
      }
    }
    add("dB/dt vs finite-difference B (VP, EDM)", worst_fd, 1e-6, worst_fd < 1e-6);
  }

  void identity() {
    Rng rng(103);
    double worst_exact = 0, worst_fixed = 0, least_zero = INFINITY;
    const TransitionFn zero = [](const MatrixXd& x, const VectorXd&, const VectorXd&, std::span<const int>) {
      return MatrixXd::Zero(x.rows(), x.cols()).eval();
    };
    for (TransportKind k : {TransportKind::OtFm, TransportKind::TrigFlow}) {
      const TransportSpec spec = make_transport(k);
      for (int i = 0; i < 100; ++i) {
        const DeltaDataOracle oracle{normals(rng, 2), spec};
        const VectorXd x = oracle.x0, eps = normals(rng, 2);
        const auto [t, r] = pair(spec, rng);
        worst_exact = std::max(worst_exact, identity_residual(delta_oracle_fn(oracle), x, eps, t, r, spec));
        least_zero = std::min(least_zero, identity_residual(zero, x, eps, t, r, spec));

      }
    }
    add("identity residual of the exact oracle", worst_exact, 1e-6, worst_exact < 1e-6);
    add("identity residual of the zero network", least_zero, 1e-2, least_zero > 1e-2, "must exceed");

    // Field with B (alpha_hat x + sigma_hat eps - f) = K along the path, so it
    // satisfies the identity with a nonzero correction term.
    double worst_product = 0;
    for (TransportKind k : {TransportKind::OtFm, TransportKind::TrigFlow, TransportKind::Vp}) {
      const TransportSpec spec = make_transport(k);
      for (int i = 0; i < 100; ++i) {
        const VectorXd x = normals(rng, 2), eps = normals(rng, 2), kv = normals(rng, 2);
        const double span = spec.t_max - spec.t_min;
        const double t = spec.t_min + span * (0.4 + 0.55 * rng.uniform());
        const double r = spec.t_min + (t - spec.t_min - 0.2 * span) * rng.uniform();
        auto field = [&](double tau) -> VectorXd {
          const CoeffBundle c = coeffs(spec, tau);
          return c.alpha_hat * x + c.sigma_hat * eps - kv / transition_coeffs(c, coeffs(spec, r)).b;
        };
        const double h = 1e-5 * std::max(1.0, t);
        const VectorXd df = (field(t + h) - field(t - h)) / (2 * h);
        const VectorXd f = field(t);
        worst_fixed = std::max(worst_fixed, (target(spec, x, eps, t, r, df) - f).norm() / (1 + f.norm()));
        const CoeffBundle c = coeffs(spec, t);
        const TransitionCoeffs tr = coeffs_for(spec, t, r);
        const VectorXd residual = tr.db_dt * (c.alpha_hat * x + c.sigma_hat * eps - f) +
                                  tr.b * (c.d_alpha_hat * x + c.d_sigma_hat * eps - df);
        worst_product = std::max(worst_product, residual.norm() / (1 + kv.norm()));
      }
    }
    add("identity residual by the product rule", worst_product, 1e-6, worst_product < 1e-6);
    add("identity-satisfying field is a fixed point of the target", worst_fixed, 1e-6, worst_fixed < 1e-6);
  }

  void reductions() {
    Rng rng(104);
    const TransportSpec ot = make_transport(TransportKind::OtFm);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      const VectorXd x = normals(rng, 3), eps = normals(rng, 3), df = normals(rng, 3);
      const auto [t, r] = pair(ot, rng);
      const VectorXd meanflow = (eps - x) - (t - r) * df;
      worst = std::max(worst, (target(ot, x, eps, t, r, df) - meanflow).cwiseAbs().maxCoeff());
    }
    add("MeanFlow reduction under OT-FM", worst, 1e-12, worst < 1e-12);

    double min_slope = INFINITY;
    for (TransportKind k : {TransportKind::OtFm, TransportKind::TrigFlow}) {
      const TransportSpec spec = make_transport(k);
      const VectorXd x = normals(rng, 2), eps = normals(rng, 2), df = normals(rng, 2);
      const double t = 0.6;
      const CoeffBundle c = coeffs(spec, t);
      const VectorXd diffusion = c.alpha_hat * x + c.sigma_hat * eps;
      std::vector<double> lx, ly;
      for (double gap = 1e-1; gap > 1e-5; gap /= 10) {
        lx.push_back(std::log(gap));
        ly.push_back(std::log((target(spec, x, eps, t, t - gap, df) - diffusion).norm()));
      }
      min_slope = std::min(min_slope, fit_slope(lx, ly));
    }
    add("diffusion limit slope as t - r -> 0", min_slope, 1.0, min_slope >= 1.0 - 1e-6, "must be at least");
  }

  void dde_order() {
    const TransportSpec spec = make_transport(TransportKind::TrigFlow);
    const VectorXd v = (VectorXd(2) << 0.7, -1.2).finished();
    // f(x_t, t) = sin(3t) v + t^2 x_t, with analytic total derivative along the path.
    const TransitionFn f = [v](const MatrixXd& xt, const VectorXd& t, const VectorXd&, std::span<const int>) {
      MatrixXd out(xt.rows(), xt.cols());
      for (Eigen::Index j = 0; j < xt.cols(); ++j) out.col(j) = std::sin(3 * t(j)) * v + t(j) * t(j) * xt.col(j);
      return out;
    };
    const VectorXd x = (VectorXd(2) << 0.3, 0.9).finished(), eps = (VectorXd(2) << -0.5, 1.1).finished();
    const double t = 0.7, r = 0.2;
    const CoeffBundle c = coeffs(spec, t);
    const VectorXd xt = c.alpha * x + c.sigma * eps;
    const VectorXd exact =
        3 * std::cos(3 * t) * v + 2 * t * xt + t * t * (c.d_alpha * x + c.d_sigma * eps);
    std::vector<double> lx, ly;
    for (double e : {1e-3, 3e-3, 1e-2, 3e-2, 1e-1}) {
      lx.push_back(std::log(e));
      ly.push_back(std::log((dde(f, x, eps, t, r, std::nullopt, spec, e) - exact).norm()));
    }
    const double slope = fit_slope(lx, ly);
    add("DDE error order in eps_fd", slope, 2.0, std::abs(slope - 2.0) <= 0.1, "2 +- 0.1");

    CountingFn counter(f);
    dde(counter.fn(), x, eps, t, r, std::nullopt, spec, 5e-3);
    add("DDE forward evaluations per call", static_cast<double>(counter.calls()), 2.0, counter.calls() == 2);
  }

  void gradients() {
    Rng rng(105);
    auto batch = [&](int rows, int cols) {
      MatrixXd m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
      return m;
    };
    NetworkConfig mlp;
    mlp.dim = 2;
    mlp.width = 3;
    mlp.depth = 1;
    mlp.embed_dim = 4;
    mlp.fourier_bands = 2;
    mlp.n_classes = 2;
    const Network<double> mnet(mlp, make_transport(TransportKind::OtFm));
    const VectorXd t = (VectorXd(3) << 0.9, 0.5, 0.3).finished(), r = (VectorXd(3) << 0.2, 0.5, 0.1).finished();
    const std::vector<int> cls{0, -1, 1};
    const GradCheckResult a = gradient_check(mnet, mnet.random_params(10), batch(2, 3), t, r, cls, 12);
    add("gradient check: micro MLP", a.max_rel_err, 1e-4, a.max_rel_err < 1e-4, a.worst_block);

    NetworkConfig att;
    att.backbone = Backbone::TokenAttention;
    att.dim = 4;
    att.n_tokens = 2;
    att.n_heads = 1;
    att.width = 2;
    att.depth = 1;
    att.embed_dim = 3;
    att.fourier_bands = 1;
    att.n_classes = 2;
    const Network<double> anet(att, make_transport(TransportKind::OtFm));
    const VectorXd t2 = (VectorXd(2) << 0.8, 0.4).finished(), r2 = (VectorXd(2) << 0.1, 0.3).finished();
    const std::vector<int> cls2{1, -1};
    const GradCheckResult b = gradient_check(anet, anet.random_params(16), batch(4, 2), t2, r2, cls2, 18);
    add("gradient check: 2-token attention", b.max_rel_err, 1e-4, b.max_rel_err < 1e-4, b.worst_block);
  }

  void shift_round_trip() {
    double worst = 0;
    for (int i = 1; i < 100; ++i) {
      const double t = i / 100.0;
      worst = std::max(worst, std::abs(shift_timestep(shift_timestep(t, 256, 1024), 1024, 256) - t));
    }
    worst = std::max(worst, std::abs(shift_timestep(0.5, 1, 4) - 2.0 / 3.0));
    add("timestep shift round trip", worst, 1e-12, worst < 1e-12);
  }

  void gaussian_sampler() {
    const TransportSpec spec = make_transport(TransportKind::OtFm);
    const GaussianDataOracle oracle{(VectorXd(2) << 0.5, -1.0).finished(), (VectorXd(2) << 0.8, 0.3).finished(), spec};
    const TransitionFn f = gaussian_oracle_fn(oracle);
    Rng ref_rng(106);
    const MatrixXd ref = gaussian_draws(oracle, 1000, ref_rng);
    double worst = 0;
    for (int steps : {1, 4, 16}) {
      Rng rng(107);
      const MatrixXd x = sample(f, spec, build_schedule(spec, steps, ScheduleKind::Uniform), 2, 1000, {}, rng);
      worst = std::max(worst, energy_distance(x, ref));
    }
    add("Gaussian-oracle sampler energy distance (1/4/16 steps)", worst, 0.05, worst < 0.05);

    Rng r1(108), r2(108);
    const MatrixXd coarse = sample(f, spec, build_schedule(spec, 4, ScheduleKind::Uniform), 2, 200, {}, r1);
    const MatrixXd fine = sample(f, spec, build_schedule(spec, 8, ScheduleKind::Uniform), 2, 200, {}, r2);
    const double diff = (coarse - fine).cwiseAbs().maxCoeff();
    add("schedule refinement changes outputs by", diff, 1e-6, diff < 1e-6);
  }
};

}  // namespace

std::vector<CheckResult> run_verify(const VerifyOptions& opts) {
  Battery b{opts, {}};
  const std::pair<const char*, std::function<void()>> steps[] = {
      {"transport derivatives", [&] { b.transport_derivatives(); }},
      {"closed forms", [&] { b.closed_forms(); }},
      {"identity", [&] { b.identity(); }},
      {"reductions", [&] { b.reductions(); }},
      {"DDE", [&] { b.dde_order(); }},
      {"gradients", [&] { b.gradients(); }},
      {"shift", [&] { b.shift_round_trip(); }},
  };
  for (const auto& [name, fn] : steps) {
    try {
      fn();
    } catch (const std::exception& e) {
      b.add(name, NAN, 0, false, std::string("threw: ") + e.what());
    }
  }
  if (opts.full) {
    try {
      b.gaussian_sampler();
    } catch (const std::exception& e) {
      b.add("Gaussian-oracle sampler", NAN, 0, false, std::string("threw: ") + e.what());
    }
  }
  return b.results;
}

}  // namespace tim
