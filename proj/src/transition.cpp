#include "tim/transition.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

namespace tim {

TransitionCoeffs transition_coeffs(const CoeffBundle& at_t, const CoeffBundle& at_r) {
  const double c = at_t.denominator();
  if (std::abs(c) < kDegenerateEps) throw DegenerateError("transition: vanishing denominator C(t)");
  const double num_b = at_r.sigma * at_t.alpha - at_r.alpha * at_t.sigma;
  const double d_num_b = at_r.sigma * at_t.d_alpha - at_r.alpha * at_t.d_sigma;
  TransitionCoeffs out;
  out.c = c;
  out.a = (at_r.alpha * at_t.sigma_hat - at_r.sigma * at_t.alpha_hat) / c;
  out.b = num_b / c;
  out.db_dt = (d_num_b * c - num_b * at_t.d_denominator()) / (c * c);
  return out;
}

TransitionCoeffs transition_coeffs(const TransportSpec& spec, double t, double r) {
  if (r > t) {
    std::ostringstream os;
    os << "transition requires r <= t (t=" << t << ", r=" << r << ")";
    throw DomainError(os.str());
  }
  return transition_coeffs(coeffs(spec, t), coeffs(spec, r));
}

double clamp_for_dde(const TransportSpec& spec, double t, double eps_fd) {
  const double lo = spec.t_min + eps_fd;
  const double hi = spec.t_max - eps_fd;
  if (lo > hi) throw DomainError("DDE step wider than the transport's time range");
  return std::clamp(t, lo, hi);
}

namespace {

void check_dde_range(const TransportSpec& spec, double t, double eps_fd) {
  if (!(eps_fd > 0)) throw DomainError("DDE step must be positive");
  if (t - eps_fd < spec.t_min || t + eps_fd > spec.t_max) {
    std::ostringstream os;
    os << "DDE probes t +- " << eps_fd << " around t=" << t << " leave the time range";
    throw DomainError(os.str());
  }
}

}  // namespace

Eigen::VectorXd dde(const TransitionFn& f, const Eigen::VectorXd& x, const Eigen::VectorXd& eps,
                    double t, double r, std::optional<int> cond, const TransportSpec& spec,
                    double eps_fd) {
  check_dde_range(spec, t, eps_fd);
  const CoeffBundle plus = coeffs(spec, t + eps_fd);
  const CoeffBundle minus = coeffs(spec, t - eps_fd);
  const Eigen::MatrixXd x_plus = plus.alpha * x + plus.sigma * eps;
  const Eigen::MatrixXd x_minus = minus.alpha * x + minus.sigma * eps;
  const Eigen::VectorXd rr = Eigen::VectorXd::Constant(1, r);
  std::vector<int> cls;
  if (cond) cls.push_back(*cond);
  const Eigen::MatrixXd f_plus = f(x_plus, Eigen::VectorXd::Constant(1, t + eps_fd), rr, cls);
  const Eigen::MatrixXd f_minus = f(x_minus, Eigen::VectorXd::Constant(1, t - eps_fd), rr, cls);
  return (f_plus.col(0) - f_minus.col(0)) / (2.0 * eps_fd);
}

Eigen::MatrixXd dde_batch(const TransitionFn& f, const Eigen::MatrixXd& x, const Eigen::MatrixXd& eps,
                          const Eigen::VectorXd& t, const Eigen::VectorXd& r,
                          std::span<const int> classes, const TransportSpec& spec, double eps_fd) {
  const Eigen::Index n = x.cols();
  Eigen::MatrixXd x_plus(x.rows(), n), x_minus(x.rows(), n);
  Eigen::VectorXd t_plus(n), t_minus(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    check_dde_range(spec, t(j), eps_fd);
    t_plus(j) = t(j) + eps_fd;
    t_minus(j) = t(j) - eps_fd;
    const CoeffBundle p = coeffs(spec, t_plus(j));
    const CoeffBundle m = coeffs(spec, t_minus(j));
    x_plus.col(j) = p.alpha * x.col(j) + p.sigma * eps.col(j);
    x_minus.col(j) = m.alpha * x.col(j) + m.sigma * eps.col(j);
  }
  const Eigen::MatrixXd f_plus = f(x_plus, t_plus, r, classes);
  const Eigen::MatrixXd f_minus = f(x_minus, t_minus, r, classes);
  return (f_plus - f_minus) / (2.0 * eps_fd);
}

Eigen::VectorXd tim_target(const Eigen::VectorXd& x, const Eigen::VectorXd& eps, double t, double r,
                           const Eigen::VectorXd& df_dt, const TransportSpec& spec) {
  const CoeffBundle at_t = coeffs(spec, t);
  return tim_target(x, eps, df_dt, at_t, transition_coeffs(spec, t, r));
}

std::string_view to_string(WeightKernel k) {
  switch (k) {
    case WeightKernel::Reciprocal: return "reciprocal";
    case WeightKernel::SoftMinSnr: return "soft_min_snr";
    case WeightKernel::Sqrt: return "sqrt";
    case WeightKernel::Square: return "square";
  }
  return "?";
}

std::string_view to_string(TimeWarp w) {
  switch (w) {
    case TimeWarp::Identity: return "identity";
    case TimeWarp::Rational: return "rational";
    case TimeWarp::Tangent: return "tangent";
  }
  return "?";
}

WeightKernel weight_kernel_from_string(std::string_view name) {
  for (auto k : {WeightKernel::Reciprocal, WeightKernel::SoftMinSnr, WeightKernel::Sqrt,
                 WeightKernel::Square})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown weight kernel '" + std::string(name) + "'");
}

TimeWarp time_warp_from_string(std::string_view name) {
  for (auto w : {TimeWarp::Identity, TimeWarp::Rational, TimeWarp::Tangent})
    if (to_string(w) == name) return w;
  throw ConfigError("unknown time warp '" + std::string(name) + "'");
}

double warp_time(TimeWarp warp, double t) {
  switch (warp) {
    case TimeWarp::Identity:
      return t;
    case TimeWarp::Rational:
      if (t >= 1.0) throw DomainError("rational warp pole at t = 1");
      return t / (1.0 - t);
    case TimeWarp::Tangent:
      if (t >= std::numbers::pi / 2) throw DomainError("tangent warp pole at t = pi/2");
      return std::tan(t);
  }
  return t;
}

double interval_weight(double t, double r, const WeightScheme& scheme) {
  if (r > t) throw DomainError("interval weight requires r <= t");
  const double delta = warp_time(scheme.warp, t) - warp_time(scheme.warp, r);
  const double sd = scheme.sigma_data;
  switch (scheme.kernel) {
    case WeightKernel::Reciprocal:
      return 1.0 / (sd + delta);
    case WeightKernel::SoftMinSnr:
      return 1.0 / (sd * sd + delta * delta);
    case WeightKernel::Sqrt:
      return 1.0 / std::sqrt(sd + delta);
    case WeightKernel::Square:
      return 1.0 / ((sd + delta) * (sd + delta));
  }
  return 1.0;
}

double identity_residual(const TransitionFn& f, const Eigen::VectorXd& x, const Eigen::VectorXd& eps,
                         double t, double r, const TransportSpec& spec, double h_fd) {
  const CoeffBundle at_r = coeffs(spec, r);
  const Eigen::VectorXd rr = Eigen::VectorXd::Constant(1, r);
  auto weighted_residual = [&](double tau) -> Eigen::VectorXd {
    const CoeffBundle c = coeffs(spec, tau);
    const TransitionCoeffs tr = transition_coeffs(c, at_r);
    const Eigen::MatrixXd x_tau = c.alpha * x + c.sigma * eps;
    const Eigen::MatrixXd f_tau = f(x_tau, Eigen::VectorXd::Constant(1, tau), rr, {});
    return tr.b * (c.alpha_hat * x + c.sigma_hat * eps - f_tau.col(0));
  };
  return ((weighted_residual(t + h_fd) - weighted_residual(t - h_fd)) / (2.0 * h_fd)).norm();
}

TransitionFn CountingFn::fn() {
  return [this](const Eigen::MatrixXd& x, const Eigen::VectorXd& t, const Eigen::VectorXd& r,
                std::span<const int> classes) {
    ++calls_;
    columns_ += x.cols();
    return inner_(x, t, r, classes);
  };
}

}  // namespace tim
