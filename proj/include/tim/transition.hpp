#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <span>
#include <string_view>

#include "tim/errors.hpp"
#include "tim/transport.hpp"

namespace tim {

/// Batched transition function f(x_t, t, r | class). Columns of x_t are
/// samples; t and r hold one time per column. An empty class span means
/// unconditional evaluation.
using TransitionFn = std::function<Eigen::MatrixXd(
    const Eigen::MatrixXd& x_t, const Eigen::VectorXd& t, const Eigen::VectorXd& r,
    std::span<const int> classes)>;

/// A(t,r), B(t,r), dB/dt and the denominator C(t).
struct TransitionCoeffs {
  double a = 1;
  double b = 0;
  double db_dt = 0;
  double c = 1;
};

/// Requires t_min <= r <= t <= t_max.
TransitionCoeffs transition_coeffs(const TransportSpec& spec, double t, double r);

/// Same algebra from precomputed bundles, without ordering or range checks.
TransitionCoeffs transition_coeffs(const CoeffBundle& at_t, const CoeffBundle& at_r);

/// x_r = a x_t + b f. Works on single vectors and on column batches.
template <typename DerivedX, typename DerivedF>
auto apply_transition(const Eigen::MatrixBase<DerivedX>& x_t, const Eigen::MatrixBase<DerivedF>& f,
                      const TransitionCoeffs& coeffs) {
  return (coeffs.a * x_t + coeffs.b * f).eval();
}

/// Clean-data and noise estimates implied by a diffusion-style output f.
template <typename Plain>
struct Predictions {
  Plain x_hat;
  Plain eps_hat;
};

template <typename DerivedX, typename DerivedF>
auto x_eps_prediction(const Eigen::MatrixBase<DerivedX>& x_t, const Eigen::MatrixBase<DerivedF>& f_out,
                      const CoeffBundle& c) {
  using Plain = typename DerivedX::PlainObject;
  const double denom = c.denominator();
  if (std::abs(denom) < kDegenerateEps) throw DegenerateError("x/eps prediction: vanishing denominator");
  return Predictions<Plain>{Plain((c.sigma_hat * x_t - c.sigma * f_out) / denom),
                            Plain((c.alpha * f_out - c.alpha_hat * x_t) / denom)};
}

template <typename DerivedX, typename DerivedF>
auto x_eps_prediction(const Eigen::MatrixBase<DerivedX>& x_t, const Eigen::MatrixBase<DerivedF>& f_out,
                      const TransportSpec& spec, double t) {
  return x_eps_prediction(x_t, f_out, coeffs(spec, t));
}

/// Central-difference estimate of the total time derivative of f along the
/// noising path through (x, eps), using exactly two evaluations of f.
/// Requires [t - eps_fd, t + eps_fd] inside the transport's range.
Eigen::VectorXd dde(const TransitionFn& f, const Eigen::VectorXd& x, const Eigen::VectorXd& eps,
                    double t, double r, std::optional<int> cond, const TransportSpec& spec,
                    double eps_fd);

/// Column-batched DDE: per-column times, two batched evaluations in total.
Eigen::MatrixXd dde_batch(const TransitionFn& f, const Eigen::MatrixXd& x, const Eigen::MatrixXd& eps,
                          const Eigen::VectorXd& t, const Eigen::VectorXd& r,
                          std::span<const int> classes, const TransportSpec& spec, double eps_fd);

/// Clamps t into [t_min + eps_fd, t_max - eps_fd] so both DDE probes stay in range.
double clamp_for_dde(const TransportSpec& spec, double t, double eps_fd);

/// Learning target
///   f_hat = a_hat x + s_hat eps + (B / B') (a_hat' x + s_hat' eps - df_dt).
/// When B is exactly zero the correction is skipped.
Eigen::VectorXd tim_target(const Eigen::VectorXd& x, const Eigen::VectorXd& eps, double t, double r,
                           const Eigen::VectorXd& df_dt, const TransportSpec& spec);

/// Target from explicit coefficients at t and the (t, r) transition.
template <typename DX, typename DE, typename DD>
auto tim_target(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DE>& eps,
                const Eigen::MatrixBase<DD>& df_dt, const CoeffBundle& at_t,
                const TransitionCoeffs& tr) {
  using Plain = typename DX::PlainObject;
  Plain base = at_t.alpha_hat * x + at_t.sigma_hat * eps;
  if (tr.b == 0.0) return base;
  if (std::abs(tr.db_dt) < kDegenerateEps) throw DegenerateError("tim_target: vanishing dB/dt");
  const double ratio = tr.b / tr.db_dt;
  return Plain(base + ratio * (at_t.d_alpha_hat * x + at_t.d_sigma_hat * eps - df_dt));
}

enum class WeightKernel { Reciprocal, SoftMinSnr, Sqrt, Square };
enum class TimeWarp { Identity, Rational, Tangent };

std::string_view to_string(WeightKernel k);
std::string_view to_string(TimeWarp w);
WeightKernel weight_kernel_from_string(std::string_view name);
TimeWarp time_warp_from_string(std::string_view name);

struct WeightScheme {
  WeightKernel kernel = WeightKernel::Sqrt;
  TimeWarp warp = TimeWarp::Tangent;
  double sigma_data = 1.0;

  bool operator==(const WeightScheme&) const = default;
};

/// Warped time tau(t). Throws DomainError at the warp's pole.
double warp_time(TimeWarp warp, double t);

/// w(t, r) = k(tau(t), tau(r)).
double interval_weight(double t, double r, const WeightScheme& scheme);

/// Norm of d/dt [ B_{t,r} (a_hat x + s_hat eps - f(x_t, t, r)) ] by central
/// differences of step h_fd; x_t is rebuilt from (x, eps) at each probe.
/// Zero (up to rounding) exactly when f satisfies the transition identity.
double identity_residual(const TransitionFn& f, const Eigen::VectorXd& x, const Eigen::VectorXd& eps,
                         double t, double r, const TransportSpec& spec, double h_fd = 1e-5);

/// Wraps a transition function and counts evaluated columns.
class CountingFn {
 public:
  explicit CountingFn(TransitionFn inner) : inner_(std::move(inner)) {}
  TransitionFn fn();
  long calls() const { return calls_; }
  long columns() const { return columns_; }

 private:
  TransitionFn inner_;
  long calls_ = 0;
  long columns_ = 0;
};

}  // namespace tim
