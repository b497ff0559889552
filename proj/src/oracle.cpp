#include "tim/oracle.hpp"

#include <cmath>

namespace tim {

namespace {

// Below this |b| a transition is treated as its t = r limit.
constexpr double kLimitEps = 1e-14;

Eigen::VectorXd recover_noise(const DeltaDataOracle& o, const Eigen::VectorXd& x_t, const CoeffBundle& c) {
  if (std::abs(c.sigma) < kDegenerateEps) throw DegenerateError("delta oracle: sigma_t vanishes");
  return (x_t - c.alpha * o.x0) / c.sigma;
}

}  // namespace

Eigen::VectorXd delta_exact_f(const DeltaDataOracle& oracle, const Eigen::VectorXd& eps, double t,
                              double r) {
  const CoeffBundle at_t = coeffs(oracle.spec, t);
  const CoeffBundle at_r = coeffs(oracle.spec, r);
  const TransitionCoeffs tr = transition_coeffs(at_t, at_r);
  if (std::abs(tr.b) < kLimitEps) return at_t.alpha_hat * oracle.x0 + at_t.sigma_hat * eps;
  const Eigen::VectorXd x_t = at_t.alpha * oracle.x0 + at_t.sigma * eps;
  const Eigen::VectorXd x_r = at_r.alpha * oracle.x0 + at_r.sigma * eps;
  return (x_r - tr.a * x_t) / tr.b;
}

TransitionFn delta_oracle_fn(const DeltaDataOracle& oracle) {
  return [oracle](const Eigen::MatrixXd& x_t, const Eigen::VectorXd& t, const Eigen::VectorXd& r,
                  std::span<const int>) {
    Eigen::MatrixXd out(x_t.rows(), x_t.cols());
    for (Eigen::Index j = 0; j < x_t.cols(); ++j) {
      const CoeffBundle c = coeffs(oracle.spec, t(j));
      out.col(j) = delta_exact_f(oracle, recover_noise(oracle, x_t.col(j), c), t(j), r(j));
    }
    return out;
  };
}

Eigen::MatrixXd gaussian_exact_xpred(const GaussianDataOracle& oracle, const Eigen::MatrixXd& x_t,
                                     double t) {
  const CoeffBundle c = coeffs(oracle.spec, t);
  const Eigen::ArrayXd cov = oracle.cov_diag.array();
  const Eigen::ArrayXd denom = c.alpha * c.alpha * cov + c.sigma * c.sigma;
  Eigen::MatrixXd out(x_t.rows(), x_t.cols());
  for (Eigen::Index j = 0; j < x_t.cols(); ++j) {
    out.col(j) = ((c.alpha * cov * x_t.col(j).array() + c.sigma * c.sigma * oracle.mean.array()) / denom)
                     .matrix();
  }
  return out;
}

Eigen::MatrixXd gaussian_exact_transition(const GaussianDataOracle& oracle, const Eigen::MatrixXd& x_t,
                                          double t, double r) {
  const CoeffBundle ct = coeffs(oracle.spec, t);
  const CoeffBundle cr = coeffs(oracle.spec, r);
  const Eigen::ArrayXd cov = oracle.cov_diag.array();
  const Eigen::ArrayXd s_t = (ct.alpha * ct.alpha * cov + ct.sigma * ct.sigma).sqrt();
  const Eigen::ArrayXd s_r = (cr.alpha * cr.alpha * cov + cr.sigma * cr.sigma).sqrt();
  const Eigen::ArrayXd ratio = s_r / s_t;
  Eigen::MatrixXd out(x_t.rows(), x_t.cols());
  for (Eigen::Index j = 0; j < x_t.cols(); ++j) {
    out.col(j) = (cr.alpha * oracle.mean.array() +
                  ratio * (x_t.col(j).array() - ct.alpha * oracle.mean.array()))
                     .matrix();
  }
  return out;
}

TransitionFn gaussian_oracle_fn(const GaussianDataOracle& oracle) {
  return [oracle](const Eigen::MatrixXd& x_t, const Eigen::VectorXd& t, const Eigen::VectorXd& r,
                  std::span<const int>) {
    Eigen::MatrixXd out(x_t.rows(), x_t.cols());
    for (Eigen::Index j = 0; j < x_t.cols(); ++j) {
      const CoeffBundle ct = coeffs(oracle.spec, t(j));
      const TransitionCoeffs tr = transition_coeffs(ct, coeffs(oracle.spec, r(j)));
      const Eigen::MatrixXd xj = x_t.col(j);
      if (std::abs(tr.b) < kLimitEps) {
        const Eigen::MatrixXd x_hat = gaussian_exact_xpred(oracle, xj, t(j));
        const Eigen::MatrixXd eps_hat = (xj - ct.alpha * x_hat) / ct.sigma;
        out.col(j) = ct.alpha_hat * x_hat + ct.sigma_hat * eps_hat;
      } else {
        const Eigen::MatrixXd x_r = gaussian_exact_transition(oracle, xj, t(j), r(j));
        out.col(j) = (x_r - tr.a * xj) / tr.b;
      }
    }
    return out;
  };
}

Eigen::MatrixXd gaussian_draws(const GaussianDataOracle& oracle, int n, Rng& rng) {
  const Eigen::Index d = oracle.mean.size();
  Eigen::MatrixXd out(d, n);
  for (int j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < d; ++i)
      out(i, j) = oracle.mean(i) + std::sqrt(oracle.cov_diag(i)) * rng.normal();
  return out;
}

namespace {

struct KahanSum {
  double sum = 0, carry = 0;
  void add(double v) {
    const double y = v - carry;
    const double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
};

double mean_pair_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  KahanSum acc;
  for (Eigen::Index i = 0; i < a.cols(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) acc.add((a.col(i) - b.col(j)).norm());
  return acc.sum / (static_cast<double>(a.cols()) * static_cast<double>(b.cols()));
}

}  // namespace

double energy_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() == 0 || b.cols() == 0) throw ShapeError("energy_distance: empty sample set");
  if (a.rows() != b.rows()) throw ShapeError("energy_distance: dimension mismatch");
  return 2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b);
}

}  // namespace tim
