#pragma once

#include <Eigen/Dense>

#include "tim/transition.hpp"
#include "tim/transport.hpp"

namespace tim {

/// Data distribution concentrated on a single point x0. Every trajectory is
/// a straight combination of x0 and its noise, so the exact transition
/// function is available in closed form.
struct DeltaDataOracle {
  Eigen::VectorXd x0;
  TransportSpec spec;
};

/// f* = (x_r - a x_t) / b with x_t, x_r built from (x0, eps). At t = r the
/// diffusion-limit value alpha_hat x0 + sigma_hat eps is returned.
Eigen::VectorXd delta_exact_f(const DeltaDataOracle& oracle, const Eigen::VectorXd& eps, double t,
                              double r);

/// The delta oracle as a transition function of x_t: the noise is recovered
/// as (x_t - alpha_t x0) / sigma_t.
TransitionFn delta_oracle_fn(const DeltaDataOracle& oracle);

/// Axis-aligned Gaussian data N(mean, diag(cov_diag)).
struct GaussianDataOracle {
  Eigen::VectorXd mean;
  Eigen::VectorXd cov_diag;
  TransportSpec spec;
};

/// Posterior mean E[x | x_t].
Eigen::MatrixXd gaussian_exact_xpred(const GaussianDataOracle& oracle, const Eigen::MatrixXd& x_t,
                                     double t);

/// Exact probability-flow map x_t -> x_r. Per axis the flow keeps the
/// standardized coordinate (x - alpha m) / s fixed, s^2 = alpha^2 c + sigma^2.
Eigen::MatrixXd gaussian_exact_transition(const GaussianDataOracle& oracle, const Eigen::MatrixXd& x_t,
                                          double t, double r);

/// Transition function whose one-step transitions are exact for Gaussian
/// data; uses the posterior mean at t = r.
TransitionFn gaussian_oracle_fn(const GaussianDataOracle& oracle);

/// Draws n samples from the Gaussian data distribution (columns).
Eigen::MatrixXd gaussian_draws(const GaussianDataOracle& oracle, int n, Rng& rng);

/// V-statistic energy distance 2 E|a-b| - E|a-a'| - E|b-b'| over all pairs
/// (columns are samples). Summation order is fixed and compensated.
double energy_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

}  // namespace tim
