#pragma once

#include <string>
#include <string_view>

#include "tim/rng.hpp"

namespace tim {

enum class TransportKind { OtFm, TrigFlow, Edm, Vp, Ve };

std::string_view to_string(TransportKind kind);
TransportKind transport_kind_from_string(std::string_view name);

/// One diffusion transport: forward coefficients (alpha, sigma), target
/// coefficients (alpha_hat, sigma_hat), time scaling and time distribution.
struct TransportSpec {
  TransportKind kind = TransportKind::OtFm;
  double sigma_data = 1.0;
  double t_min = 1e-4;
  double t_max = 1.0 - 1e-4;
  double vp_beta_d = 19.9;
  double vp_beta_min = 0.1;
  double vp_T = 1000.0;
  double ve_sigma_min = 0.01;
  double ve_sigma_max = 50.0;
  double p_mean = -0.4;
  double p_std = 1.0;

  bool operator==(const TransportSpec&) const = default;
};

/// Default constants for a transport kind.
TransportSpec make_transport(TransportKind kind);

/// Throws DomainError when the constants are inconsistent.
void validate(const TransportSpec& spec);

/// alpha_t, sigma_t, alpha_hat_t, sigma_hat_t and their time derivatives.
struct CoeffBundle {
  double alpha = 0, sigma = 0, alpha_hat = 0, sigma_hat = 0;
  double d_alpha = 0, d_sigma = 0, d_alpha_hat = 0, d_sigma_hat = 0;

  /// sigma_hat * alpha - alpha_hat * sigma, the common denominator.
  double denominator() const { return sigma_hat * alpha - alpha_hat * sigma; }
  double d_denominator() const {
    return d_sigma_hat * alpha + sigma_hat * d_alpha - d_alpha_hat * sigma - alpha_hat * d_sigma;
  }
};

/// Closed-form coefficients at time t. Throws DomainError outside
/// [t_min, t_max] and DegenerateError when the denominator vanishes.
CoeffBundle coeffs(const TransportSpec& spec, double t);

/// Same closed forms without the range check; used by finite-difference
/// probes that step slightly past an endpoint.
CoeffBundle coeffs_unchecked(const TransportSpec& spec, double t);

/// Time scaling fed to the network.
double c_noise(const TransportSpec& spec, double t);

/// Maps a raw noise-level draw to a time. For OT-FM, TrigFlow and EDM the
/// draw is ln(sigma); for VP and VE it is the uniform variate. Clamped to
/// [t_min, t_max].
double time_from_draw(const TransportSpec& spec, double draw);

/// Draws a training time from the transport's time distribution.
double sample_time(const TransportSpec& spec, Rng& rng);

/// Resolution-dependent shift t_m = s t_n / (1 + (s - 1) t_n), s = sqrt(m / n).
double shift_timestep(double t_n, double n, double m);

/// Range over which uniform sampling grids are laid out before the
/// endpoints are pinned to [t_min, t_max].
struct TimeRange {
  double lo;
  double hi;
};
TimeRange nominal_range(const TransportSpec& spec);

}  // namespace tim
