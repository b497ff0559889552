#include "tim/transport.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "tim/errors.hpp"

namespace tim {

std::string_view to_string(TransportKind kind) {
  switch (kind) {
    case TransportKind::OtFm: return "ot_fm";
    case TransportKind::TrigFlow: return "trigflow";
    case TransportKind::Edm: return "edm";
    case TransportKind::Vp: return "vp";
    case TransportKind::Ve: return "ve";
  }
  return "?";
}

TransportKind transport_kind_from_string(std::string_view name) {
  for (auto k : {TransportKind::OtFm, TransportKind::TrigFlow, TransportKind::Edm,
                 TransportKind::Vp, TransportKind::Ve}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown transport kind '" + std::string(name) + "'");
}

TransportSpec make_transport(TransportKind kind) {
  TransportSpec spec;
  spec.kind = kind;
  switch (kind) {
    case TransportKind::OtFm:
      spec.t_max = 1.0 - 1e-4;
      break;
    case TransportKind::TrigFlow:
      spec.t_max = std::numbers::pi / 2 - 1e-4;
      break;
    case TransportKind::Edm:
      spec.t_max = 80.0;
      break;
    case TransportKind::Vp:
      spec.t_max = 1.0;
      break;
    case TransportKind::Ve:
      spec.t_min = spec.ve_sigma_min;
      spec.t_max = spec.ve_sigma_max;
      break;
  }
  return spec;
}

void validate(const TransportSpec& spec) {
  auto fail = [](const std::string& msg) { throw DomainError("transport: " + msg); };
  if (!(spec.t_min < spec.t_max)) fail("t_min must be below t_max");
  if (!(spec.sigma_data > 0)) fail("sigma_data must be positive");
  if (!(spec.p_std > 0)) fail("p_std must be positive");
  if (!(spec.ve_sigma_min > 0) || !(spec.ve_sigma_max > spec.ve_sigma_min))
    fail("VE sigma range must be positive and increasing");
  switch (spec.kind) {
    case TransportKind::OtFm:
      if (spec.t_min < 0 || spec.t_max > 1) fail("OT-FM time range must lie in [0, 1]");
      break;
    case TransportKind::TrigFlow:
      if (spec.t_min < 0 || spec.t_max > std::numbers::pi / 2)
        fail("TrigFlow time range must lie in [0, pi/2]");
      break;
    case TransportKind::Edm:
      if (!(spec.t_min > 0)) fail("EDM requires t_min > 0");
      break;
    case TransportKind::Vp:
      if (!(spec.t_min > 0) || spec.t_max > 1) fail("VP time range must lie in (0, 1]");
      if (!(spec.vp_beta_d >= 0) || !(spec.vp_beta_min > 0) || !(spec.vp_T > 1))
        fail("VP schedule constants out of range");
      break;
    case TransportKind::Ve:
      if (spec.t_min < spec.ve_sigma_min || spec.t_max > spec.ve_sigma_max)
        fail("VE time range must lie in [sigma_min, sigma_max]");
      break;
  }
}

CoeffBundle coeffs_unchecked(const TransportSpec& spec, double t) {
  CoeffBundle c;
  switch (spec.kind) {
    case TransportKind::OtFm:
      c.alpha = 1.0 - t;
      c.sigma = t;
      c.alpha_hat = -1.0;
      c.sigma_hat = 1.0;
      c.d_alpha = -1.0;
      c.d_sigma = 1.0;
      break;
    case TransportKind::TrigFlow: {
      const double ct = std::cos(t), st = std::sin(t);
      c.alpha = ct;
      c.sigma = st;
      c.alpha_hat = -st;
      c.sigma_hat = ct;
      c.d_alpha = -st;
      c.d_sigma = ct;
      c.d_alpha_hat = -ct;
      c.d_sigma_hat = -st;
      break;
    }
    case TransportKind::Edm: {
      // alpha = 1/s, sigma = t/s with s = sqrt(t^2 + sd^2).
      const double sd = spec.sigma_data;
      const double s2 = t * t + sd * sd;
      const double s = std::sqrt(s2);
      const double s3 = s2 * s;
      c.alpha = 1.0 / s;
      c.sigma = t / s;
      c.alpha_hat = t / (sd * s);
      c.sigma_hat = -sd / s;
      c.d_alpha = -t / s3;
      c.d_sigma = sd * sd / s3;
      c.d_alpha_hat = sd / s3;
      c.d_sigma_hat = t * sd / s3;
      break;
    }
    case TransportKind::Vp: {
      // beta_t^2 + 1 = exp(E), E = beta_d t^2 / 2 + beta_min t, so that
      // alpha = exp(-E/2) and sigma = sqrt(1 - exp(-E)).
      const double e = 0.5 * spec.vp_beta_d * t * t + spec.vp_beta_min * t;
      const double de = spec.vp_beta_d * t + spec.vp_beta_min;
      c.alpha = std::exp(-0.5 * e);
      c.sigma = std::sqrt(-std::expm1(-e));
      c.alpha_hat = 0.0;
      c.sigma_hat = 1.0;
      c.d_alpha = -0.5 * de * c.alpha;
      c.d_sigma = 0.5 * de * std::exp(-e) / c.sigma;
      break;
    }
    case TransportKind::Ve:
      c.alpha = 1.0;
      c.sigma = t;
      c.alpha_hat = 0.0;
      c.sigma_hat = -1.0;
      c.d_sigma = 1.0;
      break;
  }
  return c;
}

namespace {

void check_range(const TransportSpec& spec, double t) {
  if (!(t >= spec.t_min && t <= spec.t_max)) {
    std::ostringstream os;
    os << "time " << t << " outside [" << spec.t_min << ", " << spec.t_max << "] for "
       << to_string(spec.kind);
    throw DomainError(os.str());
  }
}

}  // namespace

CoeffBundle coeffs(const TransportSpec& spec, double t) {
  check_range(spec, t);
  CoeffBundle c = coeffs_unchecked(spec, t);
  if (std::abs(c.denominator()) < kDegenerateEps) {
    std::ostringstream os;
    os << "transport " << to_string(spec.kind) << " has vanishing denominator at t=" << t;
    throw DegenerateError(os.str());
  }
  return c;
}

double c_noise(const TransportSpec& spec, double t) {
  switch (spec.kind) {
    case TransportKind::OtFm:
    case TransportKind::TrigFlow:
      return t;
    case TransportKind::Edm:
      if (!(t > 0)) throw DomainError("EDM c_noise needs t > 0");
      return 0.25 * std::log(t);
    case TransportKind::Vp:
      return (spec.vp_T - 1.0) * t;
    case TransportKind::Ve:
      if (!(t > 0)) throw DomainError("VE c_noise needs t > 0");
      return std::log(0.5 * t);
  }
  return t;
}

double time_from_draw(const TransportSpec& spec, double draw) {
  double t = 0;
  switch (spec.kind) {
    case TransportKind::OtFm: {
      const double sigma = std::exp(draw);
      t = sigma / (1.0 + sigma);
      break;
    }
    case TransportKind::TrigFlow:
      t = std::atan(std::exp(draw) / spec.sigma_data);
      break;
    case TransportKind::Edm:
      t = std::exp(draw);
      break;
    case TransportKind::Vp:
      t = draw;
      break;
    case TransportKind::Ve:
      // Geometric interpolation from sigma_max (draw 0) to sigma_min (draw 1).
      t = spec.ve_sigma_max * std::pow(spec.ve_sigma_min / spec.ve_sigma_max, draw);
      break;
  }
  return std::clamp(t, spec.t_min, spec.t_max);
}

double sample_time(const TransportSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case TransportKind::OtFm:
    case TransportKind::TrigFlow:
    case TransportKind::Edm:
      return time_from_draw(spec, rng.normal(spec.p_mean, spec.p_std));
    case TransportKind::Vp:
      return time_from_draw(spec, rng.uniform(spec.t_min, 1.0));
    case TransportKind::Ve:
      return time_from_draw(spec, rng.uniform());
  }
  return spec.t_min;
}

double shift_timestep(double t_n, double n, double m) {
  if (t_n == 1.0) return 1.0;
  const double s = std::sqrt(m / n);
  return s * t_n / (1.0 + (s - 1.0) * t_n);
}

TimeRange nominal_range(const TransportSpec& spec) {
  switch (spec.kind) {
    case TransportKind::OtFm:
      return {0.0, 1.0};
    case TransportKind::TrigFlow:
      return {0.0, std::numbers::pi / 2};
    case TransportKind::Vp:
      return {0.0, 1.0};
    case TransportKind::Edm:
    case TransportKind::Ve:
      return {spec.t_min, spec.t_max};
  }
  return {spec.t_min, spec.t_max};
}

}  // namespace tim
