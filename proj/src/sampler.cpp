#include "tim/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "tim/errors.hpp"

namespace tim {

std::string_view to_string(ScheduleKind k) { return k == ScheduleKind::Uniform ? "uniform" : "shifted"; }

ScheduleKind schedule_kind_from_string(std::string_view name) {
  if (name == "uniform") return ScheduleKind::Uniform;
  if (name == "shifted") return ScheduleKind::Shifted;
  throw ConfigError("unknown schedule kind '" + std::string(name) + "'");
}

SampleSchedule build_schedule(const TransportSpec& spec, int steps, ScheduleKind kind,
                              std::optional<double> shift_ratio) {
  if (steps < 1) throw DomainError("schedule needs at least one step");
  if (kind == ScheduleKind::Shifted && !(shift_ratio && *shift_ratio > 0))
    throw DomainError("shifted schedule needs a positive shift ratio");
  SampleSchedule s;
  s.steps = steps;
  if (kind == ScheduleKind::Shifted) s.shift_ratio = shift_ratio;
  const TimeRange range = nominal_range(spec);
  s.times.resize(steps + 1);
  for (int i = 0; i <= steps; ++i) {
    double u = static_cast<double>(steps - i) / steps;
    if (kind == ScheduleKind::Shifted) u = shift_timestep(u, 1.0, *shift_ratio);
    s.times[i] = range.lo + (range.hi - range.lo) * u;
  }
  s.times.front() = spec.t_max;
  s.times.back() = spec.t_min;
  validate(s);
  return s;
}

void validate(const SampleSchedule& s) {
  if (s.steps < 1 || static_cast<int>(s.times.size()) != s.steps + 1)
    throw DomainError("schedule needs steps + 1 times");
  for (int i = 0; i < s.steps; ++i)
    if (!(s.times[i] > s.times[i + 1])) throw DomainError("schedule times must strictly decrease");
  if (!(s.rho >= 0)) throw DomainError("rho must be non-negative");
  if (!(s.cfg_omega >= 1)) throw DomainError("cfg omega must be at least 1");
}

int nfe_count(const SampleSchedule& s) {
  return s.steps * (s.cfg_omega > 1 ? 2 : 1) + (s.rho > 0 ? s.steps : 0);
}

Eigen::MatrixXd sample(const TransitionFn& f, const TransportSpec& spec, const SampleSchedule& sched,
                       Eigen::Index dim, int n, std::span<const int> classes, Rng& rng) {
  validate(sched);
  const double scale = coeffs(spec, sched.times.front()).sigma;
  Eigen::MatrixXd x(dim, n);
  for (int j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < dim; ++i) x(i, j) = scale * rng.normal();
  return sample_from(f, spec, sched, std::move(x), classes, rng);
}

Eigen::MatrixXd sample_from(const TransitionFn& f, const TransportSpec& spec, const SampleSchedule& sched,
                            Eigen::MatrixXd x, std::span<const int> classes, Rng& rng) {
  validate(sched);
  const Eigen::Index n = x.cols();
  if (!classes.empty() && static_cast<Eigen::Index>(classes.size()) != n)
    throw ShapeError("sample: one class id per sample expected");
  const bool guided = sched.cfg_omega > 1;
  if (guided && classes.empty()) throw DomainError("guided sampling needs class ids");
  const std::vector<int> null_ids(n, -1);

  for (int i = 0; i < sched.steps; ++i) {
    const double t = sched.times[i], r = sched.times[i + 1];
    const Eigen::VectorXd tv = Eigen::VectorXd::Constant(n, t), rv = Eigen::VectorXd::Constant(n, r);
    Eigen::MatrixXd out = f(x, tv, rv, classes);
    if (guided) {
      const Eigen::MatrixXd uncond = f(x, tv, rv, null_ids);
      out = uncond + sched.cfg_omega * (out - uncond);
    }
    const CoeffBundle ct = coeffs(spec, t);
    Eigen::MatrixXd next = apply_transition(x, out, transition_coeffs(ct, coeffs(spec, r)));

    if (sched.rho > 0) {
      const double r_eps = sched.eps_at_same_time ? t : sched.times.back();
      const Eigen::MatrixXd f_eps = f(x, tv, Eigen::VectorXd::Constant(n, r_eps), classes);
      const Eigen::MatrixXd eps_hat = x_eps_prediction(x, f_eps, ct).eps_hat;
      const double g = ct.alpha * ct.d_sigma - ct.d_alpha * ct.sigma;
      if (g < 0) throw DomainError("stochastic sampling needs a non-negative diffusion rate");
      const double dt = t - r;
      const double noise = std::sqrt(2 * sched.rho * g * dt);
      next -= sched.rho * g * dt * eps_hat;
      for (Eigen::Index k = 0; k < next.size(); ++k) next.data()[k] -= noise * rng.normal();
    }
    if (!next.allFinite()) throw NumericAbort("sampling produced a non-finite state at step " + std::to_string(i));
    x = std::move(next);
  }
  return x;
}

void write_samples_csv(const std::string& path, const Eigen::MatrixXd& samples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (Eigen::Index i = 0; i < samples.rows(); ++i) out << (i ? "," : "") << 'x' << i;
  out << '\n';
  char buf[32];
  for (Eigen::Index j = 0; j < samples.cols(); ++j) {
    for (Eigen::Index i = 0; i < samples.rows(); ++i) {
      std::snprintf(buf, sizeof buf, "%.9g", samples(i, j));
      out << (i ? "," : "") << buf;
    }
    out << '\n';
  }
}

void write_sample_metadata(const std::string& path, const SampleMetadata& meta) {
  nlohmann::json j;
  j["transport"] = meta.transport;
  j["steps"] = meta.schedule.steps;
  j["times"] = meta.schedule.times;
  j["rho"] = meta.schedule.rho;
  j["cfg_omega"] = meta.schedule.cfg_omega;
  j["seed"] = meta.schedule.seed;
  j["shift_ratio"] = meta.schedule.shift_ratio ? nlohmann::json(*meta.schedule.shift_ratio) : nlohmann::json();
  j["eps_at_same_time"] = meta.schedule.eps_at_same_time;
  j["n"] = meta.n;
  j["nfe"] = meta.nfe;
  j["ema"] = meta.ema;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

void write_scatter_ppm(const std::string& path, const Eigen::MatrixXd& samples, int size, double extent) {
  if (samples.rows() < 2) throw ShapeError("scatter plot needs two coordinates");
  if (extent <= 0) extent = 1.05 * std::max(samples.topRows(2).cwiseAbs().maxCoeff(), 1e-9);
  std::vector<unsigned char> img(3 * size * size, 255);
  auto plot = [&](int px, int py, unsigned char v) {
    if (px < 0 || py < 0 || px >= size || py >= size) return;
    unsigned char* p = &img[3 * (py * size + px)];
    p[0] = std::min(p[0], v);
    p[1] = std::min(p[1], v);
    p[2] = 255;
  };
  for (int k = 0; k < size; ++k) {
    plot(k, size / 2, 200);
    plot(size / 2, k, 200);
  }
  for (Eigen::Index j = 0; j < samples.cols(); ++j) {
    const int px = static_cast<int>((samples(0, j) / extent + 1) * 0.5 * (size - 1));
    const int py = static_cast<int>((1 - samples(1, j) / extent) * 0.5 * (size - 1));
    plot(px, py, 40);
    plot(px + 1, py, 40);
    plot(px, py + 1, 40);
    plot(px + 1, py + 1, 40);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "P6\n" << size << ' ' << size << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

}  // namespace tim
