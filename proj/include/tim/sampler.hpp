#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tim/rng.hpp"
#include "tim/transition.hpp"
#include "tim/transport.hpp"

namespace tim {

enum class ScheduleKind { Uniform, Shifted };

std::string_view to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(std::string_view name);

struct SampleSchedule {
  int steps = 1;
  std::vector<double> times;  ///< t_N > ... > t_0, size steps + 1
  double rho = 0.0;
  double cfg_omega = 1.0;
  std::uint64_t seed = 0;
  std::optional<double> shift_ratio;
  /// Stochastic branch: estimate eps from f(x, t_i, t_i) instead of f(x, t_i, t_0).
  bool eps_at_same_time = false;
};

/// Uniform grid over the transport's nominal range (optionally warped by
/// shift_timestep with m/n = shift_ratio) with endpoints pinned to t_max
/// and t_min. Throws DomainError for steps < 1 or a non-decreasing grid.
SampleSchedule build_schedule(const TransportSpec& spec, int steps, ScheduleKind kind,
                              std::optional<double> shift_ratio = std::nullopt);

/// Throws DomainError unless times are strictly decreasing with the right count.
void validate(const SampleSchedule& sched);

/// Model evaluations spent by one sample() pass per sample.
int nfe_count(const SampleSchedule& sched);

/// Piecewise transition sampling from sigma_{t_max} z, z ~ N(0, I). classes
/// holds one id per sample or is empty (unconditional). With cfg_omega > 1
/// each step mixes f_uncond + omega (f_cond - f_uncond).
Eigen::MatrixXd sample(const TransitionFn& f, const TransportSpec& spec, const SampleSchedule& sched,
                       Eigen::Index dim, int n, std::span<const int> classes, Rng& rng);

/// Same loop starting from a given state at t_N.
Eigen::MatrixXd sample_from(const TransitionFn& f, const TransportSpec& spec, const SampleSchedule& sched,
                            Eigen::MatrixXd x, std::span<const int> classes, Rng& rng);

/// One row per sample, header x0,x1,...
void write_samples_csv(const std::string& path, const Eigen::MatrixXd& samples);

struct SampleMetadata {
  std::string transport;
  SampleSchedule schedule;
  int n = 0;
  int nfe = 0;
  bool ema = true;
};

/// JSON sidecar describing how a sample file was produced.
void write_sample_metadata(const std::string& path, const SampleMetadata& meta);

/// Binary PPM scatter plot of the first two coordinates.
void write_scatter_ppm(const std::string& path, const Eigen::MatrixXd& samples, int size = 512,
                       double extent = 0.0);

}  // namespace tim
