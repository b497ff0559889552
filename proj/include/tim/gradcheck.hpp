#pragma once

#include <string>

#include "tim/network.hpp"

namespace tim {

struct GradCheckResult {
  double max_rel_err = 0;
  std::string worst_block;
  Eigen::Index checked = 0;
};

/// Compares backward() against central differences of <forward, g> for
/// every parameter, with g a seeded random output gradient. The relative
/// error of one entry is |a - n| / max(|a|, |n|, floor).
GradCheckResult gradient_check(const Network<double>& net, const NetworkParams<double>& params,
                               const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                               const Eigen::VectorXd& r, std::span<const int> classes,
                               std::uint64_t seed, double h = 1e-4, double floor = 1e-4);

}  // namespace tim
