#include "tim/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "tim/rng.hpp"

namespace tim {

GradCheckResult gradient_check(const Network<double>& net, const NetworkParams<double>& params,
                               const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                               const Eigen::VectorXd& r, std::span<const int> classes,
                               std::uint64_t seed, double h, double floor) {
  Rng rng(seed);
  Eigen::MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();

  ForwardCache<double> cache;
  net.forward(params, x, t, r, classes, &cache);
  const NetworkGrads<double> analytic = net.backward(params, cache, g);

  auto objective = [&](const NetworkParams<double>& p) {
    return (net.forward(p, x, t, r, classes).array() * g.array()).sum();
  };

  GradCheckResult result;
  NetworkParams<double> probe = params;
  for (const ParamBlock& b : params.layout.blocks()) {
    for (Eigen::Index k = b.offset; k < b.offset + b.size(); ++k) {
      const double orig = probe.values(k);
      probe.values(k) = orig + h;
      const double up = objective(probe);
      probe.values(k) = orig - h;
      const double down = objective(probe);
      probe.values(k) = orig;
      const double num = (up - down) / (2 * h);
      const double ana = analytic.values(k);
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_block = b.name;
      }
      ++result.checked;
    }
  }
  return result;
}

}  // namespace tim
