#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "tim/oracle.hpp"
#include "tim/sampler.hpp"

using namespace tim;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// f = class id (or -1 for null) in every coordinate.
TransitionFn class_echo() {
  return [](const MatrixXd& x, const VectorXd&, const VectorXd&, std::span<const int> classes) {
    MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) out.col(j).setConstant(classes.empty() ? -1.0 : classes[j]);
    return out;
  };
}

}  // namespace

TEST_CASE("schedules") {
  const TransportSpec ot = make_transport(TransportKind::OtFm);
  const SampleSchedule one = build_schedule(ot, 1, ScheduleKind::Uniform);
  CHECK(one.times == std::vector<double>{ot.t_max, ot.t_min});
  const SampleSchedule four = build_schedule(ot, 4, ScheduleKind::Uniform);
  CHECK(four.times == std::vector<double>{1 - 1e-4, 0.75, 0.5, 0.25, 1e-4});
  const SampleSchedule shifted = build_schedule(ot, 2, ScheduleKind::Shifted, 4.0);
  CHECK(shifted.times[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  const TransportSpec tf = make_transport(TransportKind::TrigFlow);
  const SampleSchedule trig = build_schedule(tf, 2, ScheduleKind::Uniform);
  CHECK(trig.times[1] == doctest::Approx(std::numbers::pi / 4));
  CHECK(trig.times[0] == tf.t_max);
  CHECK_THROWS_AS(build_schedule(ot, 0, ScheduleKind::Uniform), DomainError);
  CHECK_THROWS_AS(build_schedule(ot, 3, ScheduleKind::Shifted), DomainError);
  SampleSchedule bad = four;
  bad.times[2] = 0.8;
  CHECK_THROWS_AS(validate(bad), DomainError);
}

TEST_CASE("NFE counting") {
  SampleSchedule s = build_schedule(make_transport(TransportKind::OtFm), 4, ScheduleKind::Uniform);
  CHECK(nfe_count(s) == 4);
  s.cfg_omega = 1.5;
  CHECK(nfe_count(s) == 8);
  s.cfg_omega = 1.0;
  s.rho = 0.1;
  CHECK(nfe_count(s) == 8);
}

TEST_CASE("NFE count matches evaluated columns") {
  const TransportSpec ot = make_transport(TransportKind::OtFm);
  for (double omega : {1.0, 2.0})
    for (double rho : {0.0, 0.05}) {
      SampleSchedule s = build_schedule(ot, 3, ScheduleKind::Uniform);
      s.cfg_omega = omega;
      s.rho = rho;
      CountingFn counter(class_echo());
      const std::vector<int> classes(5, 1);
      Rng rng(1);
      sample(counter.fn(), ot, s, 2, 5, classes, rng);
      CHECK(counter.columns() == 5L * nfe_count(s));
    }
}

TEST_CASE("one exact step on delta data lands on the data point") {
  const TransportSpec ot = make_transport(TransportKind::OtFm);
  const DeltaDataOracle o{Eigen::Vector2d(0.5, -0.5), ot};
  const SampleSchedule s = build_schedule(ot, 1, ScheduleKind::Uniform);
  Rng rng(2), noise_rng(2);
  const MatrixXd out = sample(delta_oracle_fn(o), ot, s, 2, 64, {}, rng);
  const CoeffBundle top = coeffs(ot, ot.t_max), bottom = coeffs(ot, ot.t_min);
  for (int j = 0; j < 64; ++j) {
    VectorXd z(2);
    z(0) = noise_rng.normal();
    z(1) = noise_rng.normal();
    const VectorXd eps = (top.sigma * z - top.alpha * o.x0) / top.sigma;
    CHECK((out.col(j) - (bottom.alpha * o.x0 + bottom.sigma * eps)).norm() < 1e-10);
    CHECK((out.col(j) - o.x0).norm() < 1e-3);
  }
}

TEST_CASE("deterministic path is reproducible and leaves the rng untouched") {
  const TransportSpec tf = make_transport(TransportKind::TrigFlow);
  const GaussianDataOracle g{Eigen::Vector2d(1, 0), Eigen::Vector2d(0.5, 0.2), tf};
  const SampleSchedule s = build_schedule(tf, 4, ScheduleKind::Uniform);
  Rng a(3), b(3), c(3);
  const MatrixXd x = sample(gaussian_oracle_fn(g), tf, s, 2, 32, {}, a);
  CHECK(x == sample(gaussian_oracle_fn(g), tf, s, 2, 32, {}, b));
  for (int i = 0; i < 64; ++i) c.normal();
  CHECK(a == c);
}

TEST_CASE("Gaussian oracle sampling matches the data at 1, 4 and 16 steps") {
  for (TransportKind k : {TransportKind::OtFm, TransportKind::TrigFlow}) {
    const TransportSpec spec = make_transport(k);
    const GaussianDataOracle g{Eigen::Vector2d(1.0, -0.5), Eigen::Vector2d(0.5, 1.5), spec};
    Rng data_rng(4);
    const MatrixXd ref = gaussian_draws(g, 1000, data_rng);
    for (int steps : {1, 4, 16}) {
      Rng rng(5);
      const MatrixXd x = sample(gaussian_oracle_fn(g), spec, build_schedule(spec, steps, ScheduleKind::Uniform), 2,
                                1000, {}, rng);
      INFO(to_string(k), " steps ", steps);
      CHECK(energy_distance(x, ref) < 0.05);
    }
  }
}

TEST_CASE("property: schedule refinement on the exact oracle") {
  const TransportSpec ot = make_transport(TransportKind::OtFm);
  const GaussianDataOracle g{Eigen::Vector2d(1.0, -0.5), Eigen::Vector2d(0.5, 1.5), ot};
  const TransitionFn f = gaussian_oracle_fn(g);
  const SampleSchedule coarse = build_schedule(ot, 4, ScheduleKind::Uniform);
  Rng pick(6);
  for (int trial = 0; trial < 10; ++trial) {
    SampleSchedule fine = coarse;
    for (int k = 0; k < 3; ++k) {
      const int i = pick.index(fine.steps);
      fine.times.insert(fine.times.begin() + i + 1, 0.5 * (fine.times[i] + fine.times[i + 1]));
      ++fine.steps;
    }
    Rng a(7), b(7);
    const MatrixXd xa = sample(f, ot, coarse, 2, 50, {}, a);
    const MatrixXd xb = sample(f, ot, fine, 2, 50, {}, b);
    CHECK((xa - xb).colwise().norm().maxCoeff() < 1e-6);
  }
}

TEST_CASE("classifier-free guidance mixes conditional and null outputs") {
  const TransportSpec ot = make_transport(TransportKind::OtFm);
  SampleSchedule s = build_schedule(ot, 1, ScheduleKind::Uniform);
  s.cfg_omega = 3.0;
  const std::vector<int> classes{2, 0};
  Rng rng(8);
  const MatrixXd x0 = MatrixXd::Zero(2, 2);
  const MatrixXd out = sample_from(class_echo(), ot, s, x0, classes, rng);
  const TransitionCoeffs tr = transition_coeffs(ot, s.times[0], s.times[1]);
  // f = -1 + 3 (c + 1)
  CHECK(out(0, 0) == doctest::Approx(tr.b * 8.0));
  CHECK(out(1, 1) == doctest::Approx(tr.b * 2.0));
  CHECK_THROWS_AS(sample_from(class_echo(), ot, s, x0, {}, rng), DomainError);
}

TEST_CASE("stochastic branch") {
  const TransportSpec ot = make_transport(TransportKind::OtFm);
  const GaussianDataOracle g{Eigen::Vector2d(1.0, -0.5), Eigen::Vector2d(0.5, 1.5), ot};
  SampleSchedule s = build_schedule(ot, 8, ScheduleKind::Uniform);
  s.rho = 0.05;
  Rng a(9), b(9), c(9);
  const MatrixXd x = sample(gaussian_oracle_fn(g), ot, s, 2, 200, {}, a);
  CHECK(x.allFinite());
  CHECK(x == sample(gaussian_oracle_fn(g), ot, s, 2, 200, {}, b));
  s.rho = 0;
  CHECK((x - sample(gaussian_oracle_fn(g), ot, s, 2, 200, {}, c)).norm() > 1e-3);
  s.rho = 0.05;
  s.eps_at_same_time = true;
  Rng d(9);
  CHECK(sample(gaussian_oracle_fn(g), ot, s, 2, 200, {}, d).allFinite());
}

TEST_CASE("non-finite states abort") {
  const TransportSpec ot = make_transport(TransportKind::OtFm);
  TransitionFn nan_fn = [](const MatrixXd& x, const VectorXd&, const VectorXd&, std::span<const int>) {
    return MatrixXd::Constant(x.rows(), x.cols(), std::nan("")).eval();
  };
  Rng rng(10);
  CHECK_THROWS_AS(sample(nan_fn, ot, build_schedule(ot, 2, ScheduleKind::Uniform), 2, 4, {}, rng), NumericAbort);
}

TEST_CASE("sample files") {
  MatrixXd x(2, 3);
  x << 1.5, -2, 0.125, 3, 4, 1e-3;
  write_samples_csv("test_samples.csv", x);
  CHECK(slurp("test_samples.csv") == "x0,x1\n1.5,3\n-2,4\n0.125,0.001\n");
  SampleMetadata meta;
  meta.transport = "ot_fm";
  meta.schedule = build_schedule(make_transport(TransportKind::OtFm), 2, ScheduleKind::Uniform);
  meta.n = 3;
  meta.nfe = 2;
  write_sample_metadata("test_samples.json", meta);
  const auto j = nlohmann::json::parse(slurp("test_samples.json"));
  CHECK(j["nfe"] == 2);
  CHECK(j["times"].size() == 3);
  write_scatter_ppm("test_samples.ppm", x, 64);
  const std::string img = slurp("test_samples.ppm");
  CHECK(img.rfind("P6\n64 64\n255\n", 0) == 0);
  CHECK(img.size() == std::string("P6\n64 64\n255\n").size() + 3 * 64 * 64);
  for (const char* p : {"test_samples.csv", "test_samples.json", "test_samples.ppm"}) std::remove(p);
}
