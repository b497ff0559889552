#include "tim/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "tim/errors.hpp"

namespace tim {

std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::DeltaPoint: return "delta_point";
    case DatasetKind::Gaussian: return "gaussian";
    case DatasetKind::EightGaussians: return "eight_gaussians";
    case DatasetKind::Checkerboard: return "checkerboard";
    case DatasetKind::TwoMoons: return "two_moons";
    case DatasetKind::Csv: return "csv";
  }
  return "?";
}

DatasetKind dataset_kind_from_string(std::string_view name) {
  for (auto k : {DatasetKind::DeltaPoint, DatasetKind::Gaussian, DatasetKind::EightGaussians,
                 DatasetKind::Checkerboard, DatasetKind::TwoMoons, DatasetKind::Csv})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown dataset kind '" + std::string(name) + "'");
}

NormStats fit_stats(const Eigen::MatrixXd& raw, double sigma_data) {
  if (raw.cols() == 0) throw ShapeError("fit_stats: empty data");
  NormStats s;
  s.sigma_data = sigma_data;
  s.mean = raw.rowwise().mean();
  s.std = (raw.colwise() - s.mean).array().square().rowwise().mean().sqrt();
  for (Eigen::Index i = 0; i < s.std.size(); ++i)
    if (!(s.std(i) > kDegenerateEps))
      throw DegenerateError("fit_stats: axis " + std::to_string(i) + " has zero variance");
  return s;
}

NormStats identity_stats(Eigen::Index dim, double sigma_data) {
  return {Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Constant(dim, sigma_data), sigma_data};
}

Eigen::MatrixXd normalize(const Eigen::MatrixXd& raw, const NormStats& s) {
  if (!s.fitted()) throw std::logic_error("normalize: statistics not fitted");
  if (raw.rows() != s.mean.size()) throw ShapeError("normalize: dimension mismatch");
  return ((raw.colwise() - s.mean).array().colwise() * (s.sigma_data / s.std.array())).matrix();
}

Eigen::MatrixXd denormalize(const Eigen::MatrixXd& x, const NormStats& s) {
  if (!s.fitted()) throw std::logic_error("denormalize: statistics not fitted");
  if (x.rows() != s.mean.size()) throw ShapeError("denormalize: dimension mismatch");
  Eigen::MatrixXd out = (x.array().colwise() * (s.std.array() / s.sigma_data)).matrix();
  out.colwise() += s.mean;
  return out;
}

Eigen::MatrixXd read_point_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open point cloud '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("point cloud '" + path + "' is empty");
  const auto dim = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',') + 1);
  std::vector<double> values;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    Eigen::Index count = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ConfigError(path + ":" + std::to_string(row) + ": not a number '" + cell + "'");
      }
      ++count;
    }
    if (count != dim) throw ConfigError(path + ":" + std::to_string(row) + ": expected " + std::to_string(dim) + " columns");
  }
  if (values.empty()) throw ConfigError("point cloud '" + path + "' has no rows");
  return Eigen::Map<Eigen::MatrixXd>(values.data(), dim, static_cast<Eigen::Index>(values.size()) / dim);
}

ToyDataset::ToyDataset(DatasetConfig cfg) : cfg_(std::move(cfg)) {
  build_training_set();
  if (cfg_.kind == DatasetKind::DeltaPoint) {
    stats_ = identity_stats(dim_, cfg_.sigma_data);
  } else if (!train_.x.size()) {
    Rng rng = Rng::derive(cfg_.seed, 2);
    stats_ = fit_stats(draw_raw(cfg_.fit_samples, rng).x, cfg_.sigma_data);
  } else {
    stats_ = fit_stats(train_.x, cfg_.sigma_data);
  }
}

ToyDataset::ToyDataset(DatasetConfig cfg, NormStats stats) : cfg_(std::move(cfg)), stats_(std::move(stats)) {
  build_training_set();
  if (stats_.mean.size() != dim_) throw ShapeError("dataset statistics do not match the data dimension");
}

void ToyDataset::build_training_set() {
  switch (cfg_.kind) {
    case DatasetKind::DeltaPoint:
      dim_ = static_cast<Eigen::Index>(cfg_.point.size());
      break;
    case DatasetKind::Gaussian:
      if (cfg_.mean.size() != cfg_.std.size()) throw ConfigError("gaussian mean and std lengths differ");
      dim_ = static_cast<Eigen::Index>(cfg_.mean.size());
      break;
    case DatasetKind::Csv:
      train_.x = read_point_csv(cfg_.csv_path);
      dim_ = train_.x.rows();
      return;
    default:
      dim_ = 2;
  }
  if (cfg_.kind == DatasetKind::Checkerboard && cfg_.cells < 1) throw ConfigError("checkerboard needs at least one cell");
  if (dim_ < 1 || dim_ > 64) throw ConfigError("data dimension must be in [1, 64]");
  if (cfg_.n_train < 0) throw ConfigError("n_train must be non-negative");
  if (cfg_.n_train > 0) {
    Rng rng = Rng::derive(cfg_.seed, 1);
    train_ = draw_raw(cfg_.n_train, rng);
  }
}

Batch ToyDataset::draw_raw(int n, Rng& rng) const {
  if (n < 1) throw ShapeError("draw: n must be positive");
  Batch b;
  b.x.resize(dim_, n);
  switch (cfg_.kind) {
    case DatasetKind::DeltaPoint:
      for (int j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i < dim_; ++i) b.x(i, j) = cfg_.point[i];
      break;
    case DatasetKind::Gaussian:
      for (int j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i < dim_; ++i) b.x(i, j) = cfg_.mean[i] + cfg_.std[i] * rng.normal();
      break;
    case DatasetKind::EightGaussians:
      b.classes.resize(n);
      for (int j = 0; j < n; ++j) {
        const int k = rng.index(8);
        const double angle = 2 * std::numbers::pi * k / 8;
        b.classes[j] = k;
        b.x(0, j) = cfg_.radius * std::cos(angle) + cfg_.mode_std * rng.normal();
        b.x(1, j) = cfg_.radius * std::sin(angle) + cfg_.mode_std * rng.normal();
      }
      break;
    case DatasetKind::Checkerboard: {
      // Uniform over the cells with even (row + column), centered at the origin.
      const double half = 0.5 * cfg_.cells * cfg_.cell_size;
      for (int j = 0; j < n; ++j) {
        int row = 0, col = 0;
        do {
          row = rng.index(cfg_.cells);
          col = rng.index(cfg_.cells);
        } while ((row + col) % 2 != 0);
        b.x(0, j) = (col + rng.uniform()) * cfg_.cell_size - half;
        b.x(1, j) = (row + rng.uniform()) * cfg_.cell_size - half;
      }
      break;
    }
    case DatasetKind::TwoMoons:
      for (int j = 0; j < n; ++j) {
        const bool upper = rng.uniform() < 0.5;
        const double theta = std::numbers::pi * rng.uniform();
        b.x(0, j) = (upper ? std::cos(theta) : 1.0 - std::cos(theta)) + cfg_.moons_noise * rng.normal();
        b.x(1, j) = (upper ? std::sin(theta) : 0.5 - std::sin(theta)) + cfg_.moons_noise * rng.normal();
      }
      break;
    case DatasetKind::Csv:
      for (int j = 0; j < n; ++j) b.x.col(j) = train_.x.col(rng.index(static_cast<int>(train_.x.cols())));
      break;
  }
  return b;
}

Batch ToyDataset::draw_batch(int n, Rng& rng) const {
  Batch b;
  if (train_.x.size() > 0) {
    if (n < 1) throw ShapeError("draw: n must be positive");
    b.x.resize(dim_, n);
    if (!train_.classes.empty()) b.classes.resize(n);
    for (int j = 0; j < n; ++j) {
      const int idx = rng.index(static_cast<int>(train_.x.cols()));
      b.x.col(j) = train_.x.col(idx);
      if (!train_.classes.empty()) b.classes[j] = train_.classes[idx];
    }
  } else {
    b = draw_raw(n, rng);
  }
  b.x = normalize(b.x);
  return b;
}

}  // namespace tim
