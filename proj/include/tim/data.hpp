#pragma once

#include <Eigen/Dense>
#include <string>
#include <string_view>
#include <vector>

#include "tim/rng.hpp"

namespace tim {

enum class DatasetKind { DeltaPoint, Gaussian, EightGaussians, Checkerboard, TwoMoons, Csv };

std::string_view to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(std::string_view name);

struct DatasetConfig {
  DatasetKind kind = DatasetKind::EightGaussians;
  int n_train = 0;  ///< 0 = fresh draws every batch
  std::uint64_t seed = 0;
  double sigma_data = 1.0;
  int fit_samples = 100000;  ///< draws used to fit statistics for streamed kinds
  std::vector<double> point{0.5, -0.5};                  // DeltaPoint
  std::vector<double> mean{0.0, 0.0};                    // Gaussian
  std::vector<double> std{1.0, 1.0};                     // Gaussian, per axis
  double radius = 2.0;                                    // EightGaussians
  double mode_std = 0.2;                                  // EightGaussians
  int cells = 4;                                          // Checkerboard, cells per side
  double cell_size = 1.0;                                 // Checkerboard
  double moons_noise = 0.05;                              // TwoMoons
  std::string csv_path;                                   // Csv

  bool operator==(const DatasetConfig&) const = default;
};

struct Batch {
  Eigen::MatrixXd x;         ///< one sample per column
  std::vector<int> classes;  ///< empty for unlabeled data
};

/// Per-axis affine normalization x -> sigma_data (x - mean) / std.
struct NormStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;
  double sigma_data = 1.0;

  bool fitted() const { return mean.size() > 0 && mean.size() == std.size(); }
  bool operator==(const NormStats& o) const {
    return sigma_data == o.sigma_data && mean.size() == o.mean.size() && std.size() == o.std.size() &&
           mean == o.mean && std == o.std;
  }
};

/// Fits mean and population std per axis. Throws DegenerateError on a
/// zero-variance axis.
NormStats fit_stats(const Eigen::MatrixXd& raw, double sigma_data);
NormStats identity_stats(Eigen::Index dim, double sigma_data = 1.0);

/// Throw std::logic_error when the statistics are not fitted.
Eigen::MatrixXd normalize(const Eigen::MatrixXd& raw, const NormStats& stats);
Eigen::MatrixXd denormalize(const Eigen::MatrixXd& x, const NormStats& stats);

/// Reads a point cloud with a header row of dimension names.
Eigen::MatrixXd read_point_csv(const std::string& path);

class ToyDataset {
 public:
  explicit ToyDataset(DatasetConfig cfg);
  /// Uses previously fitted statistics instead of refitting (checkpoint restore).
  ToyDataset(DatasetConfig cfg, NormStats stats);

  const DatasetConfig& config() const { return cfg_; }
  const NormStats& stats() const { return stats_; }
  Eigen::Index dim() const { return dim_; }
  int n_classes() const { return cfg_.kind == DatasetKind::EightGaussians ? 8 : 0; }

  /// Unnormalized i.i.d. draws from the generating distribution.
  Batch draw_raw(int n, Rng& rng) const;
  /// Normalized training batch: resampled from the fixed training set when
  /// n_train > 0, fresh draws otherwise.
  Batch draw_batch(int n, Rng& rng) const;

  Eigen::MatrixXd normalize(const Eigen::MatrixXd& raw) const { return tim::normalize(raw, stats_); }
  Eigen::MatrixXd denormalize(const Eigen::MatrixXd& x) const { return tim::denormalize(x, stats_); }

 private:
  void build_training_set();

  DatasetConfig cfg_;
  Eigen::Index dim_ = 2;
  NormStats stats_;
  Batch train_;
};

}  // namespace tim
