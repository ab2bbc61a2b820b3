#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "targprof/csv.hpp"

namespace targprof {

// Rectangular analysis data. Provider ids are contiguous and 0-based
// internally; the original labels are kept for reporting.
struct Dataset {
  Eigen::MatrixXd x;                          // n x k covariates
  std::vector<int> provider;                  // size n, values in 0..m-1
  Eigen::VectorXd y;                          // size n
  std::vector<std::string> provider_labels;   // size m, in first-appearance order
  std::vector<std::string> covariate_names;   // size k
  bool binary_outcome = false;

  int n() const { return static_cast<int>(y.size()); }
  int k() const { return static_cast<int>(x.cols()); }
  int m() const { return static_cast<int>(provider_labels.size()); }

  std::vector<int> provider_counts() const;
  std::vector<std::vector<int>> provider_rows() const;
};

struct LoadConfig {
  std::string outcome_col = "y";
  std::string provider_col = "provider";
  std::vector<std::string> covariate_cols;  // empty: all header columns starting with 'w'
  std::string outcome_kind = "auto";        // auto | binary | continuous
};

Dataset dataset_from_table(const CsvTable& table, const LoadConfig& cfg);
Dataset load_csv(const std::string& path, const LoadConfig& cfg);

struct MinVolumeFilter {
  Dataset data;
  std::vector<std::string> dropped_labels;
  int dropped_rows = 0;
};

MinVolumeFilter filter_min_volume(const Dataset& d, int min_n);

// Provider-stratified fold assignment. Within each provider the rows are
// shuffled with a seed-derived substream and dealt round-robin from a random
// starting fold, so per-provider fold sizes differ by at most one. Providers
// with fewer than J rows cannot reach every fold; they are assigned the same
// way and flagged in `warnings`.
struct FoldAssignment {
  int folds = 1;
  std::vector<int> fold;  // size n, values in 0..folds-1
  std::vector<std::string> warnings;

  std::vector<std::vector<int>> validation_rows() const;
  std::vector<std::vector<int>> training_rows() const;
};

FoldAssignment make_folds(const Dataset& d, int J, std::uint64_t seed);

// Affine outcome rescaling: y_scaled = alpha + beta * y. Continuous outcomes
// map [lo, hi] = [min, max] onto [delta, 1 - delta]; binary outcomes keep the
// identity with range (0, 1).
struct OutcomeScale {
  double alpha = 0.0;
  double beta = 1.0;
  double lo = 0.0;
  double hi = 1.0;

  double to_scaled(double v) const { return alpha + beta * v; }
  double to_original(double s) const { return (s - alpha) / beta; }
};

OutcomeScale scale_outcomes(const Dataset& d, double delta);
Eigen::VectorXd apply_scale(const Eigen::VectorXd& y, const OutcomeScale& s);

}  // namespace targprof
