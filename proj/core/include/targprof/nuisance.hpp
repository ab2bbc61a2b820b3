#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "targprof/dataset.hpp"
#include "targprof/learners.hpp"

namespace targprof {

enum class MuBarMode { onehot, per_provider };

struct NuisanceConfig {
  EnsembleSpec propensity;  // classifier ensemble for P(A = a | W)
  EnsembleSpec outcome;     // regression ensemble for E[Y | W] and E[Y | A, W]
  bool want_mu_bar = true;  // fit the provider-covariate outcome model
  MuBarMode mu_bar_mode = MuBarMode::onehot;
  double truncation_bound = 1e-3;  // recorded here, applied by the targeting step
  std::uint64_t seed = 1;
  int threads = 0;  // 0 = library default
};

// Cross-fitted nuisance estimates. Every per-observation value is predicted
// by models that never saw the observation's fold; pi_hat is raw classifier
// output (truncation happens downstream, and only for the direct parameter).
// Outcomes are expected on the scaled [0, 1] domain.
struct NuisanceEstimates {
  Eigen::MatrixXd pi_hat;    // n x m
  Eigen::VectorXd mu_tilde;  // n
  Eigen::MatrixXd mu_bar;    // n x m, 0 x 0 when not requested
  Eigen::VectorXd mu_dot;    // m, per-training-split provider means averaged over folds
  Eigen::VectorXd p_hat;     // m, per-training-split provider frequencies averaged over folds
  FoldAssignment folds;
  double truncation_bound = 0.0;
  bool mu_bar_present = false;
  std::vector<std::string> warnings;
};

NuisanceEstimates estimate_nuisances(const Dataset& d, const FoldAssignment& folds,
                                     const NuisanceConfig& cfg);

// Clips entries below `bound` up to it and rescales the untouched entries so
// each row still sums to 1; clipped entries stay exactly at the bound. A zero
// bound returns the input unchanged.
Eigen::MatrixXd truncate_propensities(const Eigen::MatrixXd& pi, double bound);

enum class PositivityFlag { ok, practical_violation };

struct ProviderPositivity {
  std::string label;
  double min = 0.0;
  double q01 = 0.0;
  double median = 0.0;
  double max = 0.0;
  int below_threshold = 0;
  PositivityFlag flag = PositivityFlag::ok;
};

struct PositivityReport {
  double threshold = 0.0;
  std::vector<ProviderPositivity> providers;
  bool any_violation = false;
};

PositivityReport positivity_report(const Eigen::MatrixXd& pi_pre_truncation, double threshold,
                                   const std::vector<std::string>& labels);

}  // namespace targprof
