#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "targprof/dataset.hpp"
#include "targprof/nuisance.hpp"
#include "targprof/targeting.hpp"

namespace targprof {

enum class Study { sim1, sim2 };
enum class Scenario { s1, s2, s3, s4 };
enum class EstimatorKind { tmle, glm };

std::string study_name(Study s);
std::string scenario_name(Scenario s);
std::string estimator_name(EstimatorKind e);

// Ground truth for one synthetic replicate, per provider, on the original
// outcome scale. Study 1 truth is exact (the mean functions are piecewise
// constant, so the integrals are closed-form); study 2 truth is Monte Carlo,
// and mc_se_psi2 reports the largest batch-mean standard error across
// providers for the indirect standardized mean.
struct TruthTable {
  std::vector<int> beta;  // drawn provider effect indicators
  Eigen::VectorXd phi;
  Eigen::VectorXd psi1;
  Eigen::VectorXd psi2;
  Eigen::VectorXd er;
  Eigen::VectorXd smr;
  double mc_se_psi2 = 0.0;  // 0 when the truth is exact
  int regenerated = 0;      // all-equal effect vectors redrawn

  double value(ParameterTag tag, int provider) const;
};

struct SimDraw {
  Dataset data;
  TruthTable truth;
};

// Study 1: one Unif(0,1) covariate, provider effects beta_a ~ Bernoulli(1/2)
// redrawn while all equal, assignment weight expit(2) when (W1 > 0.7) agrees
// with (beta_a = 1) and expit(-2) otherwise (normalized across providers),
// outcome mean piecewise constant in W1 with Gaussian noise. sigma = 0 is
// allowed for noise-free checks.
SimDraw draw_sim1(int n, int m, double sigma, std::uint64_t seed);

// Study 2: ten Unif(0,1) covariates, assignment weight
// 1 + 10 beta_a W1 - 0.2 W2 - 0.5 W5 floored at 0.01 and normalized, outcome
// mean 2 W1 - (W2 - 0.5)^2 + 1[W3 > 0.5] + W5 - 2 beta_a with Gaussian noise.
// Truth is integrated by Monte Carlo over 10^6 covariate draws on a stream
// independent of the data draws.
SimDraw draw_sim2(int n, int m, double sigma, std::uint64_t seed);

// Deliberate nuisance corruption for the robustness scenarios: s2 replaces
// every propensity row with a flat Dirichlet draw, s3 pins the covariate-only
// outcome regression at 0.5 (scaled-outcome units), s4 does both, and s1
// returns the input unchanged. Every other field is left untouched.
NuisanceEstimates apply_misspecification(const NuisanceEstimates& nu, Scenario scenario,
                                         std::uint64_t seed);

struct SimConfig {
  Study study = Study::sim1;
  int n = 1000;
  int m = 10;
  int k = 0;  // 0 = study default; otherwise must match it (1 or 10)
  double sigma = 1.0;
  int replicates = 100;
  std::uint64_t seed = 1;
  Scenario scenario = Scenario::s1;  // s2..s4 are study-2 only
  std::vector<EstimatorKind> estimators = {EstimatorKind::tmle, EstimatorKind::glm};
  std::vector<ParameterTag> parameters = {ParameterTag::phi, ParameterTag::psi1,
                                          ParameterTag::psi2, ParameterTag::er,
                                          ParameterTag::smr};
  NuisanceConfig nuisance;
  int folds = 5;
  int threads = 0;  // 0 = library default; parallelism is across replicates
  bool keep_audit = false;
};

// One aggregated table cell. Coverage is NaN for estimators that report no
// interval (the plug-in benchmark produces points only).
struct SimCell {
  EstimatorKind estimator = EstimatorKind::tmle;
  ParameterTag parameter = ParameterTag::phi;
  double me = std::numeric_limits<double>::quiet_NaN();
  double mae = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
};

struct AuditRecord {
  int replicate = 0;
  EstimatorKind estimator = EstimatorKind::tmle;
  ParameterTag parameter = ParameterTag::phi;
  std::string provider;
  double estimate = std::numeric_limits<double>::quiet_NaN();
  double truth = std::numeric_limits<double>::quiet_NaN();
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
};

struct SimResult {
  std::vector<SimCell> cells;  // estimator-major, parameter-minor order
  int replicates = 0;          // replicates aggregated (requested minus failures)
  int failures = 0;
  std::vector<std::string> failure_notes;  // one entry per failed replicate
  std::vector<AuditRecord> audit;          // populated when keep_audit is set

  const SimCell& cell(EstimatorKind e, ParameterTag p) const;
};

// Runs the configured study: each replicate draws a dataset and its truth on
// seeds derived from (seed, replicate), estimates every requested parameter
// with every requested estimator, and aggregates error = estimate - truth
// over providers and then replicates. Misspecification scenarios corrupt the
// fitted nuisances before targeting. A replicate whose estimation throws or
// leaves a requested parameter undefined is recorded as failed and excluded.
// The result is deterministic given the config, independent of thread count.
SimResult run_study(const SimConfig& cfg);

}  // namespace targprof
