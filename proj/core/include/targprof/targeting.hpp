#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "targprof/dataset.hpp"
#include "targprof/eif.hpp"
#include "targprof/nuisance.hpp"

namespace targprof {

// Fluctuation directions for one provider. k and h drive the indirect
// parameters; m (built from truncated propensities) drives the direct one and
// is all zeros when the direct parameter was not requested.
struct CleverCovariates {
  Eigen::VectorXd m;  // 1[A_i = a] / truncated pi(a, w_i)
  Eigen::VectorXd k;  // 1[A_i = a] / p_hat(a)
  Eigen::VectorXd h;  // pi_hat(a, w_i) / p_hat(a)
};

CleverCovariates clever_covariates(int a, const Dataset& d, const NuisanceEstimates& nu,
                                   bool with_direct = true);

struct FluctuationFit {
  double epsilon = 0.0;
  int iterations = 0;
  bool converged = false;
  double score_at_solution = 0.0;
};

// One-parameter logistic fluctuation: maximizes the binomial log-likelihood of
// y_scaled with mean expit(offset + epsilon * covariate). Newton ascent with
// step halving; converged means |score| <= 1e-8 within 50 iterations.
FluctuationFit fit_epsilon(const Eigen::VectorXd& offset_logits, const Eigen::VectorXd& covariate,
                           const Eigen::VectorXd& y_scaled);

struct TargetResult {
  double point = std::numeric_limits<double>::quiet_NaN();  // original outcome scale
  double point_scaled = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd updated;  // fluctuated predictions, scaled domain
  FluctuationFit fluctuation;
};

// The dataset passed to the three targeting steps must carry scaled outcomes
// (the same ones the nuisance step saw); `s` maps points back to the original
// range. target_psi1's `updated` is the m-vector of provider means with entry
// a fluctuated; the other two return per-observation vectors, target_phi's
// evaluated at provider a for every row.
TargetResult target_psi1(int a, const Dataset& d, const NuisanceEstimates& nu,
                         const OutcomeScale& s);
TargetResult target_psi2(int a, const Dataset& d, const NuisanceEstimates& nu,
                         const OutcomeScale& s);
TargetResult target_phi(int a, const Dataset& d, const NuisanceEstimates& nu,
                        const OutcomeScale& s);

struct Estimate {
  double value = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;        // point estimate present
  bool has_inference = false;  // se and interval present
};

struct ProviderProfile {
  std::string label;
  int n_obs = 0;
  Estimate phi, psi1, psi2, er, smr;
  PositivityFlag positivity = PositivityFlag::ok;
  std::vector<std::string> notes;

  const Estimate& estimate(ParameterTag tag) const;
};

struct ProfileEstimates {
  std::vector<ProviderProfile> providers;
  std::vector<ParameterTag> parameters;  // order used by serialization
  double level = 0.95;
  std::uint64_t seed = 0;
  int folds = 0;
  std::string config_echo;
  PositivityReport positivity;
  OutcomeScale scale;
  std::vector<std::string> warnings;

  // column means of the estimated influence functions on the original outcome
  // scale, one row per entry of `parameters`; NaN where the estimate failed
  Eigen::MatrixXd eif_means;
  double eif_mean(ParameterTag tag, int provider) const;
};

struct EstimationConfig {
  NuisanceConfig nuisance;
  std::vector<ParameterTag> parameters = {ParameterTag::phi, ParameterTag::psi1,
                                          ParameterTag::psi2, ParameterTag::er,
                                          ParameterTag::smr};
  double level = 0.95;
  double scale_delta = 0.005;
  double positivity_threshold = 0.01;
  std::uint64_t seed = 1;
  int threads = 0;
};

// Full estimation pipeline on an original-scale dataset: scale outcomes, fit
// cross-fitted nuisances, run every requested targeting step per provider,
// and attach influence-function inference. Per-provider failures are recorded
// in that provider's notes; the rest of the table is still produced.
ProfileEstimates compute_all(const Dataset& d, const FoldAssignment& folds,
                             const EstimationConfig& cfg);

// Targeting and inference on caller-supplied nuisance estimates. `nu` must
// have been fitted on outcomes scaled by `s`; the simulation studies use this
// entry point to substitute deliberately corrupted nuisance fits.
ProfileEstimates profile_from_nuisances(const Dataset& d, const FoldAssignment& folds,
                                        const EstimationConfig& cfg, const NuisanceEstimates& nu,
                                        const OutcomeScale& s);

// Non-targeted, non-cross-fitted plug-in benchmark: main-effects GLM of the
// outcome on covariates and provider indicators (identity link for continuous
// outcomes, logit for binary), reported without standard errors.
ProfileEstimates glm_benchmark(const Dataset& d, const EstimationConfig& cfg);

}  // namespace targprof
