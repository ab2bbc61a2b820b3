#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace targprof {

enum class ParameterTag { phi, psi1, psi2, er, smr };

std::string parameter_name(ParameterTag tag);

// Estimated influence function evaluations, one column per provider. Column
// means after targeting stay below 1e-6 in scaled-outcome units; everything
// here is carried on the original outcome scale.
struct EifMatrix {
  Eigen::MatrixXd values;  // n x m
  ParameterTag tag = ParameterTag::phi;
};

// Influence function for the direct standardized mean: weighted residual on
// the provider's own rows plus the centered regression plug-in. `pi_trunc_col`
// must be the same truncated propensities the targeting step used.
Eigen::VectorXd eif_phi(const Eigen::VectorXd& y, const std::vector<int>& provider, int a,
                        const Eigen::VectorXd& pi_trunc_col, const Eigen::VectorXd& mu_bar_star,
                        double phi_star);

Eigen::VectorXd eif_psi1(const Eigen::VectorXd& y, const std::vector<int>& provider, int a,
                         double p_hat, double psi1_star);

// `pi_col` is the untruncated propensity column, matching the indirect
// fluctuation covariate.
Eigen::VectorXd eif_psi2(const Eigen::VectorXd& y, const std::vector<int>& provider, int a,
                         const Eigen::VectorXd& pi_col, const Eigen::VectorXd& mu_tilde_star,
                         double p_hat, double psi2_star);

enum class DeltaKind { er, smr };

Eigen::VectorXd eif_delta(const Eigen::VectorXd& d1, const Eigen::VectorXd& d2, double psi1_star,
                          double psi2_star, DeltaKind kind);

struct Inference {
  double se = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

// Wald interval from the influence function: se = sqrt(mean(D^2)/n).
Inference inference(double estimate, const Eigen::VectorXd& d, double level);

// Joint estimator covariance across providers: entry (a1, a2) is
// mean(D_a1 * D_a2) / n. Positive semidefinite by construction.
Eigen::MatrixXd joint_covariance(const Eigen::MatrixXd& eif_columns);

struct FunnelPoint {
  std::string label;
  double smr = 0.0;
  double precision = 0.0;  // 1 / variance of the estimate
  std::string classification;
};

struct FunnelCurve {
  double level = 0.0;
  std::vector<double> precision;
  std::vector<double> lower;
  std::vector<double> upper;
};

struct FunnelTable {
  std::vector<FunnelPoint> points;
  std::vector<FunnelCurve> curves;  // one per level, 200 grid points each
  std::vector<std::string> warnings;
  bool log_scale = false;
};

// Funnel data around the null value 1: control limits 1 +/- z * sqrt(1/q) on
// the ratio scale, or exp(+/- z * sqrt(1/q_log)) when log_scale is set.
// Providers with zero variance are omitted from the points with a warning.
FunnelTable funnel(const std::vector<std::string>& labels, const Eigen::VectorXd& smr,
                   const Eigen::VectorXd& variance, const std::vector<double>& levels,
                   bool log_scale = false);

// Self-contained SVG scatter of the funnel: one circle per provider point,
// one path per control-limit curve.
std::string render_funnel_svg(const FunnelTable& table);

}  // namespace targprof
