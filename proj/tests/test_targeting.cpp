#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "support/piecewise_dgp.hpp"
#include "targprof/dataset.hpp"
#include "targprof/errors.hpp"
#include "targprof/learners.hpp"
#include "targprof/nuisance.hpp"
#include "targprof/stats.hpp"
#include "targprof/targeting.hpp"

using namespace targprof;

namespace {

LearnerSpec glm_spec() {
  LearnerSpec s;
  s.kind = LearnerKind::glm;
  return s;
}

LearnerSpec knn_spec(int k) {
  LearnerSpec s;
  s.kind = LearnerKind::knn;
  s.neighbors = k;
  return s;
}

EnsembleSpec just(const LearnerSpec& s) {
  EnsembleSpec e;
  e.members = {s};
  return e;
}

// Four observations, two providers, flat covariate. Everything about this
// fixture is computable by hand: provider means 0.5 and 1.0, pooled mean 0.75.
Dataset toy4() {
  Dataset d;
  d.x.resize(4, 1);
  d.x.setConstant(0.5);
  d.provider = {0, 0, 1, 1};
  d.y.resize(4);
  d.y << 1.0, 0.0, 1.0, 1.0;
  d.provider_labels = {"h1", "h2"};
  d.covariate_names = {"w1"};
  d.binary_outcome = true;
  return d;
}

// Six observations over a binary covariate, chosen so every cell mean is a
// small rational: pi(first | w=0) = 2/3, mu_tilde = (1/3, 1), and the
// indirect standardized mean for the first provider is 5/9.
Dataset toy6() {
  Dataset d;
  d.x.resize(6, 1);
  d.x << 0.0, 0.0, 1.0, 0.0, 1.0, 1.0;
  d.provider = {0, 0, 0, 1, 1, 1};
  d.y.resize(6);
  d.y << 1.0, 0.0, 1.0, 0.0, 1.0, 1.0;
  d.provider_labels = {"h1", "h2"};
  d.covariate_names = {"w1"};
  d.binary_outcome = true;
  return d;
}

NuisanceEstimates hand_nuisances(const Eigen::MatrixXd& pi, const Eigen::VectorXd& p_hat) {
  NuisanceEstimates nu;
  nu.pi_hat = pi;
  nu.p_hat = p_hat;
  nu.truncation_bound = 0.0;
  nu.mu_bar_present = false;
  return nu;
}

EstimationConfig glm_estimation(int seed = 1) {
  EstimationConfig cfg;
  cfg.nuisance.propensity = just(glm_spec());
  cfg.nuisance.outcome = just(glm_spec());
  cfg.nuisance.seed = static_cast<uint64_t>(seed);
  cfg.seed = static_cast<uint64_t>(seed);
  return cfg;
}

const ProviderProfile& by_label(const ProfileEstimates& est, const std::string& label) {
  for (const auto& p : est.providers) {
    if (p.label == label) return p;
  }
  REQUIRE(false);
  static ProviderProfile dummy;
  return dummy;
}

}  // namespace

TEST_SUITE("targeting") {

TEST_CASE("clever covariates on a two-row example") {
  Dataset d;
  d.x.resize(2, 1);
  d.x.setZero();
  d.provider = {0, 1};
  d.y.resize(2);
  d.y << 1.0, 0.0;
  d.provider_labels = {"h1", "h2"};
  d.binary_outcome = true;

  Eigen::MatrixXd pi(2, 2);
  pi << 0.5, 0.5, 0.25, 0.75;
  Eigen::VectorXd p_hat(2);
  p_hat << 0.5, 0.5;
  const NuisanceEstimates nu = hand_nuisances(pi, p_hat);

  const CleverCovariates cc = clever_covariates(0, d, nu);
  CHECK(cc.m(0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(cc.m(1) == 0.0);
  CHECK(cc.k(0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(cc.k(1) == 0.0);
  CHECK(cc.h(0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cc.h(1) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("clever covariates degenerate shapes") {
  Dataset d;
  d.x.resize(3, 1);
  d.x.setZero();
  d.provider = {0, 0, 0};
  d.y.resize(3);
  d.y << 1.0, 0.0, 1.0;
  d.provider_labels = {"solo", "empty"};
  d.binary_outcome = true;

  // constant propensity equal to the marginal share makes h identically one
  Eigen::MatrixXd pi(3, 2);
  pi.col(0).setConstant(0.75);
  pi.col(1).setConstant(0.25);
  Eigen::VectorXd p_hat(2);
  p_hat << 0.75, 0.25;
  const NuisanceEstimates nu = hand_nuisances(pi, p_hat);

  const CleverCovariates cc = clever_covariates(0, d, nu);
  CHECK((cc.h.array() - 1.0).abs().maxCoeff() <= 1e-15);
  CHECK((cc.k.array() - 1.0 / 0.75).abs().maxCoeff() <= 1e-15);
  CHECK((cc.m.array() - 1.0 / 0.75).abs().maxCoeff() <= 1e-15);

  CHECK_THROWS_AS(clever_covariates(0, d, hand_nuisances(pi, Eigen::Vector2d(0.0, 1.0))),
                  EstimationError);
}

TEST_CASE("clever covariates refuse a zero truncated propensity for the direct parameter") {
  Dataset d;
  d.x.resize(2, 1);
  d.x.setZero();
  d.provider = {0, 1};
  d.y.resize(2);
  d.y << 1.0, 0.0;
  d.provider_labels = {"h1", "h2"};
  d.binary_outcome = true;

  Eigen::MatrixXd pi(2, 2);
  pi << 0.0, 1.0, 0.0, 1.0;
  Eigen::VectorXd p_hat(2);
  p_hat << 0.5, 0.5;
  const NuisanceEstimates nu = hand_nuisances(pi, p_hat);

  std::string message;
  try {
    clever_covariates(0, d, nu);
  } catch (const EstimationError& e) {
    message = e.what();
  }
  CHECK(message.find("'h1'") != std::string::npos);
  CHECK(message.find("direct parameter is unavailable") != std::string::npos);

  // without the direct parameter the same nuisances are fine
  const CleverCovariates cc = clever_covariates(0, d, nu, false);
  CHECK(cc.m.size() == 2);
  CHECK(cc.m.lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(cc.k(0) == doctest::Approx(2.0));
}

TEST_CASE("fluctuation fit stops immediately at a stationary point") {
  Eigen::VectorXd cov = Eigen::VectorXd::Zero(4);
  Eigen::VectorXd off(4), y(4);
  off << -1.0, 0.0, 1.0, 2.0;
  y << 0.0, 1.0, 1.0, 0.0;
  const FluctuationFit zero_cov = fit_epsilon(off, cov, y);
  CHECK(zero_cov.epsilon == 0.0);
  CHECK(zero_cov.iterations == 0);
  CHECK(zero_cov.converged);

  // offsets already matching the outcomes give a zero score at epsilon = 0
  Eigen::VectorXd off2(2), y2(2), cov2(2);
  y2 << 0.8, 0.2;
  off2 << logit(0.8), logit(0.2);
  cov2 << 1.0, 1.0;
  const FluctuationFit stationary = fit_epsilon(off2, cov2, y2);
  CHECK(stationary.epsilon == 0.0);
  CHECK(std::abs(stationary.score_at_solution) <= 1e-8);
  CHECK(stationary.converged);
}

TEST_CASE("fluctuation fit matches a grid search on the log-likelihood") {
  Eigen::VectorXd off(6), cov(6), y(6);
  off << -0.5, 0.3, 1.2, -1.0, 0.0, 0.7;
  cov << 2.0, 0.0, 1.5, 2.0, 0.0, 1.5;
  y << 1.0, 0.0, 1.0, 1.0, 0.5, 0.2;
  const FluctuationFit fit = fit_epsilon(off, cov, y);
  CHECK(fit.converged);
  CHECK(std::abs(fit.score_at_solution) <= 1e-8);

  auto loglik = [&](double eps) {
    double ll = 0.0;
    for (int i = 0; i < 6; ++i) {
      const double p = clip_prob(expit(off(i) + eps * cov(i)));
      ll += y(i) * std::log(p) + (1.0 - y(i)) * std::log(1.0 - p);
    }
    return ll;
  };
  double best = -1e300;
  for (double eps = -5.0; eps <= 5.0; eps += 1e-3) best = std::max(best, loglik(eps));
  CHECK(loglik(fit.epsilon) >= best - 1e-9);
}

TEST_CASE("fluctuation fit pushes epsilon far out when every outcome is one") {
  Eigen::VectorXd off(3), cov(3), y(3);
  off << 0.0, 0.5, -0.5;
  cov << 1.0, 1.0, 1.0;
  y.setOnes();
  const FluctuationFit fit = fit_epsilon(off, cov, y);
  CHECK(fit.epsilon >= 5.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(expit(off(i) + fit.epsilon * cov(i)) >= 0.999);
  }
}

TEST_CASE("fluctuation fit validates its inputs") {
  Eigen::VectorXd off(2), cov(3), y(2);
  off.setZero();
  cov.setZero();
  y << 0.5, 0.5;
  CHECK_THROWS_AS(fit_epsilon(off, cov, y), ValidationError);

  Eigen::VectorXd cov2(2), bad_y(2);
  cov2.setZero();
  bad_y << -0.1, 0.5;
  CHECK_THROWS_AS(fit_epsilon(off, cov2, bad_y), ValidationError);
}

TEST_CASE("provider means from targeting equal the empirical means") {
  const Dataset d = toy4();
  const FoldAssignment folds = make_folds(d, 1, 1);
  NuisanceConfig ncfg;
  ncfg.propensity = just(glm_spec());
  ncfg.outcome = just(glm_spec());
  const NuisanceEstimates nu = estimate_nuisances(d, folds, ncfg);

  OutcomeScale s = scale_outcomes(d, 0.005);
  Dataset scaled = d;
  scaled.y = apply_scale(d.y, s);

  const TargetResult r0 = target_psi1(0, scaled, nu, s);
  const TargetResult r1 = target_psi1(1, scaled, nu, s);
  CHECK(std::abs(r0.point - 0.5) <= 1e-8);
  CHECK(std::abs(r1.point - 1.0) <= 1e-6);

  // the fitted score is solved to tolerance
  CHECK(std::abs(r0.fluctuation.score_at_solution) <= 1e-8);
  CHECK(r0.updated.size() == 2);
}

TEST_CASE("indirect standardized mean recovers the exact plug-in on saturated cells") {
  const Dataset d = toy6();
  const FoldAssignment folds = make_folds(d, 1, 1);
  NuisanceConfig ncfg;
  ncfg.propensity = just(knn_spec(3));
  ncfg.outcome = just(knn_spec(3));
  const NuisanceEstimates nu = estimate_nuisances(d, folds, ncfg);

  // cell means are exact: three zero-distance neighbours per row
  CHECK(std::abs(nu.pi_hat(0, 0) - 2.0 / 3.0) <= 1e-9);
  CHECK(std::abs(nu.mu_tilde(0) - 1.0 / 3.0) <= 1e-9);

  OutcomeScale s = scale_outcomes(d, 0.005);
  Dataset scaled = d;
  scaled.y = apply_scale(d.y, s);

  const TargetResult r = target_psi2(0, scaled, nu, s);
  CHECK(std::abs(r.point - 5.0 / 9.0) <= 1e-6);

  // score identity for the indirect fluctuation
  const CleverCovariates cc = clever_covariates(0, d, nu, false);
  double score = 0.0;
  for (int i = 0; i < 6; ++i) score += cc.h(i) * (scaled.y(i) - r.updated(i));
  CHECK(std::abs(score / 6.0) <= 1e-8);
}

TEST_CASE("direct standardized mean on the toy fixture") {
  const Dataset d = toy4();
  const FoldAssignment folds = make_folds(d, 1, 1);
  NuisanceConfig ncfg;
  ncfg.propensity = just(glm_spec());
  ncfg.outcome = just(glm_spec());
  ncfg.want_mu_bar = true;
  const NuisanceEstimates nu = estimate_nuisances(d, folds, ncfg);

  OutcomeScale s = scale_outcomes(d, 0.005);
  Dataset scaled = d;
  scaled.y = apply_scale(d.y, s);

  // with a flat covariate the direct mean is the provider mean
  const TargetResult r = target_phi(1, scaled, nu, s);
  CHECK(std::abs(r.point - 1.0) <= 1e-5);
  CHECK(r.updated.size() == 4);

  NuisanceEstimates no_bar = nu;
  no_bar.mu_bar_present = false;
  CHECK_THROWS_AS(target_phi(1, scaled, no_bar, s), EstimationError);
}

TEST_CASE("full profile on the toy fixture") {
  const Dataset d = toy4();
  const FoldAssignment folds = make_folds(d, 1, 1);
  const ProfileEstimates est = compute_all(d, folds, glm_estimation());

  REQUIRE(est.providers.size() == 2);
  const ProviderProfile& h1 = by_label(est, "h1");
  const ProviderProfile& h2 = by_label(est, "h2");
  CHECK(h1.n_obs == 2);
  CHECK(h2.n_obs == 2);

  CHECK(std::abs(h1.psi1.value - 0.5) <= 1e-8);
  CHECK(std::abs(h2.psi1.value - 1.0) <= 1e-6);
  CHECK(std::abs(h1.psi2.value - 0.75) <= 1e-5);
  CHECK(std::abs(h2.psi2.value - 0.75) <= 1e-5);
  CHECK(std::abs(h1.smr.value - 2.0 / 3.0) <= 1e-4);
  CHECK(std::abs(h2.smr.value - 4.0 / 3.0) <= 1e-4);
  CHECK(std::abs(h1.er.value + 0.25) <= 1e-4);
  CHECK(std::abs(h2.phi.value - 1.0) <= 1e-4);

  // derived parameters are exact functions of the targeted ones
  CHECK(h1.er.value == h1.psi1.value - h1.psi2.value);
  CHECK(h1.smr.value == h1.psi1.value / h1.psi2.value);

  for (const auto& p : est.providers) {
    CHECK(p.psi1.defined);
    CHECK(p.psi1.has_inference);
    CHECK(p.smr.se > 0.0);
    CHECK(p.smr.lo <= p.smr.value);
    CHECK(p.smr.hi >= p.smr.value);
  }
  CHECK(est.level == 0.95);
  CHECK(est.config_echo.find("folds=1") != std::string::npos);
}

TEST_CASE("influence-function columns average to zero after targeting") {
  const testbed::PiecewiseDraw draw = testbed::draw_piecewise(400, 4, 1.0, 99);
  const Dataset d = testbed::to_dataset(draw);
  const FoldAssignment folds = make_folds(d, 2, 7);
  EstimationConfig cfg = glm_estimation(7);
  const ProfileEstimates est = compute_all(d, folds, cfg);

  const OutcomeScale s = scale_outcomes(d, cfg.scale_delta);
  REQUIRE(est.parameters.size() == 5);
  for (const auto& p : est.providers) {
    REQUIRE(p.notes.empty());
  }
  // column means of the influence matrix, rescaled to the unit interval,
  // stay within the targeting tolerance
  for (std::size_t t = 0; t < est.parameters.size(); ++t) {
    const ParameterTag tag = est.parameters[t];
    if (tag == ParameterTag::smr) continue;  // ratio means are not solved to zero
    for (int a = 0; a < d.m(); ++a) {
      CHECK(std::abs(est.eif_mean(tag, a)) * s.beta <= 1e-6);
    }
  }
}

TEST_CASE("profiles are equivariant under provider relabelling") {
  const testbed::PiecewiseDraw draw = testbed::draw_piecewise(150, 3, 1.0, 55);
  Dataset d = testbed::to_dataset(draw);
  const FoldAssignment folds = make_folds(d, 1, 3);
  const ProfileEstimates base = compute_all(d, folds, glm_estimation(3));

  // rotate provider identities: old a becomes new (a + 1) % 3, with the
  // labels moved along so every row keeps its original label
  Dataset rotated = d;
  for (auto& a : rotated.provider) a = (a + 1) % 3;
  rotated.provider_labels = {"p2", "p0", "p1"};
  const FoldAssignment rfolds = make_folds(rotated, 1, 3);
  const ProfileEstimates rot = compute_all(rotated, rfolds, glm_estimation(3));

  for (const auto& p : base.providers) {
    const ProviderProfile& q = by_label(rot, p.label);
    CHECK(std::abs(p.psi1.value - q.psi1.value) <= 5e-8);
    CHECK(std::abs(p.psi2.value - q.psi2.value) <= 5e-8);
    CHECK(std::abs(p.phi.value - q.phi.value) <= 5e-8);
    CHECK(std::abs(p.smr.value - q.smr.value) <= 5e-7);
    CHECK(std::abs(p.smr.se - q.smr.se) <= 5e-8);
  }
}

TEST_CASE("estimates transform affinely with the outcome") {
  const testbed::PiecewiseDraw draw = testbed::draw_piecewise(200, 3, 1.0, 21);
  Dataset d = testbed::to_dataset(draw);
  const FoldAssignment folds = make_folds(d, 2, 5);
  const ProfileEstimates base = compute_all(d, folds, glm_estimation(5));

  Dataset shifted = d;
  shifted.y = (2.5 * d.y.array() - 1.0).matrix();
  const ProfileEstimates moved = compute_all(shifted, folds, glm_estimation(5));

  for (std::size_t i = 0; i < base.providers.size(); ++i) {
    const ProviderProfile& p = base.providers[i];
    const ProviderProfile& q = moved.providers[i];
    CHECK(std::abs(q.psi1.value - (2.5 * p.psi1.value - 1.0)) <= 1e-7);
    CHECK(std::abs(q.psi2.value - (2.5 * p.psi2.value - 1.0)) <= 1e-7);
    CHECK(std::abs(q.phi.value - (2.5 * p.phi.value - 1.0)) <= 1e-7);
    CHECK(std::abs(q.er.value - 2.5 * p.er.value) <= 1e-7);
    CHECK(std::abs(q.er.se - 2.5 * p.er.se) <= 1e-7);
  }

  // a pure rescaling leaves the ratio parameter alone
  Dataset scaled3 = d;
  scaled3.y = 3.0 * d.y;
  const ProfileEstimates tripled = compute_all(scaled3, folds, glm_estimation(5));
  for (std::size_t i = 0; i < base.providers.size(); ++i) {
    CHECK(std::abs(tripled.providers[i].smr.value - base.providers[i].smr.value) <= 1e-8);
  }
}

TEST_CASE("ratio parameter is declined when the indirect mean is not positive") {
  testbed::PiecewiseDraw draw = testbed::draw_piecewise(120, 2, 0.2, 11);
  Dataset d = testbed::to_dataset(draw);
  d.y.array() -= 5.0;  // every outcome negative, so the indirect mean is too
  const FoldAssignment folds = make_folds(d, 1, 2);
  const ProfileEstimates est = compute_all(d, folds, glm_estimation(2));

  for (const auto& p : est.providers) {
    CHECK(p.psi2.value < 0.0);
    CHECK(!p.smr.defined);
    bool noted = false;
    for (const auto& note : p.notes) {
      if (note.find("ratio undefined") != std::string::npos) noted = true;
    }
    CHECK(noted);
    CHECK(p.er.defined);  // the difference is still fine
  }
}

TEST_CASE("requesting a subset of parameters skips the rest") {
  const Dataset d = toy4();
  const FoldAssignment folds = make_folds(d, 1, 1);
  EstimationConfig cfg = glm_estimation();
  cfg.parameters = {ParameterTag::psi1};
  const ProfileEstimates est = compute_all(d, folds, cfg);
  REQUIRE(est.parameters.size() == 1);
  for (const auto& p : est.providers) {
    CHECK(p.psi1.defined);
    CHECK(!p.psi2.defined);
    CHECK(!p.phi.defined);
    CHECK(!p.smr.defined);
  }

  // the ratio needs both means internally but only reports itself
  cfg.parameters = {ParameterTag::smr};
  const ProfileEstimates ratio_only = compute_all(d, folds, cfg);
  for (const auto& p : ratio_only.providers) {
    CHECK(p.smr.defined);
    CHECK(p.smr.has_inference);
    CHECK(!p.psi1.defined);
    CHECK(!p.psi2.defined);
    CHECK(!p.phi.defined);
  }

  cfg.parameters = {};
  CHECK_THROWS_AS(compute_all(d, folds, cfg), ValidationError);
}

TEST_CASE("baseline comparator reproduces a linear truth exactly") {
  // y is exactly linear in the covariate and the provider effect, so a
  // least-squares fit with reference coding interpolates it
  Rng rng(17);
  const int n = 60;
  Dataset d;
  d.x.resize(n, 1);
  d.provider.resize(n);
  d.y.resize(n);
  d.provider_labels = {"h1", "h2"};
  d.covariate_names = {"w1"};
  d.binary_outcome = false;
  for (int i = 0; i < n; ++i) {
    d.x(i, 0) = rng.uniform();
    d.provider[static_cast<std::size_t>(i)] = (rng.uniform() < 0.5) ? 0 : 1;
    d.y(i) = 0.4 + d.x(i, 0) + (d.provider[static_cast<std::size_t>(i)] == 1 ? 1.0 : 0.0);
  }

  EstimationConfig cfg = glm_estimation();
  const ProfileEstimates est = glm_benchmark(d, cfg);
  REQUIRE(est.providers.size() == 2);

  const double mean_w = d.x.col(0).mean();
  CHECK(std::abs(by_label(est, "h1").phi.value - (0.4 + mean_w)) <= 1e-6);
  CHECK(std::abs(by_label(est, "h2").phi.value - (1.4 + mean_w)) <= 1e-6);

  // provider means and the ratio come straight from the data
  double sum1 = 0.0;
  int n1 = 0;
  for (int i = 0; i < n; ++i) {
    if (d.provider[static_cast<std::size_t>(i)] == 0) {
      sum1 += d.y(i);
      ++n1;
    }
  }
  CHECK(std::abs(by_label(est, "h1").psi1.value - sum1 / n1) <= 1e-9);
  CHECK(!by_label(est, "h1").psi1.has_inference);
  CHECK(est.config_echo.find("benchmark=glm") != std::string::npos);
}

}  // TEST_SUITE
