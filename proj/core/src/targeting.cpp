#include "targprof/targeting.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>

#include "targprof/errors.hpp"
#include "targprof/learners.hpp"
#include "targprof/parallel.hpp"
#include "targprof/stats.hpp"

namespace targprof {

namespace {

constexpr double kScoreTol = 1e-8;
constexpr int kMaxNewton = 50;

void check_provider(int a, int m) {
  if (a < 0 || a >= m) {
    throw ValidationError("targeting: provider index " + std::to_string(a) +
                          " outside 0.." + std::to_string(m - 1));
  }
}

bool wants(const std::vector<ParameterTag>& params, ParameterTag tag) {
  return std::find(params.begin(), params.end(), tag) != params.end();
}

// reference-coded provider indicators: the first provider is the baseline, so
// the design stays full rank next to the regression intercept
Eigen::MatrixXd reference_design(const Eigen::MatrixXd& w, const std::vector<int>& a, int m) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(w.rows(), w.cols() + m - 1);
  out.leftCols(w.cols()) = w;
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const int c = a[static_cast<std::size_t>(i)];
    if (c > 0) out(i, w.cols() + c - 1) = 1.0;
  }
  return out;
}

}  // namespace

CleverCovariates clever_covariates(int a, const Dataset& d, const NuisanceEstimates& nu,
                                   bool with_direct) {
  const int n = d.n();
  check_provider(a, d.m());
  if (nu.pi_hat.rows() != n) {
    throw ValidationError("targeting: nuisance estimates cover " +
                          std::to_string(nu.pi_hat.rows()) + " rows, dataset has " +
                          std::to_string(n));
  }
  const double p = nu.p_hat(a);
  if (!(p > 0.0)) {
    throw EstimationError("targeting: provider '" + d.provider_labels[static_cast<std::size_t>(a)] +
                          "' has zero estimated share");
  }

  CleverCovariates cc;
  cc.m = Eigen::VectorXd::Zero(n);
  cc.k = Eigen::VectorXd::Zero(n);
  cc.h.resize(n);
  for (int i = 0; i < n; ++i) {
    cc.h(i) = nu.pi_hat(i, a) / p;
    if (d.provider[static_cast<std::size_t>(i)] == a) cc.k(i) = 1.0 / p;
  }

  if (with_direct) {
    const Eigen::MatrixXd pi_trunc = truncate_propensities(nu.pi_hat, nu.truncation_bound);
    std::vector<int> zero_rows;
    for (int i = 0; i < n; ++i) {
      if (pi_trunc(i, a) <= 0.0) {
        zero_rows.push_back(i);
      } else if (d.provider[static_cast<std::size_t>(i)] == a) {
        cc.m(i) = 1.0 / pi_trunc(i, a);
      }
    }
    if (!zero_rows.empty()) {
      std::ostringstream msg;
      msg << "targeting: provider '" << d.provider_labels[static_cast<std::size_t>(a)]
          << "' has zero truncated propensity at row";
      if (zero_rows.size() > 1) msg << "s";
      for (std::size_t r = 0; r < zero_rows.size() && r < 5; ++r) msg << " " << zero_rows[r];
      if (zero_rows.size() > 5) msg << " and " << zero_rows.size() - 5 << " more";
      msg << "; the direct parameter is unavailable";
      throw EstimationError(msg.str());
    }
  }
  return cc;
}

FluctuationFit fit_epsilon(const Eigen::VectorXd& offset_logits, const Eigen::VectorXd& covariate,
                           const Eigen::VectorXd& y_scaled) {
  const Eigen::Index n = y_scaled.size();
  if (offset_logits.size() != n || covariate.size() != n) {
    throw ValidationError("fluctuation: offset, covariate, and outcome lengths differ");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::isfinite(offset_logits(i)) || !std::isfinite(covariate(i))) {
      throw ValidationError("fluctuation: non-finite offset or covariate");
    }
    if (y_scaled(i) < 0.0 || y_scaled(i) > 1.0) {
      throw ValidationError("fluctuation: outcomes must lie in [0, 1]");
    }
  }

  auto score_at = [&](double e) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      s += covariate(i) * (y_scaled(i) - expit(offset_logits(i) + e * covariate(i)));
    }
    return s;
  };
  // canonical form y*eta - log(1 + exp(eta)): exact for any eta, so the line
  // search never sees an artificial plateau near saturated predictions
  auto loglik_at = [&](double e) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double eta = offset_logits(i) + e * covariate(i);
      const double softplus =
          eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
      ll += y_scaled(i) * eta - softplus;
    }
    return ll;
  };

  FluctuationFit fit;
  double score = score_at(0.0);
  while (fit.iterations < kMaxNewton && std::abs(score) > kScoreTol) {
    double hess = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double p = expit(offset_logits(i) + fit.epsilon * covariate(i));
      hess += covariate(i) * covariate(i) * p * (1.0 - p);
    }
    if (!(hess > 0.0)) break;  // flat likelihood, nothing left to move
    const double step = score / hess;
    const double ll0 = loglik_at(fit.epsilon);
    // near the optimum the true gain drops below the rounding noise of the
    // summed log-likelihood, so ties within that noise are accepted
    const double slack = 1e-12 * (1.0 + std::abs(ll0));
    double t = 1.0;
    while (t > 1e-12 && loglik_at(fit.epsilon + t * step) < ll0 - slack) t *= 0.5;
    if (t <= 1e-12) break;
    fit.epsilon += t * step;
    ++fit.iterations;
    score = score_at(fit.epsilon);
  }
  fit.score_at_solution = score;
  fit.converged = std::abs(score) <= kScoreTol;
  return fit;
}

TargetResult target_psi1(int a, const Dataset& d, const NuisanceEstimates& nu,
                         const OutcomeScale& s) {
  check_provider(a, d.m());
  const CleverCovariates cc = clever_covariates(a, d, nu, false);
  const int n = d.n();
  Eigen::VectorXd offsets(n);
  for (int i = 0; i < n; ++i) {
    offsets(i) = safe_logit(nu.mu_dot(d.provider[static_cast<std::size_t>(i)]));
  }
  TargetResult out;
  out.fluctuation = fit_epsilon(offsets, cc.k, d.y);
  out.updated = nu.mu_dot;
  out.updated(a) = expit(safe_logit(nu.mu_dot(a)) + out.fluctuation.epsilon / nu.p_hat(a));
  out.point_scaled = out.updated(a);
  out.point = s.to_original(out.point_scaled);
  return out;
}

TargetResult target_psi2(int a, const Dataset& d, const NuisanceEstimates& nu,
                         const OutcomeScale& s) {
  check_provider(a, d.m());
  const CleverCovariates cc = clever_covariates(a, d, nu, false);
  const int n = d.n();
  Eigen::VectorXd offsets(n);
  for (int i = 0; i < n; ++i) offsets(i) = safe_logit(nu.mu_tilde(i));

  TargetResult out;
  out.fluctuation = fit_epsilon(offsets, cc.h, d.y);
  out.updated.resize(n);
  double acc = 0.0;
  int n_a = 0;
  for (int i = 0; i < n; ++i) {
    out.updated(i) = expit(offsets(i) + out.fluctuation.epsilon * cc.h(i));
    if (d.provider[static_cast<std::size_t>(i)] == a) {
      acc += out.updated(i);
      ++n_a;
    }
  }
  if (n_a == 0) {
    throw EstimationError("targeting: provider '" + d.provider_labels[static_cast<std::size_t>(a)] +
                          "' has no observations");
  }
  out.point_scaled = acc / n_a;
  out.point = s.to_original(out.point_scaled);
  return out;
}

TargetResult target_phi(int a, const Dataset& d, const NuisanceEstimates& nu,
                        const OutcomeScale& s) {
  check_provider(a, d.m());
  if (!nu.mu_bar_present) {
    throw EstimationError("targeting: the direct parameter needs the provider outcome model");
  }
  const CleverCovariates cc = clever_covariates(a, d, nu, true);
  const Eigen::MatrixXd pi_trunc = truncate_propensities(nu.pi_hat, nu.truncation_bound);
  const int n = d.n();
  Eigen::VectorXd offsets(n);
  for (int i = 0; i < n; ++i) {
    offsets(i) = safe_logit(nu.mu_bar(i, d.provider[static_cast<std::size_t>(i)]));
  }

  TargetResult out;
  out.fluctuation = fit_epsilon(offsets, cc.m, d.y);
  // evaluate the fluctuated regression at provider a for every observation:
  // the direction there is 1/pi regardless of the observed provider
  out.updated.resize(n);
  for (int i = 0; i < n; ++i) {
    out.updated(i) =
        expit(safe_logit(nu.mu_bar(i, a)) + out.fluctuation.epsilon / pi_trunc(i, a));
  }
  out.point_scaled = out.updated.mean();
  out.point = s.to_original(out.point_scaled);
  return out;
}

namespace {

std::string describe_parameters(const std::vector<ParameterTag>& params) {
  std::string out;
  for (const ParameterTag tag : params) {
    if (!out.empty()) out += ",";
    out += parameter_name(tag);
  }
  return out;
}

void fill(Estimate& slot, double value) {
  slot.value = value;
  slot.defined = std::isfinite(value);
}

void attach(Estimate& slot, const Eigen::VectorXd& d, double level) {
  const Inference inf = inference(slot.value, d, level);
  slot.se = inf.se;
  slot.lo = inf.lo;
  slot.hi = inf.hi;
  slot.has_inference = true;
}

}  // namespace

ProfileEstimates profile_from_nuisances(const Dataset& d, const FoldAssignment& folds,
                                        const EstimationConfig& cfg, const NuisanceEstimates& nu,
                                        const OutcomeScale& s) {
  if (cfg.parameters.empty()) throw ValidationError("estimation: no parameters requested");
  if (!(cfg.level > 0.0 && cfg.level < 1.0)) {
    throw ValidationError("estimation: confidence level must lie strictly between 0 and 1");
  }
  const int m = d.m();
  if (nu.pi_hat.rows() != d.n() || nu.pi_hat.cols() != m || nu.mu_tilde.size() != d.n() ||
      nu.p_hat.size() != m) {
    throw ValidationError("estimation: nuisance estimates do not match the dataset shape");
  }
  const bool need_phi = wants(cfg.parameters, ParameterTag::phi);
  const bool need_ratio = wants(cfg.parameters, ParameterTag::smr);
  const bool need_diff = wants(cfg.parameters, ParameterTag::er);
  const bool need_psi1 = need_ratio || need_diff || wants(cfg.parameters, ParameterTag::psi1);
  const bool need_psi2 = need_ratio || need_diff || wants(cfg.parameters, ParameterTag::psi2);

  Dataset scaled = d;
  scaled.y = apply_scale(d.y, s);

  ProfileEstimates res;
  res.parameters = cfg.parameters;
  res.level = cfg.level;
  res.seed = cfg.seed;
  res.folds = folds.folds;
  res.scale = s;
  res.positivity = positivity_report(nu.pi_hat, cfg.positivity_threshold, d.provider_labels);
  res.warnings = nu.warnings;
  res.warnings.insert(res.warnings.end(), folds.warnings.begin(), folds.warnings.end());
  {
    std::ostringstream echo;
    echo << "parameters=" << describe_parameters(cfg.parameters) << " folds=" << folds.folds
         << " seed=" << cfg.seed << " level=" << cfg.level
         << " truncation=" << cfg.nuisance.truncation_bound << " delta=" << cfg.scale_delta
         << " propensity=" << cfg.nuisance.propensity.describe()
         << " outcome=" << cfg.nuisance.outcome.describe();
    res.config_echo = echo.str();
  }

  const Eigen::MatrixXd pi_trunc =
      need_phi ? truncate_propensities(nu.pi_hat, nu.truncation_bound) : Eigen::MatrixXd();
  const auto counts = d.provider_counts();

  res.eif_means = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(cfg.parameters.size()), m,
                                            std::numeric_limits<double>::quiet_NaN());
  std::array<int, 5> mean_row;
  mean_row.fill(-1);
  for (std::size_t i = 0; i < cfg.parameters.size(); ++i) {
    mean_row[static_cast<std::size_t>(cfg.parameters[i])] = static_cast<int>(i);
  }

  res.providers.resize(static_cast<std::size_t>(m));
  const std::size_t workers =
      cfg.threads > 0 ? static_cast<std::size_t>(cfg.threads) : default_threads();
  parallel_for(static_cast<std::size_t>(m), workers, [&](std::size_t ai) {
    const int a = static_cast<int>(ai);
    ProviderProfile& row = res.providers[ai];
    row.label = d.provider_labels[ai];
    row.n_obs = counts[ai];
    row.positivity = res.positivity.providers[ai].flag;

    auto note_nonconverged = [&row](const char* what, const FluctuationFit& fit) {
      if (!fit.converged) {
        row.notes.push_back(std::string("fluctuation for ") + what + " did not converge (score " +
                            std::to_string(fit.score_at_solution) + "); estimate not certified");
      }
    };
    auto record_mean = [&](ParameterTag tag, double v) {
      const int r = mean_row[static_cast<std::size_t>(tag)];
      if (r >= 0) res.eif_means(r, static_cast<Eigen::Index>(ai)) = v;
    };

    double psi1 = 0.0, psi2 = 0.0;
    Eigen::VectorXd d1, d2;
    bool have_psi1 = false, have_psi2 = false;

    if (need_psi1) {
      try {
        const TargetResult t1 = target_psi1(a, scaled, nu, s);
        note_nonconverged("the provider mean", t1.fluctuation);
        psi1 = t1.point;
        have_psi1 = true;
        d1 = eif_psi1(d.y, d.provider, a, nu.p_hat(a), psi1);
        record_mean(ParameterTag::psi1, d1.mean());
        if (wants(cfg.parameters, ParameterTag::psi1)) {
          fill(row.psi1, psi1);
          attach(row.psi1, d1, cfg.level);
        }
      } catch (const std::exception& e) {
        row.notes.push_back(e.what());
      }
    }
    if (need_psi2) {
      try {
        const TargetResult t2 = target_psi2(a, scaled, nu, s);
        note_nonconverged("the indirect mean", t2.fluctuation);
        psi2 = t2.point;
        have_psi2 = true;
        Eigen::VectorXd mu_tilde_orig(d.n());
        for (int i = 0; i < d.n(); ++i) mu_tilde_orig(i) = s.to_original(t2.updated(i));
        d2 = eif_psi2(d.y, d.provider, a, nu.pi_hat.col(a), mu_tilde_orig, nu.p_hat(a), psi2);
        record_mean(ParameterTag::psi2, d2.mean());
        if (wants(cfg.parameters, ParameterTag::psi2)) {
          fill(row.psi2, psi2);
          attach(row.psi2, d2, cfg.level);
        }
      } catch (const std::exception& e) {
        row.notes.push_back(e.what());
      }
    }
    if (need_diff && have_psi1 && have_psi2) {
      const Eigen::VectorXd der = eif_delta(d1, d2, psi1, psi2, DeltaKind::er);
      fill(row.er, psi1 - psi2);
      attach(row.er, der, cfg.level);
      record_mean(ParameterTag::er, der.mean());
    }
    if (need_ratio && have_psi1 && have_psi2) {
      if (psi2 > 0.0) {
        const Eigen::VectorXd dsmr = eif_delta(d1, d2, psi1, psi2, DeltaKind::smr);
        fill(row.smr, psi1 / psi2);
        attach(row.smr, dsmr, cfg.level);
        record_mean(ParameterTag::smr, dsmr.mean());
      } else {
        row.notes.push_back("ratio undefined: indirect standardized mean is not positive");
      }
    }
    if (need_phi) {
      try {
        const TargetResult tp = target_phi(a, scaled, nu, s);
        note_nonconverged("the direct parameter", tp.fluctuation);
        Eigen::VectorXd mu_bar_orig(d.n());
        for (int i = 0; i < d.n(); ++i) mu_bar_orig(i) = s.to_original(tp.updated(i));
        const Eigen::VectorXd dphi =
            eif_phi(d.y, d.provider, a, pi_trunc.col(a), mu_bar_orig, tp.point);
        fill(row.phi, tp.point);
        attach(row.phi, dphi, cfg.level);
        record_mean(ParameterTag::phi, dphi.mean());
      } catch (const std::exception& e) {
        row.notes.push_back(e.what());
      }
    }
  });
  return res;
}

ProfileEstimates compute_all(const Dataset& d, const FoldAssignment& folds,
                             const EstimationConfig& cfg) {
  if (cfg.parameters.empty()) throw ValidationError("estimation: no parameters requested");
  if (!(cfg.level > 0.0 && cfg.level < 1.0)) {
    throw ValidationError("estimation: confidence level must lie strictly between 0 and 1");
  }
  const OutcomeScale s = scale_outcomes(d, cfg.scale_delta);
  Dataset scaled = d;
  scaled.y = apply_scale(d.y, s);

  NuisanceConfig ncfg = cfg.nuisance;
  ncfg.want_mu_bar = wants(cfg.parameters, ParameterTag::phi);
  if (cfg.threads != 0) ncfg.threads = cfg.threads;
  const NuisanceEstimates nu = estimate_nuisances(scaled, folds, ncfg);
  return profile_from_nuisances(d, folds, cfg, nu, s);
}

const Estimate& ProviderProfile::estimate(ParameterTag tag) const {
  switch (tag) {
    case ParameterTag::phi: return phi;
    case ParameterTag::psi1: return psi1;
    case ParameterTag::psi2: return psi2;
    case ParameterTag::er: return er;
    case ParameterTag::smr: return smr;
  }
  throw ValidationError("provider profile: unknown parameter tag");
}

double ProfileEstimates::eif_mean(ParameterTag tag, int provider) const {
  if (provider < 0 || provider >= eif_means.cols()) {
    throw ValidationError("influence means: provider index out of range");
  }
  for (std::size_t i = 0; i < parameters.size(); ++i) {
    if (parameters[i] == tag) return eif_means(static_cast<Eigen::Index>(i), provider);
  }
  throw ValidationError("influence means: parameter " + parameter_name(tag) +
                        " was not requested");
}

ProfileEstimates glm_benchmark(const Dataset& d, const EstimationConfig& cfg) {
  if (cfg.parameters.empty()) throw ValidationError("estimation: no parameters requested");
  const int n = d.n();
  const int m = d.m();
  const Link link = d.binary_outcome ? Link::logit : Link::identity;

  LearnerSpec glm_spec;
  glm_spec.kind = LearnerKind::glm;
  glm_spec.lambda = 0.0;  // plain least squares / logistic fit, ridge only as fallback

  ProfileEstimates res;
  res.parameters = cfg.parameters;
  res.level = cfg.level;
  res.seed = cfg.seed;
  res.folds = 0;
  res.config_echo = "benchmark=glm parameters=" + describe_parameters(cfg.parameters);
  res.scale = OutcomeScale{};

  const bool need_phi = wants(cfg.parameters, ParameterTag::phi);
  const bool need_ratio = wants(cfg.parameters, ParameterTag::smr);
  const bool need_diff = wants(cfg.parameters, ParameterTag::er);
  const bool need_psi1 = need_ratio || need_diff || wants(cfg.parameters, ParameterTag::psi1);
  const bool need_psi2 = need_ratio || need_diff || wants(cfg.parameters, ParameterTag::psi2);

  Eigen::MatrixXd phi_pred;  // n x m predictions with the provider forced
  if (need_phi) {
    FitDiagnostics diag;
    const RegressorPtr joint =
        fit_regressor(glm_spec, reference_design(d.x, d.provider, m), d.y, link, &diag);
    if (diag.ridge_fallback) {
      res.warnings.push_back("outcome model: singular design, ridge fallback applied");
    }
    phi_pred.resize(n, m);
    std::vector<int> forced(static_cast<std::size_t>(n));
    for (int a = 0; a < m; ++a) {
      std::fill(forced.begin(), forced.end(), a);
      phi_pred.col(a) = joint->predict(reference_design(d.x, forced, m));
    }
  }

  Eigen::VectorXd mu_tilde;
  if (need_psi2) {
    FitDiagnostics diag;
    const RegressorPtr marginal = fit_regressor(glm_spec, d.x, d.y, link, &diag);
    if (diag.ridge_fallback) {
      res.warnings.push_back("covariate model: singular design, ridge fallback applied");
    }
    mu_tilde = marginal->predict(d.x);
  }

  const auto counts = d.provider_counts();
  res.providers.resize(static_cast<std::size_t>(m));
  for (int a = 0; a < m; ++a) {
    ProviderProfile& row = res.providers[static_cast<std::size_t>(a)];
    row.label = d.provider_labels[static_cast<std::size_t>(a)];
    row.n_obs = counts[static_cast<std::size_t>(a)];

    double psi1 = 0.0, psi2 = 0.0;
    if (need_psi1) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        if (d.provider[static_cast<std::size_t>(i)] == a) acc += d.y(i);
      }
      psi1 = acc / counts[static_cast<std::size_t>(a)];
      if (wants(cfg.parameters, ParameterTag::psi1)) fill(row.psi1, psi1);
    }
    if (need_psi2) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        if (d.provider[static_cast<std::size_t>(i)] == a) acc += mu_tilde(i);
      }
      psi2 = acc / counts[static_cast<std::size_t>(a)];
      if (wants(cfg.parameters, ParameterTag::psi2)) fill(row.psi2, psi2);
    }
    if (need_diff) fill(row.er, psi1 - psi2);
    if (need_ratio) {
      if (psi2 > 0.0) {
        fill(row.smr, psi1 / psi2);
      } else {
        row.notes.push_back("ratio undefined: indirect standardized mean is not positive");
      }
    }
    if (need_phi) fill(row.phi, phi_pred.col(a).mean());
  }
  return res;
}

}  // namespace targprof
