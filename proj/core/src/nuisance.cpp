#include "targprof/nuisance.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

#include "targprof/errors.hpp"
#include "targprof/parallel.hpp"
#include "targprof/rng.hpp"

namespace targprof {

namespace {

// Stream tags keeping the per-fold stacking seeds disjoint across the three
// model families.
constexpr std::uint64_t kPropensityStream = 0x50490000u;
constexpr std::uint64_t kMuTildeStream = 0x4d540000u;
constexpr std::uint64_t kMuBarStream = 0x4d420000u;

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, const std::vector<int>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

Eigen::VectorXd take_entries(const Eigen::VectorXd& v, const std::vector<int>& rows) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(rows[i]);
  return out;
}

std::vector<int> take_labels(const std::vector<int>& a, const std::vector<int>& rows) {
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = a[static_cast<std::size_t>(rows[i])];
  return out;
}

// Covariates followed by a provider one-hot block, the design for the joint
// outcome regression E[Y | A, W].
Eigen::MatrixXd with_onehot(const Eigen::MatrixXd& w, const std::vector<int>& a, int m) {
  Eigen::MatrixXd out(w.rows(), w.cols() + m);
  out.leftCols(w.cols()) = w;
  out.rightCols(m).setZero();
  for (Eigen::Index i = 0; i < w.rows(); ++i) out(i, w.cols() + a[static_cast<std::size_t>(i)]) = 1.0;
  return out;
}

struct FoldOutputs {
  Eigen::VectorXd mu_dot;
  Eigen::VectorXd p_hat;
  std::vector<std::string> warnings;
};

}  // namespace

NuisanceEstimates estimate_nuisances(const Dataset& d, const FoldAssignment& folds,
                                     const NuisanceConfig& cfg) {
  const int n = d.n();
  const int m = d.m();
  if (folds.fold.size() != static_cast<std::size_t>(n)) {
    throw ValidationError("nuisance: fold assignment covers " + std::to_string(folds.fold.size()) +
                          " rows but the dataset has " + std::to_string(n));
  }
  for (int i = 0; i < n; ++i) {
    if (d.y(i) < 0.0 || d.y(i) > 1.0) {
      throw ValidationError("nuisance: outcomes must be scaled to [0, 1] before estimation");
    }
  }

  const int J = folds.folds;
  const auto training = folds.training_rows();
  const auto validation = folds.validation_rows();

  // Every provider has to appear in every training split, otherwise the
  // propensity model cannot assign it mass and downstream weights blow up.
  for (int j = 0; j < J; ++j) {
    std::vector<int> count(static_cast<std::size_t>(m), 0);
    for (int row : training[static_cast<std::size_t>(j)]) {
      ++count[static_cast<std::size_t>(d.provider[static_cast<std::size_t>(row)])];
    }
    for (int a = 0; a < m; ++a) {
      if (count[static_cast<std::size_t>(a)] == 0) {
        throw EstimationError("nuisance: provider '" + d.provider_labels[static_cast<std::size_t>(a)] +
                              "' is absent from training split " + std::to_string(j) +
                              "; use fewer folds or a larger minimum provider volume");
      }
    }
  }

  NuisanceEstimates est;
  est.pi_hat.resize(n, m);
  est.mu_tilde.resize(n);
  est.mu_bar_present = cfg.want_mu_bar;
  if (cfg.want_mu_bar) est.mu_bar.resize(n, m);
  est.folds = folds;
  est.truncation_bound = cfg.truncation_bound;

  std::vector<FoldOutputs> per_fold(static_cast<std::size_t>(J));
  const std::size_t workers = cfg.threads > 0 ? static_cast<std::size_t>(cfg.threads) : default_threads();

  parallel_for(static_cast<std::size_t>(J), workers, [&](std::size_t fj) {
    const int j = static_cast<int>(fj);
    const auto& train = training[fj];
    const auto& valid = validation[fj];
    FoldOutputs& out = per_fold[fj];

    const Eigen::MatrixXd w_train = take_rows(d.x, train);
    const Eigen::MatrixXd w_valid = take_rows(d.x, valid);
    const Eigen::VectorXd y_train = take_entries(d.y, train);
    const std::vector<int> a_train = take_labels(d.provider, train);

    StackDiagnostics pi_diag;
    const ClassifierPtr pi = fit_stacked_classifier(cfg.propensity, w_train, a_train, m,
                                                    derive_seed(cfg.seed, kPropensityStream + j),
                                                    &pi_diag);
    const Eigen::MatrixXd pi_pred = pi->predict_proba(w_valid);

    StackDiagnostics mt_diag;
    const RegressorPtr mt = fit_stacked_regressor(cfg.outcome, w_train, y_train, Link::logit,
                                                  derive_seed(cfg.seed, kMuTildeStream + j),
                                                  &mt_diag);
    const Eigen::VectorXd mt_pred = mt->predict(w_valid);

    for (std::size_t r = 0; r < valid.size(); ++r) {
      est.pi_hat.row(valid[r]) = pi_pred.row(static_cast<Eigen::Index>(r));
      est.mu_tilde(valid[r]) = mt_pred(static_cast<Eigen::Index>(r));
    }

    auto collect = [&out](const StackDiagnostics& diag, const char* what, int fold) {
      for (const auto& msg : diag.warnings) {
        out.warnings.push_back(std::string(what) + " fold " + std::to_string(fold) + ": " + msg);
      }
    };
    collect(pi_diag, "propensity", j);
    collect(mt_diag, "outcome", j);

    if (cfg.want_mu_bar) {
      if (cfg.mu_bar_mode == MuBarMode::onehot) {
        StackDiagnostics mb_diag;
        const RegressorPtr mb = fit_stacked_regressor(
            cfg.outcome, with_onehot(w_train, a_train, m), y_train, Link::logit,
            derive_seed(cfg.seed, kMuBarStream + j), &mb_diag);
        collect(mb_diag, "provider outcome", j);
        std::vector<int> forced(valid.size());
        for (int a = 0; a < m; ++a) {
          std::fill(forced.begin(), forced.end(), a);
          const Eigen::VectorXd pred = mb->predict(with_onehot(w_valid, forced, m));
          for (std::size_t r = 0; r < valid.size(); ++r) {
            est.mu_bar(valid[r], a) = pred(static_cast<Eigen::Index>(r));
          }
        }
      } else {
        for (int a = 0; a < m; ++a) {
          std::vector<int> rows_a;
          for (int row : train) {
            if (d.provider[static_cast<std::size_t>(row)] == a) rows_a.push_back(row);
          }
          StackDiagnostics mb_diag;
          const RegressorPtr mb = fit_stacked_regressor(
              cfg.outcome, take_rows(d.x, rows_a), take_entries(d.y, rows_a), Link::logit,
              derive_seed(cfg.seed, kMuBarStream + static_cast<std::uint64_t>(j) * 1024u + a),
              &mb_diag);
          collect(mb_diag, "provider outcome", j);
          const Eigen::VectorXd pred = mb->predict(w_valid);
          for (std::size_t r = 0; r < valid.size(); ++r) {
            est.mu_bar(valid[r], a) = pred(static_cast<Eigen::Index>(r));
          }
        }
      }
    }

    // Plug-in pieces that need no model: provider means and frequencies on
    // the training split.
    out.mu_dot = Eigen::VectorXd::Zero(m);
    out.p_hat = Eigen::VectorXd::Zero(m);
    for (std::size_t r = 0; r < train.size(); ++r) {
      out.mu_dot(a_train[r]) += y_train(static_cast<Eigen::Index>(r));
      out.p_hat(a_train[r]) += 1.0;
    }
    for (int a = 0; a < m; ++a) out.mu_dot(a) /= out.p_hat(a);
    out.p_hat /= static_cast<double>(train.size());
  });

  est.mu_dot = Eigen::VectorXd::Zero(m);
  est.p_hat = Eigen::VectorXd::Zero(m);
  for (const auto& out : per_fold) {
    est.mu_dot += out.mu_dot;
    est.p_hat += out.p_hat;
    est.warnings.insert(est.warnings.end(), out.warnings.begin(), out.warnings.end());
  }
  est.mu_dot /= static_cast<double>(J);
  est.p_hat /= static_cast<double>(J);
  return est;
}

Eigen::MatrixXd truncate_propensities(const Eigen::MatrixXd& pi, double bound) {
  const int m = static_cast<int>(pi.cols());
  if (bound < 0.0 || (m > 0 && bound >= 1.0 / m)) {
    throw ValidationError("truncation bound must lie in [0, 1/m)");
  }
  if (bound == 0.0) return pi;

  Eigen::MatrixXd out = pi;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    // Raise deficient entries to the bound and shrink the rest to absorb the
    // added mass; shrinking can push new entries under the bound, so iterate
    // to the fixed point (at most m rounds, one per newly pinned entry).
    std::vector<bool> pinned(static_cast<std::size_t>(m), false);
    for (int round = 0; round < m; ++round) {
      bool changed = false;
      double free_sum = 0.0;
      int n_pinned = 0;
      for (int a = 0; a < m; ++a) {
        if (!pinned[static_cast<std::size_t>(a)] && out(i, a) < bound) {
          pinned[static_cast<std::size_t>(a)] = true;
          changed = true;
        }
        if (pinned[static_cast<std::size_t>(a)]) {
          ++n_pinned;
        } else {
          free_sum += out(i, a);
        }
      }
      if (n_pinned == 0) break;
      if (!changed && round > 0) break;
      const double scale = (1.0 - bound * n_pinned) / free_sum;
      for (int a = 0; a < m; ++a) {
        out(i, a) = pinned[static_cast<std::size_t>(a)] ? bound : out(i, a) * scale;
      }
    }
  }
  return out;
}

PositivityReport positivity_report(const Eigen::MatrixXd& pi_pre_truncation, double threshold,
                                   const std::vector<std::string>& labels) {
  const int m = static_cast<int>(pi_pre_truncation.cols());
  const int n = static_cast<int>(pi_pre_truncation.rows());
  if (labels.size() != static_cast<std::size_t>(m)) {
    throw ValidationError("positivity report: label count does not match provider count");
  }
  if (n == 0) throw ValidationError("positivity report: empty propensity matrix");

  PositivityReport rep;
  rep.threshold = threshold;
  rep.providers.resize(static_cast<std::size_t>(m));

  std::vector<double> col(static_cast<std::size_t>(n));
  for (int a = 0; a < m; ++a) {
    for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = pi_pre_truncation(i, a);
    std::sort(col.begin(), col.end());
    auto rank = [&](double q) {
      const int idx = static_cast<int>(std::ceil(q * n)) - 1;
      return col[static_cast<std::size_t>(std::clamp(idx, 0, n - 1))];
    };
    ProviderPositivity& p = rep.providers[static_cast<std::size_t>(a)];
    p.label = labels[static_cast<std::size_t>(a)];
    p.min = col.front();
    p.max = col.back();
    p.q01 = rank(0.01);
    p.median = rank(0.5);
    p.below_threshold =
        static_cast<int>(std::lower_bound(col.begin(), col.end(), threshold) - col.begin());
    p.flag = p.below_threshold > 0 ? PositivityFlag::practical_violation : PositivityFlag::ok;
    if (p.below_threshold > 0) rep.any_violation = true;
  }
  return rep;
}

}  // namespace targprof
