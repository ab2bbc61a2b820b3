#include "targprof/learners.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <queue>
#include <sstream>

#include "targprof/errors.hpp"
#include "targprof/rng.hpp"
#include "targprof/stats.hpp"

namespace targprof {

namespace {

std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd z(x.rows(), x.cols() + 1);
  z.col(0).setOnes();
  z.rightCols(x.cols()) = x;
  return z;
}

void require_width(const Eigen::MatrixXd& x, int d) {
  if (x.cols() != d) {
    throw ValidationError("learner: expected " + std::to_string(d) + " features, got " +
                          std::to_string(x.cols()));
  }
}

// ---------------------------------------------------------------------------
// mean

class MeanRegressor final : public Regressor {
public:
  MeanRegressor(double value, int dim, Link link) : value_(value), dim_(dim), link_(link) {}
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const override {
    require_width(x, dim_);
    return Eigen::VectorXd::Constant(x.rows(), value_);
  }
  int feature_dim() const override { return dim_; }
  Link link() const override { return link_; }

private:
  double value_;
  int dim_;
  Link link_;
};

class ConstantClassifier final : public Classifier {
public:
  ConstantClassifier(Eigen::VectorXd probs, int dim) : probs_(std::move(probs)), dim_(dim) {}
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& x) const override {
    require_width(x, dim_);
    Eigen::MatrixXd p(x.rows(), probs_.size());
    p.rowwise() = probs_.transpose();
    return p;
  }
  int feature_dim() const override { return dim_; }
  int n_classes() const override { return static_cast<int>(probs_.size()); }

private:
  Eigen::VectorXd probs_;
  int dim_;
};

// ---------------------------------------------------------------------------
// glm

class LinearModel final : public Regressor {
public:
  LinearModel(Eigen::VectorXd beta, Link link) : beta_(std::move(beta)), link_(link) {}
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const override {
    require_width(x, feature_dim());
    Eigen::VectorXd eta = with_intercept(x) * beta_;
    if (link_ == Link::logit) {
      // saturated fits round to exactly 0 or 1 in doubles; keep the open interval
      for (Eigen::Index i = 0; i < eta.size(); ++i) eta[i] = clip_prob(expit(eta[i]));
    }
    return eta;
  }
  int feature_dim() const override { return static_cast<int>(beta_.size()) - 1; }
  Link link() const override { return link_; }

private:
  Eigen::VectorXd beta_;
  Link link_;
};

// Solves (X'WX + lambda*D) beta = rhs where D penalizes every column except
// the intercept. The normal equations are consistent even for collinear
// designs, so singularity is detected from the LDLT pivots rather than the
// solve residual.
Eigen::VectorXd penalized_solve(const Eigen::MatrixXd& xtx, const Eigen::VectorXd& rhs,
                                double lambda, bool* fell_back) {
  Eigen::MatrixXd a = xtx;
  for (Eigen::Index j = 1; j < a.cols(); ++j) a(j, j) += lambda;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  const Eigen::VectorXd d = ldlt.vectorD();
  const double dmax = d.cwiseAbs().maxCoeff();
  const bool singular = ldlt.info() != Eigen::Success || dmax <= 0.0 ||
                        d.minCoeff() <= 1e-10 * dmax;
  Eigen::VectorXd beta;
  if (!singular) beta = ldlt.solve(rhs);
  if (singular || !beta.allFinite()) {
    if (fell_back != nullptr) *fell_back = true;
    for (Eigen::Index j = 1; j < a.cols(); ++j) a(j, j) += 1e-6;
    beta = a.ldlt().solve(rhs);
    if (!beta.allFinite()) throw EstimationError("glm: normal equations unsolvable even with ridge fallback");
  }
  return beta;
}

RegressorPtr fit_ols(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda,
                     FitDiagnostics* diag) {
  Eigen::MatrixXd z = with_intercept(x);
  bool fell_back = false;
  Eigen::VectorXd beta =
      penalized_solve(z.transpose() * z, z.transpose() * y, lambda, &fell_back);
  if (diag != nullptr && fell_back) {
    diag->ridge_fallback = true;
    diag->warnings.push_back("glm: singular design, refit with ridge 1e-6");
  }
  return std::make_shared<LinearModel>(std::move(beta), Link::identity);
}

double binomial_deviance(const Eigen::VectorXd& y, const Eigen::VectorXd& eta, double lambda,
                         const Eigen::VectorXd& beta) {
  double dev = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double p = clip_prob(expit(eta[i]));
    dev -= y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
  }
  for (Eigen::Index j = 1; j < beta.size(); ++j) dev += 0.5 * lambda * beta[j] * beta[j];
  return dev;
}

RegressorPtr fit_logit_glm(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda,
                           FitDiagnostics* diag) {
  const Eigen::MatrixXd z = with_intercept(x);
  const Eigen::Index d = z.cols();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd eta = Eigen::VectorXd::Zero(y.size());
  double dev = binomial_deviance(y, eta, lambda, beta);
  bool fell_back = false;
  int iter = 0;
  for (; iter < 100; ++iter) {
    Eigen::VectorXd p(y.size()), w(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      p[i] = expit(eta[i]);
      w[i] = std::max(p[i] * (1.0 - p[i]), 1e-10);
    }
    Eigen::VectorXd grad = z.transpose() * (y - p);
    for (Eigen::Index j = 1; j < d; ++j) grad[j] -= lambda * beta[j];
    if (grad.lpNorm<Eigen::Infinity>() <= 1e-8) break;
    Eigen::MatrixXd h = z.transpose() * w.asDiagonal() * z;
    Eigen::VectorXd step = penalized_solve(h, grad, lambda, &fell_back);
    double scale = 1.0;
    for (int half = 0; half < 40; ++half) {
      Eigen::VectorXd cand = beta + scale * step;
      Eigen::VectorXd ceta = z * cand;
      const double cdev = binomial_deviance(y, ceta, lambda, cand);
      if (cdev <= dev + 1e-12) {
        beta = std::move(cand);
        eta = std::move(ceta);
        dev = cdev;
        break;
      }
      scale *= 0.5;
      if (half == 39) iter = 99;  // no usable step, stop
    }
  }
  if (diag != nullptr) {
    diag->iterations = iter;
    if (fell_back) {
      diag->ridge_fallback = true;
      diag->warnings.push_back("glm: singular design, refit with ridge 1e-6");
    }
    if (iter >= 100) {
      diag->converged = false;
      diag->warnings.push_back("glm: logistic fit stopped before gradient tolerance");
    }
  }
  return std::make_shared<LinearModel>(std::move(beta), Link::logit);
}

// ---------------------------------------------------------------------------
// knn

class KnnRegressor final : public Regressor {
public:
  KnnRegressor(Eigen::MatrixXd x, Eigen::VectorXd y, int k, Link link)
      : x_(std::move(x)), y_(std::move(y)), k_(k), link_(link) {}

  Eigen::VectorXd predict(const Eigen::MatrixXd& q) const override {
    require_width(q, feature_dim());
    Eigen::VectorXd out(q.rows());
    std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(x_.rows()));
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      for (Eigen::Index r = 0; r < x_.rows(); ++r) {
        dist[static_cast<std::size_t>(r)] = {(x_.row(r) - q.row(i)).squaredNorm(),
                                             static_cast<int>(r)};
      }
      // ties broken by training-row index so predictions are reproducible
      std::partial_sort(dist.begin(), dist.begin() + k_, dist.end());
      double s = 0.0;
      for (int j = 0; j < k_; ++j) s += y_[dist[static_cast<std::size_t>(j)].second];
      out[i] = s / k_;
      if (link_ == Link::logit) out[i] = clip_prob(out[i]);
    }
    return out;
  }
  int feature_dim() const override { return static_cast<int>(x_.cols()); }
  Link link() const override { return link_; }

private:
  Eigen::MatrixXd x_;
  Eigen::VectorXd y_;
  int k_;
  Link link_;
};

class KnnClassifier final : public Classifier {
public:
  KnnClassifier(Eigen::MatrixXd x, std::vector<int> labels, int n_classes, int k)
      : x_(std::move(x)), labels_(std::move(labels)), m_(n_classes), k_(k) {}

  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& q) const override {
    require_width(q, feature_dim());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(q.rows(), m_);
    std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(x_.rows()));
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      for (Eigen::Index r = 0; r < x_.rows(); ++r) {
        dist[static_cast<std::size_t>(r)] = {(x_.row(r) - q.row(i)).squaredNorm(),
                                             static_cast<int>(r)};
      }
      std::partial_sort(dist.begin(), dist.begin() + k_, dist.end());
      for (int j = 0; j < k_; ++j) {
        out(i, labels_[static_cast<std::size_t>(dist[static_cast<std::size_t>(j)].second)]) +=
            1.0 / k_;
      }
    }
    return out;
  }
  int feature_dim() const override { return static_cast<int>(x_.cols()); }
  int n_classes() const override { return m_; }

private:
  Eigen::MatrixXd x_;
  std::vector<int> labels_;
  int m_;
  int k_;
};

int capped_neighbors(const LearnerSpec& spec, Eigen::Index n, FitDiagnostics* diag) {
  if (spec.neighbors < 1) throw ValidationError("knn: neighbors must be at least 1");
  if (spec.neighbors <= n) return spec.neighbors;
  if (diag != nullptr) {
    diag->warnings.push_back("knn: neighbors capped at training size " + std::to_string(n));
  }
  return static_cast<int>(n);
}

// ---------------------------------------------------------------------------
// gbt: histogram gradient boosting with quantile bins and Newton leaf values

constexpr double kLeafRidge = 1e-3;

struct BinnedDesign {
  Eigen::Index n = 0;
  std::vector<std::vector<double>> edges;          // per feature, strictly increasing
  std::vector<std::vector<std::uint16_t>> codes;   // per feature, length n
};

BinnedDesign bin_design(const Eigen::MatrixXd& x, int max_bins) {
  if (max_bins < 2 || max_bins > 65535) throw ValidationError("gbt: max_bins must be in [2, 65535]");
  BinnedDesign b;
  b.n = x.rows();
  b.edges.resize(static_cast<std::size_t>(x.cols()));
  b.codes.resize(static_cast<std::size_t>(x.cols()));
  std::vector<double> sorted(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index f = 0; f < x.cols(); ++f) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) sorted[static_cast<std::size_t>(i)] = x(i, f);
    std::sort(sorted.begin(), sorted.end());
    auto& e = b.edges[static_cast<std::size_t>(f)];
    for (int q = 1; q < max_bins; ++q) {
      const auto pos = static_cast<std::size_t>(
          static_cast<double>(q) * static_cast<double>(sorted.size()) / max_bins);
      const double v = sorted[std::min(pos, sorted.size() - 1)];
      if (e.empty() || v > e.back()) e.push_back(v);
    }
    auto& c = b.codes[static_cast<std::size_t>(f)];
    c.resize(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      // code = number of edges <= x, so "code <= t" is exactly "x < edges[t]"
      c[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(
          std::upper_bound(e.begin(), e.end(), x(i, f)) - e.begin());
    }
  }
  return b;
}

struct GbtNode {
  int feature = -1;         // -1 marks a leaf
  double threshold = 0.0;   // go left when x[feature] < threshold
  int left = -1;
  int right = -1;
  double value = 0.0;       // leaf increment, already scaled by the learning rate
};

struct GbtModel {
  std::vector<std::vector<GbtNode>> trees;
  double base_score = 0.0;
  Link link = Link::identity;

  double raw_score(const Eigen::MatrixXd& x, Eigen::Index row) const {
    double f = base_score;
    for (const auto& tree : trees) {
      int node = 0;
      while (tree[static_cast<std::size_t>(node)].feature >= 0) {
        const auto& nd = tree[static_cast<std::size_t>(node)];
        node = x(row, nd.feature) < nd.threshold ? nd.left : nd.right;
      }
      f += tree[static_cast<std::size_t>(node)].value;
    }
    return f;
  }
};

struct SplitChoice {
  bool found = false;
  int feature = 0;
  int bin = 0;
  double gain = 0.0;
};

// Rows are kept in one shared index buffer; each node owns a contiguous span.
void grow_tree(const LearnerSpec& spec, const BinnedDesign& b, const std::vector<double>& g,
               const std::vector<double>& h, std::vector<int>& rows, std::vector<GbtNode>& tree,
               std::vector<double>& f_update) {
  struct Pending {
    int node;
    std::size_t begin, end;
    int depth;
    double gsum, hsum;
  };
  const std::size_t d = b.edges.size();
  double g0 = 0.0, h0 = 0.0;
  for (int r : rows) {
    g0 += g[static_cast<std::size_t>(r)];
    h0 += h[static_cast<std::size_t>(r)];
  }
  tree.clear();
  tree.push_back(GbtNode{});
  std::vector<Pending> stack{{0, 0, rows.size(), 0, g0, h0}};
  std::vector<double> hist_g, hist_h;
  std::vector<int> hist_c;
  while (!stack.empty()) {
    const Pending cur = stack.back();
    stack.pop_back();
    const std::size_t count = cur.end - cur.begin;
    SplitChoice best;
    if (cur.depth < spec.depth && count >= 2 * static_cast<std::size_t>(spec.min_leaf)) {
      const double parent_obj = cur.gsum * cur.gsum / (cur.hsum + kLeafRidge);
      for (std::size_t f = 0; f < d; ++f) {
        const auto& edges = b.edges[f];
        if (edges.empty()) continue;
        const auto& codes = b.codes[f];
        const std::size_t nbins = edges.size() + 1;
        hist_g.assign(nbins, 0.0);
        hist_h.assign(nbins, 0.0);
        hist_c.assign(nbins, 0);
        for (std::size_t i = cur.begin; i < cur.end; ++i) {
          const auto r = static_cast<std::size_t>(rows[i]);
          const std::uint16_t c = codes[r];
          hist_g[c] += g[r];
          hist_h[c] += h[r];
          ++hist_c[c];
        }
        double gl = 0.0, hl = 0.0;
        int cl = 0;
        for (std::size_t t = 0; t + 1 < nbins; ++t) {
          gl += hist_g[t];
          hl += hist_h[t];
          cl += hist_c[t];
          const int cr = static_cast<int>(count) - cl;
          if (cl < spec.min_leaf || cr < spec.min_leaf) continue;
          const double gr = cur.gsum - gl;
          const double hr = cur.hsum - hl;
          const double gain =
              gl * gl / (hl + kLeafRidge) + gr * gr / (hr + kLeafRidge) - parent_obj;
          if (gain > best.gain + 1e-12) {
            best.found = true;
            best.feature = static_cast<int>(f);
            best.bin = static_cast<int>(t);
            best.gain = gain;
          }
        }
      }
    }
    if (!best.found) {
      const double value = -spec.learning_rate * cur.gsum / (cur.hsum + kLeafRidge);
      tree[static_cast<std::size_t>(cur.node)].value = value;
      for (std::size_t i = cur.begin; i < cur.end; ++i) {
        f_update[static_cast<std::size_t>(rows[i])] += value;
      }
      continue;
    }
    const auto& codes = b.codes[static_cast<std::size_t>(best.feature)];
    const auto mid_it = std::stable_partition(
        rows.begin() + static_cast<std::ptrdiff_t>(cur.begin),
        rows.begin() + static_cast<std::ptrdiff_t>(cur.end),
        [&](int r) { return codes[static_cast<std::size_t>(r)] <= best.bin; });
    const auto mid = static_cast<std::size_t>(mid_it - rows.begin());
    double gleft = 0.0, hleft = 0.0;
    for (std::size_t i = cur.begin; i < mid; ++i) {
      gleft += g[static_cast<std::size_t>(rows[i])];
      hleft += h[static_cast<std::size_t>(rows[i])];
    }
    const int left_id = static_cast<int>(tree.size());
    const int right_id = left_id + 1;
    {
      auto& nd = tree[static_cast<std::size_t>(cur.node)];
      nd.feature = best.feature;
      nd.threshold =
          b.edges[static_cast<std::size_t>(best.feature)][static_cast<std::size_t>(best.bin)];
      nd.left = left_id;
      nd.right = right_id;
    }
    tree.push_back(GbtNode{});
    tree.push_back(GbtNode{});
    stack.push_back({right_id, mid, cur.end, cur.depth + 1, cur.gsum - gleft, cur.hsum - hleft});
    stack.push_back({left_id, cur.begin, mid, cur.depth + 1, gleft, hleft});
  }
}

GbtModel train_gbt(const LearnerSpec& spec, const BinnedDesign& b, const Eigen::VectorXd& y,
                   Link link) {
  if (spec.trees < 1) throw ValidationError("gbt: trees must be at least 1");
  if (spec.depth < 1) throw ValidationError("gbt: depth must be at least 1");
  if (spec.min_leaf < 1) throw ValidationError("gbt: min_leaf must be at least 1");
  GbtModel model;
  model.link = link;
  const double ymean = y.mean();
  model.base_score = link == Link::logit ? safe_logit(ymean) : ymean;
  const auto n = static_cast<std::size_t>(b.n);
  std::vector<double> f(n, model.base_score), g(n), h(n);
  std::vector<int> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  model.trees.reserve(static_cast<std::size_t>(spec.trees));
  for (int t = 0; t < spec.trees; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      if (link == Link::logit) {
        const double p = expit(f[i]);
        g[i] = p - y[static_cast<Eigen::Index>(i)];
        h[i] = std::max(p * (1.0 - p), 1e-12);
      } else {
        g[i] = f[i] - y[static_cast<Eigen::Index>(i)];
        h[i] = 1.0;
      }
    }
    model.trees.emplace_back();
    grow_tree(spec, b, g, h, rows, model.trees.back(), f);
  }
  return model;
}

class GbtRegressor final : public Regressor {
public:
  GbtRegressor(GbtModel model, int dim) : model_(std::move(model)), dim_(dim) {}
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const override {
    require_width(x, dim_);
    Eigen::VectorXd out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double f = model_.raw_score(x, i);
      out[i] = model_.link == Link::logit ? clip_prob(expit(f)) : f;
    }
    return out;
  }
  int feature_dim() const override { return dim_; }
  Link link() const override { return model_.link; }

private:
  GbtModel model_;
  int dim_;
};

// One-vs-rest probability stack on a shared binning, renormalized per row.
class OvrClassifier final : public Classifier {
public:
  OvrClassifier(std::vector<GbtModel> models, int dim) : models_(std::move(models)), dim_(dim) {}
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& x) const override {
    require_width(x, dim_);
    Eigen::MatrixXd p(x.rows(), static_cast<Eigen::Index>(models_.size()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double total = 0.0;
      for (std::size_t c = 0; c < models_.size(); ++c) {
        const double v = expit(models_[c].raw_score(x, i));
        p(i, static_cast<Eigen::Index>(c)) = v;
        total += v;
      }
      if (total <= 0.0) {
        p.row(i).setConstant(1.0 / static_cast<double>(models_.size()));
      } else {
        p.row(i) /= total;
      }
    }
    return p;
  }
  int feature_dim() const override { return dim_; }
  int n_classes() const override { return static_cast<int>(models_.size()); }

private:
  std::vector<GbtModel> models_;
  int dim_;
};

// ---------------------------------------------------------------------------
// softmax glm classifier. Every class carries its own coefficients; the ridge
// penalty on the slopes picks out one representative of the otherwise
// overparametrized family, and it does so symmetrically, so relabelling the
// classes permutes the fit instead of changing it.

class SoftmaxClassifier final : public Classifier {
public:
  SoftmaxClassifier(Eigen::MatrixXd beta, int n_classes)
      : beta_(std::move(beta)), m_(n_classes) {}

  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& x) const override {
    require_width(x, feature_dim());
    const Eigen::MatrixXd z = with_intercept(x);
    Eigen::MatrixXd p(x.rows(), m_);
    Eigen::VectorXd eta(m_);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (int c = 0; c < m_; ++c) eta[c] = z.row(i).dot(beta_.col(c));
      const double top = eta.maxCoeff();
      double total = 0.0;
      for (int c = 0; c < m_; ++c) {
        eta[c] = std::exp(eta[c] - top);
        total += eta[c];
      }
      p.row(i) = eta.transpose() / total;
    }
    return p;
  }
  int feature_dim() const override { return static_cast<int>(beta_.rows()) - 1; }
  int n_classes() const override { return m_; }

private:
  Eigen::MatrixXd beta_;  // (k+1) x m
  int m_;
};

double softmax_nll(const Eigen::MatrixXd& z, const std::vector<int>& labels,
                   const Eigen::MatrixXd& beta, double lambda) {
  double nll = 0.0;
  const int m = static_cast<int>(beta.cols());
  Eigen::VectorXd eta(m);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    for (int c = 0; c < m; ++c) eta[c] = z.row(i).dot(beta.col(c));
    const double top = eta.maxCoeff();
    double total = 0.0;
    for (int c = 0; c < m; ++c) total += std::exp(eta[c] - top);
    nll -= eta[labels[static_cast<std::size_t>(i)]] - top - std::log(total);
  }
  for (Eigen::Index j = 1; j < beta.rows(); ++j) nll += 0.5 * lambda * beta.row(j).squaredNorm();
  return nll;
}

ClassifierPtr fit_softmax(const Eigen::MatrixXd& x, const std::vector<int>& labels, int m,
                          double lambda, FitDiagnostics* diag) {
  const Eigen::MatrixXd z = with_intercept(x);
  const Eigen::Index d = z.cols();
  const int mm = m;
  Eigen::MatrixXd beta = Eigen::MatrixXd::Zero(d, mm);
  double nll = softmax_nll(z, labels, beta, lambda);
  bool fell_back = false;
  int iter = 0;
  Eigen::MatrixXd probs(z.rows(), m);
  for (; iter < 100; ++iter) {
    Eigen::VectorXd eta(m);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      for (int c = 0; c < mm; ++c) eta[c] = z.row(i).dot(beta.col(c));
      const double top = eta.maxCoeff();
      double total = 0.0;
      for (int c = 0; c < m; ++c) {
        eta[c] = std::exp(eta[c] - top);
        total += eta[c];
      }
      probs.row(i) = eta.transpose() / total;
    }
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(d * mm);
    for (int c = 0; c < mm; ++c) {
      Eigen::VectorXd resid(z.rows());
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        resid[i] = (labels[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0) - probs(i, c);
      }
      grad.segment(c * d, d) = z.transpose() * resid;
      for (Eigen::Index j = 1; j < d; ++j) grad[c * d + j] -= lambda * beta(j, c);
    }
    if (grad.lpNorm<Eigen::Infinity>() <= 1e-8) break;
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(d * mm, d * mm);
    for (int c = 0; c < mm; ++c) {
      for (int b = c; b < mm; ++b) {
        Eigen::VectorXd w(z.rows());
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
          w[i] = probs(i, c) * ((c == b ? 1.0 : 0.0) - probs(i, b));
        }
        Eigen::MatrixXd block = z.transpose() * w.asDiagonal() * z;
        hess.block(c * d, b * d, d, d) = block;
        if (b != c) hess.block(b * d, c * d, d, d) = block.transpose();
      }
    }
    for (int c = 0; c < mm; ++c) {
      for (Eigen::Index j = 0; j < d; ++j) {
        hess(c * d + j, c * d + j) += (j == 0 ? 0.0 : lambda) + 1e-10;
      }
    }
    Eigen::VectorXd step = hess.ldlt().solve(grad);
    if (!step.allFinite()) {
      fell_back = true;
      for (Eigen::Index j = 0; j < hess.rows(); ++j) hess(j, j) += 1e-6;
      step = hess.ldlt().solve(grad);
      if (!step.allFinite()) throw EstimationError("glm: softmax Newton step unsolvable");
    }
    double scale = 1.0;
    for (int half = 0; half < 40; ++half) {
      Eigen::MatrixXd cand = beta;
      for (int c = 0; c < mm; ++c) cand.col(c) += scale * step.segment(c * d, d);
      const double cnll = softmax_nll(z, labels, cand, lambda);
      if (cnll <= nll + 1e-12) {
        beta = std::move(cand);
        nll = cnll;
        break;
      }
      scale *= 0.5;
      if (half == 39) iter = 99;
    }
  }
  if (diag != nullptr) {
    diag->iterations = iter;
    if (fell_back) {
      diag->ridge_fallback = true;
      diag->warnings.push_back("glm: singular design, refit with ridge 1e-6");
    }
    if (iter >= 100) {
      diag->converged = false;
      diag->warnings.push_back("glm: softmax fit stopped before gradient tolerance");
    }
  }
  return std::make_shared<SoftmaxClassifier>(std::move(beta), m);
}

// ---------------------------------------------------------------------------
// stacking

class StackedRegressor final : public Regressor {
public:
  StackedRegressor(std::vector<RegressorPtr> members, std::vector<double> weights)
      : members_(std::move(members)), weights_(std::move(weights)) {}
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const override {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(x.rows());
    for (std::size_t j = 0; j < members_.size(); ++j) {
      out += weights_[j] * members_[j]->predict(x);
    }
    return out;
  }
  int feature_dim() const override { return members_.front()->feature_dim(); }
  Link link() const override { return members_.front()->link(); }

private:
  std::vector<RegressorPtr> members_;
  std::vector<double> weights_;
};

class StackedClassifier final : public Classifier {
public:
  StackedClassifier(std::vector<ClassifierPtr> members, std::vector<double> weights)
      : members_(std::move(members)), weights_(std::move(weights)) {}
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& x) const override {
    Eigen::MatrixXd out = weights_[0] * members_[0]->predict_proba(x);
    for (std::size_t j = 1; j < members_.size(); ++j) {
      out += weights_[j] * members_[j]->predict_proba(x);
    }
    return out;
  }
  int feature_dim() const override { return members_.front()->feature_dim(); }
  int n_classes() const override { return members_.front()->n_classes(); }

private:
  std::vector<ClassifierPtr> members_;
  std::vector<double> weights_;
};

// Fold labels for internal stacking CV; stratified when labels are provided so
// every training split sees every class that has at least `folds` rows.
std::vector<int> stacking_folds(Eigen::Index n, int folds, std::uint64_t seed,
                                const std::vector<int>* labels, int n_classes) {
  std::vector<int> fold(static_cast<std::size_t>(n), 0);
  const int z = std::max(2, std::min<int>(folds, static_cast<int>(n)));
  if (labels == nullptr) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, 0x53544b00u));
    rng.shuffle(idx);
    const int start = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(z)));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      fold[static_cast<std::size_t>(idx[i])] = static_cast<int>((start + i) % z);
    }
    return fold;
  }
  for (int c = 0; c < n_classes; ++c) {
    std::vector<int> idx;
    for (Eigen::Index i = 0; i < n; ++i) {
      if ((*labels)[static_cast<std::size_t>(i)] == c) idx.push_back(static_cast<int>(i));
    }
    if (idx.empty()) continue;
    Rng rng(derive_seed(seed, 0x53544b00u + 1 + static_cast<std::uint64_t>(c)));
    rng.shuffle(idx);
    const int start = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(z)));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      fold[static_cast<std::size_t>(idx[i])] = static_cast<int>((start + i) % z);
    }
  }
  return fold;
}

int fold_count(const std::vector<int>& fold) {
  int z = 0;
  for (int f : fold) z = std::max(z, f + 1);
  return z;
}

}  // namespace

std::string LearnerSpec::describe() const {
  switch (kind) {
    case LearnerKind::mean:
      return "mean";
    case LearnerKind::glm:
      return "glm";
    case LearnerKind::glm_ridge:
      return "glm_ridge(lambda=" + fmt_num(lambda) + ")";
    case LearnerKind::knn:
      return "knn(k=" + std::to_string(neighbors) + ")";
    case LearnerKind::gbt:
      return "gbt(trees=" + std::to_string(trees) + ",depth=" + std::to_string(depth) +
             ",lr=" + fmt_num(learning_rate) + ",min_leaf=" + std::to_string(min_leaf) +
             ",bins=" + std::to_string(max_bins) + ")";
  }
  return "unknown";
}

std::string EnsembleSpec::describe() const {
  if (members.size() == 1) return members.front().describe();
  std::string out = "stack[";
  for (std::size_t j = 0; j < members.size(); ++j) {
    if (j > 0) out += " + ";
    out += members[j].describe();
  }
  out += "]";
  return out;
}

RegressorPtr fit_regressor(const LearnerSpec& spec, const Eigen::MatrixXd& x,
                           const Eigen::VectorXd& y, Link link, FitDiagnostics* diag) {
  if (x.rows() != y.size()) throw ValidationError("learner: x and y row counts differ");
  if (x.rows() < 2) throw ValidationError("learner: need at least 2 training rows");
  if (link == Link::logit) {
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (!(y[i] >= 0.0 && y[i] <= 1.0)) {
        throw ValidationError("learner: logit link requires outcomes in [0, 1]");
      }
    }
  }
  switch (spec.kind) {
    case LearnerKind::mean: {
      double v = y.mean();
      if (link == Link::logit) v = clip_prob(v);
      return std::make_shared<MeanRegressor>(v, static_cast<int>(x.cols()), link);
    }
    case LearnerKind::glm:
      return link == Link::identity ? fit_ols(x, y, 0.0, diag) : fit_logit_glm(x, y, 0.0, diag);
    case LearnerKind::glm_ridge:
      if (spec.lambda < 0.0) throw ValidationError("glm_ridge: lambda must be nonnegative");
      return link == Link::identity ? fit_ols(x, y, spec.lambda, diag)
                                    : fit_logit_glm(x, y, spec.lambda, diag);
    case LearnerKind::knn:
      return std::make_shared<KnnRegressor>(x, y, capped_neighbors(spec, x.rows(), diag), link);
    case LearnerKind::gbt: {
      if (!(spec.learning_rate > 0.0 && spec.learning_rate <= 1.0)) {
        throw ValidationError("gbt: learning_rate must be in (0, 1]");
      }
      const BinnedDesign b = bin_design(x, spec.max_bins);
      return std::make_shared<GbtRegressor>(train_gbt(spec, b, y, link),
                                            static_cast<int>(x.cols()));
    }
  }
  throw ValidationError("learner: unknown kind");
}

ClassifierPtr fit_classifier(const LearnerSpec& spec, const Eigen::MatrixXd& x,
                             const std::vector<int>& labels, int n_classes,
                             FitDiagnostics* diag) {
  if (x.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw ValidationError("classifier: x and label counts differ");
  }
  if (x.rows() < 2) throw ValidationError("classifier: need at least 2 training rows");
  if (n_classes < 2) throw ValidationError("classifier: need at least 2 classes");
  std::vector<int> seen(static_cast<std::size_t>(n_classes), 0);
  for (int l : labels) {
    if (l < 0 || l >= n_classes) throw ValidationError("classifier: label out of range");
    ++seen[static_cast<std::size_t>(l)];
  }
  for (int c = 0; c < n_classes; ++c) {
    if (seen[static_cast<std::size_t>(c)] == 0) {
      throw EstimationError("classifier: class " + std::to_string(c) +
                            " absent from training data");
    }
  }
  switch (spec.kind) {
    case LearnerKind::mean: {
      Eigen::VectorXd p = Eigen::VectorXd::Zero(n_classes);
      for (int l : labels) p[l] += 1.0 / static_cast<double>(labels.size());
      return std::make_shared<ConstantClassifier>(std::move(p), static_cast<int>(x.cols()));
    }
    case LearnerKind::glm:
      return fit_softmax(x, labels, n_classes, 0.0, diag);
    case LearnerKind::glm_ridge:
      if (spec.lambda < 0.0) throw ValidationError("glm_ridge: lambda must be nonnegative");
      return fit_softmax(x, labels, n_classes, spec.lambda, diag);
    case LearnerKind::knn:
      return std::make_shared<KnnClassifier>(x, labels, n_classes,
                                             capped_neighbors(spec, x.rows(), diag));
    case LearnerKind::gbt: {
      if (!(spec.learning_rate > 0.0 && spec.learning_rate <= 1.0)) {
        throw ValidationError("gbt: learning_rate must be in (0, 1]");
      }
      const BinnedDesign b = bin_design(x, spec.max_bins);
      std::vector<GbtModel> models;
      models.reserve(static_cast<std::size_t>(n_classes));
      Eigen::VectorXd target(x.rows());
      for (int c = 0; c < n_classes; ++c) {
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          target[i] = labels[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0;
        }
        models.push_back(train_gbt(spec, b, target, Link::logit));
      }
      return std::make_shared<OvrClassifier>(std::move(models), static_cast<int>(x.cols()));
    }
  }
  throw ValidationError("classifier: unknown kind");
}

std::vector<double> simplex_weights(
    int n_members,
    const std::function<double(const std::vector<double>&, std::vector<double>&)>& loss_and_grad,
    double tol, int max_iter) {
  if (n_members < 1) throw ValidationError("stack: no members to weight");
  std::vector<double> w(static_cast<std::size_t>(n_members), 1.0 / n_members);
  if (n_members == 1) return w;
  std::vector<double> grad(w.size(), 0.0), cand(w.size()), cand_grad(w.size());
  double loss = loss_and_grad(w, grad);
  double eta = 1.0;
  for (int it = 0; it < max_iter; ++it) {
    const double gmin = *std::min_element(grad.begin(), grad.end());
    double total = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      cand[j] = w[j] * std::exp(-eta * (grad[j] - gmin));
      total += cand[j];
    }
    for (double& v : cand) v /= total;
    const double cand_loss = loss_and_grad(cand, cand_grad);
    if (cand_loss <= loss + 1e-15) {
      double delta = 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) delta = std::max(delta, std::abs(cand[j] - w[j]));
      w = cand;
      grad = cand_grad;
      loss = cand_loss;
      eta = std::min(eta * 1.2, 1e6);
      if (delta <= tol) break;
    } else {
      eta *= 0.5;
      if (eta < 1e-14) break;
    }
  }
  return w;
}

namespace {

template <typename FitFn>
std::vector<std::size_t> surviving_members(const EnsembleSpec& ens, const FitFn& try_fit,
                                           StackDiagnostics* diag) {
  std::vector<std::size_t> alive;
  for (std::size_t j = 0; j < ens.members.size(); ++j) {
    try {
      try_fit(j);
      alive.push_back(j);
    } catch (const std::exception& e) {
      if (diag != nullptr) {
        diag->dropped_members.push_back(ens.members[j].describe());
        diag->warnings.push_back("stack: dropped member " + ens.members[j].describe() + ": " +
                                 e.what());
      }
    }
  }
  if (alive.empty()) throw EstimationError("stack: every ensemble member failed to fit");
  return alive;
}

void record_stack(StackDiagnostics* diag, const EnsembleSpec& ens,
                  const std::vector<std::size_t>& alive, const std::vector<double>& weights) {
  if (diag == nullptr) return;
  diag->weights = weights;
  diag->member_names.clear();
  for (std::size_t j : alive) diag->member_names.push_back(ens.members[j].describe());
}

StackLoss resolve_loss(StackLoss requested, Link link) {
  if (requested != StackLoss::auto_link) return requested;
  return link == Link::identity ? StackLoss::squared : StackLoss::log;
}

}  // namespace

RegressorPtr fit_stacked_regressor(const EnsembleSpec& ens, const Eigen::MatrixXd& x,
                                   const Eigen::VectorXd& y, Link link, std::uint64_t seed,
                                   StackDiagnostics* diag) {
  if (ens.members.empty()) throw ValidationError("stack: ensemble has no members");
  if (ens.stacking_folds < 2) throw ValidationError("stack: stacking_folds must be at least 2");
  if (x.rows() != y.size()) throw ValidationError("stack: x and y row counts differ");
  if (ens.members.size() == 1) {
    RegressorPtr fitted = fit_regressor(ens.members.front(), x, y, link);
    record_stack(diag, ens, {0}, {1.0});
    return fitted;
  }
  if (x.rows() < 2) throw ValidationError("stack: need at least 2 rows for cross-validation");
  const StackLoss loss_kind = resolve_loss(ens.weight_loss, link);

  const std::vector<int> fold = stacking_folds(x.rows(), ens.stacking_folds, seed, nullptr, 0);
  const int z = fold_count(fold);
  const auto n = static_cast<std::size_t>(x.rows());

  // cross-validated predictions, one column per member that fits cleanly
  std::vector<std::vector<double>> cv_pred;
  std::vector<std::size_t> alive = surviving_members(
      ens,
      [&](std::size_t j) {
        std::vector<double> pred(n, 0.0);
        for (int f = 0; f < z; ++f) {
          std::vector<int> tr, va;
          for (std::size_t i = 0; i < n; ++i) (fold[i] == f ? va : tr).push_back(static_cast<int>(i));
          if (tr.empty() || va.empty()) continue;
          Eigen::MatrixXd xt(static_cast<Eigen::Index>(tr.size()), x.cols());
          Eigen::VectorXd yt(static_cast<Eigen::Index>(tr.size()));
          for (std::size_t i = 0; i < tr.size(); ++i) {
            xt.row(static_cast<Eigen::Index>(i)) = x.row(tr[i]);
            yt[static_cast<Eigen::Index>(i)] = y[tr[i]];
          }
          Eigen::MatrixXd xv(static_cast<Eigen::Index>(va.size()), x.cols());
          for (std::size_t i = 0; i < va.size(); ++i) {
            xv.row(static_cast<Eigen::Index>(i)) = x.row(va[i]);
          }
          const Eigen::VectorXd pv = fit_regressor(ens.members[j], xt, yt, link)->predict(xv);
          for (std::size_t i = 0; i < va.size(); ++i) {
            pred[static_cast<std::size_t>(va[i])] = pv[static_cast<Eigen::Index>(i)];
          }
        }
        cv_pred.push_back(std::move(pred));
      },
      diag);

  const auto loss_and_grad = [&](const std::vector<double>& w, std::vector<double>& grad) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double p = 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) p += w[j] * cv_pred[j][i];
      const double yi = y[static_cast<Eigen::Index>(i)];
      if (loss_kind == StackLoss::squared) {
        const double r = p - yi;
        loss += r * r;
        for (std::size_t j = 0; j < w.size(); ++j) grad[j] += 2.0 * r * cv_pred[j][i];
      } else {
        const double pc = clip_prob(p);
        loss -= yi * std::log(pc) + (1.0 - yi) * std::log(1.0 - pc);
        const double dldp = (pc - yi) / (pc * (1.0 - pc));
        for (std::size_t j = 0; j < w.size(); ++j) grad[j] += dldp * cv_pred[j][i];
      }
    }
    const double inv = 1.0 / static_cast<double>(n);
    loss *= inv;
    for (double& gj : grad) gj *= inv;
    return loss;
  };
  const std::vector<double> weights = simplex_weights(static_cast<int>(alive.size()), loss_and_grad);
  record_stack(diag, ens, alive, weights);

  std::vector<RegressorPtr> members;
  members.reserve(alive.size());
  for (std::size_t j : alive) members.push_back(fit_regressor(ens.members[j], x, y, link));
  return std::make_shared<StackedRegressor>(std::move(members), weights);
}

ClassifierPtr fit_stacked_classifier(const EnsembleSpec& ens, const Eigen::MatrixXd& x,
                                     const std::vector<int>& labels, int n_classes,
                                     std::uint64_t seed, StackDiagnostics* diag) {
  if (ens.members.empty()) throw ValidationError("stack: ensemble has no members");
  if (ens.stacking_folds < 2) throw ValidationError("stack: stacking_folds must be at least 2");
  if (x.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw ValidationError("stack: x and label counts differ");
  }
  if (ens.members.size() == 1) {
    ClassifierPtr fitted = fit_classifier(ens.members.front(), x, labels, n_classes);
    record_stack(diag, ens, {0}, {1.0});
    return fitted;
  }
  if (x.rows() < 2) throw ValidationError("stack: need at least 2 rows for cross-validation");
  const StackLoss loss_kind = resolve_loss(ens.weight_loss, Link::logit);

  const std::vector<int> fold =
      stacking_folds(x.rows(), ens.stacking_folds, seed, &labels, n_classes);
  const int z = fold_count(fold);
  const auto n = static_cast<std::size_t>(x.rows());

  std::vector<Eigen::MatrixXd> cv_prob;
  std::vector<std::size_t> alive = surviving_members(
      ens,
      [&](std::size_t j) {
        Eigen::MatrixXd pred =
            Eigen::MatrixXd::Constant(x.rows(), n_classes, 1.0 / n_classes);
        for (int f = 0; f < z; ++f) {
          std::vector<int> tr, va;
          for (std::size_t i = 0; i < n; ++i) (fold[i] == f ? va : tr).push_back(static_cast<int>(i));
          if (tr.empty() || va.empty()) continue;
          Eigen::MatrixXd xt(static_cast<Eigen::Index>(tr.size()), x.cols());
          std::vector<int> lt(tr.size());
          for (std::size_t i = 0; i < tr.size(); ++i) {
            xt.row(static_cast<Eigen::Index>(i)) = x.row(tr[i]);
            lt[i] = labels[static_cast<std::size_t>(tr[i])];
          }
          Eigen::MatrixXd xv(static_cast<Eigen::Index>(va.size()), x.cols());
          for (std::size_t i = 0; i < va.size(); ++i) {
            xv.row(static_cast<Eigen::Index>(i)) = x.row(va[i]);
          }
          const Eigen::MatrixXd pv =
              fit_classifier(ens.members[j], xt, lt, n_classes)->predict_proba(xv);
          for (std::size_t i = 0; i < va.size(); ++i) {
            pred.row(va[i]) = pv.row(static_cast<Eigen::Index>(i));
          }
        }
        cv_prob.push_back(std::move(pred));
      },
      diag);

  const auto loss_and_grad = [&](const std::vector<double>& w, std::vector<double>& grad) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      const int yi = labels[i];
      if (loss_kind == StackLoss::log) {
        double p = 0.0;
        for (std::size_t j = 0; j < w.size(); ++j) p += w[j] * cv_prob[j](row, yi);
        p = std::max(p, kProbClip);
        loss -= std::log(p);
        for (std::size_t j = 0; j < w.size(); ++j) grad[j] -= cv_prob[j](row, yi) / p;
      } else {
        // Brier score over all classes
        for (int c = 0; c < n_classes; ++c) {
          double p = 0.0;
          for (std::size_t j = 0; j < w.size(); ++j) p += w[j] * cv_prob[j](row, c);
          const double r = p - (c == yi ? 1.0 : 0.0);
          loss += r * r;
          for (std::size_t j = 0; j < w.size(); ++j) grad[j] += 2.0 * r * cv_prob[j](row, c);
        }
      }
    }
    const double inv = 1.0 / static_cast<double>(n);
    loss *= inv;
    for (double& gj : grad) gj *= inv;
    return loss;
  };
  const std::vector<double> weights = simplex_weights(static_cast<int>(alive.size()), loss_and_grad);
  record_stack(diag, ens, alive, weights);

  std::vector<ClassifierPtr> members;
  members.reserve(alive.size());
  for (std::size_t j : alive) members.push_back(fit_classifier(ens.members[j], x, labels, n_classes));
  return std::make_shared<StackedClassifier>(std::move(members), weights);
}

}  // namespace targprof
