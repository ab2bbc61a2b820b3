#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace targprof {

enum class LearnerKind { mean, glm, glm_ridge, knn, gbt };

enum class Link { identity, logit };

// Hyperparameters for one base learner. Unused fields are ignored by kinds
// that do not need them.
struct LearnerSpec {
  LearnerKind kind = LearnerKind::glm;
  double lambda = 1e-3;       // glm_ridge penalty (never on the intercept)
  int neighbors = 5;          // knn
  int trees = 100;            // gbt
  int depth = 2;              // gbt
  double learning_rate = 0.1; // gbt
  int min_leaf = 10;          // gbt
  int max_bins = 1024;        // gbt histogram resolution
  std::uint64_t seed = 1;     // reserved for stochastic variants; all current fits are deterministic

  std::string describe() const;
};

struct FitDiagnostics {
  bool ridge_fallback = false;  // glm design was singular, refit with lambda = 1e-6
  bool converged = true;
  int iterations = 0;
  std::vector<std::string> warnings;
};

class Regressor {
public:
  virtual ~Regressor() = default;
  // one prediction per row; logit-link fits return values in (0, 1)
  virtual Eigen::VectorXd predict(const Eigen::MatrixXd& x) const = 0;
  virtual int feature_dim() const = 0;
  virtual Link link() const = 0;
};

class Classifier {
public:
  virtual ~Classifier() = default;
  // n x m matrix of class probabilities, each row sums to one
  virtual Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& x) const = 0;
  virtual int feature_dim() const = 0;
  virtual int n_classes() const = 0;
};

using RegressorPtr = std::shared_ptr<const Regressor>;
using ClassifierPtr = std::shared_ptr<const Classifier>;

RegressorPtr fit_regressor(const LearnerSpec& spec, const Eigen::MatrixXd& x,
                           const Eigen::VectorXd& y, Link link, FitDiagnostics* diag = nullptr);

ClassifierPtr fit_classifier(const LearnerSpec& spec, const Eigen::MatrixXd& x,
                             const std::vector<int>& labels, int n_classes,
                             FitDiagnostics* diag = nullptr);

// Convex model stack. Weights minimize the cross-validated loss over the
// probability simplex, solved with exponentiated-gradient descent to
// tolerance 1e-8. A single member skips the cross-validation entirely and
// gets weight one. auto_link resolves to squared error for identity links,
// log loss for logit links and classifiers (Brier score when squared is
// forced on a classifier).
enum class StackLoss { auto_link, squared, log };

struct EnsembleSpec {
  std::vector<LearnerSpec> members;
  int stacking_folds = 5;
  StackLoss weight_loss = StackLoss::auto_link;

  std::string describe() const;
};

struct StackDiagnostics {
  std::vector<double> weights;              // aligned with surviving members
  std::vector<std::string> member_names;    // surviving members
  std::vector<std::string> dropped_members; // members whose fits threw
  std::vector<std::string> warnings;
};

RegressorPtr fit_stacked_regressor(const EnsembleSpec& ens, const Eigen::MatrixXd& x,
                                   const Eigen::VectorXd& y, Link link, std::uint64_t seed,
                                   StackDiagnostics* diag = nullptr);

ClassifierPtr fit_stacked_classifier(const EnsembleSpec& ens, const Eigen::MatrixXd& x,
                                     const std::vector<int>& labels, int n_classes,
                                     std::uint64_t seed, StackDiagnostics* diag = nullptr);

// Exponentiated-gradient solve for convex stacking weights, exposed for
// tests. `loss_grad` fills the gradient of the average loss at `w` and
// returns the loss value.
std::vector<double> simplex_weights(
    int n_members,
    const std::function<double(const std::vector<double>&, std::vector<double>&)>& loss_and_grad,
    double tol = 1e-8, int max_iter = 20000);

}  // namespace targprof
