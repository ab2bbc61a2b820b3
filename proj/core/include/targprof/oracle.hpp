#pragma once

#include <cstdint>
#include <vector>

#include "targprof/rng.hpp"

namespace targprof {

// A fully enumerated law over (W, A, Y) with finite covariate support and a
// binary outcome. Everything downstream of it is computed in closed form, so
// it serves as the exact reference the estimation pipeline is tested against.
struct DiscreteLaw {
  std::vector<double> w_values;  // distinct covariate values, size n_w
  int m = 0;                     // number of providers
  std::vector<double> prob;      // mass at (w, a, y), size n_w * m * 2

  int n_w() const { return static_cast<int>(w_values.size()); }
  int atoms() const { return n_w() * m * 2; }
  int index(int w, int a, int y) const { return (w * m + a) * 2 + y; }
  double p(int w, int a, int y) const { return prob[index(w, a, y)]; }
  double& p(int w, int a, int y) { return prob[index(w, a, y)]; }

  void validate() const;  // masses nonnegative, sum to one
};

// Conditional and marginal tables derived from a law.
struct LawTables {
  std::vector<double> p_w;       // P(W = w)
  std::vector<double> p_wa;      // P(W = w, A = a), indexed w * m + a
  std::vector<double> p_a;       // P(A = a)
  std::vector<double> pi;        // P(A = a | W = w), indexed w * m + a
  std::vector<double> mu_bar;    // E[Y | A = a, W = w], indexed w * m + a
  std::vector<double> mu_tilde;  // E[Y | W = w]
  std::vector<double> mu_dot;    // E[Y | A = a]
};

LawTables law_tables(const DiscreteLaw& law);

// Exact parameter values per provider. `phi_defined[a]` is false when some
// covariate stratum gives the provider zero conditional assignment mass, in
// which case the direct parameter does not exist for it.
struct ExactParameters {
  std::vector<double> phi, psi1, psi2, er, smr;
  std::vector<bool> phi_defined;
};

ExactParameters exact_parameters(const DiscreteLaw& law);

// Influence-function values for every atom and every provider, evaluated at
// the law itself. Index layout: value(param)[a * atoms + o].
struct ExactEifs {
  int m = 0;
  int atoms = 0;
  std::vector<double> d_phi, d_psi1, d_psi2, d_er, d_smr;

  double at(const std::vector<double>& v, int a, int o) const { return v[a * atoms + o]; }
};

ExactEifs exact_eifs(const DiscreteLaw& law);

// Second-order expansion check between two laws on a common support: for each
// parameter, residual = psi(P) - psi(P0) + E_P0[D(P)] - R(P, P0) with the
// exact algebraic remainder. Residuals are zero up to float rounding.
struct VonMisesReport {
  // per provider
  std::vector<double> residual_phi, residual_psi1, residual_psi2;
  std::vector<double> remainder_phi, remainder_psi1, remainder_psi2;
  double max_abs_residual = 0.0;
};

VonMisesReport von_mises_check(const DiscreteLaw& p, const DiscreteLaw& p0);

// Signed perturbation on a law's support with total mass zero, scaled so that
// p +- h * delta stays a valid law for |h| <= h_max.
struct Direction {
  std::vector<double> delta;
  double h_max = 0.0;
};

// Finite-difference check that d/dh psi(P0 + h * delta) at h = 0 equals the
// inner product of the influence function with the direction. Central
// differences on the step grid {1e-3, 1e-4, 1e-5} with Richardson
// extrapolation of the two largest steps.
struct DerivativeReport {
  // per provider, for each of phi, psi1, psi2, er, smr
  std::vector<double> predicted_phi, fd_phi;
  std::vector<double> predicted_psi1, fd_psi1;
  std::vector<double> predicted_psi2, fd_psi2;
  std::vector<double> predicted_er, fd_er;
  std::vector<double> predicted_smr, fd_smr;
  double max_rel_error = 0.0;  // |fd - predicted| / max(1, |predicted|)
};

DerivativeReport pathwise_derivative_check(const DiscreteLaw& p0, const Direction& dir);

// Flat random law with all atom masses floored at `mass_floor` so every
// conditional is well defined.
DiscreteLaw random_law(Rng& rng, int n_w, int m, double mass_floor = 1e-3);

Direction random_direction(Rng& rng, const DiscreteLaw& law);

// Exact variances of the direct and indirect influence functions, used by the
// precision-comparison probe.
struct EifVariances {
  std::vector<double> var_phi;   // Var[D_phi] per provider
  std::vector<double> var_psi2;  // Var[D_psi2] per provider
};

EifVariances eif_variances(const DiscreteLaw& law);

}  // namespace targprof
