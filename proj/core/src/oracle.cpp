#include "targprof/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "targprof/errors.hpp"

namespace targprof {

void DiscreteLaw::validate() const {
  if (m < 2) throw ValidationError("discrete law needs at least two providers");
  if (w_values.empty()) throw ValidationError("discrete law needs covariate support");
  if (static_cast<int>(prob.size()) != atoms())
    throw ValidationError("discrete law probability vector has the wrong length");
  double total = 0.0;
  for (double v : prob) {
    if (v < 0.0) throw ValidationError("discrete law has a negative mass");
    total += v;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw ValidationError("discrete law masses do not sum to one");
}

LawTables law_tables(const DiscreteLaw& law) {
  const int nw = law.n_w();
  const int m = law.m;
  LawTables t;
  t.p_w.assign(nw, 0.0);
  t.p_wa.assign(nw * m, 0.0);
  t.p_a.assign(m, 0.0);
  t.pi.assign(nw * m, 0.0);
  t.mu_bar.assign(nw * m, 0.0);
  t.mu_tilde.assign(nw, 0.0);
  t.mu_dot.assign(m, 0.0);

  std::vector<double> y_wa(nw * m, 0.0);  // P(W = w, A = a, Y = 1)
  for (int w = 0; w < nw; ++w) {
    for (int a = 0; a < m; ++a) {
      const double p0 = law.p(w, a, 0);
      const double p1 = law.p(w, a, 1);
      t.p_wa[w * m + a] = p0 + p1;
      y_wa[w * m + a] = p1;
      t.p_w[w] += p0 + p1;
      t.p_a[a] += p0 + p1;
    }
  }
  std::vector<double> y_a(m, 0.0);
  for (int w = 0; w < nw; ++w) {
    double y_w = 0.0;
    for (int a = 0; a < m; ++a) {
      const double pwa = t.p_wa[w * m + a];
      t.pi[w * m + a] = t.p_w[w] > 0.0 ? pwa / t.p_w[w] : 0.0;
      t.mu_bar[w * m + a] = pwa > 0.0 ? y_wa[w * m + a] / pwa : 0.0;
      y_w += y_wa[w * m + a];
      y_a[a] += y_wa[w * m + a];
    }
    t.mu_tilde[w] = t.p_w[w] > 0.0 ? y_w / t.p_w[w] : 0.0;
  }
  for (int a = 0; a < m; ++a) t.mu_dot[a] = t.p_a[a] > 0.0 ? y_a[a] / t.p_a[a] : 0.0;
  return t;
}

ExactParameters exact_parameters(const DiscreteLaw& law) {
  law.validate();
  const auto t = law_tables(law);
  const int nw = law.n_w();
  const int m = law.m;

  ExactParameters out;
  out.phi.assign(m, std::numeric_limits<double>::quiet_NaN());
  out.psi1.assign(m, 0.0);
  out.psi2.assign(m, 0.0);
  out.er.assign(m, 0.0);
  out.smr.assign(m, 0.0);
  out.phi_defined.assign(m, true);

  for (int a = 0; a < m; ++a) {
    if (t.p_a[a] <= 0.0) throw ValidationError("discrete law gives a provider zero mass");

    bool defined = true;
    double phi = 0.0;
    double psi2_num = 0.0;
    for (int w = 0; w < nw; ++w) {
      if (t.p_wa[w * m + a] <= 0.0) defined = false;
      phi += t.p_w[w] * t.mu_bar[w * m + a];
      psi2_num += t.p_wa[w * m + a] * t.mu_tilde[w];
    }
    out.phi_defined[a] = defined;
    if (defined) out.phi[a] = phi;
    out.psi1[a] = t.mu_dot[a];
    out.psi2[a] = psi2_num / t.p_a[a];
    out.er[a] = out.psi1[a] - out.psi2[a];
    out.smr[a] = out.psi2[a] > 0.0 ? out.psi1[a] / out.psi2[a]
                                   : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

ExactEifs exact_eifs(const DiscreteLaw& law) {
  const auto t = law_tables(law);
  const auto par = exact_parameters(law);
  const int nw = law.n_w();
  const int m = law.m;

  ExactEifs e;
  e.m = m;
  e.atoms = law.atoms();
  const int sz = m * e.atoms;
  e.d_phi.assign(sz, 0.0);
  e.d_psi1.assign(sz, 0.0);
  e.d_psi2.assign(sz, 0.0);
  e.d_er.assign(sz, 0.0);
  e.d_smr.assign(sz, 0.0);

  for (int t_a = 0; t_a < m; ++t_a) {  // target provider
    const double pa = t.p_a[t_a];
    const double psi1 = par.psi1[t_a];
    const double psi2 = par.psi2[t_a];
    for (int w = 0; w < nw; ++w) {
      const double pi = t.pi[w * m + t_a];
      const double mb = t.mu_bar[w * m + t_a];
      const double mt = t.mu_tilde[w];
      for (int a = 0; a < m; ++a) {
        for (int y = 0; y <= 1; ++y) {
          const int o = law.index(w, a, y);
          const double ind = a == t_a ? 1.0 : 0.0;
          const double yy = static_cast<double>(y);

          double d_phi = std::numeric_limits<double>::quiet_NaN();
          if (par.phi_defined[t_a])
            d_phi = ind / pi * (yy - mb) + mb - par.phi[t_a];
          const double d1 = ind / pa * (yy - psi1);
          const double d2 = (pi * (yy - mt) + ind * (mt - psi2)) / pa;

          e.d_phi[t_a * e.atoms + o] = d_phi;
          e.d_psi1[t_a * e.atoms + o] = d1;
          e.d_psi2[t_a * e.atoms + o] = d2;
          e.d_er[t_a * e.atoms + o] = d1 - d2;
          e.d_smr[t_a * e.atoms + o] =
              psi2 > 0.0 ? d1 / psi2 - psi1 / (psi2 * psi2) * d2
                         : std::numeric_limits<double>::quiet_NaN();
        }
      }
    }
  }
  return e;
}

namespace {

void require_common_support(const DiscreteLaw& p, const DiscreteLaw& p0) {
  if (p.m != p0.m || p.n_w() != p0.n_w() || p.w_values != p0.w_values)
    throw ValidationError("von Mises check requires laws on a common support");
  for (int i = 0; i < p.atoms(); ++i) {
    if (p.prob[i] <= 0.0 || p0.prob[i] <= 0.0)
      throw ValidationError("von Mises check requires strictly positive masses on the support");
  }
}

}  // namespace

VonMisesReport von_mises_check(const DiscreteLaw& p, const DiscreteLaw& p0) {
  p.validate();
  p0.validate();
  require_common_support(p, p0);

  const auto tp = law_tables(p);
  const auto t0 = law_tables(p0);
  const auto par_p = exact_parameters(p);
  const auto par_0 = exact_parameters(p0);
  const auto eif_p = exact_eifs(p);

  const int nw = p.n_w();
  const int m = p.m;

  VonMisesReport rep;
  rep.residual_phi.assign(m, 0.0);
  rep.residual_psi1.assign(m, 0.0);
  rep.residual_psi2.assign(m, 0.0);
  rep.remainder_phi.assign(m, 0.0);
  rep.remainder_psi1.assign(m, 0.0);
  rep.remainder_psi2.assign(m, 0.0);

  for (int a = 0; a < m; ++a) {
    // E_{P0}[D(P)] by exact summation over the support
    double mean_d_phi = 0.0, mean_d1 = 0.0, mean_d2 = 0.0;
    for (int o = 0; o < p.atoms(); ++o) {
      const double w0 = p0.prob[o];
      mean_d_phi += w0 * eif_p.at(eif_p.d_phi, a, o);
      mean_d1 += w0 * eif_p.at(eif_p.d_psi1, a, o);
      mean_d2 += w0 * eif_p.at(eif_p.d_psi2, a, o);
    }

    // Direct parameter: R_phi = E_P0[ (pi0 - piP)/piP * (mubar0 - mubarP) ],
    // the product of the propensity and outcome-model errors weighted by the
    // inverse modeled propensity.
    double r_phi = 0.0;
    for (int w = 0; w < nw; ++w) {
      const double pi_p = tp.pi[w * m + a];
      const double pi_0 = t0.pi[w * m + a];
      const double mb_p = tp.mu_bar[w * m + a];
      const double mb_0 = t0.mu_bar[w * m + a];
      r_phi += t0.p_w[w] * ((pi_0 - pi_p) / pi_p) * (mb_0 - mb_p);
    }
    rep.remainder_phi[a] = r_phi;
    rep.residual_phi[a] = par_p.phi[a] - par_0.phi[a] + mean_d_phi - r_phi;

    // Provider-mean parameter: R_1 = (pa0/paP - 1) * (mudot0 - mudotP).
    const double ratio = t0.p_a[a] / tp.p_a[a];
    const double r1 = (ratio - 1.0) * (t0.mu_dot[a] - tp.mu_dot[a]);
    rep.remainder_psi1[a] = r1;
    rep.residual_psi1[a] = par_p.psi1[a] - par_0.psi1[a] + mean_d1 - r1;

    // Expected-by-case-mix parameter: the leading cross term
    //   (1/paP) E_P0[(piP - pi0)(mutilde0 - mutildeP)]
    // plus the marginal-share mismatch term
    //   (1 - pa0/paP)(psi2(P) - psi2(P0)),
    // which the centering component of the influence function leaves behind
    // whenever P and P0 disagree on P(A = a). Both factors are differences of
    // the two laws, so the remainder stays second order.
    double r2 = 0.0;
    for (int w = 0; w < nw; ++w) {
      const double pi_p = tp.pi[w * m + a];
      const double pi_0 = t0.pi[w * m + a];
      r2 += t0.p_w[w] * (pi_p - pi_0) * (t0.mu_tilde[w] - tp.mu_tilde[w]);
    }
    r2 /= tp.p_a[a];
    r2 += (1.0 - ratio) * (par_p.psi2[a] - par_0.psi2[a]);
    rep.remainder_psi2[a] = r2;
    rep.residual_psi2[a] = par_p.psi2[a] - par_0.psi2[a] + mean_d2 - r2;

    rep.max_abs_residual = std::max({rep.max_abs_residual, std::fabs(rep.residual_phi[a]),
                                     std::fabs(rep.residual_psi1[a]),
                                     std::fabs(rep.residual_psi2[a])});
  }
  return rep;
}

namespace {

DiscreteLaw perturb(const DiscreteLaw& p0, const Direction& dir, double h) {
  DiscreteLaw p = p0;
  for (int i = 0; i < p.atoms(); ++i) p.prob[i] += h * dir.delta[i];
  return p;
}

// central difference with Richardson extrapolation over steps h and h/10
double extrapolated_slope(const std::vector<double>& at_plus, const std::vector<double>& at_minus,
                          const std::vector<double>& steps, int idx_large, int idx_small) {
  const double h1 = steps[idx_large];
  const double h2 = steps[idx_small];
  const double d1 = (at_plus[idx_large] - at_minus[idx_large]) / (2.0 * h1);
  const double d2 = (at_plus[idx_small] - at_minus[idx_small]) / (2.0 * h2);
  const double r = (h1 / h2) * (h1 / h2);
  return (r * d2 - d1) / (r - 1.0);
}

}  // namespace

DerivativeReport pathwise_derivative_check(const DiscreteLaw& p0, const Direction& dir) {
  p0.validate();
  if (static_cast<int>(dir.delta.size()) != p0.atoms())
    throw ValidationError("direction length does not match the law support");
  double total = 0.0;
  for (double d : dir.delta) total += d;
  if (std::fabs(total) > 1e-12) throw ValidationError("direction must have zero total mass");

  const std::vector<double> steps = {1e-3, 1e-4, 1e-5};
  for (double h : steps) {
    if (h > dir.h_max + 1e-15)
      throw ValidationError("direction scale does not allow the finite-difference step grid");
  }

  const int m = p0.m;
  const auto eifs = exact_eifs(p0);

  DerivativeReport rep;
  auto resize_all = [&](std::vector<double>& v) { v.assign(m, 0.0); };
  resize_all(rep.predicted_phi);
  resize_all(rep.fd_phi);
  resize_all(rep.predicted_psi1);
  resize_all(rep.fd_psi1);
  resize_all(rep.predicted_psi2);
  resize_all(rep.fd_psi2);
  resize_all(rep.predicted_er);
  resize_all(rep.fd_er);
  resize_all(rep.predicted_smr);
  resize_all(rep.fd_smr);

  // parameter values along the path, one entry per step
  std::vector<ExactParameters> plus, minus;
  for (double h : steps) {
    plus.push_back(exact_parameters(perturb(p0, dir, h)));
    minus.push_back(exact_parameters(perturb(p0, dir, -h)));
  }

  for (int a = 0; a < m; ++a) {
    double pr_phi = 0.0, pr_1 = 0.0, pr_2 = 0.0, pr_er = 0.0, pr_smr = 0.0;
    for (int o = 0; o < p0.atoms(); ++o) {
      const double d = dir.delta[o];
      pr_phi += d * eifs.at(eifs.d_phi, a, o);
      pr_1 += d * eifs.at(eifs.d_psi1, a, o);
      pr_2 += d * eifs.at(eifs.d_psi2, a, o);
      pr_er += d * eifs.at(eifs.d_er, a, o);
      pr_smr += d * eifs.at(eifs.d_smr, a, o);
    }
    rep.predicted_phi[a] = pr_phi;
    rep.predicted_psi1[a] = pr_1;
    rep.predicted_psi2[a] = pr_2;
    rep.predicted_er[a] = pr_er;
    rep.predicted_smr[a] = pr_smr;

    auto collect = [&](auto getter, std::vector<double>& out_fd) {
      std::vector<double> vp, vm;
      for (std::size_t s = 0; s < steps.size(); ++s) {
        vp.push_back(getter(plus[s]));
        vm.push_back(getter(minus[s]));
      }
      out_fd[a] = extrapolated_slope(vp, vm, steps, 0, 1);
    };
    collect([&](const ExactParameters& q) { return q.phi[a]; }, rep.fd_phi);
    collect([&](const ExactParameters& q) { return q.psi1[a]; }, rep.fd_psi1);
    collect([&](const ExactParameters& q) { return q.psi2[a]; }, rep.fd_psi2);
    collect([&](const ExactParameters& q) { return q.er[a]; }, rep.fd_er);
    collect([&](const ExactParameters& q) { return q.smr[a]; }, rep.fd_smr);

    auto track = [&](double pred, double fd) {
      const double rel = std::fabs(fd - pred) / std::max(1.0, std::fabs(pred));
      rep.max_rel_error = std::max(rep.max_rel_error, rel);
    };
    track(pr_phi, rep.fd_phi[a]);
    track(pr_1, rep.fd_psi1[a]);
    track(pr_2, rep.fd_psi2[a]);
    track(pr_er, rep.fd_er[a]);
    track(pr_smr, rep.fd_smr[a]);
  }
  return rep;
}

DiscreteLaw random_law(Rng& rng, int n_w, int m, double mass_floor) {
  if (n_w < 1 || m < 2) throw ValidationError("random_law: need n_w >= 1 and m >= 2");
  DiscreteLaw law;
  law.m = m;
  law.w_values.resize(n_w);
  for (int w = 0; w < n_w; ++w) law.w_values[w] = static_cast<double>(w);
  const int k = n_w * m * 2;
  if (mass_floor * k >= 1.0) throw ValidationError("random_law: mass floor too large for support");

  // flat simplex draw, then mix toward uniform so every atom keeps >= floor
  law.prob.resize(k);
  double s = 0.0;
  for (auto& v : law.prob) {
    v = rng.exponential();
    s += v;
  }
  const double keep = 1.0 - mass_floor * k;
  for (auto& v : law.prob) v = keep * (v / s) + mass_floor;
  return law;
}

Direction random_direction(Rng& rng, const DiscreteLaw& law) {
  const int k = law.atoms();
  Direction dir;
  dir.delta.resize(k);
  double mean = 0.0;
  for (auto& d : dir.delta) {
    d = rng.normal();
    mean += d;
  }
  mean /= static_cast<double>(k);
  for (auto& d : dir.delta) d -= mean;

  // Scale so no atom moves by more than 5% of its mass for |h| <= h_max.
  // Keeping the relative perturbation small keeps the path nearly linear,
  // which the Richardson-extrapolated differences need to stay near 1e-8.
  const double h_max = 1e-3;
  double scale = std::numeric_limits<double>::infinity();
  for (int i = 0; i < k; ++i) {
    if (dir.delta[i] != 0.0)
      scale = std::min(scale, law.prob[i] / (20.0 * h_max * std::fabs(dir.delta[i])));
  }
  if (!std::isfinite(scale)) scale = 1.0;
  scale = std::min(scale, 100.0);
  for (auto& d : dir.delta) d *= scale;
  dir.h_max = h_max;
  return dir;
}

EifVariances eif_variances(const DiscreteLaw& law) {
  const auto eifs = exact_eifs(law);
  EifVariances v;
  v.var_phi.assign(law.m, 0.0);
  v.var_psi2.assign(law.m, 0.0);
  for (int a = 0; a < law.m; ++a) {
    double s_phi = 0.0, s_2 = 0.0;
    for (int o = 0; o < law.atoms(); ++o) {
      const double w = law.prob[o];
      const double dp = eifs.at(eifs.d_phi, a, o);
      const double d2 = eifs.at(eifs.d_psi2, a, o);
      s_phi += w * dp * dp;
      s_2 += w * d2 * d2;
    }
    v.var_phi[a] = s_phi;
    v.var_psi2[a] = s_2;
  }
  return v;
}

}  // namespace targprof
