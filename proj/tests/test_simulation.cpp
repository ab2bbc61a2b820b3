#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "targprof/errors.hpp"
#include "targprof/rng.hpp"
#include "targprof/simulation.hpp"
#include "targprof/stats.hpp"

using namespace targprof;

namespace {

// test-side copies of the study mean functions, used to cross-check the
// library's draws and truth tables against independent arithmetic
double q1_ref(double w1, int b) {
  if (b == 1) return w1 <= 0.5 ? 0.3 : (w1 <= 0.7 ? 1.0 : 2.0);
  return w1 <= 0.5 ? 0.7 : (w1 <= 0.7 ? 0.5 : 0.0);
}

double g2_ref(const Eigen::VectorXd& w, int b) {
  return std::max(0.01, 1.0 + 10.0 * b * w(0) - 0.2 * w(1) - 0.5 * w(4));
}

double q2_ref(const Eigen::VectorXd& w, int b) {
  return 2.0 * w(0) - (w(1) - 0.5) * (w(1) - 0.5) + (w(2) > 0.5 ? 1.0 : 0.0) + w(4) - 2.0 * b;
}

SimConfig tiny_config() {
  SimConfig cfg;
  cfg.study = Study::sim1;
  cfg.n = 300;
  cfg.m = 3;
  cfg.replicates = 2;
  cfg.seed = 17;
  cfg.folds = 2;
  LearnerSpec glm;
  glm.kind = LearnerKind::glm;
  cfg.nuisance.propensity.members = {glm};
  cfg.nuisance.outcome.members = {glm};
  return cfg;
}

NuisanceEstimates toy_nuisances(int n, int m, std::uint64_t seed) {
  Rng rng(seed);
  NuisanceEstimates nu;
  nu.pi_hat.resize(n, m);
  for (int i = 0; i < n; ++i) {
    const auto row = rng.dirichlet_flat(static_cast<std::size_t>(m));
    for (int a = 0; a < m; ++a) nu.pi_hat(i, a) = row[static_cast<std::size_t>(a)];
  }
  nu.mu_tilde.resize(n);
  for (int i = 0; i < n; ++i) nu.mu_tilde(i) = rng.uniform();
  nu.mu_dot = Eigen::VectorXd::Constant(m, 0.5);
  nu.p_hat = Eigen::VectorXd::Constant(m, 1.0 / m);
  return nu;
}

}  // namespace

TEST_SUITE("simulation") {
  TEST_CASE("study one assignment favors matched providers by the tabulated odds") {
    // with two providers the drawn effects are always one of each, so the
    // conditional assignment share among high-W1 rows is expit(2) exactly
    const SimDraw d = draw_sim1(200000, 2, 0.0, 31);
    const int hot = d.truth.beta[0] == 1 ? 0 : 1;
    int high_n = 0, high_hot = 0;
    for (int i = 0; i < d.data.n(); ++i) {
      if (d.data.x(i, 0) > 0.7) {
        ++high_n;
        if (d.data.provider[static_cast<std::size_t>(i)] == hot) ++high_hot;
      }
    }
    CHECK(expit(2.0) == doctest::Approx(0.8808).epsilon(1e-3));
    CHECK(expit(-2.0) == doctest::Approx(0.1192).epsilon(1e-3));
    CHECK(static_cast<double>(high_hot) / high_n == doctest::Approx(expit(2.0)).epsilon(0.01));
  }

  TEST_CASE("study one noise-free outcomes follow the piecewise mean") {
    const SimDraw d = draw_sim1(5000, 6, 0.0, 5);
    REQUIRE(d.data.k() == 1);
    bool checked_middle = false;
    for (int i = 0; i < d.data.n(); ++i) {
      const int b = d.truth.beta[static_cast<std::size_t>(d.data.provider[static_cast<std::size_t>(i)])];
      CHECK(d.data.y(i) == q1_ref(d.data.x(i, 0), b));
      if (b == 1 && d.data.x(i, 0) > 0.5 && d.data.x(i, 0) <= 0.7) {
        CHECK(d.data.y(i) == 1.0);
        checked_middle = true;
      }
    }
    CHECK(checked_middle);
  }

  TEST_CASE("study one empirical provider means converge to the exact truth") {
    const SimDraw d = draw_sim1(100000, 10, 0.0, 42);
    std::vector<double> sum(10, 0.0);
    std::vector<int> cnt(10, 0);
    for (int i = 0; i < d.data.n(); ++i) {
      sum[static_cast<std::size_t>(d.data.provider[static_cast<std::size_t>(i)])] += d.data.y(i);
      cnt[static_cast<std::size_t>(d.data.provider[static_cast<std::size_t>(i)])] += 1;
    }
    for (int a = 0; a < 10; ++a) {
      REQUIRE(cnt[static_cast<std::size_t>(a)] > 0);
      CHECK(sum[static_cast<std::size_t>(a)] / cnt[static_cast<std::size_t>(a)] ==
            doctest::Approx(d.truth.psi1(a)).epsilon(0.02));
    }
  }

  TEST_CASE("study one exact truth matches an independent Monte Carlo integrator") {
    const SimDraw d = draw_sim1(10, 5, 1.0, 77);
    const auto& beta = d.truth.beta;
    const int m = 5;
    Rng rng(991);
    const int draws = 400000;
    std::vector<double> pi_s(m, 0.0), piq_s(m, 0.0), pimu_s(m, 0.0), q_s(m, 0.0);
    for (int j = 0; j < draws; ++j) {
      const double w1 = rng.uniform();
      const bool high = w1 > 0.7;
      double z = 0.0;
      std::vector<double> g(m);
      for (int a = 0; a < m; ++a) {
        g[static_cast<std::size_t>(a)] =
            expit(high == (beta[static_cast<std::size_t>(a)] == 1) ? 2.0 : -2.0);
        z += g[static_cast<std::size_t>(a)];
      }
      double mu = 0.0;
      for (int a = 0; a < m; ++a) {
        mu += g[static_cast<std::size_t>(a)] / z * q1_ref(w1, beta[static_cast<std::size_t>(a)]);
      }
      for (int a = 0; a < m; ++a) {
        const double pi = g[static_cast<std::size_t>(a)] / z;
        const double q = q1_ref(w1, beta[static_cast<std::size_t>(a)]);
        pi_s[static_cast<std::size_t>(a)] += pi;
        piq_s[static_cast<std::size_t>(a)] += pi * q;
        pimu_s[static_cast<std::size_t>(a)] += pi * mu;
        q_s[static_cast<std::size_t>(a)] += q;
      }
    }
    for (int a = 0; a < m; ++a) {
      const double p = pi_s[static_cast<std::size_t>(a)] / draws;
      CHECK(q_s[static_cast<std::size_t>(a)] / draws == doctest::Approx(d.truth.phi(a)).epsilon(0.02));
      CHECK(piq_s[static_cast<std::size_t>(a)] / draws / p ==
            doctest::Approx(d.truth.psi1(a)).epsilon(0.02));
      CHECK(pimu_s[static_cast<std::size_t>(a)] / draws / p ==
            doctest::Approx(d.truth.psi2(a)).epsilon(0.02));
      CHECK(d.truth.er(a) == d.truth.psi1(a) - d.truth.psi2(a));
      CHECK(d.truth.smr(a) == d.truth.psi1(a) / d.truth.psi2(a));
    }
    CHECK(d.truth.mc_se_psi2 == 0.0);
  }

  TEST_CASE("study two noise-free outcomes follow the stated mean function") {
    const SimDraw d = draw_sim2(3000, 4, 0.0, 13);
    REQUIRE(d.data.k() == 10);
    for (int i = 0; i < d.data.n(); ++i) {
      const int b = d.truth.beta[static_cast<std::size_t>(d.data.provider[static_cast<std::size_t>(i)])];
      CHECK(d.data.y(i) == doctest::Approx(q2_ref(d.data.x.row(i), b)).epsilon(1e-12));
    }
    // spot value from the mean function: 2 - 0 + 1 + 1 - 2 = 2
    Eigen::VectorXd w(10);
    w << 1.0, 0.5, 1.0, 0.3, 1.0, 0.2, 0.9, 0.1, 0.4, 0.6;
    CHECK(q2_ref(w, 1) == 2.0);
    // the 0.01 weight floor is a safety net only: the raw weight is bounded
    // below by 1 - 0.2 - 0.5 = 0.3, so the clip never binds for this family
    double min_g = 1e9;
    for (int i = 0; i < d.data.n(); ++i) {
      min_g = std::min({min_g, g2_ref(d.data.x.row(i), 0), g2_ref(d.data.x.row(i), 1)});
    }
    CHECK(min_g >= 0.3);
  }

  TEST_CASE("study two assignment is uniform when the effect plays no role") {
    // beta enters the weight only through 10 b W1, so the drawn assignment
    // must be symmetric across providers sharing the same effect; check the
    // conditional shares of two same-effect providers agree
    const SimDraw d = draw_sim2(200000, 6, 0.0, 21);
    std::vector<int> same;
    for (int a = 0; a < 6; ++a) {
      if (d.truth.beta[static_cast<std::size_t>(a)] == d.truth.beta[0]) same.push_back(a);
    }
    REQUIRE(same.size() >= 2);
    std::vector<int> cnt(6, 0);
    for (int i = 0; i < d.data.n(); ++i) cnt[static_cast<std::size_t>(d.data.provider[static_cast<std::size_t>(i)])] += 1;
    CHECK(static_cast<double>(cnt[static_cast<std::size_t>(same[0])]) / d.data.n() ==
          doctest::Approx(static_cast<double>(cnt[static_cast<std::size_t>(same[1])]) / d.data.n())
              .epsilon(0.05));
    // and providers with identical effects share identical truth entries
    CHECK(d.truth.phi(same[0]) == d.truth.phi(same[1]));
    CHECK(d.truth.psi2(same[0]) == d.truth.psi2(same[1]));
  }

  TEST_CASE("study two truth integrator reports a small batch standard error") {
    const SimDraw d = draw_sim2(100, 20, 1.0, 3);
    CHECK(d.truth.mc_se_psi2 > 0.0);
    CHECK(d.truth.mc_se_psi2 <= 0.005);
    // the direct parameter has a closed-form mean: E[2W1] - 1/12 + 1/2 + E[W5]
    for (int a = 0; a < 20; ++a) {
      const double expected = 1.0 - 1.0 / 12.0 + 0.5 + 0.5 -
                              2.0 * d.truth.beta[static_cast<std::size_t>(a)];
      CHECK(d.truth.phi(a) == doctest::Approx(expected).epsilon(0.01));
    }
  }

  TEST_CASE("study two empirical provider means converge to the integrated truth") {
    const SimDraw d = draw_sim2(200000, 5, 0.0, 9);
    std::vector<double> sum(5, 0.0);
    std::vector<int> cnt(5, 0);
    for (int i = 0; i < d.data.n(); ++i) {
      sum[static_cast<std::size_t>(d.data.provider[static_cast<std::size_t>(i)])] += d.data.y(i);
      cnt[static_cast<std::size_t>(d.data.provider[static_cast<std::size_t>(i)])] += 1;
    }
    for (int a = 0; a < 5; ++a) {
      CHECK(sum[static_cast<std::size_t>(a)] / cnt[static_cast<std::size_t>(a)] ==
            doctest::Approx(d.truth.psi1(a)).epsilon(0.02));
    }
  }

  TEST_CASE("effect vectors are never degenerate") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const SimDraw d = draw_sim1(10, 2, 1.0, seed);
      const int s = d.truth.beta[0] + d.truth.beta[1];
      CHECK(s == 1);  // one of each at m = 2
    }
  }

  TEST_CASE("draw validation rejects bad arguments") {
    CHECK_THROWS_AS(draw_sim1(0, 5, 1.0, 1), ValidationError);
    CHECK_THROWS_AS(draw_sim1(100, 1, 1.0, 1), ValidationError);
    CHECK_THROWS_AS(draw_sim1(100, 5, -0.5, 1), ValidationError);
    CHECK_THROWS_AS(draw_sim2(100, 1, 1.0, 1), ValidationError);
  }

  TEST_CASE("misspecification replaces exactly the advertised pieces") {
    const NuisanceEstimates nu = toy_nuisances(50, 4, 8);

    const NuisanceEstimates s1 = apply_misspecification(nu, Scenario::s1, 99);
    CHECK((s1.pi_hat - nu.pi_hat).cwiseAbs().maxCoeff() == 0.0);
    CHECK((s1.mu_tilde - nu.mu_tilde).cwiseAbs().maxCoeff() == 0.0);

    const NuisanceEstimates s2 = apply_misspecification(nu, Scenario::s2, 99);
    CHECK((s2.pi_hat - nu.pi_hat).cwiseAbs().maxCoeff() > 1e-3);
    CHECK((s2.mu_tilde - nu.mu_tilde).cwiseAbs().maxCoeff() == 0.0);
    for (int i = 0; i < 50; ++i) {
      CHECK(s2.pi_hat.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(s2.pi_hat.row(i).minCoeff() > 0.0);
    }
    // distinct rows are distinct draws, not one shared draw
    CHECK((s2.pi_hat.row(0) - s2.pi_hat.row(1)).cwiseAbs().maxCoeff() > 1e-6);

    const NuisanceEstimates s3 = apply_misspecification(nu, Scenario::s3, 99);
    CHECK((s3.pi_hat - nu.pi_hat).cwiseAbs().maxCoeff() == 0.0);
    CHECK(s3.mu_tilde.minCoeff() == 0.5);
    CHECK(s3.mu_tilde.maxCoeff() == 0.5);

    const NuisanceEstimates s4 = apply_misspecification(nu, Scenario::s4, 99);
    CHECK((s4.pi_hat - nu.pi_hat).cwiseAbs().maxCoeff() > 1e-3);
    CHECK(s4.mu_tilde.minCoeff() == 0.5);
    CHECK(s4.mu_tilde.maxCoeff() == 0.5);
    // untouched fields survive every scenario
    CHECK((s4.p_hat - nu.p_hat).cwiseAbs().maxCoeff() == 0.0);
    CHECK((s4.mu_dot - nu.mu_dot).cwiseAbs().maxCoeff() == 0.0);

    // identical seeds give identical corruption
    const NuisanceEstimates again = apply_misspecification(nu, Scenario::s2, 99);
    CHECK((again.pi_hat - s2.pi_hat).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("study aggregates satisfy the triangle and coverage bounds") {
    SimConfig cfg = tiny_config();
    cfg.replicates = 4;
    const SimResult res = run_study(cfg);
    REQUIRE(res.cells.size() == cfg.estimators.size() * cfg.parameters.size());
    CHECK(res.replicates == 4);
    CHECK(res.failures == 0);
    for (const SimCell& c : res.cells) {
      CHECK(c.mae >= std::abs(c.me));
      if (c.estimator == EstimatorKind::tmle) {
        CHECK(c.coverage >= 0.0);
        CHECK(c.coverage <= 1.0);
      } else {
        CHECK(std::isnan(c.coverage));
      }
    }
  }

  TEST_CASE("study runs are bitwise deterministic") {
    SimConfig cfg = tiny_config();
    cfg.replicates = 1;
    cfg.keep_audit = true;
    const SimResult a = run_study(cfg);
    const SimResult b = run_study(cfg);
    REQUIRE(a.cells.size() == b.cells.size());
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
      CHECK(a.cells[i].me == b.cells[i].me);
      CHECK(a.cells[i].mae == b.cells[i].mae);
      const bool both_nan = std::isnan(a.cells[i].coverage) && std::isnan(b.cells[i].coverage);
      CHECK((both_nan || a.cells[i].coverage == b.cells[i].coverage));
    }
    REQUIRE(a.audit.size() == b.audit.size());
    REQUIRE(a.audit.size() ==
            cfg.estimators.size() * cfg.parameters.size() * static_cast<std::size_t>(cfg.m));
    for (std::size_t i = 0; i < a.audit.size(); ++i) {
      CHECK(a.audit[i].estimate == b.audit[i].estimate);
      CHECK(a.audit[i].truth == b.audit[i].truth);
      CHECK(a.audit[i].provider == b.audit[i].provider);
    }
  }

  TEST_CASE("thread count does not change the aggregate") {
    SimConfig cfg = tiny_config();
    cfg.replicates = 3;
    cfg.threads = 1;
    const SimResult a = run_study(cfg);
    cfg.threads = 3;
    const SimResult b = run_study(cfg);
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
      CHECK(a.cells[i].me == b.cells[i].me);
      CHECK(a.cells[i].mae == b.cells[i].mae);
    }
  }

  TEST_CASE("full nuisance corruption degrades the indirect mean but not the provider mean") {
    // under scenario 4 both nuisances are wrong, so the indirect mean loses
    // its safety net; the provider mean is anchored to the empirical average
    // by its score identity and stays accurate
    SimConfig cfg = tiny_config();
    cfg.study = Study::sim2;
    cfg.n = 1500;
    cfg.m = 4;
    cfg.replicates = 3;
    cfg.estimators = {EstimatorKind::tmle};
    cfg.parameters = {ParameterTag::psi1, ParameterTag::psi2};

    cfg.scenario = Scenario::s1;
    const SimResult clean = run_study(cfg);
    cfg.scenario = Scenario::s4;
    const SimResult corrupted = run_study(cfg);

    const double clean_psi2 = clean.cell(EstimatorKind::tmle, ParameterTag::psi2).mae;
    const double bad_psi2 = corrupted.cell(EstimatorKind::tmle, ParameterTag::psi2).mae;
    const double bad_psi1 = corrupted.cell(EstimatorKind::tmle, ParameterTag::psi1).mae;
    CHECK(bad_psi2 > clean_psi2);
    CHECK(bad_psi2 > 0.15);
    CHECK(bad_psi1 < 0.2);
  }

  TEST_CASE("config validation enforces the study contracts") {
    SimConfig cfg = tiny_config();
    cfg.replicates = 0;
    CHECK_THROWS_AS(run_study(cfg), ValidationError);

    cfg = tiny_config();
    cfg.scenario = Scenario::s2;  // study 1 has no misspecification arms
    CHECK_THROWS_AS(run_study(cfg), ValidationError);

    cfg = tiny_config();
    cfg.k = 10;  // study 1 fixes a single covariate
    CHECK_THROWS_AS(run_study(cfg), ValidationError);

    cfg = tiny_config();
    cfg.sigma = 0.0;  // noise-free runs are for the draw helpers, not studies
    CHECK_THROWS_AS(run_study(cfg), ValidationError);

    cfg = tiny_config();
    cfg.estimators.clear();
    CHECK_THROWS_AS(run_study(cfg), ValidationError);

    cfg = tiny_config();
    cfg.k = 1;  // matching the study default is accepted
    cfg.replicates = 1;
    CHECK_NOTHROW(run_study(cfg));
  }

  TEST_CASE("failed replicates are excluded and counted") {
    // nine observations across three providers with three folds: for this
    // seed some training splits lose a provider, so half the replicates fail
    SimConfig cfg = tiny_config();
    cfg.n = 9;
    cfg.m = 3;
    cfg.folds = 3;
    cfg.replicates = 8;
    cfg.seed = 17;
    cfg.estimators = {EstimatorKind::tmle};
    cfg.parameters = {ParameterTag::psi1};
    const SimResult res = run_study(cfg);
    CHECK(res.replicates == 4);
    CHECK(res.failures == 4);
    REQUIRE(res.failure_notes.size() == 4);
    CHECK(res.failure_notes.front().find("absent from training split") != std::string::npos);
    // the aggregate is still a finite mean over the surviving replicates
    CHECK(std::isfinite(res.cell(EstimatorKind::tmle, ParameterTag::psi1).mae));
  }

  TEST_CASE("a study where every replicate fails reports the first failure") {
    // one observation per fold leaves a one-row training split, so one
    // provider is always absent from it and nuisance fitting cannot proceed
    SimConfig cfg = tiny_config();
    cfg.n = 2;
    cfg.m = 2;
    cfg.folds = 2;
    cfg.replicates = 2;
    CHECK_THROWS_AS(run_study(cfg), EstimationError);
  }

  TEST_CASE("result cell lookup rejects missing combinations") {
    SimConfig cfg = tiny_config();
    cfg.estimators = {EstimatorKind::glm};
    cfg.parameters = {ParameterTag::phi};
    const SimResult res = run_study(cfg);
    CHECK_NOTHROW(res.cell(EstimatorKind::glm, ParameterTag::phi));
    CHECK_THROWS_AS(res.cell(EstimatorKind::tmle, ParameterTag::phi), ValidationError);
    CHECK_THROWS_AS(res.cell(EstimatorKind::glm, ParameterTag::smr), ValidationError);
  }

  TEST_CASE("names round-trip for reporting") {
    CHECK(study_name(Study::sim1) == "sim1");
    CHECK(study_name(Study::sim2) == "sim2");
    CHECK(scenario_name(Scenario::s4) == "s4");
    CHECK(estimator_name(EstimatorKind::tmle) == "tmle");
    CHECK(estimator_name(EstimatorKind::glm) == "glm");
  }
}
