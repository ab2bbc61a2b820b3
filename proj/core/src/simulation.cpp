#include "targprof/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "targprof/errors.hpp"
#include "targprof/parallel.hpp"
#include "targprof/rng.hpp"
#include "targprof/stats.hpp"

namespace targprof {

namespace {

constexpr std::uint64_t kBetaStream = 0x53420000ULL;       // provider effect draws
constexpr std::uint64_t kDataStream = 0x53440000ULL;       // observation draws
constexpr std::uint64_t kTruthStream = 0x53540000ULL;      // truth integrator draws
constexpr std::uint64_t kMisspecStream = 0x534d0000ULL;    // nuisance corruption draws
constexpr std::uint64_t kFoldStream = 0x53460000ULL;       // fold shuffles
constexpr std::uint64_t kNuisanceStream = 0x534e0000ULL;   // learner seeds
constexpr std::uint64_t kReplicateStream = 0x52500000ULL;  // per-replicate master seeds

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string> provider_labels(int m) {
  std::vector<std::string> out(static_cast<std::size_t>(m));
  for (int a = 0; a < m; ++a) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "p%02d", a);
    out[static_cast<std::size_t>(a)] = buf;
  }
  return out;
}

// Bernoulli(1/2) effects, redrawn while all providers land on the same value
// (a flat effect vector leaves nothing to profile)
std::vector<int> draw_beta(Rng& rng, int m, int& regenerated) {
  std::vector<int> beta(static_cast<std::size_t>(m));
  for (;;) {
    int ones = 0;
    for (auto& b : beta) {
      b = rng.bernoulli(0.5) ? 1 : 0;
      ones += b;
    }
    if (ones != 0 && ones != m) return beta;
    ++regenerated;
  }
}

// inverse-CDF draw over unnormalized nonnegative weights
int draw_categorical(Rng& rng, const std::vector<double>& w, double total) {
  double u = rng.uniform() * total;
  for (std::size_t a = 0; a < w.size(); ++a) {
    u -= w[a];
    if (u < 0.0) return static_cast<int>(a);
  }
  return static_cast<int>(w.size()) - 1;
}

void validate_draw_args(int n, int m, double sigma) {
  if (n < 1) throw ValidationError("simulation: n must be positive");
  if (m < 2) throw ValidationError("simulation: at least two providers are required");
  if (!(sigma >= 0.0)) throw ValidationError("simulation: sigma must be nonnegative");
}

// study 1 pieces: W1 segments (0, 0.5], (0.5, 0.7], (0.7, 1] with the outcome
// level per segment and effect, and the expit(+-2) assignment preference that
// pairs high-W1 patients with effect-1 providers
constexpr double kSegLen[3] = {0.5, 0.2, 0.3};
constexpr double kSegQ[3][2] = {{0.7, 0.3}, {0.5, 1.0}, {0.0, 2.0}};  // [segment][effect]
constexpr bool kSegHigh[3] = {false, false, true};

int sim1_segment(double w1) { return w1 <= 0.5 ? 0 : (w1 <= 0.7 ? 1 : 2); }

double sim1_weight(bool high, int b) { return expit(high == (b == 1) ? 2.0 : -2.0); }

// every mean function is constant on the three segments, so each integral
// collapses to a length-weighted sum over segment values
TruthTable sim1_truth(const std::vector<int>& beta) {
  const int m = static_cast<int>(beta.size());
  TruthTable t;
  t.beta = beta;
  t.phi.resize(m);
  t.psi1.resize(m);
  t.psi2.resize(m);
  t.er.resize(m);
  t.smr.resize(m);

  double z[3];   // per-segment assignment normalizer
  double mu[3];  // per-segment covariate-only outcome mean
  for (int s = 0; s < 3; ++s) {
    z[s] = 0.0;
    double num = 0.0;
    for (int a = 0; a < m; ++a) {
      const int b = beta[static_cast<std::size_t>(a)];
      const double g = sim1_weight(kSegHigh[s], b);
      z[s] += g;
      num += g * kSegQ[s][b];
    }
    mu[s] = num / z[s];
  }

  for (int a = 0; a < m; ++a) {
    const int b = beta[static_cast<std::size_t>(a)];
    double p = 0.0, phi = 0.0, s1 = 0.0, s2 = 0.0;
    for (int s = 0; s < 3; ++s) {
      const double pi = sim1_weight(kSegHigh[s], b) / z[s];
      p += kSegLen[s] * pi;
      phi += kSegLen[s] * kSegQ[s][b];
      s1 += kSegLen[s] * pi * kSegQ[s][b];
      s2 += kSegLen[s] * pi * mu[s];
    }
    t.phi(a) = phi;
    t.psi1(a) = s1 / p;
    t.psi2(a) = s2 / p;
    t.er(a) = t.psi1(a) - t.psi2(a);
    t.smr(a) = t.psi2(a) > 0.0 ? t.psi1(a) / t.psi2(a) : kNaN;
  }
  return t;
}

// study 2 pieces: the assignment weight and outcome mean depend on the
// provider only through its effect indicator
constexpr int kSim2K = 10;
constexpr double kSim2Floor = 0.01;

double sim2_weight(const double* w, int b) {
  const double g = 1.0 + 10.0 * b * w[0] - 0.2 * w[1] - 0.5 * w[4];
  return g < kSim2Floor ? kSim2Floor : g;
}

double sim2_q(const double* w, int b) {
  return 2.0 * w[0] - (w[1] - 0.5) * (w[1] - 0.5) + (w[2] > 0.5 ? 1.0 : 0.0) + w[4] -
         2.0 * static_cast<double>(b);
}

TruthTable sim2_truth(const std::vector<int>& beta, std::uint64_t seed) {
  const int m = static_cast<int>(beta.size());
  int ones = 0;
  for (int b : beta) ones += b;
  const double n1 = static_cast<double>(ones);
  const double n0 = static_cast<double>(m - ones);

  constexpr int kBatches = 100;
  constexpr int kPerBatch = 10000;  // 10^6 draws total
  // per-batch means of the three integrands, tracked per effect group since
  // every provider in a group shares the same assignment share and outcome
  std::vector<double> bpi[2], bpiq[2], bpimu[2], bq[2];
  for (int g = 0; g < 2; ++g) {
    bpi[g].reserve(kBatches);
    bpiq[g].reserve(kBatches);
    bpimu[g].reserve(kBatches);
    bq[g].reserve(kBatches);
  }

  Rng rng(derive_seed(seed, kTruthStream));
  double w[kSim2K];
  for (int batch = 0; batch < kBatches; ++batch) {
    double api[2] = {0.0, 0.0}, apiq[2] = {0.0, 0.0}, apimu[2] = {0.0, 0.0}, aq[2] = {0.0, 0.0};
    for (int j = 0; j < kPerBatch; ++j) {
      for (int c = 0; c < kSim2K; ++c) w[c] = rng.uniform();
      const double g0 = sim2_weight(w, 0);
      const double g1 = sim2_weight(w, 1);
      const double z = n0 * g0 + n1 * g1;
      const double q0 = sim2_q(w, 0);
      const double q1 = sim2_q(w, 1);
      const double mu = (n0 * g0 * q0 + n1 * g1 * q1) / z;
      const double pi0 = g0 / z;  // share of one effect-0 provider
      const double pi1 = g1 / z;
      api[0] += pi0;
      apiq[0] += pi0 * q0;
      apimu[0] += pi0 * mu;
      aq[0] += q0;
      api[1] += pi1;
      apiq[1] += pi1 * q1;
      apimu[1] += pi1 * mu;
      aq[1] += q1;
    }
    for (int g = 0; g < 2; ++g) {
      bpi[g].push_back(api[g] / kPerBatch);
      bpiq[g].push_back(apiq[g] / kPerBatch);
      bpimu[g].push_back(apimu[g] / kPerBatch);
      bq[g].push_back(aq[g] / kPerBatch);
    }
  }

  double phi_g[2], psi1_g[2], psi2_g[2], se_g[2];
  for (int g = 0; g < 2; ++g) {
    const double p = mean(bpi[g]);
    phi_g[g] = mean(bq[g]);
    psi1_g[g] = mean(bpiq[g]) / p;
    psi2_g[g] = mean(bpimu[g]) / p;
    std::vector<double> ratio(bpi[g].size());
    for (std::size_t j = 0; j < ratio.size(); ++j) ratio[j] = bpimu[g][j] / bpi[g][j];
    se_g[g] = sample_sd(ratio) / std::sqrt(static_cast<double>(ratio.size()));
  }

  TruthTable t;
  t.beta = beta;
  t.phi.resize(m);
  t.psi1.resize(m);
  t.psi2.resize(m);
  t.er.resize(m);
  t.smr.resize(m);
  t.mc_se_psi2 = std::max(se_g[0], se_g[1]);
  for (int a = 0; a < m; ++a) {
    const int b = beta[static_cast<std::size_t>(a)];
    t.phi(a) = phi_g[b];
    t.psi1(a) = psi1_g[b];
    t.psi2(a) = psi2_g[b];
    t.er(a) = t.psi1(a) - t.psi2(a);
    t.smr(a) = t.psi2(a) > 0.0 ? t.psi1(a) / t.psi2(a) : kNaN;
  }
  return t;
}

bool contains(const std::vector<ParameterTag>& params, ParameterTag tag) {
  return std::find(params.begin(), params.end(), tag) != params.end();
}

}  // namespace

std::string study_name(Study s) { return s == Study::sim1 ? "sim1" : "sim2"; }

std::string scenario_name(Scenario s) {
  switch (s) {
    case Scenario::s1: return "s1";
    case Scenario::s2: return "s2";
    case Scenario::s3: return "s3";
    case Scenario::s4: return "s4";
  }
  return "s?";
}

std::string estimator_name(EstimatorKind e) {
  return e == EstimatorKind::tmle ? "tmle" : "glm";
}

double TruthTable::value(ParameterTag tag, int provider) const {
  if (provider < 0 || provider >= static_cast<int>(phi.size())) {
    throw ValidationError("truth table: provider index out of range");
  }
  switch (tag) {
    case ParameterTag::phi: return phi(provider);
    case ParameterTag::psi1: return psi1(provider);
    case ParameterTag::psi2: return psi2(provider);
    case ParameterTag::er: return er(provider);
    case ParameterTag::smr: return smr(provider);
  }
  throw ValidationError("truth table: unknown parameter tag");
}

SimDraw draw_sim1(int n, int m, double sigma, std::uint64_t seed) {
  validate_draw_args(n, m, sigma);
  int regenerated = 0;
  Rng beta_rng(derive_seed(seed, kBetaStream));
  const std::vector<int> beta = draw_beta(beta_rng, m, regenerated);

  SimDraw out;
  out.truth = sim1_truth(beta);
  out.truth.regenerated = regenerated;

  Dataset& d = out.data;
  d.x.resize(n, 1);
  d.y.resize(n);
  d.provider.resize(static_cast<std::size_t>(n));
  d.provider_labels = provider_labels(m);
  d.covariate_names = {"w1"};
  d.binary_outcome = false;

  Rng rng(derive_seed(seed, kDataStream));
  std::vector<double> weights(static_cast<std::size_t>(m));
  for (int i = 0; i < n; ++i) {
    const double w1 = rng.uniform();
    const bool high = w1 > 0.7;
    double total = 0.0;
    for (int a = 0; a < m; ++a) {
      weights[static_cast<std::size_t>(a)] = sim1_weight(high, beta[static_cast<std::size_t>(a)]);
      total += weights[static_cast<std::size_t>(a)];
    }
    const int a = draw_categorical(rng, weights, total);
    d.x(i, 0) = w1;
    d.provider[static_cast<std::size_t>(i)] = a;
    d.y(i) = kSegQ[sim1_segment(w1)][beta[static_cast<std::size_t>(a)]] + sigma * rng.normal();
  }
  return out;
}

SimDraw draw_sim2(int n, int m, double sigma, std::uint64_t seed) {
  validate_draw_args(n, m, sigma);
  int regenerated = 0;
  Rng beta_rng(derive_seed(seed, kBetaStream));
  const std::vector<int> beta = draw_beta(beta_rng, m, regenerated);

  SimDraw out;
  out.truth = sim2_truth(beta, seed);
  out.truth.regenerated = regenerated;

  Dataset& d = out.data;
  d.x.resize(n, kSim2K);
  d.y.resize(n);
  d.provider.resize(static_cast<std::size_t>(n));
  d.provider_labels = provider_labels(m);
  d.covariate_names.resize(kSim2K);
  for (int c = 0; c < kSim2K; ++c) d.covariate_names[static_cast<std::size_t>(c)] = "w" + std::to_string(c + 1);
  d.binary_outcome = false;

  Rng rng(derive_seed(seed, kDataStream));
  std::vector<double> weights(static_cast<std::size_t>(m));
  double w[kSim2K];
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < kSim2K; ++c) {
      w[c] = rng.uniform();
      d.x(i, c) = w[c];
    }
    const double g0 = sim2_weight(w, 0);
    const double g1 = sim2_weight(w, 1);
    double total = 0.0;
    for (int a = 0; a < m; ++a) {
      weights[static_cast<std::size_t>(a)] = beta[static_cast<std::size_t>(a)] == 1 ? g1 : g0;
      total += weights[static_cast<std::size_t>(a)];
    }
    const int a = draw_categorical(rng, weights, total);
    d.provider[static_cast<std::size_t>(i)] = a;
    d.y(i) = sim2_q(w, beta[static_cast<std::size_t>(a)]) + sigma * rng.normal();
  }
  return out;
}

NuisanceEstimates apply_misspecification(const NuisanceEstimates& nu, Scenario scenario,
                                         std::uint64_t seed) {
  NuisanceEstimates out = nu;
  if (scenario == Scenario::s1) return out;
  if (scenario == Scenario::s2 || scenario == Scenario::s4) {
    Rng rng(seed);
    const std::size_t m = static_cast<std::size_t>(out.pi_hat.cols());
    for (Eigen::Index i = 0; i < out.pi_hat.rows(); ++i) {
      const std::vector<double> row = rng.dirichlet_flat(m);
      for (std::size_t a = 0; a < m; ++a) out.pi_hat(i, static_cast<Eigen::Index>(a)) = row[a];
    }
  }
  if (scenario == Scenario::s3 || scenario == Scenario::s4) out.mu_tilde.setConstant(0.5);
  return out;
}

const SimCell& SimResult::cell(EstimatorKind e, ParameterTag p) const {
  for (const SimCell& c : cells) {
    if (c.estimator == e && c.parameter == p) return c;
  }
  throw ValidationError("simulation: no result cell for " + estimator_name(e) + "/" +
                        parameter_name(p));
}

SimResult run_study(const SimConfig& cfg) {
  if (cfg.replicates < 1) throw ValidationError("simulation: replicates must be at least 1");
  if (cfg.m < 2) throw ValidationError("simulation: at least two providers are required");
  if (cfg.n < 1) throw ValidationError("simulation: n must be positive");
  if (!(cfg.sigma > 0.0)) throw ValidationError("simulation: sigma must be positive");
  const int study_k = cfg.study == Study::sim1 ? 1 : kSim2K;
  if (cfg.k != 0 && cfg.k != study_k) {
    throw ValidationError("simulation: " + study_name(cfg.study) + " fixes k = " +
                          std::to_string(study_k) + ", got " + std::to_string(cfg.k));
  }
  if (cfg.study != Study::sim2 && cfg.scenario != Scenario::s1) {
    throw ValidationError("simulation: misspecification scenarios apply to study 2 only");
  }
  if (cfg.estimators.empty()) throw ValidationError("simulation: no estimators requested");
  if (cfg.parameters.empty()) throw ValidationError("simulation: no parameters requested");
  if (cfg.folds < 1) throw ValidationError("simulation: folds must be at least 1");

  const std::size_t n_est = cfg.estimators.size();
  const std::size_t n_par = cfg.parameters.size();
  const std::size_t n_cells = n_est * n_par;

  struct RepSlot {
    bool failed = false;
    std::string note;
    std::vector<double> me, mae, cov;  // estimator-major, parameter-minor
    std::vector<AuditRecord> audit;
  };
  std::vector<RepSlot> reps(static_cast<std::size_t>(cfg.replicates));

  const std::size_t workers =
      cfg.threads > 0 ? static_cast<std::size_t>(cfg.threads) : default_threads();
  parallel_for(static_cast<std::size_t>(cfg.replicates), workers, [&](std::size_t r) {
    RepSlot& slot = reps[r];
    slot.me.assign(n_cells, kNaN);
    slot.mae.assign(n_cells, kNaN);
    slot.cov.assign(n_cells, kNaN);
    const std::uint64_t rep_seed = derive_seed(cfg.seed, kReplicateStream + r);
    try {
      const SimDraw draw = cfg.study == Study::sim1
                               ? draw_sim1(cfg.n, cfg.m, cfg.sigma, rep_seed)
                               : draw_sim2(cfg.n, cfg.m, cfg.sigma, rep_seed);

      EstimationConfig ecfg;
      ecfg.nuisance = cfg.nuisance;
      ecfg.nuisance.seed = derive_seed(rep_seed, kNuisanceStream);
      ecfg.nuisance.threads = 1;  // replicates are the parallel axis
      ecfg.parameters = cfg.parameters;
      ecfg.seed = rep_seed;
      ecfg.threads = 1;

      for (std::size_t e = 0; e < n_est; ++e) {
        const EstimatorKind kind = cfg.estimators[e];
        ProfileEstimates est;
        if (kind == EstimatorKind::tmle) {
          const FoldAssignment folds =
              make_folds(draw.data, cfg.folds, derive_seed(rep_seed, kFoldStream));
          const OutcomeScale s = scale_outcomes(draw.data, ecfg.scale_delta);
          Dataset scaled = draw.data;
          scaled.y = apply_scale(draw.data.y, s);
          NuisanceConfig ncfg = ecfg.nuisance;
          ncfg.want_mu_bar = contains(cfg.parameters, ParameterTag::phi);
          NuisanceEstimates nu = estimate_nuisances(scaled, folds, ncfg);
          nu = apply_misspecification(nu, cfg.scenario, derive_seed(rep_seed, kMisspecStream));
          est = profile_from_nuisances(draw.data, folds, ecfg, nu, s);
        } else {
          est = glm_benchmark(draw.data, ecfg);
        }

        for (std::size_t p = 0; p < n_par; ++p) {
          const ParameterTag tag = cfg.parameters[p];
          double me = 0.0, mae = 0.0, covered = 0.0;
          int ci_n = 0;
          for (int a = 0; a < cfg.m; ++a) {
            const ProviderProfile& row = est.providers[static_cast<std::size_t>(a)];
            const Estimate& ev = row.estimate(tag);
            const double tv = draw.truth.value(tag, a);
            if (!ev.defined || !std::isfinite(ev.value) || !std::isfinite(tv)) {
              const std::string why = row.notes.empty() ? std::string() : ": " + row.notes.front();
              throw EstimationError("estimator " + estimator_name(kind) + ": " +
                                    parameter_name(tag) + " unavailable for provider '" +
                                    row.label + "'" + why);
            }
            const double err = ev.value - tv;
            me += err;
            mae += std::abs(err);
            if (ev.has_inference) {
              covered += (ev.lo <= tv && tv <= ev.hi) ? 1.0 : 0.0;
              ++ci_n;
            }
            if (cfg.keep_audit) {
              AuditRecord rec;
              rec.replicate = static_cast<int>(r);
              rec.estimator = kind;
              rec.parameter = tag;
              rec.provider = row.label;
              rec.estimate = ev.value;
              rec.truth = tv;
              rec.lo = ev.lo;
              rec.hi = ev.hi;
              slot.audit.push_back(rec);
            }
          }
          const std::size_t idx = e * n_par + p;
          slot.me[idx] = me / cfg.m;
          slot.mae[idx] = mae / cfg.m;
          slot.cov[idx] = ci_n > 0 ? covered / ci_n : kNaN;
        }
      }
    } catch (const std::exception& ex) {
      slot.failed = true;
      slot.note = ex.what();
      slot.audit.clear();
    }
  });

  SimResult res;
  std::vector<double> sum_me(n_cells, 0.0), sum_mae(n_cells, 0.0), sum_cov(n_cells, 0.0);
  std::vector<int> cov_count(n_cells, 0);
  int ok = 0;
  for (RepSlot& slot : reps) {
    if (slot.failed) {
      ++res.failures;
      res.failure_notes.push_back(slot.note);
      continue;
    }
    ++ok;
    for (std::size_t idx = 0; idx < n_cells; ++idx) {
      sum_me[idx] += slot.me[idx];
      sum_mae[idx] += slot.mae[idx];
      if (std::isfinite(slot.cov[idx])) {
        sum_cov[idx] += slot.cov[idx];
        ++cov_count[idx];
      }
    }
    res.audit.insert(res.audit.end(), std::make_move_iterator(slot.audit.begin()),
                     std::make_move_iterator(slot.audit.end()));
  }
  if (ok == 0) {
    throw EstimationError("simulation: every replicate failed; first failure: " +
                          res.failure_notes.front());
  }
  res.replicates = ok;
  res.cells.reserve(n_cells);
  for (std::size_t e = 0; e < n_est; ++e) {
    for (std::size_t p = 0; p < n_par; ++p) {
      const std::size_t idx = e * n_par + p;
      SimCell c;
      c.estimator = cfg.estimators[e];
      c.parameter = cfg.parameters[p];
      c.me = sum_me[idx] / ok;
      c.mae = sum_mae[idx] / ok;
      c.coverage = cov_count[idx] > 0 ? sum_cov[idx] / cov_count[idx] : kNaN;
      res.cells.push_back(c);
    }
  }
  return res;
}

}  // namespace targprof
