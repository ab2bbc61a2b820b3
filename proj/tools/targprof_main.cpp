#include <CLI11.hpp>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "targprof/commands.hpp"
#include "targprof/config.hpp"
#include "targprof/errors.hpp"

namespace {

using namespace targprof;

void print_warnings(const std::vector<std::string>& warnings) {
  for (const std::string& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
}

std::vector<double> parse_levels(const std::string& text) {
  std::vector<double> out;
  std::string::size_type start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const std::string piece =
        text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(piece, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != piece.size()) {
      throw ValidationError("funnel: cannot parse level '" + piece + "'");
    }
    out.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

// Flag values for the estimate subcommand, kept as raw strings so that a
// config file can be loaded first and only explicitly passed flags override
// it afterwards.
struct EstimateArgs {
  std::string config_path;
  std::string input;
  std::string outcome_col, provider_col, covariates, outcome_kind;
  std::string parameters, propensity, outcome_learners;
  int folds = 0, min_volume = 0, threads = 0;
  int propensity_stacking = 0, outcome_stacking = 0;
  std::uint64_t seed = 0;
  double level = 0.0, truncation = 0.0, delta = 0.0, positivity_threshold = 0.0;
  bool force_direct = false;
  std::string outdir;
  bool print_config = false;
};

void add_estimate_flags(CLI::App* sub, EstimateArgs& a) {
  sub->add_option("--config", a.config_path, "configuration file; flags override its values");
  sub->add_option("-i,--input", a.input, "input CSV");
  sub->add_option("--outcome-col", a.outcome_col, "outcome column name");
  sub->add_option("--provider-col", a.provider_col, "provider column name");
  sub->add_option("--covariates", a.covariates, "comma-separated covariate columns");
  sub->add_option("--outcome-kind", a.outcome_kind, "auto, binary or continuous");
  sub->add_option("--parameters", a.parameters, "comma-separated subset of phi,psi1,psi2,er,smr");
  sub->add_option("--folds", a.folds, "cross-fitting folds (1 disables cross-fitting)");
  sub->add_option("--seed", a.seed, "run seed");
  sub->add_option("--level", a.level, "confidence level");
  sub->add_option("--truncation", a.truncation, "propensity truncation bound");
  sub->add_option("--min-volume", a.min_volume, "drop providers with fewer rows than this");
  sub->add_option("--delta", a.delta, "outcome scaling margin");
  sub->add_option("--positivity-threshold", a.positivity_threshold,
                  "propensity level that counts as a practical violation");
  sub->add_flag("--force-direct", a.force_direct,
                "report the direct parameter despite positivity violations");
  sub->add_option("--threads", a.threads, "worker threads (0 = all cores)");
  sub->add_option("-o,--outdir", a.outdir, "output directory");
  sub->add_option("--propensity", a.propensity, "propensity learner list");
  sub->add_option("--outcome-learners", a.outcome_learners, "outcome learner list");
  sub->add_option("--propensity-stacking-folds", a.propensity_stacking,
                  "stacking folds for the propensity ensemble");
  sub->add_option("--outcome-stacking-folds", a.outcome_stacking,
                  "stacking folds for the outcome ensemble");
  sub->add_flag("--print-config", a.print_config,
                "print the resolved configuration and exit without estimating");
}

RunConfig resolve_run_config(const CLI::App* sub, const EstimateArgs& a) {
  RunConfig cfg;
  if (sub->count("--config") > 0) cfg = load_run_config(a.config_path);
  if (sub->count("--input") > 0) cfg.input = a.input;
  if (sub->count("--outcome-col") > 0) cfg.load.outcome_col = a.outcome_col;
  if (sub->count("--provider-col") > 0) cfg.load.provider_col = a.provider_col;
  if (sub->count("--covariates") > 0) cfg.load.covariate_cols = split_names(a.covariates);
  if (sub->count("--outcome-kind") > 0) cfg.load.outcome_kind = a.outcome_kind;
  if (sub->count("--parameters") > 0) cfg.parameters = parse_parameters(a.parameters);
  if (sub->count("--folds") > 0) cfg.folds = a.folds;
  if (sub->count("--seed") > 0) cfg.seed = a.seed;
  if (sub->count("--level") > 0) cfg.level = a.level;
  if (sub->count("--truncation") > 0) cfg.truncation = a.truncation;
  if (sub->count("--min-volume") > 0) cfg.min_volume = a.min_volume;
  if (sub->count("--delta") > 0) cfg.scale_delta = a.delta;
  if (sub->count("--positivity-threshold") > 0) {
    cfg.positivity_threshold = a.positivity_threshold;
  }
  if (sub->count("--force-direct") > 0) cfg.force_direct = true;
  if (sub->count("--threads") > 0) cfg.threads = a.threads;
  if (sub->count("--outdir") > 0) cfg.outdir = a.outdir;
  if (sub->count("--propensity") > 0) cfg.propensity.members = parse_learner_list(a.propensity);
  if (sub->count("--outcome-learners") > 0) {
    cfg.outcome.members = parse_learner_list(a.outcome_learners);
  }
  if (sub->count("--propensity-stacking-folds") > 0) {
    cfg.propensity.stacking_folds = a.propensity_stacking;
  }
  if (sub->count("--outcome-stacking-folds") > 0) cfg.outcome.stacking_folds = a.outcome_stacking;
  return cfg;
}

int run_estimate(const CLI::App* sub, const EstimateArgs& a) {
  const RunConfig cfg = resolve_run_config(sub, a);
  if (a.print_config) {
    std::fputs(render_run_config(cfg).c_str(), stdout);
    return 0;
  }
  const EstimateOutputs out = cmd_estimate(cfg);
  print_warnings(out.warnings);
  std::printf("wrote estimates to %s\n", out.estimates_path.c_str());
  std::printf("wrote positivity summary to %s\n", out.positivity_path.c_str());
  return 0;
}

struct SimulateArgs {
  std::string study = "sim1";
  long long n = -1;
  int m = -1;
  int k = 0;
  double sigma = 1.0;
  int replicates = 100;
  std::uint64_t seed = 1;
  std::string scenario = "s1";
  std::string estimators = "tmle,glm";
  std::string parameters;
  int folds = 5;
  double truncation = 1e-3;
  std::string propensity, outcome_learners;
  std::string outdir = ".";
  bool audit = false;
  int threads = 0;
  bool paper_scale = false;
};

void add_simulate_flags(CLI::App* sub, SimulateArgs& a) {
  sub->add_option("--study", a.study, "sim1 or sim2");
  sub->add_option("--N", a.n, "observations per replicate (default depends on the study)");
  sub->add_option("--m", a.m, "number of providers (default depends on the study)");
  sub->add_option("--k", a.k, "number of covariates (0 = study default)");
  sub->add_option("--sigma", a.sigma, "outcome noise standard deviation");
  sub->add_option("--replicates", a.replicates, "number of replicates");
  sub->add_option("--seed", a.seed, "study seed");
  sub->add_option("--scenario", a.scenario, "nuisance misspecification scenario s1..s4");
  sub->add_option("--estimators", a.estimators, "comma-separated subset of tmle,glm");
  sub->add_option("--parameters", a.parameters, "comma-separated subset of phi,psi1,psi2,er,smr");
  sub->add_option("--folds", a.folds, "cross-fitting folds");
  sub->add_option("--truncation", a.truncation, "propensity truncation bound");
  sub->add_option("--propensity", a.propensity, "propensity learner list");
  sub->add_option("--outcome-learners", a.outcome_learners, "outcome learner list");
  sub->add_option("-o,--outdir", a.outdir, "output directory");
  sub->add_flag("--audit", a.audit, "also write the per-replicate audit table");
  sub->add_option("--threads", a.threads, "worker threads (0 = all cores)");
  sub->add_flag("--paper-scale", a.paper_scale,
                "allow the full-size configuration of study 2 (slow)");
}

int run_simulate(const SimulateArgs& a) {
  SimulateOptions opt;
  opt.sim.study = parse_study(a.study);
  opt.sim.scenario = parse_scenario(a.scenario);
  opt.sim.estimators = parse_estimators(a.estimators);
  if (!a.parameters.empty()) opt.sim.parameters = parse_parameters(a.parameters);

  const bool sim2 = opt.sim.study == Study::sim2;
  opt.sim.m = a.m >= 0 ? a.m : (sim2 ? (a.paper_scale ? 75 : 20) : 10);
  opt.sim.n = a.n >= 0 ? static_cast<int>(a.n) : (sim2 ? (a.paper_scale ? 50000 : 5000) : 1000);
  if (sim2 && !a.paper_scale && (opt.sim.n > 20000 || opt.sim.m > 20)) {
    throw ValidationError(
        "simulate: study 2 with N > 20000 or m > 20 takes hours; pass --paper-scale to run the "
        "full-size configuration anyway");
  }

  opt.sim.k = a.k;
  opt.sim.sigma = a.sigma;
  opt.sim.replicates = a.replicates;
  opt.sim.seed = a.seed;
  opt.sim.folds = a.folds;
  opt.sim.threads = a.threads;
  opt.sim.nuisance.truncation_bound = a.truncation;
  opt.sim.nuisance.propensity = default_propensity_ensemble();
  opt.sim.nuisance.outcome = default_outcome_ensemble();
  if (!a.propensity.empty()) {
    opt.sim.nuisance.propensity.members = parse_learner_list(a.propensity);
  }
  if (!a.outcome_learners.empty()) {
    opt.sim.nuisance.outcome.members = parse_learner_list(a.outcome_learners);
  }
  opt.outdir = a.outdir;
  opt.audit = a.audit;

  const SimulateOutputs out = cmd_simulate(opt);
  print_warnings(out.warnings);
  std::printf("wrote study results to %s\n", out.table_path.c_str());
  if (!out.audit_path.empty()) std::printf("wrote audit table to %s\n", out.audit_path.c_str());
  return 0;
}

int run_funnel(const FunnelOptions& opt) {
  const FunnelOutputs out = cmd_funnel(opt);
  print_warnings(out.warnings);
  std::printf("wrote funnel to %s\n", opt.out_csv.c_str());
  if (!opt.out_svg.empty()) std::printf("wrote funnel plot to %s\n", opt.out_svg.c_str());
  return 0;
}

int run_oracle_check(const OracleOptions& opt) {
  const OracleReport rep = cmd_oracle_check(opt);
  std::fputs(rep.text.c_str(), stdout);
  return rep.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"targeted estimation of provider profiles"};
  app.require_subcommand(1);

  EstimateArgs est_args;
  CLI::App* est = app.add_subcommand("estimate", "estimate provider profiles from a CSV");
  add_estimate_flags(est, est_args);

  SimulateArgs sim_args;
  CLI::App* sim = app.add_subcommand("simulate", "run a calibration study");
  add_simulate_flags(sim, sim_args);

  FunnelOptions funnel_opt;
  std::string levels_text = "0.95,0.99,0.999";
  CLI::App* fun = app.add_subcommand("funnel", "funnel plot data from an estimates table");
  fun->add_option("--estimates", funnel_opt.estimates_path, "estimates CSV written by 'estimate'")
      ->required();
  fun->add_option("--out-csv", funnel_opt.out_csv, "funnel table output path");
  fun->add_option("--out-svg", funnel_opt.out_svg, "optional SVG plot output path");
  fun->add_option("--levels", levels_text, "comma-separated control-limit levels");
  fun->add_flag("--log-scale", funnel_opt.log_scale, "control limits on the log-ratio scale");

  OracleOptions oracle_opt;
  CLI::App* orc = app.add_subcommand("oracle-check", "second-order expansion self-check");
  orc->add_option("--laws", oracle_opt.laws, "number of random law pairs");
  orc->add_option("--seed", oracle_opt.seed, "law generator seed");
  orc->add_option("--tolerance", oracle_opt.tolerance, "largest acceptable residual");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(est)) return run_estimate(est, est_args);
    if (app.got_subcommand(sim)) return run_simulate(sim_args);
    if (app.got_subcommand(fun)) {
      funnel_opt.levels = parse_levels(levels_text);
      return run_funnel(funnel_opt);
    }
    if (app.got_subcommand(orc)) return run_oracle_check(oracle_opt);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
