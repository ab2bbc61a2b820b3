#include "targprof/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "targprof/csv.hpp"
#include "targprof/dataset.hpp"
#include "targprof/errors.hpp"
#include "targprof/oracle.hpp"
#include "targprof/reports.hpp"
#include "targprof/rng.hpp"

namespace targprof {

namespace {

// Substreams of the run seed, so fold assignment and learner seeding are
// independent draws and adding one does not perturb the other.
constexpr std::uint64_t kFoldStream = 0x464f4c44;      // fold assignment
constexpr std::uint64_t kNuisanceStream = 0x4e554953;  // learner seeding

std::string output_path(const std::string& outdir, const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path dir = outdir.empty() ? fs::path(".") : fs::path(outdir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw ValidationError("output: cannot create directory '" + dir.string() +
                          "': " + ec.message());
  }
  return (dir / name).string();
}

void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("output: cannot open '" + path + "' for writing");
  out << body;
  if (!out) throw ValidationError("output: failed writing '" + path + "'");
}

std::string quoted_list(const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i > 0) out += ", ";
    out += "'" + names[i] + "'";
  }
  return out;
}

}  // namespace

EstimateOutputs cmd_estimate(const RunConfig& cfg) {
  if (cfg.input.empty()) throw ValidationError("estimate: no input file given");

  EstimateOutputs out;
  const Dataset loaded = load_csv(cfg.input, cfg.load);

  Dataset d = loaded;
  if (cfg.min_volume > 0) {
    MinVolumeFilter filtered = filter_min_volume(loaded, cfg.min_volume);
    if (!filtered.dropped_labels.empty()) {
      out.warnings.push_back("dropped " + std::to_string(filtered.dropped_rows) + " row(s) from " +
                             std::to_string(filtered.dropped_labels.size()) +
                             " provider(s) below the minimum volume: " +
                             quoted_list(filtered.dropped_labels));
    }
    if (filtered.data.n() == 0) {
      throw EstimationError("estimate: no rows remain after the minimum volume filter");
    }
    d = std::move(filtered.data);
  }

  if (cfg.folds == 1) {
    out.warnings.push_back(
        "folds = 1 disables cross-fitting; the nuisance fits are evaluated in sample, which is "
        "only appropriate for debugging");
  }

  const FoldAssignment folds = make_folds(d, cfg.folds, derive_seed(cfg.seed, kFoldStream));
  for (const std::string& w : folds.warnings) out.warnings.push_back(w);

  EstimationConfig ecfg;
  ecfg.nuisance.propensity = cfg.propensity;
  ecfg.nuisance.outcome = cfg.outcome;
  ecfg.nuisance.truncation_bound = cfg.truncation;
  ecfg.nuisance.seed = derive_seed(cfg.seed, kNuisanceStream);
  ecfg.parameters = cfg.parameters;
  ecfg.level = cfg.level;
  ecfg.scale_delta = cfg.scale_delta;
  ecfg.positivity_threshold = cfg.positivity_threshold;
  ecfg.seed = cfg.seed;
  ecfg.threads = cfg.threads;

  ProfileEstimates est = compute_all(d, folds, ecfg);
  est.config_echo = render_run_config(cfg);
  for (const std::string& w : est.warnings) out.warnings.push_back(w);

  const bool direct_requested =
      std::find(cfg.parameters.begin(), cfg.parameters.end(), ParameterTag::phi) !=
      cfg.parameters.end();
  if (direct_requested && est.positivity.any_violation) {
    std::vector<std::string> flagged;
    for (const ProviderPositivity& p : est.positivity.providers) {
      if (p.flag == PositivityFlag::practical_violation) flagged.push_back(p.label);
    }
    if (cfg.force_direct) {
      out.warnings.push_back(
          "practical positivity violation for provider(s) " + quoted_list(flagged) +
          "; the direct parameter is reported anyway because force_direct is set");
    } else {
      throw EstimationError(
          "estimate: practical positivity violation for provider(s) " + quoted_list(flagged) +
          "; the direct parameter is unreliable here (set force_direct to report it anyway)");
    }
  }

  out.estimates_path = output_path(cfg.outdir, "estimates.csv");
  out.positivity_path = output_path(cfg.outdir, "positivity.csv");
  write_csv_file(out.estimates_path, estimates_table(est));
  write_csv_file(out.positivity_path, positivity_table(est.positivity));
  out.estimates = std::move(est);
  return out;
}

FunnelOutputs cmd_funnel(const FunnelOptions& opt) {
  if (opt.estimates_path.empty()) throw ValidationError("funnel: no estimates file given");
  if (opt.out_csv.empty()) throw ValidationError("funnel: no output file given");
  if (opt.levels.empty()) throw ValidationError("funnel: no control-limit levels given");
  for (double lv : opt.levels) {
    if (!(lv > 0.0 && lv < 1.0)) {
      throw ValidationError("funnel: control-limit levels must lie strictly between 0 and 1");
    }
  }

  const CsvTable estimates = read_csv_file(opt.estimates_path);
  FunnelInput input = funnel_input(estimates);

  FunnelOutputs out;
  for (const std::string& label : input.skipped) {
    out.warnings.push_back("provider '" + label +
                           "' lacks a usable ratio estimate or se; left out of the funnel");
  }
  if (input.labels.empty()) {
    throw ValidationError("funnel: no provider has both a ratio estimate and a standard error");
  }

  out.table = funnel(input.labels, input.smr, input.variance, opt.levels, opt.log_scale);
  for (const std::string& w : out.table.warnings) out.warnings.push_back(w);

  write_csv_file(opt.out_csv, funnel_csv(out.table));
  if (!opt.out_svg.empty()) write_text_file(opt.out_svg, render_funnel_svg(out.table));
  return out;
}

SimulateOutputs cmd_simulate(const SimulateOptions& opt) {
  SimConfig cfg = opt.sim;
  cfg.keep_audit = opt.audit;

  SimulateOutputs out;
  out.result = run_study(cfg);
  if (out.result.failures > 0) {
    out.warnings.push_back("simulation: " + std::to_string(out.result.failures) +
                           " replicate(s) failed and were excluded; first: " +
                           out.result.failure_notes.front());
  }

  out.table_path = output_path(opt.outdir, "simulation.csv");
  write_csv_file(out.table_path, simulation_table(cfg, out.result));
  if (opt.audit) {
    out.audit_path = output_path(opt.outdir, "audit.csv");
    write_csv_file(out.audit_path, audit_table(out.result));
  }
  return out;
}

OracleReport cmd_oracle_check(const OracleOptions& opt) {
  if (opt.laws < 1) throw ValidationError("oracle check: number of law pairs must be at least 1");
  if (!(opt.tolerance >= 0.0)) {
    throw ValidationError("oracle check: tolerance must be nonnegative");
  }

  OracleReport rep;
  rep.laws = opt.laws;
  Rng rng(opt.seed);
  for (int i = 0; i < opt.laws; ++i) {
    const int n_w = 2 + static_cast<int>(rng.uniform_int(2));
    const int m = 2 + static_cast<int>(rng.uniform_int(2));
    const DiscreteLaw p = random_law(rng, n_w, m);
    const DiscreteLaw p0 = random_law(rng, n_w, m);
    const VonMisesReport vm = von_mises_check(p, p0);
    for (int a = 0; a < m; ++a) {
      rep.max_phi = std::max(rep.max_phi, std::abs(vm.residual_phi[a]));
      rep.max_psi1 = std::max(rep.max_psi1, std::abs(vm.residual_psi1[a]));
      rep.max_psi2 = std::max(rep.max_psi2, std::abs(vm.residual_psi2[a]));
    }
  }
  rep.pass = rep.max_phi <= opt.tolerance && rep.max_psi1 <= opt.tolerance &&
             rep.max_psi2 <= opt.tolerance;

  char line[128];
  std::snprintf(line, sizeof(line), "phi:  max |residual| = %.3e\n", rep.max_phi);
  rep.text += line;
  std::snprintf(line, sizeof(line), "psi1: max |residual| = %.3e\n", rep.max_psi1);
  rep.text += line;
  std::snprintf(line, sizeof(line), "psi2: max |residual| = %.3e\n", rep.max_psi2);
  rep.text += line;
  std::snprintf(line, sizeof(line), "%d law pair(s), tolerance %.3e: %s\n", rep.laws,
                opt.tolerance, rep.pass ? "ok" : "FAILED");
  rep.text += line;
  return rep;
}

}  // namespace targprof
