#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "targprof/config.hpp"
#include "targprof/eif.hpp"
#include "targprof/simulation.hpp"
#include "targprof/targeting.hpp"

namespace targprof {

// Command bodies for the CLI. Each one does the full job of its subcommand
// (validation, computation, file output) and reports problems by throwing:
// ValidationError for bad input or configuration, EstimationError when the
// data defeats the estimator. The binary entry point maps those to exit
// codes and prints the returned warnings to stderr.

struct EstimateOutputs {
  std::string estimates_path;
  std::string positivity_path;
  ProfileEstimates estimates;
  std::vector<std::string> warnings;
};

// Load, filter, estimate, write estimates.csv and positivity.csv. When the
// direct parameter is requested and any provider shows a practical positivity
// violation, the run is refused unless force_direct is set; the override
// keeps the violation visible in the flag and notes columns.
EstimateOutputs cmd_estimate(const RunConfig& cfg);

struct FunnelOptions {
  std::string estimates_path;
  std::vector<double> levels = {0.95, 0.99, 0.999};
  bool log_scale = false;
  std::string out_csv = "funnel.csv";
  std::string out_svg;  // empty skips the plot
};

struct FunnelOutputs {
  FunnelTable table;
  std::vector<std::string> warnings;
};

// Read a previously written estimates table, build funnel points and control
// limits around the ratio parameter, and serialize them.
FunnelOutputs cmd_funnel(const FunnelOptions& opt);

struct SimulateOptions {
  SimConfig sim;
  std::string outdir = ".";
  bool audit = false;
};

struct SimulateOutputs {
  std::string table_path;
  std::string audit_path;  // empty unless the audit table was requested
  SimResult result;
  std::vector<std::string> warnings;
};

SimulateOutputs cmd_simulate(const SimulateOptions& opt);

struct OracleOptions {
  int laws = 200;
  std::uint64_t seed = 1;
  double tolerance = 1e-10;
};

struct OracleReport {
  double max_phi = 0.0;
  double max_psi1 = 0.0;
  double max_psi2 = 0.0;
  int laws = 0;
  bool pass = false;
  std::string text;  // per-identity summary, one line each
};

// Expansion self-check over random law pairs: for each identity the largest
// absolute second-order residual must stay within tolerance.
OracleReport cmd_oracle_check(const OracleOptions& opt);

}  // namespace targprof
