#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "targprof/csv.hpp"
#include "targprof/eif.hpp"
#include "targprof/nuisance.hpp"
#include "targprof/simulation.hpp"
#include "targprof/targeting.hpp"

namespace targprof {

// One row per provider: label, observation count, then estimate/se/ci_lo/
// ci_hi for each requested parameter, the positivity flag, and the provider's
// notes joined with "; ". Cells for undefined estimates are empty, as are
// interval cells of estimates reported without inference.
CsvTable estimates_table(const ProfileEstimates& est);

CsvTable positivity_table(const PositivityReport& rep);

// Tidy funnel serialization: "point" rows carry label, precision, value and
// classification; "limit" rows carry level, precision, lower and upper.
CsvTable funnel_csv(const FunnelTable& table);

struct FunnelInput {
  std::vector<std::string> labels;
  Eigen::VectorXd smr;
  Eigen::VectorXd variance;
  std::vector<std::string> skipped;  // providers lacking usable ratio or se cells
};

// Pulls provider, smr_estimate and smr_se out of an emitted estimates table;
// missing columns are a validation error naming what is absent.
FunnelInput funnel_input(const CsvTable& estimates);

CsvTable simulation_table(const SimConfig& cfg, const SimResult& res);
CsvTable audit_table(const SimResult& res);

}  // namespace targprof
