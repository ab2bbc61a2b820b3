#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "targprof/dataset.hpp"
#include "targprof/eif.hpp"
#include "targprof/learners.hpp"
#include "targprof/simulation.hpp"

namespace targprof {

// Fully-resolved settings for one estimation run: built-in defaults, overlaid
// by an optional config file, overlaid by command-line flags.
struct RunConfig {
  std::string input;
  LoadConfig load;
  std::vector<ParameterTag> parameters = {ParameterTag::phi, ParameterTag::psi1,
                                          ParameterTag::psi2, ParameterTag::er,
                                          ParameterTag::smr};
  int folds = 5;
  std::uint64_t seed = 1;
  double truncation = 1e-3;
  int min_volume = 0;
  double level = 0.95;
  double scale_delta = 0.005;
  double positivity_threshold = 0.01;
  bool force_direct = false;
  int threads = 0;  // 0 = library default
  std::string outdir = ".";
  EnsembleSpec propensity;
  EnsembleSpec outcome;

  RunConfig();
};

EnsembleSpec default_propensity_ensemble();
EnsembleSpec default_outcome_ensemble();

// One learner expression: a bare name (mean, glm) or a name with keyword
// arguments, e.g. glm_ridge(lambda=0.01), knn(k=25),
// gbt(trees=200,depth=2,lr=0.05,min_leaf=50,bins=256). Accepts exactly the
// vocabulary that LearnerSpec::describe() emits, so specs round-trip.
LearnerSpec parse_learner_spec(const std::string& text);

// comma-separated plain names, trimmed, empties dropped
std::vector<std::string> split_names(const std::string& value);

// comma-separated learner expressions; commas inside parentheses belong to
// the learner's argument list
std::vector<LearnerSpec> parse_learner_list(const std::string& text);

std::vector<ParameterTag> parse_parameters(const std::string& text);
Study parse_study(const std::string& text);
Scenario parse_scenario(const std::string& text);
std::vector<EstimatorKind> parse_estimators(const std::string& text);

// Config file body: one `key = value` pair per line, '#' comments, blank
// lines ignored, with optional [propensity] and [outcome] sections holding
// `learners` and `stacking_folds`. Unknown keys are rejected.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Echo of the fully-resolved configuration in config-file syntax; feeding the
// output back through parse_run_config reproduces the same configuration.
std::string render_run_config(const RunConfig& cfg);

}  // namespace targprof
