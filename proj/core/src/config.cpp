#include "targprof/config.hpp"

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "targprof/csv.hpp"
#include "targprof/errors.hpp"

namespace targprof {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

long long parse_int(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(value, &pos);
  } catch (const std::exception&) {
    throw ValidationError("config: " + key + " expects an integer, got '" + value + "'");
  }
  if (pos != value.size()) {
    throw ValidationError("config: " + key + " expects an integer, got '" + value + "'");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    throw ValidationError("config: " + key + " expects a nonnegative integer, got '" + value + "'");
  }
  if (pos != value.size() || value.find('-') != std::string::npos) {
    throw ValidationError("config: " + key + " expects a nonnegative integer, got '" + value + "'");
  }
  return v;
}

double parse_real(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    throw ValidationError("config: " + key + " expects a number, got '" + value + "'");
  }
  if (pos != value.size()) {
    throw ValidationError("config: " + key + " expects a number, got '" + value + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "yes" || value == "1") return true;
  if (value == "false" || value == "no" || value == "0") return false;
  throw ValidationError("config: " + key + " expects true or false, got '" + value + "'");
}

// splits a learner list on commas that sit outside parentheses
std::vector<std::string> split_top_level(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  for (char c : text) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (c == ',' && depth == 0) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

void reject_arguments(const std::string& name, const std::string& args) {
  if (!trim(args).empty()) {
    throw ValidationError("learner spec: '" + name + "' takes no arguments");
  }
}

}  // namespace

std::vector<std::string> split_names(const std::string& value) {
  std::vector<std::string> out;
  for (const std::string& piece : split(value, ',')) {
    const std::string name = trim(piece);
    if (!name.empty()) out.push_back(name);
  }
  return out;
}

EnsembleSpec default_propensity_ensemble() {
  LearnerSpec glm;
  glm.kind = LearnerKind::glm;
  LearnerSpec gbt;
  gbt.kind = LearnerKind::gbt;
  EnsembleSpec e;
  e.members = {glm, gbt};
  return e;
}

EnsembleSpec default_outcome_ensemble() {
  LearnerSpec mean;
  mean.kind = LearnerKind::mean;
  LearnerSpec glm;
  glm.kind = LearnerKind::glm;
  LearnerSpec gbt;
  gbt.kind = LearnerKind::gbt;
  EnsembleSpec e;
  e.members = {mean, glm, gbt};
  return e;
}

RunConfig::RunConfig()
    : propensity(default_propensity_ensemble()), outcome(default_outcome_ensemble()) {}

LearnerSpec parse_learner_spec(const std::string& text) {
  const std::string t = trim(text);
  if (t.empty()) throw ValidationError("learner spec: empty expression");

  std::string name = t;
  std::string args;
  const auto paren = t.find('(');
  if (paren != std::string::npos) {
    if (t.back() != ')') throw ValidationError("learner spec: missing ')' in '" + t + "'");
    name = trim(t.substr(0, paren));
    args = t.substr(paren + 1, t.size() - paren - 2);
  }

  LearnerSpec s;
  if (name == "mean") {
    s.kind = LearnerKind::mean;
    reject_arguments(name, args);
    return s;
  }
  if (name == "glm") {
    s.kind = LearnerKind::glm;
    reject_arguments(name, args);
    return s;
  }
  if (name == "glm_ridge" || name == "ridge") {
    s.kind = LearnerKind::glm_ridge;
  } else if (name == "knn") {
    s.kind = LearnerKind::knn;
  } else if (name == "gbt") {
    s.kind = LearnerKind::gbt;
  } else {
    throw ValidationError("learner spec: unknown learner '" + name + "'");
  }

  for (const std::string& piece : split(args, ',')) {
    const std::string arg = trim(piece);
    if (arg.empty()) continue;
    const auto eq = arg.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("learner spec: expected key=value, got '" + arg + "'");
    }
    const std::string key = trim(arg.substr(0, eq));
    const std::string value = trim(arg.substr(eq + 1));
    const std::string qual = name + "." + key;
    if (s.kind == LearnerKind::glm_ridge && key == "lambda") {
      s.lambda = parse_real(qual, value);
      if (!(s.lambda >= 0.0)) throw ValidationError("learner spec: lambda must be nonnegative");
    } else if (s.kind == LearnerKind::knn && (key == "k" || key == "neighbors")) {
      s.neighbors = static_cast<int>(parse_int(qual, value));
      if (s.neighbors < 1) throw ValidationError("learner spec: knn needs at least one neighbor");
    } else if (s.kind == LearnerKind::gbt && key == "trees") {
      s.trees = static_cast<int>(parse_int(qual, value));
      if (s.trees < 1) throw ValidationError("learner spec: gbt needs at least one tree");
    } else if (s.kind == LearnerKind::gbt && key == "depth") {
      s.depth = static_cast<int>(parse_int(qual, value));
      if (s.depth < 1) throw ValidationError("learner spec: gbt depth must be at least 1");
    } else if (s.kind == LearnerKind::gbt &&
               (key == "lr" || key == "rate" || key == "learning_rate")) {
      s.learning_rate = parse_real(qual, value);
      if (!(s.learning_rate > 0.0)) {
        throw ValidationError("learner spec: gbt learning rate must be positive");
      }
    } else if (s.kind == LearnerKind::gbt && key == "min_leaf") {
      s.min_leaf = static_cast<int>(parse_int(qual, value));
      if (s.min_leaf < 1) throw ValidationError("learner spec: gbt min_leaf must be at least 1");
    } else if (s.kind == LearnerKind::gbt && (key == "bins" || key == "max_bins")) {
      s.max_bins = static_cast<int>(parse_int(qual, value));
      if (s.max_bins < 2) throw ValidationError("learner spec: gbt needs at least 2 bins");
    } else {
      throw ValidationError("learner spec: unknown argument '" + key + "' for '" + name + "'");
    }
  }
  return s;
}

std::vector<LearnerSpec> parse_learner_list(const std::string& text) {
  std::vector<LearnerSpec> out;
  for (const std::string& piece : split_top_level(text)) {
    if (trim(piece).empty()) continue;
    out.push_back(parse_learner_spec(piece));
  }
  if (out.empty()) throw ValidationError("learner list: no learners given");
  return out;
}

std::vector<ParameterTag> parse_parameters(const std::string& text) {
  std::vector<ParameterTag> out;
  for (const std::string& name : split_names(text)) {
    ParameterTag tag;
    if (name == "phi") {
      tag = ParameterTag::phi;
    } else if (name == "psi1") {
      tag = ParameterTag::psi1;
    } else if (name == "psi2") {
      tag = ParameterTag::psi2;
    } else if (name == "er") {
      tag = ParameterTag::er;
    } else if (name == "smr") {
      tag = ParameterTag::smr;
    } else {
      throw ValidationError("config: unknown parameter '" + name + "'");
    }
    if (std::find(out.begin(), out.end(), tag) != out.end()) {
      throw ValidationError("config: parameter '" + name + "' listed twice");
    }
    out.push_back(tag);
  }
  if (out.empty()) throw ValidationError("config: parameter list is empty");
  return out;
}

Study parse_study(const std::string& text) {
  if (text == "sim1") return Study::sim1;
  if (text == "sim2") return Study::sim2;
  throw ValidationError("config: unknown study '" + text + "' (expected sim1 or sim2)");
}

Scenario parse_scenario(const std::string& text) {
  if (text == "s1") return Scenario::s1;
  if (text == "s2") return Scenario::s2;
  if (text == "s3") return Scenario::s3;
  if (text == "s4") return Scenario::s4;
  throw ValidationError("config: unknown scenario '" + text + "' (expected s1..s4)");
}

std::vector<EstimatorKind> parse_estimators(const std::string& text) {
  std::vector<EstimatorKind> out;
  for (const std::string& name : split_names(text)) {
    EstimatorKind kind;
    if (name == "tmle") {
      kind = EstimatorKind::tmle;
    } else if (name == "glm") {
      kind = EstimatorKind::glm;
    } else {
      throw ValidationError("config: unknown estimator '" + name + "' (expected tmle or glm)");
    }
    if (std::find(out.begin(), out.end(), kind) != out.end()) {
      throw ValidationError("config: estimator '" + name + "' listed twice");
    }
    out.push_back(kind);
  }
  if (out.empty()) throw ValidationError("config: estimator list is empty");
  return out;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  auto fail = [&lineno](const std::string& msg) {
    throw ValidationError(msg + " (line " + std::to_string(lineno) + ")");
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') fail("config: malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (section != "propensity" && section != "outcome") {
        fail("config: unknown section [" + section + "]");
      }
      continue;
    }

    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("config: expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    try {
      if (!section.empty()) {
        EnsembleSpec& ens = section == "propensity" ? cfg.propensity : cfg.outcome;
        if (key == "learners") {
          ens.members = parse_learner_list(value);
        } else if (key == "stacking_folds") {
          ens.stacking_folds = static_cast<int>(parse_int(key, value));
          if (ens.stacking_folds < 2) {
            throw ValidationError("config: stacking_folds must be at least 2");
          }
        } else {
          throw ValidationError("config: unknown key '" + key + "' in section [" + section + "]");
        }
      } else if (key == "input") {
        cfg.input = value;
      } else if (key == "outcome_col") {
        cfg.load.outcome_col = value;
      } else if (key == "provider_col") {
        cfg.load.provider_col = value;
      } else if (key == "covariates") {
        cfg.load.covariate_cols = split_names(value);
      } else if (key == "outcome_kind") {
        if (value != "auto" && value != "binary" && value != "continuous") {
          throw ValidationError("config: outcome_kind must be auto, binary or continuous");
        }
        cfg.load.outcome_kind = value;
      } else if (key == "parameters") {
        cfg.parameters = parse_parameters(value);
      } else if (key == "folds") {
        cfg.folds = static_cast<int>(parse_int(key, value));
        if (cfg.folds < 1) throw ValidationError("config: folds must be at least 1");
      } else if (key == "seed") {
        cfg.seed = parse_u64(key, value);
      } else if (key == "level") {
        cfg.level = parse_real(key, value);
        if (!(cfg.level > 0.0 && cfg.level < 1.0)) {
          throw ValidationError("config: level must lie strictly between 0 and 1");
        }
      } else if (key == "truncation") {
        cfg.truncation = parse_real(key, value);
        if (!(cfg.truncation >= 0.0 && cfg.truncation < 0.5)) {
          throw ValidationError("config: truncation must lie in [0, 0.5)");
        }
      } else if (key == "min_volume") {
        cfg.min_volume = static_cast<int>(parse_int(key, value));
        if (cfg.min_volume < 0) throw ValidationError("config: min_volume must be nonnegative");
      } else if (key == "delta") {
        cfg.scale_delta = parse_real(key, value);
        if (!(cfg.scale_delta >= 0.0 && cfg.scale_delta < 0.5)) {
          throw ValidationError("config: delta must lie in [0, 0.5)");
        }
      } else if (key == "positivity_threshold") {
        cfg.positivity_threshold = parse_real(key, value);
        if (!(cfg.positivity_threshold >= 0.0 && cfg.positivity_threshold <= 1.0)) {
          throw ValidationError("config: positivity_threshold must lie in [0, 1]");
        }
      } else if (key == "force_direct") {
        cfg.force_direct = parse_bool(key, value);
      } else if (key == "threads") {
        cfg.threads = static_cast<int>(parse_int(key, value));
        if (cfg.threads < 0) throw ValidationError("config: threads must be nonnegative");
      } else if (key == "outdir") {
        cfg.outdir = value;
      } else {
        throw ValidationError("config: unknown key '" + key + "'");
      }
    } catch (const ValidationError& e) {
      fail(e.what());
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += sep;
    out += parts[i];
  }
  return out;
}

std::string render_ensemble(const EnsembleSpec& ens) {
  std::vector<std::string> parts;
  parts.reserve(ens.members.size());
  for (const LearnerSpec& s : ens.members) parts.push_back(s.describe());
  return join(parts, ", ");
}

}  // namespace

std::string render_run_config(const RunConfig& cfg) {
  std::vector<std::string> params;
  params.reserve(cfg.parameters.size());
  for (ParameterTag tag : cfg.parameters) params.push_back(parameter_name(tag));

  std::ostringstream out;
  out << "input = " << cfg.input << "\n"
      << "outcome_col = " << cfg.load.outcome_col << "\n"
      << "provider_col = " << cfg.load.provider_col << "\n"
      << "covariates = " << join(cfg.load.covariate_cols, ",") << "\n"
      << "outcome_kind = " << cfg.load.outcome_kind << "\n"
      << "parameters = " << join(params, ",") << "\n"
      << "folds = " << cfg.folds << "\n"
      << "seed = " << cfg.seed << "\n"
      << "level = " << format_double(cfg.level) << "\n"
      << "truncation = " << format_double(cfg.truncation) << "\n"
      << "min_volume = " << cfg.min_volume << "\n"
      << "delta = " << format_double(cfg.scale_delta) << "\n"
      << "positivity_threshold = " << format_double(cfg.positivity_threshold) << "\n"
      << "force_direct = " << (cfg.force_direct ? "true" : "false") << "\n"
      << "threads = " << cfg.threads << "\n"
      << "outdir = " << cfg.outdir << "\n"
      << "\n"
      << "[propensity]\n"
      << "learners = " << render_ensemble(cfg.propensity) << "\n"
      << "stacking_folds = " << cfg.propensity.stacking_folds << "\n"
      << "\n"
      << "[outcome]\n"
      << "learners = " << render_ensemble(cfg.outcome) << "\n"
      << "stacking_folds = " << cfg.outcome.stacking_folds << "\n";
  return out.str();
}

}  // namespace targprof
