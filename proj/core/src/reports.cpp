#include "targprof/reports.hpp"

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "targprof/errors.hpp"

namespace targprof {

namespace {

std::string join_notes(const std::vector<std::string>& notes) {
  std::string out;
  for (std::size_t i = 0; i < notes.size(); ++i) {
    if (i > 0) out += "; ";
    out += notes[i];
  }
  return out;
}

std::string number_or_empty(double v) { return std::isfinite(v) ? format_double(v) : ""; }

double parse_cell(const std::string& column, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    throw ValidationError("estimates file: column " + column + " holds a non-numeric value '" +
                          value + "'");
  }
  if (pos != value.size()) {
    throw ValidationError("estimates file: column " + column + " holds a non-numeric value '" +
                          value + "'");
  }
  return v;
}

}  // namespace

CsvTable estimates_table(const ProfileEstimates& est) {
  CsvTable t;
  t.header = {"provider", "n"};
  for (ParameterTag tag : est.parameters) {
    const std::string p = parameter_name(tag);
    t.header.push_back(p + "_estimate");
    t.header.push_back(p + "_se");
    t.header.push_back(p + "_ci_lo");
    t.header.push_back(p + "_ci_hi");
  }
  t.header.push_back("positivity");
  t.header.push_back("notes");

  for (const ProviderProfile& row : est.providers) {
    std::vector<std::string> cells;
    cells.reserve(t.header.size());
    cells.push_back(row.label);
    cells.push_back(std::to_string(row.n_obs));
    for (ParameterTag tag : est.parameters) {
      const Estimate& e = row.estimate(tag);
      cells.push_back(e.defined ? format_double(e.value) : "");
      if (e.defined && e.has_inference) {
        cells.push_back(format_double(e.se));
        cells.push_back(format_double(e.lo));
        cells.push_back(format_double(e.hi));
      } else {
        cells.push_back("");
        cells.push_back("");
        cells.push_back("");
      }
    }
    cells.push_back(row.positivity == PositivityFlag::ok ? "ok" : "practical_violation");
    cells.push_back(join_notes(row.notes));
    t.rows.push_back(std::move(cells));
  }
  return t;
}

CsvTable positivity_table(const PositivityReport& rep) {
  CsvTable t;
  t.header = {"provider", "min", "q01", "median", "max", "below_threshold", "flag"};
  for (const ProviderPositivity& p : rep.providers) {
    t.rows.push_back({p.label, format_double(p.min), format_double(p.q01),
                      format_double(p.median), format_double(p.max),
                      std::to_string(p.below_threshold),
                      p.flag == PositivityFlag::ok ? "ok" : "practical_violation"});
  }
  return t;
}

CsvTable funnel_csv(const FunnelTable& table) {
  CsvTable t;
  t.header = {"kind", "label", "level", "precision", "value", "lower", "upper", "classification"};
  for (const FunnelPoint& p : table.points) {
    t.rows.push_back({"point", p.label, "", format_double(p.precision), format_double(p.smr), "",
                      "", p.classification});
  }
  for (const FunnelCurve& c : table.curves) {
    for (std::size_t i = 0; i < c.precision.size(); ++i) {
      t.rows.push_back({"limit", "", format_double(c.level), format_double(c.precision[i]), "",
                        format_double(c.lower[i]), format_double(c.upper[i]), ""});
    }
  }
  return t;
}

FunnelInput funnel_input(const CsvTable& estimates) {
  const int label_col = estimates.column("provider");
  const int smr_col = estimates.column("smr_estimate");
  const int se_col = estimates.column("smr_se");
  std::vector<std::string> missing;
  if (label_col < 0) missing.push_back("provider");
  if (smr_col < 0) missing.push_back("smr_estimate");
  if (se_col < 0) missing.push_back("smr_se");
  if (!missing.empty()) {
    std::string names;
    for (std::size_t i = 0; i < missing.size(); ++i) {
      if (i > 0) names += ", ";
      names += missing[i];
    }
    throw ValidationError("estimates file: missing column(s) " + names +
                          " needed for the funnel");
  }

  FunnelInput out;
  std::vector<double> smr, var;
  for (const auto& row : estimates.rows) {
    const std::string& label = row[static_cast<std::size_t>(label_col)];
    const std::string& smr_cell = row[static_cast<std::size_t>(smr_col)];
    const std::string& se_cell = row[static_cast<std::size_t>(se_col)];
    if (smr_cell.empty() || se_cell.empty()) {
      out.skipped.push_back(label);
      continue;
    }
    const double s = parse_cell("smr_estimate", smr_cell);
    const double se = parse_cell("smr_se", se_cell);
    out.labels.push_back(label);
    smr.push_back(s);
    var.push_back(se * se);
  }
  out.smr = Eigen::Map<const Eigen::VectorXd>(smr.data(), static_cast<Eigen::Index>(smr.size()));
  out.variance =
      Eigen::Map<const Eigen::VectorXd>(var.data(), static_cast<Eigen::Index>(var.size()));
  return out;
}

CsvTable simulation_table(const SimConfig& cfg, const SimResult& res) {
  CsvTable t;
  t.header = {"study",    "scenario", "estimator",  "parameter", "N",
              "ME",       "MAE",      "coverage",   "replicates", "failures"};
  for (const SimCell& c : res.cells) {
    t.rows.push_back({study_name(cfg.study), scenario_name(cfg.scenario),
                      estimator_name(c.estimator), parameter_name(c.parameter),
                      std::to_string(cfg.n), number_or_empty(c.me), number_or_empty(c.mae),
                      number_or_empty(c.coverage), std::to_string(res.replicates),
                      std::to_string(res.failures)});
  }
  return t;
}

CsvTable audit_table(const SimResult& res) {
  CsvTable t;
  t.header = {"replicate", "estimator", "parameter", "provider",
              "estimate",  "truth",     "ci_lo",     "ci_hi"};
  for (const AuditRecord& r : res.audit) {
    t.rows.push_back({std::to_string(r.replicate), estimator_name(r.estimator),
                      parameter_name(r.parameter), r.provider, number_or_empty(r.estimate),
                      number_or_empty(r.truth), number_or_empty(r.lo), number_or_empty(r.hi)});
  }
  return t;
}

}  // namespace targprof
