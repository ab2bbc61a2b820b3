#include "targprof/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <numeric>
#include <sstream>

#include "targprof/errors.hpp"
#include "targprof/rng.hpp"

namespace targprof {

std::vector<int> Dataset::provider_counts() const {
  std::vector<int> counts(m(), 0);
  for (int a : provider) counts[a]++;
  return counts;
}

std::vector<std::vector<int>> Dataset::provider_rows() const {
  std::vector<std::vector<int>> rows(m());
  for (int i = 0; i < n(); ++i) rows[provider[i]].push_back(i);
  return rows;
}

namespace {

double parse_number(const std::string& s, int data_row, const std::string& col) {
  std::ostringstream where;
  where << "data row " << data_row << ", column '" << col << "'";
  if (s.empty()) throw ValidationError(where.str() + ": missing value");
  const char* begin = s.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0')
    throw ValidationError(where.str() + ": not a number: '" + s + "'");
  if (!std::isfinite(v)) throw ValidationError(where.str() + ": non-finite value");
  return v;
}

}  // namespace

Dataset dataset_from_table(const CsvTable& table, const LoadConfig& cfg) {
  if (table.header.empty()) throw ValidationError("csv: empty header");
  if (table.rows.empty()) throw ValidationError("csv: no data rows");

  const int y_col = table.column(cfg.outcome_col);
  if (y_col < 0) throw ValidationError("csv: outcome column '" + cfg.outcome_col + "' not found");
  const int a_col = table.column(cfg.provider_col);
  if (a_col < 0) throw ValidationError("csv: provider column '" + cfg.provider_col + "' not found");

  std::vector<std::string> cov_names = cfg.covariate_cols;
  if (cov_names.empty()) {
    for (const auto& h : table.header) {
      if (!h.empty() && (h[0] == 'w' || h[0] == 'W') && h != cfg.outcome_col && h != cfg.provider_col)
        cov_names.push_back(h);
    }
    if (cov_names.empty())
      throw ValidationError("csv: no covariate columns found (expected names starting with 'w')");
  }
  std::vector<int> cov_cols;
  for (const auto& name : cov_names) {
    int c = table.column(name);
    if (c < 0) throw ValidationError("csv: covariate column '" + name + "' not found");
    cov_cols.push_back(c);
  }

  const int n = static_cast<int>(table.rows.size());
  const int k = static_cast<int>(cov_cols.size());

  Dataset d;
  d.x.resize(n, k);
  d.y.resize(n);
  d.provider.resize(n);
  d.covariate_names = cov_names;

  std::map<std::string, int> label_to_id;
  for (int i = 0; i < n; ++i) {
    const auto& row = table.rows[i];
    const int data_row = i + 1;
    if (static_cast<int>(row.size()) != static_cast<int>(table.header.size())) {
      std::ostringstream msg;
      msg << "data row " << data_row << ": expected " << table.header.size()
          << " fields, found " << row.size();
      throw ValidationError(msg.str());
    }
    d.y(i) = parse_number(row[y_col], data_row, cfg.outcome_col);
    for (int j = 0; j < k; ++j)
      d.x(i, j) = parse_number(row[cov_cols[j]], data_row, cov_names[j]);

    const std::string& label = row[a_col];
    if (label.empty()) {
      std::ostringstream msg;
      msg << "data row " << data_row << ", column '" << cfg.provider_col << "': missing value";
      throw ValidationError(msg.str());
    }
    auto it = label_to_id.find(label);
    if (it == label_to_id.end()) {
      int id = static_cast<int>(d.provider_labels.size());
      label_to_id.emplace(label, id);
      d.provider_labels.push_back(label);
      d.provider[i] = id;
    } else {
      d.provider[i] = it->second;
    }
  }

  bool all_01 = true;
  for (int i = 0; i < n; ++i) {
    if (d.y(i) != 0.0 && d.y(i) != 1.0) {
      all_01 = false;
      break;
    }
  }
  if (cfg.outcome_kind == "auto") {
    d.binary_outcome = all_01;
  } else if (cfg.outcome_kind == "binary") {
    if (!all_01) throw ValidationError("outcome declared binary but contains values outside {0, 1}");
    d.binary_outcome = true;
  } else if (cfg.outcome_kind == "continuous") {
    d.binary_outcome = false;
  } else {
    throw ValidationError("outcome_kind must be auto, binary or continuous");
  }
  return d;
}

Dataset load_csv(const std::string& path, const LoadConfig& cfg) {
  return dataset_from_table(read_csv_file(path), cfg);
}

MinVolumeFilter filter_min_volume(const Dataset& d, int min_n) {
  if (min_n < 1) throw ValidationError("min_volume must be >= 1");
  const auto counts = d.provider_counts();
  std::vector<int> new_id(d.m(), -1);
  MinVolumeFilter out;
  int m_new = 0;
  for (int a = 0; a < d.m(); ++a) {
    if (counts[a] >= min_n) {
      new_id[a] = m_new++;
      out.data.provider_labels.push_back(d.provider_labels[a]);
    } else {
      out.dropped_labels.push_back(d.provider_labels[a]);
    }
  }
  if (m_new == 0) throw ValidationError("min_volume filter removed every provider");

  std::vector<int> keep;
  keep.reserve(d.n());
  for (int i = 0; i < d.n(); ++i)
    if (new_id[d.provider[i]] >= 0) keep.push_back(i);
  out.dropped_rows = d.n() - static_cast<int>(keep.size());

  const int n = static_cast<int>(keep.size());
  out.data.x.resize(n, d.k());
  out.data.y.resize(n);
  out.data.provider.resize(n);
  out.data.covariate_names = d.covariate_names;
  out.data.binary_outcome = d.binary_outcome;
  for (int r = 0; r < n; ++r) {
    const int i = keep[r];
    out.data.x.row(r) = d.x.row(i);
    out.data.y(r) = d.y(i);
    out.data.provider[r] = new_id[d.provider[i]];
  }
  return out;
}

std::vector<std::vector<int>> FoldAssignment::validation_rows() const {
  std::vector<std::vector<int>> v(folds);
  for (std::size_t i = 0; i < fold.size(); ++i) v[fold[i]].push_back(static_cast<int>(i));
  return v;
}

std::vector<std::vector<int>> FoldAssignment::training_rows() const {
  std::vector<std::vector<int>> t(folds);
  if (folds == 1) {
    // single-fold debug mode: no held-out split, train on everything
    t[0].resize(fold.size());
    for (std::size_t i = 0; i < fold.size(); ++i) t[0][i] = static_cast<int>(i);
    return t;
  }
  for (std::size_t i = 0; i < fold.size(); ++i) {
    for (int j = 0; j < folds; ++j) {
      if (j != fold[i]) t[j].push_back(static_cast<int>(i));
    }
  }
  return t;
}

FoldAssignment make_folds(const Dataset& d, int J, std::uint64_t seed) {
  if (J < 1) throw ValidationError("folds must be >= 1");
  if (J > d.n()) throw ValidationError("folds exceed the number of observations");

  FoldAssignment fa;
  fa.folds = J;
  fa.fold.assign(d.n(), 0);
  if (J == 1) return fa;  // debug mode: every row in the single fold

  const auto rows_by_provider = d.provider_rows();
  for (int a = 0; a < d.m(); ++a) {
    std::vector<int> rows = rows_by_provider[a];
    Rng rng(derive_seed(seed, 0x464f4c44u + static_cast<std::uint64_t>(a)));
    rng.shuffle(rows);
    const int offset = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(J)));
    for (std::size_t idx = 0; idx < rows.size(); ++idx)
      fa.fold[rows[idx]] = (offset + static_cast<int>(idx)) % J;
    if (static_cast<int>(rows.size()) < J) {
      fa.warnings.push_back("provider '" + d.provider_labels[a] + "' has fewer observations (" +
                            std::to_string(rows.size()) + ") than folds (" + std::to_string(J) +
                            "); it cannot appear in every fold");
    }
  }
  return fa;
}

OutcomeScale scale_outcomes(const Dataset& d, double delta) {
  if (!(delta > 0.0 && delta < 0.5)) throw ValidationError("delta must lie in (0, 0.5)");
  OutcomeScale s;
  if (d.binary_outcome) return s;  // identity

  const double lo = d.y.minCoeff();
  const double hi = d.y.maxCoeff();
  if (hi <= lo)
    throw ValidationError(
        "continuous outcome is constant; rescaling is degenerate (declare the outcome binary if "
        "it is, or check the data)");
  s.beta = (1.0 - 2.0 * delta) / (hi - lo);
  s.alpha = delta - s.beta * lo;
  s.lo = lo;
  s.hi = hi;
  return s;
}

Eigen::VectorXd apply_scale(const Eigen::VectorXd& y, const OutcomeScale& s) {
  return (y.array() * s.beta + s.alpha).matrix();
}

}  // namespace targprof
