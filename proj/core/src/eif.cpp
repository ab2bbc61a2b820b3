#include "targprof/eif.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>

#include "targprof/errors.hpp"
#include "targprof/stats.hpp"

namespace targprof {

namespace {

void check_length(const char* what, Eigen::Index got, Eigen::Index want) {
  if (got != want) {
    throw ValidationError(std::string("influence function: ") + what + " has length " +
                          std::to_string(got) + ", expected " + std::to_string(want));
  }
}

std::string level_percent(double level) {
  std::ostringstream out;
  out << level * 100.0 << "%";
  return out.str();
}

}  // namespace

std::string parameter_name(ParameterTag tag) {
  switch (tag) {
    case ParameterTag::phi: return "phi";
    case ParameterTag::psi1: return "psi1";
    case ParameterTag::psi2: return "psi2";
    case ParameterTag::er: return "er";
    case ParameterTag::smr: return "smr";
  }
  return "";
}

Eigen::VectorXd eif_phi(const Eigen::VectorXd& y, const std::vector<int>& provider, int a,
                        const Eigen::VectorXd& pi_trunc_col, const Eigen::VectorXd& mu_bar_star,
                        double phi_star) {
  const Eigen::Index n = y.size();
  check_length("provider vector", static_cast<Eigen::Index>(provider.size()), n);
  check_length("propensity column", pi_trunc_col.size(), n);
  check_length("outcome regression", mu_bar_star.size(), n);
  Eigen::VectorXd d(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double residual = provider[static_cast<std::size_t>(i)] == a
                                ? (y(i) - mu_bar_star(i)) / pi_trunc_col(i)
                                : 0.0;
    d(i) = residual + mu_bar_star(i) - phi_star;
  }
  return d;
}

Eigen::VectorXd eif_psi1(const Eigen::VectorXd& y, const std::vector<int>& provider, int a,
                         double p_hat, double psi1_star) {
  const Eigen::Index n = y.size();
  check_length("provider vector", static_cast<Eigen::Index>(provider.size()), n);
  if (p_hat <= 0.0) throw ValidationError("influence function: provider share must be positive");
  Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (provider[static_cast<std::size_t>(i)] == a) d(i) = (y(i) - psi1_star) / p_hat;
  }
  return d;
}

Eigen::VectorXd eif_psi2(const Eigen::VectorXd& y, const std::vector<int>& provider, int a,
                         const Eigen::VectorXd& pi_col, const Eigen::VectorXd& mu_tilde_star,
                         double p_hat, double psi2_star) {
  const Eigen::Index n = y.size();
  check_length("provider vector", static_cast<Eigen::Index>(provider.size()), n);
  check_length("propensity column", pi_col.size(), n);
  check_length("outcome regression", mu_tilde_star.size(), n);
  if (p_hat <= 0.0) throw ValidationError("influence function: provider share must be positive");
  Eigen::VectorXd d(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double v = pi_col(i) * (y(i) - mu_tilde_star(i));
    if (provider[static_cast<std::size_t>(i)] == a) v += mu_tilde_star(i) - psi2_star;
    d(i) = v / p_hat;
  }
  return d;
}

Eigen::VectorXd eif_delta(const Eigen::VectorXd& d1, const Eigen::VectorXd& d2, double psi1_star,
                          double psi2_star, DeltaKind kind) {
  check_length("second component", d2.size(), d1.size());
  if (kind == DeltaKind::er) return d1 - d2;
  if (psi2_star == 0.0) {
    throw EstimationError("influence function: ratio undefined with a zero indirect mean");
  }
  return d1 / psi2_star - (psi1_star / (psi2_star * psi2_star)) * d2;
}

Inference inference(double estimate, const Eigen::VectorXd& d, double level) {
  if (!(level > 0.0 && level < 1.0)) {
    throw ValidationError("confidence level must lie strictly between 0 and 1");
  }
  if (d.size() == 0) throw ValidationError("influence function: empty vector");
  const double n = static_cast<double>(d.size());
  Inference out;
  out.se = std::sqrt(d.squaredNorm() / n / n);
  const double z = normal_quantile(0.5 * (1.0 + level));
  out.lo = estimate - z * out.se;
  out.hi = estimate + z * out.se;
  return out;
}

Eigen::MatrixXd joint_covariance(const Eigen::MatrixXd& eif_columns) {
  const Eigen::Index n = eif_columns.rows();
  if (n == 0) throw ValidationError("joint covariance: empty influence matrix");
  const double dn = static_cast<double>(n);
  return (eif_columns.transpose() * eif_columns) / (dn * dn);
}

FunnelTable funnel(const std::vector<std::string>& labels, const Eigen::VectorXd& smr,
                   const Eigen::VectorXd& variance, const std::vector<double>& levels,
                   bool log_scale) {
  const Eigen::Index m = smr.size();
  check_length("variance vector", variance.size(), m);
  check_length("label vector", static_cast<Eigen::Index>(labels.size()), m);
  if (m == 0) throw ValidationError("funnel: no providers");

  std::vector<double> lvls = levels;
  if (lvls.empty()) lvls = {0.95, 0.99, 0.999};
  std::sort(lvls.begin(), lvls.end());
  for (double level : lvls) {
    if (!(level > 0.0 && level < 1.0)) {
      throw ValidationError("funnel: levels must lie strictly between 0 and 1");
    }
  }

  FunnelTable table;
  table.log_scale = log_scale;

  // precision of each point; on the log scale the variance maps through the
  // derivative of log at the estimate
  std::vector<double> precision(static_cast<std::size_t>(m), 0.0);
  for (Eigen::Index i = 0; i < m; ++i) {
    double var = variance(i);
    if (log_scale && var > 0.0) {
      if (smr(i) <= 0.0) {
        table.warnings.push_back("provider '" + labels[static_cast<std::size_t>(i)] +
                                 "' omitted from log-scale funnel: nonpositive ratio");
        continue;
      }
      var = var / (smr(i) * smr(i));
    }
    if (var <= 0.0) {
      table.warnings.push_back("provider '" + labels[static_cast<std::size_t>(i)] +
                               "' omitted from funnel: zero variance");
      continue;
    }
    precision[static_cast<std::size_t>(i)] = 1.0 / var;
  }

  auto limits_at = [log_scale](double z, double q) {
    const double half = z * std::sqrt(1.0 / q);
    if (log_scale) return std::pair<double, double>(std::exp(-half), std::exp(half));
    return std::pair<double, double>(1.0 - half, 1.0 + half);
  };

  double q_min = 0.0, q_max = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double q = precision[static_cast<std::size_t>(i)];
    if (q <= 0.0) continue;
    if (q_min == 0.0 || q < q_min) q_min = q;
    if (q > q_max) q_max = q;
  }
  if (q_min == 0.0) throw ValidationError("funnel: every provider has zero variance");
  if (q_min == q_max) {
    q_min *= 0.8;
    q_max *= 1.2;
  }

  for (Eigen::Index i = 0; i < m; ++i) {
    const double q = precision[static_cast<std::size_t>(i)];
    if (q <= 0.0) continue;
    FunnelPoint pt;
    pt.label = labels[static_cast<std::size_t>(i)];
    pt.smr = smr(i);
    pt.precision = q;
    pt.classification = "in control";
    // nested bands: outside a wider band implies outside every narrower one,
    // so the strongest signal is the highest level still violated
    for (double level : lvls) {
      const double z = normal_quantile(0.5 * (1.0 + level));
      const auto [lo, hi] = limits_at(z, q);
      if (pt.smr < lo) pt.classification = "low at " + level_percent(level);
      if (pt.smr > hi) pt.classification = "high at " + level_percent(level);
    }
    table.points.push_back(std::move(pt));
  }

  constexpr int kGridPoints = 200;
  for (double level : lvls) {
    const double z = normal_quantile(0.5 * (1.0 + level));
    FunnelCurve curve;
    curve.level = level;
    curve.precision.reserve(kGridPoints);
    curve.lower.reserve(kGridPoints);
    curve.upper.reserve(kGridPoints);
    for (int g = 0; g < kGridPoints; ++g) {
      const double q = q_min + (q_max - q_min) * g / (kGridPoints - 1);
      const auto [lo, hi] = limits_at(z, q);
      curve.precision.push_back(q);
      curve.lower.push_back(lo);
      curve.upper.push_back(hi);
    }
    table.curves.push_back(std::move(curve));
  }
  return table;
}

std::string render_funnel_svg(const FunnelTable& table) {
  // plot region in user units; margins hold the axis labels
  constexpr double kW = 720.0, kH = 480.0, kL = 70.0, kR = 20.0, kT = 20.0, kB = 50.0;

  double q_lo = 0.0, q_hi = 1.0, y_lo = 0.0, y_hi = 2.0;
  bool first = true;
  auto grow = [&](double q, double v) {
    if (first) {
      q_lo = q_hi = q;
      y_lo = y_hi = v;
      first = false;
      return;
    }
    q_lo = std::min(q_lo, q);
    q_hi = std::max(q_hi, q);
    y_lo = std::min(y_lo, v);
    y_hi = std::max(y_hi, v);
  };
  for (const auto& pt : table.points) grow(pt.precision, pt.smr);
  for (const auto& c : table.curves) {
    for (std::size_t g = 0; g < c.precision.size(); ++g) {
      grow(c.precision[g], c.lower[g]);
      grow(c.precision[g], c.upper[g]);
    }
  }
  if (first) throw ValidationError("funnel svg: empty table");
  if (q_hi == q_lo) q_hi = q_lo + 1.0;
  if (y_hi == y_lo) y_hi = y_lo + 1.0;
  const double y_pad = 0.05 * (y_hi - y_lo);
  y_lo -= y_pad;
  y_hi += y_pad;

  auto sx = [&](double q) { return kL + (q - q_lo) / (q_hi - q_lo) * (kW - kL - kR); };
  auto sy = [&](double v) { return kH - kB - (v - y_lo) / (y_hi - y_lo) * (kH - kT - kB); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
      << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  svg << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\""
      << kH - kB << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB
      << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << (kL + kW - kR) / 2 << "\" y=\"" << kH - 12
      << "\" text-anchor=\"middle\" font-size=\"14\">precision (1 / variance)</text>\n";
  svg << "<text x=\"18\" y=\"" << (kT + kH - kB) / 2
      << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 18 "
      << (kT + kH - kB) / 2 << ")\">standardized ratio</text>\n";

  const double null_value = 1.0;
  svg << "<line x1=\"" << kL << "\" y1=\"" << sy(null_value) << "\" x2=\"" << kW - kR << "\" y2=\""
      << sy(null_value) << "\" stroke=\"#888\" stroke-dasharray=\"6 4\"/>\n";

  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"};
  for (std::size_t c = 0; c < table.curves.size(); ++c) {
    const auto& curve = table.curves[c];
    const char* color = palette[c % 5];
    for (int side = 0; side < 2; ++side) {
      const auto& ys = side == 0 ? curve.lower : curve.upper;
      svg << "<path fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.2\" d=\"";
      for (std::size_t g = 0; g < curve.precision.size(); ++g) {
        svg << (g == 0 ? "M" : "L") << sx(curve.precision[g]) << " " << sy(ys[g]);
      }
      svg << "\"/>\n";
    }
    svg << "<text x=\"" << kW - kR - 4 << "\" y=\"" << kT + 16.0 * (c + 1)
        << "\" text-anchor=\"end\" font-size=\"12\" fill=\"" << color << "\">"
        << level_percent(curve.level) << "</text>\n";
  }

  for (const auto& pt : table.points) {
    const bool flagged = pt.classification != "in control";
    svg << "<circle cx=\"" << sx(pt.precision) << "\" cy=\"" << sy(pt.smr)
        << "\" r=\"4\" fill=\"" << (flagged ? "#d62728" : "#333") << "\"><title>" << pt.label
        << ": " << pt.classification << "</title></circle>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace targprof
