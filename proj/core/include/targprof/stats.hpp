#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "targprof/errors.hpp"

namespace targprof {

inline double expit(double x) {
  // evaluate in the numerically stable branch
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double clamp(double x, double lo, double hi) {
  return x < lo ? lo : (x > hi ? hi : x);
}

// probabilities are clipped into [kProbClip, 1 - kProbClip] before any logit
inline constexpr double kProbClip = 1e-6;

inline double clip_prob(double p) { return clamp(p, kProbClip, 1.0 - kProbClip); }

inline double safe_logit(double p) { return logit(clip_prob(p)); }

double normal_quantile(double p);

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace targprof
