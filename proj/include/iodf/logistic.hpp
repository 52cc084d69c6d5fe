#pragma once

// Discretized logistic prior over the integers.

#include <cmath>
#include <numbers>

#include "iodf/tensor.hpp"

namespace iodf {

inline double log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Natural-log mass of the bin [z - 1/2, z + 1/2] and its partials.
struct LogMass {
  double value;
  double d_z;
  double d_mu;
  double d_log_s;
};

inline LogMass logistic_log_mass(double z, double mu, double log_s) {
  const double inv_s = std::exp(-log_s);
  // Work on the left side of the mode; the mass is symmetric about mu.
  const double c = z - mu;
  const double sign = c > 0 ? -1.0 : 1.0;
  const double cl = sign * c;
  const double a = (cl - 0.5) * inv_s;
  const double b = (cl + 0.5) * inv_s;
  const double la = log_sigmoid(a);
  const double lb = log_sigmoid(b);
  double value = lb + std::log(-std::expm1(la - lb));
  double d_cl;
  double d_log_s;
  if (std::isfinite(value)) {
    const double ga = -std::exp(la + log_sigmoid(-a) - value);  // dF/da
    const double gb = std::exp(lb + log_sigmoid(-b) - value);   // dF/db
    d_cl = (ga + gb) * inv_s;
    d_log_s = -(a * ga + b * gb);
  } else {
    // CDF difference underflowed: midpoint density times the unit bin width.
    const double x = cl * inv_s;
    value = log_sigmoid(x) + log_sigmoid(-x) - log_s;
    const double slope = 1.0 - 2.0 * sigmoid(x);
    d_cl = slope * inv_s;
    d_log_s = -x * slope - 1.0;
  }
  const double d_z = sign * d_cl;
  return {value, d_z, -d_z, d_log_s};
}

inline double logistic_log2_mass(double z, double mu, double log_s) {
  return logistic_log_mass(z, mu, log_s).value / std::numbers::ln2;
}

template <class T>
struct LogisticParams {
  Tensor<T> mu;
  Tensor<T> log_s;  // s = exp(log_s) > 0
};

// Per-dimension log2 probabilities. Parameters either match z's shape or hold one
// value per channel of an NCHW tensor.
template <class T, class Z>
Tensor<double> logistic_logpmf(const Tensor<Z>& z, const LogisticParams<T>& prior) {
  if (prior.mu.shape() != prior.log_s.shape()) throw Error("logistic_logpmf: mu/log_s shape mismatch");
  Tensor<double> out(z.shape());
  if (prior.mu.shape() == z.shape()) {
    for (std::size_t i = 0; i < z.size(); ++i)
      out[i] = logistic_log2_mass(static_cast<double>(z[i]), static_cast<double>(prior.mu[i]),
                                  static_cast<double>(prior.log_s[i]));
    return out;
  }
  if (z.rank() == 4 && prior.mu.size() == static_cast<std::size_t>(z.dim(1))) {
    const int n = z.dim(0), c = z.dim(1);
    const std::size_t hw = static_cast<std::size_t>(z.dim(2)) * z.dim(3);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t idx = (static_cast<std::size_t>(i) * c + ch) * hw + p;
          out[idx] = logistic_log2_mass(static_cast<double>(z[idx]), static_cast<double>(prior.mu[ch]),
                                        static_cast<double>(prior.log_s[ch]));
        }
    return out;
  }
  throw Error("logistic_logpmf: prior shape " + shape_string(prior.mu.shape()) + " not broadcastable to " +
              shape_string(z.shape()));
}

}  // namespace iodf
