//
// Copyright 2026 the mguard authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#ifndef MGUARD_KDE_HPP
#define MGUARD_KDE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "mguard/errors.hpp"
#include "mguard/tensor.hpp"

namespace mguard {

struct KdeConfig {
  double bandwidth_floor = 1e-6;
};

/// Isotropic Gaussian kernel density estimate over a low-dimensional
/// embedding, fitted on natural samples only. Log-densities of the support
/// points themselves form the calibration table that turns raw densities
/// into [0,1] scores via the empirical CDF.
struct DensityModel {
  std::size_t dim = 0;
  double bandwidth = 0.0;
  std::vector<double> support;      // n x dim
  std::vector<double> calibration;  // sorted ascending, length n

  std::size_t size() const { return dim == 0 ? 0 : support.size() / dim; }
};

/// log (1/n) sum_i (2 pi h^2)^(-d/2) exp(-|y-y_i|^2 / 2h^2), evaluated with
/// log-sum-exp so it stays finite for any finite query.
inline double log_density(const DensityModel& m, std::span<const double> y) {
  if (y.size() != m.dim)
    throw ShapeError("kde: query has dimension " + std::to_string(y.size()) +
                     ", expected " + std::to_string(m.dim));
  const std::size_t n = m.size();
  const double inv2h2 = 1.0 / (2.0 * m.bandwidth * m.bandwidth);
  std::vector<double> expo(n);
  double emax = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double dd = 0.0;
    for (std::size_t k = 0; k < m.dim; ++k) {
      const double diff = y[k] - m.support[i * m.dim + k];
      dd += diff * diff;
    }
    expo[i] = -dd * inv2h2;
    emax = std::max(emax, expo[i]);
  }
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(expo[i] - emax);
  const double d = static_cast<double>(m.dim);
  return emax + std::log(s) - std::log(static_cast<double>(n)) -
         0.5 * d * std::log(2.0 * 3.14159265358979323846 * m.bandwidth *
                            m.bandwidth);
}

/// Scott's rule bandwidth h = n^(-1/(d+4)) * mean per-coordinate standard
/// deviation, floored so degenerate clouds remain usable.
inline DensityModel fit_kde(const double* points, std::size_t n,
                            std::size_t dim, const KdeConfig& cfg = {}) {
  if (n < 1) throw ConfigError("kde: need at least 1 point");
  if (dim < 1) throw ConfigError("kde: dimension must be >= 1");
  DensityModel m;
  m.dim = dim;
  m.support.assign(points, points + n * dim);

  double sigma_bar = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += points[i * dim + k];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = points[i * dim + k] - mean;
      var += c * c;
    }
    sigma_bar += std::sqrt(var / static_cast<double>(n));
  }
  sigma_bar /= static_cast<double>(dim);
  m.bandwidth = std::max(
      std::pow(static_cast<double>(n), -1.0 / (static_cast<double>(dim) + 4.0)) *
          sigma_bar,
      cfg.bandwidth_floor);

  m.calibration.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    m.calibration[i] =
        log_density(m, std::span<const double>(points + i * dim, dim));
  std::sort(m.calibration.begin(), m.calibration.end());
  return m;
}

/// Empirical-CDF rank of the query's log-density among the support points'
/// own log-densities. Dimensionless, monotone in the density, comparable
/// across models fitted in unrelated embedding spaces.
inline double calibrated_score(const DensityModel& m,
                               std::span<const double> y) {
  const double q = log_density(m, y);
  const auto it =
      std::upper_bound(m.calibration.begin(), m.calibration.end(), q);
  return static_cast<double>(it - m.calibration.begin()) /
         static_cast<double>(m.calibration.size());
}

}  // namespace mguard

#endif  // MGUARD_KDE_HPP
