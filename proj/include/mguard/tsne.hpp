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

#ifndef MGUARD_TSNE_HPP
#define MGUARD_TSNE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "mguard/errors.hpp"
#include "mguard/parallel.hpp"
#include "mguard/rng.hpp"
#include "mguard/tensor.hpp"

namespace mguard {

struct TsneConfig {
  std::size_t dim = 2;
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double exaggeration = 12.0;
  std::size_t exaggeration_iters = 250;
  double learning_rate = 200.0;
  double momentum_initial = 0.5;
  double momentum_final = 0.8;
  std::size_t momentum_switch = 250;
  std::size_t projection_iters = 100;
  std::size_t knn_init = 3;
  std::uint64_t seed = 0;

  void validate() const {
    if (dim < 1 || dim > 3)
      throw ConfigError("tsne: output dimension must be 1, 2 or 3");
    if (perplexity <= 0.0) throw ConfigError("tsne: perplexity must be > 0");
    if (learning_rate <= 0.0)
      throw ConfigError("tsne: learning rate must be > 0");
  }
};

struct AffinityResult {
  std::size_t n = 0;
  std::vector<double> p;       // n*n symmetric joint affinities, zero diagonal
  std::vector<double> sigmas;  // per-point Gaussian bandwidths
  std::vector<std::uint8_t> degenerate;  // rows with all-zero distances
};

namespace detail {

// Entropy-targeted bandwidth search for one conditional affinity row.
// d2 holds squared distances to the other points; the row is normalized in
// place. Distances are shifted by their minimum before exponentiation so
// arbitrarily large precisions stay finite.
inline void conditional_affinity_row(std::span<const double> d2,
                                     double perplexity, double* row,
                                     double& sigma, std::uint8_t& degenerate) {
  const std::size_t m = d2.size();
  degenerate = 0;
  if (m == 0) {
    sigma = 1e-12;
    return;
  }
  const double d_min = *std::min_element(d2.begin(), d2.end());
  const double d_max = *std::max_element(d2.begin(), d2.end());
  if (d_max <= 0.0) {
    // All neighbours coincide with the point; bandwidth floored.
    sigma = 1e-12;
    degenerate = 1;
    for (std::size_t j = 0; j < m; ++j) row[j] = 1.0 / m;
    return;
  }
  const double target = std::log(perplexity);
  double beta = 1.0;
  double beta_lo = -std::numeric_limits<double>::infinity();
  double beta_hi = std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (int iter = 0; iter < 200; ++iter) {
    sum = 0.0;
    double weighted = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double e = std::exp(-beta * (d2[j] - d_min));
      row[j] = e;
      sum += e;
      weighted += e * (d2[j] - d_min);
    }
    const double entropy = std::log(sum) + beta * weighted / sum;
    const double diff = entropy - target;
    if (std::abs(diff) < 1e-7) break;
    if (diff > 0.0) {
      beta_lo = beta;
      beta = std::isinf(beta_hi) ? beta * 2.0 : 0.5 * (beta + beta_hi);
    } else {
      beta_hi = beta;
      beta = std::isinf(beta_lo) ? beta * 0.5 : 0.5 * (beta + beta_lo);
    }
  }
  for (std::size_t j = 0; j < m; ++j) row[j] /= sum;
  sigma = std::max(std::sqrt(0.5 / beta), 1e-12);
}

inline std::vector<double> squared_distance_matrix(const double* x,
                                                   std::size_t n,
                                                   std::size_t d) {
  std::vector<double> d2(n * n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    const double* xi = x + i * d;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double* xj = x + j * d;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = xi[k] - xj[k];
        s += diff * diff;
      }
      d2[i * n + j] = s;
    }
  });
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) d2[i * n + j] = d2[j * n + i];
  return d2;
}

}  // namespace detail

/// Symmetric joint affinities P with per-point bandwidths found by binary
/// search on the conditional-row entropy: p_{j|i} ~ exp(-|xi-xj|^2/2s_i^2)
/// with 2^H(p_.|i) == perplexity, then P_ij = (p_{j|i}+p_{i|j})/(2n).
inline AffinityResult pairwise_affinities(const double* x, std::size_t n,
                                          std::size_t d, double perplexity) {
  if (n < 2) throw ConfigError("tsne: need at least 2 points");
  if (perplexity >= static_cast<double>(n))
    throw ConfigError("tsne: perplexity must be < number of points");
  const auto d2 = detail::squared_distance_matrix(x, n, d);
  AffinityResult res;
  res.n = n;
  res.sigmas.assign(n, 0.0);
  res.degenerate.assign(n, 0);
  std::vector<double> cond(n * n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    std::vector<double> row_d2(n - 1);
    for (std::size_t j = 0, k = 0; j < n; ++j)
      if (j != i) row_d2[k++] = d2[i * n + j];
    std::vector<double> row_p(n - 1);
    detail::conditional_affinity_row(row_d2, perplexity, row_p.data(),
                                     res.sigmas[i], res.degenerate[i]);
    for (std::size_t j = 0, k = 0; j < n; ++j)
      if (j != i) cond[i * n + j] = row_p[k++];
  });
  res.p.assign(n * n, 0.0);
  const double inv = 1.0 / (2.0 * static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = (cond[i * n + j] + cond[j * n + i]) * inv;
      res.p[i * n + j] = v;
      res.p[j * n + i] = v;
    }
  }
  return res;
}

/// Optional fitting diagnostics.
struct TsneTrace {
  std::vector<std::pair<std::size_t, double>> kl_history;
  std::vector<double> final_p;  // affinities actually used after exaggeration
};

/// Per-class embedding of one monitored layer's activations: the fitted
/// training cloud plus everything needed to place new points in it.
struct MapperModel {
  std::size_t n = 0;
  std::size_t input_dim = 0;
  std::size_t dim = 2;
  std::vector<double> train_points;  // standardized, n x input_dim
  std::vector<double> embedding;     // n x dim
  std::vector<double> sigmas;
  std::vector<double> feat_mean;  // standardization statistics
  std::vector<double> feat_std;
  std::vector<std::uint8_t> provenance;  // 1 = adversarial training point
  TsneConfig config;
  double perplexity_used = 0.0;
  double kl_post_exaggeration = 0.0;
  double kl_final = 0.0;
  double embedding_scale = 0.0;  // median pairwise embedding distance

  std::vector<double> standardize(std::span<const double> h) const {
    if (h.size() != input_dim)
      throw ShapeError("mapper: input has dimension " +
                       std::to_string(h.size()) + ", expected " +
                       std::to_string(input_dim));
    std::vector<double> out(input_dim);
    for (std::size_t k = 0; k < input_dim; ++k)
      out[k] = (h[k] - feat_mean[k]) / feat_std[k];
    return out;
  }

  /// Out-of-sample projection: the new point's conditional affinities to
  /// the training set are matched against the frozen embedding's Student-t
  /// responsibilities by descending the KL divergence of the single row,
  /// starting from the affinity-weighted mean of the nearest neighbours.
  std::vector<double> project(std::span<const double> h_new) const {
    const auto q = standardize(h_new);
    std::vector<double> d2(n);
    for (std::size_t j = 0; j < n; ++j)
      d2[j] = squared_distance(
          std::span<const double>(q),
          std::span<const double>(train_points.data() + j * input_dim,
                                  input_dim));
    std::vector<double> p(n);
    double sigma = 0.0;
    std::uint8_t degen = 0;
    detail::conditional_affinity_row(d2, perplexity_used, p.data(), sigma,
                                     degen);

    // Initialization: affinity-weighted mean of the k nearest embeddings.
    const std::size_t k_init = std::min<std::size_t>(
        std::max<std::size_t>(config.knn_init, 1), n);
    std::vector<std::size_t> order(n);
    for (std::size_t j = 0; j < n; ++j) order[j] = j;
    std::partial_sort(order.begin(), order.begin() + k_init, order.end(),
                      [&](std::size_t a, std::size_t b) {
                        return d2[a] != d2[b] ? d2[a] < d2[b] : a < b;
                      });
    std::vector<double> y(dim, 0.0);
    double wsum = 0.0;
    for (std::size_t t = 0; t < k_init; ++t) {
      const std::size_t j = order[t];
      const double wj = p[j];
      wsum += wj;
      for (std::size_t k = 0; k < dim; ++k)
        y[k] += wj * embedding[j * dim + k];
    }
    if (wsum > 0.0) {
      for (double& v : y) v /= wsum;
    } else {
      for (std::size_t k = 0; k < dim; ++k)
        y[k] = embedding[order[0] * dim + k];
    }

    if (config.projection_iters == 0) return y;

    auto kl_of = [&](const std::vector<double>& yy) {
      double s = 0.0, kl = 0.0;
      std::vector<double> w(n);
      for (std::size_t j = 0; j < n; ++j) {
        double dd = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          const double diff = yy[k] - embedding[j * dim + k];
          dd += diff * diff;
        }
        w[j] = 1.0 / (1.0 + dd);
        s += w[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (p[j] > 0.0) kl += p[j] * (std::log(p[j]) - std::log(w[j] / s));
      }
      return kl;
    };

    const double scale = embedding_scale > 0.0 ? embedding_scale : 1.0;
    std::vector<double> grad(dim), trial(dim), w(n);
    double cur_kl = kl_of(y);
    for (std::size_t it = 0; it < config.projection_iters; ++it) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double dd = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          const double diff = y[k] - embedding[j * dim + k];
          dd += diff * diff;
        }
        w[j] = 1.0 / (1.0 + dd);
        s += w[j];
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        const double qj = w[j] / s;
        const double coeff = 2.0 * (p[j] - qj) * w[j];
        for (std::size_t k = 0; k < dim; ++k)
          grad[k] += coeff * (y[k] - embedding[j * dim + k]);
      }
      const double gn = l2_norm(grad);
      if (gn < 1e-14) break;
      // Backtracking line search on the row KL; first trial moves `scale`.
      double step = scale / gn;
      bool accepted = false;
      for (int half = 0; half < 40; ++half) {
        for (std::size_t k = 0; k < dim; ++k)
          trial[k] = y[k] - step * grad[k];
        const double trial_kl = kl_of(trial);
        if (trial_kl <= cur_kl - 1e-4 * step * gn * gn) {
          y = trial;
          cur_kl = trial_kl;
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted || step * gn < 1e-10 * scale) break;
    }
    return y;
  }
};

namespace detail {

// KL(P || Q) of the current embedding; also verifies that Q sums to one.
inline double tsne_kl(const std::vector<double>& p, const double* y,
                      std::size_t n, std::size_t dim) {
  double sum_w = 0.0;
  std::vector<double> w(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double dd = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double diff = y[i * dim + k] - y[j * dim + k];
        dd += diff * diff;
      }
      const double v = 1.0 / (1.0 + dd);
      w[i * n + j] = v;
      w[j * n + i] = v;
      sum_w += 2.0 * v;
    }
  }
  double q_total = 0.0;
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double q = w[i * n + j] / sum_w;
      q_total += q;
      const double pij = p[i * n + j];
      if (pij > 0.0) kl += pij * std::log(pij / std::max(q, 1e-300));
    }
  }
  if (std::abs(q_total - 1.0) > 1e-9)
    throw NumericError("tsne: Q normalization drift");
  if (!std::isfinite(kl))
    throw NumericError("tsne: non-finite cost; learning rate too high");
  return kl;
}

}  // namespace detail

/// Exact O(n^2) t-SNE with early exaggeration, gain-adapted gradient
/// descent and a momentum switch. Deterministic for a fixed seed. The
/// symmetric affinities are never mutated; exaggeration is applied as a
/// multiplier inside the gradient, so the original P is intact afterwards.
inline MapperModel fit_tsne(const double* x_raw, std::size_t n,
                            std::size_t input_dim,
                            std::vector<std::uint8_t> provenance,
                            const TsneConfig& cfg,
                            TsneTrace* trace = nullptr) {
  cfg.validate();
  if (n < 2) throw ConfigError("tsne: need at least 2 points");
  if (!provenance.empty() && provenance.size() != n)
    throw ShapeError("tsne: provenance length mismatch");

  MapperModel mm;
  mm.n = n;
  mm.input_dim = input_dim;
  mm.dim = cfg.dim;
  mm.config = cfg;
  mm.provenance = provenance.empty()
                      ? std::vector<std::uint8_t>(n, 0)
                      : std::move(provenance);

  // Per-feature standardization; statistics kept for projecting new points.
  mm.feat_mean.assign(input_dim, 0.0);
  mm.feat_std.assign(input_dim, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < input_dim; ++k)
      mm.feat_mean[k] += x_raw[i * input_dim + k];
  for (double& v : mm.feat_mean) v /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < input_dim; ++k) {
      const double c = x_raw[i * input_dim + k] - mm.feat_mean[k];
      mm.feat_std[k] += c * c;
    }
  for (double& v : mm.feat_std)
    v = std::max(std::sqrt(v / static_cast<double>(n)), 1e-8);
  mm.train_points.resize(n * input_dim);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < input_dim; ++k)
      mm.train_points[i * input_dim + k] =
          (x_raw[i * input_dim + k] - mm.feat_mean[k]) / mm.feat_std[k];

  mm.perplexity_used =
      std::min(cfg.perplexity, static_cast<double>(n - 1) / 3.0);
  const auto aff =
      pairwise_affinities(mm.train_points.data(), n, input_dim,
                          mm.perplexity_used);
  mm.sigmas = aff.sigmas;
  const std::vector<double>& p = aff.p;

  const std::size_t dim = cfg.dim;
  Rng rng(cfg.seed);
  std::vector<double> y(n * dim);
  for (double& v : y) v = rng.normal() * 1e-4;
  // Center once; the cost is translation invariant, so the embedding is
  // left alone afterwards (a zero gradient keeps it bit-identical).
  for (std::size_t k = 0; k < dim; ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += y[i * dim + k];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) y[i * dim + k] -= mean;
  }

  std::vector<double> velocity(n * dim, 0.0), gains(n * dim, 1.0),
      grad(n * dim, 0.0), w(n * n, 0.0), row_sums(n, 0.0);

  double momentum = cfg.momentum_initial;
  bool post_exag_recorded = false;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    if (it == cfg.momentum_switch) momentum = cfg.momentum_final;
    const double scale =
        (cfg.exaggeration_iters > 0 && it < cfg.exaggeration_iters)
            ? cfg.exaggeration
            : 1.0;

    parallel_for(n, [&](std::size_t i) {
      double rs = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) {
          w[i * n + j] = 0.0;
          continue;
        }
        double dd = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          const double diff = y[i * dim + k] - y[j * dim + k];
          dd += diff * diff;
        }
        const double v = 1.0 / (1.0 + dd);
        w[i * n + j] = v;
        rs += v;
      }
      row_sums[i] = rs;
    });
    double sum_w = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum_w += row_sums[i];
    const double inv_sum_w = 1.0 / sum_w;

    parallel_for(n, [&](std::size_t i) {
      for (std::size_t k = 0; k < dim; ++k) grad[i * dim + k] = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double wij = w[i * n + j];
        const double mult =
            4.0 * (scale * p[i * n + j] - wij * inv_sum_w) * wij;
        for (std::size_t k = 0; k < dim; ++k)
          grad[i * dim + k] += mult * (y[i * dim + k] - y[j * dim + k]);
      }
    });

    for (std::size_t i = 0; i < n * dim; ++i) {
      // Same-signed gradient and velocity mean the descent direction just
      // flipped (velocity accumulates -lr*grad), so the gain shrinks.
      const bool same_sign =
          (grad[i] > 0.0 && velocity[i] > 0.0) ||
          (grad[i] < 0.0 && velocity[i] < 0.0);
      gains[i] = same_sign ? std::max(gains[i] * 0.8, 0.01) : gains[i] + 0.2;
      velocity[i] =
          momentum * velocity[i] - cfg.learning_rate * gains[i] * grad[i];
      y[i] += velocity[i];
      if (!std::isfinite(y[i]))
        throw NumericError("tsne: non-finite cost; learning rate too high");
    }

    const bool exaggeration_end = it + 1 == cfg.exaggeration_iters;
    const bool last = it + 1 == cfg.iterations;
    if (exaggeration_end || last || (it + 1) % 50 == 0) {
      const double kl = detail::tsne_kl(p, y.data(), n, dim);
      if (trace) trace->kl_history.emplace_back(it + 1, kl);
      if (!post_exag_recorded && it + 1 >= cfg.exaggeration_iters) {
        mm.kl_post_exaggeration = kl;
        post_exag_recorded = true;
      }
      if (last) {
        mm.kl_final = kl;
        if (!post_exag_recorded) mm.kl_post_exaggeration = kl;
      }
    }
  }
  if (cfg.iterations == 0) {
    mm.kl_final = mm.kl_post_exaggeration =
        detail::tsne_kl(p, y.data(), n, dim);
  }
  mm.embedding = std::move(y);

  // Median pairwise embedding distance on a subsample; used to scale
  // projection steps and the projection quality checks.
  {
    const std::size_t cap = std::min<std::size_t>(n, 256);
    std::vector<double> dists;
    dists.reserve(cap * (cap - 1) / 2);
    const std::size_t stride = n / cap == 0 ? 1 : n / cap;
    std::vector<std::size_t> pick;
    for (std::size_t i = 0; i < n && pick.size() < cap; i += stride)
      pick.push_back(i);
    for (std::size_t a = 0; a < pick.size(); ++a)
      for (std::size_t b = a + 1; b < pick.size(); ++b) {
        double dd = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          const double diff = mm.embedding[pick[a] * dim + k] -
                              mm.embedding[pick[b] * dim + k];
          dd += diff * diff;
        }
        dists.push_back(std::sqrt(dd));
      }
    if (!dists.empty()) {
      std::nth_element(dists.begin(), dists.begin() + dists.size() / 2,
                       dists.end());
      mm.embedding_scale = dists[dists.size() / 2];
    }
    if (!(mm.embedding_scale > 0.0)) mm.embedding_scale = 1.0;
  }

  if (trace) trace->final_p = p;
  for (double v : mm.embedding)
    if (!std::isfinite(v)) throw NumericError("tsne: non-finite embedding");
  return mm;
}

}  // namespace mguard

#endif  // MGUARD_TSNE_HPP
