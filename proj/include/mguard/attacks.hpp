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

#ifndef MGUARD_ATTACKS_HPP
#define MGUARD_ATTACKS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mguard/network.hpp"
#include "mguard/parallel.hpp"
#include "mguard/rng.hpp"
#include "mguard/tensor.hpp"

namespace mguard {

enum class Norm : std::uint8_t { kL2 = 0, kLinf = 1 };

inline const char* norm_name(Norm n) { return n == Norm::kL2 ? "l2" : "linf"; }

enum class AttackKind : std::uint8_t { kFgsm, kBim, kPgd, kCw };

inline const char* attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::kFgsm: return "fgsm";
    case AttackKind::kBim: return "bim";
    case AttackKind::kPgd: return "pgd";
    case AttackKind::kCw: return "cw";
  }
  return "?";
}

struct AttackBudget {
  Norm norm = Norm::kL2;
  double epsilon = 1.0;
  double step_size = 0.0;  // 0 selects the default schedule 2.5*eps/T
  std::size_t iterations = 1;
  bool random_start = false;
  std::uint64_t seed = 0;

  double alpha() const {
    if (step_size > 0.0) return step_size;
    return iterations > 0
               ? 2.5 * epsilon / static_cast<double>(iterations)
               : epsilon;
  }

  void validate() const {
    if (epsilon < 0.0) throw ConfigError("attack: epsilon must be >= 0");
    if (iterations > 1 && alpha() <= 0.0 && epsilon > 0.0)
      throw ConfigError("attack: step size must be > 0 for iterative attacks");
  }
};

struct CWConfig {
  double kappa = 0.0;
  double initial_c = 0.01;
  std::size_t binary_steps = 6;
  std::size_t iterations = 200;
  double learning_rate = 0.01;
  bool early_abort = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (binary_steps < 1) throw ConfigError("cw: binary_steps must be >= 1");
    if (kappa < 0.0) throw ConfigError("cw: kappa must be >= 0");
  }
};

/// Originals, crafted counterparts and per-sample bookkeeping. Every
/// adversarial value is inside the [0,1] box.
struct AdversarialBatch {
  Tensor originals;     // [n, dim]
  Tensor adversarials;  // [n, dim]
  std::vector<std::uint32_t> labels;       // true labels
  std::vector<std::uint32_t> predictions;  // bare model on adversarials
  std::vector<double> l2_norms;
  std::vector<std::uint8_t> success;        // prediction != true label
  std::vector<std::uint8_t> zero_gradient;  // flat-loss samples left in place
  Shape3 input_shape;

  std::size_t size() const { return labels.size(); }

  void check_invariants() const {
    const std::size_t n = labels.size();
    if (predictions.size() != n || l2_norms.size() != n ||
        success.size() != n || zero_gradient.size() != n ||
        originals.shape[0] != n || adversarials.shape[0] != n)
      throw ShapeError("adversarial batch: incongruent array lengths");
    for (double v : adversarials.data)
      if (!(v >= 0.0 && v <= 1.0))
        throw NumericError("adversarial sample outside [0,1] box");
  }
};

namespace detail {

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Gradient of the per-sample cross-entropy loss w.r.t. the input; returns
// the logits of the forward pass through `logits`.
inline void sample_loss_grad(const NetworkModel& m, const double* x,
                             std::uint32_t y, Workspace& ws, double* grad,
                             std::vector<double>* logits = nullptr) {
  forward_sample(m, x, ws);
  const std::size_t n = m.num_classes();
  auto p = softmax_row(std::span<const double>(ws.outs.back().data(), n));
  if (logits) logits->assign(ws.outs.back().begin(), ws.outs.back().end());
  p[y] -= 1.0;
  backward_sample(m, x, ws, p.data(), grad);
}

// Projects delta into the epsilon ball of the given norm.
inline void project_ball(std::vector<double>& delta, Norm norm, double eps) {
  if (norm == Norm::kLinf) {
    for (double& d : delta) d = std::clamp(d, -eps, eps);
  } else {
    const double n = l2_norm(delta);
    if (n > eps && n > 0.0) {
      const double s = eps / n;
      for (double& d : delta) d *= s;
    }
  }
}

// Iterated gradient-sign / normalized-gradient attack on one sample.
// FGSM is the T=1, alpha=eps case; PGD adds the random start.
inline void iterative_attack_sample(const NetworkModel& m, const double* x0,
                                    std::uint32_t y, const AttackBudget& b,
                                    bool random_start, std::size_t iterations,
                                    double alpha, Rng rng, double* out,
                                    std::uint8_t* zero_grad_flag) {
  const std::size_t dim = m.input_shape().numel();
  std::vector<double> x(x0, x0 + dim), delta(dim, 0.0), grad(dim);
  *zero_grad_flag = 0;
  if (b.epsilon <= 0.0) {
    std::copy(x.begin(), x.end(), out);
    return;
  }
  if (random_start) {
    if (b.norm == Norm::kLinf) {
      for (double& d : delta) d = rng.uniform(-b.epsilon, b.epsilon);
    } else {
      // Uniform in the L2 ball: Gaussian direction, radius ~ eps*U^(1/dim).
      double nrm = 0.0;
      for (double& d : delta) {
        d = rng.normal();
        nrm += d * d;
      }
      nrm = std::sqrt(nrm);
      const double r =
          b.epsilon *
          std::pow(rng.uniform(), 1.0 / static_cast<double>(dim));
      if (nrm > 0.0)
        for (double& d : delta) d *= r / nrm;
    }
    for (std::size_t i = 0; i < dim; ++i)
      x[i] = std::clamp(x0[i] + delta[i], 0.0, 1.0);
  }
  Workspace ws;
  ws.resize(m);
  bool moved = random_start;
  for (std::size_t t = 0; t < iterations; ++t) {
    sample_loss_grad(m, x.data(), y, ws, grad.data());
    if (b.norm == Norm::kLinf) {
      bool all_zero = true;
      for (std::size_t i = 0; i < dim; ++i) {
        const double s = sign0(grad[i]);
        if (s != 0.0) all_zero = false;
        x[i] += alpha * s;
      }
      if (all_zero && !moved) {
        *zero_grad_flag = 1;
        break;
      }
    } else {
      const double gn = l2_norm(grad);
      if (gn == 0.0) {
        if (!moved) *zero_grad_flag = 1;
        break;
      }
      for (std::size_t i = 0; i < dim; ++i) x[i] += alpha * grad[i] / gn;
    }
    moved = true;
    for (std::size_t i = 0; i < dim; ++i) delta[i] = x[i] - x0[i];
    project_ball(delta, b.norm, b.epsilon);
    for (std::size_t i = 0; i < dim; ++i)
      x[i] = std::clamp(x0[i] + delta[i], 0.0, 1.0);
  }
  std::copy(x.begin(), x.end(), out);
}

}  // namespace detail

/// Fills predictions, norms and success flags from the crafted inputs.
inline void finalize_batch(const NetworkModel& m, AdversarialBatch& batch) {
  batch.adversarials.ensure_finite("adversarial inputs");
  const std::size_t n = batch.size();
  const std::size_t dim = batch.input_shape.numel();
  batch.predictions = predict(m, batch.adversarials);
  batch.l2_norms.resize(n);
  batch.success.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double d =
          batch.adversarials.data[i * dim + j] - batch.originals.data[i * dim + j];
      s += d * d;
    }
    batch.l2_norms[i] = std::sqrt(s);
    batch.success[i] = batch.predictions[i] != batch.labels[i] ? 1 : 0;
  }
  batch.check_invariants();
}

namespace detail {

inline AdversarialBatch make_batch_shell(const NetworkModel& m,
                                         const Tensor& x,
                                         const std::vector<std::uint32_t>& y) {
  const std::size_t n = batch_size_of(m, x);
  if (y.size() != n) throw ShapeError("attack: label count mismatch");
  for (double v : x.data)
    if (!(v >= 0.0 && v <= 1.0))
      throw DataError("attack: input outside [0,1] box");
  AdversarialBatch b;
  b.input_shape = m.input_shape();
  b.originals = x;
  b.originals.shape = {n, b.input_shape.numel()};
  b.adversarials = Tensor({n, b.input_shape.numel()});
  b.labels = y;
  b.zero_gradient.assign(n, 0);
  return b;
}

inline AdversarialBatch run_iterative(const NetworkModel& m, const Tensor& x,
                                      const std::vector<std::uint32_t>& y,
                                      const AttackBudget& budget,
                                      bool random_start,
                                      std::size_t iterations, double alpha) {
  budget.validate();
  AdversarialBatch batch = make_batch_shell(m, x, y);
  const std::size_t dim = batch.input_shape.numel();
  const Rng root(budget.seed);
  parallel_for(batch.size(), [&](std::size_t i) {
    iterative_attack_sample(m, batch.originals.data.data() + i * dim, y[i],
                            budget, random_start, iterations, alpha,
                            root.substream(i),
                            batch.adversarials.data.data() + i * dim,
                            &batch.zero_gradient[i]);
  });
  finalize_batch(m, batch);
  return batch;
}

}  // namespace detail

/// Single-step gradient attack: x' = clip(x + eps*sign(g)) under Linf, or
/// x' = clip(x + eps*g/|g|) under L2.
inline AdversarialBatch fgsm(const NetworkModel& m, const Tensor& x,
                             const std::vector<std::uint32_t>& y,
                             const AttackBudget& budget) {
  return detail::run_iterative(m, x, y, budget, false, 1, budget.epsilon);
}

/// Iterated FGSM with per-step size alpha, re-projected into the epsilon
/// ball and the [0,1] box after every step.
inline AdversarialBatch bim(const NetworkModel& m, const Tensor& x,
                            const std::vector<std::uint32_t>& y,
                            const AttackBudget& budget) {
  return detail::run_iterative(m, x, y, budget, false, budget.iterations,
                               budget.alpha());
}

/// BIM plus a uniform random initialization inside the epsilon ball.
inline AdversarialBatch pgd(const NetworkModel& m, const Tensor& x,
                            const std::vector<std::uint32_t>& y,
                            const AttackBudget& budget) {
  return detail::run_iterative(m, x, y, budget, budget.random_start,
                               budget.iterations, budget.alpha());
}

namespace detail {

// Minimal-L2 attack on one sample: minimize |delta|^2 + c*f(x+delta) over
// the tanh change of variables, with an outer binary search on c. Returns
// the lowest-norm iterate that flips the prediction, or x itself.
inline void cw_sample(const NetworkModel& m, const double* x0,
                      std::uint32_t y, const CWConfig& cfg, double* out) {
  const std::size_t dim = m.input_shape().numel();
  const std::size_t n_classes = m.num_classes();
  std::vector<double> w0(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    const double z = std::clamp(x0[i], 1e-6, 1.0 - 1e-6);
    w0[i] = std::atanh(2.0 * z - 1.0);
  }

  std::vector<double> best_x(x0, x0 + dim);
  double best_norm = std::numeric_limits<double>::infinity();
  bool found = false;

  double c = cfg.initial_c;
  double lower = 0.0;
  double upper = std::numeric_limits<double>::infinity();

  Workspace ws;
  ws.resize(m);
  std::vector<double> w(dim), xp(dim), grad_logits(n_classes), dx(dim),
      mom1(dim), mom2(dim);
  const std::size_t check_every = std::max<std::size_t>(1, cfg.iterations / 10);

  for (std::size_t bstep = 0; bstep < cfg.binary_steps; ++bstep) {
    w = w0;
    std::fill(mom1.begin(), mom1.end(), 0.0);
    std::fill(mom2.begin(), mom2.end(), 0.0);
    bool run_success = false;
    double prev_checkpoint = std::numeric_limits<double>::infinity();

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      double norm2 = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        xp[i] = (std::tanh(w[i]) + 1.0) * 0.5;
        const double d = xp[i] - x0[i];
        norm2 += d * d;
      }
      forward_sample(m, xp.data(), ws);
      const double* z = ws.outs.back().data();
      std::size_t runner = y == 0 ? 1 : 0;
      for (std::size_t k = 0; k < n_classes; ++k) {
        if (k != y && z[k] > z[runner]) runner = k;
      }
      const double margin = z[y] - z[runner];
      const double f = std::max(margin, -cfg.kappa);
      const double obj = norm2 + c * f;

      const std::size_t pred =
          argmax(std::span<const double>(z, n_classes));
      if (pred != y) {
        const double nrm = std::sqrt(norm2);
        if (nrm < best_norm) {
          best_norm = nrm;
          best_x = xp;
        }
        run_success = true;
      }

      if (cfg.early_abort && it % check_every == 0 && it > 0) {
        if (obj > prev_checkpoint * 0.9999) break;
        prev_checkpoint = obj;
      } else if (it == 0) {
        prev_checkpoint = obj;
      }

      std::fill(grad_logits.begin(), grad_logits.end(), 0.0);
      if (margin > -cfg.kappa) {
        grad_logits[y] = c;
        grad_logits[runner] = -c;
      }
      backward_sample(m, xp.data(), ws, grad_logits.data(), dx.data());
      for (std::size_t i = 0; i < dim; ++i)
        dx[i] += 2.0 * (xp[i] - x0[i]);

      // Adam step in w-space.
      const double b1 = 0.9, b2 = 0.999, eps_adam = 1e-8;
      const double t = static_cast<double>(it + 1);
      for (std::size_t i = 0; i < dim; ++i) {
        const double th = std::tanh(w[i]);
        const double gw = dx[i] * 0.5 * (1.0 - th * th);
        mom1[i] = b1 * mom1[i] + (1.0 - b1) * gw;
        mom2[i] = b2 * mom2[i] + (1.0 - b2) * gw * gw;
        const double mhat = mom1[i] / (1.0 - std::pow(b1, t));
        const double vhat = mom2[i] / (1.0 - std::pow(b2, t));
        w[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + eps_adam);
      }
    }

    if (run_success) {
      found = true;
      upper = c;
    } else {
      lower = c;
    }
    if (std::isinf(upper)) {
      c *= 10.0;
    } else {
      c = 0.5 * (lower + upper);
    }
  }

  (void)found;
  std::copy(best_x.begin(), best_x.end(), out);
}

}  // namespace detail

/// Carlini-Wagner L2 attack over the whole batch. Non-convergence on a
/// sample is reported through its success flag, not as an error.
inline AdversarialBatch carlini_wagner_l2(const NetworkModel& m,
                                          const Tensor& x,
                                          const std::vector<std::uint32_t>& y,
                                          const CWConfig& cfg) {
  cfg.validate();
  AdversarialBatch batch = detail::make_batch_shell(m, x, y);
  const std::size_t dim = batch.input_shape.numel();
  parallel_for(batch.size(), [&](std::size_t i) {
    detail::cw_sample(m, batch.originals.data.data() + i * dim, y[i], cfg,
                      batch.adversarials.data.data() + i * dim);
  });
  finalize_batch(m, batch);
  return batch;
}

/// Filters a natural set down to the samples the model classifies
/// correctly and crafts one minimal-distance adversarial per survivor.
inline AdversarialBatch craft_detector_corpus(
    const NetworkModel& m, const Tensor& x,
    const std::vector<std::uint32_t>& y, const CWConfig& cfg) {
  const std::size_t n = detail::batch_size_of(m, x);
  if (y.size() != n) throw ShapeError("corpus: label count mismatch");
  const auto preds = predict(m, x);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i)
    if (preds[i] == y[i]) keep.push_back(i);
  if (keep.empty())
    throw DataError("corpus: no correctly classified samples to attack");
  const std::size_t dim = m.input_shape().numel();
  Tensor xs({keep.size(), dim});
  std::vector<std::uint32_t> ys(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const double* src = x.data.data() + keep[i] * dim;
    std::copy(src, src + dim, xs.data.begin() + i * dim);
    ys[i] = y[keep[i]];
  }
  return carlini_wagner_l2(m, xs, ys, cfg);
}

/// Measured perturbation size in the budget norm; used by the budget
/// invariants and the security sweeps.
inline double perturbation_norm(const AdversarialBatch& b, std::size_t i,
                                Norm norm) {
  const std::size_t dim = b.input_shape.numel();
  if (norm == Norm::kL2) return b.l2_norms[i];
  double m = 0.0;
  for (std::size_t j = 0; j < dim; ++j)
    m = std::max(m, std::abs(b.adversarials.data[i * dim + j] -
                             b.originals.data[i * dim + j]));
  return m;
}

}  // namespace mguard

#endif  // MGUARD_ATTACKS_HPP
