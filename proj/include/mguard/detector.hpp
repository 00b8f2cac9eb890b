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

#ifndef MGUARD_DETECTOR_HPP
#define MGUARD_DETECTOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mguard/errors.hpp"
#include "mguard/kde.hpp"
#include "mguard/network.hpp"
#include "mguard/parallel.hpp"
#include "mguard/rng.hpp"
#include "mguard/tensor.hpp"
#include "mguard/tsne.hpp"

namespace mguard {

/// Detector attached to one monitored layer: a mapper and an estimator per
/// target class. Mappers are fitted on natural and adversarial activations
/// together; estimators only ever see the natural embeddings.
struct LayerDetector {
  std::size_t layer = 0;
  std::vector<MapperModel> mappers;
  std::vector<DensityModel> densities;

  std::size_t num_classes() const { return mappers.size(); }
};

/// L x N matrix of calibrated class-membership scores, one row per
/// monitored layer (shallow to deep), one column per target class.
struct PScoreSeries {
  std::size_t n_layers = 0;
  std::size_t n_classes = 0;
  std::vector<double> scores;  // layer-major

  double at(std::size_t l, std::size_t c) const {
    return scores[l * n_classes + c];
  }
};

/// Fits one class's mapper + estimator pair from activations already
/// extracted at a given layer. Natural rows come first and carry
/// provenance 0; only those rows feed the density estimator.
inline void fit_detector_pair(const std::vector<double>& nat_h,
                              const std::vector<double>& adv_h,
                              std::size_t dim, const TsneConfig& tsne_cfg,
                              const KdeConfig& kde_cfg, MapperModel& mapper,
                              DensityModel& density) {
  const std::size_t n_nat = nat_h.size() / dim;
  const std::size_t n_adv = adv_h.size() / dim;
  std::vector<double> joined;
  joined.reserve(nat_h.size() + adv_h.size());
  joined.insert(joined.end(), nat_h.begin(), nat_h.end());
  joined.insert(joined.end(), adv_h.begin(), adv_h.end());
  std::vector<std::uint8_t> provenance(n_nat + n_adv, 0);
  std::fill(provenance.begin() + n_nat, provenance.end(), 1);
  mapper = fit_tsne(joined.data(), n_nat + n_adv, dim, provenance, tsne_cfg);
  // Natural embeddings are the first n_nat rows of the fitted cloud.
  density = fit_kde(mapper.embedding.data(), n_nat, mapper.dim, kde_cfg);
}

namespace detail {

inline std::vector<double> gather_rows(const Tensor& h,
                                       const std::vector<std::size_t>& rows) {
  const std::size_t dim = h.shape[1];
  std::vector<double> out(rows.size() * dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = h.row(rows[i], dim);
    std::copy(src.begin(), src.end(), out.begin() + i * dim);
  }
  return out;
}

inline LayerDetector fit_layer_detector_from_activations(
    std::size_t layer, const Tensor& nat_h,
    const std::vector<std::uint32_t>& nat_labels, const Tensor& adv_h,
    const std::vector<std::uint32_t>& adv_pred, std::size_t num_classes,
    const TsneConfig& tsne_cfg, const KdeConfig& kde_cfg) {
  const std::size_t dim = nat_h.shape[1];
  const std::size_t min_nat = std::max<std::size_t>(
      10, static_cast<std::size_t>(tsne_cfg.perplexity) + 1);

  LayerDetector det;
  det.layer = layer;
  det.mappers.resize(num_classes);
  det.densities.resize(num_classes);

  std::vector<std::vector<std::size_t>> nat_rows(num_classes),
      adv_rows(num_classes);
  for (std::size_t i = 0; i < nat_labels.size(); ++i)
    nat_rows[nat_labels[i]].push_back(i);
  for (std::size_t i = 0; i < adv_pred.size(); ++i)
    adv_rows[adv_pred[i]].push_back(i);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (nat_rows[c].size() < min_nat)
      throw DataError("layer " + std::to_string(layer) + " class " +
                      std::to_string(c) + ": only " +
                      std::to_string(nat_rows[c].size()) +
                      " natural samples, need at least " +
                      std::to_string(min_nat));
  }

  parallel_for(num_classes, [&](std::size_t c) {
    TsneConfig cfg = tsne_cfg;
    cfg.seed = mix_seed(mix_seed(tsne_cfg.seed, layer), c);
    fit_detector_pair(gather_rows(nat_h, nat_rows[c]),
                      gather_rows(adv_h, adv_rows[c]), dim, cfg, kde_cfg,
                      det.mappers[c], det.densities[c]);
  });
  return det;
}

}  // namespace detail

/// Fits the layer-l detector from raw inputs: naturals labeled with their
/// true class, adversarials labeled with the bare classifier's prediction
/// (at inference time only the predicted class is observable).
inline LayerDetector fit_layer_detector(
    const NetworkModel& model, std::size_t layer, const Tensor& naturals,
    const std::vector<std::uint32_t>& nat_labels, const Tensor& adversarials,
    const std::vector<std::uint32_t>& adv_pred, const TsneConfig& tsne_cfg,
    const KdeConfig& kde_cfg = {}) {
  const auto& monitored = model.monitored_layers();
  if (std::find(monitored.begin(), monitored.end(), layer) == monitored.end())
    throw ConfigError("layer " + std::to_string(layer) + " is not monitored");
  const Tensor nat_h = forward(model, naturals).activations.layers.at(layer);
  const Tensor adv_h =
      forward(model, adversarials).activations.layers.at(layer);
  return detail::fit_layer_detector_from_activations(
      layer, nat_h, nat_labels, adv_h, adv_pred, model.num_classes(),
      tsne_cfg, kde_cfg);
}

/// Fits detectors for every monitored layer with a single forward pass
/// over each input set. Class-by-layer fits share nothing and run in
/// parallel.
inline std::vector<LayerDetector> fit_all_layer_detectors(
    const NetworkModel& model, const Tensor& naturals,
    const std::vector<std::uint32_t>& nat_labels, const Tensor& adversarials,
    const std::vector<std::uint32_t>& adv_pred, const TsneConfig& tsne_cfg,
    const KdeConfig& kde_cfg = {}) {
  const auto nat_acts = forward(model, naturals).activations;
  const auto adv_acts = forward(model, adversarials).activations;
  std::vector<LayerDetector> out;
  for (std::size_t layer : model.monitored_layers()) {
    out.push_back(detail::fit_layer_detector_from_activations(
        layer, nat_acts.layers.at(layer), nat_labels,
        adv_acts.layers.at(layer), adv_pred, model.num_classes(), tsne_cfg,
        kde_cfg));
  }
  return out;
}

/// Scores one sample of an activation stack: entry (l, c) is the
/// calibrated density of the sample's layer-l activation under class c's
/// estimator, after projecting through class c's mapper.
inline PScoreSeries p_scores(const std::vector<LayerDetector>& detectors,
                             const ActivationStack& activations,
                             std::size_t sample = 0) {
  PScoreSeries s;
  s.n_layers = detectors.size();
  s.n_classes = detectors.empty() ? 0 : detectors[0].num_classes();
  s.scores.assign(s.n_layers * s.n_classes, 0.0);
  for (std::size_t l = 0; l < detectors.size(); ++l) {
    const LayerDetector& det = detectors[l];
    const auto it = activations.layers.find(det.layer);
    if (it == activations.layers.end())
      throw ShapeError("activation stack missing monitored layer " +
                       std::to_string(det.layer));
    const Tensor& h = it->second;
    const auto h_row = h.row(sample, h.shape[1]);
    for (std::size_t c = 0; c < det.num_classes(); ++c) {
      const auto y = det.mappers[c].project(h_row);
      s.scores[l * s.n_classes + c] =
          calibrated_score(det.densities[c], y);
    }
  }
  return s;
}

/// All samples of a batch stack, parallel over samples.
inline std::vector<PScoreSeries> p_scores_batch(
    const std::vector<LayerDetector>& detectors,
    const ActivationStack& activations) {
  const std::size_t batch = activations.logits.shape[0];
  std::vector<PScoreSeries> out(batch);
  parallel_for(batch, [&](std::size_t b) {
    out[b] = p_scores(detectors, activations, b);
  });
  return out;
}

struct MldConfig {
  double lambda = 1e-2;
  double target_fpr = 0.05;
  double val_fraction = 0.3;
  std::size_t max_iterations = 500;
  std::uint64_t seed = 0;
};

/// Linear logistic-loss classifier over the flattened L x N score matrix,
/// with an L2 penalty on the weights and a decision threshold pinned to
/// the (1 - target_fpr) quantile of natural validation scores.
struct MultilayerDetector {
  std::vector<double> weights;
  double bias = 0.0;
  double tau = 0.0;
  double lambda = 0.0;
  double target_fpr = 0.0;
  double achieved_fpr = 0.0;

  std::size_t feature_len() const { return weights.size(); }
};

inline double decision_score(const MultilayerDetector& mld,
                             std::span<const double> features) {
  if (features.size() != mld.weights.size())
    throw ShapeError("mld: feature length " + std::to_string(features.size()) +
                     ", expected " + std::to_string(mld.weights.size()));
  double s = mld.bias;
  for (std::size_t i = 0; i < features.size(); ++i)
    s += mld.weights[i] * features[i];
  return s;
}

inline double decision_score(const MultilayerDetector& mld,
                             const PScoreSeries& series) {
  return decision_score(mld, std::span<const double>(series.scores));
}

/// flag = (decision_score > tau), strictly.
inline std::pair<bool, double> detect(const MultilayerDetector& mld,
                                      const PScoreSeries& series) {
  const double s = decision_score(mld, series);
  return {s > mld.tau, s};
}

namespace detail {

inline double softplus(double t) {
  if (t > 30.0) return t;
  if (t < -30.0) return std::exp(t);
  return std::log1p(std::exp(t));
}

inline double sigmoid(double t) {
  if (t >= 0.0) {
    const double e = std::exp(-t);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(t);
  return e / (1.0 + e);
}

struct LogisticProblem {
  const std::vector<std::vector<double>>& rows;
  const std::vector<double>& ys;  // +1 adversarial, -1 natural
  double lambda;

  double loss(const std::vector<double>& w, double b) const {
    double total = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      double s = b;
      for (std::size_t k = 0; k < w.size(); ++k) s += w[k] * rows[i][k];
      total += softplus(-ys[i] * s);
    }
    total /= static_cast<double>(rows.size());
    double reg = 0.0;
    for (double v : w) reg += v * v;
    return total + 0.5 * lambda * reg;
  }

  void gradient(const std::vector<double>& w, double b,
                std::vector<double>& gw, double& gb) const {
    gw.assign(w.size(), 0.0);
    gb = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      double s = b;
      for (std::size_t k = 0; k < w.size(); ++k) s += w[k] * rows[i][k];
      const double coeff = -ys[i] * sigmoid(-ys[i] * s);
      for (std::size_t k = 0; k < w.size(); ++k)
        gw[k] += coeff * rows[i][k];
      gb += coeff;
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (std::size_t k = 0; k < w.size(); ++k)
      gw[k] = gw[k] * inv + lambda * w[k];
    gb *= inv;
  }
};

}  // namespace detail

/// Trains the multilayer detector. Naturals are split into a training part
/// and a held-out validation part (seeded shuffle); the threshold comes
/// from the validation quantile and the achieved validation FPR is
/// reported on the model.
inline MultilayerDetector fit_mld(
    const std::vector<PScoreSeries>& natural_series,
    const std::vector<PScoreSeries>& adversarial_series,
    const MldConfig& cfg) {
  if (natural_series.size() < 20 || adversarial_series.size() < 20)
    throw DataError("mld: need at least 20 samples per side (got " +
                    std::to_string(natural_series.size()) + " natural, " +
                    std::to_string(adversarial_series.size()) +
                    " adversarial)");
  const std::size_t flen = natural_series[0].scores.size();
  for (const auto& s : natural_series)
    if (s.scores.size() != flen) throw ShapeError("mld: ragged feature rows");
  for (const auto& s : adversarial_series)
    if (s.scores.size() != flen) throw ShapeError("mld: ragged feature rows");

  // Seeded split of the naturals into train and validation.
  std::vector<std::size_t> order(natural_series.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.seed);
  rng.shuffle(order);
  std::size_t n_val = static_cast<std::size_t>(
      cfg.val_fraction * static_cast<double>(order.size()));
  n_val = std::min(std::max<std::size_t>(n_val, 1), order.size() - 1);

  std::vector<std::vector<double>> rows;
  std::vector<double> ys;
  for (std::size_t i = n_val; i < order.size(); ++i) {
    rows.push_back(natural_series[order[i]].scores);
    ys.push_back(-1.0);
  }
  for (const auto& s : adversarial_series) {
    rows.push_back(s.scores);
    ys.push_back(1.0);
  }

  detail::LogisticProblem prob{rows, ys, cfg.lambda};
  std::vector<double> w(flen, 0.0), gw(flen), trial_w(flen);
  double b = 0.0;
  double cur = prob.loss(w, b);
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    double gb = 0.0;
    prob.gradient(w, b, gw, gb);
    double gn2 = gb * gb;
    for (double v : gw) gn2 += v * v;
    if (gn2 < 1e-20) break;
    double step = 1.0;
    bool accepted = false;
    for (int half = 0; half < 60; ++half) {
      for (std::size_t k = 0; k < flen; ++k)
        trial_w[k] = w[k] - step * gw[k];
      const double trial_b = b - step * gb;
      const double trial = prob.loss(trial_w, trial_b);
      if (trial <= cur - 1e-4 * step * gn2) {
        w = trial_w;
        b = trial_b;
        cur = trial;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }

  MultilayerDetector mld;
  mld.weights = std::move(w);
  mld.bias = b;
  mld.lambda = cfg.lambda;
  mld.target_fpr = cfg.target_fpr;

  std::vector<double> val_scores;
  val_scores.reserve(n_val);
  for (std::size_t i = 0; i < n_val; ++i)
    val_scores.push_back(
        decision_score(mld, natural_series[order[i]]));
  std::sort(val_scores.begin(), val_scores.end());
  const double q = (1.0 - cfg.target_fpr) * static_cast<double>(n_val);
  std::size_t idx = static_cast<std::size_t>(std::ceil(q));
  idx = idx == 0 ? 0 : idx - 1;
  idx = std::min(idx, n_val - 1);
  mld.tau = val_scores[idx];
  std::size_t fp = 0;
  for (double s : val_scores)
    if (s > mld.tau) ++fp;
  mld.achieved_fpr = static_cast<double>(fp) / static_cast<double>(n_val);
  return mld;
}

/// The protected classifier: the bare network, one detector per monitored
/// layer and the multilayer detector. When detection fires the network's
/// prediction is overridden by the rejection label N (zero-indexed label
/// space with N natural classes).
struct GuardedClassifier {
  NetworkModel model;
  std::vector<LayerDetector> detectors;
  MultilayerDetector mld;

  std::size_t num_classes() const { return model.num_classes(); }
  std::uint32_t rejection_label() const {
    return static_cast<std::uint32_t>(model.num_classes());
  }

  void validate() const {
    const auto& monitored = model.monitored_layers();
    if (detectors.size() != monitored.size())
      throw ShapeError("guarded classifier: detector/monitored layer count");
    for (std::size_t i = 0; i < detectors.size(); ++i)
      if (detectors[i].layer != monitored[i])
        throw ShapeError("guarded classifier: detector layers must match "
                         "monitored layers");
  }
};

struct GuardedPrediction {
  std::vector<std::uint32_t> labels;      // 0..N, N = rejected
  std::vector<std::uint32_t> bare_labels; // argmax of logits
  std::vector<std::uint8_t> rejected;
  std::vector<double> scores;             // mld decision scores
};

inline GuardedPrediction guarded_predict_detail(const GuardedClassifier& g,
                                                const Tensor& x) {
  const auto fwd = forward(g.model, x);
  const std::size_t batch = fwd.logits.shape[0];
  const std::size_t n = g.model.num_classes();
  GuardedPrediction out;
  out.labels.resize(batch);
  out.bare_labels.resize(batch);
  out.rejected.resize(batch);
  out.scores.resize(batch);
  parallel_for(batch, [&](std::size_t b) {
    const auto series = p_scores(g.detectors, fwd.activations, b);
    const auto [flag, score] = detect(g.mld, series);
    out.bare_labels[b] =
        static_cast<std::uint32_t>(argmax(fwd.logits.row(b, n)));
    out.rejected[b] = flag ? 1 : 0;
    out.scores[b] = score;
    out.labels[b] = flag ? g.rejection_label() : out.bare_labels[b];
  });
  return out;
}

/// Labels in {0..N}: the bare prediction, or N when the detector fires.
inline std::vector<std::uint32_t> guarded_predict(const GuardedClassifier& g,
                                                  const Tensor& x) {
  return guarded_predict_detail(g, x).labels;
}

}  // namespace mguard

#endif  // MGUARD_DETECTOR_HPP
