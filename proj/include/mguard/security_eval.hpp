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

#ifndef MGUARD_SECURITY_EVAL_HPP
#define MGUARD_SECURITY_EVAL_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "mguard/attacks.hpp"
#include "mguard/detector.hpp"
#include "mguard/errors.hpp"
#include "mguard/network.hpp"
#include "mguard/tsne.hpp"

namespace mguard {

/// Accuracy of the bare and guarded classifier per perturbation budget.
struct SecurityCurve {
  std::string attack;
  Norm norm = Norm::kL2;
  std::vector<double> grid;
  std::vector<double> bare_accuracy;
  std::vector<double> guarded_accuracy;
  std::size_t n_samples = 0;
};

/// Sweeps the attack over the epsilon grid. Bookkeeping at eps == 0: a
/// detection on natural data is an error, so guarded accuracy is the
/// correctly-classified-and-not-rejected fraction. At eps > 0 a sample
/// counts correct iff it is rejected or still classified to its true
/// label (an attack that fails to flip the label is not an error).
inline SecurityCurve security_curve(const GuardedClassifier& g,
                                    AttackKind kind, AttackBudget base,
                                    const std::vector<double>& grid,
                                    const Tensor& x,
                                    const std::vector<std::uint32_t>& y) {
  if (kind == AttackKind::kCw)
    throw ConfigError("security curves sweep a budget; cw has none");
  if (x.shape.empty() || x.shape[0] == 0)
    throw DataError("security curve: empty test set");
  if (grid.empty() || grid[0] != 0.0)
    throw ConfigError("security curve: grid must start at 0");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (grid[i] <= grid[i - 1])
      throw ConfigError("security curve: grid must be strictly increasing");

  SecurityCurve curve;
  curve.attack = attack_name(kind);
  curve.norm = base.norm;
  curve.grid = grid;
  curve.n_samples = x.shape[0];

  const std::size_t n = x.shape[0];
  for (std::size_t gi = 0; gi < grid.size(); ++gi) {
    const double eps = grid[gi];
    if (eps == 0.0) {
      const auto pred = guarded_predict_detail(g, x);
      std::size_t bare_ok = 0, guarded_ok = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (pred.bare_labels[i] == y[i]) ++bare_ok;
        if (!pred.rejected[i] && pred.bare_labels[i] == y[i]) ++guarded_ok;
      }
      curve.bare_accuracy.push_back(double(bare_ok) / double(n));
      curve.guarded_accuracy.push_back(double(guarded_ok) / double(n));
      continue;
    }
    AttackBudget b = base;
    b.epsilon = eps;
    b.seed = mix_seed(base.seed, gi);
    AdversarialBatch batch;
    switch (kind) {
      case AttackKind::kFgsm: batch = fgsm(g.model, x, y, b); break;
      case AttackKind::kBim: batch = bim(g.model, x, y, b); break;
      default: batch = pgd(g.model, x, y, b); break;
    }
    const auto pred = guarded_predict_detail(g, batch.adversarials);
    std::size_t bare_ok = 0, guarded_ok = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (batch.predictions[i] == y[i]) ++bare_ok;
      if (pred.rejected[i] || pred.bare_labels[i] == y[i]) ++guarded_ok;
    }
    curve.bare_accuracy.push_back(double(bare_ok) / double(n));
    curve.guarded_accuracy.push_back(double(guarded_ok) / double(n));
  }
  return curve;
}

/// Fraction of points whose k-nearest-neighbour majority label matches
/// their own. Even k with a split vote counts as a mismatch.
inline double knn_purity(const std::vector<double>& points, std::size_t n,
                         std::size_t dim,
                         const std::vector<std::uint8_t>& labels,
                         std::size_t k) {
  if (k == 0 || n < 2) throw ConfigError("knn purity: need k >= 1 and n >= 2");
  const std::size_t kk = std::min(k, n - 1);
  std::vector<std::uint8_t> match(n, 0);
  parallel_for(n, [&](std::size_t i) {
    std::vector<std::pair<double, std::size_t>> d;
    d.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double dd = 0.0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double diff = points[i * dim + c] - points[j * dim + c];
        dd += diff * diff;
      }
      d.emplace_back(dd, j);
    }
    std::partial_sort(d.begin(), d.begin() + kk, d.end());
    std::size_t votes = 0;
    for (std::size_t t = 0; t < kk; ++t) votes += labels[d[t].second];
    const bool majority_adv = 2 * votes > kk;
    const bool tie = 2 * votes == kk;
    if (!tie && (majority_adv == (labels[i] != 0))) match[i] = 1;
  });
  std::size_t ok = 0;
  for (auto v : match) ok += v;
  return double(ok) / double(n);
}

/// Mean two-cluster silhouette over all points.
inline double silhouette_two_class(const std::vector<double>& points,
                                   std::size_t n, std::size_t dim,
                                   const std::vector<std::uint8_t>& labels) {
  std::vector<double> s(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    double sum_same = 0.0, sum_other = 0.0;
    std::size_t n_same = 0, n_other = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double dd = 0.0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double diff = points[i * dim + c] - points[j * dim + c];
        dd += diff * diff;
      }
      const double dist = std::sqrt(dd);
      if (labels[j] == labels[i]) {
        sum_same += dist;
        ++n_same;
      } else {
        sum_other += dist;
        ++n_other;
      }
    }
    if (n_same == 0 || n_other == 0) return;
    const double a = sum_same / double(n_same);
    const double b = sum_other / double(n_other);
    const double m = std::max(a, b);
    s[i] = m > 0.0 ? (b - a) / m : 0.0;
  });
  double total = 0.0;
  for (double v : s) total += v;
  return total / double(n);
}

/// Outcome of the embedding separability test at one layer: an embedding
/// fitted on naturals only (adversarials projected in afterwards) against
/// an embedding fitted on the mixed set.
struct SeparabilityReport {
  std::size_t layer = 0;
  double purity_natural_fit = 0.0;
  double purity_mixed_fit = 0.0;
  double silhouette_natural_fit = 0.0;
  double silhouette_mixed_fit = 0.0;
  std::size_t n_natural = 0;
  std::size_t n_adversarial = 0;
};

inline SeparabilityReport separability_test(const NetworkModel& model,
                                            std::size_t layer,
                                            const Tensor& naturals,
                                            const Tensor& adversarials,
                                            const TsneConfig& tsne_cfg,
                                            std::size_t k) {
  if (naturals.shape[0] == 0 || adversarials.shape[0] == 0)
    throw DataError("separability: both sets must be non-empty");
  const auto& monitored = model.monitored_layers();
  if (std::find(monitored.begin(), monitored.end(), layer) == monitored.end())
    throw ConfigError("separability: layer " + std::to_string(layer) +
                      " is not monitored");
  const Tensor nat_h = forward(model, naturals).activations.layers.at(layer);
  const Tensor adv_h =
      forward(model, adversarials).activations.layers.at(layer);
  const std::size_t n_nat = nat_h.shape[0];
  const std::size_t n_adv = adv_h.shape[0];
  const std::size_t hdim = nat_h.shape[1];

  SeparabilityReport rep;
  rep.layer = layer;
  rep.n_natural = n_nat;
  rep.n_adversarial = n_adv;

  std::vector<std::uint8_t> labels(n_nat + n_adv, 0);
  std::fill(labels.begin() + n_nat, labels.end(), 1);

  {  // Embedding learned from natural samples only.
    TsneConfig cfg = tsne_cfg;
    cfg.seed = mix_seed(tsne_cfg.seed, 0xA);
    const MapperModel mapper = fit_tsne(
        nat_h.data.data(), n_nat, hdim,
        std::vector<std::uint8_t>(n_nat, 0), cfg);
    std::vector<double> pts((n_nat + n_adv) * mapper.dim);
    std::copy(mapper.embedding.begin(), mapper.embedding.end(), pts.begin());
    parallel_for(n_adv, [&](std::size_t i) {
      const auto y = mapper.project(adv_h.row(i, hdim));
      std::copy(y.begin(), y.end(),
                pts.begin() + (n_nat + i) * mapper.dim);
    });
    rep.purity_natural_fit =
        knn_purity(pts, n_nat + n_adv, mapper.dim, labels, k);
    rep.silhouette_natural_fit =
        silhouette_two_class(pts, n_nat + n_adv, mapper.dim, labels);
  }
  {  // Embedding learned from the mixed set.
    TsneConfig cfg = tsne_cfg;
    cfg.seed = mix_seed(tsne_cfg.seed, 0xB);
    std::vector<double> joined((n_nat + n_adv) * hdim);
    std::copy(nat_h.data.begin(), nat_h.data.end(), joined.begin());
    std::copy(adv_h.data.begin(), adv_h.data.end(),
              joined.begin() + n_nat * hdim);
    const MapperModel mapper =
        fit_tsne(joined.data(), n_nat + n_adv, hdim, labels, cfg);
    rep.purity_mixed_fit = knn_purity(mapper.embedding, n_nat + n_adv,
                                      mapper.dim, labels, k);
    rep.silhouette_mixed_fit = silhouette_two_class(
        mapper.embedding, n_nat + n_adv, mapper.dim, labels);
  }
  return rep;
}

/// The score series of a natural sample and its adversarial counterpart,
/// with the original target class marked.
struct PScoreTrendPair {
  PScoreSeries natural;
  PScoreSeries adversarial;
  std::uint32_t target_class = 0;
};

inline PScoreTrendPair pscore_trend_report(const GuardedClassifier& g,
                                           std::span<const double> x,
                                           std::span<const double> x_adv,
                                           std::uint32_t target_class) {
  const std::size_t dim = g.model.input_shape().numel();
  Tensor both({2, dim});
  std::copy(x.begin(), x.end(), both.data.begin());
  std::copy(x_adv.begin(), x_adv.end(), both.data.begin() + dim);
  const auto fwd = forward(g.model, both);
  PScoreTrendPair pair;
  pair.natural = p_scores(g.detectors, fwd.activations, 0);
  pair.adversarial = p_scores(g.detectors, fwd.activations, 1);
  pair.target_class = target_class;
  return pair;
}

// ---------------------------------------------------------------------------
// Report emission. All numeric formatting is fixed-width so identical
// inputs produce byte-identical files.

namespace detail {

inline std::string fmt(double v, int decimals = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

}  // namespace detail

inline void emit_curve_csv(const SecurityCurve& c, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError(path + ": cannot open for writing");
  os << "attack,norm,epsilon,bare_accuracy,guarded_accuracy,n_samples\n";
  for (std::size_t i = 0; i < c.grid.size(); ++i) {
    os << c.attack << ',' << norm_name(c.norm) << ','
       << detail::fmt(c.grid[i]) << ',' << detail::fmt(c.bare_accuracy[i])
       << ',' << detail::fmt(c.guarded_accuracy[i]) << ',' << c.n_samples
       << '\n';
  }
  if (!os) throw DataError(path + ": write failed");
}

inline void emit_separability_csv(const SeparabilityReport& r,
                                  const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError(path + ": cannot open for writing");
  os << "layer,fit_mode,knn_purity,silhouette,n_natural,n_adversarial\n";
  os << r.layer << ",natural_only," << detail::fmt(r.purity_natural_fit)
     << ',' << detail::fmt(r.silhouette_natural_fit) << ',' << r.n_natural
     << ',' << r.n_adversarial << '\n';
  os << r.layer << ",mixed," << detail::fmt(r.purity_mixed_fit) << ','
     << detail::fmt(r.silhouette_mixed_fit) << ',' << r.n_natural << ','
     << r.n_adversarial << '\n';
  if (!os) throw DataError(path + ": write failed");
}

inline void emit_trend_csv(const PScoreTrendPair& pair,
                           const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError(path + ": cannot open for writing");
  os << "kind,layer,class,score,is_target\n";
  auto dump = [&](const PScoreSeries& s, const char* kind) {
    for (std::size_t l = 0; l < s.n_layers; ++l)
      for (std::size_t c = 0; c < s.n_classes; ++c)
        os << kind << ',' << l << ',' << c << ','
           << detail::fmt(s.at(l, c)) << ','
           << (c == pair.target_class ? 1 : 0) << '\n';
  };
  dump(pair.natural, "natural");
  dump(pair.adversarial, "adversarial");
  if (!os) throw DataError(path + ": write failed");
}

/// 800x600 line plot of the curves: solid fgsm, dashed bim, dotted pgd;
/// one polyline per (attack, system) pair.
inline void emit_curves_svg(const std::vector<SecurityCurve>& curves,
                            const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError(path + ": cannot open for writing");
  const double width = 800, height = 600;
  const double ml = 70, mr = 25, mt = 25, mb = 60;
  double max_eps = 1.0;
  for (const auto& c : curves)
    for (double e : c.grid) max_eps = std::max(max_eps, e);
  auto sx = [&](double eps) {
    return ml + (width - ml - mr) * (eps / max_eps);
  };
  auto sy = [&](double acc) {
    return height - mb - (height - mt - mb) * acc;
  };
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 800 600\">\n";
  os << "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n";
  // Axes.
  os << "<line x1=\"" << detail::fmt(ml, 2) << "\" y1=\""
     << detail::fmt(sy(0), 2) << "\" x2=\"" << detail::fmt(sx(max_eps), 2)
     << "\" y2=\"" << detail::fmt(sy(0), 2)
     << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  os << "<line x1=\"" << detail::fmt(ml, 2) << "\" y1=\""
     << detail::fmt(sy(0), 2) << "\" x2=\"" << detail::fmt(ml, 2)
     << "\" y2=\"" << detail::fmt(sy(1), 2)
     << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double acc = t / 4.0;
    os << "<text x=\"" << detail::fmt(ml - 10, 2) << "\" y=\""
       << detail::fmt(sy(acc) + 4, 2)
       << "\" font-size=\"12\" text-anchor=\"end\">" << detail::fmt(acc, 2)
       << "</text>\n";
  }
  if (!curves.empty()) {
    for (double e : curves[0].grid) {
      os << "<text x=\"" << detail::fmt(sx(e), 2) << "\" y=\""
         << detail::fmt(sy(0) + 18, 2)
         << "\" font-size=\"12\" text-anchor=\"middle\">"
         << detail::fmt(e, 1) << "</text>\n";
    }
  }
  os << "<text x=\"" << detail::fmt((ml + width - mr) / 2, 2) << "\" y=\""
     << detail::fmt(height - 15, 2)
     << "\" font-size=\"14\" text-anchor=\"middle\">perturbation (L2)"
     << "</text>\n";
  os << "<text x=\"20\" y=\"" << detail::fmt((mt + height - mb) / 2, 2)
     << "\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 20 "
     << detail::fmt((mt + height - mb) / 2, 2) << ")\">accuracy</text>\n";

  auto dash_for = [](const std::string& attack) {
    if (attack == "bim") return std::string(" stroke-dasharray=\"9,5\"");
    if (attack == "pgd") return std::string(" stroke-dasharray=\"2,4\"");
    return std::string();
  };
  double legend_y = mt + 12;
  for (const auto& c : curves) {
    for (int system = 0; system < 2; ++system) {
      const auto& acc = system == 0 ? c.bare_accuracy : c.guarded_accuracy;
      const char* color = system == 0 ? "#d62728" : "#1f77b4";
      os << "<polyline fill=\"none\" stroke=\"" << color
         << "\" stroke-width=\"2\"" << dash_for(c.attack) << " points=\"";
      for (std::size_t i = 0; i < c.grid.size(); ++i) {
        if (i) os << ' ';
        os << detail::fmt(sx(c.grid[i]), 2) << ','
           << detail::fmt(sy(acc[i]), 2);
      }
      os << "\"/>\n";
      os << "<text x=\"" << detail::fmt(width - mr - 165, 2) << "\" y=\""
         << detail::fmt(legend_y, 2) << "\" font-size=\"12\" fill=\"" << color
         << "\">" << c.attack << (system == 0 ? " bare" : " guarded")
         << "</text>\n";
      legend_y += 16;
    }
  }
  os << "</svg>\n";
  if (!os) throw DataError(path + ": write failed");
}

}  // namespace mguard

#endif  // MGUARD_SECURITY_EVAL_HPP
