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

#ifndef MGUARD_DATASET_HPP
#define MGUARD_DATASET_HPP

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "mguard/errors.hpp"
#include "mguard/network.hpp"
#include "mguard/rng.hpp"
#include "mguard/tensor.hpp"

namespace mguard {

/// Labeled image set with values in [0,1].
struct Dataset {
  Tensor images;  // [n, c*h*w]
  std::vector<std::uint32_t> labels;
  Shape3 shape;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }

  std::span<const double> image(std::size_t i) const {
    return images.row(i, shape.numel());
  }

  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset out;
    out.shape = shape;
    out.num_classes = num_classes;
    const std::size_t dim = shape.numel();
    out.images = Tensor({indices.size(), dim});
    out.labels.resize(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto src = image(indices[i]);
      std::copy(src.begin(), src.end(), out.images.data.begin() + i * dim);
      out.labels[i] = labels[indices[i]];
    }
    return out;
  }

  Dataset head(std::size_t n) const {
    std::vector<std::size_t> idx(std::min(n, size()));
    std::iota(idx.begin(), idx.end(), 0);
    return subset(idx);
  }

  void validate() const {
    if (images.shape.empty() || images.shape[0] != labels.size())
      throw DataError("dataset: image count does not match label count");
    for (double v : images.data)
      if (!(v >= 0.0 && v <= 1.0))
        throw DataError("dataset: pixel value outside [0,1]");
    for (std::uint32_t l : labels)
      if (l >= num_classes) throw DataError("dataset: label out of range");
  }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError(path + ": truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

/// Parses the big-endian IDX container pair used for MNIST-style data:
/// images with magic 0x00000803 and dims (count, rows, cols), labels with
/// magic 0x00000801. Pixel bytes are scaled by 1/255.
inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw DataError(images_path + ": cannot open");
  const std::uint32_t img_magic = detail::read_be32(imgs, images_path);
  if (img_magic != 0x00000803u)
    throw DataError(images_path + ": wrong magic (expected 0x00000803)");
  const std::uint32_t count = detail::read_be32(imgs, images_path);
  const std::uint32_t rows = detail::read_be32(imgs, images_path);
  const std::uint32_t cols = detail::read_be32(imgs, images_path);

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw DataError(labels_path + ": cannot open");
  const std::uint32_t lab_magic = detail::read_be32(labs, labels_path);
  if (lab_magic != 0x00000801u)
    throw DataError(labels_path + ": wrong magic (expected 0x00000801)");
  const std::uint32_t lab_count = detail::read_be32(labs, labels_path);
  if (lab_count != count)
    throw DataError("IDX count mismatch: " + std::to_string(count) +
                    " images vs " + std::to_string(lab_count) + " labels");

  const std::size_t dim = std::size_t(rows) * cols;
  std::vector<unsigned char> raw(std::size_t(count) * dim);
  imgs.read(reinterpret_cast<char*>(raw.data()),
            static_cast<std::streamsize>(raw.size()));
  if (imgs.gcount() != static_cast<std::streamsize>(raw.size()))
    throw DataError(images_path + ": truncated payload");

  std::vector<unsigned char> raw_labels(count);
  labs.read(reinterpret_cast<char*>(raw_labels.data()), count);
  if (labs.gcount() != static_cast<std::streamsize>(count))
    throw DataError(labels_path + ": truncated payload");

  Dataset ds;
  ds.shape = Shape3{1, rows, cols};
  ds.images = Tensor({count, dim});
  for (std::size_t i = 0; i < raw.size(); ++i)
    ds.images.data[i] = raw[i] / 255.0;
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  std::uint32_t max_label = 0;
  for (std::uint32_t l : ds.labels) max_label = std::max(max_label, l);
  ds.num_classes = max_label + 1;
  return ds;
}

/// Writes a dataset back out as an IDX pair (values quantized to bytes).
inline void save_idx(const Dataset& ds, const std::string& images_path,
                     const std::string& labels_path) {
  auto be32 = [](std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  std::ofstream imgs(images_path, std::ios::binary);
  if (!imgs) throw DataError(images_path + ": cannot open for writing");
  be32(imgs, 0x00000803u);
  be32(imgs, static_cast<std::uint32_t>(ds.size()));
  be32(imgs, static_cast<std::uint32_t>(ds.shape.h));
  be32(imgs, static_cast<std::uint32_t>(ds.shape.w));
  for (double v : ds.images.data) {
    const int q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255));
    const unsigned char b = static_cast<unsigned char>(q);
    imgs.write(reinterpret_cast<const char*>(&b), 1);
  }
  std::ofstream labs(labels_path, std::ios::binary);
  if (!labs) throw DataError(labels_path + ": cannot open for writing");
  be32(labs, 0x00000801u);
  be32(labs, static_cast<std::uint32_t>(ds.size()));
  for (std::uint32_t l : ds.labels) {
    const unsigned char b = static_cast<unsigned char>(l);
    labs.write(reinterpret_cast<const char*>(&b), 1);
  }
}

/// Gaussian class blobs at seeded random centers, clipped to the unit box.
/// spread == 0 collapses every sample onto its class center exactly.
inline Dataset synth_blobs(std::size_t n_per_class, std::size_t classes,
                           std::size_t dim, double spread,
                           std::uint64_t seed) {
  if (classes < 2) throw ConfigError("synth_blobs: need at least 2 classes");
  if (dim == 0 || n_per_class == 0)
    throw ConfigError("synth_blobs: empty spec");
  Rng rng(seed);
  std::vector<double> centers(classes * dim);
  for (double& c : centers) c = rng.uniform(0.2, 0.8);

  Dataset ds;
  ds.shape = Shape3{1, 1, dim};
  ds.num_classes = classes;
  ds.images = Tensor({n_per_class * classes, dim});
  ds.labels.resize(n_per_class * classes);
  std::size_t row = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
      for (std::size_t d = 0; d < dim; ++d) {
        const double v = centers[c * dim + d] + spread * rng.normal();
        ds.images.data[row * dim + d] = std::clamp(v, 0.0, 1.0);
      }
      ds.labels[row] = static_cast<std::uint32_t>(c);
    }
  }
  return ds;
}

namespace detail {

// Segment endpoints for a seven-segment style glyph of each digit, drawn in
// the unit square (y grows downward).
struct Seg {
  double x0, y0, x1, y1;
};

inline const std::vector<std::vector<Seg>>& digit_strokes() {
  static const double L = 0.28, R = 0.72, T = 0.12, M = 0.5, B = 0.88;
  static const Seg A{L, T, R, T}, Bs{R, T, R, M}, C{R, M, R, B}, D{L, B, R, B},
      E{L, M, L, B}, F{L, T, L, M}, G{L, M, R, M};
  static const std::vector<std::vector<Seg>> strokes = {
      {A, Bs, C, D, E, F},     // 0
      {Bs, C},                 // 1
      {A, Bs, G, E, D},        // 2
      {A, Bs, G, C, D},        // 3
      {F, G, Bs, C},           // 4
      {A, F, G, C, D},         // 5
      {A, F, G, E, C, D},      // 6
      {A, Bs, C},              // 7
      {A, Bs, C, D, E, F, G},  // 8
      {A, Bs, G, F, C, D},     // 9
  };
  return strokes;
}

inline double point_segment_dist(double px, double py, const Seg& s) {
  const double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
  const double wx = px - s.x0, wy = py - s.y0;
  const double vv = vx * vx + vy * vy;
  double t = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (s.x0 + t * vx), dy = py - (s.y0 + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

/// Deterministic handwritten-style digit corpus: stroke glyphs with random
/// affine jitter, stroke-width variation, soft edges and pixel noise,
/// rendered at side x side (default 28). Intended as a self-contained
/// stand-in for MNIST-format data; every pixel is in [0,1].
inline Dataset synth_digits(std::size_t n, std::uint64_t seed,
                            std::size_t side = 28) {
  if (n == 0) throw ConfigError("synth_digits: empty spec");
  const auto& strokes = detail::digit_strokes();
  Rng rng(seed);
  Dataset ds;
  ds.shape = Shape3{1, side, side};
  ds.num_classes = 10;
  ds.images = Tensor({n, side * side});
  ds.labels.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t digit = static_cast<std::uint32_t>(
        rng.uniform_index(10));
    ds.labels[i] = digit;

    // Random affine map applied to the glyph: rotation, anisotropic scale,
    // shear and translation.
    const double angle = rng.uniform(-0.22, 0.22);
    const double sx = rng.uniform(0.82, 1.08);
    const double sy = rng.uniform(0.82, 1.08);
    const double shear = rng.uniform(-0.18, 0.18);
    const double tx = rng.uniform(-0.06, 0.06);
    const double ty = rng.uniform(-0.06, 0.06);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double thickness = rng.uniform(0.045, 0.075);
    const double ink = rng.uniform(0.85, 1.0);

    std::vector<detail::Seg> glyph = strokes[digit];
    for (auto& s : glyph) {
      auto warp = [&](double& x, double& y) {
        double gx = (x - 0.5) * sx, gy = (y - 0.5) * sy;
        gx += shear * gy;
        const double rx = ca * gx - sa * gy, ry = sa * gx + ca * gy;
        x = rx + 0.5 + tx;
        y = ry + 0.5 + ty;
      };
      warp(s.x0, s.y0);
      warp(s.x1, s.y1);
      // Slight endpoint jitter keeps the strokes from looking mechanical.
      s.x0 += rng.uniform(-0.02, 0.02);
      s.y0 += rng.uniform(-0.02, 0.02);
      s.x1 += rng.uniform(-0.02, 0.02);
      s.y1 += rng.uniform(-0.02, 0.02);
    }

    double* img = ds.images.data.data() + i * side * side;
    for (std::size_t py = 0; py < side; ++py) {
      for (std::size_t px = 0; px < side; ++px) {
        const double ux = (px + 0.5) / side;
        const double uy = (py + 0.5) / side;
        double dist = 1e9;
        for (const auto& s : glyph)
          dist = std::min(dist, detail::point_segment_dist(ux, uy, s));
        // Soft-edged stroke profile.
        const double edge = 0.02;
        double v = 0.0;
        if (dist < thickness) {
          v = ink;
        } else if (dist < thickness + edge) {
          v = ink * (1.0 - (dist - thickness) / edge);
        }
        v += rng.uniform(-0.03, 0.03);
        img[py * side + px] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return ds;
}

struct SplitFractions {
  double train = 0.8, val = 0.1, test = 0.1;

  void validate() const {
    if (train <= 0.0 || val <= 0.0 || test <= 0.0)
      throw ConfigError("split fractions must be positive");
    if (std::abs(train + val + test - 1.0) > 1e-9)
      throw ConfigError("split fractions must sum to 1");
  }
};

struct SplitDataset {
  Dataset train, val, test;
};

/// Seeded shuffle followed by a three-way split.
inline SplitDataset split_dataset(const Dataset& ds, SplitFractions f,
                                  std::uint64_t seed) {
  f.validate();
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  const std::size_t n_train = static_cast<std::size_t>(f.train * ds.size());
  const std::size_t n_val = static_cast<std::size_t>(f.val * ds.size());
  SplitDataset out;
  out.train = ds.subset({idx.begin(), idx.begin() + n_train});
  out.val = ds.subset({idx.begin() + n_train, idx.begin() + n_train + n_val});
  out.test = ds.subset({idx.begin() + n_train + n_val, idx.end()});
  return out;
}

}  // namespace mguard

#endif  // MGUARD_DATASET_HPP
