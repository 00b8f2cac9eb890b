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

#ifndef MGUARD_SERIALIZE_HPP
#define MGUARD_SERIALIZE_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mguard/attacks.hpp"
#include "mguard/detector.hpp"
#include "mguard/errors.hpp"
#include "mguard/network.hpp"
#include "mguard/rng.hpp"

// Binary container layouts (all integers and doubles little-endian):
//
//   MGNN0001  network model
//   MGAD0001  adversarial batch
//   MGDT0001  detector bundle (references the network by digest)
//
// The exact field order is the order of the write_* calls below and is
// documented in docs/formats.md.

namespace mguard {
namespace io {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u8(std::ostream& os, std::uint8_t v) {
  write_bytes(os, &v, 1);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  write_bytes(os, b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  write_bytes(os, b, 8);
}

inline void write_f64(std::ostream& os, double v) {
  write_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline void write_f64_array(std::ostream& os, const std::vector<double>& v) {
  write_u64(os, v.size());
  for (double x : v) write_f64(os, x);
}

inline void write_u8_array(std::ostream& os,
                           const std::vector<std::uint8_t>& v) {
  write_u64(os, v.size());
  for (std::uint8_t x : v) write_u8(os, x);
}

inline void write_u32_array(std::ostream& os,
                            const std::vector<std::uint32_t>& v) {
  write_u64(os, v.size());
  for (std::uint32_t x : v) write_u32(os, x);
}

class Reader {
 public:
  Reader(std::istream& is, std::string context)
      : is_(is), context_(std::move(context)) {}

  void read_raw(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (is_.gcount() != static_cast<std::streamsize>(n))
      throw DataError(context_ + ": truncated payload");
  }

  std::uint8_t read_u8() {
    std::uint8_t v;
    read_raw(&v, 1);
    return v;
  }

  std::uint32_t read_u32() {
    unsigned char b[4];
    read_raw(b, 4);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
           (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
  }

  std::uint64_t read_u64() {
    unsigned char b[8];
    read_raw(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
  }

  double read_f64() { return std::bit_cast<double>(read_u64()); }

  std::vector<double> read_f64_array() {
    const std::uint64_t n = read_u64();
    check_count(n);
    std::vector<double> v(n);
    for (auto& x : v) x = read_f64();
    return v;
  }

  std::vector<std::uint8_t> read_u8_array() {
    const std::uint64_t n = read_u64();
    check_count(n);
    std::vector<std::uint8_t> v(n);
    if (n) read_raw(v.data(), n);
    return v;
  }

  std::vector<std::uint32_t> read_u32_array() {
    const std::uint64_t n = read_u64();
    check_count(n);
    std::vector<std::uint32_t> v(n);
    for (auto& x : v) x = read_u32();
    return v;
  }

  void expect_magic(const char* magic) {
    char got[9] = {0};
    read_raw(got, 8);
    if (std::memcmp(got, magic, 8) != 0)
      throw DataError(context_ + ": wrong magic (expected " +
                      std::string(magic) + ")");
  }

  const std::string& context() const { return context_; }

 private:
  void check_count(std::uint64_t n) {
    if (n > (1ull << 32))
      throw DataError(context_ + ": implausible array length");
  }

  std::istream& is_;
  std::string context_;
};

}  // namespace io

// ---------------------------------------------------------------------------
// Network model (MGNN0001)

inline void serialize_model(const NetworkModel& m, std::ostream& os) {
  io::write_bytes(os, "MGNN0001", 8);
  io::write_u32(os, static_cast<std::uint32_t>(m.input_shape().c));
  io::write_u32(os, static_cast<std::uint32_t>(m.input_shape().h));
  io::write_u32(os, static_cast<std::uint32_t>(m.input_shape().w));
  io::write_u32(os, static_cast<std::uint32_t>(m.num_classes()));
  io::write_u32(os, static_cast<std::uint32_t>(m.monitored_layers().size()));
  for (std::size_t i : m.monitored_layers())
    io::write_u32(os, static_cast<std::uint32_t>(i));
  io::write_u32(os, static_cast<std::uint32_t>(m.layers().size()));
  for (const Layer& l : m.layers()) {
    io::write_u8(os, static_cast<std::uint8_t>(l.kind));
    switch (l.kind) {
      case LayerKind::kConv:
        io::write_u32(os, static_cast<std::uint32_t>(l.out_channels));
        io::write_u32(os, static_cast<std::uint32_t>(l.kernel));
        io::write_u32(os, static_cast<std::uint32_t>(l.stride));
        io::write_f64_array(os, l.weights);
        io::write_f64_array(os, l.bias);
        break;
      case LayerKind::kMaxPool:
        io::write_u32(os, static_cast<std::uint32_t>(l.window));
        break;
      case LayerKind::kDense:
        io::write_u32(os, static_cast<std::uint32_t>(l.out_dim));
        io::write_f64_array(os, l.weights);
        io::write_f64_array(os, l.bias);
        break;
      case LayerKind::kRelu:
      case LayerKind::kFlatten:
        break;
    }
  }
}

inline NetworkModel deserialize_model(io::Reader& r) {
  r.expect_magic("MGNN0001");
  const std::uint32_t c = r.read_u32();
  const std::uint32_t h = r.read_u32();
  const std::uint32_t w = r.read_u32();
  const std::uint32_t classes = r.read_u32();
  const std::uint32_t n_mon = r.read_u32();
  std::vector<std::size_t> monitored(n_mon);
  for (auto& v : monitored) v = r.read_u32();
  const std::uint32_t n_layers = r.read_u32();

  NetworkModel m(Shape3{c, h, w}, classes);
  struct Params {
    std::vector<double> w, b;
  };
  std::vector<Params> params(n_layers);
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const auto kind = static_cast<LayerKind>(r.read_u8());
    switch (kind) {
      case LayerKind::kConv: {
        const std::uint32_t oc = r.read_u32();
        const std::uint32_t k = r.read_u32();
        const std::uint32_t s = r.read_u32();
        m.add_conv(oc, k, s);
        params[i].w = r.read_f64_array();
        params[i].b = r.read_f64_array();
        break;
      }
      case LayerKind::kRelu:
        m.add_relu();
        break;
      case LayerKind::kMaxPool:
        m.add_maxpool(r.read_u32());
        break;
      case LayerKind::kFlatten:
        m.add_flatten();
        break;
      case LayerKind::kDense: {
        m.add_dense(r.read_u32());
        params[i].w = r.read_f64_array();
        params[i].b = r.read_f64_array();
        break;
      }
      default:
        throw DataError(r.context() + ": unknown layer tag");
    }
  }
  m.finalize(std::move(monitored));
  auto& layers = m.mutable_layers();
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    if (!layers[i].parametric()) continue;
    if (params[i].w.size() != layers[i].weights.size() ||
        params[i].b.size() != layers[i].bias.size())
      throw DataError(r.context() + ": parameter payload size mismatch at "
                      "layer " + std::to_string(i));
    layers[i].weights = std::move(params[i].w);
    layers[i].bias = std::move(params[i].b);
  }
  return m;
}

inline void save_model(const NetworkModel& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError(path + ": cannot open for writing");
  serialize_model(m, os);
  if (!os) throw DataError(path + ": write failed");
}

inline NetworkModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(path + ": cannot open");
  io::Reader r(is, path);
  return deserialize_model(r);
}

/// FNV-1a digest of the serialized model bytes; detector bundles carry it
/// so a bundle cannot be loaded against the wrong network.
inline std::uint64_t model_digest(const NetworkModel& m) {
  std::ostringstream os(std::ios::binary);
  serialize_model(m, os);
  return fnv1a64(os.str());
}

// ---------------------------------------------------------------------------
// Adversarial batch (MGAD0001)

inline void save_batch(const AdversarialBatch& b, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError(path + ": cannot open for writing");
  io::write_bytes(os, "MGAD0001", 8);
  io::write_u32(os, static_cast<std::uint32_t>(b.size()));
  io::write_u32(os, static_cast<std::uint32_t>(b.input_shape.c));
  io::write_u32(os, static_cast<std::uint32_t>(b.input_shape.h));
  io::write_u32(os, static_cast<std::uint32_t>(b.input_shape.w));
  io::write_f64_array(os, b.originals.data);
  io::write_f64_array(os, b.adversarials.data);
  io::write_u32_array(os, b.labels);
  io::write_u32_array(os, b.predictions);
  io::write_f64_array(os, b.l2_norms);
  io::write_u8_array(os, b.success);
  io::write_u8_array(os, b.zero_gradient);
  if (!os) throw DataError(path + ": write failed");
}

inline AdversarialBatch load_batch(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(path + ": cannot open");
  io::Reader r(is, path);
  r.expect_magic("MGAD0001");
  AdversarialBatch b;
  const std::uint32_t n = r.read_u32();
  b.input_shape.c = r.read_u32();
  b.input_shape.h = r.read_u32();
  b.input_shape.w = r.read_u32();
  const std::size_t dim = b.input_shape.numel();
  b.originals = Tensor({n, dim}, r.read_f64_array());
  b.adversarials = Tensor({n, dim}, r.read_f64_array());
  b.labels = r.read_u32_array();
  b.predictions = r.read_u32_array();
  b.l2_norms = r.read_f64_array();
  b.success = r.read_u8_array();
  b.zero_gradient = r.read_u8_array();
  b.check_invariants();
  return b;
}

/// Per-sample CSV summary next to the binary container.
inline void save_batch_summary(const AdversarialBatch& b,
                               const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError(path + ": cannot open for writing");
  os << "index,true_label,predicted_label,l2_norm,success\n";
  char buf[64];
  for (std::size_t i = 0; i < b.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.6f", b.l2_norms[i]);
    os << i << ',' << b.labels[i] << ',' << b.predictions[i] << ',' << buf
       << ',' << int(b.success[i]) << '\n';
  }
  if (!os) throw DataError(path + ": write failed");
}

// ---------------------------------------------------------------------------
// Detector bundle (MGDT0001)

namespace io {

inline void write_mapper(std::ostream& os, const MapperModel& m) {
  write_u32(os, static_cast<std::uint32_t>(m.n));
  write_u32(os, static_cast<std::uint32_t>(m.input_dim));
  write_u32(os, static_cast<std::uint32_t>(m.dim));
  const TsneConfig& c = m.config;
  write_u32(os, static_cast<std::uint32_t>(c.dim));
  write_f64(os, c.perplexity);
  write_u32(os, static_cast<std::uint32_t>(c.iterations));
  write_f64(os, c.exaggeration);
  write_u32(os, static_cast<std::uint32_t>(c.exaggeration_iters));
  write_f64(os, c.learning_rate);
  write_f64(os, c.momentum_initial);
  write_f64(os, c.momentum_final);
  write_u32(os, static_cast<std::uint32_t>(c.momentum_switch));
  write_u32(os, static_cast<std::uint32_t>(c.projection_iters));
  write_u32(os, static_cast<std::uint32_t>(c.knn_init));
  write_u64(os, c.seed);
  write_f64(os, m.perplexity_used);
  write_f64(os, m.kl_post_exaggeration);
  write_f64(os, m.kl_final);
  write_f64(os, m.embedding_scale);
  write_f64_array(os, m.train_points);
  write_f64_array(os, m.embedding);
  write_f64_array(os, m.sigmas);
  write_f64_array(os, m.feat_mean);
  write_f64_array(os, m.feat_std);
  write_u8_array(os, m.provenance);
}

inline MapperModel read_mapper(Reader& r) {
  MapperModel m;
  m.n = r.read_u32();
  m.input_dim = r.read_u32();
  m.dim = r.read_u32();
  TsneConfig& c = m.config;
  c.dim = r.read_u32();
  c.perplexity = r.read_f64();
  c.iterations = r.read_u32();
  c.exaggeration = r.read_f64();
  c.exaggeration_iters = r.read_u32();
  c.learning_rate = r.read_f64();
  c.momentum_initial = r.read_f64();
  c.momentum_final = r.read_f64();
  c.momentum_switch = r.read_u32();
  c.projection_iters = r.read_u32();
  c.knn_init = r.read_u32();
  c.seed = r.read_u64();
  m.perplexity_used = r.read_f64();
  m.kl_post_exaggeration = r.read_f64();
  m.kl_final = r.read_f64();
  m.embedding_scale = r.read_f64();
  m.train_points = r.read_f64_array();
  m.embedding = r.read_f64_array();
  m.sigmas = r.read_f64_array();
  m.feat_mean = r.read_f64_array();
  m.feat_std = r.read_f64_array();
  m.provenance = r.read_u8_array();
  if (m.train_points.size() != m.n * m.input_dim ||
      m.embedding.size() != m.n * m.dim || m.sigmas.size() != m.n ||
      m.provenance.size() != m.n)
    throw DataError(r.context() + ": mapper payload size mismatch");
  return m;
}

inline void write_density(std::ostream& os, const DensityModel& d) {
  write_u32(os, static_cast<std::uint32_t>(d.dim));
  write_f64(os, d.bandwidth);
  write_f64_array(os, d.support);
  write_f64_array(os, d.calibration);
}

inline DensityModel read_density(Reader& r) {
  DensityModel d;
  d.dim = r.read_u32();
  d.bandwidth = r.read_f64();
  d.support = r.read_f64_array();
  d.calibration = r.read_f64_array();
  if (d.dim == 0 || d.support.size() % d.dim != 0 ||
      d.calibration.size() != d.support.size() / d.dim)
    throw DataError(r.context() + ": density payload size mismatch");
  return d;
}

}  // namespace io

inline void save_detector_bundle(const GuardedClassifier& g,
                                 const std::string& path) {
  g.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError(path + ": cannot open for writing");
  io::write_bytes(os, "MGDT0001", 8);
  io::write_u64(os, model_digest(g.model));
  io::write_u32(os, static_cast<std::uint32_t>(g.model.num_classes()));
  io::write_u32(os, static_cast<std::uint32_t>(g.detectors.size()));
  for (const auto& det : g.detectors)
    io::write_u32(os, static_cast<std::uint32_t>(det.layer));
  for (const auto& det : g.detectors) {
    for (std::size_t c = 0; c < det.num_classes(); ++c) {
      io::write_mapper(os, det.mappers[c]);
      io::write_density(os, det.densities[c]);
    }
  }
  io::write_f64_array(os, g.mld.weights);
  io::write_f64(os, g.mld.bias);
  io::write_f64(os, g.mld.tau);
  io::write_f64(os, g.mld.lambda);
  io::write_f64(os, g.mld.target_fpr);
  io::write_f64(os, g.mld.achieved_fpr);
  if (!os) throw DataError(path + ": write failed");
}

/// Loads a detector bundle and attaches it to the given network. The
/// stored digest must match the network exactly.
inline GuardedClassifier load_detector_bundle(const NetworkModel& model,
                                              const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(path + ": cannot open");
  io::Reader r(is, path);
  r.expect_magic("MGDT0001");
  const std::uint64_t digest = r.read_u64();
  if (digest != model_digest(model))
    throw DataError(path + ": digest mismatch: bundle was fitted for a "
                    "different network");
  GuardedClassifier g;
  g.model = model;
  const std::uint32_t classes = r.read_u32();
  const std::uint32_t n_layers = r.read_u32();
  std::vector<std::uint32_t> layer_ids(n_layers);
  for (auto& v : layer_ids) v = r.read_u32();
  g.detectors.resize(n_layers);
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    g.detectors[l].layer = layer_ids[l];
    g.detectors[l].mappers.resize(classes);
    g.detectors[l].densities.resize(classes);
    for (std::uint32_t c = 0; c < classes; ++c) {
      g.detectors[l].mappers[c] = io::read_mapper(r);
      g.detectors[l].densities[c] = io::read_density(r);
    }
  }
  g.mld.weights = r.read_f64_array();
  g.mld.bias = r.read_f64();
  g.mld.tau = r.read_f64();
  g.mld.lambda = r.read_f64();
  g.mld.target_fpr = r.read_f64();
  g.mld.achieved_fpr = r.read_f64();
  g.validate();
  return g;
}

}  // namespace mguard

#endif  // MGUARD_SERIALIZE_HPP
