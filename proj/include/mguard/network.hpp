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

#ifndef MGUARD_NETWORK_HPP
#define MGUARD_NETWORK_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mguard/errors.hpp"
#include "mguard/parallel.hpp"
#include "mguard/rng.hpp"
#include "mguard/tensor.hpp"

namespace mguard {

struct Shape3 {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t numel() const { return c * h * w; }
  bool operator==(const Shape3&) const = default;
  std::string str() const {
    return std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

enum class LayerKind : std::uint8_t {
  kConv = 0,
  kRelu = 1,
  kMaxPool = 2,
  kFlatten = 3,
  kDense = 4,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kDense: return "dense";
  }
  return "?";
}

/// One layer descriptor. Parameter tensors are only populated for conv and
/// dense layers; weights are row-major [out, in, k, k] resp. [out, in].
struct Layer {
  LayerKind kind;
  std::size_t out_channels = 0;  // conv
  std::size_t kernel = 0;        // conv
  std::size_t stride = 1;        // conv
  std::size_t window = 0;        // maxpool (stride == window)
  std::size_t out_dim = 0;       // dense
  std::vector<double> weights;
  std::vector<double> bias;

  bool parametric() const {
    return kind == LayerKind::kConv || kind == LayerKind::kDense;
  }
};

/// Per-layer internal representations of one forward batch.
/// Keys are monitored layer indices, values are [batch, dim_l] snapshots.
struct ActivationStack {
  std::map<std::size_t, Tensor> layers;
  Tensor logits;  // [batch, N]
};

struct ForwardResult {
  Tensor logits;  // [batch, N]
  ActivationStack activations;
};

/// Feedforward classifier over a fixed layer vocabulary, with a list of
/// monitored layers whose activations are captured on every forward pass.
/// Immutable after training; concurrent read-only use is safe.
class NetworkModel {
 public:
  NetworkModel() = default;
  NetworkModel(Shape3 input, std::size_t num_classes)
      : input_(input), num_classes_(num_classes) {}

  NetworkModel& add_conv(std::size_t out_channels, std::size_t kernel,
                         std::size_t stride = 1) {
    Layer l;
    l.kind = LayerKind::kConv;
    l.out_channels = out_channels;
    l.kernel = kernel;
    l.stride = stride;
    layers_.push_back(std::move(l));
    return *this;
  }
  NetworkModel& add_relu() {
    layers_.push_back(Layer{.kind = LayerKind::kRelu});
    return *this;
  }
  NetworkModel& add_maxpool(std::size_t window) {
    Layer l;
    l.kind = LayerKind::kMaxPool;
    l.window = window;
    layers_.push_back(std::move(l));
    return *this;
  }
  NetworkModel& add_flatten() {
    layers_.push_back(Layer{.kind = LayerKind::kFlatten});
    return *this;
  }
  NetworkModel& add_dense(std::size_t out_dim) {
    Layer l;
    l.kind = LayerKind::kDense;
    l.out_dim = out_dim;
    layers_.push_back(std::move(l));
    return *this;
  }

  /// Resolves all intermediate shapes, allocates parameters and validates
  /// the monitored-layer list. Must be called once after the last add_*.
  NetworkModel& finalize(std::vector<std::size_t> monitored) {
    if (layers_.empty()) throw ShapeError("network has no layers");
    out_shapes_.clear();
    Shape3 cur = input_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Layer& l = layers_[i];
      const std::string where =
          "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
      switch (l.kind) {
        case LayerKind::kConv: {
          if (l.kernel == 0 || l.stride == 0 || l.out_channels == 0)
            throw ShapeError(where + ": bad conv parameters");
          if (cur.h < l.kernel || cur.w < l.kernel)
            throw ShapeError(where + ": kernel " + std::to_string(l.kernel) +
                             " exceeds input " + cur.str());
          const std::size_t oh = (cur.h - l.kernel) / l.stride + 1;
          const std::size_t ow = (cur.w - l.kernel) / l.stride + 1;
          l.weights.assign(l.out_channels * cur.c * l.kernel * l.kernel, 0.0);
          l.bias.assign(l.out_channels, 0.0);
          in_shapes_.push_back(cur);
          cur = Shape3{l.out_channels, oh, ow};
          break;
        }
        case LayerKind::kRelu:
          in_shapes_.push_back(cur);
          break;
        case LayerKind::kMaxPool: {
          if (l.window == 0 || cur.h < l.window || cur.w < l.window)
            throw ShapeError(where + ": window " + std::to_string(l.window) +
                             " exceeds input " + cur.str());
          in_shapes_.push_back(cur);
          cur = Shape3{cur.c, cur.h / l.window, cur.w / l.window};
          break;
        }
        case LayerKind::kFlatten:
          in_shapes_.push_back(cur);
          cur = Shape3{1, 1, cur.numel()};
          break;
        case LayerKind::kDense: {
          if (l.out_dim == 0) throw ShapeError(where + ": zero output dim");
          l.weights.assign(l.out_dim * cur.numel(), 0.0);
          l.bias.assign(l.out_dim, 0.0);
          in_shapes_.push_back(cur);
          cur = Shape3{1, 1, l.out_dim};
          break;
        }
      }
      out_shapes_.push_back(cur);
    }
    if (layers_.back().kind != LayerKind::kDense ||
        out_shapes_.back().numel() != num_classes_) {
      throw ShapeError("final layer must be dense with " +
                       std::to_string(num_classes_) + " outputs");
    }
    if (monitored.empty()) throw ShapeError("monitored layer list is empty");
    for (std::size_t i = 0; i < monitored.size(); ++i) {
      if (monitored[i] >= layers_.size())
        throw ShapeError("monitored layer index " +
                         std::to_string(monitored[i]) + " out of range");
      if (i > 0 && monitored[i] <= monitored[i - 1])
        throw ShapeError("monitored layer indices must be strictly increasing");
    }
    monitored_ = std::move(monitored);
    finalized_ = true;
    return *this;
  }

  /// He-style initialization; bias zero. Deterministic for a given stream.
  void init_params(Rng rng) {
    for (Layer& l : layers_) {
      if (!l.parametric()) continue;
      const std::size_t fan_in = l.kind == LayerKind::kConv
                                     ? l.weights.size() / l.out_channels
                                     : l.weights.size() / l.out_dim;
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (double& w : l.weights) w = rng.normal() * std;
      std::fill(l.bias.begin(), l.bias.end(), 0.0);
    }
  }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& mutable_layers() { return layers_; }
  const std::vector<std::size_t>& monitored_layers() const {
    return monitored_;
  }
  Shape3 input_shape() const { return input_; }
  std::size_t num_classes() const { return num_classes_; }
  Shape3 layer_input_shape(std::size_t i) const { return in_shapes_[i]; }
  Shape3 layer_output_shape(std::size_t i) const { return out_shapes_[i]; }
  bool finalized() const { return finalized_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers_) n += l.weights.size() + l.bias.size();
    return n;
  }

  /// Default convolutional architecture for image inputs:
  /// conv(c1,3)-relu-pool(2)-conv(c2,3)-relu-pool(2)-flatten-dense(d)-relu-
  /// dense(N), monitoring both pool outputs, the hidden relu and the logits.
  static NetworkModel lenet(Shape3 input, std::size_t classes,
                            std::size_t conv1 = 8, std::size_t conv2 = 16,
                            std::size_t dense = 64) {
    NetworkModel m(input, classes);
    m.add_conv(conv1, 3).add_relu().add_maxpool(2);
    m.add_conv(conv2, 3).add_relu().add_maxpool(2);
    m.add_flatten().add_dense(dense).add_relu().add_dense(classes);
    m.finalize({2, 5, 8, 9});
    return m;
  }

  /// Small dense net for low-dimensional inputs; monitors the hidden relu
  /// and the logits.
  static NetworkModel mlp(std::size_t in_dim, std::size_t hidden,
                          std::size_t classes) {
    NetworkModel m(Shape3{1, 1, in_dim}, classes);
    m.add_flatten().add_dense(hidden).add_relu().add_dense(classes);
    m.finalize({2, 3});
    return m;
  }

 private:
  Shape3 input_{};
  std::size_t num_classes_ = 0;
  std::vector<Layer> layers_;
  std::vector<Shape3> in_shapes_;
  std::vector<Shape3> out_shapes_;
  std::vector<std::size_t> monitored_;
  bool finalized_ = false;
};

namespace detail {

// Per-sample forward cache: the output buffer of every layer.
struct Workspace {
  std::vector<std::vector<double>> outs;

  void resize(const NetworkModel& m) {
    outs.resize(m.layers().size());
    for (std::size_t i = 0; i < m.layers().size(); ++i) {
      outs[i].assign(m.layer_output_shape(i).numel(), 0.0);
    }
  }
};

inline void conv_forward(const Layer& l, Shape3 in, Shape3 out,
                         const double* x, double* y) {
  const std::size_t k = l.kernel, s = l.stride;
  const std::size_t oh = out.h, ow = out.w;
  for (std::size_t oc = 0; oc < out.c; ++oc) {
    double* ychan = y + oc * oh * ow;
    std::fill(ychan, ychan + oh * ow, l.bias[oc]);
    for (std::size_t ic = 0; ic < in.c; ++ic) {
      const double* xchan = x + ic * in.h * in.w;
      const double* wbase = l.weights.data() + (oc * in.c + ic) * k * k;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = wbase[ky * k + kx];
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const double* xrow = xchan + (oy * s + ky) * in.w + kx;
            double* yrow = ychan + oy * ow;
            if (s == 1) {
              for (std::size_t ox = 0; ox < ow; ++ox) yrow[ox] += wv * xrow[ox];
            } else {
              for (std::size_t ox = 0; ox < ow; ++ox)
                yrow[ox] += wv * xrow[ox * s];
            }
          }
        }
      }
    }
  }
}

inline void conv_backward_input(const Layer& l, Shape3 in, Shape3 out,
                                const double* dy, double* dx) {
  const std::size_t k = l.kernel, s = l.stride;
  std::fill(dx, dx + in.numel(), 0.0);
  for (std::size_t oc = 0; oc < out.c; ++oc) {
    const double* dychan = dy + oc * out.h * out.w;
    for (std::size_t ic = 0; ic < in.c; ++ic) {
      double* dxchan = dx + ic * in.h * in.w;
      const double* wbase = l.weights.data() + (oc * in.c + ic) * k * k;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = wbase[ky * k + kx];
          for (std::size_t oy = 0; oy < out.h; ++oy) {
            double* dxrow = dxchan + (oy * s + ky) * in.w + kx;
            const double* dyrow = dychan + oy * out.w;
            if (s == 1) {
              for (std::size_t ox = 0; ox < out.w; ++ox)
                dxrow[ox] += wv * dyrow[ox];
            } else {
              for (std::size_t ox = 0; ox < out.w; ++ox)
                dxrow[ox * s] += wv * dyrow[ox];
            }
          }
        }
      }
    }
  }
}

inline void conv_backward_params(const Layer& l, Shape3 in, Shape3 out,
                                 const double* x, const double* dy, double* dw,
                                 double* db) {
  const std::size_t k = l.kernel, s = l.stride;
  for (std::size_t oc = 0; oc < out.c; ++oc) {
    const double* dychan = dy + oc * out.h * out.w;
    double acc = 0.0;
    for (std::size_t i = 0; i < out.h * out.w; ++i) acc += dychan[i];
    db[oc] += acc;
    for (std::size_t ic = 0; ic < in.c; ++ic) {
      const double* xchan = x + ic * in.h * in.w;
      double* dwbase = dw + (oc * in.c + ic) * k * k;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          double sum = 0.0;
          for (std::size_t oy = 0; oy < out.h; ++oy) {
            const double* xrow = xchan + (oy * s + ky) * in.w + kx;
            const double* dyrow = dychan + oy * out.w;
            if (s == 1) {
              for (std::size_t ox = 0; ox < out.w; ++ox)
                sum += xrow[ox] * dyrow[ox];
            } else {
              for (std::size_t ox = 0; ox < out.w; ++ox)
                sum += xrow[ox * s] * dyrow[ox];
            }
          }
          dwbase[ky * k + kx] += sum;
        }
      }
    }
  }
}

// Max-pool with stride == window; ties resolve to the first maximal element
// in row-major window order, both here and in the backward pass.
inline void maxpool_forward(const Layer& l, Shape3 in, Shape3 out,
                            const double* x, double* y) {
  const std::size_t w = l.window;
  for (std::size_t c = 0; c < in.c; ++c) {
    const double* xchan = x + c * in.h * in.w;
    double* ychan = y + c * out.h * out.w;
    for (std::size_t oy = 0; oy < out.h; ++oy) {
      for (std::size_t ox = 0; ox < out.w; ++ox) {
        double best = xchan[(oy * w) * in.w + ox * w];
        for (std::size_t ky = 0; ky < w; ++ky) {
          const double* xrow = xchan + (oy * w + ky) * in.w + ox * w;
          for (std::size_t kx = 0; kx < w; ++kx) {
            if (xrow[kx] > best) best = xrow[kx];
          }
        }
        ychan[oy * out.w + ox] = best;
      }
    }
  }
}

inline void maxpool_backward(const Layer& l, Shape3 in, Shape3 out,
                             const double* x, const double* dy, double* dx) {
  const std::size_t w = l.window;
  std::fill(dx, dx + in.numel(), 0.0);
  for (std::size_t c = 0; c < in.c; ++c) {
    const double* xchan = x + c * in.h * in.w;
    const double* dychan = dy + c * out.h * out.w;
    double* dxchan = dx + c * in.h * in.w;
    for (std::size_t oy = 0; oy < out.h; ++oy) {
      for (std::size_t ox = 0; ox < out.w; ++ox) {
        std::size_t best_off = (oy * w) * in.w + ox * w;
        double best = xchan[best_off];
        for (std::size_t ky = 0; ky < w; ++ky) {
          for (std::size_t kx = 0; kx < w; ++kx) {
            const std::size_t off = (oy * w + ky) * in.w + ox * w + kx;
            if (xchan[off] > best) {
              best = xchan[off];
              best_off = off;
            }
          }
        }
        dxchan[best_off] += dychan[oy * out.w + ox];
      }
    }
  }
}

inline void dense_forward(const Layer& l, std::size_t in_dim, const double* x,
                          double* y) {
  for (std::size_t o = 0; o < l.out_dim; ++o) {
    const double* wrow = l.weights.data() + o * in_dim;
    double acc = l.bias[o];
    for (std::size_t i = 0; i < in_dim; ++i) acc += wrow[i] * x[i];
    y[o] = acc;
  }
}

inline void dense_backward_input(const Layer& l, std::size_t in_dim,
                                 const double* dy, double* dx) {
  std::fill(dx, dx + in_dim, 0.0);
  for (std::size_t o = 0; o < l.out_dim; ++o) {
    const double* wrow = l.weights.data() + o * in_dim;
    const double g = dy[o];
    for (std::size_t i = 0; i < in_dim; ++i) dx[i] += wrow[i] * g;
  }
}

inline void dense_backward_params(const Layer& l, std::size_t in_dim,
                                  const double* x, const double* dy,
                                  double* dw, double* db) {
  for (std::size_t o = 0; o < l.out_dim; ++o) {
    const double g = dy[o];
    db[o] += g;
    double* dwrow = dw + o * in_dim;
    for (std::size_t i = 0; i < in_dim; ++i) dwrow[i] += g * x[i];
  }
}

/// Runs one sample through the network, filling ws.outs[i] for every layer.
inline void forward_sample(const NetworkModel& m, const double* x,
                           Workspace& ws) {
  const double* cur = x;
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    const Layer& l = m.layers()[i];
    const Shape3 in = m.layer_input_shape(i);
    const Shape3 out = m.layer_output_shape(i);
    double* y = ws.outs[i].data();
    switch (l.kind) {
      case LayerKind::kConv:
        conv_forward(l, in, out, cur, y);
        break;
      case LayerKind::kRelu:
        for (std::size_t j = 0; j < in.numel(); ++j)
          y[j] = cur[j] > 0.0 ? cur[j] : 0.0;
        break;
      case LayerKind::kMaxPool:
        maxpool_forward(l, in, out, cur, y);
        break;
      case LayerKind::kFlatten:
        std::copy(cur, cur + in.numel(), y);
        break;
      case LayerKind::kDense:
        dense_forward(l, in.numel(), cur, y);
        break;
    }
    cur = y;
  }
}

struct ParamGrads {
  std::vector<std::vector<double>> dw;
  std::vector<std::vector<double>> db;

  void resize_like(const NetworkModel& m) {
    dw.resize(m.layers().size());
    db.resize(m.layers().size());
    for (std::size_t i = 0; i < m.layers().size(); ++i) {
      dw[i].assign(m.layers()[i].weights.size(), 0.0);
      db[i].assign(m.layers()[i].bias.size(), 0.0);
    }
  }
  void zero() {
    for (auto& v : dw) std::fill(v.begin(), v.end(), 0.0);
    for (auto& v : db) std::fill(v.begin(), v.end(), 0.0);
  }
  void accumulate(const ParamGrads& other, double scale) {
    for (std::size_t i = 0; i < dw.size(); ++i) {
      for (std::size_t j = 0; j < dw[i].size(); ++j)
        dw[i][j] += scale * other.dw[i][j];
      for (std::size_t j = 0; j < db[i].size(); ++j)
        db[i][j] += scale * other.db[i][j];
    }
  }
};

/// Vector-Jacobian product through the whole network for one sample.
/// ws must hold the forward pass of x. Writes d(grad_logits . logits)/dx
/// into dx; if grads != nullptr also accumulates parameter gradients.
inline void backward_sample(const NetworkModel& m, const double* x,
                            const Workspace& ws, const double* grad_logits,
                            double* dx, ParamGrads* grads = nullptr) {
  const std::size_t nl = m.layers().size();
  std::vector<double> ga(m.layer_output_shape(nl - 1).numel());
  std::copy(grad_logits, grad_logits + ga.size(), ga.begin());
  std::vector<double> gb;
  for (std::size_t ii = nl; ii-- > 0;) {
    const Layer& l = m.layers()[ii];
    const Shape3 in = m.layer_input_shape(ii);
    const Shape3 out = m.layer_output_shape(ii);
    const double* lx = ii == 0 ? x : ws.outs[ii - 1].data();
    double* dst;
    if (ii == 0) {
      dst = dx;
    } else {
      gb.assign(in.numel(), 0.0);
      dst = gb.data();
    }
    switch (l.kind) {
      case LayerKind::kConv:
        if (grads)
          conv_backward_params(l, in, out, lx, ga.data(),
                               grads->dw[ii].data(), grads->db[ii].data());
        conv_backward_input(l, in, out, ga.data(), dst);
        break;
      case LayerKind::kRelu:
        for (std::size_t j = 0; j < in.numel(); ++j)
          dst[j] = lx[j] > 0.0 ? ga[j] : 0.0;
        break;
      case LayerKind::kMaxPool:
        maxpool_backward(l, in, out, lx, ga.data(), dst);
        break;
      case LayerKind::kFlatten:
        std::copy(ga.begin(), ga.end(), dst);
        break;
      case LayerKind::kDense:
        if (grads)
          dense_backward_params(l, in.numel(), lx, ga.data(),
                                grads->dw[ii].data(), grads->db[ii].data());
        dense_backward_input(l, in.numel(), ga.data(), dst);
        break;
    }
    if (ii != 0) ga.swap(gb);
  }
}

inline std::size_t batch_size_of(const NetworkModel& m, const Tensor& x) {
  const std::size_t in_numel = m.input_shape().numel();
  if (x.rank() == 0 || x.numel() == 0)
    throw ShapeError("empty input batch");
  if (x.shape[0] == 0 || x.numel() % x.shape[0] != 0)
    throw ShapeError("malformed batch tensor " + x.shape_str());
  const std::size_t per = x.numel() / x.shape[0];
  if (per != in_numel)
    throw ShapeError("input (network input layer): got " +
                     std::to_string(per) + " values per sample, expected " +
                     m.input_shape().str());
  return x.shape[0];
}

}  // namespace detail

/// Numerically stable softmax of one logit row.
inline std::vector<double> softmax_row(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax of empty logits");
  for (double v : logits)
    if (!std::isfinite(v)) throw NumericError("non-finite logit in softmax");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

/// Row-wise softmax over a [batch, N] logits tensor.
inline Tensor softmax_probs(const Tensor& logits) {
  if (logits.empty()) throw ShapeError("softmax of empty logits");
  const std::size_t batch = logits.shape.size() > 1 ? logits.shape[0] : 1;
  const std::size_t n = logits.numel() / batch;
  Tensor out(logits.shape);
  for (std::size_t b = 0; b < batch; ++b) {
    auto p = softmax_row(logits.row(b, n));
    std::copy(p.begin(), p.end(), out.data.begin() + b * n);
  }
  return out;
}

/// Forward pass of a batch. Returns logits and value snapshots of every
/// monitored layer; both are copies, detached from the model.
inline ForwardResult forward(const NetworkModel& m, const Tensor& x) {
  if (!m.finalized()) throw ShapeError("network not finalized");
  const std::size_t batch = detail::batch_size_of(m, x);
  const std::size_t in_numel = m.input_shape().numel();
  const std::size_t n_classes = m.num_classes();

  ForwardResult r;
  r.logits = Tensor({batch, n_classes});
  for (std::size_t mi : m.monitored_layers()) {
    r.activations.layers.emplace(
        mi, Tensor({batch, m.layer_output_shape(mi).numel()}));
  }

  parallel_for(batch, [&](std::size_t b) {
    detail::Workspace ws;
    ws.resize(m);
    detail::forward_sample(m, x.data.data() + b * in_numel, ws);
    std::copy(ws.outs.back().begin(), ws.outs.back().end(),
              r.logits.data.begin() + b * n_classes);
    for (std::size_t mi : m.monitored_layers()) {
      Tensor& dst = r.activations.layers.at(mi);
      const std::size_t dim = m.layer_output_shape(mi).numel();
      std::copy(ws.outs[mi].begin(), ws.outs[mi].end(),
                dst.data.begin() + b * dim);
    }
  });
  r.logits.ensure_finite("forward logits");
  r.activations.logits = r.logits;
  return r;
}

/// d(grad_at_logits . logits)/dx for every sample in the batch.
inline Tensor backward_to_input(const NetworkModel& m, const Tensor& x,
                                const Tensor& grad_at_logits) {
  const std::size_t batch = detail::batch_size_of(m, x);
  const std::size_t in_numel = m.input_shape().numel();
  const std::size_t n = m.num_classes();
  if (grad_at_logits.numel() != batch * n)
    throw ShapeError("grad_at_logits: expected " + std::to_string(batch * n) +
                     " values, got " + std::to_string(grad_at_logits.numel()));
  Tensor dx(x.shape);
  parallel_for(batch, [&](std::size_t b) {
    detail::Workspace ws;
    ws.resize(m);
    const double* xb = x.data.data() + b * in_numel;
    detail::forward_sample(m, xb, ws);
    detail::backward_sample(m, xb, ws, grad_at_logits.data.data() + b * n,
                            dx.data.data() + b * in_numel);
  });
  dx.ensure_finite("input gradient");
  return dx;
}

/// Gradient of the cross-entropy loss w.r.t. the input, i.e. the VJP with
/// grad_at_logits = softmax(logits) - onehot(y).
inline Tensor loss_input_gradient(const NetworkModel& m, const Tensor& x,
                                  const std::vector<std::uint32_t>& y) {
  const std::size_t batch = detail::batch_size_of(m, x);
  if (y.size() != batch)
    throw ShapeError("labels: expected " + std::to_string(batch) + ", got " +
                     std::to_string(y.size()));
  const std::size_t n = m.num_classes();
  for (std::uint32_t lab : y)
    if (lab >= n) throw ShapeError("label " + std::to_string(lab) +
                                   " out of range for " + std::to_string(n) +
                                   " classes");
  const Tensor logits = forward(m, x).logits;
  Tensor g = softmax_probs(logits);
  for (std::size_t b = 0; b < batch; ++b) g.data[b * n + y[b]] -= 1.0;
  return backward_to_input(m, x, g);
}

inline std::vector<std::uint32_t> predict(const NetworkModel& m,
                                          const Tensor& x) {
  const Tensor logits = forward(m, x).logits;
  const std::size_t batch = logits.shape[0];
  const std::size_t n = m.num_classes();
  std::vector<std::uint32_t> out(batch);
  for (std::size_t b = 0; b < batch; ++b)
    out[b] = static_cast<std::uint32_t>(argmax(logits.row(b, n)));
  return out;
}

}  // namespace mguard

#endif  // MGUARD_NETWORK_HPP
