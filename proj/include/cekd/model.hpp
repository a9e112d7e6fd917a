#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cekd/rng.hpp"
#include "cekd/tensor.hpp"

namespace cekd {

/// Fixed input standardization (x - input_mean) / input_std, then a conv
/// stack (3x3, stride 1, zero pad 1, ReLU, optional 2x2 mean pool), global
/// average pooling and a linear classifier.
struct NetConfig {
  std::size_t input_channels = 1;
  std::size_t input_hw = 32;
  std::vector<std::size_t> conv_channels{8, 16, 16};
  std::vector<bool> pool_after{true, true, true};
  std::size_t num_classes = 8;
  double input_mean = 0.0;
  double input_std = 1.0;

  static constexpr std::size_t kKernel = 3;

  std::size_t feature_channels() const { return conv_channels.back(); }

  std::size_t feature_hw() const {
    std::size_t hw = input_hw;
    for (bool pool : pool_after)
      if (pool) hw /= 2;
    return hw;
  }

  void validate() const {
    if (input_channels == 0 || input_hw == 0 || num_classes == 0)
      throw std::invalid_argument("NetConfig: extents must be positive");
    if (!std::isfinite(input_mean) || !(input_std > 0.0) || !std::isfinite(input_std))
      throw std::invalid_argument("NetConfig: input_std must be positive and finite");
    if (conv_channels.empty() || conv_channels.size() != pool_after.size())
      throw std::invalid_argument("NetConfig: conv_channels and pool_after must be non-empty and equal length");
    if (std::find(conv_channels.begin(), conv_channels.end(), 0u) != conv_channels.end())
      throw std::invalid_argument("NetConfig: zero conv width");
    std::size_t hw = input_hw;
    for (bool pool : pool_after) {
      if (pool) {
        if (hw % 2 != 0) throw std::invalid_argument("NetConfig: pooling needs even spatial size");
        hw /= 2;
      }
    }
    if (hw < 2) throw std::invalid_argument("NetConfig: final feature map must be at least 2x2");
  }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Network weights. Gradients use the same type.
struct Params {
  NetConfig config;
  std::vector<Tensor> conv_weight;  // [Cout, Cin, 3, 3]
  std::vector<Tensor> conv_bias;    // [Cout]
  Tensor fc_weight;                 // [num_classes, feature_channels]
  Tensor fc_bias;                   // [num_classes]

  static Params zeros(const NetConfig& config) {
    config.validate();
    Params p;
    p.config = config;
    std::size_t in = config.input_channels;
    for (std::size_t out : config.conv_channels) {
      p.conv_weight.emplace_back(Shape{out, in, NetConfig::kKernel, NetConfig::kKernel});
      p.conv_bias.emplace_back(Shape{out});
      in = out;
    }
    p.fc_weight = Tensor({config.num_classes, config.feature_channels()});
    p.fc_bias = Tensor({config.num_classes});
    return p;
  }

  /// All tensors in a fixed order: conv weights and biases by layer, then
  /// the classifier weight and bias.
  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (std::size_t l = 0; l < conv_weight.size(); ++l) {
      out.push_back(&conv_weight[l]);
      out.push_back(&conv_bias[l]);
    }
    out.push_back(&fc_weight);
    out.push_back(&fc_bias);
    return out;
  }
  std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    for (Tensor* t : const_cast<Params*>(this)->tensors()) out.push_back(t);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const Tensor* t : tensors()) n += t->size();
    return n;
  }

  Tensor flatten() const {
    std::vector<double> flat;
    flat.reserve(count());
    for (const Tensor* t : tensors()) flat.insert(flat.end(), t->values().begin(), t->values().end());
    const std::size_t n = flat.size();
    return Tensor({n}, std::move(flat));
  }

  void assign_flat(std::span<const double> flat) {
    if (flat.size() != count()) throw std::invalid_argument("Params::assign_flat: size mismatch");
    std::size_t off = 0;
    for (Tensor* t : tensors()) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t->size(), t->values().begin());
      off += t->size();
    }
  }

  bool all_finite() const {
    for (const Tensor* t : tensors())
      if (!t->all_finite()) return false;
    return true;
  }

  friend bool operator==(const Params&, const Params&) = default;
};

struct LayerTrace {
  Tensor input;  // [N, Cin, H, W]
  Tensor pre;    // [N, Cout, H, W], before ReLU
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  Tensor features;  // [N, K, h, w], final conv block output
  Tensor pooled;    // [N, K]
  Tensor logits;    // [N, num_classes]

  std::size_t batch() const { return logits.dim(0); }
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Unrolls 3x3 zero-padded patches of x [C,H,W] into cols [C*9, H*W].
inline void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w,
                   RowMatrix& cols) {
  cols.resize(static_cast<Eigen::Index>(c * 9), static_cast<Eigen::Index>(h * w));
  double* out = cols.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = x + ch * h * w;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        for (std::size_t y = 0; y < h; ++y, out += w) {
          if (y + ky < 1 || y + ky > h) {
            std::fill(out, out + w, 0.0);
            continue;
          }
          const double* row = plane + (y + ky - 1) * w;
          if (kx == 0) {
            out[0] = 0.0;
            std::copy(row, row + w - 1, out + 1);
          } else if (kx == 1) {
            std::copy(row, row + w, out);
          } else {
            std::copy(row + 1, row + w, out);
            out[w - 1] = 0.0;
          }
        }
      }
    }
  }
}

// Scatter-adds cols [C*9, H*W] back into dx [C,H,W].
inline void col2im(const RowMatrix& cols, std::size_t c, std::size_t h, std::size_t w,
                   double* dx) {
  const double* in = cols.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double* plane = dx + ch * h * w;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        for (std::size_t y = 0; y < h; ++y, in += w) {
          if (y + ky < 1 || y + ky > h) continue;
          double* row = plane + (y + ky - 1) * w;
          if (kx == 0) {
            for (std::size_t i = 1; i < w; ++i) row[i - 1] += in[i];
          } else if (kx == 1) {
            for (std::size_t i = 0; i < w; ++i) row[i] += in[i];
          } else {
            for (std::size_t i = 0; i + 1 < w; ++i) row[i + 1] += in[i];
          }
        }
      }
    }
  }
}

inline void check_params(const Params& params) {
  const NetConfig& cfg = params.config;
  if (params.conv_weight.size() != cfg.conv_channels.size() ||
      params.conv_bias.size() != cfg.conv_channels.size())
    throw std::invalid_argument("Params: layer count does not match config");
  std::size_t in = cfg.input_channels;
  for (std::size_t l = 0; l < cfg.conv_channels.size(); ++l) {
    const std::size_t out = cfg.conv_channels[l];
    if (params.conv_weight[l].shape() != Shape{out, in, 3, 3} ||
        params.conv_bias[l].shape() != Shape{out})
      throw std::invalid_argument("Params: conv layer " + std::to_string(l) + " has wrong shape");
    in = out;
  }
  if (params.fc_weight.shape() != Shape{cfg.num_classes, cfg.feature_channels()} ||
      params.fc_bias.shape() != Shape{cfg.num_classes})
    throw std::invalid_argument("Params: classifier has wrong shape");
}

}  // namespace detail

/// Zero-mean normal weights with He fan-in scaling sqrt(2 / fan_in) for the
/// conv layers and sqrt(1 / fan_in) for the classifier; zero biases.
inline double init_std(std::size_t fan_in, bool relu) {
  return std::sqrt((relu ? 2.0 : 1.0) / static_cast<double>(fan_in));
}

inline Params init_params(const NetConfig& config, RngStream rng) {
  Params p = Params::zeros(config);
  for (std::size_t l = 0; l < p.conv_weight.size(); ++l) {
    Tensor& w = p.conv_weight[l];
    const double std = init_std(w.dim(1) * 9, true);
    RngStream local = rng.child(l);
    for (double& v : w.values()) v = std * local.normal();
  }
  const double std = init_std(config.feature_channels(), false);
  RngStream local = rng.child("classifier");
  for (double& v : p.fc_weight.values()) v = std * local.normal();
  return p;
}

/// Logits and cached activations for a batch [N, C, H, W].
inline ForwardTrace forward(const Params& params, const Tensor& images) {
  using namespace detail;
  check_params(params);
  const NetConfig& cfg = params.config;
  if (images.rank() != 4 || images.dim(1) != cfg.input_channels ||
      images.dim(2) != cfg.input_hw || images.dim(3) != cfg.input_hw)
    throw std::invalid_argument("forward: expected images of shape [N," +
                                std::to_string(cfg.input_channels) + "," +
                                std::to_string(cfg.input_hw) + "," +
                                std::to_string(cfg.input_hw) + "], got " +
                                shape_string(images.shape()));
  const std::size_t n = images.dim(0);
  ForwardTrace trace;
  trace.layers.reserve(cfg.conv_channels.size());

  Tensor x = images;
  if (cfg.input_mean != 0.0 || cfg.input_std != 1.0) {
    const double inv = 1.0 / cfg.input_std;
    for (double& v : x.values()) v = (v - cfg.input_mean) * inv;
  }
  std::size_t cin = cfg.input_channels;
  std::size_t hw = cfg.input_hw;
  RowMatrix cols;
  for (std::size_t l = 0; l < cfg.conv_channels.size(); ++l) {
    const std::size_t cout = cfg.conv_channels[l];
    const std::size_t plane = hw * hw;
    Tensor pre({n, cout, hw, hw});
    ConstMatrixMap weight(params.conv_weight[l].data(), static_cast<Eigen::Index>(cout),
                          static_cast<Eigen::Index>(cin * 9));
    Eigen::Map<const Eigen::VectorXd> bias(params.conv_bias[l].data(),
                                           static_cast<Eigen::Index>(cout));
    for (std::size_t s = 0; s < n; ++s) {
      im2col(x.slice(s).data(), cin, hw, hw, cols);
      MatrixMap out(pre.slice(s).data(), static_cast<Eigen::Index>(cout),
                    static_cast<Eigen::Index>(plane));
      out.noalias() = weight * cols;
      out.colwise() += bias;
    }

    const std::size_t ohw = cfg.pool_after[l] ? hw / 2 : hw;
    Tensor y({n, cout, ohw, ohw});
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t ch = 0; ch < cout; ++ch) {
        const double* src = pre.data() + (s * cout + ch) * plane;
        double* dst = y.data() + (s * cout + ch) * ohw * ohw;
        if (cfg.pool_after[l]) {
          for (std::size_t oy = 0; oy < ohw; ++oy)
            for (std::size_t ox = 0; ox < ohw; ++ox) {
              const std::size_t i = 2 * oy * hw + 2 * ox;
              dst[oy * ohw + ox] = 0.25 * (std::max(src[i], 0.0) + std::max(src[i + 1], 0.0) +
                                           std::max(src[i + hw], 0.0) +
                                           std::max(src[i + hw + 1], 0.0));
            }
        } else {
          for (std::size_t i = 0; i < plane; ++i) dst[i] = std::max(src[i], 0.0);
        }
      }
    }
    trace.layers.push_back({std::move(x), std::move(pre)});
    x = std::move(y);
    cin = cout;
    hw = ohw;
  }

  const std::size_t k = cin;
  const std::size_t cells = hw * hw;
  trace.pooled = Tensor({n, k});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < k; ++ch) {
      const double* f = x.data() + (s * k + ch) * cells;
      double total = 0.0;
      for (std::size_t i = 0; i < cells; ++i) total += f[i];
      trace.pooled(s, ch) = total / static_cast<double>(cells);
    }
  trace.features = std::move(x);

  const std::size_t classes = cfg.num_classes;
  trace.logits = Tensor({n, classes});
  ConstMatrixMap fc(params.fc_weight.data(), static_cast<Eigen::Index>(classes),
                    static_cast<Eigen::Index>(k));
  ConstMatrixMap pooled(trace.pooled.data(), static_cast<Eigen::Index>(n),
                        static_cast<Eigen::Index>(k));
  MatrixMap logits(trace.logits.data(), static_cast<Eigen::Index>(n),
                   static_cast<Eigen::Index>(classes));
  logits.noalias() = pooled * fc.transpose();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t c = 0; c < classes; ++c) trace.logits(s, c) += params.fc_bias[c];
  return trace;
}

/// Gradient of sum(logits * dlogits) with respect to every parameter.
inline Params backward(const Params& params, const ForwardTrace& trace, const Tensor& dlogits) {
  using namespace detail;
  check_params(params);
  const NetConfig& cfg = params.config;
  if (trace.layers.size() != cfg.conv_channels.size() || trace.logits.empty() ||
      trace.logits.dim(1) != cfg.num_classes || trace.features.dim(1) != cfg.feature_channels())
    throw std::invalid_argument("backward: trace does not match params");
  if (dlogits.shape() != trace.logits.shape())
    throw std::invalid_argument("backward: dlogits shape " + shape_string(dlogits.shape()) +
                                " does not match logits " + shape_string(trace.logits.shape()));

  Params grads = Params::zeros(cfg);
  const std::size_t n = trace.batch();
  const std::size_t k = cfg.feature_channels();
  const std::size_t classes = cfg.num_classes;

  ConstMatrixMap dl(dlogits.data(), static_cast<Eigen::Index>(n),
                    static_cast<Eigen::Index>(classes));
  ConstMatrixMap pooled(trace.pooled.data(), static_cast<Eigen::Index>(n),
                        static_cast<Eigen::Index>(k));
  ConstMatrixMap fc(params.fc_weight.data(), static_cast<Eigen::Index>(classes),
                    static_cast<Eigen::Index>(k));
  MatrixMap(grads.fc_weight.data(), static_cast<Eigen::Index>(classes),
            static_cast<Eigen::Index>(k))
      .noalias() = dl.transpose() * pooled;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t c = 0; c < classes; ++c) grads.fc_bias[c] += dlogits(s, c);
  const RowMatrix dpooled = dl * fc;

  // Gradient flowing into the output of the current conv block.
  Tensor dy(trace.features.shape());
  {
    const std::size_t h = trace.features.dim(2);
    const std::size_t cells = h * h;
    const double inv = 1.0 / static_cast<double>(cells);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < k; ++ch) {
        double* d = dy.data() + (s * k + ch) * cells;
        const double g = dpooled(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(ch)) * inv;
        std::fill(d, d + cells, g);
      }
  }

  RowMatrix cols;
  RowMatrix dcols;
  for (std::size_t li = cfg.conv_channels.size(); li-- > 0;) {
    const LayerTrace& layer = trace.layers[li];
    const std::size_t cin = layer.input.dim(1);
    const std::size_t cout = cfg.conv_channels[li];
    const std::size_t hw = layer.pre.dim(2);
    const std::size_t plane = hw * hw;
    const bool pooled_layer = cfg.pool_after[li];
    const std::size_t ohw = pooled_layer ? hw / 2 : hw;

    ConstMatrixMap weight(params.conv_weight[li].data(), static_cast<Eigen::Index>(cout),
                          static_cast<Eigen::Index>(cin * 9));
    MatrixMap dweight(grads.conv_weight[li].data(), static_cast<Eigen::Index>(cout),
                      static_cast<Eigen::Index>(cin * 9));
    Tensor dx = li > 0 ? Tensor(layer.input.shape()) : Tensor();
    RowMatrix dpre(static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(plane));

    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t ch = 0; ch < cout; ++ch) {
        const double* pre = layer.pre.data() + (s * cout + ch) * plane;
        const double* g = dy.data() + (s * cout + ch) * ohw * ohw;
        double* d = dpre.data() + ch * plane;
        for (std::size_t y = 0; y < hw; ++y)
          for (std::size_t x = 0; x < hw; ++x) {
            const std::size_t i = y * hw + x;
            const double up = pooled_layer ? 0.25 * g[(y / 2) * ohw + x / 2] : g[i];
            d[i] = pre[i] > 0.0 ? up : 0.0;
          }
      }
      im2col(layer.input.slice(s).data(), cin, hw, hw, cols);
      dweight.noalias() += dpre * cols.transpose();
      for (std::size_t ch = 0; ch < cout; ++ch)
        grads.conv_bias[li][ch] += dpre.row(static_cast<Eigen::Index>(ch)).sum();
      if (li > 0) {
        dcols.noalias() = weight.transpose() * dpre;
        col2im(dcols, cin, hw, hw, dx.slice(s).data());
      }
    }
    if (li > 0) dy = std::move(dx);
  }
  return grads;
}

/// CAM(y, x) = sum_k W_fc[class, k] * F[k, y, x] for batch entry `sample`, at
/// feature resolution.
inline Tensor cam(const Params& params, const ForwardTrace& trace, std::size_t sample,
                  std::size_t class_idx) {
  if (class_idx >= params.config.num_classes)
    throw std::invalid_argument("cam: class index " + std::to_string(class_idx) +
                                " out of range");
  if (sample >= trace.batch()) throw std::invalid_argument("cam: sample index out of range");
  const std::size_t k = trace.features.dim(1);
  const std::size_t h = trace.features.dim(2);
  const std::size_t w = trace.features.dim(3);
  Tensor out({h, w});
  for (std::size_t ch = 0; ch < k; ++ch) {
    const double weight = params.fc_weight(class_idx, ch);
    const double* f = trace.features.data() + (sample * k + ch) * h * w;
    for (std::size_t i = 0; i < h * w; ++i) out[i] += weight * f[i];
  }
  return out;
}

inline std::size_t argmax(std::span<const double> values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

/// Heavy-ball momentum buffers, one per parameter tensor.
struct OptState {
  std::vector<Tensor> velocity;
  std::uint64_t step = 0;
  double lr = 0.0;

  static OptState for_params(const Params& params) {
    OptState s;
    for (const Tensor* t : params.tensors()) s.velocity.emplace_back(t->shape());
    return s;
  }
};

/// v <- momentum * v + g; theta <- theta - lr * v.
inline void sgd_step(Params& params, const Params& grads, OptState& state, double lr,
                     double momentum) {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("sgd_step: momentum must lie in [0, 1)");
  auto theta = params.tensors();
  auto g = grads.tensors();
  if (state.velocity.empty()) state = OptState::for_params(params);
  if (g.size() != theta.size() || state.velocity.size() != theta.size())
    throw std::invalid_argument("sgd_step: params, grads and state disagree");
  for (std::size_t t = 0; t < theta.size(); ++t) {
    theta[t]->require_same_shape(*g[t], "sgd_step");
    theta[t]->require_same_shape(state.velocity[t], "sgd_step");
    double* v = state.velocity[t].data();
    double* p = theta[t]->data();
    const double* d = g[t]->data();
    for (std::size_t i = 0; i < theta[t]->size(); ++i) {
      v[i] = momentum * v[i] + d[i];
      p[i] -= lr * v[i];
    }
  }
  ++state.step;
  state.lr = lr;
}

/// Step decay: base_lr * factor^floor(epoch / decay_every).
inline double lr_schedule(std::size_t epoch, double base_lr, std::size_t decay_every,
                          double factor) {
  if (decay_every == 0) return base_lr;
  return base_lr * std::pow(factor, static_cast<double>(epoch / decay_every));
}

}  // namespace cekd
