// mcasc/model.hpp
//
// Copyright 2026 The mcasc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// From-scratch CNN classifier: three conv+BN+ReLU blocks, max pooling,
// global max pooling, two dense layers, softmax cross-entropy, and the
// rectified-Adam optimizer. Forward and backward passes are hand-written
// and checked against finite differences in the test suite.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mcasc/augment.hpp"
#include "mcasc/common.hpp"
#include "mcasc/tensorio.hpp"

namespace mcasc {

// Topology is fixed (conv 7x1 -> pool 4x1 -> conv 10x1 -> conv 1x7 ->
// global max pool -> dense -> softmax); widths and input size are
// parameters so the same network runs at full size and desk scale.
struct NetworkConfig {
  int input_f = 40;
  int input_t = 501;
  int input_c = 16;
  int conv1_out = 64;
  int conv2_out = 128;
  int conv3_out = 256;
  int dense_hidden = 128;
  int n_classes = 9;
  double dropout1 = 0.2;
  double dropout2 = 0.5;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;

  static constexpr int kConv1H = 7, kConv1W = 1;
  static constexpr int kConv2H = 10, kConv2W = 1;
  static constexpr int kConv3H = 1, kConv3W = 7;
  static constexpr int kPoolH = 4;

  int pooled_f() const { return input_f / kPoolH; }

  void validate() const {
    Require(input_f >= kPoolH && input_t >= kConv3W,
            "config: input smaller than kernels");
    Require(n_classes >= 2, "config: need at least 2 classes");
    Require(conv1_out >= 1 && conv2_out >= 1 && conv3_out >= 1 &&
                dense_hidden >= 1,
            "config: layer widths must be positive");
  }

  bool operator==(const NetworkConfig&) const = default;
};

struct RAdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ConvParams {
  int kh = 0, kw = 0, in_ch = 0, out_ch = 0;
  std::vector<double> w;  // [out][kh][kw][in]
  std::vector<double> b;  // [out]
};

struct BatchNormParams {
  std::vector<double> gamma, beta, run_mean, run_var;
};

struct DenseParams {
  int in = 0, out = 0;
  std::vector<double> w;  // [out][in]
  std::vector<double> b;
};

struct ModelState {
  NetworkConfig cfg;
  ConvParams conv1, conv2, conv3;
  BatchNormParams bn1, bn2, bn3;
  DenseParams fc1, fc2;
  // Optimizer slots over the flattened trainable parameters.
  std::vector<double> opt_m, opt_v;
  std::int64_t opt_step = 0;
};

struct Gradients {
  ConvParams conv1, conv2, conv3;        // w/b reused as gradient buffers
  BatchNormParams bn1, bn2, bn3;         // gamma/beta only
  DenseParams fc1, fc2;
};

namespace detail {

// Trainable parameters in declaration order. Running stats are not listed.
template <typename State, typename Fn>
void for_each_param(State& s, Fn&& fn) {
  fn(s.conv1.w); fn(s.conv1.b); fn(s.bn1.gamma); fn(s.bn1.beta);
  fn(s.conv2.w); fn(s.conv2.b); fn(s.bn2.gamma); fn(s.bn2.beta);
  fn(s.conv3.w); fn(s.conv3.b); fn(s.bn3.gamma); fn(s.bn3.beta);
  fn(s.fc1.w); fn(s.fc1.b); fn(s.fc2.w); fn(s.fc2.b);
}

inline std::size_t param_count(const ModelState& s) {
  std::size_t n = 0;
  for_each_param(s, [&](const std::vector<double>& v) { n += v.size(); });
  return n;
}

inline void he_uniform(std::vector<double>& w, int fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / fan_in);
  for (auto& v : w) v = limit * (2.0 * rng.uniform_real() - 1.0);
}

}  // namespace detail

inline ModelState init_model(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState s;
  s.cfg = cfg;
  Rng rng(mix_seed(seed, 0x696e6974ULL));

  auto make_conv = [&](ConvParams& c, int kh, int kw, int in_ch, int out_ch) {
    c.kh = kh; c.kw = kw; c.in_ch = in_ch; c.out_ch = out_ch;
    c.w.resize(static_cast<std::size_t>(out_ch) * kh * kw * in_ch);
    c.b.assign(out_ch, 0.0);
    detail::he_uniform(c.w, kh * kw * in_ch, rng);
  };
  auto make_bn = [&](BatchNormParams& bn, int ch) {
    bn.gamma.assign(ch, 1.0);
    bn.beta.assign(ch, 0.0);
    bn.run_mean.assign(ch, 0.0);
    bn.run_var.assign(ch, 1.0);
  };
  auto make_dense = [&](DenseParams& d, int in, int out) {
    d.in = in; d.out = out;
    d.w.resize(static_cast<std::size_t>(out) * in);
    d.b.assign(out, 0.0);
    detail::he_uniform(d.w, in, rng);
  };

  make_conv(s.conv1, cfg.kConv1H, cfg.kConv1W, cfg.input_c, cfg.conv1_out);
  make_bn(s.bn1, cfg.conv1_out);
  make_conv(s.conv2, cfg.kConv2H, cfg.kConv2W, cfg.conv1_out, cfg.conv2_out);
  make_bn(s.bn2, cfg.conv2_out);
  make_conv(s.conv3, cfg.kConv3H, cfg.kConv3W, cfg.conv2_out, cfg.conv3_out);
  make_bn(s.bn3, cfg.conv3_out);
  make_dense(s.fc1, cfg.conv3_out, cfg.dense_hidden);
  make_dense(s.fc2, cfg.dense_hidden, cfg.n_classes);

  s.opt_m.assign(detail::param_count(s), 0.0);
  s.opt_v.assign(detail::param_count(s), 0.0);
  s.opt_step = 0;
  return s;
}

inline Gradients make_gradients(const ModelState& s) {
  Gradients g;
  auto like_conv = [](ConvParams& gc, const ConvParams& c) {
    gc.kh = c.kh; gc.kw = c.kw; gc.in_ch = c.in_ch; gc.out_ch = c.out_ch;
    gc.w.assign(c.w.size(), 0.0);
    gc.b.assign(c.b.size(), 0.0);
  };
  auto like_bn = [](BatchNormParams& gb, const BatchNormParams& b) {
    gb.gamma.assign(b.gamma.size(), 0.0);
    gb.beta.assign(b.beta.size(), 0.0);
  };
  auto like_dense = [](DenseParams& gd, const DenseParams& d) {
    gd.in = d.in; gd.out = d.out;
    gd.w.assign(d.w.size(), 0.0);
    gd.b.assign(d.b.size(), 0.0);
  };
  like_conv(g.conv1, s.conv1); like_bn(g.bn1, s.bn1);
  like_conv(g.conv2, s.conv2); like_bn(g.bn2, s.bn2);
  like_conv(g.conv3, s.conv3); like_bn(g.bn3, s.bn3);
  like_dense(g.fc1, s.fc1); like_dense(g.fc2, s.fc2);
  return g;
}

enum class ForwardMode {
  kTrain,       // batch statistics, dropout on, running stats updated
  kInfer,       // running statistics, no dropout
  kFrozenStats  // running statistics, no dropout, gradients still flow
};

namespace detail {

// Channel-last activation block: index ((n*H + h)*W + w)*K + k.
struct Act {
  int N = 0, H = 0, W = 0, K = 0;
  std::vector<double> v;
  void resize(int n, int h, int w, int k) {
    N = n; H = h; W = w; K = k;
    v.assign(static_cast<std::size_t>(n) * h * w * k, 0.0);
  }
  std::size_t idx(int n, int h, int w, int k) const {
    return ((static_cast<std::size_t>(n) * H + h) * W + w) * K + k;
  }
};

// "Same" convolution, stride 1. Even kernels pad (k-1)/2 before and the
// remainder after, so output spatial size equals input size.
inline void conv_forward(const Act& in, const ConvParams& p, Act& out) {
  const int pt = (p.kh - 1) / 2, pl = (p.kw - 1) / 2;
  out.resize(in.N, in.H, in.W, p.out_ch);
  for (int n = 0; n < in.N; ++n)
    for (int y = 0; y < in.H; ++y)
      for (int x = 0; x < in.W; ++x) {
        double* o = &out.v[out.idx(n, y, x, 0)];
        for (int oc = 0; oc < p.out_ch; ++oc) o[oc] = p.b[oc];
        for (int dy = 0; dy < p.kh; ++dy) {
          const int yy = y + dy - pt;
          if (yy < 0 || yy >= in.H) continue;
          for (int dx = 0; dx < p.kw; ++dx) {
            const int xx = x + dx - pl;
            if (xx < 0 || xx >= in.W) continue;
            const double* src = &in.v[in.idx(n, yy, xx, 0)];
            for (int oc = 0; oc < p.out_ch; ++oc) {
              const double* wrow =
                  &p.w[((static_cast<std::size_t>(oc) * p.kh + dy) * p.kw + dx) *
                       p.in_ch];
              double acc = 0.0;
              for (int ic = 0; ic < p.in_ch; ++ic) acc += wrow[ic] * src[ic];
              o[oc] += acc;
            }
          }
        }
      }
}

inline void conv_backward(const Act& in, const ConvParams& p, const Act& dout,
                          ConvParams& gp, Act& din) {
  const int pt = (p.kh - 1) / 2, pl = (p.kw - 1) / 2;
  din.resize(in.N, in.H, in.W, in.K);
  for (int n = 0; n < in.N; ++n)
    for (int y = 0; y < in.H; ++y)
      for (int x = 0; x < in.W; ++x) {
        const double* d = &dout.v[dout.idx(n, y, x, 0)];
        for (int oc = 0; oc < p.out_ch; ++oc) gp.b[oc] += d[oc];
        for (int dy = 0; dy < p.kh; ++dy) {
          const int yy = y + dy - pt;
          if (yy < 0 || yy >= in.H) continue;
          for (int dx = 0; dx < p.kw; ++dx) {
            const int xx = x + dx - pl;
            if (xx < 0 || xx >= in.W) continue;
            const double* src = &in.v[in.idx(n, yy, xx, 0)];
            double* dsrc = &din.v[din.idx(n, yy, xx, 0)];
            for (int oc = 0; oc < p.out_ch; ++oc) {
              const double g = d[oc];
              if (g == 0.0) continue;
              const std::size_t wbase =
                  ((static_cast<std::size_t>(oc) * p.kh + dy) * p.kw + dx) *
                  p.in_ch;
              for (int ic = 0; ic < p.in_ch; ++ic) {
                gp.w[wbase + ic] += g * src[ic];
                dsrc[ic] += g * p.w[wbase + ic];
              }
            }
          }
        }
      }
}

struct BnCache {
  std::vector<double> mean, inv_std, xhat;
};

inline void bn_forward(Act& a, BatchNormParams& bn, double momentum,
                       double eps, ForwardMode mode, BnCache& cache) {
  const int K = a.K;
  const std::size_t M = a.v.size() / K;
  cache.mean.assign(K, 0.0);
  cache.inv_std.assign(K, 0.0);
  cache.xhat.assign(a.v.size(), 0.0);

  std::vector<double> var(K, 0.0);
  if (mode == ForwardMode::kTrain) {
    for (std::size_t i = 0; i < a.v.size(); ++i)
      cache.mean[i % K] += a.v[i];
    for (int k = 0; k < K; ++k) cache.mean[k] /= static_cast<double>(M);
    for (std::size_t i = 0; i < a.v.size(); ++i) {
      const double d = a.v[i] - cache.mean[i % K];
      var[i % K] += d * d;
    }
    for (int k = 0; k < K; ++k) var[k] /= static_cast<double>(M);
    for (int k = 0; k < K; ++k) {
      bn.run_mean[k] = momentum * bn.run_mean[k] + (1.0 - momentum) * cache.mean[k];
      bn.run_var[k] = momentum * bn.run_var[k] + (1.0 - momentum) * var[k];
    }
  } else {
    cache.mean = bn.run_mean;
    var = bn.run_var;
  }
  for (int k = 0; k < K; ++k) cache.inv_std[k] = 1.0 / std::sqrt(var[k] + eps);
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const int k = static_cast<int>(i % K);
    cache.xhat[i] = (a.v[i] - cache.mean[k]) * cache.inv_std[k];
    a.v[i] = bn.gamma[k] * cache.xhat[i] + bn.beta[k];
  }
}

inline void bn_backward(Act& d, const BatchNormParams& bn,
                        const BnCache& cache, ForwardMode mode,
                        BatchNormParams& gbn) {
  const int K = d.K;
  const std::size_t M = d.v.size() / K;
  std::vector<double> sum_d(K, 0.0), sum_dx(K, 0.0);
  for (std::size_t i = 0; i < d.v.size(); ++i) {
    const int k = static_cast<int>(i % K);
    sum_d[k] += d.v[i];
    sum_dx[k] += d.v[i] * cache.xhat[i];
  }
  for (int k = 0; k < K; ++k) {
    gbn.gamma[k] += sum_dx[k];
    gbn.beta[k] += sum_d[k];
  }
  if (mode == ForwardMode::kTrain) {
    for (std::size_t i = 0; i < d.v.size(); ++i) {
      const int k = static_cast<int>(i % K);
      d.v[i] = bn.gamma[k] * cache.inv_std[k] *
               (d.v[i] - sum_d[k] / M - cache.xhat[i] * sum_dx[k] / M);
    }
  } else {
    for (std::size_t i = 0; i < d.v.size(); ++i) {
      const int k = static_cast<int>(i % K);
      d.v[i] = bn.gamma[k] * cache.inv_std[k] * d.v[i];
    }
  }
}

inline void relu_forward(Act& a, std::vector<std::uint8_t>& mask) {
  mask.assign(a.v.size(), 0);
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    if (a.v[i] > 0.0)
      mask[i] = 1;
    else
      a.v[i] = 0.0;
  }
}

inline void relu_backward(Act& d, const std::vector<std::uint8_t>& mask) {
  for (std::size_t i = 0; i < d.v.size(); ++i)
    if (!mask[i]) d.v[i] = 0.0;
}

// Max pool over kPoolH rows, stride kPoolH, width untouched. First maximum
// wins on ties.
inline void maxpool_forward(const Act& in, int pool_h, Act& out,
                            std::vector<int>& argmax) {
  const int oh = in.H / pool_h;
  out.resize(in.N, oh, in.W, in.K);
  argmax.assign(out.v.size(), 0);
  for (int n = 0; n < in.N; ++n)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < in.W; ++x)
        for (int k = 0; k < in.K; ++k) {
          int best = y * pool_h;
          double bv = in.v[in.idx(n, best, x, k)];
          for (int r = 1; r < pool_h; ++r) {
            const double v = in.v[in.idx(n, y * pool_h + r, x, k)];
            if (v > bv) {
              bv = v;
              best = y * pool_h + r;
            }
          }
          const std::size_t oi = out.idx(n, y, x, k);
          out.v[oi] = bv;
          argmax[oi] = best;
        }
}

inline void maxpool_backward(const Act& dout, const Act& in_shape,
                             const std::vector<int>& argmax, Act& din) {
  din.resize(in_shape.N, in_shape.H, in_shape.W, in_shape.K);
  for (int n = 0; n < dout.N; ++n)
    for (int y = 0; y < dout.H; ++y)
      for (int x = 0; x < dout.W; ++x)
        for (int k = 0; k < dout.K; ++k) {
          const std::size_t oi = dout.idx(n, y, x, k);
          din.v[din.idx(n, argmax[oi], x, k)] += dout.v[oi];
        }
}

inline void global_maxpool_forward(const Act& in, Act& out,
                                   std::vector<int>& argmax) {
  out.resize(in.N, 1, 1, in.K);
  argmax.assign(out.v.size(), 0);
  for (int n = 0; n < in.N; ++n)
    for (int k = 0; k < in.K; ++k) {
      int best = 0;
      double bv = in.v[in.idx(n, 0, 0, k)];
      for (int y = 0; y < in.H; ++y)
        for (int x = 0; x < in.W; ++x) {
          const double v = in.v[in.idx(n, y, x, k)];
          if (v > bv) {
            bv = v;
            best = y * in.W + x;
          }
        }
      out.v[out.idx(n, 0, 0, k)] = bv;
      argmax[out.idx(n, 0, 0, k)] = best;
    }
}

inline void global_maxpool_backward(const Act& dout, const Act& in_shape,
                                    const std::vector<int>& argmax, Act& din) {
  din.resize(in_shape.N, in_shape.H, in_shape.W, in_shape.K);
  for (int n = 0; n < dout.N; ++n)
    for (int k = 0; k < dout.K; ++k) {
      const std::size_t oi = dout.idx(n, 0, 0, k);
      const int y = argmax[oi] / in_shape.W, x = argmax[oi] % in_shape.W;
      din.v[din.idx(n, y, x, k)] += dout.v[oi];
    }
}

// Inverted dropout: kept units scaled by 1/keep so inference needs no
// rescaling.
inline void dropout_forward(Act& a, double rate, ForwardMode mode, Rng& rng,
                            std::vector<double>& mask) {
  if (mode != ForwardMode::kTrain || rate <= 0.0) {
    mask.clear();
    return;
  }
  const double keep = 1.0 - rate;
  mask.assign(a.v.size(), 0.0);
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    mask[i] = rng.uniform_real() < keep ? 1.0 / keep : 0.0;
    a.v[i] *= mask[i];
  }
}

inline void dropout_backward(Act& d, const std::vector<double>& mask) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < d.v.size(); ++i) d.v[i] *= mask[i];
}

inline void dense_forward(const Act& in, const DenseParams& p, Act& out) {
  out.resize(in.N, 1, 1, p.out);
  for (int n = 0; n < in.N; ++n) {
    const double* x = &in.v[in.idx(n, 0, 0, 0)];
    double* y = &out.v[out.idx(n, 0, 0, 0)];
    for (int o = 0; o < p.out; ++o) {
      const double* wrow = &p.w[static_cast<std::size_t>(o) * p.in];
      double acc = p.b[o];
      for (int i = 0; i < p.in; ++i) acc += wrow[i] * x[i];
      y[o] = acc;
    }
  }
}

inline void dense_backward(const Act& in, const DenseParams& p,
                           const Act& dout, DenseParams& gp, Act& din) {
  din.resize(in.N, 1, 1, p.in);
  for (int n = 0; n < in.N; ++n) {
    const double* x = &in.v[in.idx(n, 0, 0, 0)];
    const double* d = &dout.v[dout.idx(n, 0, 0, 0)];
    double* dx = &din.v[din.idx(n, 0, 0, 0)];
    for (int o = 0; o < p.out; ++o) {
      const double g = d[o];
      gp.b[o] += g;
      const double* wrow = &p.w[static_cast<std::size_t>(o) * p.in];
      double* gw = &gp.w[static_cast<std::size_t>(o) * p.in];
      for (int i = 0; i < p.in; ++i) {
        gw[i] += g * x[i];
        dx[i] += g * wrow[i];
      }
    }
  }
}

inline void softmax_rows(Act& a) {
  for (int n = 0; n < a.N; ++n) {
    double* row = &a.v[a.idx(n, 0, 0, 0)];
    double mx = row[0];
    for (int k = 1; k < a.K; ++k) mx = std::max(mx, row[k]);
    double sum = 0.0;
    for (int k = 0; k < a.K; ++k) {
      row[k] = std::exp(row[k] - mx);
      sum += row[k];
    }
    for (int k = 0; k < a.K; ++k) row[k] /= sum;
  }
}

struct ForwardCache {
  Act input, conv1_out, pool_in, pool_out, conv2_in, conv2_out, conv3_in,
      conv3_out, gmp_in, gmp_out, fc1_in, fc1_out, fc2_in, probs;
  BnCache bn1, bn2, bn3;
  std::vector<std::uint8_t> relu1, relu2, relu3, relu_fc;
  std::vector<int> pool_arg, gmp_arg;
  std::vector<double> drop1, drop2;
};

inline void pack_batch(const std::vector<const FeatureTensor*>& xs,
                       const NetworkConfig& cfg, Act& out) {
  Require(!xs.empty(), "forward: empty batch");
  for (const auto* x : xs)
    Require(x->F == cfg.input_f && x->T == cfg.input_t && x->C == cfg.input_c,
            "forward: tensor dims do not match network config");
  out.resize(static_cast<int>(xs.size()), cfg.input_f, cfg.input_t,
             cfg.input_c);
  // FeatureTensor storage (f, t, c) matches the (H, W, K) activation layout.
  for (std::size_t n = 0; n < xs.size(); ++n)
    std::copy(xs[n]->data.begin(), xs[n]->data.end(),
              out.v.begin() + static_cast<std::ptrdiff_t>(n) * xs[n]->data.size());
}

inline void forward_impl(ModelState& s, const std::vector<const FeatureTensor*>& xs,
                         ForwardMode mode, Rng& rng, ForwardCache& cc) {
  const NetworkConfig& cfg = s.cfg;
  pack_batch(xs, cfg, cc.input);

  conv_forward(cc.input, s.conv1, cc.conv1_out);
  bn_forward(cc.conv1_out, s.bn1, cfg.bn_momentum, cfg.bn_eps, mode, cc.bn1);
  relu_forward(cc.conv1_out, cc.relu1);
  cc.pool_in = cc.conv1_out;
  maxpool_forward(cc.pool_in, cfg.kPoolH, cc.pool_out, cc.pool_arg);
  dropout_forward(cc.pool_out, cfg.dropout1, mode, rng, cc.drop1);

  cc.conv2_in = cc.pool_out;
  conv_forward(cc.conv2_in, s.conv2, cc.conv2_out);
  bn_forward(cc.conv2_out, s.bn2, cfg.bn_momentum, cfg.bn_eps, mode, cc.bn2);
  relu_forward(cc.conv2_out, cc.relu2);

  cc.conv3_in = cc.conv2_out;
  conv_forward(cc.conv3_in, s.conv3, cc.conv3_out);
  bn_forward(cc.conv3_out, s.bn3, cfg.bn_momentum, cfg.bn_eps, mode, cc.bn3);
  relu_forward(cc.conv3_out, cc.relu3);

  cc.gmp_in = cc.conv3_out;
  global_maxpool_forward(cc.gmp_in, cc.gmp_out, cc.gmp_arg);
  dropout_forward(cc.gmp_out, cfg.dropout2, mode, rng, cc.drop2);

  cc.fc1_in = cc.gmp_out;
  dense_forward(cc.fc1_in, s.fc1, cc.fc1_out);
  relu_forward(cc.fc1_out, cc.relu_fc);

  cc.fc2_in = cc.fc1_out;
  dense_forward(cc.fc2_in, s.fc2, cc.probs);
  softmax_rows(cc.probs);
}

}  // namespace detail

// Per-example class probability vectors (rows sum to 1).
inline std::vector<std::vector<double>> forward(
    ModelState& state, const std::vector<const FeatureTensor*>& batch,
    ForwardMode mode, Rng& rng) {
  detail::ForwardCache cc;
  detail::forward_impl(state, batch, mode, rng, cc);
  std::vector<std::vector<double>> out(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    out[n].assign(
        cc.probs.v.begin() + static_cast<std::ptrdiff_t>(n) * cc.probs.K,
        cc.probs.v.begin() + static_cast<std::ptrdiff_t>(n + 1) * cc.probs.K);
  }
  return out;
}

inline std::vector<std::vector<double>> infer(
    ModelState& state, const std::vector<const FeatureTensor*>& batch) {
  Rng rng(0);
  return forward(state, batch, ForwardMode::kInfer, rng);
}

// Mean softmax cross-entropy over the batch plus gradients for every
// trainable parameter. In train mode this also updates BN running stats.
inline double loss_and_grad(ModelState& state,
                            const std::vector<const FeatureTensor*>& batch,
                            const std::vector<int>& labels, ForwardMode mode,
                            Rng& rng, Gradients& grads) {
  Require(batch.size() == labels.size(), "loss_and_grad: batch/label mismatch");
  const int N = static_cast<int>(batch.size());
  const int K = state.cfg.n_classes;
  for (int z : labels)
    Require(z >= 0 && z < K, "loss_and_grad: label out of range");

  detail::ForwardCache cc;
  detail::forward_impl(state, batch, mode, rng, cc);

  double loss = 0.0;
  detail::Act dlogits;
  dlogits.resize(N, 1, 1, K);
  for (int n = 0; n < N; ++n) {
    const double p = std::max(cc.probs.v[cc.probs.idx(n, 0, 0, labels[n])],
                              1e-300);
    loss -= std::log(p);
    for (int k = 0; k < K; ++k) {
      const double pk = cc.probs.v[cc.probs.idx(n, 0, 0, k)];
      dlogits.v[dlogits.idx(n, 0, 0, k)] =
          (pk - (k == labels[n] ? 1.0 : 0.0)) / N;
    }
  }
  loss /= N;

  detail::Act d, d2;
  detail::dense_backward(cc.fc2_in, state.fc2, dlogits, grads.fc2, d);
  detail::relu_backward(d, cc.relu_fc);
  detail::dense_backward(cc.fc1_in, state.fc1, d, grads.fc1, d2);
  detail::dropout_backward(d2, cc.drop2);
  detail::global_maxpool_backward(d2, cc.gmp_in, cc.gmp_arg, d);
  detail::relu_backward(d, cc.relu3);
  detail::bn_backward(d, state.bn3, cc.bn3, mode, grads.bn3);
  detail::conv_backward(cc.conv3_in, state.conv3, d, grads.conv3, d2);
  detail::relu_backward(d2, cc.relu2);
  detail::bn_backward(d2, state.bn2, cc.bn2, mode, grads.bn2);
  detail::conv_backward(cc.conv2_in, state.conv2, d2, grads.conv2, d);
  detail::dropout_backward(d, cc.drop1);
  detail::maxpool_backward(d, cc.pool_in, cc.pool_arg, d2);
  detail::relu_backward(d2, cc.relu1);
  detail::bn_backward(d2, state.bn1, cc.bn1, mode, grads.bn1);
  detail::conv_backward(cc.input, state.conv1, d2, grads.conv1, d);

  return loss;
}

// Per-step rectification terms: rho_t decides between the
// variance-rectified adaptive update and the plain bias-corrected momentum
// update used while the adaptive variance is still untrustworthy.
struct RAdamStepTerms {
  double bias1 = 0.0, bias2 = 0.0;  // 1 - beta^t
  double rho_t = 0.0;
  double rect = 0.0;
  bool rectified = false;
};

inline RAdamStepTerms radam_terms(std::int64_t t, const RAdamConfig& cfg) {
  RAdamStepTerms terms;
  const double b1t = std::pow(cfg.beta1, static_cast<double>(t));
  const double b2t = std::pow(cfg.beta2, static_cast<double>(t));
  terms.bias1 = 1.0 - b1t;
  terms.bias2 = 1.0 - b2t;
  const double rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0;
  terms.rho_t = rho_inf - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
  terms.rectified = terms.rho_t > 4.0;
  if (terms.rectified)
    terms.rect =
        std::sqrt(((terms.rho_t - 4.0) * (terms.rho_t - 2.0) * rho_inf) /
                  ((rho_inf - 4.0) * (rho_inf - 2.0) * terms.rho_t));
  return terms;
}

inline double radam_update(double w, double g, double& m, double& v,
                           const RAdamStepTerms& terms,
                           const RAdamConfig& cfg) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
  const double mhat = m / terms.bias1;
  if (terms.rectified) {
    const double vhat = std::sqrt(v / terms.bias2);
    return w - cfg.lr * terms.rect * mhat / (vhat + cfg.eps);
  }
  return w - cfg.lr * mhat;
}

// Rectified Adam update over every trainable parameter.
inline void radam_step(ModelState& state, const Gradients& grads,
                       const RAdamConfig& cfg) {
  Require(cfg.lr > 0.0 && cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 &&
              cfg.beta2 >= 0.0 && cfg.beta2 < 1.0,
          "radam: bad config");
  const std::int64_t t = state.opt_step + 1;
  const RAdamStepTerms terms = radam_terms(t, cfg);

  std::vector<std::vector<double>*> params, gvecs;
  detail::for_each_param(state, [&](std::vector<double>& v) { params.push_back(&v); });
  detail::for_each_param(const_cast<Gradients&>(grads),
                         [&](std::vector<double>& v) { gvecs.push_back(&v); });
  Require(params.size() == gvecs.size(), "radam: gradient structure mismatch");

  std::size_t off = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = *params[p];
    const auto& g = *gvecs[p];
    Require(w.size() == g.size(), "radam: gradient shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i, ++off) {
      const double gi = g[i];
      if (!std::isfinite(gi))
        throw Error("divergence: non-finite gradient at step " +
                    std::to_string(t));
      w[i] = radam_update(w[i], gi, state.opt_m[off], state.opt_v[off], terms,
                          cfg);
    }
  }
  Require(off == state.opt_m.size(), "radam: slot count mismatch");
  state.opt_step = t;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainHyper {
  int epochs = 50;
  int batch_size = 32;
  std::uint64_t seed = 0;
  RAdamConfig radam;
};

struct TrainLog {
  std::vector<double> epoch_loss;
};

struct LabeledTensor {
  const FeatureTensor* x;
  int label;
};

// Deterministic given seed: fixed shuffle, dropout, and augmentation
// streams. Augmentation is re-sampled fresh for every clip in every
// iteration.
inline TrainLog train(ModelState& state, const std::vector<LabeledTensor>& data,
                      const AugmentationPolicy& policy, const TrainHyper& hyper) {
  Require(!data.empty(), "train: empty training set");
  TrainLog log;
  const int N = static_cast<int>(data.size());
  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);

  std::uint64_t iteration = 0;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(hyper.seed, 0x73687566ULL,
                             static_cast<std::uint64_t>(epoch)));
    for (int i = N - 1; i > 0; --i) {
      const int j = shuffle_rng.uniform_int(0, i);
      std::swap(order[i], order[j]);
    }
    double epoch_loss = 0.0;
    int n_batches = 0;
    for (int start = 0; start < N; start += hyper.batch_size) {
      const int end = std::min(N, start + hyper.batch_size);
      std::vector<FeatureTensor> augmented;
      augmented.reserve(end - start);
      std::vector<const FeatureTensor*> batch;
      std::vector<int> labels;
      for (int i = start; i < end; ++i) {
        const auto& item = data[order[i]];
        if (policy.kind == AugmentKind::None) {
          batch.push_back(item.x);
        } else {
          Rng aug_rng(mix_seed(policy.rng_seed, iteration,
                               static_cast<std::uint64_t>(order[i])));
          augmented.push_back(apply_policy(*item.x, policy, aug_rng));
          batch.push_back(&augmented.back());
        }
        labels.push_back(item.label);
      }
      Rng dropout_rng(mix_seed(hyper.seed, 0x64726f70ULL, iteration));
      Gradients grads = make_gradients(state);
      const double loss = loss_and_grad(state, batch, labels,
                                        ForwardMode::kTrain, dropout_rng, grads);
      radam_step(state, grads, hyper.radam);
      epoch_loss += loss;
      ++n_batches;
      ++iteration;
    }
    log.epoch_loss.push_back(epoch_loss / n_batches);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O ("CHMD"): config block, then every state vector in
// declaration order as little-endian f64. Bit-exact round trip.

inline constexpr char kModelMagic[4] = {'C', 'H', 'M', 'D'};
inline constexpr std::uint16_t kModelVersion = 1;

namespace detail {

template <typename Fn>
void for_each_state_vector(ModelState& s, Fn&& fn) {
  for_each_param(s, fn);
  fn(s.bn1.run_mean); fn(s.bn1.run_var);
  fn(s.bn2.run_mean); fn(s.bn2.run_var);
  fn(s.bn3.run_mean); fn(s.bn3.run_var);
  fn(s.opt_m); fn(s.opt_v);
}

}  // namespace detail

inline void save_model(ModelState& state, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  Require(os.good(), "save_model: cannot open " + path);
  os.write(kModelMagic, 4);
  detail::write_le<std::uint16_t>(os, kModelVersion);
  const NetworkConfig& c = state.cfg;
  for (int v : {c.input_f, c.input_t, c.input_c, c.conv1_out, c.conv2_out,
                c.conv3_out, c.dense_hidden, c.n_classes})
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  detail::write_le_f64(os, c.dropout1);
  detail::write_le_f64(os, c.dropout2);
  detail::write_le_f64(os, c.bn_momentum);
  detail::write_le_f64(os, c.bn_eps);
  detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(state.opt_step));
  detail::for_each_state_vector(state, [&](std::vector<double>& v) {
    for (double x : v) detail::write_le_f64(os, x);
  });
  os.flush();
  Require(os.good(), "save_model: I/O failure writing " + path);
}

inline ModelState load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  Require(is.good(), "load_model: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  Require(is.good() && std::memcmp(magic, kModelMagic, 4) == 0,
          "unsupported format: bad magic in " + path);
  Require(detail::read_le<std::uint16_t>(is) == kModelVersion,
          "unsupported format: bad version in " + path);
  NetworkConfig c;
  auto ri = [&] { return static_cast<int>(detail::read_le<std::uint32_t>(is)); };
  c.input_f = ri(); c.input_t = ri(); c.input_c = ri();
  c.conv1_out = ri(); c.conv2_out = ri(); c.conv3_out = ri();
  c.dense_hidden = ri(); c.n_classes = ri();
  c.dropout1 = detail::read_le_f64(is);
  c.dropout2 = detail::read_le_f64(is);
  c.bn_momentum = detail::read_le_f64(is);
  c.bn_eps = detail::read_le_f64(is);
  const auto step = detail::read_le<std::uint64_t>(is);
  Require(is.good(), "corrupt file: truncated config in " + path);

  ModelState s = init_model(c, 0);
  s.opt_step = static_cast<std::int64_t>(step);
  detail::for_each_state_vector(s, [&](std::vector<double>& v) {
    for (double& x : v) x = detail::read_le_f64(is);
  });
  Require(is.good(), "corrupt file: truncated payload in " + path);
  is.peek();
  Require(is.eof(), "corrupt file: trailing bytes in " + path);
  return s;
}

}  // namespace mcasc
