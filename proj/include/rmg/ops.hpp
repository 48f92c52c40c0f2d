/*
 * Copyright 2026 The rmgraph Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Reference forward kernels for every layer kind. These are the oracle the
// graph rewrites are checked against, so they favour a fixed, documented
// accumulation order over speed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "rmg/error.hpp"
#include "rmg/tensor.hpp"

namespace rmg {

/// Default batch-norm epsilon.
inline constexpr double kBnEps = 1e-5;

template <typename T = float>
struct ConvParams {
  Tensor4<T> weight;      // (out, in / groups, k, k)
  std::vector<T> bias;    // empty, or one entry per output channel
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  std::size_t out_channels() const { return weight.n(); }
  std::size_t in_channels() const { return weight.c() * groups; }
  std::size_t kernel() const { return weight.h(); }
  bool has_bias() const { return !bias.empty(); }

  void validate() const {
    if (weight.h() != weight.w()) throw ValidationError("conv kernel must be square");
    if (weight.h() % 2 == 0) throw ValidationError("conv kernel size must be odd");
    if (groups == 0 || stride == 0) throw ValidationError("conv groups and stride must be >= 1");
    if (out_channels() % groups != 0) {
      throw ValidationError("conv out_channels " + std::to_string(out_channels()) +
                            " not divisible by groups " + std::to_string(groups));
    }
    if (has_bias() && bias.size() != out_channels()) {
      throw ValidationError("conv bias length does not match out_channels");
    }
  }

  template <typename U>
  ConvParams<U> cast() const {
    return {weight.template cast<U>(), std::vector<U>(bias.begin(), bias.end()),
            stride, padding, groups};
  }
  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

template <typename T = float>
struct BNParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> mean;
  std::vector<T> var;
  T eps = static_cast<T>(kBnEps);

  std::size_t channels() const { return gamma.size(); }

  void validate() const {
    const auto c = gamma.size();
    if (beta.size() != c || mean.size() != c || var.size() != c) {
      throw ValidationError("batch-norm vectors differ in length");
    }
    if (!(eps >= T(0))) throw ValidationError("batch-norm eps must be >= 0");
    for (auto v : var) {
      if (!(v >= T(0))) throw ValidationError("batch-norm running_var must be >= 0");
      if (!(v + eps > T(0))) throw ValidationError("batch-norm running_var + eps must be > 0");
    }
  }

  /// Per-channel multiplier gamma / sqrt(var + eps).
  T scale(std::size_t c) const { return gamma[c] / std::sqrt(var[c] + eps); }

  template <typename U>
  BNParams<U> cast() const {
    return {std::vector<U>(gamma.begin(), gamma.end()),
            std::vector<U>(beta.begin(), beta.end()),
            std::vector<U>(mean.begin(), mean.end()),
            std::vector<U>(var.begin(), var.end()), static_cast<U>(eps)};
  }
  friend bool operator==(const BNParams&, const BNParams&) = default;
};

enum class ActKind { ReLU, PReLU };

template <typename T = float>
struct ActParams {
  ActKind kind = ActKind::ReLU;
  std::vector<T> slopes;  // PReLU only, one per channel

  template <typename U>
  ActParams<U> cast() const {
    return {kind, std::vector<U>(slopes.begin(), slopes.end())};
  }
  friend bool operator==(const ActParams&, const ActParams&) = default;
};

template <typename T = float>
struct DenseParams {
  Tensor4<T> weight;  // (out, in, 1, 1)
  std::vector<T> bias;

  std::size_t out_features() const { return weight.n(); }
  std::size_t in_features() const { return weight.c(); }

  template <typename U>
  DenseParams<U> cast() const {
    return {weight.template cast<U>(), std::vector<U>(bias.begin(), bias.end())};
  }
  friend bool operator==(const DenseParams&, const DenseParams&) = default;
};

/// Output spatial extent of a convolution along one axis.
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t pad,
                                   std::size_t stride) {
  if (in + 2 * pad < k) {
    throw ShapeError("convolution window larger than padded input");
  }
  return (in + 2 * pad - k) / stride + 1;
}

/// Zero-padded cross-correlation. Each output element accumulates
/// bias, then input channels in order, then kernel rows and columns.
template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const ConvParams<T>& p) {
  p.validate();
  if (x.c() != p.in_channels()) {
    throw ShapeError("conv2d expects " + std::to_string(p.in_channels()) +
                     " input channels, got " + std::to_string(x.c()));
  }
  const std::size_t k = p.kernel();
  const std::size_t oh_n = conv_out_extent(x.h(), k, p.padding, p.stride);
  const std::size_t ow_n = conv_out_extent(x.w(), k, p.padding, p.stride);
  const std::size_t out_c = p.out_channels();
  const std::size_t in_per_group = p.weight.c();
  const std::size_t out_per_group = out_c / p.groups;
  Tensor4<T> y(Shape4{x.n(), out_c, oh_n, ow_n});

  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  const auto stride = static_cast<std::ptrdiff_t>(p.stride);
  const auto in_h = static_cast<std::ptrdiff_t>(x.h());
  const auto in_w = static_cast<std::ptrdiff_t>(x.w());

  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t oc = 0; oc < out_c; ++oc) {
      const std::size_t g = oc / out_per_group;
      auto out = y.plane(n, oc);
      std::fill(out.begin(), out.end(), p.has_bias() ? p.bias[oc] : T(0));
      for (std::size_t icg = 0; icg < in_per_group; ++icg) {
        const auto in = x.plane(n, g * in_per_group + icg);
        for (std::size_t kh = 0; kh < k; ++kh) {
          for (std::size_t kw = 0; kw < k; ++kw) {
            const T wv = p.weight(oc, icg, kh, kw);
            if (wv == T(0)) continue;
            const auto dh = static_cast<std::ptrdiff_t>(kh) - pad;
            const auto dw = static_cast<std::ptrdiff_t>(kw) - pad;
            // valid ow satisfy 0 <= ow*stride + dw < in_w
            std::ptrdiff_t ow_lo = dw >= 0 ? 0 : (-dw + stride - 1) / stride;
            std::ptrdiff_t ow_hi = (in_w - 1 - dw) >= 0 ? (in_w - 1 - dw) / stride + 1 : 0;
            ow_hi = std::min<std::ptrdiff_t>(ow_hi, static_cast<std::ptrdiff_t>(ow_n));
            for (std::size_t oh = 0; oh < oh_n; ++oh) {
              const auto ih = static_cast<std::ptrdiff_t>(oh) * stride + dh;
              if (ih < 0 || ih >= in_h) continue;
              T* orow = out.data() + oh * ow_n;
              const T* irow = in.data() + ih * in_w;
              for (std::ptrdiff_t ow = ow_lo; ow < ow_hi; ++ow) {
                orow[ow] += wv * irow[ow * stride + dw];
              }
            }
          }
        }
      }
    }
  }
  return y;
}

/// Inference-mode batch norm: gamma * (x - mean) / sqrt(var + eps) + beta.
template <typename T>
Tensor4<T> batchnorm_infer(const Tensor4<T>& x, const BNParams<T>& p) {
  p.validate();
  if (x.c() != p.channels()) {
    throw ShapeError("batch-norm has " + std::to_string(p.channels()) +
                     " channels, input has " + std::to_string(x.c()));
  }
  Tensor4<T> y(x.shape());
  for (std::size_t c = 0; c < x.c(); ++c) {
    const T s = p.scale(c);
    const T mu = p.mean[c];
    const T b = p.beta[c];
    for (std::size_t n = 0; n < x.n(); ++n) {
      auto in = x.plane(n, c);
      auto out = y.plane(n, c);
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = (in[i] - mu) * s + b;
    }
  }
  return y;
}

template <typename T>
Tensor4<T> relu(const Tensor4<T>& x) {
  Tensor4<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x.vec()[i];
    y.vec()[i] = v > T(0) ? v : T(0);
  }
  return y;
}

template <typename T>
Tensor4<T> prelu(const Tensor4<T>& x, const std::vector<T>& slopes) {
  if (slopes.size() != x.c()) {
    throw ShapeError("prelu has " + std::to_string(slopes.size()) +
                     " slopes, input has " + std::to_string(x.c()) + " channels");
  }
  Tensor4<T> y(x.shape());
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      auto in = x.plane(n, c);
      auto out = y.plane(n, c);
      const T a = slopes[c];
      for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = in[i] >= T(0) ? in[i] : a * in[i];
      }
    }
  }
  return y;
}

template <typename T>
Tensor4<T> activation(const Tensor4<T>& x, const ActParams<T>& p) {
  return p.kind == ActKind::ReLU ? relu(x) : prelu(x, p.slopes);
}

template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add of mismatched shapes " + a.shape().str() + " and " +
                     b.shape().str());
  }
  Tensor4<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y.vec()[i] = a.vec()[i] + b.vec()[i];
  return y;
}

/// Stacks channels of a then b.
template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("concat of mismatched shapes " + a.shape().str() + " and " +
                     b.shape().str());
  }
  Tensor4<T> y(Shape4{a.n(), a.c() + b.c(), a.h(), a.w()});
  for (std::size_t n = 0; n < a.n(); ++n) {
    for (std::size_t c = 0; c < a.c(); ++c) {
      std::ranges::copy(a.plane(n, c), y.plane(n, c).begin());
    }
    for (std::size_t c = 0; c < b.c(); ++c) {
      std::ranges::copy(b.plane(n, c), y.plane(n, a.c() + c).begin());
    }
  }
  return y;
}

template <typename T>
Tensor4<T> global_avg_pool(const Tensor4<T>& x) {
  Tensor4<T> y(Shape4{x.n(), x.c(), 1, 1});
  const T count = static_cast<T>(x.h() * x.w());
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      T s = T(0);
      for (T v : x.plane(n, c)) s += v;
      y(n, c, 0, 0) = s / count;
    }
  }
  return y;
}

/// Affine map on the flattened C*H*W features of each sample.
template <typename T>
Tensor4<T> dense(const Tensor4<T>& x, const DenseParams<T>& p) {
  const std::size_t in = x.c() * x.h() * x.w();
  if (in != p.in_features()) {
    throw ShapeError("dense expects " + std::to_string(p.in_features()) +
                     " features, got " + std::to_string(in));
  }
  if (!p.bias.empty() && p.bias.size() != p.out_features()) {
    throw ShapeError("dense bias length does not match out_features");
  }
  Tensor4<T> y(Shape4{x.n(), p.out_features(), 1, 1});
  for (std::size_t n = 0; n < x.n(); ++n) {
    const T* xs = x.vec().data() + n * in;
    for (std::size_t o = 0; o < p.out_features(); ++o) {
      T s = p.bias.empty() ? T(0) : p.bias[o];
      const T* ws = p.weight.vec().data() + o * in;
      for (std::size_t i = 0; i < in; ++i) s += ws[i] * xs[i];
      y(n, o, 0, 0) = s;
    }
  }
  return y;
}

}  // namespace rmg
