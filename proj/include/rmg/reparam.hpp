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

// Linear rewrites: BN folding, kernel padding, parallel-branch merging and
// pointwise-pair fusion, plus the graph passes built from them.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "rmg/error.hpp"
#include "rmg/graph.hpp"
#include "rmg/ops.hpp"

namespace rmg {

/// (channels, channels, k, k) with a single 1 at (c, c, k/2, k/2).
template <typename T = float>
Tensor4<T> dirac_filters(std::size_t channels, std::size_t k) {
  if (k % 2 == 0) throw ValidationError("dirac kernel size must be odd");
  Tensor4<T> w(Shape4{channels, channels, k, k});
  for (std::size_t c = 0; c < channels; ++c) w(c, c, k / 2, k / 2) = T(1);
  return w;
}

/// BN that maps its input to itself for the given running statistics:
/// gamma = sqrt(var + eps), beta = mean.
template <typename T>
BNParams<T> bn_identity_params(std::vector<T> mean, std::vector<T> var,
                               T eps = static_cast<T>(kBnEps)) {
  if (mean.size() != var.size()) throw ValidationError("mean and var differ in length");
  BNParams<T> p;
  p.gamma.resize(mean.size());
  for (std::size_t c = 0; c < mean.size(); ++c) p.gamma[c] = std::sqrt(var[c] + eps);
  p.beta = mean;
  p.mean = std::move(mean);
  p.var = std::move(var);
  p.eps = eps;
  p.validate();
  return p;
}

template <typename T>
ConvParams<T> fuse_conv_bn(const ConvParams<T>& conv, const BNParams<T>& bn) {
  conv.validate();
  bn.validate();
  if (bn.channels() != conv.out_channels()) {
    throw ValidationError("batch-norm width " + std::to_string(bn.channels()) +
                          " does not match conv output " +
                          std::to_string(conv.out_channels()));
  }
  ConvParams<T> f = conv;
  f.bias.assign(conv.out_channels(), T(0));
  const std::size_t per = conv.weight.c() * conv.kernel() * conv.kernel();
  for (std::size_t o = 0; o < conv.out_channels(); ++o) {
    const T s = bn.scale(o);
    auto* w = f.weight.vec().data() + o * per;
    for (std::size_t i = 0; i < per; ++i) w[i] *= s;
    const T b = conv.has_bias() ? conv.bias[o] : T(0);
    f.bias[o] = (b - bn.mean[o]) * s + bn.beta[o];
  }
  return f;
}

template <typename T>
ConvParams<T> pad_1x1_to_3x3(const ConvParams<T>& conv) {
  if (conv.kernel() != 1) {
    throw ValidationError("pad_1x1_to_3x3 needs a 1x1 kernel, got " +
                          std::to_string(conv.kernel()));
  }
  ConvParams<T> p = conv;
  p.weight = Tensor4<T>(Shape4{conv.weight.n(), conv.weight.c(), 3, 3});
  for (std::size_t o = 0; o < conv.weight.n(); ++o) {
    for (std::size_t i = 0; i < conv.weight.c(); ++i) p.weight(o, i, 1, 1) = conv.weight(o, i, 0, 0);
  }
  p.padding = conv.padding + 1;
  return p;
}

/// Sum of parallel convolutions over the same input. With `identity` a
/// Dirac branch is added as well.
template <typename T>
ConvParams<T> merge_parallel_branches(const std::vector<ConvParams<T>>& branches,
                                      bool identity = false) {
  if (branches.empty()) throw ValidationError("no branches to merge");
  const auto& ref = branches.front();
  ref.validate();
  for (const auto& b : branches) {
    b.validate();
    if (b.weight.shape() != ref.weight.shape() || b.stride != ref.stride ||
        b.groups != ref.groups || b.padding != ref.padding) {
      throw ValidationError("incompatible branches: " + b.weight.shape().str() + " vs " +
                            ref.weight.shape().str());
    }
  }
  if (branches.size() == 1 && !identity) return ref;
  ConvParams<T> m = ref;
  const bool any_bias = std::any_of(branches.begin(), branches.end(),
                                    [](const ConvParams<T>& b) { return b.has_bias(); });
  m.bias.assign(any_bias ? ref.out_channels() : 0, T(0));
  std::fill(m.weight.vec().begin(), m.weight.vec().end(), T(0));
  for (const auto& b : branches) {
    for (std::size_t i = 0; i < m.weight.size(); ++i) m.weight.vec()[i] += b.weight.vec()[i];
    for (std::size_t o = 0; o < b.bias.size(); ++o) m.bias[o] += b.bias[o];
  }
  if (identity) {
    const std::size_t opg = m.out_channels() / m.groups;
    if (m.in_channels() != m.out_channels() || m.stride != 1) {
      throw ValidationError("identity branch needs equal channels and stride 1");
    }
    const std::size_t k = m.kernel();
    for (std::size_t o = 0; o < m.out_channels(); ++o) m.weight(o, o % opg, k / 2, k / 2) += T(1);
  }
  return m;
}

/// Two 1x1 convs with nothing in between collapse into one:
/// W = W2 * W1, b = W2 * b1 + b2.
template <typename T>
ConvParams<T> fuse_pointwise_pair(const ConvParams<T>& first, const ConvParams<T>& second) {
  first.validate();
  second.validate();
  if (first.kernel() != 1 || second.kernel() != 1) {
    throw ValidationError("pointwise fusion needs 1x1 kernels");
  }
  if (first.groups != 1 || second.groups != 1) {
    throw ValidationError("pointwise fusion does not handle grouped convs");
  }
  if (first.padding != 0 || second.padding != 0) {
    throw ValidationError("pointwise fusion needs zero padding");
  }
  if (second.in_channels() != first.out_channels()) {
    throw ValidationError("pointwise pair channel mismatch");
  }
  const std::size_t a = first.in_channels(), mid = first.out_channels(),
                    c = second.out_channels();
  ConvParams<T> f;
  f.weight = Tensor4<T>(Shape4{c, a, 1, 1});
  f.stride = first.stride * second.stride;
  f.padding = 0;
  f.groups = 1;
  for (std::size_t o = 0; o < c; ++o) {
    for (std::size_t j = 0; j < mid; ++j) {
      const T w2 = second.weight(o, j, 0, 0);
      if (w2 == T(0)) continue;
      for (std::size_t i = 0; i < a; ++i) f.weight(o, i, 0, 0) += w2 * first.weight(j, i, 0, 0);
    }
  }
  if (first.has_bias() || second.has_bias()) {
    f.bias.assign(c, T(0));
    for (std::size_t o = 0; o < c; ++o) {
      T b = second.has_bias() ? second.bias[o] : T(0);
      if (first.has_bias()) {
        for (std::size_t j = 0; j < mid; ++j) b += second.weight(o, j, 0, 0) * first.bias[j];
      }
      f.bias[o] = b;
    }
  }
  return f;
}

/// Collapses one RepBlock (3x3, optional 1x1 and identity branches, all
/// with BN) into a single biased 3x3 conv followed by its activation.
template <typename T>
NetGraph<T> reparam_repblock(NetGraph<T> g, const std::string& block) {
  const auto* a = g.annotation(block);
  if (!a || a->kind != BlockKind::RepBlock) {
    throw ValidationError("'" + block + "' is not a RepBlock");
  }
  const auto ann = *a;
  const auto& c3 = g.layer(ann.role("conv3"));
  std::vector<ConvParams<T>> branches{fuse_conv_bn(c3.conv(), g.layer(ann.role("bn3")).bn())};
  if (branches[0].kernel() != 3) throw ValidationError("RepBlock main branch must be 3x3");
  if (ann.has_role("conv1")) {
    branches.push_back(
        pad_1x1_to_3x3(fuse_conv_bn(g.layer(ann.role("conv1")).conv(),
                                    g.layer(ann.role("bn1")).bn())));
  }
  if (ann.has_role("id_bn")) {
    const auto& idbn = g.layer(ann.role("id_bn")).bn();
    ConvParams<T> dirac{dirac_filters<T>(idbn.channels(), 3), {}, 1, 1, 1};
    branches.push_back(fuse_conv_bn(dirac, idbn));
  }
  for (auto& b : branches) {
    if (b.stride != branches[0].stride || b.padding != 1) {
      throw ValidationError("RepBlock '" + block + "' branches disagree on stride or padding");
    }
  }
  auto merged = merge_parallel_branches(branches);
  const auto conv_id = ann.role("conv3");
  const auto act_id = ann.role("act");
  const auto entry = c3.inputs.at(0);
  g.layer(conv_id).params = std::move(merged);
  g.layer(act_id).inputs = {conv_id};
  std::vector<std::string> drop;
  for (const auto& m : ann.members) {
    if (m != conv_id && m != act_id) drop.push_back(m);
  }
  g.erase_layers(drop);
  g.layer(conv_id).inputs = {entry};
  g.erase_annotation(block);
  return g;
}

template <typename T>
NetGraph<T> reparam_all(NetGraph<T> g) {
  std::vector<std::string> ids;
  for (const auto& a : g.annotations) {
    if (a.kind == BlockKind::RepBlock) ids.push_back(a.id);
  }
  for (const auto& id : ids) g = reparam_repblock(std::move(g), id);
  return g;
}

/// Folds every BN whose producer is a conv feeding only that BN.
template <typename T>
NetGraph<T> fuse_all_bn(NetGraph<T> g) {
  for (std::size_t i = 0; i < g.layers.size();) {
    auto& l = g.layers[i];
    if (l.kind != LayerKind::BN) {
      ++i;
      continue;
    }
    auto& src = g.layer(l.inputs[0]);
    if (src.kind != LayerKind::Conv || g.consumers(src.id).size() != 1) {
      ++i;
      continue;
    }
    src.params = fuse_conv_bn(src.conv(), l.bn());
    const auto bn_id = l.id, conv_id = src.id;
    g.rewire(bn_id, conv_id);
    g.erase_layers({bn_id});
    for (auto& a : g.annotations) {
      std::erase(a.members, bn_id);
      for (auto it = a.roles.begin(); it != a.roles.end();) {
        it = it->second == bn_id ? a.roles.erase(it) : std::next(it);
      }
    }
  }
  return g;
}

/// Fuses `second` into `first` when `second` consumes `first` directly and
/// is its only consumer.
template <typename T>
NetGraph<T> fuse_pointwise_in_graph(NetGraph<T> g, const std::string& first,
                                    const std::string& second) {
  const auto& a = g.layer(first);
  const auto& b = g.layer(second);
  if (a.kind != LayerKind::Conv || b.kind != LayerKind::Conv) {
    throw ValidationError("pointwise fusion needs two conv layers");
  }
  if (b.inputs.at(0) != first) {
    throw ValidationError("'" + second + "' does not consume '" + first +
                          "' directly; a nonlinearity or other layer sits between them");
  }
  if (g.consumers(first).size() != 1) {
    throw ValidationError("'" + first + "' has more than one consumer");
  }
  auto fused = fuse_pointwise_pair(a.conv(), b.conv());
  g.layer(second).params = std::move(fused);
  g.layer(second).inputs = a.inputs;
  g.erase_layers({first});
  return g;
}

namespace detail {
template <typename T>
bool is_pointwise(const Layer<T>& l) {
  return l.kind == LayerKind::Conv && l.conv().kernel() == 1 && l.conv().groups == 1 &&
         l.conv().padding == 0;
}
}  // namespace detail

/// BN folding followed by pointwise-pair fusion until no adjacent pair of
/// unactivated 1x1 convs remains.
template <typename T>
NetGraph<T> finalize_mobilenet(NetGraph<T> g) {
  g = fuse_all_bn(std::move(g));
  for (bool changed = true; changed;) {
    changed = false;
    for (const auto& l : g.layers) {
      if (!detail::is_pointwise(l)) continue;
      const auto& src = g.layer(l.inputs[0]);
      if (detail::is_pointwise(src) && g.consumers(src.id).size() == 1) {
        const std::string first = src.id, second = l.id;
        g = fuse_pointwise_in_graph(std::move(g), first, second);
        changed = true;
        break;
      }
    }
  }
  return g;
}

}  // namespace rmg
