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

// Reserve-and-merge: residual blocks become plain conv stacks. The block
// input is carried through the block on extra "reserved" channels (Dirac
// filters, identity BN, an activation that passes it unchanged) and added
// back inside the block's last convolution.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "rmg/error.hpp"
#include "rmg/graph.hpp"
#include "rmg/ops.hpp"
#include "rmg/reparam.hpp"

namespace rmg {

enum class DownsampleMethod { Type1, Type2 };

/// How reserved channels cross an activation. Auto picks ReLU when the block
/// input is provably non-negative and PReLU otherwise; ReluIfNonNeg fails
/// instead of falling back.
enum class ActPolicy { Auto, ReluIfNonNeg, PReLU };

struct RmOptions {
  DownsampleMethod downsample = DownsampleMethod::Type2;
  ActPolicy policy = ActPolicy::Auto;
};

namespace detail {

template <typename T>
Tensor4<T> stack_rows(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.c() != b.c() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("cannot stack filters " + a.shape().str() + " and " + b.shape().str());
  }
  std::vector<T> v(a.vec());
  v.insert(v.end(), b.vec().begin(), b.vec().end());
  return Tensor4<T>(Shape4{a.n() + b.n(), a.c(), a.h(), a.w()}, std::move(v));
}

template <typename T>
Tensor4<T> stack_cols(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("cannot join filters " + a.shape().str() + " and " + b.shape().str());
  }
  Tensor4<T> out(Shape4{a.n(), a.c() + b.c(), a.h(), a.w()});
  const std::size_t hw = a.h() * a.w();
  for (std::size_t o = 0; o < a.n(); ++o) {
    std::copy_n(a.vec().begin() + o * a.c() * hw, a.c() * hw,
                out.vec().begin() + o * out.c() * hw);
    std::copy_n(b.vec().begin() + o * b.c() * hw, b.c() * hw,
                out.vec().begin() + (o * out.c() + a.c()) * hw);
  }
  return out;
}

/// Embeds a 1x1 kernel at the centre of a k x k one.
template <typename T>
Tensor4<T> center_kernel(const Tensor4<T>& w, std::size_t k) {
  if (w.h() != 1) throw ValidationError("expected a 1x1 kernel");
  Tensor4<T> out(Shape4{w.n(), w.c(), k, k});
  for (std::size_t o = 0; o < w.n(); ++o) {
    for (std::size_t i = 0; i < w.c(); ++i) out(o, i, k / 2, k / 2) = w(o, i, 0, 0);
  }
  return out;
}

template <typename T>
BNParams<T> bn_concat(const BNParams<T>& a, const BNParams<T>& b) {
  if (a.eps != b.eps) {
    throw ValidationError("cannot join batch-norms with different eps");
  }
  auto cat = [](std::vector<T> x, const std::vector<T>& y) {
    x.insert(x.end(), y.begin(), y.end());
    return x;
  };
  return {cat(a.gamma, b.gamma), cat(a.beta, b.beta), cat(a.mean, b.mean),
          cat(a.var, b.var), a.eps};
}

/// Identity BN over `c` channels borrowing running statistics from `ref`.
template <typename T>
BNParams<T> identity_like(const BNParams<T>& ref, std::size_t c) {
  std::vector<T> mean(c), var(c);
  for (std::size_t i = 0; i < c; ++i) {
    mean[i] = ref.mean[i % ref.channels()];
    var[i] = ref.var[i % ref.channels()];
  }
  return bn_identity_params(std::move(mean), std::move(var), ref.eps);
}

/// BN that follows a merged conv: weights are already scaled, so it only
/// adds `bias`. Rows whose filters are all zero become constant channels.
template <typename T>
BNParams<T> merged_bn(const Tensor4<T>& w, const std::vector<T>& bias, T eps) {
  const std::size_t c = w.n();
  BNParams<T> p{std::vector<T>(c, std::sqrt(T(1) + eps)), bias, std::vector<T>(c, T(0)),
                std::vector<T>(c, T(1)), eps};
  const std::size_t per = w.c() * w.h() * w.w();
  for (std::size_t o = 0; o < c; ++o) {
    const auto* row = w.vec().data() + o * per;
    if (std::all_of(row, row + per, [](T v) { return v == T(0); })) p.gamma[o] = T(0);
  }
  return p;
}

template <typename T>
bool nonnegative_source(const NetGraph<T>& g, const std::string& id) {
  const auto& l = g.layer(id);
  if (l.kind != LayerKind::Act) return false;
  const auto& a = l.act();
  if (a.kind == ActKind::ReLU) return true;
  return std::all_of(a.slopes.begin(), a.slopes.end(), [](T s) { return s <= T(0); });
}

template <typename T>
bool choose_relu(const NetGraph<T>& g, const std::string& entry, ActPolicy policy,
                 const std::string& block) {
  const bool nonneg = nonnegative_source(g, entry);
  switch (policy) {
    case ActPolicy::PReLU: return false;
    case ActPolicy::Auto: return nonneg;
    case ActPolicy::ReluIfNonNeg:
      if (!nonneg) {
        throw ValidationError("block '" + block + "': input '" + entry +
                              "' is not provably non-negative; ReLU cannot carry it");
      }
      return true;
  }
  return nonneg;
}

/// Activation over [original; reserved] channels.
template <typename T>
ActParams<T> reserved_act(const ActParams<T>& orig, std::size_t n_orig, std::size_t n_res,
                          bool relu) {
  if (relu && orig.kind == ActKind::ReLU) return orig;
  ActParams<T> a{ActKind::PReLU, {}};
  if (orig.kind == ActKind::PReLU) {
    a.slopes = orig.slopes;
  } else {
    a.slopes.assign(n_orig, T(0));
  }
  a.slopes.resize(n_orig + n_res, T(1));
  return a;
}

/// How the reserved copy of a skip is scaled on the way through and where
/// the remaining affine part goes when it is merged back.
template <typename T>
struct Reserve {
  BNParams<T> bn;
  std::vector<T> merge_scale;
  std::vector<T> merge_bias;
};

/// Reserved channels for an identity skip, optionally through a BN. Under
/// ReLU the BN's scale magnitude rides on the reserved channel (keeping it
/// non-negative) and its sign and shift move into the merge.
template <typename T>
Reserve<T> reserve_identity(const BNParams<T>& stats_ref, std::size_t c,
                            const BNParams<T>* skip_bn, bool relu) {
  Reserve<T> r;
  r.merge_scale.assign(c, T(1));
  r.merge_bias.assign(c, T(0));
  if (!skip_bn) {
    r.bn = identity_like(stats_ref, c);
  } else if (!relu) {
    r.bn = *skip_bn;
  } else {
    const auto& s = *skip_bn;
    r.bn = {std::vector<T>(c), std::vector<T>(c, T(0)), std::vector<T>(c, T(0)), s.var, s.eps};
    for (std::size_t i = 0; i < c; ++i) {
      const T a = s.scale(i);
      r.bn.gamma[i] = std::abs(s.gamma[i]);
      r.merge_scale[i] = s.gamma[i] > T(0) ? T(1) : (s.gamma[i] < T(0) ? T(-1) : T(0));
      r.merge_bias[i] = s.beta[i] - a * s.mean[i];
    }
  }
  return r;
}

template <typename T>
Tensor4<T> scaled_dirac(const std::vector<T>& scale, std::size_t k) {
  Tensor4<T> w(Shape4{scale.size(), scale.size(), k, k});
  for (std::size_t c = 0; c < scale.size(); ++c) w(c, c, k / 2, k / 2) = scale[c];
  return w;
}

inline void expect(bool ok, const std::string& block, const std::string& what) {
  if (!ok) throw ValidationError("block '" + block + "' does not match pattern: " + what);
}

template <typename T>
const BlockAnnotation& find_block(const NetGraph<T>& g, const std::string& id, BlockKind k) {
  const auto* a = g.annotation(id);
  if (!a) throw ValidationError("no block annotation '" + id + "'");
  if (a->kind != k) {
    throw ValidationError("block '" + id + "' is " + std::string(to_string(a->kind)) +
                          ", expected " + std::string(to_string(k)));
  }
  return *a;
}

template <typename T>
void drop_block(NetGraph<T>& g, const std::string& block, const std::vector<std::string>& ids) {
  g.erase_layers(ids);
  g.erase_annotation(block);
}

template <typename T>
void note(NetGraph<T>& g, const std::string& msg) {
  g.metadata["rm_notes"].push_back(msg);
}

}  // namespace detail

/// Basic block Conv-BN-ReLU-Conv-BN (+ identity skip, optionally through a
/// BN) -> Add -> ReLU becomes Conv(C->M+C)-BN-Act-Conv(M+C->C)-BN-ReLU.
template <typename T>
NetGraph<T> rm_basic_block(NetGraph<T> g, const std::string& block, const RmOptions& opt = {}) {
  using namespace detail;
  const auto ann = find_block(g, block, BlockKind::BasicResBlock);
  const auto entry = ann.role("entry");
  auto& c1l = g.layer(ann.role("conv1"));
  const auto c1 = c1l.conv();
  const auto bn1 = g.layer(ann.role("bn1")).bn();
  const auto act1 = g.layer(ann.role("act1")).act();
  const auto c2 = g.layer(ann.role("conv2")).conv();
  const auto bn2 = g.layer(ann.role("bn2")).bn();
  const auto& add = g.layer(ann.role("add"));
  const BNParams<T>* skip_bn = nullptr;
  std::string skip_src = entry;
  if (ann.has_role("skip_bn")) {
    skip_src = ann.role("skip_bn");
    skip_bn = &g.layer(skip_src).bn();
    expect(g.layer(skip_src).inputs[0] == entry, block, "skip BN must read the block input");
  }
  expect(c1l.inputs[0] == entry, block, "conv1 must read the block input");
  expect(g.layer(ann.role("bn2")).inputs[0] == ann.role("conv2"), block, "conv2 -> bn2");
  expect(std::find(add.inputs.begin(), add.inputs.end(), ann.role("bn2")) != add.inputs.end() &&
             std::find(add.inputs.begin(), add.inputs.end(), skip_src) != add.inputs.end(),
         block, "add must join bn2 and the skip");
  expect(c1.stride == 1 && c2.stride == 1 && c1.groups == 1 && c2.groups == 1, block,
         "dense stride-1 convs");
  const std::size_t C = c1.in_channels(), M = c1.out_channels();
  expect(c2.in_channels() == M && c2.out_channels() == C, block, "channel counts");
  expect(c1.padding == c1.kernel() / 2 && c2.padding == c2.kernel() / 2, block, "same padding");

  const bool relu = choose_relu(g, entry, opt.policy, block);
  const auto res = reserve_identity(bn1, C, skip_bn, relu);

  ConvParams<T> n1 = c1;
  n1.weight = stack_rows(c1.weight, dirac_filters<T>(C, c1.kernel()));
  if (n1.has_bias()) n1.bias.resize(M + C, T(0));
  const auto f2 = fuse_conv_bn(c2, bn2);
  ConvParams<T> n2 = c2;
  n2.weight = stack_cols(f2.weight, scaled_dirac(res.merge_scale, c2.kernel()));
  n2.bias.clear();
  std::vector<T> bias = f2.bias;
  for (std::size_t o = 0; o < C; ++o) bias[o] += res.merge_bias[o];

  g.layer(ann.role("conv1")).params = std::move(n1);
  g.layer(ann.role("bn1")).params = bn_concat(bn1, res.bn);
  g.layer(ann.role("act1")).params = reserved_act(act1, M, C, relu);
  g.layer(ann.role("bn2")).params = merged_bn(n2.weight, bias, bn2.eps);
  g.layer(ann.role("conv2")).params = std::move(n2);
  const auto add_id = ann.role("add");
  g.rewire(add_id, ann.role("bn2"));
  std::vector<std::string> drop{add_id};
  if (ann.has_role("skip_bn")) drop.push_back(ann.role("skip_bn"));
  drop_block(g, block, drop);
  return g;
}

/// Downsample block (stride-2 main path, 1x1 stride-2 conv + BN skip).
/// Type1 reserves the skip's output (C -> 2M channels, PReLU); Type2
/// reserves the subsampled input and merges the skip conv into conv2.
template <typename T>
NetGraph<T> rm_downsample(NetGraph<T> g, const std::string& block, const RmOptions& opt = {}) {
  using namespace detail;
  const auto ann = find_block(g, block, BlockKind::DownsampleResBlock);
  const auto entry = ann.role("entry");
  const auto c1 = g.layer(ann.role("conv1")).conv();
  const auto bn1 = g.layer(ann.role("bn1")).bn();
  const auto act1 = g.layer(ann.role("act1")).act();
  const auto c2 = g.layer(ann.role("conv2")).conv();
  const auto bn2 = g.layer(ann.role("bn2")).bn();
  const auto sc = g.layer(ann.role("skip_conv")).conv();
  const auto sbn = g.layer(ann.role("skip_bn")).bn();
  const auto& add = g.layer(ann.role("add"));
  expect(g.layer(ann.role("conv1")).inputs[0] == entry &&
             g.layer(ann.role("skip_conv")).inputs[0] == entry,
         block, "conv1 and skip conv must read the block input");
  expect(std::find(add.inputs.begin(), add.inputs.end(), ann.role("skip_bn")) != add.inputs.end(),
         block, "add must join bn2 and the skip BN");
  expect(sc.kernel() == 1 && sc.padding == 0 && sc.groups == 1, block, "1x1 skip conv");
  expect(c1.groups == 1 && c2.groups == 1 && c2.stride == 1, block, "dense convs");
  expect(sc.stride == c1.stride, block, "skip and conv1 strides must agree");
  expect(c1.padding == c1.kernel() / 2 && c2.padding == c2.kernel() / 2, block, "same padding");
  const std::size_t C = c1.in_channels(), M = c1.out_channels(), D = c2.out_channels();
  expect(c2.in_channels() == M && sc.out_channels() == D && sc.in_channels() == C, block,
         "channel counts");

  const auto f2 = fuse_conv_bn(c2, bn2);
  ConvParams<T> n1 = c1;
  ConvParams<T> n2 = c2;
  n2.bias.clear();
  std::vector<T> bias = f2.bias;
  BNParams<T> nbn1;
  ActParams<T> nact;
  if (opt.downsample == DownsampleMethod::Type1) {
    n1.weight = stack_rows(c1.weight, center_kernel(sc.weight, c1.kernel()));
    if (n1.has_bias()) {
      n1.bias.resize(M, T(0));
      const auto sb = sc.has_bias() ? sc.bias : std::vector<T>(D, T(0));
      n1.bias.insert(n1.bias.end(), sb.begin(), sb.end());
    } else if (sc.has_bias()) {
      n1.bias.assign(M, T(0));
      n1.bias.insert(n1.bias.end(), sc.bias.begin(), sc.bias.end());
    }
    nbn1 = bn_concat(bn1, sbn);
    nact = reserved_act(act1, M, D, false);
    n2.weight = stack_cols(f2.weight, dirac_filters<T>(D, c2.kernel()));
  } else {
    const bool relu = choose_relu(g, entry, opt.policy, block);
    n1.weight = stack_rows(c1.weight, dirac_filters<T>(C, c1.kernel()));
    if (n1.has_bias()) n1.bias.resize(M + C, T(0));
    nbn1 = bn_concat(bn1, identity_like(bn1, C));
    nact = reserved_act(act1, M, C, relu);
    const auto fs = fuse_conv_bn(sc, sbn);
    n2.weight = stack_cols(f2.weight, center_kernel(fs.weight, c2.kernel()));
    for (std::size_t o = 0; o < D; ++o) bias[o] += fs.bias[o];
  }
  g.layer(ann.role("conv1")).params = std::move(n1);
  g.layer(ann.role("bn1")).params = std::move(nbn1);
  g.layer(ann.role("act1")).params = std::move(nact);
  g.layer(ann.role("bn2")).params = merged_bn(n2.weight, bias, bn2.eps);
  g.layer(ann.role("conv2")).params = std::move(n2);
  const auto add_id = ann.role("add");
  g.rewire(add_id, ann.role("bn2"));
  drop_block(g, block, {add_id, ann.role("skip_conv"), ann.role("skip_bn")});
  return g;
}

/// Inverted residual block with a skip. The expand conv gains C Dirac rows,
/// the grouped conv gains C / group_width Dirac groups, and the project conv
/// gains C merge columns (Dirac for an identity skip, the BN-fused skip conv
/// otherwise). Blocks without a skip are left as they are.
template <typename T>
NetGraph<T> rm_inverted_residual(NetGraph<T> g, const std::string& block,
                                 const RmOptions& opt = {}) {
  using namespace detail;
  const auto ann = find_block(g, block, BlockKind::InvertedResidualBlock);
  if (!ann.has_role("add")) {
    note(g, "block '" + block + "' has no skip; left unchanged");
    g.erase_annotation(block);
    return g;
  }
  expect(ann.has_role("expand_conv"), block, "a skip block needs an expand conv");
  const auto entry = ann.role("entry");
  const auto ec = g.layer(ann.role("expand_conv")).conv();
  const auto ebn = g.layer(ann.role("expand_bn")).bn();
  const auto eact = g.layer(ann.role("expand_act")).act();
  const auto dc = g.layer(ann.role("dw_conv")).conv();
  const auto dbn = g.layer(ann.role("dw_bn")).bn();
  const auto dact = g.layer(ann.role("dw_act")).act();
  const auto pc = g.layer(ann.role("project_conv")).conv();
  const auto pbn = g.layer(ann.role("project_bn")).bn();
  expect(g.layer(ann.role("expand_conv")).inputs[0] == entry, block,
         "expand conv must read the block input");
  expect(ec.kernel() == 1 && ec.groups == 1 && ec.stride == 1, block, "1x1 expand conv");
  expect(pc.kernel() == 1 && pc.groups == 1 && pc.stride == 1, block, "1x1 project conv");
  const std::size_t C = ec.in_channels(), E = ec.out_channels(), D = pc.out_channels();
  expect(dc.in_channels() == E && dc.out_channels() == E && pc.in_channels() == E, block,
         "grouped conv must keep the expanded width");
  expect(dc.padding == dc.kernel() / 2, block, "same padding");
  const std::size_t gw = dc.weight.c();
  if (C % gw != 0) {
    throw ValidationError("block '" + block + "': group width " + std::to_string(gw) +
                          " does not divide input width " + std::to_string(C));
  }

  const bool relu = choose_relu(g, entry, opt.policy, block);
  Reserve<T> res;
  std::vector<std::string> drop{ann.role("add")};
  Tensor4<T> merge;
  if (ann.has_role("skip_conv")) {
    const auto sc = g.layer(ann.role("skip_conv")).conv();
    const auto sbn = g.layer(ann.role("skip_bn")).bn();
    expect(g.layer(ann.role("skip_conv")).inputs[0] == entry, block, "skip conv input");
    expect(sc.kernel() == 1 && sc.padding == 0 && sc.groups == 1 && sc.stride == dc.stride,
           block, "1x1 skip conv with the grouped conv's stride");
    const auto fs = fuse_conv_bn(sc, sbn);
    res.bn = identity_like(ebn, C);
    res.merge_bias = fs.bias;
    merge = fs.weight;
    drop.push_back(ann.role("skip_conv"));
    drop.push_back(ann.role("skip_bn"));
  } else {
    expect(dc.stride == 1 && C == D, block, "identity skip needs stride 1 and equal widths");
    const BNParams<T>* sbn = nullptr;
    if (ann.has_role("skip_bn")) {
      sbn = &g.layer(ann.role("skip_bn")).bn();
      drop.push_back(ann.role("skip_bn"));
    }
    res = reserve_identity(ebn, C, sbn, relu);
    merge = scaled_dirac(res.merge_scale, 1);
  }

  ConvParams<T> ne = ec;
  ne.weight = stack_rows(ec.weight, dirac_filters<T>(C, 1));
  if (ne.has_bias()) ne.bias.resize(E + C, T(0));

  ConvParams<T> nd = dc;
  const std::size_t k = dc.kernel();
  Tensor4<T> extra(Shape4{C, gw, k, k});
  for (std::size_t j = 0; j < C; ++j) extra(j, j % gw, k / 2, k / 2) = T(1);
  nd.weight = stack_rows(dc.weight, extra);
  nd.groups = dc.groups + C / gw;
  if (nd.has_bias()) nd.bias.resize(E + C, T(0));

  const auto fp = fuse_conv_bn(pc, pbn);
  ConvParams<T> np = pc;
  np.weight = stack_cols(fp.weight, merge);
  np.bias.clear();
  std::vector<T> bias = fp.bias;
  for (std::size_t o = 0; o < D; ++o) bias[o] += res.merge_bias[o];

  g.layer(ann.role("expand_conv")).params = std::move(ne);
  g.layer(ann.role("expand_bn")).params = bn_concat(ebn, res.bn);
  g.layer(ann.role("expand_act")).params = reserved_act(eact, E, C, relu);
  g.layer(ann.role("dw_conv")).params = std::move(nd);
  g.layer(ann.role("dw_bn")).params = bn_concat(dbn, identity_like(dbn, C));
  g.layer(ann.role("dw_act")).params = reserved_act(dact, E, C, relu);
  g.layer(ann.role("project_bn")).params = merged_bn(np.weight, bias, pbn.eps);
  g.layer(ann.role("project_conv")).params = std::move(np);
  g.rewire(ann.role("add"), ann.role("project_bn"));
  drop_block(g, block, drop);
  return g;
}

/// Reserving pair: the first RepBlock (C -> C - m) gains m rows copying the
/// selected input channels, so the selection conv and the concat disappear
/// and the pair becomes two chained RepBlocks. With m = C the first block is
/// a pure Dirac RepBlock.
template <typename T>
NetGraph<T> rm_reserving_pair(NetGraph<T> g, const std::string& pair,
                              const RmOptions& opt = {}) {
  using namespace detail;
  const auto ann = find_block(g, pair, BlockKind::ReservingRepPair);
  const auto entry = ann.role("entry");
  const auto m = static_cast<std::size_t>(ann.attr("reserved"));
  const auto C = static_cast<std::size_t>(ann.attr("channels"));
  if (m > C) {
    throw ValidationError("pair '" + pair + "' reserves " + std::to_string(m) + " of " +
                          std::to_string(C) + " channels");
  }
  if (m == 0) {
    note(g, "pair '" + pair + "' reserves no channels; left unchanged");
    g.erase_annotation(pair);
    return g;
  }
  const bool relu = choose_relu(g, entry, opt.policy, pair);
  const auto second = find_block(g, ann.role("second"), BlockKind::RepBlock);

  if (m == C) {
    const auto ref = g.layer(second.role("bn3")).bn();
    const auto base = pair + ".reserve";
    const auto cid = g.fresh_id(base + ".conv3");
    const auto bid = g.fresh_id(base + ".bn3");
    const auto aid = g.fresh_id(base + ".act");
    ActParams<T> act = reserved_act(ActParams<T>{}, 0, C, relu);
    g.insert_after(entry, Layer<T>{aid, LayerKind::Act, {bid}, act});
    g.insert_after(entry, Layer<T>{bid, LayerKind::BN, {cid}, identity_like(ref, C)});
    g.insert_after(entry, Layer<T>{cid, LayerKind::Conv, {entry},
                                   ConvParams<T>{dirac_filters<T>(C, 3), {}, 1, 1, 1}});
    for (const auto& id : second.members) {
      for (auto& in : g.layer(id).inputs) {
        if (in == entry) in = aid;
      }
    }
    std::string bid_ann = base;
    for (int i = 1; g.annotation(bid_ann); ++i) bid_ann = base + "_" + std::to_string(i);
    g.annotations.push_back({bid_ann, BlockKind::RepBlock, {cid, bid, aid},
                             {{"entry", entry}, {"conv3", cid}, {"bn3", bid}, {"act", aid}},
                             {}});
    g.erase_annotation(pair);
    return g;
  }

  const auto first = find_block(g, ann.role("first"), BlockKind::RepBlock);
  const auto sel_id = ann.role("select");
  const auto cat_id = ann.role("concat");
  const auto sel = g.layer(sel_id).conv();
  const auto& cat = g.layer(cat_id);
  expect(g.layer(sel_id).inputs[0] == entry, pair, "selection conv must read the pair input");
  expect(cat.inputs.size() == 2 && cat.inputs[0] == first.role("act") && cat.inputs[1] == sel_id,
         pair, "concat of first block and selection");
  expect(!first.has_role("id_bn"), pair, "first block has no identity branch");
  expect(sel.kernel() == 1 && sel.groups == 1 && sel.out_channels() == m, pair,
         "1x1 selection conv");
  const auto c3 = g.layer(first.role("conv3")).conv();
  const auto bn3 = g.layer(first.role("bn3")).bn();
  expect(c3.stride == 1 && c3.groups == 1 && c3.out_channels() == C - m, pair,
         "first block width");
  expect(sel.stride == 1, pair, "stride-1 selection");

  ConvParams<T> n3 = c3;
  n3.weight = stack_rows(c3.weight, center_kernel(sel.weight, c3.kernel()));
  if (n3.has_bias() || sel.has_bias()) {
    n3.bias.resize(C - m, T(0));
    if (sel.has_bias()) {
      n3.bias.insert(n3.bias.end(), sel.bias.begin(), sel.bias.end());
    } else {
      n3.bias.resize(C, T(0));
    }
  }
  g.layer(first.role("conv3")).params = std::move(n3);
  g.layer(first.role("bn3")).params = bn_concat(bn3, identity_like(bn3, m));
  if (first.has_role("conv1")) {
    const auto c1 = g.layer(first.role("conv1")).conv();
    const auto bn1 = g.layer(first.role("bn1")).bn();
    ConvParams<T> n1 = c1;
    n1.weight = stack_rows(c1.weight, Tensor4<T>(Shape4{m, c1.weight.c(), c1.kernel(), c1.kernel()}));
    if (n1.has_bias()) n1.bias.resize(C, T(0));
    g.layer(first.role("conv1")).params = std::move(n1);
    BNParams<T> zero{std::vector<T>(m, T(0)), std::vector<T>(m, T(0)), std::vector<T>(m, T(0)),
                     std::vector<T>(m, T(1)), bn1.eps};
    g.layer(first.role("bn1")).params = bn_concat(bn1, zero);
  }
  const auto act = g.layer(first.role("act")).act();
  g.layer(first.role("act")).params = reserved_act(act, C - m, m, relu);
  g.rewire(cat_id, first.role("act"));
  g.erase_layers({sel_id, cat_id});
  g.erase_annotation(pair);
  return g;
}

/// Applies the matching reserve-and-merge pass to every annotated residual
/// block and reserving pair, in graph order. RepBlocks are left for
/// reparam_all.
template <typename T>
NetGraph<T> convert_graph(NetGraph<T> g, const RmOptions& opt = {}) {
  validate(g);
  std::vector<std::pair<std::size_t, BlockAnnotation>> todo;
  for (const auto& a : g.annotations) {
    if (a.kind == BlockKind::RepBlock) continue;
    std::size_t pos = g.layers.size();
    for (const auto& m : a.members) pos = std::min(pos, *g.index_of(m));
    todo.emplace_back(pos, a);
  }
  std::stable_sort(todo.begin(), todo.end(),
                   [](const auto& x, const auto& y) { return x.first < y.first; });
  for (const auto& [pos, a] : todo) {
    switch (a.kind) {
      case BlockKind::BasicResBlock: g = rm_basic_block(std::move(g), a.id, opt); break;
      case BlockKind::DownsampleResBlock: g = rm_downsample(std::move(g), a.id, opt); break;
      case BlockKind::InvertedResidualBlock:
        g = rm_inverted_residual(std::move(g), a.id, opt);
        break;
      case BlockKind::ReservingRepPair: g = rm_reserving_pair(std::move(g), a.id, opt); break;
      case BlockKind::RepBlock: break;
    }
  }
  validate(g);
  return g;
}

}  // namespace rmg
