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

// Constructors for the four architecture families the rewrites target:
// CIFAR-style ResNets, a MobileNetV2 variant, RepVGG (optionally with
// reserving pairs), and the RMNeXt inverted-residual family.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rmg/error.hpp"
#include "rmg/graph.hpp"
#include "rmg/ops.hpp"

namespace rmg {

enum class Family { ResNetCIFAR, MobileNetV2Variant, RepVGG, RMNeXt };

inline std::string_view to_string(Family f) {
  switch (f) {
    case Family::ResNetCIFAR: return "resnet";
    case Family::MobileNetV2Variant: return "mobilenetv2";
    case Family::RepVGG: return "repvgg";
    case Family::RMNeXt: return "rmnext";
  }
  return "?";
}

inline Family family_from_string(std::string_view s) {
  for (auto f : {Family::ResNetCIFAR, Family::MobileNetV2Variant, Family::RepVGG,
                 Family::RMNeXt}) {
    if (to_string(f) == s) return f;
  }
  throw ValidationError("unknown family '" + std::string(s) + "'");
}

struct ArchConfig {
  Family family = Family::ResNetCIFAR;
  std::vector<std::size_t> blocks_per_stage{2, 2, 2, 2};
  std::size_t width = 16;           // stage-0 width; doubles per stage
  std::size_t width_multiple = 3;   // RMNeXt: grouped width = multiple * stage width
  std::size_t group_width = 32;     // RMNeXt: channels per group at stage 0
  std::size_t expansion = 6;        // MobileNetV2 variant: T
  double reserving_ratio = 0.0;     // RepVGG
  bool residual_bn = false;         // ResNet: BN on identity skips
  std::size_t num_classes = 10;
  std::uint64_t seed = 0;
  Shape4 input{1, 3, 32, 32};
};

enum class InitScheme { UniformFanIn, DiracIdentityTest };

namespace detail {

template <typename T>
ConvParams<T> blank_conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                         std::size_t groups = 1, bool bias = false) {
  ConvParams<T> p;
  p.weight = Tensor4<T>(Shape4{out, in / groups, k, k});
  if (bias) p.bias.assign(out, T(0));
  p.stride = stride;
  p.padding = k / 2;
  p.groups = groups;
  return p;
}

template <typename T>
BNParams<T> blank_bn(std::size_t c) {
  return {std::vector<T>(c, T(1)), std::vector<T>(c, T(0)), std::vector<T>(c, T(0)),
          std::vector<T>(c, T(1)), static_cast<T>(kBnEps)};
}

template <typename T>
DenseParams<T> blank_dense(std::size_t in, std::size_t out) {
  return {Tensor4<T>(Shape4{out, in, 1, 1}), std::vector<T>(out, T(0))};
}

inline void check_stages(const ArchConfig& cfg) {
  if (cfg.blocks_per_stage.empty()) throw ValidationError("blocks_per_stage is empty");
  if (cfg.width == 0 || cfg.num_classes == 0) {
    throw ValidationError("width and num_classes must be positive");
  }
  if (cfg.input.c == 0 || cfg.input.h == 0 || cfg.input.w == 0) {
    throw ValidationError("input shape must be positive");
  }
}

inline std::string stage_prefix(std::size_t s, std::size_t b) {
  return "s" + std::to_string(s) + ".b" + std::to_string(b);
}

/// Three-branch RepBlock: 3x3 ConvBN + 1x1 ConvBN (+ identity BN) -> ReLU.
template <typename T>
std::string rep_block(GraphBuilder<T>& b, const std::string& prefix, const std::string& in,
                      std::size_t cin, std::size_t cout, std::size_t stride,
                      bool with_identity) {
  BlockAnnotation a{prefix, BlockKind::RepBlock, {}, {{"entry", in}}, {}};
  auto put = [&](const std::string& role, const std::string& id) {
    a.members.push_back(id);
    a.roles[role] = id;
    return id;
  };
  auto c3 = put("conv3", b.conv(prefix + ".conv3", in, blank_conv<T>(cin, cout, 3, stride)));
  auto n3 = put("bn3", b.bn(prefix + ".bn3", c3, blank_bn<T>(cout)));
  auto c1 = put("conv1", b.conv(prefix + ".conv1", in, blank_conv<T>(cin, cout, 1, stride)));
  auto n1 = put("bn1", b.bn(prefix + ".bn1", c1, blank_bn<T>(cout)));
  auto sum = put("add", b.add(prefix + ".add", n3, n1));
  if (with_identity) {
    if (cin != cout || stride != 1) {
      throw ValidationError("identity branch needs equal channels and stride 1");
    }
    auto id = put("id_bn", b.bn(prefix + ".id_bn", in, blank_bn<T>(cout)));
    sum = put("add2", b.add(prefix + ".add2", sum, id));
  }
  auto out = put("act", b.act(prefix + ".act", sum));
  b.annotate(std::move(a));
  return out;
}

}  // namespace detail

/// Fills every parameter deterministically from `seed`. BN running stats
/// are always randomized (mean ~ N(0,1), var ~ U(0.5,2)). Selection convs
/// of reserving pairs keep their fixed 0/1 weights.
template <typename T>
NetGraph<T> init_weights(NetGraph<T> g, std::uint64_t seed,
                         InitScheme scheme = InitScheme::UniformFanIn) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto uni = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen);
  };
  std::vector<std::string> fixed;
  for (const auto& a : g.annotations) {
    if (a.kind == BlockKind::ReservingRepPair && a.has_role("select")) {
      fixed.push_back(a.role("select"));
    }
  }
  const bool dirac = scheme == InitScheme::DiracIdentityTest;
  for (auto& l : g.layers) {
    if (std::find(fixed.begin(), fixed.end(), l.id) != fixed.end()) continue;
    switch (l.kind) {
      case LayerKind::Conv: {
        auto& p = l.conv();
        const auto k = p.kernel();
        const auto ipg = p.weight.c();
        const auto opg = p.out_channels() / p.groups;
        const double bound = 1.0 / std::sqrt(static_cast<double>(ipg * k * k));
        for (std::size_t o = 0; o < p.out_channels(); ++o) {
          for (std::size_t i = 0; i < ipg; ++i) {
            for (std::size_t y = 0; y < k; ++y) {
              for (std::size_t x = 0; x < k; ++x) {
                double v;
                if (dirac) {
                  v = (o % opg == i && y == k / 2 && x == k / 2) ? 1.0 : 0.0;
                } else {
                  v = uni(-bound, bound);
                }
                p.weight(o, i, y, x) = static_cast<T>(v);
              }
            }
          }
        }
        for (auto& b : p.bias) b = dirac ? T(0) : static_cast<T>(uni(-bound, bound));
        break;
      }
      case LayerKind::BN: {
        auto& p = l.bn();
        for (std::size_t c = 0; c < p.channels(); ++c) {
          p.mean[c] = static_cast<T>(normal(gen));
          p.var[c] = static_cast<T>(uni(0.5, 2.0));
          if (dirac) {
            p.gamma[c] = std::sqrt(p.var[c] + p.eps);
            p.beta[c] = p.mean[c];
          } else {
            const double sign = uni(0.0, 1.0) < 0.5 ? -1.0 : 1.0;
            p.gamma[c] = static_cast<T>(sign * uni(0.5, 1.5));
            p.beta[c] = static_cast<T>(uni(-0.5, 0.5));
          }
        }
        break;
      }
      case LayerKind::Act: {
        auto& p = l.act();
        for (auto& s : p.slopes) s = dirac ? T(1) : static_cast<T>(uni(0.0, 0.3));
        break;
      }
      case LayerKind::Dense: {
        auto& p = l.dense();
        const double bound = 1.0 / std::sqrt(static_cast<double>(p.in_features()));
        for (std::size_t o = 0; o < p.out_features(); ++o) {
          for (std::size_t i = 0; i < p.in_features(); ++i) {
            p.weight(o, i, 0, 0) =
                static_cast<T>(dirac ? (o == i ? 1.0 : 0.0) : uni(-bound, bound));
          }
        }
        for (auto& b : p.bias) b = dirac ? T(0) : static_cast<T>(uni(-bound, bound));
        break;
      }
      default:
        break;
    }
  }
  return g;
}

/// CIFAR-style ResNet of basic blocks. The first block of every stage after
/// the first is a downsample block (stride 2, channel doubling, 1x1 conv +
/// BN skip). With residual_bn the identity skips also pass through a BN.
template <typename T = float>
NetGraph<T> build_resnet(const ArchConfig& cfg) {
  if (cfg.family != Family::ResNetCIFAR) throw ValidationError("config is not a ResNet");
  detail::check_stages(cfg);
  using namespace detail;
  GraphBuilder<T> b(cfg.input);
  auto x = b.conv("stem.conv", b.input(), blank_conv<T>(cfg.input.c, cfg.width, 3, 1));
  x = b.bn("stem.bn", x, blank_bn<T>(cfg.width));
  x = b.act("stem.act", x);
  std::size_t cin = cfg.width;
  for (std::size_t s = 0; s < cfg.blocks_per_stage.size(); ++s) {
    const std::size_t w = cfg.width << s;
    for (std::size_t k = 0; k < cfg.blocks_per_stage[s]; ++k) {
      const auto p = stage_prefix(s, k);
      const bool down = s > 0 && k == 0;
      const std::size_t stride = down ? 2 : 1;
      BlockAnnotation a{p, down ? BlockKind::DownsampleResBlock : BlockKind::BasicResBlock,
                        {}, {{"entry", x}}, {{"channels", double(cin)}}};
      auto put = [&](const std::string& role, const std::string& id) {
        a.members.push_back(id);
        a.roles[role] = id;
        return id;
      };
      auto h = put("conv1", b.conv(p + ".conv1", x, blank_conv<T>(cin, w, 3, stride)));
      h = put("bn1", b.bn(p + ".bn1", h, blank_bn<T>(w)));
      h = put("act1", b.act(p + ".act1", h));
      h = put("conv2", b.conv(p + ".conv2", h, blank_conv<T>(w, w, 3, 1)));
      h = put("bn2", b.bn(p + ".bn2", h, blank_bn<T>(w)));
      std::string skip = x;
      if (down) {
        skip = put("skip_conv", b.conv(p + ".skip_conv", x, blank_conv<T>(cin, w, 1, 2)));
        skip = put("skip_bn", b.bn(p + ".skip_bn", skip, blank_bn<T>(w)));
      } else if (cfg.residual_bn) {
        skip = put("skip_bn", b.bn(p + ".skip_bn", x, blank_bn<T>(w)));
      }
      h = put("add", b.add(p + ".add", h, skip));
      x = put("out_act", b.act(p + ".out_act", h));
      b.annotate(std::move(a));
      cin = w;
    }
  }
  x = b.pool("head.pool", x);
  x = b.dense("head.fc", x, blank_dense<T>(cin, cfg.num_classes));
  b.output(x);
  return init_weights(std::move(b).finish(), cfg.seed);
}

/// MobileNetV2-style network whose RM-converted and pointwise-fused form is
/// a MobileNetV1 stack. Layout: 3x3 stem to 2*width, a depthwise + project
/// block to `width`, then stages of inverted residual blocks (expand by T,
/// depthwise, linear project) with identity skips where stride is 1 and
/// channels match, and a final 1x1 conv to twice the last stage width.
/// Activations are ReLU.
template <typename T = float>
NetGraph<T> build_mobilenet_v2_variant(const ArchConfig& cfg) {
  if (cfg.family != Family::MobileNetV2Variant) {
    throw ValidationError("config is not a MobileNetV2 variant");
  }
  detail::check_stages(cfg);
  if (cfg.expansion == 0) throw ValidationError("expansion must be >= 1");
  using namespace detail;
  GraphBuilder<T> b(cfg.input);
  const std::size_t stem_w = 2 * cfg.width;
  auto x = b.conv("stem.conv", b.input(), blank_conv<T>(cfg.input.c, stem_w, 3, 1));
  x = b.bn("stem.bn", x, blank_bn<T>(stem_w));
  x = b.act("stem.act", x);

  auto irb = [&](const std::string& p, std::size_t cin, std::size_t cout, std::size_t t,
                 std::size_t stride, bool expand) {
    const bool skip = stride == 1 && cin == cout && expand;
    BlockAnnotation a{p, BlockKind::InvertedResidualBlock, {}, {{"entry", x}},
                      {{"expansion", double(t)}, {"has_skip", skip ? 1.0 : 0.0}}};
    auto put = [&](const std::string& role, const std::string& id) {
      a.members.push_back(id);
      a.roles[role] = id;
      return id;
    };
    std::string h = x;
    std::size_t mid = cin;
    if (expand) {
      mid = t * cin;
      h = put("expand_conv", b.conv(p + ".expand", h, blank_conv<T>(cin, mid, 1, 1)));
      h = put("expand_bn", b.bn(p + ".expand_bn", h, blank_bn<T>(mid)));
      h = put("expand_act", b.act(p + ".expand_act", h));
    }
    h = put("dw_conv", b.conv(p + ".dw", h, blank_conv<T>(mid, mid, 3, stride, mid)));
    h = put("dw_bn", b.bn(p + ".dw_bn", h, blank_bn<T>(mid)));
    h = put("dw_act", b.act(p + ".dw_act", h));
    h = put("project_conv", b.conv(p + ".project", h, blank_conv<T>(mid, cout, 1, 1)));
    h = put("project_bn", b.bn(p + ".project_bn", h, blank_bn<T>(cout)));
    if (skip) h = put("add", b.add(p + ".add", h, x));
    b.annotate(std::move(a));
    x = h;
  };

  irb("s0.b0", stem_w, cfg.width, 1, 1, false);
  std::size_t cin = cfg.width;
  for (std::size_t s = 0; s < cfg.blocks_per_stage.size(); ++s) {
    const std::size_t w = cfg.width << s;
    for (std::size_t k = 0; k < cfg.blocks_per_stage[s]; ++k) {
      const std::size_t stride = (s > 0 && k == 0) ? 2 : 1;
      irb(stage_prefix(s, k + 1), cin, w, cfg.expansion, stride, true);
      cin = w;
    }
  }
  const std::size_t last = 2 * cin;
  x = b.conv("head.conv", x, blank_conv<T>(cin, last, 1, 1));
  x = b.bn("head.bn", x, blank_bn<T>(last));
  x = b.act("head.act", x);
  x = b.pool("head.pool", x);
  x = b.dense("head.fc", x, blank_dense<T>(last, cfg.num_classes));
  b.output(x);
  return init_weights(std::move(b).finish(), cfg.seed);
}

/// One convolution of a plain MobileNetV1-shaped network.
struct ConvSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t groups = 1;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// The convolution sequence the MobileNetV2 variant must reduce to after RM
/// conversion and pointwise fusion: 3x3 stem, then strictly alternating
/// depthwise and pointwise convs.
inline std::vector<ConvSpec> mobilenet_v1_target(const ArchConfig& cfg) {
  std::vector<ConvSpec> out;
  const std::size_t stem_w = 2 * cfg.width;
  out.push_back({cfg.input.c, stem_w, 3, 1, 1});
  // widths of each depthwise conv after reserving
  std::vector<std::pair<std::size_t, std::size_t>> dws{{stem_w, 1}};
  std::size_t cin = cfg.width;
  for (std::size_t s = 0; s < cfg.blocks_per_stage.size(); ++s) {
    const std::size_t w = cfg.width << s;
    for (std::size_t k = 0; k < cfg.blocks_per_stage[s]; ++k) {
      const std::size_t stride = (s > 0 && k == 0) ? 2 : 1;
      const bool skip = stride == 1 && cin == w;
      dws.emplace_back(cfg.expansion * cin + (skip ? cin : 0), stride);
      cin = w;
    }
  }
  for (std::size_t i = 0; i < dws.size(); ++i) {
    const auto [c, stride] = dws[i];
    out.push_back({c, c, 3, stride, c});
    const std::size_t next = i + 1 < dws.size() ? dws[i + 1].first : 2 * cin;
    out.push_back({c, next, 1, 1, 1});
  }
  return out;
}

/// RepVGG stack: a RepBlock stem, then per stage an optional stride-2
/// RepBlock followed by identity RepBlocks. With reserving_ratio r > 0,
/// consecutive identity blocks form reserving pairs: the first block
/// produces C - m channels, the last m = r*C input channels bypass it
/// through a 0/1 selection conv, and the concatenation feeds the second
/// block. m is rounded up; r = 1 drops the first block entirely.
template <typename T = float>
NetGraph<T> build_repvgg(const ArchConfig& cfg) {
  if (cfg.family != Family::RepVGG) throw ValidationError("config is not a RepVGG");
  detail::check_stages(cfg);
  const double r = cfg.reserving_ratio;
  if (!(r >= 0.0 && r <= 1.0)) throw ValidationError("reserving ratio must lie in [0, 1]");
  using namespace detail;
  GraphBuilder<T> b(cfg.input);
  auto x = rep_block(b, "stem", b.input(), cfg.input.c, cfg.width, 1, false);
  std::size_t cin = cfg.width;
  for (std::size_t s = 0; s < cfg.blocks_per_stage.size(); ++s) {
    const std::size_t w = cfg.width << s;
    if (s > 0) {
      x = rep_block(b, "s" + std::to_string(s) + ".down", x, cin, w, 2, false);
      cin = w;
    }
    const auto m = static_cast<std::size_t>(std::ceil(r * static_cast<double>(w) - 1e-9));
    const std::size_t n = cfg.blocks_per_stage[s];
    std::size_t k = 0;
    if (m > 0) {
      for (; k + 1 < n; k += 2) {
        const auto p = stage_prefix(s, k);
        BlockAnnotation pair{p + ".pair", BlockKind::ReservingRepPair, {}, {{"entry", x}},
                             {{"reserved", double(m)}, {"channels", double(w)}}};
        std::string feed = x;
        if (m < w) {
          auto first = rep_block(b, p, x, w, w - m, 1, false);
          ConvParams<T> sel = blank_conv<T>(w, m, 1, 1);
          for (std::size_t j = 0; j < m; ++j) sel.weight(j, w - m + j, 0, 0) = T(1);
          auto sel_id = b.conv(p + ".select", x, std::move(sel));
          feed = b.concat(p + ".concat", {first, sel_id});
          pair.roles["first"] = p;
          pair.roles["select"] = sel_id;
          pair.roles["concat"] = feed;
          for (const auto& id : b.graph().annotation(p)->members) pair.members.push_back(id);
          pair.members.push_back(sel_id);
          pair.members.push_back(feed);
        }
        const auto q = stage_prefix(s, k + 1);
        x = rep_block(b, q, feed, w, w, 1, true);
        pair.roles["second"] = q;
        for (const auto& id : b.graph().annotation(q)->members) pair.members.push_back(id);
        b.annotate(std::move(pair));
      }
    }
    for (; k < n; ++k) x = rep_block(b, stage_prefix(s, k), x, w, w, 1, true);
  }
  x = b.pool("head.pool", x);
  x = b.dense("head.fc", x, blank_dense<T>(cin, cfg.num_classes));
  b.output(x);
  return init_weights(std::move(b).finish(), cfg.seed);
}

/// RMNeXt: ResNet-style stages of inverted residual blocks (1x1 expand,
/// grouped 3x3, 1x1 project, skip add, ReLU). Stage widths are width * 2^s;
/// the expand width is (width_multiple - 1) * stage width so that the
/// RM-converted grouped conv is width_multiple * stage width wide. Group
/// width at stage s is group_width * 2^s. Downsample blocks use a stride-2
/// grouped conv and a 1x1 stride-2 conv + BN skip.
template <typename T = float>
NetGraph<T> build_rmnext(const ArchConfig& cfg) {
  if (cfg.family != Family::RMNeXt) throw ValidationError("config is not an RMNeXt");
  detail::check_stages(cfg);
  if (cfg.width_multiple < 2) throw ValidationError("RMNeXt width_multiple must be >= 2");
  if (cfg.group_width == 0) throw ValidationError("group_width must be positive");
  using namespace detail;
  GraphBuilder<T> b(cfg.input);
  auto x = b.conv("stem.conv", b.input(), blank_conv<T>(cfg.input.c, cfg.width, 3, 1));
  x = b.bn("stem.bn", x, blank_bn<T>(cfg.width));
  x = b.act("stem.act", x);
  std::size_t cin = cfg.width;
  for (std::size_t s = 0; s < cfg.blocks_per_stage.size(); ++s) {
    const std::size_t w = cfg.width << s;
    const std::size_t gw = cfg.group_width << s;
    const std::size_t mid = (cfg.width_multiple - 1) * w;
    if (mid % gw != 0) {
      throw ValidationError("group width " + std::to_string(gw) +
                            " does not divide expand width " + std::to_string(mid));
    }
    for (std::size_t k = 0; k < cfg.blocks_per_stage[s]; ++k) {
      const auto p = stage_prefix(s, k);
      const bool down = s > 0 && k == 0;
      const std::size_t stride = down ? 2 : 1;
      if (cin % gw != 0) {
        throw ValidationError("group width " + std::to_string(gw) +
                              " does not divide block input width " + std::to_string(cin));
      }
      BlockAnnotation a{p, BlockKind::InvertedResidualBlock, {}, {{"entry", x}},
                        {{"expansion", double(mid) / double(cin)}, {"has_skip", 1.0}}};
      auto put = [&](const std::string& role, const std::string& id) {
        a.members.push_back(id);
        a.roles[role] = id;
        return id;
      };
      auto h = put("expand_conv", b.conv(p + ".expand", x, blank_conv<T>(cin, mid, 1, 1)));
      h = put("expand_bn", b.bn(p + ".expand_bn", h, blank_bn<T>(mid)));
      h = put("expand_act", b.act(p + ".expand_act", h));
      h = put("dw_conv",
              b.conv(p + ".group", h, blank_conv<T>(mid, mid, 3, stride, mid / gw)));
      h = put("dw_bn", b.bn(p + ".group_bn", h, blank_bn<T>(mid)));
      h = put("dw_act", b.act(p + ".group_act", h));
      h = put("project_conv", b.conv(p + ".project", h, blank_conv<T>(mid, w, 1, 1)));
      h = put("project_bn", b.bn(p + ".project_bn", h, blank_bn<T>(w)));
      std::string skip = x;
      if (down || cin != w) {
        skip = put("skip_conv", b.conv(p + ".skip_conv", x, blank_conv<T>(cin, w, 1, stride)));
        skip = put("skip_bn", b.bn(p + ".skip_bn", skip, blank_bn<T>(w)));
      }
      h = put("add", b.add(p + ".add", h, skip));
      x = put("out_act", b.act(p + ".out_act", h));
      b.annotate(std::move(a));
      cin = w;
    }
  }
  x = b.pool("head.pool", x);
  x = b.dense("head.fc", x, blank_dense<T>(cin, cfg.num_classes));
  b.output(x);
  return init_weights(std::move(b).finish(), cfg.seed);
}

/// Dispatches on cfg.family.
template <typename T = float>
NetGraph<T> build(const ArchConfig& cfg) {
  switch (cfg.family) {
    case Family::ResNetCIFAR: return build_resnet<T>(cfg);
    case Family::MobileNetV2Variant: return build_mobilenet_v2_variant<T>(cfg);
    case Family::RepVGG: return build_repvgg<T>(cfg);
    case Family::RMNeXt: return build_rmnext<T>(cfg);
  }
  throw ValidationError("unknown family");
}

}  // namespace rmg
