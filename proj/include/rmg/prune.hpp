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

// BN-scale channel pruning on plain (add/concat-free) graphs.
//
// Masks come from |gamma| per BN. They are applied per segment: the layers
// between one dense conv (the producer) and the next dense conv or pooled
// classifier (the consumer), where only BN, activations and channel-wise
// grouped convs sit in between. A channel (or a whole group, when grouped
// convs are present) is removed when every channel of it is masked by some
// BN of the segment. Its remaining value at the consumer is then a constant,
// which is folded into the consumer's bias.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rmg/analysis.hpp"
#include "rmg/error.hpp"
#include "rmg/graph.hpp"
#include "rmg/ops.hpp"
#include "rmg/rm.hpp"

namespace rmg {

struct PruneConfig {
  double threshold = 0.0;
  std::size_t min_keep = 1;
  std::set<std::string> protect;

  void validate() const {
    if (!(threshold >= 0.0)) throw ValidationError("prune threshold must be >= 0");
    if (min_keep < 1) throw ValidationError("min_keep must be >= 1");
  }
};

/// Keep flags per BN layer id.
using ChannelMask = std::map<std::string, std::vector<bool>>;

/// Keep flags for one BN: |gamma| >= threshold, topped up to min_keep with
/// the largest |gamma| (lower index first on ties).
template <typename T>
std::vector<bool> bn_keep(const BNParams<T>& bn, double threshold, std::size_t min_keep) {
  const std::size_t c = bn.channels();
  std::vector<bool> keep(c);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < c; ++i) {
    keep[i] = std::abs(static_cast<double>(bn.gamma[i])) >= threshold;
    kept += keep[i];
  }
  if (kept < std::min(min_keep, c)) {
    std::vector<std::size_t> order(c);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(bn.gamma[a]) > std::abs(bn.gamma[b]);
    });
    for (std::size_t i = 0; kept < std::min(min_keep, c); ++i) {
      if (!keep[order[i]]) {
        keep[order[i]] = true;
        ++kept;
      }
    }
  }
  return keep;
}

template <typename T>
ChannelMask compute_masks(const NetGraph<T>& g, const PruneConfig& cfg) {
  cfg.validate();
  validate(g);
  std::vector<std::string> residual;
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::Add || l.kind == LayerKind::Concat) residual.push_back(l.id);
  }
  if (!residual.empty()) {
    std::string list;
    for (const auto& id : residual) list += (list.empty() ? "" : ", ") + id;
    throw ValidationError("pruning needs a plain graph; residual edges at: " + list);
  }
  ChannelMask m;
  for (const auto& l : g.layers) {
    if (l.kind != LayerKind::BN) continue;
    const bool prot = cfg.protect.count(l.id) || cfg.protect.count(l.inputs[0]);
    m[l.id] = prot ? std::vector<bool>(l.bn().channels(), true)
                   : bn_keep(l.bn(), cfg.threshold, cfg.min_keep);
  }
  return m;
}

struct PruneLayerRow {
  std::string id;
  std::size_t before = 0;
  std::size_t after = 0;
};

struct PruneReport {
  std::vector<PruneLayerRow> layers;   // BN layers, channels before / after
  std::vector<std::string> notes;      // restorations, protected segments, inexact folds
  std::size_t removed = 0;
  CostReport cost_before;
  CostReport cost_after;
  bool exact = true;  // every removed channel was constant everywhere

  std::string table() const {
    std::vector<std::vector<std::string>> t{{"bn layer", "before", "after", "keep"}};
    for (const auto& r : layers) {
      std::ostringstream k;
      k.setf(std::ios::fixed);
      k.precision(3);
      k << (r.before ? double(r.after) / double(r.before) : 1.0);
      t.push_back({r.id, std::to_string(r.before), std::to_string(r.after), k.str()});
    }
    std::ostringstream os;
    os << render_table(t);
    os << "params: " << cost_before.params << " -> " << cost_after.params
       << "   FLOPs: " << cost_before.flops() << " -> " << cost_after.flops() << "\n";
    for (const auto& n : notes) os << "note: " << n << "\n";
    return os.str();
  }
  nlohmann::json json() const {
    nlohmann::json j;
    j["layers"] = nlohmann::json::array();
    for (const auto& r : layers) {
      j["layers"].push_back({{"id", r.id}, {"before", r.before}, {"after", r.after}});
    }
    j["notes"] = notes;
    j["removed_channels"] = removed;
    j["exact"] = exact;
    j["before"] = cost_before.json();
    j["after"] = cost_after.json();
    return j;
  }
};

namespace detail {

template <typename T>
struct Segment {
  std::string producer;
  std::vector<std::string> inner;  // BN / Act / channel-wise grouped convs
  std::string consumer;            // dense conv, or the Dense behind a pool
  std::string pool;                // set when consumer is a Dense
  bool ok = false;
  std::string why;
};

template <typename T>
bool channelwise(const Layer<T>& l) {
  if (l.kind != LayerKind::Conv) return false;
  const auto& p = l.conv();
  return p.groups > 1 && p.in_channels() == p.out_channels();
}

template <typename T>
Segment<T> trace_segment(const NetGraph<T>& g, const std::string& producer) {
  Segment<T> s;
  s.producer = producer;
  std::string cur = producer;
  for (;;) {
    const auto cons = g.consumers(cur);
    if (cons.size() != 1) {
      s.why = "'" + cur + "' has " + std::to_string(cons.size()) + " consumers";
      return s;
    }
    const auto& l = g.layer(cons[0]);
    if (l.kind == LayerKind::BN || l.kind == LayerKind::Act || channelwise(l)) {
      s.inner.push_back(l.id);
    } else if (l.kind == LayerKind::Conv) {
      s.consumer = l.id;
      s.ok = true;
      return s;
    } else if (l.kind == LayerKind::GlobalPool) {
      const auto next = g.consumers(l.id);
      if (next.size() == 1 && g.layer(next[0]).kind == LayerKind::Dense) {
        s.pool = l.id;
        s.consumer = next[0];
        s.ok = true;
      } else {
        s.why = "pool is not followed by a dense layer";
      }
      return s;
    } else {
      s.why = "reaches " + std::string(to_string(l.kind)) + " layer '" + l.id + "'";
      return s;
    }
    cur = l.id;
  }
}

template <typename T>
T act_value(const ActParams<T>& a, std::size_t c, T v) {
  if (v >= T(0)) return v;
  return a.kind == ActKind::ReLU ? T(0) : a.slopes[c] * v;
}

template <typename T>
std::vector<std::size_t> kept_indices(const std::vector<bool>& keep) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) idx.push_back(i);
  }
  return idx;
}

template <typename T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

template <typename T>
Tensor4<T> pick_rows(const Tensor4<T>& w, const std::vector<std::size_t>& idx) {
  const std::size_t per = w.c() * w.h() * w.w();
  std::vector<T> v;
  v.reserve(idx.size() * per);
  for (auto i : idx) v.insert(v.end(), w.vec().begin() + i * per, w.vec().begin() + (i + 1) * per);
  return Tensor4<T>(Shape4{idx.size(), w.c(), w.h(), w.w()}, std::move(v));
}

template <typename T>
Tensor4<T> pick_cols(const Tensor4<T>& w, const std::vector<std::size_t>& idx) {
  Tensor4<T> out(Shape4{w.n(), idx.size(), w.h(), w.w()});
  const std::size_t hw = w.h() * w.w();
  for (std::size_t o = 0; o < w.n(); ++o) {
    for (std::size_t j = 0; j < idx.size(); ++j) {
      std::copy_n(w.vec().begin() + (o * w.c() + idx[j]) * hw, hw,
                  out.vec().begin() + (o * idx.size() + j) * hw);
    }
  }
  return out;
}

template <typename T>
BNParams<T> pick_bn(const BNParams<T>& b, const std::vector<std::size_t>& idx) {
  return {pick(b.gamma, idx), pick(b.beta, idx), pick(b.mean, idx), pick(b.var, idx), b.eps};
}

}  // namespace detail

/// Removes masked channels segment by segment (see the file comment).
/// Units that cannot be removed without changing a non-constant value are
/// kept and reported.
template <typename T>
NetGraph<T> apply_masks(NetGraph<T> g, const ChannelMask& masks, PruneReport* report = nullptr) {
  using namespace detail;
  validate(g);
  PruneReport local;
  PruneReport& rep = report ? *report : local;
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::BN && !masks.count(l.id)) {
      throw ValidationError("mask set does not cover batch-norm '" + l.id + "'");
    }
  }
  for (const auto& [id, keep] : masks) {
    if (!g.contains(id) || g.layer(id).kind != LayerKind::BN) {
      throw ValidationError("mask names '" + id + "', which is not a batch-norm layer");
    }
    if (keep.size() != g.layer(id).bn().channels()) {
      throw ValidationError("mask for '" + id + "' has the wrong length");
    }
  }
  std::map<std::string, std::size_t> bn_before, bn_after;
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::BN) bn_before[l.id] = bn_after[l.id] = l.bn().channels();
  }

  std::vector<std::string> producers;
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::Conv && l.conv().groups == 1) producers.push_back(l.id);
  }
  for (const auto& prod : producers) {
    const auto seg = trace_segment(g, prod);
    bool any_masked = false;
    for (const auto& id : seg.inner) {
      if (g.layer(id).kind == LayerKind::BN) {
        const auto& k = masks.at(id);
        any_masked |= std::find(k.begin(), k.end(), false) != k.end();
      }
    }
    if (!any_masked) continue;
    if (!seg.ok) {
      rep.notes.push_back("segment after '" + prod + "' is protected: " + seg.why);
      continue;
    }
    const std::size_t C = g.layer(prod).conv().out_channels();
    // Unit width: channels per group of the grouped convs in the segment.
    std::size_t unit = 1;
    bool uniform = true;
    for (const auto& id : seg.inner) {
      const auto& l = g.layer(id);
      if (l.kind == LayerKind::Conv) {
        const std::size_t gw = l.conv().weight.c();
        if (unit != 1 && gw != unit) uniform = false;
        unit = gw;
      }
    }
    if (!uniform) {
      rep.notes.push_back("segment after '" + prod + "' mixes group widths; left unpruned");
      continue;
    }
    const std::size_t n_units = C / unit;

    std::vector<bool> masked(C, false);
    for (const auto& id : seg.inner) {
      if (g.layer(id).kind != LayerKind::BN) continue;
      const auto& k = masks.at(id);
      for (std::size_t c = 0; c < C; ++c) masked[c] = masked[c] || !k[c];
    }
    std::vector<bool> cand(n_units, true);
    for (std::size_t u = 0; u < n_units; ++u) {
      for (std::size_t c = u * unit; c < (u + 1) * unit; ++c) cand[u] = cand[u] && masked[c];
    }
    for (std::size_t c = 0; c < C; ++c) {
      if (masked[c] && !cand[c / unit]) {
        rep.notes.push_back("channel " + std::to_string(c) + " after '" + prod +
                            "' kept: the rest of its group is kept");
      }
    }

    // Constant propagation over candidate channels. nullopt = not constant.
    std::vector<std::optional<T>> val(C);
    {
      const auto& p = g.layer(prod).conv();
      const std::size_t per = p.weight.c() * p.kernel() * p.kernel();
      for (std::size_t c = 0; c < C; ++c) {
        const auto* row = p.weight.vec().data() + c * per;
        if (std::all_of(row, row + per, [](T v) { return v == T(0); })) {
          val[c] = p.has_bias() ? p.bias[c] : T(0);
        }
      }
    }
    bool border_inexact = false;
    for (const auto& id : seg.inner) {
      const auto& l = g.layer(id);
      if (l.kind == LayerKind::BN) {
        const auto& b = l.bn();
        const auto& k = masks.at(id);
        for (std::size_t c = 0; c < C; ++c) {
          if (cand[c / unit] && !k[c]) {
            val[c] = b.beta[c];
          } else if (val[c]) {
            val[c] = (*val[c] - b.mean[c]) * b.scale(c) + b.beta[c];
          }
        }
        for (std::size_t c = 0; c < C; ++c) {
          if (cand[c / unit] && !k[c] && b.gamma[c] != T(0)) rep.exact = false;
        }
      } else if (l.kind == LayerKind::Act) {
        for (std::size_t c = 0; c < C; ++c) {
          if (val[c]) val[c] = act_value(l.act(), c, *val[c]);
        }
      } else {
        const auto& p = l.conv();
        const std::size_t gw = p.weight.c(), k = p.kernel();
        std::vector<std::optional<T>> next(C);
        for (std::size_t o = 0; o < C; ++o) {
          const std::size_t base = (o / gw) * gw;
          T acc = p.has_bias() ? p.bias[o] : T(0);
          bool known = true;
          for (std::size_t i = 0; i < gw && known; ++i) {
            for (std::size_t y = 0; y < k; ++y) {
              for (std::size_t x = 0; x < k; ++x) {
                const T w = p.weight(o, i, y, x);
                if (w == T(0)) continue;
                if (!val[base + i]) {
                  known = false;
                  break;
                }
                acc += w * *val[base + i];
                if ((y != k / 2 || x != k / 2) && *val[base + i] != T(0)) border_inexact = true;
              }
              if (!known) break;
            }
          }
          if (known) next[o] = acc;
        }
        val = std::move(next);
      }
    }

    std::vector<bool> keep_unit(n_units, true);
    for (std::size_t u = 0; u < n_units; ++u) {
      if (!cand[u]) continue;
      bool all_const = true;
      for (std::size_t c = u * unit; c < (u + 1) * unit; ++c) all_const = all_const && val[c];
      if (all_const) {
        keep_unit[u] = false;
      } else {
        rep.notes.push_back("unit " + std::to_string(u) + " after '" + prod +
                            "' restored: its value at '" + seg.consumer +
                            "' is not constant");
      }
    }
    // Honour min_keep-like sanity: never empty a segment.
    if (std::none_of(keep_unit.begin(), keep_unit.end(), [](bool b) { return b; })) {
      keep_unit[0] = true;
      rep.notes.push_back("segment after '" + prod + "' would lose every channel; kept unit 0");
    }
    std::vector<bool> keep(C);
    for (std::size_t c = 0; c < C; ++c) keep[c] = keep_unit[c / unit];
    const auto idx = kept_indices<T>(keep);
    if (idx.size() == C) continue;

    // Fold removed constants into the consumer.
    auto& cons = g.layer(seg.consumer);
    if (cons.kind == LayerKind::Conv) {
      auto& p = cons.conv();
      const std::size_t k = p.kernel();
      if (!p.has_bias()) p.bias.assign(p.out_channels(), T(0));
      for (std::size_t o = 0; o < p.out_channels(); ++o) {
        for (std::size_t c = 0; c < C; ++c) {
          if (keep[c] || *val[c] == T(0)) continue;
          for (std::size_t y = 0; y < k; ++y) {
            for (std::size_t x = 0; x < k; ++x) {
              const T w = p.weight(o, c, y, x);
              if (w == T(0)) continue;
              p.bias[o] += w * *val[c];
              if (y != k / 2 || x != k / 2) border_inexact = true;
            }
          }
        }
      }
      if (std::all_of(p.bias.begin(), p.bias.end(), [](T b) { return b == T(0); })) {
        bool had = false;
        for (std::size_t c = 0; c < C; ++c) had = had || (!keep[c] && *val[c] != T(0));
        if (!had) p.bias.clear();
      }
      p.weight = pick_cols(p.weight, idx);
    } else {
      auto& d = cons.dense();
      if (d.bias.empty()) d.bias.assign(d.out_features(), T(0));
      for (std::size_t o = 0; o < d.out_features(); ++o) {
        for (std::size_t c = 0; c < C; ++c) {
          if (!keep[c]) d.bias[o] += d.weight(o, c, 0, 0) * *val[c];
        }
      }
      d.weight = pick_cols(d.weight, idx);
    }
    if (border_inexact) {
      rep.exact = false;
      rep.notes.push_back("segment after '" + prod +
                          "': folded constants are inexact at zero-padded borders");
    }

    // Shrink producer and inner layers.
    {
      auto& p = g.layer(prod).conv();
      p.weight = pick_rows(p.weight, idx);
      if (p.has_bias()) p.bias = pick(p.bias, idx);
    }
    for (const auto& id : seg.inner) {
      auto& l = g.layer(id);
      if (l.kind == LayerKind::BN) {
        l.params = pick_bn(l.bn(), idx);
        bn_after[id] = idx.size();
      } else if (l.kind == LayerKind::Act) {
        auto& a = l.act();
        if (a.kind == ActKind::PReLU) a.slopes = pick(a.slopes, idx);
      } else {
        auto& p = l.conv();
        p.weight = pick_rows(p.weight, idx);
        if (p.has_bias()) p.bias = pick(p.bias, idx);
        p.groups = idx.size() / p.weight.c();
      }
    }
    rep.removed += C - idx.size();
  }
  rep.layers.clear();
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::BN) rep.layers.push_back({l.id, bn_before[l.id], bn_after[l.id]});
  }
  infer_shapes(g);
  return g;
}

template <typename T>
struct PruneResult {
  NetGraph<T> graph;
  PruneReport report;
};

/// Converts a residual graph with reserve-and-merge, then prunes the plain
/// result. The report is also stored under metadata["prune_report"].
template <typename T>
PruneResult<T> prune_pipeline(const NetGraph<T>& net, const PruneConfig& cfg,
                              const RmOptions& rm = {}) {
  cfg.validate();
  auto plain = convert_graph(net, rm);
  if (!plain.annotations.empty()) {
    plain = reparam_all(std::move(plain));
  }
  PruneResult<T> r;
  r.report.cost_before = count_params(plain);
  const auto masks = compute_masks(plain, cfg);
  r.graph = apply_masks(std::move(plain), masks, &r.report);
  r.report.cost_after = count_params(r.graph);
  r.graph.metadata["prune_report"] = r.report.json();
  r.graph.metadata["prune_report"]["threshold"] = cfg.threshold;
  r.graph.metadata["prune_report"]["min_keep"] = cfg.min_keep;
  return r;
}

/// Conv + dense weight count reachable by pruning a ResNet directly. Block
/// internal channels follow their BN masks; a channel of the residual
/// stream can only go when every BN writing into that stream masks it.
template <typename T>
std::uint64_t resnet_direct_weight_count(const NetGraph<T>& net, const PruneConfig& cfg) {
  cfg.validate();
  validate(net);
  std::map<std::string, std::vector<bool>> keep;
  for (const auto& l : net.layers) {
    if (l.kind == LayerKind::BN) {
      keep[l.id] = cfg.protect.count(l.id) ? std::vector<bool>(l.bn().channels(), true)
                                           : bn_keep(l.bn(), cfg.threshold, cfg.min_keep);
    }
  }
  // stream id per stream-carrying layer, and the BNs writing each stream
  std::map<std::string, int> stream_of;
  std::vector<std::vector<std::string>> writers;
  auto bn_behind = [&](const std::string& id) -> std::string {
    const auto& l = net.layer(id);
    if (l.kind == LayerKind::Act) {
      const auto& src = net.layer(l.inputs[0]);
      if (src.kind == LayerKind::BN) return src.id;
    }
    return {};
  };
  std::vector<const BlockAnnotation*> blocks;
  for (const auto& a : net.annotations) {
    if (a.kind == BlockKind::BasicResBlock || a.kind == BlockKind::DownsampleResBlock) {
      blocks.push_back(&a);
    }
  }
  std::sort(blocks.begin(), blocks.end(), [&](auto* x, auto* y) {
    return *net.index_of(x->role("conv1")) < *net.index_of(y->role("conv1"));
  });
  for (const auto* a : blocks) {
    const auto entry = a->role("entry");
    if (!stream_of.count(entry)) {
      stream_of[entry] = static_cast<int>(writers.size());
      writers.push_back({});
      if (auto b = bn_behind(entry); !b.empty()) writers.back().push_back(b);
    }
    int s = stream_of[entry];
    if (a->kind == BlockKind::DownsampleResBlock) {
      s = static_cast<int>(writers.size());
      writers.push_back({});
    }
    writers[s].push_back(a->role("bn2"));
    if (a->has_role("skip_bn")) writers[s].push_back(a->role("skip_bn"));
    stream_of[a->role("out_act")] = s;
  }
  std::vector<std::vector<bool>> stream_keep(writers.size());
  for (std::size_t s = 0; s < writers.size(); ++s) {
    for (const auto& w : writers[s]) {
      const auto& k = keep.at(w);
      if (stream_keep[s].empty()) stream_keep[s].assign(k.size(), false);
      for (std::size_t c = 0; c < k.size(); ++c) stream_keep[s][c] = stream_keep[s][c] || k[c];
    }
  }
  auto count = [](const std::vector<bool>& v) {
    return static_cast<std::uint64_t>(std::count(v.begin(), v.end(), true));
  };
  // Kept channels of the value produced by each layer.
  std::map<std::string, std::uint64_t> width;
  const auto shapes = infer_shapes(net);
  std::uint64_t total = 0;
  for (const auto& l : net.layers) {
    std::uint64_t w = shapes.at(l.id).c;
    if (stream_of.count(l.id)) {
      w = count(stream_keep[stream_of[l.id]]);
    } else if (l.kind == LayerKind::BN) {
      w = count(keep.at(l.id));
    } else if (!l.inputs.empty() && l.kind != LayerKind::Conv && l.kind != LayerKind::Dense) {
      w = width.at(l.inputs[0]);
    }
    width[l.id] = w;
  }
  // Convs take their output width from the BN that follows them.
  for (const auto& l : net.layers) {
    if (l.kind == LayerKind::Conv) {
      const auto cons = net.consumers(l.id);
      std::uint64_t out = shapes.at(l.id).c;
      if (cons.size() == 1 && net.layer(cons[0]).kind == LayerKind::BN) {
        const auto& bn = net.layer(cons[0]);
        out = count(keep.at(bn.id));
        // stream writers are pruned only with their whole stream
        for (const auto& [id, s] : stream_of) {
          (void)id;
          for (const auto& wr : writers[s]) {
            if (wr == bn.id) out = count(stream_keep[s]);
          }
        }
      }
      const auto& p = l.conv();
      total += out * (width.at(l.inputs[0]) / p.groups) * p.kernel() * p.kernel();
    } else if (l.kind == LayerKind::Dense) {
      const auto& in = shapes.at(l.inputs[0]);
      total += l.dense().out_features() * width.at(l.inputs[0]) * in.h * in.w;
    }
  }
  return total;
}

}  // namespace rmg
