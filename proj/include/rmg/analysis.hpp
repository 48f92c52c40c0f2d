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

// Equivalence checks, parameter / MAC accounting, and BN statistics
// recalibration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "rmg/error.hpp"
#include "rmg/graph.hpp"
#include "rmg/ops.hpp"
#include "rmg/tensor.hpp"

namespace rmg {

/// Aligned plain-text table; the first row is the header.
inline std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return {};
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()), 0);
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) os << "  ";
      if (i == 0) {
        os << std::left << std::setw(static_cast<int>(width[i])) << r[i];
      } else {
        os << std::right << std::setw(static_cast<int>(width[i])) << r[i];
      }
    }
    os << '\n';
  };
  line(rows.front());
  std::size_t total = 0;
  for (auto w : width) total += w;
  os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (std::size_t i = 1; i < rows.size(); ++i) line(rows[i]);
  return os.str();
}

enum class InputDist { Normal, AbsNormal };

struct EquivalenceReport {
  double max_abs_diff = 0.0;
  double mean_abs_diff = 0.0;
  std::size_t n_inputs = 0;
  std::uint64_t seed = 0;
  double tol = 0.0;
  bool wide = false;
  bool pass = false;

  std::string str() const {
    std::ostringstream os;
    os << std::setprecision(6) << "equivalence " << (pass ? "PASS" : "FAIL")
       << ": max_abs_diff=" << max_abs_diff << " mean_abs_diff=" << mean_abs_diff
       << " n_inputs=" << n_inputs << " seed=" << seed << " tol=" << tol
       << (wide ? " (64-bit)" : " (32-bit)");
    return os.str();
  }
  nlohmann::json json() const {
    return {{"max_abs_diff", max_abs_diff}, {"mean_abs_diff", mean_abs_diff},
            {"n_inputs", n_inputs},         {"seed", seed},
            {"tol", tol},                   {"wide", wide},
            {"pass", pass}};
  }
};

/// Seeded verification input number `i` (batch of one).
inline Tensor4<double> verification_input(Shape4 s, std::uint64_t seed, std::size_t i,
                                          InputDist dist = InputDist::Normal) {
  s.n = 1;
  auto x = random_normal<double>(s, seed * 0x9E3779B97F4A7C15ULL + i);
  if (dist == InputDist::AbsNormal) {
    for (auto& v : x.vec()) v = std::abs(v);
  }
  return x;
}

namespace detail {
template <typename T>
void accumulate(EquivalenceReport& r, double& sum, std::size_t& count, const Tensor4<T>& ya,
                const Tensor4<T>& yb) {
  r.max_abs_diff = std::max(r.max_abs_diff, max_abs_diff(ya, yb));
  for (std::size_t k = 0; k < ya.size(); ++k) {
    sum += std::abs(static_cast<double>(ya.vec()[k]) - static_cast<double>(yb.vec()[k]));
  }
  count += ya.size();
}
}  // namespace detail

/// Runs `n` seeded inputs through both graphs and compares outputs. With
/// `wide` both graphs are first widened to 64-bit and evaluated there.
template <typename T>
EquivalenceReport verify_equivalence(const NetGraph<T>& a, const NetGraph<T>& b,
                                     std::size_t n = 20, std::uint64_t seed = 7,
                                     double tol = 1e-4, bool wide = false,
                                     InputDist dist = InputDist::Normal) {
  const auto sa = infer_shapes(a), sb = infer_shapes(b);
  const auto& ia = a.input_shape;
  const auto& ib = b.input_shape;
  if (ia.c != ib.c || ia.h != ib.h || ia.w != ib.w) {
    throw ShapeError("input shapes differ: " + ia.str() + " vs " + ib.str());
  }
  const auto& oa = sa.at(a.output_layer().id);
  const auto& ob = sb.at(b.output_layer().id);
  if (oa != ob) throw ShapeError("output shapes differ: " + oa.str() + " vs " + ob.str());
  EquivalenceReport r;
  r.n_inputs = n;
  r.seed = seed;
  r.tol = tol;
  r.wide = wide || std::is_same_v<T, double>;
  double sum = 0.0;
  std::size_t count = 0;
  if (wide) {
    const auto wa = cast<double>(a);
    const auto wb = cast<double>(b);
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = verification_input(ia, seed, i, dist);
      detail::accumulate(r, sum, count, forward(wa, x), forward(wb, x));
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = verification_input(ia, seed, i, dist).template cast<T>();
      detail::accumulate(r, sum, count, forward(a, x), forward(b, x));
    }
  }
  r.mean_abs_diff = count ? sum / static_cast<double>(count) : 0.0;
  r.pass = r.max_abs_diff <= tol;
  return r;
}

struct CostRow {
  std::string id;
  std::string kind;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

/// Per-layer and total counts. `params` covers conv / dense weights and
/// biases and PReLU slopes; BN is treated as folded unless count_bn is set.
struct CostReport {
  std::vector<CostRow> rows;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;          // multiply-accumulates of conv and dense weights
  std::uint64_t bias_macs = 0;     // one add per biased output element
  std::uint64_t act_ops = 0;       // one op per activation element
  std::uint64_t conv_weights = 0;
  std::uint64_t dense_weights = 0;
  std::uint64_t biases = 0;
  std::uint64_t slopes = 0;
  std::uint64_t bn_params = 0;

  std::uint64_t flops() const { return 2 * macs; }

  std::string table() const {
    std::vector<std::vector<std::string>> t{{"layer", "kind", "params", "MACs"}};
    for (const auto& r : rows) {
      t.push_back({r.id, r.kind, std::to_string(r.params), std::to_string(r.macs)});
    }
    t.push_back({"total", "", std::to_string(params), std::to_string(macs)});
    std::ostringstream os;
    os << render_table(t) << "FLOPs (2 x MACs): " << flops() << "\n"
       << "conv weights: " << conv_weights << "  dense weights: " << dense_weights
       << "  biases: " << biases << "  prelu slopes: " << slopes << "\n"
       << "bias adds: " << bias_macs << "  activation ops: " << act_ops << "\n";
    return os.str();
  }
  nlohmann::json json() const {
    return {{"params", params},
            {"macs", macs},
            {"flops", flops()},
            {"conv_weights", conv_weights},
            {"dense_weights", dense_weights},
            {"biases", biases},
            {"slopes", slopes},
            {"bn_params", bn_params}};
  }
};

template <typename T>
CostReport count_flops(const NetGraph<T>& g, bool count_bn = false) {
  const auto shapes = infer_shapes(g);
  CostReport r;
  for (const auto& l : g.layers) {
    CostRow row{l.id, std::string(to_string(l.kind)), 0, 0};
    const auto& out = shapes.at(l.id);
    const std::uint64_t out_elems = out.c * out.h * out.w;
    switch (l.kind) {
      case LayerKind::Conv: {
        const auto& p = l.conv();
        const std::uint64_t w = p.weight.size();
        const std::uint64_t per = p.weight.c() * p.kernel() * p.kernel();
        row.params = w + p.bias.size();
        row.macs = out_elems * per;
        r.conv_weights += w;
        r.biases += p.bias.size();
        if (p.has_bias()) r.bias_macs += out_elems;
        break;
      }
      case LayerKind::Dense: {
        const auto& p = l.dense();
        const std::uint64_t w = p.weight.size();
        row.params = w + p.bias.size();
        row.macs = w;
        r.dense_weights += w;
        r.biases += p.bias.size();
        r.bias_macs += p.bias.size();
        break;
      }
      case LayerKind::Act:
        row.params = l.act().slopes.size();
        r.slopes += row.params;
        r.act_ops += out_elems;
        break;
      case LayerKind::BN:
        r.bn_params += 4 * l.bn().channels();
        if (count_bn) row.params = 4 * l.bn().channels();
        break;
      default:
        break;
    }
    if (l.kind == LayerKind::Input || l.kind == LayerKind::Output) continue;
    if (row.params == 0 && row.macs == 0 && l.kind != LayerKind::BN &&
        l.kind != LayerKind::Act) {
      continue;
    }
    r.params += row.params;
    r.macs += row.macs;
    r.rows.push_back(std::move(row));
  }
  return r;
}

template <typename T>
CostReport count_params(const NetGraph<T>& g, bool count_bn = false) {
  return count_flops(g, count_bn);
}

/// Same counts with the graph's input resolution replaced.
template <typename T>
CostReport count_flops(NetGraph<T> g, Shape4 input, bool count_bn = false) {
  g.input_shape = input;
  g.input_shape.n = 1;
  return count_flops(g, count_bn);
}

/// Re-estimates every BN's running statistics from the activations the
/// batches produce, then rewrites gamma and beta so that each BN computes
/// exactly the same affine map as before.
template <typename T>
NetGraph<T> recalibrate_bn(NetGraph<T> g, const std::vector<Tensor4<T>>& batches) {
  if (batches.empty()) throw ValidationError("recalibration needs at least one batch");
  validate(g);
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> acc;
  std::map<std::string, double> counts;
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::BN) {
      acc[l.id] = {std::vector<double>(l.bn().channels(), 0.0),
                   std::vector<double>(l.bn().channels(), 0.0)};
      counts[l.id] = 0.0;
    }
  }
  // Two passes over the data: means, then centred second moments.
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& x : batches) {
      const auto trace = forward_trace(g, x);
      for (const auto& l : g.layers) {
        if (l.kind != LayerKind::BN) continue;
        const auto& in = trace.at(l.inputs[0]);
        auto& [sum, sq] = acc[l.id];
        const std::size_t hw = in.h() * in.w();
        for (std::size_t n = 0; n < in.n(); ++n) {
          for (std::size_t c = 0; c < in.c(); ++c) {
            const T* p = in.vec().data() + (n * in.c() + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              const double v = static_cast<double>(p[i]);
              if (pass == 0) {
                sum[c] += v;
              } else {
                const double d = v - sum[c];
                sq[c] += d * d;
              }
            }
          }
        }
        if (pass == 0) counts[l.id] += static_cast<double>(in.n() * hw);
      }
    }
    if (pass == 0) {
      for (auto& [id, s] : acc) {
        for (auto& v : s.first) v /= counts[id];
      }
    }
  }
  for (auto& l : g.layers) {
    if (l.kind != LayerKind::BN) continue;
    auto& p = l.bn();
    const auto& [mean, sq] = acc[l.id];
    for (std::size_t c = 0; c < p.channels(); ++c) {
      const double eps = static_cast<double>(p.eps);
      const double s = static_cast<double>(p.gamma[c]) /
                       std::sqrt(static_cast<double>(p.var[c]) + eps);
      const double nm = mean[c];
      const double nv = sq[c] / counts[l.id];
      const double beta = static_cast<double>(p.beta[c]) +
                          s * (nm - static_cast<double>(p.mean[c]));
      p.mean[c] = static_cast<T>(nm);
      p.var[c] = static_cast<T>(nv);
      p.gamma[c] = static_cast<T>(s * std::sqrt(static_cast<double>(p.var[c]) + eps));
      p.beta[c] = static_cast<T>(beta + s * (static_cast<double>(p.mean[c]) - nm));
    }
  }
  return g;
}

}  // namespace rmg
