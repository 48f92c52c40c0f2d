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

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>
#include "rmg/error.hpp"
#include "rmg/ops.hpp"
#include "rmg/tensor.hpp"

namespace rmg {

enum class LayerKind { Input, Conv, BN, Act, Add, Concat, GlobalPool, Dense, Output };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "Input";
    case LayerKind::Conv: return "Conv";
    case LayerKind::BN: return "BN";
    case LayerKind::Act: return "Act";
    case LayerKind::Add: return "Add";
    case LayerKind::Concat: return "Concat";
    case LayerKind::GlobalPool: return "GlobalPool";
    case LayerKind::Dense: return "Dense";
    case LayerKind::Output: return "Output";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(std::string_view s) {
  for (auto k : {LayerKind::Input, LayerKind::Conv, LayerKind::BN, LayerKind::Act,
                 LayerKind::Add, LayerKind::Concat, LayerKind::GlobalPool,
                 LayerKind::Dense, LayerKind::Output}) {
    if (to_string(k) == s) return k;
  }
  throw FormatError("unknown layer kind '" + std::string(s) + "'");
}

enum class BlockKind {
  BasicResBlock,
  DownsampleResBlock,
  InvertedResidualBlock,
  RepBlock,
  ReservingRepPair
};

inline std::string_view to_string(BlockKind k) {
  switch (k) {
    case BlockKind::BasicResBlock: return "BasicResBlock";
    case BlockKind::DownsampleResBlock: return "DownsampleResBlock";
    case BlockKind::InvertedResidualBlock: return "InvertedResidualBlock";
    case BlockKind::RepBlock: return "RepBlock";
    case BlockKind::ReservingRepPair: return "ReservingRepPair";
  }
  return "?";
}

inline BlockKind block_kind_from_string(std::string_view s) {
  for (auto k : {BlockKind::BasicResBlock, BlockKind::DownsampleResBlock,
                 BlockKind::InvertedResidualBlock, BlockKind::RepBlock,
                 BlockKind::ReservingRepPair}) {
    if (to_string(k) == s) return k;
  }
  throw FormatError("unknown block kind '" + std::string(s) + "'");
}

template <typename T>
using LayerParams =
    std::variant<std::monostate, ConvParams<T>, BNParams<T>, ActParams<T>, DenseParams<T>>;

template <typename T = float>
struct Layer {
  std::string id;
  LayerKind kind = LayerKind::Input;
  std::vector<std::string> inputs;
  LayerParams<T> params;

  ConvParams<T>& conv() { return get<ConvParams<T>>("Conv"); }
  const ConvParams<T>& conv() const { return get<ConvParams<T>>("Conv"); }
  BNParams<T>& bn() { return get<BNParams<T>>("BN"); }
  const BNParams<T>& bn() const { return get<BNParams<T>>("BN"); }
  ActParams<T>& act() { return get<ActParams<T>>("Act"); }
  const ActParams<T>& act() const { return get<ActParams<T>>("Act"); }
  DenseParams<T>& dense() { return get<DenseParams<T>>("Dense"); }
  const DenseParams<T>& dense() const { return get<DenseParams<T>>("Dense"); }

  bool is_conv() const { return kind == LayerKind::Conv; }
  bool is_relu() const {
    return kind == LayerKind::Act && act().kind == ActKind::ReLU;
  }

  friend bool operator==(const Layer&, const Layer&) = default;

 private:
  template <typename P>
  P& get(const char* what) {
    if (auto* p = std::get_if<P>(&params)) return *p;
    throw ValidationError("layer '" + id + "' is not a " + what + " layer");
  }
  template <typename P>
  const P& get(const char* what) const {
    if (auto* p = std::get_if<P>(&params)) return *p;
    throw ValidationError("layer '" + id + "' is not a " + what + " layer");
  }
};

/// Block-scoped rewrite target. `roles` names the member playing each part
/// of the block pattern (e.g. "conv1" -> layer id); `attrs` carries numeric
/// block attributes such as the expansion factor or reserved-channel count.
struct BlockAnnotation {
  std::string id;
  BlockKind kind = BlockKind::BasicResBlock;
  std::vector<std::string> members;
  std::map<std::string, std::string> roles;
  std::map<std::string, double> attrs;

  bool has_role(const std::string& r) const { return roles.count(r) != 0; }
  const std::string& role(const std::string& r) const {
    auto it = roles.find(r);
    if (it == roles.end()) {
      throw ValidationError("block '" + id + "' has no role '" + r + "'");
    }
    return it->second;
  }
  double attr(const std::string& a, double fallback = 0.0) const {
    auto it = attrs.find(a);
    return it == attrs.end() ? fallback : it->second;
  }
  friend bool operator==(const BlockAnnotation&, const BlockAnnotation&) = default;
};

/// Layers in topological order plus block annotations. Per-sample shapes
/// use Shape4 with n == 1.
template <typename T = float>
struct NetGraph {
  std::vector<Layer<T>> layers;
  std::vector<BlockAnnotation> annotations;
  Shape4 input_shape;
  nlohmann::json metadata = nlohmann::json::object();

  std::optional<std::size_t> index_of(std::string_view id) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].id == id) return i;
    }
    return std::nullopt;
  }
  bool contains(std::string_view id) const { return index_of(id).has_value(); }

  Layer<T>& layer(std::string_view id) { return layers[require(id)]; }
  const Layer<T>& layer(std::string_view id) const { return layers[require(id)]; }

  std::vector<std::string> consumers(std::string_view id) const {
    std::vector<std::string> out;
    for (const auto& l : layers) {
      if (std::find(l.inputs.begin(), l.inputs.end(), id) != l.inputs.end()) {
        out.push_back(l.id);
      }
    }
    return out;
  }

  const Layer<T>& input_layer() const { return first_of(LayerKind::Input); }
  const Layer<T>& output_layer() const { return first_of(LayerKind::Output); }

  const BlockAnnotation* annotation(std::string_view id) const {
    for (const auto& a : annotations) {
      if (a.id == id) return &a;
    }
    return nullptr;
  }

  void erase_annotation(std::string_view id) {
    std::erase_if(annotations, [&](const BlockAnnotation& a) { return a.id == id; });
  }

  /// Replaces every use of `from` as a layer input (or block entry) by `to`.
  void rewire(std::string_view from, const std::string& to) {
    for (auto& l : layers) {
      for (auto& in : l.inputs) {
        if (in == from) in = to;
      }
    }
    for (auto& a : annotations) {
      auto it = a.roles.find("entry");
      if (it != a.roles.end() && it->second == from) it->second = to;
    }
  }

  void erase_layers(const std::vector<std::string>& ids) {
    std::erase_if(layers, [&](const Layer<T>& l) {
      return std::find(ids.begin(), ids.end(), l.id) != ids.end();
    });
  }

  /// Inserts `l` immediately after the layer named `after`.
  void insert_after(std::string_view after, Layer<T> l) {
    const auto i = require(after);
    layers.insert(layers.begin() + static_cast<std::ptrdiff_t>(i) + 1, std::move(l));
  }

  std::string fresh_id(const std::string& base) const {
    if (!contains(base)) return base;
    for (int i = 1;; ++i) {
      auto cand = base + "_" + std::to_string(i);
      if (!contains(cand)) return cand;
    }
  }

  friend bool operator==(const NetGraph&, const NetGraph&) = default;

 private:
  std::size_t require(std::string_view id) const {
    auto i = index_of(id);
    if (!i) throw ValidationError("unknown layer id '" + std::string(id) + "'");
    return *i;
  }
  const Layer<T>& first_of(LayerKind k) const {
    for (const auto& l : layers) {
      if (l.kind == k) return l;
    }
    throw ValidationError("graph has no " + std::string(to_string(k)) + " layer");
  }
};

/// Appends layers in order; convenience for builders and tests.
template <typename T = float>
class GraphBuilder {
 public:
  explicit GraphBuilder(Shape4 input_shape) {
    g_.input_shape = input_shape;
    g_.input_shape.n = 1;
    g_.layers.push_back({"input", LayerKind::Input, {}, std::monostate{}});
  }

  std::string input() const { return g_.layers.front().id; }

  std::string conv(std::string id, const std::string& in, ConvParams<T> p) {
    return push(std::move(id), LayerKind::Conv, {in}, std::move(p));
  }
  std::string bn(std::string id, const std::string& in, BNParams<T> p) {
    return push(std::move(id), LayerKind::BN, {in}, std::move(p));
  }
  std::string act(std::string id, const std::string& in, ActParams<T> p = {}) {
    return push(std::move(id), LayerKind::Act, {in}, std::move(p));
  }
  std::string add(std::string id, const std::string& a, const std::string& b) {
    return push(std::move(id), LayerKind::Add, {a, b}, std::monostate{});
  }
  std::string concat(std::string id, std::vector<std::string> ins) {
    return push(std::move(id), LayerKind::Concat, std::move(ins), std::monostate{});
  }
  std::string pool(std::string id, const std::string& in) {
    return push(std::move(id), LayerKind::GlobalPool, {in}, std::monostate{});
  }
  std::string dense(std::string id, const std::string& in, DenseParams<T> p) {
    return push(std::move(id), LayerKind::Dense, {in}, std::move(p));
  }
  std::string output(const std::string& in) {
    return push("output", LayerKind::Output, {in}, std::monostate{});
  }

  void annotate(BlockAnnotation a) { g_.annotations.push_back(std::move(a)); }

  NetGraph<T> finish() && { return std::move(g_); }
  NetGraph<T>& graph() { return g_; }

 private:
  std::string push(std::string id, LayerKind kind, std::vector<std::string> ins,
                   LayerParams<T> p) {
    if (g_.contains(id)) throw ValidationError("duplicate layer id '" + id + "'");
    g_.layers.push_back({id, kind, std::move(ins), std::move(p)});
    return id;
  }

  NetGraph<T> g_;
};

/// Checks ids, wiring, arity, and parameter self-consistency. Shape
/// consistency is checked by infer_shapes.
template <typename T>
void validate(const NetGraph<T>& g) {
  std::unordered_map<std::string, std::size_t> pos;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    if (l.id.empty()) throw ValidationError("layer with empty id");
    if (!pos.emplace(l.id, i).second) {
      throw ValidationError("duplicate layer id '" + l.id + "'");
    }
    for (const auto& in : l.inputs) {
      auto it = pos.find(in);
      if (it == pos.end()) {
        throw ValidationError("layer '" + l.id + "' references '" + in +
                              "' which is missing or does not precede it");
      }
    }
    const auto arity = l.inputs.size();
    bool ok = true;
    switch (l.kind) {
      case LayerKind::Input: ok = arity == 0; ++n_in; break;
      case LayerKind::Add: ok = arity == 2; break;
      case LayerKind::Concat: ok = arity >= 2; break;
      case LayerKind::Output: ok = arity == 1; ++n_out; break;
      default: ok = arity == 1; break;
    }
    if (!ok) {
      throw ValidationError("layer '" + l.id + "' of kind " +
                            std::string(to_string(l.kind)) + " has " +
                            std::to_string(arity) + " inputs");
    }
    const bool want_params = l.kind == LayerKind::Conv || l.kind == LayerKind::BN ||
                             l.kind == LayerKind::Act || l.kind == LayerKind::Dense;
    if (want_params == std::holds_alternative<std::monostate>(l.params)) {
      throw ValidationError("layer '" + l.id + "' has parameters of the wrong kind");
    }
    switch (l.kind) {
      case LayerKind::Conv: l.conv().validate(); break;
      case LayerKind::BN: l.bn().validate(); break;
      case LayerKind::Act: (void)l.act(); break;
      case LayerKind::Dense: (void)l.dense(); break;
      default: break;
    }
  }
  if (n_in != 1 || n_out != 1) {
    throw ValidationError("graph must have exactly one Input and one Output");
  }
  if (g.layers.front().kind != LayerKind::Input) {
    throw ValidationError("Input must be the first layer");
  }
  for (const auto& a : g.annotations) {
    for (const auto& m : a.members) {
      if (!pos.count(m)) {
        throw ValidationError("annotation '" + a.id + "' references missing layer '" +
                              m + "'");
      }
    }
    for (const auto& [role, id] : a.roles) {
      if (!pos.count(id) && !g.annotation(id)) {
        throw ValidationError("annotation '" + a.id + "' role '" + role +
                              "' references missing layer '" + id + "'");
      }
    }
  }
}

/// Per-layer output shape (n == 1) in layer order.
template <typename T>
std::map<std::string, Shape4> infer_shapes(const NetGraph<T>& g) {
  validate(g);
  std::map<std::string, Shape4> s;
  auto fail = [](const Layer<T>& l, const std::string& why) -> ShapeError {
    return ShapeError("shape conflict at layer '" + l.id + "': " + why);
  };
  for (const auto& l : g.layers) {
    Shape4 out;
    switch (l.kind) {
      case LayerKind::Input:
        out = g.input_shape;
        out.n = 1;
        break;
      case LayerKind::Conv: {
        const auto& in = s.at(l.inputs[0]);
        const auto& p = l.conv();
        if (in.c != p.in_channels()) {
          throw fail(l, "expects " + std::to_string(p.in_channels()) +
                            " input channels, got " + std::to_string(in.c));
        }
        const auto k = p.kernel();
        if (in.h + 2 * p.padding < k || in.w + 2 * p.padding < k) {
          throw fail(l, "kernel larger than padded input");
        }
        out = {1, p.out_channels(), conv_out_extent(in.h, k, p.padding, p.stride),
               conv_out_extent(in.w, k, p.padding, p.stride)};
        break;
      }
      case LayerKind::BN: {
        out = s.at(l.inputs[0]);
        if (out.c != l.bn().channels()) {
          throw fail(l, "batch-norm has " + std::to_string(l.bn().channels()) +
                            " channels, input has " + std::to_string(out.c));
        }
        break;
      }
      case LayerKind::Act: {
        out = s.at(l.inputs[0]);
        const auto& a = l.act();
        if (a.kind == ActKind::PReLU && a.slopes.size() != out.c) {
          throw fail(l, "prelu slope count does not match channels");
        }
        break;
      }
      case LayerKind::Add: {
        const auto& a = s.at(l.inputs[0]);
        const auto& b = s.at(l.inputs[1]);
        if (a != b) throw fail(l, "add of " + a.str() + " and " + b.str());
        out = a;
        break;
      }
      case LayerKind::Concat: {
        out = s.at(l.inputs[0]);
        for (std::size_t i = 1; i < l.inputs.size(); ++i) {
          const auto& b = s.at(l.inputs[i]);
          if (b.h != out.h || b.w != out.w) {
            throw fail(l, "concat spatial mismatch " + out.str() + " vs " + b.str());
          }
          out.c += b.c;
        }
        break;
      }
      case LayerKind::GlobalPool:
        out = s.at(l.inputs[0]);
        out.h = out.w = 1;
        break;
      case LayerKind::Dense: {
        const auto& in = s.at(l.inputs[0]);
        const auto& d = l.dense();
        if (in.c * in.h * in.w != d.in_features()) {
          throw fail(l, "dense expects " + std::to_string(d.in_features()) +
                            " features, got " + std::to_string(in.c * in.h * in.w));
        }
        if (!d.bias.empty() && d.bias.size() != d.out_features()) {
          throw fail(l, "dense bias length mismatch");
        }
        out = {1, d.out_features(), 1, 1};
        break;
      }
      case LayerKind::Output:
        out = s.at(l.inputs[0]);
        break;
    }
    s[l.id] = out;
  }
  return s;
}

namespace detail {

template <typename T>
Tensor4<T> eval_layer(const Layer<T>& l, const std::vector<const Tensor4<T>*>& in) {
  switch (l.kind) {
    case LayerKind::Conv: return conv2d(*in[0], l.conv());
    case LayerKind::BN: return batchnorm_infer(*in[0], l.bn());
    case LayerKind::Act: return activation(*in[0], l.act());
    case LayerKind::Add: return add(*in[0], *in[1]);
    case LayerKind::Concat: {
      Tensor4<T> acc = concat_channels(*in[0], *in[1]);
      for (std::size_t i = 2; i < in.size(); ++i) acc = concat_channels(acc, *in[i]);
      return acc;
    }
    case LayerKind::GlobalPool: return global_avg_pool(*in[0]);
    case LayerKind::Dense: return dense(*in[0], l.dense());
    case LayerKind::Output: return *in[0];
    case LayerKind::Input: break;
  }
  throw ValidationError("cannot evaluate layer '" + l.id + "'");
}

template <typename T>
void check_input(const NetGraph<T>& g, const Tensor4<T>& x) {
  const auto& s = g.input_shape;
  if (x.c() != s.c || x.h() != s.h || x.w() != s.w) {
    throw ShapeError("input of shape " + x.shape().str() +
                     " does not match graph input (c, h, w) = (" + std::to_string(s.c) +
                     ", " + std::to_string(s.h) + ", " + std::to_string(s.w) + ")");
  }
}

}  // namespace detail

/// Runs every layer in order and returns the Output tensor. Intermediate
/// tensors are released after their last consumer.
template <typename T>
Tensor4<T> forward(const NetGraph<T>& g, const Tensor4<T>& x) {
  validate(g);
  detail::check_input(g, x);
  std::unordered_map<std::string, std::size_t> pos;
  std::vector<std::size_t> last_use(g.layers.size(), 0);
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    pos[g.layers[i].id] = i;
    for (const auto& in : g.layers[i].inputs) last_use[pos.at(in)] = i;
  }
  std::vector<std::optional<Tensor4<T>>> vals(g.layers.size());
  std::optional<Tensor4<T>> result;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    if (l.kind == LayerKind::Input) {
      vals[i] = x;
    } else {
      std::vector<const Tensor4<T>*> ins;
      for (const auto& in : l.inputs) ins.push_back(&*vals[pos.at(in)]);
      try {
        vals[i] = detail::eval_layer(l, ins);
      } catch (const ShapeError& e) {
        throw ShapeError("layer '" + l.id + "': " + e.what());
      }
      for (const auto& in : l.inputs) {
        const auto j = pos.at(in);
        if (last_use[j] == i) vals[j].reset();
      }
    }
    if (l.kind == LayerKind::Output) result = std::move(vals[i]);
  }
  return std::move(*result);
}

/// Like forward, but keeps every layer's output, keyed by layer id.
template <typename T>
std::map<std::string, Tensor4<T>> forward_trace(const NetGraph<T>& g, const Tensor4<T>& x) {
  validate(g);
  detail::check_input(g, x);
  std::map<std::string, Tensor4<T>> vals;
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::Input) {
      vals.emplace(l.id, x);
      continue;
    }
    std::vector<const Tensor4<T>*> ins;
    for (const auto& in : l.inputs) ins.push_back(&vals.at(in));
    vals.emplace(l.id, detail::eval_layer(l, ins));
  }
  return vals;
}

/// Converts every parameter to scalar type U.
template <typename U, typename T>
NetGraph<U> cast(const NetGraph<T>& g) {
  NetGraph<U> out;
  out.annotations = g.annotations;
  out.input_shape = g.input_shape;
  out.metadata = g.metadata;
  for (const auto& l : g.layers) {
    Layer<U> nl{l.id, l.kind, l.inputs, std::monostate{}};
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, std::monostate>) {
            nl.params = std::monostate{};
          } else {
            nl.params = p.template cast<U>();
          }
        },
        l.params);
    out.layers.push_back(std::move(nl));
  }
  return out;
}

/// True when the graph has a single computation path: no Add or Concat.
template <typename T>
bool is_plain(const NetGraph<T>& g) {
  return std::none_of(g.layers.begin(), g.layers.end(), [](const Layer<T>& l) {
    return l.kind == LayerKind::Add || l.kind == LayerKind::Concat;
  });
}

template <typename T>
std::size_t count_kind(const NetGraph<T>& g, LayerKind k) {
  return static_cast<std::size_t>(std::count_if(
      g.layers.begin(), g.layers.end(), [k](const Layer<T>& l) { return l.kind == k; }));
}

/// One line per layer in the style of a PyTorch nn.Sequential printout.
/// Input and Output are omitted; a GlobalPool prints as pool + flatten.
template <typename T>
std::vector<std::string> describe_layers(const NetGraph<T>& g) {
  std::vector<std::string> body;
  const auto shapes = infer_shapes(g);
  for (const auto& l : g.layers) {
    std::ostringstream os;
    switch (l.kind) {
      case LayerKind::Input:
      case LayerKind::Output:
        continue;
      case LayerKind::Conv: {
        const auto& p = l.conv();
        const auto k = p.kernel();
        os << "Conv2d(" << p.in_channels() << ", " << p.out_channels()
           << ", kernel_size=(" << k << ", " << k << "), stride=(" << p.stride << ", "
           << p.stride << ")";
        if (p.padding) os << ", padding=(" << p.padding << ", " << p.padding << ")";
        if (p.groups != 1) os << ", groups=" << p.groups;
        if (!p.has_bias()) os << ", bias=False";
        os << ")";
        break;
      }
      case LayerKind::BN:
        os << "BatchNorm2d(" << l.bn().channels() << ")";
        break;
      case LayerKind::Act:
        if (l.act().kind == ActKind::ReLU) {
          os << "ReLU(inplace=True)";
        } else {
          os << "PReLU(num_parameters=" << l.act().slopes.size() << ")";
        }
        break;
      case LayerKind::Add:
        os << "Add(" << l.inputs[0] << ", " << l.inputs[1] << ")";
        break;
      case LayerKind::Concat:
        os << "Concat(channels=" << shapes.at(l.id).c << ")";
        break;
      case LayerKind::GlobalPool:
        body.push_back("AdaptiveAvgPool2d(output_size=1)");
        os << "Flatten(start_dim=1, end_dim=-1)";
        break;
      case LayerKind::Dense:
        os << "Linear(in_features=" << l.dense().in_features()
           << ", out_features=" << l.dense().out_features()
           << ", bias=" << (l.dense().bias.empty() ? "False" : "True") << ")";
        break;
    }
    body.push_back(os.str());
  }
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < body.size(); ++i) {
    lines.push_back("(" + std::to_string(i) + "): " + body[i]);
  }
  return lines;
}

}  // namespace rmg
