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

// Model files: a JSON manifest at `path` and a little-endian float32 blob at
// `path + ".bin"`. Tensor files: four little-endian uint64 extents (n, c, h, w)
// followed by little-endian float32 data.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include "rmg/error.hpp"
#include "rmg/graph.hpp"

namespace rmg {

inline constexpr int kFormatVersion = 1;

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}
inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return (static_cast<std::uint64_t>(to_le(static_cast<std::uint32_t>(v))) << 32) |
         to_le(static_cast<std::uint32_t>(v >> 32));
}

inline void append_f32(std::string& out, std::span<const float> xs) {
  for (float f : xs) {
    const auto le = to_le(std::bit_cast<std::uint32_t>(f));
    char b[4];
    std::memcpy(b, &le, 4);
    out.append(b, 4);
  }
}

inline std::vector<float> parse_f32(std::span<const char> bytes) {
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, bytes.data() + 4 * i, 4);
    out[i] = std::bit_cast<float>(to_le(u));
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open '" + p.string() + "' for reading");
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s;
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + p.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + p.string() + "'");
}

class BlobWriter {
 public:
  nlohmann::json put(std::span<const float> xs, std::vector<std::size_t> shape) {
    nlohmann::json rec = {{"offset", blob_.size()}, {"length", xs.size()}, {"shape", shape}};
    blob_.insert(blob_.end(), xs.begin(), xs.end());
    return rec;
  }
  nlohmann::json put(const Tensor4<float>& t) {
    const auto& s = t.shape();
    return put(t.data(), {s.n, s.c, s.h, s.w});
  }
  std::vector<float>& blob() { return blob_; }

 private:
  std::vector<float> blob_;
};

class BlobReader {
 public:
  explicit BlobReader(std::span<const float> blob) : blob_(blob) {}

  std::vector<float> vec(const nlohmann::json& rec, std::size_t expect) const {
    const auto off = rec.at("offset").get<std::size_t>();
    const auto len = rec.at("length").get<std::size_t>();
    if (len != expect) {
      throw FormatError("weight record length " + std::to_string(len) +
                        " does not match declared size " + std::to_string(expect));
    }
    if (off > blob_.size() || len > blob_.size() - off) {
      throw FormatError("weight record [" + std::to_string(off) + ", +" +
                        std::to_string(len) + ") exceeds blob of " +
                        std::to_string(blob_.size()) + " floats");
    }
    return {blob_.begin() + static_cast<std::ptrdiff_t>(off),
            blob_.begin() + static_cast<std::ptrdiff_t>(off + len)};
  }

  Tensor4<float> tensor(const nlohmann::json& rec) const {
    const auto sh = rec.at("shape").get<std::vector<std::size_t>>();
    if (sh.size() != 4) throw FormatError("tensor record must have a rank-4 shape");
    const Shape4 s{sh[0], sh[1], sh[2], sh[3]};
    return Tensor4<float>(s, vec(rec, s.numel()));
  }

 private:
  std::span<const float> blob_;
};

}  // namespace detail

/// Serializes a graph to its manifest and flat weight blob.
inline std::pair<nlohmann::json, std::vector<float>> to_manifest(const NetGraph<float>& g,
                                                                 const std::string& blob_file) {
  using nlohmann::json;
  detail::BlobWriter bw;
  json layers = json::array();
  for (const auto& l : g.layers) {
    json rec = {{"id", l.id}, {"kind", to_string(l.kind)}, {"inputs", l.inputs}};
    json attrs = json::object();
    json weights = json::object();
    switch (l.kind) {
      case LayerKind::Conv: {
        const auto& p = l.conv();
        attrs = {{"in_channels", p.in_channels()}, {"out_channels", p.out_channels()},
                 {"kernel", p.kernel()}, {"stride", p.stride},
                 {"padding", p.padding}, {"groups", p.groups}, {"bias", p.has_bias()}};
        weights["weight"] = bw.put(p.weight);
        if (p.has_bias()) weights["bias"] = bw.put(p.bias, {p.bias.size()});
        break;
      }
      case LayerKind::BN: {
        const auto& p = l.bn();
        attrs = {{"channels", p.channels()}, {"eps", static_cast<double>(p.eps)}};
        weights["gamma"] = bw.put(p.gamma, {p.channels()});
        weights["beta"] = bw.put(p.beta, {p.channels()});
        weights["running_mean"] = bw.put(p.mean, {p.channels()});
        weights["running_var"] = bw.put(p.var, {p.channels()});
        break;
      }
      case LayerKind::Act: {
        const auto& p = l.act();
        attrs = {{"type", p.kind == ActKind::ReLU ? "ReLU" : "PReLU"}};
        if (p.kind == ActKind::PReLU) weights["slopes"] = bw.put(p.slopes, {p.slopes.size()});
        break;
      }
      case LayerKind::Dense: {
        const auto& p = l.dense();
        attrs = {{"in_features", p.in_features()}, {"out_features", p.out_features()},
                 {"bias", !p.bias.empty()}};
        weights["weight"] = bw.put(p.weight);
        if (!p.bias.empty()) weights["bias"] = bw.put(p.bias, {p.bias.size()});
        break;
      }
      default:
        break;
    }
    rec["attrs"] = attrs;
    rec["weights"] = weights;
    layers.push_back(std::move(rec));
  }
  json anns = json::array();
  for (const auto& a : g.annotations) {
    anns.push_back({{"id", a.id}, {"kind", to_string(a.kind)}, {"members", a.members},
                    {"roles", a.roles}, {"attrs", a.attrs}});
  }
  json m = {{"format_version", kFormatVersion},
            {"input_shape", {g.input_shape.c, g.input_shape.h, g.input_shape.w}},
            {"layers", layers},
            {"annotations", anns},
            {"blob", {{"file", blob_file}, {"length", bw.blob().size()}}},
            {"metadata", g.metadata}};
  return {std::move(m), std::move(bw.blob())};
}

/// Rebuilds a graph from a manifest and its blob, then validates it.
inline NetGraph<float> from_manifest(const nlohmann::json& m, std::span<const float> blob) {
  NetGraph<float> g;
  try {
    const auto ver = m.at("format_version").get<int>();
    if (ver != kFormatVersion) {
      throw FormatError("unsupported format_version " + std::to_string(ver));
    }
    const auto declared = m.at("blob").at("length").get<std::size_t>();
    if (declared != blob.size()) {
      throw FormatError("weight blob holds " + std::to_string(blob.size()) +
                        " floats, manifest declares " + std::to_string(declared));
    }
    const auto is = m.at("input_shape").get<std::vector<std::size_t>>();
    if (is.size() != 3) throw FormatError("input_shape must have three entries");
    g.input_shape = {1, is[0], is[1], is[2]};
    detail::BlobReader br(blob);
    for (const auto& rec : m.at("layers")) {
      Layer<float> l;
      l.id = rec.at("id").get<std::string>();
      l.kind = layer_kind_from_string(rec.at("kind").get<std::string>());
      l.inputs = rec.at("inputs").get<std::vector<std::string>>();
      const auto& at = rec.at("attrs");
      const auto& w = rec.at("weights");
      switch (l.kind) {
        case LayerKind::Conv: {
          ConvParams<float> p;
          p.weight = br.tensor(w.at("weight"));
          p.stride = at.at("stride").get<std::size_t>();
          p.padding = at.at("padding").get<std::size_t>();
          p.groups = at.at("groups").get<std::size_t>();
          if (at.at("bias").get<bool>()) p.bias = br.vec(w.at("bias"), p.out_channels());
          if (p.out_channels() != at.at("out_channels").get<std::size_t>() ||
              p.in_channels() != at.at("in_channels").get<std::size_t>() ||
              p.kernel() != at.at("kernel").get<std::size_t>()) {
            throw FormatError("conv '" + l.id + "' attrs disagree with weight shape");
          }
          l.params = std::move(p);
          break;
        }
        case LayerKind::BN: {
          BNParams<float> p;
          const auto c = at.at("channels").get<std::size_t>();
          p.gamma = br.vec(w.at("gamma"), c);
          p.beta = br.vec(w.at("beta"), c);
          p.mean = br.vec(w.at("running_mean"), c);
          p.var = br.vec(w.at("running_var"), c);
          p.eps = static_cast<float>(at.at("eps").get<double>());
          l.params = std::move(p);
          break;
        }
        case LayerKind::Act: {
          ActParams<float> p;
          const auto t = at.at("type").get<std::string>();
          if (t == "ReLU") {
            p.kind = ActKind::ReLU;
          } else if (t == "PReLU") {
            p.kind = ActKind::PReLU;
            const auto& s = w.at("slopes");
            p.slopes = br.vec(s, s.at("length").get<std::size_t>());
          } else {
            throw FormatError("unknown activation type '" + t + "'");
          }
          l.params = std::move(p);
          break;
        }
        case LayerKind::Dense: {
          DenseParams<float> p;
          p.weight = br.tensor(w.at("weight"));
          if (at.at("bias").get<bool>()) p.bias = br.vec(w.at("bias"), p.out_features());
          l.params = std::move(p);
          break;
        }
        default:
          l.params = std::monostate{};
          break;
      }
      g.layers.push_back(std::move(l));
    }
    for (const auto& rec : m.at("annotations")) {
      BlockAnnotation a;
      a.id = rec.at("id").get<std::string>();
      a.kind = block_kind_from_string(rec.at("kind").get<std::string>());
      a.members = rec.at("members").get<std::vector<std::string>>();
      a.roles = rec.at("roles").get<std::map<std::string, std::string>>();
      a.attrs = rec.at("attrs").get<std::map<std::string, double>>();
      g.annotations.push_back(std::move(a));
    }
    if (m.contains("metadata")) g.metadata = m.at("metadata");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("malformed weight record: ") + e.what());
  }
  validate(g);
  return g;
}

inline std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p += ".bin";
  return p;
}

inline void save(const NetGraph<float>& g, const std::filesystem::path& path) {
  const auto bp = blob_path(path);
  auto [m, blob] = to_manifest(g, bp.filename().string());
  std::string bytes;
  bytes.reserve(blob.size() * 4);
  detail::append_f32(bytes, blob);
  detail::write_file(bp, bytes);
  detail::write_file(path, m.dump(1) + "\n");
}

inline NetGraph<float> load(const std::filesystem::path& path) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest '" + path.string() + "': " + e.what());
  }
  std::filesystem::path bp = blob_path(path);
  if (m.contains("blob") && m["blob"].contains("file")) {
    bp = path.parent_path() / m["blob"]["file"].get<std::string>();
  }
  const auto bytes = detail::read_file(bp);
  if (bytes.size() % 4 != 0) {
    throw FormatError("weight blob size " + std::to_string(bytes.size()) +
                      " is not a multiple of 4 bytes");
  }
  const auto blob = detail::parse_f32(bytes);
  return from_manifest(m, blob);
}

/// FNV-1a over the canonical manifest and the weight bytes. Equal for graphs
/// that serialize identically.
inline std::uint64_t graph_hash(const NetGraph<float>& g) {
  auto [m, blob] = to_manifest(g, "");
  std::string bytes = m.dump();
  detail::append_f32(bytes, blob);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline void write_tensor(const std::filesystem::path& path, const Tensor4<float>& t) {
  std::string bytes;
  for (std::uint64_t d : {t.n(), t.c(), t.h(), t.w()}) {
    const auto le = detail::to_le(d);
    char b[8];
    std::memcpy(b, &le, 8);
    bytes.append(b, 8);
  }
  detail::append_f32(bytes, t.data());
  detail::write_file(path, bytes);
}

inline Tensor4<float> read_tensor(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 32) throw FormatError("tensor file '" + path.string() + "' too short");
  std::uint64_t d[4];
  for (int i = 0; i < 4; ++i) {
    std::memcpy(&d[i], bytes.data() + 8 * i, 8);
    d[i] = detail::to_le(d[i]);
  }
  const Shape4 s{d[0], d[1], d[2], d[3]};
  if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
    throw FormatError("tensor file '" + path.string() + "' has a zero extent");
  }
  if ((bytes.size() - 32) != s.numel() * 4) {
    throw FormatError("tensor file '" + path.string() + "' payload does not match shape " +
                      s.str());
  }
  return Tensor4<float>(s, detail::parse_f32(std::span<const char>(bytes).subspan(32)));
}

}  // namespace rmg
