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

#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rmg/rmg.hpp"

namespace rmg::cli {
namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kNotEquivalent = 2;
constexpr int kIo = 3;

std::vector<std::size_t> parse_list(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(tok, &used);
      if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ValidationError(std::string("bad ") + what + " entry '" + tok + "'");
    }
  }
  if (out.empty()) throw ValidationError(std::string("empty ") + what);
  return out;
}

Shape4 parse_shape(const std::string& s) {
  const auto v = parse_list(s, "input shape");
  if (v.size() != 3) throw ValidationError("input shape must be c,h,w");
  return {1, v[0], v[1], v[2]};
}

DownsampleMethod parse_downsample(const std::string& s) {
  if (s == "type1") return DownsampleMethod::Type1;
  if (s == "type2") return DownsampleMethod::Type2;
  throw ValidationError("downsample method must be type1 or type2");
}

ActPolicy parse_policy(const std::string& s) {
  if (s == "auto") return ActPolicy::Auto;
  if (s == "relu") return ActPolicy::ReluIfNonNeg;
  if (s == "prelu") return ActPolicy::PReLU;
  throw ValidationError("activation policy must be auto, relu or prelu");
}

struct BuildOpts {
  std::string family = "resnet";
  std::string blocks = "2,2,2,2";
  std::size_t width = 16;
  std::size_t width_multiple = 3;
  std::size_t group_width = 32;
  std::size_t expansion = 6;
  double reserving_ratio = 0.0;
  bool residual_bn = false;
  std::size_t classes = 10;
  std::uint64_t seed = 0;
  std::string input_shape = "3,32,32";
  std::string out;
};

struct ConvertOpts {
  std::string in, out, downsample = "type2", act = "auto";
  bool fuse = false, f64 = false;
  std::size_t n = 20;
  std::uint64_t seed = 7;
  double tol = 1e-4;
};

struct VerifyOpts {
  std::string a, b;
  std::size_t n = 20;
  std::uint64_t seed = 7;
  double tol = 1e-4;
  bool f64 = false, nonneg = false;
};

struct PruneOpts {
  std::string in, out, downsample = "type2", act = "auto", protect;
  double threshold = 0.0;
  std::size_t min_keep = 1;
};

struct StatsOpts {
  std::string in, input_shape;
  bool bn = false;
};

struct RunOpts {
  std::string in, input, out;
};

struct RecalOpts {
  std::string in, data, out;
};

int do_build(const BuildOpts& o) {
  ArchConfig cfg;
  cfg.family = family_from_string(o.family);
  cfg.blocks_per_stage = parse_list(o.blocks, "blocks");
  cfg.width = o.width;
  cfg.width_multiple = o.width_multiple;
  cfg.group_width = o.group_width;
  cfg.expansion = o.expansion;
  cfg.reserving_ratio = o.reserving_ratio;
  cfg.residual_bn = o.residual_bn;
  cfg.num_classes = o.classes;
  cfg.seed = o.seed;
  cfg.input = parse_shape(o.input_shape);
  auto g = build<float>(cfg);
  g.metadata["family"] = o.family;
  g.metadata["seed"] = o.seed;
  save(g, o.out);
  const auto cost = count_params(g);
  std::cout << "built " << o.family << ": " << g.layers.size() << " layers, "
            << g.annotations.size() << " blocks, " << cost.params << " params -> " << o.out
            << "\n";
  return kOk;
}

int do_convert(const ConvertOpts& o) {
  const auto g = load(o.in);
  RmOptions rm{parse_downsample(o.downsample), parse_policy(o.act)};
  auto converted = [&](const auto& src) {
    auto h = convert_graph(src, rm);
    if (o.fuse) h = finalize_mobilenet(reparam_all(std::move(h)));
    return h;
  };
  if (g.annotations.empty()) {
    std::cout << "no annotated blocks; nothing to convert\n";
  }
  auto h = converted(g);
  const auto rep = verify_equivalence(g, h, o.n, o.seed, o.tol);
  std::cout << rep.str() << "\n";
  bool ok = rep.pass;
  if (o.f64) {
    const auto gd = cast<double>(g);
    const auto wide = verify_equivalence(gd, converted(gd), o.n, o.seed, 1e-9);
    std::cout << wide.str() << "\n";
    ok = ok && wide.pass;
  }
  if (!ok) {
    std::cerr << "conversion not equivalent; " << o.out << " not written\n";
    return kNotEquivalent;
  }
  h.metadata["conversion"] = rep.json();
  save(h, o.out);
  std::cout << "plain: " << (is_plain(h) ? "yes" : "no") << ", "
            << count_params(g).params << " -> " << count_params(h).params
            << " params -> " << o.out << "\n";
  return kOk;
}

int do_verify(const VerifyOpts& o) {
  const auto a = load(o.a);
  const auto b = load(o.b);
  const auto rep = verify_equivalence(a, b, o.n, o.seed, o.tol, o.f64,
                                      o.nonneg ? InputDist::AbsNormal : InputDist::Normal);
  std::cout << rep.str() << "\n";
  return rep.pass ? kOk : kNotEquivalent;
}

int do_prune(const PruneOpts& o) {
  const auto g = load(o.in);
  PruneConfig cfg;
  cfg.threshold = o.threshold;
  cfg.min_keep = o.min_keep;
  std::stringstream ss(o.protect);
  for (std::string id; std::getline(ss, id, ',');) {
    if (!id.empty()) cfg.protect.insert(id);
  }
  const auto r = prune_pipeline(g, cfg, RmOptions{parse_downsample(o.downsample),
                                                  parse_policy(o.act)});
  std::cout << r.report.table();
  save(r.graph, o.out);
  std::cout << "removed " << r.report.removed << " channels ("
            << (r.report.exact ? "output preserved" : "lossy") << ") -> " << o.out << "\n";
  return kOk;
}

int do_stats(const StatsOpts& o) {
  auto g = load(o.in);
  if (!o.input_shape.empty()) g.input_shape = parse_shape(o.input_shape);
  std::cout << count_flops(g, o.bn).table();
  return kOk;
}

int do_run(const RunOpts& o) {
  const auto g = load(o.in);
  const auto x = read_tensor(o.input);
  const auto y = forward(g, x);
  write_tensor(o.out, y);
  std::cout << "output " << y.shape().str() << " -> " << o.out << "\n";
  return kOk;
}

int do_recalibrate(const RecalOpts& o) {
  const auto g = load(o.in);
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator(o.data, ec)) {
    if (e.is_regular_file() && e.path().extension() == ".bin") files.push_back(e.path());
  }
  if (ec) throw IoError("cannot list '" + o.data + "': " + ec.message());
  std::sort(files.begin(), files.end());
  std::vector<Tensor4<float>> batches;
  for (const auto& f : files) batches.push_back(read_tensor(f));
  auto h = recalibrate_bn(g, batches);
  const auto rep = verify_equivalence(g, h, 20, 7, 1e-5);
  std::cout << "recalibrated from " << batches.size() << " batches; " << rep.str() << "\n";
  if (!rep.pass) return kNotEquivalent;
  save(h, o.out);
  return kOk;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"rmgraph: residual-to-plain network rewriting, pruning and analysis"};
  app.require_subcommand(1);

  BuildOpts bo;
  auto* build_cmd = app.add_subcommand("build", "construct a seeded model");
  build_cmd->add_option("--family", bo.family, "resnet | mobilenetv2 | repvgg | rmnext");
  build_cmd->add_option("--blocks", bo.blocks, "blocks per stage, e.g. 2,2,2,2");
  build_cmd->add_option("--width", bo.width, "stage-0 width");
  build_cmd->add_option("--width-multiple", bo.width_multiple, "rmnext width multiple");
  build_cmd->add_option("--group-width", bo.group_width, "rmnext channels per group");
  build_cmd->add_option("--expansion", bo.expansion, "mobilenetv2 expansion");
  build_cmd->add_option("--reserving-ratio", bo.reserving_ratio, "repvgg reserving ratio");
  build_cmd->add_flag("--residual-bn", bo.residual_bn, "resnet: BN on identity skips");
  build_cmd->add_option("--classes", bo.classes, "classifier outputs");
  build_cmd->add_option("--seed", bo.seed, "weight seed");
  build_cmd->add_option("--input-shape", bo.input_shape, "c,h,w");
  build_cmd->add_option("-o,--output", bo.out, "model path")->required();

  ConvertOpts co;
  auto* convert_cmd = app.add_subcommand("convert", "remove residual connections");
  convert_cmd->add_option("-i,--input", co.in)->required();
  convert_cmd->add_option("-o,--output", co.out)->required();
  convert_cmd->add_option("--downsample", co.downsample, "type1 | type2");
  convert_cmd->add_option("--act", co.act, "auto | relu | prelu");
  convert_cmd->add_flag("--fuse", co.fuse, "merge RepBlocks, fold BN, fuse pointwise pairs");
  convert_cmd->add_flag("--f64", co.f64, "also check a 64-bit conversion at 1e-9");
  convert_cmd->add_option("--n", co.n);
  convert_cmd->add_option("--seed", co.seed);
  convert_cmd->add_option("--tol", co.tol);

  VerifyOpts vo;
  auto* verify_cmd = app.add_subcommand("verify", "compare two models on seeded inputs");
  verify_cmd->add_option("-a", vo.a)->required();
  verify_cmd->add_option("-b", vo.b)->required();
  verify_cmd->add_option("--n", vo.n);
  verify_cmd->add_option("--seed", vo.seed);
  verify_cmd->add_option("--tol", vo.tol);
  verify_cmd->add_flag("--f64", vo.f64, "evaluate in 64-bit");
  verify_cmd->add_flag("--nonneg", vo.nonneg, "use |N(0,1)| inputs");

  PruneOpts po;
  auto* prune_cmd = app.add_subcommand("prune", "convert, then prune by BN scale");
  prune_cmd->add_option("-i,--input", po.in)->required();
  prune_cmd->add_option("-o,--output", po.out)->required();
  prune_cmd->add_option("--threshold", po.threshold)->required();
  prune_cmd->add_option("--min-keep", po.min_keep);
  prune_cmd->add_option("--protect", po.protect, "comma-separated layer ids");
  prune_cmd->add_option("--downsample", po.downsample);
  prune_cmd->add_option("--act", po.act);

  StatsOpts so;
  auto* stats_cmd = app.add_subcommand("stats", "params / MACs / FLOPs");
  stats_cmd->add_option("-i,--input", so.in)->required();
  stats_cmd->add_option("--input-shape", so.input_shape, "c,h,w");
  stats_cmd->add_flag("--bn", so.bn, "count BN parameters too");

  RunOpts ro;
  auto* run_cmd = app.add_subcommand("run", "one forward pass");
  run_cmd->add_option("-i,--model", ro.in)->required();
  run_cmd->add_option("--input", ro.input)->required();
  run_cmd->add_option("-o,--output", ro.out, "output tensor")->default_val("output.bin");

  RecalOpts rco;
  auto* recal_cmd = app.add_subcommand("recalibrate", "re-estimate BN statistics");
  recal_cmd->add_option("-i,--input", rco.in)->required();
  recal_cmd->add_option("--data", rco.data, "directory of tensor .bin files")->required();
  recal_cmd->add_option("-o,--output", rco.out)->required();

  std::string describe_in;
  auto* describe_cmd = app.add_subcommand("describe", "print the layer listing");
  describe_cmd->add_option("-i,--input", describe_in)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalid;
  }
  try {
    if (*build_cmd) return do_build(bo);
    if (*convert_cmd) return do_convert(co);
    if (*verify_cmd) return do_verify(vo);
    if (*prune_cmd) return do_prune(po);
    if (*stats_cmd) return do_stats(so);
    if (*run_cmd) return do_run(ro);
    if (*recal_cmd) return do_recalibrate(rco);
    if (*describe_cmd) {
      for (const auto& l : describe_layers(load(describe_in))) std::cout << l << "\n";
      return kOk;
    }
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  }
  return kInvalid;
}

}  // namespace rmg::cli
