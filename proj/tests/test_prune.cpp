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

#include <gtest/gtest.h>

#include <random>

#include "oracle.hpp"
#include "rmg/rmg.hpp"

using namespace rmg;

namespace {

NetGraph<float> resnet(std::size_t width, std::vector<std::size_t> blocks, std::uint64_t seed) {
  ArchConfig cfg;
  cfg.family = Family::ResNetCIFAR;
  cfg.width = width;
  cfg.blocks_per_stage = std::move(blocks);
  cfg.residual_bn = true;
  cfg.seed = seed;
  cfg.input = {1, 3, 8, 8};
  return build<float>(cfg);
}

void zero_channel(NetGraph<float>& g, const std::string& bn, std::size_t c) {
  auto& p = g.layer(bn).bn();
  p.gamma[c] = 0.0f;
  p.beta[c] = 0.0f;
}

std::uint64_t weights(const NetGraph<float>& g) {
  const auto r = count_params(g);
  return r.conv_weights + r.dense_weights;
}

}  // namespace

TEST(Masks, KeepRule) {
  BNParams<float> b{{0.5f, 1e-6f, 0.3f}, {0, 0, 0}, {0, 0, 0}, {1, 1, 1}, 1e-5f};
  EXPECT_EQ(bn_keep(b, 1e-3, 1), (std::vector<bool>{true, false, true}));
  EXPECT_EQ(bn_keep(b, 10.0, 1), (std::vector<bool>{true, false, false}));
  EXPECT_EQ(bn_keep(b, 10.0, 2), (std::vector<bool>{true, false, true}));
  BNParams<float> tie{{-0.2f, 0.2f, 0.1f}, {0, 0, 0}, {0, 0, 0}, {1, 1, 1}, 1e-5f};
  EXPECT_EQ(bn_keep(tie, 1.0, 1), (std::vector<bool>{true, false, false}));
  BNParams<float> z{{0.0f, 0.5f}, {0, 0}, {0, 0}, {1, 1}, 1e-5f};
  EXPECT_EQ(bn_keep(z, 0.0, 1), (std::vector<bool>{true, true}));
}

TEST(Masks, NeedsPlainGraph) {
  const auto g = resnet(4, {1}, 1);
  try {
    compute_masks(g, PruneConfig{1e-3, 1, {}});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("s0.b0.add"), std::string::npos);
  }
  EXPECT_THROW(compute_masks(convert_graph(g), PruneConfig{-1.0, 1, {}}), ValidationError);
  EXPECT_THROW(compute_masks(convert_graph(g), PruneConfig{0.0, 0, {}}), ValidationError);
}

TEST(Masks, ProtectedLayers) {
  auto g = resnet(4, {1}, 2);
  zero_channel(g, "stem.bn", 1);
  const auto plain = convert_graph(g);
  const auto m = compute_masks(plain, PruneConfig{1e-3, 1, {"stem.conv"}});
  EXPECT_EQ(m.at("stem.bn"), std::vector<bool>(4, true));
  EXPECT_FALSE(compute_masks(plain, PruneConfig{1e-3, 1, {}}).at("stem.bn")[1]);
}

TEST(ApplyMasks, AllTrueIsIdentity) {
  const auto plain = convert_graph(resnet(4, {1, 1}, 3));
  PruneReport rep;
  const auto out = apply_masks(plain, compute_masks(plain, PruneConfig{}), &rep);
  EXPECT_EQ(out, plain);
  EXPECT_EQ(rep.removed, 0u);
}

TEST(ApplyMasks, ShapesFollowPopcounts) {
  const auto plain = convert_graph(resnet(6, {2, 1}, 4));
  std::mt19937 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    auto masks = compute_masks(plain, PruneConfig{});
    for (auto& [id, k] : masks) {
      for (std::size_t c = 0; c < k.size(); ++c) k[c] = rng() % 3 != 0;
      k[rng() % k.size()] = true;
    }
    PruneReport rep;
    const auto out = apply_masks(plain, masks, &rep);
    const auto shapes = infer_shapes(out);
    for (const auto& [id, k] : masks) {
      const auto want = static_cast<std::size_t>(std::count(k.begin(), k.end(), true));
      EXPECT_EQ(out.layer(id).bn().channels(), want) << id;
      EXPECT_EQ(shapes.at(id).c, want) << id;
    }
  }
}

TEST(ApplyMasks, BadMaskSets) {
  const auto plain = convert_graph(resnet(4, {1}, 6));
  auto masks = compute_masks(plain, PruneConfig{});
  auto missing = masks;
  missing.erase("stem.bn");
  EXPECT_THROW(apply_masks(plain, missing), ValidationError);
  auto wrong = masks;
  wrong["stem.bn"].push_back(true);
  EXPECT_THROW(apply_masks(plain, wrong), ValidationError);
  auto extra = masks;
  extra["stem.conv"] = {true};
  EXPECT_THROW(apply_masks(plain, extra), ValidationError);
}

TEST(Pipeline, DeadChannelsGoExactly) {
  auto g = resnet(4, {2, 2}, 7);
  const std::vector<std::pair<std::string, std::size_t>> dead{
      {"s0.b0.bn1", 1}, {"s0.b0.bn1", 3}, {"s0.b1.bn1", 0}, {"s1.b1.bn1", 6}};
  for (const auto& [id, c] : dead) zero_channel(g, id, c);
  const auto converted = convert_graph(g);
  const auto r = prune_pipeline(g, PruneConfig{1e-6, 1, {}});
  EXPECT_EQ(r.report.removed, dead.size());
  EXPECT_TRUE(r.report.exact);
  EXPECT_EQ(r.graph.layer("s0.b0.bn1").bn().channels(), 8u - 2u);
  EXPECT_EQ(r.graph.layer("s1.b1.bn1").bn().channels(), 16u - 1u);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto x = verification_input(g.input_shape, 7, i).cast<float>();
    EXPECT_EQ(forward(r.graph, x), forward(converted, x));
  }
  EXPECT_TRUE(verify_equivalence(g, r.graph, 20, 7, 1e-4).pass);
  EXPECT_TRUE(r.graph.metadata.contains("prune_report"));
}

TEST(Pipeline, ThresholdZeroPrunesNothing) {
  auto g = resnet(4, {1, 1}, 8);
  zero_channel(g, "s0.b0.bn1", 2);
  const auto r = prune_pipeline(g, PruneConfig{0.0, 1, {}});
  auto plain = r.graph;
  plain.metadata = convert_graph(g).metadata;
  EXPECT_EQ(plain, convert_graph(g));
  EXPECT_EQ(r.report.removed, 0u);
}

TEST(Pipeline, ErrorVanishesWithThreshold) {
  double last = 1e30;
  for (double t : {1e-4, 1e-6, 1e-8}) {
    auto g = resnet(4, {2}, 9);
    for (const char* id : {"s0.b0.bn1", "s0.b1.bn1", "s0.b1.bn2"}) {
      auto& p = g.layer(id).bn();
      p.gamma[1] = static_cast<float>(t / 2);
      p.beta[1] = 0.0f;
    }
    const auto ref = convert_graph(cast<double>(g));
    const auto r = prune_pipeline(cast<double>(g), PruneConfig{t, 1, {}});
    EXPECT_GT(r.report.removed, 0u);
    const double d = verify_equivalence(ref, r.graph, 20, 3, 1.0).max_abs_diff;
    EXPECT_LT(d, last) << t;
    EXPECT_LT(d, 50 * t) << t;
    last = d;
  }
}

TEST(Pipeline, PlainPathBeatsDirectResNetPruning) {
  // Each block masks a different part of the stream, so the direct path
  // keeps every stream channel while the plain graph drops them per layer.
  auto g = resnet(8, {2}, 10);
  for (const char* b : {"s0.b0", "s0.b1"}) {
    const std::string p = b;
    for (std::size_t c = 0; c < 4; ++c) zero_channel(g, p + ".bn1", c);
    for (std::size_t c = 2; c < 8; ++c) zero_channel(g, p + ".bn2", c);
    for (std::size_t c = 0; c < 6; ++c) zero_channel(g, p + ".skip_bn", c);
  }
  const PruneConfig cfg{1e-3, 1, {}};
  const auto direct = resnet_direct_weight_count(g, cfg);
  const auto r = prune_pipeline(g, cfg);
  EXPECT_TRUE(r.report.exact);
  EXPECT_LE(weights(r.graph), direct);
  EXPECT_LT(direct, weights(g));
  EXPECT_TRUE(verify_equivalence(g, r.graph, 20, 1, 1e-4).pass);
}
