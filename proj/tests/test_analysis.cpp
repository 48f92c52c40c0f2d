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

#include "oracle.hpp"
#include "rmg/rmg.hpp"

using namespace rmg;

namespace {

NetGraph<float> small_resnet(std::size_t width, std::vector<std::size_t> blocks) {
  ArchConfig cfg;
  cfg.family = Family::ResNetCIFAR;
  cfg.width = width;
  cfg.blocks_per_stage = std::move(blocks);
  cfg.input = {1, 3, 8, 8};
  cfg.seed = 11;
  return build<float>(cfg);
}

std::uint64_t block_conv_weights(const NetGraph<float>& g, const std::string& prefix) {
  std::uint64_t n = 0;
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::Conv && l.id.rfind(prefix, 0) == 0) n += l.conv().weight.size();
  }
  return n;
}

}  // namespace

TEST(Equivalence, SelfAndPerturbed) {
  const auto g = small_resnet(4, {1});
  const auto same = verify_equivalence(g, g);
  EXPECT_EQ(same.max_abs_diff, 0.0);
  EXPECT_TRUE(same.pass);
  EXPECT_EQ(same.n_inputs, 20u);
  auto b = g;
  b.layer("head.fc").dense().bias[3] += 0.1f;
  const auto r = verify_equivalence(g, b);
  EXPECT_FALSE(r.pass);
  EXPECT_GE(r.max_abs_diff, r.mean_abs_diff);
  EXPECT_GT(r.mean_abs_diff, 0.0);
  EXPECT_NE(r.str().find("FAIL"), std::string::npos);
  EXPECT_EQ(r.json()["pass"], false);
}

TEST(Equivalence, ShapeMismatch) {
  auto a = small_resnet(4, {1});
  ArchConfig cfg;
  cfg.family = Family::ResNetCIFAR;
  cfg.width = 4;
  cfg.blocks_per_stage = {1};
  cfg.num_classes = 7;
  cfg.input = {1, 3, 8, 8};
  EXPECT_THROW(verify_equivalence(a, build<float>(cfg)), ShapeError);
  cfg.num_classes = 10;
  cfg.input = {1, 3, 10, 10};
  EXPECT_THROW(verify_equivalence(a, build<float>(cfg)), ShapeError);
}

TEST(Equivalence, InputsAreSeeded) {
  const Shape4 s{1, 2, 3, 3};
  EXPECT_EQ(verification_input(s, 7, 0), verification_input(s, 7, 0));
  EXPECT_NE(verification_input(s, 7, 0), verification_input(s, 7, 1));
  const auto a = verification_input(s, 7, 2, InputDist::AbsNormal);
  for (double v : a.vec()) EXPECT_GE(v, 0.0);
}

TEST(Cost, PointwiseMacs) {
  GraphBuilder<float> b({1, 2, 4, 4});
  b.output(b.conv("pw", b.input(), ConvParams<float>{Tensor4<float>({3, 2, 1, 1}), {}, 1, 0, 1}));
  const auto r = count_flops(std::move(b).finish());
  EXPECT_EQ(r.macs, 96u);
  EXPECT_EQ(r.flops(), 192u);
  EXPECT_EQ(r.params, 6u);
  EXPECT_EQ(r.bias_macs, 0u);
}

TEST(Cost, TotalsAreRowSums) {
  const auto r = count_flops(small_resnet(4, {1, 1}));
  std::uint64_t p = 0, m = 0;
  for (const auto& row : r.rows) {
    p += row.params;
    m += row.macs;
  }
  EXPECT_EQ(p, r.params);
  EXPECT_EQ(m, r.macs);
  EXPECT_EQ(r.params, r.conv_weights + r.dense_weights + r.biases + r.slopes);
  EXPECT_NE(r.table().find("total"), std::string::npos);
}

TEST(Cost, InputShapeOverride) {
  const auto g = small_resnet(4, {1});
  const auto a = count_flops(g);
  const auto b = count_flops(g, Shape4{1, 3, 16, 16});
  EXPECT_EQ(a.params, b.params);
  EXPECT_GT(b.macs, a.macs);
}

TEST(Cost, BasicBlockDoublesAtWidth64) {
  ArchConfig cfg;
  cfg.family = Family::ResNetCIFAR;
  cfg.width = 64;
  cfg.blocks_per_stage = {1, 1};
  cfg.input = {1, 3, 4, 4};
  const auto g = build<float>(cfg);
  EXPECT_EQ(block_conv_weights(g, "s0.b0"), 73728u);
  EXPECT_EQ(block_conv_weights(rm_basic_block(g, "s0.b0"), "s0.b0"), 147456u);
  EXPECT_EQ(block_conv_weights(rm_downsample(g, "s1.b0"), "s1.b0"), 331776u);
  const auto t1 = rm_downsample(g, "s1.b0", {DownsampleMethod::Type1, ActPolicy::Auto});
  EXPECT_EQ(block_conv_weights(t1, "s1.b0") + count_params(t1).slopes, 442624u);
  // both counts add to the original 1x1-skip downsample block
  EXPECT_EQ(block_conv_weights(g, "s1.b0"), oracle::downsample_conv_weights(64));
}

TEST(Cost, TypeDifferenceClosedForm) {
  for (std::size_t C : {2u, 4u, 8u, 12u}) {
    ArchConfig cfg;
    cfg.family = Family::ResNetCIFAR;
    cfg.width = C;
    cfg.blocks_per_stage = {1, 1};
    cfg.input = {1, 3, 4, 4};
    const auto g = build<float>(cfg);
    const auto t1 = count_params(rm_downsample(g, "s1.b0", {DownsampleMethod::Type1, {}}));
    const auto t2 = count_params(rm_downsample(g, "s1.b0", {DownsampleMethod::Type2, {}}));
    EXPECT_EQ(t1.conv_weights + t1.slopes - t2.conv_weights - t2.slopes, 27 * C * C + 4 * C)
        << C;
  }
}

TEST(Recalibrate, PreservesOutputs) {
  const auto g = small_resnet(4, {1, 1});
  std::vector<Tensor4<float>> batches;
  for (std::uint64_t i = 0; i < 3; ++i) batches.push_back(random_normal<float>({4, 3, 8, 8}, 40 + i));
  const auto h = recalibrate_bn(g, batches);
  EXPECT_NE(h.layer("stem.bn").bn().mean, g.layer("stem.bn").bn().mean);
  const auto r = verify_equivalence(g, h, 20, 1, 1e-5);
  EXPECT_TRUE(r.pass) << r.str();
  // the new running stats are the empirical ones
  const auto t = forward_trace(g, batches[0]);
  const auto& x = t.at("stem.conv");
  double sum = 0;
  for (std::size_t n = 0; n < 4; ++n)
    for (auto v : x.plane(n, 2)) sum += v;
  double sum_all = sum;
  for (std::size_t b = 1; b < 3; ++b) {
    const auto tb = forward_trace(g, batches[b]);
    for (std::size_t n = 0; n < 4; ++n)
      for (auto v : tb.at("stem.conv").plane(n, 2)) sum_all += v;
  }
  EXPECT_NEAR(h.layer("stem.bn").bn().mean[2], sum_all / (3 * 4 * 64), 1e-5);
}

TEST(Recalibrate, ConstantInputAndDisjointSets) {
  const auto g = small_resnet(4, {1});
  const auto h = recalibrate_bn(g, {Tensor4<float>({2, 3, 8, 8}, 0.5f)});
  // every pixel of the stem conv sees the same patch away from the border, so
  // the stem BN variance is small but the eps guard keeps it usable
  EXPECT_TRUE(verify_equivalence(g, h, 20, 2, 1e-4).pass);
  GraphBuilder<float> b({1, 2, 3, 3});
  b.output(b.bn("bn", b.input(), BNParams<float>{{1, 2}, {0, 1}, {0.5f, -1}, {1, 2}, 1e-5f}));
  const auto flat = std::move(b).finish();
  const auto c = recalibrate_bn(flat, {Tensor4<float>({1, 2, 3, 3}, 2.0f)});
  EXPECT_EQ(c.layer("bn").bn().var, (std::vector<float>{0, 0}));
  EXPECT_TRUE(verify_equivalence(flat, c, 20, 1, 1e-5).pass);

  const auto s1 = recalibrate_bn(g, {random_normal<float>({4, 3, 8, 8}, 1)});
  const auto s2 = recalibrate_bn(g, {random_uniform<float>({4, 3, 8, 8}, 2, 0.0f, 3.0f)});
  EXPECT_NE(s1.layer("s0.b0.bn1").bn().mean, s2.layer("s0.b0.bn1").bn().mean);
  EXPECT_TRUE(verify_equivalence(s1, s2, 20, 3, 1e-5).pass);
  EXPECT_THROW(recalibrate_bn(g, {}), ValidationError);
}
