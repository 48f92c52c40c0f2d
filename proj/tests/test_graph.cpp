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

#include <filesystem>
#include <fstream>

#include "oracle.hpp"
#include "rmg/rmg.hpp"

using namespace rmg;

namespace {

std::filesystem::path tmp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "rmg_graph_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

ConvParams<float> conv_params(std::size_t in, std::size_t out, std::size_t k) {
  return {Tensor4<float>({out, in, k, k}), {}, 1, k / 2, 1};
}

BNParams<float> plain_bn(std::size_t c) {
  return {std::vector<float>(c, 1.0f), std::vector<float>(c, 0.0f),
          std::vector<float>(c, 0.0f), std::vector<float>(c, 1.0f), 1e-5f};
}

}  // namespace

TEST(Shapes, ConvAndConcat) {
  GraphBuilder<float> b({1, 3, 32, 32});
  auto c = b.conv("c", b.input(), conv_params(3, 64, 3));
  auto p = b.conv("p", c, {Tensor4<float>({64, 64, 1, 1}), {}, 4, 0, 1});
  auto q = b.conv("q", c, {Tensor4<float>({64, 64, 1, 1}), {}, 4, 0, 1});
  auto cat = b.concat("cat", {p, q});
  b.output(cat);
  const auto g = std::move(b).finish();
  const auto s = infer_shapes(g);
  EXPECT_EQ(s.at("c"), (Shape4{1, 64, 32, 32}));
  EXPECT_EQ(s.at("p"), (Shape4{1, 64, 8, 8}));
  EXPECT_EQ(s.at("cat"), (Shape4{1, 128, 8, 8}));
}

TEST(Shapes, ConflictNamesTheLayer) {
  GraphBuilder<float> b({1, 3, 8, 8});
  auto c = b.conv("first", b.input(), conv_params(3, 4, 3));
  auto d = b.conv("second", c, conv_params(5, 4, 3));
  b.output(d);
  const auto g = std::move(b).finish();
  try {
    infer_shapes(g);
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("'second'"), std::string::npos);
  }
}

TEST(Validate, StructuralErrors) {
  GraphBuilder<float> b({1, 3, 8, 8});
  auto c = b.conv("c", b.input(), conv_params(3, 4, 3));
  b.output(c);
  auto g = std::move(b).finish();
  EXPECT_NO_THROW(validate(g));
  auto dup = g;
  dup.layers[1].id = "input";
  EXPECT_THROW(validate(dup), ValidationError);
  auto dangling = g;
  dangling.layers[1].inputs = {"nowhere"};
  EXPECT_THROW(validate(dangling), ValidationError);
  auto arity = g;
  arity.layers.insert(arity.layers.begin() + 2, Layer<float>{"a", LayerKind::Add, {"c"}, {}});
  EXPECT_THROW(validate(arity), ValidationError);
  auto no_out = g;
  no_out.layers.pop_back();
  EXPECT_THROW(validate(no_out), ValidationError);
  auto wrong = g;
  wrong.layers[1].params = plain_bn(4);
  EXPECT_THROW(validate(wrong), ValidationError);
}

TEST(Forward, IdentityGraph) {
  GraphBuilder<float> b({1, 2, 3, 3});
  b.output(b.input());
  const auto g = std::move(b).finish();
  const auto x = random_normal<float>({1, 2, 3, 3}, 4);
  EXPECT_EQ(forward(g, x), x);
}

TEST(Forward, DiracResBlockDoublesNonNegativeInput) {
  const std::size_t C = 4;
  GraphBuilder<float> b({1, C, 5, 5});
  auto bn_id = [&](std::uint64_t seed) {
    auto mean = random_normal<float>({1, C, 1, 1}, seed).vec();
    auto var = random_uniform<float>({1, C, 1, 1}, seed + 1, 0.5f, 2.0f).vec();
    return bn_identity_params(mean, var);
  };
  ConvParams<float> dirac{dirac_filters<float>(C, 3), {}, 1, 1, 1};
  auto h = b.conv("conv1", b.input(), dirac);
  h = b.bn("bn1", h, bn_id(1));
  h = b.act("act1", h);
  h = b.conv("conv2", h, dirac);
  h = b.bn("bn2", h, bn_id(3));
  h = b.add("add", h, b.input());
  h = b.act("out", h);
  b.output(h);
  const auto g = std::move(b).finish();
  auto x = random_uniform<float>({1, C, 5, 5}, 9, 0.0f, 2.0f);
  const auto y = forward(g, x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.vec()[i], 2 * x.vec()[i], 1e-5);
}

TEST(Forward, MatchesLayerByLayerOracle) {
  for (auto fam : {Family::ResNetCIFAR, Family::RepVGG, Family::MobileNetV2Variant}) {
    ArchConfig cfg;
    cfg.family = fam;
    cfg.width = 4;
    cfg.blocks_per_stage = {2, 1};
    cfg.expansion = 2;
    cfg.reserving_ratio = fam == Family::RepVGG ? 0.5 : 0.0;
    cfg.input = {1, 3, 8, 8};
    const auto g = build<float>(cfg);
    const auto x = random_normal<float>({2, 3, 8, 8}, 77);
    EXPECT_LT(oracle::max_diff(forward(g, x), oracle::forward(g, x)), 1e-4) << to_string(fam);
  }
}

TEST(Forward, IndependentLayerOrderDoesNotMatter) {
  ArchConfig cfg;
  cfg.family = Family::ResNetCIFAR;
  cfg.width = 4;
  cfg.blocks_per_stage = {1, 1};
  cfg.input = {1, 3, 8, 8};
  auto g = build<float>(cfg);
  auto h = g;
  // the downsample block's skip conv and main conv are independent
  const auto i = *h.index_of("s1.b0.skip_conv");
  auto skip_conv = h.layers[i];
  auto skip_bn = h.layers[i + 1];
  h.layers.erase(h.layers.begin() + i, h.layers.begin() + i + 2);
  const auto j = *h.index_of("s1.b0.conv1");
  h.layers.insert(h.layers.begin() + j, {skip_conv, skip_bn});
  ASSERT_NE(g.layers, h.layers);
  const auto x = random_normal<float>({1, 3, 8, 8}, 5);
  EXPECT_EQ(forward(g, x), forward(h, x));
}

TEST(Forward, RejectsWrongInput) {
  GraphBuilder<float> b({1, 2, 3, 3});
  b.output(b.input());
  const auto g = std::move(b).finish();
  EXPECT_THROW(forward(g, Tensor4<float>({1, 3, 3, 3})), ShapeError);
}

TEST(Serialize, RoundTripEveryFamily) {
  for (auto fam : {Family::ResNetCIFAR, Family::RepVGG, Family::MobileNetV2Variant,
                   Family::RMNeXt}) {
    ArchConfig cfg;
    cfg.family = fam;
    cfg.width = fam == Family::RMNeXt ? 8 : 4;
    cfg.group_width = 4;
    cfg.blocks_per_stage = {1, 2};
    cfg.reserving_ratio = fam == Family::RepVGG ? 0.25 : 0.0;
    cfg.residual_bn = true;
    cfg.input = {1, 3, 8, 8};
    auto g = build<float>(cfg);
    g.metadata["note"] = "round trip";
    const auto p = tmp_path(std::string(to_string(fam)) + ".rmn");
    save(g, p);
    const auto h = load(p);
    EXPECT_EQ(g, h) << to_string(fam);
    EXPECT_EQ(graph_hash(g), graph_hash(h));
  }
}

TEST(Serialize, BlobIsRawLittleEndianFloats) {
  GraphBuilder<float> b({1, 1, 2, 2});
  ConvParams<float> c{Tensor4<float>({1, 1, 1, 1}, {1.5f}), {-2.0f}, 1, 0, 1};
  b.output(b.conv("c", b.input(), c));
  const auto p = tmp_path("tiny.rmn");
  save(std::move(b).finish(), p);
  const auto bin = blob_path(p);
  EXPECT_EQ(std::filesystem::file_size(bin), 8u);
  std::ifstream f(bin, std::ios::binary);
  unsigned char bytes[8];
  f.read(reinterpret_cast<char*>(bytes), 8);
  // 1.5f = 0x3FC00000, -2.0f = 0xC0000000
  EXPECT_EQ(bytes[3], 0x3F);
  EXPECT_EQ(bytes[2], 0xC0);
  EXPECT_EQ(bytes[0], 0x00);
  EXPECT_EQ(bytes[7], 0xC0);
}

TEST(Serialize, FormatErrors) {
  ArchConfig cfg;
  cfg.family = Family::ResNetCIFAR;
  cfg.width = 4;
  cfg.blocks_per_stage = {1};
  const auto g = build<float>(cfg);
  const auto p = tmp_path("broken.rmn");
  save(g, p);
  std::filesystem::resize_file(blob_path(p), std::filesystem::file_size(blob_path(p)) - 8);
  EXPECT_THROW(load(p), FormatError);

  save(g, p);
  {
    std::ofstream f(p);
    f << "{ not json";
  }
  EXPECT_THROW(load(p), FormatError);

  save(g, p);
  auto [m, blob] = to_manifest(g, "x.bin");
  m["layers"][1]["kind"] = "Softmax";
  EXPECT_THROW(from_manifest(m, blob), FormatError);
  auto [m2, blob2] = to_manifest(g, "x.bin");
  m2["layers"][2]["inputs"] = nlohmann::json::array({"ghost"});
  EXPECT_THROW(from_manifest(m2, blob2), ValidationError);
  EXPECT_THROW(load(tmp_path("missing.rmn")), IoError);
}

TEST(Serialize, TensorFile) {
  const auto t = random_normal<float>({2, 3, 4, 5}, 8);
  const auto p = tmp_path("t.bin");
  write_tensor(p, t);
  EXPECT_EQ(std::filesystem::file_size(p), 32u + 4u * t.size());
  EXPECT_EQ(read_tensor(p), t);
  std::filesystem::resize_file(p, 40);
  EXPECT_THROW(read_tensor(p), FormatError);
}

TEST(Describe, PytorchStyleLines) {
  GraphBuilder<float> b({1, 3, 8, 8});
  auto c = b.conv("c", b.input(), {Tensor4<float>({6, 3, 3, 3}), {0, 0, 0, 0, 0, 0}, 2, 1, 1});
  auto r = b.act("r", c);
  auto p = b.pool("p", r);
  auto d = b.dense("d", p, {Tensor4<float>({2, 6, 1, 1}), {0, 0}});
  b.output(d);
  const auto lines = describe_layers(std::move(b).finish());
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "(0): Conv2d(3, 6, kernel_size=(3, 3), stride=(2, 2), padding=(1, 1))");
  EXPECT_EQ(lines[1], "(1): ReLU(inplace=True)");
  EXPECT_EQ(lines[2], "(2): AdaptiveAvgPool2d(output_size=1)");
  EXPECT_EQ(lines[3], "(3): Flatten(start_dim=1, end_dim=-1)");
  EXPECT_EQ(lines[4], "(4): Linear(in_features=6, out_features=2, bias=True)");
}
