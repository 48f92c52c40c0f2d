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
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("rmg_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args) {
    const std::string cmd = std::string(RMG_BIN) + " " + args + " > " + (dir_ / "log").string() + " 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  }
  std::string log() const {
    std::ifstream f(dir_ / "log");
    return {std::istreambuf_iterator<char>(f), {}};
  }
  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, BuildConvertVerify) {
  ASSERT_EQ(run("build --family resnet --blocks 2,2,2,2 --width 4 --seed 3 --input-shape 3,8,8 -o " +
                p("a.rmn")),
            0)
      << log();
  ASSERT_EQ(run("convert -i " + p("a.rmn") + " -o " + p("b.rmn")), 0) << log();
  EXPECT_NE(log().find("PASS"), std::string::npos);
  EXPECT_EQ(run("verify -a " + p("a.rmn") + " -b " + p("b.rmn")), 0) << log();
  EXPECT_NE(log().find("PASS"), std::string::npos);
  EXPECT_EQ(run("stats -i " + p("b.rmn")), 0) << log();
  EXPECT_NE(log().find("FLOPs"), std::string::npos);
  EXPECT_EQ(run("describe -i " + p("b.rmn")), 0) << log();
  EXPECT_EQ(log().find("Add"), std::string::npos);
}

TEST_F(Cli, ConvertPlainIsNoOp) {
  ASSERT_EQ(run("build --family repvgg --blocks 1 --width 4 --input-shape 3,8,8 -o " + p("a.rmn")), 0);
  ASSERT_EQ(run("convert --fuse -i " + p("a.rmn") + " -o " + p("b.rmn")), 0) << log();
  ASSERT_EQ(run("convert -i " + p("b.rmn") + " -o " + p("c.rmn")), 0) << log();
  EXPECT_NE(log().find("nothing to convert"), std::string::npos) << log();
}

TEST_F(Cli, VerifyShapeMismatchIsValidationError) {
  ASSERT_EQ(run("build --family resnet --blocks 1 --width 4 --classes 10 -o " + p("a.rmn")), 0);
  ASSERT_EQ(run("build --family resnet --blocks 1 --width 4 --classes 5 -o " + p("b.rmn")), 0);
  EXPECT_EQ(run("verify -a " + p("a.rmn") + " -b " + p("b.rmn")), 1) << log();
}

TEST_F(Cli, VerifyDifferentModelsFailsWithTwo) {
  ASSERT_EQ(run("build --family resnet --blocks 1 --width 4 --seed 1 -o " + p("a.rmn")), 0);
  ASSERT_EQ(run("build --family resnet --blocks 1 --width 4 --seed 2 -o " + p("b.rmn")), 0);
  EXPECT_EQ(run("verify -a " + p("a.rmn") + " -b " + p("b.rmn")), 2) << log();
}

TEST_F(Cli, IoAndFormatErrors) {
  EXPECT_EQ(run("stats -i " + p("missing.rmn")), 3);
  std::ofstream(p("junk.rmn")) << "not a model";
  EXPECT_EQ(run("stats -i " + p("junk.rmn")), 3);
  EXPECT_EQ(run("build --family nope -o " + p("x.rmn")), 1);
  EXPECT_EQ(run("frobnicate"), 1);
}

TEST_F(Cli, PruneAndRun) {
  ASSERT_EQ(run("build --family resnet --blocks 1,1 --width 4 --residual-bn --input-shape 3,8,8 -o " +
                p("a.rmn")),
            0);
  EXPECT_EQ(run("prune -i " + p("a.rmn") + " -o " + p("b.rmn") + " --threshold 0.6"), 0) << log();
  EXPECT_NE(log().find("params"), std::string::npos);
  // tensor file: four u64 dims then float32 data, little-endian host assumed
  {
    std::ofstream t(p("x.bin"), std::ios::binary);
    const std::uint64_t dims[4] = {1, 3, 8, 8};
    t.write(reinterpret_cast<const char*>(dims), sizeof dims);
    for (int i = 0; i < 192; ++i) {
      const float v = 0.01f * static_cast<float>(i);
      t.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
  EXPECT_EQ(run("run -i " + p("b.rmn") + " --input " + p("x.bin") + " -o " + p("y.bin")), 0) << log();
  EXPECT_EQ(fs::file_size(p("y.bin")), 32u + 10u * 4u);
  fs::create_directories(p("data"));
  fs::copy_file(p("x.bin"), p("data/0.bin"));
  EXPECT_EQ(run("recalibrate -i " + p("a.rmn") + " --data " + p("data") + " -o " + p("c.rmn")), 0)
      << log();
  EXPECT_EQ(run("verify -a " + p("a.rmn") + " -b " + p("c.rmn") + " --tol 1e-5"), 0) << log();
}
