#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "levit/fusion.hpp"
#include "test_util.hpp"

using namespace levit;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::path(::testing::TempDir()) / name).string();
}

void fill_uniform(Tensor& t, std::mt19937_64& rng, double low, double high) {
  std::uniform_real_distribution<double> u(low, high);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set_value(i, u(rng));
}

// Moves every BN away from its initial identity so folding has work to do.
void perturb_norms(Model& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& e : m.state()) {
    if (e.name.ends_with("bn.weight")) fill_uniform(e.tensor, rng, 0.5, 1.5);
    if (e.name.ends_with("bn.bias")) fill_uniform(e.tensor, rng, -0.2, 0.2);
    if (e.name.ends_with("running_mean")) fill_uniform(e.tensor, rng, -0.2, 0.2);
    if (e.name.ends_with("running_var")) fill_uniform(e.tensor, rng, 0.5, 2.0);
    if (e.name.ends_with("attention_bias")) fill_uniform(e.tensor, rng, -0.5, 0.5);
  }
}

ModelSpec tiny_spec(std::int64_t image_size = 64) {
  return spec_from_json({{"preset", "LeViT-128S"}, {"image_size", image_size}, {"num_classes", 7}});
}

Tensor conv_bn_eval(const Tensor& x, const Tensor& w, BatchNorm bn) {
  return bn.forward(conv2d(x, w, Tensor(), 1, 1), Mode::Eval);
}

}  // namespace

// ---- fuse_conv_bn -------------------------------------------------------------

TEST(FuseConvBnTest, IdentityNormLeavesWeights) {
  std::mt19937_64 rng(1);
  const Tensor w = random_normal({3, 2, 3, 3}, rng, 1.0, DType::F64);
  const auto f = fuse_conv_bn(w, Tensor(), Tensor::ones({3}, DType::F64),
                              Tensor::zeros({3}, DType::F64), Tensor::zeros({3}, DType::F64),
                              Tensor::ones({3}, DType::F64), 0.0);
  EXPECT_EQ(f.weight.to_vector(), w.to_vector());
  EXPECT_EQ(f.bias.to_vector(), std::vector<double>(3, 0.0));
}

TEST(FuseConvBnTest, ScaleAndShift) {
  std::mt19937_64 rng(2);
  const Tensor w = random_normal({3, 2, 1, 1}, rng, 1.0, DType::F64);
  const auto f = fuse_conv_bn(w, Tensor(), Tensor::full({3}, 2.0, DType::F64),
                              Tensor::ones({3}, DType::F64), Tensor::zeros({3}, DType::F64),
                              Tensor::ones({3}, DType::F64), 0.0);
  for (std::int64_t i = 0; i < w.numel(); ++i) EXPECT_EQ(f.weight.value(i), 2 * w.value(i));
  EXPECT_EQ(f.bias.to_vector(), std::vector<double>(3, 1.0));
}

TEST(FuseConvBnTest, ChannelMismatchRejected) {
  const Tensor w = Tensor::zeros({4, 2, 1, 1});
  EXPECT_THROW(fuse_conv_bn(w, Tensor(), Tensor::ones({3}), Tensor::zeros({3}), Tensor::zeros({3}),
                            Tensor::ones({3}), 1e-5),
               ShapeError);
}

TEST(FuseConvBnTest, RandomConvMatchesAt32Bit) {
  std::mt19937_64 rng(3);
  const Tensor x = random_normal({2, 8, 16, 16}, rng, 1.0, DType::F32);
  const Tensor w = random_normal({6, 8, 3, 3}, rng, 0.2, DType::F32);
  BatchNorm bn = BatchNorm::make(6, 1.0, DType::F32);
  fill_uniform(bn.gamma, rng, 0.5, 2.0);
  fill_uniform(bn.beta, rng, -1.0, 1.0);
  fill_uniform(bn.running_mean, rng, -1.0, 1.0);
  fill_uniform(bn.running_var, rng, 0.1, 3.0);
  const auto f = fuse_conv_bn(w, Tensor(), bn.gamma, bn.beta, bn.running_mean, bn.running_var,
                              bn.epsilon);
  const Tensor fused = conv2d(x, f.weight, f.bias, 1, 1);
  EXPECT_LT(max_abs_diff(fused, conv_bn_eval(x, w, bn)), 1e-4);
}

// ---- fuse_model ---------------------------------------------------------------------

TEST(FuseModelTest, SmallestPresetLogitsAgree) {
  auto m = Model::build(preset("LeViT-128S"), 1);
  perturb_norms(m, 1);
  const auto fused = fuse_model(m);
  EXPECT_FALSE(fused.already_fused);
  auto f = fused.model.clone();
  std::mt19937_64 rng(4);
  const Tensor x = random_normal({4, 3, 224, 224}, rng);
  EXPECT_LT(max_abs_diff(f.forward(x).logits, m.forward(x).logits), 1e-4);
}

TEST(FuseModelTest, DoublePrecisionAgreesToRoundoff) {
  for (const auto& s : {tiny_spec(), with_image_size(ablation("A3"), 64),
                        with_image_size(ablation("A5"), 64), with_image_size(ablation("A2"), 64)}) {
    auto m = Model::build(s, 2, DType::F64);
    perturb_norms(m, 2);
    auto f = fuse_model(m).model.clone();
    std::mt19937_64 rng(5);
    for (int i = 0; i < 3; ++i) {
      const Tensor x = random_normal({2, 3, 64, 64}, rng, 1.0, DType::F64);
      EXPECT_LT(max_abs_diff(f.forward(x).logits, m.forward(x).logits), 1e-10) << s.name;
    }
  }
}

TEST(FuseModelTest, SecondFusionIsNoOp) {
  auto m = Model::build(tiny_spec(), 3);
  auto once = fuse_model(m);
  auto twice = fuse_model(once.model);
  EXPECT_TRUE(twice.already_fused);
  const auto a = once.model.state(), b = twice.model.state();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tensor.to_vector(), b[i].tensor.to_vector());
}

TEST(FuseModelTest, NormsDisappearFromReport) {
  auto m = Model::build(tiny_spec(), 4);
  const auto fused = fuse_model(m);
  const auto before = count(m), after = count(fused.model);
  EXPECT_LT(after.params, before.params);
  EXPECT_EQ(after.macs, before.macs);
  for (const auto& r : after.rows) EXPECT_FALSE(r.name.ends_with(".bn")) << r.name;
  EXPECT_TRUE(fused.model.fused());
  // The source model is untouched.
  EXPECT_FALSE(m.fused());
}

TEST(FuseModelTest, TrainModeRejected) {
  auto m = Model::build(tiny_spec(), 5);
  m.train();
  EXPECT_THROW(fuse_model(m), std::logic_error);
}

// ---- archive -------------------------------------------------------------------------

TEST(ArchiveTest, RoundTripIsBitExact) {
  for (DType dtype : {DType::F32, DType::F64}) {
    auto m = Model::build(tiny_spec(), 6, dtype);
    perturb_norms(m, 6);
    for (bool fuse : {false, true}) {
      Model src = fuse ? fuse_model(m).model : m.clone();
      const auto path = temp_path("roundtrip.lwa");
      save_weights(src, path);
      Model back = load_weights(path);
      EXPECT_EQ(back.fused(), fuse);
      EXPECT_TRUE(back.spec() == src.spec());
      const auto a = src.state(), b = back.state();
      ASSERT_EQ(a.size(), b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_EQ(b[i].tensor.dtype(), dtype);
        EXPECT_EQ(a[i].tensor.to_vector(), b[i].tensor.to_vector()) << a[i].name;
      }
      std::mt19937_64 rng(7);
      const Tensor x = random_normal({2, 3, 64, 64}, rng, 1.0, dtype);
      EXPECT_EQ(src.forward(x).logits.to_vector(), back.forward(x).logits.to_vector());
    }
  }
}

class ArchiveErrorTest : public ::testing::Test {
 protected:
  void SetUp() override {
    path = temp_path("errors.lwa");
    save_weights(Model::build(tiny_spec(), 8), path);
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  void write(const std::vector<char>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
  }
  ArchiveError::Kind load_error() {
    try {
      load_weights(path);
    } catch (const ArchiveError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "expected ArchiveError";
    return ArchiveError::Kind::Io;
  }
  std::string path;
  std::vector<char> bytes;
};

TEST_F(ArchiveErrorTest, Truncated) {
  for (std::size_t keep : {std::size_t{4}, std::size_t{30}, bytes.size() / 2, bytes.size() - 1}) {
    write(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep)));
    EXPECT_EQ(load_error(), ArchiveError::Kind::Truncated) << keep;
  }
}

TEST_F(ArchiveErrorTest, BadMagic) {
  auto data = bytes;
  data[0] = 'X';
  write(data);
  EXPECT_EQ(load_error(), ArchiveError::Kind::BadMagic);
}

TEST_F(ArchiveErrorTest, UnsupportedVersion) {
  auto data = bytes;
  data[8] = 9;
  write(data);
  EXPECT_EQ(load_error(), ArchiveError::Kind::UnsupportedVersion);
}

TEST_F(ArchiveErrorTest, MissingFile) {
  std::filesystem::remove(path);
  EXPECT_EQ(load_error(), ArchiveError::Kind::Io);
}

TEST_F(ArchiveErrorTest, ShapeMismatchAgainstSpec) {
  auto other = tiny_spec();
  other.num_classes = 9;
  try {
    load_weights(path, other);
    FAIL() << "expected ArchiveError";
  } catch (const ArchiveError& e) {
    EXPECT_EQ(e.kind(), ArchiveError::Kind::ShapeMismatch);
    EXPECT_NE(std::string(e.what()).find("head."), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(load_weights(path, tiny_spec()));
}

TEST(ArchiveContentTest, WidestPresetHasOneBiasTablePerAttention) {
  const auto spec = preset("LeViT-256");
  const auto path = temp_path("levit256.lwa");
  save_weights(Model::build(spec, 9), path);
  const Model back = load_weights(path);
  std::filesystem::remove(path);

  // Expected tables enumerated from the spec: regular blocks use the stage grid,
  // shrinking blocks the grid of their input.
  std::map<std::string, Shape> expected;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const auto& st = spec.stages[s];
    for (int i = 0; i < st.depth; ++i) {
      expected["stages." + std::to_string(s) + "." + std::to_string(i) + ".attn.attention_bias"] =
          {st.heads, st.grid.height, st.grid.width};
    }
    if (s + 1 < spec.stages.size()) {
      expected["subsample." + std::to_string(s) + ".attn.attention_bias"] = {
          spec.subsamples[s].heads, st.grid.height, st.grid.width};
    }
  }
  std::map<std::string, Shape> found;
  for (const auto& e : back.state()) {
    if (e.name.ends_with("attention_bias")) found[e.name] = e.tensor.shape();
  }
  EXPECT_EQ(found.size(), 14u);
  EXPECT_EQ(found, expected);
}
