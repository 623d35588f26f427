#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "corma/adapter.hpp"

using namespace corma;
using namespace corma::adapt;
using nk::Tensor;

namespace {

AdapterConfig small_cfg(Variant v = Variant::Transformer, int H = 8, std::uint64_t seed = 0) {
  AdapterConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.u_dim = 8;
  c.history_len = H;
  c.variant = v;
  c.init_seed = seed;
  return c;
}

Batch random_batch(std::size_t B, int H, std::mt19937_64& rng, std::vector<int> pads = {}) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> f(B * static_cast<std::size_t>(H) * data::kFeatureWidth);
  for (auto& v : f) v = n(rng);
  Batch b;
  b.features = Tensor::from({B, static_cast<std::size_t>(H), data::kFeatureWidth}, std::move(f));
  b.pad_len = pads.empty() ? std::vector<int>(B, 0) : pads;
  for (std::size_t s = 0; s < B; ++s)
    for (int r = 0; r < b.pad_len[s]; ++r)
      for (std::size_t c = 0; c < data::kFeatureWidth; ++c)
        b.features.data()[(s * H + r) * data::kFeatureWidth + c] = 0.0;
  return b;
}

void expect_unit_rows(const Tensor& u) {
  const std::size_t D = u.dim(1);
  for (std::size_t r = 0; r < u.dim(0); ++r) {
    double s = 0;
    for (std::size_t j = 0; j < D; ++j) s += u[r * D + j] * u[r * D + j];
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-9);
  }
}

}  // namespace

TEST(AdapterConfig, Validation) {
  auto c = small_cfg();
  c.n_heads = 3;
  EXPECT_THROW(Adapter{c}, InvalidArgument);
  c = small_cfg();
  c.u_dim = 1;
  EXPECT_THROW(Adapter{c}, InvalidArgument);
  EXPECT_THROW(parse_variant("lstm"), InvalidArgument);
  EXPECT_EQ(AdapterConfig::from_json(small_cfg().to_json()).to_json(), small_cfg().to_json());
  auto j = small_cfg().to_json();
  j["d_modle"] = 16;
  EXPECT_THROW(AdapterConfig::from_json(j), InvalidArgument);
}

TEST(AdapterForward, OutputShapesAndUnitEmbeddings) {
  std::mt19937_64 rng(1);
  for (auto v : {Variant::Transformer, Variant::Conv1D}) {
    const Adapter a(small_cfg(v, 16));
    const auto out = a.forward(random_batch(5, 16, rng));
    EXPECT_EQ(out.z_hat.shape(), (nk::Shape{5, 6}));
    EXPECT_EQ(out.u.shape(), (nk::Shape{5, 8}));
    EXPECT_EQ(out.h.shape(), (nk::Shape{5, 16}));
    expect_unit_rows(out.u);
    EXPECT_GT(a.param_count(), 0u);
  }
}

TEST(AdapterForward, RejectsBadShapesAndPadding) {
  std::mt19937_64 rng(1);
  const Adapter a(small_cfg());
  EXPECT_THROW(a.forward(random_batch(2, 9, rng)), InvalidArgument);
  auto b = random_batch(2, 8, rng);
  b.pad_len[0] = 9;
  EXPECT_THROW(a.forward(b), InvalidArgument);
}

TEST(AdapterForward, IdenticalSamplesGiveIdenticalOutputs) {
  std::mt19937_64 rng(2);
  for (auto v : {Variant::Transformer, Variant::Conv1D}) {
    const Adapter a(small_cfg(v));
    auto b = random_batch(3, 8, rng, {2, 1, 2});
    const std::size_t row = 8 * data::kFeatureWidth;
    std::copy(b.features.data().begin(), b.features.data().begin() + row, b.features.data().begin() + 2 * row);
    const auto out = a.forward(b);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(out.z_hat[j], out.z_hat[12 + j]);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(out.u[j], out.u[16 + j]);
  }
}

TEST(AdapterForward, PerPositionStatesAreCausal) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> pos(0, 7);
  for (int trial = 0; trial < 50; ++trial) {
    const Adapter a(small_cfg(Variant::Transformer, 8, static_cast<std::uint64_t>(trial % 5)));
    const auto b = random_batch(1, 8, rng);
    const int k = pos(rng);
    Batch p = b;
    p.features = b.features.detach();
    for (std::size_t c = 0; c < data::kFeatureWidth; ++c) p.features.data()[k * data::kFeatureWidth + c] += 0.5;
    const auto s0 = a.forward(b, false, nullptr, true).states, s1 = a.forward(p, false, nullptr, true).states;
    const std::size_t d = 16;
    for (int i = 0; i <= 8; ++i) {
      bool same = true;
      for (std::size_t j = 0; j < d; ++j) same = same && s0[i * d + j] == s1[i * d + j];
      if (i < k) EXPECT_TRUE(same) << "position " << i << " saw step " << k;
      else EXPECT_FALSE(same) << "position " << i << " ignored step " << k;
    }
  }
}

TEST(AdapterForward, ReadoutOnlyPathMatchesFullPath) {
  std::mt19937_64 rng(4);
  const Adapter a(small_cfg());
  const auto b = random_batch(4, 8, rng, {0, 3, 7, 8});
  const auto fast = a.forward(b), full = a.forward(b, false, nullptr, true);
  for (std::size_t i = 0; i < fast.z_hat.size(); ++i) EXPECT_NEAR(fast.z_hat[i], full.z_hat[i], 1e-12);
}

TEST(AdapterForward, PadRowsAreIgnored) {
  std::mt19937_64 rng(5);
  const Adapter a(small_cfg());
  auto b = random_batch(1, 8, rng, {3});
  const auto ref = a.forward(b);
  for (std::size_t c = 0; c < 2 * data::kFeatureWidth; ++c) b.features.data()[c] = 7.0;
  const auto out = a.forward(b);
  EXPECT_EQ(ref.z_hat.data(), out.z_hat.data());
  EXPECT_EQ(ref.u.data(), out.u.data());
}

TEST(AdapterForward, FullyPaddedSampleIgnoresFeatures) {
  std::mt19937_64 rng(6);
  const Adapter a(small_cfg());
  auto b = random_batch(1, 8, rng, {8});
  const auto ref = a.forward(b);
  for (auto& v : b.features.data()) v = 3.0;
  const auto out = a.forward(b);
  EXPECT_EQ(ref.z_hat.data(), out.z_hat.data());
  for (double v : out.z_hat.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(AdapterForward, DropoutOnlyInTrainMode) {
  std::mt19937_64 rng(7);
  auto cfg = small_cfg();
  cfg.dropout_p = 0.3;
  const Adapter a(cfg);
  const auto b = random_batch(2, 8, rng);
  EXPECT_EQ(a.forward(b).z_hat.data(), a.forward(b).z_hat.data());
  std::mt19937_64 r1(9), r2(9);
  const auto t1 = a.forward(b, true, &r1), t2 = a.forward(b, true, &r2);
  EXPECT_EQ(t1.z_hat.data(), t2.z_hat.data());
  EXPECT_NE(t1.z_hat.data(), a.forward(b).z_hat.data());
  EXPECT_THROW(a.forward(b, true), InvalidArgument);
}

TEST(AdapterConv, ShapeParityAndLengths) {
  EXPECT_EQ(conv_lengths(32), (std::vector<std::size_t>{7, 7, 7}));
  EXPECT_EQ(conv_lengths(8), (std::vector<std::size_t>{1, 1, 1}));
  auto c = small_cfg(Variant::Conv1D, 7);
  EXPECT_THROW(Adapter{c}, InvalidArgument);
}

TEST(AdapterParams, CountMatchesArithmetic) {
  AdapterConfig c = small_cfg();
  c.n_layers = 1;
  const std::size_t d = 16, F = 18, H = 8, m = 64, u = 8;
  const std::size_t layer = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d);
  const std::size_t expect = (F * d + d) + (H + 1) * d + d + layer + 2 * d + (d * 6 + 6) + (d * d + d) + (d * u + u);
  EXPECT_EQ(Adapter(c).param_count(), expect);
}

TEST(AdapterCheckpoint, RoundTripIsByteIdentical) {
  const Adapter a(small_cfg(Variant::Transformer, 8, 3));
  data::NormStats st;
  st.feat_std.fill(1.0);
  st.z_std.fill(2.0);
  const auto bytes = checkpoint_bytes(a, st, "abc");
  const auto ck = parse_checkpoint(bytes, st.digest());
  const Adapter b = adapter_from(ck);
  EXPECT_EQ(checkpoint_bytes(b, ck.stats, ck.train_config_digest), bytes);
  EXPECT_EQ(ck.stats, st);
}

TEST(AdapterCheckpoint, TamperAndDigestMismatchRejected) {
  const Adapter a(small_cfg());
  data::NormStats st;
  st.feat_std.fill(1.0);
  st.z_std.fill(1.0);
  auto bytes = checkpoint_bytes(a, st, "abc");
  EXPECT_THROW(parse_checkpoint(bytes, std::string(64, '0')), FormatError);
  const auto pos = bytes.find("corma-adapter");
  ASSERT_NE(pos, std::string::npos);
  bytes[pos] = 'k';
  EXPECT_THROW(parse_checkpoint(bytes), FormatError);
}

TEST(AdapterCheckpoint, LargestAblationModelFitsBudget) {
  AdapterConfig c;
  c.d_model = 256;
  c.n_layers = 4;
  c.n_heads = 8;
  const Adapter a(c);
  data::NormStats st;
  st.feat_std.fill(1.0);
  st.z_std.fill(1.0);
  EXPECT_LE(checkpoint_bytes(a, st, "x").size(), 64u << 20);
  EXPECT_LE(a.param_count() * 8, 64u << 20);
}
