#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "corma/numkit.hpp"
#include "gradcheck.hpp"

using namespace corma;
using nk::Tensor;
using check::grad_check;
using check::random_tensor;
using check::random_weights;

namespace {

constexpr double kKernelTol = 1e-6;
constexpr double kFdStep = 1e-5;

// Runs a finite-difference check of sum(w * op(inputs)) over every input entry.
template <typename Op>
double check_kernel(Op op, std::vector<Tensor> inputs, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  const std::size_t n = op(inputs).size();
  const auto w = random_weights(n, rng);
  auto loss = [&] { return nk::weighted_sum(op(inputs), w); };
  return grad_check(loss, inputs, 1u << 20, seed, kFdStep).max_rel_error;
}

}  // namespace

TEST(NumkitForward, SoftmaxOfEqualLogitsIsUniform) {
  const auto y = nk::softmax(Tensor::from({3}, {0, 0, 0}));
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(NumkitForward, LayerNormGivesZeroMeanUnitVariance) {
  std::mt19937_64 rng(3);
  const auto x = random_tensor({5, 17}, rng, 4.0, false);
  const auto y = nk::layer_norm(x, Tensor::full({17}, 1.0), Tensor::zeros({17}), 0.0);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 17; ++j) m += y[r * 17 + j];
    m /= 17;
    for (std::size_t j = 0; j < 17; ++j) v += (y[r * 17 + j] - m) * (y[r * 17 + j] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 17, 1.0, 1e-12);
  }
}

TEST(NumkitForward, ShapeMismatchNamesBothShapes) {
  try {
    nk::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4,5]"), std::string::npos);
  }
  EXPECT_THROW(nk::add(Tensor::zeros({2, 3}), Tensor::zeros({4})), InvalidArgument);
}

TEST(NumkitForward, MaskedFillWritesLargeNegative) {
  const auto y = nk::masked_fill(Tensor::from({3}, {1, 2, 3}), {0, 1, 0});
  EXPECT_EQ(y[1], -1e9);
  EXPECT_EQ(y[0], 1.0);
  const auto s = nk::softmax(y);
  EXPECT_EQ(s[1], 0.0);
}

TEST(NumkitForward, RepeatedForwardIsIdentical) {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({4, 6}, rng);
  const auto w = random_tensor({6, 3}, rng);
  auto f = [&] { return nk::softmax(nk::gelu(nk::matmul(x, w))).data(); };
  EXPECT_EQ(f(), f());
}

TEST(NumkitBackward, SumGivesOnes) {
  auto x = Tensor::from({2, 2}, {1, -2, 3, 4}, true);
  nk::backward(nk::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(NumkitBackward, SumOfSquaresGivesTwoX) {
  auto x = Tensor::from({3}, {1.5, -2, 0.25}, true);
  nk::backward(nk::sum(nk::mul(x, x)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 2 * x[i]);
}

TEST(NumkitBackward, FanOutAccumulates) {
  auto x = Tensor::from({2}, {1, 2}, true);
  nk::backward(nk::sum(nk::add(nk::scale(x, 3.0), x)));
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(NumkitBackward, RejectsNonScalarAndRepeatedBackward) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(nk::backward(nk::scale(x, 2.0)), InvalidArgument);
  auto loss = nk::sum(nk::scale(x, 2.0));
  nk::backward(loss);
  EXPECT_THROW(nk::backward(loss), std::logic_error);
}

TEST(NumkitBackward, NoGradGuardRecordsNothing) {
  auto x = Tensor::from({2}, {1, 2}, true);
  nk::NoGradGuard g;
  EXPECT_FALSE(nk::sum(x).requires_grad());
}

// ------------------------------------------------------------ gradchecks

TEST(NumkitGradcheck, Matmul) {
  std::mt19937_64 rng(10);
  EXPECT_LT(check_kernel([](auto& in) { return nk::matmul(in[0], in[1]); },
                         {random_tensor({2, 3}, rng), random_tensor({3, 4}, rng)}),
            kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::matmul(in[0], in[1]); },
                         {random_tensor({2, 5, 3}, rng), random_tensor({3, 4}, rng)}),
            kKernelTol);
}

TEST(NumkitGradcheck, BatchedMatmul) {
  std::mt19937_64 rng(11);
  EXPECT_LT(check_kernel([](auto& in) { return nk::bmm(in[0], in[1]); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng)}),
            kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::bmm(in[0], in[1], true); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng)}),
            kKernelTol);
}

TEST(NumkitGradcheck, BroadcastingBinaryOps) {
  std::mt19937_64 rng(12);
  for (int k = 0; k < 3; ++k) {
    auto op = [k](auto& in) {
      return k == 0 ? nk::add(in[0], in[1]) : k == 1 ? nk::sub(in[0], in[1]) : nk::mul(in[0], in[1]);
    };
    EXPECT_LT(check_kernel(op, {random_tensor({3, 1, 4}, rng), random_tensor({5, 1}, rng)}), kKernelTol);
    EXPECT_LT(check_kernel(op, {random_tensor({2, 4}, rng), random_tensor({4}, rng)}), kKernelTol);
  }
}

TEST(NumkitGradcheck, BroadcastTo) {
  std::mt19937_64 rng(13);
  EXPECT_LT(check_kernel([](auto& in) { return nk::broadcast_to(in[0], {3, 2, 4}); }, {random_tensor({2, 1}, rng)}),
            kKernelTol);
}

TEST(NumkitGradcheck, LayoutOps) {
  std::mt19937_64 rng(14);
  EXPECT_LT(check_kernel([](auto& in) { return nk::permute(in[0], {2, 0, 1}); }, {random_tensor({2, 3, 4}, rng)}),
            kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::reshape(in[0], {4, 6}); }, {random_tensor({2, 3, 4}, rng)}),
            kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::concat({in[0], in[1]}, 1); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({2, 2, 4}, rng)}),
            kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::slice(in[0], 1, 1, 2); }, {random_tensor({2, 4, 3}, rng)}),
            kKernelTol);
}

TEST(NumkitGradcheck, LastAxisKernels) {
  std::mt19937_64 rng(15);
  EXPECT_LT(check_kernel([](auto& in) { return nk::softmax(in[0]); }, {random_tensor({3, 5}, rng)}), kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::logsumexp(in[0]); }, {random_tensor({3, 5}, rng)}), kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::l2_normalize(in[0]); }, {random_tensor({3, 5}, rng)}), kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::layer_norm(in[0], in[1], in[2]); },
                         {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)}),
            kKernelTol);
}

TEST(NumkitGradcheck, PointwiseKernels) {
  std::mt19937_64 rng(16);
  EXPECT_LT(check_kernel([](auto& in) { return nk::gelu(in[0]); }, {random_tensor({4, 5}, rng, 2.0)}), kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::softplus(in[0]); }, {random_tensor({4, 5}, rng, 3.0)}),
            kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::square(in[0]); }, {random_tensor({4, 5}, rng)}), kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::affine_scalar(in[0], -1.7, 0.3); }, {random_tensor({4}, rng)}),
            kKernelTol);
}

TEST(NumkitGradcheck, MaskedFillAndDropout) {
  std::mt19937_64 rng(17);
  const std::vector<std::uint8_t> mask{0, 1, 0, 0, 1, 0};
  EXPECT_LT(check_kernel([&](auto& in) { return nk::softmax(nk::masked_fill(in[0], mask)); },
                         {random_tensor({2, 3}, rng)}),
            kKernelTol);
  // same seed on every evaluation -> the same mask
  EXPECT_LT(check_kernel(
                [](auto& in) {
                  std::mt19937_64 r(99);
                  return nk::dropout(in[0], 0.3, r);
                },
                {random_tensor({4, 5}, rng)}),
            kKernelTol);
}

TEST(NumkitGradcheck, EmbeddingAndUnfold) {
  std::mt19937_64 rng(18);
  EXPECT_LT(check_kernel([](auto& in) { return nk::embedding_lookup(in[0], {2, 0, 2, 1}); },
                         {random_tensor({3, 4}, rng)}),
            kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::unfold1d(in[0], 3, 2, 1, 1); }, {random_tensor({2, 7, 3}, rng)}),
            kKernelTol);
}

TEST(NumkitGradcheck, Reductions) {
  std::mt19937_64 rng(19);
  EXPECT_LT(check_kernel([](auto& in) { return nk::mean(in[0]); }, {random_tensor({3, 4}, rng)}), kKernelTol);
  EXPECT_LT(check_kernel([](auto& in) { return nk::sum(nk::square(in[0])); }, {random_tensor({3, 4}, rng)}),
            kKernelTol);
}

// ---------------------------------------------------------------- dropout

TEST(NumkitDropout, ZeroProbabilityIsIdentity) {
  std::mt19937_64 rng(1);
  auto x = Tensor::from({3}, {1, 2, 3});
  EXPECT_EQ(nk::dropout(x, 0.0, rng).data(), x.data());
  EXPECT_EQ(nk::dropout(x, 0.5, rng, false).data(), x.data());
}

TEST(NumkitDropout, SeededMasksReproduce) {
  std::mt19937_64 a(5), b(5);
  auto x = Tensor::full({100}, 1.0);
  EXPECT_EQ(nk::dropout(x, 0.4, a).data(), nk::dropout(x, 0.4, b).data());
}

// ------------------------------------------------------------------- adam

TEST(NumkitAdam, ZeroGradientLeavesParamsUnchanged) {
  nk::ParamList ps{{"w", Tensor::from({3}, {1, -2, 3}, true)}};
  ps[0].value.grad();  // allocate zeros
  nk::AdamState st;
  nk::adam_step(ps, st);
  EXPECT_EQ(ps[0].value.data(), (std::vector<double>{1, -2, 3}));
}

TEST(NumkitAdam, FirstStepMovesByLearningRate) {
  nk::ParamList ps{{"w", Tensor::from({3}, {1, -2, 3}, true)}};
  ps[0].value.grad() = {0.5, -4.0, 1e-3};
  nk::AdamState st;
  st.lr = 0.01;
  nk::adam_step(ps, st);
  EXPECT_NEAR(ps[0].value[0], 1 - 0.01, 1e-8);
  EXPECT_NEAR(ps[0].value[1], -2 + 0.01, 1e-8);
  EXPECT_NEAR(ps[0].value[2], 3 - 0.01, 1e-7);
}

TEST(NumkitAdam, IdenticalSequencesGiveIdenticalParams) {
  auto run = [] {
    nk::ParamList ps{{"w", Tensor::from({2}, {0.3, -0.1}, true)}};
    nk::AdamState st;
    for (int k = 0; k < 20; ++k) {
      nk::zero_grads(ps);
      nk::backward(nk::sum(nk::square(nk::affine_scalar(ps[0].value, 1.0, -1.0))));
      nk::adam_step(ps, st);
    }
    return ps[0].value.data();
  };
  EXPECT_EQ(run(), run());
}

TEST(NumkitAdam, RejectsChangedParameterList) {
  nk::ParamList ps{{"w", Tensor::from({2}, {0, 0}, true)}};
  nk::AdamState st;
  nk::adam_step(ps, st);
  ps.push_back({"v", Tensor::from({1}, {0}, true)});
  EXPECT_THROW(nk::adam_step(ps, st), InvalidArgument);
}

TEST(NumkitOptim, ClipGradNorm) {
  nk::ParamList ps{{"w", Tensor::from({2}, {0, 0}, true)}};
  ps[0].value.grad() = {3, 4};
  EXPECT_DOUBLE_EQ(nk::clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(ps[0].value.grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(ps[0].value.grad()[1], 0.8, 1e-12);
}

TEST(NumkitParamsIo, RoundTripAndTamper) {
  nk::ParamList ps{{"a", Tensor::from({2, 2}, {1, 2, 3, 4.5})}, {"b", Tensor::from({1}, {-7})}};
  const auto bytes = nk::serialize_params(ps, {{"k", 1}});
  const auto back = nk::deserialize_params(bytes);
  ASSERT_EQ(back.params.size(), 2u);
  EXPECT_EQ(back.params[0].value.data(), ps[0].value.data());
  EXPECT_EQ(back.params[1].name, "b");
  EXPECT_EQ(back.meta["k"], 1);
  auto bad = bytes;
  bad[bad.size() - 3] ^= 0x5a;
  EXPECT_THROW(nk::deserialize_params(bad), FormatError);
  EXPECT_THROW(nk::deserialize_params(bytes.substr(0, bytes.size() / 2)), FormatError);
}
