#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "flex/gradcheck.hpp"
#include "flex/ops.hpp"
#include "flex/serialize.hpp"

using namespace flex;

namespace {

Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Six nested loops, no shortcuts.
Tensor<double> conv_oracle(const Tensor<double>& in, const Tensor<double>& k, int stride, int pad) {
  const auto C = in.extent(0), H = in.extent(1), W = in.extent(2);
  const auto O = k.extent(0), KH = k.extent(2), KW = k.extent(3);
  const auto OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  Tensor<double> out({O, OH, OW});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t x = 0; x < OW; ++x) {
        double s = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < KH; ++i)
            for (std::size_t j = 0; j < KW; ++j) {
              const long yy = static_cast<long>(y * stride + i) - pad, xx = static_cast<long>(x * stride + j) - pad;
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
              s += in.at(c, yy, xx) * k[((o * C + c) * KH + i) * KW + j];
            }
        out.at(o, y, x) = s;
      }
  return out;
}

}  // namespace

TEST(Tensor, ShapeMustMatchPayload) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), Error);
  Tensor<double> t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(shape_size({}), 1u);
  EXPECT_TRUE(Tensor<double>::scalar(2.0).is_scalar());
}

TEST(Tensor, SerializationRoundTrip) {
  std::mt19937_64 rng(3);
  const auto t = random_tensor({2, 3, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  EXPECT_EQ(read_tensor<double>(ss), t);
  std::stringstream empty;
  write_tensor(empty, Tensor<double>({0, 5}));
  EXPECT_EQ(read_tensor<double>(empty).shape(), (Shape{0, 5}));
}

TEST(Tensor, TruncatedStreamIsPersistedStateError) {
  std::stringstream ss;
  write_tensor(ss, Tensor<double>({4}, 1.0));
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream cut(bytes);
  try {
    read_tensor<double>(cut);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::PersistedState);
  }
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(1);
  const auto in = random_tensor({3, 5, 6}, rng);
  Tensor<double> k({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) k[c * 3 + c] = 1.0;
  EXPECT_EQ(conv2d(in, k, 1, 0), in);
}

TEST(Conv2d, ZeroInput) {
  std::mt19937_64 rng(2);
  const auto out = conv2d(Tensor<double>({2, 7, 7}), random_tensor({4, 2, 3, 3}, rng), 2, 1);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesBruteForce) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 1 + rng() % 3, o = 1 + rng() % 3, h = 3 + rng() % 6, w = 3 + rng() % 6;
    const int stride = 1 + static_cast<int>(rng() % 2), pad = static_cast<int>(rng() % 2);
    const auto in = random_tensor({c, h, w}, rng);
    const auto k = random_tensor({o, c, 3, 3}, rng);
    const auto got = conv2d(in, k, stride, pad);
    const auto want = conv_oracle(in, k, stride, pad);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  try {
    conv2d(Tensor<double>({2, 5, 5}), Tensor<double>({1, 3, 3, 3}), 1, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
  }
  EXPECT_EQ(conv_out_extent(7, 3, 2, 1), 4u);
}

TEST(Affine, IdentityAndZeroInput) {
  Tensor<double> w({3, 3});
  for (std::size_t i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
  const auto x = Tensor<double>::vector({1, -2, 3});
  const auto b = Tensor<double>::vector({0.5, 0.25, -1});
  EXPECT_EQ(affine(x, w, Tensor<double>({3})), x);
  EXPECT_EQ(affine(Tensor<double>({3}), w, b), b);
}

TEST(Affine, MatchesDotProductLoop) {
  std::mt19937_64 rng(8);
  const auto x = random_tensor({7}, rng), w = random_tensor({4, 7}, rng), b = random_tensor({4}, rng);
  const auto y = affine(x, w, b);
  for (std::size_t o = 0; o < 4; ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < 7; ++i) s += w[o * 7 + i] * x[i];
    EXPECT_NEAR(y[o], s, 1e-14);
  }
  EXPECT_THROW(affine(random_tensor({6}, rng), w, b), Error);
}

TEST(SoftmaxCrossEntropy, KnownValues) {
  EXPECT_NEAR(softmax_cross_entropy(Tensor<double>({4}, 0.3), 2), std::log(4.0), 1e-14);
  EXPECT_NEAR(softmax_cross_entropy(Tensor<double>::vector({1000, 0, 0}), 0), 0.0, 1e-12);
  const double want = std::log(1.0 + std::exp(-1.0) + std::exp(-2.0));
  EXPECT_NEAR(softmax_cross_entropy(Tensor<double>::vector({1, 2, 3}), 2), want, 1e-14);
  EXPECT_NEAR(want, 0.4076, 5e-5);
}

TEST(SoftmaxCrossEntropy, NonFiniteLogitsAreNumericError) {
  try {
    softmax_cross_entropy(Tensor<double>::vector({1, NAN, 0}), 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
  }
}

TEST(Softmax, SumsToOneAndBounded) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 100; ++t) {
    const auto p = softmax(random_tensor({6}, rng, -30, 30));
    double s = 0;
    for (double v : p.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Backward, NonScalarSeedIsUsageError) {
  Tape<double> tape;
  const Var x = tape.leaf(Tensor<double>({3}, 1.0), true);
  const Var y = ops::relu(tape, x);
  try {
    tape.backward(y);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Usage);
  }
}

TEST(Backward, IdentityAffinePassesSeedThrough) {
  Tape<double> tape;
  Tensor<double> eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  const Var x = tape.leaf(Tensor<double>::vector({1, 2, 3}), true);
  const Var y = ops::affine(tape, x, tape.constant(eye), tape.constant(Tensor<double>({3})));
  const Var coeffs = tape.constant(Tensor<double>::vector({0.5, -2, 4}));
  tape.backward(ops::sum_all(tape, ops::mul(tape, y, coeffs)));
  const auto* g = tape.grad(x);
  ASSERT_NE(g, nullptr);
  EXPECT_EQ(*g, tape.value(coeffs));
}

TEST(Backward, ConstantHasZeroGradient) {
  Tape<double> tape;
  const Var x = tape.leaf(Tensor<double>({2}, 1.0), true);
  const Var c = tape.constant(Tensor<double>::scalar(5.0));
  const Var y = ops::linear_combination(tape, {c, ops::scale(tape, ops::sum_all(tape, x), 0.0)}, {1.0, 1.0});
  tape.backward(y);
  if (const auto* g = tape.grad(x)) {
    for (double v : g->data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Replay, ReproducesForwardValuesBitwise) {
  std::mt19937_64 rng(4);
  Tape<double> tape;
  const Var x = tape.leaf(random_tensor({2, 6, 6}, rng), true);
  const Var k = tape.leaf(random_tensor({3, 2, 3, 3}, rng), true);
  const Var y = ops::sum_all(tape, ops::softplus(tape, ops::conv2d(tape, x, k, 2, 1)));
  const double before = tape.value(y).item();
  tape.replay();
  EXPECT_EQ(tape.value(y).item(), before);
}

TEST(FiniteDiff, Quadratic) {
  const auto r = finite_diff_check(
      [](Tape<double>& t, const std::vector<Var>& p) { return ops::sum_all(t, ops::mul(t, p[0], p[0])); },
      {Tensor<double>::vector({3.0})});
  EXPECT_LT(r.worst, 1e-8);
}

TEST(FiniteDiff, ConstantFunction) {
  const auto r = finite_diff_check(
      [](Tape<double>& t, const std::vector<Var>& p) {
        return ops::scale(t, ops::sum_all(t, p[0]), 0.0);
      },
      {Tensor<double>::vector({1.0, 2.0})});
  EXPECT_EQ(r.worst, 0.0);
}

TEST(FiniteDiff, NonFiniteObjectiveIsNumericError) {
  try {
    finite_diff_check(
        [](Tape<double>& t, const std::vector<Var>& p) {
          return ops::softmax_cross_entropy(t, ops::scale(t, p[0], 1e308), 0);
        },
        {Tensor<double>::vector({10.0, -10.0})});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
  }
}

// Every differentiable primitive against central differences, 50 seeds each.
class PrimitiveGrad : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGrad, AllPrimitivesPass) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()));
  const std::size_t c = 1 + rng() % 3, h = 3 + rng() % 4, w = 3 + rng() % 4, o = 1 + rng() % 3;
  const int stride = 1 + static_cast<int>(rng() % 2);
  auto check = [&](const char* name, const ScalarBuilder& fn, const std::vector<Tensor<double>>& params) {
    const auto r = finite_diff_check(fn, params);
    EXPECT_LE(r.worst, 1e-4) << name << " seed " << GetParam();
  };
  // Offsets keep ReLU inputs away from the kink.
  auto away = [&](Shape s) {
    auto t = random_tensor(std::move(s), rng, 0.2, 1.0);
    for (auto& v : t.data()) v = (rng() % 2 ? v : -v);
    return t;
  };
  const auto mix = random_tensor({o, (h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1}, rng);
  check("conv2d",
        [&](Tape<double>& t, const std::vector<Var>& p) {
          return ops::sum_all(t, ops::mul(t, ops::conv2d(t, p[0], p[1], stride, 1), t.constant(mix)));
        },
        {random_tensor({c, h, w}, rng), random_tensor({o, c, 3, 3}, rng)});
  const auto mix2 = random_tensor({c, h, w}, rng);
  check("channel_bias",
        [&](Tape<double>& t, const std::vector<Var>& p) {
          return ops::sum_all(t, ops::mul(t, ops::channel_bias(t, p[0], p[1]), t.constant(mix2)));
        },
        {random_tensor({c, h, w}, rng), random_tensor({c}, rng)});
  const auto mix3 = random_tensor({o}, rng);
  check("affine",
        [&](Tape<double>& t, const std::vector<Var>& p) {
          return ops::sum_all(t, ops::mul(t, ops::affine(t, p[0], p[1], p[2]), t.constant(mix3)));
        },
        {random_tensor({h}, rng), random_tensor({o, h}, rng), random_tensor({o}, rng)});
  check("relu",
        [&](Tape<double>& t, const std::vector<Var>& p) {
          return ops::sum_all(t, ops::mul(t, ops::relu(t, p[0]), t.constant(mix2)));
        },
        {away({c, h, w})});
  check("softplus",
        [&](Tape<double>& t, const std::vector<Var>& p) {
          return ops::sum_all(t, ops::mul(t, ops::softplus(t, p[0]), t.constant(mix2)));
        },
        {random_tensor({c, h, w}, rng, -4, 4)});
  check("global_avg_pool",
        [&](Tape<double>& t, const std::vector<Var>& p) {
          return ops::sum_all(t, ops::mul(t, ops::global_avg_pool(t, p[0]), t.constant(random_tensor({c}, rng))));
        },
        {random_tensor({c, h, w}, rng)});
  check("concat_channels",
        [&](Tape<double>& t, const std::vector<Var>& p) {
          const Var cat = ops::concat_channels(t, {p[0], p[1]});
          return ops::sum_all(t, ops::mul(t, cat, cat));
        },
        {random_tensor({c, h, w}, rng), random_tensor({1, h, w}, rng)});
  check("softmax",
        [&](Tape<double>& t, const std::vector<Var>& p) {
          return ops::sum_all(t, ops::mul(t, ops::softmax(t, p[0]), t.constant(mix3)));
        },
        {random_tensor({o}, rng, -3, 3)});
  const std::size_t target = rng() % (o + 1);
  check("softmax_cross_entropy",
        [&](Tape<double>& t, const std::vector<Var>& p) { return ops::softmax_cross_entropy(t, p[0], target); },
        {random_tensor({o + 1}, rng, -3, 3)});
  Tensor<double> reg_target = random_tensor({4}, rng, -2, 2);
  auto pred = reg_target;
  for (auto& v : pred.data()) v += (rng() % 2 ? 1 : -1) * (0.1 + 0.5 * (rng() % 4));  // |d| in {0.1,0.6,1.1,1.6}
  check("smooth_l1", [&](Tape<double>& t, const std::vector<Var>& p) { return ops::smooth_l1(t, p[0], reg_target, 1.0); },
        {pred});
  check("weighted_fuse",
        [&](Tape<double>& t, const std::vector<Var>& p) {
          return ops::sum_all(t, ops::mul(t, ops::weighted_fuse(t, {p[0], p[1], p[2]}, p[3], 1e-6), t.constant(mix2)));
        },
        {random_tensor({c, h, w}, rng), random_tensor({c, h, w}, rng), random_tensor({c, h, w}, rng),
         random_tensor({3}, rng, 0.1, 2.0)});
  check("mul_linear_combination",
        [&](Tape<double>& t, const std::vector<Var>& p) {
          const Var m = ops::mul(t, p[0], p[1]);
          return ops::sum_all(t, ops::linear_combination(t, {m, p[0]}, {0.7, -1.3}));
        },
        {random_tensor({o}, rng), random_tensor({o}, rng)});
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGrad, ::testing::Range(0, 50));
