// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "oracles.hpp"
#include "speechface/autograd.hpp"
#include "speechface/ops.hpp"
#include "speechface/random.hpp"
#include "speechface/tensor.hpp"

using namespace speechface;
using testing_oracles::random_tensor;

namespace {

double max_rel(std::span<const float> a, std::span<const double> b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(double(a[i])), std::abs(b[i]), 1e-6});
    worst = std::max(worst, std::abs(double(a[i]) - b[i]) / den);
  }
  return worst;
}

}  // namespace

TEST(Tensor, DimsAndIndexing) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  t.at(1, 2, 3) = 5.0f;
  EXPECT_EQ(t[23], 5.0f);
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
  EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
  EXPECT_EQ(t.reshaped({24}).dims(), Dims{24});
}

TEST(Tensor, ParamGradMatchesValueDims) {
  ParamTensor<float> p("w", Tensor<float>({3, 2}, 1.0f));
  EXPECT_EQ(p.grad.dims(), p.value.dims());
  p.grad.fill(2.0f);
  p.zero_grad();
  for (float g : p.grad.data()) EXPECT_EQ(g, 0.0f);
}

TEST(Conv2d, SingleMultiplyAdd) {
  Tensor<float> x({1, 1, 1}, 2.0f);
  Tensor<float> w({1, 1, 1, 1}, 3.0f);
  std::vector<float> b{0.5f};
  auto y = ops::conv2d<float>(x, w, b, {1, 1, 1, 1, 0, 0});
  ASSERT_EQ(y.dims(), (Dims{1, 1, 1}));
  EXPECT_FLOAT_EQ(y[0], 6.5f);
}

TEST(Conv2d, FirstStageShape) {
  Tensor<float> x({1, 128, 32});
  Tensor<float> w({64, 1, 3, 1});
  auto y = ops::conv2d<float>(x, w, {}, {3, 1, 2, 1, 1, 0});
  EXPECT_EQ(y.dims(), (Dims{64, 64, 32}));
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  Tensor<float> x({2, 5, 4});
  Tensor<float> w({3, 1, 3, 1});
  EXPECT_THROW(ops::conv2d<float>(x, w, {}, {3, 1, 2, 1, 1, 0}), ShapeError);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(11);
  {
    auto x = random_tensor<float>({2, 5, 4}, rng);
    auto w = random_tensor<float>({3, 2, 3, 1}, rng);
    auto b = random_tensor<float>({3}, rng);
    const ops::Conv2dGeometry g{3, 1, 2, 1, 1, 0};
    auto y = ops::conv2d<float>(x, w, b.data(), g);
    auto ref = testing_oracles::naive_conv(x.cast<double>(), w.cast<double>(), b.cast<double>().storage(), g);
    ASSERT_EQ(y.dims(), ref.dims());
    EXPECT_LE(max_rel(y.data(), ref.data()), 1e-6);
  }
  // Random instances with every dim <= 8, batched, strided and padded both
  // ways. Run in double so near-cancelling sums do not mask indexing errors.
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t bsz = 1 + rng.below(3), cin = 1 + rng.below(4), cout = 1 + rng.below(5);
    const std::size_t kf = 1 + rng.below(3), kt = 1 + rng.below(3);
    const std::size_t F = kf + rng.below(6), T = kt + rng.below(6);
    const ops::Conv2dGeometry g{kf, kt, 1 + rng.below(2), 1 + rng.below(2), rng.below(2), rng.below(2)};
    auto x = random_tensor<double>({bsz, cin, F, T}, rng);
    auto w = random_tensor<double>({cout, cin, kf, kt}, rng);
    auto b = random_tensor<double>({cout}, rng);
    auto y = ops::conv2d<double>(x, w, b.data(), g);
    auto ref = testing_oracles::naive_conv(x, w, b.storage(), g);
    ASSERT_EQ(y.dims(), ref.dims());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12) << "trial " << trial;
  }
}

TEST(MaxPool, ShapesAndSimpleMax) {
  Tensor<float> x({64, 64, 32});
  EXPECT_EQ(ops::max_pool2d(x, {2, 1, 2, 1}).output.dims(), (Dims{64, 32, 32}));
  Tensor<float> q({1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  auto r = ops::max_pool2d(q, {2, 2, 2, 2});
  ASSERT_EQ(r.output.size(), 1u);
  EXPECT_EQ(r.output[0], 4.0f);
  EXPECT_THROW(ops::max_pool2d(q, {3, 1, 1, 1}), ShapeError);
}

TEST(MaxPool, MatchesMaxScanOracleAndRoutesGradient) {
  Rng rng(5);
  auto x = random_tensor<float>({3, 8, 8}, rng);
  auto r = ops::max_pool2d(x, {2, 2, 2, 2});
  ASSERT_EQ(r.output.dims(), (Dims{3, 4, 4}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t f = 0; f < 4; ++f)
      for (std::size_t t = 0; t < 4; ++t) {
        float m = -1e30f;
        for (std::size_t i = 0; i < 2; ++i)
          for (std::size_t j = 0; j < 2; ++j) m = std::max(m, x.at(c, 2 * f + i, 2 * t + j));
        EXPECT_EQ(r.output.at(c, f, t), m);
      }
  auto g = random_tensor<float>({3, 4, 4}, rng);
  Tensor<float> gx(x.dims());
  ops::max_pool2d_backward<float>(g, r.argmax, gx);
  double sum_g = 0, sum_gx = 0;
  std::size_t nonzero = 0;
  for (float v : g.data()) sum_g += v;
  for (float v : gx.data()) {
    sum_gx += v;
    nonzero += v != 0.0f;
  }
  EXPECT_NEAR(sum_g, sum_gx, 1e-5);
  EXPECT_EQ(nonzero, 48u);
}

TEST(BatchNorm, UnitInputPreserved) {
  ops::BatchNormState<float> s("bn", 1);
  Tensor<float> x({2, 1}, std::vector<float>{-1, 1});
  auto y = ops::batch_norm(x, s, true);
  EXPECT_NEAR(y[0], -1.0f, 1e-5);
  EXPECT_NEAR(y[1], 1.0f, 1e-5);
}

TEST(BatchNorm, AffineContract) {
  Rng rng(3);
  ops::BatchNormState<double> s("bn", 3);
  s.gamma.value.fill(2.0);
  s.beta.value.fill(3.0);
  // The epsilon shrinks the std by a factor sqrt(var / (var + eps)); with
  // input variance ~30 that is below 1e-6.
  auto x = random_tensor<double>({4, 3, 5}, rng, -10.0, 10.0);
  auto y = ops::batch_norm(x, s, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t k = 0; k < 5; ++k) sum += y.at(b, c, k);
    const double mean = sum / 20;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t k = 0; k < 5; ++k) sq += (y.at(b, c, k) - mean) * (y.at(b, c, k) - mean);
    EXPECT_NEAR(mean, 3.0, 1e-5);
    EXPECT_NEAR(std::sqrt(sq / 20), 2.0, 1e-5);
  }
}

TEST(BatchNorm, EpsilonShrinkIsExact) {
  ops::BatchNormState<double> s("bn", 1);
  s.gamma.value.fill(2.0);
  Tensor<double> x({4, 1}, std::vector<double>{-0.1, 0.1, -0.3, 0.3});
  const double var = (0.01 + 0.01 + 0.09 + 0.09) / 4;
  auto y = ops::batch_norm(x, s, true);
  EXPECT_NEAR(y[3], 2.0 * 0.3 / std::sqrt(var + 1e-5), 1e-12);
}

TEST(BatchNorm, SingleSampleTrainingRejected) {
  ops::BatchNormState<float> s("bn", 2);
  Tensor<float> x({1, 2, 3});
  EXPECT_THROW(ops::batch_norm(x, s, true), InvalidConfiguration);
  EXPECT_NO_THROW(ops::batch_norm(x, s, false));
}

TEST(BatchNorm, RunningStatsConvergeToBatchStats) {
  Rng rng(9);
  ops::BatchNormState<float> s("bn", 4);
  auto x = random_tensor<float>({6, 4, 3}, rng);
  Tensor<float> train_out;
  for (int i = 0; i < 1000; ++i) train_out = ops::batch_norm(x, s, true);
  auto infer_out = ops::batch_norm(x, s, false);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(infer_out[i], train_out[i], 1e-4);
  for (float v : s.running_var) EXPECT_GT(v, 0.0f);
}

TEST(Dense, IdentityAndHandValue) {
  Tensor<float> eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0f;
  Tensor<float> x({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(ops::dense<float>(x, eye, {}), x);
  Tensor<float> in({2}, std::vector<float>{1, 2});
  Tensor<float> w({1, 2}, std::vector<float>{3, 4});
  std::vector<float> b{5};
  auto y = ops::dense<float>(in, w, b);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_FLOAT_EQ(y[0], 16.0f);
  EXPECT_THROW(ops::dense<float>(Tensor<float>({2, 4}), w, b), ShapeError);
}

TEST(Dense, MatchesTripleLoopOracle) {
  Rng rng(21);
  auto x = random_tensor<float>({4, 256}, rng);
  auto w = random_tensor<float>({256, 256}, rng);
  auto b = random_tensor<float>({256}, rng);
  auto y = ops::dense<float>(x, w, b.data());
  // Error relative to sum |terms|, the scale float accumulation is bounded by.
  double worst = 0;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t o = 0; o < 256; ++o) {
      double acc = b[o], mag = std::abs(double(b[o]));
      for (std::size_t i = 0; i < 256; ++i) {
        acc += double(x.at(r, i)) * double(w.at(o, i));
        mag += std::abs(double(x.at(r, i)) * double(w.at(o, i)));
      }
      worst = std::max(worst, std::abs(y.at(r, o) - acc) / mag);
    }
  EXPECT_LE(worst, 1e-6);
}

TEST(Activation, HandValues) {
  EXPECT_EQ(ops::sigmoid(0.0f), 0.5f);
  EXPECT_EQ(std::tanh(0.0f), 0.0f);
  EXPECT_EQ(ops::activate(ops::Activation::relu, -3.2f), 0.0f);
  EXPECT_EQ(ops::activate(ops::Activation::relu, 1.5f), 1.5f);
}

TEST(Activation, NanIsNotMasked) {
  const float nan = std::numeric_limits<float>::quiet_NaN();
  EXPECT_TRUE(std::isnan(ops::activate(ops::Activation::relu, nan)));
  for (std::size_t pos = 0; pos < 4; ++pos) {
    std::vector<float> v{1, 2, 3, 4};
    v[pos] = nan;
    const auto r = ops::max_pool2d(Tensor<float>({1, 2, 2}, v), {2, 2, 2, 2});
    EXPECT_TRUE(std::isnan(r.output[0])) << pos;
    EXPECT_EQ(r.argmax[0], pos);
  }
}

TEST(Activation, OutputRanges) {
  Rng rng(4);
  // Bounded open intervals hold exactly in double over a wide range; float
  // rounds sigmoid to 1 beyond |x| ~ 17, so it is checked on a narrower band.
  for (int i = 0; i < 10000; ++i) {
    const double x = rng.uniform(-30.0, 30.0);
    const double s = ops::sigmoid(x), t = std::tanh(x / 2);
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
    EXPECT_GT(t, -1.0);
    EXPECT_LT(t, 1.0);
    EXPECT_GE(ops::activate(ops::Activation::relu, x), 0.0);
    const float xf = static_cast<float>(x / 2);
    EXPECT_GT(ops::sigmoid(xf), 0.0f);
    EXPECT_LT(ops::sigmoid(xf), 1.0f);
  }
  for (int i = 0; i < 10000; ++i) {
    const float xf = static_cast<float>(rng.uniform(-8.0, 8.0));
    EXPECT_GT(std::tanh(xf), -1.0f);
    EXPECT_LT(std::tanh(xf), 1.0f);
  }
}

namespace {

template <typename T>
ops::RecurrentCellParams<T> cell(std::size_t gates, std::size_t in, std::size_t hid) {
  return {ParamTensor<T>("wih", Tensor<T>({gates * hid, in})), ParamTensor<T>("whh", Tensor<T>({gates * hid, hid})),
          ParamTensor<T>("b", Tensor<T>({gates * hid}))};
}

template <typename T>
void randomize(ops::RecurrentCellParams<T>& p, Rng& rng) {
  for (auto* t : {&p.weight_ih.value, &p.weight_hh.value, &p.bias.value})
    for (auto& v : t->data()) v = static_cast<T>(rng.uniform(-0.5, 0.5));
}

}  // namespace

TEST(Lstm, ZeroParameterCases) {
  auto p = cell<float>(4, 3, 2);
  Tensor<float> x({3}, 0.7f), h({2}), c({2});
  auto [h1, c1] = ops::lstm_step(x, h, c, p);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(h1[k], 0.0f);
    EXPECT_EQ(c1[k], 0.0f);
  }
  c.fill(1.0f);
  auto [h2, c2] = ops::lstm_step(x, h, c, p);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_FLOAT_EQ(c2[k], 0.5f);
    EXPECT_NEAR(h2[k], 0.2311, 1e-4);
  }
  EXPECT_THROW(ops::lstm_step(Tensor<float>({4}), h, c, p), ShapeError);
}

TEST(Lstm, MatchesScalarOracle) {
  Rng rng(31);
  auto p = cell<double>(4, 5, 3);
  randomize(p, rng);
  auto x = random_tensor<double>({2, 5}, rng);
  auto h = random_tensor<double>({2, 3}, rng);
  auto c = random_tensor<double>({2, 3}, rng);
  auto [h1, c1] = ops::lstm_step(x, h, c, p);
  for (std::size_t r = 0; r < 2; ++r) {
    const auto ref = testing_oracles::scalar_lstm(p, x, h, c, r);
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_NEAR(h1.at(r, k), ref.first[k], 1e-6);
      EXPECT_NEAR(c1.at(r, k), ref.second[k], 1e-6);
    }
  }
}

TEST(Gru, ZeroParameterCases) {
  auto p = cell<float>(3, 2, 2);
  Tensor<float> x({2}, 0.3f), h({2}, 1.0f);
  auto h1 = ops::gru_step(x, h, p);
  EXPECT_FLOAT_EQ(h1[0], 0.5f);
  EXPECT_FLOAT_EQ(h1[1], 0.5f);
  auto h0 = ops::gru_step(x, Tensor<float>({2}), p);
  EXPECT_EQ(h0[0], 0.0f);
  EXPECT_EQ(h0[1], 0.0f);
  EXPECT_THROW(ops::gru_step(x, Tensor<float>({3}), p), ShapeError);
}

TEST(Gru, MatchesScalarOracle) {
  Rng rng(32);
  auto p = cell<double>(3, 4, 3);
  randomize(p, rng);
  auto x = random_tensor<double>({2, 4}, rng);
  auto h = random_tensor<double>({2, 3}, rng);
  auto h1 = ops::gru_step(x, h, p);
  for (std::size_t r = 0; r < 2; ++r) {
    const auto ref = testing_oracles::scalar_gru(p, x, h, r);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(h1.at(r, k), ref[k], 1e-6);
  }
}

TEST(Tape, LinearCaseGradientIsOuterProduct) {
  Tape<double> tape;
  ParamTensor<double> w("w", Tensor<double>({3, 3}));
  for (std::size_t i = 0; i < 3; ++i) w.value.at(i, i) = 1.0;
  Tensor<double> xv({1, 3}, std::vector<double>{0.5, -1.0, 2.0});
  auto x = tape.input(xv);
  auto y = ag::dense<double>(tape, x, w, nullptr);
  auto loss = ag::weighted_sum(tape, y, Tensor<double>({1, 3}, 1.0));
  tape.backward(loss);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(w.grad.at(o, i), xv[i]);
}

TEST(Tape, ZeroUpstreamGivesZeroGradients) {
  Rng rng(2);
  Tape<double> tape;
  ParamTensor<double> w("w", random_tensor<double>({4, 3}, rng));
  ParamTensor<double> b("b", random_tensor<double>({4}, rng));
  auto x = tape.input(random_tensor<double>({2, 3}, rng));
  auto y = ag::activation(tape, ag::dense<double>(tape, x, w, &b), ops::Activation::tanh);
  auto loss = ag::weighted_sum(tape, y, Tensor<double>({2, 4}, 0.0));
  tape.backward(loss);
  for (double g : w.grad.data()) EXPECT_EQ(g, 0.0);
  for (double g : b.grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(Tape, StateErrors) {
  Tape<double> empty;
  EXPECT_THROW(empty.backward(Var{0}), StateError);
  Tape<double> tape;
  auto x = tape.input(Tensor<double>({1}, 2.0), true);
  EXPECT_THROW(tape.grad(x), StateError);
  auto y = ag::weighted_sum(tape, x, Tensor<double>({1}, 3.0));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 3.0);
  EXPECT_THROW(tape.backward(y), StateError);
  Tape<double> t2;
  auto v = t2.input(Tensor<double>({2}), true);
  EXPECT_THROW(t2.backward(v), ShapeError);
}

TEST(Tape, SquaredErrorGradientIsClosedForm) {
  Rng rng(8);
  Tape<double> tape;
  auto pv = random_tensor<double>({3, 49}, rng);
  auto tv = random_tensor<double>({3, 49}, rng);
  auto p = tape.input(pv, true);
  auto loss = ag::sum_squared_error(tape, p, tv);
  tape.backward(loss);
  const auto g = tape.grad(p);
  double e = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    e += (pv[i] - tv[i]) * (pv[i] - tv[i]);
    EXPECT_NEAR(g[i], 2 * (pv[i] - tv[i]), 1e-12);
  }
  EXPECT_NEAR(tape.value(loss)[0], e, 1e-12);
}

TEST(Determinism, RepeatedConvIsBitIdentical) {
  Rng rng(17);
  auto x = random_tensor<float>({3, 4, 16, 8}, rng);
  auto w = random_tensor<float>({5, 4, 3, 1}, rng);
  const ops::Conv2dGeometry g{3, 1, 2, 1, 1, 0};
  EXPECT_EQ(ops::conv2d<float>(x, w, {}, g), ops::conv2d<float>(x, w, {}, g));
}
