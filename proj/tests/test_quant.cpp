#include <gtest/gtest.h>

#include <cmath>

#include "iodf/quant.hpp"
#include "iodf/random.hpp"

using namespace iodf;

namespace {

QuantizerParams<double> signed_params(double s) { return {{s}, Signedness::kSigned}; }

Tensor<double> vec1(std::initializer_list<double> v) { return Tensor<double>({static_cast<int>(v.size())}, std::vector<double>(v)); }

}  // namespace

TEST(Quantize, ZeroIsFixedPoint) {
  for (double s : {0.01, 0.5, 3.0}) {
    const auto q = quantize(vec1({0.0}), signed_params(s));
    EXPECT_EQ(q.values[0], 0);
    EXPECT_EQ(dequantize(q)[0], 0.0);
  }
}

TEST(Quantize, RoundsToNearestCode) {
  const auto q = quantize(vec1({3.2}), signed_params(0.5));
  EXPECT_EQ(q.values[0], 6);
  EXPECT_DOUBLE_EQ(dequantize(q)[0], 3.0);
}

TEST(Quantize, ClipsToSignedRange) {
  const auto q = quantize(vec1({1000.0, -1000.0}), signed_params(1.0));
  EXPECT_EQ(q.values[0], 127);
  EXPECT_EQ(q.values[1], -128);
  EXPECT_DOUBLE_EQ(dequantize(q)[0], 127.0);
}

TEST(Quantize, UnsignedRange) {
  const auto q = quantize(vec1({-3.0, 300.0, 7.6}), QuantizerParams<double>{{1.0}, Signedness::kUnsigned});
  EXPECT_EQ(q.values[0], 0);
  EXPECT_EQ(q.values[1], 255);
  EXPECT_EQ(q.values[2], 8);
}

TEST(Quantize, TiesRoundAwayFromZero) {
  const auto q = quantize(vec1({2.5, -2.5, 0.5, -0.5}), signed_params(1.0));
  EXPECT_EQ(q.values[0], 3);
  EXPECT_EQ(q.values[1], -3);
  EXPECT_EQ(q.values[2], 1);
  EXPECT_EQ(q.values[3], -1);
}

TEST(Quantize, RejectsBadInput) {
  EXPECT_THROW(quantize(vec1({1.0}), signed_params(0.0)), Error);
  EXPECT_THROW(quantize(vec1({1.0}), signed_params(-1.0)), Error);
  EXPECT_THROW(quantize(vec1({NAN}), signed_params(1.0)), Error);
  EXPECT_THROW(quantize(vec1({INFINITY}), signed_params(1.0)), Error);
}

TEST(Quantize, PerChannelScalesFollowAxisZero) {
  Tensor<double> w({2, 3}, std::vector<double>{1, 2, 3, 1, 2, 3});
  const auto q = quantize(w, QuantizerParams<double>{{1.0, 0.5}, Signedness::kSigned});
  EXPECT_EQ(q.values[2], 3);
  EXPECT_EQ(q.values[5], 6);
  const auto d = dequantize(q);
  EXPECT_DOUBLE_EQ(d[5], 3.0);
  EXPECT_THROW(quantize(w, QuantizerParams<double>{{1.0, 0.5, 2.0}, Signedness::kSigned}), Error);
}

TEST(Dequantize, Definition) {
  QuantizedTensor q;
  q.shape = {1};
  q.values = {6};
  q.scale = {0.5};
  EXPECT_DOUBLE_EQ(dequantize(q)[0], 3.0);
  q.shape = {4};
  q.values = {0, 0, 0, 0};
  const auto zeros = dequantize(q);
  for (double v : zeros.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Dequantize, ExactOnIntegralInRangeValues) {
  Rng rng(3);
  for (int t = 0; t < 500; ++t) {
    const double s = std::ldexp(1.0, -static_cast<int>(rng.below(8)));
    const int code = static_cast<int>(rng.below(256)) - 128;
    const auto q = quantize(vec1({code * s}), signed_params(s));
    EXPECT_EQ(dequantize(q)[0], code * s);
  }
}

TEST(QuantizeProperty, IdempotentAndInRange) {
  Rng rng(17);
  for (int t = 0; t < 200; ++t) {
    const double s = rng.uniform(0.01, 2.0);
    const Signedness sign = t % 2 ? Signedness::kSigned : Signedness::kUnsigned;
    Tensor<double> r({64});
    for (auto& v : r.vec()) v = rng.uniform(-400, 400);
    const QuantizerParams<double> p{{s}, sign};
    const auto q1 = quantize(r, p);
    const auto q2 = quantize(dequantize(q1), p);
    EXPECT_EQ(q1.values, q2.values);
    const QuantRange range = quant_range(sign);
    for (auto v : q1.values) {
      EXPECT_GE(v, range.lo);
      EXPECT_LE(v, range.hi);
    }
  }
}

TEST(InitScale, Formula) {
  const std::vector<double> ones(10, 1.0), neg(10, -1.0);
  EXPECT_NEAR(init_scale<double>(ones, 8), 2.0 / std::sqrt(255.0), 1e-12);
  EXPECT_NEAR(init_scale<double>(ones, 8), 0.125245, 1e-6);
  EXPECT_NEAR(init_scale<double>(neg, 8), 0.125245, 1e-6);
  const std::vector<double> v(5, 7.984);
  EXPECT_NEAR(init_scale<double>(v, 8), 1.0, 1e-4);
}

TEST(InitScale, ZeroInputIsFloored) {
  const std::vector<double> z(8, 0.0);
  EXPECT_EQ(init_scale<double>(z, 8), kMinScale);
  EXPECT_GT(init_scale<double>(z, 8), 0.0);
}

TEST(InitScale, EmptyIsError) { EXPECT_THROW(init_scale<double>(std::vector<double>{}, 8), Error); }

TEST(QuantizerBackward, GradFactor) {
  EXPECT_NEAR(lsq_grad_factor(128, 127), 1.0 / std::sqrt(16256.0), 1e-15);
  EXPECT_NEAR(lsq_grad_factor(128, 127), 0.0078431, 1e-7);
}

// The three branches of d(r~)/ds on constructed inputs, compared exactly.
TEST(QuantizerBackward, ThreeBranchClosedForm) {
  const double s = 0.5;
  const auto one = [&](double r, Signedness sign) {
    const QuantizerParams<double> p{{s}, sign};
    return quantizer_backward(vec1({r}), p, vec1({1.0}), 1);
  };
  const double f = lsq_grad_factor(1, 127);
  // inside: -r/s + round(r/s)
  EXPECT_EQ(one(1.3, Signedness::kSigned).grad_scale[0], (-1.3 / s + std::round(1.3 / s)) * f);
  EXPECT_EQ(one(3.0, Signedness::kSigned).grad_scale[0], 0.0);  // integral r/s
  // above Q_P
  EXPECT_EQ(one(100.0, Signedness::kSigned).grad_scale[0], 127.0 * f);
  // below -Q_N
  EXPECT_EQ(one(-100.0, Signedness::kSigned).grad_scale[0], -128.0 * f);
  // unsigned: below 0 gives 0, above gives 255
  const double fu = lsq_grad_factor(1, 255);
  EXPECT_EQ(one(-3.0, Signedness::kUnsigned).grad_scale[0], 0.0);
  EXPECT_EQ(one(500.0, Signedness::kUnsigned).grad_scale[0], 255.0 * fu);
}

TEST(QuantizerBackward, SteMasksClippedElements) {
  const QuantizerParams<double> p{{1.0}, Signedness::kSigned};
  const auto g = quantizer_backward(vec1({3.3, 200.0, -200.0, -7.2}), p, vec1({0.25, 0.5, 0.75, 1.5}), 1);
  EXPECT_EQ(g.grad_r[0], 0.25);
  EXPECT_EQ(g.grad_r[1], 0.0);
  EXPECT_EQ(g.grad_r[2], 0.0);
  EXPECT_EQ(g.grad_r[3], 1.5);
}

// The LSQ scale gradient treats round() as the identity. Away from rounding ties it equals
// the central difference of sum(upstream * fake_quantize(r, s)), whose codes are locally
// constant, minus the straight-through term sum(upstream * r / s) over in-range elements.
TEST(QuantizerBackward, ScaleGradientMatchesFiniteDifferences) {
  Rng rng(5);
  int checked = 0;
  for (int t = 0; t < 100; ++t) {
    const double s = rng.uniform(0.05, 1.0);
    const Signedness sign = t % 2 ? Signedness::kSigned : Signedness::kUnsigned;
    Tensor<double> r({32}), up({32});
    for (std::size_t i = 0; i < r.size(); ++i) {
      double v;
      do {
        v = rng.uniform(-300, 300) * s / 2;
        const double q = v / s;
        const bool near_tie = std::abs(q - std::floor(q) - 0.5) < 1e-2;
        const QuantRange rg = quant_range(sign);
        const bool near_clip = std::abs(q - rg.lo) < 1e-2 || std::abs(q - rg.hi) < 1e-2;
        if (!near_tie && !near_clip) break;
      } while (true);
      r[i] = v;
      up[i] = rng.uniform(-1, 1);
    }
    const auto loss = [&](double sc) {
      const auto fq = fake_quantize(r, QuantizerParams<double>{{sc}, sign});
      double l = 0;
      for (std::size_t i = 0; i < r.size(); ++i) l += up[i] * fq[i];
      return l;
    };
    const double h = 1e-7 * s;
    const double fd = (loss(s + h) - loss(s - h)) / (2 * h);
    const QuantRange rg = quant_range(sign);
    double ste = 0;
    for (std::size_t i = 0; i < r.size(); ++i)
      if (r[i] / s >= rg.lo && r[i] / s <= rg.hi) ste += up[i] * r[i] / s;
    const auto g = quantizer_backward(r, QuantizerParams<double>{{s}, sign}, up, 1);
    const double analytic = g.grad_scale[0] / lsq_grad_factor(1, quant_range(sign).hi);
    EXPECT_NEAR(analytic, fd - ste, 1e-3 * std::max(1.0, std::abs(fd - ste)));
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}
