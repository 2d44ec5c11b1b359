#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "r2e/rng.hpp"

using r2e::Rng;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, SplitStreamsDiffer) {
  Rng root(7);
  Rng a = root.split(0), b = root.split(1);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += a.next_u64() == b.next_u64();
  EXPECT_EQ(same, 0);
  EXPECT_EQ(root.split(3, 4).next_u64(), root.split(3).split(4).next_u64());
}

TEST(Rng, SplitDoesNotAdvanceParent) {
  Rng a(5), b(5);
  (void)a.split(9);
  EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformRangeAndMean) {
  Rng r(1);
  double s = 0;
  for (int i = 0; i < 100000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    s += u;
  }
  EXPECT_NEAR(s / 100000, 0.5, 0.01);
}

TEST(Rng, UniformIntCoversClosedRange) {
  Rng r(2);
  std::vector<int> hits(9, 0);
  for (int i = 0; i < 9000; ++i) {
    const auto v = r.uniform_int(1, 9);
    ASSERT_GE(v, 1);
    ASSERT_LE(v, 9);
    ++hits[static_cast<std::size_t>(v - 1)];
  }
  for (int h : hits) EXPECT_GT(h, 800);
  EXPECT_THROW(r.uniform_int(3, 2), r2e::ContractError);
}

TEST(Rng, NormalMoments) {
  Rng r(3);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, ExponentialMean) {
  Rng r(4);
  double s = 0;
  for (int i = 0; i < 100000; ++i) s += r.exponential(10.0);
  EXPECT_NEAR(s / 100000, 0.1, 0.003);
}

TEST(Rng, CategoricalSkipsZeroWeights) {
  Rng r(5);
  std::vector<double> w{0, 1, 0, 3};
  std::vector<int> hits(4, 0);
  for (int i = 0; i < 40000; ++i) ++hits[r.categorical(w)];
  EXPECT_EQ(hits[0], 0);
  EXPECT_EQ(hits[2], 0);
  EXPECT_NEAR(hits[3] / 40000.0, 0.75, 0.01);
  EXPECT_THROW(r.categorical({0, 0}), r2e::ContractError);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(6);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto orig = v;
  r.shuffle(v);
  EXPECT_NE(v, orig);
  std::sort(v.begin(), v.end());
  EXPECT_EQ(v, orig);
}
