#include "cdbo/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using cdbo::rng::Domain;
using cdbo::rng::Philox4x32;
using cdbo::rng::Stream;

TEST(Philox, KnownAnswerZero) {
  const auto out = Philox4x32::generate({0u, 0u, 0u, 0u}, {0u, 0u});
  EXPECT_EQ(out[0], 0x6627e8d5u);
  EXPECT_EQ(out[1], 0xe169c58du);
  EXPECT_EQ(out[2], 0xbc57ac4cu);
  EXPECT_EQ(out[3], 0x9b00dbd8u);
}

TEST(Philox, KnownAnswerAllOnes) {
  const auto out = Philox4x32::generate({~0u, ~0u, ~0u, ~0u}, {~0u, ~0u});
  EXPECT_EQ(out[0], 0x408f276du);
  EXPECT_EQ(out[1], 0x41c83b0eu);
  EXPECT_EQ(out[2], 0xa20bc7c6u);
  EXPECT_EQ(out[3], 0x6d5451fdu);
}

TEST(Philox, KnownAnswerPiDigits) {
  const auto out = Philox4x32::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(out[0], 0xd16cfe09u);
  EXPECT_EQ(out[1], 0x94fdccebu);
  EXPECT_EQ(out[2], 0x5001e420u);
  EXPECT_EQ(out[3], 0x24126ea1u);
}

TEST(Stream, SameAddressSameSequence) {
  Stream a(42, Domain::smoothing_sample, 7, 3), b(42, Domain::smoothing_sample, 7, 3);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.normal(), b.normal());
}

TEST(Stream, AddressesAreIndependent) {
  std::set<double> first;
  for (std::uint64_t seed : {0ull, 1ull})
    for (auto d : {Domain::smoothing_sample, Domain::output_index, Domain::initialization, Domain::audit})
      for (std::uint64_t a : {0ull, 1ull, 65536ull})
        for (std::uint64_t b : {0ull, 1ull}) first.insert(Stream(seed, d, a, b).uniform());
  EXPECT_EQ(first.size(), 2u * 4u * 3u * 2u);
}

TEST(Stream, UniformMoments) {
  Stream s(3, Domain::test, 0, 0);
  const int n = 200000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sq += u * u;
  }
  const double mean = sum / n, var = sq / n - mean * mean;
  EXPECT_NEAR(mean, 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
  EXPECT_NEAR(var, 1.0 / 12.0, 2e-3);
}

TEST(Stream, NormalMoments) {
  Stream s(11, Domain::test, 1, 2);
  const int n = 200000;
  double sum = 0, sq = 0, q = 0;
  for (int i = 0; i < n; ++i) {
    const double z = s.normal();
    sum += z;
    sq += z * z;
    q += z * z * z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(sq / n, 1.0, 4.0 * std::sqrt(2.0 / n));
  EXPECT_NEAR(q / n, 3.0, 4.0 * std::sqrt(96.0 / n));
}

TEST(Stream, UniformRange) {
  Stream s(5, Domain::initialization, 0, 0);
  for (int i = 0; i < 1000; ++i) {
    const double u = s.uniform(-2.0, 2.0);
    ASSERT_GE(u, -2.0);
    ASSERT_LT(u, 2.0);
  }
}

TEST(SplitMix, DistinctOutputs) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(cdbo::rng::splitmix64(i));
  EXPECT_EQ(seen.size(), 1000u);
}
