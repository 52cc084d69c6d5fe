#include <gtest/gtest.h>

#include <cmath>

#include "iodf/random.hpp"
#include "iodf/rans.hpp"

using namespace iodf;

namespace {

MassTable random_table(Rng& rng) {
  const int lo = -static_cast<int>(rng.below(40)) - 1;
  const int hi = static_cast<int>(rng.below(40)) + 1;
  return mass_table(rng.uniform(-10, 10), rng.uniform(0.2, 15), lo, hi);
}

// Symbol index drawn with probability freq / total.
int sample(Rng& rng, const MassTable& t) { return t.index_of_slot(static_cast<std::uint32_t>(rng.below(t.total))); }

}  // namespace

TEST(MassTable, HandExample) {
  const MassTable t = mass_table(0, 1, -1, 1, 8);
  EXPECT_EQ(t.freq, (std::vector<std::uint32_t>{3, 2, 3}));
  EXPECT_EQ(t.cum, (std::vector<std::uint32_t>{0, 3, 5}));
  const auto p = clipped_logistic_probs(0, 1, -1, 1);
  EXPECT_NEAR(p[0], 0.37754, 1e-5);
  EXPECT_NEAR(p[1], 0.24492, 1e-5);
  EXPECT_NEAR(p[2], 0.37754, 1e-5);
}

TEST(MassTable, InvariantsOnRandomParameters) {
  Rng rng(1);
  for (int i = 0; i < 300; ++i) {
    const MassTable t = random_table(rng);
    std::uint64_t sum = 0;
    for (auto f : t.freq) {
      EXPECT_GE(f, 1u);
      sum += f;
    }
    EXPECT_EQ(sum, kRansM);
    EXPECT_EQ(t.total, kRansM);
  }
  // Far-off mean: every symbol still gets the floor.
  const MassTable far = mass_table(1e6, 0.5, -5, 5);
  for (auto f : far.freq) EXPECT_GE(f, 1u);
}

// Mirrored symbols have equal probabilities; largest-remainder ties may split one unit.
TEST(MassTable, SymmetricIsNearlyPalindromic) {
  for (double s : {0.3, 1.0, 4.0, 30.0}) {
    const MassTable t = mass_table(3.0, s, -7, 13);
    for (int i = 0; i < t.size(); ++i)
      EXPECT_LE(std::abs(static_cast<int>(t.freq[i]) - static_cast<int>(t.freq[t.size() - 1 - i])), 1) << "s=" << s;
  }
}

TEST(MassTable, Errors) {
  EXPECT_THROW(mass_table(0, 1, -5, 5, 8), Error);
  EXPECT_THROW(mass_table(0, -1, -5, 5), Error);
  EXPECT_THROW(mass_table(0, 1, 3, 3), Error);
}

TEST(RansStep, HandExamples) {
  const MassTable t = table_from_freq(0, {3, 1});
  EXPECT_EQ(t.total, 4u);
  EXPECT_EQ(rans_encode_step(7, 3, 1, 4), 31u);
  EXPECT_EQ(rans_encode_step(5, 0, 3, 4), 6u);
  const DecodeStep b = rans_decode_step(31, t);
  EXPECT_EQ(b.symbol, 1);
  EXPECT_EQ(b.prev, 7u);
  const DecodeStep a = rans_decode_step(6, t);
  EXPECT_EQ(a.symbol, 0);
  EXPECT_EQ(a.prev, 5u);
}

TEST(RansStep, SingleSymbolAlphabetIsIdentity) {
  for (std::uint64_t x : {0ull, 1ull, 12345ull, 1ull << 40}) EXPECT_EQ(rans_encode_step(x, 0, kRansM, kRansM), x);
}

TEST(RansStep, ExhaustiveInversionSmallStates) {
  const std::vector<MassTable> tables = {table_from_freq(0, {5, 2, 7, 2}),
                                         table_from_freq(0, {30000, 1, 35000, 535})};
  for (const MassTable& t : tables)
    for (std::uint64_t x = 0; x < (1u << 16); ++x)
      for (int s = 0; s < t.size(); ++s) {
        const std::uint64_t y = rans_encode_step(x, t.cum[s], t.freq[s], t.total);
        const DecodeStep d = rans_decode_step(y, t);
        ASSERT_EQ(d.symbol, s);
        ASSERT_EQ(d.prev, x);
      }
}

TEST(RansStream, EmptyStream) {
  const auto payload = encode_stream({}, {});
  EXPECT_EQ(payload.size(), 8u);
  EXPECT_TRUE(decode_stream(payload, {}).empty());
}

TEST(RansStream, SingleSymbolHandTrace) {
  const MassTable t = table_from_freq(0, {5, 3, kRansM - 8});
  const std::vector<int> sym{1};
  const std::vector<MassTable> tables{t};
  const auto payload = encode_stream(sym, tables);
  // floor(2^31 / 3) * 2^16 + 5 + 2^31 mod 3, no renormalization, little-endian.
  const std::vector<std::uint8_t> expect{0x07, 0x00, 0xaa, 0xaa, 0xaa, 0x2a, 0x00, 0x00};
  EXPECT_EQ(payload, expect);
  EXPECT_EQ(decode_stream(payload, tables), sym);
}

TEST(RansStream, RandomRoundTrips) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = static_cast<int>(rng.below(3000));
    std::vector<MassTable> tables;
    std::vector<int> sym;
    for (int i = 0; i < n; ++i) {
      tables.push_back(random_table(rng));
      // Mostly typical symbols, some from the far tails.
      sym.push_back(rng.uniform() < 0.9 ? sample(rng, tables.back()) : static_cast<int>(rng.below(tables.back().size())));
    }
    const auto payload = encode_stream(sym, tables);
    EXPECT_EQ(decode_stream(payload, tables), sym);
    EXPECT_EQ(encode_stream(sym, tables), payload);
  }
}

TEST(RansStream, NearShannonCost) {
  Rng rng(3);
  const MassTable t = mass_table(0.4, 3.0, -25, 25);
  const int n = 100000;
  std::vector<int> sym(n);
  double bits = 0;
  for (int i = 0; i < n; ++i) {
    sym[i] = sample(rng, t);
    bits -= std::log2(static_cast<double>(t.freq[sym[i]]) / t.total);
  }
  const std::vector<MassTable> tables(n, t);
  const auto payload = encode_stream(sym, tables);
  const double measured = 8.0 * payload.size();
  EXPECT_LE(measured, 1.005 * bits + 64);
  EXPECT_LE((measured - 64) / n, bits / n + 0.01);
  EXPECT_EQ(decode_stream(payload, tables), sym);
}

TEST(RansStream, CorruptPayloadsFailCleanly) {
  Rng rng(4);
  const MassTable t = mass_table(0, 5, -30, 30);
  std::vector<int> sym(500);
  for (auto& s : sym) s = sample(rng, t);
  const std::vector<MassTable> tables(sym.size(), t);
  const auto payload = encode_stream(sym, tables);
  EXPECT_THROW(decode_stream(std::vector<std::uint8_t>(payload.begin(), payload.end() - 1), tables), FormatError);
  EXPECT_THROW(decode_stream(std::vector<std::uint8_t>(7, 0), {}), FormatError);
  auto bad_state = payload;
  std::fill(bad_state.end() - 8, bad_state.end(), 0);
  EXPECT_THROW(decode_stream(bad_state, tables), FormatError);
  // Dropping the last emitted word: decoding may run dry or end in the wrong state.
  auto short_words = payload;
  short_words.erase(short_words.end() - 12, short_words.end() - 8);
  EXPECT_THROW(decode_stream(short_words, tables), FormatError);
  int rejected = 0;
  for (int trial = 0; trial < 300; ++trial) {
    auto p = payload;
    p[rng.below(p.size())] ^= static_cast<std::uint8_t>(1 + rng.below(255));
    try {
      if (decode_stream(p, tables) != sym) ++rejected;
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  EXPECT_GT(rejected, 250);
}

TEST(RansStream, UniformCodeRoundTrip) {
  Rng rng(5);
  for (std::uint32_t n : {1u, 2u, 3u, 1000u, 65535u, 65536u}) {
    RansEncoder enc;
    std::vector<std::uint32_t> v(50);
    for (auto& x : v) {
      x = static_cast<std::uint32_t>(rng.below(n));
      put_uniform(enc, n, x);
    }
    const auto payload = enc.finish();
    RansDecoder dec(payload);
    for (auto x : v) EXPECT_EQ(get_uniform(dec, n), x);
    dec.finish();
  }
}
