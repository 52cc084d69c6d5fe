#pragma once

// Range ANS with a 64-bit state and 32-bit renormalization words.
//
// State lives in [L, 2^63) with L = 2^31, total mass M = 2^16. The encoder consumes
// symbols in reverse of the decode order and ends by flushing the 64-bit state, so
// the payload is: 32-bit words in emission order, then the final state.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "iodf/logistic.hpp"
#include "iodf/tensor.hpp"

namespace iodf {

inline constexpr int kRansScaleBits = 16;
inline constexpr std::uint32_t kRansM = 1u << kRansScaleBits;
inline constexpr std::uint64_t kRansL = 1ULL << 31;

struct MassTable {
  int lo = 0;
  int hi = -1;
  std::vector<std::uint32_t> freq;
  std::vector<std::uint32_t> cum;  // cum[i] = sum of freq[j] for j < i
  std::uint32_t total = kRansM;

  int size() const { return static_cast<int>(freq.size()); }

  // Index i with cum[i] <= slot < cum[i] + freq[i].
  int index_of_slot(std::uint32_t slot) const {
    auto it = std::upper_bound(cum.begin(), cum.end(), slot);
    return static_cast<int>(it - cum.begin()) - 1;
  }
};

// Integer frequencies summing to M: floor, at least 1 each, leftover mass by largest
// remainder (ties to the lower index), any excess taken from the largest frequency.
inline std::vector<std::uint32_t> quantize_masses(std::span<const double> p, std::uint32_t M) {
  const std::size_t n = p.size();
  if (n == 0) throw Error("mass table: empty alphabet");
  if (M < n) throw Error("mass table: total mass smaller than the alphabet");
  double total = 0;
  for (double v : p) {
    if (!(v >= 0) || !std::isfinite(v)) throw Error("mass table: invalid probability");
    total += v;
  }
  if (!(total > 0)) throw Error("mass table: probabilities sum to zero");
  std::vector<std::uint32_t> f(n);
  std::vector<double> rem(n);
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = p[i] / total * M;
    const double fl = std::floor(t);
    f[i] = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(fl));
    rem[i] = f[i] > fl ? -1.0 : t - fl;  // floored-up entries get no remainder share
    sum += f[i];
  }
  if (sum < M) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    std::uint64_t left = M - sum;
    for (std::size_t k = 0; left > 0; k = (k + 1) % n, --left) ++f[order[k]];
  }
  while (sum > M) {
    std::size_t big = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (f[i] > f[big]) big = i;
    if (f[big] <= 1) throw Error("mass table: cannot satisfy the frequency floor");
    --f[big];
    --sum;
  }
  return f;
}

inline MassTable table_from_freq(int lo, std::vector<std::uint32_t> freq) {
  MassTable t;
  t.lo = lo;
  t.hi = lo + static_cast<int>(freq.size()) - 1;
  t.freq = std::move(freq);
  t.cum.resize(t.freq.size());
  std::uint32_t c = 0;
  for (std::size_t i = 0; i < t.freq.size(); ++i) {
    t.cum[i] = c;
    c += t.freq[i];
  }
  t.total = c;
  return t;
}

// Symbol probabilities of a discretized logistic on [lo, hi] with both tails folded
// into the end symbols.
inline std::vector<double> clipped_logistic_probs(double mu, double s, int lo, int hi) {
  if (!(s > 0) || !std::isfinite(mu)) throw Error("mass table: bad logistic parameters");
  if (lo > hi) throw Error("mass table: empty range");
  const double log_s = std::log(s);
  std::vector<double> p(static_cast<std::size_t>(hi - lo + 1));
  for (int z = lo; z <= hi; ++z) {
    double v;
    if (z == lo && z == hi) v = 1.0;
    else if (z == lo) v = sigmoid((lo + 0.5 - mu) / s);
    else if (z == hi) v = sigmoid(-(hi - 0.5 - mu) / s);
    else v = std::exp(logistic_log_mass(z, mu, log_s).value);
    p[static_cast<std::size_t>(z - lo)] = v;
  }
  return p;
}

inline MassTable mass_table(double mu, double s, int lo, int hi, std::uint32_t M = kRansM) {
  if (lo >= hi) throw Error("mass table: need lo < hi");
  if (static_cast<std::uint64_t>(hi - lo) + 1 > M) throw Error("mass table: M smaller than the alphabet");
  const auto p = clipped_logistic_probs(mu, s, lo, hi);
  return table_from_freq(lo, quantize_masses(p, M));
}

// Single encode step without renormalization: floor(x / F) * M + C + x mod F.
inline std::uint64_t rans_encode_step(std::uint64_t x, std::uint32_t start, std::uint32_t freq, std::uint32_t M) {
  return (x / freq) * M + start + (x % freq);
}

struct DecodeStep {
  int symbol;  // table index
  std::uint64_t prev;
};

inline DecodeStep rans_decode_step(std::uint64_t x, const MassTable& t) {
  const std::uint32_t slot = static_cast<std::uint32_t>(x % t.total);
  const int i = t.index_of_slot(slot);
  return {i, (x / t.total) * t.freq[static_cast<std::size_t>(i)] + slot - t.cum[static_cast<std::size_t>(i)]};
}

// Collects (start, freq) pairs in decode order and encodes them in reverse on finish.
class RansEncoder {
 public:
  void put(std::uint32_t start, std::uint32_t freq) {
    if (freq == 0 || static_cast<std::uint64_t>(start) + freq > kRansM) throw Error("rANS: invalid symbol interval");
    syms_.push_back({start, freq});
  }
  void put(const MassTable& t, int index) {
    if (t.total != kRansM) throw Error("rANS: table total must be 2^16");
    put(t.cum.at(static_cast<std::size_t>(index)), t.freq.at(static_cast<std::size_t>(index)));
  }
  std::size_t count() const { return syms_.size(); }

  std::vector<std::uint8_t> finish() {
    std::uint64_t x = kRansL;
    std::vector<std::uint32_t> words;
    for (auto it = syms_.rbegin(); it != syms_.rend(); ++it) {
      const std::uint64_t x_max = ((kRansL >> kRansScaleBits) << 32) * it->freq;
      while (x >= x_max) {
        words.push_back(static_cast<std::uint32_t>(x));
        x >>= 32;
      }
      x = rans_encode_step(x, it->start, it->freq, kRansM);
    }
    std::vector<std::uint8_t> out;
    out.reserve(words.size() * 4 + 8);
    for (std::uint32_t w : words)
      for (int b = 0; b < 32; b += 8) out.push_back(static_cast<std::uint8_t>(w >> b));
    for (int b = 0; b < 64; b += 8) out.push_back(static_cast<std::uint8_t>(x >> b));
    syms_.clear();
    return out;
  }

 private:
  struct Sym {
    std::uint32_t start, freq;
  };
  std::vector<Sym> syms_;
};

class RansDecoder {
  std::uint64_t load_le(std::size_t at, int bytes) const {
    std::uint64_t v = 0;
    for (int b = bytes - 1; b >= 0; --b) v = (v << 8) | p_[at + static_cast<std::size_t>(b)];
    return v;
  }

 public:
  explicit RansDecoder(std::span<const std::uint8_t> payload) : p_(payload) {
    if (p_.size() < 8 || (p_.size() - 8) % 4 != 0) throw FormatError("rANS: truncated payload");
    words_ = (p_.size() - 8) / 4;
    x_ = load_le(words_ * 4, 8);
    if (x_ < kRansL || x_ >> 63) throw FormatError("rANS: corrupt final state");
  }

  std::uint32_t peek() const { return static_cast<std::uint32_t>(x_ & (kRansM - 1)); }

  void advance(std::uint32_t start, std::uint32_t freq) {
    x_ = freq * (x_ >> kRansScaleBits) + (x_ & (kRansM - 1)) - start;
    if (x_ < kRansL) {
      if (words_ == 0) throw FormatError("rANS: payload exhausted");
      --words_;
      x_ = (x_ << 32) | load_le(words_ * 4, 4);
      if (x_ < kRansL) throw FormatError("rANS: state underflow");
    }
  }

  int get(const MassTable& t) {
    const int i = t.index_of_slot(peek());
    advance(t.cum[static_cast<std::size_t>(i)], t.freq[static_cast<std::size_t>(i)]);
    return i;
  }

  // The stream must end exactly at the encoder's initial state with no words left.
  void finish() const {
    if (words_ != 0 || x_ != kRansL) throw FormatError("rANS: stream did not end cleanly");
  }

 private:
  std::span<const std::uint8_t> p_;
  std::size_t words_ = 0;
  std::uint64_t x_ = 0;
};

// Uniform code over n values: F_i = floor(M / n) + (i < M mod n).
struct UniformCode {
  std::uint32_t n;
  std::uint32_t q() const { return kRansM / n; }
  std::uint32_t r() const { return kRansM % n; }
  std::uint32_t start(std::uint32_t i) const { return i * q() + std::min(i, r()); }
  std::uint32_t freq(std::uint32_t i) const { return q() + (i < r() ? 1 : 0); }
  std::uint32_t index_of_slot(std::uint32_t slot) const {
    const std::uint32_t big = r() * (q() + 1);
    return slot < big ? slot / (q() + 1) : r() + (slot - big) / q();
  }
};

inline void put_uniform(RansEncoder& enc, std::uint32_t n, std::uint32_t i) {
  if (n == 0 || n > kRansM || i >= n) throw Error("rANS: bad uniform symbol");
  const UniformCode u{n};
  enc.put(u.start(i), u.freq(i));
}

inline std::uint32_t get_uniform(RansDecoder& dec, std::uint32_t n) {
  if (n == 0 || n > kRansM) throw Error("rANS: bad uniform alphabet");
  const UniformCode u{n};
  const std::uint32_t i = u.index_of_slot(dec.peek());
  dec.advance(u.start(i), u.freq(i));
  return i;
}

// Symbols are table indices.
inline std::vector<std::uint8_t> encode_stream(std::span<const int> symbols, std::span<const MassTable> tables) {
  if (symbols.size() != tables.size()) throw Error("encode_stream: one table per symbol required");
  RansEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) enc.put(tables[i], symbols[i]);
  return enc.finish();
}

inline std::vector<int> decode_stream(std::span<const std::uint8_t> payload, std::span<const MassTable> tables) {
  RansDecoder dec(payload);
  std::vector<int> out;
  out.reserve(tables.size());
  for (const auto& t : tables) out.push_back(dec.get(t));
  dec.finish();
  return out;
}

}  // namespace iodf
