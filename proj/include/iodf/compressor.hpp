#pragma once

// Lossless codec: flow latents entropy-coded with rANS under the model's priors.
//
// Container (little-endian):
//   "IODF1" | version u8 | path u8 | model checksum u64 | h u16 | w u16 | c u8
//   | count u32 | payload length u32 | payload
//
// One rANS stream covers every image. Decode order is level-major: the final latents
// of all images, then the factored latents from the deepest level to the shallowest,
// so each factored latent is decoded after the retained half its prior depends on.
// Inside a latent tensor the scan is image, channel, row, column.
//
// Each dimension is coded with a table over a window around its prior mode; the two
// window edges double as escape symbols carrying the folded tail mass, followed by a
// uniform code for the exact value within [-2048, 2047].

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <unordered_map>
#include <vector>

#include "iodf/checkpoint.hpp"
#include "iodf/flow.hpp"
#include "iodf/rans.hpp"

namespace iodf {

inline constexpr int kAlphabetLo = -2048;
inline constexpr int kAlphabetHi = 2047;
inline constexpr char kContainerMagic[5] = {'I', 'O', 'D', 'F', '1'};
inline constexpr std::uint8_t kContainerVersion = 1;

struct Container {
  InferencePath path = InferencePath::kFloat;
  std::uint64_t checksum = 0;
  int height = 0, width = 0, channels = 0;
  std::uint32_t count = 0;
  std::vector<std::uint8_t> payload;
};

inline std::vector<std::uint8_t> serialize_container(const Container& c) {
  if (c.height < 1 || c.height > 65535 || c.width < 1 || c.width > 65535 || c.channels < 1 || c.channels > 255)
    throw Error("container: image shape does not fit the header");
  ByteWriter w;
  w.bytes({reinterpret_cast<const std::uint8_t*>(kContainerMagic), 5});
  w.put<std::uint8_t>(kContainerVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.path));
  w.put<std::uint64_t>(c.checksum);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(c.height));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(c.width));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.channels));
  w.put<std::uint32_t>(c.count);
  if (c.payload.size() > 0xffffffffULL) throw Error("container: payload too large");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.payload.size()));
  w.bytes(c.payload);
  return std::move(w.data());
}

inline Container parse_container(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.bytes(5);
  if (std::memcmp(magic.data(), kContainerMagic, 5) != 0) throw FormatError("not an IODF1 container");
  if (r.get<std::uint8_t>() != kContainerVersion) throw FormatError("unsupported container version");
  Container c;
  const std::uint8_t path = r.get<std::uint8_t>();
  if (path > 2) throw FormatError("container: unknown inference path");
  c.path = static_cast<InferencePath>(path);
  c.checksum = r.get<std::uint64_t>();
  c.height = r.get<std::uint16_t>();
  c.width = r.get<std::uint16_t>();
  c.channels = r.get<std::uint8_t>();
  c.count = r.get<std::uint32_t>();
  const std::uint32_t len = r.get<std::uint32_t>();
  const auto payload = r.bytes(len);
  if (r.remaining() != 0) throw FormatError("container: trailing bytes");
  c.payload.assign(payload.begin(), payload.end());
  return c;
}

// Window half-width: the logistic tail beyond W carries about 2 exp(-W / s) <= 2 / M.
inline int window_half_width(double s) {
  const double w = std::ceil(s * std::log(static_cast<double>(kRansM))) + 2.0;
  return static_cast<int>(std::min(w, static_cast<double>(kAlphabetHi - kAlphabetLo)));
}

inline MassTable latent_table(double mu, double log_s) {
  const double s = std::exp(log_s);
  if (!std::isfinite(mu) || !(s > 0) || !std::isfinite(s)) throw Error("latent prior has invalid parameters");
  const double c = std::clamp(std::round(mu), static_cast<double>(kAlphabetLo), static_cast<double>(kAlphabetHi));
  const int center = static_cast<int>(c);
  const int w = window_half_width(s);
  return mass_table(mu, s, std::max(kAlphabetLo, center - w), std::min(kAlphabetHi, center + w));
}

// Memo of tables by exact parameter bits; conditional priors repeat per channel early in training.
class TableCache {
 public:
  const MassTable& get(double mu, double log_s) {
    const Key k{std::bit_cast<std::uint64_t>(mu), std::bit_cast<std::uint64_t>(log_s)};
    auto it = map_.find(k);
    if (it != map_.end()) return it->second;
    if (map_.size() >= kMaxEntries) map_.clear();
    return map_.emplace(k, latent_table(mu, log_s)).first->second;
  }

 private:
  static constexpr std::size_t kMaxEntries = 1 << 14;
  struct Key {
    std::uint64_t a, b;
    bool operator==(const Key&) const = default;
  };
  struct Hash {
    std::size_t operator()(const Key& k) const { return std::hash<std::uint64_t>()(k.a * 0x9e3779b97f4a7c15ULL ^ k.b); }
  };
  std::unordered_map<Key, MassTable, Hash> map_;
};

inline void put_latent(RansEncoder& enc, int z, const MassTable& t) {
  if (z < kAlphabetLo || z > kAlphabetHi)
    throw Error("latent value " + std::to_string(z) + " outside the coding alphabet [" + std::to_string(kAlphabetLo) +
                ", " + std::to_string(kAlphabetHi) + "]; the alphabet must be widened for this model");
  if (z <= t.lo && t.lo > kAlphabetLo) {
    enc.put(t, 0);
    put_uniform(enc, static_cast<std::uint32_t>(t.lo - kAlphabetLo + 1), static_cast<std::uint32_t>(z - kAlphabetLo));
  } else if (z >= t.hi && t.hi < kAlphabetHi) {
    enc.put(t, t.size() - 1);
    put_uniform(enc, static_cast<std::uint32_t>(kAlphabetHi - t.hi + 1), static_cast<std::uint32_t>(z - t.hi));
  } else {
    enc.put(t, z - t.lo);
  }
}

inline int get_latent(RansDecoder& dec, const MassTable& t) {
  const int i = dec.get(t);
  if (i == 0 && t.lo > kAlphabetLo)
    return kAlphabetLo + static_cast<int>(get_uniform(dec, static_cast<std::uint32_t>(t.lo - kAlphabetLo + 1)));
  if (i == t.size() - 1 && t.hi < kAlphabetHi)
    return t.hi + static_cast<int>(get_uniform(dec, static_cast<std::uint32_t>(kAlphabetHi - t.hi + 1)));
  return t.lo + i;
}

inline void encode_latent_tensor(RansEncoder& enc, TableCache& cache, const Tensor<std::int32_t>& z,
                                 const PriorTensor& p) {
  if (p.mu.shape() != z.shape()) throw Error("prior shape does not match the latent");
  for (std::size_t i = 0; i < z.size(); ++i) put_latent(enc, z[i], cache.get(p.mu[i], p.log_s[i]));
}

inline Tensor<std::int32_t> decode_latent_tensor(RansDecoder& dec, TableCache& cache, const PriorTensor& p) {
  Tensor<std::int32_t> z(p.mu.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = get_latent(dec, cache.get(p.mu[i], p.log_s[i]));
  return z;
}

// Decode order used by the encoder; the alternative exists only to show that an order
// violating the conditioning cannot round-trip.
enum class StreamOrder { kFinalFirst, kFactoredFirst };

inline Container compress(const FlowModel& m, const Tensor<std::uint8_t>& images, InferencePath path,
                          StreamOrder order = StreamOrder::kFinalFirst) {
  check_path(path, m.quant);
  check_input_shape(m, images.shape());
  const FlowLatents z = flow_forward(m, images_to_int(images), path);
  RansEncoder enc;
  TableCache cache;
  const auto put_final = [&] { encode_latent_tensor(enc, cache, z.final, final_prior(m, z.final.shape())); };
  if (order == StreamOrder::kFinalFirst) put_final();
  for (std::size_t f = z.factored.size(); f-- > 0;)
    encode_latent_tensor(enc, cache, z.factored[f], factor_prior(m.levels[f], z.keeps[f]));
  if (order == StreamOrder::kFactoredFirst) put_final();
  Container c;
  c.path = path;
  c.checksum = model_checksum(m);
  c.height = m.config.height;
  c.width = m.config.width;
  c.channels = m.config.channels;
  c.count = static_cast<std::uint32_t>(images.dim(0));
  c.payload = enc.finish();
  return c;
}

inline double coding_bpd(const Container& c) {
  const double dims = static_cast<double>(c.count) * c.height * c.width * c.channels;
  if (!(dims > 0)) throw Error("coding bpd of an empty container");
  return static_cast<double>(c.payload.size()) * 8.0 / dims;
}

inline Tensor<std::uint8_t> decompress(const FlowModel& m, const Container& c) {
  if (c.checksum != model_checksum(m)) throw VerificationError("container was produced by a different model");
  if (c.height != m.config.height || c.width != m.config.width || c.channels != m.config.channels)
    throw FormatError("container image shape does not match the model");
  check_path(c.path, m.quant);
  const int n = static_cast<int>(c.count);
  if (static_cast<std::uint64_t>(c.count) * m.config.dims() > (1ULL << 31)) throw FormatError("container: too many images");
  RansDecoder dec(c.payload);
  TableCache cache;
  const Level& last = m.levels.back();
  Tensor<std::int32_t> h = decode_latent_tensor(dec, cache, final_prior(m, {n, last.channels, last.height, last.width}));
  for (int l = static_cast<int>(m.levels.size()) - 1; l >= 0; --l) {
    const Level& lv = m.levels[static_cast<std::size_t>(l)];
    if (lv.factor_out) {
      const Tensor<std::int32_t> f = decode_latent_tensor(dec, cache, factor_prior(lv, h));
      h = concat_channels(h, f);
    }
    h = unsqueeze(couplings_inverse(lv, std::move(h), c.path, m.quant));
  }
  dec.finish();
  Tensor<std::uint8_t> out(h.shape());
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (h[i] < 0 || h[i] > 255) throw FormatError("decoded pixel out of range (corrupt payload)");
    out[i] = static_cast<std::uint8_t>(h[i]);
  }
  return out;
}

}  // namespace iodf
