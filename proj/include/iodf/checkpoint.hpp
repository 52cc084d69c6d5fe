#pragma once

// Binary checkpoint, little-endian:
//   "IODFCKPT" | version u32 | config (9 x u32) | quant state u8
//   | per level: channels u32, coupling split u32, retained channels u32
//   | conv count u32 | conv records in for_each_conv order
//   | final mu count u32, f32[] | final log_s f32[]
//   | FNV-1a 64 of all preceding bytes
// Conv record: cout u32 | cin u32 | k u32 | flags u8 (1 gated, 2 quantizable, 4 dead)
//   | kept count u32, i32[] | weight f32[] | bias f32[] | gate f32[cout] if gated
//   | act scale f32 | weight scales f32[cout]

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "iodf/flow.hpp"

namespace iodf {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'I', 'O', 'D', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void floats(std::span<const float> v) {
    for (float f : v) put(f);
  }
  std::vector<std::uint8_t>& data() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  void floats(std::span<float> out) {
    for (auto& f : out) {
      f = get<float>();
      if (!std::isfinite(f)) throw FormatError("non-finite parameter value");
    }
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > b_.size() - pos_) throw FormatError("unexpected end of data");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

namespace detail {

inline void write_conv(ByteWriter& w, const ConvLayer& L) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(L.cout()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(L.cin()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(L.k()));
  w.put<std::uint8_t>(static_cast<std::uint8_t>((L.gated() ? 1 : 0) | (L.quantizable ? 2 : 0) | (L.dead ? 4 : 0)));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(L.kept.size()));
  for (int k : L.kept) w.put<std::int32_t>(k);
  w.floats(L.weight.span());
  w.floats(L.bias.span());
  if (L.gated()) w.floats(L.gate.span());
  w.floats(L.act_scale.span());
  w.floats(L.weight_scale.span());
}

// Reads one record into L, whose unpruned shape comes from the model skeleton.
inline void read_conv(ByteReader& r, ConvLayer& L, const ConvSite& site, int conv1_cout) {
  const int full_out = L.cout(), full_in = L.cin(), k0 = L.k();
  const int cout = static_cast<int>(r.get<std::uint32_t>());
  const int cin = static_cast<int>(r.get<std::uint32_t>());
  const int k = static_cast<int>(r.get<std::uint32_t>());
  const std::uint8_t flags = r.get<std::uint8_t>();
  if (flags & ~7u) throw FormatError("checkpoint: unknown conv flags");
  const bool block = site.role == ConvRole::kBlockConv1 || site.role == ConvRole::kBlockConv2;
  const int want_in = site.role == ConvRole::kBlockConv2 ? conv1_cout : full_in;
  if (k != k0 || cin != want_in || cout < 1 || cout > full_out || (!block && cout != full_out))
    throw FormatError("checkpoint: conv shape does not match the configuration");
  const std::uint32_t nk = r.get<std::uint32_t>();
  if (nk > static_cast<std::uint32_t>(full_out) || (nk != 0 && nk != static_cast<std::uint32_t>(cout)) ||
      (nk == 0 && cout != full_out))
    throw FormatError("checkpoint: bad kept-channel list");
  L.kept.resize(nk);
  for (auto& v : L.kept) {
    v = r.get<std::int32_t>();
    if (v < 0 || v >= full_out) throw FormatError("checkpoint: kept index out of range");
  }
  for (std::size_t i = 1; i < L.kept.size(); ++i)
    if (L.kept[i] <= L.kept[i - 1]) throw FormatError("checkpoint: kept indices must increase");
  L.weight = Tensor<float>({cout, cin, k, k});
  L.bias = Tensor<float>({cout});
  r.floats(L.weight.span());
  r.floats(L.bias.span());
  L.gate = Tensor<float>();
  if (flags & 1) {
    if (!block || site.prior) throw FormatError("checkpoint: gate on a non-gateable conv");
    L.gate = Tensor<float>({cout});
    r.floats(L.gate.span());
  }
  L.act_scale = Tensor<float>({1});
  L.weight_scale = Tensor<float>({cout});
  r.floats(L.act_scale.span());
  r.floats(L.weight_scale.span());
  L.quantizable = (flags & 2) != 0;
  L.dead = (flags & 4) != 0;
  if (L.quantizable != (!site.prior && site.role != ConvRole::kFirst))
    throw FormatError("checkpoint: quantizable flag does not match the layer role");
  if (L.dead && !block) throw FormatError("checkpoint: only block convolutions can be dead");
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_model(const FlowModel& m) {
  ByteWriter w;
  w.bytes({reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 8});
  w.put<std::uint32_t>(kCheckpointVersion);
  const FlowConfig& c = m.config;
  for (int v : {c.levels, c.couplings, c.hidden, c.blocks, c.prior_blocks, c.kernel, c.channels, c.height, c.width})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(m.quant));
  for (const auto& lv : m.levels) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(lv.channels));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(lv.couplings.empty() ? 0 : lv.couplings[0].split));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(lv.factor_out ? lv.keep_channels() : lv.channels));
  }
  std::uint32_t count = 0;
  for_each_conv(m, [&](const ConvLayer&, const ConvSite&) { ++count; });
  w.put<std::uint32_t>(count);
  for_each_conv(m, [&](const ConvLayer& L, const ConvSite&) { detail::write_conv(w, L); });
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.final_mu.size()));
  w.floats(m.final_mu.span());
  w.floats(m.final_log_s.span());
  const std::uint64_t h = fnv1a64(w.data());
  w.put<std::uint64_t>(h);
  return std::move(w.data());
}

// Checksum identifying a model in compressed containers.
inline std::uint64_t model_checksum(const FlowModel& m) {
  const auto bytes = serialize_model(m);
  std::uint64_t h;
  std::memcpy(&h, bytes.data() + bytes.size() - 8, 8);
  return h;
}

inline FlowModel deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw FormatError("not a checkpoint (bad magic)");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (fnv1a64(bytes.first(bytes.size() - 8)) != stored) throw FormatError("checkpoint checksum mismatch");
  ByteReader r(bytes.first(bytes.size() - 8));
  r.bytes(8);
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  FlowConfig c;
  int* fields[] = {&c.levels, &c.couplings, &c.hidden, &c.blocks, &c.prior_blocks,
                   &c.kernel, &c.channels,  &c.height, &c.width};
  for (int* f : fields) {
    const std::uint32_t v = r.get<std::uint32_t>();
    if (v > 1u << 16) throw FormatError("checkpoint: config value out of range");
    *f = static_cast<int>(v);
  }
  try {
    c.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  const std::uint8_t q = r.get<std::uint8_t>();
  if (q > 2) throw FormatError("checkpoint: bad quantization state");
  FlowModel m = make_model(c, 0);
  m.quant = static_cast<QuantState>(q);
  for (const auto& lv : m.levels) {
    const std::uint32_t ch = r.get<std::uint32_t>(), split = r.get<std::uint32_t>(), keep = r.get<std::uint32_t>();
    if (ch != static_cast<std::uint32_t>(lv.channels) || split != static_cast<std::uint32_t>(lv.couplings[0].split) ||
        keep != static_cast<std::uint32_t>(lv.factor_out ? lv.keep_channels() : lv.channels))
      throw FormatError("checkpoint: level layout does not match the configuration");
  }
  std::uint32_t expect = 0;
  for_each_conv(m, [&](const ConvLayer&, const ConvSite&) { ++expect; });
  if (r.get<std::uint32_t>() != expect) throw FormatError("checkpoint: conv count mismatch");
  int conv1_cout = 0;
  for_each_conv(m, [&](ConvLayer& L, const ConvSite& site) {
    detail::read_conv(r, L, site, conv1_cout);
    if (site.role == ConvRole::kBlockConv1) conv1_cout = L.cout();
  });
  const std::uint32_t cf = r.get<std::uint32_t>();
  if (cf != m.final_mu.size()) throw FormatError("checkpoint: final prior size mismatch");
  r.floats(m.final_mu.span());
  r.floats(m.final_log_s.span());
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return m;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return data;
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!f) throw Error("write failed: " + path);
}

inline void save_model(const FlowModel& m, const std::string& path) { write_file(path, serialize_model(m)); }
inline FlowModel load_model(const std::string& path) { return deserialize_model(read_file(path)); }

}  // namespace iodf
