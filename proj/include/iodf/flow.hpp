#pragma once

// Multi-level integer discrete flow: squeeze, additive couplings, factor-out,
// discretized logistic priors, and the float / fake-quant / integer inference paths.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <numbers>
#include <thread>
#include <optional>
#include <string>
#include <vector>

#include "iodf/conv.hpp"
#include "iodf/logistic.hpp"
#include "iodf/quant.hpp"
#include "iodf/random.hpp"
#include "iodf/tape.hpp"
#include "iodf/tensor.hpp"

namespace iodf {

enum class QuantState : std::uint8_t { kNone = 0, kActivations = 1, kFull = 2 };
enum class InferencePath : std::uint8_t { kFloat = 0, kFake = 1, kInteger = 2 };

inline const char* path_name(InferencePath p) {
  switch (p) {
    case InferencePath::kFloat: return "float";
    case InferencePath::kFake: return "fake";
    case InferencePath::kInteger: return "int";
  }
  return "?";
}

inline InferencePath parse_path(const std::string& s) {
  if (s == "float") return InferencePath::kFloat;
  if (s == "fake") return InferencePath::kFake;
  if (s == "int") return InferencePath::kInteger;
  throw Error("unknown inference path '" + s + "' (expected float, fake or int)");
}

struct FlowConfig {
  int levels = 2;
  int couplings = 4;
  int hidden = 32;
  int blocks = 2;
  int prior_blocks = 2;
  int kernel = 3;
  int channels = 3;
  int height = 16;
  int width = 16;

  void validate() const {
    if (levels < 1 || levels > 6) throw Error("config: levels must be in [1, 6]");
    if (couplings < 1) throw Error("config: couplings must be >= 1");
    if (hidden < 1 || blocks < 0 || prior_blocks < 0) throw Error("config: bad network size");
    if (kernel != 3) throw Error("config: only 3x3 kernels are supported");
    if (channels < 1 || channels > 255) throw Error("config: channels must be in [1, 255]");
    const int f = 1 << levels;
    if (height < f || width < f || height % f || width % f)
      throw Error("config: image size must be divisible by 2^levels");
    if (static_cast<std::int64_t>(hidden) * kernel * kernel * 255 * 128 >= (std::int64_t{1} << 31))
      throw Error("config: hidden width would overflow the 32-bit accumulator");
  }

  // Channels entering the couplings of level l (after its squeeze).
  int level_channels(int l) const { return l == 0 ? 4 * channels : 2 * level_channels(l - 1); }
  int level_height(int l) const { return height >> (l + 1); }
  int level_width(int l) const { return width >> (l + 1); }
  bool factor_out(int l) const { return l + 1 < levels; }
  int dims() const { return channels * height * width; }
};

template <class T>
struct BasicConvLayer {
  Tensor<T> weight;        // [Cout, Cin, k, k]
  Tensor<T> bias;          // [Cout]
  Tensor<T> gate;          // [Cout] when gated, else empty
  Tensor<T> act_scale;     // [1], scale of this layer's input activations
  Tensor<T> weight_scale;  // [Cout]
  std::vector<int> kept;   // surviving output channels in the unpruned index space; empty = all
  bool quantizable = false;
  bool dead = false;

  int cout() const { return weight.dim(0); }
  int cin() const { return weight.dim(1); }
  int k() const { return weight.dim(2); }
  bool gated() const { return !gate.empty(); }
};

template <class T>
struct BasicResidualBlock {
  BasicConvLayer<T> conv1;
  BasicConvLayer<T> conv2;
};

template <class T>
struct BasicNet {
  BasicConvLayer<T> first;
  std::vector<BasicResidualBlock<T>> blocks;
  BasicConvLayer<T> last;
};

using ConvLayer = BasicConvLayer<float>;
using ResidualBlock = BasicResidualBlock<float>;
using Net = BasicNet<float>;

// Even couplings transform the second half conditioned on the first; odd ones swap.
struct CouplingLayer {
  int channels = 0;
  int split = 0;
  bool transform_first = false;
  Net net;

  int cond_begin() const { return transform_first ? split : 0; }
  int cond_end() const { return transform_first ? channels : split; }
  int trans_begin() const { return transform_first ? 0 : split; }
  int trans_end() const { return transform_first ? split : channels; }
};

struct Level {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<CouplingLayer> couplings;
  bool factor_out = false;
  Net prior;  // only when factor_out; predicts (mu, log_s) of the factored half

  int keep_channels() const { return channels / 2; }
};

struct FlowModel {
  FlowConfig config;
  std::vector<Level> levels;
  Tensor<float> final_mu;     // [C_final], mu = 256 * raw
  Tensor<float> final_log_s;  // [C_final], log_s = raw + ln 256
  QuantState quant = QuantState::kNone;
};

inline constexpr double kOutScale = 256.0;
inline const double kLogOutScale = std::log(256.0);

// ---------------------------------------------------------------------------
// Construction

template <class T>
BasicConvLayer<T> make_conv(int cout, int cin, int k, bool quantizable, Rng* rng) {
  BasicConvLayer<T> L;
  L.weight = Tensor<T>({cout, cin, k, k});
  L.bias = Tensor<T>({cout});
  if (rng) {
    const double sd = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    for (auto& w : L.weight.vec()) w = static_cast<T>(sd * rng->normal());
  }
  L.act_scale = Tensor<T>({1}, T(1));
  L.weight_scale = Tensor<T>({cout}, T(1));
  L.quantizable = quantizable;
  return L;
}

inline Net make_net(int cin, int cout, const FlowConfig& cfg, int blocks, bool quantizable, Rng& rng) {
  Net n;
  n.first = make_conv<float>(cfg.hidden, cin, cfg.kernel, false, &rng);
  for (int b = 0; b < blocks; ++b)
    n.blocks.push_back({make_conv<float>(cfg.hidden, cfg.hidden, cfg.kernel, quantizable, &rng),
                        make_conv<float>(cfg.hidden, cfg.hidden, cfg.kernel, quantizable, &rng)});
  n.last = make_conv<float>(cout, cfg.hidden, cfg.kernel, quantizable, nullptr);  // rezero
  return n;
}

inline FlowModel make_model(const FlowConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  FlowModel m;
  m.config = cfg;
  for (int l = 0; l < cfg.levels; ++l) {
    Level lv;
    lv.channels = cfg.level_channels(l);
    lv.height = cfg.level_height(l);
    lv.width = cfg.level_width(l);
    lv.factor_out = cfg.factor_out(l);
    for (int j = 0; j < cfg.couplings; ++j) {
      CouplingLayer c;
      c.channels = lv.channels;
      c.split = lv.channels / 2;
      c.transform_first = j % 2 == 1;
      c.net = make_net(c.cond_end() - c.cond_begin(), c.trans_end() - c.trans_begin(), cfg, cfg.blocks, true, rng);
      lv.couplings.push_back(std::move(c));
    }
    if (lv.factor_out) {
      const int keep = lv.keep_channels();
      lv.prior = make_net(keep, 2 * (lv.channels - keep), cfg, cfg.prior_blocks, false, rng);
      // Uninformative start until data-dependent initialization: s = 32.
      const int nf = lv.channels - keep;
      for (int c = 0; c < nf; ++c) {
        lv.prior.last.bias[c] = 0.5f;
        lv.prior.last.bias[nf + c] = static_cast<float>(std::log(32.0) - kLogOutScale);
      }
    }
    m.levels.push_back(std::move(lv));
  }
  const int cf = m.levels.back().channels;
  m.final_mu = Tensor<float>({cf}, 0.5f);
  m.final_log_s = Tensor<float>({cf}, static_cast<float>(std::log(32.0) - kLogOutScale));
  return m;
}

// Where a conv sits in the model; used by traversal callbacks.
enum class ConvRole : std::uint8_t { kFirst, kBlockConv1, kBlockConv2, kLast };

struct ConvSite {
  int level = 0;
  bool prior = false;
  int coupling = -1;  // -1 for the prior net
  int block = -1;
  ConvRole role = ConvRole::kFirst;
  int height = 0;
  int width = 0;
};

template <class NetT, class F>
void for_each_conv_in_net(NetT& net, ConvSite site, F&& f) {
  site.role = ConvRole::kFirst;
  f(net.first, site);
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    site.block = static_cast<int>(b);
    site.role = ConvRole::kBlockConv1;
    f(net.blocks[b].conv1, site);
    site.role = ConvRole::kBlockConv2;
    f(net.blocks[b].conv2, site);
  }
  site.block = -1;
  site.role = ConvRole::kLast;
  f(net.last, site);
}

// Canonical order: per level, each coupling net, then the prior net.
template <class Model, class F>
void for_each_conv(Model& m, F&& f) {
  for (std::size_t l = 0; l < m.levels.size(); ++l) {
    auto& lv = m.levels[l];
    ConvSite site;
    site.level = static_cast<int>(l);
    site.height = lv.height;
    site.width = lv.width;
    for (std::size_t j = 0; j < lv.couplings.size(); ++j) {
      site.coupling = static_cast<int>(j);
      site.prior = false;
      for_each_conv_in_net(lv.couplings[j].net, site, f);
    }
    if (lv.factor_out) {
      site.coupling = -1;
      site.prior = true;
      for_each_conv_in_net(lv.prior, site, f);
    }
  }
}

// Gates sit on the residual-block convolutions of the coupling networks.
inline bool gateable(const ConvSite& s) {
  return !s.prior && (s.role == ConvRole::kBlockConv1 || s.role == ConvRole::kBlockConv2);
}

inline bool model_pruned(const FlowModel& m) {
  bool pruned = false;
  for_each_conv(m, [&](const ConvLayer& L, const ConvSite&) { pruned = pruned || !L.kept.empty() || L.dead; });
  return pruned;
}

inline bool model_gated(const FlowModel& m) {
  bool gated = false;
  for_each_conv(m, [&](const ConvLayer& L, const ConvSite&) { gated = gated || L.gated(); });
  return gated;
}

// ---------------------------------------------------------------------------
// Differentiable network forward (float and fake-quant paths)

// Called with every quantizable layer and its (unquantized) input; used for calibration.
using ActivationObserver = std::function<void(const ConvLayer&, const Tensor<float>&)>;

struct NetMode {
  bool quant_acts = false;
  bool quant_weights = false;
  const ActivationObserver* observer = nullptr;
};

inline NetMode net_mode(QuantState q) {
  return {q != QuantState::kNone, q == QuantState::kFull};
}

template <class T>
Var conv_var(GradientTape<T>& t, const BasicConvLayer<T>& L, Var x, const NetMode& m) {
  Var w = t.parameter(L.weight);
  if (m.quant_weights && L.quantizable)
    w = ad::fake_quant(t, w, t.parameter(L.weight_scale), Signedness::kSigned, L.cout());
  Var y = ad::conv2d(t, x, w, t.parameter(L.bias));
  if (L.gated()) y = ad::gate_mul(t, y, t.parameter(L.gate));
  return y;
}

// Q(x) for the input of a quantizable layer.
template <class T>
Var quant_input(GradientTape<T>& t, const BasicConvLayer<T>& L, Var x, const NetMode& m) {
  if constexpr (std::is_same_v<T, float>)
    if (m.observer && L.quantizable) (*m.observer)(L, t.value(x));
  if (!m.quant_acts || !L.quantizable) return x;
  return ad::fake_quant(t, x, t.parameter(L.act_scale), Signedness::kUnsigned, t.value(x).dim(1));
}

// y = ReLU(SAdd(Q(x), GConv(Q(ReLU(GConv(Q(x))))))).
template <class T>
Var residual_block(GradientTape<T>& t, const BasicResidualBlock<T>& b, Var x, const NetMode& m) {
  Var xq = quant_input(t, b.conv1, x, m);
  if (b.conv2.dead) return xq;  // xq >= 0, so the ReLU of the shortcut alone is xq
  Var h;
  if (b.conv1.dead) {
    const Tensor<T>& xv = t.value(xq);
    h = t.constant(Tensor<T>({xv.dim(0), b.conv2.cin(), xv.dim(2), xv.dim(3)}));
  } else {
    h = ad::relu(t, conv_var(t, b.conv1, xq, m));
  }
  h = quant_input(t, b.conv2, h, m);
  Var y = conv_var(t, b.conv2, h, m);
  return ad::relu(t, ad::scatter_add(t, xq, y, b.conv2.kept));
}

// Network on latent-valued input; the input is scaled to 1/256 units and the raw
// output is in the same units.
template <class T>
Var net_forward(GradientTape<T>& t, const BasicNet<T>& net, Var cond, const NetMode& m) {
  Var x = ad::scale(t, cond, 1.0 / kOutScale);
  Var h = ad::relu(t, conv_var(t, net.first, x, m));
  for (const auto& b : net.blocks) h = residual_block(t, b, h, m);
  h = quant_input(t, net.last, h, m);
  return conv_var(t, net.last, h, m);
}

inline constexpr int kEvalChunk = 128;

// Upper bound on worker threads for batch-chunked evaluation. Chunks are independent
// and each output element's arithmetic does not depend on the chunking, so results
// are identical for every thread count.
inline int& eval_threads() {
  static int n = 1;
  return n;
}

template <class F>
void parallel_chunks(int n, int chunk, F&& f) {
  std::vector<std::pair<int, int>> tasks;
  for (int i0 = 0; i0 < n; i0 += chunk) tasks.emplace_back(i0, std::min(n, i0 + chunk));
  const int workers = std::min<int>(std::max(1, eval_threads()), static_cast<int>(tasks.size()));
  if (workers <= 1) {
    for (auto [a, b] : tasks) f(a, b);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t t = next++; t < tasks.size(); t = next++) {
        try {
          f(tasks[t].first, tasks[t].second);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

// Runs fn on batch slices of x and stitches the results along the batch axis.
template <class Out, class In, class F>
Tensor<Out> map_batch(const Tensor<In>& x, const Shape& out_item, F&& fn) {
  const int n = x.dim(0);
  Shape s = out_item;
  s.insert(s.begin(), n);
  Tensor<Out> out(s);
  const std::size_t per = shape_size(out_item);
  parallel_chunks(n, kEvalChunk, [&](int i0, int i1) {
    const Tensor<Out> part = fn(i0 == 0 && i1 == n ? x : slice_batch(x, i0, i1));
    if (part.size() != per * static_cast<std::size_t>(i1 - i0)) throw Error("map_batch: unexpected output shape");
    std::copy(part.data(), part.data() + part.size(), out.data() + per * static_cast<std::size_t>(i0));
  });
  return out;
}

// Inference through the same graph without gradient bookkeeping, in batch chunks.
inline Tensor<float> eval_net(const Net& net, const Tensor<float>& cond, const NetMode& m) {
  require_rank4(cond.shape(), "eval_net");
  return map_batch<float>(cond, {net.last.cout(), cond.dim(2), cond.dim(3)}, [&](const Tensor<float>& part) {
    GradientTape<float> tape(false);
    return tape.value(net_forward(tape, net, tape.constant(part), m));
  });
}

// ---------------------------------------------------------------------------
// Integer path

struct IntLayer {
  Tensor<std::int32_t> wcodes;
  std::vector<std::int32_t> bcodes;
  std::vector<double> sw;
};

inline void require_quantized(const ConvLayer& L) {
  if (!L.quantizable) throw Error("integer path: layer is not quantizable");
  if (L.act_scale.size() != 1 || !(L.act_scale[0] > 0))
    throw Error("integer path: activation scale is not calibrated");
  if (L.weight_scale.size() != static_cast<std::size_t>(L.cout()))
    throw Error("integer path: weight scale count mismatch");
}

// Weight codes with per-channel scales and the bias folded for input scale sx.
inline IntLayer int_layer(const ConvLayer& L, double sx) {
  require_quantized(L);
  IntLayer r;
  const QuantizedTensor q = quantize(L.weight, QuantizerParams<float>{L.weight_scale.vec(), Signedness::kSigned});
  r.wcodes = codes_of(q);
  const int cout = L.cout();
  r.sw.resize(static_cast<std::size_t>(cout));
  r.bcodes.resize(static_cast<std::size_t>(cout));
  for (int c = 0; c < cout; ++c) {
    r.sw[c] = static_cast<double>(L.weight_scale.size() > 1 ? L.weight_scale[c] : L.weight_scale[0]);
    r.bcodes[c] = fold_bias(static_cast<double>(L.bias[c]), r.sw[c], sx);
  }
  return r;
}

// Gate multiplies the whole output, bias included.
inline void mask_gated(Tensor<std::int32_t>& acc, const ConvLayer& L) {
  if (!L.gated()) return;
  const int n = acc.dim(0), c = acc.dim(1);
  const std::size_t hw = static_cast<std::size_t>(acc.dim(2)) * acc.dim(3);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      if (!gate_on(static_cast<double>(L.gate[ch])))
        std::fill_n(acc.data() + (static_cast<std::size_t>(i) * c + ch) * hw, hw, 0);
}

inline std::int32_t clip_u8(double v) {
  return static_cast<std::int32_t>(std::clamp(std::round(v), 0.0, 255.0));
}

// Integer residual block. x codes use scale sx (conv1's input scale); output codes use s_next.
inline Tensor<std::int32_t> int_residual_block(const ResidualBlock& b, const Tensor<std::int32_t>& x,
                                               double s_next) {
  const double sx = static_cast<double>(b.conv1.act_scale[0]);
  const double m_short = sx / s_next;
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<std::int32_t> y(x.shape());
  if (b.conv2.dead) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = clip_u8(m_short * x[i] + 0.0);
    return y;
  }
  const double sa = static_cast<double>(b.conv2.act_scale[0]);
  Tensor<std::int32_t> a;
  if (b.conv1.dead) {
    a = Tensor<std::int32_t>({n, b.conv2.cin(), x.dim(2), x.dim(3)});
  } else {
    const IntLayer l1 = int_layer(b.conv1, sx);
    Tensor<std::int32_t> acc1 = int_conv_accumulate(x, Signedness::kUnsigned, l1.wcodes, l1.bcodes);
    mask_gated(acc1, b.conv1);
    a = Tensor<std::int32_t>(acc1.shape());
    const int c1 = acc1.dim(1);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c1; ++ch) {
        const double m1 = l1.sw[ch] * sx / sa;
        const std::size_t o = (static_cast<std::size_t>(i) * c1 + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) a[o + p] = clip_u8(m1 * acc1[o + p]);  // fused ReLU
      }
  }
  const IntLayer l2 = int_layer(b.conv2, sa);
  Tensor<std::int32_t> acc2 = int_conv_accumulate(a, Signedness::kUnsigned, l2.wcodes, l2.bcodes);
  mask_gated(acc2, b.conv2);
  // Scatter-add into the unpruned channel space; channels without a producer add zero.
  const int c2 = acc2.dim(1);
  std::vector<int> src(static_cast<std::size_t>(c), -1);
  for (int j = 0; j < c2; ++j) src[static_cast<std::size_t>(b.conv2.kept.empty() ? j : b.conv2.kept[j])] = j;
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t o = (static_cast<std::size_t>(i) * c + ch) * hw;
      const int j = src[ch];
      if (j < 0) {
        for (std::size_t p = 0; p < hw; ++p) y[o + p] = clip_u8(m_short * x[o + p] + 0.0);
      } else {
        const double m2 = l2.sw[j] * sa / s_next;
        const std::size_t oj = (static_cast<std::size_t>(i) * c2 + j) * hw;
        for (std::size_t p = 0; p < hw; ++p) y[o + p] = clip_u8(m_short * x[o + p] + m2 * acc2[oj + p]);
      }
    }
  return y;
}

// Integer-path network output in 1/256 units: t = s_W * s_x * acc, in double.
inline Tensor<double> int_net_forward(const Net& net, const Tensor<float>& cond) {
  require_rank4(cond.shape(), "int_net_forward");
  Tensor<float> x(cond.shape());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = cond[i] * static_cast<float>(1.0 / kOutScale);
  Tensor<float> h = conv2d(x, net.first.weight, net.first.bias);
  const auto input_scale = [&](std::size_t b) {
    return static_cast<double>(b < net.blocks.size() ? net.blocks[b].conv1.act_scale[0] : net.last.act_scale[0]);
  };
  const ConvLayer& entry = net.blocks.empty() ? net.last : net.blocks[0].conv1;
  require_quantized(entry);
  const float s0 = entry.act_scale[0];
  Tensor<std::int32_t> codes(h.shape());
  for (std::size_t i = 0; i < h.size(); ++i)
    codes[i] = quantize_value(std::max(h[i], 0.0f), s0, quant_range(Signedness::kUnsigned));
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    require_quantized(net.blocks[b].conv1);
    require_quantized(net.blocks[b].conv2);
    codes = int_residual_block(net.blocks[b], codes, input_scale(b + 1));
  }
  const double sx = static_cast<double>(net.last.act_scale[0]);
  const IntLayer ll = int_layer(net.last, sx);
  const Tensor<std::int32_t> acc = int_conv_accumulate(codes, Signedness::kUnsigned, ll.wcodes, ll.bcodes);
  Tensor<double> out(acc.shape());
  const int n = acc.dim(0), c = acc.dim(1);
  const std::size_t hw = static_cast<std::size_t>(acc.dim(2)) * acc.dim(3);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double m = ll.sw[ch] * sx;
      const std::size_t o = (static_cast<std::size_t>(i) * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) out[o + p] = m * acc[o + p];
    }
  return out;
}

// ---------------------------------------------------------------------------
// Couplings and levels on integer latents

inline Tensor<float> to_float(const Tensor<std::int32_t>& x) { return x.cast<float>(); }

inline void check_path(InferencePath path, QuantState q) {
  if (path == InferencePath::kFake && q == QuantState::kNone)
    throw Error("fake-quant path needs a model with calibrated quantizers (run quantize)");
  if (path == InferencePath::kInteger && q != QuantState::kFull)
    throw Error("integer path needs a model with weight and activation quantizers (run quantize)");
}

// round(256 * t(cond)) for one coupling.
inline Tensor<std::int32_t> coupling_shift(const CouplingLayer& c, const Tensor<std::int32_t>& cond,
                                           InferencePath path, QuantState q) {
  check_path(path, q);
  const Tensor<float> xf = to_float(cond);
  Tensor<std::int32_t> shift;
  if (path == InferencePath::kInteger) {
    const Tensor<double> t = map_batch<double>(xf, {c.trans_end() - c.trans_begin(), cond.dim(2), cond.dim(3)},
                                               [&](const Tensor<float>& part) { return int_net_forward(c.net, part); });
    shift = Tensor<std::int32_t>(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double v = std::round(kOutScale * t[i]);
      if (!(std::abs(v) < 1e8)) throw Error("coupling translation out of range");
      shift[i] = static_cast<std::int32_t>(v);
    }
  } else {
    const NetMode mode = path == InferencePath::kFloat ? NetMode{} : net_mode(q);
    const Tensor<float> t = eval_net(c.net, xf, mode);
    shift = Tensor<std::int32_t>(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float v = round_half_away(static_cast<float>(kOutScale) * t[i]);
      if (!(std::abs(v) < 1e8f)) throw Error("coupling translation out of range");
      shift[i] = static_cast<std::int32_t>(v);
    }
  }
  return shift;
}

// z_b = x_b + sign * round(t(x_a)); sign = -1 inverts.
inline Tensor<std::int32_t> coupling_apply(const CouplingLayer& c, Tensor<std::int32_t> x, InferencePath path,
                                           QuantState q, int sign) {
  require_rank4(x.shape(), "coupling");
  if (x.dim(1) != c.channels) throw Error("coupling: channel count mismatch");
  const Tensor<std::int32_t> shift = coupling_shift(c, slice_channels(x, c.cond_begin(), c.cond_end()), path, q);
  const int n = x.dim(0), ch = x.dim(1), tw = c.trans_end() - c.trans_begin();
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  for (int i = 0; i < n; ++i) {
    std::int32_t* dst = x.data() + (static_cast<std::size_t>(i) * ch + c.trans_begin()) * hw;
    const std::int32_t* s = shift.data() + static_cast<std::size_t>(i) * tw * hw;
    for (std::size_t p = 0; p < tw * hw; ++p) dst[p] += sign * s[p];
  }
  return x;
}

inline Tensor<std::int32_t> couplings_forward(const Level& lv, Tensor<std::int32_t> x, InferencePath path,
                                              QuantState q) {
  for (const auto& c : lv.couplings) x = coupling_apply(c, std::move(x), path, q, +1);
  return x;
}

inline Tensor<std::int32_t> couplings_inverse(const Level& lv, Tensor<std::int32_t> x, InferencePath path,
                                              QuantState q) {
  for (auto it = lv.couplings.rbegin(); it != lv.couplings.rend(); ++it)
    x = coupling_apply(*it, std::move(x), path, q, -1);
  return x;
}

// Per-dimension logistic parameters in latent units.
struct PriorTensor {
  Tensor<double> mu;
  Tensor<double> log_s;
};

// Prior of the factored half of level l given the retained half. Always float.
inline PriorTensor factor_prior(const Level& lv, const Tensor<std::int32_t>& keep) {
  if (!lv.factor_out) throw Error("factor_prior: level has no factor-out");
  const Tensor<float> raw = eval_net(lv.prior, to_float(keep), NetMode{});
  const int nf = lv.channels - lv.keep_channels();
  const Tensor<float> mu = slice_channels(raw, 0, nf);
  const Tensor<float> ls = slice_channels(raw, nf, 2 * nf);
  PriorTensor p{Tensor<double>(mu.shape()), Tensor<double>(ls.shape())};
  for (std::size_t i = 0; i < mu.size(); ++i) {
    p.mu[i] = kOutScale * static_cast<double>(mu[i]);
    p.log_s[i] = static_cast<double>(ls[i]) + kLogOutScale;
  }
  return p;
}

inline PriorTensor final_prior(const FlowModel& m, const Shape& shape) {
  require_rank4(shape, "final_prior");
  if (static_cast<std::size_t>(shape[1]) != m.final_mu.size()) throw Error("final_prior: channel mismatch");
  PriorTensor p{Tensor<double>(shape), Tensor<double>(shape)};
  const std::size_t hw = static_cast<std::size_t>(shape[2]) * shape[3];
  for (int i = 0; i < shape[0]; ++i)
    for (int c = 0; c < shape[1]; ++c)
      for (std::size_t q = 0; q < hw; ++q) {
        const std::size_t o = (static_cast<std::size_t>(i) * shape[1] + c) * hw + q;
        p.mu[o] = kOutScale * static_cast<double>(m.final_mu[c]);
        p.log_s[o] = static_cast<double>(m.final_log_s[c]) + kLogOutScale;
      }
  return p;
}

struct FlowLatents {
  std::vector<Tensor<std::int32_t>> factored;  // one per factor-out level, shallowest first
  Tensor<std::int32_t> final;
  std::vector<Tensor<std::int32_t>> keeps;     // retained half at each factor-out, conditions its prior
};

inline Tensor<std::int32_t> images_to_int(const Tensor<std::uint8_t>& images) { return images.cast<std::int32_t>(); }

inline void check_input_shape(const FlowModel& m, const Shape& s) {
  require_rank4(s, "flow");
  const FlowConfig& c = m.config;
  if (s[1] != c.channels || s[2] != c.height || s[3] != c.width)
    throw Error("flow: input " + shape_string(s) + " does not match the model's " + std::to_string(c.channels) + "x" +
                std::to_string(c.height) + "x" + std::to_string(c.width));
}

inline FlowLatents flow_forward(const FlowModel& m, const Tensor<std::int32_t>& x, InferencePath path) {
  check_input_shape(m, x.shape());
  FlowLatents out;
  Tensor<std::int32_t> h = x;
  for (const auto& lv : m.levels) {
    h = couplings_forward(lv, squeeze(h), path, m.quant);
    if (lv.factor_out) {
      out.factored.push_back(slice_channels(h, lv.keep_channels(), lv.channels));
      h = slice_channels(h, 0, lv.keep_channels());
      out.keeps.push_back(h);
    }
  }
  out.final = std::move(h);
  return out;
}

inline Tensor<std::int32_t> flow_inverse(const FlowModel& m, const FlowLatents& z, InferencePath path) {
  std::size_t nf = 0;
  for (const auto& lv : m.levels) nf += lv.factor_out ? 1 : 0;
  if (z.factored.size() != nf) throw Error("flow_inverse: wrong number of factored latents");
  Tensor<std::int32_t> h = z.final;
  const Level& last = m.levels.back();
  require_rank4(h.shape(), "flow_inverse");
  if (h.dim(1) != last.channels || h.dim(2) != last.height || h.dim(3) != last.width)
    throw Error("flow_inverse: final latent shape " + shape_string(h.shape()) + " does not match the model");
  for (int l = static_cast<int>(m.levels.size()) - 1; l >= 0; --l) {
    const Level& lv = m.levels[static_cast<std::size_t>(l)];
    if (lv.factor_out) {
      const auto& f = z.factored[static_cast<std::size_t>(l)];
      require_rank4(f.shape(), "flow_inverse");
      if (f.dim(0) != h.dim(0) || f.dim(1) != lv.channels - lv.keep_channels() || f.dim(2) != lv.height ||
          f.dim(3) != lv.width)
        throw Error("flow_inverse: factored latent shape mismatch at level " + std::to_string(l));
      h = concat_channels(h, f);
    }
    h = unsqueeze(couplings_inverse(lv, std::move(h), path, m.quant));
  }
  return h;
}

// Adds sum_dims log2 P(z) per image into `bits_per_image` (as negative log2 mass).
inline void add_latent_bits(const Tensor<std::int32_t>& z, const PriorTensor& p, std::vector<double>& bits) {
  const int n = z.dim(0);
  const std::size_t per = n ? z.size() / n : 0;
  for (int i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t o = i * per + k;
      s -= logistic_log2_mass(static_cast<double>(z[o]), p.mu[o], p.log_s[o]);
    }
    bits[static_cast<std::size_t>(i)] += s;
  }
}

// Analytic code length -log2 p(x) per image.
inline std::vector<double> analytic_bits(const FlowModel& m, const Tensor<std::int32_t>& x, InferencePath path) {
  const FlowLatents z = flow_forward(m, x, path);
  std::vector<double> bits(static_cast<std::size_t>(x.dim(0)), 0.0);
  add_latent_bits(z.final, final_prior(m, z.final.shape()), bits);
  for (std::size_t f = 0; f < z.factored.size(); ++f) add_latent_bits(z.factored[f], factor_prior(m.levels[f], z.keeps[f]), bits);
  return bits;
}

inline double mean_bpd(const std::vector<double>& bits, int dims) {
  if (bits.empty()) throw Error("bpd of an empty batch");
  double s = 0;
  for (double b : bits) s += b;
  return s / (static_cast<double>(bits.size()) * dims);
}

// ---------------------------------------------------------------------------
// FLOPs (one multiply-accumulate = 2 FLOPs)

inline int alive_outputs(const ConvLayer& L) {
  if (L.dead) return 0;
  if (!L.gated()) return L.cout();
  int n = 0;
  for (std::size_t i = 0; i < L.gate.size(); ++i) n += gate_on(static_cast<double>(L.gate[i])) ? 1 : 0;
  return n;
}

inline std::int64_t conv_flops(int cout, int cin, int k, int h, int w) {
  return 2LL * cout * cin * k * k * h * w;
}

inline std::int64_t net_flops(const Net& net, int h, int w) {
  std::int64_t f = conv_flops(alive_outputs(net.first), net.first.cin(), net.first.k(), h, w);
  for (const auto& b : net.blocks) {
    const int a1 = alive_outputs(b.conv1);
    f += conv_flops(a1, b.conv1.cin(), b.conv1.k(), h, w);
    f += conv_flops(alive_outputs(b.conv2), a1, b.conv2.k(), h, w);
  }
  f += conv_flops(alive_outputs(net.last), net.last.cin(), net.last.k(), h, w);
  return f;
}

// Per-image FLOPs of every convolution, coupling and prior networks alike.
inline std::int64_t calculate_flops(const FlowModel& m) {
  std::int64_t f = 0;
  for (const auto& lv : m.levels) {
    for (const auto& c : lv.couplings) f += net_flops(c.net, lv.height, lv.width);
    if (lv.factor_out) f += net_flops(lv.prior, lv.height, lv.width);
  }
  return f;
}

}  // namespace iodf
