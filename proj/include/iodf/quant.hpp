#pragma once

// Hybrid integer/scale tensors and the learned-step-size quantizer.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "iodf/tensor.hpp"

namespace iodf {

enum class Signedness : std::uint8_t { kSigned = 0, kUnsigned = 1 };

struct QuantRange {
  int lo;
  int hi;
};

constexpr QuantRange quant_range(Signedness s) {
  return s == Signedness::kSigned ? QuantRange{-128, 127} : QuantRange{0, 255};
}

// Half-away-from-zero, the single rounding mode used across the codebase.
template <class T>
inline T round_half_away(T v) {
  return std::round(v);
}

template <class T>
struct QuantizerParams {
  std::vector<T> scale;  // one entry: per-tensor; otherwise one per slice of axis 0
  Signedness signedness = Signedness::kUnsigned;

  int q_n() const { return -quant_range(signedness).lo; }
  int q_p() const { return quant_range(signedness).hi; }
  bool per_channel() const { return scale.size() > 1; }
};

struct QuantizedTensor {
  Shape shape;
  std::vector<std::int16_t> values;
  std::vector<double> scale;
  Signedness signedness = Signedness::kUnsigned;

  std::size_t slice_size() const { return scale.size() > 1 ? values.size() / scale.size() : values.size(); }
  double scale_of(std::size_t i) const { return scale.size() > 1 ? scale[i / slice_size()] : scale[0]; }
};

namespace detail {

template <class T>
void check_params(const QuantizerParams<T>& p, const Shape& shape) {
  if (p.scale.empty()) throw Error("quantizer has no scale");
  for (T s : p.scale)
    if (!(s > T(0)) || !std::isfinite(static_cast<double>(s))) throw Error("quantizer scale must be positive");
  if (p.scale.size() > 1 && (shape.empty() || static_cast<std::size_t>(shape[0]) != p.scale.size()))
    throw Error("per-channel scale count does not match axis 0 of " + shape_string(shape));
}

}  // namespace detail

// Integer code of a single value: round(clip(r / s, lo, hi)).
template <class T>
inline int quantize_value(T r, T scale, QuantRange range) {
  T v = r / scale;
  v = std::min<T>(std::max<T>(v, T(range.lo)), T(range.hi));
  return static_cast<int>(round_half_away(v));
}

// Fake quantization of a single value: s * round(clip(r / s, lo, hi)).
template <class T>
inline T fake_quantize_value(T r, T scale, QuantRange range) {
  return scale * static_cast<T>(quantize_value(r, scale, range));
}

template <class T>
QuantizedTensor quantize(const Tensor<T>& r, const QuantizerParams<T>& p) {
  detail::check_params(p, r.shape());
  const QuantRange range = quant_range(p.signedness);
  QuantizedTensor q;
  q.shape = r.shape();
  q.signedness = p.signedness;
  q.scale.assign(p.scale.begin(), p.scale.end());
  q.values.resize(r.size());
  const std::size_t slice = p.per_channel() ? r.size() / p.scale.size() : r.size();
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!std::isfinite(static_cast<double>(r[i]))) throw Error("quantize: non-finite input");
    const T s = p.scale[p.per_channel() ? i / slice : 0];
    q.values[i] = static_cast<std::int16_t>(quantize_value(r[i], s, range));
  }
  return q;
}

// Exact in double: an 8-bit code times a float scale fits the 53-bit mantissa.
template <class T = double>
Tensor<T> dequantize(const QuantizedTensor& q) {
  Tensor<T> out(q.shape);
  for (std::size_t i = 0; i < q.values.size(); ++i)
    out[i] = static_cast<T>(q.scale_of(i) * static_cast<double>(q.values[i]));
  return out;
}

template <class T>
Tensor<T> fake_quantize(const Tensor<T>& r, const QuantizerParams<T>& p) {
  detail::check_params(p, r.shape());
  const QuantRange range = quant_range(p.signedness);
  Tensor<T> out(r.shape());
  const std::size_t slice = p.per_channel() ? r.size() / p.scale.size() : r.size();
  for (std::size_t i = 0; i < r.size(); ++i)
    out[i] = fake_quantize_value(r[i], p.scale[p.per_channel() ? i / slice : 0], range);
  return out;
}

inline constexpr double kMinScale = 1e-6;

// Data-dependent scale initialization: 2 * mean|r| / sqrt(2^bits - 1), floored at kMinScale.
template <class T>
T init_scale(std::span<const T> r, int bit_width) {
  if (r.empty()) throw Error("init_scale: empty tensor");
  if (bit_width < 1 || bit_width > 31) throw Error("init_scale: bit width out of range");
  double sum = 0;
  for (T v : r) sum += std::abs(static_cast<double>(v));
  const double s = 2.0 * (sum / static_cast<double>(r.size())) / std::sqrt(std::ldexp(1.0, bit_width) - 1.0);
  return static_cast<T>(std::max(s, kMinScale));
}

// Gradient re-scaling factor for the scale parameter.
inline double lsq_grad_factor(int channels, int q_p) {
  return 1.0 / std::sqrt(static_cast<double>(channels) * q_p);
}

// Derivative of the fake-quantized value with respect to the scale at r / s = v:
// round(v) - v inside the clip range, the clip bound outside it.
template <class T>
inline T scale_partial(T v, QuantRange range) {
  if (v < T(range.lo)) return T(range.lo);
  if (v > T(range.hi)) return T(range.hi);
  return round_half_away(v) - v;
}

template <class T>
struct QuantizerGrad {
  Tensor<T> grad_r;
  std::vector<T> grad_scale;  // already multiplied by lsq_grad_factor
};

// Straight-through gradient for r, masked to zero where r / s leaves the clip range,
// and the LSQ gradient for the scale(s). `channels` is C in the re-scaling factor.
template <class T>
QuantizerGrad<T> quantizer_backward(const Tensor<T>& r, const QuantizerParams<T>& p,
                                    const Tensor<T>& upstream, int channels) {
  detail::check_params(p, r.shape());
  if (upstream.shape() != r.shape()) throw Error("quantizer_backward: shape mismatch");
  const QuantRange range = quant_range(p.signedness);
  QuantizerGrad<T> g{Tensor<T>(r.shape()), std::vector<T>(p.scale.size(), T(0))};
  const std::size_t slice = p.per_channel() ? r.size() / p.scale.size() : r.size();
  std::vector<double> acc(p.scale.size(), 0.0);
  for (std::size_t i = 0; i < r.size(); ++i) {
    const std::size_t c = p.per_channel() ? i / slice : 0;
    const T v = r[i] / p.scale[c];
    const bool inside = v >= T(range.lo) && v <= T(range.hi);
    g.grad_r[i] = inside ? upstream[i] : T(0);
    acc[c] += static_cast<double>(upstream[i]) * static_cast<double>(scale_partial(v, range));
  }
  const double factor = lsq_grad_factor(channels, p.q_p());
  for (std::size_t c = 0; c < acc.size(); ++c) g.grad_scale[c] = static_cast<T>(acc[c] * factor);
  return g;
}

}  // namespace iodf
