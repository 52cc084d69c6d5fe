#pragma once

// Convolution kernels: float forward/backward and the 8-bit integer path.
//
// Forward products accumulate every output element in input order (channel, ky, kx)
// starting from zero, then add the bias. The result of one element therefore depends
// only on its own receptive field, never on the batch size or on how many output
// channels are computed together. Encoder and decoder rely on this to obtain
// bit-identical priors.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "iodf/quant.hpp"
#include "iodf/tensor.hpp"

namespace iodf {

struct ConvShape {
  int n, cin, h, w, k;
  int pad() const { return k / 2; }
  int rows() const { return cin * k * k; }
  int cols() const { return n * h * w; }
};

inline ConvShape conv_shape(const Shape& x, int k) {
  require_rank4(x, "conv2d");
  if (k < 1 || k % 2 == 0) throw Error("conv2d: kernel size must be odd");
  return {x[0], x[1], x[2], x[3], k};
}

// col[(c * k + ky) * k + kx][(n * h + y) * w + x] = x[n][c][y + ky - pad][x + kx - pad] (zero padded).
template <class T, class U>
void im2col(const U* x, const ConvShape& s, T* col) {
  const int hw = s.h * s.w, ncols = s.cols(), pad = s.pad();
  for (int c = 0; c < s.cin; ++c)
    for (int ky = 0; ky < s.k; ++ky)
      for (int kx = 0; kx < s.k; ++kx) {
        T* row = col + static_cast<std::size_t>((c * s.k + ky) * s.k + kx) * ncols;
        for (int n = 0; n < s.n; ++n) {
          const U* plane = x + (static_cast<std::size_t>(n) * s.cin + c) * hw;
          T* dst = row + static_cast<std::size_t>(n) * hw;
          for (int y = 0; y < s.h; ++y) {
            const int sy = y + ky - pad;
            T* drow = dst + y * s.w;
            if (sy < 0 || sy >= s.h) {
              std::fill(drow, drow + s.w, T(0));
              continue;
            }
            for (int xx = 0; xx < s.w; ++xx) {
              const int sx = xx + kx - pad;
              drow[xx] = (sx < 0 || sx >= s.w) ? T(0) : static_cast<T>(plane[sy * s.w + sx]);
            }
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, const ConvShape& s, T* dx) {
  const int hw = s.h * s.w, ncols = s.cols(), pad = s.pad();
  for (int c = 0; c < s.cin; ++c)
    for (int ky = 0; ky < s.k; ++ky)
      for (int kx = 0; kx < s.k; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * s.k + ky) * s.k + kx) * ncols;
        for (int n = 0; n < s.n; ++n) {
          T* plane = dx + (static_cast<std::size_t>(n) * s.cin + c) * hw;
          const T* src = row + static_cast<std::size_t>(n) * hw;
          for (int y = 0; y < s.h; ++y) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= s.h) continue;
            for (int xx = 0; xx < s.w; ++xx) {
              const int sx = xx + kx - pad;
              if (sx >= 0 && sx < s.w) plane[sy * s.w + sx] += src[y * s.w + xx];
            }
          }
        }
      }
}

namespace detail {

template <class T>
inline T mac(T a, T b, T acc) {
  if constexpr (std::is_floating_point_v<T>) {
    return std::fma(a, b, acc);
  } else {
    return acc + a * b;
  }
}

}  // namespace detail

// out[m][j] = sum_p a[m][p] * b[p][j], each element accumulated in increasing p.
template <class T>
void gemm_ordered(const T* a, int m, int kd, const T* b, int n, T* out) {
  constexpr int kRowBlock = 4;
  constexpr int kColBlock = 64;
  for (int j0 = 0; j0 < n; j0 += kColBlock) {
    const int nb = std::min(kColBlock, n - j0);
    for (int i0 = 0; i0 < m; i0 += kRowBlock) {
      const int mb = std::min(kRowBlock, m - i0);
      T acc[kRowBlock][kColBlock] = {};
      if (nb == kColBlock && mb == kRowBlock) {
        for (int p = 0; p < kd; ++p) {
          const T* brow = b + static_cast<std::size_t>(p) * n + j0;
          for (int ii = 0; ii < kRowBlock; ++ii) {
            const T av = a[static_cast<std::size_t>(i0 + ii) * kd + p];
            for (int jj = 0; jj < kColBlock; ++jj) acc[ii][jj] = detail::mac(av, brow[jj], acc[ii][jj]);
          }
        }
      } else {
        for (int p = 0; p < kd; ++p) {
          const T* brow = b + static_cast<std::size_t>(p) * n + j0;
          for (int ii = 0; ii < mb; ++ii) {
            const T av = a[static_cast<std::size_t>(i0 + ii) * kd + p];
            for (int jj = 0; jj < nb; ++jj) acc[ii][jj] = detail::mac(av, brow[jj], acc[ii][jj]);
          }
        }
      }
      for (int ii = 0; ii < mb; ++ii)
        std::copy(acc[ii], acc[ii] + nb, out + static_cast<std::size_t>(i0 + ii) * n + j0);
    }
  }
}

// Float convolution, stride 1, zero padding k/2. weight [Cout, Cin, k, k], bias [Cout].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) throw Error("conv2d: weight must be [Cout, Cin, k, k]");
  const ConvShape s = conv_shape(x.shape(), weight.dim(2));
  const int cout = weight.dim(0);
  if (weight.dim(1) != s.cin)
    throw Error("conv2d: input has " + std::to_string(s.cin) + " channels, weight expects " +
                std::to_string(weight.dim(1)));
  if (bias.size() != static_cast<std::size_t>(cout)) throw Error("conv2d: bias size mismatch");
  Tensor<T> out({s.n, cout, s.h, s.w});
  if (cout == 0 || s.n == 0) return out;
  const int hw = s.h * s.w, ncols = s.cols();
  std::vector<T> mat(static_cast<std::size_t>(cout) * ncols, T(0));
  if (s.cin > 0) {
    std::vector<T> col(static_cast<std::size_t>(s.rows()) * ncols);
    im2col(x.data(), s, col.data());
    gemm_ordered(weight.data(), cout, s.rows(), col.data(), ncols, mat.data());
  }
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < cout; ++c) {
      const T* src = mat.data() + static_cast<std::size_t>(c) * ncols + static_cast<std::size_t>(n) * hw;
      T* dst = out.data() + (static_cast<std::size_t>(n) * cout + c) * hw;
      const T b = bias[c];
      for (int p = 0; p < hw; ++p) dst[p] = src[p] + b;
    }
  return out;
}

template <class T>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dweight;
  Tensor<T> dbias;
};

// Adjoint of conv2d. Uses Eigen products; only training calls this path.
template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dout,
                             bool need_dx = true) {
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const ConvShape s = conv_shape(x.shape(), weight.dim(2));
  const int cout = weight.dim(0), hw = s.h * s.w, ncols = s.cols(), rows = s.rows();
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()), Tensor<T>({cout})};
  if (cout == 0 || s.n == 0) return g;
  RowMat dmat(cout, ncols);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < cout; ++c) {
      const T* src = dout.data() + (static_cast<std::size_t>(n) * cout + c) * hw;
      for (int p = 0; p < hw; ++p) dmat(c, n * hw + p) = src[p];
    }
  for (int c = 0; c < cout; ++c) g.dbias[c] = dmat.row(c).sum();
  if (rows == 0) return g;
  RowMat col(rows, ncols);
  im2col(x.data(), s, col.data());
  Eigen::Map<RowMat> dw(g.dweight.data(), cout, rows);
  dw.noalias() = dmat * col.transpose();
  if (need_dx) {
    Eigen::Map<const RowMat> w(weight.data(), cout, rows);
    RowMat dcol = w.transpose() * dmat;
    col2im_add(dcol.data(), s, g.dx.data());
  }
  return g;
}

// Output channel c scaled by the binarized gate I(g_c > 0.5).
inline bool gate_on(double g) { return g > 0.5; }

template <class T>
Tensor<T> gconv(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const Tensor<T>& gate) {
  if (gate.size() != static_cast<std::size_t>(weight.dim(0))) throw Error("gconv: gate length mismatch");
  Tensor<T> y = conv2d(x, weight, bias);
  const std::size_t hw = static_cast<std::size_t>(y.dim(2)) * y.dim(3);
  for (int n = 0; n < y.dim(0); ++n)
    for (int c = 0; c < y.dim(1); ++c)
      if (!gate_on(static_cast<double>(gate[c])))
        std::fill_n(y.data() + (static_cast<std::size_t>(n) * y.dim(1) + c) * hw, hw, T(0));
  return y;
}

// ---------------------------------------------------------------------------
// Integer path

// Largest accumulator magnitude for an input code range and kernel depth.
inline std::int64_t accumulator_bound(Signedness input, int rows) {
  const std::int64_t xmax = input == Signedness::kSigned ? 128 : 255;
  return xmax * 128 * rows;
}

// Bias folded into the accumulator: round(b / (s_W * s_x)).
inline std::int32_t fold_bias(double bias, double weight_scale, double input_scale) {
  const double v = std::round(bias / (weight_scale * input_scale));
  if (!(std::abs(v) < 1e9)) throw Error("integer conv: folded bias does not fit the 32-bit accumulator");
  return static_cast<std::int32_t>(v);
}

// 32-bit accumulators acc[n][c][y][x] = sum W_hat * x_hat + b_hat for an integer input.
// weight codes [Cout, Cin, k, k]; bias_codes [Cout].
inline Tensor<std::int32_t> int_conv_accumulate(const Tensor<std::int32_t>& x, Signedness x_sign,
                                                const Tensor<std::int32_t>& weight_codes,
                                                std::span<const std::int32_t> bias_codes) {
  const ConvShape s = conv_shape(x.shape(), weight_codes.dim(2));
  const int cout = weight_codes.dim(0);
  if (weight_codes.dim(1) != s.cin) throw Error("integer conv: channel mismatch");
  if (bias_codes.size() != static_cast<std::size_t>(cout)) throw Error("integer conv: bias size mismatch");
  const std::int64_t bound = accumulator_bound(x_sign, s.rows());
  std::int64_t max_bias = 0;
  for (auto b : bias_codes) max_bias = std::max<std::int64_t>(max_bias, std::abs(static_cast<std::int64_t>(b)));
  if (bound + max_bias >= (std::int64_t{1} << 31))
    throw Error("integer conv: accumulator may overflow 32 bits for " + std::to_string(s.cin) + " input channels");
  Tensor<std::int32_t> out({s.n, cout, s.h, s.w});
  if (cout == 0 || s.n == 0) return out;
  const int hw = s.h * s.w, ncols = s.cols();
  std::vector<std::int32_t> mat(static_cast<std::size_t>(cout) * ncols, 0);
  if (s.cin > 0) {
    std::vector<std::int32_t> col(static_cast<std::size_t>(s.rows()) * ncols);
    im2col(x.data(), s, col.data());
    gemm_ordered(weight_codes.data(), cout, s.rows(), col.data(), ncols, mat.data());
  }
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < cout; ++c) {
      const std::int32_t* src = mat.data() + static_cast<std::size_t>(c) * ncols + static_cast<std::size_t>(n) * hw;
      std::int32_t* dst = out.data() + (static_cast<std::size_t>(n) * cout + c) * hw;
      for (int p = 0; p < hw; ++p) dst[p] = src[p] + bias_codes[c];
    }
  return out;
}

inline Tensor<std::int32_t> codes_of(const QuantizedTensor& q) {
  Tensor<std::int32_t> t(q.shape);
  for (std::size_t i = 0; i < q.values.size(); ++i) t[i] = q.values[i];
  return t;
}

// Integer-only convolution: int32 accumulation, per-channel rescale by
// m_c = s_W[c] * s_x / s_y in double, rounding, clip to the output code range.
template <class T>
QuantizedTensor int_conv2d(const QuantizedTensor& x, const QuantizedTensor& weight, const Tensor<T>& bias,
                           double out_scale, Signedness out_sign) {
  if (x.scale.size() != 1) throw Error("integer conv: activations use a per-tensor scale");
  if (!(out_scale > 0)) throw Error("integer conv: output scale must be positive");
  const int cout = weight.shape.at(0);
  const double sx = x.scale[0];
  std::vector<double> sw(static_cast<std::size_t>(cout));
  std::vector<std::int32_t> bcodes(static_cast<std::size_t>(cout));
  for (int c = 0; c < cout; ++c) {
    sw[c] = weight.scale.size() > 1 ? weight.scale[c] : weight.scale[0];
    bcodes[c] = fold_bias(static_cast<double>(bias[c]), sw[c], sx);
  }
  const Tensor<std::int32_t> acc = int_conv_accumulate(codes_of(x), x.signedness, codes_of(weight), bcodes);
  const QuantRange range = quant_range(out_sign);
  QuantizedTensor y;
  y.shape = acc.shape();
  y.scale = {out_scale};
  y.signedness = out_sign;
  y.values.resize(acc.size());
  const std::size_t hw = static_cast<std::size_t>(acc.dim(2)) * acc.dim(3);
  for (int n = 0; n < acc.dim(0); ++n)
    for (int c = 0; c < cout; ++c) {
      const double m = sw[c] * sx / out_scale;
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t i = (static_cast<std::size_t>(n) * cout + c) * hw + p;
        const double v = std::round(m * static_cast<double>(acc[i]));
        y.values[i] = static_cast<std::int16_t>(std::clamp(v, double(range.lo), double(range.hi)));
      }
    }
  return y;
}

// max(0, x_hat); the scale is unchanged and the result is unsigned.
inline QuantizedTensor relu_int(QuantizedTensor x) {
  for (auto& v : x.values) v = std::max<std::int16_t>(v, 0);
  x.signedness = Signedness::kUnsigned;
  return x;
}

}  // namespace iodf
