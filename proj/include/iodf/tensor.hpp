#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace iodf {

// Base error for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input data, files, or streams.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A consistency check failed (checksum mismatch, round-trip mismatch).
class VerificationError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw Error("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

// Dense row-major tensor. Images and activations are NCHW.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw Error("tensor data size does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // NCHW element access.
  T& at(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

  void reshape(Shape shape) {
    if (shape_size(shape) != data_.size()) throw Error("reshape changes element count");
    shape_ = std::move(shape);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape());
}

inline void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) throw Error(std::string(what) + ": expected an NCHW tensor, got " + shape_string(s));
}

// Channels [c0, c1) of an NCHW tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  require_rank4(x.shape(), "slice_channels");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c0 < 0 || c1 > c || c0 > c1) throw Error("slice_channels: bad channel range");
  Tensor<T> out({n, c1 - c0, x.dim(2), x.dim(3)});
  for (int i = 0; i < n; ++i) {
    const T* src = x.data() + (static_cast<std::size_t>(i) * c + c0) * hw;
    std::copy(src, src + static_cast<std::size_t>(c1 - c0) * hw,
              out.data() + static_cast<std::size_t>(i) * (c1 - c0) * hw);
  }
  return out;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank4(a.shape(), "concat_channels");
  require_rank4(b.shape(), "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw Error("concat_channels: shape mismatch " + shape_string(a.shape()) + " vs " +
                shape_string(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
  for (int i = 0; i < n; ++i) {
    T* dst = out.data() + static_cast<std::size_t>(i) * (ca + cb) * hw;
    std::copy(a.data() + i * ca * hw, a.data() + (i + 1) * ca * hw, dst);
    std::copy(b.data() + i * cb * hw, b.data() + (i + 1) * cb * hw, dst + ca * hw);
  }
  return out;
}

// Space-to-depth 2x2. Output channel = 4 * input channel + (2 * dy + dx).
template <class T>
Tensor<T> squeeze(const Tensor<T>& x) {
  require_rank4(x.shape(), "squeeze");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw Error("squeeze: spatial dims must be even, got " + shape_string(x.shape()));
  Tensor<T> out({n, 4 * c, h / 2, w / 2});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          out.at(i, 4 * ch + 2 * (y & 1) + (xx & 1), y / 2, xx / 2) = x.at(i, ch, y, xx);
  return out;
}

template <class T>
Tensor<T> unsqueeze(const Tensor<T>& x) {
  require_rank4(x.shape(), "unsqueeze");
  const int n = x.dim(0), c4 = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c4 % 4) throw Error("unsqueeze: channel count must be a multiple of 4");
  const int c = c4 / 4;
  Tensor<T> out({n, c, 2 * h, 2 * w});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          out.at(i, ch, y, xx) = x.at(i, 4 * ch + 2 * (y & 1) + (xx & 1), y / 2, xx / 2);
  return out;
}

// Rows [n0, n1) of the batch dimension.
template <class T>
Tensor<T> slice_batch(const Tensor<T>& x, int n0, int n1) {
  if (x.rank() < 1 || n0 < 0 || n1 > x.dim(0) || n0 > n1) throw Error("slice_batch: bad range");
  Shape s = x.shape();
  s[0] = n1 - n0;
  const std::size_t per = x.size() / std::max(1, x.dim(0));
  std::vector<T> data(x.data() + n0 * per, x.data() + n1 * per);
  return Tensor<T>(std::move(s), std::move(data));
}

}  // namespace iodf
