#pragma once

// Image datasets: binary PPM (P6), the raw "U8T1" tensor format, and the
// synthetic generator used for desk-scale training.
//
// U8T1 layout: "U8T1" | c u8 | h u16 | w u16 | c*h*w bytes, planar (C, H, W).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "iodf/checkpoint.hpp"
#include "iodf/random.hpp"
#include "iodf/tensor.hpp"

namespace iodf {

using Image = Tensor<std::uint8_t>;  // [C, H, W]

struct Dataset {
  Tensor<std::uint8_t> images;  // [N, C, H, W]
  std::vector<std::string> names;

  int size() const { return images.rank() == 0 ? 0 : images.dim(0); }
};

// ---- PPM

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw FormatError("PPM needs a 3-channel image");
  const int h = img.dim(1), w = img.dim(2);
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) out.push_back(img[(static_cast<std::size_t>(c) * h + y) * w + x]);
  return out;
}

inline Image decode_ppm(std::span<const std::uint8_t> b) {
  std::size_t pos = 0;
  const auto skip_space = [&] {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(b[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto number = [&] {
    skip_space();
    if (pos >= b.size() || !std::isdigit(b[pos])) throw FormatError("PPM: malformed header");
    long v = 0;
    while (pos < b.size() && std::isdigit(b[pos])) {
      v = v * 10 + (b[pos++] - '0');
      if (v > 65535) throw FormatError("PPM: header value too large");
    }
    return static_cast<int>(v);
  };
  if (b.size() < 2 || b[0] != 'P' || b[1] != '6') throw FormatError("PPM: only binary P6 is supported");
  pos = 2;
  const int w = number(), h = number(), maxval = number();
  if (maxval != 255) throw FormatError("PPM: maxval must be 255");
  if (w < 1 || h < 1) throw FormatError("PPM: empty image");
  if (pos >= b.size() || !std::isspace(b[pos])) throw FormatError("PPM: malformed header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(w) * h * 3;
  if (b.size() - pos != n) throw FormatError("PPM: pixel data size mismatch");
  Image img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img[(static_cast<std::size_t>(c) * h + y) * w + x] = b[pos++];
  return img;
}

// ---- U8T1

inline std::vector<std::uint8_t> encode_u8t(const Image& img) {
  if (img.rank() != 3 || img.dim(0) > 255 || img.dim(1) > 65535 || img.dim(2) > 65535)
    throw FormatError("U8T1: image shape does not fit the header");
  ByteWriter w;
  w.bytes({reinterpret_cast<const std::uint8_t*>("U8T1"), 4});
  w.put<std::uint8_t>(static_cast<std::uint8_t>(img.dim(0)));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(img.dim(1)));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(img.dim(2)));
  w.bytes(img.span());
  return std::move(w.data());
}

inline Image decode_u8t(std::span<const std::uint8_t> b) {
  ByteReader r(b);
  if (std::memcmp(r.bytes(4).data(), "U8T1", 4) != 0) throw FormatError("U8T1: bad magic");
  const int c = r.get<std::uint8_t>(), h = r.get<std::uint16_t>(), w = r.get<std::uint16_t>();
  if (c < 1 || h < 1 || w < 1) throw FormatError("U8T1: empty image");
  const auto px = r.bytes(static_cast<std::size_t>(c) * h * w);
  if (r.remaining() != 0) throw FormatError("U8T1: trailing bytes");
  return Image({c, h, w}, std::vector<std::uint8_t>(px.begin(), px.end()));
}

inline bool has_magic(std::span<const std::uint8_t> b, const char* magic, std::size_t n) {
  return b.size() >= n && std::memcmp(b.data(), magic, n) == 0;
}

inline Image read_image(const std::string& path) {
  const auto bytes = read_file(path);
  if (has_magic(bytes, "U8T1", 4)) return decode_u8t(bytes);
  if (has_magic(bytes, "P6", 2)) return decode_ppm(bytes);
  throw FormatError(path + ": unrecognized image format (expected P6 PPM or U8T1)");
}

enum class ImageFormat { kPpm, kU8t };

inline ImageFormat parse_format(const std::string& s) {
  if (s == "ppm") return ImageFormat::kPpm;
  if (s == "u8t") return ImageFormat::kU8t;
  throw Error("unknown image format '" + s + "' (expected ppm or u8t)");
}

inline const char* format_extension(ImageFormat f) { return f == ImageFormat::kPpm ? ".ppm" : ".u8t"; }

inline void write_image(const std::string& path, const Image& img, ImageFormat f) {
  write_file(path, f == ImageFormat::kPpm ? encode_ppm(img) : encode_u8t(img));
}

inline Image image_at(const Tensor<std::uint8_t>& batch, int i) {
  Tensor<std::uint8_t> one = slice_batch(batch, i, i + 1);
  one.reshape({batch.dim(1), batch.dim(2), batch.dim(3)});
  return one;
}

inline Tensor<std::uint8_t> stack_images(const std::vector<Image>& imgs) {
  if (imgs.empty()) throw FormatError("dataset is empty");
  const Shape s = imgs[0].shape();
  std::vector<std::uint8_t> data;
  data.reserve(imgs.size() * imgs[0].size());
  for (const auto& im : imgs) {
    if (im.shape() != s) throw FormatError("dataset images differ in shape: " + shape_string(s) + " vs " + shape_string(im.shape()));
    data.insert(data.end(), im.vec().begin(), im.vec().end());
  }
  return Tensor<std::uint8_t>({static_cast<int>(imgs.size()), s[0], s[1], s[2]}, std::move(data));
}

// A single image file, or every .ppm / .u8t file of a directory in name order.
inline Dataset load_dataset(const std::string& path) {
  namespace fs = std::filesystem;
  Dataset d;
  std::vector<Image> imgs;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path)) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".ppm" || ext == ".u8t")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      imgs.push_back(read_image(f.string()));
      d.names.push_back(f.filename().string());
    }
  } else if (fs::exists(path)) {
    imgs.push_back(read_image(path));
    d.names.push_back(fs::path(path).filename().string());
  } else {
    throw FormatError("no such file or directory: " + path);
  }
  d.images = stack_images(imgs);
  return d;
}

// ---- synthetic data

// Smooth random field: white noise blurred by `passes` separable [1 2 1]/4 filters
// (reflecting borders), normalized to unit standard deviation.
inline std::vector<double> smooth_field(Rng& rng, int h, int w, int passes) {
  std::vector<double> f(static_cast<std::size_t>(h) * w), tmp(f.size());
  for (auto& v : f) v = rng.normal();
  const auto at = [](int i, int n) { return n == 1 ? 0 : i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
  for (int p = 0; p < passes; ++p) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        tmp[y * w + x] = 0.25 * f[y * w + at(x - 1, w)] + 0.5 * f[y * w + x] + 0.25 * f[y * w + at(x + 1, w)];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        f[y * w + x] = 0.25 * tmp[at(y - 1, h) * w + x] + 0.5 * tmp[y * w + x] + 0.25 * tmp[at(y + 1, h) * w + x];
  }
  double mean = 0, var = 0;
  for (double v : f) mean += v;
  mean /= static_cast<double>(f.size());
  for (double v : f) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(f.size()));
  for (auto& v : f) v = sd > 0 ? (v - mean) / sd : 0.0;
  return f;
}

// Reproducible spatially correlated images: a blurred luminance field with random
// brightness and contrast, per-channel color offsets with their own low-frequency
// variation, and mild pixel noise, rounded and clipped to bytes.
inline Tensor<std::uint8_t> gen_synth(std::uint64_t seed, int count, int h, int w, int channels = 3) {
  if (count < 0 || h < 1 || w < 1 || channels < 1) throw Error("gen_synth: bad dimensions");
  Rng rng(seed ^ 0x5eed1d0f1a7ULL);
  Tensor<std::uint8_t> out({count, channels, h, w});
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int n = 0; n < count; ++n) {
    const double brightness = rng.uniform(60.0, 190.0);
    const double contrast = rng.uniform(15.0, 60.0);
    const double noise = rng.uniform(1.0, 4.0);
    const int passes = 2 + static_cast<int>(rng.below(5));
    const auto luma = smooth_field(rng, h, w, passes);
    for (int c = 0; c < channels; ++c) {
      const double offset = c == 0 ? 0.0 : rng.uniform(-35.0, 35.0);
      const double tint = c == 0 ? 0.0 : rng.uniform(0.0, 12.0);
      const auto chroma = smooth_field(rng, h, w, passes + 2);
      std::uint8_t* dst = out.data() + (static_cast<std::size_t>(n) * channels + c) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        const double v = brightness + offset + contrast * luma[p] + tint * chroma[p] + noise * rng.normal();
        dst[p] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
      }
    }
  }
  return out;
}

}  // namespace iodf
