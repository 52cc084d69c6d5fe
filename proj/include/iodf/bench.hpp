#pragma once

// Latency and bandwidth measurements: per-sample flow_forward latency and
// end-to-end compression bandwidth for each inference path and batch size.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "iodf/compressor.hpp"
#include "iodf/flow.hpp"

namespace iodf {

struct BenchRow {
  InferencePath path = InferencePath::kFloat;
  int batch = 0;
  int runs = 0;
  double ms_per_sample_min = 0;
  double ms_per_sample_median = 0;
  double mb_per_s_median = 0;  // raw image bytes compressed per second
  double mb_per_s_max = 0;
  std::int64_t flops = 0;      // per image

  std::string line() const {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "path=%s batch=%d runs=%d ms_per_sample_min=%.4f ms_per_sample_median=%.4f mb_per_s_median=%.4f "
                  "mb_per_s_max=%.4f flops=%lld",
                  path_name(path), batch, runs, ms_per_sample_min, ms_per_sample_median, mb_per_s_median, mb_per_s_max,
                  static_cast<long long>(flops));
    return buf;
  }
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F>
std::vector<double> time_runs(int runs, F&& f) {
  std::vector<double> ms;
  for (int r = 0; r < runs; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return ms;
}

}  // namespace detail

// Images are cycled from `pool` to fill each batch.
inline std::vector<BenchRow> run_bench(const FlowModel& m, const Tensor<std::uint8_t>& pool,
                                       const std::vector<InferencePath>& paths, const std::vector<int>& batches,
                                       int runs = 20) {
  if (runs < 1) throw Error("bench: runs must be positive");
  if (pool.rank() != 4 || pool.dim(0) < 1) throw Error("bench: empty image pool");
  check_input_shape(m, pool.shape());
  const std::size_t per = pool.size() / pool.dim(0);
  std::vector<BenchRow> rows;
  for (InferencePath path : paths) {
    check_path(path, m.quant);
    for (int b : batches) {
      if (b < 1) throw Error("bench: batch sizes must be positive");
      Tensor<std::uint8_t> batch({b, pool.dim(1), pool.dim(2), pool.dim(3)});
      for (int i = 0; i < b; ++i)
        std::copy_n(pool.data() + (i % pool.dim(0)) * per, per, batch.data() + static_cast<std::size_t>(i) * per);
      const Tensor<std::int32_t> xi = images_to_int(batch);
      flow_forward(m, xi, path);  // warm-up
      const auto lat = detail::time_runs(runs, [&] { flow_forward(m, xi, path); });
      const auto enc = detail::time_runs(runs, [&] { compress(m, batch, path); });
      const double mb = static_cast<double>(batch.size()) / 1e6;
      BenchRow r;
      r.path = path;
      r.batch = b;
      r.runs = runs;
      r.ms_per_sample_min = *std::min_element(lat.begin(), lat.end()) / b;
      r.ms_per_sample_median = detail::median(lat) / b;
      r.mb_per_s_median = mb / (detail::median(enc) / 1e3);
      r.mb_per_s_max = mb / (*std::min_element(enc.begin(), enc.end()) / 1e3);
      r.flops = calculate_flops(m);
      rows.push_back(r);
    }
  }
  return rows;
}

}  // namespace iodf
