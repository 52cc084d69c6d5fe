#pragma once

// Flat key=value run configuration covering the architecture, the training
// schedule and the synthetic dataset sizes. '#' starts a comment; blank lines are
// ignored; unknown keys are errors. `lambda` is a comma-separated list.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "iodf/flow.hpp"
#include "iodf/train.hpp"

namespace iodf {

struct RunConfig {
  FlowConfig flow;
  TrainConfig train;
  int train_images = 2048;
  int val_images = 256;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw Error("config: bad value for " + key + ": '" + v + "'");
  return out;
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<double>(key, trim(item)));
  if (out.empty()) throw Error("config: empty list for " + key);
  return out;
}

}  // namespace detail

inline void apply_config_value(RunConfig& rc, const std::string& key, const std::string& value) {
  using Setter = std::function<void(const std::string&)>;
  const auto i = [&](int& f) { return Setter([&f, key](const std::string& v) { f = detail::parse_number<int>(key, v); }); };
  const auto d = [&](double& f) {
    return Setter([&f, key](const std::string& v) { f = detail::parse_number<double>(key, v); });
  };
  FlowConfig& f = rc.flow;
  TrainConfig& t = rc.train;
  const std::map<std::string, Setter> setters = {
      {"levels", i(f.levels)},
      {"couplings", i(f.couplings)},
      {"hidden", i(f.hidden)},
      {"blocks", i(f.blocks)},
      {"prior_blocks", i(f.prior_blocks)},
      {"kernel", i(f.kernel)},
      {"channels", i(f.channels)},
      {"height", i(f.height)},
      {"width", i(f.width)},
      {"lr", d(t.lr)},
      {"lr_decay", d(t.lr_decay)},
      {"gate_lr", d(t.gate_lr)},
      {"finetune_lr", d(t.finetune_lr)},
      {"quant_lr", d(t.quant_lr)},
      {"alpha", d(t.alpha)},
      {"lambda", [&t, key](const std::string& v) { t.lambda = detail::parse_list(key, v); }},
      {"r_target", d(t.r_target)},
      {"batch", i(t.batch)},
      {"epochs1", i(t.epochs1)},
      {"epochs2_max", i(t.epochs2_max)},
      {"epochs3", i(t.epochs3)},
      {"epochs4", i(t.epochs4)},
      {"epochs5", i(t.epochs5)},
      {"patience", i(t.patience)},
      {"min_delta", d(t.min_delta)},
      {"calib_images", i(t.calib_images)},
      {"warmup_steps", i(t.warmup_steps)},
      {"seed", [&t, key](const std::string& v) { t.seed = detail::parse_number<std::uint64_t>(key, v); }},
      {"train_images", i(rc.train_images)},
      {"val_images", i(rc.val_images)},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw Error("config: unknown key '" + key + "'");
  it->second(value);
}

inline RunConfig parse_config(const std::string& text, RunConfig rc = {}) {
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(n) + ": expected key=value");
    apply_config_value(rc, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  rc.flow.validate();
  rc.train.validate();
  if (rc.train_images < 1 || rc.val_images < 1) throw Error("config: image counts must be positive");
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

inline std::string format_config(const RunConfig& rc) {
  std::ostringstream o;
  const FlowConfig& f = rc.flow;
  const TrainConfig& t = rc.train;
  o << "levels=" << f.levels << "\ncouplings=" << f.couplings << "\nhidden=" << f.hidden << "\nblocks=" << f.blocks
    << "\nprior_blocks=" << f.prior_blocks << "\nkernel=" << f.kernel << "\nchannels=" << f.channels
    << "\nheight=" << f.height << "\nwidth=" << f.width << "\nlr=" << t.lr << "\nlr_decay=" << t.lr_decay
    << "\ngate_lr=" << t.gate_lr << "\nfinetune_lr=" << t.finetune_lr << "\nquant_lr=" << t.quant_lr << "\nalpha=" << t.alpha << "\nlambda=";
  for (std::size_t i = 0; i < t.lambda.size(); ++i) o << (i ? "," : "") << t.lambda[i];
  o << "\nr_target=" << t.r_target << "\nbatch=" << t.batch << "\nepochs1=" << t.epochs1
    << "\nepochs2_max=" << t.epochs2_max << "\nepochs3=" << t.epochs3 << "\nepochs4=" << t.epochs4
    << "\nepochs5=" << t.epochs5 << "\npatience=" << t.patience << "\nmin_delta=" << t.min_delta
    << "\ncalib_images=" << t.calib_images << "\nwarmup_steps=" << t.warmup_steps << "\nseed=" << t.seed << "\ntrain_images=" << rc.train_images
    << "\nval_images=" << rc.val_images << "\n";
  return o.str();
}

}  // namespace iodf
