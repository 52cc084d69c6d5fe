#pragma once

// Training: the bits-per-dimension objective on the gradient tape, the gated
// objective, Adamax, quantizer calibration, gate attachment, pruning, and the
// five-stage workflow (float, gated search, pruned fine-tune, activation
// quantization, full quantization).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "iodf/flow.hpp"
#include "iodf/random.hpp"

namespace iodf {

struct TrainConfig {
  double lr = 1e-3;
  double lr_decay = 0.99;  // per epoch
  double gate_lr = 5e-5;
  double finetune_lr = 5e-5;  // weights during gated training and pruned fine-tuning
  double quant_lr = 1e-4;
  double alpha = 0.8;                      // gate initialization
  std::vector<double> lambda = {1, 2, 4, 8};  // per level, before division by the gated filter count
  double r_target = 0.6;
  int batch = 32;
  int epochs1 = 20;      // stage-1 budget; early stop may end it sooner
  int epochs2_max = 30;  // stage-2 hard cap
  int epochs3 = 5;
  int epochs4 = 3;
  int epochs5 = 3;
  int patience = 5;
  double min_delta = 1e-3;
  int calib_images = 64;
  int warmup_steps = 0;  // linear ramp of the weight and scale learning rates at the start of every stage
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0) || !(gate_lr > 0) || !(finetune_lr > 0) || !(quant_lr > 0)) throw Error("train config: learning rates must be positive");
    if (!(lr_decay > 0 && lr_decay <= 1)) throw Error("train config: lr_decay must be in (0, 1]");
    if (!(alpha > 0.5 && alpha <= 1)) throw Error("train config: alpha must be in (0.5, 1]");
    if (!(r_target > 0 && r_target <= 1)) throw Error("train config: r_target must be in (0, 1]");
    if (batch < 1 || epochs1 < 0 || epochs2_max < 1 || epochs3 < 0 || epochs4 < 0 || epochs5 < 0)
      throw Error("train config: bad batch size or epoch count");
    if (patience < 1 || min_delta < 0 || calib_images < 1 || warmup_steps < 0) throw Error("train config: bad early-stop settings");
    for (double l : lambda)
      if (!(l >= 0)) throw Error("train config: lambda must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Objective

inline Tensor<float> to_float_images(const Tensor<std::uint8_t>& x) { return x.cast<float>(); }

// Total code length -log2 p(x) of the batch, recorded on the tape.
template <class T>
Var flow_bits(GradientTape<T>& t, const FlowModel& m, const Tensor<T>& x, const NetMode& mode) {
  check_input_shape(m, x.shape());
  Var h = t.constant(x);
  Var total;
  const auto accumulate = [&](Var ll) { total = total.valid() ? ad::add(t, total, ll) : ll; };
  for (const auto& lv : m.levels) {
    h = ad::squeeze(t, h);
    for (const auto& c : lv.couplings) {
      Var cond = ad::slice_channels(t, h, c.cond_begin(), c.cond_end());
      Var trans = ad::slice_channels(t, h, c.trans_begin(), c.trans_end());
      Var shift = ad::round_ste(t, ad::scale(t, net_forward(t, c.net, cond, mode), kOutScale));
      trans = ad::add(t, trans, shift);
      h = c.transform_first ? ad::concat_channels(t, trans, cond) : ad::concat_channels(t, cond, trans);
    }
    if (lv.factor_out) {
      const int keep = lv.keep_channels(), nf = lv.channels - keep;
      Var kept = ad::slice_channels(t, h, 0, keep);
      Var fac = ad::slice_channels(t, h, keep, lv.channels);
      Var raw = net_forward(t, lv.prior, kept, NetMode{false, false, mode.observer});
      Var mu = ad::scale(t, ad::slice_channels(t, raw, 0, nf), kOutScale);
      Var ls = ad::add_const(t, ad::slice_channels(t, raw, nf, 2 * nf), kLogOutScale);
      accumulate(ad::logistic_log2_sum(t, fac, mu, ls));
      h = kept;
    }
  }
  const Shape fs = t.value(h).shape();
  Var mu = ad::scale(t, ad::broadcast_channels(t, t.parameter(m.final_mu), fs), kOutScale);
  Var ls = ad::add_const(t, ad::broadcast_channels(t, t.parameter(m.final_log_s), fs), kLogOutScale);
  accumulate(ad::logistic_log2_sum(t, h, mu, ls));
  return ad::scale(t, total, -1.0);
}

// Mean bits per dimension of a batch under the analytic likelihood.
inline double loss_bpd(const FlowModel& m, const Tensor<std::uint8_t>& images, InferencePath path = InferencePath::kFloat) {
  return mean_bpd(analytic_bits(m, images_to_int(images), path), m.config.dims());
}

inline int gated_filter_count(const FlowModel& m) {
  int n = 0;
  for_each_conv(m, [&](const ConvLayer& L, const ConvSite&) { n += L.gated() ? static_cast<int>(L.gate.size()) : 0; });
  return n;
}

// Per-level penalty strengths: cfg.lambda[level] / (number of gated filters).
inline std::vector<double> effective_lambdas(const FlowModel& m, const std::vector<double>& lambda) {
  const int g = std::max(1, gated_filter_count(m));
  std::vector<double> out;
  for (std::size_t l = 0; l < m.levels.size(); ++l) {
    const double base = lambda.empty() ? 0.0 : lambda[std::min(l, lambda.size() - 1)];
    out.push_back(base / g);
  }
  return out;
}

// sum over gated convs of lambda(level) * ||g~||_1, on the tape.
template <class T>
Var gate_penalty_var(GradientTape<T>& t, const FlowModel& m, const std::vector<double>& lambdas) {
  Var total;
  for_each_conv(m, [&](const ConvLayer& L, const ConvSite& s) {
    if (!L.gated()) return;
    Var p = ad::gate_penalty(t, t.parameter(L.gate), lambdas.at(static_cast<std::size_t>(s.level)));
    total = total.valid() ? ad::add(t, total, p) : p;
  });
  return total;
}

inline double gate_penalty_value(const FlowModel& m, const std::vector<double>& lambdas) {
  double v = 0;
  for_each_conv(m, [&](const ConvLayer& L, const ConvSite& s) {
    if (L.gated()) v += lambdas.at(static_cast<std::size_t>(s.level)) * alive_outputs(L);
  });
  return v;
}

// L_IDF (bpd) + sum lambda * ||g~||_1.
inline double gated_objective(const FlowModel& m, const Tensor<std::uint8_t>& images, const std::vector<double>& lambdas) {
  return loss_bpd(m, images) + gate_penalty_value(m, lambdas);
}

// ---------------------------------------------------------------------------
// Optimizer

class Adamax {
 public:
  explicit Adamax(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(Tensor<float>& p, const Tensor<float>& g, double lr) {
    if (g.size() != p.size()) throw Error("Adamax: gradient size mismatch");
    State& s = state_[&p];
    if (s.m.size() != p.size()) s = State{std::vector<double>(p.size(), 0.0), std::vector<double>(p.size(), 0.0), 0};
    ++s.t;
    const double step = lr / (1.0 - std::pow(b1_, static_cast<double>(s.t)));
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      s.m[i] = b1_ * s.m[i] + (1.0 - b1_) * gi;
      s.u[i] = std::max(b2_ * s.u[i], std::abs(gi));
      p[i] = static_cast<float>(static_cast<double>(p[i]) - step * s.m[i] / (s.u[i] + eps_));
    }
  }

  void reset() { state_.clear(); }

 private:
  struct State {
    std::vector<double> m, u;
    long t = 0;
  };
  double b1_, b2_, eps_;
  std::unordered_map<const Tensor<float>*, State> state_;
};

enum class ParamKind { kWeight, kGate, kActScale, kWeightScale };

struct ParamRef {
  Tensor<float>* tensor;
  ParamKind kind;
};

struct ParamSelection {
  bool weights = true;
  bool gates = false;
  bool act_scales = false;
  bool weight_scales = false;
};

inline std::vector<ParamRef> trainable_params(FlowModel& m, const ParamSelection& sel) {
  std::vector<ParamRef> out;
  for_each_conv(m, [&](ConvLayer& L, const ConvSite&) {
    if (sel.weights) {
      out.push_back({&L.weight, ParamKind::kWeight});
      out.push_back({&L.bias, ParamKind::kWeight});
    }
    if (sel.gates && L.gated()) out.push_back({&L.gate, ParamKind::kGate});
    if (L.quantizable && sel.act_scales) out.push_back({&L.act_scale, ParamKind::kActScale});
    if (L.quantizable && sel.weight_scales) out.push_back({&L.weight_scale, ParamKind::kWeightScale});
  });
  if (sel.weights) {
    out.push_back({&m.final_mu, ParamKind::kWeight});
    out.push_back({&m.final_log_s, ParamKind::kWeight});
  }
  return out;
}

struct StepRates {
  double weight = 0, gate = 0, scale = 0;
  double of(ParamKind k) const {
    switch (k) {
      case ParamKind::kWeight: return weight;
      case ParamKind::kGate: return gate;
      default: return scale;
    }
  }
};

// One optimizer step on a batch; returns the batch bpd (without the gate penalty).
inline double train_step(FlowModel& m, const Tensor<float>& batch, Adamax& opt, const std::vector<ParamRef>& params,
                         const StepRates& rates, const std::vector<double>* lambdas) {
  GradientTape<float> tape;
  const NetMode mode = net_mode(m.quant);
  Var bits = flow_bits(tape, m, batch, mode);
  const double denom = static_cast<double>(batch.dim(0)) * m.config.dims();
  Var loss = ad::scale(tape, bits, 1.0 / denom);
  const double bpd = static_cast<double>(tape.value(loss)[0]);
  if (!std::isfinite(bpd)) throw Error("training diverged: non-finite loss");
  if (lambdas) {
    Var pen = gate_penalty_var(tape, m, *lambdas);
    if (pen.valid()) loss = ad::add(tape, loss, pen);
  }
  tape.backward(loss);
  for (const auto& p : params) {
    const Tensor<float>* g = tape.param_grad(*p.tensor);
    if (!g) continue;
    opt.step(*p.tensor, *g, rates.of(p.kind));
    if (p.kind == ParamKind::kGate)
      for (auto& v : p.tensor->vec()) v = std::clamp(v, 0.0f, 1.0f);
    if (p.kind == ParamKind::kActScale || p.kind == ParamKind::kWeightScale)
      for (auto& v : p.tensor->vec()) v = std::max(v, static_cast<float>(kMinScale));
  }
  return bpd;
}

inline Tensor<float> gather_batch(const Tensor<std::uint8_t>& images, std::span<const int> idx) {
  const std::size_t per = images.size() / images.dim(0);
  Tensor<float> out({static_cast<int>(idx.size()), images.dim(1), images.dim(2), images.dim(3)});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t k = 0; k < per; ++k) out[i * per + k] = images[static_cast<std::size_t>(idx[i]) * per + k];
  return out;
}

inline std::vector<int> shuffled_indices(int n, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  return idx;
}

// ---------------------------------------------------------------------------
// Initialization and calibration

// Priors start at the per-channel statistics of the latents of the initial flow:
// mu = mean, s = std * sqrt(3) / pi (logistic with matching variance).
inline void init_priors_from_data(FlowModel& m, const Tensor<std::uint8_t>& images) {
  const FlowLatents z = flow_forward(m, images_to_int(images), InferencePath::kFloat);
  const auto stats = [](const Tensor<std::int32_t>& t, int c, double& mean, double& s) {
    const int n = t.dim(0), ch = t.dim(1);
    const std::size_t hw = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
    double sum = 0, sq = 0, cnt = 0;
    for (int i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const double v = t[(static_cast<std::size_t>(i) * ch + c) * hw + p];
        sum += v;
        sq += v * v;
        cnt += 1;
      }
    mean = sum / cnt;
    const double var = std::max(0.0, sq / cnt - mean * mean);
    s = std::max(0.25, std::sqrt(var) * std::sqrt(3.0) / std::numbers::pi);
  };
  for (std::size_t f = 0; f < z.factored.size(); ++f) {
    Level& lv = m.levels[f];
    const int nf = lv.channels - lv.keep_channels();
    for (int c = 0; c < nf; ++c) {
      double mean, s;
      stats(z.factored[f], c, mean, s);
      lv.prior.last.bias[c] = static_cast<float>(mean / kOutScale);
      lv.prior.last.bias[nf + c] = static_cast<float>(std::log(s) - kLogOutScale);
    }
  }
  for (int c = 0; c < z.final.dim(1); ++c) {
    double mean, s;
    stats(z.final, c, mean, s);
    m.final_mu[c] = static_cast<float>(mean / kOutScale);
    m.final_log_s[c] = static_cast<float>(std::log(s) - kLogOutScale);
  }
}

// Activation scales from init_scale over the float-path inputs of each quantizable layer.
inline void calibrate_activations(FlowModel& m, const Tensor<std::uint8_t>& images) {
  std::unordered_map<const ConvLayer*, std::vector<float>> seen;
  const ActivationObserver obs = [&](const ConvLayer& L, const Tensor<float>& x) {
    auto& v = seen[&L];
    v.insert(v.end(), x.vec().begin(), x.vec().end());
  };
  GradientTape<float> tape(false);
  flow_bits(tape, m, to_float_images(images), NetMode{false, false, &obs});
  for_each_conv(m, [&](ConvLayer& L, const ConvSite&) {
    if (!L.quantizable) return;
    auto it = seen.find(&L);
    if (it == seen.end() || it->second.empty()) return;  // dead block: keeps its previous scale
    L.act_scale[0] = init_scale<float>(it->second, 8);
  });
}

// Per-output-channel weight scales from init_scale.
inline void calibrate_weights(FlowModel& m) {
  for_each_conv(m, [&](ConvLayer& L, const ConvSite&) {
    if (!L.quantizable) return;
    const std::size_t per = L.weight.size() / L.cout();
    L.weight_scale = Tensor<float>({L.cout()});
    for (int c = 0; c < L.cout(); ++c)
      L.weight_scale[c] = init_scale<float>(std::span<const float>(L.weight.data() + c * per, per), 8);
  });
}

// ---------------------------------------------------------------------------
// Gates and pruning

inline void attach_gates(FlowModel& m, double alpha) {
  if (model_pruned(m)) throw Error("cannot attach gates to a pruned model");
  for_each_conv(m, [&](ConvLayer& L, const ConvSite& s) {
    if (gateable(s)) L.gate = Tensor<float>({L.cout()}, static_cast<float>(alpha));
  });
}

namespace detail {

inline std::vector<int> on_indices(const ConvLayer& L) {
  std::vector<int> on;
  for (int c = 0; c < L.cout(); ++c)
    if (!L.gated() || gate_on(static_cast<double>(L.gate[c]))) on.push_back(c);
  return on;
}

inline int argmax_gate(const ConvLayer& L) {
  int best = 0;
  for (int c = 1; c < L.cout(); ++c)
    if (L.gate[c] > L.gate[best]) best = c;
  return best;
}

// Rows `rows` and input columns `cols` of a conv; other per-channel arrays follow the rows.
inline ConvLayer compact(const ConvLayer& L, const std::vector<int>& rows, const std::vector<int>& cols) {
  ConvLayer out = L;
  const int k = L.k(), kk = k * k;
  out.weight = Tensor<float>({static_cast<int>(rows.size()), static_cast<int>(cols.size()), k, k});
  out.bias = Tensor<float>({static_cast<int>(rows.size())});
  out.weight_scale = Tensor<float>({static_cast<int>(rows.size())});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c)
      for (int q = 0; q < kk; ++q)
        out.weight[(r * cols.size() + c) * kk + q] = L.weight[(static_cast<std::size_t>(rows[r]) * L.cin() + cols[c]) * kk + q];
    out.bias[r] = L.bias[rows[r]];
    out.weight_scale[r] = L.weight_scale.size() > 1 ? L.weight_scale[rows[r]] : L.weight_scale[0];
  }
  out.gate = Tensor<float>();
  out.kept = rows;
  return out;
}

inline void zero_layer(ConvLayer& L) {
  L.weight.fill(0.0f);
  L.bias.fill(0.0f);
}

}  // namespace detail

struct PruneResult {
  FlowModel model;
  std::vector<std::string> warnings;
};

// Removes gated-off filters. conv1 loses output rows and conv2 the matching input
// columns; conv2's surviving rows are recorded for the scatter-add. A layer with every
// gate off keeps its highest-gate filter, zeroed and marked dead.
inline PruneResult prune(const FlowModel& in) {
  PruneResult res{in, {}};
  FlowModel& m = res.model;
  for (std::size_t l = 0; l < m.levels.size(); ++l)
    for (std::size_t j = 0; j < m.levels[l].couplings.size(); ++j) {
      auto& blocks = m.levels[l].couplings[j].net.blocks;
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        ConvLayer& c1 = blocks[b].conv1;
        ConvLayer& c2 = blocks[b].conv2;
        if (!c1.gated() || !c2.gated()) continue;
        std::vector<int> rows1 = detail::on_indices(c1), rows2 = detail::on_indices(c2);
        const bool dead1 = rows1.empty(), dead2 = rows2.empty();
        const auto where = "level " + std::to_string(l) + " coupling " + std::to_string(j) + " block " + std::to_string(b);
        if (dead1) {
          rows1 = {detail::argmax_gate(c1)};
          res.warnings.push_back("all gates off in " + where + " conv1; keeping one zeroed filter");
        }
        if (dead2) {
          rows2 = {detail::argmax_gate(c2)};
          res.warnings.push_back("all gates off in " + where + " conv2; keeping one zeroed filter");
        }
        std::vector<int> all_in(static_cast<std::size_t>(c1.cin()));
        std::iota(all_in.begin(), all_in.end(), 0);
        ConvLayer n1 = detail::compact(c1, rows1, all_in);
        ConvLayer n2 = detail::compact(c2, rows2, rows1);
        if (dead1) {
          detail::zero_layer(n1);
          n1.dead = true;
          n2.weight.fill(0.0f);  // its only input is the dead filter
        }
        if (dead2) {
          detail::zero_layer(n2);
          n2.dead = true;
        }
        c1 = std::move(n1);
        c2 = std::move(n2);
      }
    }
  return res;
}

// ---------------------------------------------------------------------------
// Workflow

struct StageReport {
  int stage = 0;
  int epoch = 0;
  double bpd = 0;
  std::int64_t flops = 0;
  double lr = 0;

  std::string line() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "stage=%d epoch=%d bpd=%.6f flops=%lld lr=%.8g", stage, epoch, bpd,
                  static_cast<long long>(flops), lr);
    return buf;
  }
};

struct TrainData {
  Tensor<std::uint8_t> train;
  Tensor<std::uint8_t> val;
};

struct StageHooks {
  std::function<void(const StageReport&)> report;
  std::function<void(int stage, const FlowModel&)> checkpoint;
};

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, TrainData data, StageHooks hooks = {})
      : cfg_(cfg), data_(std::move(data)), hooks_(std::move(hooks)) {
    cfg_.validate();
    if (data_.train.rank() != 4 || data_.train.dim(0) < 1) throw Error("training set is empty");
    if (data_.val.rank() != 4 || data_.val.dim(0) < 1) throw Error("validation set is empty");
  }

  const std::vector<StageReport>& reports() const { return reports_; }
  const std::vector<int>& stages_run() const { return stages_run_; }

  double validation_bpd(const FlowModel& m) const {
    return loss_bpd(m, data_.val, m.quant == QuantState::kNone ? InferencePath::kFloat : InferencePath::kFake);
  }

  // Stage 1: float model, no gates, early stop on validation plateau.
  void stage1(FlowModel& m) {
    begin(1, m);
    m.quant = QuantState::kNone;
    const auto params = trainable_params(m, {});
    Adamax opt;
    double best = std::numeric_limits<double>::infinity();
    int stale = 0;
    for (int e = 0; e < cfg_.epochs1; ++e) {
      const double lr = cfg_.lr * std::pow(cfg_.lr_decay, e);
      run_epoch(m, opt, params, {lr, 0, 0}, nullptr, e, nullptr);
      const double v = emit(1, e, m, lr);
      if (v < best - cfg_.min_delta) {
        best = v;
        stale = 0;
      } else if (++stale >= cfg_.patience) {
        break;
      }
    }
    end(1, m);
  }

  // Stage 2: gated objective until FLOPs <= r_target * F0 (checked after every step).
  std::int64_t stage2(FlowModel& m) {
    begin(2, m);
    if (model_pruned(m)) throw Error("stage 2 needs an unpruned model");
    f0_ = calculate_flops(m);
    if (!model_gated(m)) attach_gates(m, cfg_.alpha);
    const double target = cfg_.r_target * static_cast<double>(f0_);
    const auto lambdas = effective_lambdas(m, cfg_.lambda);
    const auto params = trainable_params(m, {true, true, false, false});
    Adamax opt;
    const auto done = [&] { return static_cast<double>(calculate_flops(m)) <= target; };
    int e = 0;
    while (!done()) {
      if (e >= cfg_.epochs2_max) {
        std::ostringstream os;
        os << "stage 2 did not reach the FLOPs target within " << cfg_.epochs2_max << " epochs: flops="
           << calculate_flops(m) << " target=" << static_cast<std::int64_t>(target) << " F0=" << f0_
           << " gated filters on=" << count_gates_on(m) << "/" << gated_filter_count(m)
           << " (raise lambda or gate_lr)";
        throw Error(os.str());
      }
      const double lr = cfg_.finetune_lr * std::pow(cfg_.lr_decay, e);
      const double glr = cfg_.gate_lr * std::pow(cfg_.lr_decay, e);
      run_epoch(m, opt, params, {lr, glr, 0}, &lambdas, e, done);
      emit(2, e, m, lr);
      ++e;
    }
    if (e == 0) emit(2, 0, m, cfg_.finetune_lr);
    end(2, m);
    return f0_;
  }

  // Stage 3: fine-tune the pruned model on L_IDF.
  void stage3(FlowModel& m) {
    begin(3, m);
    finetune(3, m, cfg_.epochs3, cfg_.finetune_lr, {});
    end(3, m);
  }

  // Stage 4: calibrated activation quantizers, fake-quant fine-tuning.
  void stage4(FlowModel& m, const Tensor<std::uint8_t>& calib) {
    begin(4, m);
    m.quant = QuantState::kNone;
    calibrate_activations(m, calib);
    m.quant = QuantState::kActivations;
    finetune(4, m, cfg_.epochs4, cfg_.quant_lr, {true, false, true, false});
    end(4, m);
  }

  // Stage 5: weight quantizers too, weight scales recalibrated on entry.
  void stage5(FlowModel& m) {
    begin(5, m);
    if (m.quant == QuantState::kNone) throw Error("stage 5 needs calibrated activation quantizers (run stage 4)");
    calibrate_weights(m);
    m.quant = QuantState::kFull;
    finetune(5, m, cfg_.epochs5, cfg_.quant_lr, {true, false, true, true});
    end(5, m);
  }

  Tensor<std::uint8_t> calibration_batch() const {
    const int n = std::min(cfg_.calib_images, data_.train.dim(0));
    return slice_batch(data_.train, 0, n);
  }

  std::int64_t f0() const { return f0_; }

 private:
  static int count_gates_on(const FlowModel& m) {
    int n = 0;
    for_each_conv(m, [&](const ConvLayer& L, const ConvSite&) { n += L.gated() ? alive_outputs(L) : 0; });
    return n;
  }

  void begin(int stage, const FlowModel&) {
    if (!stages_run_.empty() && stage <= stages_run_.back())
      throw Error("stages must run in increasing order");
    stages_run_.push_back(stage);
    stage_steps_ = 0;
  }

  void end(int stage, const FlowModel& m) {
    if (hooks_.checkpoint) hooks_.checkpoint(stage, m);
  }

  void finetune(int stage, FlowModel& m, int epochs, double base_lr, ParamSelection sel) {
    const auto params = trainable_params(m, sel);
    Adamax opt;
    for (int e = 0; e < epochs; ++e) {
      const double lr = base_lr * std::pow(cfg_.lr_decay, e);
      run_epoch(m, opt, params, {lr, 0, lr}, nullptr, e, nullptr);
      emit(stage, e, m, lr);
    }
    if (epochs == 0) emit(stage, 0, m, base_lr);
  }

  void run_epoch(FlowModel& m, Adamax& opt, const std::vector<ParamRef>& params, const StepRates& rates,
                 const std::vector<double>* lambdas, int epoch, const std::function<bool()>& stop) {
    Rng rng(cfg_.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(stages_run_.back()) * 1000 + epoch);
    const auto idx = shuffled_indices(data_.train.dim(0), rng);
    for (std::size_t i0 = 0; i0 < idx.size(); i0 += static_cast<std::size_t>(cfg_.batch)) {
      const std::size_t i1 = std::min(idx.size(), i0 + static_cast<std::size_t>(cfg_.batch));
      const Tensor<float> batch = gather_batch(data_.train, std::span<const int>(idx).subspan(i0, i1 - i0));
      const double ramp = cfg_.warmup_steps > 0 ? std::min(1.0, (stage_steps_ + 1.0) / cfg_.warmup_steps) : 1.0;
      ++stage_steps_;
      train_step(m, batch, opt, params, {rates.weight * ramp, rates.gate, rates.scale * ramp}, lambdas);
      if (stop && stop()) return;
    }
  }

  double emit(int stage, int epoch, const FlowModel& m, double lr) {
    StageReport r{stage, epoch, validation_bpd(m), calculate_flops(m), lr};
    reports_.push_back(r);
    if (hooks_.report) hooks_.report(r);
    return r.bpd;
  }

  TrainConfig cfg_;
  TrainData data_;
  StageHooks hooks_;
  std::vector<StageReport> reports_;
  std::vector<int> stages_run_;
  std::int64_t f0_ = 0;
  long stage_steps_ = 0;
};

struct PipelineResult {
  FlowModel model;
  FlowModel stage1_model;
  FlowModel stage2_model;  // gated, before pruning
  std::vector<StageReport> reports;
  std::vector<int> stages;
  std::vector<std::string> prune_warnings;
  std::int64_t f0 = 0;
};

// Stages 1 to 5 on a freshly constructed model.
inline PipelineResult run_pipeline(const FlowConfig& fcfg, const TrainConfig& cfg, TrainData data, StageHooks hooks = {},
                                   int last_stage = 5) {
  if (last_stage < 1 || last_stage > 5) throw Error("last stage must be in [1, 5]");
  FlowModel m = make_model(fcfg, cfg.seed);
  init_priors_from_data(m, slice_batch(data.train, 0, std::min(data.train.dim(0), 256)));
  Trainer tr(cfg, std::move(data), hooks);
  PipelineResult res;
  tr.stage1(m);
  res.stage1_model = m;
  if (last_stage >= 2) {
    res.f0 = tr.stage2(m);
    res.stage2_model = m;
    PruneResult p = prune(m);
    m = std::move(p.model);
    res.prune_warnings = std::move(p.warnings);
  }
  if (last_stage >= 3) tr.stage3(m);
  if (last_stage >= 4) tr.stage4(m, tr.calibration_batch());
  if (last_stage >= 5) tr.stage5(m);
  res.model = std::move(m);
  res.reports = tr.reports();
  res.stages = tr.stages_run();
  return res;
}

}  // namespace iodf
