#pragma once

// Reverse-mode gradient tape over the fixed op set used by the flow.

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "iodf/conv.hpp"
#include "iodf/logistic.hpp"
#include "iodf/quant.hpp"
#include "iodf/tensor.hpp"

namespace iodf {

enum class OpKind {
  kConstant,
  kParameter,
  kConv2d,
  kRelu,
  kAdd,
  kScatterAdd,
  kFakeQuant,
  kRoundSte,
  kGateMul,
  kGatePenalty,
  kScale,
  kAddConst,
  kSqueeze,
  kSlice,
  kConcat,
  kBroadcast,
  kLogistic,
  kSum,
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class GradientTape {
 public:
  using Backward = std::function<void(GradientTape&, Var)>;

  // With tracking off, parameters are plain constants and no adjoints are kept.
  explicit GradientTape(bool track = true) : track_(track) {}

  Var constant(Tensor<T> value) { return push(std::move(value), nullptr, false, OpKind::kConstant, nullptr); }

  // Leaf bound to external storage; repeated calls with the same tensor return one leaf.
  Var parameter(const Tensor<T>& value) {
    auto it = params_.find(&value);
    if (it != params_.end()) return it->second;
    Var v = push(Tensor<T>(), &value, track_, OpKind::kParameter, nullptr);
    params_.emplace(&value, v);
    return v;
  }

  Var record(Tensor<T> value, bool needs_grad, OpKind kind, Backward backward) {
    if (needs_grad && !backward) throw Error("tape: differentiable op recorded without an adjoint");
    if (!needs_grad) backward = nullptr;
    return push(std::move(value), nullptr, needs_grad, kind, std::move(backward));
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.ref ? *n.ref : n.value;
  }
  bool needs_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).needs_grad; }
  OpKind kind(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).kind; }
  std::size_t size() const { return nodes_.size(); }

  Tensor<T>& grad(Var v) {
    Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.grad.size() != value(v).size() || n.grad.shape() != value(v).shape()) n.grad = Tensor<T>(value(v).shape());
    return n.grad;
  }
  bool has_grad(Var v) const { return !nodes_.at(static_cast<std::size_t>(v.id)).grad.empty(); }

  // Seeds d(loss)/d(loss) = 1 for a scalar loss and runs every adjoint in reverse.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw Error("tape: backward needs a scalar loss");
    grad(loss)[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, Var{i});
    }
  }

  // Gradient accumulated at the leaf bound to `param`, or nullptr if it received none.
  const Tensor<T>* param_grad(const Tensor<T>& param) const {
    auto it = params_.find(&param);
    if (it == params_.end()) return nullptr;
    const Node& n = nodes_[static_cast<std::size_t>(it->second.id)];
    return n.grad.empty() ? nullptr : &n.grad;
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    bool needs_grad = false;
    OpKind kind = OpKind::kConstant;
    Backward backward;
  };

  Var push(Tensor<T> value, const Tensor<T>* ref, bool needs_grad, OpKind kind, Backward backward) {
    nodes_.push_back(Node{std::move(value), ref, Tensor<T>(), needs_grad, kind, std::move(backward)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool track_ = true;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, Var> params_;
};

namespace ad {

template <class T>
void accumulate(GradientTape<T>& tape, Var target, const Tensor<T>& g) {
  if (!tape.needs_grad(target)) return;
  Tensor<T>& dst = tape.grad(target);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <class T>
Var conv2d(GradientTape<T>& tape, Var x, Var w, Var b) {
  Tensor<T> y = iodf::conv2d(tape.value(x), tape.value(w), tape.value(b));
  const bool ng = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
  return tape.record(std::move(y), ng, OpKind::kConv2d, [x, w, b](GradientTape<T>& t, Var out) {
    ConvGrads<T> g = conv2d_backward(t.value(x), t.value(w), t.grad(out), t.needs_grad(x));
    accumulate(t, x, g.dx);
    accumulate(t, w, g.dweight);
    accumulate(t, b, g.dbias);
  });
}

template <class T>
Var relu(GradientTape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  return tape.record(std::move(y), tape.needs_grad(x), OpKind::kRelu, [x](GradientTape<T>& t, Var out) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& go = t.grad(out);
    Tensor<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (xv[i] > T(0)) gx[i] += go[i];
  });
}

template <class T>
Var add(GradientTape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  if (av.shape() != bv.shape()) throw Error("add: shape mismatch");
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  const bool ng = tape.needs_grad(a) || tape.needs_grad(b);
  return tape.record(std::move(y), ng, OpKind::kAdd, [a, b](GradientTape<T>& t, Var out) {
    const Tensor<T> go = t.grad(out);
    accumulate(t, a, go);
    accumulate(t, b, go);
  });
}

// base + src placed at channel indices `kept` of base. Empty `kept` with equal
// channel counts means the identity placement.
template <class T>
Var scatter_add(GradientTape<T>& tape, Var base, Var src, std::vector<int> kept) {
  const Tensor<T>& bv = tape.value(base);
  const Tensor<T>& sv = tape.value(src);
  require_rank4(bv.shape(), "scatter_add");
  require_rank4(sv.shape(), "scatter_add");
  const int n = bv.dim(0), c = bv.dim(1), cs = sv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(bv.dim(2)) * bv.dim(3);
  if (kept.empty()) {
    if (cs != c) throw Error("scatter_add: identity placement needs equal channel counts");
    kept.resize(static_cast<std::size_t>(c));
    std::iota(kept.begin(), kept.end(), 0);
  }
  if (kept.size() != static_cast<std::size_t>(cs)) throw Error("scatter_add: index list length mismatch");
  for (int k : kept)
    if (k < 0 || k >= c) throw Error("scatter_add: index out of range");
  Tensor<T> y = bv;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < cs; ++j) {
      T* dst = y.data() + (static_cast<std::size_t>(i) * c + kept[j]) * hw;
      const T* s = sv.data() + (static_cast<std::size_t>(i) * cs + j) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] += s[p];
    }
  const bool ng = tape.needs_grad(base) || tape.needs_grad(src);
  return tape.record(std::move(y), ng, OpKind::kScatterAdd,
                     [base, src, kept = std::move(kept), n, c, cs, hw](GradientTape<T>& t, Var out) {
                       const Tensor<T> go = t.grad(out);
                       accumulate(t, base, go);
                       if (!t.needs_grad(src)) return;
                       Tensor<T>& gs = t.grad(src);
                       for (int i = 0; i < n; ++i)
                         for (int j = 0; j < cs; ++j) {
                           const T* g = go.data() + (static_cast<std::size_t>(i) * c + kept[j]) * hw;
                           T* d = gs.data() + (static_cast<std::size_t>(i) * cs + j) * hw;
                           for (std::size_t p = 0; p < hw; ++p) d[p] += g[p];
                         }
                     });
}

// LSQ fake quantizer. `scale` holds one value (per-tensor) or one per slice of axis 0.
// `channels` is C in the gradient re-scaling factor 1/sqrt(C * Q_P).
template <class T>
Var fake_quant(GradientTape<T>& tape, Var x, Var scale, Signedness sign, int channels) {
  QuantizerParams<T> p{tape.value(scale).vec(), sign};
  Tensor<T> y = fake_quantize(tape.value(x), p);
  const bool ng = tape.needs_grad(x) || tape.needs_grad(scale);
  return tape.record(std::move(y), ng, OpKind::kFakeQuant, [x, scale, sign, channels](GradientTape<T>& t, Var out) {
    QuantizerParams<T> p{t.value(scale).vec(), sign};
    QuantizerGrad<T> g = quantizer_backward(t.value(x), p, t.grad(out), channels);
    accumulate(t, x, g.grad_r);
    if (t.needs_grad(scale)) {
      Tensor<T>& gs = t.grad(scale);
      for (std::size_t i = 0; i < g.grad_scale.size(); ++i) gs[i] += g.grad_scale[i];
    }
  });
}

// round() forward, identity backward.
template <class T>
Var round_ste(GradientTape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = round_half_away(xv[i]);
  return tape.record(std::move(y), tape.needs_grad(x), OpKind::kRoundSte,
                     [x](GradientTape<T>& t, Var out) { accumulate(t, x, t.grad(out)); });
}

// y[n][c] = I(g_c > 0.5) * x[n][c]; the binarization passes gradients straight through.
template <class T>
Var gate_mul(GradientTape<T>& tape, Var x, Var gate) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& gv = tape.value(gate);
  require_rank4(xv.shape(), "gate_mul");
  if (gv.size() != static_cast<std::size_t>(xv.dim(1))) throw Error("gate_mul: gate length mismatch");
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor<T> y(xv.shape());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T on = gate_on(static_cast<double>(gv[ch])) ? T(1) : T(0);
      const std::size_t o = (static_cast<std::size_t>(i) * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) y[o + p] = on * xv[o + p];
    }
  const bool ng = tape.needs_grad(x) || tape.needs_grad(gate);
  return tape.record(std::move(y), ng, OpKind::kGateMul, [x, gate, n, c, hw](GradientTape<T>& t, Var out) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& gv = t.value(gate);
    const Tensor<T> go = t.grad(out);
    if (t.needs_grad(x)) {
      Tensor<T>& gx = t.grad(x);
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
          const T on = gate_on(static_cast<double>(gv[ch])) ? T(1) : T(0);
          const std::size_t o = (static_cast<std::size_t>(i) * c + ch) * hw;
          for (std::size_t p = 0; p < hw; ++p) gx[o + p] += on * go[o + p];
        }
    }
    if (t.needs_grad(gate)) {
      Tensor<T>& gg = t.grad(gate);
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t o = (static_cast<std::size_t>(i) * c + ch) * hw;
          T s = 0;
          for (std::size_t p = 0; p < hw; ++p) s += go[o + p] * xv[o + p];
          gg[ch] += s;
        }
    }
  });
}

// lambda * ||I(g > 0.5)||_1 with d/dg = lambda (straight-through).
template <class T>
Var gate_penalty(GradientTape<T>& tape, Var gate, double lambda) {
  const Tensor<T>& gv = tape.value(gate);
  double count = 0;
  for (std::size_t i = 0; i < gv.size(); ++i) count += gate_on(static_cast<double>(gv[i])) ? 1 : 0;
  Tensor<T> y({1}, static_cast<T>(lambda * count));
  return tape.record(std::move(y), tape.needs_grad(gate), OpKind::kGatePenalty,
                     [gate, lambda](GradientTape<T>& t, Var out) {
                       const T go = t.grad(out)[0];
                       Tensor<T>& gg = t.grad(gate);
                       for (std::size_t i = 0; i < gg.size(); ++i) gg[i] += static_cast<T>(lambda) * go;
                     });
}

template <class T>
Var scale(GradientTape<T>& tape, Var x, double factor) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(factor) * xv[i];
  return tape.record(std::move(y), tape.needs_grad(x), OpKind::kScale, [x, factor](GradientTape<T>& t, Var out) {
    const Tensor<T>& go = t.grad(out);
    Tensor<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += static_cast<T>(factor) * go[i];
  });
}

template <class T>
Var add_const(GradientTape<T>& tape, Var x, double c) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] + static_cast<T>(c);
  return tape.record(std::move(y), tape.needs_grad(x), OpKind::kAddConst,
                     [x](GradientTape<T>& t, Var out) { accumulate(t, x, t.grad(out)); });
}

template <class T>
Var squeeze(GradientTape<T>& tape, Var x) {
  Tensor<T> y = iodf::squeeze(tape.value(x));
  return tape.record(std::move(y), tape.needs_grad(x), OpKind::kSqueeze,
                     [x](GradientTape<T>& t, Var out) { accumulate(t, x, iodf::unsqueeze(t.grad(out))); });
}

template <class T>
Var slice_channels(GradientTape<T>& tape, Var x, int c0, int c1) {
  Tensor<T> y = iodf::slice_channels(tape.value(x), c0, c1);
  return tape.record(std::move(y), tape.needs_grad(x), OpKind::kSlice, [x, c0, c1](GradientTape<T>& t, Var out) {
    const Tensor<T>& go = t.grad(out);
    Tensor<T>& gx = t.grad(x);
    const int n = gx.dim(0), c = gx.dim(1), w = c1 - c0;
    const std::size_t hw = static_cast<std::size_t>(gx.dim(2)) * gx.dim(3);
    for (int i = 0; i < n; ++i) {
      const T* s = go.data() + static_cast<std::size_t>(i) * w * hw;
      T* d = gx.data() + (static_cast<std::size_t>(i) * c + c0) * hw;
      for (std::size_t p = 0; p < w * hw; ++p) d[p] += s[p];
    }
  });
}

template <class T>
Var concat_channels(GradientTape<T>& tape, Var a, Var b) {
  Tensor<T> y = iodf::concat_channels(tape.value(a), tape.value(b));
  const int ca = tape.value(a).dim(1), cb = tape.value(b).dim(1);
  const bool ng = tape.needs_grad(a) || tape.needs_grad(b);
  return tape.record(std::move(y), ng, OpKind::kConcat, [a, b, ca, cb](GradientTape<T>& t, Var out) {
    const Tensor<T>& go = t.grad(out);
    if (t.needs_grad(a)) accumulate(t, a, iodf::slice_channels(go, 0, ca));
    if (t.needs_grad(b)) accumulate(t, b, iodf::slice_channels(go, ca, ca + cb));
  });
}

// Per-channel parameter [C] broadcast to an NCHW shape.
template <class T>
Var broadcast_channels(GradientTape<T>& tape, Var p, const Shape& like) {
  require_rank4(like, "broadcast_channels");
  const Tensor<T>& pv = tape.value(p);
  const int n = like[0], c = like[1];
  if (pv.size() != static_cast<std::size_t>(c)) throw Error("broadcast_channels: size mismatch");
  const std::size_t hw = static_cast<std::size_t>(like[2]) * like[3];
  Tensor<T> y(like);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      std::fill_n(y.data() + (static_cast<std::size_t>(i) * c + ch) * hw, hw, pv[ch]);
  return tape.record(std::move(y), tape.needs_grad(p), OpKind::kBroadcast, [p, n, c, hw](GradientTape<T>& t, Var out) {
    const Tensor<T>& go = t.grad(out);
    Tensor<T>& gp = t.grad(p);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* g = go.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
        T s = 0;
        for (std::size_t q = 0; q < hw; ++q) s += g[q];
        gp[ch] += s;
      }
  });
}

// Sum over all elements of log2 P(z | mu, exp(log_s)) under the discretized logistic.
template <class T>
Var logistic_log2_sum(GradientTape<T>& tape, Var z, Var mu, Var log_s) {
  const Tensor<T>& zv = tape.value(z);
  const Tensor<T>& mv = tape.value(mu);
  const Tensor<T>& sv = tape.value(log_s);
  if (zv.shape() != mv.shape() || zv.shape() != sv.shape()) throw Error("logistic_log2_sum: shape mismatch");
  double total = 0;
  for (std::size_t i = 0; i < zv.size(); ++i)
    total += logistic_log_mass(static_cast<double>(zv[i]), static_cast<double>(mv[i]), static_cast<double>(sv[i])).value;
  Tensor<T> y({1}, static_cast<T>(total / std::numbers::ln2));
  const bool ng = tape.needs_grad(z) || tape.needs_grad(mu) || tape.needs_grad(log_s);
  return tape.record(std::move(y), ng, OpKind::kLogistic, [z, mu, log_s](GradientTape<T>& t, Var out) {
    const double go = static_cast<double>(t.grad(out)[0]) / std::numbers::ln2;
    const Tensor<T>& zv = t.value(z);
    const Tensor<T>& mv = t.value(mu);
    const Tensor<T>& sv = t.value(log_s);
    Tensor<T>* gz = t.needs_grad(z) ? &t.grad(z) : nullptr;
    Tensor<T>* gm = t.needs_grad(mu) ? &t.grad(mu) : nullptr;
    Tensor<T>* gs = t.needs_grad(log_s) ? &t.grad(log_s) : nullptr;
    for (std::size_t i = 0; i < zv.size(); ++i) {
      const LogMass m = logistic_log_mass(static_cast<double>(zv[i]), static_cast<double>(mv[i]),
                                          static_cast<double>(sv[i]));
      if (gz) (*gz)[i] += static_cast<T>(go * m.d_z);
      if (gm) (*gm)[i] += static_cast<T>(go * m.d_mu);
      if (gs) (*gs)[i] += static_cast<T>(go * m.d_log_s);
    }
  });
}

template <class T>
Var sum(GradientTape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  double s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += static_cast<double>(xv[i]);
  return tape.record(Tensor<T>({1}, static_cast<T>(s)), tape.needs_grad(x), OpKind::kSum,
                     [x](GradientTape<T>& t, Var out) {
                       const T go = t.grad(out)[0];
                       Tensor<T>& gx = t.grad(x);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
                     });
}

}  // namespace ad
}  // namespace iodf
