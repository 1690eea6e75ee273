#pragma once

// The spatial cross-scale convolution block:
//
//   x_d = reduce(x)                       1x1 conv C_in -> C_h (+BN, ReLU)
//   s_i = depthwise_{v_i}(x_d), i=1..m    same padding, shared stride
//   M   = sigmoid(1x1 conv(x_d))          m*g gate maps, same stride
//   x_e = fuse(s_1..s_m, M)               per-position, per-group weighted sum
//   y   = shortcut(x) + recover(x_e)      1x1 conv C_h -> C_out (+BN), then ReLU

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "scsc/autodiff.hpp"
#include "scsc/ops.hpp"
#include "scsc/tensor.hpp"

namespace scsc {

inline constexpr std::size_t kMinBranchKernel = 3;
inline constexpr std::size_t kMaxBranchKernel = 13;

/// Nearest positive multiple of q (ties round up), never below q.
inline std::size_t round_to_multiple(double x, std::size_t q) {
  if (q == 0) throw ConfigError("round_to_multiple: quantum must be >= 1");
  const auto k = static_cast<std::size_t>(std::floor(x / static_cast<double>(q) + 0.5));
  return std::max<std::size_t>(1, k) * q;
}

/// Hidden width C_h = expansion * channels / m, rounded to a multiple of m*g.
inline std::size_t hidden_width(double expansion, std::size_t channels, std::size_t m, std::size_t g) {
  if (m == 0 || g == 0) throw ConfigError("hidden_width: m and g must be >= 1");
  if (!(expansion > 0.0)) throw ConfigError("hidden_width: expansion must be > 0");
  return round_to_multiple(expansion * static_cast<double>(channels) / static_cast<double>(m), m * g);
}

struct ScscConfig {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::vector<std::size_t> kernels;
  std::size_t hidden = 0;
  std::size_t g = 4;
  std::size_t stride = 1;

  // Normalization / activation sites; all on for the residual CNN block.
  bool reduce_norm = true;
  bool reduce_act = true;
  bool recover_norm = true;
  bool final_act = true;
  bool residual = true;

  double eps = 1e-5;
  PadMode pad = PadMode::Zero;

  [[nodiscard]] std::size_t m() const noexcept { return kernels.size(); }

  [[nodiscard]] bool has_projection() const noexcept { return residual && (c_in != c_out || stride != 1); }

  void validate() const {
    if (c_in == 0 || c_out == 0 || hidden == 0) throw ConfigError("ScscConfig: channel counts must be >= 1");
    if (kernels.empty()) throw ConfigError("ScscConfig: need at least one branch kernel");
    for (std::size_t v : kernels) {
      if (v % 2 == 0 || v < kMinBranchKernel || v > kMaxBranchKernel) {
        throw ConfigError("ScscConfig: branch kernel " + std::to_string(v) + " must be odd and in [3,13]");
      }
    }
    if (g == 0) throw ConfigError("ScscConfig: gate groups must be >= 1");
    if (hidden % g != 0) {
      throw ConfigError("ScscConfig: hidden width " + std::to_string(hidden) + " not divisible by g=" +
                        std::to_string(g));
    }
    if (stride != 1 && stride != 2) throw ConfigError("ScscConfig: stride must be 1 or 2");
    if (!(eps > 0.0)) throw ConfigError("ScscConfig: epsilon must be > 0");
  }

  [[nodiscard]] Shape output_shape(const Shape& in) const {
    return Shape{in.n, c_out, (in.h + stride - 1) / stride, (in.w + stride - 1) / stride};
  }
};

/// Learnable tensors of one block. Instantiated with Tensor4 (values), Var
/// (tape leaves), Shape (expected shapes) or indices.
template <class T>
struct ScscParamsT {
  T w_reduce{};
  T b_reduce{};
  std::optional<T> bn_reduce_gamma;
  std::optional<T> bn_reduce_beta;
  std::vector<T> w_branch;
  std::vector<T> b_branch;
  T w_gate{};
  T b_gate{};
  T w_recover{};
  T b_recover{};
  std::optional<T> bn_recover_gamma;
  std::optional<T> bn_recover_beta;
  std::optional<T> w_shortcut;
  std::optional<T> b_shortcut;

  /// Visits (name, field) in the fixed checkpoint order.
  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  template <class U, class F>
  [[nodiscard]] ScscParamsT<U> map(F&& f) const {
    ScscParamsT<U> out;
    auto opt = [&](const std::optional<T>& v) -> std::optional<U> {
      if (!v) return std::nullopt;
      return f(*v);
    };
    out.w_reduce = f(w_reduce);
    out.b_reduce = f(b_reduce);
    out.bn_reduce_gamma = opt(bn_reduce_gamma);
    out.bn_reduce_beta = opt(bn_reduce_beta);
    for (const T& w : w_branch) out.w_branch.push_back(f(w));
    for (const T& b : b_branch) out.b_branch.push_back(f(b));
    out.w_gate = f(w_gate);
    out.b_gate = f(b_gate);
    out.w_recover = f(w_recover);
    out.b_recover = f(b_recover);
    out.bn_recover_gamma = opt(bn_recover_gamma);
    out.bn_recover_beta = opt(bn_recover_beta);
    out.w_shortcut = opt(w_shortcut);
    out.b_shortcut = opt(b_shortcut);
    return out;
  }

 private:
  template <class Self, class F>
  static void visit(Self& s, F& f) {
    f("reduce.weight", s.w_reduce);
    f("reduce.bias", s.b_reduce);
    if (s.bn_reduce_gamma) f("reduce.bn.gamma", *s.bn_reduce_gamma);
    if (s.bn_reduce_beta) f("reduce.bn.beta", *s.bn_reduce_beta);
    for (std::size_t i = 0; i < s.w_branch.size(); ++i) {
      f("branch" + std::to_string(i) + ".weight", s.w_branch[i]);
      f("branch" + std::to_string(i) + ".bias", s.b_branch[i]);
    }
    f("gate.weight", s.w_gate);
    f("gate.bias", s.b_gate);
    f("recover.weight", s.w_recover);
    f("recover.bias", s.b_recover);
    if (s.bn_recover_gamma) f("recover.bn.gamma", *s.bn_recover_gamma);
    if (s.bn_recover_beta) f("recover.bn.beta", *s.bn_recover_beta);
    if (s.w_shortcut) f("shortcut.weight", *s.w_shortcut);
    if (s.b_shortcut) f("shortcut.bias", *s.b_shortcut);
  }
};

using ScscParams = ScscParamsT<Tensor4>;
using ScscParamVars = ScscParamsT<Var>;
using ScscParamShapes = ScscParamsT<Shape>;

inline ScscParamShapes scsc_param_shapes(const ScscConfig& cfg) {
  cfg.validate();
  const std::size_t ch = cfg.hidden;
  auto vec = [](std::size_t c) { return Shape{1, c, 1, 1}; };
  ScscParamShapes s;
  s.w_reduce = Shape{ch, cfg.c_in, 1, 1};
  s.b_reduce = vec(ch);
  if (cfg.reduce_norm) {
    s.bn_reduce_gamma = vec(ch);
    s.bn_reduce_beta = vec(ch);
  }
  for (std::size_t v : cfg.kernels) {
    s.w_branch.push_back(Shape{ch, 1, v, v});
    s.b_branch.push_back(vec(ch));
  }
  s.w_gate = Shape{cfg.m() * cfg.g, ch, 1, 1};
  s.b_gate = vec(cfg.m() * cfg.g);
  s.w_recover = Shape{cfg.c_out, ch, 1, 1};
  s.b_recover = vec(cfg.c_out);
  if (cfg.recover_norm) {
    s.bn_recover_gamma = vec(cfg.c_out);
    s.bn_recover_beta = vec(cfg.c_out);
  }
  if (cfg.has_projection()) {
    s.w_shortcut = Shape{cfg.c_out, cfg.c_in, 1, 1};
    s.b_shortcut = vec(cfg.c_out);
  }
  return s;
}

inline std::size_t scsc_param_count(const ScscConfig& cfg) {
  std::size_t total = 0;
  scsc_param_shapes(cfg).for_each([&](const std::string&, const Shape& s) { total += s.size(); });
  return total;
}

/// Uniform(-sqrt(3/fan_in), sqrt(3/fan_in)) weights; zero biases (gates start at 0.5);
/// unit/zero norm affine.
inline Tensor4 fan_in_uniform(const Shape& s, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(s.c * s.h * s.w);
  const double bound = std::sqrt(3.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor4 t(s);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline ScscParams init_scsc_params(const ScscConfig& cfg, std::mt19937_64& rng) {
  const ScscParamShapes s = scsc_param_shapes(cfg);
  ScscParams p;
  p.w_reduce = fan_in_uniform(s.w_reduce, rng);
  p.b_reduce = Tensor4(s.b_reduce);
  if (s.bn_reduce_gamma) {
    p.bn_reduce_gamma = Tensor4(*s.bn_reduce_gamma, 1.0);
    p.bn_reduce_beta = Tensor4(*s.bn_reduce_beta);
  }
  for (std::size_t i = 0; i < s.w_branch.size(); ++i) {
    // Depthwise fan-in is the v*v window.
    p.w_branch.push_back(fan_in_uniform(s.w_branch[i], rng));
    p.b_branch.push_back(Tensor4(s.b_branch[i]));
  }
  p.w_gate = fan_in_uniform(s.w_gate, rng);
  p.b_gate = Tensor4(s.b_gate);
  p.w_recover = fan_in_uniform(s.w_recover, rng);
  p.b_recover = Tensor4(s.b_recover);
  if (s.bn_recover_gamma) {
    p.bn_recover_gamma = Tensor4(*s.bn_recover_gamma, 1.0);
    p.bn_recover_beta = Tensor4(*s.bn_recover_beta);
  }
  if (s.w_shortcut) {
    p.w_shortcut = fan_in_uniform(*s.w_shortcut, rng);
    p.b_shortcut = Tensor4(*s.b_shortcut);
  }
  return p;
}

/// Throws unless every tensor in p has the shape cfg requires.
inline void check_params(const ScscParams& p, const ScscConfig& cfg) {
  const ScscParamShapes want = scsc_param_shapes(cfg);
  std::vector<std::pair<std::string, Shape>> expected;
  want.for_each([&](const std::string& name, const Shape& s) { expected.emplace_back(name, s); });
  std::size_t i = 0;
  p.for_each([&](const std::string& name, const Tensor4& t) {
    if (i >= expected.size() || expected[i].first != name) {
      throw DimensionError("ScscParams: unexpected tensor '" + name + "' for this config");
    }
    if (t.shape() != expected[i].second) {
      throw DimensionError("ScscParams: '" + name + "' has shape " + t.shape().str() + ", expected " +
                           expected[i].second.str());
    }
    ++i;
  });
  if (i != expected.size()) throw DimensionError("ScscParams: missing tensor '" + expected[i].first + "'");
}

// ---------------------------------------------------------------------------
// Normalization state

enum class NormMode { Train, Eval };

struct RunningStats {
  Tensor4 mean;
  Tensor4 var;

  static RunningStats fresh(std::size_t channels) {
    return RunningStats{Tensor4(Shape{1, channels, 1, 1}, 0.0), Tensor4(Shape{1, channels, 1, 1}, 1.0)};
  }
};

struct ForwardContext {
  NormMode mode = NormMode::Train;
  double momentum = 0.1;
};

/// Batchnorm that updates `running` in train mode and reads it in eval mode.
inline Var apply_batchnorm(const Var& x, const Var& gamma, const Var& beta, double eps, const ForwardContext& ctx,
                           RunningStats* running) {
  if (ctx.mode == NormMode::Eval) {
    if (running == nullptr) {
      const RunningStats unit = RunningStats::fresh(x.shape.c);
      return ad::batchnorm_infer(x, gamma, beta, unit.mean, unit.var, eps);
    }
    return ad::batchnorm_infer(x, gamma, beta, running->mean, running->var, eps);
  }
  BatchNormResult stats;
  Var y = ad::batchnorm_train(x, gamma, beta, eps, &stats);
  if (running != nullptr) {
    const double count = static_cast<double>(x.shape.n * x.shape.plane());
    const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
    for (std::size_t c = 0; c < x.shape.c; ++c) {
      running->mean[c] = (1.0 - ctx.momentum) * running->mean[c] + ctx.momentum * stats.mean[c];
      running->var[c] = (1.0 - ctx.momentum) * running->var[c] + ctx.momentum * stats.var[c] * unbias;
    }
  }
  return y;
}

struct ScscNormState {
  RunningStats reduce;
  RunningStats recover;

  static ScscNormState fresh(const ScscConfig& cfg) {
    return ScscNormState{RunningStats::fresh(cfg.hidden), RunningStats::fresh(cfg.c_out)};
  }
};

// ---------------------------------------------------------------------------
// The four steps, recorded on a tape

inline Var channel_reduce(const Var& x, const ScscParamVars& p, const ScscConfig& cfg, const ForwardContext& ctx = {},
                          ScscNormState* state = nullptr) {
  if (x.shape.c != cfg.c_in) {
    throw DimensionError("channel_reduce: input has " + std::to_string(x.shape.c) + " channels, block expects " +
                         std::to_string(cfg.c_in));
  }
  Var y = ad::conv2d_pointwise(x, p.w_reduce, p.b_reduce);
  if (cfg.reduce_norm) {
    y = apply_batchnorm(y, *p.bn_reduce_gamma, *p.bn_reduce_beta, cfg.eps, ctx,
                        state != nullptr ? &state->reduce : nullptr);
  }
  if (cfg.reduce_act) y = ad::relu(y);
  return y;
}

inline std::vector<Var> cross_scale_encode(const Var& xd, const ScscParamVars& p, const ScscConfig& cfg) {
  cfg.validate();
  if (xd.shape.c != cfg.hidden) {
    throw DimensionError("cross_scale_encode: expected " + std::to_string(cfg.hidden) + " channels, got " +
                         std::to_string(xd.shape.c));
  }
  std::vector<Var> branches;
  branches.reserve(cfg.m());
  for (std::size_t i = 0; i < cfg.m(); ++i) {
    const ConvSpec spec{cfg.kernels[i], cfg.stride, cfg.pad};
    branches.push_back(ad::conv2d_depthwise(xd, p.w_branch[i], p.b_branch[i], spec));
  }
  return branches;
}

/// m*g sigmoid gate maps computed from x_d with the branches' stride.
inline Var spatial_embed_gates(const Var& xd, const ScscParamVars& p, const ScscConfig& cfg) {
  if (xd.shape.c != cfg.hidden) {
    throw DimensionError("spatial_embed_gates: expected " + std::to_string(cfg.hidden) + " channels, got " +
                         std::to_string(xd.shape.c));
  }
  return ad::sigmoid(ad::conv2d_pointwise(xd, p.w_gate, p.b_gate, cfg.stride));
}

inline Var channel_recover(const Var& xe, const ScscParamVars& p, const ScscConfig& cfg,
                           const ForwardContext& ctx = {}, ScscNormState* state = nullptr) {
  if (xe.shape.c != cfg.hidden) {
    throw DimensionError("channel_recover: expected " + std::to_string(cfg.hidden) + " channels, got " +
                         std::to_string(xe.shape.c));
  }
  Var y = ad::conv2d_pointwise(xe, p.w_recover, p.b_recover);
  if (cfg.recover_norm) {
    y = apply_batchnorm(y, *p.bn_recover_gamma, *p.bn_recover_beta, cfg.eps, ctx,
                        state != nullptr ? &state->recover : nullptr);
  }
  return y;
}

inline Var scsc_block_forward(const Var& x, const ScscParamVars& p, const ScscConfig& cfg,
                              const ForwardContext& ctx = {}, ScscNormState* state = nullptr) {
  cfg.validate();
  const Var xd = channel_reduce(x, p, cfg, ctx, state);
  const std::vector<Var> branches = cross_scale_encode(xd, p, cfg);
  const Var gates = spatial_embed_gates(xd, p, cfg);
  const Var xe = ad::spatial_fuse(branches, gates, cfg.g);
  Var y = channel_recover(xe, p, cfg, ctx, state);
  if (cfg.residual) {
    const Var shortcut = cfg.has_projection() ? ad::conv2d_pointwise(x, *p.w_shortcut, *p.b_shortcut, cfg.stride) : x;
    y = ad::add(shortcut, y);
  }
  if (cfg.final_act) y = ad::relu(y);
  return y;
}

/// Registers every tensor of p as a leaf (or constant) on the tape.
inline ScscParamVars bind_params(Tape& tape, const ScscParams& p, bool differentiable = true) {
  return p.map<Var>([&](const Tensor4& t) { return differentiable ? tape.leaf(t) : tape.constant(t); });
}

// ---------------------------------------------------------------------------
// Plain-tensor entry points (train-mode norms, no running statistics)

inline Tensor4 channel_reduce(const Tensor4& x, const ScscParams& p, const ScscConfig& cfg) {
  Tape tape;
  return channel_reduce(tape.constant(x), bind_params(tape, p, false), cfg).value();
}

inline std::vector<Tensor4> cross_scale_encode(const Tensor4& xd, const ScscParams& p, const ScscConfig& cfg) {
  Tape tape;
  std::vector<Tensor4> out;
  for (const Var& v : cross_scale_encode(tape.constant(xd), bind_params(tape, p, false), cfg)) out.push_back(v.value());
  return out;
}

inline Tensor4 spatial_embed_gates(const Tensor4& xd, const ScscParams& p, const ScscConfig& cfg) {
  Tape tape;
  return spatial_embed_gates(tape.constant(xd), bind_params(tape, p, false), cfg).value();
}

inline Tensor4 channel_recover(const Tensor4& xe, const ScscParams& p, const ScscConfig& cfg) {
  Tape tape;
  return channel_recover(tape.constant(xe), bind_params(tape, p, false), cfg).value();
}

inline Tensor4 scsc_block_forward(const Tensor4& x, const ScscParams& p, const ScscConfig& cfg) {
  check_params(p, cfg);
  Tape tape;
  return scsc_block_forward(tape.constant(x), bind_params(tape, p, false), cfg).value();
}

}  // namespace scsc
