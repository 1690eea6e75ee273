#pragma once

// A complete network instantiated from an ArchSpec.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "scsc/arch.hpp"
#include "scsc/autodiff.hpp"
#include "scsc/scsc_block.hpp"

namespace scsc {

inline constexpr double kNormEps = 1e-5;

class Network {
 public:
  Network(ArchSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    validate(spec_);
    std::mt19937_64 rng(seed);
    build(rng);
  }

  [[nodiscard]] const ArchSpec& spec() const noexcept { return spec_; }
  [[nodiscard]] std::vector<NamedTensor>& parameters() noexcept { return params_; }
  [[nodiscard]] const std::vector<NamedTensor>& parameters() const noexcept { return params_; }

  /// Number of learnable scalars, by enumerating the instantiated tensors.
  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value.size();
    return total;
  }

  /// One tape node per parameter, in parameters() order.
  [[nodiscard]] std::vector<Var> bind(Tape& tape, bool differentiable = true) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(differentiable ? tape.leaf(p.value) : tape.constant(p.value));
    return vars;
  }

  /// Logits of shape (n, classes, 1, 1). Train mode updates batchnorm running statistics.
  Var forward(std::span<const Var> vars, const Var& x, const ForwardContext& ctx,
              std::vector<Shape>* stage_shapes = nullptr) {
    if (vars.size() != params_.size()) {
      throw DimensionError("Network::forward: got " + std::to_string(vars.size()) + " parameter vars, expected " +
                           std::to_string(params_.size()));
    }
    if (x.shape.c != spec_.in_c) {
      throw DimensionError("Network::forward: input has " + std::to_string(x.shape.c) + " channels, network expects " +
                           std::to_string(spec_.in_c));
    }
    Var y = x;
    for (auto& l : stem_) y = run_conv(l, y, vars, ctx);
    if (stem_patch_) y = run_patch(*stem_patch_, y, vars);
    for (auto& stage : stages_) {
      if (stage.merge) y = run_patch(*stage.merge, y, vars);
      for (auto& b : stage.blocks) y = run_block(b, y, vars, ctx);
      if (stage_shapes != nullptr) stage_shapes->push_back(y.shape);
    }
    if (head_conv_) y = run_conv(*head_conv_, y, vars, ctx);
    if (head_ln_) y = ad::layernorm_channels(y, vars[head_ln_->gamma], vars[head_ln_->beta], kNormEps);
    y = ad::global_avg_pool(y);
    return ad::linear(y, vars[fc_w_], vars[fc_b_]);
  }

  /// Forward without gradients.
  Tensor4 predict(const Tensor4& x, NormMode mode = NormMode::Eval, std::vector<Shape>* stage_shapes = nullptr) {
    Tape tape;
    const std::vector<Var> vars = bind(tape, false);
    return forward(vars, tape.constant(x), ForwardContext{mode}, stage_shapes).value();
  }

 private:
  struct Affine {
    std::size_t gamma = 0;
    std::size_t beta = 0;
  };

  struct ConvUnit {
    StemLayer::Kind kind = StemLayer::Kind::Dense;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t w = 0;
    std::size_t b = 0;
    Affine bn;
    RunningStats stats;
  };

  struct PatchUnit {
    std::size_t ratio = 1;
    std::size_t w = 0;
    std::size_t b = 0;
    Affine ln;
  };

  struct BlockUnit {
    ScscConfig cfg;
    ScscParamsT<std::size_t> p;
    ScscNormState state;
    // Swin style only.
    Affine ln1;
    Affine ln2;
    std::size_t fc1_w = 0, fc1_b = 0, fc2_w = 0, fc2_b = 0;
  };

  struct StageUnit {
    std::optional<PatchUnit> merge;
    std::vector<BlockUnit> blocks;
  };

  std::size_t add(std::string name, Tensor4 value) {
    params_.push_back(NamedTensor{std::move(name), std::move(value)});
    return params_.size() - 1;
  }

  Affine add_affine(const std::string& prefix, std::size_t c) {
    Affine a;
    a.gamma = add(prefix + ".gamma", Tensor4(Shape{1, c, 1, 1}, 1.0));
    a.beta = add(prefix + ".beta", Tensor4(Shape{1, c, 1, 1}));
    return a;
  }

  std::size_t add_weight(const std::string& name, Shape s, std::mt19937_64& rng) {
    return add(name, fan_in_uniform(s, rng));
  }

  std::size_t add_bias(const std::string& name, std::size_t c) { return add(name, Tensor4(Shape{1, c, 1, 1})); }

  ConvUnit make_conv(const std::string& prefix, StemLayer::Kind kind, std::size_t c_in, std::size_t c_out,
                     std::size_t kernel, std::size_t stride, std::mt19937_64& rng) {
    ConvUnit u;
    u.kind = kind;
    u.kernel = kernel;
    u.stride = stride;
    const Shape ws = kind == StemLayer::Kind::Dense ? Shape{c_out, c_in, kernel, kernel} : Shape{c_out, 1, kernel, kernel};
    u.w = add_weight(prefix + ".weight", ws, rng);
    u.b = add_bias(prefix + ".bias", c_out);
    u.bn = add_affine(prefix + ".bn", c_out);
    u.stats = RunningStats::fresh(c_out);
    return u;
  }

  PatchUnit make_patch(const std::string& prefix, std::size_t c_in, std::size_t r, std::size_t dim,
                       std::mt19937_64& rng) {
    PatchUnit u;
    u.ratio = r;
    u.w = add_weight(prefix + ".weight", Shape{dim, c_in * r * r, 1, 1}, rng);
    u.b = add_bias(prefix + ".bias", dim);
    u.ln = add_affine(prefix + ".ln", dim);
    return u;
  }

  BlockUnit make_block(const std::string& prefix, const ScscConfig& cfg, std::mt19937_64& rng) {
    BlockUnit u;
    u.cfg = cfg;
    if (spec_.style == BlockStyle::Swin) u.ln1 = add_affine(prefix + ".ln1", cfg.c_in);
    ScscParams init = init_scsc_params(cfg, rng);
    std::vector<std::size_t> ids;
    init.for_each([&](const std::string& name, Tensor4& t) { ids.push_back(add(prefix + "." + name, std::move(t))); });
    u.p = init.map<std::size_t>([](const Tensor4&) { return std::size_t{0}; });
    std::size_t k = 0;
    u.p.for_each([&](const std::string&, std::size_t& id) { id = ids[k++]; });
    u.state = ScscNormState::fresh(cfg);
    if (spec_.style == BlockStyle::Swin) {
      const std::size_t c = cfg.c_out;
      const std::size_t hidden = c * spec_.mlp_ratio;
      u.ln2 = add_affine(prefix + ".ln2", c);
      u.fc1_w = add_weight(prefix + ".mlp.fc1.weight", Shape{hidden, c, 1, 1}, rng);
      u.fc1_b = add_bias(prefix + ".mlp.fc1.bias", hidden);
      u.fc2_w = add_weight(prefix + ".mlp.fc2.weight", Shape{c, hidden, 1, 1}, rng);
      u.fc2_b = add_bias(prefix + ".mlp.fc2.bias", c);
    }
    return u;
  }

  void build(std::mt19937_64& rng) {
    std::size_t c = spec_.in_c;
    if (spec_.stem.kind == StemSpec::Kind::Conv) {
      for (std::size_t i = 0; i < spec_.stem.layers.size(); ++i) {
        const StemLayer& l = spec_.stem.layers[i];
        stem_.push_back(make_conv("stem." + std::to_string(i), l.kind, c, l.out, l.kernel, l.stride, rng));
        c = l.out;
      }
    } else {
      stem_patch_ = make_patch("stem.patch", c, spec_.stem.patch, spec_.stem.dim, rng);
      c = spec_.stem.dim;
    }
    for (std::size_t k = 0; k < spec_.stages.size(); ++k) {
      const StageSpec& s = spec_.stages[k];
      const std::string prefix = "stage" + std::to_string(k + 1);
      StageUnit stage;
      if (s.downsample == Downsample::PatchMerge) {
        stage.merge = make_patch(prefix + ".merge", c, s.merge_ratio, s.width, rng);
        c = s.width;
      }
      for (std::size_t b = 0; b < s.blocks; ++b) {
        const ScscConfig cfg = block_config(spec_, k, b, c);
        stage.blocks.push_back(make_block(prefix + ".block" + std::to_string(b), cfg, rng));
        c = cfg.c_out;
      }
      stages_.push_back(std::move(stage));
    }
    if (spec_.head.conv != 0) {
      head_conv_ = make_conv("head.conv", StemLayer::Kind::Dense, c, spec_.head.conv, 1, 1, rng);
      c = spec_.head.conv;
    }
    if (spec_.head.layernorm) head_ln_ = add_affine("head.ln", c);
    fc_w_ = add_weight("head.fc.weight", Shape{spec_.head.out, c, 1, 1}, rng);
    fc_b_ = add_bias("head.fc.bias", spec_.head.out);
  }

  static Var run_conv(ConvUnit& u, const Var& x, std::span<const Var> v, const ForwardContext& ctx) {
    const ConvSpec spec{u.kernel, u.stride, PadMode::Zero};
    Var y = u.kind == StemLayer::Kind::Dense ? ad::conv2d_dense(x, v[u.w], v[u.b], spec)
                                             : ad::conv2d_depthwise(x, v[u.w], v[u.b], spec);
    y = apply_batchnorm(y, v[u.bn.gamma], v[u.bn.beta], kNormEps, ctx, &u.stats);
    return ad::relu(y);
  }

  static Var run_patch(const PatchUnit& u, const Var& x, std::span<const Var> v) {
    Var y = ad::conv2d_pointwise(ad::space_to_depth(x, u.ratio), v[u.w], v[u.b]);
    return ad::layernorm_channels(y, v[u.ln.gamma], v[u.ln.beta], kNormEps);
  }

  Var run_block(BlockUnit& u, const Var& x, std::span<const Var> v, const ForwardContext& ctx) const {
    const ScscParamVars p = u.p.map<Var>([&](std::size_t id) { return v[id]; });
    if (spec_.style == BlockStyle::Residual) return scsc_block_forward(x, p, u.cfg, ctx, &u.state);
    const Var normed = ad::layernorm_channels(x, v[u.ln1.gamma], v[u.ln1.beta], kNormEps);
    const Var y = ad::add(x, scsc_block_forward(normed, p, u.cfg, ctx, &u.state));
    Var h = ad::layernorm_channels(y, v[u.ln2.gamma], v[u.ln2.beta], kNormEps);
    h = ad::relu(ad::conv2d_pointwise(h, v[u.fc1_w], v[u.fc1_b]));
    h = ad::conv2d_pointwise(h, v[u.fc2_w], v[u.fc2_b]);
    return ad::add(y, h);
  }

  ArchSpec spec_;
  std::vector<NamedTensor> params_;
  std::vector<ConvUnit> stem_;
  std::optional<PatchUnit> stem_patch_;
  std::vector<StageUnit> stages_;
  std::optional<ConvUnit> head_conv_;
  std::optional<Affine> head_ln_;
  std::size_t fc_w_ = 0;
  std::size_t fc_b_ = 0;
};

}  // namespace scsc
