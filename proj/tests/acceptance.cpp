// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "scsc/scsc.hpp"

using namespace scsc;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("failed: " + what);
    }
  }
};

Tensor4 rnd(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return oracle::random_tensor(s, rng, lo, hi);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  Outcome out;
  const auto start = Clock::now();
  std::mt19937_64 rng(20240601);
  std::uniform_int_distribution<std::size_t> pick_m(1, 3), pick_k(0, 5), pick_s(1, 2), pick_c(2, 4);
  const std::size_t gs[] = {1, 2, 4};
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    ScscConfig cfg;
    cfg.g = gs[rng() % 3];
    const std::size_t m = pick_m(rng);
    for (std::size_t i = 0; i < m; ++i) cfg.kernels.push_back(3 + 2 * pick_k(rng));
    cfg.stride = pick_s(rng);
    cfg.c_in = pick_c(rng);
    cfg.c_out = pick_c(rng) + 1;
    cfg.hidden = cfg.g * (1 + rng() % 2);
    std::mt19937_64 init(rng());
    const ScscParams p0 = init_scsc_params(cfg, init);
    const Tensor4 x = rnd(Shape{2, cfg.c_in, 5, 5}, rng);
    const Tensor4 probe = rnd(cfg.output_shape(x.shape()), rng);

    std::vector<NamedTensor> params{{"x", x}};
    p0.for_each([&](const std::string& name, const Tensor4& t) { params.push_back({name, t}); });
    auto f = [&](Tape&, std::span<const Var> v) {
      ScscParamVars pv = p0.map<Var>([](const Tensor4&) { return Var{}; });
      std::size_t i = 1;
      pv.for_each([&](const std::string&, Var& slot) { slot = v[i++]; });
      return ad::weighted_sum(scsc_block_forward(v[0], pv, cfg), probe);
    };
    const GradCheckReport r = grad_check(f, params, 1e-5, 1e-4);
    worst = std::max(worst, r.max_rel_err());
    std::ostringstream what;
    what << "config " << trial << " kernels [" << detail::join_sizes(cfg.kernels) << "] g " << cfg.g << " stride "
         << cfg.stride << " rel err " << r.max_rel_err();
    out.require(r.passed() && r.entries.size() == params.size(), what.str());
  }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  out.require(secs < 300.0, "runtime " + fmt("%.1f s", secs));
  out.detail = "10 configs, max rel err " + fmt("%.2e", worst) + " (< 1e-4), " + fmt("%.1f s", secs) + " (< 300 s)";
  return out;
}

// ---------------------------------------------------------------------------

Outcome oracle_equivalence() {
  Outcome out;
  std::mt19937_64 rng(77);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t cin = 1 + rng() % 4, cout = 1 + rng() % 4, v = 1 + 2 * (rng() % 3), s = 1 + rng() % 2;
    const std::size_t h = 3 + rng() % 6, w = 3 + rng() % 6;
    const bool circular = rng() % 2 == 1;
    const PadMode pad = circular ? PadMode::Circular : PadMode::Zero;
    const Tensor4 x = rnd(Shape{2, cin, h, w}, rng);

    const Tensor4 wd = rnd(Shape{cout, cin, v, v}, rng), bd = rnd(Shape{1, cout, 1, 1}, rng);
    worst = std::max(worst, oracle::max_abs_diff(conv2d_dense(x, wd, bd, ConvSpec{v, s, pad}),
                                                 oracle::conv_naive(x, wd, bd, s, circular)));

    const Tensor4 wdw = rnd(Shape{cin, 1, v, v}, rng), bdw = rnd(Shape{1, cin, 1, 1}, rng);
    worst = std::max(worst, oracle::max_abs_diff(conv2d_depthwise(x, wdw, bdw, ConvSpec{v, s, pad}),
                                                 oracle::conv_naive(x, oracle::depthwise_as_dense(wdw), bdw, s, circular)));

    const Tensor4 wp = rnd(Shape{cout, cin, 1, 1}, rng);
    worst = std::max(worst, oracle::max_abs_diff(conv2d_pointwise(x, wp, bd, s), oracle::conv_naive(x, wp, bd, s)));
  }
  out.require(worst <= 1e-12, "conv deviation " + fmt("%.2e", worst));

  double fuse_worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng() % 3, g = std::size_t{1} << (rng() % 3), c = g * (1 + rng() % 3);
    std::vector<Tensor4> branches;
    for (std::size_t i = 0; i < m; ++i) branches.push_back(rnd(Shape{2, c, 4, 5}, rng));
    const Tensor4 gates = rnd(Shape{2, m * g, 4, 5}, rng, 0.0, 1.0);
    const Tensor4 fused = spatial_fuse(branches, gates, g);
    fuse_worst = std::max(fuse_worst, oracle::max_abs_diff(fused, oracle::fuse_naive(branches, gates, g)));
    fuse_worst = std::max(fuse_worst, oracle::max_abs_diff(fused, spatial_fuse_matmul(branches, gates, g)));
  }
  out.require(fuse_worst <= 1e-12, "fuse deviation " + fmt("%.2e", fuse_worst));
  out.detail = "50 conv cases x3 kinds max dev " + fmt("%.2e", worst) + ", fuse vs both oracles max dev " +
               fmt("%.2e", fuse_worst) + " (<= 1e-12)";
  return out;
}

// ---------------------------------------------------------------------------

Outcome complexity_reproduction() {
  Outcome out;
  const std::vector<std::string> targets{"resnet-scsc-v1", "resnet-scsc-v2", "resnet-scsc-v3", "faceresnet-scsc",
                                         "mobilefacenet-scsc"};
  std::ostringstream d;
  for (const auto& name : targets) {
    const ArchSpec a = preset(name);
    const CostReport r = analyze(a);
    const auto want = reported_complexity(name);
    out.require(want.has_value(), name + " has a published figure");
    if (!want) continue;
    const double dp = static_cast<double>(r.params()) / want->params - 1.0;
    const double dm = static_cast<double>(r.madds()) / want->madds - 1.0;
    out.require(std::abs(dp) < 0.15, name + " params deviation " + fmt("%+.3f", dp));
    out.require(std::abs(dm) < 0.15, name + " madds deviation " + fmt("%+.3f", dm));
    out.require(render_text(r, want).find("deviation") != std::string::npos, name + " itemized report");
    d << name << " " << fmt("%+.1f%%", 100 * dp) << "/" << fmt("%+.1f%%", 100 * dm) << "  ";
  }
  for (const auto& name : preset_names()) {
    const ArchSpec a = preset(name);
    out.require(count_params(a) == instantiated_params(a), name + " count_params == instantiated");
    for (std::size_t side : {32u, 64u}) {
      out.require(count_madds(a, {side, side}) == oracle_count(a, {side, side}),
                  name + " count_madds == oracle at " + std::to_string(side));
    }
  }
  out.detail = d.str() + "(params/madds vs published, < 15%); exact param and madd oracles on all presets";
  return out;
}

// ---------------------------------------------------------------------------

Outcome shape_contract() {
  Outcome out;
  std::ostringstream d;
  for (const auto& name : preset_names()) {
    ArchSpec a = with_input(reduce_width(preset(name), 16), 64, 64);
    Network net(a, 0);
    std::vector<Shape> shapes;
    const Tensor4 x(Shape{1, a.in_c, 64, 64}, 0.1);
    net.predict(x, NormMode::Eval, &shapes);
    std::string got;
    for (const auto& s : shapes) got += (got.empty() ? "" : "/") + std::to_string(s.h);
    d << name << " " << got << "  ";
    out.require(got == "16/8/4/2", name + " stage sizes " + got + " (want 16/8/4/2)");
  }
  const ArchSpec swin = preset("swin-scsc");
  std::string widths;
  for (const auto& s : swin.stages) widths += (widths.empty() ? "" : "/") + std::to_string(s.width);
  out.require(widths == "96/192/384/768", "swin widths " + widths);
  out.detail = d.str() + "swin widths " + widths;
  return out;
}

// ---------------------------------------------------------------------------

Outcome structural_invariants() {
  Outcome out;
  std::mt19937_64 rng(5);

  // Depthwise: perturbing channel 1 leaves the other channels untouched.
  {
    const Tensor4 x = rnd(Shape{1, 3, 6, 6}, rng), w = rnd(Shape{3, 1, 5, 5}, rng), b = rnd(Shape{1, 3, 1, 1}, rng);
    Tensor4 x2 = x;
    for (std::size_t h = 0; h < 6; ++h)
      for (std::size_t ww = 0; ww < 6; ++ww) x2(0, 1, h, ww) += 1.0;
    const Tensor4 y = conv2d_depthwise(x, w, b, ConvSpec{5}), y2 = conv2d_depthwise(x2, w, b, ConvSpec{5});
    bool same = true;
    for (std::size_t c : {0u, 2u})
      for (std::size_t h = 0; h < 6; ++h)
        for (std::size_t ww = 0; ww < 6; ++ww) same = same && y(0, c, h, ww) == y2(0, c, h, ww);
    out.require(same, "depthwise channel independence");
  }
  // Pointwise: a single-pixel change affects only that pixel.
  {
    const Tensor4 x = rnd(Shape{1, 3, 5, 5}, rng), w = rnd(Shape{4, 3, 1, 1}, rng), b = rnd(Shape{1, 4, 1, 1}, rng);
    Tensor4 x2 = x;
    x2(0, 2, 3, 1) += 2.0;
    const Tensor4 y = conv2d_pointwise(x, w, b), y2 = conv2d_pointwise(x2, w, b);
    bool local = true;
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t h = 0; h < 5; ++h)
        for (std::size_t ww = 0; ww < 5; ++ww)
          if (!(h == 3 && ww == 1)) local = local && y(0, c, h, ww) == y2(0, c, h, ww);
    out.require(local, "pointwise spatial locality");
  }
  // Circular padding: convolution commutes with cyclic shifts.
  {
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      const Tensor4 x = rnd(Shape{1, 2, 7, 8}, rng), w = rnd(Shape{3, 2, 5, 5}, rng), b = rnd(Shape{1, 3, 1, 1}, rng);
      const Tensor4 wd = rnd(Shape{2, 1, 7, 7}, rng), bd = rnd(Shape{1, 2, 1, 1}, rng);
      const long dy = static_cast<long>(rng() % 7), dx = static_cast<long>(rng() % 8);
      const ConvSpec sd{5, 1, PadMode::Circular}, sdw{7, 1, PadMode::Circular};
      worst = std::max(worst, oracle::max_abs_diff(conv2d_dense(oracle::roll(x, dy, dx), w, b, sd),
                                                   oracle::roll(conv2d_dense(x, w, b, sd), dy, dx)));
      worst = std::max(worst, oracle::max_abs_diff(conv2d_depthwise(oracle::roll(x, dy, dx), wd, bd, sdw),
                                                   oracle::roll(conv2d_depthwise(x, wd, bd, sdw), dy, dx)));
    }
    out.require(worst <= 1e-12, "circular equivariance " + fmt("%.2e", worst));
  }
  // Gates lie strictly inside (0,1) for random blocks.
  {
    bool inside = true;
    for (int t = 0; t < 10; ++t) {
      ScscConfig cfg;
      cfg.c_in = 4;
      cfg.c_out = 4;
      cfg.hidden = 8;
      cfg.kernels = {3, 7, 11};
      cfg.g = 4;
      cfg.stride = 1 + t % 2;
      std::mt19937_64 init(rng());
      ScscParams p = init_scsc_params(cfg, init);
      p.b_gate = rnd(p.b_gate.shape(), rng, -3.0, 3.0);
      const Tensor4 xd = channel_reduce(rnd(Shape{2, 4, 6, 6}, rng, -3.0, 3.0), p, cfg);
      const Tensor4 gates = spatial_embed_gates(xd, p, cfg);
      for (double v : gates.data()) inside = inside && v > 0.0 && v < 1.0;
    }
    out.require(inside, "gate range (0,1)");
  }
  // Fusion is linear in the branches for fixed gates.
  {
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      std::vector<Tensor4> a, b, mix;
      const double alpha = 1.7, beta = -0.3;
      for (int i = 0; i < 3; ++i) {
        a.push_back(rnd(Shape{2, 8, 4, 4}, rng));
        b.push_back(rnd(Shape{2, 8, 4, 4}, rng));
        mix.push_back(add(scale(a.back(), alpha), scale(b.back(), beta)));
      }
      const Tensor4 gates = rnd(Shape{2, 12, 4, 4}, rng, 0.0, 1.0);
      const Tensor4 lhs = spatial_fuse(mix, gates, 4);
      const Tensor4 rhs = add(scale(spatial_fuse(a, gates, 4), alpha), scale(spatial_fuse(b, gates, 4), beta));
      worst = std::max(worst, oracle::max_abs_diff(lhs, rhs));
    }
    out.require(worst <= 1e-12, "fusion linearity " + fmt("%.2e", worst));
  }
  // One branch with saturated gates reduces to reduce -> depthwise -> recover.
  {
    ScscConfig cfg;
    cfg.c_in = cfg.c_out = 6;
    cfg.hidden = 4;
    cfg.kernels = {5};
    cfg.g = 2;
    std::mt19937_64 init(80);
    ScscParams p = init_scsc_params(cfg, init);
    p.w_gate.fill(0.0);
    p.b_gate.fill(30.0);
    const Tensor4 x = rnd(Shape{2, 6, 7, 7}, rng);
    const Tensor4 xd = relu(
        batchnorm_train(conv2d_pointwise(x, p.w_reduce, p.b_reduce), *p.bn_reduce_gamma, *p.bn_reduce_beta, cfg.eps).y);
    const Tensor4 dw = conv2d_depthwise(xd, p.w_branch[0], p.b_branch[0], ConvSpec{5, 1});
    const Tensor4 rec =
        batchnorm_train(conv2d_pointwise(dw, p.w_recover, p.b_recover), *p.bn_recover_gamma, *p.bn_recover_beta, cfg.eps)
            .y;
    const double dev = oracle::max_abs_diff(scsc_block_forward(x, p, cfg), relu(add(x, rec)));
    out.require(dev <= 1e-8, "m=1 reduction " + fmt("%.2e", dev));
  }
  out.detail = out.pass ? "depthwise independence, pointwise locality, circular equivariance, gate range, fusion "
                          "linearity, m=1 reduction"
                        : "see failures";
  return out;
}

// ---------------------------------------------------------------------------

ArchSpec small_v1(std::size_t classes) {
  return with_classes(with_input(reduce_width(preset("resnet-scsc-v1"), 16), 32, 32), classes);
}

bool all_finite(const Network& net) {
  for (const auto& p : net.parameters())
    for (double v : p.value.data())
      if (!std::isfinite(v)) return false;
  return true;
}

Outcome learning_smoke() {
  Outcome out;
  SgdConfig cfg;
  cfg.steps = 300;
  const SynthTask task;
  Network a(small_v1(task.classes()), 1), b(small_v1(task.classes()), 1);
  const TrainResult ra = train(a, task, cfg), rb = train(b, task, cfg);

  // Accuracy on the last training batch, after the final update.
  const Batch last = make_batch(task, cfg.steps - 1, cfg.batch_size);
  const double train_acc = accuracy(a.predict(last.x, NormMode::Eval), last.labels);

  bool bitwise = ra.losses.size() == rb.losses.size();
  for (std::size_t i = 0; bitwise && i < ra.losses.size(); ++i)
    bitwise = std::bit_cast<std::uint64_t>(ra.losses[i]) == std::bit_cast<std::uint64_t>(rb.losses[i]);
  for (std::size_t i = 0; bitwise && i < a.parameters().size(); ++i) {
    const auto pa = a.parameters()[i].value.data(), pb = b.parameters()[i].value.data();
    for (std::size_t k = 0; k < pa.size(); ++k) bitwise = bitwise && std::bit_cast<std::uint64_t>(pa[k]) ==
                                                                         std::bit_cast<std::uint64_t>(pb[k]);
  }
  out.require(ra.accuracy >= 0.95, "held-out accuracy " + fmt("%.3f", ra.accuracy));
  out.require(train_acc >= 0.95, "training-batch accuracy " + fmt("%.3f", train_acc));
  out.require(bitwise, "bitwise replay");
  out.require(all_finite(a), "finite parameters");
  out.detail = "300 steps, loss " + fmt("%.4f", ra.losses.front()) + " -> " + fmt("%.2e", tail_mean(ra.losses)) +
               ", train acc " + fmt("%.3f", train_acc) + ", held-out acc " + fmt("%.3f", ra.accuracy) +
               " (>= 0.95), replay " + (bitwise ? "bitwise identical" : "DIFFERS");
  return out;
}

// ---------------------------------------------------------------------------

bool well_formed(const std::string& text, const SweepReport& r) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("sweep axis=", 0) != 0) return false;
  if (!std::getline(in, line) || line.rfind("setting", 0) != 0) return false;
  for (const auto& row : r.rows) {
    if (!std::getline(in, line)) return false;
    std::istringstream fields(line);
    std::string label;
    std::size_t params = 0;
    double first = 0, final = 0, acc = 0;
    if (!(fields >> label >> params >> first >> final >> acc)) return false;
    if (label != row.setting.label || params != row.params) return false;
    if (!std::isfinite(first) || !std::isfinite(final) || acc < 0.0 || acc > 1.0) return false;
  }
  return !std::getline(in, line);
}

Outcome ablation_machinery() {
  Outcome out;
  SynthTask task;
  task.kind = TaskKind::Mixed;
  SgdConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 8;
  const ArchSpec base = with_classes(with_input(reduce_width(preset("resnet-scsc-v1"), 32), 32, 32), task.classes());
  const std::vector<std::pair<SweepAxis, std::vector<std::string>>> want{
      {SweepAxis::G, {"g=2", "g=4", "g=8"}},
      {SweepAxis::Kernel, {"kernel=3", "kernel=5", "kernel=7", "kernel=9", "kernel=11", "kernel=13", "kernel=scsc-set"}}};
  std::ostringstream d;
  for (const auto& [axis, labels] : want) {
    const SweepReport r = ablation_sweep(axis, base, task, cfg);
    std::vector<std::string> got;
    for (const auto& row : r.rows) got.push_back(row.setting.label);
    const std::string axis_name = axis == SweepAxis::G ? "g" : "kernel";
    out.require(got == labels, "axis " + axis_name + " settings");
    out.require(well_formed(render_sweep(r), r), "axis " + axis_name + " report well-formed");
    d << axis_name << ": " << got.size() << " runs  ";
  }
  out.detail = d.str() + "(settings exact, reports parse)";
  return out;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"1 gradient fidelity", gradient_fidelity},   {"2 oracle equivalence", oracle_equivalence},
      {"3 complexity reproduction", complexity_reproduction}, {"4 architecture shape contract", shape_contract},
      {"5 structural invariants", structural_invariants},     {"6 learning smoke test", learning_smoke},
      {"7 ablation machinery", ablation_machinery},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << c.name << ": " << o.detail << '\n';
    for (const auto& n : o.notes) std::cout << "      " << n << '\n';
    std::cout.flush();
    failed += o.pass ? 0 : 1;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + (failed == 1 ? " criterion" : " criteria") + " failed") << '\n';
  return failed == 0 ? 0 : 1;
}
