#pragma once

// Synthetic tasks, SGD and the ablation sweep.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "scsc/arch.hpp"
#include "scsc/autodiff.hpp"
#include "scsc/network.hpp"

namespace scsc {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Tasks

enum class TaskKind {
  Local,      // which of k random 3x3 patterns is stamped somewhere in the image
  LongRange,  // whether two markers at least 9 pixels apart have the same sign
  Mixed,      // 2 patterns x {agree, disagree} = 4 classes
  Separable,  // 2 classes differing in the mean of channel 0
};

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Local: return "local";
    case TaskKind::LongRange: return "longrange";
    case TaskKind::Mixed: return "mixed";
    case TaskKind::Separable: return "separable";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "local") return TaskKind::Local;
  if (s == "longrange" || s == "long-range") return TaskKind::LongRange;
  if (s == "mixed") return TaskKind::Mixed;
  if (s == "separable") return TaskKind::Separable;
  throw ConfigError("unknown task '" + s + "' (local, longrange, mixed, separable)");
}

inline constexpr std::size_t kMarkerSeparation = 9;

struct SynthTask {
  TaskKind kind = TaskKind::Separable;
  std::uint64_t seed = 0;
  std::size_t channels = 3;
  std::size_t size = 32;
  double noise = 0.25;

  [[nodiscard]] std::size_t classes() const {
    switch (kind) {
      case TaskKind::Local: return 4;
      case TaskKind::LongRange: return 2;
      case TaskKind::Mixed: return 4;
      case TaskKind::Separable: return 2;
    }
    return 0;
  }

  void validate() const {
    if (channels == 0) throw ConfigError("SynthTask: channels must be >= 1");
    const std::size_t min_size = kind == TaskKind::Separable ? 1 : (kind == TaskKind::Local ? 3 : kMarkerSeparation + 2);
    if (size < min_size) {
      throw ConfigError("SynthTask: " + to_string(kind) + " needs images of at least " + std::to_string(min_size) +
                        " pixels");
    }
  }
};

struct Batch {
  Tensor4 x;
  std::vector<int> labels;
};

namespace detail {

/// The task's fixed 3x3 sign patterns, derived from its seed alone.
inline std::vector<std::array<double, 9>> task_patterns(const SynthTask& t, std::size_t count) {
  std::seed_seq seq{static_cast<std::uint32_t>(t.seed), static_cast<std::uint32_t>(t.seed >> 32), 0x9a77u};
  std::mt19937_64 rng(seq);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::array<double, 9>> out(count);
  for (std::size_t p = 0; p < count; ++p) {
    bool distinct = false;
    while (!distinct) {
      for (double& v : out[p]) v = coin(rng) ? 1.0 : -1.0;
      distinct = true;
      for (std::size_t q = 0; q < p; ++q) distinct = distinct && out[q] != out[p];
    }
  }
  return out;
}

inline void stamp(Tensor4& x, std::size_t n, std::size_t c, std::size_t top, std::size_t left,
                  const std::array<double, 9>& pattern) {
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) x(n, c, top + i, left + j) = pattern[i * 3 + j];
  }
}

}  // namespace detail

/// Batch `index` of the task; deterministic in (seed, index, batch_size).
/// Labels cycle through the classes so every batch is balanced to within one.
inline Batch make_batch(const SynthTask& task, std::uint64_t index, std::size_t batch_size) {
  task.validate();
  if (batch_size == 0) throw ConfigError("make_batch: batch size must be >= 1");
  const std::size_t k = task.classes();
  const std::size_t S = task.size;
  std::seed_seq seq{static_cast<std::uint32_t>(task.seed), static_cast<std::uint32_t>(task.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> noise(0.0, task.noise);
  std::uniform_int_distribution<std::size_t> pos(0, S - 1);

  const auto patterns = detail::task_patterns(task, task.kind == TaskKind::Mixed ? 2 : k);

  Batch b{Tensor4(Shape{batch_size, task.channels, S, S}), std::vector<int>(batch_size)};
  for (double& v : b.x.data()) v = noise(rng);
  const std::size_t offset = static_cast<std::size_t>(index % k);
  for (std::size_t n = 0; n < batch_size; ++n) {
    const int label = static_cast<int>((n + offset) % k);
    b.labels[n] = label;
    std::size_t pattern_id = 0;
    int agree = -1;
    switch (task.kind) {
      case TaskKind::Separable: {
        const double shift = label == 0 ? -0.5 : 0.5;
        for (std::size_t h = 0; h < S; ++h) {
          for (std::size_t w = 0; w < S; ++w) b.x(n, 0, h, w) += shift;
        }
        continue;
      }
      case TaskKind::Local: pattern_id = static_cast<std::size_t>(label); break;
      case TaskKind::LongRange: agree = label; break;
      case TaskKind::Mixed:
        pattern_id = static_cast<std::size_t>(label) / 2;
        agree = label % 2;
        break;
    }
    if (task.kind == TaskKind::Local || task.kind == TaskKind::Mixed) {
      std::uniform_int_distribution<std::size_t> corner(0, S - 3);
      detail::stamp(b.x, n, 0, corner(rng), corner(rng), patterns[pattern_id]);
    }
    if (agree >= 0) {
      // Markers live in the last channel, Chebyshev distance >= kMarkerSeparation.
      const std::size_t c = task.channels - 1;
      std::size_t h1 = 0, w1 = 0, h2 = 0, w2 = 0;
      for (;;) {
        h1 = pos(rng), w1 = pos(rng), h2 = pos(rng), w2 = pos(rng);
        const std::size_t dh = h1 > h2 ? h1 - h2 : h2 - h1;
        const std::size_t dw = w1 > w2 ? w1 - w2 : w2 - w1;
        if (std::max(dh, dw) >= kMarkerSeparation) break;
      }
      std::bernoulli_distribution coin(0.5);
      const double s1 = coin(rng) ? 2.0 : -2.0;
      const double s2 = agree == 1 ? s1 : -s1;
      b.x(n, c, h1, w1) = s1;
      b.x(n, c, h2, w2) = s2;
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Optimizer

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t steps = 300;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("SgdConfig: learning rate must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("SgdConfig: momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("SgdConfig: weight decay must be >= 0");
    if (steps == 0) throw ConfigError("SgdConfig: steps must be >= 1");
    if (batch_size == 0) throw ConfigError("SgdConfig: batch size must be >= 1");
  }
};

struct SgdState {
  std::vector<Tensor4> velocity;
};

/// v = momentum*v + g;  p -= lr*v + lr*weight_decay*p.
inline void sgd_step(std::vector<NamedTensor>& params, const std::vector<Tensor4>& grads, SgdState& state,
                     const SgdConfig& cfg) {
  if (grads.size() != params.size()) {
    throw DimensionError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape()) {
      throw DimensionError("sgd_step: gradient of '" + params[i].name + "' has shape " + grads[i].shape().str());
    }
    for (double v : grads[i].data()) {
      if (!std::isfinite(v)) throw TrainingError("sgd_step: non-finite gradient in '" + params[i].name + "'");
    }
  }
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.value.shape(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].value.data();
    auto v = state.velocity[i].data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = cfg.momentum * v[k] + g[k];
      p[k] -= cfg.lr * v[k] + cfg.lr * cfg.weight_decay * p[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Training

inline constexpr double kDivergenceLoss = 1e6;

struct TrainResult {
  std::vector<double> losses;  // loss at each step, before the update
  double accuracy = 0.0;       // eval-mode accuracy on held-out batches
};

inline double accuracy(const Tensor4& logits, const std::vector<int>& labels) {
  const Shape s = logits.shape();
  std::size_t hits = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.c; ++c) {
      if (logits(n, c, 0, 0) > logits(n, best, 0, 0)) best = c;
    }
    hits += static_cast<int>(best) == labels[n];
  }
  return static_cast<double>(hits) / static_cast<double>(s.n);
}

/// Eval-mode accuracy over `batches` batches starting at batch index `first`.
inline double evaluate(Network& net, const SynthTask& task, std::uint64_t first, std::size_t batches,
                       std::size_t batch_size) {
  double total = 0.0;
  for (std::size_t i = 0; i < batches; ++i) {
    const Batch b = make_batch(task, first + i, batch_size);
    total += accuracy(net.predict(b.x, NormMode::Eval), b.labels);
  }
  return total / static_cast<double>(batches);
}

inline constexpr std::uint64_t kEvalBatchOffset = std::uint64_t{1} << 40;
inline constexpr std::size_t kEvalBatches = 4;

using StepCallback = std::function<void(std::size_t step, double loss)>;

inline TrainResult train(Network& net, const SynthTask& task, const SgdConfig& cfg, const StepCallback& on_step = {}) {
  cfg.validate();
  task.validate();
  if (net.spec().head.out != task.classes()) {
    throw ConfigError("train: network has " + std::to_string(net.spec().head.out) + " outputs, task has " +
                      std::to_string(task.classes()) + " classes");
  }
  if (net.spec().in_c != task.channels) {
    throw ConfigError("train: network expects " + std::to_string(net.spec().in_c) + " input channels, task has " +
                      std::to_string(task.channels));
  }
  TrainResult result;
  SgdState state;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Batch b = make_batch(task, step, cfg.batch_size);
    Tape tape;
    const std::vector<Var> vars = net.bind(tape);
    const Var logits = net.forward(vars, tape.constant(b.x), ForwardContext{NormMode::Train});
    const Var loss = ad::cross_entropy(logits, b.labels);
    const double l = loss.value()[0];
    if (!std::isfinite(l) || l > kDivergenceLoss) {
      throw TrainingError("train: diverged at step " + std::to_string(step) + " (loss " + std::to_string(l) + ")");
    }
    result.losses.push_back(l);
    if (on_step) on_step(step, l);
    const Gradients grads = tape.backward(loss);
    std::vector<Tensor4> g;
    g.reserve(vars.size());
    for (const Var& v : vars) g.push_back(grads[v]);
    sgd_step(net.parameters(), g, state, cfg);
  }
  result.accuracy = evaluate(net, task, kEvalBatchOffset, kEvalBatches, cfg.batch_size);
  return result;
}

inline void write_loss_curve(std::ostream& out, const std::vector<double>& losses) {
  out << std::setprecision(17);
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << ' ' << losses[i] << '\n';
}

// ---------------------------------------------------------------------------
// Ablation sweep

enum class SweepAxis { G, Kernel };

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "g") return SweepAxis::G;
  if (s == "kernel") return SweepAxis::Kernel;
  throw ConfigError("unknown sweep axis '" + s + "' (g, kernel)");
}

struct SweepSetting {
  std::string label;
  std::size_t g = 0;                    // 0: keep the base value
  std::vector<std::size_t> kernels;     // empty: keep the base kernel sets
};

inline std::vector<SweepSetting> sweep_settings(SweepAxis axis) {
  std::vector<SweepSetting> out;
  if (axis == SweepAxis::G) {
    for (std::size_t g : {2, 4, 8}) out.push_back({"g=" + std::to_string(g), g, {}});
  } else {
    for (std::size_t v : {3, 5, 7, 9, 11, 13}) out.push_back({"kernel=" + std::to_string(v), 0, {v}});
    out.push_back({"kernel=scsc-set", 0, {}});
  }
  return out;
}

inline ArchSpec apply_setting(ArchSpec a, const SweepSetting& s) {
  for (auto& stage : a.stages) {
    if (s.g != 0) stage.g = s.g;
    if (!s.kernels.empty()) stage.kernels = s.kernels;
  }
  a.name += "[" + s.label + "]";
  return a;
}

struct SweepRow {
  SweepSetting setting;
  std::uint64_t seed = 0;
  std::size_t params = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;  // mean over the last tenth of the run
  double accuracy = 0.0;
};

struct SweepReport {
  SweepAxis axis = SweepAxis::G;
  std::string base;
  std::string task;
  std::size_t steps = 0;
  std::vector<SweepRow> rows;
};

inline double tail_mean(const std::vector<double>& v) {
  const std::size_t n = std::max<std::size_t>(1, v.size() / 10);
  double s = 0.0;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(n);
}

/// One training run per setting on `task`; run i is seeded from (cfg.seed, i).
inline SweepReport ablation_sweep(SweepAxis axis, const ArchSpec& base, const SynthTask& task, const SgdConfig& cfg) {
  SweepReport report;
  report.axis = axis;
  report.base = base.name;
  report.task = to_string(task.kind);
  report.steps = cfg.steps;
  const auto settings = sweep_settings(axis);
  for (std::size_t i = 0; i < settings.size(); ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    const std::uint64_t seed = (std::uint64_t{words[0]} << 32) | words[1];
    Network net(apply_setting(base, settings[i]), seed);
    SgdConfig run_cfg = cfg;
    run_cfg.seed = seed;
    const TrainResult r = train(net, task, run_cfg);
    report.rows.push_back(SweepRow{settings[i], seed, net.parameter_count(), r.losses.front(), tail_mean(r.losses),
                                   r.accuracy});
  }
  return report;
}

inline std::string render_sweep(const SweepReport& r) {
  std::ostringstream o;
  o << "sweep axis=" << (r.axis == SweepAxis::G ? "g" : "kernel") << " base=" << r.base << " task=" << r.task
    << " steps=" << r.steps << '\n';
  o << std::left << std::setw(18) << "setting" << std::right << std::setw(10) << "params" << std::setw(12)
    << "first_loss" << std::setw(12) << "final_loss" << std::setw(10) << "accuracy" << '\n';
  o << std::fixed << std::setprecision(4);
  for (const auto& row : r.rows) {
    o << std::left << std::setw(18) << row.setting.label << std::right << std::setw(10) << row.params << std::setw(12)
      << row.first_loss << std::setw(12) << row.final_loss << std::setw(10) << row.accuracy << '\n';
  }
  return o.str();
}

}  // namespace scsc
