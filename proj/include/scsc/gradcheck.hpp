#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "scsc/autodiff.hpp"

namespace scsc {

/// Builds a scalar on `tape` from leaves bound to the parameters, in order.
using ScalarFunction = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t refined = 0;  // elements whose step was shrunk to stay off a ReLU kink
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tol = 0.0;
  double step = 0.0;

  [[nodiscard]] double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
  [[nodiscard]] bool passed() const { return max_rel_err() < tol; }
};

struct GradCheckOptions {
  /// Check at most this many evenly spaced elements per tensor; 0 checks all.
  std::size_t max_elements = 0;
  /// How many times the step may be divided by 10 when +-h crosses a ReLU kink.
  std::size_t max_refinements = 3;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Activity mask of every ReLU on the tape; equal masks mean the same linear piece.
inline std::vector<bool> relu_pattern(const Tape& tape) {
  std::vector<bool> mask;
  for (std::size_t id = 0; id < tape.size(); ++id) {
    const auto& node = tape.node(id);
    if (node.op != OpKind::Relu) continue;
    for (double v : tape.value(node.inputs.front()).data()) mask.push_back(v > 0.0);
  }
  return mask;
}

/// Compares reverse-mode gradients against central differences for every
/// element of every parameter. Failures are reported, not thrown.
inline GradCheckReport grad_check(const ScalarFunction& f, std::vector<NamedTensor> params, double h = 1e-5,
                                  double tol = 1e-4, const GradCheckOptions& opts = {}) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be > 0");

  auto evaluate = [&](std::vector<bool>* pattern) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.leaf(p.value));
    const Var root = f(tape, leaves);
    if (pattern != nullptr) *pattern = relu_pattern(tape);
    return root.value()[0];
  };

  std::vector<Tensor4> analytic;
  std::vector<bool> base_pattern;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p.value));
    const Var root = f(tape, leaves);
    const Gradients grads = tape.backward(root);
    for (const Var& v : leaves) analytic.push_back(grads[v]);
    base_pattern = relu_pattern(tape);
  }

  GradCheckReport report;
  report.tol = tol;
  report.step = h;
  std::vector<bool> pattern;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    GradCheckEntry entry;
    entry.name = params[pi].name;
    Tensor4& value = params[pi].value;
    const std::size_t total = value.size();
    const std::size_t stride =
        (opts.max_elements == 0 || total <= opts.max_elements) ? 1 : (total + opts.max_elements - 1) / opts.max_elements;
    for (std::size_t k = 0; k < total; k += stride) {
      const double original = value[k];
      double step = h;
      double numeric = 0.0;
      for (std::size_t attempt = 0;; ++attempt) {
        value[k] = original + step;
        const double fp = evaluate(&pattern);
        const bool plus_ok = pattern == base_pattern;
        value[k] = original - step;
        const double fm = evaluate(&pattern);
        const bool minus_ok = pattern == base_pattern;
        value[k] = original;
        numeric = (fp - fm) / (2.0 * step);
        if ((plus_ok && minus_ok) || attempt == opts.max_refinements) break;
        step /= 10.0;
        if (attempt == 0) ++entry.refined;
      }
      const double a = analytic[pi][k];
      const double err = relative_error(a, numeric);
      ++entry.checked;
      if (err >= entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.worst_index = k;
        entry.analytic_at_worst = a;
        entry.numeric_at_worst = numeric;
      }
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace scsc
