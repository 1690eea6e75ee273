#pragma once

// Parameter and multiply-add accounting.
//
// Madds per sample: dense conv H'W'*Cout*Cin*v^2, depthwise H'W'*C*v^2,
// pointwise H'W'*Cin*Cout, linear Din*Dout, fusion H'W'*C_h*m (separate
// bucket). Norms, activations, sigmoid and pooling count zero.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "scsc/arch.hpp"
#include "scsc/network.hpp"
#include "scsc/ops.hpp"

namespace scsc {

struct CostRow {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t madds = 0;   // convolution / linear multiply-adds
  std::uint64_t fusion = 0;  // gated branch fusion multiply-adds
  Shape output;
};

struct CostReport {
  std::string arch;
  std::size_t in_c = 0;
  std::size_t in_h = 0;
  std::size_t in_w = 0;
  bool include_fusion = true;
  std::vector<CostRow> rows;

  [[nodiscard]] std::uint64_t params() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.params;
    return t;
  }
  [[nodiscard]] std::uint64_t fusion_madds() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.fusion;
    return t;
  }
  [[nodiscard]] std::uint64_t madds() const {
    std::uint64_t t = include_fusion ? fusion_madds() : 0;
    for (const auto& r : rows) t += r.madds;
    return t;
  }
  [[nodiscard]] std::uint64_t flops() const { return 2 * madds(); }

  /// Madds of the stage rows only (stem and head excluded).
  [[nodiscard]] std::uint64_t stage_madds() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) {
      if (r.name.rfind("stage", 0) == 0) t += r.madds + (include_fusion ? r.fusion : 0);
    }
    return t;
  }
};

namespace detail {

class CostWalker {
 public:
  CostWalker(const ArchSpec& arch, Resolution in, bool include_fusion) : arch_(arch) {
    report_.arch = arch.name;
    report_.in_c = arch.in_c;
    report_.in_h = in.h;
    report_.in_w = in.w;
    report_.include_fusion = include_fusion;
    c_ = arch.in_c;
    h_ = in.h;
    w_ = in.w;
  }

  CostReport run() {
    if (arch_.stem.kind == StemSpec::Kind::Conv) {
      for (std::size_t i = 0; i < arch_.stem.layers.size(); ++i) stem_layer("stem." + std::to_string(i), arch_.stem.layers[i]);
    } else {
      patch("stem.patch", arch_.stem.patch, arch_.stem.dim);
    }
    for (std::size_t k = 0; k < arch_.stages.size(); ++k) {
      const StageSpec& s = arch_.stages[k];
      const std::string prefix = "stage" + std::to_string(k + 1);
      if (s.downsample == Downsample::PatchMerge) patch(prefix + ".merge", s.merge_ratio, s.width);
      for (std::size_t b = 0; b < s.blocks; ++b) {
        block(prefix + ".block" + std::to_string(b), block_config(arch_, k, b, c_));
      }
    }
    head();
    return std::move(report_);
  }

 private:
  using u64 = std::uint64_t;

  [[nodiscard]] u64 plane() const { return static_cast<u64>(h_) * w_; }

  void row(std::string name, u64 params, u64 madds, u64 fusion = 0) {
    report_.rows.push_back(CostRow{std::move(name), params, madds, fusion, Shape{1, c_, h_, w_}});
  }

  void stride_by(std::size_t s) {
    h_ = ceil_div(h_, s);
    w_ = ceil_div(w_, s);
  }

  void stem_layer(const std::string& name, const StemLayer& l) {
    const u64 k2 = static_cast<u64>(l.kernel) * l.kernel;
    const std::size_t c_in = c_;
    stride_by(l.stride);
    c_ = l.out;
    if (l.kind == StemLayer::Kind::Dense) {
      row(name, l.out * c_in * k2 + 3 * l.out, plane() * l.out * c_in * k2);
    } else {
      row(name, l.out * k2 + 3 * l.out, plane() * l.out * k2);
    }
  }

  void patch(const std::string& name, std::size_t r, std::size_t dim) {
    const u64 c_in = static_cast<u64>(c_) * r * r;
    h_ /= r;
    w_ /= r;
    c_ = dim;
    row(name, c_in * dim + 3 * dim, plane() * c_in * dim);
  }

  void layernorm(const std::string& name) { row(name, 2 * static_cast<u64>(c_), 0); }

  void block(const std::string& name, const ScscConfig& cfg) {
    const bool swin = arch_.style == BlockStyle::Swin;
    const u64 ch = cfg.hidden;
    const u64 c_in = cfg.c_in;
    const u64 c_out = cfg.c_out;
    const u64 mg = static_cast<u64>(cfg.m()) * cfg.g;
    if (swin) layernorm(name + ".ln1");

    c_ = cfg.hidden;
    row(name + ".reduce", c_in * ch + ch + (cfg.reduce_norm ? 2 * ch : 0), plane() * c_in * ch);
    stride_by(cfg.stride);
    for (std::size_t i = 0; i < cfg.m(); ++i) {
      const u64 k2 = static_cast<u64>(cfg.kernels[i]) * cfg.kernels[i];
      row(name + ".branch" + std::to_string(i), ch * k2 + ch, plane() * ch * k2);
    }
    c_ = mg;
    row(name + ".gate", mg * ch + mg, plane() * ch * mg);
    c_ = cfg.hidden;
    row(name + ".fuse", 0, 0, plane() * ch * cfg.m());
    c_ = cfg.c_out;
    row(name + ".recover", ch * c_out + c_out + (cfg.recover_norm ? 2 * c_out : 0), plane() * ch * c_out);
    if (cfg.has_projection()) row(name + ".shortcut", c_in * c_out + c_out, plane() * c_in * c_out);

    if (swin) {
      const u64 hidden = c_out * arch_.mlp_ratio;
      layernorm(name + ".ln2");
      const std::size_t c = c_;
      c_ = hidden;
      row(name + ".mlp.fc1", c_out * hidden + hidden, plane() * c_out * hidden);
      c_ = c;
      row(name + ".mlp.fc2", hidden * c_out + c_out, plane() * hidden * c_out);
    }
  }

  void head() {
    if (arch_.head.conv != 0) {
      const u64 c_in = c_;
      c_ = arch_.head.conv;
      row("head.conv", c_in * c_ + 3 * static_cast<u64>(c_), plane() * c_in * c_);
    }
    if (arch_.head.layernorm) layernorm("head.ln");
    const u64 d = c_;
    h_ = w_ = 1;
    c_ = arch_.head.out;
    row("head.fc", d * c_ + c_, d * c_);
  }

  const ArchSpec& arch_;
  CostReport report_;
  std::size_t c_ = 0, h_ = 0, w_ = 0;
};

}  // namespace detail

/// Analytic per-layer costs of `arch` for one sample at `input`.
inline CostReport analyze(const ArchSpec& arch, Resolution input, bool include_fusion = true) {
  validate(with_input(arch, input.h, input.w));
  return detail::CostWalker(arch, input, include_fusion).run();
}

inline CostReport analyze(const ArchSpec& arch, bool include_fusion = true) {
  return analyze(arch, {arch.in_h, arch.in_w}, include_fusion);
}

inline std::uint64_t count_params(const ArchSpec& arch) { return analyze(arch).params(); }

inline std::uint64_t count_madds(const ArchSpec& arch, Resolution input, bool include_fusion = true) {
  return analyze(arch, input, include_fusion).madds();
}

/// Scalars enumerated from an instantiated network.
inline std::uint64_t instantiated_params(const ArchSpec& arch) { return Network(arch, 0).parameter_count(); }

/// Madds tallied by the primitives during a real batch-1 forward pass.
inline std::uint64_t oracle_count(const ArchSpec& arch, Resolution input, bool include_fusion = true) {
  Network net(with_input(arch, input.h, input.w), 0);
  const Tensor4 x(Shape{1, arch.in_c, input.h, input.w}, 0.5);
  MaddCounting counting;
  (void)net.predict(x, NormMode::Eval);
  return counting.tally().total(include_fusion);
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline std::string shape_chw(const Shape& s) {
  return std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

inline std::string human(double v) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(2);
  if (v >= 1e9) o << v / 1e9 << "G";
  else if (v >= 1e6) o << v / 1e6 << "M";
  else if (v >= 1e3) o << v / 1e3 << "K";
  else o << std::setprecision(0) << v;
  return o.str();
}

inline std::string percent(double v) {
  std::ostringstream o;
  o << std::showpos << std::fixed << std::setprecision(1) << 100.0 * v << "%";
  return o.str();
}

/// "stage2.block0.reduce" -> "stage2"
inline std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

}  // namespace detail

/// Tab-separated records: name, params, madds, shape (one layer per line).
inline std::string render_tsv(const CostReport& r) {
  std::ostringstream o;
  for (const auto& row : r.rows) {
    const std::uint64_t m = row.madds + (r.include_fusion ? row.fusion : 0);
    o << row.name << '\t' << row.params << '\t' << m << '\t' << detail::shape_chw(row.output) << '\n';
  }
  return o.str();
}

inline std::string render_text(const CostReport& r, const std::optional<ReportedComplexity>& reported = std::nullopt) {
  std::size_t width = 5;
  for (const auto& row : r.rows) width = std::max(width, row.name.size());
  std::ostringstream o;
  o << r.arch << " at " << r.in_c << 'x' << r.in_h << 'x' << r.in_w << '\n';
  o << std::left << std::setw(static_cast<int>(width + 2)) << "layer" << std::right << std::setw(12) << "params"
    << std::setw(16) << "madds" << "  output\n";
  for (const auto& row : r.rows) {
    const std::uint64_t m = row.madds + (r.include_fusion ? row.fusion : 0);
    o << std::left << std::setw(static_cast<int>(width + 2)) << row.name << std::right << std::setw(12) << row.params
      << std::setw(16) << m << "  " << detail::shape_chw(row.output) << '\n';
  }

  // Per-group subtotals make the sources of any deviation visible.
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> groups;
  for (const auto& row : r.rows) {
    const std::string g = detail::group_of(row.name);
    if (!groups.count(g)) order.push_back(g);
    groups[g].first += row.params;
    groups[g].second += row.madds + (r.include_fusion ? row.fusion : 0);
  }
  const double P = static_cast<double>(r.params());
  const double M = static_cast<double>(r.madds());
  o << "\ngroup     params      share   madds       share\n";
  for (const auto& g : order) {
    const auto [p, m] = groups[g];
    o << std::left << std::setw(10) << g << std::setw(12) << detail::human(static_cast<double>(p)) << std::setw(8)
      << (std::to_string(static_cast<int>(std::lround(100.0 * static_cast<double>(p) / P))) + "%") << std::setw(12)
      << detail::human(static_cast<double>(m))
      << (std::to_string(static_cast<int>(std::lround(100.0 * static_cast<double>(m) / M))) + "%") << '\n';
  }

  o << "\ntotal params   " << r.params() << " (" << detail::human(P) << ")\n";
  o << "total madds    " << r.madds() << " (" << detail::human(M) << ")";
  o << (r.include_fusion ? ", fusion " : ", fusion excluded ") << r.fusion_madds() << '\n';
  o << "total FLOPs    " << r.flops() << " (" << detail::human(2.0 * M) << ", 2 x madds)\n";
  if (reported) {
    o << "reported       " << detail::human(reported->params) << " params, " << detail::human(reported->madds)
      << " madds\n";
    o << "deviation      params " << detail::percent(P / reported->params - 1.0) << ", madds "
      << detail::percent(M / reported->madds - 1.0) << '\n';
  }
  return o.str();
}

}  // namespace scsc
