#pragma once

// Declarative network specifications and the built-in presets.

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "scsc/scsc_block.hpp"

namespace scsc {

enum class BlockStyle {
  Residual,  // SCSC replaces a residual bottleneck: BN/ReLU inside, shortcut around it
  Swin,      // LN -> SCSC -> add, then LN -> MLP -> add
};

enum class Downsample {
  None,
  Stride2,     // first block of the stage runs with stride 2
  PatchMerge,  // space-to-depth(r) -> 1x1 projection to the stage width -> LN
};

struct StemLayer {
  enum class Kind { Dense, Depthwise };
  Kind kind = Kind::Dense;
  std::size_t out = 64;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  friend bool operator==(const StemLayer&, const StemLayer&) = default;
};

struct StemSpec {
  enum class Kind { Conv, Patch };
  Kind kind = Kind::Conv;
  std::vector<StemLayer> layers;  // Conv: each layer is conv -> BN -> ReLU
  std::size_t patch = 4;          // Patch: space-to-depth ratio
  std::size_t dim = 96;           // Patch: projected width
  friend bool operator==(const StemSpec&, const StemSpec&) = default;
};

struct StageSpec {
  std::size_t blocks = 1;
  std::vector<std::size_t> kernels;
  std::size_t width = 64;   // channel count of the stage's output stream
  double expansion = 1.0;   // hidden width multiplier: C_h = expansion * c_in / m
  std::size_t g = 4;
  Downsample downsample = Downsample::None;
  std::size_t merge_ratio = 2;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct HeadSpec {
  std::size_t conv = 0;    // optional 1x1 conv (+BN, ReLU) before pooling; 0 = none
  bool layernorm = false;  // LN before pooling
  std::size_t out = 1000;  // linear output features
  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

struct ArchSpec {
  std::string name = "custom";
  BlockStyle style = BlockStyle::Residual;
  std::size_t in_c = 3;
  std::size_t in_h = 224;
  std::size_t in_w = 224;
  StemSpec stem;
  std::vector<StageSpec> stages;
  HeadSpec head;
  std::size_t mlp_ratio = 4;  // Swin style only
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;

  [[nodiscard]] std::size_t stem_channels() const {
    if (stem.kind == StemSpec::Kind::Patch) return stem.dim;
    return stem.layers.empty() ? in_c : stem.layers.back().out;
  }
};

/// Hidden width of a block of stage `s` whose input has `c_in` channels.
inline std::size_t block_hidden(const StageSpec& s, std::size_t c_in) {
  return hidden_width(s.expansion, c_in, s.kernels.size(), s.g);
}

/// Block configuration for block `b` of stage `k` whose input has `c_in` channels.
inline ScscConfig block_config(const ArchSpec& arch, std::size_t k, std::size_t b, std::size_t c_in) {
  const StageSpec& s = arch.stages.at(k);
  ScscConfig cfg;
  cfg.c_in = c_in;
  cfg.c_out = s.width;
  cfg.kernels = s.kernels;
  cfg.g = s.g;
  cfg.hidden = block_hidden(s, c_in);
  cfg.stride = (b == 0 && s.downsample == Downsample::Stride2) ? 2 : 1;
  if (arch.style == BlockStyle::Swin) {
    cfg.reduce_norm = cfg.reduce_act = cfg.recover_norm = cfg.final_act = cfg.residual = false;
  }
  return cfg;
}

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

struct Resolution {
  std::size_t h = 0;
  std::size_t w = 0;
  friend bool operator==(const Resolution&, const Resolution&) = default;
};

inline Resolution stem_resolution(const ArchSpec& arch, Resolution in) {
  if (arch.stem.kind == StemSpec::Kind::Patch) return {in.h / arch.stem.patch, in.w / arch.stem.patch};
  for (const auto& l : arch.stem.layers) in = {ceil_div(in.h, l.stride), ceil_div(in.w, l.stride)};
  return in;
}

/// Spatial size after each stage for an input of `in`.
inline std::vector<Resolution> stage_resolutions(const ArchSpec& arch, Resolution in) {
  std::vector<Resolution> out;
  Resolution r = stem_resolution(arch, in);
  for (const auto& s : arch.stages) {
    if (s.downsample == Downsample::Stride2) r = {ceil_div(r.h, 2), ceil_div(r.w, 2)};
    if (s.downsample == Downsample::PatchMerge) r = {r.h / s.merge_ratio, r.w / s.merge_ratio};
    out.push_back(r);
  }
  return out;
}

/// Throws ConfigError describing the first violated invariant.
inline void validate(const ArchSpec& arch) {
  auto fail = [&](const std::string& why) { throw ConfigError("ArchSpec '" + arch.name + "': " + why); };
  if (arch.in_c == 0 || arch.in_h == 0 || arch.in_w == 0) fail("input extents must be >= 1");
  if (arch.stages.empty()) fail("need at least one stage");
  if (arch.head.out == 0) fail("head output must be >= 1");

  std::size_t divisor = 1;
  if (arch.stem.kind == StemSpec::Kind::Conv) {
    if (arch.stem.layers.empty()) fail("conv stem needs at least one layer");
    std::size_t c = arch.in_c;
    for (const auto& l : arch.stem.layers) {
      if (l.out == 0 || l.stride == 0 || l.kernel % 2 == 0) fail("stem layers need out >= 1, stride >= 1, odd kernel");
      if (l.kind == StemLayer::Kind::Depthwise && l.out != c) fail("depthwise stem layer must keep the channel count");
      c = l.out;
    }
  } else {
    if (arch.stem.patch == 0 || arch.stem.dim == 0) fail("patch stem needs ratio and dim >= 1");
    divisor = arch.stem.patch;
  }
  for (std::size_t k = 0; k < arch.stages.size(); ++k) {
    const StageSpec& s = arch.stages[k];
    const std::string where = "stage " + std::to_string(k + 1) + ": ";
    if (s.blocks == 0) fail(where + "block count must be >= 1");
    if (s.width == 0) fail(where + "width must be >= 1");
    if (s.downsample == Downsample::PatchMerge) {
      if (s.merge_ratio < 2) fail(where + "merge ratio must be >= 2");
      divisor *= s.merge_ratio;
    }
    if (s.downsample == Downsample::Stride2 && arch.style == BlockStyle::Swin) {
      fail(where + "Swin-style stages downsample by patch merging");
    }
    if (arch.style == BlockStyle::Swin && k > 0 && s.downsample == Downsample::None &&
        s.width != arch.stages[k - 1].width) {
      fail(where + "width change needs a patch merge");
    }
    try {
      block_config(arch, k, 0, s.width).validate();
    } catch (const ConfigError& e) {
      fail(where + e.what());
    }
  }
  if (arch.style == BlockStyle::Swin && arch.stages.front().width != arch.stem_channels() &&
      arch.stages.front().downsample != Downsample::PatchMerge) {
    fail("first Swin stage width must equal the stem width");
  }
  if (arch.in_h % divisor != 0 || arch.in_w % divisor != 0) {
    fail("input " + std::to_string(arch.in_h) + "x" + std::to_string(arch.in_w) + " must be divisible by " +
         std::to_string(divisor) + " for patch merging");
  }
}

// ---------------------------------------------------------------------------
// Presets

enum class ResnetVariant { V1, V2, V3 };

/// Totals reported alongside a preset (params, madds at the preset's input size).
struct ReportedComplexity {
  double params;
  double madds;
};

/// ResNet-50 layout with SCSC blocks. The variant's expansion widens the
/// residual stream over the stage planes (96, 192, 384, 512) the way the
/// bottleneck expansion does in ResNet; each block's hidden width is its input
/// width divided by the kernel count.
inline ArchSpec resnet_scsc(ResnetVariant v, std::size_t num_classes = 1000) {
  const std::vector<std::size_t> planes{96, 192, 384, 512};
  const std::vector<std::vector<std::size_t>> kernels{{3, 9, 13}, {3, 7, 11}, {3, 5, 7}, {3, 5}};
  std::vector<std::size_t> blocks{3, 4, 8, 3};
  std::size_t expansion = 2;
  std::string name = "resnet-scsc-v1";
  if (v == ResnetVariant::V2) {
    blocks = {3, 5, 12, 3};
    name = "resnet-scsc-v2";
  } else if (v == ResnetVariant::V3) {
    blocks = {3, 5, 12, 3};
    expansion = 3;
    name = "resnet-scsc-v3";
  }
  ArchSpec a;
  a.name = name;
  a.style = BlockStyle::Residual;
  a.stem.kind = StemSpec::Kind::Conv;
  a.stem.layers = {{StemLayer::Kind::Dense, 64, 7, 2}, {StemLayer::Kind::Depthwise, 64, 3, 2}};
  for (std::size_t k = 0; k < 4; ++k) {
    StageSpec s;
    s.blocks = blocks[k];
    s.kernels = kernels[k];
    s.width = planes[k] * expansion;
    s.downsample = k == 0 ? Downsample::None : Downsample::Stride2;
    a.stages.push_back(s);
  }
  a.head.out = num_classes;
  return a;
}

/// Swin-T layout with every attention block replaced by SCSC.
inline ArchSpec swin_scsc(std::size_t num_classes = 1000) {
  ArchSpec a;
  a.name = "swin-scsc";
  a.style = BlockStyle::Swin;
  a.stem.kind = StemSpec::Kind::Patch;
  a.stem.patch = 4;
  a.stem.dim = 96;
  const std::vector<std::size_t> depths{2, 2, 6, 2};
  const std::vector<std::size_t> widths{96, 192, 384, 768};
  const std::vector<std::vector<std::size_t>> kernels{{3, 11}, {3, 9}, {3, 7}, {3, 5}};
  for (std::size_t k = 0; k < 4; ++k) {
    StageSpec s;
    s.blocks = depths[k];
    s.kernels = kernels[k];
    s.width = widths[k];
    s.downsample = k == 0 ? Downsample::None : Downsample::PatchMerge;
    s.merge_ratio = 2;
    a.stages.push_back(s);
  }
  a.head.layernorm = true;
  a.head.out = num_classes;
  return a;
}

/// Face-recognition backbones at 96x96, analysed for complexity and shapes only.
/// The head is a linear embedding rather than a classifier.
/// FaceResNet-SCSC widens the stream over its planes like ResNet-SCSC.
inline ArchSpec faceresnet_scsc() {
  ArchSpec a;
  a.name = "faceresnet-scsc";
  a.style = BlockStyle::Residual;
  a.in_h = a.in_w = 96;
  a.stem.kind = StemSpec::Kind::Conv;
  a.stem.layers = {{StemLayer::Kind::Dense, 64, 3, 2}, {StemLayer::Kind::Dense, 64, 3, 2}};
  const std::vector<std::size_t> planes{64, 128, 256, 512};
  const std::vector<std::size_t> blocks{6, 6, 6, 4};
  const std::vector<std::vector<std::size_t>> kernels{{5, 11}, {3, 9}, {3, 5}, {3, 3}};
  for (std::size_t k = 0; k < 4; ++k) {
    StageSpec s;
    s.blocks = blocks[k];
    s.kernels = kernels[k];
    s.width = planes[k] * 2;
    s.downsample = k == 0 ? Downsample::None : Downsample::Stride2;
    a.stages.push_back(s);
  }
  a.head.conv = 512;
  a.head.out = 512;
  return a;
}

inline ArchSpec mobilefacenet_scsc() {
  ArchSpec a;
  a.name = "mobilefacenet-scsc";
  a.style = BlockStyle::Residual;
  a.in_h = a.in_w = 96;
  a.stem.kind = StemSpec::Kind::Conv;
  a.stem.layers = {{StemLayer::Kind::Dense, 64, 3, 2}, {StemLayer::Kind::Depthwise, 64, 3, 1}};
  // Stage widths and strides of the base MobileFaceNet bottlenecks.
  const std::vector<std::size_t> widths{64, 128, 128, 128, 128};
  const std::vector<std::size_t> blocks{5, 1, 6, 1, 2};
  const std::vector<Downsample> down{Downsample::Stride2, Downsample::Stride2, Downsample::None, Downsample::Stride2,
                                     Downsample::None};
  const std::vector<std::vector<std::size_t>> kernels{{3, 9}, {3, 7}, {3, 7}, {3, 5}, {3, 5}};
  for (std::size_t k = 0; k < 5; ++k) {
    StageSpec s;
    s.blocks = blocks[k];
    s.kernels = kernels[k];
    s.width = widths[k];
    s.expansion = 3.0;
    s.downsample = down[k];
    a.stages.push_back(s);
  }
  a.head.conv = 512;
  a.head.out = 128;
  return a;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"resnet-scsc-v1", "resnet-scsc-v2",  "resnet-scsc-v3",
                                              "swin-scsc",      "faceresnet-scsc", "mobilefacenet-scsc"};
  return names;
}

inline ArchSpec preset(const std::string& name) {
  if (name == "resnet-scsc-v1") return resnet_scsc(ResnetVariant::V1);
  if (name == "resnet-scsc-v2") return resnet_scsc(ResnetVariant::V2);
  if (name == "resnet-scsc-v3") return resnet_scsc(ResnetVariant::V3);
  if (name == "swin-scsc") return swin_scsc();
  if (name == "faceresnet-scsc") return faceresnet_scsc();
  if (name == "mobilefacenet-scsc") return mobilefacenet_scsc();
  throw ConfigError("unknown preset '" + name + "'");
}

/// Published totals for presets that have them.
inline std::optional<ReportedComplexity> reported_complexity(const std::string& name) {
  static const std::map<std::string, ReportedComplexity> table{
      {"resnet-scsc-v1", {10e6, 1.7e9}},   {"resnet-scsc-v2", {12e6, 2.2e9}},
      {"resnet-scsc-v3", {25e6, 4.5e9}},   {"swin-scsc", {22e6, 3.5e9}},
      {"faceresnet-scsc", {8.3e6, 330e6}}, {"mobilefacenet-scsc", {0.89e6, 146e6}},
  };
  auto it = table.find(name);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

// ---------------------------------------------------------------------------
// Derived specs

inline ArchSpec with_input(ArchSpec a, std::size_t h, std::size_t w) {
  a.in_h = h;
  a.in_w = w;
  return a;
}

inline ArchSpec with_classes(ArchSpec a, std::size_t k) {
  a.head.out = k;
  return a;
}

/// Divides every channel count by `divisor` (rounding up). Kernel sets, depths
/// and downsampling are unchanged.
inline ArchSpec reduce_width(ArchSpec a, std::size_t divisor) {
  if (divisor == 0) throw ConfigError("reduce_width: divisor must be >= 1");
  auto shrink = [&](std::size_t c) { return std::max<std::size_t>(1, ceil_div(c, divisor)); };
  for (auto& l : a.stem.layers) l.out = shrink(l.out);
  a.stem.dim = shrink(a.stem.dim);
  for (auto& s : a.stages) s.width = shrink(s.width);
  if (a.head.conv != 0) a.head.conv = shrink(a.head.conv);
  if (a.style == BlockStyle::Swin && a.stages.front().downsample != Downsample::PatchMerge) {
    a.stages.front().width = a.stem.dim;
  }
  return a;
}

// ---------------------------------------------------------------------------
// Line-oriented text format: "key = value", stages as "[stage N]" sections.

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

inline std::vector<std::size_t> parse_sizes(const std::string& v, const std::string& key) {
  std::vector<std::size_t> out;
  for (const auto& part : split(v, ',')) out.push_back(parse_size(trim(part), key));
  return out;
}

inline std::string format_double(double x) {
  std::ostringstream o;
  o << std::setprecision(17) << x;
  return o.str();
}

}  // namespace detail

inline std::string to_text(const ArchSpec& a) {
  std::ostringstream o;
  o << "name = " << a.name << '\n';
  o << "style = " << (a.style == BlockStyle::Swin ? "swin" : "residual") << '\n';
  o << "input = " << a.in_c << 'x' << a.in_h << 'x' << a.in_w << '\n';
  if (a.stem.kind == StemSpec::Kind::Patch) {
    o << "stem.kind = patch\n";
    o << "stem.patch = " << a.stem.patch << '\n';
    o << "stem.dim = " << a.stem.dim << '\n';
  } else {
    o << "stem.kind = conv\n";
    o << "stem.layers = ";
    for (std::size_t i = 0; i < a.stem.layers.size(); ++i) {
      const auto& l = a.stem.layers[i];
      o << (i ? "," : "") << (l.kind == StemLayer::Kind::Dense ? "dense" : "depthwise") << ':' << l.out << ':'
        << l.kernel << ':' << l.stride;
    }
    o << '\n';
  }
  o << "mlp_ratio = " << a.mlp_ratio << '\n';
  o << "head.conv = " << a.head.conv << '\n';
  o << "head.norm = " << (a.head.layernorm ? "layernorm" : "none") << '\n';
  o << "head.out = " << a.head.out << '\n';
  for (std::size_t k = 0; k < a.stages.size(); ++k) {
    const StageSpec& s = a.stages[k];
    o << "\n[stage " << k + 1 << "]\n";
    o << "blocks = " << s.blocks << '\n';
    o << "kernels = " << detail::join_sizes(s.kernels) << '\n';
    o << "width = " << s.width << '\n';
    o << "expansion = " << detail::format_double(s.expansion) << '\n';
    o << "g = " << s.g << '\n';
    o << "downsample = ";
    switch (s.downsample) {
      case Downsample::None: o << "none"; break;
      case Downsample::Stride2: o << "stride2"; break;
      case Downsample::PatchMerge: o << "patch:" << s.merge_ratio; break;
    }
    o << '\n';
  }
  return o.str();
}

inline ArchSpec from_text(const std::string& text) {
  ArchSpec a;
  a.stem.layers.clear();
  StageSpec* stage = nullptr;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = detail::trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.rfind("[stage", 0) != 0) {
        throw ConfigError("config line " + std::to_string(line_no) + ": bad section '" + line + "'");
      }
      const std::size_t idx = detail::parse_size(detail::trim(line.substr(6, line.size() - 7)), "stage index");
      if (idx != a.stages.size() + 1) {
        throw ConfigError("config line " + std::to_string(line_no) + ": stages must be numbered 1,2,... in order");
      }
      a.stages.emplace_back();
      stage = &a.stages.back();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (stage != nullptr) {
      if (key == "blocks") stage->blocks = detail::parse_size(val, key);
      else if (key == "kernels") stage->kernels = detail::parse_sizes(val, key);
      else if (key == "width") stage->width = detail::parse_size(val, key);
      else if (key == "expansion") {
        try {
          stage->expansion = std::stod(val);
        } catch (const std::exception&) {
          throw ConfigError("config: 'expansion' expects a number, got '" + val + "'");
        }
      } else if (key == "g") stage->g = detail::parse_size(val, key);
      else if (key == "downsample") {
        if (val == "none") stage->downsample = Downsample::None;
        else if (val == "stride2") stage->downsample = Downsample::Stride2;
        else if (val.rfind("patch:", 0) == 0) {
          stage->downsample = Downsample::PatchMerge;
          stage->merge_ratio = detail::parse_size(val.substr(6), key);
        } else {
          throw ConfigError("config: unknown downsample '" + val + "'");
        }
      } else {
        throw ConfigError("config line " + std::to_string(line_no) + ": unknown stage key '" + key + "'");
      }
      continue;
    }
    if (key == "name") a.name = val;
    else if (key == "style") {
      if (val == "residual") a.style = BlockStyle::Residual;
      else if (val == "swin") a.style = BlockStyle::Swin;
      else throw ConfigError("config: unknown style '" + val + "'");
    } else if (key == "input") {
      const auto dims = detail::split(val, 'x');
      if (dims.size() != 3) throw ConfigError("config: input must be CxHxW, got '" + val + "'");
      a.in_c = detail::parse_size(dims[0], key);
      a.in_h = detail::parse_size(dims[1], key);
      a.in_w = detail::parse_size(dims[2], key);
    } else if (key == "stem.kind") {
      if (val == "conv") a.stem.kind = StemSpec::Kind::Conv;
      else if (val == "patch") a.stem.kind = StemSpec::Kind::Patch;
      else throw ConfigError("config: unknown stem kind '" + val + "'");
    } else if (key == "stem.patch") a.stem.patch = detail::parse_size(val, key);
    else if (key == "stem.dim") a.stem.dim = detail::parse_size(val, key);
    else if (key == "stem.layers") {
      a.stem.layers.clear();
      for (const auto& item : detail::split(val, ',')) {
        const auto f = detail::split(detail::trim(item), ':');
        if (f.size() != 4) throw ConfigError("config: stem layer must be kind:out:kernel:stride, got '" + item + "'");
        StemLayer l;
        if (f[0] == "dense") l.kind = StemLayer::Kind::Dense;
        else if (f[0] == "depthwise") l.kind = StemLayer::Kind::Depthwise;
        else throw ConfigError("config: unknown stem layer kind '" + f[0] + "'");
        l.out = detail::parse_size(f[1], key);
        l.kernel = detail::parse_size(f[2], key);
        l.stride = detail::parse_size(f[3], key);
        a.stem.layers.push_back(l);
      }
    } else if (key == "mlp_ratio") a.mlp_ratio = detail::parse_size(val, key);
    else if (key == "head.conv") a.head.conv = detail::parse_size(val, key);
    else if (key == "head.norm") {
      if (val == "none") a.head.layernorm = false;
      else if (val == "layernorm") a.head.layernorm = true;
      else throw ConfigError("config: unknown head norm '" + val + "'");
    } else if (key == "head.out") a.head.out = detail::parse_size(val, key);
    else throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  validate(a);
  return a;
}

// ---------------------------------------------------------------------------
// Human-readable stage table

inline std::string describe(const ArchSpec& a) {
  validate(a);
  const auto res = stage_resolutions(a, {a.in_h, a.in_w});
  std::ostringstream o;
  o << a.name << "  (" << (a.style == BlockStyle::Swin ? "swin" : "residual") << ", input " << a.in_c << 'x'
    << a.in_h << 'x' << a.in_w << ")\n";
  o << "stem: ";
  if (a.stem.kind == StemSpec::Kind::Patch) {
    o << "concat " << a.stem.patch << 'x' << a.stem.patch << ", " << a.stem.dim << "-d, LN\n";
  } else {
    for (std::size_t i = 0; i < a.stem.layers.size(); ++i) {
      const auto& l = a.stem.layers[i];
      o << (i ? ", " : "") << (l.kind == StemLayer::Kind::Dense ? "conv " : "dwconv ") << l.kernel << 'x'
        << l.kernel << '/' << l.stride << ' ' << l.out << "-d";
    }
    o << '\n';
  }
  o << std::left << std::setw(8) << "stage" << std::setw(22) << "downsp. rate (size)" << std::setw(14) << "kernels"
    << std::setw(8) << "blocks" << std::setw(8) << "width" << std::setw(8) << "hidden" << std::setw(4) << "g"
    << "entry\n";
  std::size_t c = a.stem_channels();
  for (std::size_t k = 0; k < a.stages.size(); ++k) {
    const StageSpec& s = a.stages[k];
    if (s.downsample == Downsample::PatchMerge) c = s.width;
    // First-block hidden width differs when the stage widens the stream.
    std::string hidden = std::to_string(block_hidden(s, c));
    if (s.blocks > 1 && c != s.width) hidden += "/" + std::to_string(block_hidden(s, s.width));
    c = s.width;
    const std::size_t rate = a.in_h / res[k].h;
    std::ostringstream rate_col;
    rate_col << rate << "x (" << res[k].h << 'x' << res[k].w << ')';
    std::string entry = "-";
    if (s.downsample == Downsample::Stride2) entry = "stride 2";
    if (s.downsample == Downsample::PatchMerge) {
      entry = "concat " + std::to_string(s.merge_ratio) + "x" + std::to_string(s.merge_ratio) + ", " +
              std::to_string(s.width) + "-d, LN";
    }
    o << std::left << std::setw(8) << ("stage" + std::to_string(k + 1)) << std::setw(22) << rate_col.str()
      << std::setw(14) << ("[" + detail::join_sizes(s.kernels) + "]") << std::setw(8) << s.blocks << std::setw(8)
      << s.width << std::setw(8) << hidden << std::setw(4) << s.g << entry << '\n';
  }
  o << "head: ";
  if (a.head.conv != 0) o << "conv 1x1 " << a.head.conv << "-d, ";
  if (a.head.layernorm) o << "LN, ";
  o << "avgpool, linear " << a.head.out << '\n';
  return o.str();
}

}  // namespace scsc
