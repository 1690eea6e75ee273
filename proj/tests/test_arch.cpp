#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "scsc/arch.hpp"
#include "scsc/network.hpp"

using namespace scsc;

namespace {

using Sets = std::vector<std::vector<std::size_t>>;

Sets kernel_sets(const ArchSpec& a) {
  Sets out;
  for (const auto& s : a.stages) out.push_back(s.kernels);
  return out;
}

std::vector<std::size_t> depths(const ArchSpec& a) {
  std::vector<std::size_t> out;
  for (const auto& s : a.stages) out.push_back(s.blocks);
  return out;
}

std::vector<std::size_t> widths(const ArchSpec& a) {
  std::vector<std::size_t> out;
  for (const auto& s : a.stages) out.push_back(s.width);
  return out;
}

Tensor4 rnd(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return oracle::random_tensor(s, rng);
}

struct DescribedStage {
  std::size_t rate = 0, h = 0, w = 0, blocks = 0, width = 0, g = 0;
  std::vector<std::size_t> kernels;
  std::string entry;
};

/// Parses the stage rows of describe() back into fields.
std::vector<DescribedStage> parse_table(const std::string& text) {
  std::vector<DescribedStage> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("stage", 0) != 0 || line.rfind("stage ", 0) == 0) continue;
    std::istringstream row(line);
    DescribedStage d;
    std::string name, rate, size, kernels, hidden;
    row >> name >> rate >> size >> kernels >> d.blocks >> d.width >> hidden >> d.g;
    std::getline(row, d.entry);
    d.entry = d.entry.substr(d.entry.find_first_not_of(' '));
    d.rate = std::stoul(rate.substr(0, rate.size() - 1));
    const auto x = size.find('x');
    d.h = std::stoul(size.substr(1, x - 1));
    d.w = std::stoul(size.substr(x + 1, size.size() - x - 2));
    std::istringstream ks(kernels.substr(1, kernels.size() - 2));
    std::string k;
    while (std::getline(ks, k, ',')) d.kernels.push_back(std::stoul(k));
    rows.push_back(d);
  }
  return rows;
}

}  // namespace

TEST(Presets, ResnetKernelSetsDepthsAndWidths) {
  const Sets kernels{{3, 9, 13}, {3, 7, 11}, {3, 5, 7}, {3, 5}};
  const ArchSpec v1 = resnet_scsc(ResnetVariant::V1);
  const ArchSpec v2 = resnet_scsc(ResnetVariant::V2);
  const ArchSpec v3 = resnet_scsc(ResnetVariant::V3);
  EXPECT_EQ(kernel_sets(v1), kernels);
  EXPECT_EQ(kernel_sets(v2), kernels);
  EXPECT_EQ(kernel_sets(v3), kernels);
  EXPECT_EQ(depths(v1), (std::vector<std::size_t>{3, 4, 8, 3}));
  EXPECT_EQ(depths(v2), (std::vector<std::size_t>{3, 5, 12, 3}));
  EXPECT_EQ(depths(v3), (std::vector<std::size_t>{3, 5, 12, 3}));
  EXPECT_EQ(widths(v1), (std::vector<std::size_t>{192, 384, 768, 1024}));
  EXPECT_EQ(widths(v3), (std::vector<std::size_t>{288, 576, 1152, 1536}));
  EXPECT_EQ(v1.head.out, 1000u);
  EXPECT_EQ(resnet_scsc(ResnetVariant::V1, 10).head.out, 10u);
}

TEST(Presets, SwinKernelSetsDepthsAndWidths) {
  const ArchSpec s = swin_scsc();
  EXPECT_EQ(kernel_sets(s), (Sets{{3, 11}, {3, 9}, {3, 7}, {3, 5}}));
  EXPECT_EQ(depths(s), (std::vector<std::size_t>{2, 2, 6, 2}));
  EXPECT_EQ(widths(s), (std::vector<std::size_t>{96, 192, 384, 768}));
  EXPECT_EQ(s.stem.kind, StemSpec::Kind::Patch);
  EXPECT_EQ(s.stem.patch, 4u);
  EXPECT_EQ(s.stem.dim, 96u);
  EXPECT_EQ(s.mlp_ratio, 4u);
  for (std::size_t k = 1; k < 4; ++k) {
    EXPECT_EQ(s.stages[k].downsample, Downsample::PatchMerge);
    EXPECT_EQ(s.stages[k].merge_ratio, 2u);
  }
}

TEST(Presets, FacePresets) {
  const ArchSpec fr = faceresnet_scsc();
  EXPECT_EQ(depths(fr), (std::vector<std::size_t>{6, 6, 6, 4}));
  EXPECT_EQ(kernel_sets(fr), (Sets{{5, 11}, {3, 9}, {3, 5}, {3, 3}}));
  EXPECT_EQ(fr.in_h, 96u);
  EXPECT_EQ(fr.in_w, 96u);

  const ArchSpec mf = mobilefacenet_scsc();
  EXPECT_EQ(mf.stages.size(), 5u);
  EXPECT_EQ(depths(mf), (std::vector<std::size_t>{5, 1, 6, 1, 2}));
  EXPECT_EQ(kernel_sets(mf), (Sets{{3, 9}, {3, 7}, {3, 7}, {3, 5}, {3, 5}}));
  for (const auto& s : mf.stages) EXPECT_EQ(s.expansion, 3.0);
  EXPECT_NO_THROW(validate(fr));
  EXPECT_NO_THROW(validate(mf));
}

TEST(Presets, RegistryCoversEveryPreset) {
  for (const auto& name : preset_names()) {
    const ArchSpec a = preset(name);
    EXPECT_EQ(a.name, name);
    EXPECT_NO_THROW(validate(a)) << name;
    EXPECT_TRUE(reported_complexity(name).has_value()) << name;
  }
  EXPECT_THROW(preset("resnet-scsc-v4"), ConfigError);
}

TEST(Geometry, ResnetV3StageSizesAt224) {
  const auto r = stage_resolutions(resnet_scsc(ResnetVariant::V3), {224, 224});
  ASSERT_EQ(r.size(), 4u);
  EXPECT_EQ(r[0], (Resolution{56, 56}));
  EXPECT_EQ(r[1], (Resolution{28, 28}));
  EXPECT_EQ(r[2], (Resolution{14, 14}));
  EXPECT_EQ(r[3], (Resolution{7, 7}));
}

TEST(Geometry, FourStagePresetsDownsampleByFourThenTwo) {
  for (const auto& name : preset_names()) {
    const ArchSpec a = preset(name);
    if (a.stages.size() != 4) continue;
    const auto r = stage_resolutions(a, {64, 64});
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(r[k].h, 64u / (4u << k)) << name << " stage " << k + 1;
  }
}

TEST(Network, StageShapesFromActualForwardAt64) {
  for (const auto& name : preset_names()) {
    const ArchSpec a = with_classes(with_input(reduce_width(preset(name), 16), 64, 64), 5);
    Network net(a, 1);
    std::vector<Shape> shapes;
    const Tensor4 y = net.predict(rnd(Shape{1, 3, 64, 64}, 2), NormMode::Train, &shapes);
    EXPECT_EQ(y.shape(), (Shape{1, 5, 1, 1})) << name;
    const auto want = stage_resolutions(a, {64, 64});
    ASSERT_EQ(shapes.size(), want.size()) << name;
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      EXPECT_EQ(shapes[k].h, want[k].h) << name << " stage " << k + 1;
      EXPECT_EQ(shapes[k].w, want[k].w) << name << " stage " << k + 1;
      EXPECT_EQ(shapes[k].c, a.stages[k].width) << name << " stage " << k + 1;
    }
  }
}

TEST(Network, MobileFaceNetFollowsItsBaseStrides) {
  const auto r = stage_resolutions(mobilefacenet_scsc(), {64, 64});
  ASSERT_EQ(r.size(), 5u);
  const std::vector<std::size_t> want{16, 8, 8, 4, 4};
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(r[k].h, want[k]);
}

TEST(Network, FullWidthForwardIsFinite) {
  for (const char* name : {"resnet-scsc-v1", "swin-scsc"}) {
    Network net(with_classes(with_input(preset(name), 64, 64), 10), 3);
    const Tensor4 y = net.predict(rnd(Shape{1, 3, 64, 64}, 4));
    EXPECT_EQ(y.shape(), (Shape{1, 10, 1, 1})) << name;
    for (double v : y.data()) EXPECT_TRUE(std::isfinite(v)) << name;
  }
}

TEST(Network, EveryParameterReceivesAFiniteGradient) {
  for (const auto& name : preset_names()) {
    Network net(with_classes(with_input(reduce_width(preset(name), 16), 32, 32), 3), 5);
    Tape tape;
    const std::vector<Var> vars = net.bind(tape);
    const Var x = tape.constant(rnd(Shape{2, 3, 32, 32}, 6));
    const Var loss = ad::cross_entropy(net.forward(vars, x, ForwardContext{}), {0, 2});
    const Gradients g = tape.backward(loss);
    std::size_t nonzero = 0;
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const Tensor4 gi = g[vars[i]];
      bool any = false;
      for (double v : gi.data()) {
        ASSERT_TRUE(std::isfinite(v)) << name << " " << net.parameters()[i].name;
        any = any || v != 0.0;
      }
      nonzero += any ? 1 : 0;
    }
    // Batchnorm biases feeding straight into another batchnorm get exactly zero gradient.
    EXPECT_GT(nonzero, vars.size() * 3 / 4) << name;
  }
}

TEST(Network, ParameterNamesAreUniqueAndSeedDeterministic) {
  const ArchSpec a = with_classes(reduce_width(preset("resnet-scsc-v1"), 16), 4);
  Network n1(a, 9), n2(a, 9), n3(a, 10);
  std::set<std::string> names;
  for (const auto& p : n1.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  EXPECT_EQ(n1.parameters().front().name, "stem.0.weight");
  EXPECT_EQ(n1.parameters().back().name, "head.fc.bias");
  double d12 = 0.0, d13 = 0.0;
  for (std::size_t i = 0; i < n1.parameters().size(); ++i) {
    d12 = std::max(d12, oracle::max_abs_diff(n1.parameters()[i].value, n2.parameters()[i].value));
    d13 = std::max(d13, oracle::max_abs_diff(n1.parameters()[i].value, n3.parameters()[i].value));
  }
  EXPECT_EQ(d12, 0.0);
  EXPECT_GT(d13, 0.0);
}

TEST(Validation, RejectsInconsistentSpecs) {
  ArchSpec a = preset("resnet-scsc-v1");
  a.stages[1].kernels = {3, 4};
  EXPECT_THROW(validate(a), ConfigError);

  a = preset("resnet-scsc-v1");
  a.stages[2].blocks = 0;
  EXPECT_THROW(validate(a), ConfigError);

  a = preset("swin-scsc");
  a.in_h = 48;  // not divisible by 32
  EXPECT_THROW(validate(a), ConfigError);

  a = preset("swin-scsc");
  a.stages[2].downsample = Downsample::Stride2;
  EXPECT_THROW(validate(a), ConfigError);

  a = preset("resnet-scsc-v1");
  a.stages.clear();
  EXPECT_THROW(validate(a), ConfigError);
  EXPECT_THROW(Network(a, 0), ConfigError);
}

TEST(TextFormat, RoundTripsEveryPreset) {
  for (const auto& name : preset_names()) {
    const ArchSpec a = preset(name);
    const std::string text = to_text(a);
    EXPECT_EQ(from_text(text), a) << name;
    EXPECT_EQ(to_text(from_text(text)), text) << name;
  }
}

TEST(TextFormat, ParsesHandWrittenConfig) {
  const std::string text = R"(# two-stage toy
name = toy
style = residual
input = 3x32x32
stem.kind = conv
stem.layers = dense:16:3:2
head.out = 7

[stage 1]
blocks = 2
kernels = 3,5
width = 16
g = 2

[stage 2]
blocks = 1
kernels = 3,7
width = 32
downsample = stride2
expansion = 1.5
g = 4
)";
  const ArchSpec a = from_text(text);
  EXPECT_EQ(a.name, "toy");
  EXPECT_EQ(a.in_h, 32u);
  ASSERT_EQ(a.stages.size(), 2u);
  EXPECT_EQ(a.stages[1].kernels, (std::vector<std::size_t>{3, 7}));
  EXPECT_EQ(a.stages[1].downsample, Downsample::Stride2);
  EXPECT_EQ(a.stages[1].expansion, 1.5);
  EXPECT_EQ(a.head.out, 7u);
  EXPECT_THROW(from_text("name = x\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(from_text("stem.layers = dense:16:4:2\n[stage 1]\nkernels = 3\n"), ConfigError);
}

TEST(Describe, TableRoundTripsTabulatedFields) {
  for (const auto& name : preset_names()) {
    const ArchSpec a = preset(name);
    const auto rows = parse_table(describe(a));
    const auto res = stage_resolutions(a, {a.in_h, a.in_w});
    ASSERT_EQ(rows.size(), a.stages.size()) << name;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const StageSpec& s = a.stages[k];
      EXPECT_EQ(rows[k].kernels, s.kernels) << name;
      EXPECT_EQ(rows[k].blocks, s.blocks) << name;
      EXPECT_EQ(rows[k].width, s.width) << name;
      EXPECT_EQ(rows[k].g, s.g) << name;
      EXPECT_EQ(rows[k].h, res[k].h) << name;
      EXPECT_EQ(rows[k].w, res[k].w) << name;
      EXPECT_EQ(rows[k].rate, a.in_h / res[k].h) << name;
      const std::string want_entry = s.downsample == Downsample::Stride2  ? "stride 2"
                                     : s.downsample == Downsample::None ? "-"
                                                                        : "concat 2x2, " + std::to_string(s.width) +
                                                                              "-d, LN";
      EXPECT_EQ(rows[k].entry, want_entry) << name;
    }
  }
}

TEST(Describe, MatchesGoldenRenderings) {
  for (const auto& name : preset_names()) {
    std::ifstream in(std::string(SCSC_GOLDEN_DIR) + "/describe_" + name + ".txt");
    ASSERT_TRUE(in) << "missing golden file for " << name;
    std::stringstream want;
    want << in.rdbuf();
    EXPECT_EQ(describe(preset(name)), want.str()) << name;
  }
}
