// scsc: command-line front end for the SCSC library.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "scsc/scsc.hpp"

using namespace scsc;

namespace {

bool is_preset(const std::string& s) {
  for (const auto& n : preset_names())
    if (n == s) return true;
  return false;
}

ArchSpec load_arch(const std::string& what) {
  if (is_preset(what)) return preset(what);
  std::ifstream in(what);
  if (!in) throw ConfigError("'" + what + "' is neither a preset nor a readable config file");
  std::stringstream text;
  text << in.rdbuf();
  return from_text(text.str());
}

Resolution parse_resolution(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) {
      const std::size_t v = std::stoul(s);
      return {v, v};
    }
    return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw ConfigError("bad input size '" + s + "' (expected HxW)");
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string arch;
  std::string input;
  bool tsv = false;
  bool no_fusion = false;
};

int run_analyze(const AnalyzeArgs& a) {
  const ArchSpec arch = load_arch(a.arch);
  const Resolution in = a.input.empty() ? Resolution{arch.in_h, arch.in_w} : parse_resolution(a.input);
  const CostReport r = analyze(arch, in, !a.no_fusion);
  if (a.tsv) {
    std::cout << render_tsv(r);
    return 0;
  }
  // Published totals only apply to the unmodified preset at its own resolution.
  std::optional<ReportedComplexity> reported;
  if (is_preset(a.arch) && in == Resolution{arch.in_h, arch.in_w} && !a.no_fusion) reported = reported_complexity(a.arch);
  std::cout << render_text(r, reported);
  return 0;
}

struct DescribeArgs {
  std::string arch;
  std::string write_config;
};

int run_describe(const DescribeArgs& a) {
  const ArchSpec arch = load_arch(a.arch);
  std::cout << describe(arch);
  if (!a.write_config.empty()) write_text_file(a.write_config, to_text(arch));
  return 0;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 0;
  double tol = 1e-4;
  double step = 1e-5;
  std::size_t configs = 10;
};

int run_gradcheck(const GradcheckArgs& a) {
  std::mt19937_64 rng(a.seed);
  std::uniform_int_distribution<std::size_t> pick_m(1, 3), pick_k(0, 5), pick_s(1, 2), pick_c(2, 4), pick_g(0, 2);
  bool all = true;
  for (std::size_t trial = 0; trial < a.configs; ++trial) {
    ScscConfig cfg;
    cfg.g = std::size_t{1} << pick_g(rng);
    const std::size_t m = pick_m(rng);
    for (std::size_t i = 0; i < m; ++i) cfg.kernels.push_back(3 + 2 * pick_k(rng));
    cfg.stride = pick_s(rng);
    cfg.c_in = pick_c(rng);
    cfg.c_out = pick_c(rng) + 1;
    cfg.hidden = cfg.g * (1 + rng() % 2);
    std::mt19937_64 init(rng());
    const ScscParams p0 = init_scsc_params(cfg, init);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor4 x(Shape{2, cfg.c_in, 5, 5});
    for (double& v : x.data()) v = u(rng);
    Tensor4 probe(cfg.output_shape(x.shape()));
    for (double& v : probe.data()) v = u(rng);

    std::vector<NamedTensor> params{{"input", x}};
    p0.for_each([&](const std::string& name, const Tensor4& t) { params.push_back({name, t}); });
    auto f = [&](Tape&, std::span<const Var> v) {
      ScscParamVars pv = p0.map<Var>([](const Tensor4&) { return Var{}; });
      std::size_t i = 1;
      pv.for_each([&](const std::string&, Var& slot) { slot = v[i++]; });
      return ad::weighted_sum(scsc_block_forward(v[0], pv, cfg), probe);
    };
    const GradCheckReport r = grad_check(f, params, a.step, a.tol);
    all = all && r.passed();
    std::cout << "config " << trial << ": c_in " << cfg.c_in << " c_out " << cfg.c_out << " hidden " << cfg.hidden
              << " kernels [" << detail::join_sizes(cfg.kernels) << "] g " << cfg.g << " stride " << cfg.stride
              << "  max rel err " << std::scientific << std::setprecision(2) << r.max_rel_err() << std::defaultfloat
              << (r.passed() ? "  ok" : "  FAIL") << '\n';
    for (const auto& e : r.entries) {
      if (e.max_rel_err < a.tol) continue;
      std::cout << "  " << e.name << " element " << e.worst_index << ": analytic " << e.analytic_at_worst
                << " numeric " << e.numeric_at_worst << '\n';
    }
  }
  std::cout << (all ? "gradcheck passed" : "gradcheck FAILED") << " (tol " << a.tol << ", step " << a.step << ")\n";
  return all ? 0 : 1;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string task = "separable";
  std::string arch = "resnet-scsc-v1";
  std::size_t width_div = 16;
  std::size_t size = 32;
  std::size_t steps = 300;
  std::size_t batch = 16;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  std::string out;
  std::string checkpoint;
};

ArchSpec toy_arch(const TrainArgs& a, const SynthTask& task) {
  return with_classes(with_input(reduce_width(load_arch(a.arch), a.width_div), task.size, task.size), task.classes());
}

SynthTask toy_task(const TrainArgs& a) {
  SynthTask task;
  task.kind = parse_task_kind(a.task);
  task.seed = a.seed;
  task.size = a.size;
  return task;
}

SgdConfig toy_sgd(const TrainArgs& a) {
  SgdConfig cfg;
  cfg.lr = a.lr;
  cfg.momentum = a.momentum;
  cfg.steps = a.steps;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  return cfg;
}

int run_train(const TrainArgs& a) {
  const SynthTask task = toy_task(a);
  Network net(toy_arch(a, task), a.seed);
  const std::size_t every = std::max<std::size_t>(1, a.steps / 10);
  const TrainResult r = train(net, task, toy_sgd(a), [&](std::size_t step, double loss) {
    if (step % every == 0 || step + 1 == a.steps) std::cout << "step " << step << "  loss " << loss << '\n';
  });
  std::cout << "task " << to_string(task.kind) << ", " << net.spec().name << " (" << net.parameter_count()
            << " params): loss " << r.losses.front() << " -> " << tail_mean(r.losses) << ", held-out accuracy "
            << r.accuracy << '\n';
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw ConfigError("cannot write '" + a.out + "'");
    write_loss_curve(f, r.losses);
  }
  if (!a.checkpoint.empty()) {
    std::ofstream f(a.checkpoint, std::ios::binary);
    if (!f) throw ConfigError("cannot write '" + a.checkpoint + "'");
    write_checkpoint(f, net.parameters());
  }
  return 0;
}

struct SweepArgs {
  std::string axis = "g";
  TrainArgs train;
};

int run_sweep(const SweepArgs& a) {
  const SynthTask task = toy_task(a.train);
  const SweepReport r = ablation_sweep(parse_sweep_axis(a.axis), toy_arch(a.train, task), task, toy_sgd(a.train));
  const std::string text = render_sweep(r);
  std::cout << text;
  if (!a.train.out.empty()) write_text_file(a.train.out, text);
  return 0;
}

// ---------------------------------------------------------------------------

void print_stats(const std::string& name, const Tensor4& t) {
  double lo = INFINITY, hi = -INFINITY, sum = 0.0;
  for (double v : t.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    sum += v;
  }
  std::cout << std::left << std::setw(36) << name << std::right << std::setw(18) << t.shape().str() << "  min "
            << lo << "  max " << hi << "  mean " << sum / static_cast<double>(t.size()) << '\n';
}

int run_inspect(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  char magic[6] = {};
  in.read(magic, 6);
  in.seekg(0);
  if (std::string(magic, 6) == "SCSCT4") {
    print_stats(path, read_tensor(in));
    return 0;
  }
  std::size_t total = 0;
  const auto tensors = read_checkpoint(in);
  for (const auto& t : tensors) {
    print_stats(t.name, t.value);
    total += t.value.size();
  }
  std::cout << tensors.size() << " tensors, " << total << " scalars\n";
  return 0;
}

void add_train_options(CLI::App* cmd, TrainArgs& t) {
  cmd->add_option("--task", t.task, "local, longrange, mixed or separable")->capture_default_str();
  cmd->add_option("--preset", t.arch, "preset name or config file")->capture_default_str();
  cmd->add_option("--width-div", t.width_div, "divide every channel count by this")->capture_default_str();
  cmd->add_option("--size", t.size, "image side in pixels")->capture_default_str();
  cmd->add_option("--steps", t.steps)->capture_default_str();
  cmd->add_option("--batch", t.batch)->capture_default_str();
  cmd->add_option("--lr", t.lr)->capture_default_str();
  cmd->add_option("--momentum", t.momentum)->capture_default_str();
  cmd->add_option("--seed", t.seed)->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SCSC networks: complexity analysis, gradient checks and toy training"};
  app.require_subcommand(1);

  AnalyzeArgs analyze_args;
  auto* analyze_cmd = app.add_subcommand("analyze", "per-layer parameter and multiply-add counts");
  analyze_cmd->add_option("arch", analyze_args.arch, "preset name or config file")->required();
  analyze_cmd->add_option("--input", analyze_args.input, "input size HxW (default: the preset's own)");
  analyze_cmd->add_flag("--tsv", analyze_args.tsv, "tab-separated rows: name, params, madds, output CxHxW");
  analyze_cmd->add_flag("--no-fusion", analyze_args.no_fusion, "leave the gated-sum multiply-adds out");

  DescribeArgs describe_args;
  auto* describe_cmd = app.add_subcommand("describe", "stage table of a network");
  describe_cmd->add_option("arch", describe_args.arch, "preset name or config file")->required();
  describe_cmd->add_option("--write-config", describe_args.write_config, "also write the editable config here");

  GradcheckArgs grad_args;
  auto* grad_cmd = app.add_subcommand("gradcheck", "central-difference check of random SCSC blocks");
  grad_cmd->add_option("--seed", grad_args.seed)->capture_default_str();
  grad_cmd->add_option("--tol", grad_args.tol, "relative error bound")->capture_default_str();
  grad_cmd->add_option("--step", grad_args.step, "finite-difference step")->capture_default_str();
  grad_cmd->add_option("--configs", grad_args.configs, "number of random blocks")->capture_default_str();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train-toy", "train a width-reduced preset on a synthetic task");
  add_train_options(train_cmd, train_args);
  train_cmd->add_option("--out", train_args.out, "write the loss curve (step loss per line)");
  train_cmd->add_option("--checkpoint", train_args.checkpoint, "write the trained parameters");

  SweepArgs sweep_args;
  sweep_args.train.task = "mixed";
  sweep_args.train.steps = 100;
  auto* sweep_cmd = app.add_subcommand("sweep", "ablation over gate groups or kernel sizes");
  sweep_cmd->add_option("--axis", sweep_args.axis, "g or kernel")->capture_default_str();
  add_train_options(sweep_cmd, sweep_args.train);
  sweep_cmd->add_option("--out", sweep_args.train.out, "also write the report here");

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect", "shape and value summary of a tensor or checkpoint file");
  inspect_cmd->add_option("file", inspect_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*analyze_cmd) return run_analyze(analyze_args);
    if (*describe_cmd) return run_describe(describe_args);
    if (*grad_cmd) return run_gradcheck(grad_args);
    if (*train_cmd) return run_train(train_args);
    if (*sweep_cmd) return run_sweep(sweep_args);
    if (*inspect_cmd) return run_inspect(inspect_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
