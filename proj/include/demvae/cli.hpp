// Command-line front end: gen, train, eval, check, surface.
//
// Exit codes: 0 success, 1 property violation, 2 usage, 3 numeric failure,
// 4 checkpoint incompatibility.
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "demvae/checkpoint.hpp"
#include "demvae/checks.hpp"
#include "demvae/data.hpp"
#include "demvae/diagnostics.hpp"
#include "demvae/model.hpp"

namespace demvae {

enum ExitCode : int { kExitOk = 0, kExitViolation = 1, kExitUsage = 2, kExitNumeric = 3, kExitCheckpoint = 4 };

/// Raised for invalid arguments discovered after flag parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint64_t default_seed() {
  if (const char* env = std::getenv("DEMVAE_SEED")) {
    std::uint64_t v = 0;
    const std::string_view s(env);
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec == std::errc() && r.ptr == s.data() + s.size()) return v;
  }
  return 1;
}

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

/// Config-file entries rendered as flags. JSON objects and key=value lines
/// (with # comments) are accepted; `true` becomes a bare flag, `false` is dropped.
inline std::vector<std::string> config_tokens(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  std::vector<std::string> tokens;
  auto push = [&](const std::string& key, const std::string& value) {
    if (value == "false") return;
    tokens.push_back("--" + key);
    if (value != "true") tokens.push_back(value);
  };
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("config file " + path + ": " + e.what());
    }
    for (const auto& [key, value] : j.items()) {
      if (value.is_object() || value.is_array() || value.is_null()) throw UsageError("config key '" + key + "' must be a scalar");
      push(key, value.is_string() ? value.get<std::string>() : value.dump());
    }
    return tokens;
  }
  std::istringstream lines(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config file " + path + " line " + std::to_string(line_no) + ": expected key=value");
    push(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return tokens;
}

/// Inserts config-file flags right after the subcommand, minus any key also
/// given on the command line.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (!path || args.empty()) return args;
  auto key_of = [](const std::string& a) { return a.substr(0, a.find('=')); };
  std::vector<std::string> given;
  for (const auto& a : args) {
    if (a.rfind("--", 0) == 0) given.push_back(key_of(a));
  }
  std::vector<std::string> out{args.front()};
  bool skipping = false;
  for (const auto& t : config_tokens(*path)) {
    if (t.rfind("--", 0) == 0) skipping = std::find(given.begin(), given.end(), key_of(t)) != given.end();
    if (!skipping) out.push_back(t);
  }
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

inline void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

inline LabeledDataset load_dataset(const std::string& path) {
  if (!std::filesystem::exists(path)) throw UsageError("data file not found: " + path);
  auto ds = load_csv(path);
  if (ds.size() == 0) throw UsageError("data file has no rows: " + path);
  return ds;
}

}  // namespace detail

struct GenOptions {
  std::string kind = "clusters";
  std::size_t k = 5;
  std::size_t n = 1000;
  std::size_t dim = 2;
  double sep = 6.0;
  double flip = 0.1;
  std::uint64_t seed = 1;
  std::string out;
};

struct TrainOptions {
  std::string data;
  std::string out;
  std::string obs = "gaussian";
  std::string estimator = "exact";
  std::string resume;
  double beta = 0.0;
  double mi = 0.0;
  std::size_t k = 5;
  std::size_t blocks = 1;
  std::size_t zdim = 2;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t steps = 10000;
  std::size_t log_every = 100;
  double lr = 0.001;
  std::size_t batch = 30;
  std::size_t z_samples = 20;
  double anneal_slope = 0.0025;
  double anneal_midpoint = 2500.0;
  double tau = 1.0;
  bool soft = false;
  std::uint64_t seed = 1;
};

struct EvalOptions {
  std::string ckpt;
  std::string data;
  std::string export_latent;
  std::size_t nll_samples = 500;
  std::uint64_t seed = 1;
};

struct SurfaceOptions {
  std::string family = "gaussian";
  double qc = 0.5;
  std::optional<double> min;
  std::optional<double> max;
  std::size_t grid_steps = 61;
  std::string out;
};

inline int cmd_gen(const GenOptions& o, std::ostream& out) {
  LabeledDataset ds;
  try {
    ds = o.kind == "clusters" ? gen_gaussian_clusters(o.k, o.n, o.dim, o.sep, o.seed)
                              : gen_binary_templates(o.k, o.n, o.dim, o.flip, o.seed);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  detail::ensure_parent(o.out);
  save_csv(ds, o.out);
  nlohmann::json meta(ds.meta);
  out << "wrote " << o.out << ' ' << meta.dump() << '\n';
  return kExitOk;
}

inline int cmd_train(const TrainOptions& o, std::ostream& out) {
  const auto ds = detail::load_dataset(o.data);
  ObjectiveConfig objective;
  objective.beta = o.beta;
  objective.mi_weight = o.mi;
  objective.anneal_slope = o.anneal_slope;
  objective.anneal_midpoint = o.anneal_midpoint;
  objective.n_z_samples = o.z_samples;
  objective.estimator = o.estimator == "gumbel" ? RzEstimator::kGumbel : RzEstimator::kExact;
  objective.temperature = o.tau;
  objective.hard = !o.soft;
  TrainConfig cfg;
  cfg.batch_size = o.batch;
  cfg.lr = o.lr;
  cfg.steps = o.steps;
  cfg.seed = o.seed;
  cfg.n_z_samples = o.z_samples;
  ModelDims dims{ds.dim(), o.zdim, o.blocks, o.k, o.hidden};
  try {
    objective.validate();
    cfg.validate();
    dims.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto obs = parse_obs_family(o.obs);
  if (obs == ObsFamily::kBernoulli) {
    for (const auto& p : ds.points) {
      for (double x : p) {
        if (x < 0.0 || x > 1.0) throw UsageError("bernoulli observations must lie in [0, 1]");
      }
    }
  }

  std::optional<Checkpoint> ck;
  if (!o.resume.empty()) {
    ck.emplace(load_checkpoint(o.resume));
    if (ck->model.dims().data_dim != ds.dim()) throw CheckpointError("checkpoint data dimension does not match dataset");
  } else {
    ck.emplace(Checkpoint{DemVaeModel(dims, obs, objective, o.seed), TrainState{}});
    ck->state.rng.seed(o.seed * 0x9E3779B97F4A7C15ULL + 1);
  }
  auto& model = ck->model;
  auto& state = ck->state;

  std::filesystem::create_directories(o.out);
  const auto out_dir = std::filesystem::path(o.out);
  std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw std::runtime_error("cannot open " + (out_dir / "metrics.jsonl").string());
  const Matrix data = ds.matrix();
  const auto start = std::chrono::steady_clock::now();
  train(model, data, cfg, state, cfg.steps, [&](std::uint64_t step, const LossReport& r) {
    if (step % o.log_every != 0) return;
    nlohmann::json line = r;
    line["step"] = step;
    line["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    metrics << line.dump() << '\n';
  });
  metrics.flush();
  save_checkpoint(model, state, (out_dir / "model.ckpt").string());
  out << "trained " << state.step << " steps; wrote " << (out_dir / "model.ckpt").string() << " and "
      << (out_dir / "metrics.jsonl").string() << '\n';
  return kExitOk;
}

inline int cmd_eval(const EvalOptions& o, std::ostream& out) {
  const auto ck = load_checkpoint(o.ckpt);
  const auto ds = detail::load_dataset(o.data);
  if (ds.dim() != ck.model.dims().data_dim) throw UsageError("dataset dimension does not match checkpoint");
  const auto report = evaluate(ck.model, ds, o.nll_samples, o.seed);
  if (!o.export_latent.empty()) {
    detail::ensure_parent(o.export_latent);
    export_latent(ck.model, ds, o.export_latent);
  }
  out << nlohmann::json(report).dump() << '\n';
  return kExitOk;
}

inline int cmd_check(const CheckOptions& o, std::ostream& out) {
  bool ok = true;
  for (const auto& r : run_all_checks(o)) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << " trials=" << r.trials << " seconds=" << r.seconds << '\n';
    if (!r.passed) {
      out << "  counterexample: " << r.counterexample << '\n';
      ok = false;
    }
  }
  return ok ? kExitOk : kExitViolation;
}

/// Grid of dispersion and weighted variance for two one-dimensional
/// components: means (unit variance) for gaussian, probabilities for
/// bernoulli. q(c=1|x) = qc on the first component.
struct SurfaceCell {
  double param1, param2, l_d, var;
};

inline std::vector<SurfaceCell> dispersion_surface(const SurfaceOptions& o) {
  const bool gaussian = o.family == "gaussian";
  const double lo = o.min.value_or(gaussian ? -3.0 : 0.01);
  const double hi = o.max.value_or(gaussian ? 3.0 : 0.99);
  if (!(lo < hi)) throw UsageError("surface: --min must be below --max");
  if (!gaussian && !(lo > 0.0 && hi < 1.0)) throw UsageError("surface: bernoulli range must lie inside (0, 1)");
  if (o.grid_steps < 2) throw UsageError("surface: --grid-steps must be >= 2");
  if (!(o.qc >= 0.0 && o.qc <= 1.0)) throw UsageError("surface: --qc must lie in [0, 1]");
  const CategoricalPosterior qc({{o.qc, 1.0 - o.qc}});
  auto component = [&](double p) {
    return gaussian ? gaussian_to_natural({{p}, {1.0}}) : bernoulli_to_natural(BernoulliMeanParams({p}));
  };
  std::vector<double> grid(o.grid_steps);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(o.grid_steps - 1);
  }
  std::vector<SurfaceCell> cells;
  for (double p1 : grid) {
    for (double p2 : grid) {
      const MixturePrior prior(MixturePrior::Block{component(p1), component(p2)});
      cells.push_back({p1, p2, dispersion_term(prior, qc), weighted_variance(prior, qc)});
    }
  }
  return cells;
}

inline void write_surface(const std::vector<SurfaceCell>& cells, std::ostream& out) {
  char buf[32];
  auto num = [&](double x) {
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
  };
  out << "param1,param2,l_d,var\n";
  for (const auto& c : cells) out << num(c.param1) << ',' << num(c.param2) << ',' << num(c.l_d) << ',' << num(c.var) << '\n';
}

inline int cmd_surface(const SurfaceOptions& o, std::ostream& out) {
  const auto cells = dispersion_surface(o);
  if (o.out.empty() || o.out == "-") {
    write_surface(cells, out);
    return kExitOk;
  }
  detail::ensure_parent(o.out);
  std::ofstream file(o.out, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open " + o.out + " for writing");
  write_surface(cells, file);
  out << "wrote " << o.out << " (" << cells.size() << " cells)\n";
  return kExitOk;
}

/// args excludes the program name.
inline int run_cli(const std::vector<std::string>& raw_args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Dispersed exponential-family mixture VAE toolkit", "demvae"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  const std::uint64_t seed = detail::default_seed();
  std::string config_path;

  GenOptions gen;
  gen.seed = seed;
  auto* g = app.add_subcommand("gen", "Generate a labeled synthetic dataset");
  g->add_option("--kind", gen.kind, "clusters or binary")->check(CLI::IsMember({"clusters", "binary"}))->capture_default_str();
  g->add_option("--k", gen.k, "Number of true classes")->check(CLI::PositiveNumber)->capture_default_str();
  g->add_option("--n", gen.n, "Number of points")->check(CLI::PositiveNumber)->capture_default_str();
  g->add_option("--dim", gen.dim, "Data dimension")->check(CLI::PositiveNumber)->capture_default_str();
  g->add_option("--sep", gen.sep, "Cluster separation")->check(CLI::PositiveNumber)->capture_default_str();
  g->add_option("--flip", gen.flip, "Bit-flip probability (binary)")->check(CLI::Range(0.0, 0.5))->capture_default_str();
  g->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
  g->add_option("--out", gen.out, "Output CSV path")->required();
  g->add_option("--config", config_path, "Config file (key=value or JSON)");

  TrainOptions tr;
  tr.seed = seed;
  auto* t = app.add_subcommand("train", "Train a mixture VAE");
  t->add_option("--data", tr.data, "Training CSV")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--beta", tr.beta, "Dispersion weight beta in [0, 1]")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  t->add_option("--mi", tr.mi, "Mutual-information weight")->check(CLI::NonNegativeNumber)->capture_default_str();
  t->add_option("--k", tr.k, "Components per block")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--blocks", tr.blocks, "Number of discrete latent blocks")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--zdim", tr.zdim, "Continuous latent dimension")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--hidden", tr.hidden, "Hidden layer widths")->expected(1, 16)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)->check(CLI::PositiveNumber);
  t->add_option("--steps", tr.steps, "Optimizer steps")->check(CLI::NonNegativeNumber)->capture_default_str();
  t->add_option("--log-every", tr.log_every, "Metrics interval in steps")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--lr", tr.lr, "Adam learning rate")->check(CLI::NonNegativeNumber)->capture_default_str();
  t->add_option("--batch", tr.batch, "Minibatch size")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--z-samples", tr.z_samples, "Reparameterized z samples per point")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--obs", tr.obs, "Observation family")->check(CLI::IsMember({"gaussian", "bernoulli"}))->capture_default_str();
  t->add_option("--estimator", tr.estimator, "R_z estimator")->check(CLI::IsMember({"exact", "gumbel"}))->capture_default_str();
  t->add_option("--tau", tr.tau, "Gumbel-softmax temperature")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_flag("--soft", tr.soft, "Use the relaxed Gumbel-softmax sample instead of straight-through");
  t->add_option("--anneal-slope", tr.anneal_slope, "KL annealing slope")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--anneal-midpoint", tr.anneal_midpoint, "KL annealing midpoint step")->capture_default_str();
  t->add_option("--resume", tr.resume, "Continue from a checkpoint");
  t->add_option("--seed", tr.seed, "Random seed")->capture_default_str();
  t->add_option("--config", config_path, "Config file (key=value or JSON)");

  EvalOptions ev;
  ev.seed = seed;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint path")->required();
  e->add_option("--data", ev.data, "Dataset CSV")->required();
  e->add_option("--nll-samples", ev.nll_samples, "Importance samples for NLL")->check(CLI::PositiveNumber)->capture_default_str();
  e->add_option("--export-latent", ev.export_latent, "Write posterior means and prior components to CSV");
  e->add_option("--seed", ev.seed, "Random seed")->capture_default_str();
  e->add_option("--config", config_path, "Config file (key=value or JSON)");

  CheckOptions ch;
  ch.seed = seed;
  auto* c = app.add_subcommand("check", "Run randomized invariant suites");
  c->add_option("--trials", ch.trials, "Trials per suite")->check(CLI::PositiveNumber)->capture_default_str();
  c->add_option("--seed", ch.seed, "Random seed")->capture_default_str();
  c->add_flag("--inject-sign-flip", ch.flip_dispersion_gradient, "Harness self-test: negate grad_dispersion");
  c->add_option("--config", config_path, "Config file (key=value or JSON)");

  SurfaceOptions su;
  auto* s = app.add_subcommand("surface", "Dispersion term over a two-component parameter grid");
  s->add_option("--family", su.family, "gaussian or bernoulli")->check(CLI::IsMember({"gaussian", "bernoulli"}))->capture_default_str();
  s->add_option("--qc", su.qc, "q(c=1|x) on the first component")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  s->add_option("--min", su.min, "Grid minimum (default -3 gaussian, 0.01 bernoulli)");
  s->add_option("--max", su.max, "Grid maximum (default 3 gaussian, 0.99 bernoulli)");
  s->add_option("--grid-steps", su.grid_steps, "Grid points per axis")->check(CLI::Range(2, 10000))->capture_default_str();
  s->add_option("--out", su.out, "Output CSV path (stdout when omitted)");
  s->add_option("--config", config_path, "Config file (key=value or JSON)");

  try {
    auto args = detail::expand_config(raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  }

  try {
    if (g->parsed()) return cmd_gen(gen, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (c->parsed()) return cmd_check(ch, out);
    if (s->parsed()) return cmd_surface(su, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& ex) {
    err << "error: malformed data file: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const CheckpointError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitCheckpoint;
  } catch (const TrainingError& ex) {
    err << "error: non-finite " << ex.term() << ": " << ex.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace demvae
