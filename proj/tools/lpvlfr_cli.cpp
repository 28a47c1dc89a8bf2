// lpvlfr: generate benchmark data, train LPV-LFR models, evaluate, verify
// well-posedness and export frozen state-space matrices.
//
// Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
// 3 verification failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lpvlfr/experiment.hpp"

namespace fs = std::filesystem;
using namespace lpvlfr;
using Json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitVerify = 3;

constexpr const char* kOutputEnv = "LPVLFR_OUTPUT_DIR";

fs::path default_output_dir() {
  const char* env = std::getenv(kOutputEnv);
  return env && *env ? fs::path(env) : fs::path("lpvlfr-out");
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::string fmt_vec(const std::vector<double>& v, int prec = 6) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i], prec);
  return s + "]";
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

Dataset head_rows(const Dataset& ds, std::size_t n) {
  n = std::min(n, ds.size());
  auto rows = [n](const Mat& m) {
    Mat out(n, m.cols());
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < m.cols(); ++j) out(k, j) = m(k, j);
    return out;
  };
  Dataset out;
  out.name = ds.name;
  out.ts = ds.ts;
  out.u = rows(ds.u);
  out.d = rows(ds.d);
  out.y = rows(ds.y);
  return out;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  fs::path config;
  std::optional<std::string> benchmark;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  std::string split = "all";
  std::optional<double> noise_variance, snr_db;
};

int cmd_generate(const GenerateArgs& a) {
  DatasetSection ds;
  if (!a.config.empty()) ds = load_experiment(a.config).dataset;
  if (a.benchmark) ds.benchmark = *a.benchmark;
  if (a.seed) ds.seed = *a.seed;
  if (a.noise_variance) {
    ds.noise_variance = a.noise_variance;
    ds.snr_db.reset();
  }
  if (a.snr_db) {
    ds.snr_db = a.snr_db;
    ds.noise_variance.reset();
  }
  if (ds.benchmark.empty()) throw ConfigError("generate: no benchmark given (use --benchmark nl-msd)");
  if (ds.benchmark != "nl-msd") throw ConfigError("unknown benchmark '" + ds.benchmark + "'");
  std::vector<Split> splits;
  if (a.split == "all") splits = {Split::train, Split::val, Split::test};
  else if (a.split == "train") splits = {Split::train};
  else if (a.split == "val") splits = {Split::val};
  else if (a.split == "test") splits = {Split::test};
  else throw ConfigError("--split must be train, val, test or all");

  const fs::path out = a.out.value_or(default_output_dir());
  fs::create_directories(out);
  for (Split s : splits) {
    const Dataset d = generate_split(ds, s);
    const fs::path csv = out / (to_string(s) + ".csv");
    write_dataset(d, csv);
    std::cout << to_string(s) << ": N = " << d.size() << ", sigma_e2 = " << fmt(d.meta.sigma_e2)
              << ", snr_db = " << fmt(d.meta.snr_db, 4) << " -> " << csv.string() << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  fs::path config;
  std::optional<fs::path> out, train, val, test;
  std::optional<std::string> benchmark, mode, scheduling;
  std::optional<std::uint64_t> data_seed, seed;
  std::optional<std::size_t> n_x, adam_epochs, lbfgs_epochs, restarts, jobs, lbfgs_memory;
  std::optional<std::vector<std::size_t>> eta, hidden;
  std::optional<double> epsilon, adam_step, reg_rho, snr_db;
  bool normalize = false;
  bool plot_data = false;
};

ExperimentConfig resolve_train_config(const TrainArgs& a) {
  ExperimentConfig cfg;
  if (!a.config.empty()) cfg = load_experiment(a.config);
  auto& d = cfg.dataset;
  if (a.benchmark) d.benchmark = *a.benchmark;
  if (a.data_seed) d.seed = *a.data_seed;
  if (a.snr_db) {
    d.snr_db = a.snr_db;
    d.noise_variance.reset();
  }
  if (a.train) {
    d.benchmark.clear();
    d.train = *a.train;
  }
  if (a.val) d.val = *a.val;
  if (a.test) d.test = *a.test;
  auto& t = cfg.training;
  if (a.mode) {
    try {
      t.mode = parse_dependency(*a.mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (a.scheduling) {
    if (*a.scheduling != "network" && *a.scheduling != "exogenous")
      throw ConfigError("--scheduling must be network or exogenous");
    t.scheduling = *a.scheduling == "network" ? SchedulingKind::network : SchedulingKind::exogenous;
  }
  if (a.n_x) t.n_x = *a.n_x;
  if (a.eta) t.eta = *a.eta;
  if (a.hidden) t.hidden = *a.hidden;
  if (a.epsilon) t.epsilon = *a.epsilon;
  if (a.adam_epochs) t.adam_epochs = *a.adam_epochs;
  if (a.lbfgs_epochs) t.lbfgs_epochs = *a.lbfgs_epochs;
  if (a.adam_step) t.adam_step = *a.adam_step;
  if (a.reg_rho) t.reg_rho = *a.reg_rho;
  if (a.restarts) t.restarts = *a.restarts;
  if (a.seed) t.seed = *a.seed;
  if (a.jobs) t.jobs = *a.jobs;
  if (a.lbfgs_memory) t.lbfgs_memory = *a.lbfgs_memory;
  if (a.normalize) t.normalize_data = true;
  if (a.out) cfg.output.dir = *a.out;
  if (cfg.output.dir.empty()) cfg.output.dir = default_output_dir();
  if (a.plot_data) cfg.output.emit_plot_data = true;
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& a) {
  const ExperimentConfig cfg = resolve_train_config(a);
  const ExperimentData data = load_data(cfg);
  try {
    cfg.training.structure_for(data.train);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const FitResult res = fit(cfg.training, data.train, data.val);

  const fs::path out = cfg.output.dir;
  fs::create_directories(out);
  io::write_model(res.best, out / "model.json");
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");

  std::ostringstream jl;
  for (const auto& r : res.restarts)
    for (const auto& t : r.trace)
      jl << Json{{"restart", t.restart}, {"phase", t.phase}, {"iter", t.iter},
                 {"loss", std::isfinite(t.loss) ? Json(t.loss) : Json(nullptr)},
                 {"grad_norm", t.grad_norm}, {"elapsed", t.elapsed}}
                .dump()
         << '\n';
  write_text(out / "trace.jsonl", jl.str());
  if (cfg.output.emit_plot_data) {
    std::ostringstream csv;
    csv << "restart,phase,iter,loss,grad_norm\n" << std::setprecision(17);
    for (const auto& r : res.restarts)
      for (const auto& t : r.trace)
        csv << t.restart << ',' << t.phase << ',' << t.iter << ',' << t.loss << ',' << t.grad_norm << '\n';
    write_text(out / "trace.csv", csv.str());
  }

  const auto& s = res.best.structure;
  Json summary;
  summary["mode"] = to_string(s.mode);
  summary["n_x"] = s.n_x;
  summary["n_p"] = s.n_p();
  summary["eta"] = s.delta.eta;
  summary["scheduling"] = to_string(s.scheduling);
  summary["bfr_train"] = res.bfr_train;
  summary["bfr_val"] = res.bfr_val;
  if (data.test) {
    summary["bfr_test"] = model_bfr(res.best, *data.test);
    if (data.test->y_clean) summary["noise_floor_bfr_test"] = bfr(data.test->y, *data.test->y_clean);
  }
  summary["best_restart"] = res.best_restart;
  summary["restarts"] = res.restarts.size();
  summary["wall_seconds"] = res.wall_seconds;
  Json per = Json::array();
  for (const auto& r : res.restarts)
    per.push_back({{"restart", r.restart},
                   {"seed", r.seed},
                   {"init_attempts", r.init_attempts},
                   {"ok", r.ok},
                   {"loss", std::isfinite(r.loss) ? Json(r.loss) : Json(nullptr)},
                   {"bfr_train", r.bfr_train},
                   {"bfr_val", r.bfr_val},
                   {"lbfgs_stop", r.lbfgs_stop},
                   {"seconds", r.seconds}});
  summary["per_restart"] = std::move(per);
  write_text(out / "summary.json", summary.dump(2) + "\n");

  std::cout << "mode: " << to_string(s.mode) << ", n_p = " << s.n_p() << ", eta = " << Json(s.delta.eta).dump()
            << '\n'
            << "best restart: " << res.best_restart << " of " << res.restarts.size() << '\n'
            << "BFR train: " << fmt(res.bfr_train, 5) << '\n'
            << "BFR val:   " << fmt(res.bfr_val, 5) << '\n';
  if (summary.contains("bfr_test")) std::cout << "BFR test:  " << fmt(summary["bfr_test"].get<double>(), 5) << '\n';
  std::cout << "wall seconds: " << fmt(res.wall_seconds, 4) << '\n' << "model: " << (out / "model.json").string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

/// Re-estimates x0 by L-BFGS on the first `horizon` samples, all other
/// parameters frozen.
std::vector<double> fit_initial_state(const Model& m, const Dataset& data, std::size_t horizon) {
  const Dataset head = apply_scalers(head_rows(data, horizon), m.scalers);
  SimulationObjective obj(m.structure, head, 0.0);
  const ParamLayout L(m.structure);
  std::vector<double> theta = pack(m), full_grad(theta.size());
  const std::size_t nx = m.structure.n_x;
  const ObjectiveFn f = [&](std::span<const double> x0, std::span<double> g) {
    std::copy(x0.begin(), x0.end(), theta.begin() + L.x0);
    const double v = obj.value_and_gradient(theta, full_grad);
    std::copy(full_grad.begin() + L.x0, full_grad.begin() + L.x0 + nx, g.begin());
    return v;
  };
  LbfgsOptions opt;
  opt.max_iters = 200;
  const auto r = lbfgs_run(m.x0, f, opt);
  return std::isfinite(r.loss) ? r.theta : m.x0;
}

struct EvalArgs {
  fs::path model, data;
  std::optional<fs::path> out;
  bool fit_x0 = false;
  std::size_t x0_horizon = 100;
};

int cmd_eval(const EvalArgs& a) {
  Model m = io::read_model(a.model);
  const Dataset data = read_dataset(a.data);
  if (data.n_u() != m.structure.n_u || data.n_d() != m.structure.n_d || data.n_y() != m.structure.n_y)
    throw DimensionMismatch("eval: model expects (u=" + std::to_string(m.structure.n_u) +
                            ", d=" + std::to_string(m.structure.n_d) + ", y=" + std::to_string(m.structure.n_y) +
                            ") channels, dataset has (u=" + std::to_string(data.n_u()) +
                            ", d=" + std::to_string(data.n_d()) + ", y=" + std::to_string(data.n_y()) + ")");
  if (a.fit_x0) m.x0 = fit_initial_state(m, data, a.x0_horizon);
  const Trajectory t = simulate_model(m, data);
  const double fit = bfr(data.y, t.y);
  double sse = 0.0;
  for (std::size_t k = 0; k < data.size(); ++k)
    for (std::size_t i = 0; i < data.n_y(); ++i) sse += std::pow(data.y(k, i) - t.y(k, i), 2);
  const double mse = sse / static_cast<double>(data.size() * data.n_y());

  const fs::path csv = a.out.value_or(default_output_dir() / (a.data.stem().string() + ".eval.csv"));
  std::ostringstream os;
  os << "k";
  for (std::size_t i = 1; i <= data.n_y(); ++i) os << ",y" << i << ",yhat" << i << ",e" << i;
  os << '\n';
  for (std::size_t k = 0; k < data.size(); ++k) {
    os << k;
    for (std::size_t i = 0; i < data.n_y(); ++i)
      os << ',' << detail::format_real(data.y(k, i)) << ',' << detail::format_real(t.y(k, i)) << ','
         << detail::format_real(data.y(k, i) - t.y(k, i));
    os << '\n';
  }
  write_text(csv, os.str());
  std::cout << "BFR: " << fmt(fit, 6) << '\n' << "MSE: " << fmt(mse, 6) << '\n';
  if (a.fit_x0) std::cout << "x0: " << fmt_vec(m.x0) << '\n';
  std::cout << "per-sample: " << csv.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// verify

struct VerifyArgs {
  fs::path model;
  std::size_t grid = 21;
  std::size_t samples = 1000;
  std::uint64_t seed = 20240601;
};

int cmd_verify(const VerifyArgs& a) {
  if (a.grid < 2) throw ConfigError("--grid must be at least 2");
  const Model m = io::read_model(a.model);
  const auto& s = m.structure;
  std::cout << "mode: " << to_string(s.mode) << ", n_w = " << s.n_w() << ", eta = " << Json(s.delta.eta).dump()
            << '\n';
  if (m.plant.d_zw.max_abs() == 0.0) {
    std::cout << "D_zw = 0: trivially well-posed\n";
    return kExitOk;
  }
  const auto rep = is_well_posed(m.plant, SchedulingBox::unit(s.n_p()), a.grid, a.samples, a.seed);
  std::cout << "rho(D_zw): " << fmt(rep.spectral_radius, 10) << (rep.spectral_condition ? " (< 1)" : " (>= 1)")
            << (rep.spectral_radius_converged ? "" : " [estimate not converged]") << '\n'
            << "sigma_max(D_zw): " << fmt(rep.sigma_max, 10)
            << (rep.small_gain_certified ? " (small-gain certificate holds)" : " (no small-gain certificate)")
            << '\n';
  if (m.factors) {
    const double gap = max_abs_diff(build_Dzw(*m.factors), m.plant.d_zw);
    std::cout << "factor consistency: max |D_zw - expm(-N)| = " << fmt(gap, 3) << '\n';
  }
  std::cout << "points checked: " << rep.points_checked << '\n'
            << "min det(I - D_zw Delta(p)): " << fmt(rep.min_det, 10) << '\n'
            << "min |det|: " << fmt(rep.min_abs_det, 10) << " at p = " << fmt_vec(rep.argmin_abs_p) << '\n';
  if (!rep.empirical_ok) {
    std::cout << "empirical check: FAIL, counterexample p = " << fmt_vec(*rep.counterexample, 17) << '\n';
    return kExitVerify;
  }
  std::cout << "empirical check: PASS\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// export-ss

struct ExportArgs {
  fs::path model, points;
  std::optional<fs::path> out;
};

/// One scheduling point per line, comma or whitespace separated. Lines that
/// are blank, start with '#', or hold a non-numeric header are skipped.
std::vector<std::vector<double>> read_points(const fs::path& path, std::size_t n_p) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open points file '" + path.string() + "'");
  std::vector<std::vector<double>> pts;
  std::string line;
  for (std::size_t ln = 1; std::getline(in, line); ++ln) {
    for (char& c : line)
      if (c == ',' || c == '\t' || c == ';') c = ' ';
    std::istringstream is(line);
    std::string tok;
    std::vector<double> row;
    bool numeric = true;
    while (is >> tok) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end != tok.c_str() + tok.size()) {
        numeric = false;
        break;
      }
      row.push_back(v);
    }
    if (row.empty() && (line.find_first_not_of(' ') == std::string::npos || !numeric)) continue;
    if (!line.empty() && line[line.find_first_not_of(' ')] == '#') continue;
    if (!numeric) throw ParseError(ln, path.string() + ": non-numeric entry");
    if (row.size() != n_p)
      throw ParseError(ln, path.string() + ": expected " + std::to_string(n_p) + " values");
    pts.push_back(std::move(row));
  }
  return pts;
}

int cmd_export_ss(const ExportArgs& a) {
  const Model m = io::read_model(a.model);
  const auto pts = read_points(a.points, m.structure.n_p());
  Json doc;
  doc["format"] = "lpvlfr-frozen-ss";
  doc["mode"] = to_string(m.structure.mode);
  doc["units"] = m.scalers ? "scaled" : "data";
  Json rows = Json::array();
  std::size_t singular = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    Json r;
    r["p"] = pts[i];
    try {
      const FrozenSs ss = eliminate_to_ss(m.plant, pts[i]);
      r["A"] = io::mat_to_json(ss.a);
      r["B"] = io::mat_to_json(ss.b);
      r["C"] = io::mat_to_json(ss.c);
      r["D"] = io::mat_to_json(ss.d);
    } catch (const SingularPoint&) {
      r["error"] = "singular";
      ++singular;
      std::cerr << "point " << i << " " << fmt_vec(pts[i]) << ": I - D_zw Delta(p) is singular\n";
    }
    rows.push_back(std::move(r));
  }
  doc["points"] = std::move(rows);
  const std::string text = doc.dump(2) + "\n";
  if (a.out) {
    write_text(*a.out, text);
    std::cout << pts.size() << " points (" << singular << " singular) -> " << a.out->string() << '\n';
  } else {
    std::cout << text;
  }
  return kExitOk;
}

template <class Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const SchemaError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionMismatch& e) {
    std::cerr << "dimension mismatch: " << e.what() << '\n';
    return kExitUsage;
  } catch (const AllRestartsFailed& e) {
    std::cerr << "training failed: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LPV-LFR model estimation with well-posed rational scheduling dependency"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "lpvlfr 1.0.0");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Generate benchmark datasets (CSV + metadata sidecars)");
  gen->add_option("--config", ga.config, "Experiment config (dataset section is used)")->check(CLI::ExistingFile);
  gen->add_option("--benchmark", ga.benchmark, "Benchmark name (nl-msd)");
  gen->add_option("--seed", ga.seed, "Data seed");
  gen->add_option("--out", ga.out, std::string("Output directory (default $") + kOutputEnv + " or ./lpvlfr-out)");
  gen->add_option("--split", ga.split, "train, val, test or all")->capture_default_str();
  auto* gnv = gen->add_option("--noise-variance", ga.noise_variance, "Output noise variance");
  gen->add_option("--snr-db", ga.snr_db, "Calibrate the noise to this SNR instead")->excludes(gnv);

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Multi-start estimation; writes model.json, trace.jsonl, summary.json");
  tr->add_option("--config", ta.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  tr->add_option("--out", ta.out, "Output directory");
  tr->add_option("--train", ta.train, "Training CSV");
  tr->add_option("--val", ta.val, "Validation CSV");
  tr->add_option("--test", ta.test, "Test CSV (optional, reported only)");
  tr->add_option("--benchmark", ta.benchmark, "Generate data from a benchmark instead of CSVs");
  tr->add_option("--data-seed", ta.data_seed, "Benchmark data seed");
  tr->add_option("--snr-db", ta.snr_db, "Benchmark noise calibrated to this SNR");
  tr->add_option("--mode", ta.mode, "affine or rational");
  tr->add_option("--scheduling", ta.scheduling, "network or exogenous");
  tr->add_option("--n-x", ta.n_x, "State dimension");
  tr->add_option("--eta", ta.eta, "Repetition counts, one per scheduling variable");
  tr->add_option("--hidden", ta.hidden, "Scheduling net hidden layer sizes");
  tr->add_option("--epsilon", ta.epsilon, "Well-posedness margin epsilon");
  tr->add_option("--adam-epochs", ta.adam_epochs, "Adam iterations");
  tr->add_option("--lbfgs-epochs", ta.lbfgs_epochs, "L-BFGS iterations");
  tr->add_option("--adam-step", ta.adam_step, "Adam step size");
  tr->add_option("--lbfgs-memory", ta.lbfgs_memory, "L-BFGS history length");
  tr->add_option("--reg-rho", ta.reg_rho, "L2 regularization weight");
  tr->add_option("--restarts", ta.restarts, "Number of restarts");
  tr->add_option("--seed", ta.seed, "Base seed; restart r uses seed + r");
  tr->add_option("--jobs", ta.jobs, "Maximum concurrent restarts");
  tr->add_flag("--normalize", ta.normalize, "Standardize u and y before training");
  tr->add_flag("--plot-data", ta.plot_data, "Also write trace.csv");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Simulate a model on a dataset; print BFR and MSE, write per-sample CSV");
  ev->add_option("--model", ea.model, "Model document")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ea.data, "Dataset CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ea.out, "Per-sample CSV path");
  ev->add_flag("--fit-x0", ea.fit_x0, "Re-estimate x0 on the first samples");
  ev->add_option("--x0-horizon", ea.x0_horizon, "Samples used by --fit-x0")->capture_default_str();

  VerifyArgs va;
  auto* ver = app.add_subcommand("verify", "Well-posedness report on [-1, 1]^n_p");
  ver->add_option("--model", va.model, "Model document")->required()->check(CLI::ExistingFile);
  ver->add_option("--grid", va.grid, "Grid points per scheduling dimension")->capture_default_str();
  ver->add_option("--samples", va.samples, "Additional uniform random samples")->capture_default_str();
  ver->add_option("--seed", va.seed, "Seed for the random samples")->capture_default_str();

  ExportArgs xa;
  auto* ex = app.add_subcommand("export-ss", "Frozen (A, B, C, D)(p) at the given scheduling points");
  ex->add_option("--model", xa.model, "Model document")->required()->check(CLI::ExistingFile);
  ex->add_option("--points", xa.points, "File with one scheduling point per line")->required()->check(CLI::ExistingFile);
  ex->add_option("--out", xa.out, "Output JSON (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (*gen) return guarded([&] { return cmd_generate(ga); });
  if (*tr) return guarded([&] { return cmd_train(ta); });
  if (*ev) return guarded([&] { return cmd_eval(ea); });
  if (*ver) return guarded([&] { return cmd_verify(va); });
  if (*ex) return guarded([&] { return cmd_export_ss(xa); });
  return kExitUsage;
}
