// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.
//
//   acceptance [criterion ...]        run a subset, e.g. `acceptance 2 3 5`
//
// Environment:
//   LPVLFR_ACCEPT_RESTARTS     restarts per NL-MSD model (default 25)
//   LPVLFR_ACCEPT_JOBS         concurrent restarts (default: hardware threads)
//   LPVLFR_ACCEPT_SNR_VARIANT  1 = also fit the rational model on data
//                              calibrated to 20 dB SNR (INFO line only)

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lpvlfr/experiment.hpp"

using namespace lpvlfr;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::size_t env_size(const char* name, std::size_t fallback) {
  const char* v = std::getenv(name);
  if (!v || !*v) return fallback;
  return static_cast<std::size_t>(std::strtoull(v, nullptr, 10));
}

Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng, double s = 1.0) {
  std::uniform_real_distribution<double> u(-s, s);
  Mat m(r, c);
  for (double& v : m.values()) v = u(rng);
  return m;
}

WellPosedFactors random_factors(std::size_t nw, std::mt19937_64& rng, double spread) {
  std::normal_distribution<double> g(0.0, spread);
  WellPosedFactors f = WellPosedFactors::zeros(nw);
  for (double& v : f.da_lower) v = g(rng);
  for (double& v : f.db_upper) v = g(rng);
  for (double& v : f.d_d) v = g(rng);
  return f;
}

DeltaStructure random_partition(std::size_t nw, std::mt19937_64& rng) {
  std::vector<std::size_t> eta;
  for (std::size_t left = nw; left;) {
    const std::size_t e = std::uniform_int_distribution<std::size_t>(1, left)(rng);
    eta.push_back(e);
    left -= e;
  }
  return DeltaStructure(eta);
}

LfrPlant random_plant(std::size_t nx, std::size_t nu, std::size_t ny, const DeltaStructure& delta,
                      std::mt19937_64& rng) {
  const std::size_t nw = delta.n_w();
  LfrPlant p = LfrPlant::zeros(nx, nu, ny, delta);
  p.a_x = random_mat(nx, nx, rng, 0.3);
  p.b_w = random_mat(nx, nw, rng, 0.3);
  p.b_u = random_mat(nx, nu, rng);
  p.c_z = random_mat(nw, nx, rng);
  p.d_zw = build_Dzw(random_factors(nw, rng, 0.5));
  p.d_zu = random_mat(nw, nu, rng);
  p.c_y = random_mat(ny, nx, rng);
  p.d_yw = random_mat(ny, nw, rng);
  p.d_yu = random_mat(ny, nu, rng);
  return p;
}

double frozen_error(const FrozenSs& a, const FrozenSs& b) {
  return std::max({max_abs_diff(a.a, b.a), max_abs_diff(a.b, b.b), max_abs_diff(a.c, b.c), max_abs_diff(a.d, b.d)});
}

// ---------------------------------------------------------------------------
// 1. NL-MSD headline

struct HeadlineFit {
  double bfr_test = 0.0, bfr_val = 0.0, seconds = 0.0;
};

HeadlineFit fit_msd(Dependency mode, std::vector<std::size_t> eta, const ExperimentData& data, std::size_t restarts,
                    std::size_t jobs) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.n_x = 2;
  cfg.eta = std::move(eta);
  cfg.restarts = restarts;
  cfg.jobs = jobs;
  const FitResult r = fit(cfg, data.train, data.val);
  return {model_bfr(r.best, *data.test), r.bfr_val, r.wall_seconds};
}

ExperimentData msd_data(const DatasetSection& ds) {
  ExperimentData d;
  d.train = generate_split(ds, Split::train);
  d.val = generate_split(ds, Split::val);
  d.test = generate_split(ds, Split::test);
  return d;
}

Verdict criterion_headline() {
  const std::size_t restarts = env_size("LPVLFR_ACCEPT_RESTARTS", 25);
  const std::size_t jobs = env_size("LPVLFR_ACCEPT_JOBS", std::max(1u, std::thread::hardware_concurrency()));
  DatasetSection ds;
  ds.benchmark = "nl-msd";
  ds.seed = 1;
  const ExperimentData data = msd_data(ds);
  const double floor = bfr(data.test->y, *data.test->y_clean);
  const auto rat = fit_msd(Dependency::rational, {3}, data, restarts, jobs);
  const auto aff2 = fit_msd(Dependency::affine, {1, 1}, data, restarts, jobs);
  const auto aff1 = fit_msd(Dependency::affine, {1}, data, restarts, jobs);
  const bool ok_rat = rat.bfr_test >= 88.0 && rat.bfr_test >= floor - 2.5;
  const bool ok_aff2 = aff2.bfr_test >= 87.5;
  const bool ok_aff1 = aff1.bfr_test <= 65.0;
  const bool ok_floor = std::abs(floor - 90.15) <= 0.5;
  std::ostringstream os;
  os << restarts << " restarts: rational " << fmt(rat.bfr_test) << " (need >= 88 and floor - 2.5), affine n_p=2 "
     << fmt(aff2.bfr_test) << " (need >= 87.5), affine n_p=1 " << fmt(aff1.bfr_test) << " (need <= 65), noise floor "
     << fmt(floor) << " (need 90.15 +- 0.5); " << fmt(rat.seconds + aff2.seconds + aff1.seconds, 4) << " s";
  return {ok_rat && ok_aff2 && ok_aff1 && ok_floor, os.str()};
}

void snr_variant_info() {
  const std::size_t restarts = env_size("LPVLFR_ACCEPT_RESTARTS", 25);
  const std::size_t jobs = env_size("LPVLFR_ACCEPT_JOBS", std::max(1u, std::thread::hardware_concurrency()));
  DatasetSection ds;
  ds.benchmark = "nl-msd";
  ds.seed = 1;
  ds.snr_db = 20.0;
  const ExperimentData data = msd_data(ds);
  const double floor = bfr(data.test->y, *data.test->y_clean);
  const auto rat = fit_msd(Dependency::rational, {3}, data, restarts, jobs);
  const auto aff2 = fit_msd(Dependency::affine, {1, 1}, data, restarts, jobs);
  const auto aff1 = fit_msd(Dependency::affine, {1}, data, restarts, jobs);
  std::cout << "INFO   SNR-20 variant: sigma_e2 " << fmt(data.test->meta.sigma_e2) << ", noise floor " << fmt(floor)
            << ", rational " << fmt(rat.bfr_test) << ", affine n_p=2 " << fmt(aff2.bfr_test) << ", affine n_p=1 "
            << fmt(aff1.bfr_test) << std::endl;
}

// ---------------------------------------------------------------------------
// 2. Well-posedness by construction

Verdict criterion_wellposed() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2);
  std::size_t rho_fail = 0, det_fail = 0;
  double worst_rho = 0.0, worst_det = std::numeric_limits<double>::infinity();
  for (int t = 0; t < 1000; ++t) {
    const std::size_t nw = 1 + static_cast<std::size_t>(t) % 6;
    const DeltaStructure delta = random_partition(nw, rng);
    const Mat d = build_Dzw(random_factors(nw, rng, 1.0));
    const double rho = spectral_radius(d);
    worst_rho = std::max(worst_rho, rho);
    if (!(rho < 1.0)) ++rho_fail;
    std::vector<std::vector<double>> grid(delta.n_p());
    for (auto& g : grid)
      for (int k = 0; k <= 20; ++k) g.push_back(-1.0 + k / 10.0);
    double mn = std::numeric_limits<double>::infinity();
    DetPolynomial(d, delta).for_each_on_grid(grid, [&](std::span<const double>, double v) { mn = std::min(mn, v); });
    worst_det = std::min(worst_det, mn);
    if (!(mn > 0.0)) ++det_fail;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {rho_fail == 0 && det_fail == 0 && secs < 60.0,
          "1000 draws: max rho " + fmt(worst_rho, 6) + ", min grid det " + fmt(worst_det, 6) + ", " +
              std::to_string(rho_fail) + " rho / " + std::to_string(det_fail) + " det violations, " + fmt(secs, 3) +
              " s"};
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness

Verdict criterion_gradient() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0), pert(0.0, 0.1);
  static const std::vector<std::vector<std::size_t>> etas{{3}, {2, 1}, {1, 1, 1}};
  std::size_t passed = 0, total = 0;
  for (auto mode : {Dependency::affine, Dependency::rational})
    for (std::size_t idx = 0; idx < 20; ++idx) {
      ModelStructure s;
      s.mode = mode;
      s.n_x = 2;
      s.n_d = idx % 2;
      s.delta = DeltaStructure(etas[idx % 3]);
      if (idx % 4 == 1) s.hidden = {4};
      Dataset ds;
      ds.u = Mat(50, 1);
      ds.y = Mat(50, 1);
      ds.d = Mat(50, s.n_d);
      for (double& v : ds.u.values()) v = g(rng);
      for (double& v : ds.y.values()) v = g(rng);
      for (double& v : ds.d.values()) v = g(rng);
      std::vector<double> theta = init_params(s, rng);
      for (double& v : theta) v += pert(rng);
      SimulationObjective obj(s, ds, 1e-4);
      std::vector<double> grad(obj.dim());
      bool ok = std::isfinite(obj.value_and_gradient(theta, grad));
      for (std::size_t i = 0; ok && i < theta.size(); ++i) {
        const double h = 1e-6 * std::max(1.0, std::abs(theta[i])), v = theta[i];
        theta[i] = v + h;
        const double fp = obj.value(theta);
        theta[i] = v - h;
        const double fm = obj.value(theta);
        theta[i] = v;
        const double fd = (fp - fm) / (2 * h);
        ok = std::abs(grad[i] - fd) <= 1e-4 * std::abs(fd) + 1e-7;
      }
      passed += ok;
      ++total;
    }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {passed == total && secs < 60.0,
          std::to_string(passed) + "/" + std::to_string(total) + " instances agree, " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 4. Elimination equivalence

Verdict criterion_elimination() {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> pu(-1.0, 1.0);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const DeltaStructure delta = random_partition(1 + t % 4, rng);
    const LfrPlant plant = random_plant(3, 2, 2, delta, rng);
    const std::size_t n = 200;
    const Mat u = random_mat(n, 2, rng);
    Mat p(n, delta.n_p());
    for (double& v : p.values()) v = pu(rng);
    const std::vector<double> x0{0.1, -0.2, 0.3};
    const auto tr = simulate(plant, SchedulingSource::exogenous(p), u, Mat(n, 0), x0);
    std::vector<double> x = x0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::vector<double> pk(p.data() + k * p.cols(), p.data() + (k + 1) * p.cols());
      const FrozenSs s = eliminate_to_ss(plant, pk);
      const std::vector<double> uk{u(k, 0), u(k, 1)};
      const auto ax = matvec(s.a, x), bu = matvec(s.b, uk), cx = matvec(s.c, x), du = matvec(s.d, uk);
      for (std::size_t i = 0; i < 2; ++i) worst = std::max(worst, std::abs(cx[i] + du[i] - tr.y(k, i)));
      for (std::size_t i = 0; i < 3; ++i) x[i] = ax[i] + bu[i];
    }
  }
  return {worst < 1e-10, "20 plants, N = 200: max discrepancy " + fmt(worst, 3)};
}

// ---------------------------------------------------------------------------
// 5. expm accuracy

// Scaling and squaring around a 40-term Taylor sum, all in long double.
Mat scaled_taylor_expm(const Mat& a) {
  const std::size_t n = a.rows();
  int s = 0;
  for (double nrm = a.norm1(); nrm > 0.25; nrm *= 0.5) ++s;
  const long double scale = std::ldexp(1.0L, -s);
  std::vector<long double> sum(n * n, 0.0L), term(n * n, 0.0L), next(n * n);
  for (std::size_t i = 0; i < n; ++i) sum[i * n + i] = term[i * n + i] = 1.0L;
  for (int k = 1; k <= 40; ++k) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        long double acc = 0.0L;
        for (std::size_t l = 0; l < n; ++l) acc += term[i * n + l] * scale * a(l, j);
        next[i * n + j] = acc / k;
      }
    term.swap(next);
    for (std::size_t i = 0; i < n * n; ++i) sum[i] += term[i];
  }
  for (int q = 0; q < s; ++q) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        long double acc = 0.0L;
        for (std::size_t l = 0; l < n; ++l) acc += sum[i * n + l] * sum[l * n + j];
        next[i * n + j] = acc;
      }
    sum.swap(next);
  }
  Mat out(n, n);
  for (std::size_t i = 0; i < n * n; ++i) out.values()[i] = static_cast<double>(sum[i]);
  return out;
}

Verdict criterion_expm() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> target(0.01, 5.0);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = dim(rng);
    Mat a = random_mat(n, n, rng);
    a = a * (target(rng) / a.norm1());
    const Mat ref = scaled_taylor_expm(a);
    worst = std::max(worst, (expm(a) - ref).norm_fro() / ref.norm_fro());
  }
  double worst_fd = 0.0;
  const double h = 1e-6;
  for (int t = 0; t < 50; ++t) {
    const Mat a = random_mat(4, 4, rng, 2.0), e = random_mat(4, 4, rng);
    const Mat fd = (expm(a + e * h) - expm(a - e * h)) * (1.0 / (2 * h));
    const Mat l = expm_frechet(a, e).frechet;
    for (std::size_t i = 0; i < l.size(); ++i) {
      const double ref = fd.values()[i];
      worst_fd = std::max(worst_fd, std::abs(l.values()[i] - ref) / std::max(std::abs(ref), 1e-3));
    }
  }
  return {worst < 1e-10 && worst_fd < 1e-5,
          "expm max rel err " + fmt(worst, 3) + " (100 matrices), Frechet max rel err " + fmt(worst_fd, 3) +
              " (50 instances)"};
}

// ---------------------------------------------------------------------------
// 6. Normalization equivalence

Verdict criterion_normalization() {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> pu(-1.0, 1.0), lo(-0.6, 0.0), wd(0.2, 0.6);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const DeltaStructure delta = random_partition(1 + t % 4, rng);
    const LfrPlant p = random_plant(2, 1, 2, delta, rng);
    std::vector<double> a(delta.n_p()), b(delta.n_p());
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = lo(rng);
      b[i] = a[i] + wd(rng);
    }
    const auto n = normalize_scheduling(p, SchedulingBox(a, b));
    for (int s = 0; s < 100; ++s) {
      std::vector<double> pb(delta.n_p()), orig(delta.n_p());
      for (std::size_t i = 0; i < pb.size(); ++i) {
        pb[i] = pu(rng);
        orig[i] = n.center[i] + n.scale[i] * pb[i];
      }
      worst = std::max(worst, frozen_error(eliminate_to_ss(n.plant, pb), eliminate_to_ss(p, orig)));
    }
  }
  return {worst < 1e-9, "20 plants x 100 points: max discrepancy " + fmt(worst, 3)};
}

// ---------------------------------------------------------------------------
// 7. Affine realization round-trip

Verdict criterion_affine_roundtrip() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> pu(-1.0, 1.0);
  double worst = 0.0;
  std::size_t deficient = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t nx = 3, nu = 2, ny = 2, np = 3;
    AffineSsModel m{random_mat(nx, nx, rng), random_mat(nx, nu, rng), random_mat(ny, nx, rng),
                    random_mat(ny, nu, rng), {}, {}, {}, {}};
    for (std::size_t i = 0; i < np; ++i) {
      const std::size_t rank = (i + static_cast<std::size_t>(t)) % 5;
      deficient += rank < 4;
      const Mat g = random_mat(nx + ny, rank, rng) * random_mat(rank, nx + nu, rng);
      m.a.push_back(g.block(0, 0, nx, nx));
      m.b.push_back(g.block(0, nx, nx, nu));
      m.c.push_back(g.block(nx, 0, ny, nx));
      m.d.push_back(g.block(nx, nx, ny, nu));
    }
    const auto r = affine_ss_to_lfr(m);
    for (int s = 0; s < 50; ++s) {
      std::vector<double> p(np), kept;
      for (double& v : p) v = pu(rng);
      for (std::size_t i : r.kept) kept.push_back(p[i]);
      worst = std::max(worst, frozen_error(eliminate_to_ss(r.plant, kept), m.evaluate(p)));
    }
  }
  return {worst < 1e-9, "20 models (" + std::to_string(deficient) + " rank-deficient increments): max error " +
                            fmt(worst, 3)};
}

// ---------------------------------------------------------------------------
// 8. Noise calibration

Verdict criterion_noise() {
  const Dataset test = generate_msd_dataset(Split::test, 1);
  std::vector<double> e(test.size());
  for (std::size_t k = 0; k < e.size(); ++k) e[k] = test.y(k, 0) - (*test.y_clean)(k, 0);
  const double var = sample_variance(e);
  const bool ok_var = std::abs(var - 0.063) <= 0.05 * 0.063;
  const bool ok_snr = std::abs(test.meta.snr_db - 20.0) <= 2.0;
  return {ok_var && ok_snr, "residual variance " + fmt(var, 5) + " (need 0.063 +- 5%), reported SNR " +
                                fmt(test.meta.snr_db, 4) + " dB (need 20 +- 2)"};
}

// ---------------------------------------------------------------------------
// 9. Determinism of end-to-end training

int run_cli(const std::string& args) {
  const std::string cmd = "\"" LPVLFR_CLI_PATH "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict criterion_determinism() {
  const fs::path dir = fs::temp_directory_path() / "lpvlfr_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const nlohmann::json cfg = {
      {"dataset", {{"benchmark", "nl-msd"}, {"seed", 1}}},
      {"model", {{"mode", "rational"}, {"n_x", 2}, {"n_p", 1}, {"eta", {3}}}},
      {"training", {{"adam_epochs", 100}, {"lbfgs_epochs", 100}, {"restarts", 3}, {"seed", 11}, {"jobs", 2}}}};
  std::ofstream(dir / "config.json") << cfg.dump(2);
  const int a = run_cli("train --config " + (dir / "config.json").string() + " --out " + (dir / "a").string());
  const int b = run_cli("train --config " + (dir / "config.json").string() + " --out " + (dir / "b").string());
  if (a != 0 || b != 0)
    return {false, "train exited with " + std::to_string(a) + " and " + std::to_string(b)};
  const std::string ma = slurp(dir / "a" / "model.json"), mb = slurp(dir / "b" / "model.json");
  return {!ma.empty() && ma == mb, ma == mb ? "model documents byte-identical (" + std::to_string(ma.size()) + " bytes)"
                                             : "model documents differ"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"NL-MSD headline", criterion_headline},
      {"well-posedness by construction", criterion_wellposed},
      {"gradient correctness", criterion_gradient},
      {"elimination equivalence", criterion_elimination},
      {"expm accuracy", criterion_expm},
      {"normalization equivalence", criterion_normalization},
      {"affine realization round-trip", criterion_affine_roundtrip},
      {"noise calibration", criterion_noise},
      {"determinism", criterion_determinism}};
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "   criterion " << id << " (" << criteria[i].first << "): " << v.detail
              << std::endl;
  }
  const char* variant = std::getenv("LPVLFR_ACCEPT_SNR_VARIANT");
  if (variant && std::string(variant) == "1") snr_variant_info();
  return failed ? 1 : 0;
}
