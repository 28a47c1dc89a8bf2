#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lpvlfr/train.hpp"

using namespace lpvlfr;

namespace {

struct Instance {
  ModelStructure s;
  Dataset data;
  std::vector<double> theta;
};

Dataset random_dataset(std::size_t n, std::size_t nd, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Dataset ds;
  ds.u = Mat(n, 1);
  ds.y = Mat(n, 1);
  ds.d = Mat(n, nd);
  for (double& v : ds.u.values()) v = g(rng);
  for (double& v : ds.y.values()) v = g(rng);
  for (double& v : ds.d.values()) v = 0.8 * std::tanh(g(rng));
  return ds;
}

Instance random_instance(Dependency mode, std::size_t idx, std::mt19937_64& rng) {
  Instance in;
  const std::size_t nd = idx % 2;
  in.s.mode = mode;
  in.s.n_x = 2;
  in.s.n_u = 1;
  in.s.n_y = 1;
  in.s.n_d = nd;
  // n_w = 3 split over one or several scheduling variables
  static const std::vector<std::vector<std::size_t>> etas{{3}, {2, 1}, {1, 1, 1}};
  in.s.delta = DeltaStructure(etas[idx % 3]);
  if (idx % 5 == 4 && nd == 1) {
    in.s.delta = DeltaStructure({3});
    in.s.scheduling = SchedulingKind::exogenous;
  }
  if (idx % 4 == 1) in.s.hidden = {4};
  in.data = random_dataset(50, nd, rng);
  in.theta = init_params(in.s, rng);
  std::normal_distribution<double> g(0.0, 0.1);
  for (double& v : in.theta) v += g(rng);
  return in;
}

// Loss recomputed from the plain simulator.
double reference_loss(const ModelStructure& s, const Dataset& data, std::span<const double> theta, double rho) {
  const Trajectory t = simulate_model(unpack(s, theta), data);
  double sse = 0.0;
  for (std::size_t k = 0; k < data.size(); ++k)
    for (std::size_t i = 0; i < data.n_y(); ++i) sse += std::pow(data.y(k, i) - t.y(k, i), 2);
  double reg = 0.0;
  for (double v : theta) reg += v * v;
  return sse / static_cast<double>(data.size()) + rho * reg;
}

}  // namespace

class GradientCheck : public ::testing::TestWithParam<Dependency> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  std::mt19937_64 rng(GetParam() == Dependency::affine ? 11 : 12);
  for (std::size_t idx = 0; idx < 20; ++idx) {
    const Instance in = random_instance(GetParam(), idx, rng);
    SimulationObjective obj(in.s, in.data, 1e-4);
    std::vector<double> grad(obj.dim());
    const double f0 = obj.value_and_gradient(in.theta, grad);
    ASSERT_TRUE(std::isfinite(f0)) << "instance " << idx;
    auto th = in.theta;
    for (std::size_t i = 0; i < th.size(); ++i) {
      const double h = 1e-6 * std::max(1.0, std::abs(th[i]));
      const double v = th[i];
      th[i] = v + h;
      const double fp = obj.value(th);
      th[i] = v - h;
      const double fm = obj.value(th);
      th[i] = v;
      const double fd = (fp - fm) / (2.0 * h);
      EXPECT_NEAR(grad[i], fd, 1e-4 * std::abs(fd) + 1e-7) << "instance " << idx << " entry " << i;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, GradientCheck, ::testing::Values(Dependency::affine, Dependency::rational),
                         [](const auto& info) { return to_string(info.param); });

TEST(SimulationObjective, LossMatchesSimulator) {
  std::mt19937_64 rng(13);
  for (auto mode : {Dependency::affine, Dependency::rational})
    for (std::size_t idx = 0; idx < 10; ++idx) {
      const Instance in = random_instance(mode, idx, rng);
      SimulationObjective obj(in.s, in.data, 0.01);
      const double ref = reference_loss(in.s, in.data, in.theta, 0.01);
      EXPECT_NEAR(obj.value(in.theta), ref, 1e-12 * ref);
    }
}

TEST(SimulationObjective, PerfectFitHasZeroLossAndGradient) {
  std::mt19937_64 rng(14);
  for (auto mode : {Dependency::affine, Dependency::rational}) {
    Instance in = random_instance(mode, 3, rng);
    in.data.y = simulate_model(unpack(in.s, in.theta), in.data).y;
    SimulationObjective obj(in.s, in.data, 0.0);
    std::vector<double> grad(obj.dim());
    EXPECT_LT(obj.value_and_gradient(in.theta, grad), 1e-24);
    EXPECT_LT(inf_norm(grad), 1e-10);
  }
}

TEST(SimulationObjective, ZeroModelGivesMeanSquaredOutput) {
  std::mt19937_64 rng(15);
  for (auto mode : {Dependency::affine, Dependency::rational}) {
    const Instance in = random_instance(mode, 0, rng);
    SimulationObjective obj(in.s, in.data, 0.5);
    double ms = 0.0;
    for (double v : in.data.y.values()) ms += v * v;
    ms /= static_cast<double>(in.data.size());
    EXPECT_NEAR(obj.value(std::vector<double>(obj.dim(), 0.0)), ms, 1e-14);
  }
}

TEST(SimulationObjective, RegularizerIsIsolated) {
  std::mt19937_64 rng(16);
  const Instance in = random_instance(Dependency::rational, 2, rng);
  SimulationObjective a(in.s, in.data, 0.0), b(in.s, in.data, 0.25);
  double sq = 0.0;
  for (double v : in.theta) sq += v * v;
  EXPECT_NEAR(b.value(in.theta) - a.value(in.theta), 0.25 * sq, 1e-12 * sq);
  EXPECT_EQ(a.last_fit(), b.last_fit());
}

TEST(SimulationObjective, DivergentRolloutIsInfinite) {
  std::mt19937_64 rng(17);
  Instance in = random_instance(Dependency::affine, 0, rng);
  in.data = random_dataset(400, 0, rng);
  const ParamLayout L(in.s);
  in.theta[L.a_x] = 3.0;  // unstable pole
  SimulationObjective obj(in.s, in.data, 0.0);
  std::vector<double> grad(obj.dim(), 1.0);
  EXPECT_EQ(obj.value_and_gradient(in.theta, grad), kInf);
  EXPECT_EQ(inf_norm(grad), 0.0);
}

TEST(SimulationObjective, RejectsMismatchedInputs) {
  std::mt19937_64 rng(18);
  const Instance in = random_instance(Dependency::affine, 0, rng);
  EXPECT_THROW(SimulationObjective(in.s, random_dataset(10, 1, rng), 0.0), DimensionMismatch);
  SimulationObjective obj(in.s, in.data, 0.0);
  EXPECT_THROW(obj.value(std::vector<double>(3)), DimensionMismatch);
}

TEST(Adam, ZeroStepsReturnsStart) {
  const ObjectiveFn f = [](std::span<const double> t, std::span<double> g) {
    g[0] = 2 * t[0];
    return t[0] * t[0];
  };
  const auto r = adam_run({1.5}, f, {0, 0.1});
  EXPECT_EQ(r.theta[0], 1.5);
  EXPECT_EQ(r.loss, 2.25);
  EXPECT_EQ(r.trace.size(), 1u);
}

TEST(Adam, FirstStepMovesByStepSize) {
  const ObjectiveFn f = [](std::span<const double> t, std::span<double> g) {
    g[0] = 2 * t[0];
    g[1] = -6 * t[1];
    return t[0] * t[0] - 3 * t[1] * t[1];
  };
  const auto r = adam_run({1.0, 0.5}, f, {1, 0.01});
  // m_hat = g, v_hat = g^2
  EXPECT_NEAR(r.theta[0], 1.0 - 0.01 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(r.theta[1], 0.5 + 0.01 * 3.0 / (3.0 + 1e-8), 1e-15);
}

TEST(Adam, ConvergesOnQuadratic) {
  const ObjectiveFn f = [](std::span<const double> t, std::span<double> g) {
    g[0] = 2 * t[0];
    return t[0] * t[0];
  };
  const auto r = adam_run({1.0}, f, {500, 0.05});
  EXPECT_LT(std::abs(r.theta[0]), 1e-3);
  EXPECT_EQ(r.iterations, 500u);
}

TEST(Adam, RejectsNonFiniteSteps) {
  // Infinite outside |t| < 1.2; a unit step from 1 would leave the domain.
  const ObjectiveFn f = [](std::span<const double> t, std::span<double> g) {
    if (std::abs(t[0]) >= 1.2) return kInf;
    g[0] = -1.0;
    return -t[0];
  };
  const auto r = adam_run({1.0}, f, {3, 1.0});
  EXPECT_LT(r.theta[0], 1.2);
  EXPECT_GT(r.theta[0], 1.0);
}

TEST(Lbfgs, QuadraticInFewIterations) {
  const ObjectiveFn f = [](std::span<const double> t, std::span<double> g) {
    double v = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double c = static_cast<double>(i + 1);
      v += 0.5 * c * (t[i] - 1.0) * (t[i] - 1.0);
      g[i] = c * (t[i] - 1.0);
    }
    return v;
  };
  LbfgsOptions opt;
  opt.max_iters = 30;
  opt.ftol_rel = 0.0;
  opt.gtol = 1e-9;
  std::vector<double> start(10, 0.0);
  const auto r = lbfgs_run(start, f, opt);
  std::vector<double> g(10);
  f(r.theta, g);
  EXPECT_LT(inf_norm(g), 1e-8);
  EXPECT_LE(r.iterations, 30u);
}

TEST(Lbfgs, Rosenbrock) {
  const ObjectiveFn f = [](std::span<const double> t, std::span<double> g) {
    const double a = 1.0 - t[0], b = t[1] - t[0] * t[0];
    g[0] = -2.0 * a - 400.0 * t[0] * b;
    g[1] = 200.0 * b;
    return a * a + 100.0 * b * b;
  };
  LbfgsOptions opt;
  opt.max_iters = 500;
  const auto r = lbfgs_run({-1.2, 1.0}, f, opt);
  EXPECT_NEAR(r.theta[0], 1.0, 1e-6);
  EXPECT_NEAR(r.theta[1], 1.0, 1e-6);
}

TEST(Lbfgs, ZeroIterationsReturnsStart) {
  const ObjectiveFn f = [](std::span<const double> t, std::span<double> g) {
    g[0] = 2 * t[0];
    return t[0] * t[0];
  };
  LbfgsOptions opt;
  opt.max_iters = 0;
  const auto r = lbfgs_run({3.0}, f, opt);
  EXPECT_EQ(r.theta[0], 3.0);
  EXPECT_EQ(r.loss, 9.0);
}

TEST(Lbfgs, MonotoneAndWellPosedAlongIterates) {
  std::mt19937_64 rng(19);
  Instance in = random_instance(Dependency::rational, 0, rng);
  in.data = random_dataset(200, 0, rng);
  SimulationObjective obj(in.s, in.data, 1e-4);
  const ParamLayout L(in.s);
  std::size_t checked = 0;
  const ObjectiveFn f = [&](std::span<const double> th, std::span<double> g) {
    EXPECT_LT(spectral_radius(build_Dzw(factors_from(in.s, th, L))), 1.0);
    ++checked;
    return obj.value_and_gradient(th, g);
  };
  LbfgsOptions opt;
  opt.max_iters = 60;
  const auto r = lbfgs_run(in.theta, f, opt);
  ASSERT_GE(r.trace.size(), 2u);
  for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_LE(r.trace[i].loss, r.trace[i - 1].loss);
  EXPECT_GT(checked, 10u);
}

TEST(InitParams, FollowsInitializationTable) {
  ModelStructure s;
  s.mode = Dependency::rational;
  s.n_x = 2;
  s.delta = DeltaStructure({3});
  s.hidden = {6};
  const ParamLayout L(s);
  std::mt19937_64 r1(5), r2(5);
  const auto t = init_params(s, r1);
  EXPECT_EQ(t, init_params(s, r2));
  const Model m = unpack(s, t);
  EXPECT_EQ(m.plant.a_x, Mat::identity(2) * 0.5);
  EXPECT_EQ(m.plant.b_w.max_abs(), 0.0);
  EXPECT_EQ(m.plant.d_yw.max_abs(), 0.0);
  EXPECT_EQ(m.plant.d_yu.max_abs(), 0.0);
  for (const Mat* b : {&m.plant.b_u, &m.plant.c_z, &m.plant.d_zu, &m.plant.c_y}) EXPECT_LE(b->max_abs(), 0.1);
  EXPECT_EQ(L.db - L.da, 6u);
  EXPECT_EQ(L.dd - L.db, 3u);
  for (std::size_t i = L.da; i < L.db; ++i) {
    EXPECT_GE(t[i], 0.0);
    EXPECT_LE(t[i], 0.1);
  }
  for (std::size_t i = L.dd; i < L.net; ++i) EXPECT_EQ(t[i], 0.0);
  for (std::size_t i = L.x0; i < L.total; ++i) EXPECT_EQ(t[i], 0.0);
  EXPECT_EQ(m.net.hidden_bias(0), std::vector<double>(6, 0.0));
}

namespace {

// Noiseless second-order LTI system: poles 0.9 +- 0.2i.
Dataset lti_dataset(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Dataset ds;
  ds.u = Mat(n, 1);
  ds.y = Mat(n, 1);
  ds.d = Mat(n, 0);
  double x1 = 0.0, x2 = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double u = g(rng);
    ds.u(k, 0) = u;
    ds.y(k, 0) = x1 + 0.1 * u;
    const double n1 = 0.9 * x1 - 0.2 * x2 + 0.5 * u;
    const double n2 = 0.2 * x1 + 0.9 * x2;
    x1 = n1;
    x2 = n2;
  }
  return ds;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.mode = Dependency::affine;
  cfg.eta = {};
  cfg.adam_epochs = 200;
  cfg.adam_step = 1e-2;
  cfg.lbfgs_epochs = 300;
  cfg.reg_rho = 0.0;
  cfg.restarts = 2;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST(Fit, RecoversLtiSystemWithoutScheduling) {
  auto cfg = small_config();
  cfg.restarts = 1;
  const auto res = fit(cfg, lti_dataset(300, 1), lti_dataset(300, 2));
  EXPECT_GT(res.bfr_val, 99.0);
  EXPECT_EQ(res.restarts.size(), 1u);
  EXPECT_FALSE(res.best.factors.has_value());
}

TEST(Fit, ResultDoesNotDependOnThreadCount) {
  auto cfg = small_config();
  cfg.mode = Dependency::rational;
  cfg.eta = {2};
  cfg.adam_epochs = 30;
  cfg.lbfgs_epochs = 30;
  cfg.restarts = 3;
  const auto train = lti_dataset(120, 3), val = lti_dataset(120, 4);
  const auto a = fit(cfg, train, val);
  cfg.jobs = 2;
  const auto b = fit(cfg, train, val);
  EXPECT_EQ(a.best, b.best);
  EXPECT_EQ(a.best_restart, b.best_restart);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(a.restarts[r].loss, b.restarts[r].loss);
}

TEST(Fit, SelectsHighestValidationBfr) {
  auto cfg = small_config();
  cfg.adam_epochs = 5;
  cfg.lbfgs_epochs = 5;
  cfg.restarts = 4;
  const auto res = fit(cfg, lti_dataset(100, 5), lti_dataset(100, 6));
  for (const auto& r : res.restarts) EXPECT_LE(r.bfr_val, res.bfr_val);
  EXPECT_EQ(res.bfr_val, res.restarts[res.best_restart].bfr_val);
}

TEST(Fit, RejectsInvalidConfig) {
  auto cfg = small_config();
  cfg.restarts = 0;
  EXPECT_THROW(fit(cfg, lti_dataset(50, 1), lti_dataset(50, 2)), std::invalid_argument);
}
