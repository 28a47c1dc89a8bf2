#pragma once

// Simulation-error estimation of LPV-LFR models: loss and exact reverse-mode
// gradient through the full rollout, Adam, L-BFGS, and multi-start fitting.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "lpvlfr/bench.hpp"
#include "lpvlfr/lfr.hpp"
#include "lpvlfr/model.hpp"
#include "lpvlfr/sched.hpp"

namespace lpvlfr {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// A rollout whose state leaves this magnitude counts as divergent (loss +inf).
inline constexpr double kStateDivergenceBound = 1e10;

/// Objective V(theta) = (1/N) sum ||y_k - yhat_k||^2 + rho ||theta||^2 on a
/// dataset already in model units. Holds the rollout workspace, so one
/// instance must not be shared between threads.
class SimulationObjective {
 public:
  SimulationObjective(ModelStructure s, const Dataset& data, double reg_rho)
      : s_(std::move(s)), layout_(s_), data_(&data), rho_(reg_rho) {
    s_.validate();
    if (data.n_u() != s_.n_u || data.n_y() != s_.n_y || data.n_d() != s_.n_d)
      throw DimensionMismatch("SimulationObjective: dataset channels do not match the model structure");
    if (data.size() == 0) throw std::invalid_argument("SimulationObjective: empty dataset");
    if (reg_rho < 0.0) throw std::invalid_argument("SimulationObjective: reg_rho must be >= 0");
    const std::size_t n = data.size(), nx = s_.n_x, nw = s_.n_w(), np = s_.n_p(), ny = s_.n_y;
    if (s_.scheduling == SchedulingKind::network) net_ = SchedulingNet(s_.net_shape());
    owner_ = s_.delta.owner();
    xs_.resize((n + 1) * nx);
    ps_.resize(n * np);
    zs_.resize(n * nw);
    lus_.resize(n * nw * nw);
    pivs_.resize(n * nw);
    es_.resize(n * ny);
    acts_.resize(n * net_.activation_size());
    dzw_.assign(nw * nw, 0.0);
    dzw_bar_.assign(nw * nw, 0.0);
    scratch_.resize(2 * std::max<std::size_t>(net_.scratch_width(), 1));
  }

  const ModelStructure& structure() const noexcept { return s_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t dim() const noexcept { return layout_.total; }
  double reg_rho() const noexcept { return rho_; }

  /// Loss only. Non-finite or singular rollouts give +inf.
  double value(std::span<const double> theta) { return run(theta, nullptr); }

  /// Loss and its exact gradient. On +inf the gradient is zero-filled.
  double value_and_gradient(std::span<const double> theta, std::span<double> grad) {
    if (grad.size() != dim()) throw DimensionMismatch("value_and_gradient: gradient buffer has wrong length");
    return run(theta, grad.data());
  }

  /// Data-fit term of the last evaluation (without the regularizer).
  double last_fit() const noexcept { return last_fit_; }

 private:
  double run(std::span<const double> theta, double* grad) {
    if (theta.size() != dim()) throw DimensionMismatch("SimulationObjective: parameter vector has wrong length");
    if (grad) std::fill(grad, grad + dim(), 0.0);
    const double fit = forward(theta);
    last_fit_ = fit;
    if (!std::isfinite(fit)) return kInf;
    double reg = 0.0;
    for (double v : theta) reg += v * v;
    const double total = fit + rho_ * reg;
    if (!std::isfinite(total)) return kInf;
    if (grad) {
      if (!backward(theta, grad)) {
        std::fill(grad, grad + dim(), 0.0);
        return kInf;
      }
      for (std::size_t i = 0; i < dim(); ++i) grad[i] += 2.0 * rho_ * theta[i];
    }
    return total;
  }

  double forward(std::span<const double> theta) {
    const Dataset& D = *data_;
    const std::size_t n = D.size(), nx = s_.n_x, nw = s_.n_w(), nu = s_.n_u, ny = s_.n_y, nd = s_.n_d,
                      np = s_.n_p();
    const ParamLayout& L = layout_;
    const double* th = theta.data();
    const double *ax = th + L.a_x, *bw = th + L.b_w, *bu = th + L.b_u, *cz = th + L.c_z, *dzu = th + L.d_zu,
                 *cy = th + L.c_y, *dyw = th + L.d_yw, *dyu = th + L.d_yu;
    if (s_.mode == Dependency::rational) {
      try {
        factors_ = factors_from(s_, theta, L);
        const Mat d = build_Dzw(factors_);
        std::copy(d.values().begin(), d.values().end(), dzw_.begin());
      } catch (const std::exception&) {
        return kInf;
      }
    }
    const bool use_net = s_.scheduling == SchedulingKind::network;
    if (use_net) std::copy(th + L.net, th + L.x0, net_.params().begin());
    std::copy(th + L.x0, th + L.x0 + nx, xs_.begin());

    const std::size_t na = net_.activation_size();
    double delta[64], w[64];
    if (nw > 64) throw std::invalid_argument("SimulationObjective: n_w > 64 not supported");
    double sse = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double* x = xs_.data() + k * nx;
      const double* u = nu ? D.u.data() + k * nu : nullptr;
      const double* dk = nd ? D.d.data() + k * nd : nullptr;
      double* p = ps_.data() + k * np;
      if (use_net)
        net_.forward(x, u, dk, p, acts_.data() + k * na);
      else
        for (std::size_t i = 0; i < np; ++i) p[i] = dk[i];
      for (std::size_t j = 0; j < nw; ++j) delta[j] = p[owner_[j]];
      double* m = lus_.data() + k * nw * nw;
      double* z = zs_.data() + k * nw;
      for (std::size_t i = 0; i < nw; ++i) {
        for (std::size_t j = 0; j < nw; ++j) m[i * nw + j] = (i == j ? 1.0 : 0.0) - dzw_[i * nw + j] * delta[j];
        double r = 0.0;
        for (std::size_t j = 0; j < nx; ++j) r += cz[i * nx + j] * x[j];
        for (std::size_t j = 0; j < nu; ++j) r += dzu[i * nu + j] * u[j];
        z[i] = r;
      }
      if (nw) {
        int* piv = pivs_.data() + k * nw;
        if (!kernel::lu_factor(m, static_cast<int>(nw), piv)) return kInf;
        kernel::lu_solve(m, piv, static_cast<int>(nw), z);
      }
      for (std::size_t j = 0; j < nw; ++j) w[j] = delta[j] * z[j];
      double* e = es_.data() + k * ny;
      for (std::size_t i = 0; i < ny; ++i) {
        double yh = 0.0;
        for (std::size_t j = 0; j < nx; ++j) yh += cy[i * nx + j] * x[j];
        for (std::size_t j = 0; j < nw; ++j) yh += dyw[i * nw + j] * w[j];
        for (std::size_t j = 0; j < nu; ++j) yh += dyu[i * nu + j] * u[j];
        e[i] = D.y.data()[k * ny + i] - yh;
        sse += e[i] * e[i];
      }
      double* xn = xs_.data() + (k + 1) * nx;
      for (std::size_t i = 0; i < nx; ++i) {
        double v = 0.0;
        for (std::size_t j = 0; j < nx; ++j) v += ax[i * nx + j] * x[j];
        for (std::size_t j = 0; j < nw; ++j) v += bw[i * nw + j] * w[j];
        for (std::size_t j = 0; j < nu; ++j) v += bu[i * nu + j] * u[j];
        if (!(std::abs(v) <= kStateDivergenceBound)) return kInf;
        xn[i] = v;
      }
    }
    return sse / static_cast<double>(n);
  }

  // Reverse sweep over the stored rollout. Returns false if the D_zw adjoint fails.
  bool backward(std::span<const double> theta, double* g) {
    const Dataset& D = *data_;
    const std::size_t n = D.size(), nx = s_.n_x, nw = s_.n_w(), nu = s_.n_u, ny = s_.n_y, nd = s_.n_d,
                      np = s_.n_p();
    const ParamLayout& L = layout_;
    const double* th = theta.data();
    const double *ax = th + L.a_x, *bw = th + L.b_w, *cz = th + L.c_z, *cy = th + L.c_y,
                 *dyw = th + L.d_yw;
    double *gax = g + L.a_x, *gbw = g + L.b_w, *gbu = g + L.b_u, *gcz = g + L.c_z, *gdzu = g + L.d_zu,
           *gcy = g + L.c_y, *gdyw = g + L.d_yw, *gdyu = g + L.d_yu;
    const bool use_net = s_.scheduling == SchedulingKind::network;
    const std::size_t na = net_.activation_size();
    std::fill(dzw_bar_.begin(), dzw_bar_.end(), 0.0);

    double xbar_next[64], xbar[64], ybar[64], delta[64], w[64], wbar[64], dbar[64], rbar[64], pbar[64];
    if (nx > 64 || ny > 64 || np > 64) throw std::invalid_argument("SimulationObjective: dimension > 64");
    std::fill(xbar_next, xbar_next + nx, 0.0);
    const double scale = -2.0 / static_cast<double>(n);
    for (std::size_t k = n; k-- > 0;) {
      const double* x = xs_.data() + k * nx;
      const double* u = nu ? D.u.data() + k * nu : nullptr;
      const double* dk = nd ? D.d.data() + k * nd : nullptr;
      const double* p = ps_.data() + k * np;
      const double* z = zs_.data() + k * nw;
      const double* e = es_.data() + k * ny;
      for (std::size_t j = 0; j < nw; ++j) {
        delta[j] = p[owner_[j]];
        w[j] = delta[j] * z[j];
      }
      for (std::size_t i = 0; i < ny; ++i) ybar[i] = scale * e[i];

      // x_{k+1} = A_x x + B_w w + B_u u
      std::fill(xbar, xbar + nx, 0.0);
      std::fill(wbar, wbar + nw, 0.0);
      for (std::size_t i = 0; i < nx; ++i) {
        const double xb = xbar_next[i];
        if (xb == 0.0) continue;
        for (std::size_t j = 0; j < nx; ++j) {
          gax[i * nx + j] += xb * x[j];
          xbar[j] += ax[i * nx + j] * xb;
        }
        for (std::size_t j = 0; j < nw; ++j) {
          gbw[i * nw + j] += xb * w[j];
          wbar[j] += bw[i * nw + j] * xb;
        }
        for (std::size_t j = 0; j < nu; ++j) gbu[i * nu + j] += xb * u[j];
      }
      // y = C_y x + D_yw w + D_yu u
      for (std::size_t i = 0; i < ny; ++i) {
        const double yb = ybar[i];
        for (std::size_t j = 0; j < nx; ++j) {
          gcy[i * nx + j] += yb * x[j];
          xbar[j] += cy[i * nx + j] * yb;
        }
        for (std::size_t j = 0; j < nw; ++j) {
          gdyw[i * nw + j] += yb * w[j];
          wbar[j] += dyw[i * nw + j] * yb;
        }
        for (std::size_t j = 0; j < nu; ++j) gdyu[i * nu + j] += yb * u[j];
      }
      if (nw) {
        // w = delta .* z
        for (std::size_t j = 0; j < nw; ++j) {
          dbar[j] = z[j] * wbar[j];
          rbar[j] = delta[j] * wbar[j];
        }
        // z = M^{-1} r  =>  r_bar = M^{-T} z_bar, M_bar = -r_bar z^T
        kernel::lu_solve_transposed(lus_.data() + k * nw * nw, pivs_.data() + k * nw, static_cast<int>(nw), rbar);
        // M = I - D_zw diag(delta)
        for (std::size_t i = 0; i < nw; ++i) {
          const double rb = rbar[i];
          if (rb == 0.0) continue;
          for (std::size_t j = 0; j < nw; ++j) {
            dzw_bar_[i * nw + j] += rb * z[j] * delta[j];
            dbar[j] += rb * z[j] * dzw_[i * nw + j];
          }
        }
        // r = C_z x + D_zu u
        for (std::size_t i = 0; i < nw; ++i) {
          const double rb = rbar[i];
          if (rb == 0.0) continue;
          for (std::size_t j = 0; j < nx; ++j) {
            gcz[i * nx + j] += rb * x[j];
            xbar[j] += cz[i * nx + j] * rb;
          }
          for (std::size_t j = 0; j < nu; ++j) gdzu[i * nu + j] += rb * u[j];
        }
        if (use_net) {
          std::fill(pbar, pbar + np, 0.0);
          for (std::size_t j = 0; j < nw; ++j) pbar[owner_[j]] += dbar[j];
          net_.backward(x, u, dk, acts_.data() + k * na, p, pbar, g + L.net, xbar, nullptr, nullptr,
                        scratch_.data());
        }
      }
      std::copy(xbar, xbar + nx, xbar_next);
    }
    for (std::size_t i = 0; i < nx; ++i) g[L.x0 + i] += xbar_next[i];

    if (s_.mode == Dependency::rational && nw) {
      try {
        const WellPosedFactors gf = build_Dzw_adjoint(factors_, Mat(nw, nw, dzw_bar_));
        std::copy(gf.da_lower.begin(), gf.da_lower.end(), g + L.da);
        std::copy(gf.db_upper.begin(), gf.db_upper.end(), g + L.db);
        std::copy(gf.d_d.begin(), gf.d_d.end(), g + L.dd);
      } catch (const std::exception&) {
        return false;
      }
    }
    for (std::size_t i = 0; i < dim(); ++i)
      if (!std::isfinite(g[i])) return false;
    return true;
  }

  ModelStructure s_;
  ParamLayout layout_;
  const Dataset* data_;
  double rho_;
  SchedulingNet net_;
  WellPosedFactors factors_;
  std::vector<std::size_t> owner_;
  std::vector<double> xs_, ps_, zs_, lus_, es_, acts_, dzw_, dzw_bar_, scratch_;
  std::vector<int> pivs_;
  double last_fit_ = kInf;
};

/// f(theta, grad) -> value; must write the gradient when the value is finite.
using ObjectiveFn = std::function<double(std::span<const double>, std::span<double>)>;

struct IterRecord {
  std::size_t iter = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};
using IterCallback = std::function<void(const IterRecord&)>;

struct OptimResult {
  std::vector<double> theta;
  double loss = kInf;
  std::vector<IterRecord> trace;
  std::size_t iterations = 0;
  std::string stop_reason;
};

inline double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

struct AdamOptions {
  std::size_t steps = 1000;
  double step_size = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam on a full-batch objective. A step landing on a non-finite loss is
/// rejected; the step length for that iteration is halved and retried.
inline OptimResult adam_run(std::vector<double> theta, const ObjectiveFn& f, const AdamOptions& opt,
                            const IterCallback& cb = {}) {
  const std::size_t n = theta.size();
  std::vector<double> g(n), m(n, 0.0), v(n, 0.0), cand(n), gc(n);
  OptimResult res;
  double loss = f(theta, g);
  res.trace.push_back({0, loss, inf_norm(g)});
  if (cb) cb(res.trace.back());
  if (!std::isfinite(loss)) {
    res.theta = std::move(theta);
    res.loss = loss;
    res.stop_reason = "non-finite initial loss";
    return res;
  }
  double b1t = 1.0, b2t = 1.0;
  for (std::size_t t = 1; t <= opt.steps; ++t) {
    b1t *= opt.beta1;
    b2t *= opt.beta2;
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
    }
    double lr = opt.step_size;
    bool accepted = false;
    for (int attempt = 0; attempt < 30; ++attempt, lr *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) {
        const double mh = m[i] / (1.0 - b1t);
        const double vh = v[i] / (1.0 - b2t);
        cand[i] = theta[i] - lr * mh / (std::sqrt(vh) + opt.eps);
      }
      const double lc = f(cand, gc);
      if (std::isfinite(lc)) {
        theta.swap(cand);
        g.swap(gc);
        loss = lc;
        accepted = true;
        break;
      }
    }
    res.iterations = t;
    res.trace.push_back({t, loss, inf_norm(g)});
    if (cb) cb(res.trace.back());
    if (!accepted) continue;
  }
  res.theta = std::move(theta);
  res.loss = loss;
  res.stop_reason = "max iterations";
  return res;
}

struct LbfgsOptions {
  std::size_t max_iters = 4000;
  std::size_t memory = 10;
  double c1 = 1e-4;
  double c2 = 0.9;
  double gtol = 1e-9;      // stop on ||g||_inf below this
  double ftol_rel = 1e-12;  // stop on relative decrease below this
  std::size_t max_line_search = 40;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Minimizer of the cubic through (a, fa, da) and (b, fb, db), or NaN.
inline double cubic_min(double a, double fa, double da, double b, double fb, double db) {
  const double d1 = da + db - 3.0 * (fa - fb) / (a - b);
  const double disc = d1 * d1 - da * db;
  if (!(disc >= 0.0)) return std::numeric_limits<double>::quiet_NaN();
  const double d2 = std::copysign(std::sqrt(disc), b - a);
  return b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
}

struct LinePoint {
  double alpha = 0.0, f = kInf, dphi = 0.0;
};

}  // namespace detail

/// L-BFGS (two-loop recursion) with a strong-Wolfe line search; no bounds.
/// A failed line search ends the run and returns the best iterate seen.
inline OptimResult lbfgs_run(std::vector<double> theta, const ObjectiveFn& f, const LbfgsOptions& opt,
                             const IterCallback& cb = {}) {
  using detail::dot;
  const std::size_t n = theta.size();
  std::vector<double> g(n), d(n), xt(n), gt(n), best_x, best_g(n);
  std::vector<std::vector<double>> S, Y;
  std::vector<double> rho_hist;
  OptimResult res;
  double loss = f(theta, g);
  res.trace.push_back({0, loss, inf_norm(g)});
  if (cb) cb(res.trace.back());
  if (!std::isfinite(loss)) {
    res.theta = std::move(theta);
    res.loss = loss;
    res.stop_reason = "non-finite initial loss";
    return res;
  }
  if (opt.max_iters == 0) {
    res.theta = std::move(theta);
    res.loss = loss;
    res.stop_reason = "max iterations";
    return res;
  }
  std::vector<double> alpha_hist(opt.memory);
  for (std::size_t it = 1; it <= opt.max_iters; ++it) {
    if (inf_norm(g) < opt.gtol) {
      res.stop_reason = "gradient tolerance";
      break;
    }
    // d = -H g
    for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
    const std::size_t h = S.size();
    for (std::size_t j = h; j-- > 0;) {
      const double a = rho_hist[j] * dot(S[j], d);
      alpha_hist[j] = a;
      for (std::size_t i = 0; i < n; ++i) d[i] -= a * Y[j][i];
    }
    if (h) {
      const double gamma = dot(S[h - 1], Y[h - 1]) / dot(Y[h - 1], Y[h - 1]);
      for (double& v : d) v *= gamma;
    }
    for (std::size_t j = 0; j < h; ++j) {
      const double b = rho_hist[j] * dot(Y[j], d);
      for (std::size_t i = 0; i < n; ++i) d[i] += (alpha_hist[j] - b) * S[j][i];
    }
    double dphi0 = dot(g, d);
    if (!(dphi0 < 0.0)) {
      S.clear();
      Y.clear();
      rho_hist.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
      dphi0 = dot(g, d);
    }
    double alpha0 = 1.0;
    if (S.empty()) alpha0 = std::min(1.0, 1.0 / std::sqrt(dot(g, g)));

    // Strong Wolfe line search (bracketing + zoom with cubic interpolation).
    const double f0 = loss;
    std::size_t evals = 0;
    auto eval = [&](double a) {
      for (std::size_t i = 0; i < n; ++i) xt[i] = theta[i] + a * d[i];
      ++evals;
      detail::LinePoint p{a, f(xt, gt), 0.0};
      p.dphi = std::isfinite(p.f) ? dot(gt, d) : 0.0;
      if (std::isfinite(p.f) && (best_x.empty() || p.f < res.loss)) {
        best_x = xt;
        best_g = gt;
        res.loss = p.f;
      }
      return p;
    };
    res.loss = f0;
    best_x.clear();
    auto armijo_fail = [&](const detail::LinePoint& p) { return !std::isfinite(p.f) || p.f > f0 + opt.c1 * p.alpha * dphi0; };
    auto curvature_ok = [&](const detail::LinePoint& p) { return std::abs(p.dphi) <= -opt.c2 * dphi0; };

    std::optional<detail::LinePoint> found;
    auto zoom = [&](detail::LinePoint lo, detail::LinePoint hi) -> std::optional<detail::LinePoint> {
      while (evals < opt.max_line_search) {
        double a = std::numeric_limits<double>::quiet_NaN();
        if (std::isfinite(hi.f)) a = detail::cubic_min(lo.alpha, lo.f, lo.dphi, hi.alpha, hi.f, hi.dphi);
        const double lo_a = std::min(lo.alpha, hi.alpha), hi_a = std::max(lo.alpha, hi.alpha);
        const double width = hi_a - lo_a;
        if (!(a > lo_a + 0.1 * width && a < hi_a - 0.1 * width)) a = 0.5 * (lo.alpha + hi.alpha);
        if (width <= 1e-16 * std::max(1.0, hi_a)) return std::nullopt;
        const auto p = eval(a);
        if (armijo_fail(p) || p.f >= lo.f) {
          hi = p;
        } else {
          if (curvature_ok(p)) return p;
          if (p.dphi * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
          lo = p;
        }
      }
      return std::nullopt;
    };
    detail::LinePoint prev{0.0, f0, dphi0};
    double a = alpha0;
    for (std::size_t i = 0; evals < opt.max_line_search; ++i) {
      const auto p = eval(a);
      if (armijo_fail(p) || (i > 0 && p.f >= prev.f)) {
        found = zoom(prev, p);
        break;
      }
      if (curvature_ok(p)) {
        found = p;
        break;
      }
      if (p.dphi >= 0.0) {
        found = zoom(p, prev);
        break;
      }
      prev = p;
      a *= 2.0;
    }

    res.iterations = it;
    if (!found) {
      // Keep the best point seen if it improves, then stop.
      if (!best_x.empty() && res.loss < f0) {
        theta = best_x;
        g = best_g;
        loss = res.loss;
      }
      res.trace.push_back({it, loss, inf_norm(g)});
      if (cb) cb(res.trace.back());
      res.stop_reason = "line search failure";
      break;
    }
    // The accepted point is always the last one evaluated, so xt and gt hold it.
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = xt[i] - theta[i];
      y[i] = gt[i] - g[i];
    }
    const double sy = dot(s, y);
    const double prev_loss = loss;
    theta = xt;
    g = gt;
    loss = found->f;
    if (sy > 1e-12 * std::sqrt(dot(s, s) * dot(y, y))) {
      if (S.size() == opt.memory) {
        S.erase(S.begin());
        Y.erase(Y.begin());
        rho_hist.erase(rho_hist.begin());
      }
      S.push_back(std::move(s));
      Y.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
    }
    res.trace.push_back({it, loss, inf_norm(g)});
    if (cb) cb(res.trace.back());
    const double denom = std::max({std::abs(prev_loss), std::abs(loss), 1e-300});
    if ((prev_loss - loss) / denom < opt.ftol_rel) {
      res.stop_reason = "relative decrease tolerance";
      break;
    }
    if (it == opt.max_iters) res.stop_reason = "max iterations";
  }
  if (res.stop_reason.empty()) res.stop_reason = "max iterations";
  res.theta = std::move(theta);
  res.loss = loss;
  return res;
}

// ---------------------------------------------------------------------------

struct TrainConfig {
  Dependency mode = Dependency::rational;
  std::size_t n_x = 2;
  std::vector<std::size_t> eta{3};
  SchedulingKind scheduling = SchedulingKind::network;
  std::vector<std::size_t> hidden;  // empty => tanh(W_x x + W_u u + W_d d + b)
  double epsilon = 1e-3;
  std::size_t adam_epochs = 1000;
  std::size_t lbfgs_epochs = 4000;
  double adam_step = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t lbfgs_memory = 10;
  double reg_rho = 1e-4;
  std::size_t restarts = 1;
  std::uint64_t seed = 0;
  bool normalize_data = false;
  std::size_t jobs = 1;

  void validate() const {
    if (n_x == 0) throw std::invalid_argument("TrainConfig: n_x must be positive");
    if (restarts == 0) throw std::invalid_argument("TrainConfig: restarts must be positive");
    if (reg_rho < 0.0) throw std::invalid_argument("TrainConfig: reg_rho must be >= 0");
    if (lbfgs_memory == 0) throw std::invalid_argument("TrainConfig: lbfgs_memory must be positive");
    for (std::size_t e : eta)
      if (e == 0) throw std::invalid_argument("TrainConfig: eta entries must be >= 1");
  }

  ModelStructure structure_for(const Dataset& data) const {
    ModelStructure s;
    s.mode = mode;
    s.n_x = n_x;
    s.n_u = data.n_u();
    s.n_y = data.n_y();
    s.n_d = data.n_d();
    s.delta = DeltaStructure(eta);
    s.scheduling = scheduling;
    s.hidden = hidden;
    s.epsilon = epsilon;
    s.validate();
    return s;
  }
};

/// Pseudo-random starting point: A_x = 0.5 I; B_w, D_yw, D_yu = 0;
/// B_u, C_z, D_zu, C_y ~ U(-0.1, 0.1); rational factors dA ~ U(0, 0.1),
/// dB ~ N(1, 1), d_d = 0; Xavier net with zero biases; x0 = 0.
template <class Rng>
std::vector<double> init_params(const ModelStructure& s, Rng& rng) {
  const ParamLayout L(s);
  std::vector<double> t(L.total, 0.0);
  for (std::size_t i = 0; i < s.n_x; ++i) t[L.a_x + i * s.n_x + i] = 0.5;
  std::uniform_real_distribution<double> small(-0.1, 0.1);
  auto fill = [&](std::size_t off, std::size_t count, auto& dist) {
    for (std::size_t i = 0; i < count; ++i) t[off + i] = dist(rng);
  };
  fill(L.b_u, L.c_z - L.b_u, small);
  fill(L.c_z, L.d_zu - L.c_z, small);
  fill(L.d_zu, L.c_y - L.d_zu, small);
  fill(L.c_y, L.d_yw - L.c_y, small);
  if (s.mode == Dependency::rational) {
    std::uniform_real_distribution<double> da(0.0, 0.1);
    std::normal_distribution<double> db(1.0, 1.0);
    fill(L.da, L.db - L.da, da);
    fill(L.db, L.dd - L.db, db);
  }
  if (s.scheduling == SchedulingKind::network) {
    const SchedulingNet net = xavier_init(s.net_shape(), rng);
    std::copy(net.params().begin(), net.params().end(), t.begin() + L.net);
  }
  return t;
}

struct TraceRecord {
  std::size_t restart = 0;
  std::string phase;  // "adam" | "lbfgs"
  std::size_t iter = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double elapsed = 0.0;  // seconds since the restart began
};

struct RestartSummary {
  std::size_t restart = 0;
  std::uint64_t seed = 0;
  std::size_t init_attempts = 0;
  bool ok = false;
  double loss = kInf;
  double bfr_train = 0.0;
  double bfr_val = 0.0;
  std::string lbfgs_stop;
  double seconds = 0.0;
  std::vector<TraceRecord> trace;
};

struct FitResult {
  Model best;
  std::size_t best_restart = 0;
  double bfr_train = 0.0;
  double bfr_val = 0.0;
  double wall_seconds = 0.0;
  std::vector<RestartSummary> restarts;
};

struct AllRestartsFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// BFR of the model's simulation on a dataset (0 if the rollout fails).
inline double model_bfr(const Model& m, const Dataset& data) {
  try {
    const Trajectory t = simulate_model(m, data);
    if (!t.y.all_finite()) return 0.0;
    return bfr(data.y, t.y);
  } catch (const SingularStep&) {
    return 0.0;
  }
}

/// One restart: seeded init (redrawn up to 5 times on a non-finite start),
/// Adam, then L-BFGS, then BFR on both datasets.
inline RestartSummary run_restart(const TrainConfig& cfg, const ModelStructure& s, const Dataset& train_scaled,
                                  const Dataset& train, const Dataset& val, const std::optional<DataScalers>& sc,
                                  std::size_t r, std::vector<double>* theta_out) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  RestartSummary out;
  out.restart = r;
  out.seed = cfg.seed + r;
  SimulationObjective obj(s, train_scaled, cfg.reg_rho);
  const ObjectiveFn f = [&obj](std::span<const double> th, std::span<double> g) {
    return obj.value_and_gradient(th, g);
  };
  auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };

  std::vector<double> theta;
  for (std::size_t attempt = 0; attempt < 5; ++attempt) {
    std::seed_seq seq{static_cast<std::uint32_t>(out.seed), static_cast<std::uint32_t>(out.seed >> 32),
                      static_cast<std::uint32_t>(attempt)};
    std::mt19937_64 rng(seq);
    theta = init_params(s, rng);
    out.init_attempts = attempt + 1;
    if (std::isfinite(obj.value(theta))) break;
    theta.clear();
  }
  if (theta.empty()) {
    out.seconds = elapsed();
    return out;
  }
  auto record = [&](const char* phase) {
    return [&out, &elapsed, phase, r](const IterRecord& rec) {
      out.trace.push_back({r, phase, rec.iter, rec.loss, rec.grad_norm, elapsed()});
    };
  };
  AdamOptions ao{cfg.adam_epochs, cfg.adam_step, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
  OptimResult a = adam_run(std::move(theta), f, ao, record("adam"));
  LbfgsOptions lo;
  lo.max_iters = cfg.lbfgs_epochs;
  lo.memory = cfg.lbfgs_memory;
  OptimResult b = lbfgs_run(std::move(a.theta), f, lo, record("lbfgs"));
  out.loss = b.loss;
  out.lbfgs_stop = b.stop_reason;
  if (std::isfinite(b.loss)) {
    const Model m = unpack(s, b.theta, sc);
    out.bfr_train = model_bfr(m, train);
    out.bfr_val = model_bfr(m, val);
    out.ok = true;
  }
  if (theta_out) *theta_out = std::move(b.theta);
  out.seconds = elapsed();
  return out;
}

/// Multi-start estimation. Restart r uses seed + r; the restart with the
/// highest validation BFR wins (lowest index on ties). Runs restarts on up to
/// cfg.jobs threads; the result does not depend on the thread count.
inline FitResult fit(const TrainConfig& cfg, const Dataset& train, const Dataset& val) {
  cfg.validate();
  train.validate();
  val.validate();
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const ModelStructure s = cfg.structure_for(train);
  if (val.n_u() != s.n_u || val.n_y() != s.n_y || val.n_d() != s.n_d)
    throw DimensionMismatch("fit: validation channels differ from training channels");
  std::optional<DataScalers> sc;
  if (cfg.normalize_data) sc = compute_scalers(train);
  const Dataset train_scaled = apply_scalers(train, sc);

  std::vector<RestartSummary> sums(cfg.restarts);
  std::vector<std::vector<double>> thetas(cfg.restarts);
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  auto worker = [&] {
    for (;;) {
      const std::size_t r = next.fetch_add(1);
      if (r >= cfg.restarts) return;
      try {
        sums[r] = run_restart(cfg, s, train_scaled, train, val, sc, r, &thetas[r]);
      } catch (...) {
        std::lock_guard lk(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, cfg.restarts));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  if (err) std::rethrow_exception(err);

  FitResult res;
  std::optional<std::size_t> best;
  for (std::size_t r = 0; r < cfg.restarts; ++r)
    if (sums[r].ok && (!best || sums[r].bfr_val > sums[*best].bfr_val)) best = r;
  if (!best) throw AllRestartsFailed("fit: every restart ended with a non-finite loss");
  res.best = unpack(s, thetas[*best], sc);
  res.best_restart = *best;
  res.bfr_train = sums[*best].bfr_train;
  res.bfr_val = sums[*best].bfr_val;
  res.restarts = std::move(sums);
  res.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  return res;
}

}  // namespace lpvlfr
