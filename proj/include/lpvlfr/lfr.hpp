#pragma once

// LPV-LFR model core. A plant M = [A_x B_w B_u; C_z D_zw D_zu; C_y D_yw D_yu]
// is closed by w = Delta(p) z with Delta(p) = diag(p_1 I_eta1, ..., p_np I_etanp).

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "lpvlfr/linalg.hpp"
#include "lpvlfr/sched.hpp"

namespace lpvlfr {

struct SingularStep : std::runtime_error {
  SingularStep(std::size_t k, const std::string& what) : std::runtime_error(what), step(k) {}
  std::size_t step;
};
struct SingularPoint : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Repetition counts of the scheduling variables along the Delta diagonal.
struct DeltaStructure {
  std::vector<std::size_t> eta;

  DeltaStructure() = default;
  explicit DeltaStructure(std::vector<std::size_t> e) : eta(std::move(e)) {
    for (std::size_t v : eta)
      if (v == 0) throw std::invalid_argument("DeltaStructure: every eta_i must be >= 1");
  }

  std::size_t n_p() const noexcept { return eta.size(); }
  std::size_t n_w() const noexcept { return std::accumulate(eta.begin(), eta.end(), std::size_t{0}); }

  /// Diagonal of Delta(p), length n_w.
  std::vector<double> expand(std::span<const double> p) const {
    if (p.size() != eta.size()) throw DimensionMismatch("delta: p has wrong length");
    std::vector<double> out;
    out.reserve(n_w());
    for (std::size_t i = 0; i < eta.size(); ++i) out.insert(out.end(), eta[i], p[i]);
    return out;
  }
  /// Scheduling index of each diagonal position.
  std::vector<std::size_t> owner() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < eta.size(); ++i) out.insert(out.end(), eta[i], i);
    return out;
  }
  friend bool operator==(const DeltaStructure&, const DeltaStructure&) = default;
};

inline Mat delta_of_p(const DeltaStructure& delta, std::span<const double> p) {
  const auto diag = delta.expand(p);
  return Mat::diag(diag);
}

struct LfrPlant {
  Mat a_x, b_w, b_u;
  Mat c_z, d_zw, d_zu;
  Mat c_y, d_yw, d_yu;
  DeltaStructure delta;

  std::size_t n_x() const noexcept { return a_x.rows(); }
  std::size_t n_w() const noexcept { return d_zw.rows(); }
  std::size_t n_u() const noexcept { return b_u.cols(); }
  std::size_t n_y() const noexcept { return c_y.rows(); }
  std::size_t n_p() const noexcept { return delta.n_p(); }

  /// All-zero plant of the given sizes.
  static LfrPlant zeros(std::size_t nx, std::size_t nu, std::size_t ny, DeltaStructure delta) {
    const std::size_t nw = delta.n_w();
    return {Mat(nx, nx), Mat(nx, nw), Mat(nx, nu), Mat(nw, nx), Mat(nw, nw),
            Mat(nw, nu), Mat(ny, nx), Mat(ny, nw), Mat(ny, nu), std::move(delta)};
  }

  void validate() const {
    const std::size_t nx = n_x(), nw = n_w(), nu = n_u(), ny = n_y();
    auto chk = [](const Mat& m, std::size_t r, std::size_t c, const char* name) {
      if (m.rows() != r || m.cols() != c)
        throw DimensionMismatch(std::string("LfrPlant: block ") + name + " has shape " + std::to_string(m.rows()) +
                                "x" + std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" +
                                std::to_string(c));
      if (!m.all_finite()) throw NonFiniteEntry(std::string("LfrPlant: block ") + name + " is not finite");
    };
    chk(a_x, nx, nx, "A_x");
    chk(b_w, nx, nw, "B_w");
    chk(b_u, nx, nu, "B_u");
    chk(c_z, nw, nx, "C_z");
    chk(d_zw, nw, nw, "D_zw");
    chk(d_zu, nw, nu, "D_zu");
    chk(c_y, ny, nx, "C_y");
    chk(d_yw, ny, nw, "D_yw");
    chk(d_yu, ny, nu, "D_yu");
    if (delta.n_w() != nw) throw DimensionMismatch("LfrPlant: sum(eta) != n_w");
  }
  friend bool operator==(const LfrPlant&, const LfrPlant&) = default;
};

/// Free variables generating a well-posed D_zw = expm(-N) with
/// N = Psi (D_A^T D_A + D_B - D_B^T + eps I), Psi = diag(exp(d_d)).
/// D_A is lower triangular (incl. diagonal), D_B strictly upper triangular,
/// both stored row by row.
struct WellPosedFactors {
  std::size_t n_w = 0;
  std::vector<double> da_lower;  // n_w (n_w + 1) / 2
  std::vector<double> db_upper;  // n_w (n_w - 1) / 2
  std::vector<double> d_d;       // n_w
  double epsilon = 1e-3;

  static std::size_t lower_count(std::size_t n) { return n * (n + 1) / 2; }
  static std::size_t upper_count(std::size_t n) { return n * (n - 1) / 2; }
  /// Trainable entries; epsilon is a fixed constant.
  static std::size_t free_count(std::size_t n) { return n * n + n; }

  static WellPosedFactors zeros(std::size_t n, double eps = 1e-3) {
    return {n, std::vector<double>(lower_count(n)), std::vector<double>(upper_count(n)), std::vector<double>(n), eps};
  }

  void validate() const {
    if (da_lower.size() != lower_count(n_w) || db_upper.size() != upper_count(n_w) || d_d.size() != n_w)
      throw DimensionMismatch("WellPosedFactors: entry counts do not match n_w");
    if (!(epsilon > 0.0 && epsilon <= 0.1)) throw std::invalid_argument("WellPosedFactors: need 0 < epsilon <= 0.1");
  }

  Mat d_a() const {
    Mat m(n_w, n_w);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n_w; ++i)
      for (std::size_t j = 0; j <= i; ++j) m(i, j) = da_lower[k++];
    return m;
  }
  Mat d_b() const {
    Mat m(n_w, n_w);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n_w; ++i)
      for (std::size_t j = i + 1; j < n_w; ++j) m(i, j) = db_upper[k++];
    return m;
  }
  friend bool operator==(const WellPosedFactors&, const WellPosedFactors&) = default;
};

/// S = D_A^T D_A + D_B - D_B^T + eps I (before the Psi scaling).
inline Mat build_inner(const WellPosedFactors& f) {
  f.validate();
  const Mat da = f.d_a();
  const Mat db = f.d_b();
  Mat s = da.transpose() * da;
  s += db;
  s -= db.transpose();
  for (std::size_t i = 0; i < f.n_w; ++i) s(i, i) += f.epsilon;
  return s;
}

inline Mat build_N(const WellPosedFactors& f) {
  Mat n = build_inner(f);
  for (std::size_t i = 0; i < f.n_w; ++i) {
    const double psi = std::exp(f.d_d[i]);
    for (std::size_t j = 0; j < f.n_w; ++j) n(i, j) *= psi;
  }
  return n;
}

/// D_zw = expm(-N); rho(D_zw) < 1 by construction.
inline Mat build_Dzw(const WellPosedFactors& f) { return expm(-build_N(f)); }

/// Gradient of a scalar loss with respect to the factors, given dL/dD_zw.
/// Uses the expm adjoint L(A, .)^T = L(A^T, .) at A = -N.
inline WellPosedFactors build_Dzw_adjoint(const WellPosedFactors& f, const Mat& dzw_bar) {
  const std::size_t n = f.n_w;
  const Mat s = build_inner(f);
  std::vector<double> psi(n);
  for (std::size_t i = 0; i < n; ++i) psi[i] = std::exp(f.d_d[i]);
  Mat nmat = s;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) nmat(i, j) *= psi[i];
  // D = expm(-N)  =>  N_bar = -L(-N^T, D_bar)
  Mat n_bar = expm_frechet(-nmat.transpose(), dzw_bar).frechet;
  n_bar *= -1.0;

  WellPosedFactors g = WellPosedFactors::zeros(n, f.epsilon);
  Mat s_bar(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      s_bar(i, j) = psi[i] * n_bar(i, j);
      acc += n_bar(i, j) * psi[i] * s(i, j);
    }
    g.d_d[i] = acc;
  }
  // d/dD_A of tr(S_bar^T D_A^T D_A) = D_A (S_bar + S_bar^T)
  const Mat sym = s_bar + s_bar.transpose();
  const Mat da_bar = f.d_a() * sym;
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) g.da_lower[k++] = da_bar(i, j);
  k = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) g.db_upper[k++] = s_bar(i, j) - s_bar(j, i);
  return g;
}

struct SchedulingBox {
  std::vector<double> p_min, p_max;

  SchedulingBox() = default;
  SchedulingBox(std::vector<double> lo, std::vector<double> hi) : p_min(std::move(lo)), p_max(std::move(hi)) {
    if (p_min.size() != p_max.size()) throw DimensionMismatch("SchedulingBox: bound lengths differ");
    for (std::size_t i = 0; i < p_min.size(); ++i)
      if (!(p_min[i] < p_max[i])) throw std::invalid_argument("SchedulingBox: need p_min < p_max");
  }
  static SchedulingBox unit(std::size_t n_p) {
    return {std::vector<double>(n_p, -1.0), std::vector<double>(n_p, 1.0)};
  }
  std::size_t n_p() const noexcept { return p_min.size(); }
};

/// det(I - D_zw Delta(p)) as a polynomial in p. Coefficients are indexed in
/// mixed radix (eta_i + 1) with the first scheduling variable most
/// significant; the expansion sums signed principal minors of D_zw.
class DetPolynomial {
 public:
  DetPolynomial(const Mat& d_zw, const DeltaStructure& delta) : radix_(delta.eta) {
    const std::size_t n = delta.n_w();
    if (d_zw.rows() != n || d_zw.cols() != n) throw DimensionMismatch("DetPolynomial: D_zw shape");
    if (n > 20) throw std::invalid_argument("DetPolynomial: n_w too large for minor expansion");
    for (auto& r : radix_) ++r;
    std::size_t total = 1;
    for (std::size_t r : radix_) total *= r;
    coef_.assign(total, 0.0);
    const auto owner = delta.owner();
    std::vector<std::size_t> stride(radix_.size(), 1);
    for (std::size_t i = radix_.size(); i-- > 1;) stride[i - 1] = stride[i] * radix_[i];
    std::vector<std::size_t> idx;
    for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
      idx.clear();
      std::size_t pos = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (mask >> j & 1) {
          idx.push_back(j);
          pos += stride[owner[j]];
        }
      double minor = 1.0;
      if (!idx.empty()) {
        Mat sub(idx.size(), idx.size());
        for (std::size_t a = 0; a < idx.size(); ++a)
          for (std::size_t b = 0; b < idx.size(); ++b) sub(a, b) = d_zw(idx[a], idx[b]);
        minor = det(sub);
      }
      coef_[pos] += (idx.size() % 2 ? -1.0 : 1.0) * minor;
    }
  }

  double operator()(std::span<const double> p) const {
    if (p.size() != radix_.size()) throw DimensionMismatch("DetPolynomial: p has wrong length");
    std::vector<double> cur = coef_;
    std::size_t len = cur.size();
    // Contract the last variable first (it is least significant).
    for (std::size_t i = radix_.size(); i-- > 0;) {
      const std::size_t r = radix_[i];
      len /= r;
      for (std::size_t k = 0; k < len; ++k) {
        double acc = 0.0;
        for (std::size_t e = r; e-- > 0;) acc = acc * p[i] + cur[k * r + e];
        cur[k] = acc;
      }
    }
    return cur[0];
  }

  /// Visits every point of the tensor grid values[0] x values[1] x ... and
  /// calls fn(p, det). Horner contraction runs from the first variable
  /// inwards so each level reuses the partial sums of its parent.
  void for_each_on_grid(const std::vector<std::vector<double>>& values,
                        const std::function<void(std::span<const double>, double)>& fn) const {
    const std::size_t np = radix_.size();
    if (values.size() != np) throw DimensionMismatch("DetPolynomial: grid dimension mismatch");
    std::vector<std::vector<double>> level(np + 1);
    level[0] = coef_;
    std::vector<double> p(np);
    std::function<void(std::size_t)> rec = [&](std::size_t i) {
      if (i == np) {
        fn(p, level[np][0]);
        return;
      }
      const std::size_t r = radix_[i];
      const std::size_t rest = level[i].size() / r;
      level[i + 1].assign(rest, 0.0);
      for (double v : values[i]) {
        p[i] = v;
        for (std::size_t k = 0; k < rest; ++k) {
          double acc = 0.0;
          for (std::size_t e = r; e-- > 0;) acc = acc * v + level[i][e * rest + k];
          level[i + 1][k] = acc;
        }
        rec(i + 1);
      }
    };
    rec(0);
  }

 private:
  std::vector<std::size_t> radix_;
  std::vector<double> coef_;
};

struct WellPosednessReport {
  bool affine = false;  // D_zw == 0
  double spectral_radius = 0.0;
  bool spectral_radius_converged = true;
  bool spectral_condition = false;  // rho(D_zw) < 1
  double sigma_max = 0.0;
  bool small_gain_certified = false;  // sigma_max(D_zw) < 1
  bool empirical_ok = true;
  bool sign_change = false;
  double min_det = 1.0;
  double min_abs_det = 1.0;
  std::vector<double> argmin_abs_p;
  std::optional<std::vector<double>> counterexample;
  std::size_t points_checked = 0;
};

/// Well-posedness diagnostics on a box: small-gain certificate, rho(D_zw) < 1,
/// and det(I - D_zw Delta(p)) over a tensor grid plus uniform random samples.
/// Grid determinants use the minor expansion; random samples use LU.
inline WellPosednessReport is_well_posed(const LfrPlant& plant, const SchedulingBox& box, std::size_t grid_per_dim,
                                         std::size_t random_samples, std::uint64_t seed = 20240601) {
  if (grid_per_dim < 2) throw std::invalid_argument("is_well_posed: grid_per_dim must be >= 2");
  if (box.n_p() != plant.n_p()) throw DimensionMismatch("is_well_posed: box dimension != n_p");
  const Mat& d = plant.d_zw;
  const std::size_t nw = plant.n_w();
  WellPosednessReport rep;
  rep.affine = d.max_abs() == 0.0;
  const auto rho = spectral_radius_estimate(d);
  rep.spectral_radius = rho.value;
  rep.spectral_radius_converged = rho.converged;
  rep.spectral_condition = rho.value < 1.0;
  rep.sigma_max = nw ? std::sqrt(spectral_radius(d.transpose() * d)) : 0.0;
  rep.small_gain_certified = rep.sigma_max < 1.0;

  auto visit = [&](std::span<const double> p, double dv) {
    ++rep.points_checked;
    if (dv <= 0.0) rep.sign_change = true;
    rep.min_det = std::min(rep.min_det, dv);
    if (std::abs(dv) < rep.min_abs_det || rep.argmin_abs_p.empty()) {
      rep.min_abs_det = std::abs(dv);
      rep.argmin_abs_p.assign(p.begin(), p.end());
    }
  };

  std::vector<std::vector<double>> values(box.n_p());
  for (std::size_t i = 0; i < box.n_p(); ++i)
    for (std::size_t g = 0; g < grid_per_dim; ++g)
      values[i].push_back(box.p_min[i] +
                          (box.p_max[i] - box.p_min[i]) * static_cast<double>(g) / static_cast<double>(grid_per_dim - 1));
  if (nw <= 16) {
    DetPolynomial(d, plant.delta).for_each_on_grid(values, visit);
  } else {
    std::vector<std::size_t> idx(box.n_p(), 0);
    std::vector<double> p(box.n_p());
    for (;;) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = values[i][idx[i]];
      visit(p, det(Mat::identity(nw) - d * delta_of_p(plant.delta, p)));
      std::size_t i = 0;
      while (i < idx.size() && ++idx[i] == grid_per_dim) idx[i++] = 0;
      if (i == idx.size()) break;
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<double> p(box.n_p());
  for (std::size_t s = 0; s < random_samples; ++s) {
    for (std::size_t i = 0; i < p.size(); ++i)
      p[i] = std::uniform_real_distribution<double>(box.p_min[i], box.p_max[i])(rng);
    visit(p, det(Mat::identity(nw) - d * delta_of_p(plant.delta, p)));
  }
  rep.empirical_ok = !rep.sign_change;
  if (!rep.empirical_ok) rep.counterexample = rep.argmin_abs_p;
  return rep;
}

/// Where the scheduling signal comes from during simulation.
class SchedulingSource {
 public:
  static SchedulingSource self_scheduled(const SchedulingNet& net) { return SchedulingSource(&net); }
  /// Fixed sequence, one row per sample.
  static SchedulingSource exogenous(const Mat& p) { return SchedulingSource(&p); }

  const SchedulingNet* net() const noexcept {
    auto* n = std::get_if<const SchedulingNet*>(&src_);
    return n ? *n : nullptr;
  }
  const Mat* sequence() const noexcept {
    auto* m = std::get_if<const Mat*>(&src_);
    return m ? *m : nullptr;
  }

 private:
  explicit SchedulingSource(const SchedulingNet* n) : src_(n) {}
  explicit SchedulingSource(const Mat* m) : src_(m) {}
  std::variant<const SchedulingNet*, const Mat*> src_;
};

struct Trajectory {
  Mat x;  // (N + 1) x n_x
  Mat p;  // N x n_p
  Mat z;  // N x n_w
  Mat w;  // N x n_w
  Mat y;  // N x n_y
};

/// Rolls the interconnection forward. Each step solves
/// (I - D_zw Delta(p_k)) z_k = C_z x_k + D_zu u_k with a fresh LU factorization.
inline Trajectory simulate(const LfrPlant& plant, const SchedulingSource& sched, const Mat& u, const Mat& d,
                           std::span<const double> x0) {
  plant.validate();
  const std::size_t n = u.rows(), nx = plant.n_x(), nw = plant.n_w(), nu = plant.n_u(), ny = plant.n_y(),
                    np = plant.n_p();
  if (u.cols() != nu) throw DimensionMismatch("simulate: u has wrong channel count");
  if (d.rows() != n && !(d.rows() == 0 && d.cols() == 0)) throw DimensionMismatch("simulate: d length != u length");
  if (x0.size() != nx) throw DimensionMismatch("simulate: x0 has wrong length");
  const SchedulingNet* net = sched.net();
  const Mat* pseq = sched.sequence();
  const std::size_t nd = d.cols();
  if (net) {
    const auto& s = net->shape();
    if (s.n_x != nx || s.n_u != nu || s.n_d != nd || s.n_p != np)
      throw DimensionMismatch("simulate: scheduling net does not match plant/data");
  } else if (pseq->rows() != n || pseq->cols() != np) {
    throw DimensionMismatch("simulate: exogenous p must be N x n_p");
  }

  Trajectory t{Mat(n + 1, nx), Mat(n, np), Mat(n, nw), Mat(n, nw), Mat(n, ny)};
  for (std::size_t i = 0; i < nx; ++i) t.x(0, i) = x0[i];
  std::vector<double> act(net ? net->activation_size() : 0), delta(nw), m(nw * nw), r(nw);
  std::vector<int> piv(nw);
  const auto owner = plant.delta.owner();
  for (std::size_t k = 0; k < n; ++k) {
    const double* xk = &t.x(k, 0);
    const double* uk = nu ? u.data() + k * nu : nullptr;
    double* pk = np ? &t.p(k, 0) : nullptr;
    if (net)
      net->forward(xk, uk, nd ? d.data() + k * nd : nullptr, pk, act.data());
    else
      for (std::size_t i = 0; i < np; ++i) pk[i] = (*pseq)(k, i);
    for (std::size_t j = 0; j < nw; ++j) delta[j] = pk[owner[j]];
    for (std::size_t i = 0; i < nw; ++i) {
      for (std::size_t j = 0; j < nw; ++j) m[i * nw + j] = (i == j ? 1.0 : 0.0) - plant.d_zw(i, j) * delta[j];
      double s = 0.0;
      for (std::size_t j = 0; j < nx; ++j) s += plant.c_z(i, j) * xk[j];
      for (std::size_t j = 0; j < nu; ++j) s += plant.d_zu(i, j) * uk[j];
      r[i] = s;
    }
    if (nw) {
      if (!kernel::lu_factor(m.data(), static_cast<int>(nw), piv.data()))
        throw SingularStep(k, "simulate: I - D_zw Delta(p) singular at step " + std::to_string(k));
      kernel::lu_solve(m.data(), piv.data(), static_cast<int>(nw), r.data());
    }
    for (std::size_t i = 0; i < nw; ++i) {
      t.z(k, i) = r[i];
      t.w(k, i) = delta[i] * r[i];
    }
    for (std::size_t i = 0; i < ny; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < nx; ++j) s += plant.c_y(i, j) * xk[j];
      for (std::size_t j = 0; j < nw; ++j) s += plant.d_yw(i, j) * t.w(k, j);
      for (std::size_t j = 0; j < nu; ++j) s += plant.d_yu(i, j) * uk[j];
      t.y(k, i) = s;
    }
    for (std::size_t i = 0; i < nx; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < nx; ++j) s += plant.a_x(i, j) * xk[j];
      for (std::size_t j = 0; j < nw; ++j) s += plant.b_w(i, j) * t.w(k, j);
      for (std::size_t j = 0; j < nu; ++j) s += plant.b_u(i, j) * uk[j];
      t.x(k + 1, i) = s;
    }
  }
  return t;
}

struct FrozenSs {
  Mat a, b, c, d;
};

/// (A(p), B(p), C(p), D(p)) after eliminating z and w at a fixed p.
inline FrozenSs eliminate_to_ss(const LfrPlant& plant, std::span<const double> p) {
  const std::size_t nw = plant.n_w();
  if (nw == 0) return {plant.a_x, plant.b_u, plant.c_y, plant.d_yu};
  const Mat dlt = delta_of_p(plant.delta, p);
  Mat phi_cz, phi_dzu;
  try {
    const auto f = lu_factor(Mat::identity(nw) - plant.d_zw * dlt);
    phi_cz = dlt * lu_solve(f, plant.c_z);
    phi_dzu = dlt * lu_solve(f, plant.d_zu);
  } catch (const SingularMatrix&) {
    throw SingularPoint("eliminate_to_ss: I - D_zw Delta(p) is singular");
  }
  return {plant.a_x + plant.b_w * phi_cz, plant.b_u + plant.b_w * phi_dzu, plant.c_y + plant.d_yw * phi_cz,
          plant.d_yu + plant.d_yw * phi_dzu};
}

/// Affine LPV-SS model: A(p) = A0 + sum_i p_i A_i, and likewise B, C, D.
struct AffineSsModel {
  Mat a0, b0, c0, d0;
  std::vector<Mat> a, b, c, d;

  std::size_t n_x() const noexcept { return a0.rows(); }
  std::size_t n_u() const noexcept { return b0.cols(); }
  std::size_t n_y() const noexcept { return c0.rows(); }
  std::size_t n_p() const noexcept { return a.size(); }

  void validate() const {
    const std::size_t nx = n_x(), nu = n_u(), ny = n_y();
    auto chk = [](const Mat& m, std::size_t r, std::size_t c) {
      if (m.rows() != r || m.cols() != c) throw DimensionMismatch("AffineSsModel: block shape mismatch");
    };
    chk(a0, nx, nx);
    chk(b0, nx, nu);
    chk(c0, ny, nx);
    chk(d0, ny, nu);
    if (b.size() != a.size() || c.size() != a.size() || d.size() != a.size())
      throw DimensionMismatch("AffineSsModel: increment counts differ");
    for (std::size_t i = 0; i < a.size(); ++i) {
      chk(a[i], nx, nx);
      chk(b[i], nx, nu);
      chk(c[i], ny, nx);
      chk(d[i], ny, nu);
    }
  }

  FrozenSs evaluate(std::span<const double> p) const {
    if (p.size() != n_p()) throw DimensionMismatch("AffineSsModel: p has wrong length");
    FrozenSs out{a0, b0, c0, d0};
    for (std::size_t i = 0; i < p.size(); ++i) {
      out.a += a[i] * p[i];
      out.b += b[i] * p[i];
      out.c += c[i] * p[i];
      out.d += d[i] * p[i];
    }
    return out;
  }
};

struct AffineRealization {
  LfrPlant plant;
  std::vector<std::size_t> kept;  // original scheduling index of each remaining p
  std::vector<std::string> warnings;
};

/// LFR with D_zw = 0 from an affine model: each [A_i B_i; C_i D_i] is split as
/// L_i R_i by a truncated SVD (balanced sqrt(sigma) on both sides); eta_i is
/// the numerical rank. Singular values below rel_rank_tol * sigma_max(i) are
/// dropped; rank-0 increments remove their scheduling variable.
inline AffineRealization affine_ss_to_lfr(const AffineSsModel& m, double rel_rank_tol = 1e-9) {
  m.validate();
  const std::size_t nx = m.n_x(), nu = m.n_u(), ny = m.n_y();
  struct Piece {
    Mat left, right;
  };
  std::vector<Piece> pieces;
  AffineRealization out;
  std::vector<std::size_t> eta;
  for (std::size_t i = 0; i < m.n_p(); ++i) {
    Mat g(nx + ny, nx + nu);
    g.set_block(0, 0, m.a[i]);
    g.set_block(0, nx, m.b[i]);
    g.set_block(nx, 0, m.c[i]);
    g.set_block(nx, nx, m.d[i]);
    const Svd s = g.empty() ? Svd{} : svd(g);
    std::size_t rank = 0;
    const double smax = s.s.empty() ? 0.0 : s.s.front();
    while (rank < s.s.size() && smax > 0.0 && s.s[rank] > rel_rank_tol * smax) ++rank;
    if (rank == 0) {
      out.warnings.push_back("scheduling variable " + std::to_string(i) + " has a zero increment; dropped");
      continue;
    }
    Piece pc{Mat(nx + ny, rank), Mat(rank, nx + nu)};
    for (std::size_t k = 0; k < rank; ++k) {
      const double r = std::sqrt(s.s[k]);
      for (std::size_t a = 0; a < nx + ny; ++a) pc.left(a, k) = s.u(a, k) * r;
      for (std::size_t b = 0; b < nx + nu; ++b) pc.right(k, b) = s.v(b, k) * r;
    }
    pieces.push_back(std::move(pc));
    eta.push_back(rank);
    out.kept.push_back(i);
  }
  LfrPlant pl = LfrPlant::zeros(nx, nu, ny, DeltaStructure(eta));
  pl.a_x = m.a0;
  pl.b_u = m.b0;
  pl.c_y = m.c0;
  pl.d_yu = m.d0;
  std::size_t off = 0;
  for (const auto& pc : pieces) {
    const std::size_t r = pc.right.rows();
    pl.b_w.set_block(0, off, pc.left.block(0, 0, nx, r));
    pl.d_yw.set_block(0, off, pc.left.block(nx, 0, ny, r));
    pl.c_z.set_block(off, 0, pc.right.block(0, 0, r, nx));
    pl.d_zu.set_block(off, 0, pc.right.block(0, nx, r, nu));
    off += r;
  }
  out.plant = std::move(pl);
  return out;
}

struct NormalizedPlant {
  LfrPlant plant;
  std::vector<double> center;  // p = center + scale .* p_bar
  std::vector<double> scale;
};

/// Equivalent LFR whose scheduling lives in [-1, 1]^n_p. The constant part
/// Delta(c) is closed into the plant and the half-widths are absorbed into
/// the z rows.
inline NormalizedPlant normalize_scheduling(const LfrPlant& plant, const SchedulingBox& box) {
  plant.validate();
  if (box.n_p() != plant.n_p()) throw DimensionMismatch("normalize_scheduling: box dimension != n_p");
  const std::size_t np = box.n_p(), nw = plant.n_w();
  NormalizedPlant out{plant, std::vector<double>(np), std::vector<double>(np)};
  for (std::size_t i = 0; i < np; ++i) {
    out.center[i] = 0.5 * (box.p_min[i] + box.p_max[i]);
    out.scale[i] = 0.5 * (box.p_max[i] - box.p_min[i]);
  }
  if (nw == 0) return out;
  const Mat dc = delta_of_p(plant.delta, out.center);
  const Mat s_eta = delta_of_p(plant.delta, out.scale);
  LuFactorization f;
  try {
    f = lu_factor(Mat::identity(nw) - plant.d_zw * dc);
  } catch (const SingularMatrix&) {
    throw SingularPoint("normalize_scheduling: I - D_zw Delta(center) is singular");
  }
  const Mat phi_cz = lu_solve(f, plant.c_z);
  const Mat phi_dzw = lu_solve(f, plant.d_zw);
  const Mat phi_dzu = lu_solve(f, plant.d_zu);
  LfrPlant& q = out.plant;
  q.c_z = s_eta * phi_cz;
  q.d_zw = s_eta * phi_dzw;
  q.d_zu = s_eta * phi_dzu;
  const Mat bw_dc = plant.b_w * dc;
  const Mat dyw_dc = plant.d_yw * dc;
  q.a_x = plant.a_x + bw_dc * phi_cz;
  q.b_w = plant.b_w + bw_dc * phi_dzw;
  q.b_u = plant.b_u + bw_dc * phi_dzu;
  q.c_y = plant.c_y + dyw_dc * phi_cz;
  q.d_yw = plant.d_yw + dyw_dc * phi_dzw;
  q.d_yu = plant.d_yu + dyw_dc * phi_dzu;
  return out;
}

}  // namespace lpvlfr
