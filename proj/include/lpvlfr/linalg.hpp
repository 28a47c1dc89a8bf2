#pragma once

// Dense real-matrix kernels: LU solve, determinant, matrix exponential and
// its Frechet derivative, SVD, and a spectral-radius estimator.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lpvlfr {

struct DimensionMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NonFiniteEntry : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct SingularMatrix : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct Overflow : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dense row-major real matrix.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  /// Takes ownership of row-major entries; rejects wrong length or NaN/Inf.
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw DimensionMismatch("Mat: entry count " + std::to_string(data_.size()) +
                              " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    for (double v : data_)
      if (!std::isfinite(v)) throw NonFiniteEntry("Mat: non-finite entry");
  }

  Mat(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionMismatch("Mat: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
    for (double v : data_)
      if (!std::isfinite(v)) throw NonFiniteEntry("Mat: non-finite entry");
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Mat diag(std::span<const double> d) {
    Mat m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }
  static Mat column(std::span<const double> v) { return Mat(v.size(), 1, std::vector<double>(v.begin(), v.end())); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  Mat transpose() const {
    Mat t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  /// Copy of the block starting at (r0, c0).
  Mat block(std::size_t r0, std::size_t c0, std::size_t nr, std::size_t nc) const {
    if (r0 + nr > rows_ || c0 + nc > cols_) throw DimensionMismatch("Mat::block out of range");
    Mat b(nr, nc);
    for (std::size_t i = 0; i < nr; ++i)
      for (std::size_t j = 0; j < nc; ++j) b(i, j) = (*this)(r0 + i, c0 + j);
    return b;
  }
  void set_block(std::size_t r0, std::size_t c0, const Mat& b) {
    if (r0 + b.rows() > rows_ || c0 + b.cols() > cols_) throw DimensionMismatch("Mat::set_block out of range");
    for (std::size_t i = 0; i < b.rows(); ++i)
      for (std::size_t j = 0; j < b.cols(); ++j) (*this)(r0 + i, c0 + j) = b(i, j);
  }

  double norm1() const noexcept {
    double best = 0.0;
    for (std::size_t j = 0; j < cols_; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < rows_; ++i) s += std::abs((*this)(i, j));
      best = std::max(best, s);
    }
    return best;
  }
  double norm_fro() const noexcept {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }
  double max_abs() const noexcept {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }
  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Mat& operator+=(const Mat& o) {
    check_same(o, "+=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
    return *this;
  }
  Mat& operator-=(const Mat& o) {
    check_same(o, "-=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= o.data_[k];
    return *this;
  }
  Mat& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Mat operator+(Mat a, const Mat& b) { return a += b; }
  friend Mat operator-(Mat a, const Mat& b) { return a -= b; }
  friend Mat operator-(Mat a) { return a *= -1.0; }
  friend Mat operator*(Mat a, double s) { return a *= s; }
  friend Mat operator*(double s, Mat a) { return a *= s; }
  friend Mat operator*(const Mat& a, const Mat& b) {
    if (a.cols_ != b.rows_)
      throw DimensionMismatch("Mat*: " + std::to_string(a.rows_) + "x" + std::to_string(a.cols_) + " * " +
                              std::to_string(b.rows_) + "x" + std::to_string(b.cols_));
    Mat c(a.rows_, b.cols_);
    for (std::size_t i = 0; i < a.rows_; ++i)
      for (std::size_t k = 0; k < a.cols_; ++k) {
        const double aik = a(i, k);
        if (aik == 0.0) continue;
        for (std::size_t j = 0; j < b.cols_; ++j) c(i, j) += aik * b(k, j);
      }
    return c;
  }
  friend bool operator==(const Mat& a, const Mat& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  void check_same(const Mat& o, const char* op) const {
    if (rows_ != o.rows_ || cols_ != o.cols_) throw DimensionMismatch(std::string("Mat") + op + ": shape mismatch");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Matrix-vector product y = A x.
inline std::vector<double> matvec(const Mat& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw DimensionMismatch("matvec: shape mismatch");
  std::vector<double> y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

/// Largest entrywise |a - b|.
inline double max_abs_diff(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionMismatch("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
  return m;
}

// Raw in-place kernels over row-major n x n storage. Used directly by the
// training rollout, which cannot afford per-step allocations.
namespace kernel {

inline constexpr double kPivotRelTol = 1e-12;

/// LU with partial pivoting, in place. Returns false when a pivot falls
/// below kPivotRelTol * max|A|.
inline bool lu_factor(double* a, int n, int* piv, int* sign = nullptr) noexcept {
  double amax = 0.0;
  for (int k = 0; k < n * n; ++k) amax = std::max(amax, std::abs(a[k]));
  const double tol = kPivotRelTol * amax;
  int s = 1;
  for (int k = 0; k < n; ++k) {
    int p = k;
    double best = std::abs(a[k * n + k]);
    for (int i = k + 1; i < n; ++i) {
      const double v = std::abs(a[i * n + k]);
      if (v > best) {
        best = v;
        p = i;
      }
    }
    piv[k] = p;
    if (!(best > tol)) return false;
    if (p != k) {
      s = -s;
      for (int j = 0; j < n; ++j) std::swap(a[k * n + j], a[p * n + j]);
    }
    const double inv = 1.0 / a[k * n + k];
    for (int i = k + 1; i < n; ++i) {
      double& lik = a[i * n + k];
      lik *= inv;
      if (lik == 0.0) continue;
      for (int j = k + 1; j < n; ++j) a[i * n + j] -= lik * a[k * n + j];
    }
  }
  if (sign) *sign = s;
  return true;
}

/// Solves A x = b for one right-hand side given lu_factor output.
inline void lu_solve(const double* lu, const int* piv, int n, double* b) noexcept {
  for (int k = 0; k < n; ++k)
    if (piv[k] != k) std::swap(b[k], b[piv[k]]);
  for (int i = 1; i < n; ++i) {
    double s = b[i];
    for (int j = 0; j < i; ++j) s -= lu[i * n + j] * b[j];
    b[i] = s;
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = b[i];
    for (int j = i + 1; j < n; ++j) s -= lu[i * n + j] * b[j];
    b[i] = s / lu[i * n + i];
  }
}

/// Solves A^T x = b given lu_factor output for A (P A = L U).
inline void lu_solve_transposed(const double* lu, const int* piv, int n, double* b) noexcept {
  // A^T = U^T L^T P, so solve U^T y = b, L^T v = y, x = P^T v.
  for (int i = 0; i < n; ++i) {
    double s = b[i];
    for (int j = 0; j < i; ++j) s -= lu[j * n + i] * b[j];
    b[i] = s / lu[i * n + i];
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = b[i];
    for (int j = i + 1; j < n; ++j) s -= lu[j * n + i] * b[j];
    b[i] = s;
  }
  for (int k = n - 1; k >= 0; --k)
    if (piv[k] != k) std::swap(b[k], b[piv[k]]);
}

}  // namespace kernel

struct LuFactorization {
  Mat lu;
  std::vector<int> piv;
  int sign = 1;
};

/// Throws SingularMatrix when a pivot is below 1e-12 * max|A|.
inline LuFactorization lu_factor(const Mat& a) {
  if (!a.is_square()) throw DimensionMismatch("lu_factor: matrix not square");
  LuFactorization f{a, std::vector<int>(a.rows()), 1};
  if (!kernel::lu_factor(f.lu.data(), static_cast<int>(a.rows()), f.piv.data(), &f.sign))
    throw SingularMatrix("lu_factor: pivot below tolerance");
  return f;
}

inline Mat lu_solve(const LuFactorization& f, const Mat& b) {
  const std::size_t n = f.lu.rows();
  if (b.rows() != n) throw DimensionMismatch("lu_solve: row count mismatch");
  Mat x(n, b.cols());
  std::vector<double> col(n);
  for (std::size_t j = 0; j < b.cols(); ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = b(i, j);
    kernel::lu_solve(f.lu.data(), f.piv.data(), static_cast<int>(n), col.data());
    for (std::size_t i = 0; i < n; ++i) x(i, j) = col[i];
  }
  return x;
}

/// X with A X = B (partial pivoting).
inline Mat lu_solve(const Mat& a, const Mat& b) {
  if (!a.is_square()) throw DimensionMismatch("lu_solve: matrix not square");
  if (b.rows() != a.rows()) throw DimensionMismatch("lu_solve: row count mismatch");
  return lu_solve(lu_factor(a), b);
}

inline Mat inverse(const Mat& a) { return lu_solve(a, Mat::identity(a.rows())); }

/// Determinant from the LU pivots. Exactly singular input gives 0.
inline double det(const Mat& a) {
  if (!a.is_square()) throw DimensionMismatch("det: matrix not square");
  const int n = static_cast<int>(a.rows());
  if (n == 0) return 1.0;
  Mat lu = a;
  double* m = lu.data();
  double d = 1.0;
  for (int k = 0; k < n; ++k) {
    int p = k;
    for (int i = k + 1; i < n; ++i)
      if (std::abs(m[i * n + k]) > std::abs(m[p * n + k])) p = i;
    if (m[p * n + k] == 0.0) return 0.0;
    if (p != k) {
      d = -d;
      for (int j = 0; j < n; ++j) std::swap(m[k * n + j], m[p * n + j]);
    }
    d *= m[k * n + k];
    for (int i = k + 1; i < n; ++i) {
      const double l = m[i * n + k] / m[k * n + k];
      for (int j = k + 1; j < n; ++j) m[i * n + j] -= l * m[k * n + j];
    }
  }
  return d;
}

namespace detail {

// Order-13 Pade coefficients (Higham 2005).
inline constexpr double kPade13[14] = {64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
                                       1187353796428800.0,  129060195264000.0,   10559470521600.0,
                                       670442572800.0,      33522128640.0,       1323241920.0,
                                       40840800.0,          960960.0,            16380.0,
                                       182.0,               1.0};
inline constexpr double kPade13Theta = 5.4;

inline Mat axpby(double a, const Mat& x, double b, const Mat& y) {
  Mat r = x;
  r *= a;
  for (std::size_t k = 0; k < r.size(); ++k) r.data()[k] += b * y.data()[k];
  return r;
}

}  // namespace detail

/// e^A by scaling and squaring with a fixed order-13 Pade approximant,
/// scaled so that ||A / 2^s||_1 <= 5.4.
inline Mat expm(const Mat& a) {
  if (!a.is_square()) throw DimensionMismatch("expm: matrix not square");
  const std::size_t n = a.rows();
  if (n == 0) return Mat();
  const double nrm = a.norm1();
  if (!std::isfinite(nrm)) throw Overflow("expm: non-finite input norm");
  int s = 0;
  if (nrm > detail::kPade13Theta) s = static_cast<int>(std::ceil(std::log2(nrm / detail::kPade13Theta)));
  if (s > 1000) throw Overflow("expm: norm too large");
  Mat as = a;
  as *= std::ldexp(1.0, -s);

  const auto& b = detail::kPade13;
  const Mat id = Mat::identity(n);
  const Mat a2 = as * as;
  const Mat a4 = a2 * a2;
  const Mat a6 = a4 * a2;

  Mat inner_u = a6 * b[13];
  inner_u += a4 * b[11];
  inner_u += a2 * b[9];
  Mat u_poly = a6 * inner_u;
  u_poly += a6 * b[7];
  u_poly += a4 * b[5];
  u_poly += a2 * b[3];
  u_poly += id * b[1];
  const Mat u = as * u_poly;

  Mat inner_v = a6 * b[12];
  inner_v += a4 * b[10];
  inner_v += a2 * b[8];
  Mat v = a6 * inner_v;
  v += a6 * b[6];
  v += a4 * b[4];
  v += a2 * b[2];
  v += id * b[0];

  Mat r = lu_solve(v - u, v + u);
  for (int k = 0; k < s; ++k) {
    r = r * r;
    if (!r.all_finite()) throw Overflow("expm: overflow while squaring");
  }
  if (!r.all_finite()) throw Overflow("expm: non-finite result");
  return r;
}

struct ExpmFrechet {
  Mat exp;   // e^A
  Mat frechet;  // L(A, E)
};

/// e^A together with the Frechet derivative L(A, E), read off the blocks of
/// expm([[A, E], [0, A]]). The adjoint satisfies L(A, .)^T = L(A^T, .).
inline ExpmFrechet expm_frechet(const Mat& a, const Mat& e) {
  if (!a.is_square() || !e.is_square() || a.rows() != e.rows())
    throw DimensionMismatch("expm_frechet: A and E must be square and equal size");
  const std::size_t n = a.rows();
  const double enorm = e.norm1();
  if (enorm == 0.0) return {expm(a), Mat(n, n)};
  // L is linear in E; rescale E so it does not drive the scaling exponent.
  const double scale = std::max(a.norm1(), 1.0) / enorm;
  Mat big(2 * n, 2 * n);
  big.set_block(0, 0, a);
  big.set_block(n, n, a);
  big.set_block(0, n, e * scale);
  const Mat eb = expm(big);
  Mat l = eb.block(0, n, n, n);
  l *= 1.0 / scale;
  return {eb.block(0, 0, n, n), std::move(l)};
}

struct Svd {
  Mat u;                  // m x k
  std::vector<double> s;  // k, descending
  Mat v;                  // n x k
};

/// Thin SVD by one-sided Jacobi rotations; k = min(m, n).
inline Svd svd(const Mat& a) {
  const std::size_t m = a.rows(), n = a.cols();
  if (m < n) {
    Svd t = svd(a.transpose());
    return {std::move(t.v), std::move(t.s), std::move(t.u)};
  }
  Mat w = a;  // columns are rotated until mutually orthogonal
  Mat v = Mat::identity(n);
  for (int sweep = 0; sweep < 80; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += w(i, p) * w(i, p);
          beta += w(i, q) * w(i, q);
          gamma += w(i, p) * w(i, q);
        }
        if (gamma == 0.0) continue;
        const double denom = std::sqrt(alpha * beta);
        if (denom == 0.0) continue;
        off = std::max(off, std::abs(gamma) / denom);
        if (std::abs(gamma) <= 1e-15 * denom) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = w(i, p), wq = w(i, q);
          w(i, p) = c * wp - sn * wq;
          w(i, q) = sn * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - sn * vq;
          v(i, q) = sn * vp + c * vq;
        }
      }
    if (off <= 1e-15) break;
  }
  std::vector<double> s(n);
  for (std::size_t j = 0; j < n; ++j) {
    double c = 0.0;
    for (std::size_t i = 0; i < m; ++i) c += w(i, j) * w(i, j);
    s[j] = std::sqrt(c);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return s[i] > s[j]; });
  Svd out{Mat(m, n), std::vector<double>(n), Mat(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.s[k] = s[j];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = v(i, j);
    if (s[j] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = w(i, j) / s[j];
    } else {
      // Zero singular value: left vector is arbitrary; leave zero column.
    }
  }
  return out;
}

inline double spectral_norm(const Mat& a) {
  if (a.empty()) return 0.0;
  return svd(a).s.front();
}

struct SpectralRadiusEstimate {
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
};

/// rho(A) from the limit ||A^(2^k)||_2^(1/2^k), with the powers renormalized
/// at every squaring. Stops when successive estimates agree to 1e-8
/// (relative) or after k = 60 squarings; the latter is reported as not
/// converged with the last estimate.
inline SpectralRadiusEstimate spectral_radius_estimate(const Mat& a) {
  if (!a.is_square()) throw DimensionMismatch("spectral_radius: matrix not square");
  SpectralRadiusEstimate out;
  if (a.empty()) {
    out.converged = true;
    return out;
  }
  double nrm = spectral_norm(a);
  if (nrm == 0.0) {
    out.converged = true;
    return out;
  }
  // Invariant: A^(2^k) = exp(log_scale) * b with ||b||_2 = 1.
  Mat b = a;
  b *= 1.0 / nrm;
  double log_scale = std::log(nrm);
  double prev = nrm;
  for (int k = 1; k <= 60; ++k) {
    b = b * b;
    log_scale *= 2.0;
    const double bn = spectral_norm(b);
    out.iterations = k;
    if (bn == 0.0) {
      out.value = 0.0;
      out.converged = true;
      return out;
    }
    b *= 1.0 / bn;
    log_scale += std::log(bn);
    const double est = std::exp(std::ldexp(log_scale, -k));
    out.value = est;
    if (std::abs(est - prev) <= 1e-8 * std::max(est, prev)) {
      out.converged = true;
      return out;
    }
    prev = est;
  }
  return out;
}

inline double spectral_radius(const Mat& a) { return spectral_radius_estimate(a).value; }

}  // namespace lpvlfr
