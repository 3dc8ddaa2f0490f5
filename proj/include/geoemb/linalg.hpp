#pragma once

// Small dense linear-algebra kernel in 64-bit arithmetic. Everything here is
// single-threaded with a fixed loop order, so results are bit-reproducible.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "geoemb/error.hpp"

namespace geoemb::linalg {

/// Row-major dense matrix of doubles.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  [[nodiscard]] Mat transposed() const {
    Mat t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  bool operator==(const Mat&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// a * b
inline Mat matmul(const Mat& a, const Mat& b) {
  assert(a.cols() == b.rows());
  Mat c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ci = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto bk = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

/// a * bᵀ
inline Mat matmul_bt(const Mat& a, const Mat& b) {
  assert(a.cols() == b.cols());
  Mat c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto bj = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += ai[k] * bj[k];
      c(i, j) = s;
    }
  }
  return c;
}

/// aᵀ * b
inline Mat matmul_at(const Mat& a, const Mat& b) {
  assert(a.rows() == b.rows());
  Mat c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto ak = a.row(k);
    auto bk = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      auto ci = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

inline double frobenius_sq(const Mat& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

/// Thin Householder QR of an m×n matrix with m >= n. Returns Q (m×n, orthonormal
/// columns) and R (n×n, upper triangular).
inline std::pair<Mat, Mat> householder_qr(const Mat& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  assert(m >= n);
  Mat r = a;
  std::vector<std::vector<double>> reflectors(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> v(m - k);
    double norm = 0.0;
    for (std::size_t i = k; i < m; ++i) {
      v[i - k] = r(i, k);
      norm += v[i - k] * v[i - k];
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;  // empty reflector = identity
    const double alpha = v[0] >= 0.0 ? -norm : norm;
    v[0] -= alpha;
    double vnorm = 0.0;
    for (double x : v) vnorm += x * x;
    if (vnorm == 0.0) continue;
    const double inv = 1.0 / std::sqrt(vnorm);
    for (double& x : v) x *= inv;
    for (std::size_t j = k; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < m; ++i) dot += v[i - k] * r(i, j);
      dot *= 2.0;
      for (std::size_t i = k; i < m; ++i) r(i, j) -= dot * v[i - k];
    }
    reflectors[k] = std::move(v);
  }
  // Accumulate Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
  Mat q(m, n);
  for (std::size_t i = 0; i < n; ++i) q(i, i) = 1.0;
  for (std::size_t kk = n; kk-- > 0;) {
    const auto& v = reflectors[kk];
    if (v.empty()) continue;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = kk; i < m; ++i) dot += v[i - kk] * q(i, j);
      dot *= 2.0;
      for (std::size_t i = kk; i < m; ++i) q(i, j) -= dot * v[i - kk];
    }
  }
  Mat rr(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) rr(i, j) = r(i, j);
  return {std::move(q), std::move(rr)};
}

struct RightSvd {
  std::vector<double> singular_values;  // non-increasing
  Mat vt;                               // rows = right singular vectors
};

namespace detail {

// One-sided (Hestenes) Jacobi on a square matrix A. On return A·V has
// mutually orthogonal columns; their norms are the singular values and V is
// orthogonal regardless of rank.
inline void one_sided_jacobi(Mat& a, Mat& v) {
  const std::size_t n = a.cols();
  const std::size_t m = a.rows();
  v = Mat::identity(n);
  // Work on columns stored as rows for cache-friendly access.
  Mat at = a.transposed();
  Mat vt = v;  // rows of vt are columns of v
  const double tol = std::max(1e-15, static_cast<double>(m) * std::numeric_limits<double>::epsilon());
  constexpr int kMaxSweeps = 80;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto ap = at.row(p);
        auto aq = at.row(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += ap[i] * ap[i];
          beta += aq[i] * aq[i];
          gamma += ap[i] * aq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = ap[i];
          const double y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
        auto vp = vt.row(p);
        auto vq = vt.row(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i];
          const double y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }
  a = at.transposed();
  v = vt.transposed();
}

}  // namespace detail

/// Exact right-singular decomposition of an arbitrary m×n matrix via QR
/// preconditioning and one-sided Jacobi on the min(m,n)-square factor.
/// Returns min(m,n) singular values and their right singular vectors (as rows
/// of vt, each of length n). Ordering: descending σ, ties by original index.
inline RightSvd right_svd(const Mat& x) {
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  const std::size_t r = std::min(m, n);
  RightSvd out;
  if (r == 0) return out;

  Mat square;
  Mat basis;  // n×r: maps square-factor right vectors back to R^n (empty = identity)
  if (m >= n) {
    auto [q, rr] = householder_qr(x);
    square = std::move(rr);  // X = Q R, right vectors of X = right vectors of R
  } else {
    auto [q, rr] = householder_qr(x.transposed());  // Xᵀ = Q R  =>  X = Rᵀ Qᵀ
    square = rr.transposed();
    basis = std::move(q);
  }

  Mat v;
  detail::one_sided_jacobi(square, v);

  std::vector<double> sigma(r);
  for (std::size_t j = 0; j < r; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < r; ++i) s += square(i, j) * square(i, j);
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  Mat right = basis.size() ? matmul(basis, v) : v;  // n×r
  out.singular_values.resize(r);
  out.vt = Mat(r, n);
  for (std::size_t k = 0; k < r; ++k) {
    out.singular_values[k] = sigma[order[k]];
    for (std::size_t i = 0; i < n; ++i) out.vt(k, i) = right(i, order[k]);
  }
  return out;
}

/// Singular values only, descending.
inline std::vector<double> singular_values(const Mat& x) { return right_svd(x).singular_values; }

/// Solves the symmetric positive-definite system A x = b by Cholesky.
/// Throws "singular_system" if A is not numerically positive definite.
inline std::vector<double> cholesky_solve(Mat a, std::vector<double> b) {
  const std::size_t n = a.rows();
  assert(a.cols() == n && b.size() == n);
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i)));
  const double floor = std::max(max_diag, 1.0) * 1e-13;
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > floor)) geoemb::detail::fail("singular_system", "normal equations are singular; use ridge > 0");
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / ljj;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= a(i, k) * b[k];
    b[i] = s / a(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a(k, i) * b[k];
    b[i] = s / a(i, i);
  }
  return b;
}

}  // namespace geoemb::linalg
