#pragma once

// Truncated SVD compression.
//
// NOTE: the input is NOT mean-centred before factorisation. This follows the
// usual TruncatedSVD convention (factor X itself, not X - mean), which is what
// distinguishes it from PCA. Callers that want PCA behaviour must centre first.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "geoemb/embedding_store.hpp"
#include "geoemb/error.hpp"
#include "geoemb/linalg.hpp"
#include "geoemb/rng.hpp"

namespace geoemb {

struct SvdModel {
  std::vector<float> components;       // k×D row-major, rows orthonormal
  std::vector<float> singular_values;  // length k, non-increasing, >= 0
  std::size_t input_dim = 0;           // D
  std::size_t target_dim = 0;          // k
  std::uint64_t seed = 0;

  [[nodiscard]] std::span<const float> component(std::size_t i) const {
    return {components.data() + i * input_dim, input_dim};
  }

  bool operator==(const SvdModel&) const = default;
};

struct SvdOptions {
  /// Exact dense SVD whenever min(n, D) is at most this.
  std::size_t dense_threshold = 256;
  std::size_t oversampling = 10;
  std::size_t power_iterations = 2;
};

namespace detail {

inline linalg::Mat to_mat(const EmbeddingMatrix& x) {
  linalg::Mat m(x.n_rows(), x.n_cols());
  auto src = x.data();
  std::copy(src.begin(), src.end(), m.data().begin());
  return m;
}

inline EmbeddingMatrix from_mat(const linalg::Mat& m, const EmbeddingMatrix& like) {
  std::vector<float> data(m.size());
  std::transform(m.data().begin(), m.data().end(), data.begin(), [](double v) { return static_cast<float>(v); });
  EmbeddingMatrix out(m.rows(), m.cols(), std::move(data), like.model_id(), like.row_ids());
  out.set_season(like.season());
  return out;
}

// Seeded randomized range finder; returns the right-singular decomposition of
// the projected matrix Qᵀ X (rank <= l).
inline linalg::RightSvd randomized_right_svd(const linalg::Mat& x, std::size_t l, std::size_t power_iters,
                                             std::uint64_t seed) {
  Rng rng(seed);
  linalg::Mat omega(x.cols(), l);
  for (double& v : omega.data()) v = rng.normal();
  auto orthonormal = [](const linalg::Mat& y) { return linalg::householder_qr(y).first; };
  linalg::Mat q = orthonormal(linalg::matmul(x, omega));
  for (std::size_t it = 0; it < power_iters; ++it) {
    linalg::Mat z = orthonormal(linalg::matmul_at(x, q));  // D×l
    q = orthonormal(linalg::matmul(x, z));                 // n×l
  }
  return linalg::right_svd(linalg::matmul_at(q, x));  // B = Qᵀ X, l×D
}

}  // namespace detail

/// Fits the top-k right singular directions of `x` (uncentred).
/// Deterministic for fixed (x, k, seed); component signs are canonical (first
/// nonzero entry of each row positive).
inline SvdModel fit_truncated_svd(const EmbeddingMatrix& x, std::size_t k, std::uint64_t seed,
                                  const SvdOptions& opt = {}) {
  if (x.empty()) detail::fail("empty_input", "cannot fit SVD on an empty matrix");
  const std::size_t r = std::min(x.n_rows(), x.n_cols());
  if (k < 1 || k > r)
    detail::fail("k_out_of_range", "k=" + std::to_string(k) + " must be in [1, " + std::to_string(r) + "]");

  const linalg::Mat m = detail::to_mat(x);
  linalg::RightSvd svd = r <= opt.dense_threshold
                             ? linalg::right_svd(m)
                             : detail::randomized_right_svd(m, std::min(k + opt.oversampling, r),
                                                            opt.power_iterations, seed);

  SvdModel model;
  model.input_dim = x.n_cols();
  model.target_dim = k;
  model.seed = seed;
  model.components.resize(k * model.input_dim);
  model.singular_values.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    float* row = model.components.data() + i * model.input_dim;
    for (std::size_t j = 0; j < model.input_dim; ++j) row[j] = static_cast<float>(svd.vt(i, j));
    auto first = std::find_if(row, row + model.input_dim, [](float v) { return v != 0.0f; });
    if (first != row + model.input_dim && *first < 0.0f)
      for (std::size_t j = 0; j < model.input_dim; ++j) row[j] = -row[j];
    model.singular_values[i] = static_cast<float>(svd.singular_values[i]);
  }
  return model;
}

/// x · componentsᵀ  (N×D → N×k)
inline EmbeddingMatrix transform(const SvdModel& model, const EmbeddingMatrix& x) {
  if (x.n_cols() != model.input_dim)
    detail::fail("dimension_mismatch", "input has " + std::to_string(x.n_cols()) + " columns, model expects " +
                                           std::to_string(model.input_dim));
  const std::size_t k = model.target_dim;
  std::vector<float> out(x.n_rows() * k);
  for (std::size_t r = 0; r < x.n_rows(); ++r) {
    auto xr = x.row(r);
    for (std::size_t i = 0; i < k; ++i) {
      auto c = model.component(i);
      double s = 0.0;
      for (std::size_t j = 0; j < model.input_dim; ++j) s += static_cast<double>(xr[j]) * c[j];
      out[r * k + i] = static_cast<float>(s);
    }
  }
  EmbeddingMatrix z(x.n_rows(), k, std::move(out), x.model_id(), x.row_ids());
  z.set_season(x.season());
  return z;
}

/// z · components  (N×k → N×D)
inline EmbeddingMatrix reconstruct(const SvdModel& model, const EmbeddingMatrix& z) {
  if (z.n_cols() != model.target_dim)
    detail::fail("dimension_mismatch", "code has " + std::to_string(z.n_cols()) + " columns, model expects " +
                                           std::to_string(model.target_dim));
  const std::size_t d = model.input_dim;
  std::vector<double> acc(d);
  std::vector<float> out(z.n_rows() * d);
  for (std::size_t r = 0; r < z.n_rows(); ++r) {
    std::fill(acc.begin(), acc.end(), 0.0);
    auto zr = z.row(r);
    for (std::size_t i = 0; i < model.target_dim; ++i) {
      const double zi = zr[i];
      auto c = model.component(i);
      for (std::size_t j = 0; j < d; ++j) acc[j] += zi * c[j];
    }
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<float>(acc[j]);
  }
  EmbeddingMatrix x(z.n_rows(), d, std::move(out), z.model_id(), z.row_ids());
  x.set_season(z.season());
  return x;
}

/// Mean squared elementwise difference, accumulated in double.
inline double reconstruction_mse(const EmbeddingMatrix& x, const EmbeddingMatrix& x_hat) {
  if (x.n_rows() != x_hat.n_rows() || x.n_cols() != x_hat.n_cols())
    detail::fail("shape_mismatch", "reconstruction_mse needs equal shapes");
  if (x.data().empty()) return 0.0;
  double s = 0.0;
  auto a = x.data();
  auto b = x_hat.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

/// Mean per-column (population) variance; the scale used to normalise MSE.
inline double mean_column_variance(const EmbeddingMatrix& x) {
  if (x.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t c = 0; c < x.n_cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < x.n_rows(); ++r) mean += x.at(r, c);
    mean /= static_cast<double>(x.n_rows());
    double var = 0.0;
    for (std::size_t r = 0; r < x.n_rows(); ++r) {
      const double d = x.at(r, c) - mean;
      var += d * d;
    }
    total += var / static_cast<double>(x.n_rows());
  }
  return total / static_cast<double>(x.n_cols());
}

// ---------------------------------------------------------------------------
// Serialisation: EMB1 container, kind "svd1", payload = components then σ.

inline void save_svd_model(const SvdModel& m, const fs::path& path) {
  Json h = {{"kind", "svd1"}, {"k", m.target_dim}, {"D", m.input_dim}, {"seed", m.seed},
            {"dtype", "f32"}, {"order", "row_major"}};
  std::vector<float> payload(m.components);
  payload.insert(payload.end(), m.singular_values.begin(), m.singular_values.end());
  write_container(path, h, payload);
}

inline SvdModel load_svd_model(const fs::path& path) {
  Container c = read_container(path);
  SvdModel m;
  m.target_dim = detail::header_count(c.header, "k");
  m.input_dim = detail::header_count(c.header, "D");
  m.seed = c.header.value("seed", std::uint64_t{0});
  expect_payload(c, "svd1", m.target_dim * m.input_dim + m.target_dim);
  const auto split = c.payload.begin() + static_cast<std::ptrdiff_t>(m.target_dim * m.input_dim);
  m.components.assign(c.payload.begin(), split);
  m.singular_values.assign(split, c.payload.end());
  return m;
}

}  // namespace geoemb
