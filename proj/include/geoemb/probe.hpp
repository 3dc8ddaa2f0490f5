#pragma once

// Bias-free linear classifier pieces shared by the refiner and the evaluator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "geoemb/error.hpp"
#include "geoemb/linalg.hpp"
#include "geoemb/rng.hpp"

namespace geoemb {

/// C×F weight matrix of a linear classifier. There is deliberately no bias
/// vector: logits = features · wᵀ.
struct ProbeWeights {
  linalg::Mat w;

  [[nodiscard]] std::size_t n_classes() const { return w.rows(); }
  [[nodiscard]] std::size_t n_features() const { return w.cols(); }
};

inline constexpr double kDefaultInitScale = 0.01;

/// Entries i.i.d. uniform in [-scale, scale), filled row-major from `seed`.
inline linalg::Mat small_uniform(std::size_t rows, std::size_t cols, std::uint64_t seed,
                                 double scale = kDefaultInitScale) {
  Rng rng(seed);
  linalg::Mat m(rows, cols);
  for (double& v : m.data()) v = rng.uniform(-scale, scale);
  return m;
}

inline int count_classes(std::span<const int> labels) {
  int c = 0;
  for (int l : labels) {
    if (l < 0) detail::fail("label_out_of_range", "labels must be non-negative");
    c = std::max(c, l + 1);
  }
  return c;
}

struct SoftmaxXent {
  double loss = 0.0;     // mean cross-entropy
  linalg::Mat dlogits;   // (softmax - onehot) / N
};

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
inline SoftmaxXent softmax_cross_entropy(const linalg::Mat& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows();
  const std::size_t c = logits.cols();
  if (labels.size() != n) detail::fail("label_mismatch", "labels length differs from sample count");
  SoftmaxXent out{0.0, linalg::Mat(n, c)};
  if (n == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      detail::fail("label_out_of_range", "label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    auto z = logits.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double log_sum = mx + std::log(sum);
    out.loss += log_sum - z[static_cast<std::size_t>(y)];
    auto g = out.dlogits.row(i);
    for (std::size_t k = 0; k < c; ++k) g[k] = std::exp(z[k] - log_sum) * inv_n;
    g[static_cast<std::size_t>(y)] -= inv_n;
  }
  out.loss *= inv_n;
  return out;
}

/// Row-wise argmax; ties go to the lowest class index.
inline std::vector<int> argmax_rows(const linalg::Mat& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    out[i] = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

}  // namespace geoemb
