#pragma once

// Unsupervised refinement of per-season embeddings.
//
//  1. Pseudolabels: agglomerative clustering of the season-concatenated
//     embeddings [spring | summer | fall | winter].
//  2. One square D×D map W, shared by all four seasons: h_s = x_s Wᵀ.
//  3. A bias-free linear classifier P (C × 4D) on [h_1 | h_2 | h_3 | h_4].
//  4. W and P trained jointly by gradient descent on mean softmax
//     cross-entropy + l2/2 (|W|² + |P|²).
//
// Only W is kept; it is then applied to each season independently.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geoemb/cluster_metrics.hpp"
#include "geoemb/embedding_store.hpp"
#include "geoemb/error.hpp"
#include "geoemb/linalg.hpp"
#include "geoemb/probe.hpp"
#include "geoemb/rng.hpp"

namespace geoemb {

inline constexpr std::size_t kSeasonCount = 4;
inline constexpr std::array<std::string_view, kSeasonCount> kSeasonOrder = {"spring", "summer", "fall", "winter"};

struct LinearMap {
  linalg::Mat w;  // D×D
  std::string init_scheme = "identity";

  [[nodiscard]] std::size_t dim() const { return w.rows(); }

  static LinearMap identity(std::size_t d) { return {linalg::Mat::identity(d), "identity"}; }
};

struct RefinerConfig {
  double learning_rate = 1e-2;
  int epochs = 100;
  std::size_t batch_size = 0;  // 0 = full batch
  double l2_penalty = 1e-4;
  double momentum = 0.0;       // heavy-ball; 0.9 is the usual non-zero choice
  std::uint64_t seed = 0;
  int n_pseudo_clusters = 0;   // no default: must be chosen by the caller
  double init_scale = kDefaultInitScale;
  bool freeze_map = false;     // keep W at identity (probe-only training)
};

struct RefinerState {
  LinearMap map;
  ProbeWeights probe;
  std::vector<double> loss_trace;     // mean cross-entropy per epoch
  std::vector<double> holdout_trace;  // same, on held-out rows (optional)
};

struct RefinerGrads {
  double loss = 0.0;           // cross-entropy + penalty
  double cross_entropy = 0.0;
  linalg::Mat grad_map;        // D×D
  linalg::Mat grad_probe;      // C×(S·D)
};

namespace detail {

inline void check_seasons(std::span<const linalg::Mat> seasons, std::size_t d) {
  if (seasons.empty()) fail("season_count", "at least one season is required");
  for (const auto& s : seasons) {
    if (s.cols() != d) fail("dimension_mismatch", "season width differs from map dimension");
    if (s.rows() != seasons[0].rows()) fail("row_count_mismatch", "seasons disagree on n_rows");
  }
}

// [x_1 Wᵀ | ... | x_S Wᵀ]
inline linalg::Mat mapped_concat(const linalg::Mat& w, std::span<const linalg::Mat> seasons) {
  const std::size_t n = seasons[0].rows();
  const std::size_t d = w.rows();
  linalg::Mat h(n, d * seasons.size());
  for (std::size_t s = 0; s < seasons.size(); ++s) {
    const linalg::Mat hs = linalg::matmul_bt(seasons[s], w);
    for (std::size_t i = 0; i < n; ++i)
      std::copy(hs.row(i).begin(), hs.row(i).end(), h.row(i).begin() + static_cast<std::ptrdiff_t>(s * d));
  }
  return h;
}

inline linalg::Mat select_rows(const linalg::Mat& m, std::span<const std::size_t> rows) {
  linalg::Mat out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
  return out;
}

}  // namespace detail

/// logits = [x_s Wᵀ]_s · Pᵀ, no bias anywhere.
inline linalg::Mat forward(const LinearMap& map, const ProbeWeights& probe, std::span<const linalg::Mat> seasons) {
  detail::check_seasons(seasons, map.dim());
  if (probe.n_features() != map.dim() * seasons.size())
    detail::fail("dimension_mismatch", "probe width must equal seasons x map dimension");
  return linalg::matmul_bt(detail::mapped_concat(map.w, seasons), probe.w);
}

/// Loss and exact gradients. The map gradient sums the contributions of every
/// season because W is shared.
inline RefinerGrads loss_and_grads(const LinearMap& map, const ProbeWeights& probe,
                                   std::span<const linalg::Mat> seasons, std::span<const int> labels, double l2) {
  detail::check_seasons(seasons, map.dim());
  if (probe.n_features() != map.dim() * seasons.size())
    detail::fail("dimension_mismatch", "probe width must equal seasons x map dimension");
  const std::size_t d = map.dim();
  const linalg::Mat h = detail::mapped_concat(map.w, seasons);
  const linalg::Mat logits = linalg::matmul_bt(h, probe.w);
  SoftmaxXent sx = softmax_cross_entropy(logits, labels);

  RefinerGrads g;
  g.cross_entropy = sx.loss;
  g.loss = sx.loss + 0.5 * l2 * (linalg::frobenius_sq(map.w) + linalg::frobenius_sq(probe.w));
  g.grad_probe = linalg::matmul_at(sx.dlogits, h);  // C×SD
  const linalg::Mat dh = linalg::matmul(sx.dlogits, probe.w);  // N×SD
  g.grad_map = linalg::Mat(d, d);
  for (std::size_t s = 0; s < seasons.size(); ++s) {
    // dW += dH_sᵀ X_s
    const auto& xs = seasons[s];
    for (std::size_t i = 0; i < xs.rows(); ++i) {
      auto dhi = dh.row(i);
      auto xi = xs.row(i);
      for (std::size_t a = 0; a < d; ++a) {
        const double v = dhi[s * d + a];
        if (v == 0.0) continue;
        auto ga = g.grad_map.row(a);
        for (std::size_t b = 0; b < d; ++b) ga[b] += v * xi[b];
      }
    }
  }
  if (l2 != 0.0) {
    for (std::size_t i = 0; i < g.grad_map.size(); ++i) g.grad_map.data()[i] += l2 * map.w.data()[i];
    for (std::size_t i = 0; i < g.grad_probe.size(); ++i) g.grad_probe.data()[i] += l2 * probe.w.data()[i];
  }
  return g;
}

/// Gradient descent from W = I and a seeded small-uniform probe. Deterministic
/// for a fixed config. `holdout` rows, if given, are only evaluated.
inline RefinerState train_refiner(std::span<const linalg::Mat> seasons, std::span<const int> labels,
                                  const RefinerConfig& cfg, std::span<const linalg::Mat> holdout = {},
                                  std::span<const int> holdout_labels = {}) {
  if (!(cfg.learning_rate > 0.0)) detail::fail("invalid_config", "learning_rate must be > 0");
  if (cfg.epochs < 1) detail::fail("invalid_config", "epochs must be >= 1");
  if (!(cfg.l2_penalty >= 0.0)) detail::fail("invalid_config", "l2_penalty must be >= 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) detail::fail("invalid_config", "momentum must be in [0, 1)");
  if (seasons.empty()) detail::fail("season_count", "at least one season is required");
  const std::size_t d = seasons[0].cols();
  detail::check_seasons(seasons, d);
  const std::size_t n = seasons[0].rows();
  if (labels.size() != n) detail::fail("label_mismatch", "labels length differs from n_rows");
  const int c = count_classes(labels);
  if (c < 2) detail::fail("single_class", "refinement needs at least two pseudolabel classes");

  RefinerState st;
  st.map = LinearMap::identity(d);
  st.probe.w = small_uniform(static_cast<std::size_t>(c), d * seasons.size(), cfg.seed, cfg.init_scale);

  linalg::Mat vel_map(d, d), vel_probe(st.probe.w.rows(), st.probe.w.cols());
  auto step = [&](const RefinerGrads& g) {
    auto update = [&](linalg::Mat& param, linalg::Mat& vel, const linalg::Mat& grad) {
      for (std::size_t i = 0; i < param.size(); ++i) {
        double& v = vel.data()[i];
        v = cfg.momentum * v + grad.data()[i];
        param.data()[i] -= cfg.learning_rate * v;
      }
    };
    if (!cfg.freeze_map) update(st.map.w, vel_map, g.grad_map);
    update(st.probe.w, vel_probe, g.grad_probe);
  };

  const bool full_batch = cfg.batch_size == 0 || cfg.batch_size >= n;
  Rng shuffler(derive_seed(cfg.seed, "refiner:shuffle"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_ce = 0.0;
    if (full_batch) {
      const RefinerGrads g = loss_and_grads(st.map, st.probe, seasons, labels, cfg.l2_penalty);
      epoch_ce = g.cross_entropy;
      if (!std::isfinite(g.loss))
        detail::fail("non_finite_loss", "loss became non-finite at epoch " + std::to_string(epoch));
      step(g);
    } else {
      shuffler.shuffle(order);
      for (std::size_t start = 0; start < n; start += cfg.batch_size) {
        const std::size_t stop = std::min(n, start + cfg.batch_size);
        std::span<const std::size_t> idx(order.data() + start, stop - start);
        std::vector<linalg::Mat> batch;
        for (const auto& s : seasons) batch.push_back(detail::select_rows(s, idx));
        std::vector<int> batch_labels;
        for (std::size_t i : idx) batch_labels.push_back(labels[i]);
        const RefinerGrads g = loss_and_grads(st.map, st.probe, batch, batch_labels, cfg.l2_penalty);
        if (!std::isfinite(g.loss))
          detail::fail("non_finite_loss", "loss became non-finite at epoch " + std::to_string(epoch));
        epoch_ce += g.cross_entropy * static_cast<double>(idx.size());
        step(g);
      }
      epoch_ce /= static_cast<double>(n);
    }
    st.loss_trace.push_back(epoch_ce);
    if (!holdout.empty()) {
      const auto logits = forward(st.map, st.probe, holdout);
      st.holdout_trace.push_back(softmax_cross_entropy(logits, holdout_labels).loss);
    }
  }
  return st;
}

/// The map as it is stored on disk (f32 entries).
inline LinearMap rounded_to_f32(LinearMap map) {
  for (double& v : map.w.data()) v = static_cast<double>(static_cast<float>(v));
  return map;
}

/// min σ / max σ of the map; a collapse indicator (0 = singular).
inline double map_conditioning(const LinearMap& map) {
  const auto sv = linalg::singular_values(map.w);
  if (sv.empty() || sv.front() == 0.0) return 0.0;
  return sv.back() / sv.front();
}

// ---------------------------------------------------------------------------
// EmbeddingMatrix-level API

namespace detail {

inline std::vector<linalg::Mat> season_mats(std::span<const EmbeddingMatrix> seasons) {
  std::vector<linalg::Mat> out;
  for (const auto& s : seasons) {
    linalg::Mat m(s.n_rows(), s.n_cols());
    std::copy(s.data().begin(), s.data().end(), m.data().begin());
    out.push_back(std::move(m));
  }
  return out;
}

inline void check_four_aligned(std::span<const EmbeddingMatrix> seasons) {
  if (seasons.size() != kSeasonCount)
    fail("season_count", "expected 4 seasons, got " + std::to_string(seasons.size()));
  for (const auto& s : seasons) {
    if (s.n_rows() != seasons[0].n_rows()) fail("row_count_mismatch", "seasons disagree on n_rows");
    if (s.n_cols() != seasons[0].n_cols()) fail("dimension_mismatch", "seasons disagree on n_cols");
    if (s.row_ids() && seasons[0].row_ids() && *s.row_ids() != *seasons[0].row_ids())
      fail("row_id_mismatch", "season row ids are not aligned");
  }
}

}  // namespace detail

/// Pseudolabels from clustering [spring | summer | fall | winter].
inline ClusterAssignment make_pseudolabels(std::span<const EmbeddingMatrix> seasons, int n_clusters,
                                           Linkage linkage = Linkage::ward) {
  detail::check_four_aligned(seasons);
  return agglomerative_cluster(concat_columns(seasons), n_clusters, linkage);
}

inline linalg::Mat forward(const LinearMap& map, const ProbeWeights& probe, std::span<const EmbeddingMatrix> seasons) {
  const auto mats = detail::season_mats(seasons);
  return forward(map, probe, std::span<const linalg::Mat>(mats));
}

inline RefinerState train_refiner(std::span<const EmbeddingMatrix> seasons, std::span<const int> labels,
                                  const RefinerConfig& cfg) {
  detail::check_four_aligned(seasons);
  const auto mats = detail::season_mats(seasons);
  return train_refiner(std::span<const linalg::Mat>(mats), labels, cfg);
}

/// x · Wᵀ, same shape and identity as the input.
inline EmbeddingMatrix apply_linear_map(const LinearMap& map, const EmbeddingMatrix& x) {
  if (x.n_cols() != map.dim())
    detail::fail("dimension_mismatch", "input has " + std::to_string(x.n_cols()) + " columns, map is " +
                                           std::to_string(map.dim()) + "x" + std::to_string(map.dim()));
  const std::size_t d = map.dim();
  std::vector<float> out(x.n_rows() * d);
  for (std::size_t r = 0; r < x.n_rows(); ++r) {
    auto xr = x.row(r);
    for (std::size_t a = 0; a < d; ++a) {
      auto wa = map.w.row(a);
      double s = 0.0;
      for (std::size_t b = 0; b < d; ++b) s += wa[b] * xr[b];
      out[r * d + a] = static_cast<float>(s);
    }
  }
  EmbeddingMatrix y(x.n_rows(), d, std::move(out), x.model_id(), x.row_ids());
  y.set_season(x.season());
  y.set_attrs(x.attrs());
  return y;
}

// ---------------------------------------------------------------------------
// Serialisation: EMB1 container, kind "map1", D×D f32 payload.

inline void save_linear_map(const LinearMap& map, const fs::path& path) {
  std::vector<float> payload(map.w.size());
  std::transform(map.w.data().begin(), map.w.data().end(), payload.begin(),
                 [](double v) { return static_cast<float>(v); });
  Json h = {{"kind", "map1"}, {"D", map.dim()}, {"dtype", "f32"}, {"order", "row_major"},
            {"init_scheme", map.init_scheme}};
  write_container(path, h, payload);
}

inline LinearMap load_linear_map(const fs::path& path) {
  Container c = read_container(path);
  const std::size_t d = detail::header_count(c.header, "D");
  expect_payload(c, "map1", d * d);
  LinearMap m{linalg::Mat(d, d), c.header.value("init_scheme", std::string("identity"))};
  std::copy(c.payload.begin(), c.payload.end(), m.w.data().begin());
  return m;
}

inline Json loss_record(std::size_t epoch, double loss, std::optional<double> holdout = std::nullopt) {
  Json j = {{"epoch", epoch}, {"loss", loss}};
  if (holdout) j["holdout_loss"] = *holdout;
  return j;
}

}  // namespace geoemb
