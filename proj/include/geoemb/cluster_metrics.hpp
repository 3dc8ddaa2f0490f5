#pragma once

// Clustering instruments: seeded k-means++ / Lloyd, silhouette score,
// Lance-Williams agglomerative clustering, and the compression quality report
// that combines them with the SVD compressor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "geoemb/compressor.hpp"
#include "geoemb/embedding_store.hpp"
#include "geoemb/error.hpp"
#include "geoemb/rng.hpp"

namespace geoemb {

enum class Metric { euclidean, cosine };
enum class Linkage { ward, average, complete, single };

inline Linkage parse_linkage(std::string_view s) {
  if (s == "ward") return Linkage::ward;
  if (s == "average") return Linkage::average;
  if (s == "complete") return Linkage::complete;
  if (s == "single") return Linkage::single;
  detail::fail("invalid_linkage", "unknown linkage '" + std::string(s) + "'");
}

inline std::string_view to_string(Linkage l) {
  switch (l) {
    case Linkage::ward: return "ward";
    case Linkage::average: return "average";
    case Linkage::complete: return "complete";
    case Linkage::single: return "single";
  }
  return "?";
}

inline Metric parse_metric(std::string_view s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "cosine") return Metric::cosine;
  detail::fail("invalid_metric", "unknown metric '" + std::string(s) + "'");
}

struct ClusterAssignment {
  std::vector<int> labels;           // each in [0, n_clusters)
  int n_clusters = 0;
  std::optional<double> inertia;     // sum of squared distances to centroids (k-means only)
};

struct KMeansResult {
  ClusterAssignment assignment;
  std::vector<double> centroids;     // k×D row-major
  std::vector<double> inertia_trace; // after each assignment step; non-increasing
  int iterations = 0;
};

struct KMeansOptions {
  int max_iter = 300;
  double tol = 1e-6;                 // stop once the largest centroid shift is <= tol
  Metric metric = Metric::euclidean; // cosine = k-means on L2-normalised rows
};

namespace detail {

inline double sq_dist(std::span<const float> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double euclidean(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double cosine_distance(std::span<const float> a, std::span<const float> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return aa == bb ? 0.0 : 1.0;
  return 1.0 - ab / std::sqrt(aa * bb);
}

inline double distance(Metric metric, std::span<const float> a, std::span<const float> b) {
  return metric == Metric::euclidean ? euclidean(a, b) : cosine_distance(a, b);
}

}  // namespace detail

/// Lloyd's algorithm from seeded k-means++ initialisation. Assignment ties go
/// to the lowest centroid index; an emptied cluster keeps its old centroid.
inline KMeansResult kmeans(const EmbeddingMatrix& input, int k, std::uint64_t seed, const KMeansOptions& opt = {}) {
  if (input.n_rows() == 0) detail::fail("empty_input", "kmeans needs at least one row");
  if (k < 1 || static_cast<std::size_t>(k) > input.n_rows())
    detail::fail("k_out_of_range", "k=" + std::to_string(k) + " must be in [1, " + std::to_string(input.n_rows()) + "]");
  if (opt.max_iter < 1) detail::fail("invalid_argument", "max_iter must be >= 1");
  if (!(opt.tol >= 0.0)) detail::fail("invalid_argument", "tol must be >= 0");

  const EmbeddingMatrix x = opt.metric == Metric::cosine ? l2_normalize_rows(input) : input;
  const std::size_t n = x.n_rows();
  const std::size_t d = x.n_cols();
  const auto kk = static_cast<std::size_t>(k);
  Rng rng(seed);

  KMeansResult res;
  res.centroids.assign(kk * d, 0.0);
  auto centroid = [&](std::size_t c) { return std::span<double>(res.centroids.data() + c * d, d); };
  auto set_centroid = [&](std::size_t c, std::size_t row) {
    auto src = x.row(row);
    std::copy(src.begin(), src.end(), centroid(c).begin());
  };

  // k-means++ seeding
  std::vector<char> chosen(n, 0);
  std::size_t first = rng.below(n);
  set_centroid(0, first);
  chosen[first] = 1;
  std::vector<double> closest(n);
  for (std::size_t i = 0; i < n; ++i) closest[i] = detail::sq_dist(x.row(i), centroid(0));
  for (std::size_t c = 1; c < kk; ++c) {
    double total = 0.0;
    for (double v : closest) total += v;
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += closest[i];
        if (closest[i] > 0.0 && acc > target) {
          pick = i;
          break;
        }
      }
      if (pick == n)  // rounding at the tail: last point with positive weight
        for (std::size_t i = n; i-- > 0;)
          if (closest[i] > 0.0) {
            pick = i;
            break;
          }
    } else {
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) {
          pick = i;
          break;
        }
    }
    set_centroid(c, pick);
    chosen[pick] = 1;
    for (std::size_t i = 0; i < n; ++i) closest[i] = std::min(closest[i], detail::sq_dist(x.row(i), centroid(c)));
  }

  std::vector<int> labels(n, 0);
  auto assign = [&] {
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (std::size_t c = 0; c < kk; ++c) {
        const double dd = detail::sq_dist(x.row(i), centroid(c));
        if (dd < best) {
          best = dd;
          arg = static_cast<int>(c);
        }
      }
      labels[i] = arg;
      inertia += best;
    }
    return inertia;
  };

  std::vector<double> sums(kk * d);
  std::vector<std::size_t> counts(kk);
  for (int it = 0; it < opt.max_iter; ++it) {
    res.inertia_trace.push_back(assign());
    res.iterations = it + 1;
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(labels[i]);
      ++counts[c];
      auto row = x.row(i);
      for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += row[j];
    }
    double max_shift = 0.0;
    for (std::size_t c = 0; c < kk; ++c) {
      if (counts[c] == 0) continue;
      auto cen = centroid(c);
      double shift = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double v = sums[c * d + j] / static_cast<double>(counts[c]);
        shift += (v - cen[j]) * (v - cen[j]);
        cen[j] = v;
      }
      max_shift = std::max(max_shift, std::sqrt(shift));
    }
    if (max_shift <= opt.tol) break;
  }
  const double final_inertia = assign();
  res.inertia_trace.push_back(final_inertia);
  res.assignment = {labels, k, final_inertia};
  return res;
}

/// Mean silhouette coefficient. Singleton clusters contribute 0, as does any
/// point with a = b = 0. Cluster identities are the distinct label values.
inline double silhouette_score(const EmbeddingMatrix& x, std::span<const int> labels,
                               Metric metric = Metric::euclidean) {
  const std::size_t n = x.n_rows();
  if (labels.size() != n) detail::fail("label_mismatch", "labels length differs from n_rows");
  std::map<int, std::size_t> index;
  for (int l : labels) index.emplace(l, 0);
  if (index.size() < 2) detail::fail("single_cluster", "silhouette needs at least 2 clusters");
  if (n < 3 || n < index.size()) detail::fail("too_few_points", "silhouette needs N >= 3 and N >= #clusters");
  std::size_t next = 0;
  for (auto& [label, idx] : index) idx = next++;
  const std::size_t kc = index.size();
  std::vector<std::size_t> cluster(n), size(kc, 0);
  for (std::size_t i = 0; i < n; ++i) ++size[cluster[i] = index[labels[i]]];

  std::vector<double> sums(kc);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ci = cluster[i];
    if (size[ci] == 1) continue;
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sums[cluster[j]] += detail::distance(metric, x.row(i), x.row(j));
    const double a = sums[ci] / static_cast<double>(size[ci] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < kc; ++c)
      if (c != ci) b = std::min(b, sums[c] / static_cast<double>(size[c]));
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

inline constexpr std::size_t kMaxAgglomerativePoints = 20000;

/// Bottom-up clustering with Lance-Williams distance updates. The closest pair
/// of active clusters merges first; ties go to the lexicographically smallest
/// (i, j) pair and the merged cluster keeps index i. Ward works on squared
/// Euclidean distances and requires the Euclidean metric. Final labels are
/// numbered by each cluster's smallest member index.
inline ClusterAssignment agglomerative_cluster(const EmbeddingMatrix& x, int n_clusters,
                                               Linkage linkage = Linkage::ward,
                                               Metric metric = Metric::euclidean) {
  const std::size_t n = x.n_rows();
  if (n_clusters < 1 || static_cast<std::size_t>(n_clusters) > n)
    detail::fail("n_clusters_out_of_range",
                 "n_clusters=" + std::to_string(n_clusters) + " must be in [1, " + std::to_string(n) + "]");
  if (n > kMaxAgglomerativePoints)
    detail::fail("too_many_points", "agglomerative clustering is capped at " +
                                        std::to_string(kMaxAgglomerativePoints) + " rows");
  if (linkage == Linkage::ward && metric != Metric::euclidean)
    detail::fail("invalid_linkage", "ward linkage requires the euclidean metric");

  // Condensed upper-triangular distance storage.
  auto tri = [n](std::size_t i, std::size_t j) {  // i < j
    return i * n - i * (i + 1) / 2 + (j - i - 1);
  };
  std::vector<double> dist(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double dd = detail::distance(metric, x.row(i), x.row(j));
      dist[tri(i, j)] = linkage == Linkage::ward ? dd * dd : dd;
    }
  auto d = [&](std::size_t i, std::size_t j) -> double& { return i < j ? dist[tri(i, j)] : dist[tri(j, i)]; };

  std::vector<std::size_t> parent(n);  // member -> representative, resolved lazily at the end
  std::vector<std::size_t> size(n, 1);
  std::vector<char> active(n, 1);
  for (std::size_t i = 0; i < n; ++i) parent[i] = i;

  // Nearest active neighbour with a larger index, per active row.
  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::vector<std::size_t> nn(n, kNone);
  std::vector<double> nn_d(n, std::numeric_limits<double>::infinity());
  auto refresh = [&](std::size_t i) {
    nn[i] = kNone;
    nn_d[i] = std::numeric_limits<double>::infinity();
    for (std::size_t j = i + 1; j < n; ++j)
      if (active[j] && d(i, j) < nn_d[i]) {
        nn_d[i] = d(i, j);
        nn[i] = j;
      }
  };
  for (std::size_t i = 0; i < n; ++i) refresh(i);

  for (std::size_t remaining = n; remaining > static_cast<std::size_t>(n_clusters); --remaining) {
    std::size_t a = kNone;
    for (std::size_t i = 0; i < n; ++i)
      if (active[i] && nn[i] != kNone && (a == kNone || nn_d[i] < nn_d[a])) a = i;
    const std::size_t b = nn[a];
    const double dab = nn_d[a];
    const double na = static_cast<double>(size[a]);
    const double nb = static_cast<double>(size[b]);

    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == a || k == b) continue;
      const double dak = d(a, k);
      const double dbk = d(b, k);
      double merged = 0.0;
      switch (linkage) {
        case Linkage::single: merged = std::min(dak, dbk); break;
        case Linkage::complete: merged = std::max(dak, dbk); break;
        case Linkage::average: merged = (na * dak + nb * dbk) / (na + nb); break;
        case Linkage::ward: {
          const double nk = static_cast<double>(size[k]);
          merged = ((na + nk) * dak + (nb + nk) * dbk - nk * dab) / (na + nb + nk);
          break;
        }
      }
      d(a, k) = merged;
    }
    active[b] = 0;
    parent[b] = a;
    size[a] += size[b];

    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k]) continue;
      if (k == a || nn[k] == a || nn[k] == b) {
        refresh(k);
      } else if (k < a && (d(k, a) < nn_d[k] || (d(k, a) == nn_d[k] && a < nn[k]))) {
        nn_d[k] = d(k, a);
        nn[k] = a;
      }
    }
  }

  auto root = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i];
    return i;
  };
  ClusterAssignment out;
  out.n_clusters = n_clusters;
  out.labels.resize(n);
  std::vector<int> label_of(n, -1);
  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = root(i);
    if (label_of[r] < 0) label_of[r] = next++;
    out.labels[i] = label_of[r];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Compression quality

struct QualityRow {
  std::size_t dim = 0;
  double mse = 0.0;
  double normalized_mse = 0.0;  // mse / mean column variance of the input
  double silhouette = 0.0;      // k-means labels on the compressed data
  double silhouette_baseline = 0.0;

  [[nodiscard]] double silhouette_delta() const { return silhouette - silhouette_baseline; }
};

struct QualityReport {
  std::string model_id;
  std::size_t input_dim = 0;
  double input_variance = 0.0;
  double silhouette_baseline = 0.0;
  std::vector<QualityRow> rows;  // ascending dim
};

/// MSE divided by the input's mean column variance (left as-is when that
/// variance is zero).
inline double normalize_mse(double mse, double variance) { return variance > 0.0 ? mse / variance : mse; }

inline QualityReport compression_quality(const EmbeddingMatrix& x, std::vector<std::size_t> target_dims,
                                         int k_clusters, std::uint64_t seed, const KMeansOptions& km = {}) {
  std::sort(target_dims.begin(), target_dims.end());
  target_dims.erase(std::unique(target_dims.begin(), target_dims.end()), target_dims.end());
  QualityReport rep;
  rep.model_id = x.model_id();
  rep.input_dim = x.n_cols();
  rep.input_variance = mean_column_variance(x);
  const auto base = kmeans(x, k_clusters, seed, km);
  rep.silhouette_baseline = silhouette_score(x, base.assignment.labels, km.metric);
  for (std::size_t dim : target_dims) {
    const SvdModel model = fit_truncated_svd(x, dim, seed);
    const EmbeddingMatrix z = transform(model, x);
    QualityRow row;
    row.dim = dim;
    row.mse = reconstruction_mse(x, reconstruct(model, z));
    row.normalized_mse = normalize_mse(row.mse, rep.input_variance);
    row.silhouette = silhouette_score(z, kmeans(z, k_clusters, seed, km).assignment.labels, km.metric);
    row.silhouette_baseline = rep.silhouette_baseline;
    rep.rows.push_back(row);
  }
  return rep;
}

inline Json to_json(const QualityReport& r) {
  Json rows = Json::array();
  for (const auto& q : r.rows)
    rows.push_back({{"dim", q.dim},
                    {"mse", q.mse},
                    {"normalized_mse", q.normalized_mse},
                    {"silhouette", q.silhouette},
                    {"silhouette_baseline", q.silhouette_baseline}});
  Json dims = Json::array(), mse = Json::array(), sil = Json::array();
  for (const auto& q : r.rows) {
    dims.push_back(q.dim);
    mse.push_back(q.mse);
    sil.push_back(q.silhouette);
  }
  return {{"model_id", r.model_id},       {"input_dim", r.input_dim}, {"input_variance", r.input_variance},
          {"dims", dims},                 {"mse", mse},               {"silhouette", sil},
          {"silhouette_baseline", r.silhouette_baseline}, {"rows", rows}};
}

}  // namespace geoemb
