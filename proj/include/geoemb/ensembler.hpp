#pragma once

// Slotted composition of compressed per-model embeddings, and the search for
// per-model compression rates under a fixed total width.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geoemb/cluster_metrics.hpp"
#include "geoemb/embedding_store.hpp"
#include "geoemb/error.hpp"

namespace geoemb {

struct Slot {
  std::string model_id;
  std::size_t start = 0;
  std::size_t end = 0;         // exclusive
  std::size_t source_dim = 0;  // width before compression, 0 if unknown

  [[nodiscard]] std::size_t width() const { return end - start; }
  bool operator==(const Slot&) const = default;
};

struct EnsembleLayout {
  std::vector<Slot> slots;

  [[nodiscard]] std::size_t total_dim() const { return slots.empty() ? 0 : slots.back().end; }

  [[nodiscard]] const Slot* find(std::string_view model_id) const {
    for (const auto& s : slots)
      if (s.model_id == model_id) return &s;
    return nullptr;
  }

  /// Contiguous, ordered, non-empty slots starting at 0 with unique ids.
  void validate() const {
    if (slots.empty()) detail::fail("invalid_layout", "layout has no slots");
    std::size_t expect = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const Slot& s = slots[i];
      if (s.model_id.empty()) detail::fail("invalid_layout", "slot without model_id");
      if (s.start != expect || s.end <= s.start)
        detail::fail("invalid_layout", "slot '" + s.model_id + "' is not contiguous with the previous one");
      for (std::size_t j = 0; j < i; ++j)
        if (slots[j].model_id == s.model_id) detail::fail("invalid_layout", "duplicate slot '" + s.model_id + "'");
      expect = s.end;
    }
  }
};

/// The 1024-wide composition: three single-image models, then GeoRSCLIP
/// once per season.
inline EnsembleLayout default_layout() {
  return {{{"convnext_xxl", 0, 128, 1024},
           {"vit_huge_clip", 128, 384, 1024},
           {"vit_base_dino", 384, 512, 768},
           {"georsclip_spring", 512, 640, 1024},
           {"georsclip_summer", 640, 768, 1024},
           {"georsclip_fall", 768, 896, 1024},
           {"georsclip_winter", 896, 1024, 1024}}};
}

/// Contiguous layout from (model_id, width) pairs.
inline EnsembleLayout layout_from_widths(const std::vector<std::pair<std::string, std::size_t>>& widths) {
  EnsembleLayout l;
  std::size_t at = 0;
  for (const auto& [id, w] : widths) {
    l.slots.push_back({id, at, at + w, 0});
    at += w;
  }
  l.validate();
  return l;
}

inline Json to_json(const EnsembleLayout& l) {
  Json slots = Json::array();
  for (const auto& s : l.slots)
    slots.push_back({{"model_id", s.model_id}, {"start", s.start}, {"end", s.end}, {"source_dim", s.source_dim}});
  return {{"slots", slots}, {"total_dim", l.total_dim()}};
}

/// Either the string "table1" or {"slots": [{model_id, start, end, source_dim?}]}.
inline EnsembleLayout parse_layout(const Json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "table1") return default_layout();
    detail::fail("invalid_layout", "unknown named layout '" + j.get<std::string>() + "'");
  }
  EnsembleLayout l;
  try {
    for (const auto& s : j.at("slots"))
      l.slots.push_back({s.at("model_id").get<std::string>(), s.at("start").get<std::size_t>(),
                         s.at("end").get<std::size_t>(), s.value("source_dim", std::size_t{0})});
  } catch (const Json::exception& e) {
    detail::fail("invalid_layout", std::string("layout JSON: ") + e.what());
  }
  l.validate();
  if (j.contains("total_dim") && j["total_dim"] != l.total_dim())
    detail::fail("invalid_layout", "total_dim disagrees with the slot ranges");
  return l;
}

// ---------------------------------------------------------------------------
// compose

struct ComposeOptions {
  bool l2_normalize_slots = false;  // rescale each slot's rows to unit norm first
  std::string model_id = "ensemble";
};

/// Output columns [start, end) of each slot are the slot's matrix verbatim.
inline EmbeddingMatrix compose(const EnsembleLayout& layout, const std::map<std::string, EmbeddingMatrix>& compressed,
                               const ComposeOptions& opt = {}) {
  layout.validate();
  std::vector<const EmbeddingMatrix*> parts;
  for (const auto& s : layout.slots) {
    auto it = compressed.find(s.model_id);
    if (it == compressed.end()) detail::fail("missing_slot:" + s.model_id, "no embeddings for slot '" + s.model_id + "'");
    if (it->second.n_cols() != s.width())
      detail::fail("width_mismatch", "slot '" + s.model_id + "' is " + std::to_string(s.width()) + " wide, input has " +
                                         std::to_string(it->second.n_cols()) + " columns");
    parts.push_back(&it->second);
  }
  const std::size_t n = parts[0]->n_rows();
  std::optional<std::vector<std::string>> ids;
  for (const auto* p : parts) {
    if (p->n_rows() != n) detail::fail("row_count_mismatch", "slot inputs disagree on n_rows");
    if (!p->row_ids()) continue;
    if (ids && *ids != *p->row_ids()) detail::fail("row_id_mismatch", "slot inputs are not row-aligned");
    ids = p->row_ids();
  }

  const std::size_t width = layout.total_dim();
  std::vector<float> out(n * width);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const EmbeddingMatrix part = opt.l2_normalize_slots ? l2_normalize_rows(*parts[k]) : *parts[k];
    const Slot& s = layout.slots[k];
    for (std::size_t r = 0; r < n; ++r) std::copy(part.row(r).begin(), part.row(r).end(), out.begin() + static_cast<std::ptrdiff_t>(r * width + s.start));
  }
  EmbeddingMatrix y(n, width, std::move(out), opt.model_id, std::move(ids));
  Json attrs = {{"layout", to_json(layout)}};
  if (opt.l2_normalize_slots) attrs["l2_normalize_slots"] = true;
  y.set_attrs(std::move(attrs));
  return y;
}

// ---------------------------------------------------------------------------
// rate search

struct RateSearchOptions {
  double mu = 1.0;  // weight of the normalized-MSE penalty
  KMeansOptions kmeans{};
};

struct CombinationScore {
  std::vector<std::size_t> dims;  // one per model, in plan model order
  double objective = 0.0;
  double silhouette_delta = 0.0;  // summed over models
  double normalized_mse = 0.0;    // summed over models
};

struct CompressionPlan {
  std::vector<std::string> models;  // sorted model ids
  std::map<std::string, std::size_t> dims;
  std::size_t total_budget = 0;
  double mu = 1.0;
  std::vector<CombinationScore> table;  // every feasible combination, lexicographic order
  std::size_t best = 0;                 // index into table
  std::vector<QualityReport> quality;   // per model, over its candidate dims
};

/// Per-combination objective: Σ (silhouette - baseline) - mu · Σ normalized MSE.
inline CombinationScore score_combination(std::span<const QualityReport> quality, std::span<const std::size_t> dims,
                                          double mu) {
  CombinationScore c{{dims.begin(), dims.end()}, 0.0, 0.0, 0.0};
  for (std::size_t m = 0; m < quality.size(); ++m) {
    auto row = std::find_if(quality[m].rows.begin(), quality[m].rows.end(),
                            [&](const QualityRow& q) { return q.dim == dims[m]; });
    if (row == quality[m].rows.end()) detail::fail("invalid_argument", "dim was not scored");
    c.silhouette_delta += row->silhouette_delta();
    c.normalized_mse += row->normalized_mse;
  }
  c.objective = c.silhouette_delta - mu * c.normalized_mse;
  return c;
}

/// Exhaustive search over candidate dims whose sum equals the budget. Each
/// model is scored once per candidate (compression_quality, same seed for all
/// models), then every feasible combination is scored from those numbers.
/// Ties go to the lexicographically smallest dim vector.
inline CompressionPlan search_rates(const std::map<std::string, EmbeddingMatrix>& embeddings,
                                    const std::map<std::string, std::vector<std::size_t>>& candidate_dims,
                                    std::size_t total_budget, int k_clusters, std::uint64_t seed,
                                    const RateSearchOptions& opt = {}) {
  if (embeddings.empty()) detail::fail("empty_input", "no models to search over");
  for (const auto& [id, _] : candidate_dims)
    if (!embeddings.count(id)) detail::fail("invalid_argument", "candidates given for unknown model '" + id + "'");

  CompressionPlan plan;
  plan.total_budget = total_budget;
  plan.mu = opt.mu;
  std::vector<std::vector<std::size_t>> cands;
  for (const auto& [id, x] : embeddings) {
    auto it = candidate_dims.find(id);
    if (it == candidate_dims.end() || it->second.empty())
      detail::fail("invalid_argument", "no candidate dims for model '" + id + "'");
    std::vector<std::size_t> c = it->second;
    std::sort(c.begin(), c.end());
    c.erase(std::unique(c.begin(), c.end()), c.end());
    if (c.front() == 0) detail::fail("k_out_of_range", "candidate dims must be positive");
    plan.models.push_back(id);
    cands.push_back(std::move(c));
  }

  // Feasibility first: no point scoring models if nothing fits the budget.
  std::vector<std::vector<std::size_t>> feasible;
  std::vector<std::size_t> current;
  auto enumerate = [&](auto&& self, std::size_t m, std::size_t used) -> void {
    if (m == cands.size()) {
      if (used == total_budget) feasible.push_back(current);
      return;
    }
    for (std::size_t d : cands[m]) {
      if (used + d > total_budget) break;
      current.push_back(d);
      self(self, m + 1, used + d);
      current.pop_back();
    }
  };
  enumerate(enumerate, 0, 0);
  if (feasible.empty())
    detail::fail("no_feasible_combination", "no combination of candidate dims sums to " + std::to_string(total_budget));

  for (std::size_t m = 0; m < plan.models.size(); ++m)
    plan.quality.push_back(compression_quality(embeddings.at(plan.models[m]), cands[m], k_clusters, seed, opt.kmeans));

  for (const auto& dims : feasible) {
    plan.table.push_back(score_combination(plan.quality, dims, opt.mu));
    if (plan.table.back().objective > plan.table[plan.best].objective) plan.best = plan.table.size() - 1;
  }
  for (std::size_t m = 0; m < plan.models.size(); ++m) plan.dims[plan.models[m]] = plan.table[plan.best].dims[m];
  return plan;
}

inline Json to_json(const CompressionPlan& p) {
  Json table = Json::array();
  for (const auto& c : p.table)
    table.push_back({{"dims", c.dims}, {"objective", c.objective}, {"silhouette_delta", c.silhouette_delta},
                     {"normalized_mse", c.normalized_mse}});
  Json quality = Json::array();
  for (const auto& q : p.quality) quality.push_back(to_json(q));
  Json dims = Json::object();
  for (const auto& [id, d] : p.dims) dims[id] = d;
  return {{"models", p.models}, {"dims", dims}, {"total_budget", p.total_budget}, {"mu", p.mu},
          {"best", p.best},     {"table", table}, {"quality", quality}};
}

/// Target dims of a plan file (only the "dims" object is read back).
inline std::map<std::string, std::size_t> parse_plan_dims(const Json& j) {
  std::map<std::string, std::size_t> out;
  try {
    for (const auto& [id, d] : j.at("dims").items()) out[id] = d.get<std::size_t>();
  } catch (const Json::exception& e) {
    detail::fail("invalid_config", std::string("plan JSON: ") + e.what());
  }
  return out;
}

}  // namespace geoemb
