#pragma once

// File-level commands behind the `geoemb` binary. Each one reads its inputs,
// runs the module operation, writes outputs plus a provenance record and
// returns a JSON summary. Argument parsing lives in tools/.

#include <array>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "geoemb/adapters.hpp"
#include "geoemb/cluster_metrics.hpp"
#include "geoemb/compressor.hpp"
#include "geoemb/embedding_store.hpp"
#include "geoemb/ensembler.hpp"
#include "geoemb/evaluator.hpp"
#include "geoemb/provenance.hpp"
#include "geoemb/refiner.hpp"

namespace geoemb {

/// An Error raised inside a named pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& e) : Error(e.code(), e.what()), stage_(std::move(stage)) {}
  [[nodiscard]] const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

inline constexpr int kDefaultQualityClusters = 8;
inline constexpr int kDefaultPseudoClusters = 32;
inline constexpr const char* kOutDirEnv = "GEOEMB_OUT_DIR";

namespace detail {

inline Json read_json(const fs::path& path, const char* code) {
  try {
    return Json::parse(read_all(path));
  } catch (const Json::parse_error& e) {
    fail(code, path.string() + " is not valid JSON: " + e.what());
  }
}

inline void write_json(const fs::path& path, const Json& j) { write_all(path, j.dump(2) + "\n"); }

inline void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

inline fs::path with_suffix(const fs::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix);
}

inline std::vector<std::string> path_strings(const std::vector<fs::path>& ps) {
  std::vector<std::string> out;
  for (const auto& p : ps) out.push_back(p.generic_string());
  return out;
}

/// MSE always; silhouette numbers only when the data can support k clusters.
inline Json compress_quality_record(const EmbeddingMatrix& x, const SvdModel& model, const EmbeddingMatrix& z,
                                    int k_clusters, std::uint64_t seed) {
  const double mse = reconstruction_mse(x, reconstruct(model, z));
  const double var = mean_column_variance(x);
  Json j = {{"model_id", x.model_id()}, {"input_dim", x.n_cols()}, {"dim", model.target_dim},
            {"mse", mse},              {"normalized_mse", normalize_mse(mse, var)}, {"input_variance", var}};
  const int k = std::min<int>(k_clusters, static_cast<int>(x.n_rows()));
  if (k >= 2 && x.n_rows() >= 3) {
    const double base = silhouette_score(x, kmeans(x, k, seed).assignment.labels);
    const double sil = silhouette_score(z, kmeans(z, k, seed).assignment.labels);
    j["k_clusters"] = k;
    j["silhouette"] = sil;
    j["silhouette_baseline"] = base;
    j["silhouette_delta"] = sil - base;
  }
  return j;
}

}  // namespace detail

/// Output directory: explicit value, else $GEOEMB_OUT_DIR, else none.
inline std::optional<fs::path> default_out_dir(const std::optional<fs::path>& explicit_dir) {
  if (explicit_dir) return explicit_dir;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return fs::path(env);
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// compress

struct CompressArgs {
  fs::path in;
  fs::path out;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::optional<fs::path> model_out{};    // default: <out stem>.svd
  std::optional<fs::path> quality_out{};  // default: <out stem>.quality.json
  int k_clusters = kDefaultQualityClusters;
  bool l2_normalize = false;
};

inline Json cmd_compress(const CompressArgs& a) {
  EmbeddingMatrix x = load_embeddings(a.in);
  if (a.l2_normalize) x = l2_normalize_rows(x);
  const SvdModel model = fit_truncated_svd(x, a.k, a.seed);
  const EmbeddingMatrix z = transform(model, x);
  const fs::path model_out = a.model_out.value_or(detail::with_suffix(a.out, ".svd"));
  const fs::path quality_out = a.quality_out.value_or(detail::with_suffix(a.out, ".quality.json"));
  for (const auto& p : {a.out, model_out, quality_out}) detail::ensure_parent(p);
  save_embeddings(z, a.out);
  save_svd_model(model, model_out);
  detail::write_json(quality_out, detail::compress_quality_record(x, model, z, a.k_clusters, a.seed));

  Provenance p{"compress", a.seed, {{"k", a.k}, {"k_clusters", a.k_clusters}, {"l2_normalize", a.l2_normalize}}};
  p.add_input(a.in);
  for (const auto& o : {a.out, model_out, quality_out}) p.add_output(o);
  const fs::path prov = a.out.string() + ".prov.json";
  write_provenance(p, prov);
  return {{"command", "compress"}, {"n_rows", z.n_rows()}, {"n_cols", z.n_cols()},
          {"outputs", detail::path_strings({a.out, model_out, quality_out, prov})}};
}

// ---------------------------------------------------------------------------
// quality

struct QualityArgs {
  fs::path in;
  fs::path out;
  std::vector<std::size_t> dims;
  int k_clusters = kDefaultQualityClusters;
  std::uint64_t seed = 0;
  Metric metric = Metric::euclidean;
};

inline Json cmd_quality(const QualityArgs& a) {
  const EmbeddingMatrix x = load_embeddings(a.in);
  KMeansOptions km;
  km.metric = a.metric;
  const QualityReport rep = compression_quality(x, a.dims, a.k_clusters, a.seed, km);
  detail::ensure_parent(a.out);
  detail::write_json(a.out, to_json(rep));
  Provenance p{"quality", a.seed, {{"dims", a.dims}, {"k_clusters", a.k_clusters}, {"metric", a.metric == Metric::euclidean ? "euclidean" : "cosine"}}};
  p.add_input(a.in);
  p.add_output(a.out);
  const fs::path prov = a.out.string() + ".prov.json";
  write_provenance(p, prov);
  return {{"command", "quality"}, {"outputs", detail::path_strings({a.out, prov})}};
}

// ---------------------------------------------------------------------------
// search

struct SearchArgs {
  fs::path manifest;
  fs::path candidates;  // JSON object: slot key -> list of dims
  fs::path out;
  std::size_t budget = 0;
  int k_clusters = kDefaultQualityClusters;
  double mu = 1.0;
  std::uint64_t seed = 0;
};

inline std::map<std::string, std::vector<std::size_t>> parse_candidates(const Json& j) {
  std::map<std::string, std::vector<std::size_t>> out;
  try {
    for (const auto& [id, dims] : j.items()) out[id] = dims.get<std::vector<std::size_t>>();
  } catch (const Json::exception& e) {
    detail::fail("invalid_config", std::string("candidates must map model ids to dim lists: ") + e.what());
  }
  return out;
}

inline Json cmd_search(const SearchArgs& a) {
  const Manifest m = load_manifest(a.manifest);
  const auto cands = parse_candidates(detail::read_json(a.candidates, "invalid_config"));
  Provenance p{"search", a.seed, {{"budget", a.budget}, {"k_clusters", a.k_clusters}, {"mu", a.mu}}};
  p.add_input(a.manifest);
  p.add_input(a.candidates);
  std::map<std::string, EmbeddingMatrix> emb;
  for (const auto& [id, _] : cands) {
    const ManifestEntry* e = m.find(id);
    if (!e) detail::fail("missing_slot:" + id, "manifest has no entry for '" + id + "'");
    emb.emplace(id, load_embeddings(e->path));
    p.add_input(e->path);
  }
  const CompressionPlan plan = search_rates(emb, cands, a.budget, a.k_clusters, a.seed, {.mu = a.mu});
  detail::ensure_parent(a.out);
  detail::write_json(a.out, to_json(plan));
  p.add_output(a.out);
  const fs::path prov = a.out.string() + ".prov.json";
  write_provenance(p, prov);
  Json dims = Json::object();
  for (const auto& [id, d] : plan.dims) dims[id] = d;
  return {{"command", "search"}, {"dims", dims}, {"outputs", detail::path_strings({a.out, prov})}};
}

// ---------------------------------------------------------------------------
// refine

struct RefineArgs {
  std::array<fs::path, kSeasonCount> seasons;  // spring, summer, fall, winter
  fs::path out_dir;
  int n_pseudo_clusters = kDefaultPseudoClusters;
  Linkage linkage = Linkage::ward;
  RefinerConfig config;  // config.seed is the command seed
};

struct RefineOutcome {
  std::vector<int> pseudolabels;
  RefinerState state;  // map rounded to f32, as written
  std::array<EmbeddingMatrix, kSeasonCount> refined;
};

/// Pseudolabels, training, and the rounded map applied to each season.
inline RefineOutcome refine_seasons(std::span<const EmbeddingMatrix> seasons, int n_pseudo_clusters, Linkage linkage,
                                    const RefinerConfig& cfg) {
  RefineOutcome r;
  r.pseudolabels = make_pseudolabels(seasons, n_pseudo_clusters, linkage).labels;
  RefinerConfig c = cfg;
  c.n_pseudo_clusters = n_pseudo_clusters;
  r.state = train_refiner(seasons, r.pseudolabels, c);
  r.state.map = rounded_to_f32(r.state.map);
  for (std::size_t s = 0; s < kSeasonCount; ++s) r.refined[s] = apply_linear_map(r.state.map, seasons[s]);
  return r;
}

inline std::string loss_trace_jsonl(const RefinerState& st) {
  std::string out;
  for (std::size_t e = 0; e < st.loss_trace.size(); ++e) out += loss_record(e, st.loss_trace[e]).dump() + "\n";
  return out;
}

inline Json refiner_params(const RefinerConfig& c, int clusters, Linkage linkage) {
  return {{"learning_rate", c.learning_rate}, {"epochs", c.epochs},       {"batch_size", c.batch_size},
          {"l2_penalty", c.l2_penalty},       {"momentum", c.momentum},   {"init_scale", c.init_scale},
          {"n_pseudo_clusters", clusters},    {"linkage", to_string(linkage)}};
}

inline Json cmd_refine(const RefineArgs& a) {
  std::vector<EmbeddingMatrix> seasons;
  for (const auto& p : a.seasons) seasons.push_back(load_embeddings(p));
  const RefineOutcome r = refine_seasons(seasons, a.n_pseudo_clusters, a.linkage, a.config);

  fs::create_directories(a.out_dir);
  const fs::path map_path = a.out_dir / "refiner.map";
  const fs::path trace_path = a.out_dir / "loss_trace.jsonl";
  const fs::path labels_path = a.out_dir / "pseudolabels.json";
  save_linear_map(r.state.map, map_path);
  detail::write_all(trace_path, loss_trace_jsonl(r.state));
  detail::write_json(labels_path, Json{{"n_clusters", a.n_pseudo_clusters}, {"labels", r.pseudolabels}});
  std::vector<fs::path> outputs{map_path, trace_path, labels_path};
  for (std::size_t s = 0; s < kSeasonCount; ++s) {
    outputs.push_back(a.out_dir / ("refined_" + std::string(kSeasonOrder[s]) + ".emb"));
    save_embeddings(r.refined[s], outputs.back());
  }
  Provenance p{"refine", a.config.seed, refiner_params(a.config, a.n_pseudo_clusters, a.linkage)};
  for (const auto& s : a.seasons) p.add_input(s);
  for (const auto& o : outputs) p.add_output(o);
  const fs::path prov = a.out_dir / "provenance.json";
  write_provenance(p, prov);
  outputs.push_back(prov);
  return {{"command", "refine"},
          {"final_loss", r.state.loss_trace.back()},
          {"map_conditioning", map_conditioning(r.state.map)},
          {"outputs", detail::path_strings(outputs)}};
}

// ---------------------------------------------------------------------------
// compose

struct ComposeArgs {
  Json layout = "table1";
  std::vector<std::pair<std::string, fs::path>> inputs;  // slot -> file
  std::optional<fs::path> manifest;                      // fills slots not given explicitly
  fs::path out;
  bool l2_normalize_slots = false;
};

inline Json cmd_compose(const ComposeArgs& a) {
  const EnsembleLayout layout = parse_layout(a.layout);
  std::map<std::string, fs::path> files;
  for (const auto& [slot, path] : a.inputs)
    if (!files.emplace(slot, path).second) detail::fail("invalid_argument", "slot '" + slot + "' given twice");
  Provenance p{"compose", std::nullopt, {{"layout", to_json(layout)}, {"l2_normalize_slots", a.l2_normalize_slots}}};
  if (a.manifest) {
    p.add_input(*a.manifest);
    const Manifest m = load_manifest(*a.manifest);
    for (const auto& s : layout.slots)
      if (!files.count(s.model_id))
        if (const ManifestEntry* e = m.find(s.model_id)) files.emplace(s.model_id, e->path);
  }
  std::map<std::string, EmbeddingMatrix> mats;
  for (const auto& s : layout.slots) {
    auto it = files.find(s.model_id);
    if (it == files.end()) detail::fail("missing_slot:" + s.model_id, "no input for slot '" + s.model_id + "'");
    mats.emplace(s.model_id, load_embeddings(it->second));
    p.add_input(it->second);
  }
  const EmbeddingMatrix y = compose(layout, mats, {.l2_normalize_slots = a.l2_normalize_slots});
  detail::ensure_parent(a.out);
  save_embeddings(y, a.out);
  p.add_output(a.out);
  const fs::path prov = a.out.string() + ".prov.json";
  write_provenance(p, prov);
  return {{"command", "compose"}, {"n_rows", y.n_rows()}, {"n_cols", y.n_cols()},
          {"outputs", detail::path_strings({a.out, prov})}};
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  fs::path tasks;
  fs::path out;
  std::uint64_t seed = 0;
  std::optional<fs::path> features;  // substituted for "@ensemble" references
  std::optional<fs::path> leaderboard;
  std::string team = "geoemb";
};

inline EvaluationReport evaluate_tasks(const std::vector<TaskSpec>& specs, std::uint64_t seed,
                                       const std::map<std::string, EmbeddingMatrix>& named,
                                       const std::optional<LeaderboardMatrix>& board, const std::string& team) {
  EvaluationReport rep;
  std::vector<double> scores;
  for (const auto& s : specs) {
    const Task t = load_task(s, named);
    rep.tasks.push_back(evaluate_task(t, s.test_fraction, s.ridge, s.logistic, seed));
    scores.push_back(rep.tasks.back().score);
  }
  rep.q_mean = q_mean(scores);
  if (board) attach_leaderboard(rep, *board, team);
  return rep;
}

inline void add_task_inputs(Provenance& p, const std::vector<TaskSpec>& specs) {
  for (const auto& s : specs) {
    if (!s.features.string().starts_with('@')) p.add_input(s.features);
    p.add_input(s.targets);
  }
}

inline Json cmd_evaluate(const EvaluateArgs& a) {
  const auto specs = parse_task_descriptors(detail::read_json(a.tasks, "invalid_config"), a.tasks.parent_path());
  std::map<std::string, EmbeddingMatrix> named;
  if (a.features) named.emplace("ensemble", load_embeddings(*a.features));
  std::optional<LeaderboardMatrix> board;
  if (a.leaderboard) board = parse_leaderboard(detail::read_json(*a.leaderboard, "invalid_board"));
  const EvaluationReport rep = evaluate_tasks(specs, a.seed, named, board, a.team);
  detail::ensure_parent(a.out);
  detail::write_json(a.out, to_json(rep));

  Provenance p{"evaluate", a.seed, {{"team", a.team}}};
  p.add_input(a.tasks);
  if (a.features) p.add_input(*a.features);
  if (a.leaderboard) p.add_input(*a.leaderboard);
  add_task_inputs(p, specs);
  p.add_output(a.out);
  const fs::path prov = a.out.string() + ".prov.json";
  write_provenance(p, prov);
  Json j = {{"command", "evaluate"}, {"q_mean", rep.q_mean}, {"outputs", detail::path_strings({a.out, prov})}};
  return j;
}

// ---------------------------------------------------------------------------
// adapt

struct AdaptArgs {
  fs::path in;
  fs::path out;
  std::size_t target_in = 128;
  ScalePolicy policy = ScalePolicy::none;
};

inline Json cmd_adapt(const AdaptArgs& a) {
  const ConvWeight w = load_conv_weight(a.in);
  const ChannelExpansion r = expand_channels_with_report(w, a.target_in, a.policy);
  detail::ensure_parent(a.out);
  save_conv_weight(r.weight, a.out);
  Json report = {{"source_in", w.in_channels()}, {"target_in", a.target_in}, {"policy", to_string(a.policy)},
                 {"scale", r.scale},             {"replication", r.replication}, {"mismatch_bound", r.mismatch_bound}};
  Provenance p{"adapt", std::nullopt, report};
  p.add_input(a.in);
  p.add_output(a.out);
  const fs::path prov = a.out.string() + ".prov.json";
  write_provenance(p, prov);
  return {{"command", "adapt"}, {"report", report}, {"outputs", detail::path_strings({a.out, prov})}};
}

// ---------------------------------------------------------------------------
// caption

struct CaptionArgs {
  fs::path metadata;
  fs::path out;
  CaptionKind kind = CaptionKind::latlon;
  CaptionConfig config;
};

inline Json cmd_caption(const CaptionArgs& a) {
  const auto rows = load_metadata(a.metadata);
  std::string text;
  for (const auto& line : captions_for(rows, a.kind, a.config)) text += line + "\n";
  detail::ensure_parent(a.out);
  detail::write_all(a.out, text);
  Provenance p{"caption", std::nullopt,
               {{"kind", a.kind == CaptionKind::latlon ? "latlon" : "regression"},
                {"verbatim_spelling", a.config.verbatim_spelling},
                {"decimal_places", a.config.decimal_places}}};
  p.add_input(a.metadata);
  p.add_output(a.out);
  const fs::path prov = a.out.string() + ".prov.json";
  write_provenance(p, prov);
  return {{"command", "caption"}, {"n_captions", rows.size()}, {"outputs", detail::path_strings({a.out, prov})}};
}

// ---------------------------------------------------------------------------
// verify

inline Json cmd_verify(const fs::path& record) {
  const auto bad = verify_provenance(record);
  if (!bad.empty()) {
    std::string msg = std::to_string(bad.size()) + " file(s) differ from the record, first: " + bad[0].path;
    detail::fail("provenance_mismatch", msg);
  }
  return {{"command", "verify"}, {"verified", true}};
}

// ---------------------------------------------------------------------------
// pipeline

struct PipelineConfig {
  fs::path config_path;  // empty when built in code
  fs::path manifest;
  EnsembleLayout layout = default_layout();
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> output_dir;

  std::map<std::string, std::vector<std::size_t>> candidates;  // empty: use layout widths
  int k_clusters = kDefaultQualityClusters;
  double mu = 1.0;
  bool l2_normalize_inputs = false;

  bool refine = true;
  std::string refine_model = "georsclip";
  int n_pseudo_clusters = kDefaultPseudoClusters;
  Linkage linkage = Linkage::ward;
  RefinerConfig refiner;

  bool l2_normalize_slots = false;

  std::optional<fs::path> tasks;
  std::optional<fs::path> leaderboard;
  std::string team = "geoemb";
};

namespace detail {

inline void reject_unknown_keys(const Json& j, std::initializer_list<std::string_view> known, const std::string& where) {
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      fail("invalid_config", "unknown key '" + key + "' in " + where);
}

}  // namespace detail

/// See README for the grammar. Relative paths resolve against base_dir.
inline PipelineConfig parse_pipeline_config(const Json& j, const fs::path& base_dir = {}) {
  if (!j.is_object()) detail::fail("invalid_config", "pipeline config must be a JSON object");
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  PipelineConfig c;
  try {
    detail::reject_unknown_keys(j, {"manifest", "layout", "seed", "output_dir", "compression", "refiner", "compose",
                                    "evaluation"},
                                "config");
    c.manifest = resolve(j.at("manifest").get<std::string>());
    if (j.contains("layout")) c.layout = parse_layout(j["layout"]);
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("output_dir")) c.output_dir = resolve(j["output_dir"].get<std::string>());
    if (j.contains("compression")) {
      const Json& s = j["compression"];
      detail::reject_unknown_keys(s, {"candidates", "k_clusters", "mu", "l2_normalize"}, "compression");
      if (s.contains("candidates")) c.candidates = parse_candidates(s["candidates"]);
      c.k_clusters = s.value("k_clusters", c.k_clusters);
      c.mu = s.value("mu", c.mu);
      c.l2_normalize_inputs = s.value("l2_normalize", c.l2_normalize_inputs);
    }
    if (j.contains("refiner")) {
      const Json& s = j["refiner"];
      detail::reject_unknown_keys(s, {"enabled", "model", "n_pseudo_clusters", "linkage", "learning_rate", "epochs",
                                      "batch_size", "l2_penalty", "momentum", "init_scale"},
                                  "refiner");
      c.refine = s.value("enabled", c.refine);
      c.refine_model = s.value("model", c.refine_model);
      c.n_pseudo_clusters = s.value("n_pseudo_clusters", c.n_pseudo_clusters);
      if (s.contains("linkage")) c.linkage = parse_linkage(s["linkage"].get<std::string>());
      c.refiner.learning_rate = s.value("learning_rate", c.refiner.learning_rate);
      c.refiner.epochs = s.value("epochs", c.refiner.epochs);
      c.refiner.batch_size = s.value("batch_size", c.refiner.batch_size);
      c.refiner.l2_penalty = s.value("l2_penalty", c.refiner.l2_penalty);
      c.refiner.momentum = s.value("momentum", c.refiner.momentum);
      c.refiner.init_scale = s.value("init_scale", c.refiner.init_scale);
    }
    if (j.contains("compose")) {
      detail::reject_unknown_keys(j["compose"], {"l2_normalize_slots"}, "compose");
      c.l2_normalize_slots = j["compose"].value("l2_normalize_slots", false);
    }
    if (j.contains("evaluation")) {
      const Json& s = j["evaluation"];
      detail::reject_unknown_keys(s, {"tasks", "leaderboard", "team"}, "evaluation");
      c.tasks = resolve(s.at("tasks").get<std::string>());
      if (s.contains("leaderboard")) c.leaderboard = resolve(s["leaderboard"].get<std::string>());
      c.team = s.value("team", c.team);
    }
  } catch (const Json::exception& e) {
    detail::fail("invalid_config", std::string("pipeline config: ") + e.what());
  }
  return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  PipelineConfig c = parse_pipeline_config(detail::read_json(path, "invalid_config"), path.parent_path());
  c.config_path = path;
  return c;
}

namespace detail {

template <class Fn>
auto run_stage(const std::string& stage, Fn&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e);
  }
}

}  // namespace detail

/// Compress every slot (per plan), refine the seasonal slots, compose,
/// optionally evaluate. Stage seeds: derive_seed(seed, "search"),
/// derive_seed(seed, "compress:<slot>"), derive_seed(seed, "refiner"),
/// derive_seed(seed, "evaluate").
inline Json cmd_pipeline(const PipelineConfig& cfg) {
  const auto [seed, out_dir, manifest] = detail::run_stage("validate", [&] {
    if (!cfg.seed) detail::fail("invalid_config", "a seed is required (config 'seed' or --seed)");
    const auto dir = default_out_dir(cfg.output_dir);
    if (!dir) detail::fail("invalid_config", "no output directory (config 'output_dir', --out-dir or GEOEMB_OUT_DIR)");
    cfg.layout.validate();
    if (!fs::exists(cfg.manifest)) detail::fail("missing_file", "manifest not found: " + cfg.manifest.string());
    Manifest m = load_manifest(cfg.manifest);
    for (const auto& s : cfg.layout.slots) {
      const ManifestEntry* e = m.find(s.model_id);
      if (!e) detail::fail("missing_slot:" + s.model_id, "manifest has no embeddings for slot '" + s.model_id + "'");
      if (!fs::exists(e->path)) detail::fail("missing_file", "embeddings not found: " + e->path.string());
    }
    for (const auto& [id, _] : cfg.candidates)
      if (!cfg.layout.find(id)) detail::fail("invalid_config", "candidates for '" + id + "', which has no slot");
    for (const auto& p : {cfg.tasks, cfg.leaderboard})
      if (p && !fs::exists(*p)) detail::fail("missing_file", "file not found: " + p->string());
    return std::tuple{*cfg.seed, *dir, m};
  });

  Provenance prov{"pipeline", seed};
  if (!cfg.config_path.empty()) prov.add_input(cfg.config_path);
  prov.add_input(cfg.manifest);
  Json stage_seeds = Json::object();

  std::map<std::string, EmbeddingMatrix> inputs;
  detail::run_stage("load", [&] {
    for (const auto& s : cfg.layout.slots) {
      const fs::path& path = manifest.find(s.model_id)->path;
      EmbeddingMatrix x = load_embeddings(path);
      if (cfg.l2_normalize_inputs) x = l2_normalize_rows(x);
      inputs.emplace(s.model_id, std::move(x));
      prov.add_input(path);
    }
    const auto& first = inputs.at(cfg.layout.slots[0].model_id);
    for (const auto& [id, x] : inputs) {
      if (x.n_rows() != first.n_rows()) detail::fail("row_count_mismatch", "slot '" + id + "' has a different n_rows");
      if (x.row_ids() && first.row_ids() && *x.row_ids() != *first.row_ids())
        detail::fail("row_id_mismatch", "slot '" + id + "' rows are not aligned");
    }
  });
  fs::create_directories(out_dir / "models");

  // plan: searched widths when candidates are given, otherwise the layout's
  Json plan_json;
  EnsembleLayout layout = cfg.layout;
  detail::run_stage("search", [&] {
    if (cfg.candidates.empty()) {
      Json dims = Json::object();
      for (const auto& s : layout.slots) dims[s.model_id] = s.width();
      plan_json = {{"searched", false}, {"dims", dims}, {"total_budget", layout.total_dim()}};
      return;
    }
    std::map<std::string, std::vector<std::size_t>> cands;
    for (const auto& s : layout.slots) {
      auto it = cfg.candidates.find(s.model_id);
      cands[s.model_id] = it == cfg.candidates.end() ? std::vector<std::size_t>{s.width()} : it->second;
    }
    const std::uint64_t search_seed = derive_seed(seed, "search");
    stage_seeds["search"] = search_seed;
    const CompressionPlan plan =
        search_rates(inputs, cands, layout.total_dim(), cfg.k_clusters, search_seed, {.mu = cfg.mu});
    plan_json = to_json(plan);
    plan_json["searched"] = true;
    std::vector<std::pair<std::string, std::size_t>> widths;
    for (const auto& s : layout.slots) widths.emplace_back(s.model_id, plan.dims.at(s.model_id));
    EnsembleLayout planned = layout_from_widths(widths);
    for (std::size_t i = 0; i < planned.slots.size(); ++i) planned.slots[i].source_dim = layout.slots[i].source_dim;
    layout = planned;
  });
  plan_json["layout"] = to_json(layout);
  const fs::path plan_path = out_dir / "plan.json";
  detail::write_json(plan_path, plan_json);
  prov.add_output(plan_path);

  std::map<std::string, EmbeddingMatrix> compressed;
  for (const auto& s : layout.slots) {
    detail::run_stage("compress:" + s.model_id, [&] {
      const std::uint64_t st = derive_seed(seed, "compress:" + s.model_id);
      stage_seeds["compress:" + s.model_id] = st;
      const EmbeddingMatrix& x = inputs.at(s.model_id);
      const SvdModel model = fit_truncated_svd(x, s.width(), st);
      compressed.emplace(s.model_id, transform(model, x));
      const fs::path model_path = out_dir / "models" / (s.model_id + ".svd");
      save_svd_model(model, model_path);
      prov.add_output(model_path);
    });
  }

  Json refine_json = nullptr;
  if (cfg.refine) {
    detail::run_stage("refine", [&] {
      std::vector<EmbeddingMatrix> seasons;
      std::vector<std::string> keys;
      for (auto season : kSeasonOrder) {
        keys.push_back(cfg.refine_model + "_" + std::string(season));
        auto it = compressed.find(keys.back());
        if (it == compressed.end())
          detail::fail("missing_slot:" + keys.back(), "refinement needs slot '" + keys.back() + "'");
        seasons.push_back(it->second);
      }
      RefinerConfig rc = cfg.refiner;
      rc.seed = derive_seed(seed, "refiner");
      stage_seeds["refiner"] = rc.seed;
      const RefineOutcome r = refine_seasons(seasons, cfg.n_pseudo_clusters, cfg.linkage, rc);
      for (std::size_t s = 0; s < kSeasonCount; ++s) {
        EmbeddingMatrix refined = r.refined[s];
        refined.set_model_id(keys[s]);
        compressed.at(keys[s]) = std::move(refined);
      }
      const fs::path map_path = out_dir / "refiner.map";
      const fs::path trace_path = out_dir / "loss_trace.jsonl";
      save_linear_map(r.state.map, map_path);
      detail::write_all(trace_path, loss_trace_jsonl(r.state));
      prov.add_output(map_path);
      prov.add_output(trace_path);
      refine_json = refiner_params(cfg.refiner, cfg.n_pseudo_clusters, cfg.linkage);
      refine_json["model"] = cfg.refine_model;
      refine_json["final_loss"] = r.state.loss_trace.back();
      refine_json["map_conditioning"] = map_conditioning(r.state.map);
    });
  }

  const fs::path ensemble_path = out_dir / "ensemble.emb";
  const EmbeddingMatrix ensemble = detail::run_stage("compose", [&] {
    EmbeddingMatrix y = compose(layout, compressed, {.l2_normalize_slots = cfg.l2_normalize_slots});
    save_embeddings(y, ensemble_path);
    return y;
  });
  prov.add_output(ensemble_path);

  Json eval_json = nullptr;
  if (cfg.tasks) {
    detail::run_stage("evaluate", [&] {
      const auto specs = parse_task_descriptors(detail::read_json(*cfg.tasks, "invalid_config"), cfg.tasks->parent_path());
      std::optional<LeaderboardMatrix> board;
      if (cfg.leaderboard) board = parse_leaderboard(detail::read_json(*cfg.leaderboard, "invalid_board"));
      const std::uint64_t es = derive_seed(seed, "evaluate");
      stage_seeds["evaluate"] = es;
      const EvaluationReport rep = evaluate_tasks(specs, es, {{"ensemble", ensemble}}, board, cfg.team);
      const fs::path report_path = out_dir / "report.json";
      detail::write_json(report_path, to_json(rep));
      prov.add_input(*cfg.tasks);
      if (cfg.leaderboard) prov.add_input(*cfg.leaderboard);
      add_task_inputs(prov, specs);
      prov.add_output(report_path);
      eval_json = rep.q_mean;
    });
  }

  prov.params = {{"layout", to_json(layout)},
                 {"stage_seeds", stage_seeds},
                 {"k_clusters", cfg.k_clusters},
                 {"mu", cfg.mu},
                 {"l2_normalize_inputs", cfg.l2_normalize_inputs},
                 {"l2_normalize_slots", cfg.l2_normalize_slots},
                 {"refiner", refine_json}};
  const fs::path prov_path = out_dir / "provenance.json";
  const Json record = write_provenance(prov, prov_path);

  Json outputs = Json::object();
  for (const auto& o : record["outputs"]) outputs[o["path"].get<std::string>()] = o["sha256"];
  Json summary = {{"command", "pipeline"}, {"out_dir", out_dir.generic_string()}, {"n_rows", ensemble.n_rows()},
                  {"n_cols", ensemble.n_cols()}, {"outputs", outputs}};
  if (!refine_json.is_null()) summary["refiner_final_loss"] = refine_json["final_loss"];
  if (!eval_json.is_null()) summary["q_mean"] = eval_json;
  return summary;
}

}  // namespace geoemb
