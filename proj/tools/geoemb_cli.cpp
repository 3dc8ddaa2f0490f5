// geoemb: command-line front end.
//
// Exit status: 0 success, 1 domain error (JSON record on stderr), 2 usage.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "geoemb/commands.hpp"

using namespace geoemb;

namespace {

std::vector<std::size_t> parse_dims(const std::string& csv) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const std::size_t comma = std::min(csv.find(',', pos), csv.size());
    const std::string item = csv.substr(pos, comma - pos);
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (item.empty() || used != item.size()) throw CLI::ValidationError("--dims", "'" + csv + "' is not a list of integers");
    out.push_back(static_cast<std::size_t>(v));
    pos = comma + 1;
  }
  return out;
}

void print_error(const std::string& code, const std::string& message, const std::string& stage = {}) {
  nlohmann::json j = {{"error", code}, {"message", message}};
  if (!stage.empty()) j["stage"] = stage;
  std::cerr << j.dump() << "\n";
}

void add_refiner_flags(CLI::App* cmd, RefinerConfig& c) {
  cmd->add_option("--lr", c.learning_rate, "learning rate")->capture_default_str();
  cmd->add_option("--epochs", c.epochs, "training epochs")->capture_default_str();
  cmd->add_option("--batch-size", c.batch_size, "mini-batch size, 0 = full batch")->capture_default_str();
  cmd->add_option("--l2", c.l2_penalty, "L2 penalty on map and probe")->capture_default_str();
  cmd->add_option("--momentum", c.momentum, "heavy-ball momentum")->capture_default_str();
  cmd->add_option("--init-scale", c.init_scale, "probe init half-width")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"geoemb: compressive embedding ensembles for geospatial data cubes"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  nlohmann::json summary;
  std::function<nlohmann::json()> action;

  // compress
  CompressArgs ca;
  std::string ca_model, ca_quality;
  auto* compress = app.add_subcommand("compress", "truncated SVD of one embedding file");
  compress->add_option("--in", ca.in, "input EMB1 file")->required();
  compress->add_option("--out", ca.out, "compressed EMB1 output")->required();
  compress->add_option("--k", ca.k, "target dimension")->required();
  compress->add_option("--seed", ca.seed, "seed")->required();
  compress->add_option("--model-out", ca_model, "SVD model file (default <out stem>.svd)");
  compress->add_option("--quality-out", ca_quality, "quality record (default <out stem>.quality.json)");
  compress->add_option("--k-clusters", ca.k_clusters, "k-means clusters for the silhouette check")->capture_default_str();
  compress->add_flag("--l2-normalize", ca.l2_normalize, "L2-normalise rows before the SVD");
  compress->callback([&] {
    if (!ca_model.empty()) ca.model_out = ca_model;
    if (!ca_quality.empty()) ca.quality_out = ca_quality;
    action = [&] { return cmd_compress(ca); };
  });

  // quality
  QualityArgs qa;
  std::string qa_dims, qa_metric = "euclidean";
  auto* quality = app.add_subcommand("quality", "MSE and silhouette over candidate target dims");
  quality->add_option("--in", qa.in, "input EMB1 file")->required();
  quality->add_option("--out", qa.out, "report JSON")->required();
  quality->add_option("--dims", qa_dims, "comma-separated target dims")->required();
  quality->add_option("--seed", qa.seed, "seed")->required();
  quality->add_option("--k-clusters", qa.k_clusters, "k-means clusters")->capture_default_str();
  quality->add_option("--metric", qa_metric, "euclidean or cosine")->check(CLI::IsMember({"euclidean", "cosine"}));
  quality->callback([&] {
    qa.dims = parse_dims(qa_dims);
    qa.metric = parse_metric(qa_metric);
    action = [&] { return cmd_quality(qa); };
  });

  // search
  SearchArgs sa;
  auto* search = app.add_subcommand("search", "exhaustive per-model compression-rate search");
  search->add_option("--manifest", sa.manifest, "manifest JSON")->required();
  search->add_option("--candidates", sa.candidates, "JSON object: slot -> candidate dims")->required();
  search->add_option("--budget", sa.budget, "total width the dims must sum to")->required();
  search->add_option("--out", sa.out, "plan JSON")->required();
  search->add_option("--seed", sa.seed, "seed")->required();
  search->add_option("--k-clusters", sa.k_clusters, "k-means clusters")->capture_default_str();
  search->add_option("--mu", sa.mu, "weight of the normalized MSE term")->capture_default_str();
  search->callback([&] { action = [&] { return cmd_search(sa); }; });

  // refine
  RefineArgs ra;
  std::string ra_out, ra_linkage = "ward";
  auto* refine = app.add_subcommand("refine", "tied linear map trained on seasonal pseudolabels");
  refine->add_option("--spring", ra.seasons[0], "spring embeddings")->required();
  refine->add_option("--summer", ra.seasons[1], "summer embeddings")->required();
  refine->add_option("--fall", ra.seasons[2], "fall embeddings")->required();
  refine->add_option("--winter", ra.seasons[3], "winter embeddings")->required();
  refine->add_option("--out-dir", ra_out, "output directory (default $GEOEMB_OUT_DIR)");
  refine->add_option("--seed", ra.config.seed, "seed")->required();
  refine->add_option("--clusters", ra.n_pseudo_clusters, "pseudolabel clusters")->capture_default_str();
  refine->add_option("--linkage", ra_linkage, "ward, average, complete or single")
      ->check(CLI::IsMember({"ward", "average", "complete", "single"}));
  add_refiner_flags(refine, ra.config);
  refine->callback([&] {
    ra.linkage = parse_linkage(ra_linkage);
    const auto dir = default_out_dir(ra_out.empty() ? std::nullopt : std::optional<fs::path>(ra_out));
    if (!dir) throw CLI::RequiredError("--out-dir (or GEOEMB_OUT_DIR)");
    ra.out_dir = *dir;
    action = [&] { return cmd_refine(ra); };
  });

  // compose
  ComposeArgs co;
  std::string co_layout = "table1", co_manifest;
  std::vector<std::string> co_inputs;
  auto* comp = app.add_subcommand("compose", "concatenate compressed slots into the ensemble");
  comp->add_option("--layout", co_layout, "\"table1\" or a layout JSON file")->capture_default_str();
  comp->add_option("--in", co_inputs, "slot=path, repeatable");
  comp->add_option("--manifest", co_manifest, "manifest for slots not given with --in");
  comp->add_option("--out", co.out, "ensemble EMB1 output")->required();
  comp->add_flag("--l2-normalize-slots", co.l2_normalize_slots, "unit-normalise each slot's rows");
  comp->callback([&] {
    for (const auto& s : co_inputs) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw CLI::ValidationError("--in", "expected slot=path, got '" + s + "'");
      co.inputs.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    if (!co_manifest.empty()) co.manifest = co_manifest;
    action = [&] {
      co.layout = co_layout == "table1" ? nlohmann::json("table1") : detail::read_json(co_layout, "invalid_layout");
      return cmd_compose(co);
    };
  });

  // evaluate
  EvaluateArgs ea;
  std::string ea_features, ea_board;
  auto* evaluate = app.add_subcommand("evaluate", "bias-free probes on downstream tasks");
  evaluate->add_option("--tasks", ea.tasks, "task descriptor JSON")->required();
  evaluate->add_option("--out", ea.out, "report JSON")->required();
  evaluate->add_option("--seed", ea.seed, "seed")->required();
  evaluate->add_option("--features", ea_features, "EMB1 file used for \"@ensemble\" feature references");
  evaluate->add_option("--leaderboard", ea_board, "leaderboard JSON for the task-balanced score");
  evaluate->add_option("--team", ea.team, "our row's name on the leaderboard")->capture_default_str();
  evaluate->callback([&] {
    if (!ea_features.empty()) ea.features = ea_features;
    if (!ea_board.empty()) ea.leaderboard = ea_board;
    action = [&] { return cmd_evaluate(ea); };
  });

  // adapt
  AdaptArgs aa;
  std::string aa_policy = "none";
  auto* adapt = app.add_subcommand("adapt", "tile first-layer conv weights to more input channels");
  adapt->add_option("--in", aa.in, "cw4d weight file")->required();
  adapt->add_option("--out", aa.out, "expanded cw4d weight file")->required();
  adapt->add_option("--target-in", aa.target_in, "input channels after expansion")->capture_default_str();
  adapt->add_option("--policy", aa_policy, "none or preserve_sum")
      ->check(CLI::IsMember({"none", "preserve_sum"}))
      ->capture_default_str();
  adapt->callback([&] {
    aa.policy = parse_scale_policy(aa_policy);
    action = [&] { return cmd_adapt(aa); };
  });

  // caption
  CaptionArgs cp;
  std::string cp_kind = "latlon";
  bool cp_corrected = false;
  auto* caption = app.add_subcommand("caption", "caption strings from the metadata CSV");
  caption->add_option("--metadata", cp.metadata, "metadata CSV")->required();
  caption->add_option("--out", cp.out, "captions, one line per sample")->required();
  caption->add_option("--kind", cp_kind, "latlon or regression")
      ->check(CLI::IsMember({"latlon", "regression"}))
      ->capture_default_str();
  caption->add_option("--decimal-places", cp.config.decimal_places, "digits after the point")
      ->check(CLI::Range(0, 12))
      ->capture_default_str();
  caption->add_flag("--corrected-spelling", cp_corrected, "Latitude/Longitude instead of the released spelling");
  caption->callback([&] {
    cp.kind = parse_caption_kind(cp_kind);
    cp.config.verbatim_spelling = !cp_corrected;
    action = [&] { return cmd_caption(cp); };
  });

  // verify
  std::string vf;
  auto* verify = app.add_subcommand("verify", "re-hash the files named in a provenance record");
  verify->add_option("--provenance", vf, "provenance JSON")->required();
  verify->callback([&] { action = [&] { return cmd_verify(vf); }; });

  // pipeline
  std::string pl_config, pl_out;
  std::optional<std::uint64_t> pl_seed;
  auto* pipeline = app.add_subcommand("pipeline", "compress, refine and compose from one config");
  pipeline->add_option("--config", pl_config, "pipeline config JSON")->required();
  pipeline->add_option("--out-dir", pl_out, "output directory (overrides config)");
  pipeline->add_option("--seed", pl_seed, "global seed (overrides config)");
  pipeline->callback([&] {
    action = [&] {
      PipelineConfig cfg;
      try {
        cfg = load_pipeline_config(pl_config);
      } catch (const Error& e) {
        throw StageError("config", e);
      }
      if (!pl_out.empty()) cfg.output_dir = pl_out;
      if (pl_seed) cfg.seed = pl_seed;
      return cmd_pipeline(cfg);
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const Error& e) {  // raised while interpreting flag values
    print_error(e.code(), e.what());
    return 2;
  }

  try {
    summary = action();
  } catch (const StageError& e) {
    print_error(e.code(), e.what(), e.stage());
    return 1;
  } catch (const Error& e) {
    print_error(e.code(), e.what());
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    print_error("io_error", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal_error", e.what());
    return 1;
  }
  std::cout << summary.dump() << "\n";
  return 0;
}
