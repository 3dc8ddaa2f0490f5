#pragma once

// Downstream probing and leaderboard scoring.
//
// Probes never carry an intercept: predictions are x·w (regression) and
// argmax(x·Pᵀ) (classification).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geoemb/compressor.hpp"
#include "geoemb/embedding_store.hpp"
#include "geoemb/error.hpp"
#include "geoemb/linalg.hpp"
#include "geoemb/probe.hpp"
#include "geoemb/rng.hpp"

namespace geoemb {

// ---------------------------------------------------------------------------
// linear probe

/// w = (XᵀX + λI)⁻¹ Xᵀy in double precision.
inline std::vector<double> fit_linear_probe_no_bias(const linalg::Mat& x, std::span<const double> y, double ridge) {
  if (x.rows() != y.size()) detail::fail("label_mismatch", "targets length differs from n_rows");
  if (!(ridge >= 0.0)) detail::fail("invalid_argument", "ridge must be >= 0");
  if (x.rows() == 0 || x.cols() == 0) detail::fail("empty_input", "linear probe needs data");
  linalg::Mat gram = linalg::matmul_at(x, x);
  for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) += ridge;
  std::vector<double> rhs(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) rhs[c] += xr[c] * y[r];
  }
  return linalg::cholesky_solve(std::move(gram), std::move(rhs));
}

inline std::vector<double> fit_linear_probe_no_bias(const EmbeddingMatrix& x, std::span<const double> y, double ridge) {
  return fit_linear_probe_no_bias(detail::to_mat(x), y, ridge);
}

/// Same objective by plain gradient descent on (|Xw - y|² + λ|w|²) / 2N.
/// Mostly useful as a cross-check of the closed form.
inline std::vector<double> fit_linear_probe_gd(const linalg::Mat& x, std::span<const double> y, double ridge, int iters,
                                               double lr) {
  if (x.rows() != y.size()) detail::fail("label_mismatch", "targets length differs from n_rows");
  if (x.rows() == 0) detail::fail("empty_input", "linear probe needs data");
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  std::vector<double> w(x.cols(), 0.0), grad(x.cols());
  for (int it = 0; it < iters; ++it) {
    for (std::size_t c = 0; c < w.size(); ++c) grad[c] = ridge * w[c];
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto xr = x.row(r);
      const double resid = std::inner_product(xr.begin(), xr.end(), w.begin(), 0.0) - y[r];
      for (std::size_t c = 0; c < w.size(); ++c) grad[c] += resid * xr[c];
    }
    for (std::size_t c = 0; c < w.size(); ++c) w[c] -= lr * inv_n * grad[c];
  }
  return w;
}

inline std::vector<double> predict_linear(const linalg::Mat& x, std::span<const double> w) {
  if (x.cols() != w.size()) detail::fail("dimension_mismatch", "weight length differs from n_cols");
  std::vector<double> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) out[r] = std::inner_product(w.begin(), w.end(), x.row(r).begin(), 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// logistic probe

struct LogisticOptions {
  double ridge = 1e-4;
  int iters = 200;
  double lr = 0.1;
  std::uint64_t seed = 0;
  double momentum = 0.0;
  double init_scale = kDefaultInitScale;
};

struct LogisticFit {
  ProbeWeights probe;
  double final_loss = 0.0;          // cross-entropy after the last step
  std::vector<double> loss_trace;   // cross-entropy before each step
};

struct LogisticGrads {
  double loss = 0.0;  // cross-entropy + ridge/2 |W|²
  double cross_entropy = 0.0;
  linalg::Mat grad;
};

inline LogisticGrads logistic_loss_and_grad(const ProbeWeights& probe, const linalg::Mat& x, std::span<const int> y,
                                            double ridge) {
  if (probe.n_features() != x.cols()) detail::fail("dimension_mismatch", "probe width differs from n_cols");
  const SoftmaxXent sx = softmax_cross_entropy(linalg::matmul_bt(x, probe.w), y);
  LogisticGrads g{sx.loss + 0.5 * ridge * linalg::frobenius_sq(probe.w), sx.loss, linalg::matmul_at(sx.dlogits, x)};
  if (ridge != 0.0)
    for (std::size_t i = 0; i < g.grad.size(); ++i) g.grad.data()[i] += ridge * probe.w.data()[i];
  return g;
}

/// Multinomial logistic regression without intercept, full-batch gradient
/// descent from a seeded small-uniform start.
inline LogisticFit fit_logistic_probe_no_bias(const linalg::Mat& x, std::span<const int> y,
                                              const LogisticOptions& opt = {}) {
  if (x.rows() != y.size()) detail::fail("label_mismatch", "labels length differs from n_rows");
  if (opt.iters < 1 || !(opt.lr > 0.0) || !(opt.ridge >= 0.0) || !(opt.momentum >= 0.0 && opt.momentum < 1.0))
    detail::fail("invalid_config", "logistic probe needs iters >= 1, lr > 0, ridge >= 0, momentum in [0, 1)");
  const int c = count_classes(y);
  std::vector<bool> seen(static_cast<std::size_t>(c), false);
  for (int l : y) seen[static_cast<std::size_t>(l)] = true;
  if (std::count(seen.begin(), seen.end(), true) < 2) detail::fail("single_class", "need at least two classes");

  LogisticFit fit;
  fit.probe.w = small_uniform(static_cast<std::size_t>(c), x.cols(), opt.seed, opt.init_scale);
  linalg::Mat vel(fit.probe.w.rows(), fit.probe.w.cols());
  for (int it = 0; it < opt.iters; ++it) {
    const LogisticGrads g = logistic_loss_and_grad(fit.probe, x, y, opt.ridge);
    if (!std::isfinite(g.loss)) detail::fail("non_finite_loss", "loss became non-finite at iteration " + std::to_string(it));
    fit.loss_trace.push_back(g.cross_entropy);
    for (std::size_t i = 0; i < vel.size(); ++i) {
      double& v = vel.data()[i];
      v = opt.momentum * v + g.grad.data()[i];
      fit.probe.w.data()[i] -= opt.lr * v;
    }
  }
  fit.final_loss = softmax_cross_entropy(linalg::matmul_bt(x, fit.probe.w), y).loss;
  return fit;
}

inline LogisticFit fit_logistic_probe_no_bias(const EmbeddingMatrix& x, std::span<const int> y,
                                              const LogisticOptions& opt = {}) {
  return fit_logistic_probe_no_bias(detail::to_mat(x), y, opt);
}

inline std::vector<int> predict_classes(const linalg::Mat& x, const ProbeWeights& probe) {
  if (probe.n_features() != x.cols()) detail::fail("dimension_mismatch", "probe width differs from n_cols");
  return argmax_rows(linalg::matmul_bt(x, probe.w));
}

// ---------------------------------------------------------------------------
// per-task scores

enum class TaskKind { classification, regression };

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "regression") return TaskKind::regression;
  detail::fail("invalid_task_kind", "unknown task kind '" + std::string(s) + "'");
}

inline std::string_view to_string(TaskKind k) { return k == TaskKind::classification ? "classification" : "regression"; }

struct Task {
  std::string name;
  TaskKind kind = TaskKind::classification;
  EmbeddingMatrix features;
  std::vector<double> targets;  // class indices are stored as exact integers

  [[nodiscard]] std::string_view metric() const { return kind == TaskKind::classification ? "accuracy" : "r2"; }
};

inline double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) detail::fail("misaligned", "prediction and target lengths differ");
  if (truth.empty()) detail::fail("empty_input", "no samples to score");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

/// 1 - SS_res / SS_tot against the mean of `truth`. A constant target scores
/// 1 when predicted exactly and 0 otherwise.
inline double r2_score(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size()) detail::fail("misaligned", "prediction and target lengths differ");
  if (truth.empty()) detail::fail("empty_input", "no samples to score");
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - predicted[i]) * (truth[i] - predicted[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
  return 1.0 - ss_res / ss_tot;
}

inline std::vector<int> class_targets(std::span<const double> targets) {
  std::vector<int> out;
  out.reserve(targets.size());
  for (double t : targets) {
    if (!(t >= 0.0) || t != std::floor(t) || t > 1e9)
      detail::fail("label_out_of_range", "classification targets must be non-negative integers");
    out.push_back(static_cast<int>(t));
  }
  return out;
}

/// Accuracy or R² of predictions against the task's targets.
inline double score_task(const Task& task, std::span<const double> predictions) {
  if (predictions.size() != task.targets.size()) detail::fail("misaligned", "prediction and target lengths differ");
  if (task.kind == TaskKind::regression) return r2_score(predictions, task.targets);
  std::vector<int> pred;
  for (double p : predictions) pred.push_back(static_cast<int>(std::lround(p)));
  return accuracy(pred, class_targets(task.targets));
}

inline double q_mean(std::span<const double> scores) {
  if (scores.empty()) detail::fail("empty_input", "q_mean of no tasks");
  for (double s : scores)
    if (!std::isfinite(s)) detail::fail("non_finite", "task scores must be finite");
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// leaderboard

struct LeaderboardMatrix {
  std::vector<std::string> teams;
  std::vector<std::string> tasks;
  std::vector<std::vector<double>> scores;  // teams × tasks

  void validate() const {
    if (teams.size() < 2 || tasks.empty()) detail::fail("empty_board", "leaderboard needs >= 2 teams and >= 1 task");
    if (scores.size() != teams.size()) detail::fail("invalid_board", "one score row per team expected");
    for (const auto& row : scores) {
      if (row.size() != tasks.size()) detail::fail("invalid_board", "score rows must have one entry per task");
      for (double s : row)
        if (!std::isfinite(s)) detail::fail("non_finite", "leaderboard scores must be finite");
    }
  }
};

struct BalancedScores {
  std::vector<double> weights;      // per task, sums to 1
  std::vector<double> stddev;       // population std per task
  std::vector<double> team_scores;  // per team
};

inline constexpr double kEqualSpreadTolerance = 1e-12;  // relative

/// Tasks weighted by the spread of all teams' scores: w_t = σ_t / Σσ, with
/// uniform weights when no task has any spread.
inline BalancedScores task_balanced_q_mean(const LeaderboardMatrix& board) {
  board.validate();
  const std::size_t n_teams = board.teams.size();
  const std::size_t n_tasks = board.tasks.size();
  BalancedScores out;
  out.stddev.resize(n_tasks);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    const bool flat = std::all_of(board.scores.begin(), board.scores.end(),
                                  [&](const auto& row) { return row[t] == board.scores[0][t]; });
    if (flat) continue;  // exactly zero, not a rounding residue of the mean
    double mean = 0.0;
    for (const auto& row : board.scores) mean += row[t];
    mean /= static_cast<double>(n_teams);
    double var = 0.0;
    for (const auto& row : board.scores) var += (row[t] - mean) * (row[t] - mean);
    out.stddev[t] = std::sqrt(var / static_cast<double>(n_teams));
  }
  const double total = std::accumulate(out.stddev.begin(), out.stddev.end(), 0.0);
  // Spreads that agree up to rounding of the mean count as equal; otherwise
  // boards with mathematically equal spreads would miss q_mean by an ulp.
  const double largest = *std::max_element(out.stddev.begin(), out.stddev.end());
  const bool uniform = total == 0.0 || std::all_of(out.stddev.begin(), out.stddev.end(), [&](double s) {
                         return std::abs(s - largest) <= kEqualSpreadTolerance * largest;
                       });
  out.weights.resize(n_tasks);
  for (std::size_t t = 0; t < n_tasks; ++t)
    out.weights[t] = uniform ? 1.0 / static_cast<double>(n_tasks) : out.stddev[t] / total;
  for (const auto& row : board.scores) {
    if (uniform) {
      // same arithmetic as q_mean, so equal spreads reproduce it bit for bit
      out.team_scores.push_back(std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(n_tasks));
      continue;
    }
    double s = 0.0;
    for (std::size_t t = 0; t < n_tasks; ++t) s += out.weights[t] * row[t];
    out.team_scores.push_back(s);
  }
  return out;
}

/// 1-based rank of each team by descending score; ties share the better rank.
inline std::vector<int> rank_descending(std::span<const double> scores) {
  std::vector<int> rank(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    int better = 0;
    for (double s : scores) better += s > scores[i];
    rank[i] = better + 1;
  }
  return rank;
}

inline LeaderboardMatrix parse_leaderboard(const Json& j) {
  LeaderboardMatrix b;
  try {
    b.teams = j.at("teams").get<std::vector<std::string>>();
    b.tasks = j.at("tasks").get<std::vector<std::string>>();
    b.scores = j.at("scores").get<std::vector<std::vector<double>>>();
  } catch (const Json::exception& e) {
    detail::fail("invalid_board", std::string("leaderboard JSON: ") + e.what());
  }
  b.validate();
  return b;
}

inline Json to_json(const LeaderboardMatrix& b) {
  return {{"teams", b.teams}, {"tasks", b.tasks}, {"scores", b.scores}};
}

// ---------------------------------------------------------------------------
// task descriptors and reports

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::classification;
  fs::path features;
  fs::path targets;
  double test_fraction = 0.2;
  double ridge = 1e-4;
  LogisticOptions logistic;
};

struct TaskResult {
  std::string name;
  TaskKind kind = TaskKind::classification;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  double score = 0.0;
};

struct EvaluationReport {
  std::vector<TaskResult> tasks;
  double q_mean = 0.0;
  std::optional<LeaderboardMatrix> board;
  std::optional<BalancedScores> balanced;
};

/// Targets CSV: header `sample_id,target`, one row per sample.
inline std::vector<std::pair<std::string, double>> parse_targets_csv(std::string_view text) {
  std::vector<std::pair<std::string, double>> out;
  std::size_t line_no = 0, pos = 0;
  bool header = true;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = detail::trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const auto cells = detail::split_csv_line(line);
    if (header) {
      if (cells.size() != 2 || detail::trim(cells[0]) != "sample_id" || detail::trim(cells[1]) != "target")
        detail::fail("bad_targets", "targets CSV header must be 'sample_id,target'");
      header = false;
      continue;
    }
    if (cells.size() != 2) detail::fail("bad_targets", "line " + std::to_string(line_no) + ": expected 2 cells");
    const auto v = detail::parse_optional_double(cells[1], line_no);
    if (!v) detail::fail("bad_targets", "line " + std::to_string(line_no) + ": missing target");
    out.emplace_back(std::string(detail::trim(cells[0])), *v);
    if (end == text.size()) break;
  }
  if (header) detail::fail("bad_targets", "targets CSV is empty");
  return out;
}

/// Targets ordered like the feature rows: matched by id when the features
/// carry row ids, positionally otherwise.
inline std::vector<double> align_targets(const EmbeddingMatrix& features,
                                         const std::vector<std::pair<std::string, double>>& rows) {
  std::vector<double> out;
  if (!features.row_ids()) {
    if (rows.size() != features.n_rows()) detail::fail("misaligned", "target count differs from feature rows");
    for (const auto& r : rows) out.push_back(r.second);
    return out;
  }
  std::map<std::string, double> by_id;
  for (const auto& [id, v] : rows)
    if (!by_id.emplace(id, v).second) detail::fail("duplicate_row_id", "duplicate target id '" + id + "'");
  for (const auto& id : *features.row_ids()) {
    auto it = by_id.find(id);
    if (it == by_id.end()) detail::fail("missing_target", "no target for sample '" + id + "'");
    out.push_back(it->second);
  }
  return out;
}

/// `named` supplies the matrices behind "@name" feature references.
inline Task load_task(const TaskSpec& spec, const std::map<std::string, EmbeddingMatrix>& named = {}) {
  const std::string ref = spec.features.string();
  Task t{spec.name, spec.kind, {}, {}};
  if (ref.starts_with('@')) {
    auto it = named.find(ref.substr(1));
    if (it == named.end()) detail::fail("missing_features", "task '" + spec.name + "' refers to unknown " + ref);
    t.features = it->second;
  } else {
    t.features = load_embeddings(spec.features);
  }
  t.targets = align_targets(t.features, parse_targets_csv(detail::read_all(spec.targets)));
  if (t.kind == TaskKind::classification) class_targets(t.targets);
  return t;
}

/// {"tasks": [{"name", "kind", "features", "targets", "test_fraction"?, "ridge"?,
///             "iters"?, "lr"?, "momentum"?}, ...]}; paths relative to base_dir.
inline std::vector<TaskSpec> parse_task_descriptors(const Json& j, const fs::path& base_dir = {}) {
  std::vector<TaskSpec> out;
  try {
    for (const auto& e : j.at("tasks")) {
      TaskSpec s;
      s.name = e.at("name").get<std::string>();
      s.kind = parse_task_kind(e.at("kind").get<std::string>());
      s.features = e.at("features").get<std::string>();
      s.targets = e.at("targets").get<std::string>();
      // "@name" refers to a matrix supplied by the caller rather than a file
      if (s.features.is_relative() && !s.features.string().starts_with('@')) s.features = base_dir / s.features;
      if (s.targets.is_relative()) s.targets = base_dir / s.targets;
      s.test_fraction = e.value("test_fraction", s.test_fraction);
      s.ridge = e.value("ridge", s.ridge);
      s.logistic.ridge = s.ridge;
      s.logistic.iters = e.value("iters", s.logistic.iters);
      s.logistic.lr = e.value("lr", s.logistic.lr);
      s.logistic.momentum = e.value("momentum", s.logistic.momentum);
      if (!(s.test_fraction >= 0.0 && s.test_fraction < 1.0))
        detail::fail("invalid_config", "test_fraction must be in [0, 1)");
      for (const auto& prev : out)
        if (prev.name == s.name) detail::fail("invalid_config", "duplicate task name '" + s.name + "'");
      out.push_back(std::move(s));
    }
  } catch (const Json::exception& e) {
    detail::fail("invalid_config", std::string("task descriptor: ") + e.what());
  }
  if (out.empty()) detail::fail("empty_input", "no tasks in descriptor");
  return out;
}

/// Seeded split, probe fit on the train part, score on the test part. With
/// test_fraction 0 the probe is scored on its own training rows.
inline TaskResult evaluate_task(const Task& task, double test_fraction, double ridge, const LogisticOptions& logistic,
                                std::uint64_t seed) {
  const std::size_t n = task.features.n_rows();
  if (n != task.targets.size()) detail::fail("misaligned", "feature rows differ from target count");
  if (n == 0) detail::fail("empty_input", "task '" + task.name + "' has no samples");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "evaluator:split:" + task.name));
  rng.shuffle(order);
  std::size_t n_test = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(n)));
  if (n_test >= n) detail::fail("invalid_config", "test split leaves no training rows");
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  if (test.empty()) test = train;

  const linalg::Mat x = detail::to_mat(task.features);
  auto pick = [&](const std::vector<std::size_t>& idx) {
    linalg::Mat m(idx.size(), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy(x.row(idx[i]).begin(), x.row(idx[i]).end(), m.row(i).begin());
    std::vector<double> y;
    for (std::size_t i : idx) y.push_back(task.targets[i]);
    return std::pair{m, y};
  };
  auto [x_train, y_train] = pick(train);
  auto [x_test, y_test] = pick(test);

  TaskResult r{task.name, task.kind, train.size(), n_test, 0.0};
  if (task.kind == TaskKind::regression) {
    const auto w = fit_linear_probe_no_bias(x_train, y_train, ridge);
    r.score = r2_score(predict_linear(x_test, w), y_test);
  } else {
    LogisticOptions opt = logistic;
    opt.seed = derive_seed(seed, "evaluator:probe:" + task.name);
    const auto fit = fit_logistic_probe_no_bias(x_train, class_targets(y_train), opt);
    auto pred = predict_classes(x_test, fit.probe);
    r.score = accuracy(pred, class_targets(y_test));
  }
  return r;
}

/// Appends `team` as a new leaderboard row (tasks matched by name) and
/// computes the balanced scores.
inline void attach_leaderboard(EvaluationReport& report, LeaderboardMatrix board, const std::string& team) {
  std::vector<double> row;
  for (const auto& task : board.tasks) {
    auto it = std::find_if(report.tasks.begin(), report.tasks.end(), [&](const TaskResult& r) { return r.name == task; });
    if (it == report.tasks.end()) detail::fail("task_mismatch", "leaderboard task '" + task + "' was not evaluated");
    row.push_back(it->score);
  }
  if (std::find(board.teams.begin(), board.teams.end(), team) != board.teams.end())
    detail::fail("task_mismatch", "team '" + team + "' is already on the leaderboard");
  board.teams.push_back(team);
  board.scores.push_back(std::move(row));
  report.balanced = task_balanced_q_mean(board);
  report.board = std::move(board);
}

inline Json to_json(const EvaluationReport& r) {
  Json tasks = Json::array();
  for (const auto& t : r.tasks)
    tasks.push_back({{"name", t.name}, {"kind", to_string(t.kind)}, {"metric", t.kind == TaskKind::classification ? "accuracy" : "r2"},
                     {"n_train", t.n_train}, {"n_test", t.n_test}, {"score", t.score}});
  Json j = {{"tasks", tasks}, {"q_mean", r.q_mean}};
  if (r.balanced && r.board) {
    const auto ranks = rank_descending(r.balanced->team_scores);
    std::vector<double> unweighted;
    for (const auto& row : r.board->scores) unweighted.push_back(q_mean(row));
    const auto plain_ranks = rank_descending(unweighted);
    Json teams = Json::array();
    for (std::size_t i = 0; i < r.board->teams.size(); ++i)
      teams.push_back({{"team", r.board->teams[i]}, {"q_mean", unweighted[i]}, {"q_mean_rank", plain_ranks[i]},
                       {"task_balanced_q_mean", r.balanced->team_scores[i]}, {"task_balanced_rank", ranks[i]}});
    j["leaderboard"] = {{"tasks", r.board->tasks}, {"weights", r.balanced->weights},
                        {"stddev", r.balanced->stddev}, {"teams", teams}};
  }
  return j;
}

}  // namespace geoemb
