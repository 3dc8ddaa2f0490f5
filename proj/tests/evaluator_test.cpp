#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "geoemb/evaluator.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace geoemb;
using geoemb::testing::error_code;
using geoemb::testing::random_matrix;

namespace {

linalg::Mat random_mat(std::size_t rows, std::size_t cols, std::uint64_t seed, double shift = 0.0) {
  Rng rng(seed);
  linalg::Mat m(rows, cols);
  for (double& v : m.data()) v = rng.normal() + shift;
  return m;
}

// Three teams; X is second by plain mean and first once tasks are weighted
// by spread, because it wins the task where teams differ most.
LeaderboardMatrix rank_flip_board() {
  return {{"A", "X", "B"}, {"low_spread", "high_spread"}, {{1.00, 0.55}, {0.70, 0.80}, {0.80, 0.20}}};
}

}  // namespace

// ---------------------------------------------------------------------------
// linear probe

TEST(LinearProbe, RecoversExactWeights) {
  auto x = random_mat(40, 5, 1);
  std::vector<double> w_true{1.5, -2.0, 0.25, 3.0, -0.5};
  auto y = predict_linear(x, w_true);
  auto w = fit_linear_probe_no_bias(x, y, 0.0);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(w[i], w_true[i], 1e-6);
}

TEST(LinearProbe, TwoPointExample) {
  linalg::Mat x(2, 1);
  x(0, 0) = 1;
  x(1, 0) = 2;
  std::vector<double> y{2, 4};
  auto w = fit_linear_probe_no_bias(x, y, 0.0);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_NEAR(w[0], 2.0, 1e-12);
}

TEST(LinearProbe, HugeRidgeShrinksToZero) {
  auto x = random_mat(30, 4, 2);
  auto y = predict_linear(x, std::vector<double>{1, 1, 1, 1});
  auto w = fit_linear_probe_no_bias(x, y, 1e9);
  double norm = 0;
  for (double v : w) norm += v * v;
  EXPECT_LT(std::sqrt(norm), 1e-6);
}

TEST(LinearProbe, SingularWithoutRidge) {
  linalg::Mat x(4, 2);
  for (std::size_t r = 0; r < 4; ++r) x(r, 0) = x(r, 1) = static_cast<double>(r + 1);
  std::vector<double> y{1, 2, 3, 4};
  EXPECT_EQ(error_code([&] { fit_linear_probe_no_bias(x, y, 0.0); }), "singular_system");
  EXPECT_NO_THROW(fit_linear_probe_no_bias(x, y, 1e-3));
}

TEST(LinearProbe, ClosedFormMatchesGradientDescent) {
  auto x = random_mat(200, 6, 3);
  Rng rng(4);
  std::vector<double> y(200);
  for (double& v : y) v = rng.normal();
  for (double ridge : {0.0, 0.1, 5.0}) {
    auto closed = fit_linear_probe_no_bias(x, y, ridge);
    auto gd = fit_linear_probe_gd(x, y, ridge, 5000, 0.5);
    for (std::size_t i = 0; i < closed.size(); ++i) EXPECT_NEAR(gd[i], closed[i], 1e-5) << "ridge " << ridge;
  }
}

// ---------------------------------------------------------------------------
// logistic probe

TEST(LogisticProbe, SeparatesOriginSeparableData) {
  // Class = sign of a fixed direction; the separating hyperplane passes the origin.
  auto x = random_mat(120, 3, 5);
  std::vector<int> y;
  for (std::size_t r = 0; r < 120; ++r) {
    const double s = x(r, 0) - 0.5 * x(r, 1) + 0.2 * x(r, 2);
    if (std::abs(s) < 0.2) x(r, 0) += s > 0 ? 0.4 : -0.4;  // keep a margin
    y.push_back(x(r, 0) - 0.5 * x(r, 1) + 0.2 * x(r, 2) > 0 ? 1 : 0);
  }
  auto fit = fit_logistic_probe_no_bias(x, y, {.ridge = 0.0, .iters = 2000, .lr = 0.5, .seed = 1});
  EXPECT_EQ(accuracy(predict_classes(x, fit.probe), y), 1.0);
  EXPECT_LT(fit.final_loss, fit.loss_trace.front());
}

TEST(LogisticProbe, GradientMatchesFiniteDifferences) {
  auto x = random_mat(10, 4, 6);
  std::vector<int> y{0, 1, 2, 0, 1, 2, 2, 1, 0, 0};
  ProbeWeights p{random_mat(3, 4, 7)};
  auto g = logistic_loss_and_grad(p, x, y, 0.05);
  auto f = [&](const std::vector<double>& w) {
    ProbeWeights q{linalg::Mat(3, 4)};
    std::copy(w.begin(), w.end(), q.w.data().begin());
    return logistic_loss_and_grad(q, x, y, 0.05).loss;
  };
  auto fd = oracle::finite_difference(f, p.w.data(), 1e-4);
  EXPECT_LT(oracle::max_relative_error(g.grad.data(), fd), 1e-4);
}

TEST(LogisticProbe, PermutingLabelsPermutesRows) {
  auto x = random_mat(30, 3, 8);
  std::vector<int> y, y_perm;
  const int perm[3] = {2, 0, 1};
  for (int i = 0; i < 30; ++i) {
    y.push_back(i % 3);
    y_perm.push_back(perm[i % 3]);
  }
  LogisticOptions opt{.ridge = 0.01, .iters = 50, .lr = 0.3, .init_scale = 0.0};
  auto a = fit_logistic_probe_no_bias(x, y, opt);
  auto b = fit_logistic_probe_no_bias(x, y_perm, opt);
  for (int c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_NEAR(b.probe.w(static_cast<std::size_t>(perm[c]), j), a.probe.w(static_cast<std::size_t>(c), j), 1e-12);
}

TEST(LogisticProbe, Errors) {
  auto x = random_mat(5, 2, 1);
  EXPECT_EQ(error_code([&] { fit_logistic_probe_no_bias(x, std::vector<int>(5, 1)); }), "single_class");
  EXPECT_EQ(error_code([&] { fit_logistic_probe_no_bias(x, std::vector<int>{0, 1}); }), "label_mismatch");
  EXPECT_EQ(error_code([&] { fit_logistic_probe_no_bias(x, std::vector<int>{0, 1, 0, 1, 0}, {.iters = 0}); }),
            "invalid_config");
}

TEST(Probes, HaveNoIntercept) {
  // Shifting every feature by a constant vector changes what a bias-free
  // probe can fit; an intercept would absorb the shift exactly.
  auto x = random_mat(60, 3, 9, 2.0);
  linalg::Mat shifted = x;
  for (std::size_t r = 0; r < 60; ++r)
    for (std::size_t c = 0; c < 3; ++c) shifted(r, c) += 5.0;
  Rng rng(3);
  std::vector<double> y(60);
  for (double& v : y) v = rng.normal() + 1.0;
  const auto p1 = predict_linear(x, fit_linear_probe_no_bias(x, y, 0.0));
  const auto p2 = predict_linear(shifted, fit_linear_probe_no_bias(shifted, y, 0.0));
  double diff = 0;
  for (std::size_t i = 0; i < 60; ++i) diff = std::max(diff, std::abs(p1[i] - p2[i]));
  EXPECT_GT(diff, 1e-3);

  std::vector<int> labels;
  for (double v : y) labels.push_back(v > 1.0);
  LogisticOptions opt{.iters = 100, .lr = 0.05};
  const double l1 = fit_logistic_probe_no_bias(x, labels, opt).final_loss;
  const double l2 = fit_logistic_probe_no_bias(shifted, labels, opt).final_loss;
  EXPECT_GT(std::abs(l1 - l2), 1e-3);
}

// ---------------------------------------------------------------------------
// scores

TEST(Scores, Examples) {
  EXPECT_EQ(accuracy(std::vector<int>{0, 1, 2, 1}, std::vector<int>{0, 1, 2, 1}), 1.0);
  EXPECT_EQ(accuracy(std::vector<int>{0, 1, 2, 0}, std::vector<int>{0, 1, 2, 1}), 0.75);
  std::vector<double> t{1, 2, 3, 6};
  EXPECT_EQ(r2_score(t, t), 1.0);
  EXPECT_NEAR(r2_score(std::vector<double>(4, 3.0), t), 0.0, 1e-15);
  EXPECT_EQ(r2_score(std::vector<double>{2, 2}, std::vector<double>{2, 2}), 1.0);
  EXPECT_EQ(r2_score(std::vector<double>{1, 2}, std::vector<double>{2, 2}), 0.0);
  EXPECT_EQ(error_code([] { accuracy(std::vector<int>{0}, std::vector<int>{0, 1}); }), "misaligned");
}

TEST(Scores, ScoreTaskByKind) {
  Task cls{"c", TaskKind::classification, random_matrix(4, 1, 1), {0, 1, 1, 2}};
  EXPECT_EQ(score_task(cls, std::vector<double>{0, 1, 0, 2}), 0.75);
  Task reg{"r", TaskKind::regression, random_matrix(3, 1, 1), {1, 2, 3}};
  EXPECT_EQ(score_task(reg, std::vector<double>{1, 2, 3}), 1.0);
  EXPECT_EQ(error_code([&] { score_task(reg, std::vector<double>{1, 2}); }), "misaligned");
}

TEST(QMean, Examples) {
  EXPECT_EQ(q_mean(std::vector<double>{0.5, 0.5, 0.5}), 0.5);
  EXPECT_EQ(q_mean(std::vector<double>{1.0, 0.0}), 0.5);
  EXPECT_EQ(q_mean(std::vector<double>{0.42}), 0.42);
  EXPECT_EQ(error_code([] { q_mean(std::vector<double>{}); }), "empty_input");
}

// ---------------------------------------------------------------------------
// task-balanced q_mean

TEST(TaskBalanced, ZeroSpreadTaskGetsNoWeight) {
  LeaderboardMatrix b{{"a", "b", "c"}, {"A", "B"}, {{0.7, 0.1}, {0.7, 0.5}, {0.7, 0.9}}};
  auto r = task_balanced_q_mean(b);
  EXPECT_EQ(r.weights[0], 0.0);
  EXPECT_EQ(r.weights[1], 1.0);
  EXPECT_EQ(r.team_scores[2], 0.9);
}

TEST(TaskBalanced, EqualSpreadIsPlainMean) {
  LeaderboardMatrix b{{"a", "b"}, {"A", "B", "C"}, {{0.25, 0.5, 0.75}, {0.75, 1.0, 0.25}}};
  auto r = task_balanced_q_mean(b);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(r.team_scores[i], q_mean(b.scores[i]));
}

TEST(TaskBalanced, AllTasksFlatGivesUniformWeights) {
  LeaderboardMatrix b{{"a", "b"}, {"A", "B"}, {{0.3, 0.6}, {0.3, 0.6}}};
  auto r = task_balanced_q_mean(b);
  EXPECT_EQ(r.weights, (std::vector<double>{0.5, 0.5}));
}

TEST(TaskBalanced, RankFlip) {
  auto b = rank_flip_board();
  std::vector<double> plain;
  for (const auto& row : b.scores) plain.push_back(q_mean(row));
  auto r = task_balanced_q_mean(b);
  EXPECT_EQ(rank_descending(plain)[1], 2);
  EXPECT_EQ(rank_descending(r.team_scores)[1], 1);
}

TEST(TaskBalanced, WeightsAreADistribution) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    LeaderboardMatrix b;
    for (int t = 0; t < 4; ++t) b.teams.push_back("team" + std::to_string(t));
    for (int k = 0; k < 5; ++k) b.tasks.push_back("task" + std::to_string(k));
    for (int t = 0; t < 4; ++t) {
      b.scores.emplace_back();
      for (int k = 0; k < 5; ++k) b.scores.back().push_back(k == 2 ? 0.5 : rng.uniform());
    }
    auto r = task_balanced_q_mean(b);
    double sum = 0;
    for (double w : r.weights) {
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_EQ(r.weights[2], 0.0);

    auto shifted = b;
    for (auto& row : shifted.scores) row[3] += 0.125;
    auto r2 = task_balanced_q_mean(shifted);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(r2.weights[k], r.weights[k], 1e-12);
  }
}

TEST(TaskBalanced, BoardErrors) {
  EXPECT_EQ(error_code([] { task_balanced_q_mean({{"a"}, {"A"}, {{1.0}}}); }), "empty_board");
  EXPECT_EQ(error_code([] { task_balanced_q_mean({{"a", "b"}, {}, {{}, {}}}); }), "empty_board");
  EXPECT_EQ(error_code([] { task_balanced_q_mean({{"a", "b"}, {"A"}, {{1.0}, {1.0, 2.0}}}); }), "invalid_board");
  EXPECT_EQ(error_code([] { task_balanced_q_mean({{"a", "b"}, {"A"}, {{1.0}, {NAN}}}); }), "non_finite");
}

// ---------------------------------------------------------------------------
// descriptors and end-to-end task evaluation

TEST(Targets, ParseAndAlign) {
  auto rows = parse_targets_csv("sample_id,target\ns2,1.5\ns1,-2\n\ns3,0\n");
  ASSERT_EQ(rows.size(), 3u);
  EmbeddingMatrix f(3, 1, {0, 0, 0}, "m", std::vector<std::string>{"s1", "s2", "s3"});
  EXPECT_EQ(align_targets(f, rows), (std::vector<double>{-2, 1.5, 0}));
  EmbeddingMatrix no_ids(3, 1, {0, 0, 0}, "m");
  EXPECT_EQ(align_targets(no_ids, rows), (std::vector<double>{1.5, -2, 0}));
  EmbeddingMatrix other(1, 1, {0}, "m", std::vector<std::string>{"s9"});
  EXPECT_EQ(error_code([&] { align_targets(other, rows); }), "missing_target");
  EXPECT_EQ(error_code([] { parse_targets_csv("id,y\n1,2\n"); }), "bad_targets");
  EXPECT_EQ(error_code([] { parse_targets_csv("sample_id,target\n1,\n"); }), "bad_targets");
}

TEST(EvaluateTask, DeterministicAndAccurateOnLinearData) {
  auto x = random_matrix(200, 4, 21);
  Task reg{"reg", TaskKind::regression, x, {}};
  Task cls{"cls", TaskKind::classification, x, {}};
  for (std::size_t r = 0; r < 200; ++r) {
    const double v = 2.0 * x.at(r, 0) - x.at(r, 3);
    reg.targets.push_back(v);
    cls.targets.push_back(v > 0 ? 1 : 0);
  }
  auto a = evaluate_task(reg, 0.25, 1e-6, {}, 5);
  EXPECT_EQ(a.n_test, 50u);
  EXPECT_EQ(a.n_train, 150u);
  EXPECT_GT(a.score, 0.999999);
  auto c1 = evaluate_task(cls, 0.25, 0, {.iters = 300, .lr = 0.5}, 5);
  auto c2 = evaluate_task(cls, 0.25, 0, {.iters = 300, .lr = 0.5}, 5);
  EXPECT_EQ(c1.score, c2.score);
  EXPECT_GT(c1.score, 0.9);
}

TEST(EvaluateTask, DescriptorFilesAndLeaderboard) {
  geoemb::testing::TempDir tmp("eval");
  auto x = random_matrix(40, 3, 2);
  std::vector<std::string> ids;
  for (int i = 0; i < 40; ++i) ids.push_back("s" + std::to_string(i));
  EmbeddingMatrix f(40, 3, std::vector<float>(x.data().begin(), x.data().end()), "m", ids);
  save_embeddings(f, tmp / "f.emb");
  std::ofstream(tmp / "y.csv") << "sample_id,target\n";
  {
    std::ofstream out(tmp / "y.csv", std::ios::app);
    for (int i = 39; i >= 0; --i) out << "s" << i << "," << (x.at(static_cast<std::size_t>(i), 1) > 0 ? 1 : 0) << "\n";
  }
  Json desc = {{"tasks", {{{"name", "t1"}, {"kind", "classification"}, {"features", "f.emb"}, {"targets", "y.csv"},
                           {"test_fraction", 0.25}}}}};
  auto specs = parse_task_descriptors(desc, tmp.path());
  ASSERT_EQ(specs.size(), 1u);
  Task t = load_task(specs[0]);
  EXPECT_EQ(t.targets[5], x.at(5, 1) > 0 ? 1.0 : 0.0);

  EvaluationReport rep;
  rep.tasks.push_back(evaluate_task(t, specs[0].test_fraction, specs[0].ridge, specs[0].logistic, 1));
  rep.q_mean = rep.tasks[0].score;
  attach_leaderboard(rep, {{"a", "b"}, {"t1"}, {{0.5}, {0.6}}}, "ours");
  ASSERT_TRUE(rep.balanced);
  EXPECT_EQ(rep.board->teams.back(), "ours");
  auto j = to_json(rep);
  EXPECT_EQ(j["leaderboard"]["teams"].size(), 3u);
  EXPECT_EQ(error_code([&] { attach_leaderboard(rep, {{"a", "b"}, {"t2"}, {{0.5}, {0.6}}}, "x"); }), "task_mismatch");
  EXPECT_EQ(error_code([&] { parse_task_descriptors(Json{{"tasks", Json::array()}}); }), "empty_input");
  EXPECT_EQ(error_code([&] { parse_task_descriptors(Json{{"tasks", {{{"name", "x"}}}}}); }), "invalid_config");
}

TEST(TaskBalanced, SpreadsEqualUpToRoundingArePlainMean) {
  // every column has spread sqrt(2/3)·0.1, but the computed σ differ in the last bits
  const LeaderboardMatrix b{{"a", "b", "c"}, {"t1", "t2", "t3"}, {{0.9, 0.2, 0.55}, {0.7, 0.4, 0.35}, {0.8, 0.3, 0.45}}};
  const auto r = task_balanced_q_mean(b);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(r.team_scores[i], q_mean(b.scores[i]));
  for (double w : r.weights) EXPECT_EQ(w, 1.0 / 3.0);
}
