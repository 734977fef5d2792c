#include <cmath>
#include <map>
#include <numeric>

#include <gtest/gtest.h>

#include "pmmrec/eval.hpp"
#include "test_support.hpp"

using namespace pmmrec;
using pmmrec::testing::tiny_model;
using pmmrec::testing::tiny_world;

namespace {

// Sorts the whole catalog (target placed after its equals) and reads its position.
std::size_t sorted_rank(const std::vector<double>& scores, std::size_t target) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a != target && b == target;
  });
  return static_cast<std::size_t>(std::find(order.begin(), order.end(), target) - order.begin()) + 1;
}

// Scores on a coarse grid so ties are common; keyed by the prefix contents.
Scorer grid_scorer(std::size_t n, std::uint64_t seed) {
  return [n, seed](const std::vector<std::vector<ItemId>>& prefixes) {
    Tensor s(Shape{prefixes.size(), n});
    for (std::size_t r = 0; r < prefixes.size(); ++r) {
      std::uint64_t h = seed;
      for (ItemId id : prefixes[r]) h = h * 1000003u + id;
      Rng rng(h);
      std::uniform_int_distribution<int> g(0, 9);
      for (std::size_t c = 0; c < n; ++c) s.at(r, c) = 0.1 * g(rng);
    }
    return s;
  };
}

}  // namespace

TEST(Rank, Examples) {
  const std::vector<double> s{0.1, 0.9, 0.3};
  EXPECT_EQ(rank_of_target(s, 1), 1u);
  EXPECT_EQ(rank_of_target(s, 0), 3u);
  const std::vector<double> tied{0.5, 0.5, 0.5, 0.1};
  EXPECT_EQ(rank_of_target(tied, 0), 3u);
  EXPECT_EQ(rank_of_target(tied, 2), 3u);
  EXPECT_THROW(rank_of_target(s, 3), std::out_of_range);
}

TEST(Rank, MatchesFullSortWithTies) {
  Rng rng(5);
  std::uniform_int_distribution<int> g(0, 20);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(1000);
    for (double& v : s) v = g(rng);
    const std::size_t t = static_cast<std::size_t>(trial * 19) % s.size();
    EXPECT_EQ(rank_of_target(s, t), sorted_rank(s, t));
  }
}

TEST(Metrics, NdcgAtSingleRanks) {
  EXPECT_DOUBLE_EQ(ranking_metrics({1}, 10).ndcg, 1.0);
  EXPECT_DOUBLE_EQ(ranking_metrics({3}, 10).ndcg, 0.5);
  EXPECT_DOUBLE_EQ(ranking_metrics({11}, 10).ndcg, 0.0);
  EXPECT_DOUBLE_EQ(ranking_metrics({11}, 10).hr, 0.0);
  EXPECT_DOUBLE_EQ(ranking_metrics({10}, 10).hr, 1.0);
  const auto r = MetricsReport::from_ranks({1, 3, 11, 60});
  EXPECT_DOUBLE_EQ(r.hr_at(10), 50.0);
  EXPECT_DOUBLE_EQ(r.hr_at(20), 75.0);
  EXPECT_DOUBLE_EQ(r.hr_at(50), 75.0);
  EXPECT_NEAR(r.ndcg_at(10), 100.0 * (1.0 + 0.5) / 4.0, 1e-12);
  EXPECT_THROW(r.hr_at(5), std::invalid_argument);
}

class EvalTest : public ::testing::Test {
 protected:
  void SetUp() override {
    SyntheticConfig sc = tiny_world(4);
    sc.n_users = 60;
    split_ = filter_and_split(generate_synthetic(sc).source, 3);
  }
  SplitDataset split_;
};

TEST_F(EvalTest, OracleScorerHitsEverything) {
  // Knows each target: scores the target 1 and every other item by its negated index.
  std::map<std::vector<ItemId>, ItemId> answer;
  for (const auto& u : split_.users) answer[u.train] = u.valid;
  const auto& cat = split_.catalog;
  Scorer oracle = [&](const std::vector<std::vector<ItemId>>& prefixes) {
    Tensor s(Shape{prefixes.size(), cat.size()});
    for (std::size_t r = 0; r < prefixes.size(); ++r) {
      for (std::size_t c = 0; c < cat.size(); ++c) s.at(r, c) = -static_cast<double>(c) - 1.0;
      s.at(r, cat.slot(answer.at(prefixes[r]))) = 1.0;
    }
    return s;
  };
  const auto r = evaluate(oracle, split_, EvalPhase::valid);
  EXPECT_DOUBLE_EQ(r.hr_at(10), 100.0);
  EXPECT_DOUBLE_EQ(r.ndcg_at(10), 100.0);
  EXPECT_EQ(r.users, split_.users.size());
}

TEST_F(EvalTest, RandomScorerSitsNearChance) {
  SyntheticConfig sc = tiny_world(9);
  sc.n_users = 4000;
  sc.n_items = 1000;
  sc.L_min = 4;
  sc.L_max = 4;
  const SplitDataset big = filter_and_split(generate_synthetic(sc).source, 1);
  const auto r = evaluate(random_scorer(big.catalog.size(), 3), big, EvalPhase::test);
  const double p = 10.0 / static_cast<double>(big.catalog.size());
  const double se = std::sqrt(p * (1 - p) / static_cast<double>(r.users));
  EXPECT_NEAR(r.hr_at(10) / 100.0, p, 3 * se);
}

TEST_F(EvalTest, MatchesBruteForceOnTiedScores) {
  const auto& cat = split_.catalog;
  const Scorer sc = grid_scorer(cat.size(), 17);
  for (EvalPhase phase : {EvalPhase::valid, EvalPhase::test}) {
    std::array<double, 3> hr{}, nd{};
    std::size_t n = 0;
    for (const auto& u : split_.users) {
      std::vector<ItemId> prefix = u.train;
      if (phase == EvalPhase::test) prefix.push_back(u.valid);
      const ItemId target = phase == EvalPhase::valid ? u.valid : u.test;
      const Tensor s = sc({prefix});
      const std::size_t r =
          sorted_rank(std::vector<double>(s.values().begin(), s.values().end()), cat.slot(target));
      for (std::size_t i = 0; i < 3; ++i) {
        if (r <= kMetricCutoffs[i]) {
          hr[i] += 1;
          nd[i] += 1 / std::log2(r + 1.0);
        }
      }
      ++n;
    }
    EvalOptions opt;
    opt.batch = 7;
    const auto rep = evaluate(sc, split_, phase, opt);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_NEAR(rep.hr[i], 100.0 * hr[i] / n, 1e-9);
      EXPECT_NEAR(rep.ndcg[i], 100.0 * nd[i] / n, 1e-9);
    }
  }
}

TEST_F(EvalTest, ThreadsAndBatchingDoNotChangeResults) {
  Model m(tiny_model(), 3);
  EvalOptions a, b;
  b.threads = 4;
  b.batch = 5;
  const auto ra = evaluate(m, split_, EvalPhase::test, a);
  const auto rb = evaluate(m, split_, EvalPhase::test, b);
  EXPECT_EQ(ra.hr, rb.hr);
  EXPECT_EQ(ra.ndcg, rb.ndcg);
  const Scorer rnd = random_scorer(split_.catalog.size(), 2);
  EXPECT_EQ(evaluate(rnd, split_, EvalPhase::valid, a).hr, evaluate(rnd, split_, EvalPhase::valid, b).hr);
}

TEST_F(EvalTest, ExcludeHistoryOnlyImprovesRanks) {
  const Scorer sc = grid_scorer(split_.catalog.size(), 4);
  std::vector<std::vector<ItemId>> prefixes;
  std::vector<ItemId> targets;
  leave_one_out(split_, EvalPhase::test, prefixes, targets);
  EvalOptions ex;
  ex.exclude_history = true;
  const auto base = rank_targets(sc, split_.catalog, prefixes, targets);
  const auto excl = rank_targets(sc, split_.catalog, prefixes, targets, ex);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_LE(excl[i], base[i]);
}

TEST_F(EvalTest, ColdThresholdExtremes) {
  EXPECT_TRUE(cold_item_subsequences(split_, 0).empty());
  const auto all = cold_item_subsequences(split_, std::numeric_limits<std::size_t>::max());
  std::size_t expected = 0;
  for (const auto& u : split_.users) expected += u.full().size() - 1;
  EXPECT_EQ(all.size(), expected);
  const auto r = evaluate_cold_start(random_scorer(split_.catalog.size(), 1), split_, 0);
  EXPECT_EQ(r.users, 0u);
  EXPECT_EQ(r.phase, "cold");
}

TEST_F(EvalTest, ScorerShapeIsChecked) {
  Scorer bad = [](const std::vector<std::vector<ItemId>>& p) { return Tensor(Shape{p.size(), 1}); };
  EXPECT_THROW(evaluate(bad, split_, EvalPhase::valid), ShapeError);
}
