#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "retr/eval.hpp"

namespace retr::eval {
namespace {

TEST(Rank, GroundTruthAboveEverything) {
  std::vector<double> neg(100);
  for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -static_cast<double>(i);
  EXPECT_EQ(rank_of<double>(1.0, neg), 1u);
}

TEST(Rank, TiesCountAgainstGroundTruth) {
  std::vector<double> neg(100, 0.25);
  EXPECT_EQ(rank_of<double>(0.25, neg), 101u);
}

TEST(Rank, CountsStrictlyGreater) {
  std::vector<double> neg{3, 9, 1, 7};
  EXPECT_EQ(rank_of<double>(5, neg), 3u);
}

TEST(Rank, RaisingANegativeNeverHelps) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> neg(20);
    for (auto& x : neg) x = g(rng);
    const double truth = g(rng);
    const auto before = rank_of<double>(truth, neg);
    neg[static_cast<std::size_t>(trial) % 20] += std::abs(g(rng));
    const auto after = rank_of<double>(truth, neg);
    EXPECT_GE(after, before);
    for (std::size_t k : {1u, 5u, 10u}) {
      auto a = hr_ndcg_mrr(before, k), b = hr_ndcg_mrr(after, k);
      EXPECT_LE(b.hr, a.hr);
      EXPECT_LE(b.ndcg, a.ndcg);
      EXPECT_LE(b.mrr, a.mrr);
    }
  }
}

TEST(Metrics, KnownRanks) {
  auto m1 = hr_ndcg_mrr(1, 10);
  EXPECT_EQ(m1.hr, 1.0);
  EXPECT_EQ(m1.ndcg, 1.0);
  EXPECT_EQ(m1.mrr, 1.0);
  auto m3 = hr_ndcg_mrr(3, 10);
  EXPECT_EQ(m3.hr, 1.0);
  EXPECT_DOUBLE_EQ(m3.ndcg, 0.5);
  EXPECT_DOUBLE_EQ(m3.mrr, 1.0 / 3);
  auto m15 = hr_ndcg_mrr(15, 10);
  EXPECT_EQ(m15.hr, 0.0);
  EXPECT_EQ(m15.ndcg, 0.0);
  EXPECT_DOUBLE_EQ(m15.mrr, 1.0 / 15);
  EXPECT_THROW(hr_ndcg_mrr(0, 10), std::invalid_argument);
  for (std::size_t r = 1; r <= 101; ++r) {
    auto m = hr_ndcg_mrr(r, 10);
    EXPECT_GE(m.hr, m.ndcg);
    EXPECT_GE(m.ndcg, 0.0);
    EXPECT_LE(m.mrr, hr_ndcg_mrr(r, 101).hr);
  }
}

TEST(Negatives, ExcludeHistoryAndRepeat) {
  std::vector<int> history{1, 5, 5, 9, 20};
  Rng a(3), b(3);
  auto n1 = sample_eval_negatives(history, 30, 20, a);
  auto n2 = sample_eval_negatives(history, 30, 20, b);
  EXPECT_EQ(n1, n2);
  std::set<int> unique(n1.begin(), n1.end());
  EXPECT_EQ(unique.size(), 20u);
  for (int n : n1) {
    EXPECT_GE(n, 1);
    EXPECT_LE(n, 30);
    EXPECT_EQ(std::count(history.begin(), history.end(), n), 0);
  }
}

TEST(Negatives, SmallCatalogNamesRequiredSize) {
  std::vector<int> history{1, 2, 3};
  Rng rng(1);
  try {
    sample_eval_negatives(history, 50, 100, rng);
    FAIL() << "expected CatalogTooSmall";
  } catch (const CatalogTooSmall& e) {
    EXPECT_NE(std::string(e.what()).find("at least 103 items"), std::string::npos) << e.what();
  }
}

TEST(Recovery, AllKeptGivesRatioOne) {
  RouteRecovery r;
  std::vector<double> route{1, 1, 1, 1};
  std::vector<std::uint8_t> mask{1, 1, 1, 1}, pivotal{1, 0, 1, 0};
  r.add(route, mask, pivotal);
  EXPECT_EQ(r.pivotal_rate(), 1.0);
  EXPECT_EQ(r.other_rate(), 1.0);
  EXPECT_EQ(r.ratio(), 1.0);
}

TEST(Recovery, PerfectRouteSeparatesLabels) {
  RouteRecovery r;
  std::vector<double> route{0, 1, 0, 1, 1};
  std::vector<std::uint8_t> mask{0, 1, 1, 1, 1}, pivotal{0, 1, 0, 1, 1};
  r.add(route, mask, pivotal);
  r.add(route, mask, {});
  EXPECT_EQ(r.pivotal_rate(), 1.0);
  EXPECT_EQ(r.other_rate(), 0.0);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.sequences, 1u);
}

TEST(Recovery, RandomRouteHasNoPreference) {
  Rng rng(8);
  std::bernoulli_distribution coin(0.5);
  RouteRecovery r;
  std::vector<double> route(10000);
  std::vector<std::uint8_t> mask(10000, 1), pivotal(10000);
  for (std::size_t i = 0; i < route.size(); ++i) {
    route[i] = coin(rng) ? 1.0 : 0.0;
    pivotal[i] = i % 2;
  }
  r.add(route, mask, pivotal);
  EXPECT_NEAR(r.ratio(), 1.0, 0.05);
}

struct Fixture {
  data::SplitDataset split;
  data::PivotalLabels labels;
  model::ModelConfig config;
};

Fixture synthetic_fixture(std::size_t users, std::size_t items, std::size_t len) {
  data::SyntheticSpec spec;
  spec.users = users;
  spec.items = items;
  spec.categories = 5;
  spec.min_length = 8;
  spec.max_length = 20;
  auto generated = data::synth_generate(spec);
  std::stringstream interactions, labels;
  data::write_interactions(interactions, generated);
  data::write_pivotal_labels(labels, generated);
  Fixture f;
  f.split = data::leave_one_out_split(data::parse_interactions(interactions, 1), len);
  f.labels = data::read_pivotal_labels(labels);
  f.config.num_items = f.split.num_items;
  f.config.max_len = len;
  f.config.dim = 16;
  f.config.heads = 2;
  return f;
}

TEST(Evaluate, MatchesFullSortOracle) {
  auto f = synthetic_fixture(50, 300, 12);
  auto params = model::ModelParams<float>::init(f.config, 5);
  // Spread the embeddings so ranks vary across users.
  for (auto& v : params.item_embedding.mutable_data()) v *= 100.0f;
  EvalConfig cfg;
  cfg.ks = {1, 5, 10};
  auto report = evaluate(f.config, params, f.split.test, f.split, cfg);

  auto batch = model::Batch::from(f.split.test);
  auto trace = model::forward(batch, params, f.config);
  std::map<std::size_t, double> hr, ndcg;
  double mrr = 0;
  ASSERT_EQ(report.ranks.size(), 50u);
  for (std::size_t u = 0; u < 50; ++u) {
    const auto& seq = f.split.test[u];
    auto state = trace.output.data().subspan((u * batch.len + batch.last[u]) * 16, 16);
    auto scores = model::score<float>(state, params);
    std::vector<std::pair<float, bool>> cands{{scores[static_cast<std::size_t>(seq.last_target())], true}};
    for (int n : user_negatives(f.split, seq.user, cfg)) cands.emplace_back(scores[static_cast<std::size_t>(n)], false);
    // Descending by score; on ties the ground truth sorts last.
    std::sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : (!a.second && b.second);
    });
    const auto pos = static_cast<std::size_t>(
        std::find_if(cands.begin(), cands.end(), [](const auto& c) { return c.second; }) - cands.begin());
    const std::size_t rank = pos + 1;
    EXPECT_EQ(report.ranks[u], rank) << "user " << u;
    for (std::size_t k : cfg.ks) {
      hr[k] += rank <= k ? 1.0 : 0.0;
      ndcg[k] += rank <= k ? 1.0 / std::log2(rank + 1.0) : 0.0;
    }
    mrr += 1.0 / static_cast<double>(rank);
  }
  for (std::size_t k : cfg.ks) {
    EXPECT_EQ(report.hr.at(k), hr[k] / 50);
    EXPECT_EQ(report.ndcg.at(k), ndcg[k] / 50);
  }
  EXPECT_EQ(report.mrr, mrr / 50);
  EXPECT_EQ(report.users, 50u);
}

TEST(Evaluate, RankCandidatesAgreesWithEvaluate) {
  auto f = synthetic_fixture(20, 300, 12);
  auto params = model::ModelParams<float>::init(f.config, 6);
  EvalConfig cfg;
  cfg.batch_size = 1;
  auto report = evaluate(f.config, params, f.split.test, f.split, cfg);
  for (std::size_t u = 0; u < 20; ++u) {
    const auto& seq = f.split.test[u];
    EXPECT_EQ(rank_candidates(f.config, params, seq, user_negatives(f.split, seq.user, cfg)), report.ranks[u]);
  }
}

TEST(Evaluate, UntrainedModelIsNearUniformRank) {
  auto f = synthetic_fixture(600, 500, 20);
  auto params = model::ModelParams<float>::init(f.config, 7);
  auto report = evaluate(f.config, params, f.split.test, f.split, EvalConfig{});
  double expected = 0;
  for (int r = 1; r <= 101; ++r) expected += 1.0 / r;
  expected /= 101;
  EXPECT_NEAR(report.mrr, expected, 0.01);
}

TEST(Evaluate, DeterministicAndAblatedRoutesKeepEverything) {
  auto f = synthetic_fixture(40, 300, 12);
  f.config.routing = model::Routing::all_ones;
  auto params = model::ModelParams<float>::init(f.config, 8);
  EvalConfig cfg;
  auto a = evaluate(f.config, params, f.split.test, f.split, cfg, &f.labels);
  auto b = evaluate(f.config, params, f.split.test, f.split, cfg, &f.labels);
  EXPECT_EQ(a.ranks, b.ranks);
  for (double k : a.keep_rates) EXPECT_EQ(k, 1.0);
  ASSERT_TRUE(a.recovery.has_value());
  EXPECT_EQ(a.recovery->ratio(), 1.0);
  EXPECT_EQ(a.recovery->skipped, 0u);
}

TEST(Evaluate, LearnedRoutesRecordRecovery) {
  auto f = synthetic_fixture(40, 300, 12);
  auto params = model::ModelParams<float>::init(f.config, 9);
  for (auto& blk : params.blocks) {
    for (auto& v : blk.logit_w.mutable_data()) v *= 50.0f;
  }
  auto report = evaluate(f.config, params, f.split.test, f.split, EvalConfig{}, &f.labels);
  for (double k : report.keep_rates) {
    EXPECT_GT(k, 0.0);
    EXPECT_LT(k, 1.0);
  }
  EXPECT_GE(report.keep_rates[0], report.keep_rates[1]);
}

TEST(Report, CsvRowsNameMetrics) {
  EvalReport r;
  r.users = 3;
  r.hr[10] = 0.5;
  r.ndcg[10] = 0.25;
  r.mrr = 0.125;
  r.keep_rates = {0.9, 0.8};
  std::ostringstream csv, text;
  r.write_csv(csv);
  r.write_text(text);
  EXPECT_EQ(csv.str(), "metric,value\nusers,3\nhr@10,0.5\nndcg@10,0.25\nmrr,0.125\nkeep_rate_l1,0.9\nkeep_rate_l2,0.8\n");
  EXPECT_NE(text.str().find("HR@10: 0.5000"), std::string::npos);
}

}  // namespace
}  // namespace retr::eval
