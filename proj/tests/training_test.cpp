#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "retr/training.hpp"

namespace retr::training {
namespace {

TEST(Negatives, TwoItemCatalogPicksTheOther) {
  Rng rng(1);
  std::vector<std::int64_t> targets{1, 2, 0, 1};
  for (int trial = 0; trial < 100; ++trial) {
    auto n = sample_negatives(targets, 2, rng);
    EXPECT_EQ(n, (std::vector<std::int64_t>{2, 1, 0, 2}));
  }
}

TEST(Negatives, NeverThePositive) {
  Rng rng(2);
  std::vector<std::int64_t> targets(1000);
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = static_cast<std::int64_t>(i % 7 + 1);
  for (int round = 0; round < 100; ++round) {
    auto n = sample_negatives(targets, 7, rng);
    for (std::size_t i = 0; i < n.size(); ++i) {
      ASSERT_NE(n[i], targets[i]);
      ASSERT_GE(n[i], 1);
      ASSERT_LE(n[i], 7);
    }
  }
}

TEST(Negatives, UniformOverTheRest) {
  constexpr std::size_t items = 101;
  constexpr std::size_t draws = 100000;
  Rng rng(3);
  std::vector<std::int64_t> targets(draws, 50);
  auto n = sample_negatives(targets, items, rng);
  std::vector<double> counts(items + 1, 0);
  for (auto x : n) counts[static_cast<std::size_t>(x)] += 1;
  EXPECT_EQ(counts[50], 0);
  const double expected = static_cast<double>(draws) / (items - 1);
  double chi2 = 0;
  for (std::size_t i = 1; i <= items; ++i) {
    if (i == 50) continue;
    chi2 += (counts[i] - expected) * (counts[i] - expected) / expected;
  }
  // Upper 1% point of chi-square via the Wilson-Hilferty approximation.
  const double df = items - 2;
  const double z = 2.3263;
  const double a = 2.0 / (9.0 * df);
  const double critical = df * std::pow(1.0 - a + z * std::sqrt(a), 3);
  EXPECT_LT(chi2, critical);
}

Tensor<double> scores(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>::from({n}, std::move(v), true);
}

TEST(Loss, EqualScoresGiveLogTwo) {
  std::vector<std::uint8_t> mask{1, 1, 1};
  auto loss = pairwise_loss(scores({0.3, -1, 2}), scores({0.3, -1, 2}), mask);
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-15);
}

TEST(Loss, OneUnitMargin) {
  std::vector<std::uint8_t> mask{1};
  auto loss = pairwise_loss(scores({2.0}), scores({1.0}), mask);
  EXPECT_NEAR(loss.item(), std::log1p(std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(loss.item(), 0.313262, 1e-6);
}

TEST(Loss, SaturatesWithoutOverflow) {
  std::vector<std::uint8_t> mask{1, 1};
  auto good = pairwise_loss(scores({1000, 500}), scores({-1000, -500}), mask);
  EXPECT_GE(good.item(), 0.0);
  EXPECT_LT(good.item(), 1e-12);
  auto bad = pairwise_loss(scores({-1000}), scores({1000}), std::vector<std::uint8_t>{1});
  EXPECT_NEAR(bad.item(), 2000.0, 1e-9);
}

TEST(Loss, MaskSelectsAverage) {
  std::vector<std::uint8_t> mask{1, 0, 1};
  auto pos = scores({2.0, -50, 0.0});
  auto neg = scores({1.0, 50, 0.0});
  auto loss = pairwise_loss(pos, neg, mask);
  EXPECT_NEAR(loss.item(), (std::log1p(std::exp(-1.0)) + std::log(2.0)) / 2, 1e-15);
  loss.backward();
  EXPECT_EQ(pos.grad()[1], 0.0);
  EXPECT_EQ(neg.grad()[1], 0.0);
  EXPECT_NEAR(pos.grad()[0], -(1.0 / (1.0 + std::exp(1.0))) / 2, 1e-15);
  EXPECT_NEAR(neg.grad()[2], 0.25, 1e-15);
}

TEST(Loss, EmptyMaskIsAContractError) {
  std::vector<std::uint8_t> mask{0, 0};
  EXPECT_THROW(pairwise_loss(scores({1, 2}), scores({0, 0}), mask), ContractError);
}

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.num_items = 10;
  c.dim = 4;
  c.heads = 2;
  c.blocks = 1;
  c.max_len = 3;
  return c;
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto params = model::ModelParams<double>::init(small_config(), 1);
  auto before = params.clone();
  params.zero_grad();
  auto loss = sum(params.item_embedding);
  loss.backward();
  AdamState state;
  TrainConfig cfg;
  adam_step(params, state, cfg);
  auto moved = params.item_embedding.data();
  auto orig = before.item_embedding.data();
  for (std::size_t i = 0; i < moved.size(); ++i) EXPECT_NEAR(moved[i] - orig[i], -1e-3, 1e-10);
  // Parameters without a gradient are untouched.
  auto pos_now = params.position_embedding.data();
  auto pos_orig = before.position_embedding.data();
  EXPECT_TRUE(std::equal(pos_now.begin(), pos_now.end(), pos_orig.begin()));
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto params = model::ModelParams<double>::init(small_config(), 2);
  auto before = params.clone();
  params.zero_grad();
  auto loss = scale(sum(params.item_embedding), 0.0);
  loss.backward();
  AdamState state;
  adam_step(params, state, TrainConfig{});
  auto a = params.item_embedding.data(), b = before.item_embedding.data();
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(Adam, FlippedGradientMirrorsMoments) {
  auto run = [](double sign) {
    auto params = model::ModelParams<double>::init(small_config(), 3);
    params.zero_grad();
    auto loss = scale(sum(mul(params.item_embedding, params.item_embedding)), sign);
    loss.backward();
    AdamState state;
    adam_step(params, state, TrainConfig{});
    return state;
  };
  auto plus = run(1.0), minus = run(-1.0);
  for (std::size_t p = 0; p < plus.m.size(); ++p) {
    for (std::size_t i = 0; i < plus.m[p].size(); ++i) {
      EXPECT_EQ(plus.m[p][i], -minus.m[p][i]);
      EXPECT_EQ(plus.v[p][i], minus.v[p][i]);
    }
  }
}

TEST(Adam, NonFiniteGradientNamesParameterAndChangesNothing) {
  auto params = model::ModelParams<double>::init(small_config(), 4);
  auto before = params.clone();
  params.zero_grad();
  auto loss = add(sum(params.item_embedding), sum(params.position_embedding));
  loss.backward();
  params.position_embedding.mutable_grad()[5] = std::numeric_limits<double>::quiet_NaN();
  AdamState state;
  try {
    adam_step(params, state, TrainConfig{});
    FAIL() << "expected NonFiniteGradient";
  } catch (const NonFiniteGradient& e) {
    EXPECT_NE(std::string(e.what()).find("position_embedding"), std::string::npos) << e.what();
  }
  auto a = params.item_embedding.data(), b = before.item_embedding.data();
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  EXPECT_EQ(state.step, 0u);
}

TEST(EarlyStop, StopsAfterPatienceWorseEpochs) {
  EarlyStopping s(1);
  EXPECT_TRUE(s.observe(0.5));
  EXPECT_FALSE(s.should_stop());
  EXPECT_FALSE(s.observe(0.4));
  EXPECT_TRUE(s.should_stop());

  EarlyStopping t(3);
  EXPECT_TRUE(t.observe(0.1));
  EXPECT_FALSE(t.observe(0.1));
  EXPECT_TRUE(t.observe(0.2));
  EXPECT_FALSE(t.observe(0.15));
  EXPECT_FALSE(t.observe(0.19));
  EXPECT_FALSE(t.should_stop());
  EXPECT_FALSE(t.observe(0.0));
  EXPECT_TRUE(t.should_stop());
}

data::SplitDataset correlated_split(std::size_t users, std::size_t len) {
  data::SyntheticSpec spec;
  spec.users = users;
  spec.items = 200;
  spec.categories = 5;
  spec.min_length = 10;
  spec.max_length = 20;
  spec.mix = {1.0, 0.0, 0.0};
  std::stringstream s;
  data::write_interactions(s, data::synth_generate(spec));
  return data::leave_one_out_split(data::parse_interactions(s, 1), len);
}

model::ModelConfig config_for(const data::SplitDataset& split, std::size_t dim) {
  model::ModelConfig c;
  c.num_items = split.num_items;
  c.max_len = split.max_len;
  c.dim = dim;
  c.heads = 2;
  return c;
}

TEST(Train, WorseningValidationStopsWithPatience) {
  auto split = correlated_split(120, 12);
  auto config = config_for(split, 8);
  TrainConfig tc;
  tc.max_epochs = 50;
  tc.patience = 1;
  tc.lr = 0.5;  // large enough to wreck validation after the first epoch
  auto result = train(config, model::ModelParams<float>::init(config, 1), split, tc, eval::EvalConfig{});
  ASSERT_FALSE(result.log.empty());
  EXPECT_LT(result.log.size(), 50u);
  EXPECT_EQ(result.best_val_mrr, result.log[result.best_epoch - 1].val_mrr);
  for (const auto& r : result.log) EXPECT_LE(r.val_mrr, result.best_val_mrr);
}

TEST(Train, OneEpochIsDeterministic) {
  auto split = correlated_split(100, 12);
  auto config = config_for(split, 8);
  TrainConfig tc;
  tc.max_epochs = 1;
  auto init = model::ModelParams<float>::init(config, 2);
  auto a = train(config, init, split, tc, eval::EvalConfig{});
  auto b = train(config, init, split, tc, eval::EvalConfig{});
  ASSERT_EQ(a.log.size(), 1u);
  EXPECT_EQ(a.log[0].train_loss, b.log[0].train_loss);
  EXPECT_EQ(a.log[0].val_mrr, b.log[0].val_mrr);
  auto na = a.best.named(), nb = b.best.named();
  for (std::size_t p = 0; p < na.size(); ++p) {
    auto x = na[p].second->data(), y = nb[p].second->data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << na[p].first;
  }
}

TEST(Train, LossFallsOnCorrelatedData) {
  auto split = correlated_split(300, 20);
  auto config = config_for(split, 32);
  TrainConfig tc;
  tc.max_epochs = 20;
  tc.patience = 20;
  tc.batch_size = 64;
  auto result = train(config, model::ModelParams<float>::init(config, 3), split, tc, eval::EvalConfig{});
  ASSERT_EQ(result.log.size(), 20u);
  EXPECT_LT(result.log.back().train_loss, result.log.front().train_loss);
  EXPECT_GT(result.best_val_mrr, result.log.front().val_mrr);
}

TEST(Train, SingleSequenceStepLowersItsLoss) {
  auto split = correlated_split(30, 12);
  auto config = config_for(split, 8);
  config.routing = model::Routing::all_ones;
  auto params = model::ModelParams<double>::init(config, 4);
  const data::BehaviorSequence* one[] = {&split.train.front()};
  auto batch = model::Batch::from(one);
  Rng rng(5);
  auto negatives = sample_negatives(batch.targets, split.num_items, rng);
  std::vector<std::uint8_t> mask(batch.targets.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = batch.targets[i] != 0;
  auto loss_of = [&] {
    auto trace = model::forward(batch, params, config);
    return pairwise_loss(model::pair_scores(trace.output, batch.targets, params),
                         model::pair_scores(trace.output, negatives, params), mask);
  };
  auto loss = loss_of();
  const double before = loss.item();
  params.zero_grad();
  loss.backward();
  AdamState state;
  TrainConfig tc;
  tc.lr = 1e-4;
  adam_step(params, state, tc);
  EXPECT_LT(loss_of().item(), before);
}

TEST(EpochCsv, HeaderAndRow) {
  std::ostringstream out;
  write_epoch_header(out, 2);
  EpochRecord r;
  r.epoch = 3;
  r.train_loss = 0.5;
  r.val_mrr = 0.25;
  r.val_hr10 = 0.75;
  r.val_ndcg10 = 0.125;
  r.keep_rates = {1, 0.5};
  write_epoch_row(out, r);
  EXPECT_EQ(out.str(),
            "epoch,train_loss,val_mrr,val_hr10,val_ndcg10,keep_rate_l1,keep_rate_l2\n"
            "3,0.5,0.25,0.75,0.125,1,0.5\n");
}

TEST(Config, RejectsBadValues) {
  TrainConfig c;
  c.lr = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.patience = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace retr::training
