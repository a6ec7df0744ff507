#include "retr/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

namespace retr::training {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (max_epochs < 1) throw std::invalid_argument("max epochs must be positive");
  if (patience < 1) throw std::invalid_argument("patience must be at least 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("Adam epsilon must be positive");
}

std::vector<std::int64_t> sample_negatives(std::span<const std::int64_t> targets,
                                           std::size_t num_items, Rng& rng) {
  if (num_items < 2) throw ContractError("negative sampling needs at least two items");
  std::uniform_int_distribution<std::int64_t> pick(1, static_cast<std::int64_t>(num_items));
  std::vector<std::int64_t> out(targets.size(), 0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == 0) continue;
    std::int64_t n = pick(rng);
    while (n == targets[i]) n = pick(rng);
    out[i] = n;
  }
  return out;
}

bool EarlyStopping::observe(double score) {
  if (!seen_ || score > best_) {
    seen_ = true;
    best_ = score;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

template <typename T>
Tensor<T> pairwise_loss(const Tensor<T>& pos, const Tensor<T>& neg, std::span<const std::uint8_t> mask) {
  if (pos.numel() != mask.size()) {
    throw DimensionError("scores " + shape_to_string(pos.shape()) + " with a mask of " +
                         std::to_string(mask.size()));
  }
  std::vector<T> w(mask.begin(), mask.end());
  const auto count = std::accumulate(w.begin(), w.end(), T(0));
  if (count == T(0)) throw ContractError("loss over zero valid steps");
  auto per_step = log_sigmoid(sub(pos, neg));
  auto weights = Tensor<T>::from(pos.shape(), std::move(w));
  return scale(sum(mul(per_step, weights)), T(-1) / count);
}

template Tensor<float> pairwise_loss(const Tensor<float>&, const Tensor<float>&, std::span<const std::uint8_t>);
template Tensor<double> pairwise_loss(const Tensor<double>&, const Tensor<double>&, std::span<const std::uint8_t>);

template <typename T>
void adam_step(model::ModelParams<T>& params, AdamState& state, const TrainConfig& config) {
  auto named = params.named();
  if (state.m.empty()) {
    for (auto& [name, t] : named) {
      state.m.emplace_back(t->numel(), 0.0);
      state.v.emplace_back(t->numel(), 0.0);
    }
  }
  if (state.m.size() != named.size()) throw ContractError("optimizer state does not match parameters");
  for (auto& [name, t] : named) {
    if (!t->has_grad()) continue;
    for (T g : t->grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NonFiniteGradient("non-finite gradient in " + name + " at step " +
                                std::to_string(state.step + 1));
      }
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < named.size(); ++p) {
    auto& t = *named[p].second;
    if (!t.has_grad()) continue;
    auto values = t.mutable_data();
    auto grad = t.grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
      const double update = config.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
      values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
    }
  }
}

template void adam_step(model::ModelParams<float>&, AdamState&, const TrainConfig&);
template void adam_step(model::ModelParams<double>&, AdamState&, const TrainConfig&);

TrainResult train(const model::ModelConfig& config, const model::ModelParams<float>& init,
                  const data::SplitDataset& split, const TrainConfig& train_config,
                  const eval::EvalConfig& eval_config, const EpochCallback& on_epoch) {
  config.validate();
  train_config.validate();
  if (split.train.empty()) throw ContractError("no training sequences");
  if (split.validation.empty()) throw ContractError("no validation sequences");

  auto params = init.clone();
  AdamState adam;
  Rng shuffle_rng = make_stream(train_config.seed, "shuffle");
  Rng negative_rng = make_stream(train_config.seed, "negatives");
  Rng gumbel_rng = make_stream(train_config.seed, "gumbel");

  TrainResult result;
  result.best = params.clone();
  EarlyStopping stopping(train_config.patience);
  std::vector<std::size_t> order(split.train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= train_config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0, step_count = 0;
    bool diverged = false;
    for (std::size_t start = 0; start < order.size(); start += train_config.batch_size) {
      const std::size_t end = std::min(order.size(), start + train_config.batch_size);
      std::vector<const data::BehaviorSequence*> chunk;
      for (std::size_t i = start; i < end; ++i) chunk.push_back(&split.train[order[i]]);
      auto batch = model::Batch::from(chunk);
      auto negatives = sample_negatives(batch.targets, split.num_items, negative_rng);
      std::vector<std::uint8_t> mask(batch.targets.size());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = batch.targets[i] != 0;

      auto trace = model::forward(batch, params, config, {.training = true, .rng = &gumbel_rng});
      auto loss = pairwise_loss(model::pair_scores(trace.output, batch.targets, params),
                                model::pair_scores(trace.output, negatives, params), mask);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        result.stop_reason = "non-finite loss at epoch " + std::to_string(epoch);
        diverged = true;
        break;
      }
      params.zero_grad();
      loss.backward();
      try {
        adam_step(params, adam, train_config);
      } catch (const NonFiniteGradient& e) {
        result.stop_reason = std::string(e.what()) + " (epoch " + std::to_string(epoch) + ")";
        diverged = true;
        break;
      }
      const double steps = static_cast<double>(std::count(mask.begin(), mask.end(), 1));
      loss_sum += value * steps;
      step_count += steps;
    }
    if (diverged) break;

    auto report = eval::evaluate(config, params, split.validation, split, eval_config);
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / step_count;
    record.val_mrr = report.mrr;
    record.keep_rates = report.keep_rates;
    {
      // Cutoff 10 is always logged, whatever cutoffs the report carries.
      double hr = 0, ndcg = 0;
      for (auto rank : report.ranks) {
        auto m = eval::hr_ndcg_mrr(rank, 10);
        hr += m.hr;
        ndcg += m.ndcg;
      }
      const double n = static_cast<double>(report.ranks.size());
      record.val_hr10 = hr / n;
      record.val_ndcg10 = ndcg / n;
    }
    result.log.push_back(record);
    if (on_epoch) on_epoch(record);

    if (stopping.observe(record.val_mrr)) {
      result.best_val_mrr = record.val_mrr;
      result.best_epoch = epoch;
      result.best.assign(params);
    } else if (stopping.should_stop()) {
      result.stop_reason = "no validation improvement for " +
                           std::to_string(stopping.since_best()) + " epochs";
      break;
    }
  }
  if (result.stop_reason.empty()) result.stop_reason = "reached max epochs";
  return result;
}

void write_epoch_header(std::ostream& out, std::size_t blocks) {
  out << "epoch,train_loss,val_mrr,val_hr10,val_ndcg10";
  for (std::size_t l = 1; l <= blocks; ++l) out << ",keep_rate_l" << l;
  out << '\n';
}

void write_epoch_row(std::ostream& out, const EpochRecord& r) {
  const auto precision = out.precision(10);
  out << r.epoch << ',' << r.train_loss << ',' << r.val_mrr << ',' << r.val_hr10 << ','
      << r.val_ndcg10;
  for (double k : r.keep_rates) out << ',' << k;
  out << '\n';
  out.precision(precision);
}

}  // namespace retr::training
