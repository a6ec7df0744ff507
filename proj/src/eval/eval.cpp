#include "retr/eval.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

namespace retr::eval {
namespace {

float dot_row(const model::ModelParams<float>& params, int item, std::span<const float> state) {
  const std::size_t d = state.size();
  const float* row = params.item_embedding.data().data() + static_cast<std::size_t>(item) * d;
  float acc = 0.0f;
  for (std::size_t j = 0; j < d; ++j) acc += row[j] * state[j];
  return acc;
}

std::size_t rank_for_state(const model::ModelParams<float>& params, std::span<const float> state,
                           int truth, std::span<const int> negatives) {
  std::vector<float> neg;
  neg.reserve(negatives.size());
  for (int n : negatives) neg.push_back(dot_row(params, n, state));
  return rank_of<float>(dot_row(params, truth, state), neg);
}

}  // namespace

void EvalConfig::validate() const {
  if (negatives < 1) throw std::invalid_argument("evaluation needs at least one negative");
  if (ks.empty()) throw std::invalid_argument("evaluation needs at least one cutoff k");
  for (auto k : ks) {
    if (k < 1) throw std::invalid_argument("cutoff k must be at least 1");
  }
  if (batch_size < 1) throw std::invalid_argument("evaluation batch size must be positive");
}

std::vector<int> sample_eval_negatives(std::span<const int> history, std::size_t num_items,
                                       std::size_t count, Rng& rng) {
  std::vector<bool> taken(num_items + 1, false);
  std::size_t seen = 0;
  for (int i : history) {
    if (i >= 1 && static_cast<std::size_t>(i) <= num_items && !taken[static_cast<std::size_t>(i)]) {
      taken[static_cast<std::size_t>(i)] = true;
      ++seen;
    }
  }
  if (num_items - seen < count) {
    throw CatalogTooSmall("drawing " + std::to_string(count) + " negatives for a user with " +
                          std::to_string(seen) + " distinct items needs a catalog of at least " +
                          std::to_string(count + seen) + " items, have " + std::to_string(num_items));
  }
  std::uniform_int_distribution<int> pick(1, static_cast<int>(num_items));
  std::vector<int> out;
  out.reserve(count);
  while (out.size() < count) {
    const int c = pick(rng);
    if (taken[static_cast<std::size_t>(c)]) continue;
    taken[static_cast<std::size_t>(c)] = true;
    out.push_back(c);
  }
  return out;
}

template <typename T>
std::size_t rank_of(T truth, std::span<const T> negatives) {
  std::size_t above = 0;
  for (T s : negatives) {
    if (s >= truth) ++above;
  }
  return 1 + above;
}

template std::size_t rank_of<float>(float, std::span<const float>);
template std::size_t rank_of<double>(double, std::span<const double>);

Metrics hr_ndcg_mrr(std::size_t rank, std::size_t k) {
  if (rank < 1) throw std::invalid_argument("rank must be at least 1");
  Metrics m;
  m.mrr = 1.0 / static_cast<double>(rank);
  if (rank <= k) {
    m.hr = 1.0;
    m.ndcg = 1.0 / std::log2(static_cast<double>(rank) + 1.0);
  }
  return m;
}

void RouteRecovery::add(std::span<const double> route, std::span<const std::uint8_t> mask,
                        std::span<const std::uint8_t> pivotal) {
  if (pivotal.empty()) {
    ++skipped;
    return;
  }
  ++sequences;
  for (std::size_t t = 0; t < route.size(); ++t) {
    if (!mask[t]) continue;
    if (pivotal[t]) {
      pivotal_total += 1;
      pivotal_kept += route[t];
    } else {
      other_total += 1;
      other_kept += route[t];
    }
  }
}

double RouteRecovery::ratio() const {
  const double other = other_rate();
  if (other == 0.0) return pivotal_rate() > 0 ? std::numeric_limits<double>::infinity() : 0.0;
  return pivotal_rate() / other;
}

RouteRecovery route_recovery(const model::ForwardTrace<float>& trace, const model::Batch& batch,
                             const std::vector<std::vector<std::uint8_t>>& pivotal) {
  RouteRecovery rec;
  const auto& hard = trace.routes.back().hard;
  for (std::size_t b = 0; b < batch.size; ++b) {
    std::vector<double> route(hard.begin() + static_cast<std::ptrdiff_t>(b * batch.len),
                              hard.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch.len));
    std::span<const std::uint8_t> mask(batch.mask.data() + b * batch.len, batch.len);
    rec.add(route, mask, b < pivotal.size() ? std::span<const std::uint8_t>(pivotal[b])
                                            : std::span<const std::uint8_t>());
  }
  return rec;
}

std::vector<int> user_negatives(const data::SplitDataset& split, int user, const EvalConfig& config) {
  Rng rng = make_stream(config.seed, "eval-negatives", static_cast<std::uint64_t>(user));
  return sample_eval_negatives(split.histories.at(static_cast<std::size_t>(user)), split.num_items,
                               config.negatives, rng);
}

std::size_t rank_candidates(const model::ModelConfig& config, const model::ModelParams<float>& params,
                            const data::BehaviorSequence& seq, std::span<const int> negatives) {
  const data::BehaviorSequence* one[] = {&seq};
  auto batch = model::Batch::from(one);
  Rng rng = make_stream(0, "eval-gumbel");
  auto trace = model::forward(batch, params, config, {.rng = &rng});
  const std::size_t d = config.dim;
  auto state = trace.output.data().subspan(batch.last[0] * d, d);
  return rank_for_state(params, state, seq.last_target(), negatives);
}

EvalReport evaluate(const model::ModelConfig& config, const model::ModelParams<float>& params,
                    const std::vector<data::BehaviorSequence>& seqs,
                    const data::SplitDataset& split, const EvalConfig& eval_config,
                    const data::PivotalLabels* labels) {
  eval_config.validate();
  EvalReport report;
  for (auto k : eval_config.ks) {
    report.hr[k] = 0;
    report.ndcg[k] = 0;
  }
  report.keep_rates.assign(config.blocks, 0.0);
  if (labels) report.recovery.emplace();
  Rng gumbel = make_stream(eval_config.seed, "eval-gumbel");
  double valid = 0;
  const std::size_t d = config.dim;

  for (std::size_t start = 0; start < seqs.size(); start += eval_config.batch_size) {
    const std::size_t end = std::min(seqs.size(), start + eval_config.batch_size);
    std::vector<const data::BehaviorSequence*> chunk;
    for (std::size_t i = start; i < end; ++i) chunk.push_back(&seqs[i]);
    auto batch = model::Batch::from(chunk);
    auto trace = model::forward(batch, params, config, {.rng = &gumbel});

    for (std::size_t b = 0; b < batch.size; ++b) {
      const auto& seq = *chunk[b];
      auto negatives = user_negatives(split, seq.user, eval_config);
      auto state = trace.output.data().subspan((b * batch.len + batch.last[b]) * d, d);
      const std::size_t rank = rank_for_state(params, state, seq.last_target(), negatives);
      report.ranks.push_back(rank);
      for (auto k : eval_config.ks) {
        auto m = hr_ndcg_mrr(rank, k);
        report.hr[k] += m.hr;
        report.ndcg[k] += m.ndcg;
      }
      report.mrr += 1.0 / static_cast<double>(rank);
    }
    for (auto m : batch.mask) valid += m;
    for (std::size_t l = 0; l < trace.routes.size(); ++l) {
      const auto& hard = trace.routes[l].hard;
      for (std::size_t i = 0; i < hard.size(); ++i) {
        if (batch.mask[i]) report.keep_rates[l] += hard[i];
      }
    }
    if (labels) {
      std::vector<std::vector<std::uint8_t>> pivotal;
      for (const auto* s : chunk) {
        auto it = labels->find(split.user_ids.at(static_cast<std::size_t>(s->user)));
        pivotal.push_back(it == labels->end() ? std::vector<std::uint8_t>{}
                                              : data::align_pivotal(*s, it->second));
      }
      auto rec = route_recovery(trace, batch, pivotal);
      auto& total = *report.recovery;
      total.pivotal_kept += rec.pivotal_kept;
      total.pivotal_total += rec.pivotal_total;
      total.other_kept += rec.other_kept;
      total.other_total += rec.other_total;
      total.sequences += rec.sequences;
      total.skipped += rec.skipped;
    }
  }

  report.users = seqs.size();
  if (report.users > 0) {
    const double n = static_cast<double>(report.users);
    for (auto& [k, v] : report.hr) v /= n;
    for (auto& [k, v] : report.ndcg) v /= n;
    report.mrr /= n;
  }
  for (auto& r : report.keep_rates) r = valid > 0 ? r / valid : 0.0;
  return report;
}

void EvalReport::write_text(std::ostream& out) const {
  out << std::fixed << std::setprecision(4);
  out << "users evaluated: " << users << '\n';
  for (const auto& [k, v] : hr) out << "HR@" << k << ": " << v << '\n';
  for (const auto& [k, v] : ndcg) out << "NDCG@" << k << ": " << v << '\n';
  out << "MRR: " << mrr << '\n';
  for (std::size_t l = 0; l < keep_rates.size(); ++l) {
    out << "keep rate, block " << l + 1 << ": " << keep_rates[l] << '\n';
  }
  if (recovery) {
    out << "pivotal keep rate: " << recovery->pivotal_rate() << '\n';
    out << "non-pivotal keep rate: " << recovery->other_rate() << '\n';
    out << "recovery ratio: " << recovery->ratio() << '\n';
    out << "sequences without labels: " << recovery->skipped << '\n';
  }
  out << std::defaultfloat;
}

void EvalReport::write_csv(std::ostream& out) const {
  out << std::setprecision(10);
  out << "metric,value\n";
  out << "users," << users << '\n';
  for (const auto& [k, v] : hr) out << "hr@" << k << ',' << v << '\n';
  for (const auto& [k, v] : ndcg) out << "ndcg@" << k << ',' << v << '\n';
  out << "mrr," << mrr << '\n';
  for (std::size_t l = 0; l < keep_rates.size(); ++l) out << "keep_rate_l" << l + 1 << ',' << keep_rates[l] << '\n';
  if (recovery) {
    out << "pivotal_keep_rate," << recovery->pivotal_rate() << '\n';
    out << "nonpivotal_keep_rate," << recovery->other_rate() << '\n';
    out << "recovery_ratio," << recovery->ratio() << '\n';
    out << "unlabeled_sequences," << recovery->skipped << '\n';
  }
  out << std::defaultfloat;
}

}  // namespace retr::eval
