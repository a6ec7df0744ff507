#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "retr/data.hpp"
#include "retr/model.hpp"

namespace retr::eval {

class CatalogTooSmall : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalConfig {
  std::size_t negatives = 100;
  std::vector<std::size_t> ks{10};
  std::uint64_t seed = 7;
  std::size_t batch_size = 256;

  void validate() const;
};

/// `count` distinct items drawn uniformly from 1..num_items, none of them in
/// `history`.
std::vector<int> sample_eval_negatives(std::span<const int> history, std::size_t num_items,
                                       std::size_t count, Rng& rng);

/// 1 + number of negatives scoring at or above the ground truth, so ties
/// count against it.
template <typename T>
std::size_t rank_of(T truth, std::span<const T> negatives);

struct Metrics {
  double hr = 0;
  double ndcg = 0;
  double mrr = 0;
};

Metrics hr_ndcg_mrr(std::size_t rank, std::size_t k);

/// Keep counts of the final route on pivotal and on other valid positions.
struct RouteRecovery {
  double pivotal_kept = 0;
  double pivotal_total = 0;
  double other_kept = 0;
  double other_total = 0;
  std::size_t sequences = 0;
  std::size_t skipped = 0;  // sequences without labels

  /// Adds one sequence; `pivotal` empty means the sequence has no labels.
  void add(std::span<const double> route, std::span<const std::uint8_t> mask,
           std::span<const std::uint8_t> pivotal);
  double pivotal_rate() const { return pivotal_total > 0 ? pivotal_kept / pivotal_total : 0.0; }
  double other_rate() const { return other_total > 0 ? other_kept / other_total : 0.0; }
  /// pivotal_rate / other_rate; infinity when nothing else is kept.
  double ratio() const;
};

/// Final-layer recovery statistics for one forward trace.
RouteRecovery route_recovery(const model::ForwardTrace<float>& trace, const model::Batch& batch,
                             const std::vector<std::vector<std::uint8_t>>& pivotal);

struct EvalReport {
  std::size_t users = 0;
  std::map<std::size_t, double> hr;
  std::map<std::size_t, double> ndcg;
  double mrr = 0;
  std::vector<double> keep_rates;  // per block over valid positions
  std::optional<RouteRecovery> recovery;
  std::vector<std::size_t> ranks;  // per evaluated sequence, in input order

  void write_text(std::ostream& out) const;
  void write_csv(std::ostream& out) const;
};

/// Rank of the held-out final target of `seq` among `negatives` sampled for
/// that user.
std::size_t rank_candidates(const model::ModelConfig& config, const model::ModelParams<float>& params,
                            const data::BehaviorSequence& seq, std::span<const int> negatives);

/// Ranks every sequence's final target against its user's negatives (seeded
/// per user) and averages the metrics. When labels are given, route recovery
/// is reported for the sequences that have them.
EvalReport evaluate(const model::ModelConfig& config, const model::ModelParams<float>& params,
                    const std::vector<data::BehaviorSequence>& seqs,
                    const data::SplitDataset& split, const EvalConfig& eval_config,
                    const data::PivotalLabels* labels = nullptr);

/// Negatives for one user under an evaluation config.
std::vector<int> user_negatives(const data::SplitDataset& split, int user, const EvalConfig& config);

}  // namespace retr::eval
