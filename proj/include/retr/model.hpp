#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "retr/archive.hpp"
#include "retr/data.hpp"
#include "retr/ops.hpp"
#include "retr/random.hpp"
#include "retr/tensor.hpp"

namespace retr::model {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Routing { learned, all_ones };
enum class Pooling { global, causal };
// How the sampled route enters the forward pass while training: hard values
// with gradients through the relaxation (st), or the relaxation itself (soft).
enum class Relaxation { st, soft };
enum class InferenceRoute { argmax, sample };

std::string to_string(Routing v);
std::string to_string(Pooling v);
std::string to_string(Relaxation v);
std::string to_string(InferenceRoute v);
std::optional<Routing> parse_routing(std::string_view s);
std::optional<Pooling> parse_pooling(std::string_view s);
std::optional<Relaxation> parse_relaxation(std::string_view s);
std::optional<InferenceRoute> parse_inference_route(std::string_view s);

struct ModelConfig {
  std::size_t num_items = 0;  // real items; the embedding table has one extra padding row
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t dim = 64;
  std::size_t max_len = 50;
  double tau = 0.8;
  Routing routing = Routing::learned;
  Pooling pooling = Pooling::global;
  Relaxation relaxation = Relaxation::st;
  InferenceRoute inference = InferenceRoute::argmax;
  std::size_t ffn_hidden = 0;  // 0 means dim
  double dropout = 0.0;
  double ln_eps = 1e-8;

  void validate() const;
  std::size_t head_dim() const { return dim / heads; }
  std::size_t ffn_width() const { return ffn_hidden ? ffn_hidden : dim; }

  std::vector<std::pair<std::string, std::string>> to_metadata() const;
  static ModelConfig from_metadata(const std::vector<std::pair<std::string, std::string>>& meta);
};

/// Fields that fix parameter shapes and differ between two configs, as
/// "name: a vs b" strings. Routing, pooling, tau and the inference mode do
/// not change shapes and are not compared.
std::vector<std::string> structural_differences(const ModelConfig& a, const ModelConfig& b);

template <typename T>
struct BlockParams {
  std::vector<Tensor<T>> wq, wk, wv;  // one [d, d/h] matrix per head
  Tensor<T> wo, bo;                    // head merge [d, d] and [d]
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> router_w, router_b;  // pooled summary MLP [d, d]
  Tensor<T> logit_w, logit_b;    // keep/drop logits [d, 2]
};

template <typename T>
struct ModelParams {
  Tensor<T> item_embedding;      // [num_items + 1, d], row 0 is padding
  Tensor<T> position_embedding;  // [N, d]
  std::vector<BlockParams<T>> blocks;

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  /// Every parameter with its unique name, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>*>> named();
  std::vector<std::pair<std::string, const Tensor<T>*>> named() const;

  /// Deep copy holding fresh leaves.
  ModelParams clone() const;
  template <typename U>
  ModelParams<U> cast() const;
  void zero_grad();
  /// Copies values from another set of parameters with identical shapes.
  void assign(const ModelParams& other);

  Archive to_archive(const ModelConfig& config) const;
  /// Loads parameters saved by to_archive; throws ArchiveError on missing or
  /// mis-shaped arrays.
  static ModelParams from_archive(const Archive& archive, const ModelConfig& config);
};

/// Fixed-length batch of sequences, flattened row-major [size, len].
struct Batch {
  std::size_t size = 0;
  std::size_t len = 0;
  std::vector<std::int64_t> items;
  std::vector<std::uint8_t> mask;
  std::vector<std::int64_t> targets;
  // Index of the last valid slot per row; every row has at least one.
  std::vector<std::size_t> last;

  static Batch from(std::span<const data::BehaviorSequence* const> seqs);
  static Batch from(const std::vector<data::BehaviorSequence>& seqs);
};

template <typename T>
struct Route {
  std::size_t layer = 0;
  std::vector<T> hard;  // [size * len], exactly 0 or 1
  Tensor<T> soft;       // [size, len] keep relaxation, multiplied across layers
  Tensor<T> relaxed;    // [size, len, 2] this block's (drop, keep) relaxation
  Tensor<T> gate;       // [size, len] what multiplies the queries
};

template <typename T>
struct RouterLogits {
  Tensor<T> pi;  // [size, len, 2] as [drop, keep]
};

/// R^0: ones over valid positions, zeros over padding.
template <typename T>
Route<T> initial_route(const Batch& batch);

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // Gumbel noise and dropout; required when sampling or dropping out
  bool record_attention = false;
  // Fixed Gumbel noise per block, [size * len * 2] as (drop, keep) pairs.
  const std::vector<std::vector<double>>* gumbel = nullptr;
};

template <typename T>
struct ForwardTrace {
  Tensor<T> output;                            // Z^L, [size, len, d]
  std::vector<Route<T>> routes;                // one per block
  std::vector<RouterLogits<T>> router;         // one per block; empty in all-ones routing
  std::vector<std::vector<std::vector<T>>> attention;  // [block][head] -> [size, len, len]
};

/// Item plus position embeddings, [size, len, d]. Throws ContractError on an
/// item index outside the table.
template <typename T>
Tensor<T> embed(const Batch& batch, const ModelParams<T>& params);

template <typename T>
RouterLogits<T> router_logits(const Tensor<T>& z, const Route<T>& prev, const BlockParams<T>& block,
                              Pooling pooling);

enum class SampleMode { gumbel, threshold };

/// Turns keep probabilities into a route for one block. Gumbel mode draws
/// noise (or uses `gumbel` when given, length size*len*2); threshold mode keeps
/// positions with keep probability >= 0.5. The last valid position of each
/// row is always kept and receives no gradient. Padding gets hard 0.
template <typename T>
Route<T> sample_route(const RouterLogits<T>& logits, const Batch& batch, double tau,
                      SampleMode mode, Relaxation relaxation, Rng* rng,
                      std::span<const double> gumbel = {});

/// Elementwise product with the previous layer's route.
template <typename T>
Route<T> update_route(const Route<T>& next, const Route<T>& prev);

/// Causal multi-head attention whose queries come from routed states and keys
/// and values from the unrouted input. Padding keys are masked and padding
/// queries attend to nothing. When `weights` is given it receives the softmax
/// output per head. An undefined gate leaves the queries unrouted.
template <typename T>
Tensor<T> pathway_attention(const Tensor<T>& z, const Tensor<T>& gate, const Batch& batch,
                            const BlockParams<T>& block, const ModelConfig& config,
                            const ForwardOptions& options = {},
                            std::vector<std::vector<T>>* weights = nullptr);

template <typename T>
struct BlockOutput {
  Tensor<T> z;
  Route<T> route;
  std::optional<RouterLogits<T>> router;
  std::vector<std::vector<T>> attention;
};

template <typename T>
BlockOutput<T> block_forward(const Tensor<T>& z_prev, const Route<T>& r_prev, const Batch& batch,
                             const BlockParams<T>& block, const ModelConfig& config,
                             const ForwardOptions& options, std::size_t layer);

template <typename T>
ForwardTrace<T> forward(const Batch& batch, const ModelParams<T>& params, const ModelConfig& config,
                        const ForwardOptions& options = {});

/// Plain causal transformer stack with the same weights and no routing.
template <typename T>
Tensor<T> baseline_forward(const Batch& batch, const ModelParams<T>& params,
                           const ModelConfig& config, const ForwardOptions& options = {});

/// Scores of every catalog entry for one final state; entry 0 (padding) is
/// -infinity.
template <typename T>
std::vector<T> score(std::span<const T> state, const ModelParams<T>& params);

/// Differentiable scores of the given items at every slot: sum over d of
/// Z[b,t] * E[items[b,t]], shape [size, len]. Item 0 contributes nothing to
/// the embedding gradient.
template <typename T>
Tensor<T> pair_scores(const Tensor<T>& z, std::span<const std::int64_t> items,
                      const ModelParams<T>& params);

/// Fraction of valid positions kept per block.
template <typename T>
std::vector<double> keep_rates(const ForwardTrace<T>& trace, const Batch& batch);

}  // namespace retr::model
