#include <cmath>

#include "retr/model.hpp"

namespace retr::model {
namespace {

template <typename T>
Tensor<T> constant(Shape shape, std::vector<T> values) {
  return Tensor<T>::from(std::move(shape), std::move(values), false);
}

// Additive attention mask [size, len, len]: query t sees key s only when both
// are valid and s <= t.
template <typename T>
Tensor<T> attention_mask(const Batch& batch) {
  const std::size_t B = batch.size, N = batch.len;
  std::vector<T> m(B * N * N, static_cast<T>(kMaskSentinel));
  for (std::size_t b = 0; b < B; ++b) {
    const auto* valid = &batch.mask[b * N];
    for (std::size_t t = 0; t < N; ++t) {
      if (!valid[t]) continue;
      T* row = &m[(b * N + t) * N];
      for (std::size_t s = 0; s <= t; ++s) {
        if (valid[s]) row[s] = T(0);
      }
    }
  }
  return constant<T>({B, N, N}, std::move(m));
}

Rng& require_rng(const ForwardOptions& options, const char* purpose) {
  if (!options.rng) throw ContractError(std::string("an RNG is required for ") + purpose);
  return *options.rng;
}

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const ModelConfig& config, const ForwardOptions& options) {
  if (!options.training || config.dropout == 0.0) return x;
  return dropout(x, config.dropout, require_rng(options, "dropout"));
}

}  // namespace

Batch Batch::from(std::span<const data::BehaviorSequence* const> seqs) {
  if (seqs.empty()) throw ContractError("batch needs at least one sequence");
  Batch batch;
  batch.size = seqs.size();
  batch.len = seqs.front()->length();
  batch.items.reserve(batch.size * batch.len);
  batch.mask.reserve(batch.size * batch.len);
  batch.targets.reserve(batch.size * batch.len);
  for (const auto* s : seqs) {
    if (s->length() != batch.len) {
      throw DimensionError("sequence of length " + std::to_string(s->length()) +
                           " in a batch of length " + std::to_string(batch.len));
    }
    std::size_t last = batch.len;
    for (std::size_t t = 0; t < batch.len; ++t) {
      batch.items.push_back(s->items[t]);
      batch.mask.push_back(s->mask[t]);
      batch.targets.push_back(s->targets[t]);
      if (s->mask[t]) last = t;
    }
    if (last == batch.len) throw ContractError("sequence without valid positions");
    batch.last.push_back(last);
  }
  return batch;
}

Batch Batch::from(const std::vector<data::BehaviorSequence>& seqs) {
  std::vector<const data::BehaviorSequence*> ptrs;
  ptrs.reserve(seqs.size());
  for (const auto& s : seqs) ptrs.push_back(&s);
  return from(std::span<const data::BehaviorSequence* const>(ptrs));
}

template <typename T>
Route<T> initial_route(const Batch& batch) {
  Route<T> r;
  r.hard.assign(batch.mask.begin(), batch.mask.end());
  r.soft = constant<T>({batch.size, batch.len}, r.hard);
  r.gate = r.soft;
  return r;
}

template <typename T>
Tensor<T> embed(const Batch& batch, const ModelParams<T>& params) {
  const std::size_t rows = params.item_embedding.dim(0);
  const std::size_t d = params.item_embedding.dim(1);
  for (auto i : batch.items) {
    if (i < 0 || static_cast<std::size_t>(i) >= rows) {
      throw ContractError("item index " + std::to_string(i) + " outside the embedding table of " +
                          std::to_string(rows) + " rows");
    }
  }
  const std::size_t max_len = params.position_embedding.dim(0);
  if (batch.len > max_len) {
    throw ContractError("sequence length " + std::to_string(batch.len) + " exceeds max_len " +
                        std::to_string(max_len));
  }
  auto items = reshape(embedding(params.item_embedding, batch.items, 0), {batch.size, batch.len, d});
  Tensor<T> pos = params.position_embedding;
  if (batch.len < max_len) {
    std::vector<std::int64_t> idx(batch.len);
    for (std::size_t t = 0; t < batch.len; ++t) idx[t] = static_cast<std::int64_t>(t);
    pos = embedding(pos, idx);
  }
  return add(items, pos);
}

template <typename T>
RouterLogits<T> router_logits(const Tensor<T>& z, const Route<T>& prev, const BlockParams<T>& block,
                              Pooling pooling) {
  const std::size_t B = z.dim(0), N = z.dim(1);
  auto r = reshape(prev.gate, {B, N, 1});
  auto kept = mul(z, r);
  Tensor<T> num, den;
  if (pooling == Pooling::global) {
    num = sum(kept, 1, true);
    den = sum(r, 1, true);
  } else {
    num = cumsum(kept, 1);
    den = cumsum(r, 1);
  }
  // Prefixes before the first kept position have nothing to pool; their
  // numerator is zero, so a unit denominator yields a zero summary.
  std::vector<T> guard(den.numel(), T(0));
  bool guarded = false;
  for (std::size_t i = 0; i < guard.size(); ++i) {
    if (den.data()[i] == T(0)) {
      guard[i] = T(1);
      guarded = true;
    }
  }
  if (guarded) {
    if (pooling == Pooling::global) throw ContractError("router input has no kept positions");
    den = add(den, constant<T>(den.shape(), std::move(guard)));
  }
  auto pooled = div(num, den);
  auto g = relu(add(matmul(pooled, block.router_w), block.router_b));
  auto z_emb = add(z, mul(z, g));
  auto logits = add(matmul(z_emb, block.logit_w), block.logit_b);
  return {softmax(logits, 2)};
}

template <typename T>
Route<T> sample_route(const RouterLogits<T>& logits, const Batch& batch, double tau,
                      SampleMode mode, Relaxation relaxation, Rng* rng,
                      std::span<const double> gumbel) {
  if (!(tau > 0.0)) throw ContractError("tau must be positive");
  const std::size_t B = batch.size, N = batch.len, BN = B * N;
  if (logits.pi.shape() != Shape{B, N, 2}) {
    throw DimensionError("router output " + shape_to_string(logits.pi.shape()) +
                         " does not match batch " + shape_to_string({B, N, 2}));
  }
  Route<T> route;
  route.hard.assign(BN, T(0));
  Tensor<T> y;  // [B, N, 2] scores whose argmax decides the route
  if (mode == SampleMode::threshold) {
    y = logits.pi;
    route.relaxed = logits.pi;
    route.soft = reshape(slice_last(logits.pi, 1, 2), {B, N});
  } else {
    std::vector<T> g(BN * 2);
    if (!gumbel.empty()) {
      if (gumbel.size() != g.size()) {
        throw DimensionError("expected " + std::to_string(g.size()) + " Gumbel draws, got " +
                             std::to_string(gumbel.size()));
      }
      std::copy(gumbel.begin(), gumbel.end(), g.begin());
    } else {
      if (!rng) throw ContractError("an RNG is required for Gumbel sampling");
      for (auto& x : g) x = static_cast<T>(-std::log(-std::log(open_uniform(*rng))));
    }
    auto lp = log(clamp(logits.pi, static_cast<T>(1e-9), static_cast<T>(1.0 - 1e-9)));
    y = scale(add(lp, constant<T>({B, N, 2}, std::move(g))), static_cast<T>(1.0 / tau));
    route.relaxed = softmax(y, 2);
    route.soft = reshape(slice_last(route.relaxed, 1, 2), {B, N});
  }

  std::vector<T> grad_mask(BN, T(0));
  std::vector<T> pinned(BN, T(0));
  const auto yv = y.data();
  for (std::size_t i = 0; i < BN; ++i) {
    if (!batch.mask[i]) continue;
    // Ties go to "drop" like an argmax over [drop, keep], except that the
    // threshold rule keeps at exactly one half.
    const bool keep = mode == SampleMode::threshold ? yv[2 * i + 1] >= T(0.5)
                                                    : yv[2 * i + 1] > yv[2 * i];
    route.hard[i] = keep ? T(1) : T(0);
    grad_mask[i] = T(1);
  }
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t i = b * N + batch.last[b];
    route.hard[i] = T(1);
    grad_mask[i] = T(0);
    pinned[i] = T(1);
  }
  if (relaxation == Relaxation::soft && mode == SampleMode::gumbel) {
    route.gate = add(mul(route.soft, constant<T>({B, N}, grad_mask)), constant<T>({B, N}, pinned));
  } else {
    route.gate = straight_through(route.hard, route.soft, std::span<const T>(grad_mask));
  }
  return route;
}

template <typename T>
Route<T> update_route(const Route<T>& next, const Route<T>& prev) {
  if (next.hard.size() != prev.hard.size()) {
    throw DimensionError("routes of length " + std::to_string(next.hard.size()) + " and " +
                         std::to_string(prev.hard.size()));
  }
  Route<T> r;
  r.layer = next.layer;
  r.relaxed = next.relaxed;
  r.hard.resize(next.hard.size());
  for (std::size_t i = 0; i < r.hard.size(); ++i) r.hard[i] = next.hard[i] * prev.hard[i];
  r.soft = mul(next.soft, prev.soft);
  r.gate = mul(next.gate, prev.gate);
  return r;
}

template <typename T>
Tensor<T> pathway_attention(const Tensor<T>& z, const Tensor<T>& gate, const Batch& batch,
                            const BlockParams<T>& block, const ModelConfig& config,
                            const ForwardOptions& options, std::vector<std::vector<T>>* weights) {
  const std::size_t B = z.dim(0), N = z.dim(1);
  const Tensor<T> query_in = gate.defined() ? mul(z, reshape(gate, {B, N, 1})) : z;
  const auto mask = attention_mask<T>(batch);
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(config.head_dim())));
  std::vector<Tensor<T>> heads;
  heads.reserve(block.wq.size());
  for (std::size_t m = 0; m < block.wq.size(); ++m) {
    auto q = matmul(query_in, block.wq[m]);
    auto k = matmul(z, block.wk[m]);
    auto v = matmul(z, block.wv[m]);
    auto a = softmax(add(scale(matmul_bt(q, k), inv_scale), mask), 2);
    if (weights) weights->emplace_back(a.data().begin(), a.data().end());
    heads.push_back(matmul(maybe_dropout(a, config, options), v));
  }
  return add(matmul(concat_last(heads), block.wo), block.bo);
}

namespace {

template <typename T>
Tensor<T> finish_block(const Tensor<T>& attn, const Tensor<T>& z_prev, const BlockParams<T>& block,
                       const ModelConfig& config, const ForwardOptions& options) {
  const T eps = static_cast<T>(config.ln_eps);
  auto zh = layer_norm(add(attn, z_prev), block.ln1_gamma, block.ln1_beta, eps);
  auto h = maybe_dropout(relu(add(matmul(zh, block.ffn_w1), block.ffn_b1)), config, options);
  auto f = add(matmul(h, block.ffn_w2), block.ffn_b2);
  return layer_norm(add(f, zh), block.ln2_gamma, block.ln2_beta, eps);
}

}  // namespace

template <typename T>
BlockOutput<T> block_forward(const Tensor<T>& z_prev, const Route<T>& r_prev, const Batch& batch,
                             const BlockParams<T>& block, const ModelConfig& config,
                             const ForwardOptions& options, std::size_t layer) {
  BlockOutput<T> out;
  if (config.routing == Routing::all_ones) {
    out.route = r_prev;
  } else {
    out.router = router_logits(z_prev, r_prev, block, config.pooling);
    const bool sample = options.training || config.inference == InferenceRoute::sample;
    const Relaxation relax = options.training ? config.relaxation : Relaxation::st;
    std::span<const double> noise;
    if (options.gumbel) noise = options.gumbel->at(layer);
    auto next = sample_route(*out.router, batch, config.tau,
                             sample ? SampleMode::gumbel : SampleMode::threshold, relax,
                             options.rng, noise);
    out.route = update_route(next, r_prev);
  }
  out.route.layer = layer + 1;
  auto attn = pathway_attention(z_prev, out.route.gate, batch, block, config, options,
                                options.record_attention ? &out.attention : nullptr);
  out.z = finish_block(attn, z_prev, block, config, options);
  return out;
}

template <typename T>
ForwardTrace<T> forward(const Batch& batch, const ModelParams<T>& params, const ModelConfig& config,
                        const ForwardOptions& options) {
  if (params.blocks.size() != config.blocks) throw ContractError("parameters do not match config");
  ForwardTrace<T> trace;
  auto z = embed(batch, params);
  auto route = initial_route<T>(batch);
  for (std::size_t l = 0; l < config.blocks; ++l) {
    auto out = block_forward(z, route, batch, params.blocks[l], config, options, l);
    z = out.z;
    route = out.route;
    trace.routes.push_back(out.route);
    if (out.router) trace.router.push_back(*out.router);
    trace.attention.push_back(std::move(out.attention));
  }
  trace.output = z;
  return trace;
}

template <typename T>
Tensor<T> baseline_forward(const Batch& batch, const ModelParams<T>& params,
                           const ModelConfig& config, const ForwardOptions& options) {
  auto z = embed(batch, params);
  for (const auto& block : params.blocks) {
    auto attn = pathway_attention(z, Tensor<T>{}, batch, block, config, options);
    z = finish_block(attn, z, block, config, options);
  }
  return z;
}

template <typename T>
std::vector<T> score(std::span<const T> state, const ModelParams<T>& params) {
  const std::size_t rows = params.item_embedding.dim(0), d = params.item_embedding.dim(1);
  if (state.size() != d) {
    throw DimensionError("state of width " + std::to_string(state.size()) + " against table " +
                         shape_to_string(params.item_embedding.shape()));
  }
  const auto table = params.item_embedding.data();
  std::vector<T> out(rows);
  out[0] = -std::numeric_limits<T>::infinity();
  for (std::size_t k = 1; k < rows; ++k) {
    T acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += table[k * d + j] * state[j];
    out[k] = acc;
  }
  return out;
}

template <typename T>
Tensor<T> pair_scores(const Tensor<T>& z, std::span<const std::int64_t> items,
                      const ModelParams<T>& params) {
  if (z.ndim() != 3 || items.size() != z.dim(0) * z.dim(1)) {
    throw DimensionError("states " + shape_to_string(z.shape()) + " with " +
                         std::to_string(items.size()) + " item ids");
  }
  auto e = reshape(embedding(params.item_embedding, items, 0), z.shape());
  return sum(mul(z, e), 2);
}

template <typename T>
std::vector<double> keep_rates(const ForwardTrace<T>& trace, const Batch& batch) {
  std::vector<double> rates;
  double valid = 0;
  for (auto m : batch.mask) valid += m;
  for (const auto& r : trace.routes) {
    double kept = 0;
    for (std::size_t i = 0; i < r.hard.size(); ++i) {
      if (batch.mask[i]) kept += static_cast<double>(r.hard[i]);
    }
    rates.push_back(valid > 0 ? kept / valid : 0.0);
  }
  return rates;
}

#define RETR_INSTANTIATE(T)                                                                        \
  template Route<T> initial_route<T>(const Batch&);                                                \
  template Tensor<T> embed(const Batch&, const ModelParams<T>&);                                   \
  template RouterLogits<T> router_logits(const Tensor<T>&, const Route<T>&, const BlockParams<T>&, \
                                         Pooling);                                                 \
  template Route<T> sample_route(const RouterLogits<T>&, const Batch&, double, SampleMode,         \
                                 Relaxation, Rng*, std::span<const double>);                       \
  template Route<T> update_route(const Route<T>&, const Route<T>&);                                \
  template Tensor<T> pathway_attention(const Tensor<T>&, const Tensor<T>&, const Batch&,           \
                                       const BlockParams<T>&, const ModelConfig&,                  \
                                       const ForwardOptions&, std::vector<std::vector<T>>*);       \
  template BlockOutput<T> block_forward(const Tensor<T>&, const Route<T>&, const Batch&,           \
                                        const BlockParams<T>&, const ModelConfig&,                 \
                                        const ForwardOptions&, std::size_t);                       \
  template ForwardTrace<T> forward(const Batch&, const ModelParams<T>&, const ModelConfig&,        \
                                   const ForwardOptions&);                                         \
  template Tensor<T> baseline_forward(const Batch&, const ModelParams<T>&, const ModelConfig&,     \
                                      const ForwardOptions&);                                      \
  template std::vector<T> score(std::span<const T>, const ModelParams<T>&);                        \
  template Tensor<T> pair_scores(const Tensor<T>&, std::span<const std::int64_t>,                  \
                                 const ModelParams<T>&);                                           \
  template std::vector<double> keep_rates(const ForwardTrace<T>&, const Batch&);

RETR_INSTANTIATE(float)
RETR_INSTANTIATE(double)

#undef RETR_INSTANTIATE

}  // namespace retr::model
