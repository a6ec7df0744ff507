#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "retr/tensor.hpp"

namespace retr {

// Added to attention logits to mask a position. Softmax treats any input at
// or below kMaskThreshold as masked and gives it exactly zero weight.
inline constexpr double kMaskSentinel = -1e9;
inline constexpr double kMaskThreshold = -5e8;

/// Number of softmax slices seen so far in which every position was masked.
/// Such slices produce all zeros.
std::uint64_t softmax_all_masked_count();
void reset_softmax_all_masked_count();

// Elementwise with numpy-style broadcasting (trailing dimensions aligned).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T offset);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
/// log(sigmoid(x)) evaluated without overflow for large |x|.
template <typename T> Tensor<T> log_sigmoid(const Tensor<T>& x);
/// Gradient is passed only where lo <= x <= hi.
template <typename T> Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

// Reductions. Reducing everything yields a 0-d tensor.
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x, std::size_t axis, bool keepdim = false);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim = false);
/// Inclusive prefix sum along axis.
template <typename T> Tensor<T> cumsum(const Tensor<T>& x, std::size_t axis);

/// Softmax along axis with the max subtracted first. Masked positions (see
/// kMaskThreshold) receive exactly zero; fully masked slices are all zero and
/// bump softmax_all_masked_count().
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// Normalizes over the last axis using the population variance, then applies
/// gamma and beta (both shaped [d]).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps);

/// [m,k]x[k,n], [B,m,k]x[k,n] or [B,m,k]x[B,k,n].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a times b transposed: [m,k]x[n,k] -> [m,n], batched over a leading axis.
template <typename T> Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b);

/// Gathers rows of a [V,d] table; result is [indices.size(), d]. Rows equal to
/// padding_idx (when >= 0) receive no gradient.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int64_t> indices,
                    std::int64_t padding_idx = -1);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Concatenates along the last axis; all leading dimensions must agree.
template <typename T> Tensor<T> concat_last(const std::vector<Tensor<T>>& parts);
/// Columns [begin, end) of the last axis.
template <typename T> Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t end);

/// Forward value is `hard` exactly; the backward pass routes the incoming
/// gradient to `soft`, multiplied by grad_mask when one is given.
template <typename T>
Tensor<T> straight_through(std::vector<T> hard, const Tensor<T>& soft,
                           std::span<const T> grad_mask = {});

/// Inverted dropout. p == 0 returns x unchanged.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng);

}  // namespace retr
