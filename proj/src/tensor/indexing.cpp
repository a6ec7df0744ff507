#include <algorithm>

#include "retr/ops.hpp"

namespace retr {

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int64_t> indices,
                    std::int64_t padding_idx) {
  if (table.ndim() != 2) {
    throw DimensionError("embedding: table must be 2-d, got " + shape_to_string(table.shape()));
  }
  const std::size_t rows = table.dim(0);
  const std::size_t d = table.dim(1);
  auto idx = std::make_shared<std::vector<std::int64_t>>(indices.begin(), indices.end());
  std::vector<T> out(idx->size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const auto r = (*idx)[i];
    if (r < 0 || static_cast<std::size_t>(r) >= rows) {
      throw ContractError("embedding: index " + std::to_string(r) + " outside table of " +
                          std::to_string(rows) + " rows");
    }
    std::copy_n(&tv[static_cast<std::size_t>(r) * d], d, &out[i * d]);
  }
  return make_op_result<T>("embedding", {idx->size(), d}, std::move(out), {table},
                           [idx, d, padding_idx](TapeNode<T>& self) {
                             auto& W = *self.inputs[0];
                             for (std::size_t i = 0; i < idx->size(); ++i) {
                               const auto r = (*idx)[i];
                               if (r == padding_idx) continue;
                               T* dst = &W.grad[static_cast<std::size_t>(r) * d];
                               const T* g = &self.grad[i * d];
                               for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
                             }
                           });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                         shape_to_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_op_result<T>("reshape", std::move(shape), std::move(out), {x},
                           [](TapeNode<T>& self) {
                             auto& X = *self.inputs[0];
                             for (std::size_t i = 0; i < self.grad.size(); ++i) {
                               X.grad[i] += self.grad[i];
                             }
                           });
}

template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  auto widths = std::make_shared<std::vector<std::size_t>>();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape pl = p.shape();
    if (pl.empty()) throw DimensionError("concat_last: scalar input");
    widths->push_back(pl.back());
    total += pl.back();
    pl.pop_back();
    if (pl != lead) {
      throw DimensionError("concat_last: leading dimensions differ, " +
                           shape_to_string(parts[0].shape()) + " vs " +
                           shape_to_string(p.shape()));
    }
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<T> out(rows * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    const std::size_t w = (*widths)[k];
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(&pv[r * w], w, &out[r * total + off]);
    off += w;
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_op_result<T>("concat_last", std::move(shape), std::move(out), parts,
                           [widths, rows, total](TapeNode<T>& self) {
                             std::size_t off = 0;
                             for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                               auto& P = *self.inputs[k];
                               const std::size_t w = (*widths)[k];
                               if (P.requires_grad) {
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t j = 0; j < w; ++j) {
                                     P.grad[r * w + j] += self.grad[r * total + off + j];
                                   }
                                 }
                               }
                               off += w;
                             }
                           });
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.ndim() == 0 || begin >= end || end > x.shape().back()) {
    throw DimensionError("slice_last: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") invalid for " + shape_to_string(x.shape()));
  }
  const std::size_t w = x.shape().back();
  const std::size_t rows = x.numel() / w;
  const std::size_t ow = end - begin;
  std::vector<T> out(rows * ow);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(&xv[r * w + begin], ow, &out[r * ow]);
  Shape shape = x.shape();
  shape.back() = ow;
  return make_op_result<T>("slice_last", std::move(shape), std::move(out), {x},
                           [rows, w, ow, begin](TapeNode<T>& self) {
                             auto& X = *self.inputs[0];
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < ow; ++j) {
                                 X.grad[r * w + begin + j] += self.grad[r * ow + j];
                               }
                             }
                           });
}

template <typename T>
Tensor<T> straight_through(std::vector<T> hard, const Tensor<T>& soft,
                           std::span<const T> grad_mask) {
  if (hard.size() != soft.numel() || (!grad_mask.empty() && grad_mask.size() != hard.size())) {
    throw DimensionError("straight_through: hard has " + std::to_string(hard.size()) +
                         " values, soft has shape " + shape_to_string(soft.shape()));
  }
  auto mask = std::make_shared<std::vector<T>>(grad_mask.begin(), grad_mask.end());
  return make_op_result<T>("straight_through", soft.shape(), std::move(hard), {soft},
                           [mask](TapeNode<T>& self) {
                             auto& S = *self.inputs[0];
                             for (std::size_t i = 0; i < self.grad.size(); ++i) {
                               S.grad[i] += mask->empty() ? self.grad[i]
                                                          : self.grad[i] * (*mask)[i];
                             }
                           });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout: rate must be below 1");
  std::bernoulli_distribution keep(1.0 - p);
  const T factor = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> m(x.numel());
  for (auto& v : m) v = keep(rng) ? factor : T(0);
  return mul(x, Tensor<T>::from(x.shape(), std::move(m)));
}

#define RETR_INSTANTIATE(T)                                                                   \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int64_t>, std::int64_t); \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                        \
  template Tensor<T> concat_last(const std::vector<Tensor<T>>&);                              \
  template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> straight_through(std::vector<T>, const Tensor<T>&, std::span<const T>);  \
  template Tensor<T> dropout(const Tensor<T>&, double, std::mt19937_64&);

RETR_INSTANTIATE(float)
RETR_INSTANTIATE(double)
#undef RETR_INSTANTIATE

}  // namespace retr
