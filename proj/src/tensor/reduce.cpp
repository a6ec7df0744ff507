#include <atomic>
#include <cmath>
#include <limits>

#include "retr/ops.hpp"

namespace retr {
namespace {

std::atomic<std::uint64_t> g_all_masked{0};

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

}  // namespace

std::uint64_t softmax_all_masked_count() { return g_all_masked.load(); }
void reset_softmax_all_masked_count() { g_all_masked.store(0); }

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return make_op_result<T>("sum", {}, {total}, {x}, [](TapeNode<T>& self) {
    auto& X = *self.inputs[0];
    for (auto& g : X.grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis, bool keepdim) {
  const auto s = split_axis(x.shape(), axis, "sum");
  const auto xv = x.data();
  std::vector<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      const T* row = &xv[(o * s.len + l) * s.inner];
      T* dst = &out[o * s.inner];
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
    }
  }
  return make_op_result<T>("sum_axis", reduced_shape(x.shape(), axis, keepdim), std::move(out),
                           {x}, [s](TapeNode<T>& self) {
                             auto& X = *self.inputs[0];
                             for (std::size_t o = 0; o < s.outer; ++o) {
                               for (std::size_t l = 0; l < s.len; ++l) {
                                 T* dst = &X.grad[(o * s.len + l) * s.inner];
                                 const T* g = &self.grad[o * s.inner];
                                 for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[i];
                               }
                             }
                           });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim) {
  const auto len = split_axis(x.shape(), axis, "mean").len;
  if (len == 0) throw ContractError("mean over empty axis");
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(len));
}

template <typename T>
Tensor<T> cumsum(const Tensor<T>& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "cumsum");
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      T acc = T(0);
      for (std::size_t l = 0; l < s.len; ++l) {
        std::size_t k = (o * s.len + l) * s.inner + i;
        acc += xv[k];
        out[k] = acc;
      }
    }
  }
  return make_op_result<T>("cumsum", x.shape(), std::move(out), {x}, [s](TapeNode<T>& self) {
    auto& X = *self.inputs[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        T acc = T(0);
        for (std::size_t l = s.len; l-- > 0;) {
          std::size_t k = (o * s.len + l) * s.inner + i;
          acc += self.grad[k];
          X.grad[k] += acc;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "softmax");
  const auto xv = x.data();
  const T threshold = static_cast<T>(kMaskThreshold);
  std::vector<T> out(xv.size(), T(0));
  std::uint64_t all_masked = 0;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) {
        T v = xv[base + l * s.inner];
        if (v > threshold && v > mx) mx = v;
      }
      if (!(mx > threshold)) {
        ++all_masked;
        continue;
      }
      T denom = T(0);
      for (std::size_t l = 0; l < s.len; ++l) {
        std::size_t k = base + l * s.inner;
        T e = xv[k] > threshold ? std::exp(xv[k] - mx) : T(0);
        out[k] = e;
        denom += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= denom;
    }
  }
  if (all_masked) g_all_masked.fetch_add(all_masked);
  return make_op_result<T>("softmax", x.shape(), std::move(out), {x}, [s](TapeNode<T>& self) {
    auto& X = *self.inputs[0];
    const auto& y = self.value;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T dot = T(0);
        for (std::size_t l = 0; l < s.len; ++l) {
          std::size_t k = base + l * s.inner;
          dot += y[k] * self.grad[k];
        }
        for (std::size_t l = 0; l < s.len; ++l) {
          std::size_t k = base + l * s.inner;
          X.grad[k] += y[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.ndim() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: input " + shape_to_string(x.shape()) + " with gamma " +
                         shape_to_string(gamma.shape()) + " and beta " +
                         shape_to_string(beta.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  // Saved for the backward pass: normalized input and 1/sigma per row.
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = &xv[r * d];
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      T h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_op_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [d, rows, xhat, inv_std](TapeNode<T>& self) {
        auto& X = *self.inputs[0];
        auto& G = *self.inputs[1];
        auto& B = *self.inputs[2];
        std::vector<T> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = &self.grad[r * d];
          const T* h = &(*xhat)[r * d];
          if (G.requires_grad) {
            for (std::size_t j = 0; j < d; ++j) G.grad[j] += g[j] * h[j];
          }
          if (B.requires_grad) {
            for (std::size_t j = 0; j < d; ++j) B.grad[j] += g[j];
          }
          if (!X.requires_grad) continue;
          T mean_dh = T(0);
          T mean_dh_h = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = g[j] * G.value[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
          }
          mean_dh /= static_cast<T>(d);
          mean_dh_h /= static_cast<T>(d);
          const T is = (*inv_std)[r];
          for (std::size_t j = 0; j < d; ++j) {
            X.grad[r * d + j] += is * (dh[j] - mean_dh - h[j] * mean_dh_h);
          }
        }
      });
}

#define RETR_INSTANTIATE(T)                                                          \
  template Tensor<T> sum(const Tensor<T>&);                                          \
  template Tensor<T> sum(const Tensor<T>&, std::size_t, bool);                       \
  template Tensor<T> mean(const Tensor<T>&);                                         \
  template Tensor<T> mean(const Tensor<T>&, std::size_t, bool);                      \
  template Tensor<T> cumsum(const Tensor<T>&, std::size_t);                          \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);

RETR_INSTANTIATE(float)
RETR_INSTANTIATE(double)
#undef RETR_INSTANTIATE

}  // namespace retr
