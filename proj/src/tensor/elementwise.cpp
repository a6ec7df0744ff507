#include <algorithm>
#include <cmath>

#include "retr/ops.hpp"

namespace retr {
namespace {

// Offsets of each output element into a and b under broadcasting. Empty
// offset vectors mean the operand has the output shape.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_offset;
  std::vector<std::size_t> b_offset;
};

std::vector<std::size_t> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t nd = out.size();
  std::vector<std::size_t> stride(nd, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    std::size_t axis = in.size() - 1 - k;
    std::size_t oaxis = nd - 1 - k;
    stride[oaxis] = in[axis] == 1 ? 0 : s;
    s *= in[axis];
  }
  std::vector<std::size_t> offsets(shape_numel(out));
  std::vector<std::size_t> idx(nd, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    offsets[i] = off;
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < out[d]) break;
      off -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return offsets;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    return plan;
  }
  const std::size_t nd = std::max(a.size(), b.size());
  plan.out.assign(nd, 1);
  for (std::size_t k = 0; k < nd; ++k) {
    std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_to_string(a) +
                           " with " + shape_to_string(b));
    }
    plan.out[nd - 1 - k] = std::max(da, db);
  }
  if (a != plan.out) plan.a_offset = broadcast_offsets(a, plan.out);
  if (b != plan.out) plan.b_offset = broadcast_offsets(b, plan.out);
  return plan;
}

// f(x, y) -> value; da(x, y, z) and db(x, y, z) -> partial derivatives.
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, F f, DA da,
                    DB db) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape(), name));
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t n = shape_numel(plan->out);
  std::vector<T> out(n);
  const bool fa = plan->a_offset.empty();
  const bool fb = plan->b_offset.empty();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(av[fa ? i : plan->a_offset[i]], bv[fb ? i : plan->b_offset[i]]);
  }
  Shape shape = plan->out;
  return make_op_result<T>(
      name, std::move(shape), std::move(out), {a, b},
      [plan, da, db, fa, fb](TapeNode<T>& self) {
        auto& A = *self.inputs[0];
        auto& B = *self.inputs[1];
        const std::size_t n = self.value.size();
        if (A.requires_grad) {
          for (std::size_t i = 0; i < n; ++i) {
            std::size_t ia = fa ? i : plan->a_offset[i];
            std::size_t ib = fb ? i : plan->b_offset[i];
            A.grad[ia] += self.grad[i] * da(A.value[ia], B.value[ib], self.value[i]);
          }
        }
        if (B.requires_grad) {
          for (std::size_t i = 0; i < n; ++i) {
            std::size_t ia = fa ? i : plan->a_offset[i];
            std::size_t ib = fb ? i : plan->b_offset[i];
            B.grad[ib] += self.grad[i] * db(A.value[ia], B.value[ib], self.value[i]);
          }
        }
      });
}

// f(x) -> value; df(x, y) -> derivative.
template <typename T, typename F, typename DF>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, F f, DF df) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_op_result<T>(name, x.shape(), std::move(out), {x}, [df](TapeNode<T>& self) {
    auto& X = *self.inputs[0];
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      X.grad[i] += self.grad[i] * df(X.value[i], self.value[i]);
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T z) { return -z / y; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary_op<T>(
      "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return unary_op<T>(
      "add_scalar", x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary_op<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_sigmoid(const Tensor<T>& x) {
  // log σ(v) = min(v, 0) - log1p(exp(-|v|)); d/dv = σ(-v).
  return unary_op<T>(
      "log_sigmoid", x,
      [](T v) { return std::min(v, T(0)) - std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) {
        if (v >= T(0)) {
          T e = std::exp(-v);
          return e / (T(1) + e);
        }
        return T(1) / (T(1) + std::exp(v));
      });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return unary_op<T>(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

#define RETR_INSTANTIATE(T)                                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> scale(const Tensor<T>&, T);                            \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                       \
  template Tensor<T> relu(const Tensor<T>&);                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                             \
  template Tensor<T> log(const Tensor<T>&);                                 \
  template Tensor<T> exp(const Tensor<T>&);                                 \
  template Tensor<T> log_sigmoid(const Tensor<T>&);                         \
  template Tensor<T> clamp(const Tensor<T>&, T, T);

RETR_INSTANTIATE(float)
RETR_INSTANTIATE(double)
#undef RETR_INSTANTIATE

}  // namespace retr
