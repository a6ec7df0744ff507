// Matrix products. The kernels are Eigen maps over the row-major buffers;
// Eigen runs single-threaded here, so results are deterministic per build.
#include <Eigen/Core>

#include "retr/ops.hpp"

namespace retr {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMap<T> cmap(const T* p, std::size_t r, std::size_t c) {
  return ConstMap<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
Map<T> mmap(T* p, std::size_t r, std::size_t c) {
  return Map<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                       shape_to_string(b));
}

// Batch layout of a product: `batch` independent [m,k] blocks of a; b is
// shared across the batch when shared_b is set.
struct ProductPlan {
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_b = true;
  Shape out;
};

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  ProductPlan p;
  if (as.size() == 2 && bs.size() == 2) {
    if (as[1] != bs[0]) mismatch("matmul", as, bs);
    p = {1, as[0], as[1], bs[1], true, {as[0], bs[1]}};
  } else if (as.size() == 3 && bs.size() == 2) {
    if (as[2] != bs[0]) mismatch("matmul", as, bs);
    // Shared right operand: fold the batch into the rows.
    p = {1, as[0] * as[1], as[2], bs[1], true, {as[0], as[1], bs[1]}};
  } else if (as.size() == 3 && bs.size() == 3) {
    if (as[0] != bs[0] || as[2] != bs[1]) mismatch("matmul", as, bs);
    p = {as[0], as[1], as[2], bs[2], false, {as[0], as[1], bs[2]}};
  } else {
    mismatch("matmul", as, bs);
  }
  std::vector<T> out(p.batch * p.m * p.n);
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < p.batch; ++i) {
    const T* bp = p.shared_b ? bv : bv + i * p.k * p.n;
    mmap(out.data() + i * p.m * p.n, p.m, p.n).noalias() =
        cmap(av + i * p.m * p.k, p.m, p.k) * cmap(bp, p.k, p.n);
  }
  Shape shape = p.out;
  return make_op_result<T>("matmul", std::move(shape), std::move(out), {a, b},
                           [p](TapeNode<T>& self) {
                             auto& A = *self.inputs[0];
                             auto& B = *self.inputs[1];
                             for (std::size_t i = 0; i < p.batch; ++i) {
                               const std::size_t bo = p.shared_b ? 0 : i * p.k * p.n;
                               auto dc = cmap(self.grad.data() + i * p.m * p.n, p.m, p.n);
                               if (A.requires_grad) {
                                 mmap(A.grad.data() + i * p.m * p.k, p.m, p.k).noalias() +=
                                     dc * cmap(B.value.data() + bo, p.k, p.n).transpose();
                               }
                               if (B.requires_grad) {
                                 mmap(B.grad.data() + bo, p.k, p.n).noalias() +=
                                     cmap(A.value.data() + i * p.m * p.k, p.m, p.k).transpose() * dc;
                               }
                             }
                           });
}

template <typename T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  ProductPlan p;
  if (as.size() == 2 && bs.size() == 2) {
    if (as[1] != bs[1]) mismatch("matmul_bt", as, bs);
    p = {1, as[0], as[1], bs[0], true, {as[0], bs[0]}};
  } else if (as.size() == 3 && bs.size() == 3) {
    if (as[0] != bs[0] || as[2] != bs[2]) mismatch("matmul_bt", as, bs);
    p = {as[0], as[1], as[2], bs[1], false, {as[0], as[1], bs[1]}};
  } else {
    mismatch("matmul_bt", as, bs);
  }
  std::vector<T> out(p.batch * p.m * p.n);
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < p.batch; ++i) {
    mmap(out.data() + i * p.m * p.n, p.m, p.n).noalias() =
        cmap(av + i * p.m * p.k, p.m, p.k) * cmap(bv + i * p.n * p.k, p.n, p.k).transpose();
  }
  Shape shape = p.out;
  return make_op_result<T>("matmul_bt", std::move(shape), std::move(out), {a, b},
                           [p](TapeNode<T>& self) {
                             auto& A = *self.inputs[0];
                             auto& B = *self.inputs[1];
                             for (std::size_t i = 0; i < p.batch; ++i) {
                               auto dc = cmap(self.grad.data() + i * p.m * p.n, p.m, p.n);
                               if (A.requires_grad) {
                                 mmap(A.grad.data() + i * p.m * p.k, p.m, p.k).noalias() +=
                                     dc * cmap(B.value.data() + i * p.n * p.k, p.n, p.k);
                               }
                               if (B.requires_grad) {
                                 mmap(B.grad.data() + i * p.n * p.k, p.n, p.k).noalias() +=
                                     dc.transpose() * cmap(A.value.data() + i * p.m * p.k, p.m, p.k);
                               }
                             }
                           });
}

template Tensor<float> matmul(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> matmul(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> matmul_bt(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> matmul_bt(const Tensor<double>&, const Tensor<double>&);

}  // namespace retr
