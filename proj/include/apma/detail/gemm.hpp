#pragma once

#include <Eigen/Core>

#include <cstddef>

namespace apma::detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

enum class Trans { no, yes };

// C(MxN) = op(A) * op(B) + (accumulate ? C : 0), all buffers row-major.
// op(A) is MxK, op(B) is KxN.
template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MapMat<T> C(c, M, N);
  auto run = [&](const auto& A, const auto& B) {
    if (accumulate)
      C.noalias() += A * B;
    else
      C.noalias() = A * B;
  };
  if (ta == Trans::no && tb == Trans::no)
    run(MapConstMat<T>(a, M, K), MapConstMat<T>(b, K, N));
  else if (ta == Trans::yes && tb == Trans::no)
    run(MapConstMat<T>(a, K, M).transpose(), MapConstMat<T>(b, K, N));
  else if (ta == Trans::no && tb == Trans::yes)
    run(MapConstMat<T>(a, M, K), MapConstMat<T>(b, N, K).transpose());
  else
    run(MapConstMat<T>(a, K, M).transpose(), MapConstMat<T>(b, N, K).transpose());
}

}  // namespace apma::detail
