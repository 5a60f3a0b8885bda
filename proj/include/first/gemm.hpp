#pragma once

#include <cstddef>
#include <vector>

namespace first::kernels {

// C[M,N] (+)= op(A) * op(B), row-major.
//   op(A) is A[M,K] or, with trans_a, A[K,M] read transposed.
//   op(B) is B[K,N] or, with trans_b, B[N,K] read transposed.
// The j-loop is innermost and contiguous in both B and C so it vectorizes.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K, const T* A,
          const T* B, T* C, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < M * N; ++i) C[i] = T(0);
  }
  std::vector<T> bt;
  if (trans_b) {
    bt.resize(K * N);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) bt[k * N + n] = B[n * K + k];
    B = bt.data();
  }
  if (!trans_a) {
    for (std::size_t i = 0; i < M; ++i) {
      T* __restrict c = C + i * N;
      const T* a = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const T av = a[k];
        const T* __restrict b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else {
    for (std::size_t k = 0; k < K; ++k) {
      const T* __restrict b = B + k * N;
      const T* a = A + k * M;
      for (std::size_t i = 0; i < M; ++i) {
        const T av = a[i];
        T* __restrict c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  }
}

}  // namespace first::kernels
