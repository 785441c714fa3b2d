#pragma once

#include "deeptopo/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace deeptopo::kernels {

// Global switch for the OpenMP path. Kernels are bit-deterministic either
// way: parallelism is only over independent output elements, each reduced
// in a fixed serial order.
bool parallel_enabled();
void set_parallel(bool on);
int thread_count();

template <typename F>
void parallel_for(i64 n, F&& f) {
#ifdef _OPENMP
  if (parallel_enabled() && n > 1) {
#pragma omp parallel for schedule(static)
    for (i64 i = 0; i < n; ++i) f(i);
    return;
  }
#endif
  for (i64 i = 0; i < n; ++i) f(i);
}

// Row-major GEMM family. "accumulate" keeps existing C values.
// C[m x n] = A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate = false);
// C[m x n] = A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate = false);
// C[m x n] = A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate = false);

// Patch extraction for convolution: input C x H x W, kernel k, stride s,
// zero padding p. cols is (C*k*k) x (Ho*Wo), row index (c*k + ky)*k + kx.
template <typename T>
void im2col(const T* x, i64 c, i64 h, i64 w, i64 kk, i64 stride, i64 pad,
            T* cols, i64 ho, i64 wo);

// Transpose of im2col as a gather over input cells (parallel, race-free).
// Accumulates into dx.
template <typename T>
void col2im_acc(const T* cols, i64 c, i64 h, i64 w, i64 kk, i64 stride,
                i64 pad, T* dx, i64 ho, i64 wo);

// Row-wise softmax in place over an m x n matrix (max-subtracted).
template <typename T>
void softmax_rows(T* x, i64 m, i64 n);

// Bilinear gather at continuous (row, col) coordinates, zero padded
// outside. x is C x H x W, coords is m x 2, out is C x m.
template <typename T>
void bilinear_gather(const T* x, i64 c, i64 h, i64 w, const T* coords, i64 m,
                     T* out);

// Purposely unoptimized single-thread references used by tests and the
// benchmark target.
namespace ref {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate = false);
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate = false);
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate = false);
template <typename T>
void bilinear_gather(const T* x, i64 c, i64 h, i64 w, const T* coords, i64 m,
                     T* out);

}  // namespace ref

}  // namespace deeptopo::kernels
