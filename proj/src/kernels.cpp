#include "deeptopo/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

namespace deeptopo::kernels {

namespace {
std::atomic<bool> g_parallel{true};
}

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

int thread_count() {
#ifdef _OPENMP
  return parallel_enabled() ? omp_get_max_threads() : 1;
#else
  return 1;
#endif
}

// The i-k-j order keeps the j loop contiguous so it vectorizes, and gives a
// fixed per-row reduction order regardless of thread count.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate) {
  parallel_for(m, [&](i64 i) {
    T* crow = c + i * n;
    if (!accumulate) {
      for (i64 j = 0; j < n; ++j) crow[j] = T(0);
    }
    const T* arow = a + i * k;
    for (i64 p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  });
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate) {
  parallel_for(m, [&](i64 i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (i64 j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (i64 p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  });
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate) {
  parallel_for(m, [&](i64 i) {
    T* crow = c + i * n;
    if (!accumulate) {
      for (i64 j = 0; j < n; ++j) crow[j] = T(0);
    }
    for (i64 p = 0; p < k; ++p) {
      const T av = a[p * m + i];
      const T* brow = b + p * n;
      for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  });
}

template <typename T>
void im2col(const T* x, i64 c, i64 h, i64 w, i64 kk, i64 stride, i64 pad,
            T* cols, i64 ho, i64 wo) {
  const i64 plane = ho * wo;
  parallel_for(c * kk * kk, [&](i64 row) {
    const i64 ch = row / (kk * kk);
    const i64 ky = (row / kk) % kk;
    const i64 kx = row % kk;
    const T* xp = x + ch * h * w;
    T* out = cols + row * plane;
    for (i64 oy = 0; oy < ho; ++oy) {
      const i64 iy = oy * stride - pad + ky;
      if (iy < 0 || iy >= h) {
        for (i64 ox = 0; ox < wo; ++ox) out[oy * wo + ox] = T(0);
        continue;
      }
      for (i64 ox = 0; ox < wo; ++ox) {
        const i64 ix = ox * stride - pad + kx;
        out[oy * wo + ox] = (ix >= 0 && ix < w) ? xp[iy * w + ix] : T(0);
      }
    }
  });
}

template <typename T>
void col2im_acc(const T* cols, i64 c, i64 h, i64 w, i64 kk, i64 stride,
                i64 pad, T* dx, i64 ho, i64 wo) {
  const i64 plane = ho * wo;
  parallel_for(c * h * w, [&](i64 idx) {
    const i64 ch = idx / (h * w);
    const i64 iy = (idx / w) % h;
    const i64 ix = idx % w;
    T acc = T(0);
    for (i64 ky = 0; ky < kk; ++ky) {
      const i64 t = iy + pad - ky;
      if (t < 0 || t % stride != 0) continue;
      const i64 oy = t / stride;
      if (oy >= ho) continue;
      for (i64 kx = 0; kx < kk; ++kx) {
        const i64 u = ix + pad - kx;
        if (u < 0 || u % stride != 0) continue;
        const i64 ox = u / stride;
        if (ox >= wo) continue;
        const i64 row = (ch * kk + ky) * kk + kx;
        acc += cols[row * plane + oy * wo + ox];
      }
    }
    dx[idx] += acc;
  });
}

template <typename T>
void softmax_rows(T* x, i64 m, i64 n) {
  parallel_for(m, [&](i64 i) {
    T* row = x + i * n;
    T mx = row[0];
    for (i64 j = 1; j < n; ++j) mx = row[j] > mx ? row[j] : mx;
    T sum = T(0);
    for (i64 j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const T inv = T(1) / sum;
    for (i64 j = 0; j < n; ++j) row[j] *= inv;
  });
}

template <typename T>
void bilinear_gather(const T* x, i64 c, i64 h, i64 w, const T* coords, i64 m,
                     T* out) {
  parallel_for(m, [&](i64 i) {
    const T r = coords[2 * i];
    const T cc = coords[2 * i + 1];
    const i64 r0 = static_cast<i64>(std::floor(r));
    const i64 c0 = static_cast<i64>(std::floor(cc));
    const T fr = r - static_cast<T>(r0);
    const T fc = cc - static_cast<T>(c0);
    const T w00 = (T(1) - fr) * (T(1) - fc);
    const T w01 = (T(1) - fr) * fc;
    const T w10 = fr * (T(1) - fc);
    const T w11 = fr * fc;
    const bool in00 = r0 >= 0 && r0 < h && c0 >= 0 && c0 < w;
    const bool in01 = r0 >= 0 && r0 < h && c0 + 1 >= 0 && c0 + 1 < w;
    const bool in10 = r0 + 1 >= 0 && r0 + 1 < h && c0 >= 0 && c0 < w;
    const bool in11 = r0 + 1 >= 0 && r0 + 1 < h && c0 + 1 >= 0 && c0 + 1 < w;
    for (i64 ch = 0; ch < c; ++ch) {
      const T* xp = x + ch * h * w;
      T v = T(0);
      if (in00) v += w00 * xp[r0 * w + c0];
      if (in01) v += w01 * xp[r0 * w + c0 + 1];
      if (in10) v += w10 * xp[(r0 + 1) * w + c0];
      if (in11) v += w11 * xp[(r0 + 1) * w + c0 + 1];
      out[ch * m + i] = v;
    }
  });
}

namespace ref {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    for (i64 j = 0; j < n; ++j) {
      T acc = T(0);
      for (i64 p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    for (i64 j = 0; j < n; ++j) {
      T acc = T(0);
      for (i64 p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n,
             bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    for (i64 j = 0; j < n; ++j) {
      T acc = T(0);
      for (i64 p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

template <typename T>
void bilinear_gather(const T* x, i64 c, i64 h, i64 w, const T* coords, i64 m,
                     T* out) {
  const bool was = parallel_enabled();
  set_parallel(false);
  deeptopo::kernels::bilinear_gather(x, c, h, w, coords, m, out);
  set_parallel(was);
}

template void gemm_nn<float>(const float*, const float*, float*, i64, i64,
                             i64, bool);
template void gemm_nn<double>(const double*, const double*, double*, i64, i64,
                              i64, bool);
template void gemm_nt<float>(const float*, const float*, float*, i64, i64,
                             i64, bool);
template void gemm_nt<double>(const double*, const double*, double*, i64, i64,
                              i64, bool);
template void gemm_tn<float>(const float*, const float*, float*, i64, i64,
                             i64, bool);
template void gemm_tn<double>(const double*, const double*, double*, i64, i64,
                              i64, bool);
template void bilinear_gather<float>(const float*, i64, i64, i64, const float*,
                                     i64, float*);
template void bilinear_gather<double>(const double*, i64, i64, i64,
                                      const double*, i64, double*);

}  // namespace ref

template void gemm_nn<float>(const float*, const float*, float*, i64, i64,
                             i64, bool);
template void gemm_nn<double>(const double*, const double*, double*, i64, i64,
                              i64, bool);
template void gemm_nt<float>(const float*, const float*, float*, i64, i64,
                             i64, bool);
template void gemm_nt<double>(const double*, const double*, double*, i64, i64,
                              i64, bool);
template void gemm_tn<float>(const float*, const float*, float*, i64, i64,
                             i64, bool);
template void gemm_tn<double>(const double*, const double*, double*, i64, i64,
                              i64, bool);
template void im2col<float>(const float*, i64, i64, i64, i64, i64, i64,
                            float*, i64, i64);
template void im2col<double>(const double*, i64, i64, i64, i64, i64, i64,
                             double*, i64, i64);
template void col2im_acc<float>(const float*, i64, i64, i64, i64, i64, i64,
                                float*, i64, i64);
template void col2im_acc<double>(const double*, i64, i64, i64, i64, i64, i64,
                                 double*, i64, i64);
template void softmax_rows<float>(float*, i64, i64);
template void softmax_rows<double>(double*, i64, i64);
template void bilinear_gather<float>(const float*, i64, i64, i64, const float*,
                                     i64, float*);
template void bilinear_gather<double>(const double*, i64, i64, i64,
                                      const double*, i64, double*);

}  // namespace deeptopo::kernels
