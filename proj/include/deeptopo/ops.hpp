#pragma once

#include <array>
#include <vector>

#include "deeptopo/tensor.hpp"

namespace deeptopo {

// ---- elementwise ----
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div_ew(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> softplus(const Var<T>& a);
template <typename T> Var<T> sqrt_op(const Var<T>& a);

// ---- reductions ----
template <typename T> Var<T> sum_all(const Var<T>& a);
template <typename T> Var<T> mean_all(const Var<T>& a);
// Scalar dot with fixed weights; the workhorse reduction of the grad checks.
template <typename T>
Var<T> weighted_sum(const Var<T>& a, const std::vector<T>& w);

// ---- shape ----
template <typename T> Var<T> reshape(const Var<T>& a, std::vector<i64> shape);
template <typename T> Var<T> concat0(const std::vector<Var<T>>& parts);
template <typename T> Var<T> slice_cols(const Var<T>& a, i64 c0, i64 c1);
template <typename T>
Var<T> gather_rows(const Var<T>& a, const std::vector<i64>& idx);
// out[idx[m]] = rows[m], remaining rows = fill (broadcast, learnable).
template <typename T>
Var<T> scatter_rows_fill(const Var<T>& rows, const std::vector<i64>& idx,
                         const Var<T>& fill, i64 n);
template <typename T> Var<T> transpose2d(const Var<T>& a);
template <typename T> Var<T> transpose_12(const Var<T>& a);  // AxBxC -> AxCxB
template <typename T> Var<T> tokens_to_grid(const Var<T>& a, i64 grid);
template <typename T> Var<T> grid_to_tokens(const Var<T>& a);
// x: C x M (+ bias per row/channel)
template <typename T> Var<T> add_bias_rows(const Var<T>& x, const Var<T>& b);
// map: C x H x W scaled per channel by gate: C
template <typename T>
Var<T> channel_scale(const Var<T>& map, const Var<T>& gate);

// ---- linear algebra ----
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
// x: N x Din, w: Dout x Din, b: Dout (empty Var allowed for no bias)
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

// ---- normalization / attention ----
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps = T(1e-5));
// Per-channel stats over H*W in train mode; running stats in eval mode.
// Running buffers are plain value tensors mutated only when update_running.
template <typename T>
Var<T> batch_norm_2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                     const Var<T>& running_mean, const Var<T>& running_var,
                     bool train, bool update_running, T momentum = T(0.1),
                     T eps = T(1e-5));
template <typename T>
Var<T> multi_head_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                            i64 heads);

// ---- convolution / sampling ----
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, i64 stride,
              i64 pad);
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, i64 pad);
// Fixed (non-learnable) 3x3 high-pass [[0,1,0],[1,-4,1],[0,1,0]], zero pad.
template <typename T> Var<T> laplacian3x3(const Var<T>& x);
// x: C x H x W, coords: M x 2 in (row, col) pixel-center space, zero padded.
template <typename T>
Var<T> bilinear_sample(const Var<T>& x, const Var<T>& coords);
// Center-aligned x2: out(2i) copies in(i); odd samples average neighbours
// with edge clamp. Sampling the result at even lattice points reproduces
// the input bit-exactly.
template <typename T> Var<T> bilinear_upsample_x2(const Var<T>& x);
template <typename T> Var<T> global_avg_pool(const Var<T>& x);  // CxHxW -> C
template <typename T> Var<T> mean_axis0(const Var<T>& x);       // NxD  -> D
// coords(m) = lattice(m) + offsets[j]; lattice is the HxW pixel grid.
template <typename T>
Var<T> shift_lattice(const Var<T>& offsets, i64 j, i64 h, i64 w);

// ---- metric ----
// raw: 3 values -> lower-triangular L = [[softplus(r0)+delta, 0],
//                                        [r1, softplus(r2)+delta]]
template <typename T>
Var<T> assemble_cholesky(const Var<T>& raw, T delta);
// Offsets of the centered k x k grid mapped through (L^T)^-1, k odd.
// Result is k*k x 2 rows in (row, col) order, row-major over the grid.
template <typename T>
Var<T> warp_offsets_op(const Var<T>& L, i64 k);
// sqrt(dp^T G dp), differentiable in G.
template <typename T>
Var<T> quad_form_sqrt(const Var<T>& G, T dr, T dc);

// ---- directional (masked depthwise bank + butterfly fusion) ----
struct DirTaps {
  // (drow, dcol) per tap, tap 0 is the center.
  std::vector<std::array<i64, 2>> taps;
};
// x: C x H x W, bank: 8 x C x L x L (off-support cells never read/written),
// out: 8C x H x W, direction-major.
template <typename T>
Var<T> directional_responses(const Var<T>& x, const Var<T>& bank,
                             const std::vector<DirTaps>& taps);
// 1x1 fusion of the 8 direction groups back to C channels. The per-pixel
// sum over directions uses a butterfly order that is invariant under
// cyclic direction shifts, which makes the 90-degree rotation property of
// the block hold bit-exactly.
template <typename T>
Var<T> directional_fusion(const Var<T>& resp, const Var<T>& w,
                          const Var<T>& b);

// ---- patch serialization ----
template <typename T> Var<T> patchify_op(const Var<T>& img, i64 patch);
template <typename T>
Var<T> unpatchify_op(const Var<T>& tokens, i64 patch, i64 h, i64 w);

// ---- loss support ----
// Numerically stable elementwise binary cross entropy from logits;
// targets are constants.
template <typename T>
Var<T> bce_logits_map(const Var<T>& logits, const Var<T>& targets);

}  // namespace deeptopo
