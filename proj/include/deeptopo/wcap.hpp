#pragma once

#include "deeptopo/nn.hpp"

namespace deeptopo {

// Per-image metric state: the 6-dim global descriptor g drives a small MLP
// that emits three Cholesky parameters; L is the floored lower-triangular
// factor and G = L L^T + epsilon I is the SPD sampling metric.
template <typename T>
struct MetricState {
  Var<T> g;            // 6
  Var<T> chol_params;  // 3 raw values (pre-softplus)
  Var<T> L;            // 2 x 2 lower triangular
  Var<T> G;            // 2 x 2 SPD
  T epsilon;
};

// The nominal k x k integer offsets and their images under (L^T)^-1.
template <typename T>
struct SampleField {
  i64 k = 0;
  std::vector<std::array<i64, 2>> base_offsets;  // (drow, dcol), row-major
  Var<T> warped_offsets;                         // k*k x 2
};

// Plain metric length sqrt(dp^T G dp) for a 2x2 metric in row-major order.
double metric_distance(const double dp[2], const double g[4]);

// Water-Conditioned Adaptive Perceptor. One instance owns the warped 3x3
// convolution, the descriptor projection, the metric MLP and the frequency
// gate for a fixed channel width.
template <typename T>
struct WcapModule {
  i64 channels = 0;
  i64 latent_dim = 0;
  i64 kernel = 3;
  T epsilon = T(1e-4);
  T chol_delta = T(1e-3);

  Var<T> conv_w, conv_b;        // C x C x k x k warped conv
  Var<T> desc_w, desc_b;        // 6 x D descriptor projection
  Var<T> met1_w, met1_b;        // 16 x 6
  Var<T> met2_w, met2_b;        // 3 x 16
  Var<T> gate_pool_w, gate_pool_b;  // 32 x C
  Var<T> gate1_w, gate1_b;      // 32 x 38
  Var<T> gate2_w, gate2_b;      // C x 32

  // GAP over tokens followed by the learned D->6 projection.
  Var<T> project_descriptor(const Var<T>& latent) const;
  MetricState<T> build_metric(const Var<T>& g) const;
  SampleField<T> warp_offsets(const Var<T>& L) const;
  // out(p) = sum_ij weight_ij * bilinear(f_in, p + warped_offset_ij).
  Var<T> warped_conv(const Var<T>& f_in, const Var<T>& weight,
                     const SampleField<T>& field, const Var<T>& bias) const;
  Var<T> freq_gate(const Var<T>& f_hp, const Var<T>& g) const;
  // f_warped + gate (x)_channel laplacian(f_warped)
  Var<T> forward(const Var<T>& f_in, const Var<T>& g) const;
};

template <typename T>
WcapModule<T> make_wcap(ParamStore<T>& store, const std::string& prefix,
                        i64 channels, i64 latent_dim, i64 kernel = 3);

}  // namespace deeptopo
