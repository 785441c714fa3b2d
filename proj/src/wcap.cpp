#include "deeptopo/wcap.hpp"

#include <cmath>

namespace deeptopo {

double metric_distance(const double dp[2], const double g[4]) {
  const double q = g[0] * dp[0] * dp[0] + (g[1] + g[2]) * dp[0] * dp[1] +
                   g[3] * dp[1] * dp[1];
  return q > 0.0 ? std::sqrt(q) : 0.0;
}

template <typename T>
Var<T> WcapModule<T>::project_descriptor(const Var<T>& latent) const {
  DT_CHECK(latent->shape.size() == 2, "project_descriptor: expected N x D");
  DT_CHECK(latent->shape[0] > 0, "project_descriptor: empty token set");
  DT_CHECK(latent->shape[1] == latent_dim, "project_descriptor: token dim ",
           latent->shape[1], " != ", latent_dim);
  auto pooled = reshape(mean_axis0(latent), {1, latent_dim});
  return reshape(linear(pooled, desc_w, desc_b), {i64(6)});
}

template <typename T>
MetricState<T> WcapModule<T>::build_metric(const Var<T>& g) const {
  DT_CHECK(g->numel() == 6, "build_metric: descriptor must have 6 entries");
  auto h = relu(linear(reshape(g, {i64(1), i64(6)}), met1_w, met1_b));
  auto raw = reshape(linear(h, met2_w, met2_b), {i64(3)});
  MetricState<T> st;
  st.g = g;
  st.chol_params = raw;
  st.L = assemble_cholesky(raw, chol_delta);
  std::vector<T> eye = {epsilon, T(0), T(0), epsilon};
  st.G = add(matmul(st.L, transpose2d(st.L)), tensor<T>({2, 2}, eye));
  st.epsilon = epsilon;
  return st;
}

template <typename T>
SampleField<T> WcapModule<T>::warp_offsets(const Var<T>& L) const {
  SampleField<T> f;
  f.k = kernel;
  const i64 half = kernel / 2;
  for (i64 dy = -half; dy <= half; ++dy) {
    for (i64 dx = -half; dx <= half; ++dx) {
      f.base_offsets.push_back({dy, dx});
    }
  }
  f.warped_offsets = warp_offsets_op(L, kernel);
  return f;
}

template <typename T>
Var<T> WcapModule<T>::warped_conv(const Var<T>& f_in, const Var<T>& weight,
                                  const SampleField<T>& field,
                                  const Var<T>& bias) const {
  DT_CHECK(f_in->shape.size() == 3, "warped_conv: input must be C x H x W");
  DT_CHECK(weight->shape.size() == 4, "warped_conv: weight must be 4-d");
  const i64 c = f_in->shape[0], h = f_in->shape[1], w = f_in->shape[2];
  const i64 cout = weight->shape[0];
  const i64 kk = weight->shape[2];
  DT_CHECK(weight->shape[1] == c, "warped_conv: weight channels ",
           weight->shape[1], " do not match input ", c);
  DT_CHECK(weight->shape[3] == kk, "warped_conv: kernel must be square");
  DT_CHECK(field.warped_offsets->shape[0] == kk * kk,
           "warped_conv: field has ", field.warped_offsets->shape[0],
           " offsets, kernel needs ", kk * kk);
  // One bilinear gather per offset; the sampled planes, stacked offset-major,
  // form the column matrix of a plain GEMM against the permuted weight.
  std::vector<Var<T>> sampled;
  sampled.reserve(static_cast<std::size_t>(kk * kk));
  for (i64 j = 0; j < kk * kk; ++j) {
    auto coords = shift_lattice(field.warped_offsets, j, h, w);
    sampled.push_back(bilinear_sample(f_in, coords));
  }
  auto cols = concat0(sampled);  // (k*k*C) x (H*W), offset-major
  auto wperm = reshape(transpose_12(reshape(weight, {cout, c, kk * kk})),
                       {cout, kk * kk * c});
  auto out = matmul(wperm, cols);
  if (bias) out = add_bias_rows(out, bias);
  return reshape(out, {cout, h, w});
}

template <typename T>
Var<T> WcapModule<T>::freq_gate(const Var<T>& f_hp, const Var<T>& g) const {
  DT_CHECK(f_hp->shape.size() == 3 && f_hp->shape[0] == channels,
           "freq_gate: feature map must have ", channels, " channels");
  auto pooled = reshape(global_avg_pool(f_hp), {i64(1), channels});
  auto proj = reshape(linear(pooled, gate_pool_w, gate_pool_b), {i64(32)});
  auto cat = reshape(concat0<T>({proj, g}), {i64(1), i64(38)});
  auto hidden = relu(linear(cat, gate1_w, gate1_b));
  auto gate = sigmoid(reshape(linear(hidden, gate2_w, gate2_b), {channels}));
  return gate;
}

template <typename T>
Var<T> WcapModule<T>::forward(const Var<T>& f_in, const Var<T>& g) const {
  auto metric = build_metric(g);
  auto field = warp_offsets(metric.L);
  auto f_warped = warped_conv(f_in, conv_w, field, conv_b);
  auto f_hp = laplacian3x3(f_warped);
  auto gate = freq_gate(f_hp, g);
  return add(f_warped, channel_scale(f_hp, gate));
}

template <typename T>
WcapModule<T> make_wcap(ParamStore<T>& store, const std::string& prefix,
                        i64 channels, i64 latent_dim, i64 kernel) {
  DT_CHECK(kernel % 2 == 1, "wcap: kernel size ", kernel, " must be odd");
  using Init = typename ParamStore<T>::Init;
  WcapModule<T> m;
  m.channels = channels;
  m.latent_dim = latent_dim;
  m.kernel = kernel;
  m.conv_w = store.param(prefix + ".conv.w", {channels, channels, kernel, kernel},
                         Init::kTruncNormal);
  m.conv_b = store.param(prefix + ".conv.b", {channels}, Init::kZeros);
  m.desc_w = store.param(prefix + ".desc.w", {6, latent_dim}, Init::kTruncNormal);
  m.desc_b = store.param(prefix + ".desc.b", {6}, Init::kZeros);
  m.met1_w = store.param(prefix + ".metric.fc1.w", {16, 6}, Init::kTruncNormal);
  m.met1_b = store.param(prefix + ".metric.fc1.b", {16}, Init::kZeros);
  m.met2_w = store.param(prefix + ".metric.fc2.w", {3, 16}, Init::kTruncNormal);
  m.met2_b = store.param(prefix + ".metric.fc2.b", {3}, Init::kZeros);
  m.gate_pool_w = store.param(prefix + ".gate.pool.w", {32, channels},
                              Init::kTruncNormal);
  m.gate_pool_b = store.param(prefix + ".gate.pool.b", {32}, Init::kZeros);
  m.gate1_w = store.param(prefix + ".gate.fc1.w", {32, 38}, Init::kTruncNormal);
  m.gate1_b = store.param(prefix + ".gate.fc1.b", {32}, Init::kZeros);
  m.gate2_w = store.param(prefix + ".gate.fc2.w", {channels, 32},
                          Init::kTruncNormal);
  m.gate2_b = store.param(prefix + ".gate.fc2.b", {channels}, Init::kZeros);
  return m;
}

template struct WcapModule<float>;
template struct WcapModule<double>;
template WcapModule<float> make_wcap<float>(ParamStore<float>&,
                                            const std::string&, i64, i64, i64);
template WcapModule<double> make_wcap<double>(ParamStore<double>&,
                                              const std::string&, i64, i64,
                                              i64);

}  // namespace deeptopo
