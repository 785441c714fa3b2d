#include "deeptopo/nn.hpp"

#include <cmath>

namespace deeptopo {

template <typename T>
AdamW<T>::AdamW(ParamStore<T>& store, double lr, double beta1, double beta2,
                double eps, double weight_decay)
    : store_(&store),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay) {
  m_.resize(store.entries.size());
  v_.resize(store.entries.size());
  for (std::size_t i = 0; i < store.entries.size(); ++i) {
    if (!store.entries[i].trainable) continue;
    m_[i].assign(store.entries[i].t->v.size(), 0.0);
    v_[i].assign(store.entries[i].t->v.size(), 0.0);
  }
}

template <typename T>
void AdamW<T>::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t e = 0; e < store_->entries.size(); ++e) {
    auto& entry = store_->entries[e];
    if (!entry.trainable) continue;
    auto& t = *entry.t;
    t.ensure_grad();
    auto& m = m_[e];
    auto& v = v_[e];
    const std::size_t n = t.v.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(t.g[i]);
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      const double w = static_cast<double>(t.v[i]);
      t.v[i] = static_cast<T>(w - lr_ * weight_decay_ * w -
                              lr_ * mh / (std::sqrt(vh) + eps_));
    }
  }
}

template <typename T>
Var<T> AttnBlock<T>::forward(const Var<T>& x) const {
  DT_CHECK(x->shape.size() == 2 && x->shape[1] == dim,
           "attention_block: tokens must be N x ", dim);
  auto h = layer_norm(x, ln1_g, ln1_b);
  auto qkv = linear(h, qkv_w, qkv_b);
  auto q = slice_cols(qkv, 0, dim);
  auto k = slice_cols(qkv, dim, 2 * dim);
  auto v = slice_cols(qkv, 2 * dim, 3 * dim);
  auto attn = multi_head_attention(q, k, v, heads);
  auto x1 = add(x, linear(attn, proj_w, proj_b));
  auto h2 = layer_norm(x1, ln2_g, ln2_b);
  auto ff = linear(relu(linear(h2, ff1_w, ff1_b)), ff2_w, ff2_b);
  return add(x1, ff);
}

template <typename T>
AttnBlock<T> make_attn_block(ParamStore<T>& store, const std::string& prefix,
                             i64 dim, i64 heads) {
  DT_CHECK(dim % heads == 0, "attention_block: dim ", dim,
           " not divisible by heads ", heads);
  using Init = typename ParamStore<T>::Init;
  AttnBlock<T> b;
  b.dim = dim;
  b.heads = heads;
  b.ln1_g = store.param(prefix + ".ln1.g", {dim}, Init::kOnes);
  b.ln1_b = store.param(prefix + ".ln1.b", {dim}, Init::kZeros);
  b.qkv_w = store.param(prefix + ".qkv.w", {3 * dim, dim}, Init::kTruncNormal);
  b.qkv_b = store.param(prefix + ".qkv.b", {3 * dim}, Init::kZeros);
  b.proj_w = store.param(prefix + ".proj.w", {dim, dim}, Init::kTruncNormal);
  b.proj_b = store.param(prefix + ".proj.b", {dim}, Init::kZeros);
  b.ln2_g = store.param(prefix + ".ln2.g", {dim}, Init::kOnes);
  b.ln2_b = store.param(prefix + ".ln2.b", {dim}, Init::kZeros);
  b.ff1_w = store.param(prefix + ".ff1.w", {4 * dim, dim}, Init::kTruncNormal);
  b.ff1_b = store.param(prefix + ".ff1.b", {4 * dim}, Init::kZeros);
  b.ff2_w = store.param(prefix + ".ff2.w", {dim, 4 * dim}, Init::kTruncNormal);
  b.ff2_b = store.param(prefix + ".ff2.b", {dim}, Init::kZeros);
  return b;
}

std::vector<double> sincos_pos_embed_2d(i64 dim, i64 grid) {
  DT_CHECK(dim % 4 == 0, "pos_embed: dim ", dim, " must be divisible by 4");
  const i64 quarter = dim / 4;
  std::vector<double> pe(static_cast<std::size_t>(grid * grid * dim));
  for (i64 r = 0; r < grid; ++r) {
    for (i64 c = 0; c < grid; ++c) {
      double* row = pe.data() + (r * grid + c) * dim;
      for (i64 i = 0; i < quarter; ++i) {
        const double omega =
            1.0 / std::pow(10000.0, static_cast<double>(i) /
                                        static_cast<double>(quarter));
        row[2 * i] = std::sin(static_cast<double>(r) * omega);
        row[2 * i + 1] = std::cos(static_cast<double>(r) * omega);
        row[2 * quarter + 2 * i] = std::sin(static_cast<double>(c) * omega);
        row[2 * quarter + 2 * i + 1] = std::cos(static_cast<double>(c) * omega);
      }
    }
  }
  return pe;
}

template class AdamW<float>;
template class AdamW<double>;
template struct AttnBlock<float>;
template struct AttnBlock<double>;
template AttnBlock<float> make_attn_block<float>(ParamStore<float>&,
                                                 const std::string&, i64, i64);
template AttnBlock<double> make_attn_block<double>(ParamStore<double>&,
                                                   const std::string&, i64,
                                                   i64);

}  // namespace deeptopo
