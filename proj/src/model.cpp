#include "deeptopo/model.hpp"

#include <algorithm>
#include <cmath>

namespace deeptopo {

const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kBaseline: return "baseline";
    case Ablation::kWcapOnly: return "wcap_only";
    case Ablation::kAtrmOnly: return "atrm_only";
  }
  return "?";
}

void ModelConfig::validate() const {
  DT_CHECK(patch_size > 0 && image_size % patch_size == 0,
           "config: image size ", image_size, " not divisible by patch ",
           patch_size);
  DT_CHECK(enc_dim % enc_heads == 0, "config: enc dim ", enc_dim,
           " not divisible by ", enc_heads, " heads");
  DT_CHECK(dec_dim % dec_heads == 0, "config: dec dim ", dec_dim,
           " not divisible by ", dec_heads, " heads");
  DT_CHECK(enc_dim % 4 == 0 && dec_dim % 4 == 0,
           "config: embed dims must be divisible by 4 for 2-d sin/cos");
  DT_CHECK(mask_ratio >= 0.0 && mask_ratio < 1.0, "config: mask ratio ",
           mask_ratio, " outside [0, 1)");
  const i64 side = grid() << atrm.stages;
  DT_CHECK(side == image_size, "config: 2^", atrm.stages,
           " x token grid = ", side, " != image size ", image_size);
}

MaskPlan random_mask(i64 n_tokens, double ratio, std::uint64_t seed) {
  DT_CHECK(n_tokens > 0, "random_mask: no tokens");
  DT_CHECK(ratio >= 0.0 && ratio < 1.0, "random_mask: ratio ", ratio,
           " outside [0, 1)");
  const i64 n_masked = static_cast<i64>(std::llround(ratio * static_cast<double>(n_tokens)));
  std::vector<i64> idx(static_cast<std::size_t>(n_tokens));
  for (i64 i = 0; i < n_tokens; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng::stream(seed, 0x6d61736bULL);
  rng.shuffle(idx.begin(), idx.end());
  MaskPlan plan;
  plan.seed = seed;
  plan.n_tokens = n_tokens;
  plan.masked.assign(idx.begin(), idx.begin() + n_masked);
  plan.visible.assign(idx.begin() + n_masked, idx.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

template <typename T>
DeepTopoNet<T>::DeepTopoNet(const ModelConfig& config) : cfg(config) {
  cfg.validate();
  params.seed = cfg.seed;
  using Init = typename ParamStore<T>::Init;
  const i64 pd = 3 * cfg.patch_size * cfg.patch_size;
  patch_w = params.param("patch_embed.w", {cfg.enc_dim, pd}, Init::kTruncNormal);
  patch_b = params.param("patch_embed.b", {cfg.enc_dim}, Init::kZeros);
  enc_pos = pos_embed_const<T>(cfg.enc_dim, cfg.grid());
  dec_pos = pos_embed_const<T>(cfg.dec_dim, cfg.grid());
  for (i64 i = 0; i < cfg.enc_depth; ++i) {
    enc_blocks.push_back(make_attn_block(params, "enc.block" + std::to_string(i),
                                         cfg.enc_dim, cfg.enc_heads));
  }
  enc_norm_g = params.param("enc.norm.g", {cfg.enc_dim}, Init::kOnes);
  enc_norm_b = params.param("enc.norm.b", {cfg.enc_dim}, Init::kZeros);
  enc_mask_token = params.param("enc.mask_token", {cfg.enc_dim},
                                Init::kTruncNormal);

  dec_embed_w = params.param("dec.embed.w", {cfg.dec_dim, cfg.enc_dim},
                             Init::kTruncNormal);
  dec_embed_b = params.param("dec.embed.b", {cfg.dec_dim}, Init::kZeros);
  dec_mask_token = params.param("dec.mask_token", {cfg.dec_dim},
                                Init::kTruncNormal);
  for (i64 i = 0; i < cfg.dec_depth; ++i) {
    dec_blocks.push_back(make_attn_block(params, "dec.block" + std::to_string(i),
                                         cfg.dec_dim, cfg.dec_heads));
  }
  dec_norm_g = params.param("dec.norm.g", {cfg.dec_dim}, Init::kOnes);
  dec_norm_b = params.param("dec.norm.b", {cfg.dec_dim}, Init::kZeros);
  dec_head_w = params.param("dec.head.w", {pd, cfg.dec_dim}, Init::kTruncNormal);
  dec_head_b = params.param("dec.head.b", {pd}, Init::kZeros);

  use_wcap = cfg.ablation == Ablation::kFull ||
             cfg.ablation == Ablation::kWcapOnly;
  const bool use_astb = cfg.ablation == Ablation::kFull ||
                        cfg.ablation == Ablation::kAtrmOnly;
  if (use_wcap) {
    wcap = make_wcap(params, "wcap", cfg.enc_dim, cfg.enc_dim, cfg.wcap_kernel);
  } else {
    plain_bridge_w = params.param("plain_bridge.conv.w",
                                  {cfg.enc_dim, cfg.enc_dim, 3, 3},
                                  Init::kTruncNormal);
    plain_bridge_b = params.param("plain_bridge.conv.b", {cfg.enc_dim},
                                  Init::kZeros);
  }
  bridge_w = params.param("bridge.w", {cfg.dec_dim, cfg.enc_dim, 1, 1},
                          Init::kTruncNormal);
  bridge_b = params.param("bridge.b", {cfg.dec_dim}, Init::kZeros);
  AtrmConfig acfg = cfg.atrm;
  acfg.directional = use_astb;
  atrm = make_atrm(params, use_astb ? "atrm" : "plain_dec", cfg.dec_dim, acfg);
}

template <typename T>
Var<T> DeepTopoNet<T>::encode(const Var<T>& image, const MaskPlan& plan) const {
  DT_CHECK(image->shape.size() == 3 && image->shape[0] == 3 &&
               image->shape[1] == cfg.image_size &&
               image->shape[2] == cfg.image_size,
           "encode: image must be 3 x ", cfg.image_size, " x ",
           cfg.image_size);
  DT_CHECK(plan.n_tokens == cfg.n_tokens(), "encode: plan for ",
           plan.n_tokens, " tokens, model has ", cfg.n_tokens());
  auto tokens = patchify_op(image, cfg.patch_size);
  auto emb = add(linear(tokens, patch_w, patch_b), enc_pos);
  auto x = plan.visible.size() == static_cast<std::size_t>(cfg.n_tokens())
               ? emb
               : gather_rows(emb, plan.visible);
  for (const auto& b : enc_blocks) x = b.forward(x);
  return layer_norm(x, enc_norm_g, enc_norm_b);
}

template <typename T>
Var<T> DeepTopoNet<T>::decode_recon(const Var<T>& latents,
                                    const MaskPlan& plan) const {
  auto emb = linear(latents, dec_embed_w, dec_embed_b);
  auto full = scatter_rows_fill(emb, plan.visible, dec_mask_token,
                                cfg.n_tokens());
  auto x = add(full, dec_pos);
  for (const auto& b : dec_blocks) x = b.forward(x);
  x = layer_norm(x, dec_norm_g, dec_norm_b);
  auto patches = linear(x, dec_head_w, dec_head_b);
  return unpatchify_op(patches, cfg.patch_size, cfg.image_size,
                       cfg.image_size);
}

template <typename T>
Var<T> DeepTopoNet<T>::seg_from_latents(const Var<T>& latents,
                                        const MaskPlan& plan, bool train,
                                        bool update_running) const {
  auto full = scatter_rows_fill(latents, plan.visible, enc_mask_token,
                                cfg.n_tokens());
  auto grid = tokens_to_grid(full, cfg.grid());
  Var<T> bridged;
  if (use_wcap) {
    auto g = wcap.project_descriptor(latents);
    bridged = wcap.forward(grid, g);
  } else {
    bridged = conv2d(grid, plain_bridge_w, plain_bridge_b, 1, 1);
  }
  auto f_dec = conv2d(bridged, bridge_w, bridge_b, 1, 0);
  return atrm.forward(f_dec, train, update_running);
}

template <typename T>
Var<T> DeepTopoNet<T>::seg_forward(const Var<T>& image, const MaskPlan& plan,
                                   bool train, bool update_running) const {
  auto latents = encode(image, plan);
  return seg_from_latents(latents, plan, train, update_running);
}

template <typename T>
Var<T> DeepTopoNet<T>::seg_eval(const Var<T>& image) const {
  MaskPlan plan = random_mask(cfg.n_tokens(), 0.0, 0);
  return seg_forward(image, plan, false, false);
}

template <typename T>
std::vector<T> patchify(const std::vector<T>& img, i64 h, i64 w, i64 patch) {
  auto v = tensor<T>({3, h, w}, img);
  return patchify_op(v, patch)->v;
}

template <typename T>
std::vector<T> unpatchify(const std::vector<T>& tokens, i64 h, i64 w,
                          i64 patch) {
  const i64 n = (h / patch) * (w / patch);
  auto v = tensor<T>({n, 3 * patch * patch}, tokens);
  return unpatchify_op(v, patch, h, w)->v;
}

template struct DeepTopoNet<float>;
template struct DeepTopoNet<double>;
template std::vector<float> patchify<float>(const std::vector<float>&, i64,
                                            i64, i64);
template std::vector<double> patchify<double>(const std::vector<double>&, i64,
                                              i64, i64);
template std::vector<float> unpatchify<float>(const std::vector<float>&, i64,
                                              i64, i64);
template std::vector<double> unpatchify<double>(const std::vector<double>&,
                                                i64, i64, i64);

}  // namespace deeptopo
