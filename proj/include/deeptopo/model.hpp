#pragma once

#include "deeptopo/atrm.hpp"
#include "deeptopo/wcap.hpp"

namespace deeptopo {

enum class Ablation { kFull, kBaseline, kWcapOnly, kAtrmOnly };

const char* ablation_name(Ablation a);

struct ModelConfig {
  i64 image_size = 96;
  i64 patch_size = 8;
  i64 enc_dim = 64;
  i64 enc_depth = 2;
  i64 enc_heads = 4;
  i64 dec_dim = 48;
  i64 dec_depth = 1;
  i64 dec_heads = 4;
  double mask_ratio = 0.05;
  i64 wcap_kernel = 3;
  AtrmConfig atrm;
  Ablation ablation = Ablation::kFull;
  std::uint64_t seed = 1234;

  i64 grid() const { return image_size / patch_size; }
  i64 n_tokens() const { return grid() * grid(); }
  void validate() const;
};

struct MaskPlan {
  std::vector<i64> visible;
  std::vector<i64> masked;
  std::uint64_t seed = 0;
  i64 n_tokens = 0;
};

// Uniform sample without replacement of round(ratio * n) masked tokens.
MaskPlan random_mask(i64 n_tokens, double ratio, std::uint64_t seed);

template <typename T>
struct DeepTopoNet {
  ModelConfig cfg;
  ParamStore<T> params;

  Var<T> patch_w, patch_b;
  Var<T> enc_pos, dec_pos;  // fixed sinusoidal, not trained
  std::vector<AttnBlock<T>> enc_blocks;
  Var<T> enc_norm_g, enc_norm_b;
  Var<T> enc_mask_token;  // re-inserted before the segmentation bridge

  Var<T> dec_embed_w, dec_embed_b;
  Var<T> dec_mask_token;
  std::vector<AttnBlock<T>> dec_blocks;
  Var<T> dec_norm_g, dec_norm_b;
  Var<T> dec_head_w, dec_head_b;

  bool use_wcap = true;
  WcapModule<T> wcap;
  Var<T> plain_bridge_w, plain_bridge_b;  // baseline: plain 3x3 conv
  Var<T> bridge_w, bridge_b;              // 1x1 enc_dim -> dec_dim
  AtrmDecoder<T> atrm;

  explicit DeepTopoNet(const ModelConfig& config);

  // Tokenize, embed, add positions, keep visible rows, run encoder blocks.
  Var<T> encode(const Var<T>& image, const MaskPlan& plan) const;
  // Lightweight reconstruction decoder back to image pixels.
  Var<T> decode_recon(const Var<T>& latents, const MaskPlan& plan) const;
  // Bridge (WCAP or plain conv) + ATRM to logits at image resolution.
  Var<T> seg_from_latents(const Var<T>& latents, const MaskPlan& plan,
                          bool train, bool update_running) const;
  Var<T> seg_forward(const Var<T>& image, const MaskPlan& plan, bool train,
                     bool update_running) const;
  // Deterministic eval-mode pass over all tokens.
  Var<T> seg_eval(const Var<T>& image) const;
};

// Plain (non-graph) patch serialization helpers.
template <typename T>
std::vector<T> patchify(const std::vector<T>& img, i64 h, i64 w, i64 patch);
template <typename T>
std::vector<T> unpatchify(const std::vector<T>& tokens, i64 h, i64 w,
                          i64 patch);

}  // namespace deeptopo
