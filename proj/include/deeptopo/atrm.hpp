#pragma once

#include "deeptopo/nn.hpp"

namespace deeptopo {

// Eight half-line directions, 45 degrees apart, as (drow, dcol) unit lattice
// steps. Index 0 points east; a 90-degree counter-clockwise rotation of the
// image corresponds to an index shift of +2 (mod 8).
std::array<std::array<i64, 2>, 8> direction_steps();

// 8 learnable depthwise kernel sets with hard half-line supports: the center
// cell plus length/2 cells stepped along the direction. Off-support cells
// are structurally zero; the backward pass never writes them, so they stay
// exactly zero across optimizer steps.
template <typename T>
struct DirectionalKernelBank {
  i64 length = 0;
  i64 channels = 0;
  Var<T> kernels;                  // 8 x C x L x L
  std::vector<DirTaps> taps;       // per direction, tap 0 = center
  std::vector<std::uint8_t> support_masks;  // 8 x L x L, {0,1}
};

template <typename T>
DirectionalKernelBank<T> make_direction_kernels(ParamStore<T>& store,
                                                const std::string& prefix,
                                                i64 length, i64 channels);

struct AtrmConfig {
  i64 stages = 3;
  std::vector<i64> channels_per_stage = {64, 32, 16};  // stage input widths
  i64 kernel_length = 5;
  bool directional = true;  // false: plain bilinear+conv decoder (ablation)
};

template <typename T>
struct AtrmStage {
  i64 in_ch = 0, out_ch = 0;
  Var<T> conv_w, conv_b;
  Var<T> bn_g, bn_b, bn_mean, bn_var;
  DirectionalKernelBank<T> bank;  // unused when plain
  Var<T> fuse_w, fuse_b;
};

// Topology-aware decoder: 1x1 entry projection, then per stage a x2
// bilinear upsample -> 3x3 conv -> batch norm -> relu smoothing envelope
// followed by the directional block, and a final 1x1 to one logit channel.
template <typename T>
struct AtrmDecoder {
  AtrmConfig cfg;
  Var<T> proj_w, proj_b;
  std::vector<AtrmStage<T>> stages;
  Var<T> head_w, head_b;

  // Directional responses, concat, 1x1 fusion, plus the input residual.
  static Var<T> astb_forward(const Var<T>& f,
                             const DirectionalKernelBank<T>& bank,
                             const Var<T>& fuse_w, const Var<T>& fuse_b);
  Var<T> upsample_stage(const Var<T>& f, const AtrmStage<T>& st, bool train,
                        bool update_running) const;
  Var<T> forward(const Var<T>& f_dec, bool train, bool update_running) const;
};

template <typename T>
AtrmDecoder<T> make_atrm(ParamStore<T>& store, const std::string& prefix,
                         i64 in_channels, const AtrmConfig& cfg);

}  // namespace deeptopo
