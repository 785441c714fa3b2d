#include "deeptopo/atrm.hpp"

namespace deeptopo {

std::array<std::array<i64, 2>, 8> direction_steps() {
  // (drow, dcol) for 0, 45, ..., 315 degrees; rows grow downward, so a
  // positive angle step is -sin in rows.
  return {{{0, 1}, {-1, 1}, {-1, 0}, {-1, -1}, {0, -1}, {1, -1}, {1, 0}, {1, 1}}};
}

template <typename T>
DirectionalKernelBank<T> make_direction_kernels(ParamStore<T>& store,
                                                const std::string& prefix,
                                                i64 length, i64 channels) {
  DT_CHECK(length % 2 == 1, "direction kernels: length ", length,
           " must be odd");
  DT_CHECK(length >= 3, "direction kernels: length ", length, " must be >= 3");
  DirectionalKernelBank<T> bank;
  bank.length = length;
  bank.channels = channels;
  const i64 half = length / 2;
  const i64 n_taps = 1 + half;
  const auto dirs = direction_steps();
  bank.taps.resize(8);
  bank.support_masks.assign(static_cast<std::size_t>(8 * length * length), 0);
  std::vector<T> init(static_cast<std::size_t>(8 * channels * length * length),
                      T(0));
  const T w0 = T(1) / static_cast<T>(n_taps);
  for (i64 a = 0; a < 8; ++a) {
    for (i64 t = 0; t < n_taps; ++t) {
      const i64 dr = t * dirs[static_cast<std::size_t>(a)][0];
      const i64 dc = t * dirs[static_cast<std::size_t>(a)][1];
      bank.taps[static_cast<std::size_t>(a)].taps.push_back({dr, dc});
      bank.support_masks[static_cast<std::size_t>(
          (a * length + half + dr) * length + half + dc)] = 1;
      for (i64 c = 0; c < channels; ++c) {
        init[static_cast<std::size_t>(((a * channels + c) * length + half + dr) *
                                      length + half + dc)] = w0;
      }
    }
  }
  bank.kernels = store.param_values(prefix + ".kernels",
                                    {8, channels, length, length},
                                    std::move(init));
  return bank;
}

template <typename T>
Var<T> AtrmDecoder<T>::astb_forward(const Var<T>& f,
                                    const DirectionalKernelBank<T>& bank,
                                    const Var<T>& fuse_w,
                                    const Var<T>& fuse_b) {
  DT_CHECK(f->shape.size() == 3, "astb: input must be C x H x W");
  DT_CHECK(bank.channels == f->shape[0], "astb: bank channels ",
           bank.channels, " do not match input ", f->shape[0]);
  DT_CHECK(fuse_w->shape.size() == 2 && fuse_w->shape[0] == f->shape[0] &&
               fuse_w->shape[1] == 8 * f->shape[0],
           "astb: fusion weight must be C x 8C");
  auto resp = directional_responses(f, bank.kernels, bank.taps);
  auto fused = directional_fusion(resp, fuse_w, fuse_b);
  return add(f, fused);
}

template <typename T>
Var<T> AtrmDecoder<T>::upsample_stage(const Var<T>& f, const AtrmStage<T>& st,
                                      bool train, bool update_running) const {
  auto up = bilinear_upsample_x2(f);
  auto conv = conv2d(up, st.conv_w, st.conv_b, 1, 1);
  auto bn = batch_norm_2d(conv, st.bn_g, st.bn_b, st.bn_mean, st.bn_var, train,
                          update_running);
  return relu(bn);
}

template <typename T>
Var<T> AtrmDecoder<T>::forward(const Var<T>& f_dec, bool train,
                               bool update_running) const {
  DT_CHECK(f_dec->shape.size() == 3, "atrm: input must be C x S x S");
  DT_CHECK(f_dec->shape[1] == f_dec->shape[2],
           "atrm: bottleneck must be square, got ", f_dec->shape[1], "x",
           f_dec->shape[2]);
  DT_CHECK(static_cast<i64>(stages.size()) == cfg.stages,
           "atrm: configured for ", cfg.stages, " stages, built ",
           stages.size());
  auto x = conv2d(f_dec, proj_w, proj_b, 1, 0);
  for (const auto& st : stages) {
    x = upsample_stage(x, st, train, update_running);
    if (cfg.directional) {
      x = astb_forward(x, st.bank, st.fuse_w, st.fuse_b);
    }
  }
  return conv2d(x, head_w, head_b, 1, 0);
}

template <typename T>
AtrmDecoder<T> make_atrm(ParamStore<T>& store, const std::string& prefix,
                         i64 in_channels, const AtrmConfig& cfg) {
  DT_CHECK(cfg.stages >= 1, "atrm: need at least one stage");
  DT_CHECK(static_cast<i64>(cfg.channels_per_stage.size()) == cfg.stages,
           "atrm: ", cfg.channels_per_stage.size(), " stage widths for ",
           cfg.stages, " stages");
  using Init = typename ParamStore<T>::Init;
  AtrmDecoder<T> dec;
  dec.cfg = cfg;
  const i64 entry = cfg.channels_per_stage[0];
  dec.proj_w = store.param(prefix + ".proj.w", {entry, in_channels, 1, 1},
                           Init::kTruncNormal);
  dec.proj_b = store.param(prefix + ".proj.b", {entry}, Init::kZeros);
  i64 last = entry;
  for (i64 s = 0; s < cfg.stages; ++s) {
    AtrmStage<T> st;
    st.in_ch = cfg.channels_per_stage[static_cast<std::size_t>(s)];
    DT_CHECK(st.in_ch == last, "atrm: stage ", s, " input width ", st.in_ch,
             " does not chain from ", last);
    st.out_ch = st.in_ch / 2;
    DT_CHECK(st.out_ch >= 1, "atrm: stage ", s, " would have no channels");
    const std::string sp = prefix + ".stage" + std::to_string(s);
    st.conv_w = store.param(sp + ".conv.w", {st.out_ch, st.in_ch, 3, 3},
                            Init::kTruncNormal);
    st.conv_b = store.param(sp + ".conv.b", {st.out_ch}, Init::kZeros);
    st.bn_g = store.param(sp + ".bn.g", {st.out_ch}, Init::kOnes);
    st.bn_b = store.param(sp + ".bn.b", {st.out_ch}, Init::kZeros);
    st.bn_mean = store.param(sp + ".bn.running_mean", {st.out_ch},
                             Init::kZeros, 0.0, false);
    st.bn_var = store.param(sp + ".bn.running_var", {st.out_ch}, Init::kOnes,
                            0.0, false);
    if (cfg.directional) {
      st.bank = make_direction_kernels(store, sp + ".astb",
                                       cfg.kernel_length, st.out_ch);
      st.fuse_w = store.param(sp + ".astb.fuse.w", {st.out_ch, 8 * st.out_ch},
                              Init::kZeros);
      st.fuse_b = store.param(sp + ".astb.fuse.b", {st.out_ch}, Init::kZeros);
    }
    last = st.out_ch;
    dec.stages.push_back(std::move(st));
  }
  dec.head_w = store.param(prefix + ".head.w", {1, last, 1, 1},
                           Init::kTruncNormal);
  dec.head_b = store.param(prefix + ".head.b", {1}, Init::kZeros);
  return dec;
}

template struct DirectionalKernelBank<float>;
template struct DirectionalKernelBank<double>;
template struct AtrmStage<float>;
template struct AtrmStage<double>;
template struct AtrmDecoder<float>;
template struct AtrmDecoder<double>;
template DirectionalKernelBank<float> make_direction_kernels<float>(
    ParamStore<float>&, const std::string&, i64, i64);
template DirectionalKernelBank<double> make_direction_kernels<double>(
    ParamStore<double>&, const std::string&, i64, i64);
template AtrmDecoder<float> make_atrm<float>(ParamStore<float>&,
                                             const std::string&, i64,
                                             const AtrmConfig&);
template AtrmDecoder<double> make_atrm<double>(ParamStore<double>&,
                                               const std::string&, i64,
                                               const AtrmConfig&);

}  // namespace deeptopo
