#include "deeptopo/losses.hpp"

#include <algorithm>
#include <cmath>

namespace deeptopo {

void LossWeights::validate() const {
  DT_CHECK(lambda >= 0.0 && lambda <= 1.0, "loss weights: lambda ", lambda,
           " outside [0, 1]");
  DT_CHECK(l > 0.0, "loss weights: l must be positive, got ", l);
  DT_CHECK(alpha_max >= 1.0, "loss weights: alpha_max ", alpha_max,
           " must be >= 1");
}

WeightMap dynamic_weight(const std::vector<double>& gt_mask, i64 h, i64 w,
                         const LossWeights& lw) {
  lw.validate();
  DT_CHECK(static_cast<i64>(gt_mask.size()) == h * w, "dynamic_weight: mask of ",
           gt_mask.size(), " pixels for ", h, "x", w);
  i64 s_obj = 0;
  for (double v : gt_mask) {
    DT_CHECK(v == 0.0 || v == 1.0,
             "dynamic_weight: mask must be binary, found value ", v);
    if (v == 1.0) ++s_obj;
  }
  WeightMap wm;
  wm.h = h;
  wm.w = w;
  wm.w_px.assign(gt_mask.size(), 1.0);
  if (s_obj == 0) {
    wm.alpha_defined = false;
    return wm;
  }
  wm.alpha = lw.l * static_cast<double>(h * w) / static_cast<double>(s_obj);
  wm.alpha_defined = true;
  const double clamped = std::clamp(wm.alpha, 1.0, lw.alpha_max);
  for (std::size_t i = 0; i < gt_mask.size(); ++i) {
    if (gt_mask[i] == 1.0) wm.w_px[i] = clamped;
  }
  return wm;
}

template <typename T>
Var<T> recon_loss(const Var<T>& rec, const Var<T>& gt, const MaskPlan& plan,
                  i64 patch) {
  DT_CHECK(rec->shape == gt->shape, "recon_loss: shape mismatch (",
           rec->numel(), " vs ", gt->numel(), " elements)");
  DT_CHECK(rec->shape.size() == 3 && rec->shape[0] == 3,
           "recon_loss: expected 3 x H x W images");
  if (plan.masked.empty()) return scale(sum_all(rec), T(0));
  const i64 h = rec->shape[1], w = rec->shape[2];
  const i64 gw = w / patch;
  std::vector<T> mask(rec->v.size(), T(0));
  for (i64 t : plan.masked) {
    const i64 py = (t / gw) * patch, px = (t % gw) * patch;
    for (i64 c = 0; c < 3; ++c) {
      for (i64 dy = 0; dy < patch; ++dy) {
        for (i64 dx = 0; dx < patch; ++dx) {
          mask[static_cast<std::size_t>((c * h + py + dy) * w + px + dx)] = T(1);
        }
      }
    }
  }
  const T denom = static_cast<T>(plan.masked.size()) *
                  static_cast<T>(3 * patch * patch);
  auto diff = sub(rec, gt);
  auto sq = mul(diff, diff);
  return scale(weighted_sum(sq, mask), T(1) / denom);
}

template <typename T>
Var<T> seg_loss(const Var<T>& logits, const std::vector<double>& gt_mask,
                const WeightMap& wm) {
  DT_CHECK(logits->shape.size() == 3 && logits->shape[0] == 1,
           "seg_loss: logits must be 1 x H x W");
  const i64 h = logits->shape[1], w = logits->shape[2];
  DT_CHECK(h == wm.h && w == wm.w, "seg_loss: weight map is ", wm.h, "x",
           wm.w, ", logits are ", h, "x", w);
  DT_CHECK(static_cast<i64>(gt_mask.size()) == h * w,
           "seg_loss: ground truth has ", gt_mask.size(), " pixels for ", h,
           "x", w);
  std::vector<T> gt_t(gt_mask.size()), w_t(gt_mask.size());
  T wsum = T(0);
  for (std::size_t i = 0; i < gt_mask.size(); ++i) {
    gt_t[i] = static_cast<T>(gt_mask[i]);
    w_t[i] = static_cast<T>(wm.w_px[i]);
    wsum += w_t[i];
  }
  auto gt = tensor<T>({1, h, w}, std::move(gt_t));

  auto bce = scale(weighted_sum(bce_logits_map(logits, gt), w_t),
                   T(1) / wsum);

  auto p = sigmoid(logits);
  auto pg = mul(p, gt);
  auto inter = weighted_sum(pg, w_t);
  auto uni = weighted_sum(sub(add(p, gt), pg), w_t);
  auto iou = sub(scalar_of(T(1)), div_ew(inter, uni));
  return add(bce, iou);
}

double total_loss(double l_seg, double l_rec, double lambda) {
  DT_CHECK(lambda >= 0.0 && lambda <= 1.0, "total_loss: lambda ", lambda,
           " outside [0, 1]");
  return lambda * l_rec + (1.0 - lambda) * l_seg;
}

template <typename T>
Var<T> total_loss_var(const Var<T>& l_seg, const Var<T>& l_rec,
                      double lambda) {
  DT_CHECK(lambda >= 0.0 && lambda <= 1.0, "total_loss: lambda ", lambda,
           " outside [0, 1]");
  return add(scale(l_rec, static_cast<T>(lambda)),
             scale(l_seg, static_cast<T>(1.0 - lambda)));
}

template Var<float> recon_loss<float>(const Var<float>&, const Var<float>&,
                                      const MaskPlan&, i64);
template Var<double> recon_loss<double>(const Var<double>&, const Var<double>&,
                                        const MaskPlan&, i64);
template Var<float> seg_loss<float>(const Var<float>&,
                                    const std::vector<double>&,
                                    const WeightMap&);
template Var<double> seg_loss<double>(const Var<double>&,
                                      const std::vector<double>&,
                                      const WeightMap&);
template Var<float> total_loss_var<float>(const Var<float>&, const Var<float>&,
                                          double);
template Var<double> total_loss_var<double>(const Var<double>&,
                                            const Var<double>&, double);

}  // namespace deeptopo
