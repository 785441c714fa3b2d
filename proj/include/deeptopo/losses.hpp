#pragma once

#include "deeptopo/model.hpp"

namespace deeptopo {

struct LossWeights {
  double lambda = 0.1;     // blend weight of the reconstruction task
  double l = 1.0;          // area-scaling constant of the dynamic weight
  double alpha_max = 20.0; // clamp ceiling for the object weight
  void validate() const;
};

// Per-pixel weight map: clamp(alpha, 1, alpha_max) on foreground, 1 on
// background, with alpha = l * S_img / S_obj.
struct WeightMap {
  i64 h = 0, w = 0;
  std::vector<double> w_px;
  double alpha = 0.0;       // pre-clamp object weight
  bool alpha_defined = false;  // false when the mask has no foreground
};

WeightMap dynamic_weight(const std::vector<double>& gt_mask, i64 h, i64 w,
                         const LossWeights& lw);

// MSE over pixels of masked patches only (all three channels); zero when
// the masked set is empty.
template <typename T>
Var<T> recon_loss(const Var<T>& rec, const Var<T>& gt, const MaskPlan& plan,
                  i64 patch);

// Weighted BCE-from-logits normalized by sum(W) plus weighted soft IoU.
template <typename T>
Var<T> seg_loss(const Var<T>& logits, const std::vector<double>& gt_mask,
                const WeightMap& wm);

// lambda * l_rec + (1 - lambda) * l_seg
double total_loss(double l_seg, double l_rec, double lambda);
template <typename T>
Var<T> total_loss_var(const Var<T>& l_seg, const Var<T>& l_rec,
                      double lambda);

}  // namespace deeptopo
