#pragma once

#include <string>
#include <vector>

#include "deeptopo/common.hpp"

namespace deeptopo::metrics {

// A prediction is an H x W map in [0,1]; ground truth is binary {0,1}.
// All functions are pure and use doubles throughout.
//
// The measure definitions are pinned in this repo (see README): the usual
// eps guards of the reference MATLAB code are replaced by exact case
// analysis so that every [0,1] metric returns exactly 1.0 when pred == gt,
// and the E-measure normalizes by N with 256 mid-point thresholds.

double mae(const std::vector<double>& pred, const std::vector<double>& gt,
           i64 h, i64 w);
double miou(const std::vector<double>& pred, const std::vector<double>& gt,
            i64 h, i64 w, double threshold = 0.5);
double s_measure(const std::vector<double>& pred, const std::vector<double>& gt,
                 i64 h, i64 w);
double weighted_f(const std::vector<double>& pred,
                  const std::vector<double>& gt, i64 h, i64 w);
double mean_e(const std::vector<double>& pred, const std::vector<double>& gt,
              i64 h, i64 w);

// 8-connected component count (flood fill).
i64 count_components(const std::vector<std::uint8_t>& mask, i64 h, i64 w);
i64 cc_delta(const std::vector<std::uint8_t>& pred,
             const std::vector<std::uint8_t>& gt, i64 h, i64 w);

// Sequential simple-point thinning with endpoint preservation: the result
// is a subset of the mask and keeps the 8-connected component count.
std::vector<std::uint8_t> skeletonize(const std::vector<std::uint8_t>& mask,
                                      i64 h, i64 w);

// |pred AND gt_skeleton| / |gt_skeleton|; 1 when the skeleton is empty.
double skeleton_recall(const std::vector<std::uint8_t>& pred,
                       const std::vector<std::uint8_t>& gt_skeleton, i64 h,
                       i64 w);

struct ImageRecord {
  std::string id;
  double s_alpha = 0, f_beta_w = 0, mean_e = 0, mae = 0, iou = 0;
  double skeleton_recall = 0;
  i64 cc_delta = 0;
};

struct EvalReport {
  std::vector<ImageRecord> per_image;
  ImageRecord aggregate;  // arithmetic means (cc_delta mean is rounded away)
  double mean_cc_delta = 0;
  std::vector<std::pair<std::string, std::string>> config_echo;

  void finalize();  // fills aggregate from per_image
  std::string to_table() const;
  std::string to_tsv() const;
};

ImageRecord evaluate_pair(const std::string& id,
                          const std::vector<double>& pred,
                          const std::vector<double>& gt_mask,
                          const std::vector<std::uint8_t>& gt_skeleton, i64 h,
                          i64 w, double bin_threshold = 0.5);

}  // namespace deeptopo::metrics
