#include "deeptopo/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

namespace deeptopo::metrics {

namespace {

void check_pred_range(const std::vector<double>& pred) {
  for (double v : pred) {
    DT_CHECK(v >= 0.0 && v <= 1.0,
             "metrics: prediction value ", v, " outside [0,1]");
  }
}

void check_binary(const std::vector<double>& gt) {
  for (double v : gt) {
    DT_CHECK(v == 0.0 || v == 1.0, "metrics: ground truth value ", v,
             " is not binary");
  }
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// MATLAB-style round (half away from zero) used by the centroid split.
i64 round_half_away(double x) {
  return static_cast<i64>(x >= 0 ? std::floor(x + 0.5) : std::ceil(x - 0.5));
}

double object_score(const std::vector<double>& vals) {
  const std::size_t n = vals.size();
  if (n == 0) return 0.0;
  double x = 0.0;
  for (double v : vals) x += v;
  x /= static_cast<double>(n);
  double sigma = 0.0;
  if (n > 1) {
    double ss = 0.0;
    for (double v : vals) ss += (v - x) * (v - x);
    sigma = std::sqrt(ss / static_cast<double>(n - 1));
  }
  return 2.0 * x / (x * x + 1.0 + sigma);
}

double region_ssim(const std::vector<double>& p, const std::vector<double>& g) {
  const std::size_t n = p.size();
  if (n == 0) return 1.0;
  double x = mean_of(p), y = mean_of(g);
  double sx = 0.0, sy = 0.0, sxy = 0.0;
  if (n > 1) {
    for (std::size_t i = 0; i < n; ++i) {
      sx += (p[i] - x) * (p[i] - x);
      sy += (g[i] - y) * (g[i] - y);
      sxy += (p[i] - x) * (g[i] - y);
    }
    const double d = static_cast<double>(n - 1);
    sx /= d;
    sy /= d;
    sxy /= d;
  }
  const double alpha = 4.0 * x * y * sxy;
  const double beta = (x * x + y * y) * (sx + sy);
  if (alpha != 0.0) return alpha / beta;
  return beta == 0.0 ? 1.0 : 0.0;
}

}  // namespace

double mae(const std::vector<double>& pred, const std::vector<double>& gt,
           i64 h, i64 w) {
  DT_CHECK(static_cast<i64>(pred.size()) == h * w &&
               static_cast<i64>(gt.size()) == h * w,
           "mae: size mismatch");
  check_pred_range(pred);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - gt[i]);
  return s / static_cast<double>(h * w);
}

double miou(const std::vector<double>& pred, const std::vector<double>& gt,
            i64 h, i64 w, double threshold) {
  DT_CHECK(static_cast<i64>(pred.size()) == h * w &&
               static_cast<i64>(gt.size()) == h * w,
           "miou: size mismatch");
  i64 inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= threshold;
    const bool g = gt[i] != 0.0;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double s_measure(const std::vector<double>& pred,
                 const std::vector<double>& gt, i64 h, i64 w) {
  DT_CHECK(static_cast<i64>(pred.size()) == h * w &&
               static_cast<i64>(gt.size()) == h * w,
           "s_measure: size mismatch");
  check_pred_range(pred);
  check_binary(gt);
  const double y = mean_of(gt);
  if (y == 0.0) return 1.0 - mean_of(pred);
  if (y == 1.0) return mean_of(pred);

  // Object term over foreground / inverted background.
  std::vector<double> fg, bg;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] == 1.0) fg.push_back(pred[i]);
    else bg.push_back(1.0 - pred[i]);
  }
  const double s_o = y * object_score(fg) + (1.0 - y) * object_score(bg);

  // Region term: split both maps about the (1-based, rounded) foreground
  // centroid and blend the per-quadrant similarity by area.
  double area = 0.0, cx = 0.0, cy = 0.0;
  for (i64 r = 0; r < h; ++r) {
    for (i64 c = 0; c < w; ++c) {
      if (gt[static_cast<std::size_t>(r * w + c)] == 1.0) {
        area += 1.0;
        cx += static_cast<double>(c + 1);
        cy += static_cast<double>(r + 1);
      }
    }
  }
  const i64 X = round_half_away(cx / area);
  const i64 Y = round_half_away(cy / area);
  auto collect = [&](const std::vector<double>& src, i64 r0, i64 r1, i64 c0,
                     i64 c1) {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>((r1 - r0) * (c1 - c0)));
    for (i64 r = r0; r < r1; ++r) {
      for (i64 c = c0; c < c1; ++c) {
        out.push_back(src[static_cast<std::size_t>(r * w + c)]);
      }
    }
    return out;
  };
  const double total = static_cast<double>(h * w);
  const double w1 = static_cast<double>(X * Y) / total;
  const double w2 = static_cast<double>((w - X) * Y) / total;
  const double w3 = static_cast<double>(X * (h - Y)) / total;
  const double w4 = 1.0 - w1 - w2 - w3;
  const double q1 = region_ssim(collect(pred, 0, Y, 0, X), collect(gt, 0, Y, 0, X));
  const double q2 = region_ssim(collect(pred, 0, Y, X, w), collect(gt, 0, Y, X, w));
  const double q3 = region_ssim(collect(pred, Y, h, 0, X), collect(gt, Y, h, 0, X));
  const double q4 = region_ssim(collect(pred, Y, h, X, w), collect(gt, Y, h, X, w));
  const double s_r = w1 * q1 + w2 * q2 + w3 * q3 + w4 * q4;

  const double q = 0.5 * s_o + 0.5 * s_r;
  return q < 0.0 ? 0.0 : q;
}

double weighted_f(const std::vector<double>& pred,
                  const std::vector<double>& gt, i64 h, i64 w) {
  DT_CHECK(static_cast<i64>(pred.size()) == h * w &&
               static_cast<i64>(gt.size()) == h * w,
           "weighted_f: size mismatch");
  check_pred_range(pred);
  check_binary(gt);
  std::vector<i64> fg_cells;
  for (i64 i = 0; i < h * w; ++i) {
    if (gt[static_cast<std::size_t>(i)] == 1.0) fg_cells.push_back(i);
  }
  if (fg_cells.empty()) {
    double s = 0.0;
    for (double v : pred) s += v;
    return s == 0.0 ? 1.0 : 0.0;
  }

  // Exact Euclidean distance transform to the nearest foreground pixel
  // (ties resolved to the smallest row-major index).
  const std::size_t n = static_cast<std::size_t>(h * w);
  std::vector<double> dst(n, 0.0);
  std::vector<i64> nearest(n);
  for (i64 p = 0; p < h * w; ++p) {
    const i64 pr = p / w, pc = p % w;
    if (gt[static_cast<std::size_t>(p)] == 1.0) {
      nearest[static_cast<std::size_t>(p)] = p;
      continue;
    }
    i64 best = -1;
    i64 best_d2 = -1;
    for (i64 f : fg_cells) {
      const i64 fr = f / w, fc = f % w;
      const i64 d2 = (pr - fr) * (pr - fr) + (pc - fc) * (pc - fc);
      if (best < 0 || d2 < best_d2) {
        best = f;
        best_d2 = d2;
      }
    }
    nearest[static_cast<std::size_t>(p)] = best;
    dst[static_cast<std::size_t>(p)] = std::sqrt(static_cast<double>(best_d2));
  }

  std::vector<double> e(n), et(n);
  for (std::size_t i = 0; i < n; ++i) e[i] = std::abs(pred[i] - gt[i]);
  for (std::size_t i = 0; i < n; ++i) {
    et[i] = gt[i] == 1.0 ? e[i] : e[static_cast<std::size_t>(nearest[i])];
  }

  // 7x7 Gaussian (sigma 5) correlation, zero padded.
  double kern[49];
  double ksum = 0.0;
  for (i64 ky = -3; ky <= 3; ++ky) {
    for (i64 kx = -3; kx <= 3; ++kx) {
      const double v = std::exp(-(static_cast<double>(ky * ky + kx * kx)) /
                                (2.0 * 25.0));
      kern[(ky + 3) * 7 + (kx + 3)] = v;
      ksum += v;
    }
  }
  for (double& v : kern) v /= ksum;
  std::vector<double> ea(n, 0.0);
  for (i64 r = 0; r < h; ++r) {
    for (i64 c = 0; c < w; ++c) {
      double acc = 0.0;
      for (i64 ky = -3; ky <= 3; ++ky) {
        const i64 rr = r + ky;
        if (rr < 0 || rr >= h) continue;
        for (i64 kx = -3; kx <= 3; ++kx) {
          const i64 cc = c + kx;
          if (cc < 0 || cc >= w) continue;
          acc += kern[(ky + 3) * 7 + (kx + 3)] *
                 et[static_cast<std::size_t>(rr * w + cc)];
        }
      }
      ea[static_cast<std::size_t>(r * w + c)] = acc;
    }
  }

  double tpw = 0.0, fpw = 0.0, ew_fg_sum = 0.0;
  i64 fg_count = 0;
  double gt_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double min_e_ea = e[i];
    if (gt[i] == 1.0 && ea[i] < e[i]) min_e_ea = ea[i];
    double b;
    if (gt[i] == 1.0) {
      b = 1.0;
    } else {
      b = 2.0 - std::exp(std::log(0.5) / 5.0 * dst[i]);
    }
    const double ew = min_e_ea * b;
    if (gt[i] == 1.0) {
      ew_fg_sum += ew;
      ++fg_count;
      gt_sum += 1.0;
    } else {
      fpw += ew;
    }
  }
  tpw = gt_sum - ew_fg_sum;
  const double r = 1.0 - ew_fg_sum / static_cast<double>(fg_count);
  const double p = (tpw + fpw) == 0.0 ? 0.0 : tpw / (tpw + fpw);
  return (r + p) == 0.0 ? 0.0 : 2.0 * r * p / (r + p);
}

double mean_e(const std::vector<double>& pred, const std::vector<double>& gt,
              i64 h, i64 w) {
  DT_CHECK(static_cast<i64>(pred.size()) == h * w &&
               static_cast<i64>(gt.size()) == h * w,
           "mean_e: size mismatch");
  check_pred_range(pred);
  check_binary(gt);
  const std::size_t n = static_cast<std::size_t>(h * w);
  double gsum = 0.0;
  for (double v : gt) gsum += v;
  const bool gt_empty = gsum == 0.0;
  const bool gt_full = gsum == static_cast<double>(n);
  const double mu_gt = gsum / static_cast<double>(n);

  double total = 0.0;
  for (int ti = 0; ti < 256; ++ti) {
    const double t = (static_cast<double>(ti) + 0.5) / 256.0;
    double fsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) fsum += pred[i] >= t ? 1.0 : 0.0;
    double score;
    if (gt_empty) {
      score = (static_cast<double>(n) - fsum) / static_cast<double>(n);
    } else if (gt_full) {
      score = fsum / static_cast<double>(n);
    } else {
      const double mu_fm = fsum / static_cast<double>(n);
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double a = (pred[i] >= t ? 1.0 : 0.0) - mu_fm;
        const double b = gt[i] - mu_gt;
        const double denom = a * a + b * b;  // >= b^2 > 0 for mixed gt
        const double align = 2.0 * a * b / denom;
        const double enh = (align + 1.0) * (align + 1.0) / 4.0;
        s += enh;
      }
      score = s / static_cast<double>(n);
    }
    total += score;
  }
  return total / 256.0;
}

i64 count_components(const std::vector<std::uint8_t>& mask, i64 h, i64 w) {
  DT_CHECK(static_cast<i64>(mask.size()) == h * w,
           "components: size mismatch");
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<i64> stack;
  i64 count = 0;
  for (i64 s = 0; s < h * w; ++s) {
    if (!mask[static_cast<std::size_t>(s)] || seen[static_cast<std::size_t>(s)])
      continue;
    ++count;
    stack.push_back(s);
    seen[static_cast<std::size_t>(s)] = 1;
    while (!stack.empty()) {
      const i64 p = stack.back();
      stack.pop_back();
      const i64 r = p / w, c = p % w;
      for (i64 dr = -1; dr <= 1; ++dr) {
        for (i64 dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          const i64 rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          const i64 q = rr * w + cc;
          if (mask[static_cast<std::size_t>(q)] &&
              !seen[static_cast<std::size_t>(q)]) {
            seen[static_cast<std::size_t>(q)] = 1;
            stack.push_back(q);
          }
        }
      }
    }
  }
  return count;
}

i64 cc_delta(const std::vector<std::uint8_t>& pred,
             const std::vector<std::uint8_t>& gt, i64 h, i64 w) {
  return count_components(pred, h, w) - count_components(gt, h, w);
}

namespace {

// 8-neighborhood simple-point table for (8,4) connectivity: deleting the
// center keeps exactly one foreground 8-component in the ring and exactly
// one background 4-component touching a 4-neighbor.
const std::array<bool, 256>& simple_table() {
  static const std::array<bool, 256> table = [] {
    std::array<bool, 256> t{};
    // ring order p2..p9: N, NE, E, SE, S, SW, W, NW
    const int rr[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
    const int cc[8] = {0, 1, 1, 1, 0, -1, -1, -1};
    for (int m = 0; m < 256; ++m) {
      // count fg 8-components within the ring
      int fg_comp = 0;
      int label[8] = {0};
      for (int i = 0; i < 8; ++i) {
        if (!((m >> i) & 1) || label[i]) continue;
        ++fg_comp;
        // flood within ring using 8-adjacency of cell coordinates
        int stack[8], sp = 0;
        stack[sp++] = i;
        label[i] = fg_comp;
        while (sp) {
          const int a = stack[--sp];
          for (int b = 0; b < 8; ++b) {
            if (!((m >> b) & 1) || label[b]) continue;
            if (std::abs(rr[a] - rr[b]) <= 1 && std::abs(cc[a] - cc[b]) <= 1) {
              label[b] = fg_comp;
              stack[sp++] = b;
            }
          }
        }
      }
      // count bg 4-components that touch a 4-neighbor of the center
      int bg_comp = 0;
      int blabel[8] = {0};
      for (int i = 0; i < 8; ++i) {
        if (((m >> i) & 1) || blabel[i]) continue;
        ++bg_comp;
        int id = bg_comp;
        int stack[8], sp = 0;
        stack[sp++] = i;
        blabel[i] = id;
        while (sp) {
          const int a = stack[--sp];
          for (int b = 0; b < 8; ++b) {
            if (((m >> b) & 1) || blabel[b]) continue;
            if (std::abs(rr[a] - rr[b]) + std::abs(cc[a] - cc[b]) == 1) {
              blabel[b] = id;
              stack[sp++] = b;
            }
          }
        }
      }
      int touching = 0;
      bool counted[9] = {false};
      for (int i = 0; i < 8; ++i) {
        const bool four_neighbor = (std::abs(rr[i]) + std::abs(cc[i])) == 1;
        if (four_neighbor && !((m >> i) & 1) && !counted[blabel[i]]) {
          counted[blabel[i]] = true;
          ++touching;
        }
      }
      t[static_cast<std::size_t>(m)] = (fg_comp == 1) && (touching == 1);
    }
    return t;
  }();
  return table;
}

}  // namespace

std::vector<std::uint8_t> skeletonize(const std::vector<std::uint8_t>& mask,
                                      i64 h, i64 w) {
  DT_CHECK(static_cast<i64>(mask.size()) == h * w,
           "skeletonize: size mismatch");
  std::vector<std::uint8_t> sk(mask);
  const auto& simple = simple_table();
  const int rr[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
  const int cc[8] = {0, 1, 1, 1, 0, -1, -1, -1};
  auto at = [&](i64 r, i64 c) -> std::uint8_t {
    if (r < 0 || r >= h || c < 0 || c >= w) return 0;
    return sk[static_cast<std::size_t>(r * w + c)];
  };
  auto neighborhood = [&](i64 r, i64 c) {
    int m = 0;
    for (int i = 0; i < 8; ++i) {
      if (at(r + rr[i], c + cc[i])) m |= 1 << i;
    }
    return m;
  };
  // Directional sub-passes (N, E, S, W). Candidates come from a snapshot so
  // a pass peels one boundary layer; deletion itself is sequential against
  // the live mask, which keeps every removal a simple-point removal.
  const int dirs[4][2] = {{-1, 0}, {0, 1}, {1, 0}, {0, -1}};
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& d : dirs) {
      std::vector<i64> candidates;
      for (i64 r = 0; r < h; ++r) {
        for (i64 c = 0; c < w; ++c) {
          if (!at(r, c)) continue;
          if (!at(r + d[0], c + d[1])) candidates.push_back(r * w + c);
        }
      }
      for (i64 p : candidates) {
        const i64 r = p / w, c = p % w;
        if (!at(r, c)) continue;
        const int m = neighborhood(r, c);
        int b = 0;
        for (int i = 0; i < 8; ++i) b += (m >> i) & 1;
        if (b < 2) continue;  // keep endpoints and isolated pixels
        if (!simple[static_cast<std::size_t>(m)]) continue;
        sk[static_cast<std::size_t>(p)] = 0;
        changed = true;
      }
    }
  }
  return sk;
}

double skeleton_recall(const std::vector<std::uint8_t>& pred,
                       const std::vector<std::uint8_t>& gt_skeleton, i64 h,
                       i64 w) {
  DT_CHECK(static_cast<i64>(pred.size()) == h * w &&
               static_cast<i64>(gt_skeleton.size()) == h * w,
           "skeleton_recall: size mismatch");
  i64 sk = 0, hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt_skeleton[i]) {
      ++sk;
      if (pred[i]) ++hit;
    }
  }
  if (sk == 0) return 1.0;
  return static_cast<double>(hit) / static_cast<double>(sk);
}

ImageRecord evaluate_pair(const std::string& id,
                          const std::vector<double>& pred,
                          const std::vector<double>& gt_mask,
                          const std::vector<std::uint8_t>& gt_skeleton, i64 h,
                          i64 w, double bin_threshold) {
  ImageRecord rec;
  rec.id = id;
  rec.mae = mae(pred, gt_mask, h, w);
  rec.iou = miou(pred, gt_mask, h, w, bin_threshold);
  rec.s_alpha = s_measure(pred, gt_mask, h, w);
  rec.f_beta_w = weighted_f(pred, gt_mask, h, w);
  rec.mean_e = mean_e(pred, gt_mask, h, w);
  std::vector<std::uint8_t> pb(pred.size()), gb(gt_mask.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pb[i] = pred[i] >= bin_threshold ? 1 : 0;
    gb[i] = gt_mask[i] != 0.0 ? 1 : 0;
  }
  rec.skeleton_recall = skeleton_recall(pb, gt_skeleton, h, w);
  rec.cc_delta = cc_delta(pb, gb, h, w);
  return rec;
}

void EvalReport::finalize() {
  aggregate = ImageRecord{};
  aggregate.id = "mean";
  mean_cc_delta = 0.0;
  if (per_image.empty()) return;
  for (const auto& r : per_image) {
    aggregate.s_alpha += r.s_alpha;
    aggregate.f_beta_w += r.f_beta_w;
    aggregate.mean_e += r.mean_e;
    aggregate.mae += r.mae;
    aggregate.iou += r.iou;
    aggregate.skeleton_recall += r.skeleton_recall;
    mean_cc_delta += static_cast<double>(r.cc_delta);
  }
  const double n = static_cast<double>(per_image.size());
  aggregate.s_alpha /= n;
  aggregate.f_beta_w /= n;
  aggregate.mean_e /= n;
  aggregate.mae /= n;
  aggregate.iou /= n;
  aggregate.skeleton_recall /= n;
  mean_cc_delta /= n;
}

namespace {
std::string format_row(const char* fmt, const ImageRecord& r,
                       double cc_value) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), fmt, r.id.c_str(), r.s_alpha, r.f_beta_w,
                r.mean_e, r.mae, r.iou, r.skeleton_recall, cc_value);
  return buf;
}
}  // namespace

std::string EvalReport::to_table() const {
  std::string out;
  for (const auto& [k, v] : config_echo) out += "# " + k + " = " + v + "\n";
  char hdr[256];
  std::snprintf(hdr, sizeof(hdr), "%-12s %8s %8s %8s %8s %8s %8s %8s\n", "id",
                "S_a", "Fbw", "mE", "MAE", "mIoU", "skel_r", "ccD");
  out += hdr;
  for (const auto& r : per_image) {
    out += format_row("%-12s %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f %8.1f\n", r,
                      static_cast<double>(r.cc_delta));
  }
  out += format_row("%-12s %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f %8.2f\n",
                    aggregate, mean_cc_delta);
  return out;
}

std::string EvalReport::to_tsv() const {
  std::string out =
      "id\ts_alpha\tf_beta_w\tmean_e\tmae\tmiou\tskeleton_recall\tcc_delta\n";
  for (const auto& r : per_image) {
    out += format_row("%s\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.0f\n", r,
                      static_cast<double>(r.cc_delta));
  }
  out += format_row("%s\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.4f\n",
                    aggregate, mean_cc_delta);
  return out;
}

}  // namespace deeptopo::metrics
