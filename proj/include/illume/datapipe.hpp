#pragma once

#include <string>
#include <utility>
#include <vector>

#include "illume/rng.hpp"
#include "illume/tensor.hpp"

namespace illume::datapipe {

// Aspect ratios are width:height, reduced, in a fixed preference order
// (ties in the matching metric go to the earlier entry).
struct Ratio {
  int num;  // width units
  int den;  // height units
};

const std::vector<Ratio>& aspect_ratios();

struct CropPlan {
  Ratio ratio;
  idx x = 0, y = 0, w = 0, h = 0;  // crop box in source pixels
  idx src_w = 0, src_h = 0;
  double retained = 0.0;  // (w*h) / (src_w*src_h)
};

// Picks the ratio minimizing |ln((W/H) / (num/den))| and center-crops to the
// largest box of exactly that ratio.
CropPlan match_ratio(idx w, idx h);

// Keep iff at least 80% of the source area survives the crop. Integer-exact:
// 5*w*h >= 4*W*H.
bool integrity_keep(const CropPlan& plan);

// Groups sample indices by exact (H, W) and chunks each group into batches,
// remainder last. Groups are emitted in order of first appearance after the
// seeded shuffle (seed < 0 keeps input order).
std::vector<std::vector<std::size_t>> bucket_batches(
    const std::vector<std::pair<idx, idx>>& target_hw, idx batch_size,
    long seed = -1);

enum class ResMode { fixed, anyres };

struct StagePlan {
  int id = 0;
  ResMode mode = ResMode::fixed;
  idx fixed_size = 0;            // fixed mode: square side
  idx pixel_budget = 0;          // anyres mode: max H'*W'
  idx divisor = 1;               // both output dims must be divisible by this
  std::vector<std::string> trainable_groups;
};

// Target (H', W') for one image under a stage's resolution policy. In anyres
// mode the output has the matched ratio exactly, both dims divisible by the
// divisor, and the largest such area not exceeding the budget.
std::pair<idx, idx> stage_resolution(const StagePlan& stage, idx w, idx h);

// Crops {H, W, C} image data according to the plan's box.
template <typename S>
Tensor<S> apply_crop(const Tensor<S>& img, const CropPlan& plan) {
  if (img.ndim() != 3) throw DomainError("apply_crop: expected {H,W,C}");
  if (img.dim(0) != plan.src_h || img.dim(1) != plan.src_w)
    throw DomainError("apply_crop: image does not match plan source dims");
  idx c = img.dim(2);
  Tensor<S> out({plan.h, plan.w, c});
  for (idx y = 0; y < plan.h; ++y)
    out.mat(plan.h * plan.w, c).middleRows(y * plan.w, plan.w) =
        img.mat(plan.src_h * plan.src_w, c)
            .middleRows((plan.y + y) * plan.src_w + plan.x, plan.w);
  return out;
}

}  // namespace illume::datapipe
