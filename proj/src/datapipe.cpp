#include "illume/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace illume::datapipe {

const std::vector<Ratio>& aspect_ratios() {
  static const std::vector<Ratio> set = {{1, 1}, {3, 4}, {4, 3}, {2, 3},
                                         {3, 2}, {1, 2}, {2, 1}, {1, 3},
                                         {3, 1}, {1, 4}, {4, 1}};
  return set;
}

CropPlan match_ratio(idx w, idx h) {
  if (w < 1 || h < 1) throw DomainError("match_ratio: empty image");
  const auto& set = aspect_ratios();
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < set.size(); ++i) {
    double d = std::abs(std::log(static_cast<double>(w * set[i].den) /
                                 static_cast<double>(h * set[i].num)));
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  CropPlan plan;
  plan.ratio = set[best];
  plan.src_w = w;
  plan.src_h = h;
  idx k = std::min(w / plan.ratio.num, h / plan.ratio.den);
  if (k < 1) throw DomainError("match_ratio: image too small for ratio");
  plan.w = k * plan.ratio.num;
  plan.h = k * plan.ratio.den;
  plan.x = (w - plan.w) / 2;
  plan.y = (h - plan.h) / 2;
  plan.retained = static_cast<double>(plan.w * plan.h) /
                  static_cast<double>(w * h);
  return plan;
}

bool integrity_keep(const CropPlan& plan) {
  return 5 * plan.w * plan.h >= 4 * plan.src_w * plan.src_h;
}

std::vector<std::vector<std::size_t>> bucket_batches(
    const std::vector<std::pair<idx, idx>>& target_hw, idx batch_size,
    long seed) {
  if (batch_size < 1) throw DomainError("bucket_batches: batch_size < 1");
  std::vector<std::size_t> order(target_hw.size());
  std::iota(order.begin(), order.end(), 0);
  if (seed >= 0) {
    Rng rng(static_cast<std::uint64_t>(seed));
    auto perm = rng.permutation(static_cast<idx>(order.size()));
    for (std::size_t i = 0; i < order.size(); ++i)
      order[i] = static_cast<std::size_t>(perm[i]);
  }
  // first-appearance order of resolutions, then members in shuffled order
  std::map<std::pair<idx, idx>, std::size_t> group_of;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t s : order) {
    auto key = target_hw[s];
    auto it = group_of.find(key);
    if (it == group_of.end()) {
      it = group_of.emplace(key, groups.size()).first;
      groups.emplace_back();
    }
    groups[it->second].push_back(s);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.size();
         i += static_cast<std::size_t>(batch_size)) {
      std::size_t end =
          std::min(g.size(), i + static_cast<std::size_t>(batch_size));
      batches.emplace_back(g.begin() + static_cast<std::ptrdiff_t>(i),
                           g.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return batches;
}

namespace {

idx lcm_idx(idx a, idx b) { return a / std::gcd(a, b) * b; }

}  // namespace

std::pair<idx, idx> stage_resolution(const StagePlan& stage, idx w, idx h) {
  if (stage.mode == ResMode::fixed) {
    if (stage.fixed_size < 1) throw DomainError("stage_resolution: bad size");
    return {stage.fixed_size, stage.fixed_size};
  }
  if (stage.pixel_budget < 1 || stage.divisor < 1)
    throw DomainError("stage_resolution: bad anyres stage");
  CropPlan plan = match_ratio(w, h);
  const idx num = plan.ratio.num, den = plan.ratio.den;
  // H' = den*t, W' = num*t with divisor | H' and divisor | W'; the smallest
  // admissible t is a lcm of the two divisibility constraints.
  const idx v = stage.divisor;
  const idx step = lcm_idx(v / std::gcd(v, den), v / std::gcd(v, num));
  idx s = 0;
  while (num * den * (s + 1) * step * (s + 1) * step <= stage.pixel_budget)
    ++s;
  if (s == 0)
    throw DomainError("stage_resolution: budget below smallest legal size");
  const idx t = s * step;
  return {den * t, num * t};
}

}  // namespace illume::datapipe
