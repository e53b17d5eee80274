#pragma once

#include <cmath>
#include <limits>

#include "illume/tensor.hpp"

namespace illume {

namespace detail {

// Accepts {H,W}, {H,W,C} or {1,H,W,C} and reports the H,W,C view.
template <typename S>
void image_view_dims(const Tensor<S>& t, idx& h, idx& w, idx& c) {
  if (t.ndim() == 2) {
    h = t.dim(0), w = t.dim(1), c = 1;
  } else if (t.ndim() == 3) {
    h = t.dim(0), w = t.dim(1), c = t.dim(2);
  } else if (t.ndim() == 4 && t.dim(0) == 1) {
    h = t.dim(1), w = t.dim(2), c = t.dim(3);
  } else {
    throw DomainError("expected an image tensor, got shape " + t.shape_str());
  }
}

}  // namespace detail

// 10*log10(max^2 / MSE); identical inputs return the +infinity sentinel.
template <typename S>
S psnr(const Tensor<S>& a, const Tensor<S>& b, S max_value = S(1)) {
  check_same_shape(a, b, "psnr");
  if (max_value <= S(0)) throw DomainError("psnr: max_value must be positive");
  S mse = (a.array() - b.array()).square().mean();
  if (mse == S(0)) return std::numeric_limits<S>::infinity();
  return S(10) * std::log10(max_value * max_value / mse);
}

// Structural similarity averaged over every window position and channel.
// Uniform (box) window and population statistics; C1=(k1*L)^2, C2=(k2*L)^2.
template <typename S>
S ssim(const Tensor<S>& a, const Tensor<S>& b, idx window, S k1 = S(0.01),
       S k2 = S(0.03), S max_value = S(1)) {
  check_same_shape(a, b, "ssim");
  idx h = 0, w = 0, c = 0;
  detail::image_view_dims(a, h, w, c);
  if (window < 1 || window > h || window > w)
    throw DomainError("ssim: window must fit inside the image");
  const S c1 = (k1 * max_value) * (k1 * max_value);
  const S c2 = (k2 * max_value) * (k2 * max_value);
  const S* pa = a.data();
  const S* pb = b.data();
  const S n = S(window) * S(window);
  S total = 0;
  idx count = 0;
  for (idx ch = 0; ch < c; ++ch) {
    for (idx y0 = 0; y0 + window <= h; ++y0) {
      for (idx x0 = 0; x0 + window <= w; ++x0) {
        S sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (idx y = y0; y < y0 + window; ++y) {
          for (idx x = x0; x < x0 + window; ++x) {
            S va = pa[(y * w + x) * c + ch];
            S vb = pb[(y * w + x) * c + ch];
            sx += va, sy += vb;
            sxx += va * va, syy += vb * vb, sxy += va * vb;
          }
        }
        S mx = sx / n, my = sy / n;
        S vx = sxx / n - mx * mx;
        S vy = syy / n - my * my;
        S cov = sxy / n - mx * my;
        total += ((2 * mx * my + c1) * (2 * cov + c2)) /
                 ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    }
  }
  return total / S(count);
}

// Mean cosine similarity over matched rows of two feature maps (any rank;
// rows are numel / last-dim). Zero-norm rows score 0.
template <typename S>
S cosine_rows(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "cosine_rows");
  auto am = a.mat();
  auto bm = b.mat();
  S total = 0;
  for (idx i = 0; i < am.rows(); ++i) {
    S na = am.row(i).norm(), nb = bm.row(i).norm();
    if (na > S(0) && nb > S(0)) total += am.row(i).dot(bm.row(i)) / (na * nb);
  }
  return total / static_cast<S>(am.rows());
}

}  // namespace illume
