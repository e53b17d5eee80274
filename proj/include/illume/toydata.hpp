#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "illume/rng.hpp"
#include "illume/tensor.hpp"

namespace illume::toydata {

// Procedural shape/color images: a flat background with a few filled
// rectangles and circles. Self-contained stand-in for a natural-image
// folder; values in [0,1], layout {H,W,3}.
template <typename S>
Tensor<S> shape_image(idx h, idx w, Rng& rng) {
  if (h < 4 || w < 4) throw DomainError("shape_image: dims too small");
  Tensor<S> img({h, w, 3});
  auto m = img.mat(h * w, 3);
  for (idx c = 0; c < 3; ++c)
    m.col(c).setConstant(static_cast<S>(rng.uniform(0.05, 0.95)));

  const idx shapes = 2 + rng.uniform_int(3);
  for (idx s = 0; s < shapes; ++s) {
    S col[3];
    for (auto& v : col) v = static_cast<S>(rng.uniform(0.0, 1.0));
    const bool circle = rng.bernoulli(0.5);
    if (circle) {
      const double cy = rng.uniform(0.0, static_cast<double>(h));
      const double cx = rng.uniform(0.0, static_cast<double>(w));
      const double r = rng.uniform(static_cast<double>(std::min(h, w)) * 0.1,
                                   static_cast<double>(std::min(h, w)) * 0.4);
      for (idx y = 0; y < h; ++y)
        for (idx x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy;
          const double dx = static_cast<double>(x) + 0.5 - cx;
          if (dy * dy + dx * dx <= r * r)
            for (idx c = 0; c < 3; ++c) m(y * w + x, c) = col[c];
        }
    } else {
      idx y0 = rng.uniform_int(h), y1 = rng.uniform_int(h);
      idx x0 = rng.uniform_int(w), x1 = rng.uniform_int(w);
      if (y0 > y1) std::swap(y0, y1);
      if (x0 > x1) std::swap(x0, x1);
      for (idx y = y0; y <= y1; ++y)
        for (idx x = x0; x <= x1; ++x)
          for (idx c = 0; c < 3; ++c) m(y * w + x, c) = col[c];
    }
  }
  return img;
}

template <typename S>
Tensor<S> shape_batch(idx n, idx h, idx w, Rng& rng) {
  Tensor<S> out({n, h, w, 3});
  for (idx i = 0; i < n; ++i) {
    Tensor<S> img = shape_image<S>(h, w, rng);
    out.mat(n * h * w, 3).middleRows(i * h * w, h * w) = img.mat(h * w, 3);
  }
  return out;
}

// The one synthetic editing operation: color inversion. Applying it twice
// is the identity, which the tests lean on.
template <typename S>
Tensor<S> invert(const Tensor<S>& img) {
  Tensor<S> out(img.dims());
  out.array() = S(1) - img.array();
  return out;
}

// Deterministic word-to-id mapping for toy instructions. Id 0 stays
// reserved for the unconditional mask token.
inline std::vector<idx> instruction_ids(const std::string& text,
                                        idx text_vocab) {
  if (text_vocab < 2)
    throw DomainError("instruction_ids: vocabulary too small");
  std::vector<idx> ids;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    ids.push_back(1 + static_cast<idx>(fnv1a64(word) %
                                       static_cast<std::uint64_t>(text_vocab - 1)));
    word.clear();
  };
  for (char ch : text) {
    if (ch == ' ' || ch == '\t' || ch == '\n') flush();
    else word.push_back(ch);
  }
  flush();
  return ids;
}

}  // namespace illume::toydata
