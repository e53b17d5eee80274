#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "illume/autograd.hpp"

namespace illume {

// ===== spatial ops (NHWC feature maps) =====

struct Conv2dSpec {
  idx stride = 1;
  idx pad = 0;
};

namespace detail {

template <typename S>
void im2col_nhwc(const Tensor<S>& x, idx kh, idx kw, idx stride, idx pad,
                 Tensor<S>& cols, idx& ho, idx& wo) {
  idx n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  ho = (h + 2 * pad - kh) / stride + 1;
  wo = (w + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw DomainError("conv2d: kernel larger than padded input");
  const idx k = kh * kw * c;
  cols = Tensor<S>({n * ho * wo, k});
  const S* xd = x.data();
  S* cd = cols.data();
  for (idx ni = 0; ni < n; ++ni) {
    for (idx oy = 0; oy < ho; ++oy) {
      for (idx ox = 0; ox < wo; ++ox) {
        S* row = cd + ((ni * ho + oy) * wo + ox) * k;
        for (idx ky = 0; ky < kh; ++ky) {
          idx iy = oy * stride - pad + ky;
          for (idx kx = 0; kx < kw; ++kx) {
            idx ix = ox * stride - pad + kx;
            S* dst = row + (ky * kw + kx) * c;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
              std::memset(dst, 0, sizeof(S) * static_cast<std::size_t>(c));
            } else {
              const S* src = xd + ((ni * h + iy) * w + ix) * c;
              std::memcpy(dst, src, sizeof(S) * static_cast<std::size_t>(c));
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_nhwc(const Tensor<S>& dcols, idx n, idx h, idx w, idx c, idx kh,
                 idx kw, idx stride, idx pad, idx ho, idx wo, Tensor<S>& dx) {
  const idx k = kh * kw * c;
  const S* cd = dcols.data();
  S* xd = dx.data();
  for (idx ni = 0; ni < n; ++ni) {
    for (idx oy = 0; oy < ho; ++oy) {
      for (idx ox = 0; ox < wo; ++ox) {
        const S* row = cd + ((ni * ho + oy) * wo + ox) * k;
        for (idx ky = 0; ky < kh; ++ky) {
          idx iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (idx kx = 0; kx < kw; ++kx) {
            idx ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            const S* src = row + (ky * kw + kx) * c;
            S* dst = xd + ((ni * h + iy) * w + ix) * c;
            for (idx ci = 0; ci < c; ++ci) dst[ci] += src[ci];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x {N,H,W,Cin}, weight {kh,kw,Cin,Cout}, bias {Cout}.
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias,
              Conv2dSpec spec = {}) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  if (xv.ndim() != 4 || wv.ndim() != 4)
    throw DomainError("conv2d: expected NHWC input and khkwCinCout weight");
  idx n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), cin = xv.dim(3);
  idx kh = wv.dim(0), kw = wv.dim(1), wcin = wv.dim(2), cout = wv.dim(3);
  if (cin != wcin) throw DomainError("conv2d: channel mismatch");
  if (bias.value().numel() != cout) throw DomainError("conv2d: bias size mismatch");

  Tensor<S> cols;
  idx ho = 0, wo = 0;
  detail::im2col_nhwc(xv, kh, kw, spec.stride, spec.pad, cols, ho, wo);
  const idx k = kh * kw * cin;
  Tensor<S> out({n, ho, wo, cout});
  out.mat(n * ho * wo, cout).noalias() = cols.mat() * wv.mat(k, cout);
  out.mat(n * ho * wo, cout).rowwise() +=
      ConstMatMap<S>(bias.value().data(), 1, cout).row(0);

  auto bp = [cols, n, h, w, cin, kh, kw, cout, ho, wo,
             spec](Node<S>& nd) {
    const idx k2 = kh * kw * cin;
    auto g = nd.grad.mat(n * ho * wo, cout);
    if (nd.parents[1]->requires_grad) {  // weight
      Var<S>::ensure_grad(*nd.parents[1]);
      nd.parents[1]->grad.mat(k2, cout).noalias() += cols.mat().transpose() * g;
    }
    if (nd.parents[2]->requires_grad) {  // bias
      Var<S>::ensure_grad(*nd.parents[2]);
      MatMap<S>(nd.parents[2]->grad.data(), 1, cout).row(0) += g.colwise().sum();
    }
    if (nd.parents[0]->requires_grad) {  // input
      Var<S>::ensure_grad(*nd.parents[0]);
      Tensor<S> dcols({n * ho * wo, k2});
      dcols.mat().noalias() = g * nd.parents[1]->value.mat(k2, cout).transpose();
      detail::col2im_nhwc(dcols, n, h, w, cin, kh, kw, spec.stride, spec.pad,
                          ho, wo, nd.parents[0]->grad);
    }
  };
  return make_op<S>(std::move(out), {x, weight, bias}, std::move(bp));
}

template <typename S>
Var<S> upsample_nearest(const Var<S>& x, idx r) {
  const auto& xv = x.value();
  if (xv.ndim() != 4) throw DomainError("upsample_nearest: expected NHWC");
  idx n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  Tensor<S> out({n, h * r, w * r, c});
  auto om = out.mat(n * h * r * w * r, c);
  auto xm = xv.mat(n * h * w, c);
  for (idx ni = 0; ni < n; ++ni)
    for (idx oy = 0; oy < h * r; ++oy)
      for (idx ox = 0; ox < w * r; ++ox)
        om.row((ni * h * r + oy) * w * r + ox) =
            xm.row((ni * h + oy / r) * w + ox / r);
  return make_op<S>(std::move(out), {x}, [n, h, w, c, r](Node<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*nd.parents[0]);
    auto pg = nd.parents[0]->grad.mat(n * h * w, c);
    auto g = nd.grad.mat(n * h * r * w * r, c);
    for (idx ni = 0; ni < n; ++ni)
      for (idx oy = 0; oy < h * r; ++oy)
        for (idx ox = 0; ox < w * r; ++ox)
          pg.row((ni * h + oy / r) * w + ox / r) +=
              g.row((ni * h * r + oy) * w * r + ox);
  });
}

// Nearest resize to explicit output dims; handles rational scale factors
// (floor source mapping), so a 4x4 grid can become 7x7.
template <typename S>
Var<S> resize_nearest(const Var<S>& x, idx ho, idx wo) {
  const auto& xv = x.value();
  if (xv.ndim() != 4) throw DomainError("resize_nearest: expected NHWC");
  if (ho < 1 || wo < 1) throw DomainError("resize_nearest: bad target dims");
  idx n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  Tensor<S> out({n, ho, wo, c});
  auto om = out.mat(n * ho * wo, c);
  auto xm = xv.mat(n * h * w, c);
  for (idx ni = 0; ni < n; ++ni)
    for (idx oy = 0; oy < ho; ++oy)
      for (idx ox = 0; ox < wo; ++ox)
        om.row((ni * ho + oy) * wo + ox) =
            xm.row((ni * h + oy * h / ho) * w + ox * w / wo);
  return make_op<S>(std::move(out), {x}, [n, h, w, c, ho, wo](Node<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*nd.parents[0]);
    auto pg = nd.parents[0]->grad.mat(n * h * w, c);
    auto g = nd.grad.mat(n * ho * wo, c);
    for (idx ni = 0; ni < n; ++ni)
      for (idx oy = 0; oy < ho; ++oy)
        for (idx ox = 0; ox < wo; ++ox)
          pg.row((ni * h + oy * h / ho) * w + ox * w / wo) +=
              g.row((ni * ho + oy) * wo + ox);
  });
}

// {N,H,W,C} -> {N,H/r,W/r,C*r*r}: each output position packs an r x r block.
template <typename S>
Var<S> space_to_channel(const Var<S>& x, idx r) {
  const auto& xv = x.value();
  if (xv.ndim() != 4) throw DomainError("space_to_channel: expected NHWC");
  idx n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  if (h % r != 0 || w % r != 0)
    throw DomainError("space_to_channel: dims not divisible by factor");
  idx ho = h / r, wo = w / r;
  Tensor<S> out({n, ho, wo, c * r * r});
  const S* xd = xv.data();
  S* od = out.data();
  for (idx ni = 0; ni < n; ++ni)
    for (idx oy = 0; oy < ho; ++oy)
      for (idx ox = 0; ox < wo; ++ox)
        for (idx dy = 0; dy < r; ++dy)
          for (idx dx = 0; dx < r; ++dx)
            std::memcpy(
                od + (((ni * ho + oy) * wo + ox) * r * r + dy * r + dx) * c,
                xd + ((ni * h + oy * r + dy) * w + ox * r + dx) * c,
                sizeof(S) * static_cast<std::size_t>(c));
  return make_op<S>(std::move(out), {x}, [n, h, w, c, r, ho, wo](Node<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*nd.parents[0]);
    const S* gd = nd.grad.data();
    S* pd = nd.parents[0]->grad.data();
    for (idx ni = 0; ni < n; ++ni)
      for (idx oy = 0; oy < ho; ++oy)
        for (idx ox = 0; ox < wo; ++ox)
          for (idx dy = 0; dy < r; ++dy)
            for (idx dx = 0; dx < r; ++dx) {
              const S* src =
                  gd + (((ni * ho + oy) * wo + ox) * r * r + dy * r + dx) * c;
              S* dst = pd + ((ni * h + oy * r + dy) * w + ox * r + dx) * c;
              for (idx ci = 0; ci < c; ++ci) dst[ci] += src[ci];
            }
  });
}

// {N,H,W,C} -> {N,H*r,W*r,C/(r*r)}: inverse of space_to_channel.
template <typename S>
Var<S> channel_to_space(const Var<S>& x, idx r) {
  const auto& xv = x.value();
  if (xv.ndim() != 4) throw DomainError("channel_to_space: expected NHWC");
  idx n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  if (c % (r * r) != 0)
    throw DomainError("channel_to_space: channels not divisible by factor^2");
  idx co = c / (r * r);
  Tensor<S> out({n, h * r, w * r, co});
  const S* xd = xv.data();
  S* od = out.data();
  for (idx ni = 0; ni < n; ++ni)
    for (idx y = 0; y < h; ++y)
      for (idx xw = 0; xw < w; ++xw)
        for (idx dy = 0; dy < r; ++dy)
          for (idx dx = 0; dx < r; ++dx)
            std::memcpy(
                od + ((ni * h * r + y * r + dy) * w * r + xw * r + dx) * co,
                xd + (((ni * h + y) * w + xw) * r * r + dy * r + dx) * co,
                sizeof(S) * static_cast<std::size_t>(co));
  return make_op<S>(std::move(out), {x}, [n, h, w, r, co](Node<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*nd.parents[0]);
    const S* gd = nd.grad.data();
    S* pd = nd.parents[0]->grad.data();
    for (idx ni = 0; ni < n; ++ni)
      for (idx y = 0; y < h; ++y)
        for (idx xw = 0; xw < w; ++xw)
          for (idx dy = 0; dy < r; ++dy)
            for (idx dx = 0; dx < r; ++dx) {
              const S* src =
                  gd + ((ni * h * r + y * r + dy) * w * r + xw * r + dx) * co;
              S* dst =
                  pd + (((ni * h + y) * w + xw) * r * r + dy * r + dx) * co;
              for (idx ci = 0; ci < co; ++ci) dst[ci] += src[ci];
            }
  });
}

// ===== normalization =====

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                  S eps = S(1e-5)) {
  auto xm = x.value().mat();
  idx rows = xm.rows(), c = xm.cols();
  if (gamma.value().numel() != c || beta.value().numel() != c)
    throw DomainError("layer_norm: affine size mismatch");
  Tensor<S> xhat({rows, c});
  Tensor<S> inv_std({rows});
  auto hm = xhat.mat();
  for (idx i = 0; i < rows; ++i) {
    S mu = xm.row(i).mean();
    S var = (xm.row(i).array() - mu).square().mean();
    S is = S(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    hm.row(i) = ((xm.row(i).array() - mu) * is).matrix();
  }
  Tensor<S> out({rows, c});
  out.mat() = hm.array().rowwise() *
              ConstArrMap<S>(gamma.value().data(), c).transpose();
  out.mat().rowwise() += ConstMatMap<S>(beta.value().data(), 1, c).row(0);
  return make_op<S>(std::move(out), {x, gamma, beta},
                    [xhat, inv_std, rows, c](Node<S>& nd) {
    auto g = nd.grad.mat();
    auto hm2 = xhat.mat();
    if (nd.parents[1]->requires_grad) {
      Var<S>::ensure_grad(*nd.parents[1]);
      MatMap<S>(nd.parents[1]->grad.data(), 1, c).row(0) +=
          (g.array() * hm2.array()).colwise().sum().matrix();
    }
    if (nd.parents[2]->requires_grad) {
      Var<S>::ensure_grad(*nd.parents[2]);
      MatMap<S>(nd.parents[2]->grad.data(), 1, c).row(0) += g.colwise().sum();
    }
    if (nd.parents[0]->requires_grad) {
      Var<S>::ensure_grad(*nd.parents[0]);
      auto pg = nd.parents[0]->grad.mat();
      auto gam = ConstArrMap<S>(nd.parents[1]->value.data(), c);
      for (idx i = 0; i < rows; ++i) {
        ArrX<S> gh = g.row(i).transpose().array() * gam;
        S mean_gh = gh.mean();
        S mean_ghh = (gh * hm2.row(i).transpose().array()).mean();
        pg.row(i).array() +=
            ((gh - mean_gh - hm2.row(i).transpose().array() * mean_ghh) *
             inv_std[i])
                .transpose();
      }
    }
  });
}

// x {N,H,W,C}; statistics per (sample, channel group); gamma/beta per channel.
template <typename S>
Var<S> group_norm(const Var<S>& x, idx groups, const Var<S>& gamma,
                  const Var<S>& beta, S eps = S(1e-5)) {
  const auto& xv = x.value();
  if (xv.ndim() != 4) throw DomainError("group_norm: expected NHWC");
  idx n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  if (c % groups != 0) throw DomainError("group_norm: channels % groups != 0");
  idx cg = c / groups;
  idx hw = h * w;
  Tensor<S> xhat({n, h, w, c});
  Tensor<S> inv_std({n, groups});
  auto xm = xv.mat(n * hw, c);
  auto hm = xhat.mat(n * hw, c);
  for (idx ni = 0; ni < n; ++ni) {
    auto xb = xm.middleRows(ni * hw, hw);
    auto hb = hm.middleRows(ni * hw, hw);
    for (idx g = 0; g < groups; ++g) {
      auto blk = xb.middleCols(g * cg, cg);
      S mu = blk.mean();
      S var = (blk.array() - mu).square().mean();
      S is = S(1) / std::sqrt(var + eps);
      inv_std[ni * groups + g] = is;
      hb.middleCols(g * cg, cg) = ((blk.array() - mu) * is).matrix();
    }
  }
  Tensor<S> out({n, h, w, c});
  out.mat(n * hw, c) = hm.array().rowwise() *
                       ConstArrMap<S>(gamma.value().data(), c).transpose();
  out.mat(n * hw, c).rowwise() +=
      ConstMatMap<S>(beta.value().data(), 1, c).row(0);
  return make_op<S>(std::move(out), {x, gamma, beta},
                    [xhat, inv_std, n, hw, c, groups, cg](Node<S>& nd) {
    auto g = nd.grad.mat(n * hw, c);
    auto hm2 = xhat.mat(n * hw, c);
    if (nd.parents[1]->requires_grad) {
      Var<S>::ensure_grad(*nd.parents[1]);
      MatMap<S>(nd.parents[1]->grad.data(), 1, c).row(0) +=
          (g.array() * hm2.array()).colwise().sum().matrix();
    }
    if (nd.parents[2]->requires_grad) {
      Var<S>::ensure_grad(*nd.parents[2]);
      MatMap<S>(nd.parents[2]->grad.data(), 1, c).row(0) += g.colwise().sum();
    }
    if (nd.parents[0]->requires_grad) {
      Var<S>::ensure_grad(*nd.parents[0]);
      auto pg = nd.parents[0]->grad.mat(n * hw, c);
      auto gam = ConstArrMap<S>(nd.parents[1]->value.data(), c);
      const S inv_m = S(1) / static_cast<S>(hw * cg);
      for (idx ni = 0; ni < n; ++ni) {
        for (idx gi = 0; gi < groups; ++gi) {
          auto gb = g.middleRows(ni * hw, hw).middleCols(gi * cg, cg);
          auto hb = hm2.middleRows(ni * hw, hw).middleCols(gi * cg, cg);
          MatRM<S> gh = gb.array().rowwise() *
                        gam.segment(gi * cg, cg).transpose();
          S mean_gh = gh.sum() * inv_m;
          S mean_ghh = (gh.array() * hb.array()).sum() * inv_m;
          pg.middleRows(ni * hw, hw).middleCols(gi * cg, cg).array() +=
              (gh.array() - mean_gh - hb.array() * mean_ghh) *
              inv_std[ni * groups + gi];
        }
      }
    }
  });
}

// ===== softmax / losses =====

template <typename S>
Var<S> softmax_rows(const Var<S>& x) {
  auto xm = x.value().mat();
  Tensor<S> out({xm.rows(), xm.cols()});
  auto om = out.mat();
  for (idx i = 0; i < xm.rows(); ++i) {
    S mx = xm.row(i).maxCoeff();
    om.row(i) = (xm.row(i).array() - mx).exp().matrix();
    om.row(i) /= om.row(i).sum();
  }
  Tensor<S> ov = out;
  return make_op<S>(std::move(out), {x}, [ov](Node<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*nd.parents[0]);
    auto g = nd.grad.mat();
    auto y = ov.mat();
    auto pg = nd.parents[0]->grad.mat();
    for (idx i = 0; i < y.rows(); ++i) {
      S dot = g.row(i).dot(y.row(i));
      pg.row(i).array() += (g.row(i).array() - dot) * y.row(i).array();
    }
  });
}

// Square score matrix; row i only attends to columns 0..i.
template <typename S>
Var<S> causal_softmax(const Var<S>& x) {
  auto xm = x.value().mat();
  if (xm.rows() != xm.cols()) throw DomainError("causal_softmax: not square");
  idx t = xm.rows();
  Tensor<S> out({t, t});
  auto om = out.mat();
  om.setZero();
  for (idx i = 0; i < t; ++i) {
    S mx = xm.row(i).head(i + 1).maxCoeff();
    om.row(i).head(i + 1) = (xm.row(i).head(i + 1).array() - mx).exp().matrix();
    om.row(i).head(i + 1) /= om.row(i).head(i + 1).sum();
  }
  Tensor<S> ov = out;
  return make_op<S>(std::move(out), {x}, [ov, t](Node<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*nd.parents[0]);
    auto g = nd.grad.mat();
    auto y = ov.mat();
    auto pg = nd.parents[0]->grad.mat();
    for (idx i = 0; i < t; ++i) {
      S dot = g.row(i).head(i + 1).dot(y.row(i).head(i + 1));
      pg.row(i).head(i + 1).array() +=
          (g.row(i).head(i + 1).array() - dot) * y.row(i).head(i + 1).array();
    }
  });
}

// Mean cross entropy over positions where mask != 0.
template <typename S>
Var<S> cross_entropy(const Var<S>& logits, const std::vector<idx>& targets,
                     const std::vector<char>& mask) {
  auto lm = logits.value().mat();
  idx t = lm.rows(), v = lm.cols();
  if (static_cast<idx>(targets.size()) != t || static_cast<idx>(mask.size()) != t)
    throw DomainError("cross_entropy: target/mask length mismatch");
  idx m_count = 0;
  for (char m : mask) m_count += (m != 0);
  if (m_count == 0) throw DomainError("cross_entropy: empty mask");
  Tensor<S> probs({t, v});
  auto pm = probs.mat();
  S total = 0;
  for (idx i = 0; i < t; ++i) {
    if (targets[static_cast<std::size_t>(i)] < 0 ||
        targets[static_cast<std::size_t>(i)] >= v)
      throw DomainError("cross_entropy: label id out of vocabulary");
    S mx = lm.row(i).maxCoeff();
    pm.row(i) = (lm.row(i).array() - mx).exp().matrix();
    S z = pm.row(i).sum();
    pm.row(i) /= z;
    if (mask[static_cast<std::size_t>(i)])
      total += std::log(z) + mx - lm(i, targets[static_cast<std::size_t>(i)]);
  }
  Tensor<S> out({1});
  out[0] = total / static_cast<S>(m_count);
  return make_op<S>(std::move(out), {logits},
                    [probs, targets, mask, m_count](Node<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*nd.parents[0]);
    auto pg = nd.parents[0]->grad.mat();
    auto pm2 = probs.mat();
    const S w = nd.grad[0] / static_cast<S>(m_count);
    for (idx i = 0; i < pm2.rows(); ++i) {
      if (!mask[static_cast<std::size_t>(i)]) continue;
      pg.row(i) += pm2.row(i) * w;
      pg(i, targets[static_cast<std::size_t>(i)]) -= w;
    }
  });
}

template <typename S>
Var<S> mse_loss(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.value(), b.value(), "mse_loss");
  const idx n = a.value().numel();
  Tensor<S> diff(a.value().dims());
  diff.array() = a.value().array() - b.value().array();
  Tensor<S> out({1});
  out[0] = diff.array().square().sum() / static_cast<S>(n);
  return make_op<S>(std::move(out), {a, b}, [diff, n](Node<S>& nd) {
    const S w = nd.grad[0] * S(2) / static_cast<S>(n);
    if (nd.parents[0]->requires_grad) {
      Var<S>::ensure_grad(*nd.parents[0]);
      nd.parents[0]->grad.array() += diff.array() * w;
    }
    if (nd.parents[1]->requires_grad) {
      Var<S>::ensure_grad(*nd.parents[1]);
      nd.parents[1]->grad.array() -= diff.array() * w;
    }
  });
}

template <typename S>
Var<S> l1_loss(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.value(), b.value(), "l1_loss");
  const idx n = a.value().numel();
  Tensor<S> diff(a.value().dims());
  diff.array() = a.value().array() - b.value().array();
  Tensor<S> out({1});
  out[0] = diff.array().abs().sum() / static_cast<S>(n);
  return make_op<S>(std::move(out), {a, b}, [diff, n](Node<S>& nd) {
    const S w = nd.grad[0] / static_cast<S>(n);
    Tensor<S> sgn(diff.dims());
    sgn.array() = diff.array().sign();
    if (nd.parents[0]->requires_grad) {
      Var<S>::ensure_grad(*nd.parents[0]);
      nd.parents[0]->grad.array() += sgn.array() * w;
    }
    if (nd.parents[1]->requires_grad) {
      Var<S>::ensure_grad(*nd.parents[1]);
      nd.parents[1]->grad.array() -= sgn.array() * w;
    }
  });
}

// Mean over rows of (1 - cos(a_i, b_i)). Rows where either norm is exactly
// zero contribute cosine 0 (loss 1, zero gradient) and bump the counter.
template <typename S>
Var<S> cosine_loss(const Var<S>& a, const Var<S>& b,
                   long* zero_norm_counter = nullptr) {
  check_same_shape(a.value(), b.value(), "cosine_loss");
  auto am = a.value().mat();
  auto bm = b.value().mat();
  const idx rows = am.rows();
  Tensor<S> out({1});
  S total = 0;
  std::vector<char> degenerate(static_cast<std::size_t>(rows), 0);
  for (idx i = 0; i < rows; ++i) {
    S na = am.row(i).norm(), nb = bm.row(i).norm();
    if (na * nb == S(0)) {
      degenerate[static_cast<std::size_t>(i)] = 1;
      if (zero_norm_counter) ++(*zero_norm_counter);
      total += S(1);
    } else {
      total += S(1) - am.row(i).dot(bm.row(i)) / (na * nb);
    }
  }
  out[0] = total / static_cast<S>(rows);
  Tensor<S> ac = a.value(), bc = b.value();
  return make_op<S>(std::move(out), {a, b},
                    [ac, bc, rows, degenerate](Node<S>& nd) {
    auto am2 = ac.mat();
    auto bm2 = bc.mat();
    const S w = nd.grad[0] / static_cast<S>(rows);
    for (int side = 0; side < 2; ++side) {
      auto& p = *nd.parents[static_cast<std::size_t>(side)];
      if (!p.requires_grad) continue;
      Var<S>::ensure_grad(p);
      auto pg = p.grad.mat();
      for (idx i = 0; i < rows; ++i) {
        if (degenerate[static_cast<std::size_t>(i)]) continue;
        auto u = side == 0 ? am2.row(i) : bm2.row(i);
        auto v = side == 0 ? bm2.row(i) : am2.row(i);
        S nu = u.norm(), nv = v.norm();
        S dot = u.dot(v);
        // d(1-cos)/du = -(v/(|u||v|) - dot*u/(|u|^3 |v|))
        pg.row(i) += w * (dot / (nu * nu * nu * nv) * u - v / (nu * nv));
      }
    }
  });
}

// ===== rotary position encoding =====

namespace detail {

// Shared rotation kernel: cos_t/sin_t hold one angle per (token, pair);
// every head sees the same angle table.
template <typename S>
Var<S> rope_apply(const Var<S>& x, Tensor<S> cos_t, Tensor<S> sin_t,
                  idx n_heads) {
  auto xm = x.value().mat();
  const idx t = xm.rows(), d = xm.cols();
  const idx dh = d / n_heads;
  const idx pairs = dh / 2;
  Tensor<S> out({t, d});
  auto om = out.mat();
  auto cm = cos_t.mat();
  auto sm = sin_t.mat();
  for (idx i = 0; i < t; ++i) {
    for (idx h = 0; h < n_heads; ++h) {
      for (idx j = 0; j < pairs; ++j) {
        idx c0 = h * dh + 2 * j;
        S ca = cm(i, j), sa = sm(i, j);
        S xa = xm(i, c0), xb = xm(i, c0 + 1);
        om(i, c0) = xa * ca - xb * sa;
        om(i, c0 + 1) = xa * sa + xb * ca;
      }
    }
  }
  return make_op<S>(std::move(out), {x},
                    [cos_t, sin_t, t, d, n_heads, pairs, dh](Node<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*nd.parents[0]);
    auto pg = nd.parents[0]->grad.mat();
    auto g = nd.grad.mat();
    auto cm2 = cos_t.mat();
    auto sm2 = sin_t.mat();
    for (idx i = 0; i < t; ++i) {
      for (idx h = 0; h < n_heads; ++h) {
        for (idx j = 0; j < pairs; ++j) {
          idx c0 = h * dh + 2 * j;
          S ca = cm2(i, j), sa = sm2(i, j);
          S ga = g(i, c0), gb = g(i, c0 + 1);
          pg(i, c0) += ga * ca + gb * sa;
          pg(i, c0 + 1) += -ga * sa + gb * ca;
        }
      }
    }
  });
}

}  // namespace detail

template <typename S>
Var<S> rope1d(const Var<S>& x, const std::vector<idx>& positions, idx n_heads,
              double base = 10000.0) {
  auto xm = x.value().mat();
  const idx t = xm.rows(), d = xm.cols();
  if (static_cast<idx>(positions.size()) != t)
    throw DomainError("rope1d: position count mismatch");
  if (d % n_heads != 0 || (d / n_heads) % 2 != 0)
    throw DomainError("rope1d: head dim must be even");
  const idx pairs = d / n_heads / 2;
  Tensor<S> cos_t({t, pairs}), sin_t({t, pairs});
  for (idx i = 0; i < t; ++i) {
    double pos = static_cast<double>(positions[static_cast<std::size_t>(i)]);
    for (idx j = 0; j < pairs; ++j) {
      double theta =
          pos * std::pow(base, -static_cast<double>(j) /
                                   static_cast<double>(pairs));
      cos_t.mat()(i, j) = static_cast<S>(std::cos(theta));
      sin_t.mat()(i, j) = static_cast<S>(std::sin(theta));
    }
  }
  return detail::rope_apply(x, std::move(cos_t), std::move(sin_t), n_heads);
}

// First half of the pairs rotates by row position, second half by column.
template <typename S>
Var<S> rope2d(const Var<S>& x, const std::vector<idx>& row_pos,
              const std::vector<idx>& col_pos, idx n_heads,
              double base = 10000.0) {
  auto xm = x.value().mat();
  const idx t = xm.rows(), d = xm.cols();
  if (static_cast<idx>(row_pos.size()) != t ||
      static_cast<idx>(col_pos.size()) != t)
    throw DomainError("rope2d: position count mismatch");
  if (d % n_heads != 0 || (d / n_heads) % 4 != 0)
    throw DomainError("rope2d: head dim must be divisible by 4");
  const idx pairs = d / n_heads / 2;
  const idx half = pairs / 2;
  Tensor<S> cos_t({t, pairs}), sin_t({t, pairs});
  for (idx i = 0; i < t; ++i) {
    for (idx j = 0; j < pairs; ++j) {
      double pos = static_cast<double>(
          j < half ? row_pos[static_cast<std::size_t>(i)]
                   : col_pos[static_cast<std::size_t>(i)]);
      idx jj = j < half ? j : j - half;
      double theta =
          pos * std::pow(base, -static_cast<double>(jj) /
                                   static_cast<double>(half));
      cos_t.mat()(i, j) = static_cast<S>(std::cos(theta));
      sin_t.mat()(i, j) = static_cast<S>(std::sin(theta));
    }
  }
  return detail::rope_apply(x, std::move(cos_t), std::move(sin_t), n_heads);
}

// ===== plain tensor utilities (no gradient) =====

template <typename S>
Tensor<S> avg_pool_nhwc(const Tensor<S>& x, idx r) {
  if (x.ndim() != 4) throw DomainError("avg_pool_nhwc: expected NHWC");
  idx n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % r != 0 || w % r != 0) throw DomainError("avg_pool_nhwc: not divisible");
  Tensor<S> out({n, h / r, w / r, c});
  auto om = out.mat(n * (h / r) * (w / r), c);
  auto xm = x.mat(n * h * w, c);
  om.setZero();
  for (idx ni = 0; ni < n; ++ni)
    for (idx y = 0; y < h; ++y)
      for (idx xw = 0; xw < w; ++xw)
        om.row((ni * (h / r) + y / r) * (w / r) + xw / r) +=
            xm.row((ni * h + y) * w + xw);
  om *= S(1) / static_cast<S>(r * r);
  return out;
}

template <typename S>
Tensor<S> clamp01(const Tensor<S>& x) {
  Tensor<S> out = x.clone();
  out.array() = out.array().max(S(0)).min(S(1));
  return out;
}

}  // namespace illume
