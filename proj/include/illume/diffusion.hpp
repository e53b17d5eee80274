#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "illume/dualvitok.hpp"
#include "illume/optim.hpp"

namespace illume::diffusion {

// ===== configuration =====

struct DiffusionConfig {
  idx timesteps = 50;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  idx width = 64;  // stem channels; level l runs at width * 2^l
  idx depth = 3;   // resolution levels (depth-1 downsamples)
  idx upscale = 2; // output dims relative to the token source image

  std::uint64_t hash() const {
    std::ostringstream os;
    os.precision(17);
    os << timesteps << ';' << beta_start << ';' << beta_end << ';' << width
       << ';' << depth << ';' << upscale;
    return fnv1a64(os.str());
  }
};

inline void validate(const DiffusionConfig& c) {
  if (c.timesteps < 1 || c.width < 1 || c.depth < 1)
    throw DomainError("DiffusionConfig: sizes must be positive");
  if (c.beta_start <= 0.0 || c.beta_end >= 1.0 || c.beta_start > c.beta_end)
    throw DomainError("DiffusionConfig: betas must satisfy 0 < start <= end < 1");
  if (c.upscale != 2)
    throw DomainError("DiffusionConfig: upscale is fixed at 2");
}

// Linear beta schedule with the cumulative products sampling needs.
struct Schedule {
  std::vector<double> beta, alpha, abar;

  static Schedule build(const DiffusionConfig& c) {
    Schedule s;
    const idx n = c.timesteps;
    s.beta.resize(static_cast<std::size_t>(n));
    s.alpha.resize(static_cast<std::size_t>(n));
    s.abar.resize(static_cast<std::size_t>(n));
    double prod = 1.0;
    for (idx t = 0; t < n; ++t) {
      double b = n == 1 ? c.beta_start
                        : c.beta_start + (c.beta_end - c.beta_start) *
                                             static_cast<double>(t) /
                                             static_cast<double>(n - 1);
      prod *= 1.0 - b;
      s.beta[static_cast<std::size_t>(t)] = b;
      s.alpha[static_cast<std::size_t>(t)] = 1.0 - b;
      s.abar[static_cast<std::size_t>(t)] = prod;
    }
    return s;
  }
};

// ===== conditioning corruption =====

struct CondMaskSpec {
  double sample_perturb_prob = 0.5;  // chance a sample gets token noise
  double token_replace_prob = 0.1;   // per-token replacement rate when it does
  double sem_mask_prob = 0.1;        // whole semantic grid -> null embedding
  double pix_mask_prob = 0.5;        // whole pixel grid -> null embedding
};

inline void validate(const CondMaskSpec& s) {
  for (double p : {s.sample_perturb_prob, s.token_replace_prob,
                   s.sem_mask_prob, s.pix_mask_prob})
    if (p < 0.0 || p > 1.0)
      throw DomainError("CondMaskSpec: probabilities must be in [0,1]");
}

struct MaskedCond {
  IGrid sem_ids, pix_ids;
  bool sem_nulled = false;
  bool pix_nulled = false;
};

// Draws one sample's conditioning corruption: a single gate decides token
// perturbation for both grids (replacement uniform over the codebook,
// original included), then each feature set is independently dropped to the
// null embedding. Always consumes the same number of gate draws so streams
// line up across spec values.
inline MaskedCond mask_condition(const IGrid& sem_ids, const IGrid& pix_ids,
                                 const CondMaskSpec& spec, idx k_sem,
                                 idx k_pix, Rng& rng) {
  validate(spec);
  MaskedCond out{sem_ids, pix_ids, false, false};
  if (rng.bernoulli(spec.sample_perturb_prob)) {
    auto perturb = [&](IGrid& g, idx k) {
      for (idx i = 0; i < g.size(); ++i)
        if (rng.bernoulli(spec.token_replace_prob))
          g.data()[i] = static_cast<std::int32_t>(rng.uniform_int(k));
    };
    perturb(out.sem_ids, k_sem);
    perturb(out.pix_ids, k_pix);
  }
  out.sem_nulled = rng.bernoulli(spec.sem_mask_prob);
  out.pix_nulled = rng.bernoulli(spec.pix_mask_prob);
  return out;
}

// ===== token-conditioned denoiser =====

// Small pixel-space UNet that predicts the injected noise of a 2x-upscaled
// reconstruction, conditioned on the source's token grids by channel
// concatenation. The tokenizer is a frozen lookup: its codebooks enter as
// constants and never receive gradient.
template <typename S>
class DiffusionDecoder {
 public:
  DiffusionDecoder(DiffusionConfig cfg, const dualvitok::TokenizerConfig& tok,
                   std::uint64_t seed)
      : cfg_(cfg),
        sched_(Schedule::build(cfg)),
        dim_(tok.dim),
        f_sem_(tok.f_sem),
        f_pix_(tok.f_pix) {
    validate(cfg_);
    Rng rng(seed);
    null_sem_ = &store_.add("null_sem", {1, dim_});
    null_pix_ = &store_.add("null_pix", {1, dim_});
    time_embed_ = &store_.add("time_embed", {cfg_.timesteps, cfg_.width});
    fill_normal(time_embed_->value, rng, 0.02);

    const idx cin = 3 + 2 * dim_;
    stem_ = Conv2dBlock<S>(store_, "unet.stem", cin, cfg_.width, 3, rng, {1, 1});
    for (idx l = 1; l < cfg_.depth; ++l) {
      idx c_in = level_ch(l - 1), c_out = level_ch(l);
      down_.emplace_back(store_, "unet.down" + std::to_string(l), c_in, c_out,
                         3, rng, Conv2dSpec{2, 1});
      down_res_.emplace_back(store_, "unet.dres" + std::to_string(l), c_out,
                             c_out, std::gcd<idx>(8, c_out), rng);
    }
    mid_ = ResnetBlock<S>(store_, "unet.mid", level_ch(cfg_.depth - 1),
                          level_ch(cfg_.depth - 1),
                          std::gcd<idx>(8, level_ch(cfg_.depth - 1)), rng);
    for (idx l = cfg_.depth - 1; l >= 1; --l) {
      idx c_hi = level_ch(l), c_lo = level_ch(l - 1);
      up_.emplace_back(store_, "unet.up" + std::to_string(l), c_hi, c_lo, 3,
                       rng, Conv2dSpec{1, 1});
      merge_.emplace_back(store_, "unet.merge" + std::to_string(l), 2 * c_lo,
                          c_lo, 3, rng, Conv2dSpec{1, 1});
      up_res_.emplace_back(store_, "unet.ures" + std::to_string(l), c_lo, c_lo,
                           std::gcd<idx>(8, c_lo), rng);
    }
    out_gn_ = GroupNormBlock<S>(store_, "unet.out_gn", cfg_.width,
                                std::gcd<idx>(8, cfg_.width));
    out_ = Conv2dBlock<S>(store_, "unet.out", cfg_.width, 3, 3, rng, {1, 1});
  }

  const DiffusionConfig& config() const { return cfg_; }
  const Schedule& schedule() const { return sched_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

  // Codebook lookups for one source image's grids, nulls applied, assembled
  // as a {1, ph, pw, 2D} map (semantic rows nearest-upsampled to the pixel
  // grid, channel-concatenated).
  Var<S> cond_embed(const dualvitok::DualViTok<S>& tok,
                    const MaskedCond& c) const {
    if (!tok.has_sem() || !tok.has_pix())
      throw DomainError("cond_embed: tokenizer must carry both branches");
    const idx sh = c.sem_ids.rows(), sw = c.sem_ids.cols();
    const idx ph = c.pix_ids.rows(), pw = c.pix_ids.cols();
    if (sh < 1 || sw < 1 || ph < 1 || pw < 1)
      throw DomainError("cond_embed: empty grid");
    if (sh * f_sem_ != ph * f_pix_ || sw * f_sem_ != pw * f_pix_)
      throw DomainError("cond_embed: grids disagree on the source resolution");
    if (ph % sh != 0 || pw % sw != 0 || ph / sh != pw / sw)
      throw DomainError("cond_embed: semantic grid does not upsample integrally");

    Var<S> sem_rows = c.sem_nulled
                          ? tile_rows(use(*null_sem_), sh * sw)
                          : lookup(tok.codebook_sem().effective_values(),
                                   c.sem_ids, "semantic");
    Var<S> pix_rows = c.pix_nulled
                          ? tile_rows(use(*null_pix_), ph * pw)
                          : lookup(tok.codebook_pix().effective_values(),
                                   c.pix_ids, "pixel");
    Var<S> sem_up =
        upsample_nearest(reshape(sem_rows, {1, sh, sw, dim_}), ph / sh);
    return reshape(concat_cols(sem_up, pix_rows), {1, ph, pw, 2 * dim_});
  }

  Var<S> cond_embed(const dualvitok::DualViTok<S>& tok, const IGrid& sem_ids,
                    const IGrid& pix_ids) const {
    return cond_embed(tok, MaskedCond{sem_ids, pix_ids, false, false});
  }

  // Noise prediction for one noisy image given its conditioning map.
  Var<S> forward_eps(const Var<S>& x_t, idx t, const Var<S>& cond) const {
    const auto& xd = x_t.value().dims();
    if (x_t.value().ndim() != 4 || xd[0] != 1 || xd[3] != 3)
      throw DomainError("forward_eps: expected a {1,H,W,3} image");
    if (t < 0 || t >= cfg_.timesteps)
      throw DomainError("forward_eps: timestep out of range");
    const idx h = xd[1], w = xd[2];
    const auto& cd = cond.value().dims();
    const idx r = cfg_.upscale * f_pix_;
    if (cond.value().ndim() != 4 || cd[1] * r != h || cd[2] * r != w ||
        cd[3] != 2 * dim_)
      throw DomainError("forward_eps: conditioning does not match the image");
    const idx div = idx{1} << (cfg_.depth - 1);
    if (h % div != 0 || w % div != 0)
      throw DomainError("forward_eps: dims must be divisible by 2^(depth-1)");

    Var<S> in = reshape(concat_cols(x_t, upsample_nearest(cond, r)),
                        {1, h, w, 3 + 2 * dim_});
    Var<S> x = add(reshape(stem_(in), {h * w, cfg_.width}),
                   tile_rows(time_row(t), h * w));
    x = reshape(x, {1, h, w, cfg_.width});

    std::vector<Var<S>> skips;
    for (std::size_t l = 0; l < down_.size(); ++l) {
      skips.push_back(x);
      x = down_res_[l](down_[l](x));
    }
    x = mid_(x);
    for (std::size_t i = 0; i < up_.size(); ++i) {
      Var<S> hi = up_[i](upsample_nearest(x, 2));
      const Var<S>& skip = skips[skips.size() - 1 - i];
      const auto& hd = hi.value().dims();
      x = merge_[i](
          reshape(concat_cols(hi, skip), {1, hd[1], hd[2], 2 * hd[3]}));
      x = up_res_[i](x);
    }
    return out_(silu(out_gn_(x)));
  }

  // One optimizer step of the denoising objective on a batch of 2x-resolution
  // targets; the token source is the 2x-downsampled batch run through the
  // frozen tokenizer. Per sample the rng is consumed in a fixed order:
  // condition corruption, timestep, noise.
  double train_step(const Tensor<S>& images, const dualvitok::DualViTok<S>& tok,
                    const CondMaskSpec& spec, Adam<S>& opt, Rng& rng) {
    if (images.ndim() != 4 || images.dim(3) != 3 || images.dim(0) < 1)
      throw DomainError("train_step: expected a {N,H,W,3} batch");
    const idx n = images.dim(0), h = images.dim(1), w = images.dim(2);
    if (h % 2 != 0 || w % 2 != 0)
      throw DomainError("train_step: image dims must be even");
    Tensor<S> src = avg_pool_nhwc(images, 2);
    auto enc = tok.encode(src);

    const idx k_sem = tok.config().k_sem, k_pix = tok.config().k_pix;
    Var<S> acc;
    for (idx i = 0; i < n; ++i) {
      MaskedCond mc =
          mask_condition(enc.sem_indices[static_cast<std::size_t>(i)],
                         enc.pix_indices[static_cast<std::size_t>(i)], spec,
                         k_sem, k_pix, rng);
      Var<S> cond = cond_embed(tok, mc);
      idx t = rng.uniform_int(cfg_.timesteps);
      Tensor<S> eps = Tensor<S>::randn({1, h, w, 3}, rng);
      Tensor<S> xt({1, h, w, 3});
      const S sa = static_cast<S>(std::sqrt(sched_.abar[static_cast<std::size_t>(t)]));
      const S sn = static_cast<S>(std::sqrt(1.0 - sched_.abar[static_cast<std::size_t>(t)]));
      xt.mat(h * w, 3) =
          sa * (S(2) * images.mat(n * h * w, 3).middleRows(i * h * w, h * w).array() - S(1)).matrix() +
          sn * eps.mat(h * w, 3);
      Var<S> loss_i = mse_loss(forward_eps(Var<S>::constant(xt), t, cond),
                               Var<S>::constant(eps));
      acc = i == 0 ? loss_i : add(acc, loss_i);
    }
    Var<S> loss = scale(acc, S(1) / static_cast<S>(n));
    if (!loss.value().all_finite())
      throw DomainError("train_step: non-finite loss");
    store_.zero_grad();
    loss.backward();
    opt.step(store_);
    store_.zero_grad();
    return static_cast<double>(loss.item());
  }

  // Ancestral DDPM sampling from pure noise; output is {1, 2*ph*f_pix,
  // 2*pw*f_pix, 3} in [0,1], bitwise determined by the seed.
  Tensor<S> sample(const dualvitok::DualViTok<S>& tok, const MaskedCond& mc,
                   std::uint64_t seed) const {
    NoGradGuard ng;
    Var<S> cond = cond_embed(tok, mc);
    const idx h = mc.pix_ids.rows() * f_pix_ * cfg_.upscale;
    const idx w = mc.pix_ids.cols() * f_pix_ * cfg_.upscale;
    Rng rng(seed);
    Tensor<S> x = Tensor<S>::randn({1, h, w, 3}, rng);
    for (idx t = cfg_.timesteps - 1; t >= 0; --t) {
      Tensor<S> eps_hat = forward_eps(Var<S>::constant(x), t, cond).value();
      const auto st = static_cast<std::size_t>(t);
      const S a = static_cast<S>(sched_.alpha[st]);
      const S b = static_cast<S>(sched_.beta[st]);
      const S ab = static_cast<S>(sched_.abar[st]);
      x.array() = (x.array() - b / std::sqrt(S(1) - ab) * eps_hat.array()) /
                  std::sqrt(a);
      if (t > 0) {
        const S ab_prev = static_cast<S>(sched_.abar[st - 1]);
        const S sigma = std::sqrt(b * (S(1) - ab_prev) / (S(1) - ab));
        Tensor<S> z = Tensor<S>::randn({1, h, w, 3}, rng);
        x.array() += sigma * z.array();
      }
    }
    x.array() = (x.array() + S(1)) * S(0.5);
    return clamp01(x);
  }

  Tensor<S> sample(const dualvitok::DualViTok<S>& tok, const IGrid& sem_ids,
                   const IGrid& pix_ids, std::uint64_t seed) const {
    return sample(tok, MaskedCond{sem_ids, pix_ids, false, false}, seed);
  }

 private:
  idx level_ch(idx l) const { return cfg_.width << l; }

  Var<S> time_row(idx t) const {
    return gather_rows(use(*time_embed_), {t});
  }

  // {1, D} row replicated to {rows, D}; grads sum back into the row.
  static Var<S> tile_rows(const Var<S>& row, idx rows) {
    return matmul(Var<S>::constant(Tensor<S>::full({rows, 1}, S(1))), row);
  }

  static Var<S> lookup(const Tensor<S>& table, const IGrid& ids,
                       const char* which) {
    std::vector<idx> flat(static_cast<std::size_t>(ids.size()));
    for (idx i = 0; i < ids.size(); ++i) {
      idx v = ids.data()[i];
      if (v < 0 || v >= table.dim(0))
        throw DomainError(std::string("cond_embed: ") + which +
                          " id out of range");
      flat[static_cast<std::size_t>(i)] = v;
    }
    return gather_rows(Var<S>::constant(table), std::move(flat));
  }

  DiffusionConfig cfg_;
  Schedule sched_;
  idx dim_, f_sem_, f_pix_;
  ParamStore<S> store_;
  Parameter<S>* null_sem_ = nullptr;
  Parameter<S>* null_pix_ = nullptr;
  Parameter<S>* time_embed_ = nullptr;
  Conv2dBlock<S> stem_, out_;
  GroupNormBlock<S> out_gn_;
  std::vector<Conv2dBlock<S>> down_, up_, merge_;
  std::vector<ResnetBlock<S>> down_res_, up_res_;
  ResnetBlock<S> mid_;
};

}  // namespace illume::diffusion
