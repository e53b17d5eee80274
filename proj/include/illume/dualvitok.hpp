#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "illume/nn.hpp"
#include "illume/ops.hpp"
#include "illume/optim.hpp"
#include "illume/vq.hpp"

namespace illume::dualvitok {

enum class NoiseKind { none, random, zero };

inline const char* noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::none: return "none";
    case NoiseKind::random: return "random";
    case NoiseKind::zero: return "zero";
  }
  return "unknown";
}

inline NoiseKind noise_kind_from(const std::string& s) {
  if (s == "none") return NoiseKind::none;
  if (s == "random") return NoiseKind::random;
  if (s == "zero") return NoiseKind::zero;
  throw DomainError("unknown noise kind: " + s);
}

// alpha gates whole grids, beta replaces tokens inside a gated grid.
struct NoiseSpec {
  NoiseKind kind = NoiseKind::none;
  double alpha = 0.0;
  double beta = 0.0;
};

inline void validate(const NoiseSpec& s) {
  if (s.alpha < 0.0 || s.alpha > 1.0 || s.beta < 0.0 || s.beta > 1.0)
    throw DomainError("NoiseSpec: probabilities must lie in [0,1]");
}

// With probability alpha the grid is perturbed: each token independently
// with probability beta becomes a uniform draw from [0,k) (random) or the
// id 0 (zero). Otherwise the grid passes through unchanged.
inline IGrid inject_noise(const IGrid& indices, const NoiseSpec& spec, idx k,
                          Rng& rng) {
  validate(spec);
  for (idx i = 0; i < indices.size(); ++i) {
    auto v = indices.data()[i];
    if (v < 0 || v >= k) throw DomainError("inject_noise: index out of range");
  }
  if (spec.kind == NoiseKind::none || !rng.bernoulli(spec.alpha))
    return indices;
  IGrid out = indices;
  for (idx i = 0; i < out.size(); ++i) {
    if (!rng.bernoulli(spec.beta)) continue;
    out.data()[i] = spec.kind == NoiseKind::zero
                        ? 0
                        : static_cast<std::int32_t>(rng.uniform_int(k));
  }
  return out;
}

enum class Branch { dual, semantic_only, pixel_only };

inline const char* branch_name(Branch b) {
  switch (b) {
    case Branch::dual: return "dual";
    case Branch::semantic_only: return "semantic";
    case Branch::pixel_only: return "pixel";
  }
  return "unknown";
}

inline Branch branch_from(const std::string& s) {
  if (s == "dual") return Branch::dual;
  if (s == "semantic") return Branch::semantic_only;
  if (s == "pixel") return Branch::pixel_only;
  throw DomainError("unknown branch: " + s);
}

struct TokenizerConfig {
  idx f_sem = 8;   // semantic backbone downsample factor
  idx f_pix = 4;   // pixel codec downsample factor (power of two)
  idx k_sem = 1024;
  idx k_pix = 4096;
  idx dim = 32;    // codebook and feature width D, shared by both branches
  idx width = 32;  // conv channel width
  idx heads = 4;
  idx backbone_blocks = 2;
  idx sem_dec_blocks = 2;
  bool dc_block = true;
  vq::QuantizerKind quantizer = vq::QuantizerKind::simvq;
  Branch branch = Branch::dual;
  NoiseSpec noise;
  bool noise_sem = true;  // which token grids the injection touches
  bool noise_pix = true;
  double commitment_weight = 0.25;
  double w_cos = 1.0, w_l1 = 1.0, w_p = 0.5, w_g = 0.1;

  idx divisor() const { return std::lcm(f_sem, f_pix); }
  std::uint64_t hash() const;
};

inline void validate(const TokenizerConfig& c) {
  if (c.f_sem < 1 || c.f_pix < 1 || c.k_sem < 1 || c.k_pix < 1 ||
      c.dim < 1 || c.width < 1 || c.backbone_blocks < 1 ||
      c.sem_dec_blocks < 1)
    throw DomainError("TokenizerConfig: sizes must be positive");
  if ((c.f_pix & (c.f_pix - 1)) != 0)
    throw DomainError("TokenizerConfig: f_pix must be a power of two");
  if (c.dim % c.heads != 0 || (c.dim / c.heads) % 4 != 0)
    throw DomainError("TokenizerConfig: head dim must be a multiple of 4");
  if (c.commitment_weight < 0.0)
    throw DomainError("TokenizerConfig: negative commitment weight");
  validate(c.noise);
}

inline std::uint64_t TokenizerConfig::hash() const {
  std::ostringstream os;
  os.precision(17);
  os << f_sem << ';' << f_pix << ';' << k_sem << ';' << k_pix << ';' << dim
     << ';' << width << ';' << heads << ';' << backbone_blocks << ';'
     << sem_dec_blocks << ';' << dc_block << ';' << vq::kind_name(quantizer)
     << ';' << branch_name(branch) << ';' << noise_kind_name(noise.kind)
     << ';' << noise.alpha << ';' << noise.beta << ';' << noise_sem << ';'
     << noise_pix << ';' << commitment_weight << ';' << w_cos << ';' << w_l1
     << ';' << w_p << ';' << w_g;
  return fnv1a64(os.str());
}

template <typename S>
struct TokenizerOutput {
  std::vector<IGrid> sem_indices;  // one (H/f_s)x(W/f_s) grid per sample
  std::vector<IGrid> pix_indices;  // one (H/f_p)x(W/f_p) grid per sample
  Tensor<S> sem_features;          // pre-quantization, {N,hs,ws,D}
  Tensor<S> pix_features;          // pre-quantization, {N,hp,wp,D}
};

// total is the documented reconstruction objective
//   w_cos*cosine_sem + w_l1*l1_pix + w_p*perceptual + w_g*gan_g;
// the quantizer terms (vq_sem/vq_pix, commitment already weighted in) are
// reported separately and added to the optimized scalar, and gan_d belongs
// to the discriminator's own step.
struct LossReport {
  double cosine_sem = 0, l1_pix = 0, perceptual = 0;
  double gan_g = 0, gan_d = 0;
  double vq_sem = 0, vq_pix = 0;
  double total = 0;
  bool diverged = false;
};

// mean over positions of (1 - cosine similarity); zero-norm rows count as
// similarity 0 and bump the counter.
template <typename S>
Var<S> semantic_loss(const Var<S>& recon, const Var<S>& target,
                     long* zero_norm_counter = nullptr) {
  return cosine_loss(recon, target, zero_norm_counter);
}

namespace detail {

// Transformer blocks over a flattened h*w token grid, 2-D rotary positions.
template <typename S>
class GridAttentionStack {
 public:
  GridAttentionStack() = default;
  GridAttentionStack(ParamStore<S>& ps, const std::string& prefix, idx dim,
                     idx heads, idx n_blocks, Rng& rng)
      : heads_(heads) {
    for (idx i = 0; i < n_blocks; ++i)
      blocks_.emplace_back(ps, prefix + ".blk" + std::to_string(i), dim,
                           heads, rng);
  }

  // rows: {n*h*w, D}; mid (optional) receives the first block's output.
  Var<S> forward(const Var<S>& rows, idx n, idx h, idx w,
                 Var<S>* mid = nullptr) const {
    std::vector<idx> rpos(static_cast<std::size_t>(h * w));
    std::vector<idx> cpos(static_cast<std::size_t>(h * w));
    for (idx i = 0; i < h * w; ++i) {
      rpos[static_cast<std::size_t>(i)] = i / w;
      cpos[static_cast<std::size_t>(i)] = i % w;
    }
    auto hook = [&](Var<S> q) { return rope2d(q, rpos, cpos, heads_); };
    Var<S> t = rows;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& blk = blocks_[b];
      t = map_row_blocks(t, n, h * w,
                         [&](Var<S> s) { return blk(s, false, hook); });
      if (b == 0 && mid) *mid = t;
    }
    return t;
  }

 private:
  std::vector<TransformerBlock<S>> blocks_;
  idx heads_ = 1;
};

}  // namespace detail

// Frozen stand-in for a pre-trained text-aligned encoder: patch embedding
// plus a small attention stack, initialized from a fixed seed so every run
// and every ablation variant shares the same encoder, then locked.
template <typename S>
class SemanticBackbone {
 public:
  struct Out {
    Var<S> features;  // {n,hs,ws,D}
    Var<S> mid;       // {n*hs*ws, D}, first block's output (perceptual tap)
    idx n = 0, hs = 0, ws = 0;
  };

  SemanticBackbone() = default;
  SemanticBackbone(ParamStore<S>& ps, const std::string& prefix,
                   const TokenizerConfig& cfg)
      : f_(cfg.f_sem), dim_(cfg.dim) {
    Rng rng(0x5eedbacb);
    patch_ = Conv2dBlock<S>(ps, prefix + ".patch", 3, cfg.dim, cfg.f_sem, rng,
                            {cfg.f_sem, 0});
    stack_ = detail::GridAttentionStack<S>(ps, prefix + ".enc", cfg.dim,
                                           cfg.heads, cfg.backbone_blocks,
                                           rng);
    ln_ = LayerNormBlock<S>(ps, prefix + ".ln", cfg.dim);
    ps.lock_prefix(prefix);
  }

  Out forward(const Var<S>& images) const {
    const auto& v = images.value();
    if (v.ndim() != 4 || v.dim(3) != 3)
      throw DomainError("backbone: expected {N,H,W,3}");
    if (v.dim(1) % f_ != 0 || v.dim(2) % f_ != 0)
      throw DomainError("backbone: dims must be divisible by " +
                        std::to_string(f_));
    Out out;
    out.n = v.dim(0);
    out.hs = v.dim(1) / f_;
    out.ws = v.dim(2) / f_;
    Var<S> t = patch_(images);
    t = stack_.forward(t, out.n, out.hs, out.ws, &out.mid);
    out.features = reshape(ln_(t), {out.n, out.hs, out.ws, dim_});
    return out;
  }

  idx factor() const { return f_; }

 private:
  idx f_ = 8, dim_ = 32;
  Conv2dBlock<S> patch_;
  detail::GridAttentionStack<S> stack_;
  LayerNormBlock<S> ln_;
};

// Reconstructs backbone features from quantized semantic tokens.
template <typename S>
class SemanticDecoder {
 public:
  SemanticDecoder() = default;
  SemanticDecoder(ParamStore<S>& ps, const std::string& prefix,
                  const TokenizerConfig& cfg, Rng& rng)
      : stack_(ps, prefix + ".dec", cfg.dim, cfg.heads, cfg.sem_dec_blocks,
               rng),
        ln_(ps, prefix + ".ln", cfg.dim),
        head_(ps, prefix + ".head", cfg.dim, cfg.dim, rng) {}

  Var<S> forward(const Var<S>& rows, idx n, idx hs, idx ws) const {
    return head_(ln_(stack_.forward(rows, n, hs, ws)));
  }

 private:
  detail::GridAttentionStack<S> stack_;
  LayerNormBlock<S> ln_;
  Linear<S> head_;
};

// Conv trunk downsampling by f_pix via a chain of 2x stages; with dc_block
// each stage packs space into channels instead of striding.
template <typename S>
class PixelEncoder {
 public:
  PixelEncoder() = default;
  PixelEncoder(ParamStore<S>& ps, const std::string& prefix,
               const TokenizerConfig& cfg, Rng& rng)
      : dc_(cfg.dc_block) {
    const idx c = cfg.width;
    const idx g = std::gcd<idx>(8, c);
    stem_ = Conv2dBlock<S>(ps, prefix + ".stem", 3, c, 3, rng, {1, 1});
    for (idx f = cfg.f_pix; f > 1; f /= 2) {
      auto tag = std::to_string(down_.size());
      if (dc_)
        down_.emplace_back(ps, prefix + ".down" + tag, 4 * c, c, 3, rng,
                           Conv2dSpec{1, 1});
      else
        down_.emplace_back(ps, prefix + ".down" + tag, c, c, 3, rng,
                           Conv2dSpec{2, 1});
      res_.emplace_back(ps, prefix + ".res" + tag, c, c, g, rng);
    }
    gn_ = GroupNormBlock<S>(ps, prefix + ".gn", c, g);
    out_ = Conv2dBlock<S>(ps, prefix + ".out", c, cfg.dim, 3, rng, {1, 1});
  }

  Var<S> forward(const Var<S>& images) const {
    Var<S> x = stem_(images);
    for (std::size_t s = 0; s < down_.size(); ++s) {
      x = dc_ ? down_[s](space_to_channel(x, 2)) : down_[s](x);
      x = res_[s](x);
    }
    return out_(silu(gn_(x)));
  }

 private:
  bool dc_ = true;
  Conv2dBlock<S> stem_, out_;
  GroupNormBlock<S> gn_;
  std::vector<Conv2dBlock<S>> down_;
  std::vector<ResnetBlock<S>> res_;
};

// Decodes the fused (or single-branch) token grid back to an image in
// [0,1]; mirrors the encoder's 2x stages upward.
template <typename S>
class FusionDecoder {
 public:
  FusionDecoder() = default;
  FusionDecoder(ParamStore<S>& ps, const std::string& prefix, idx in_channels,
                const TokenizerConfig& cfg, Rng& rng)
      : dc_(cfg.dc_block) {
    const idx c = cfg.width;
    const idx g = std::gcd<idx>(8, c);
    stem_ = Conv2dBlock<S>(ps, prefix + ".stem", in_channels, c, 3, rng,
                           {1, 1});
    res_in_ = ResnetBlock<S>(ps, prefix + ".res_in", c, c, g, rng);
    for (idx f = cfg.f_pix; f > 1; f /= 2) {
      auto tag = std::to_string(up_.size());
      if (dc_)
        up_.emplace_back(ps, prefix + ".up" + tag, c, 4 * c, 3, rng,
                         Conv2dSpec{1, 1});
      else
        up_.emplace_back(ps, prefix + ".up" + tag, c, c, 3, rng,
                         Conv2dSpec{1, 1});
      res_.emplace_back(ps, prefix + ".res" + tag, c, c, g, rng);
    }
    gn_ = GroupNormBlock<S>(ps, prefix + ".gn", c, g);
    to_rgb_ = Conv2dBlock<S>(ps, prefix + ".to_rgb", c, 3, 3, rng, {1, 1});
  }

  Var<S> forward(const Var<S>& grid) const {
    Var<S> x = res_in_(stem_(grid));
    for (std::size_t s = 0; s < up_.size(); ++s) {
      x = dc_ ? channel_to_space(up_[s](x), 2) : up_[s](upsample_nearest(x, 2));
      x = res_[s](x);
    }
    return sigmoid_fn(to_rgb_(silu(gn_(x))));
  }

 private:
  bool dc_ = true;
  Conv2dBlock<S> stem_, to_rgb_;
  ResnetBlock<S> res_in_;
  GroupNormBlock<S> gn_;
  std::vector<Conv2dBlock<S>> up_;
  std::vector<ResnetBlock<S>> res_;
};

// Patch discriminator, hinge objective; enabled in the final third of
// tokenizer training only.
template <typename S>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(ParamStore<S>& ps, const std::string& prefix,
                const TokenizerConfig& cfg, Rng& rng)
      : c1_(ps, prefix + ".c1", 3, cfg.width, 3, rng, {2, 1}),
        c2_(ps, prefix + ".c2", cfg.width, 2 * cfg.width, 3, rng, {2, 1}),
        c3_(ps, prefix + ".c3", 2 * cfg.width, 1, 3, rng, {1, 1}) {}

  Var<S> forward(const Var<S>& images) const {
    return c3_(silu(c2_(silu(c1_(images)))));
  }

 private:
  Conv2dBlock<S> c1_, c2_, c3_;
};

// The dual-branch tokenizer: frozen semantic backbone feeding a quantizer
// and a feature decoder, a pixel codec, and a fusion decoder concatenating
// both branches along channels.
template <typename S>
class DualViTok {
 public:
  // Graph handles for one batch; the generator step minimizes `objective`.
  struct LossVars {
    Var<S> cosine_sem, l1_pix, perceptual, gan_g, vq_sem, vq_pix;
    Var<S> objective;
    Var<S> recon;  // {n,H,W,3}
    bool gan_active = false;
  };

  explicit DualViTok(TokenizerConfig cfg, std::uint64_t seed = 0)
      : cfg_(cfg) {
    validate(cfg_);
    Rng rng(seed);
    backbone_ = SemanticBackbone<S>(store_, "semantic_backbone", cfg_);
    if (has_sem()) {
      cb_sem_ = vq::Codebook<S>(store_, "codebook_sem", cfg_.quantizer,
                                cfg_.k_sem, cfg_.dim, rng);
      sem_dec_ = SemanticDecoder<S>(store_, "semantic_decoder", cfg_, rng);
    }
    if (has_pix()) {
      pix_enc_ = PixelEncoder<S>(store_, "pixel_encoder", cfg_, rng);
      cb_pix_ = vq::Codebook<S>(store_, "codebook_pix", cfg_.quantizer,
                                cfg_.k_pix, cfg_.dim, rng);
    }
    const idx in_ch = cfg_.branch == Branch::dual ? 2 * cfg_.dim : cfg_.dim;
    dec_ = FusionDecoder<S>(store_, "pixel_decoder", in_ch, cfg_, rng);
    disc_ = Discriminator<S>(store_, "discriminator", cfg_, rng);
  }

  const TokenizerConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }
  bool has_sem() const { return cfg_.branch != Branch::pixel_only; }
  bool has_pix() const { return cfg_.branch != Branch::semantic_only; }
  long zero_norm_count() const { return zero_norm_count_; }

  const vq::Codebook<S>& codebook_sem() const {
    if (!has_sem()) throw DomainError("codebook_sem: no semantic branch");
    return cb_sem_;
  }
  const vq::Codebook<S>& codebook_pix() const {
    if (!has_pix()) throw DomainError("codebook_pix: no pixel branch");
    return cb_pix_;
  }

  TokenizerOutput<S> encode(const Tensor<S>& images) const {
    NoGradGuard ng;
    Tensor<S> x4 = as_nhwc(images);
    check_divisible(x4);
    const idx n = x4.dim(0);
    TokenizerOutput<S> out;
    Var<S> x = Var<S>::constant(x4);
    if (has_sem()) {
      auto bo = backbone_.forward(x);
      out.sem_features = bo.features.value();
      quantize_batch(cb_sem_, bo.features, n, bo.hs, bo.ws, out.sem_indices);
    }
    if (has_pix()) {
      Var<S> pf = pix_enc_.forward(x);
      out.pix_features = pf.value();
      quantize_batch(cb_pix_, pf, n, pf.value().dim(1), pf.value().dim(2),
                     out.pix_indices);
    }
    return out;
  }

  Tensor<S> decode(const std::vector<IGrid>& sem_indices,
                   const std::vector<IGrid>& pix_indices) const {
    NoGradGuard ng;
    idx n = 0, hs = 0, ws = 0, hp = 0, wp = 0;
    decode_dims(sem_indices, pix_indices, n, hs, ws, hp, wp);
    Var<S> sem_rows, pix_rows;
    if (has_sem())
      sem_rows = gather_rows(cb_sem_.effective(),
                             flatten_ids(sem_indices, cfg_.k_sem, "semantic"));
    if (has_pix())
      pix_rows = gather_rows(cb_pix_.effective(),
                             flatten_ids(pix_indices, cfg_.k_pix, "pixel"));
    return decode_graph(sem_rows, pix_rows, n, hs, ws, hp, wp).value();
  }

  Tensor<S> reconstruct(const Tensor<S>& images) const {
    TokenizerOutput<S> t = encode(images);
    return decode(t.sem_indices, t.pix_indices);
  }

  // Backbone features for an image batch (target side of the semantic
  // metrics), {n,hs,ws,D}.
  Tensor<S> backbone_features(const Tensor<S>& images) const {
    NoGradGuard ng;
    return backbone_.forward(Var<S>::constant(as_nhwc(images)))
        .features.value();
  }

  // Semantic-decoder features reconstructed from token grids, {n*hs*ws,D}.
  Tensor<S> decode_sem_features(const std::vector<IGrid>& sem_indices) const {
    if (!has_sem())
      throw DomainError("decode_sem_features: no semantic branch");
    NoGradGuard ng;
    if (sem_indices.empty()) throw DomainError("decode_sem_features: empty");
    const idx n = static_cast<idx>(sem_indices.size());
    const idx hs = sem_indices[0].rows(), ws = sem_indices[0].cols();
    Var<S> rows = gather_rows(cb_sem_.effective(),
                              flatten_ids(sem_indices, cfg_.k_sem, "semantic"));
    return sem_dec_.forward(rows, n, hs, ws).value();
  }

  // Builds the full training graph for one batch. The rng drives noise
  // injection only; pass an identically seeded rng to replay a step.
  LossVars build_losses(const Tensor<S>& images, Rng& rng,
                        bool gan_active) const {
    Tensor<S> x4 = as_nhwc(images);
    check_divisible(x4);
    const idx n = x4.dim(0), h = x4.dim(1), w = x4.dim(2);
    const idx hs = h / cfg_.f_sem, ws = w / cfg_.f_sem;
    const idx hp = h / cfg_.f_pix, wp = w / cfg_.f_pix;
    Var<S> x = Var<S>::constant(x4);

    LossVars lv;
    lv.gan_active = gan_active;
    Var<S> zero = Var<S>::constant(Tensor<S>::zeros({1}));
    lv.cosine_sem = lv.gan_g = lv.vq_sem = lv.vq_pix = zero;

    // frozen targets; also reused as the semantic branch's encoder output
    Tensor<S> tgt_feat, tgt_mid;
    {
      NoGradGuard ng;
      auto bo = backbone_.forward(Var<S>::constant(x4));
      tgt_feat = bo.features.value();
      tgt_mid = bo.mid.value();
    }

    Var<S> sem_st, pix_st;
    if (has_sem()) {
      Var<S> feats = Var<S>::constant(tgt_feat);
      std::vector<IGrid> ids;
      lv.vq_sem = quantize_st(cb_sem_, feats, n, hs, ws, cfg_.k_sem,
                              cfg_.noise_sem, rng, ids, sem_st);
      Var<S> rec = sem_dec_.forward(sem_st, n, hs, ws);
      lv.cosine_sem = semantic_loss(
          rec, Var<S>::constant(tgt_feat.reshaped({n * hs * ws, cfg_.dim})),
          &zero_norm_count_);
    }
    if (has_pix()) {
      Var<S> pf = pix_enc_.forward(x);
      std::vector<IGrid> ids;
      lv.vq_pix = quantize_st(cb_pix_, pf, n, hp, wp, cfg_.k_pix,
                              cfg_.noise_pix, rng, ids, pix_st);
    }

    lv.recon = decode_graph(sem_st, pix_st, n, hs, ws, hp, wp);
    lv.l1_pix = l1_loss(lv.recon, x);
    auto bo_r = backbone_.forward(lv.recon);
    lv.perceptual = mse_loss(bo_r.mid, Var<S>::constant(tgt_mid));
    if (gan_active) {
      Var<S> logits = disc_.forward(lv.recon);
      lv.gan_g = mean_all(relu(add_scalar(neg(logits), S(1))));
    }

    lv.objective = add(
        add(add(scale(lv.cosine_sem, static_cast<S>(cfg_.w_cos)),
                scale(lv.l1_pix, static_cast<S>(cfg_.w_l1))),
            add(scale(lv.perceptual, static_cast<S>(cfg_.w_p)),
                scale(lv.gan_g, static_cast<S>(cfg_.w_g)))),
        add(lv.vq_sem, lv.vq_pix));
    return lv;
  }

  // One generator step (and a discriminator step once the GAN is active).
  LossReport train_step(const Tensor<S>& images, Adam<S>& gen_opt,
                        Adam<S>& disc_opt, Rng& rng, idx step,
                        idx total_steps) {
    const bool gan_active = total_steps > 0 && 3 * step >= 2 * total_steps;
    LossVars lv = build_losses(images, rng, gan_active);

    LossReport rep;
    rep.cosine_sem = static_cast<double>(lv.cosine_sem.value()[0]);
    rep.l1_pix = static_cast<double>(lv.l1_pix.value()[0]);
    rep.perceptual = static_cast<double>(lv.perceptual.value()[0]);
    rep.gan_g = static_cast<double>(lv.gan_g.value()[0]);
    rep.vq_sem = static_cast<double>(lv.vq_sem.value()[0]);
    rep.vq_pix = static_cast<double>(lv.vq_pix.value()[0]);
    rep.total = cfg_.w_cos * rep.cosine_sem + cfg_.w_l1 * rep.l1_pix +
                cfg_.w_p * rep.perceptual + cfg_.w_g * rep.gan_g;
    if (!std::isfinite(static_cast<double>(lv.objective.value()[0]))) {
      rep.diverged = true;
      store_.zero_grad();
      return rep;
    }

    store_.zero_grad();
    lv.objective.backward();
    gen_opt.step(store_, [](const std::string& name) {
      return name.rfind("discriminator.", 0) != 0;
    });

    if (gan_active) {
      store_.zero_grad();
      Var<S> real = disc_.forward(Var<S>::constant(as_nhwc(images)));
      Var<S> fake = disc_.forward(Var<S>::constant(lv.recon.value()));
      Var<S> d = add(mean_all(relu(add_scalar(neg(real), S(1)))),
                     mean_all(relu(add_scalar(fake, S(1)))));
      rep.gan_d = static_cast<double>(d.value()[0]);
      if (std::isfinite(rep.gan_d)) {
        d.backward();
        disc_opt.step(store_, [](const std::string& name) {
          return name.rfind("discriminator.", 0) == 0;
        });
      } else {
        rep.diverged = true;
      }
    }
    store_.zero_grad();
    return rep;
  }

 private:
  static Tensor<S> as_nhwc(const Tensor<S>& images) {
    if (images.ndim() == 3 && images.dim(2) == 3)
      return images.reshaped({1, images.dim(0), images.dim(1), 3});
    if (images.ndim() == 4 && images.dim(3) == 3) return images;
    throw DomainError("expected {H,W,3} or {N,H,W,3}, got " +
                      images.shape_str());
  }

  void check_divisible(const Tensor<S>& x4) const {
    const idx d = cfg_.divisor();
    if (x4.dim(1) % d != 0 || x4.dim(2) % d != 0)
      throw DomainError("dims must be divisible by " + std::to_string(d));
  }

  static std::vector<idx> flatten_ids(const std::vector<IGrid>& grids, idx k,
                                      const char* what) {
    if (grids.empty())
      throw DomainError(std::string(what) + ": no token grids");
    std::vector<idx> flat;
    flat.reserve(grids.size() * static_cast<std::size_t>(grids[0].size()));
    for (const IGrid& g : grids) {
      if (g.rows() != grids[0].rows() || g.cols() != grids[0].cols())
        throw DomainError(std::string(what) + ": ragged token grids");
      for (idx i = 0; i < g.size(); ++i) {
        idx v = g.data()[i];
        if (v < 0 || v >= k)
          throw DomainError(std::string(what) + ": index out of range");
        flat.push_back(v);
      }
    }
    return flat;
  }

  // Quantizes each sample, optionally injects noise into the decoder-bound
  // ids, and assembles the straight-through rows; returns the averaged
  // quantizer loss (codebook + weighted commitment).
  Var<S> quantize_st(const vq::Codebook<S>& cb, const Var<S>& features,
                     idx n, idx h, idx w, idx k, bool noise_here, Rng& rng,
                     std::vector<IGrid>& ids_out, Var<S>& st_out) const {
    const idx hw = h * w;
    Var<S> loss_acc;
    for (idx i = 0; i < n; ++i) {
      Var<S> f_slice = slice_rows(features, i * hw, hw);
      auto qr = vq::quantize_grid(cb, reshape(f_slice, {h, w, cfg_.dim}));
      IGrid ids = qr.indices;
      if (noise_here && cfg_.noise.kind != NoiseKind::none)
        ids = inject_noise(ids, cfg_.noise, k, rng);
      ids_out.push_back(ids);
      std::vector<idx> flat(static_cast<std::size_t>(hw));
      for (idx j = 0; j < hw; ++j)
        flat[static_cast<std::size_t>(j)] = ids.data()[j];
      Var<S> st = straight_through(
          f_slice, gather_rows(cb.effective(), std::move(flat)));
      if (n == 1) {
        st_out = st;
      } else {
        if (i == 0)
          st_out = Var<S>::constant(Tensor<S>::zeros({n * hw, cfg_.dim}));
        std::vector<idx> rows(static_cast<std::size_t>(hw));
        for (idx j = 0; j < hw; ++j)
          rows[static_cast<std::size_t>(j)] = i * hw + j;
        st_out = overwrite_rows(st_out, std::move(rows), st);
      }
      Var<S> term = add(qr.codebook_loss,
                        scale(qr.commitment_loss,
                              static_cast<S>(cfg_.commitment_weight)));
      loss_acc = i == 0 ? term : add(loss_acc, term);
    }
    return scale(loss_acc, S(1) / static_cast<S>(n));
  }

  void quantize_batch(const vq::Codebook<S>& cb, const Var<S>& features,
                      idx n, idx h, idx w, std::vector<IGrid>& out) const {
    const idx hw = h * w;
    for (idx i = 0; i < n; ++i) {
      auto qr = vq::quantize_grid(
          cb, reshape(slice_rows(features, i * hw, hw), {h, w, cfg_.dim}));
      out.push_back(qr.indices);
    }
  }

  void decode_dims(const std::vector<IGrid>& sem,
                   const std::vector<IGrid>& pix, idx& n, idx& hs, idx& ws,
                   idx& hp, idx& wp) const {
    if (has_sem() && has_pix() && sem.size() != pix.size())
      throw DomainError("decode: branch sample counts differ");
    n = static_cast<idx>(has_sem() ? sem.size() : pix.size());
    if (n == 0) throw DomainError("decode: empty batch");
    if (has_sem()) {
      hs = sem[0].rows(), ws = sem[0].cols();
      if ((hs * cfg_.f_sem) % cfg_.f_pix != 0 ||
          (ws * cfg_.f_sem) % cfg_.f_pix != 0)
        throw DomainError("decode: semantic grid maps to fractional pixels");
      hp = hs * cfg_.f_sem / cfg_.f_pix;
      wp = ws * cfg_.f_sem / cfg_.f_pix;
    }
    if (has_pix()) {
      if (has_sem()) {
        if (pix[0].rows() != hp || pix[0].cols() != wp)
          throw DomainError("decode: semantic and pixel grids disagree");
      } else {
        hp = pix[0].rows(), wp = pix[0].cols();
        hs = ws = 0;
      }
    }
  }

  Var<S> decode_graph(const Var<S>& sem_rows, const Var<S>& pix_rows, idx n,
                      idx hs, idx ws, idx hp, idx wp) const {
    Var<S> in;
    if (cfg_.branch == Branch::dual) {
      Var<S> sem_up = resize_nearest(
          reshape(sem_rows, {n, hs, ws, cfg_.dim}), hp, wp);
      in = reshape(concat_cols(sem_up, pix_rows), {n, hp, wp, 2 * cfg_.dim});
    } else if (cfg_.branch == Branch::semantic_only) {
      in = resize_nearest(reshape(sem_rows, {n, hs, ws, cfg_.dim}), hp, wp);
    } else {
      in = reshape(pix_rows, {n, hp, wp, cfg_.dim});
    }
    return dec_.forward(in);
  }

  TokenizerConfig cfg_;
  ParamStore<S> store_;
  SemanticBackbone<S> backbone_;
  SemanticDecoder<S> sem_dec_;
  PixelEncoder<S> pix_enc_;
  FusionDecoder<S> dec_;
  Discriminator<S> disc_;
  vq::Codebook<S> cb_sem_, cb_pix_;
  mutable long zero_norm_count_ = 0;
};

}  // namespace illume::dualvitok
