#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "illume/nn.hpp"
#include "illume/ops.hpp"
#include "illume/seqcodec.hpp"

namespace illume::unilm {

struct ModelConfig {
  idx layers = 8;
  idx heads = 8;
  idx dim = 512;
  idx context = 1536;
  seqcodec::VocabLayout layout;
  idx feature_dim = 32;   // width of the tokenizer features the adapters map
  idx mask_text_id = 0;   // text id standing in for masked prompts
  bool continuous_input = true;  // off: ablation, image ids via the table

  std::uint64_t hash() const;
};

inline void validate(const ModelConfig& c) {
  if (c.layers < 1 || c.heads < 1 || c.dim < 1 || c.context < 1 ||
      c.feature_dim < 1)
    throw DomainError("ModelConfig: sizes must be positive");
  if (c.dim % c.heads != 0 || (c.dim / c.heads) % 2 != 0)
    throw DomainError("ModelConfig: head dim must be a positive even number");
  if (c.layout.vocab_size() <= 0)
    throw DomainError("ModelConfig: empty vocab layout");
  if (c.mask_text_id < 0 || c.mask_text_id >= c.layout.text_vocab)
    throw DomainError("ModelConfig: mask_text_id must be a text id");
}

inline std::uint64_t ModelConfig::hash() const {
  std::ostringstream os;
  os << layers << ';' << heads << ';' << dim << ';' << context << ';'
     << feature_dim << ';' << mask_text_id << ';' << continuous_input << ';'
     << layout.hash32();
  return fnv1a64(os.str());
}

struct GenerationParams {
  double cfg_scale = 2.0;
  double temperature = 1.0;
  idx top_k = 50;
  idx sem_h = 4, sem_w = 4;
  std::uint64_t seed = 0;
};

inline void validate(const GenerationParams& p) {
  if (p.cfg_scale < 0.0) throw DomainError("GenerationParams: cfg_scale < 0");
  if (p.temperature <= 0.0)
    throw DomainError("GenerationParams: temperature must be positive");
  if (p.top_k < 1) throw DomainError("GenerationParams: top_k must be >= 1");
  if (p.sem_h < 1 || p.sem_w < 1)
    throw DomainError("GenerationParams: target dims must be positive");
}

enum class SlotKind { token, sem_feature, pix_feature };

// A mixed token/feature sequence. Every position carries its vocab id (the
// discrete identity used for labels and for the discrete-input fallback);
// feature slots additionally point at a row of the side tensors, which the
// adapters map into the model width when continuous input is on.
template <typename S>
struct MultimodalSequence {
  struct Element {
    SlotKind kind = SlotKind::token;
    idx id = 0;
    idx feature_row = -1;
    bool supervised = false;
  };
  std::vector<Element> elems;
  Tensor<S> sem_features;  // {rows, D}
  Tensor<S> pix_features;  // {rows, D}

  idx size() const { return static_cast<idx>(elems.size()); }
};

namespace detail {

template <typename S>
Tensor<S> vstack(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.defined() || a.numel() == 0) return b;
  auto am = a.mat();
  auto bm = b.mat();
  if (am.cols() != bm.cols()) throw DomainError("vstack: column mismatch");
  Tensor<S> out({am.rows() + bm.rows(), am.cols()});
  out.mat().topRows(am.rows()) = am;
  out.mat().bottomRows(bm.rows()) = bm;
  return out;
}

template <typename S>
Tensor<S> as_feature_rows(const Tensor<S>& t, idx rows, const char* what) {
  if (!t.defined())
    throw DomainError(std::string(what) + ": features missing");
  if (t.ndim() == 3 && t.dim(0) * t.dim(1) == rows)
    return t.reshaped({rows, t.dim(2)});
  if (t.ndim() == 2 && t.dim(0) == rows) return t;
  throw DomainError(std::string(what) + ": feature rows do not match grid, " +
                    t.shape_str());
}

}  // namespace detail

template <typename S>
void append_text(MultimodalSequence<S>& seq, const std::vector<idx>& ids,
                 bool supervised) {
  for (idx id : ids)
    seq.elems.push_back({SlotKind::token, id, -1, supervised});
}

template <typename S>
void append_mask_span(MultimodalSequence<S>& seq, idx mask_id, idx count) {
  for (idx i = 0; i < count; ++i)
    seq.elems.push_back({SlotKind::token, mask_id, -1, false});
}

// Appends a serialized image block as model INPUT: structural tokens embed
// discretely, code positions become feature slots backed by the given
// pre-quantization feature grids ({h,w,D} or {h*w,D}, row-major).
template <typename S>
void append_image_input(MultimodalSequence<S>& seq,
                        const seqcodec::VocabLayout& layout,
                        const seqcodec::ImageTokenBlock& block,
                        const Tensor<S>& sem_feats,
                        const Tensor<S>& pix_feats) {
  Tensor<S> sem_rows = detail::as_feature_rows(
      sem_feats, block.sem_h * block.sem_w, "append_image_input semantic");
  Tensor<S> pix_rows = detail::as_feature_rows(
      pix_feats, block.pix_h * block.pix_w, "append_image_input pixel");
  const idx sem_base =
      seq.sem_features.defined() ? seq.sem_features.mat().rows() : 0;
  const idx pix_base =
      seq.pix_features.defined() ? seq.pix_features.mat().rows() : 0;
  seq.sem_features = detail::vstack(seq.sem_features, sem_rows);
  seq.pix_features = detail::vstack(seq.pix_features, pix_rows);

  idx s = 0, p = 0;
  for (idx id : seqcodec::serialize(block, layout)) {
    auto d = seqcodec::describe(layout, id);
    typename MultimodalSequence<S>::Element e{SlotKind::token, id, -1, false};
    if (d.kind == seqcodec::TokenKind::sem_code) {
      e.kind = SlotKind::sem_feature;
      e.feature_row = sem_base + s++;
    } else if (d.kind == seqcodec::TokenKind::pix_code) {
      e.kind = SlotKind::pix_feature;
      e.feature_row = pix_base + p++;
    }
    seq.elems.push_back(e);
  }
}

// Appends a serialized image block as supervised OUTPUT: plain discrete
// tokens, every position a label.
template <typename S>
void append_image_target(MultimodalSequence<S>& seq,
                         const seqcodec::VocabLayout& layout,
                         const seqcodec::ImageTokenBlock& block) {
  for (idx id : seqcodec::serialize(block, layout))
    seq.elems.push_back({SlotKind::token, id, -1, true});
}

// Guidance combination. s=1 and s=0 short-circuit so the endpoints are
// bitwise equal to their inputs, not just close.
template <typename S>
Tensor<S> cfg_logits(const Tensor<S>& cond, const Tensor<S>& uncond,
                     double s) {
  check_same_shape(cond, uncond, "cfg_logits");
  if (s == 1.0) return cond;
  if (s == 0.0) return uncond;
  Tensor<S> out(cond.dims());
  out.array() = uncond.array() + static_cast<S>(s) *
                                     (cond.array() - uncond.array());
  return out;
}

// Temperature/top-k sampling restricted to the legal set. Candidates are
// ranked by logit (ties to the lower id) before the top-k cut.
template <typename S>
idx sample_logits(const Tensor<S>& logits, const std::vector<char>& legal,
                  double temperature, idx top_k, Rng& rng) {
  if (logits.ndim() != 1)
    throw DomainError("sample_logits: expected a flat logit vector");
  if (static_cast<idx>(legal.size()) != logits.dim(0))
    throw DomainError("sample_logits: mask length mismatch");
  if (temperature <= 0.0 || top_k < 1)
    throw DomainError("sample_logits: bad sampling params");
  std::vector<idx> cand;
  for (idx i = 0; i < logits.dim(0); ++i)
    if (legal[static_cast<std::size_t>(i)]) cand.push_back(i);
  if (cand.empty()) throw DomainError("sample_logits: no legal token");
  std::sort(cand.begin(), cand.end(), [&](idx a, idx b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  });
  if (static_cast<idx>(cand.size()) > top_k)
    cand.resize(static_cast<std::size_t>(top_k));
  const S mx = logits[cand[0]];
  std::vector<double> weights(cand.size());
  double z = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    weights[i] = std::exp(static_cast<double>(logits[cand[i]] - mx) /
                          temperature);
    z += weights[i];
  }
  double r = rng.uniform() * z;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    r -= weights[i];
    if (r <= 0.0) return cand[i];
  }
  return cand.back();
}

// Decoder-only transformer with one embedding table and one output head
// over the unified vocabulary; images enter continuously via two adapters
// and leave as discrete ids.
template <typename S>
class UnifiedLM {
 public:
  explicit UnifiedLM(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    validate(cfg_);
    Rng rng(seed);
    const idx v = cfg_.layout.vocab_size();
    embed_ = Embedding<S>(store_, "embed", v, cfg_.dim, rng);
    for (idx i = 0; i < cfg_.layers; ++i)
      blocks_.emplace_back(store_, "blk" + std::to_string(i), cfg_.dim,
                           cfg_.heads, rng);
    ln_f_ = LayerNormBlock<S>(store_, "ln_f", cfg_.dim);
    head_ = Linear<S>(store_, "head", cfg_.dim, v, rng);
    sem_adapter_ = Linear<S>(store_, "sem_adapter", cfg_.feature_dim,
                             cfg_.dim, rng);
    pix_adapter_ = Linear<S>(store_, "pix_adapter", cfg_.feature_dim,
                             cfg_.dim, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

  // The LM body is what the first alignment stage must not touch.
  static bool is_body_param(const std::string& name) {
    return name.rfind("blk", 0) == 0 || name.rfind("ln_f", 0) == 0;
  }

  // Zeroes the text-row gradients of the embedding and the unified head so
  // an optimizer step moves vision rows only (stage-1 discipline).
  void mask_text_grads() {
    const idx t = cfg_.layout.text_vocab;
    store_.at("embed.w").grad.mat().topRows(t).setZero();
    store_.at("head.w").grad.mat().leftCols(t).setZero();
    store_.at("head.b").grad.array().head(t).setZero();
  }

  Var<S> embed_multimodal(const MultimodalSequence<S>& seq) const {
    const idx len = seq.size();
    if (len < 1) throw DomainError("embed_multimodal: empty sequence");
    const idx v = cfg_.layout.vocab_size();
    std::vector<idx> ids(static_cast<std::size_t>(len));
    for (idx i = 0; i < len; ++i) {
      idx id = seq.elems[static_cast<std::size_t>(i)].id;
      if (id < 0 || id >= v)
        throw DomainError("embed_multimodal: id out of vocabulary");
      ids[static_cast<std::size_t>(i)] = id;
    }
    Var<S> base = embed_(ids);
    if (!cfg_.continuous_input) return base;
    base = overwrite_features(base, seq, SlotKind::sem_feature,
                              seq.sem_features, sem_adapter_);
    base = overwrite_features(base, seq, SlotKind::pix_feature,
                              seq.pix_features, pix_adapter_);
    return base;
  }

  Var<S> forward_logits(const MultimodalSequence<S>& seq) const {
    const idx len = seq.size();
    if (len > cfg_.context)
      throw DomainError("forward_logits: sequence exceeds the context");
    Var<S> x = embed_multimodal(seq);
    std::vector<idx> pos(static_cast<std::size_t>(len));
    std::iota(pos.begin(), pos.end(), idx{0});
    auto hook = [&](Var<S> q) { return rope1d(q, pos, cfg_.heads); };
    for (const auto& blk : blocks_) x = blk(x, true, hook);
    return head_(ln_f_(x));
  }

  // Mean cross-entropy over every supervised label position in the batch,
  // through the single unified head.
  Var<S> next_token_loss(const std::vector<MultimodalSequence<S>>& batch) const {
    if (batch.empty()) throw DomainError("next_token_loss: empty batch");
    idx total = 0;
    std::vector<idx> counts(batch.size(), 0);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (idx t = 1; t < batch[b].size(); ++t)
        counts[b] += batch[b].elems[static_cast<std::size_t>(t)].supervised;
      total += counts[b];
    }
    if (total == 0)
      throw DomainError("next_token_loss: no supervised positions");
    Var<S> acc;
    bool first = true;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      if (counts[b] == 0) continue;
      const auto& seq = batch[b];
      const idx len = seq.size();
      Var<S> pred = slice_rows(forward_logits(seq), 0, len - 1);
      std::vector<idx> targets(static_cast<std::size_t>(len - 1));
      std::vector<char> mask(static_cast<std::size_t>(len - 1));
      for (idx t = 1; t < len; ++t) {
        targets[static_cast<std::size_t>(t - 1)] =
            seq.elems[static_cast<std::size_t>(t)].id;
        mask[static_cast<std::size_t>(t - 1)] =
            seq.elems[static_cast<std::size_t>(t)].supervised;
      }
      Var<S> term = scale(cross_entropy(pred, targets, mask),
                          static_cast<S>(counts[b]) / static_cast<S>(total));
      acc = first ? term : add(acc, term);
      first = false;
    }
    return acc;
  }

  // Grammar-constrained sampling. The conditional context is the text
  // prompt; the unconditional context replaces it with an equal-length
  // span of the mask token. Requested dims are pinned by forcing the
  // indicator tokens, everything after follows the legal mask.
  seqcodec::ImageTokenBlock generate_image(const std::vector<idx>& prompt,
                                           const GenerationParams& p) const {
    validate(p);
    for (idx id : prompt)
      if (id < 0 || id >= cfg_.layout.text_vocab)
        throw DomainError("generate_image: prompt must be text ids");
    MultimodalSequence<S> cond, uncond;
    append_text(cond, prompt, false);
    append_mask_span(uncond, cfg_.mask_text_id,
                     static_cast<idx>(prompt.size()));
    return sample_block(std::move(cond), std::move(uncond), p.sem_h, p.sem_w,
                        p);
  }

  // Editing: the source image rides along in both contexts (continuous
  // features), only the instruction gets masked on the unconditional side,
  // and the emitted block keeps the source dims.
  seqcodec::ImageTokenBlock edit_image(const seqcodec::ImageTokenBlock& source,
                                       const Tensor<S>& sem_feats,
                                       const Tensor<S>& pix_feats,
                                       const std::vector<idx>& instruction,
                                       const GenerationParams& p) const {
    validate(p);
    for (idx id : instruction)
      if (id < 0 || id >= cfg_.layout.text_vocab)
        throw DomainError("edit_image: instruction must be text ids");
    MultimodalSequence<S> cond, uncond;
    append_image_input(cond, cfg_.layout, source, sem_feats, pix_feats);
    append_image_input(uncond, cfg_.layout, source, sem_feats, pix_feats);
    append_text(cond, instruction, false);
    append_mask_span(uncond, cfg_.mask_text_id,
                     static_cast<idx>(instruction.size()));
    return sample_block(std::move(cond), std::move(uncond), source.sem_h,
                        source.sem_w, p);
  }

 private:
  Var<S> overwrite_features(Var<S> base, const MultimodalSequence<S>& seq,
                            SlotKind kind, const Tensor<S>& feats,
                            const Linear<S>& adapter) const {
    std::vector<idx> positions, rows;
    for (idx i = 0; i < seq.size(); ++i) {
      const auto& e = seq.elems[static_cast<std::size_t>(i)];
      if (e.kind != kind) continue;
      positions.push_back(i);
      rows.push_back(e.feature_row);
    }
    if (positions.empty()) return base;
    if (!feats.defined() || feats.ndim() != 2 ||
        feats.dim(1) != cfg_.feature_dim)
      throw DomainError("embed_multimodal: feature rows missing or wrong width");
    Tensor<S> gathered({static_cast<idx>(rows.size()), cfg_.feature_dim});
    for (std::size_t j = 0; j < rows.size(); ++j) {
      if (rows[j] < 0 || rows[j] >= feats.dim(0))
        throw DomainError(
            "embed_multimodal: missing features for an image input position");
      gathered.mat().row(static_cast<idx>(j)) = feats.mat().row(rows[j]);
    }
    return overwrite_rows(base, std::move(positions),
                          adapter(Var<S>::constant(gathered)));
  }

  seqcodec::ImageTokenBlock sample_block(MultimodalSequence<S> cond,
                                         MultimodalSequence<S> uncond,
                                         idx sem_h, idx sem_w,
                                         const GenerationParams& p) const {
    const auto& l = cfg_.layout;
    if (sem_h > l.h_max || sem_w > l.w_max)
      throw DomainError("generate: semantic dims outside layout bounds");
    if ((sem_h * l.ratio_num) % l.ratio_den != 0 ||
        (sem_w * l.ratio_num) % l.ratio_den != 0)
      throw DomainError("generate: semantic dims incompatible with the ratio");
    const idx pix_h = sem_h * l.ratio_num / l.ratio_den;
    const idx pix_w = sem_w * l.ratio_num / l.ratio_den;
    const idx block_len =
        8 + sem_h * (sem_w + 1) + pix_h * (pix_w + 1);
    if (cond.size() + block_len > cfg_.context ||
        uncond.size() + block_len > cfg_.context)
      throw DomainError("generate: sequence would exceed the context");

    NoGradGuard ng;
    Rng rng(p.seed);
    seqcodec::GrammarCursor cur(l);
    std::vector<idx> emitted;
    auto push = [&](idx id) {
      cur.advance(id);
      emitted.push_back(id);
      typename MultimodalSequence<S>::Element e{SlotKind::token, id, -1,
                                                false};
      cond.elems.push_back(e);
      uncond.elems.push_back(e);
    };
    push(l.marker(seqcodec::Marker::soi));
    push(l.height_id(sem_h));
    push(l.width_id(sem_w));
    while (!cur.done()) {
      std::vector<char> legal = cur.legal();
      Tensor<S> lc = last_logits(cond);
      Tensor<S> lu = last_logits(uncond);
      Tensor<S> fused = cfg_logits(lc, lu, p.cfg_scale);
      push(sample_logits(fused, legal, p.temperature, p.top_k, rng));
    }
    auto res = seqcodec::parse(emitted, l);
    if (!res.ok())
      throw DomainError("generate: emitted sequence failed to parse");
    return *res.block;
  }

  Tensor<S> last_logits(const MultimodalSequence<S>& seq) const {
    Var<S> lg = forward_logits(seq);
    auto lm = lg.value().mat();
    Tensor<S> row({lm.cols()});
    row.mat(1, lm.cols()) = lm.row(lm.rows() - 1);
    return row;
  }

  ModelConfig cfg_;
  ParamStore<S> store_;
  Embedding<S> embed_;
  std::vector<TransformerBlock<S>> blocks_;
  LayerNormBlock<S> ln_f_;
  Linear<S> head_, sem_adapter_, pix_adapter_;
};

}  // namespace illume::unilm
