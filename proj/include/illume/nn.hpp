#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "illume/ops.hpp"
#include "illume/rng.hpp"

namespace illume {

// ===== parameters =====

template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;
  bool locked = false;  // permanently frozen; immune to set_trainable
};

// Inference / loss-eval passes flip this off so forward calls build no graph.
inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Binds a parameter into the current graph. Gradient accumulates into the
// parameter's own storage, which the optimizer reads directly.
template <typename S>
Var<S> use(const Parameter<S>& p) {
  return Var<S>::leaf(p.value, p.grad, p.trainable && grad_mode());
}

template <typename S>
class ParamStore {
 public:
  Parameter<S>& add(const std::string& name, std::vector<idx> dims) {
    if (index_.count(name)) throw DomainError("ParamStore: duplicate " + name);
    auto p = std::make_shared<Parameter<S>>();
    p->name = name;
    p->value = Tensor<S>::zeros(dims);
    p->grad = Tensor<S>::zeros(std::move(dims));
    index_[name] = items_.size();
    items_.push_back(std::move(p));
    return *items_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Parameter<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw DomainError("ParamStore: no parameter " + name);
    return *items_[it->second];
  }

  const std::vector<std::shared_ptr<Parameter<S>>>& items() const {
    return items_;
  }

  void zero_grad() {
    for (auto& p : items_) p->grad.array().setZero();
  }

  void set_trainable(bool on) {
    for (auto& p : items_)
      if (!p->locked) p->trainable = on;
  }

  void set_trainable_prefix(const std::string& prefix, bool on) {
    for (auto& p : items_)
      if (!p->locked && p->name.rfind(prefix, 0) == 0) p->trainable = on;
  }

  void lock_prefix(const std::string& prefix) {
    for (auto& p : items_)
      if (p->name.rfind(prefix, 0) == 0) {
        p->trainable = false;
        p->locked = true;
      }
  }

  idx numel() const {
    idx n = 0;
    for (const auto& p : items_) n += p->value.numel();
    return n;
  }

  // Hash of every value buffer, in registration order. Bitwise, so it is a
  // valid witness for "these weights did not move".
  std::uint64_t state_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : items_) {
      h = fnv1a64(p->name.data(), p->name.size(), h);
      h = fnv1a64(p->value.data(),
                  sizeof(S) * static_cast<std::size_t>(p->value.numel()), h);
    }
    return h;
  }

 private:
  std::vector<std::shared_ptr<Parameter<S>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ===== init =====

template <typename S>
void fill_normal(Tensor<S>& t, Rng& rng, double stddev) {
  for (idx i = 0; i < t.numel(); ++i)
    t[i] = static_cast<S>(rng.normal() * stddev);
}

template <typename S>
void fill_uniform(Tensor<S>& t, Rng& rng, double lo, double hi) {
  for (idx i = 0; i < t.numel(); ++i)
    t[i] = static_cast<S>(lo + (hi - lo) * rng.uniform());
}

template <typename S>
void fill_kaiming(Tensor<S>& t, Rng& rng, idx fan_in) {
  fill_normal(t, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

// ===== blocks =====

template <typename S>
struct Linear {
  Parameter<S>* w = nullptr;
  Parameter<S>* b = nullptr;

  Linear() = default;
  Linear(ParamStore<S>& ps, const std::string& name, idx in, idx out,
         Rng& rng) {
    w = &ps.add(name + ".w", {in, out});
    b = &ps.add(name + ".b", {out});
    fill_kaiming(w->value, rng, in);
  }

  Var<S> operator()(const Var<S>& x) const {
    return add_rowvec(matmul(x, use(*w)), use(*b));
  }
};

template <typename S>
struct Conv2dBlock {
  Parameter<S>* w = nullptr;
  Parameter<S>* b = nullptr;
  Conv2dSpec spec;

  Conv2dBlock() = default;
  Conv2dBlock(ParamStore<S>& ps, const std::string& name, idx cin, idx cout,
              idx k, Rng& rng, Conv2dSpec sp = {}) : spec(sp) {
    w = &ps.add(name + ".w", {k, k, cin, cout});
    b = &ps.add(name + ".b", {cout});
    fill_kaiming(w->value, rng, k * k * cin);
  }

  Var<S> operator()(const Var<S>& x) const {
    return conv2d(x, use(*w), use(*b), spec);
  }
};

template <typename S>
struct LayerNormBlock {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;

  LayerNormBlock() = default;
  LayerNormBlock(ParamStore<S>& ps, const std::string& name, idx c) {
    gamma = &ps.add(name + ".g", {c});
    beta = &ps.add(name + ".b", {c});
    gamma->value.array().setConstant(S(1));
  }

  Var<S> operator()(const Var<S>& x) const {
    return layer_norm(x, use(*gamma), use(*beta));
  }
};

template <typename S>
struct GroupNormBlock {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  idx groups = 1;

  GroupNormBlock() = default;
  GroupNormBlock(ParamStore<S>& ps, const std::string& name, idx c, idx g)
      : groups(g) {
    gamma = &ps.add(name + ".g", {c});
    beta = &ps.add(name + ".b", {c});
    gamma->value.array().setConstant(S(1));
  }

  Var<S> operator()(const Var<S>& x) const {
    return group_norm(x, groups, use(*gamma), use(*beta));
  }
};

template <typename S>
struct Embedding {
  Parameter<S>* table = nullptr;

  Embedding() = default;
  Embedding(ParamStore<S>& ps, const std::string& name, idx count, idx dim,
            Rng& rng, double stddev = 0.02) {
    table = &ps.add(name + ".w", {count, dim});
    fill_normal(table->value, rng, stddev);
  }

  Var<S> operator()(const std::vector<idx>& ids) const {
    return gather_rows(use(*table), ids);
  }
};

// Multi-head self attention over a [T, d] sequence. Position handling is
// injected by the caller via a hook applied to q and k (RoPE or identity).
template <typename S>
struct SelfAttention {
  Linear<S> wq, wk, wv, wo;
  idx n_heads = 1;
  idx dim = 0;

  SelfAttention() = default;
  SelfAttention(ParamStore<S>& ps, const std::string& name, idx d, idx heads,
                Rng& rng)
      : wq(ps, name + ".q", d, d, rng),
        wk(ps, name + ".k", d, d, rng),
        wv(ps, name + ".v", d, d, rng),
        wo(ps, name + ".o", d, d, rng),
        n_heads(heads),
        dim(d) {
    if (d % heads != 0) throw DomainError("SelfAttention: d % heads != 0");
  }

  template <typename PosHook>
  Var<S> operator()(const Var<S>& x, bool causal, PosHook&& pos_hook) const {
    const idx dh = dim / n_heads;
    Var<S> q = pos_hook(wq(x));
    Var<S> k = pos_hook(wk(x));
    Var<S> v = wv(x);
    const S inv_sqrt = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));
    Var<S> out;
    for (idx h = 0; h < n_heads; ++h) {
      Var<S> qh = slice_cols(q, h * dh, dh);
      Var<S> kh = slice_cols(k, h * dh, dh);
      Var<S> vh = slice_cols(v, h * dh, dh);
      Var<S> scores = scale(matmul_nt(qh, kh), inv_sqrt);
      Var<S> attn = causal ? causal_softmax(scores) : softmax_rows(scores);
      Var<S> oh = matmul(attn, vh);
      out = h == 0 ? oh : concat_cols(out, oh);
    }
    return wo(out);
  }
};

template <typename S>
struct Mlp {
  Linear<S> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<S>& ps, const std::string& name, idx d, idx hidden, Rng& rng)
      : fc1(ps, name + ".fc1", d, hidden, rng),
        fc2(ps, name + ".fc2", hidden, d, rng) {}

  Var<S> operator()(const Var<S>& x) const { return fc2(silu(fc1(x))); }
};

// Pre-norm transformer block.
template <typename S>
struct TransformerBlock {
  LayerNormBlock<S> ln1, ln2;
  SelfAttention<S> attn;
  Mlp<S> mlp;

  TransformerBlock() = default;
  TransformerBlock(ParamStore<S>& ps, const std::string& name, idx d,
                   idx heads, Rng& rng)
      : ln1(ps, name + ".ln1", d),
        ln2(ps, name + ".ln2", d),
        attn(ps, name + ".attn", d, heads, rng),
        mlp(ps, name + ".mlp", d, 4 * d, rng) {}

  template <typename PosHook>
  Var<S> operator()(const Var<S>& x, bool causal, PosHook&& pos_hook) const {
    Var<S> h = add(x, attn(ln1(x), causal, pos_hook));
    return add(h, mlp(ln2(h)));
  }
};

// GroupNorm / silu / conv3x3 twice, residual; 1x1 projection when the
// channel count changes.
template <typename S>
struct ResnetBlock {
  GroupNormBlock<S> gn1, gn2;
  Conv2dBlock<S> conv1, conv2;
  Conv2dBlock<S> skip;
  bool has_skip = false;

  ResnetBlock() = default;
  ResnetBlock(ParamStore<S>& ps, const std::string& name, idx cin, idx cout,
              idx groups, Rng& rng)
      : gn1(ps, name + ".gn1", cin, groups),
        gn2(ps, name + ".gn2", cout, groups),
        conv1(ps, name + ".conv1", cin, cout, 3, rng, {1, 1}),
        conv2(ps, name + ".conv2", cout, cout, 3, rng, {1, 1}) {
    if (cin != cout) {
      skip = Conv2dBlock<S>(ps, name + ".skip", cin, cout, 1, rng, {1, 0});
      has_skip = true;
    }
  }

  Var<S> operator()(const Var<S>& x) const {
    Var<S> h = conv2(silu(gn2(conv1(silu(gn1(x))))));
    return add(has_skip ? skip(x) : x, h);
  }
};

inline auto no_pos_hook = [](auto v) { return v; };

// Applies fn independently to each contiguous block of rows (one sample's
// token sequence) and reassembles the batch. Attention layers see a single
// sequence at a time, so batched inputs go through here.
template <typename S, typename Fn>
Var<S> map_row_blocks(const Var<S>& x, idx blocks, idx block_rows, Fn&& fn) {
  if (x.value().mat().rows() != blocks * block_rows)
    throw DomainError("map_row_blocks: row count mismatch");
  if (blocks == 1) return fn(reshape(x, {block_rows, x.value().mat().cols()}));
  Var<S> out;
  for (idx b = 0; b < blocks; ++b) {
    Var<S> y = fn(slice_rows(x, b * block_rows, block_rows));
    if (b == 0)
      out = Var<S>::constant(
          Tensor<S>::zeros({blocks * block_rows, y.value().mat().cols()}));
    std::vector<idx> ids(static_cast<std::size_t>(block_rows));
    for (idx r = 0; r < block_rows; ++r)
      ids[static_cast<std::size_t>(r)] = b * block_rows + r;
    out = overwrite_rows(out, std::move(ids), y);
  }
  return out;
}

}  // namespace illume
