#pragma once

#include <string>
#include <vector>

#include "illume/nn.hpp"

namespace illume::vq {

enum class QuantizerKind { vanilla, simvq };

inline const char* kind_name(QuantizerKind k) {
  return k == QuantizerKind::vanilla ? "vanilla" : "simvq";
}

// A codebook of K codes of dim D. Vanilla: one trainable table. SimVQ: a
// frozen random base table composed with a trainable linear map, so every
// code moves whenever the map moves.
template <typename S>
class Codebook {
 public:
  Codebook() = default;

  Codebook(ParamStore<S>& ps, const std::string& prefix, QuantizerKind kind,
           idx k, idx d, Rng& rng)
      : kind_(kind), k_(k), d_(d) {
    if (k < 1 || d < 1) throw DomainError("Codebook: K and D must be positive");
    if (kind == QuantizerKind::vanilla) {
      table_ = &ps.add(prefix + ".table", {k, d});
      fill_normal(table_->value, rng, 1.0);
    } else {
      base_ = &ps.add(prefix + ".base", {k, d});
      fill_normal(base_->value, rng, 1.0);
      ps.lock_prefix(prefix + ".base");
      map_ = &ps.add(prefix + ".map", {d, d});
      for (idx i = 0; i < d; ++i) map_->value.mat()(i, i) = S(1);
    }
  }

  QuantizerKind kind() const { return kind_; }
  idx codes() const { return k_; }
  idx dim() const { return d_; }

  // Graph-connected [K, D] table. For simvq the only trainable path is the
  // linear map; the base enters as a constant.
  Var<S> effective() const {
    if (kind_ == QuantizerKind::vanilla) return use(*table_);
    return matmul(Var<S>::constant(base_->value), use(*map_));
  }

  Tensor<S> effective_values() const {
    NoGradGuard ng;
    return effective().value();
  }

  const Parameter<S>& base() const {
    if (kind_ != QuantizerKind::simvq) throw DomainError("Codebook: no base");
    return *base_;
  }

 private:
  QuantizerKind kind_ = QuantizerKind::vanilla;
  idx k_ = 0, d_ = 0;
  Parameter<S>* table_ = nullptr;
  Parameter<S>* base_ = nullptr;
  Parameter<S>* map_ = nullptr;
};

// Argmin of squared Euclidean distance; equal distances resolve to the
// smallest index.
template <typename S>
idx nearest_code(const Tensor<S>& table, const S* v) {
  const idx k = table.dim(0), d = table.dim(1);
  ConstMatMap<S> vm(v, 1, d);
  for (idx j = 0; j < d; ++j)
    if (!std::isfinite(static_cast<double>(v[j])))
      throw DomainError("nearest_code: non-finite input");
  idx best = 0;
  S best_d = (table.mat().row(0) - vm.row(0)).squaredNorm();
  for (idx i = 1; i < k; ++i) {
    S dist = (table.mat().row(i) - vm.row(0)).squaredNorm();
    if (dist < best_d) {
      best_d = dist;
      best = i;
    }
  }
  return best;
}

template <typename S>
struct QuantizeResult {
  IGrid indices;
  Tensor<S> quantized;     // code vectors at the chosen indices, {h, w, D}
  Var<S> quantized_st;     // decode input: forward quantized, gradient to features
  Var<S> commitment_loss;  // mean((features - sg(codes))^2)
  Var<S> codebook_loss;    // mean((sg(features) - codes)^2)
};

template <typename S>
QuantizeResult<S> quantize_grid(const Codebook<S>& cb, const Var<S>& features) {
  const auto& fv = features.value();
  if (fv.ndim() != 3 || fv.dim(2) != cb.dim())
    throw DomainError("quantize_grid: expected {h,w,D} with codebook D");
  if (!fv.all_finite())
    throw DomainError("quantize_grid: non-finite features");
  const idx h = fv.dim(0), w = fv.dim(1), d = cb.dim();
  const idx rows = h * w;

  Var<S> eff = cb.effective();
  const Tensor<S>& table = eff.value();

  QuantizeResult<S> out;
  out.indices.resize(h, w);
  std::vector<idx> ids(static_cast<std::size_t>(rows));
  for (idx r = 0; r < rows; ++r) {
    idx id = nearest_code(table, fv.data() + r * d);
    out.indices(r / w, r % w) = static_cast<std::int32_t>(id);
    ids[static_cast<std::size_t>(r)] = id;
  }

  Var<S> q_rows = gather_rows(eff, ids);  // [rows, D], grads reach the codebook
  out.quantized = q_rows.value().reshaped({h, w, d});
  Var<S> f_rows = reshape(features, {rows, d});
  out.commitment_loss = mse_loss(f_rows, Var<S>::constant(q_rows.value()));
  out.codebook_loss = mse_loss(Var<S>::constant(fv.reshaped({rows, d})), q_rows);
  out.quantized_st = reshape(straight_through(f_rows, q_rows), {h, w, d});
  return out;
}

struct UtilizationReport {
  std::vector<long> histogram;
  double utilization = 0.0;
};

class UtilizationAccum {
 public:
  explicit UtilizationAccum(idx k) : hist_(static_cast<std::size_t>(k), 0) {}

  void add(const IGrid& indices) {
    for (idx i = 0; i < indices.size(); ++i) {
      std::int32_t id = indices.data()[i];
      if (id < 0 || static_cast<std::size_t>(id) >= hist_.size())
        throw DomainError("utilization: index out of range");
      ++hist_[static_cast<std::size_t>(id)];
    }
  }

  UtilizationReport report() const {
    UtilizationReport r;
    r.histogram = hist_;
    long used = 0;
    for (long c : hist_) used += (c > 0);
    r.utilization = static_cast<double>(used) / static_cast<double>(hist_.size());
    return r;
  }

 private:
  std::vector<long> hist_;
};

}  // namespace illume::vq
