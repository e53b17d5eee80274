#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "illume/error.hpp"
#include "illume/rng.hpp"

namespace illume {

using idx = Eigen::Index;

template <typename S>
using ArrX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<MatRM<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const MatRM<S>>;
template <typename S>
using VecMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <typename S>
using ArrMap = Eigen::Map<ArrX<S>>;
template <typename S>
using ConstArrMap = Eigen::Map<const ArrX<S>>;

// Dense n-dimensional array over a flat row-major buffer. Copies are
// shallow (shared storage); use clone() for a deep copy. Feature maps use
// NHWC dim order so that the flat buffer doubles as a (N*H*W) x C matrix.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<idx> dims) : dims_(std::move(dims)) {
    data_ = std::make_shared<ArrX<S>>(numel());
    data_->setZero();
  }

  Tensor(std::initializer_list<idx> dims) : Tensor(std::vector<idx>(dims)) {}

  static Tensor zeros(std::vector<idx> dims) { return Tensor(std::move(dims)); }

  static Tensor full(std::vector<idx> dims, S value) {
    Tensor t(std::move(dims));
    t.array() = value;
    return t;
  }

  static Tensor from(std::vector<idx> dims, std::vector<S> values) {
    Tensor t(std::move(dims));
    if (static_cast<idx>(values.size()) != t.numel())
      throw DomainError("Tensor::from: value count does not match shape");
    for (idx i = 0; i < t.numel(); ++i) (*t.data_)[i] = values[static_cast<std::size_t>(i)];
    return t;
  }

  static Tensor randn(std::vector<idx> dims, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(dims));
    for (idx i = 0; i < t.numel(); ++i)
      (*t.data_)[i] = static_cast<S>(rng.normal(0.0, stddev));
    return t;
  }

  static Tensor rand_uniform(std::vector<idx> dims, Rng& rng, double lo, double hi) {
    Tensor t(std::move(dims));
    for (idx i = 0; i < t.numel(); ++i)
      (*t.data_)[i] = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<idx>& dims() const { return dims_; }
  idx ndim() const { return static_cast<idx>(dims_.size()); }
  idx dim(int i) const { return dims_[static_cast<std::size_t>(i)]; }

  idx numel() const {
    idx n = 1;
    for (idx d : dims_) n *= d;
    return n;
  }

  S* data() { return data_->data(); }
  const S* data() const { return data_->data(); }

  ArrMap<S> array() { return ArrMap<S>(data_->data(), numel()); }
  ConstArrMap<S> array() const { return ConstArrMap<S>(data_->data(), numel()); }

  // View as a matrix whose columns are the last dim.
  MatMap<S> mat() {
    idx c = dims_.empty() ? 1 : dims_.back();
    return MatMap<S>(data_->data(), numel() / c, c);
  }
  ConstMatMap<S> mat() const {
    idx c = dims_.empty() ? 1 : dims_.back();
    return ConstMatMap<S>(data_->data(), numel() / c, c);
  }

  MatMap<S> mat(idx rows, idx cols) {
    if (rows * cols != numel()) throw DomainError("Tensor::mat: bad reshape");
    return MatMap<S>(data_->data(), rows, cols);
  }
  ConstMatMap<S> mat(idx rows, idx cols) const {
    if (rows * cols != numel()) throw DomainError("Tensor::mat: bad reshape");
    return ConstMatMap<S>(data_->data(), rows, cols);
  }

  S& operator[](idx i) { return (*data_)[i]; }
  S operator[](idx i) const { return (*data_)[i]; }

  Tensor clone() const {
    Tensor t;
    t.dims_ = dims_;
    t.data_ = std::make_shared<ArrX<S>>(*data_);
    return t;
  }

  // Same storage, new shape.
  Tensor reshaped(std::vector<idx> dims) const {
    Tensor t;
    t.dims_ = std::move(dims);
    t.data_ = data_;
    if (t.numel() != numel()) throw DomainError("Tensor::reshaped: element count mismatch");
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> t(dims_);
    for (idx i = 0; i < numel(); ++i) t[i] = static_cast<T>((*data_)[i]);
    return t;
  }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  bool all_finite() const {
    return array().isFinite().all();
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < dims_.size(); ++i)
      os << dims_[i] << (i + 1 < dims_.size() ? "," : "");
    os << "]";
    return os.str();
  }

 private:
  std::vector<idx> dims_;
  std::shared_ptr<ArrX<S>> data_;

  template <typename T>
  friend class Tensor;
};

// Integer grid (token indices, label ids). Row-major h x w.
using IGrid = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void check_same_shape(const auto& a, const auto& b,
                             const std::string& what) {
  if (!a.same_shape(b))
    throw DomainError(what + ": shape mismatch " + a.shape_str() + " vs " +
                      b.shape_str());
}

}  // namespace illume
