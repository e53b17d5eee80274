#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "illume/tensor.hpp"

namespace illume {

// Reverse-mode autodiff over Tensor<S>. The graph is dynamic: every op
// creates a Node eagerly; backward() walks creation order in reverse
// (a node's parents always have smaller ids, so that IS a topo order).
template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // lazily allocated; leaves may share storage with a Parameter
  bool requires_grad = false;
  std::int64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;
};

namespace detail {
inline std::int64_t next_node_id() {
  thread_local std::int64_t counter = 0;
  return ++counter;
}
}  // namespace detail

template <typename S>
class Var {
 public:
  Var() = default;

  static Var constant(Tensor<S> value) {
    Var v;
    v.n_ = std::make_shared<Node<S>>();
    v.n_->value = std::move(value);
    v.n_->id = detail::next_node_id();
    return v;
  }

  // Leaf whose gradient accumulates into external storage (a Parameter).
  static Var leaf(Tensor<S> value, Tensor<S> grad_storage, bool requires_grad) {
    Var v;
    v.n_ = std::make_shared<Node<S>>();
    v.n_->value = std::move(value);
    v.n_->grad = std::move(grad_storage);
    v.n_->requires_grad = requires_grad;
    v.n_->id = detail::next_node_id();
    return v;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor<S>& value() const { return n_->value; }
  Tensor<S>& grad() { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }
  std::shared_ptr<Node<S>> node() const { return n_; }

  S item() const {
    if (n_->value.numel() != 1) throw DomainError("Var::item: not a scalar");
    return n_->value[0];
  }

  // Backpropagate from this scalar. Seeds d(this)/d(this) = 1.
  void backward() const {
    if (n_->value.numel() != 1)
      throw DomainError("Var::backward: root must be scalar");
    std::vector<Node<S>*> order;
    std::vector<std::shared_ptr<Node<S>>> stack{n_};
    std::unordered_set<Node<S>*> seen;
    while (!stack.empty()) {
      auto cur = stack.back();
      stack.pop_back();
      if (!cur->requires_grad || !seen.insert(cur.get()).second) continue;
      order.push_back(cur.get());
      for (auto& p : cur->parents) stack.push_back(p);
    }
    std::sort(order.begin(), order.end(),
              [](const Node<S>* a, const Node<S>* b) { return a->id > b->id; });
    ensure_grad(*n_);
    n_->grad.array() += S(1);
    for (Node<S>* node : order)
      if (node->backprop) node->backprop(*node);
  }

  static void ensure_grad(Node<S>& n) {
    if (!n.grad.defined()) n.grad = Tensor<S>::zeros(n.value.dims());
  }

 private:
  std::shared_ptr<Node<S>> n_;
};

// -------- op plumbing --------

template <typename S>
Var<S> make_op(Tensor<S> value, std::vector<Var<S>> parents,
               std::function<void(Node<S>&)> backprop) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  Var<S> out = Var<S>::constant(std::move(value));
  auto node = out.node();
  node->requires_grad = rg;
  if (rg) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backprop = std::move(backprop);
  }
  return out;
}

template <typename S>
void accum_grad(Node<S>& parent, const Tensor<S>& g) {
  if (!parent.requires_grad) return;
  Var<S>::ensure_grad(parent);
  parent.grad.array() += g.array();
}

// -------- elementwise & scalar --------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor<S> out = a.value().clone();
  out.array() += b.value().array();
  return make_op<S>(std::move(out), {a, b}, [](Node<S>& n) {
    accum_grad(*n.parents[0], n.grad);
    accum_grad(*n.parents[1], n.grad);
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.value(), b.value(), "sub");
  Tensor<S> out = a.value().clone();
  out.array() -= b.value().array();
  return make_op<S>(std::move(out), {a, b}, [](Node<S>& n) {
    accum_grad(*n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      Var<S>::ensure_grad(*n.parents[1]);
      n.parents[1]->grad.array() -= n.grad.array();
    }
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.value(), b.value(), "mul");
  Tensor<S> out = a.value().clone();
  out.array() *= b.value().array();
  Tensor<S> av = a.value(), bv = b.value();
  return make_op<S>(std::move(out), {a, b}, [av, bv](Node<S>& n) {
    if (n.parents[0]->requires_grad) {
      Var<S>::ensure_grad(*n.parents[0]);
      n.parents[0]->grad.array() += n.grad.array() * bv.array();
    }
    if (n.parents[1]->requires_grad) {
      Var<S>::ensure_grad(*n.parents[1]);
      n.parents[1]->grad.array() += n.grad.array() * av.array();
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S c) {
  Tensor<S> out = a.value().clone();
  out.array() *= c;
  return make_op<S>(std::move(out), {a}, [c](Node<S>& n) {
    if (n.parents[0]->requires_grad) {
      Var<S>::ensure_grad(*n.parents[0]);
      n.parents[0]->grad.array() += n.grad.array() * c;
    }
  });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S c) {
  Tensor<S> out = a.value().clone();
  out.array() += c;
  return make_op<S>(std::move(out), {a},
                    [](Node<S>& n) { accum_grad(*n.parents[0], n.grad); });
}

template <typename S>
Var<S> neg(const Var<S>& a) {
  return scale(a, S(-1));
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  Tensor<S> out = a.value().clone();
  out.array() = out.array().max(S(0));
  Tensor<S> av = a.value();
  return make_op<S>(std::move(out), {a}, [av](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() +=
        n.grad.array() * (av.array() > S(0)).template cast<S>();
  });
}

template <typename S>
Var<S> sigmoid_fn(const Var<S>& a) {
  Tensor<S> out(a.value().dims());
  out.array() = S(1) / (S(1) + (-a.value().array()).exp());
  Tensor<S> ov = out;
  return make_op<S>(std::move(out), {a}, [ov](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() +=
        n.grad.array() * ov.array() * (S(1) - ov.array());
  });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
  Tensor<S> sig(a.value().dims());
  sig.array() = S(1) / (S(1) + (-a.value().array()).exp());
  Tensor<S> out(a.value().dims());
  out.array() = a.value().array() * sig.array();
  Tensor<S> av = a.value();
  return make_op<S>(std::move(out), {a}, [av, sig](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*n.parents[0]);
    // d/dx x*s(x) = s(x) * (1 + x * (1 - s(x)))
    n.parents[0]->grad.array() +=
        n.grad.array() * sig.array() *
        (S(1) + av.array() * (S(1) - sig.array()));
  });
}

template <typename S>
Var<S> tanh_fn(const Var<S>& a) {
  Tensor<S> out(a.value().dims());
  out.array() = a.value().array().tanh();
  Tensor<S> ov = out;
  return make_op<S>(std::move(out), {a}, [ov](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad.array() * (S(1) - ov.array().square());
  });
}

template <typename S>
Var<S> square(const Var<S>& a) {
  Tensor<S> out(a.value().dims());
  out.array() = a.value().array().square();
  Tensor<S> av = a.value();
  return make_op<S>(std::move(out), {a}, [av](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad.array() * S(2) * av.array();
  });
}

// Forward value of `quantized`; gradient passes to `features` unchanged.
template <typename S>
Var<S> straight_through(const Var<S>& features, const Var<S>& quantized) {
  check_same_shape(features.value(), quantized.value(), "straight_through");
  return make_op<S>(quantized.value().clone(), {features},
                    [](Node<S>& n) { accum_grad(*n.parents[0], n.grad); });
}

template <typename S>
Var<S> detach(const Var<S>& a) {
  return Var<S>::constant(a.value());
}

// -------- reductions --------

template <typename S>
Var<S> sum_all(const Var<S>& a) {
  Tensor<S> out({1});
  out[0] = a.value().array().sum();
  return make_op<S>(std::move(out), {a}, [](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad[0];
  });
}

template <typename S>
Var<S> mean_all(const Var<S>& a) {
  const S inv = S(1) / static_cast<S>(a.value().numel());
  Tensor<S> out({1});
  out[0] = a.value().array().sum() * inv;
  return make_op<S>(std::move(out), {a}, [inv](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad[0] * inv;
  });
}

// -------- matrix ops --------

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  idx m = av.mat().rows(), k = av.mat().cols();
  idx k2 = bv.mat().rows(), n = bv.mat().cols();
  if (k != k2) throw DomainError("matmul: inner dims mismatch");
  Tensor<S> out({m, n});
  out.mat().noalias() = av.mat() * bv.mat();
  Tensor<S> ac = av, bc = bv;
  return make_op<S>(std::move(out), {a, b}, [ac, bc](Node<S>& n_) {
    auto g = n_.grad.mat();
    if (n_.parents[0]->requires_grad) {
      Var<S>::ensure_grad(*n_.parents[0]);
      n_.parents[0]->grad.mat().noalias() += g * bc.mat().transpose();
    }
    if (n_.parents[1]->requires_grad) {
      Var<S>::ensure_grad(*n_.parents[1]);
      n_.parents[1]->grad.mat().noalias() += ac.mat().transpose() * g;
    }
  });
}

// a [m x k] * b^T where b is [n x k]  ->  [m x n]
template <typename S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  idx m = av.mat().rows(), k = av.mat().cols();
  idx n = bv.mat().rows(), k2 = bv.mat().cols();
  if (k != k2) throw DomainError("matmul_nt: inner dims mismatch");
  Tensor<S> out({m, n});
  out.mat().noalias() = av.mat() * bv.mat().transpose();
  Tensor<S> ac = av, bc = bv;
  return make_op<S>(std::move(out), {a, b}, [ac, bc](Node<S>& n_) {
    auto g = n_.grad.mat();
    if (n_.parents[0]->requires_grad) {
      Var<S>::ensure_grad(*n_.parents[0]);
      n_.parents[0]->grad.mat().noalias() += g * bc.mat();
    }
    if (n_.parents[1]->requires_grad) {
      Var<S>::ensure_grad(*n_.parents[1]);
      n_.parents[1]->grad.mat().noalias() += g.transpose() * ac.mat();
    }
  });
}

template <typename S>
Var<S> add_rowvec(const Var<S>& x, const Var<S>& v) {
  idx c = x.value().mat().cols();
  if (v.value().numel() != c) throw DomainError("add_rowvec: length mismatch");
  Tensor<S> out = x.value().clone();
  out.mat().rowwise() += ConstMatMap<S>(v.value().data(), 1, c).row(0);
  return make_op<S>(std::move(out), {x, v}, [c](Node<S>& n) {
    accum_grad(*n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      Var<S>::ensure_grad(*n.parents[1]);
      MatMap<S>(n.parents[1]->grad.data(), 1, c).row(0) +=
          n.grad.mat().colwise().sum();
    }
  });
}

template <typename S>
Var<S> reshape(const Var<S>& x, std::vector<idx> dims) {
  Tensor<S> out = x.value().reshaped(std::move(dims));
  return make_op<S>(std::move(out), {x}, [](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad.array();
  });
}

// -------- row / column ops --------

template <typename S>
Var<S> gather_rows(const Var<S>& x, std::vector<idx> ids) {
  idx c = x.value().mat().cols();
  idx rows = x.value().mat().rows();
  Tensor<S> out({static_cast<idx>(ids.size()), c});
  auto xm = x.value().mat();
  auto om = out.mat();
  for (idx i = 0; i < om.rows(); ++i) {
    idx r = ids[static_cast<std::size_t>(i)];
    if (r < 0 || r >= rows) throw DomainError("gather_rows: index out of range");
    om.row(i) = xm.row(r);
  }
  return make_op<S>(std::move(out), {x}, [ids = std::move(ids)](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*n.parents[0]);
    auto pg = n.parents[0]->grad.mat();
    auto g = n.grad.mat();
    for (idx i = 0; i < g.rows(); ++i)
      pg.row(ids[static_cast<std::size_t>(i)]) += g.row(i);
  });
}

// Copy of `base` with rows[ids[i]] replaced by values.row(i). ids must be
// distinct; replaced base rows receive zero gradient.
template <typename S>
Var<S> overwrite_rows(const Var<S>& base, std::vector<idx> ids,
                      const Var<S>& values) {
  idx c = base.value().mat().cols();
  if (values.value().mat().cols() != c)
    throw DomainError("overwrite_rows: column mismatch");
  if (values.value().mat().rows() != static_cast<idx>(ids.size()))
    throw DomainError("overwrite_rows: row count mismatch");
  Tensor<S> out = base.value().clone();
  auto om = out.mat();
  auto vm = values.value().mat();
  for (idx i = 0; i < vm.rows(); ++i) om.row(ids[static_cast<std::size_t>(i)]) = vm.row(i);
  return make_op<S>(std::move(out), {base, values},
                    [ids = std::move(ids)](Node<S>& n) {
    auto g = n.grad.mat();
    if (n.parents[1]->requires_grad) {
      Var<S>::ensure_grad(*n.parents[1]);
      auto vg = n.parents[1]->grad.mat();
      for (idx i = 0; i < vg.rows(); ++i)
        vg.row(i) += g.row(ids[static_cast<std::size_t>(i)]);
    }
    if (n.parents[0]->requires_grad) {
      Var<S>::ensure_grad(*n.parents[0]);
      Tensor<S> masked = n.grad.clone();
      auto mm = masked.mat();
      for (idx r : ids) mm.row(r).setZero();
      n.parents[0]->grad.array() += masked.array();
    }
  });
}

template <typename S>
Var<S> tile_rows(const Var<S>& v, idx n) {
  idx c = v.value().numel();
  Tensor<S> out({n, c});
  out.mat().rowwise() = ConstMatMap<S>(v.value().data(), 1, c).row(0);
  return make_op<S>(std::move(out), {v}, [c](Node<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*nd.parents[0]);
    MatMap<S>(nd.parents[0]->grad.data(), 1, c).row(0) +=
        nd.grad.mat().colwise().sum();
  });
}

template <typename S>
Var<S> concat_cols(const Var<S>& a, const Var<S>& b) {
  auto am = a.value().mat();
  auto bm = b.value().mat();
  if (am.rows() != bm.rows()) throw DomainError("concat_cols: row mismatch");
  idx ca = am.cols(), cb = bm.cols();
  Tensor<S> out({am.rows(), ca + cb});
  out.mat().leftCols(ca) = am;
  out.mat().rightCols(cb) = bm;
  return make_op<S>(std::move(out), {a, b}, [ca, cb](Node<S>& n) {
    auto g = n.grad.mat();
    if (n.parents[0]->requires_grad) {
      Var<S>::ensure_grad(*n.parents[0]);
      n.parents[0]->grad.mat() += g.leftCols(ca);
    }
    if (n.parents[1]->requires_grad) {
      Var<S>::ensure_grad(*n.parents[1]);
      n.parents[1]->grad.mat() += g.rightCols(cb);
    }
  });
}

template <typename S>
Var<S> slice_cols(const Var<S>& x, idx c0, idx len) {
  auto xm = x.value().mat();
  if (c0 < 0 || c0 + len > xm.cols()) throw DomainError("slice_cols: out of range");
  Tensor<S> out({xm.rows(), len});
  out.mat() = xm.middleCols(c0, len);
  return make_op<S>(std::move(out), {x}, [c0, len](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*n.parents[0]);
    n.parents[0]->grad.mat().middleCols(c0, len) += n.grad.mat();
  });
}

template <typename S>
Var<S> slice_rows(const Var<S>& x, idx r0, idx len) {
  auto xm = x.value().mat();
  if (r0 < 0 || r0 + len > xm.rows()) throw DomainError("slice_rows: out of range");
  Tensor<S> out({len, xm.cols()});
  out.mat() = xm.middleRows(r0, len);
  return make_op<S>(std::move(out), {x}, [r0, len](Node<S>& n) {
    if (!n.parents[0]->requires_grad) return;
    Var<S>::ensure_grad(*n.parents[0]);
    n.parents[0]->grad.mat().middleRows(r0, len) += n.grad.mat();
  });
}

}  // namespace illume
