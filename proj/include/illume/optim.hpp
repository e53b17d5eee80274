#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>

#include "illume/nn.hpp"

namespace illume {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam without weight decay. A zero gradient therefore yields an exactly
// zero update (m and v stay zero, and x - 0 is bitwise x), which is what
// lets frozen rows inside a trainable table hold still.
template <typename S>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  AdamConfig& config() { return cfg_; }

  // The filter narrows the update to a parameter subset (by name) so two
  // optimizers over one store can own disjoint groups; grads outside the
  // subset are ignored, not applied.
  void step(ParamStore<S>& store,
            const std::function<bool(const std::string&)>& filter = {}) {
    ++t_;
    const S b1 = static_cast<S>(cfg_.beta1);
    const S b2 = static_cast<S>(cfg_.beta2);
    const S eps = static_cast<S>(cfg_.eps);
    const S c1 = static_cast<S>(1.0 / (1.0 - std::pow(cfg_.beta1, t_)));
    const S c2 = static_cast<S>(1.0 / (1.0 - std::pow(cfg_.beta2, t_)));
    const S lr = static_cast<S>(cfg_.lr);
    for (const auto& p : store.items()) {
      if (!p->trainable) continue;
      if (filter && !filter(p->name)) continue;
      auto& st = state_[p->name];
      if (!st.m.defined()) {
        st.m = Tensor<S>::zeros(p->value.dims());
        st.v = Tensor<S>::zeros(p->value.dims());
      }
      auto g = p->grad.array();
      st.m.array() = b1 * st.m.array() + (S(1) - b1) * g;
      st.v.array() = b2 * st.v.array() + (S(1) - b2) * g.square();
      p->value.array() -=
          lr * (st.m.array() * c1) / ((st.v.array() * c2).sqrt() + eps);
    }
  }

  void reset() {
    state_.clear();
    t_ = 0;
  }

 private:
  struct State {
    Tensor<S> m, v;
  };
  AdamConfig cfg_;
  std::unordered_map<std::string, State> state_;
  long t_ = 0;
};

}  // namespace illume
