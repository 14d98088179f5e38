#pragma once

#include <cstdint>
#include <vector>

#include "fewshot/tensor.hpp"

namespace fewshot {

// SGD with momentum and L2 weight decay applied at the update:
//   v <- momentum * v + g
//   p <- p - lr * (v + weight_decay * p)
// Batchnorm gamma/beta (and any other no-decay tensors) skip the decay term.
template <typename S>
class SgdOptimizer {
 public:
  struct Item {
    Tensor<S>* param;
    const Tensor<S>* grad;
    bool decay;
  };

  SgdOptimizer(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {
    if (momentum < 0.0 || momentum >= 1.0)
      throw ConfigError("momentum must be in [0,1), got " + std::to_string(momentum));
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  }

  // Items must arrive in the same order every call; velocity is keyed by
  // position.
  void step(const std::vector<Item>& items, double lr) {
    if (velocity_.empty()) {
      velocity_.reserve(items.size());
      for (const auto& it : items) velocity_.emplace_back(it.param->shape());
    }
    if (velocity_.size() != items.size())
      throw ShapeError("optimizer step: parameter list changed size");
    const S mu = S(momentum_), wd = S(weight_decay_), eta = S(lr);
    for (std::size_t i = 0; i < items.size(); ++i) {
      Tensor<S>& p = *items[i].param;
      const Tensor<S>& g = *items[i].grad;
      Tensor<S>& v = velocity_[i];
      if (!p.same_shape(g) || !p.same_shape(v))
        throw ShapeError("optimizer step: gradient shape mismatch");
      const S decay = items[i].decay ? wd : S(0);
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        v[j] = mu * v[j] + g[j];
        p[j] -= eta * (v[j] + decay * p[j]);
      }
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor<S>> velocity_;
};

}  // namespace fewshot
