#pragma once

#include <cstdint>
#include <vector>

#include "fewshot/graph.hpp"
#include "fewshot/ops.hpp"

namespace fewshot {

struct LossConfig {
  double lambda = 0.1;  // fit/generalization trade-off, in [0,1]

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0))
      throw ConfigError("lambda must be in [0,1], got " + std::to_string(lambda));
  }
};

// Fit loss: mean multi-class cross-entropy of the auxiliary head over seen
// classes. Reduces to the binary form when there are two classes.
template <typename S>
Var<S> fit_loss(Var<S> aux_logits, std::vector<std::int32_t> seen_labels) {
  return nll_mean(log_softmax(aux_logits), std::move(seen_labels));
}

// Generalization loss: mean -log p(true class) over query points, taken
// directly from log-posterior rows (no exp/log round trip).
template <typename S>
Var<S> generalization_loss(Var<S> log_posterior_rows, std::vector<std::int32_t> query_labels) {
  return nll_mean(log_posterior_rows, std::move(query_labels));
}

// Balance loss: L_g + lambda * L_CE. At lambda = 0 this is bit-exactly L_g
// and the fit term receives zero gradient.
template <typename S>
Var<S> balance_loss(Var<S> l_g, Var<S> l_ce, const LossConfig& cfg) {
  cfg.validate();
  return add(l_g, scale(l_ce, S(cfg.lambda)));
}

}  // namespace fewshot
