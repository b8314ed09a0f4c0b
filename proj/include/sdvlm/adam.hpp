#pragma once

#include "sdvlm/tensor.hpp"

#include <unordered_map>
#include <vector>

namespace sdvlm {

// Per-parameter Adam moments, keyed by Param address. Moments are allocated
// lazily on the first step so the optimizer can be handed new params.
struct AdamState {
  struct Moments {
    std::vector<double> m, v;
    long step = 0;
  };
  std::unordered_map<const Param*, Moments> slots;
};

// Standard Adam update with bias correction, applied in place to p.val from
// p.grad. Throws std::invalid_argument for lr <= 0.
void adam_step(Param& p, AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

// Convenience: step every trainable param, then zero their grads.
void adam_step_all(std::vector<Param*>& params, AdamState& state, double lr,
                   double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

}  // namespace sdvlm
