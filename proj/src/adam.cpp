#include "sdvlm/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace sdvlm {

void adam_step(Param& p, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  if (lr <= 0.0) throw std::invalid_argument("adam_step: lr must be positive");
  auto& mom = state.slots[&p];
  if (mom.m.empty()) {
    mom.m.assign(p.val.size(), 0.0);
    mom.v.assign(p.val.size(), 0.0);
  }
  ++mom.step;
  double bc1 = 1.0 - std::pow(beta1, double(mom.step));
  double bc2 = 1.0 - std::pow(beta2, double(mom.step));
  for (size_t i = 0; i < p.val.size(); ++i) {
    double g = p.grad[i];
    mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
    mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
    double mhat = mom.m[i] / bc1;
    double vhat = mom.v[i] / bc2;
    p.val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

void adam_step_all(std::vector<Param*>& params, AdamState& state, double lr,
                   double beta1, double beta2, double eps) {
  for (Param* p : params) {
    if (!p->trainable) continue;
    adam_step(*p, state, lr, beta1, beta2, eps);
    p->zero_grad();
  }
}

}  // namespace sdvlm
