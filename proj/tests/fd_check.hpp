#pragma once

// Finite-difference gradient oracle. Independent of the library's backward
// pass: the numeric side only ever calls forward evaluations on no-grad tapes.

#include "sdvlm/tensor.hpp"

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

namespace fdcheck {

struct Leaf {
  sdvlm::Dims dims;
  std::vector<double> val;
};

struct Report {
  double max_rel_err = 0.0;
  size_t checked = 0;
};

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// build(tape, leaves) must record a scalar loss. Analytic gradients come from
// one backward pass; each leaf element is then perturbed by ±eps and the loss
// re-evaluated on a fresh no-grad tape (central differences).
inline Report check(
    const std::function<sdvlm::Tensor(sdvlm::Tape&, const std::vector<sdvlm::Tensor>&)>& build,
    const std::vector<Leaf>& leaves, double eps = 1e-5) {
  using namespace sdvlm;

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Tensor> xs;
    xs.reserve(leaves.size());
    for (const Leaf& l : leaves) xs.push_back(tape.leaf(l.dims, l.val, true));
    Tensor loss = build(tape, xs);
    tape.backward(loss);
    for (const Tensor& x : xs) analytic.push_back(x.grad());
  }

  auto eval = [&](const std::vector<Leaf>& ls) {
    Tape tape(false);
    std::vector<Tensor> xs;
    xs.reserve(ls.size());
    for (const Leaf& l : ls) xs.push_back(tape.leaf(l.dims, l.val, true));
    return build(tape, xs).item();
  };

  Report rep;
  std::vector<Leaf> work = leaves;
  for (size_t li = 0; li < leaves.size(); ++li) {
    for (size_t k = 0; k < leaves[li].val.size(); ++k) {
      double orig = work[li].val[k];
      work[li].val[k] = orig + eps;
      double fp = eval(work);
      work[li].val[k] = orig - eps;
      double fm = eval(work);
      work[li].val[k] = orig;
      double fd = (fp - fm) / (2.0 * eps);
      rep.max_rel_err = std::max(rep.max_rel_err, rel_err(analytic[li][k], fd));
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace fdcheck
