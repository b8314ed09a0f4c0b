#include "sdvlm/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace sdvlm {

std::string Dims::str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < d.size(); ++i) {
    if (i) os << "x";
    os << d[i];
  }
  os << "]";
  return os.str();
}

double Param::grad_norm() const {
  double s = 0.0;
  for (double g : grad) s += g * g;
  return std::sqrt(s);
}

const Dims& Tensor::dims() const { return tape->node(id).dims; }
const std::vector<double>& Tensor::val() const { return tape->node(id).val; }
bool Tensor::requires_grad() const { return tape->node(id).requires_grad; }

const std::vector<double>& Tensor::grad() const {
  // grad of a non-grad node reads as all-zeros
  static const std::vector<double> empty;
  const auto& n = tape->node(id);
  if (!n.requires_grad && n.grad.empty()) {
    auto& mut = const_cast<Tape::Node&>(n);
    mut.grad.assign(n.val.size(), 0.0);
  }
  return n.grad;
}

double Tensor::item() const {
  const auto& n = tape->node(id);
  if (n.val.size() != 1) {
    throw std::invalid_argument("item() requires a scalar, got " + n.dims.str());
  }
  return n.val[0];
}

Tensor Tape::constant(Dims dims, std::vector<double> val) {
  if (dims.numel() != val.size()) {
    throw std::invalid_argument("constant: " + dims.str() + " does not hold " +
                                std::to_string(val.size()) + " values");
  }
  nodes_.push_back(Node{std::move(dims), std::move(val), {}, false, true, nullptr});
  return Tensor{this, int(nodes_.size()) - 1};
}

Tensor Tape::leaf(Param& p) {
  Tensor t = leaf(p.dims, p.val, grad_enabled_ && p.trainable);
  bindings_.emplace_back(t.id, &p);
  return t;
}

Tensor Tape::leaf(Dims dims, std::vector<double> val, bool requires_grad) {
  if (dims.numel() != val.size()) {
    throw std::invalid_argument("leaf: " + dims.str() + " does not hold " +
                                std::to_string(val.size()) + " values");
  }
  bool rg = grad_enabled_ && requires_grad;
  size_t n = val.size();
  nodes_.push_back(Node{std::move(dims), std::move(val),
                        std::vector<double>(rg ? n : 0, 0.0), rg, true, nullptr});
  // frozen leaves still expose a zero grad buffer so "grad stays zero" is a
  // checkable statement rather than a missing field
  if (!rg) nodes_.back().grad.assign(n, 0.0);
  return Tensor{this, int(nodes_.size()) - 1};
}

Tensor Tape::make_node(Dims dims, std::vector<double> val, bool requires_grad,
                       std::function<void(Tape&)> backward) {
  bool rg = grad_enabled_ && requires_grad;
  size_t n = val.size();
  nodes_.push_back(Node{std::move(dims), std::move(val),
                        std::vector<double>(rg ? n : 0, 0.0), rg, false,
                        rg ? std::move(backward) : nullptr});
  return Tensor{this, int(nodes_.size()) - 1};
}

bool Tape::any_requires_grad(std::initializer_list<Tensor> xs) const {
  if (!grad_enabled_) return false;
  for (const Tensor& x : xs) {
    if (node(x.id).requires_grad) return true;
  }
  return false;
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss from another tape");
  Node& ln = node(loss.id);
  if (ln.val.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + ln.dims.str());
  }
  if (!ln.requires_grad) return;  // nothing reachable
  // Only leaf grads accumulate across calls; intermediates are scratch.
  for (Node& n : nodes_) {
    if (!n.is_leaf) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }
  ln.grad[0] += 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[size_t(i)];
    if (n.requires_grad && n.backward) n.backward(*this);
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

void Tape::collect_param_grads() {
  for (auto& [id, p] : bindings_) {
    const Node& n = node(id);
    if (!n.requires_grad) continue;
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
  }
}

std::vector<std::pair<Param*, std::vector<double>>> Tape::param_grads() const {
  std::vector<std::pair<Param*, std::vector<double>>> out;
  out.reserve(bindings_.size());
  for (auto& [id, p] : bindings_) {
    const Node& n = node(id);
    if (!n.requires_grad) continue;
    out.emplace_back(p, n.grad);
  }
  return out;
}

void throw_shape_mismatch(const char* op, const Dims& a, const Dims& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.str() +
                              " vs " + b.str());
}

}  // namespace sdvlm
