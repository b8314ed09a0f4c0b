#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace sdvlm {

// Dense row-major tensors, rank 0..2. Scalars are {}, vectors {n},
// matrices {r, c}.
struct Dims {
  std::vector<int> d;

  Dims() = default;
  Dims(std::initializer_list<int> il) : d(il) {}
  explicit Dims(std::vector<int> v) : d(std::move(v)) {}

  int rank() const { return int(d.size()); }
  int rows() const { return rank() == 2 ? d[0] : 1; }
  int cols() const { return rank() == 2 ? d[1] : (rank() == 1 ? d[0] : 1); }
  size_t numel() const {
    size_t n = 1;
    for (int x : d) n *= size_t(x);
    return n;
  }
  bool operator==(const Dims& o) const { return d == o.d; }
  std::string str() const;
};

// Trainable (or frozen) tensor living outside any tape. Gradients accumulate
// here across backward passes until the optimizer consumes them.
struct Param {
  std::string name;
  Dims dims;
  std::vector<double> val;
  std::vector<double> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Dims dm, bool train = true)
      : name(std::move(n)), dims(std::move(dm)), val(dims.numel(), 0.0),
        grad(dims.numel(), 0.0), trainable(train) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
  double grad_norm() const;
};

class Tape;

// Handle into a tape node; cheap to copy, valid for the tape's lifetime.
struct Tensor {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Dims& dims() const;
  const std::vector<double>& val() const;
  const std::vector<double>& grad() const;
  bool requires_grad() const;
  double item() const;
};

// Reverse-mode tape: ops append nodes on forward (insertion order is the
// topological order) and backward replays closures in reverse. One tape per
// forward pass; parameters persist outside via Param bindings.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Tensor constant(Dims dims, std::vector<double> val);
  Tensor scalar(double v) { return constant(Dims{}, {v}); }
  Tensor zeros(Dims dims) { return constant(dims, std::vector<double>(dims.numel(), 0.0)); }
  // Leaf bound to a Param: values are copied in; collect_param_grads() adds
  // the node gradient back into Param::grad.
  Tensor leaf(Param& p);
  // Leaf with explicit requires_grad and no Param binding (tests).
  Tensor leaf(Dims dims, std::vector<double> val, bool requires_grad);

  // dLoss/dLeaf for every requires_grad node reachable from loss. Repeated
  // calls accumulate (gradients are only cleared by zero_grad()).
  void backward(const Tensor& loss);
  void zero_grad();
  void collect_param_grads();

  // Per-binding gradients in binding order, for deterministic cross-sample
  // accumulation independent of threading.
  std::vector<std::pair<Param*, std::vector<double>>> param_grads() const;

  size_t size() const { return nodes_.size(); }

  struct Node {
    Dims dims;
    std::vector<double> val;
    std::vector<double> grad;  // allocated only when requires_grad
    bool requires_grad = false;
    bool is_leaf = false;  // leaf grads accumulate across backward calls;
                           // intermediate grads are reset by each backward
    std::function<void(Tape&)> backward;
  };

  Node& node(int id) { return nodes_[size_t(id)]; }
  const Node& node(int id) const { return nodes_[size_t(id)]; }

  // Used by ops: push an output node; requires_grad is or-ed over inputs and
  // masked by grad_enabled.
  Tensor make_node(Dims dims, std::vector<double> val, bool requires_grad,
                   std::function<void(Tape&)> backward);
  bool any_requires_grad(std::initializer_list<Tensor> xs) const;

 private:
  std::deque<Node> nodes_;
  std::vector<std::pair<int, Param*>> bindings_;
  bool grad_enabled_;
};

[[noreturn]] void throw_shape_mismatch(const char* op, const Dims& a, const Dims& b);

}  // namespace sdvlm
