#pragma once

#include "sdvlm/tensor.hpp"

namespace sdvlm {

// Forward + documented backward rule for every differentiable op. All ops
// validate shapes and throw std::invalid_argument naming both shapes.

// [m×k]·[k×n] -> [m×n]; da = dout·bᵀ, db = aᵀ·dout.
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise, same shape; d/da = d/db = dout.
Tensor add(const Tensor& a, const Tensor& b);
// d/da = dout, d/db = -dout.
Tensor sub(const Tensor& a, const Tensor& b);
// Hadamard; da = dout ⊙ b, db = dout ⊙ a.
Tensor mul(const Tensor& a, const Tensor& b);
// da = c · dout.
Tensor scale(const Tensor& a, double c);
// [m×n] + row vector [n] broadcast over rows; db = column-sum of dout.
Tensor add_bias(const Tensor& a, const Tensor& bias);

// axis 0 stacks rows, axis 1 stacks columns; backward splits dout.
Tensor concat(const Tensor& a, const Tensor& b, int axis);
// take `len` indices starting at `start` along axis; backward scatters dout
// into the sliced range, zero elsewhere.
Tensor slice(const Tensor& a, int axis, int start, int len);
// gather rows of a [V×d] table by index; backward scatter-adds into d_table.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// [m×n] -> [n×m]; da = transpose(dout).
Tensor transpose(const Tensor& a);

// scalar sum of all elements; da = dout broadcast.
Tensor sum_all(const Tensor& a);
// scalar mean; da = dout / numel.
Tensor mean_all(const Tensor& a);

// tanh-approximate gelu; backward uses the closed-form derivative.
Tensor gelu(const Tensor& a);

// Row-wise layer norm over the last dimension with affine γ, β.
// y = (x - μ)/√(σ² + ε) · γ + β; standard backward.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Max-subtracted softmax along `axis` (default last). Backward:
// dx = s ⊙ (dout - Σ dout ⊙ s) per row/column.
Tensor softmax(const Tensor& x, int axis = -1);

// Mean over rows of KL(softmax(p_logits) ‖ softmax(q_logits)). The p side is
// the teacher and is treated as detached: gradient flows to q_logits only.
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits);

// Mean squared error; a is the (detached) teacher, gradient flows to b only:
// db = 2(b - a)/n.
Tensor mse(const Tensor& a, const Tensor& b);

// Mean over selected rows of -log softmax(logits)[row, target]. Backward is
// (softmax - onehot)/|rows| at the selected rows.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<int>& rows);

// Cut the graph: constant with the same values.
Tensor detach(const Tensor& a);

}  // namespace sdvlm
