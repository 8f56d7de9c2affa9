#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A graph is built implicitly by calling the ops below on Var handles and is
// owned by the handles themselves (no global tape), so separate graphs can be
// built on separate threads. A single graph must stay on one thread.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "vprda/tensor.hpp"

namespace vprda {

struct Node;

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const;
  /// Accumulated gradient; zeros of value's shape if nothing flowed here.
  Tensor grad() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }

  Node* node() const { return node_.get(); }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Tensor value;
  Tensor grad;  // empty until the first contribution arrives
  std::vector<Var> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

/// Leaf holding a value; gradients accumulate into it during backward().
Var leaf(Tensor value);

/// Interior node for ops defined outside this module. `backward` reads
/// self.grad and adds into each parent's grad_buffer().
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

/// Propagates d(root)/d(node) to every node reachable from a scalar root.
/// Shared subexpressions receive the sum of all incoming contributions.
void backward(const Var& root);

namespace ops {

inline constexpr double kNormEpsilon = 1e-12;

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var reshape(const Var& a, Shape shape);

/// x[N x K] + b[K], bias broadcast across rows.
Var add_row_bias(const Var& x, const Var& b);
/// x[N x D] with row i multiplied by s[i].
Var scale_rows(const Var& x, const Var& s);
/// Column sums of x[N x K] -> [K].
Var col_sum(const Var& x);
Var sum(const Var& a);
Var mean(const Var& a);
/// Sum of squared entries -> scalar.
Var sum_squares(const Var& a);

Var relu(const Var& a);
/// ln(1 + e^x) computed as max(x, 0) + ln(1 + e^-|x|).
Var softplus(const Var& a);
Var exp(const Var& a);
/// Softmax over the last axis, shifted by the row max.
Var softmax(const Var& a);

/// Each row along the last axis divided by max(||row||, kNormEpsilon).
/// A zero row maps to a zero row.
Var l2_normalize(const Var& a);

/// Per-location affine map: fm[H x W x Din], w[Din x Dout], b[Dout].
Var conv2d_1x1(const Var& fm, const Var& w, const Var& b);
/// Same-padding 3x3 convolution: fm[H x W x Din], w[3 x 3 x Din x Dout], b[Dout].
Var conv2d_3x3(const Var& fm, const Var& w, const Var& b);

/// Rows of x[N x D] stacked in the given order.
Var gather_rows(const Var& x, std::span<const std::size_t> rows);
/// Vertical concatenation of [Ni x D] blocks.
Var concat_rows(std::span<const Var> parts);

}  // namespace ops
}  // namespace vprda
