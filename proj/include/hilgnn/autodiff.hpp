#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace hilgnn::ad {

/// Dense row-major-indexed real tensor of rank <= 2. Vectors are n x 1 and
/// scalars 1 x 1.
using Tensor = Eigen::MatrixXd;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
};

/// Records primitive ops in execution order; backward() replays them in
/// reverse. Single-threaded; distinct tapes are independent.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Var constant(Tensor value);
  /// Differentiable input. Its gradient is available after backward().
  Var variable(Tensor value);

  [[nodiscard]] const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of the last backward() loss w.r.t. `v`; zeros if unreachable.
  [[nodiscard]] Tensor grad(Var v) const;

  /// Reverse sweep from a 1 x 1 loss node. Resets previous gradients.
  void backward(Var loss);

  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  // Used by primitives.
  Var record(Tensor value, std::vector<int> inputs, BackwardFn fn, const char* op);
  [[nodiscard]] bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  void accumulate(int id, const Tensor& g);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Primitives. Shapes follow Eigen conventions; every op checks them and
// throws ShapeError, and throws NumericError on a non-finite result.

Var matmul(Var a, Var b);
/// x * w^T, for weights stored (out x in).
Var linear(Var x, Var w);
Var add(Var a, Var b);
/// Adds a 1 x m row to every row of a (n x m).
Var add_row(Var a, Var row);
Var scale(Var a, double c);
/// Concatenation along the last (column) dimension.
Var concat(std::span<const Var> parts);
Var concat(std::initializer_list<Var> parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
/// Negative branch slope applies at exactly zero.
Var leaky_relu(Var a, double slope = 0.2);
Var relu(Var a);
Var exp(Var a);
/// Softmax of a column vector within segments: entries with equal
/// `segment[e]` are normalized together. `segment` values lie in [0, n).
Var segment_softmax(Var logits, std::span<const int> segment, Eigen::Index n);
/// Each row divided by (its L2 norm + eps).
Var l2_normalize(Var a, double eps = 1e-12);
/// Mean of squared differences against a constant target; 1 x 1.
Var mse(Var a, const Tensor& target);
/// sum(w .* (a - target)^2); 1 x 1.
Var weighted_sq_error(Var a, const Tensor& target, const Tensor& weights);
Var sum(Var a);
/// Elementwise relu(lower - a)^2 + relu(a - upper)^2.
Var hinge_sq(Var a, const Tensor& lower, const Tensor& upper);
Var gather_rows(Var a, std::span<const int> index);
/// Row r of the result is the sum of rows e of `a` with index[e] == r.
Var scatter_add_rows(Var a, std::span<const int> index, Eigen::Index n);
/// Multiplies row e of a (E x m) by s(e) for a column s (E x 1).
Var row_scale(Var a, Var s);

/// Branch data for apparent-power magnitudes from bus polar voltages.
struct BranchSet {
  std::vector<int> from, to;
  Eigen::VectorXcd yff, yft, ytf, ytt;
  [[nodiscard]] Eigen::Index size() const { return static_cast<Eigen::Index>(from.size()); }
};

/// |S| at the from and to ends of every branch (m x 2) given bus states
/// `vm_va` (n x 2: magnitude, angle).
Var branch_apparent_power(Var vm_va, const BranchSet& branches);

}  // namespace hilgnn::ad
