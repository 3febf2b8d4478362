#pragma once

// Dense 64-bit tensors with define-by-run reverse-mode differentiation.
//
// Every op that has at least one input with requires_grad() records a node
// carrying its inputs and a closure that pushes the output gradient back to
// them. Nodes are stamped with a per-thread monotonically increasing sequence
// number at creation; backward() visits the reachable nodes in strictly
// decreasing sequence order, i.e. the exact reverse of execution order. The
// recorded graph is the tape: it lives as long as the output tensor that
// closes over it and is rebuilt by every forward pass.
//
// Gradient accumulation contract: leaf gradients accumulate additively across
// backward() calls until zero_grad(). Intermediate gradients are scratch and
// are reset at the start of each backward() call.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace covalign {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable access for leaf tensors only (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Returns a tensor with the same values that is cut from the tape.
  Tensor detach() const;

  /// Deep copy of values (no gradient, no history).
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs[i]->grad.
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// While alive, ops on this thread record no tape (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Forward value passes through unchanged; no gradient reaches producers of x.
Tensor stop_grad(const Tensor& x);

// Elementwise. Binary ops require identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor relu(const Tensor& x);
/// Requires strictly positive input; throws NumericError otherwise.
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
/// Requires non-negative input; gradient at exactly 0 is a NumericError.
Tensor sqrt(const Tensor& x);
/// max(x, floor); zero gradient where the floor is active.
Tensor clamp_min(const Tensor& x, double floor);
/// min(x, ceiling); zero gradient where the ceiling is active.
Tensor clamp_max(const Tensor& x, double ceiling);

// Reductions to a scalar (shape {}).
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Shape manipulation.
Tensor reshape(const Tensor& x, Shape shape);
/// [..., n] -> [...]: sums the last axis.
Tensor sum_last(const Tensor& x);
/// [...] -> [..., n]: repeats each value n times along a new last axis.
Tensor broadcast_last(const Tensor& x, std::size_t n);
/// Gathers rows of a 2-D tensor: out[r] = x[rows[r]]. Rows may repeat.
Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows);
/// Concatenates 2-D tensors [R x Ci] along columns into [R x sum Ci].
Tensor concat_cols(const std::vector<Tensor>& parts);

// Linear algebra on 2-D tensors.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

/// Cross-correlation. input [Cin x H x W], kernel [Cout x Cin x k x k], k odd.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);

/// Softmax over axis 0 of an [N x H x W] tensor, N >= 2, max-subtracted.
Tensor softmax_channel(const Tensor& logits);

/// Bilinear resize of [N x h x w] to [N x out_h x out_w], align_corners = false.
///
/// For output row r the source coordinate is
///   s = max(0, (r + 0.5) * h / out_h - 0.5),  r0 = floor(s),
///   r1 = min(r0 + 1, h - 1),                  lambda = s - r0,
/// and likewise for columns; the output is the usual tensor-product blend of
/// the four neighbours. Requires out_h >= h and out_w >= w.
Tensor upsample_bilinear(const Tensor& input, std::size_t out_h, std::size_t out_w);

/// Populates grad() of every requires_grad leaf reachable from the scalar loss.
void backward(const Tensor& loss);

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
/// f must be a scalar function; point is cloned, never modified.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h = 1e-5);

}  // namespace covalign
