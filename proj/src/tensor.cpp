#include "covalign/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "covalign/errors.hpp"

namespace covalign {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local std::uint64_t g_next_seq = 1;
thread_local bool g_no_grad = false;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    throw ContractViolation("tensor data length " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = g_next_seq++;
  return node;
}

void check_finite(const Node& node) {
  for (double v : node.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + node.op);
    }
  }
}

// Builds an op output. The backward closure is attached only when some input
// participates in differentiation.
Tensor make_op(const char* op, Shape shape, std::vector<double> values, std::vector<NodePtr> inputs,
               std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->seq = g_next_seq++;
  check_finite(*node);
  const bool any = !g_no_grad && std::any_of(inputs.begin(), inputs.end(),
                               [](const NodePtr& in) { return in->requires_grad; });
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

const NodePtr& node_of(const Tensor& t) {
  if (!t.defined()) throw ContractViolation("use of an undefined tensor");
  return t.node();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  }
}

void require_dim(const Tensor& t, std::size_t dim, const char* op) {
  if (t.dim() != dim) {
    throw ContractViolation(std::string(op) + ": expected " + std::to_string(dim) + "-D tensor, got " +
                            shape_str(t.shape()));
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto& in = node_of(x);
  std::vector<double> out(in->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in->data[i]);
  return make_op(op, in->shape, std::move(out), {in}, [deriv](Node& self) {
    Node& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(src.data[i], self.data[i]);
  });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& detail::Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }

Tensor::Tensor() = default;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (const auto extent : shape) {
    if (extent == 0) throw ContractViolation("tensor extents must be positive: " + shape_str(shape));
  }
  auto node = make_leaf(std::move(shape), std::move(values), requires_grad);
  check_finite(*node);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_of(*this)->shape; }

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= dim()) throw ContractViolation("axis out of range for " + shape_str(shape()));
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_of(*this)->data.size(); }

std::span<const double> Tensor::data() const { return node_of(*this)->data; }

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw ContractViolation("mutable_data() on a non-leaf tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractViolation("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_of(*this)->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractViolation("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = on;
}

bool Tensor::is_leaf() const { return !node_of(*this)->backward_fn; }

bool Tensor::has_grad() const { return node_of(*this)->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractViolation("tensor has no gradient buffer");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return node_of(*this)->ensure_grad(); }

void Tensor::zero_grad() {
  auto& g = node_of(*this)->grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::detach() const { return stop_grad(*this); }

Tensor Tensor::clone() const {
  const auto& n = node_of(*this);
  return Tensor(make_leaf(n->shape, n->data, false));
}

// ---------------------------------------------------------------------------
// Ops

Tensor stop_grad(const Tensor& x) {
  const auto& in = node_of(x);
  auto node = make_leaf(in->shape, in->data, false);
  node->op = "stop_grad";
  return Tensor(std::move(node));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto &na = node_of(a), &nb = node_of(b);
  std::vector<double> out(na->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->data[i] + nb->data[i];
  return make_op("add", na->shape, std::move(out), {na, nb}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto &na = node_of(a), &nb = node_of(b);
  std::vector<double> out(na->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->data[i] - nb->data[i];
  return make_op("sub", na->shape, std::move(out), {na, nb}, [](Node& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto &na = node_of(a), &nb = node_of(b);
  std::vector<double> out(na->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->data[i] * nb->data[i];
  return make_op("mul", na->shape, std::move(out), {na, nb}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      auto& g = y.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.data[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  const auto &na = node_of(a), &nb = node_of(b);
  std::vector<double> out(na->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (nb->data[i] == 0.0) throw NumericError("div: division by zero");
    out[i] = na->data[i] / nb->data[i];
  }
  return make_op("div", na->shape, std::move(out), {na, nb}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / y.data[i];
    }
    if (y.requires_grad) {
      auto& g = y.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.data[i] / y.data[i];
    }
  });
}

Tensor scalar_mul(const Tensor& x, double s) {
  return unary("scalar_mul", x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary("add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor log(const Tensor& x) {
  for (double v : node_of(x)->data) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value");
  }
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : node_of(x)->data) {
    if (v < 0.0) throw NumericError("sqrt of negative value");
  }
  return unary("sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) {
    if (y == 0.0) throw NumericError("sqrt: gradient undefined at 0");
    return 0.5 / y;
  });
}

Tensor clamp_min(const Tensor& x, double floor) {
  return unary(
      "clamp_min", x, [floor](double v) { return v > floor ? v : floor; },
      [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

Tensor clamp_max(const Tensor& x, double ceiling) {
  return unary(
      "clamp_max", x, [ceiling](double v) { return v < ceiling ? v : ceiling; },
      [ceiling](double v, double) { return v < ceiling ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  const auto& in = node_of(x);
  double total = 0.0;
  for (double v : in->data) total += v;
  return make_op("sum", {}, {total}, {in}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scalar_mul(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  const auto& in = node_of(x);
  if (shape_numel(shape) != in->data.size()) {
    throw ContractViolation("reshape: " + shape_str(in->shape) + " -> " + shape_str(shape));
  }
  return make_op("reshape", std::move(shape), in->data, {in}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sum_last(const Tensor& x) {
  const auto& in = node_of(x);
  if (in->shape.empty()) throw ContractViolation("sum_last on a scalar");
  const std::size_t n = in->shape.back();
  Shape out_shape(in->shape.begin(), in->shape.end() - 1);
  const std::size_t rows = in->data.size() / n;
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r] += in->data[r * n + j];
  }
  return make_op("sum_last", std::move(out_shape), std::move(out), {in}, [n](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < self.grad.size(); ++r) {
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r];
    }
  });
}

Tensor broadcast_last(const Tensor& x, std::size_t n) {
  if (n == 0) throw ContractViolation("broadcast_last: extent must be positive");
  const auto& in = node_of(x);
  Shape out_shape = in->shape;
  out_shape.push_back(n);
  std::vector<double> out(in->data.size() * n);
  for (std::size_t r = 0; r < in->data.size(); ++r) {
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(r * n), n, in->data[r]);
  }
  return make_op("broadcast_last", std::move(out_shape), std::move(out), {in}, [n](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < g.size(); ++r) {
      for (std::size_t j = 0; j < n; ++j) g[r] += self.grad[r * n + j];
    }
  });
}

Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  require_dim(x, 2, "select_rows");
  if (rows.empty()) throw ContractViolation("select_rows: empty row list");
  const std::size_t n = x.size(0), c = x.size(1);
  const auto& in = node_of(x);
  std::vector<double> out(rows.size() * c);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw ContractViolation("select_rows: row index out of range");
    std::copy_n(in->data.begin() + static_cast<std::ptrdiff_t>(rows[r] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(r * c));
  }
  return make_op("select_rows", {rows.size(), c}, std::move(out), {in}, [rows, c](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t j = 0; j < c; ++j) g[rows[r] * c + j] += self.grad[r * c + j];
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractViolation("concat_cols: no inputs");
  const std::size_t rows = parts.front().dim() == 2 ? parts.front().size(0) : 0;
  std::vector<NodePtr> inputs;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_dim(p, 2, "concat_cols");
    if (p.size(0) != rows) throw ContractViolation("concat_cols: row count mismatch");
    inputs.push_back(node_of(p));
    offsets.push_back(total);
    total += p.size(1);
  }
  std::vector<double> out(rows * total);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t cols = inputs[k]->shape[1];
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(inputs[k]->data.begin() + static_cast<std::ptrdiff_t>(r * cols), cols,
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offsets[k]));
    }
  }
  return make_op("concat_cols", {rows, total}, std::move(out), std::move(inputs),
                 [offsets, rows, total](Node& self) {
                   for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                     Node& in = *self.inputs[k];
                     if (!in.requires_grad) continue;
                     auto& g = in.ensure_grad();
                     const std::size_t cols = in.shape[1];
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[r * total + offsets[k] + c];
                     }
                   }
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_dim(a, 2, "matmul");
  require_dim(b, 2, "matmul");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) {
    throw ContractViolation("matmul: inner dimensions differ " + shape_str(a.shape()) + " * " +
                            shape_str(b.shape()));
  }
  const auto &na = node_of(a), &nb = node_of(b);
  std::vector<double> out(m * n);
  MapMat(out.data(), m, n).noalias() =
      ConstMapMat(na->data.data(), m, k) * ConstMapMat(nb->data.data(), k, n);
  return make_op("matmul", {m, n}, std::move(out), {na, nb}, [m, k, n](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    ConstMapMat g(self.grad.data(), m, n);
    if (x.requires_grad) {
      MapMat(x.ensure_grad().data(), m, k).noalias() += g * ConstMapMat(y.data.data(), k, n).transpose();
    }
    if (y.requires_grad) {
      MapMat(y.ensure_grad().data(), k, n).noalias() += ConstMapMat(x.data.data(), m, k).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_dim(x, 2, "transpose");
  const std::size_t r = x.size(0), c = x.size(1);
  const auto& in = node_of(x);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in->data[i * c + j];
  }
  return make_op("transpose", {c, r}, std::move(out), {in}, [r, c](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    }
  });
}

namespace {

struct ConvGeom {
  std::size_t cin, h, w, cout, k, stride, pad, oh, ow;
};

// cols is [cin*k*k x oh*ow], row-major.
void im2col(const ConvGeom& g, const double* in, double* cols) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(dst, g.ow, 0.0);
            continue;
          }
          const double* src = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeom& g, const double* cols, double* in) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_dim(input, 3, "conv2d input");
  require_dim(kernel, 4, "conv2d kernel");
  if (stride == 0) throw ContractViolation("conv2d: stride must be positive");
  ConvGeom g{input.size(0), input.size(1), input.size(2), kernel.size(0), kernel.size(2), stride, padding, 0, 0};
  if (kernel.size(1) != g.cin) throw ContractViolation("conv2d: kernel input channels differ from input");
  if (kernel.size(3) != g.k || g.k % 2 == 0) throw ContractViolation("conv2d: kernel must be square with odd extent");
  if (g.h + 2 * padding < g.k || g.w + 2 * padding < g.k) throw ContractViolation("conv2d: kernel larger than padded input");
  g.oh = (g.h + 2 * padding - g.k) / stride + 1;
  g.ow = (g.w + 2 * padding - g.k) / stride + 1;

  const auto &ni = node_of(input), &nk = node_of(kernel);
  const std::size_t patch = g.cin * g.k * g.k, plane = g.oh * g.ow;
  std::vector<double> cols(patch * plane);
  im2col(g, ni->data.data(), cols.data());
  std::vector<double> out(g.cout * plane);
  MapMat(out.data(), g.cout, plane).noalias() =
      ConstMapMat(nk->data.data(), g.cout, patch) * ConstMapMat(cols.data(), patch, plane);

  return make_op("conv2d", {g.cout, g.oh, g.ow}, std::move(out), {ni, nk},
                 [g, cols = std::move(cols), patch, plane](Node& self) {
                   Node& in = *self.inputs[0];
                   Node& ker = *self.inputs[1];
                   ConstMapMat grad_out(self.grad.data(), g.cout, plane);
                   if (ker.requires_grad) {
                     MapMat(ker.ensure_grad().data(), g.cout, patch).noalias() +=
                         grad_out * ConstMapMat(cols.data(), patch, plane).transpose();
                   }
                   if (in.requires_grad) {
                     std::vector<double> dcols(patch * plane);
                     MapMat(dcols.data(), patch, plane).noalias() =
                         ConstMapMat(ker.data.data(), g.cout, patch).transpose() * grad_out;
                     col2im_add(g, dcols.data(), in.ensure_grad().data());
                   }
                 });
}

Tensor softmax_channel(const Tensor& logits) {
  require_dim(logits, 3, "softmax_channel");
  const std::size_t n = logits.size(0), plane = logits.size(1) * logits.size(2);
  if (n < 2) throw ContractViolation("softmax_channel: need at least 2 channels");
  const auto& in = node_of(logits);
  std::vector<double> out(in->data.size());
  for (std::size_t p = 0; p < plane; ++p) {
    double mx = in->data[p];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, in->data[c * plane + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double e = std::exp(in->data[c * plane + p] - mx);
      out[c * plane + p] = e;
      z += e;
    }
    for (std::size_t c = 0; c < n; ++c) out[c * plane + p] /= z;
  }
  return make_op("softmax_channel", in->shape, std::move(out), {in}, [n, plane](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t p = 0; p < plane; ++p) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += self.grad[c * plane + p] * self.data[c * plane + p];
      for (std::size_t c = 0; c < n; ++c) {
        const std::size_t i = c * plane + p;
        g[i] += self.data[i] * (self.grad[i] - dot);
      }
    }
  });
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double frac;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double s = std::max(0.0, (static_cast<double>(i) + 0.5) * scale - 0.5);
    const auto lo = std::min(static_cast<std::size_t>(s), in - 1);
    taps[i] = {lo, std::min(lo + 1, in - 1), s - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  require_dim(input, 3, "upsample_bilinear");
  const std::size_t n = input.size(0), h = input.size(1), w = input.size(2);
  if (out_h < h || out_w < w) throw ContractViolation("upsample_bilinear: output smaller than input");
  const auto rows = bilinear_taps(h, out_h);
  const auto cols = bilinear_taps(w, out_w);
  const auto& in = node_of(input);
  std::vector<double> out(n * out_h * out_w);
  for (std::size_t c = 0; c < n; ++c) {
    const double* src = in->data.data() + c * h * w;
    double* dst = out.data() + c * out_h * out_w;
    for (std::size_t r = 0; r < out_h; ++r) {
      const Tap& ty = rows[r];
      for (std::size_t q = 0; q < out_w; ++q) {
        const Tap& tx = cols[q];
        const double top = (1.0 - tx.frac) * src[ty.lo * w + tx.lo] + tx.frac * src[ty.lo * w + tx.hi];
        const double bot = (1.0 - tx.frac) * src[ty.hi * w + tx.lo] + tx.frac * src[ty.hi * w + tx.hi];
        dst[r * out_w + q] = (1.0 - ty.frac) * top + ty.frac * bot;
      }
    }
  }
  return make_op("upsample_bilinear", {n, out_h, out_w}, std::move(out), {in},
                 [rows, cols, n, h, w, out_h, out_w](Node& self) {
                   auto& g = self.inputs[0]->ensure_grad();
                   for (std::size_t c = 0; c < n; ++c) {
                     double* dst = g.data() + c * h * w;
                     const double* src = self.grad.data() + c * out_h * out_w;
                     for (std::size_t r = 0; r < out_h; ++r) {
                       const Tap& ty = rows[r];
                       for (std::size_t q = 0; q < out_w; ++q) {
                         const Tap& tx = cols[q];
                         const double v = src[r * out_w + q];
                         dst[ty.lo * w + tx.lo] += v * (1.0 - ty.frac) * (1.0 - tx.frac);
                         dst[ty.lo * w + tx.hi] += v * (1.0 - ty.frac) * tx.frac;
                         dst[ty.hi * w + tx.lo] += v * ty.frac * (1.0 - tx.frac);
                         dst[ty.hi * w + tx.hi] += v * ty.frac * tx.frac;
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Reverse pass

void backward(const Tensor& loss) {
  const auto& root = node_of(loss);
  if (root->data.size() != 1) throw ContractViolation("backward: loss must be scalar, got " + shape_str(root->shape));
  if (!std::isfinite(root->data[0])) throw NumericError("backward: non-finite loss");
  if (!root->requires_grad) return;
  if (!root->backward_fn) {
    root->ensure_grad()[0] += 1.0;
    return;
  }

  std::vector<Node*> interior;
  std::unordered_set<Node*> seen{root.get()};
  std::vector<Node*> stack{root.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (n->backward_fn) interior.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(interior.begin(), interior.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
  for (Node* n : interior) n->grad.assign(n->data.size(), 0.0);
  root->grad[0] = 1.0;
  for (Node* n : interior) n->backward_fn(*n);
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h) {
  Tensor x = point.clone();
  x.set_requires_grad(true);
  const Tensor y = f(x);
  if (y.numel() != 1) throw ContractViolation("grad_check: function must be scalar-valued");
  backward(y);
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor plus = point.clone();
    Tensor minus = point.clone();
    plus.mutable_data()[i] += h;
    minus.mutable_data()[i] -= h;
    const double fd = (f(plus).item() - f(minus).item()) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

}  // namespace covalign
