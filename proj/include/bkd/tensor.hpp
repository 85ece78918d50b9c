#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace bkd {

// Dimension mismatches between operands.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values produced by a forward operation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

// Suppresses gradient recording on this thread while alive. Forward values
// are unchanged; the ops simply skip building backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Per-backward-pass gradient buffers, keyed by node. Confined to one thread.
struct GradStore {
  std::unordered_map<const Node*, std::vector<double>> buffers;

  std::vector<double>& accum(const Node* n, std::size_t size);
  const std::vector<double>* find(const Node* n) const;
};

using BackwardFn = std::function<void(const std::vector<double>& out_grad, GradStore& store)>;

struct Node {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;  // differentiation leaf
  bool needs_grad = false;     // leaf or downstream of one
  std::uint64_t seq = 0;       // creation order; fixes the backward sweep order
  std::vector<NodePtr> parents;
  BackwardFn backward_fn;

  // lazily materialized transpose of a rank-2 node, shared by every
  // matmul_nt consumer (frozen teacher weights are reused thousands of times)
  std::vector<double> transposed;
  std::once_flag transposed_once;
};

}  // namespace detail

// Dense row-major tensor of 64-bit floats with value semantics (copies share
// immutable storage). Operations record their gradient rules whenever an
// operand depends on a requires_grad leaf.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor zeros_like(const Tensor& t);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int size() const;
  int rows() const;  // rank-2 only
  int cols() const;  // rank-2 only
  double value() const;  // size-1 only
  double at(int i) const;
  double at(int r, int c) const;
  const std::vector<double>& data() const;

  Tensor& set_requires_grad(bool on = true);
  bool requires_grad() const;
  std::uint64_t id() const;

  // Same values as a fresh constant leaf, cut off from the recorded graph.
  Tensor detach() const;

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

// ----------------------------------------------------------------------
// primitives (each records gradients for both operands where applicable)
// ----------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a [m x k] times b [n x k] transposed; equivalent to matmul(a, transpose(b))
// without materializing the transpose
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// [n x d] + [d], the one permitted broadcast
Tensor add_bias_row(const Tensor& a, const Tensor& bias);
Tensor relu(const Tensor& a);
Tensor tanh_act(const Tensor& a);
Tensor log_e(const Tensor& a);
Tensor exp_e(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
Tensor softmax(const Tensor& logits, int axis);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor gather_rows(const Tensor& a, const std::vector<int>& indices);
// one element per row: out[r] = a[r, indices[r]]
Tensor take_per_row(const Tensor& a, const std::vector<int>& indices);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Gradients of a backward pass, keyed by leaf. Leaves the loss never touched
// report a zero gradient.
class GradMap {
 public:
  bool contains(const Tensor& leaf) const;
  Tensor grad_of(const Tensor& leaf) const;

  void insert(std::uint64_t leaf_id, Tensor grad);

 private:
  std::unordered_map<std::uint64_t, Tensor> grads_;
};

// Reverse-mode sweep from a scalar loss. Deterministic: nodes are processed
// in reverse creation order, so identical op sequences accumulate in an
// identical order.
GradMap backward(const Tensor& loss);

}  // namespace bkd
