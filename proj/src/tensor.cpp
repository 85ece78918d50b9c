#include "bkd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <thread>

namespace bkd {

namespace detail {

std::vector<double>& GradStore::accum(const Node* n, std::size_t size) {
  auto it = buffers.find(n);
  if (it == buffers.end()) {
    it = buffers.emplace(n, std::vector<double>(size, 0.0)).first;
  }
  return it->second;
}

const std::vector<double>* GradStore::find(const Node* n) const {
  auto it = buffers.find(n);
  return it == buffers.end() ? nullptr : &it->second;
}

}  // namespace detail

using detail::GradStore;
using detail::Node;
using detail::NodePtr;

namespace {

std::atomic<std::uint64_t> g_seq{1};

thread_local int g_no_grad_depth = 0;

int shape_product(const Shape& shape) {
  int n = 1;
  for (int d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << "]";
  return os.str();
}

void check_finite(const std::vector<double>& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

NodePtr make_leaf(Shape shape, std::vector<double> values) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return node;
}

bool recording_enabled() {
  return g_no_grad_depth == 0;
}

bool any_needs_grad(const std::vector<NodePtr>& parents) {
  if (!recording_enabled()) {
    return false;
  }
  for (const auto& p : parents) {
    if (p->needs_grad || p->requires_grad) {
      return true;
    }
  }
  return false;
}

Tensor make_op(Shape shape, std::vector<double> values, std::vector<NodePtr> parents,
               detail::BackwardFn backward_fn, const char* op) {
  check_finite(values, op);
  auto node = make_leaf(std::move(shape), std::move(values));
  if (any_needs_grad(parents)) {
    node->needs_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(node);
}

// row-major transpose of a rank-2 node, computed once
const std::vector<double>& transposed_values(const NodePtr& node) {
  std::call_once(node->transposed_once, [&node] {
    const int n = node->shape[0], d = node->shape[1];
    node->transposed.resize(node->values.size());
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < d; ++c) {
        node->transposed[static_cast<std::size_t>(c) * n + r] =
            node->values[static_cast<std::size_t>(r) * d + c];
      }
    }
  });
  return node->transposed;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// ------------------------------------------------------------------
// matmul kernels; row-major, accumulation order fixed (p ascending),
// large products split across threads by output row block
// ------------------------------------------------------------------

unsigned hw_threads() {
  static const unsigned n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

constexpr long kParallelFlops = 1 << 22;

template <typename Fn>
void parallel_rows(int m, long flops, Fn&& fn) {
  const unsigned want = hw_threads();
  if (flops < kParallelFlops || want < 2 || m < 2) {
    fn(0, m);
    return;
  }
  const unsigned t = std::min<unsigned>(want, static_cast<unsigned>(m));
  std::vector<std::thread> workers;
  workers.reserve(t);
  const int chunk = (m + static_cast<int>(t) - 1) / static_cast<int>(t);
  for (unsigned i = 0; i < t; ++i) {
    const int lo = static_cast<int>(i) * chunk;
    const int hi = std::min(m, lo + chunk);
    if (lo >= hi) {
      break;
    }
    workers.emplace_back([lo, hi, &fn] { fn(lo, hi); });
  }
  for (auto& w : workers) {
    w.join();
  }
}

// C[m x n] += A[m x k] * B[k x n]
void mm_nn_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
               int m, int k, int n) {
  parallel_rows(m, 2L * m * k * n, [=](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      const double* __restrict arow = a + static_cast<std::size_t>(i) * k;
      double* __restrict crow = c + static_cast<std::size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* __restrict brow = b + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) {
          crow[j] += av * brow[j];
        }
      }
    }
  });
}

// C[m x n] += A[m x k] * B[n x k]^T  (dot of contiguous rows)
void mm_nt_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
               int m, int k, int n) {
  parallel_rows(m, 2L * m * k * n, [=](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      const double* __restrict arow = a + static_cast<std::size_t>(i) * k;
      double* __restrict crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* __restrict brow = b + static_cast<std::size_t>(j) * k;
        double acc = 0.0;
        for (int p = 0; p < k; ++p) {
          acc += arow[p] * brow[p];
        }
        crow[j] += acc;
      }
    }
  });
}

// C[m x n] += A[k x m]^T * B[k x n]; i-outer so each output row is written
// once and B stays cache-hot
void mm_tn_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
               int m, int k, int n) {
  parallel_rows(m, 2L * m * k * n, [=](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      double* __restrict crow = c + static_cast<std::size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        const double av = a[static_cast<std::size_t>(p) * m + i];
        const double* __restrict brow = b + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) {
          crow[j] += av * brow[j];
        }
      }
    }
  });
}

Tensor elementwise(const Tensor& a, const char* op, double (*fwd)(double),
                   double (*dfn)(double /*x*/, double /*y*/)) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = fwd(x[i]);
  }
  NodePtr an = a.node();
  std::vector<double> saved;
  if (any_needs_grad({an})) {
    saved = out;
  }
  return make_op(
      a.shape(), std::move(out), {an},
      [an, saved = std::move(saved), dfn](const std::vector<double>& g, GradStore& store) {
        auto& ga = store.accum(an.get(), an->values.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * dfn(an->values[i], saved[i]);
        }
      },
      op);
}

}  // namespace

// ------------------------------------------------------------------
// Tensor
// ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  return full(std::move(shape), 0.0);
}

Tensor Tensor::full(Shape shape, double value) {
  for (int d : shape) {
    if (d <= 0) {
      throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
  }
  const int n = shape_product(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value)));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
  for (int d : shape) {
    if (d <= 0) {
      throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
  }
  if (static_cast<std::size_t>(shape_product(shape)) != values.size()) {
    throw ShapeError("data length " + std::to_string(values.size()) + " does not fill shape " +
                     shape_str(shape));
  }
  return Tensor(make_leaf(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) {
  return from_data({1}, {value});
}

Tensor Tensor::zeros_like(const Tensor& t) {
  return zeros(t.shape());
}

const Shape& Tensor::shape() const {
  if (!node_) {
    throw std::invalid_argument("use of undefined tensor");
  }
  return node_->shape;
}

int Tensor::size() const {
  return shape_product(shape());
}

int Tensor::rows() const {
  require_rank2(*this, "rows");
  return node_->shape[0];
}

int Tensor::cols() const {
  require_rank2(*this, "cols");
  return node_->shape[1];
}

double Tensor::value() const {
  if (size() != 1) {
    throw std::invalid_argument("value(): tensor has " + std::to_string(size()) + " elements");
  }
  return node_->values[0];
}

double Tensor::at(int i) const {
  return node_->values.at(static_cast<std::size_t>(i));
}

double Tensor::at(int r, int c) const {
  require_rank2(*this, "at");
  return node_->values.at(static_cast<std::size_t>(r) * cols() + c);
}

const std::vector<double>& Tensor::data() const {
  if (!node_) {
    throw std::invalid_argument("use of undefined tensor");
  }
  return node_->values;
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) {
    throw std::invalid_argument("use of undefined tensor");
  }
  node_->requires_grad = on;
  node_->needs_grad = node_->needs_grad || on;
  return *this;
}

bool Tensor::requires_grad() const {
  return node_ && node_->requires_grad;
}

std::uint64_t Tensor::id() const {
  if (!node_) {
    throw std::invalid_argument("use of undefined tensor");
  }
  return node_->seq;
}

Tensor Tensor::detach() const {
  return Tensor(make_leaf(shape(), data()));
}

// ------------------------------------------------------------------
// operations
// ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  mm_nn_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  NodePtr an = a.node(), bn = b.node();
  return make_op(
      {m, n}, std::move(out), {an, bn},
      [an, bn, m, k, n](const std::vector<double>& g, GradStore& store) {
        if (an->needs_grad) {
          auto& ga = store.accum(an.get(), an->values.size());
          mm_nt_acc(g.data(), bn->values.data(), ga.data(), m, n, k);
        }
        if (bn->needs_grad) {
          auto& gb = store.accum(bn.get(), bn->values.size());
          mm_tn_acc(an->values.data(), g.data(), gb.data(), k, m, n);
        }
      },
      "matmul");
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) +
                     " x transpose of " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  // the cached transpose turns this into a plain row-major product, which
  // vectorizes where the direct row-dot form does not
  mm_nn_acc(a.data().data(), transposed_values(b.node()).data(), out.data(), m, k, n);
  NodePtr an = a.node(), bn = b.node();
  return make_op(
      {m, n}, std::move(out), {an, bn},
      [an, bn, m, k, n](const std::vector<double>& g, GradStore& store) {
        if (an->needs_grad) {
          auto& ga = store.accum(an.get(), an->values.size());
          mm_nn_acc(g.data(), bn->values.data(), ga.data(), m, n, k);
        }
        if (bn->needs_grad) {
          auto& gb = store.accum(bn.get(), bn->values.size());
          mm_tn_acc(g.data(), an->values.data(), gb.data(), n, m, k);
        }
      },
      "matmul_nt");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto& x = a.data();
  const auto& y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] + y[i];
  }
  NodePtr an = a.node(), bn = b.node();
  return make_op(
      a.shape(), std::move(out), {an, bn},
      [an, bn](const std::vector<double>& g, GradStore& store) {
        if (an->needs_grad) {
          auto& ga = store.accum(an.get(), an->values.size());
          for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
          }
        }
        if (bn->needs_grad) {
          auto& gb = store.accum(bn.get(), bn->values.size());
          for (std::size_t i = 0; i < g.size(); ++i) {
            gb[i] += g[i];
          }
        }
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto& x = a.data();
  const auto& y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] - y[i];
  }
  NodePtr an = a.node(), bn = b.node();
  return make_op(
      a.shape(), std::move(out), {an, bn},
      [an, bn](const std::vector<double>& g, GradStore& store) {
        if (an->needs_grad) {
          auto& ga = store.accum(an.get(), an->values.size());
          for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
          }
        }
        if (bn->needs_grad) {
          auto& gb = store.accum(bn.get(), bn->values.size());
          for (std::size_t i = 0; i < g.size(); ++i) {
            gb[i] -= g[i];
          }
        }
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& x = a.data();
  const auto& y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] * y[i];
  }
  NodePtr an = a.node(), bn = b.node();
  return make_op(
      a.shape(), std::move(out), {an, bn},
      [an, bn](const std::vector<double>& g, GradStore& store) {
        if (an->needs_grad) {
          auto& ga = store.accum(an.get(), an->values.size());
          for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * bn->values[i];
          }
        }
        if (bn->needs_grad) {
          auto& gb = store.accum(bn.get(), bn->values.size());
          for (std::size_t i = 0; i < g.size(); ++i) {
            gb[i] += g[i] * an->values[i];
          }
        }
      },
      "mul");
}

Tensor scale(const Tensor& a, double s) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] * s;
  }
  NodePtr an = a.node();
  return make_op(
      a.shape(), std::move(out), {an},
      [an, s](const std::vector<double>& g, GradStore& store) {
        auto& ga = store.accum(an.get(), an->values.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * s;
        }
      },
      "scale");
}

Tensor add_bias_row(const Tensor& a, const Tensor& bias) {
  require_rank2(a, "add_bias_row");
  if (bias.shape().size() != 1 || bias.shape()[0] != a.cols()) {
    throw ShapeError("add_bias_row: bias " + shape_str(bias.shape()) + " does not match " +
                     shape_str(a.shape()));
  }
  const int n = a.rows(), d = a.cols();
  const auto& x = a.data();
  const auto& b = bias.data();
  std::vector<double> out(x.size());
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < d; ++c) {
      out[static_cast<std::size_t>(r) * d + c] = x[static_cast<std::size_t>(r) * d + c] + b[c];
    }
  }
  NodePtr an = a.node(), bn = bias.node();
  return make_op(
      a.shape(), std::move(out), {an, bn},
      [an, bn, n, d](const std::vector<double>& g, GradStore& store) {
        if (an->needs_grad) {
          auto& ga = store.accum(an.get(), an->values.size());
          for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
          }
        }
        if (bn->needs_grad) {
          auto& gb = store.accum(bn.get(), bn->values.size());
          for (int r = 0; r < n; ++r) {
            for (int c = 0; c < d; ++c) {
              gb[c] += g[static_cast<std::size_t>(r) * d + c];
            }
          }
        }
      },
      "add_bias_row");
}

Tensor relu(const Tensor& a) {
  return elementwise(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh_act(const Tensor& a) {
  return elementwise(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor log_e(const Tensor& a) {
  return elementwise(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor exp_e(const Tensor& a) {
  return elementwise(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor clamp_min(const Tensor& a, double lo) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] < lo ? lo : x[i];
  }
  NodePtr an = a.node();
  return make_op(
      a.shape(), std::move(out), {an},
      [an, lo](const std::vector<double>& g, GradStore& store) {
        auto& ga = store.accum(an.get(), an->values.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (an->values[i] >= lo) {
            ga[i] += g[i];
          }
        }
      },
      "clamp_min");
}

Tensor softmax(const Tensor& logits, int axis) {
  require_rank2(logits, "softmax");
  if (axis != 0 && axis != 1) {
    throw std::invalid_argument("softmax: axis must be 0 or 1");
  }
  for (double v : logits.data()) {
    if (!std::isfinite(v)) {
      throw NumericError("softmax received a non-finite logit");
    }
  }
  if (axis == 0) {
    return transpose(softmax(transpose(logits), 1));
  }
  const int n = logits.rows(), c = logits.cols();
  const auto& x = logits.data();
  std::vector<double> out(x.size());
  for (int r = 0; r < n; ++r) {
    const double* row = x.data() + static_cast<std::size_t>(r) * c;
    double* orow = out.data() + static_cast<std::size_t>(r) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) {
      mx = std::max(mx, row[j]);
    }
    double denom = 0.0;
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (int j = 0; j < c; ++j) {
      orow[j] /= denom;
    }
  }
  NodePtr an = logits.node();
  std::vector<double> saved;
  if (any_needs_grad({an})) {
    saved = out;
  }
  return make_op(
      logits.shape(), std::move(out), {an},
      [an, saved = std::move(saved), n, c](const std::vector<double>& g, GradStore& store) {
        auto& ga = store.accum(an.get(), an->values.size());
        for (int r = 0; r < n; ++r) {
          const double* y = saved.data() + static_cast<std::size_t>(r) * c;
          const double* gr = g.data() + static_cast<std::size_t>(r) * c;
          double dot = 0.0;
          for (int j = 0; j < c; ++j) {
            dot += gr[j] * y[j];
          }
          double* out_g = ga.data() + static_cast<std::size_t>(r) * c;
          for (int j = 0; j < c; ++j) {
            out_g[j] += y[j] * (gr[j] - dot);
          }
        }
      },
      "softmax");
}

Tensor sum(const Tensor& a) {
  const auto& x = a.data();
  double acc = 0.0;
  for (double v : x) {
    acc += v;
  }
  NodePtr an = a.node();
  return make_op(
      {1}, {acc}, {an},
      [an](const std::vector<double>& g, GradStore& store) {
        auto& ga = store.accum(an.get(), an->values.size());
        for (double& v : ga) {
          v += g[0];
        }
      },
      "sum");
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / a.size());
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const int n = a.rows(), d = a.cols();
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < d; ++c) {
      out[static_cast<std::size_t>(c) * n + r] = x[static_cast<std::size_t>(r) * d + c];
    }
  }
  NodePtr an = a.node();
  return make_op(
      {d, n}, std::move(out), {an},
      [an, n, d](const std::vector<double>& g, GradStore& store) {
        auto& ga = store.accum(an.get(), an->values.size());
        for (int r = 0; r < n; ++r) {
          for (int c = 0; c < d; ++c) {
            ga[static_cast<std::size_t>(r) * d + c] += g[static_cast<std::size_t>(c) * n + r];
          }
        }
      },
      "transpose");
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& indices) {
  require_rank2(a, "gather_rows");
  const int n = a.rows(), d = a.cols();
  for (int idx : indices) {
    if (idx < 0 || idx >= n) {
      throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of range [0," +
                       std::to_string(n) + ")");
    }
  }
  const auto& x = a.data();
  std::vector<double> out(indices.size() * static_cast<std::size_t>(d));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(x.data() + static_cast<std::size_t>(indices[r]) * d, d, out.data() + r * d);
  }
  NodePtr an = a.node();
  return make_op(
      {static_cast<int>(indices.size()), d}, std::move(out), {an},
      [an, indices, d](const std::vector<double>& g, GradStore& store) {
        auto& ga = store.accum(an.get(), an->values.size());
        for (std::size_t r = 0; r < indices.size(); ++r) {
          double* dst = ga.data() + static_cast<std::size_t>(indices[r]) * d;
          const double* src = g.data() + r * d;
          for (int c = 0; c < d; ++c) {
            dst[c] += src[c];
          }
        }
      },
      "gather_rows");
}

Tensor take_per_row(const Tensor& a, const std::vector<int>& indices) {
  require_rank2(a, "take_per_row");
  const int n = a.rows(), d = a.cols();
  if (static_cast<int>(indices.size()) != n) {
    throw ShapeError("take_per_row: need one index per row, got " +
                     std::to_string(indices.size()) + " for " + std::to_string(n) + " rows");
  }
  for (int idx : indices) {
    if (idx < 0 || idx >= d) {
      throw ShapeError("take_per_row: column index " + std::to_string(idx) + " out of range [0," +
                       std::to_string(d) + ")");
    }
  }
  const auto& x = a.data();
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    out[static_cast<std::size_t>(r)] = x[static_cast<std::size_t>(r) * d + indices[r]];
  }
  NodePtr an = a.node();
  return make_op(
      {n}, std::move(out), {an},
      [an, indices, d](const std::vector<double>& g, GradStore& store) {
        auto& ga = store.accum(an.get(), an->values.size());
        for (std::size_t r = 0; r < indices.size(); ++r) {
          ga[r * d + indices[r]] += g[r];
        }
      },
      "take_per_row");
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_product(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  NodePtr an = a.node();
  return make_op(
      std::move(shape), a.data(), {an},
      [an](const std::vector<double>& g, GradStore& store) {
        auto& ga = store.accum(an.get(), an->values.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
        }
      },
      "reshape");
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) {
    throw std::invalid_argument("concat_cols: no parts");
  }
  const int n = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != n) {
      throw ShapeError("concat_cols: row counts differ, " + std::to_string(p.rows()) + " vs " +
                       std::to_string(n));
    }
    total += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(n) * total);
  int off = 0;
  for (const auto& p : parts) {
    const int d = p.cols();
    const auto& x = p.data();
    for (int r = 0; r < n; ++r) {
      std::copy_n(x.data() + static_cast<std::size_t>(r) * d, d,
                  out.data() + static_cast<std::size_t>(r) * total + off);
    }
    off += d;
  }
  std::vector<NodePtr> nodes;
  nodes.reserve(parts.size());
  std::vector<int> widths;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.cols());
  }
  return make_op(
      {n, total}, std::move(out), nodes,
      [nodes, widths, n, total](const std::vector<double>& g, GradStore& store) {
        int off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          const int d = widths[k];
          if (nodes[k]->needs_grad) {
            auto& ga = store.accum(nodes[k].get(), nodes[k]->values.size());
            for (int r = 0; r < n; ++r) {
              const double* src = g.data() + static_cast<std::size_t>(r) * total + off;
              double* dst = ga.data() + static_cast<std::size_t>(r) * d;
              for (int c = 0; c < d; ++c) {
                dst[c] += src[c];
              }
            }
          }
          off += d;
        }
      },
      "concat_cols");
}

// ------------------------------------------------------------------
// backward
// ------------------------------------------------------------------

NoGradGuard::NoGradGuard() {
  ++g_no_grad_depth;
}

NoGradGuard::~NoGradGuard() {
  --g_no_grad_depth;
}

bool GradMap::contains(const Tensor& leaf) const {
  return grads_.count(leaf.id()) > 0;
}

Tensor GradMap::grad_of(const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) {
    return Tensor::zeros_like(leaf);
  }
  return it->second;
}

void GradMap::insert(std::uint64_t leaf_id, Tensor grad) {
  grads_.emplace(leaf_id, std::move(grad));
}

GradMap backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar");
  }
  // collect every node the loss depends on, then sweep in reverse creation order
  std::vector<NodePtr> order;
  std::unordered_map<const Node*, bool> seen;
  std::vector<NodePtr> stack{loss.node()};
  while (!stack.empty()) {
    NodePtr n = std::move(stack.back());
    stack.pop_back();
    if (seen[n.get()]) {
      continue;
    }
    seen[n.get()] = true;
    for (const auto& p : n->parents) {
      if (!seen[p.get()] && (p->needs_grad || p->requires_grad)) {
        stack.push_back(p);
      }
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(),
            [](const NodePtr& a, const NodePtr& b) { return a->seq > b->seq; });

  GradStore store;
  store.accum(loss.node().get(), 1)[0] = 1.0;
  for (const auto& n : order) {
    const auto* g = store.find(n.get());
    if (g != nullptr && n->backward_fn) {
      n->backward_fn(*g, store);
    }
  }

  GradMap result;
  for (const auto& n : order) {
    if (n->requires_grad) {
      const auto* g = store.find(n.get());
      if (g != nullptr) {
        result.insert(n->seq, Tensor::from_data(n->shape, *g));
      }
    }
  }
  return result;
}

}  // namespace bkd
