#include "lesionformer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lesionformer {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] =
        st[static_cast<std::size_t>(i + 1)] * s[static_cast<std::size_t>(i + 1)];
  }
  return st;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace {

void validate_shape(const Shape& s) {
  for (auto d : s) {
    if (d <= 0) {
      throw std::invalid_argument("tensor shape must have positive extents, got " + shape_str(s));
    }
  }
}

std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank, const char* op) {
  const std::int64_t a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw std::invalid_argument(std::string(op) + ": invalid axis " + std::to_string(axis) +
                                " for rank " + std::to_string(rank));
  }
  return a;
}

thread_local std::vector<Tape*> g_tape_stack;
std::atomic<std::uint64_t> g_tape_serial{1};

}  // namespace

// ---------------------------------------------------------------------------
// TensorNode / Tensor
// ---------------------------------------------------------------------------

void TensorNode::ensure_grad() {
  if (grad.size() != value.size()) {
    grad.assign(value.size(), 0.0);
  }
}

void TensorNode::add_grad(const double* g, std::int64_t n) {
  if (!requires_grad) return;
  if (n != numel()) {
    throw std::runtime_error("gradient size mismatch: " + std::to_string(n) + " vs " +
                             std::to_string(numel()));
  }
  ensure_grad();
  for (std::int64_t i = 0; i < n; ++i) grad[static_cast<std::size_t>(i)] += g[i];
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape) {
  const auto n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double v) {
  const auto n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor& Tensor::set_requires_grad(bool b) {
  node_->requires_grad = b;
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) {
    throw std::runtime_error("tensor has no gradient (backward not run or node not in graph)");
  }
  return node_->grad;
}

double Tensor::value() const {
  if (numel() != 1) {
    throw std::runtime_error("value() requires a scalar tensor, shape is " + shape_str(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
  if (static_cast<std::int64_t>(idx.size()) != rank()) {
    throw std::invalid_argument("at(): index rank mismatch");
  }
  const auto strides = row_major_strides(shape());
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (auto i : idx) {
    if (i < 0 || i >= node_->shape[k]) {
      throw std::invalid_argument("at(): index out of range");
    }
    flat += i * strides[k];
    ++k;
  }
  return node_->value[static_cast<std::size_t>(flat)];
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() : serial_(g_tape_serial.fetch_add(1)) { g_tape_stack.push_back(this); }

Tape::~Tape() {
  assert(!g_tape_stack.empty() && g_tape_stack.back() == this);
  g_tape_stack.pop_back();
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::reset() {
  nodes_.clear();
  backward_done_ = false;
  serial_ = g_tape_serial.fetch_add(1);
}

std::int64_t Tape::record(const std::shared_ptr<TensorNode>& n) {
  n->tape_serial = serial_;
  n->node_id = static_cast<std::int64_t>(nodes_.size());
  nodes_.push_back(n);
  return n->node_id;
}

void Tape::backward(const Tensor& loss) {
  if (backward_done_) {
    throw std::runtime_error("backward() called twice without reset()");
  }
  if (!loss.defined() || !owns(*loss.node())) {
    throw std::runtime_error("backward(): loss is not recorded on this tape");
  }
  if (loss.numel() != 1) {
    throw std::runtime_error("backward() requires a scalar loss, shape is " +
                             shape_str(loss.shape()));
  }
  backward_done_ = true;

  // Leaves with requires_grad end up fully populated even when disconnected.
  for (auto& n : nodes_) {
    if (n->requires_grad && !n->backward_fn) n->ensure_grad();
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;

  // Single reverse sweep: each node visited exactly once.
  for (std::int64_t i = loss.node()->node_id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (!n->backward_fn || n->grad.empty()) continue;
    n->backward_fn();
  }
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw std::runtime_error("backward(): no active tape");
  t->backward(loss);
}

// ---------------------------------------------------------------------------
// op plumbing
// ---------------------------------------------------------------------------

namespace {

using BackwardRule = std::function<void(TensorNode&)>;

Tensor make_op(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
               BackwardRule rule) {
  Tensor out = Tensor::from_data(std::move(shape), std::move(value));
  Tape* t = Tape::active();
  if (!t) return out;
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.node()->requires_grad) {
      needs = true;
      break;
    }
  }
  if (!needs) return out;

  auto node = out.node();
  node->requires_grad = true;
  for (const auto& in : inputs) {
    if (in.node()->requires_grad && !t->owns(*in.node())) {
      t->record(in.node());  // lazily register leaves; inputs precede the op node
    }
    node->inputs.push_back(in.node());
  }
  TensorNode* self = node.get();
  node->backward_fn = [self, rule = std::move(rule)]() { rule(*self); };
  t->record(node);
  return out;
}

// Elementwise broadcast plan: shapes equal, one side scalar, or the smaller
// side's shape a trailing suffix of the larger side's (suffix blocks tile
// contiguously in row-major order, so indexing is a plain modulo).
struct BcPlan {
  Shape out_shape;
  std::int64_t n_out = 0;
  std::int64_t na = 0, nb = 0;
  bool a_small = false, b_small = false;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

BcPlan plan_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  BcPlan p;
  p.na = a.numel();
  p.nb = b.numel();
  if (a.shape() == b.shape()) {
    p.out_shape = a.shape();
  } else if (p.nb == 1) {
    p.out_shape = a.shape();
    p.b_small = true;
  } else if (p.na == 1) {
    p.out_shape = b.shape();
    p.a_small = true;
  } else if (is_suffix(b.shape(), a.shape())) {
    p.out_shape = a.shape();
    p.b_small = true;
  } else if (is_suffix(a.shape(), b.shape())) {
    p.out_shape = b.shape();
    p.a_small = true;
  } else {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  p.n_out = shape_numel(p.out_shape);
  return p;
}

// Reduce a full-size gradient onto a broadcast operand.
void reduce_to(const std::vector<double>& g, std::int64_t n_small,
               const std::shared_ptr<TensorNode>& target) {
  std::vector<double> tmp(static_cast<std::size_t>(n_small), 0.0);
  const auto n = static_cast<std::int64_t>(g.size());
  for (std::int64_t i = 0; i < n; ++i) {
    tmp[static_cast<std::size_t>(i % n_small)] += g[static_cast<std::size_t>(i)];
  }
  target->add_grad(tmp.data(), n_small);
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const auto p = plan_broadcast(a, b, "add");
  std::vector<double> out(static_cast<std::size_t>(p.n_out));
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::int64_t i = 0; i < p.n_out; ++i) {
    const double x = av[static_cast<std::size_t>(p.a_small ? i % p.na : i)];
    const double y = bv[static_cast<std::size_t>(p.b_small ? i % p.nb : i)];
    out[static_cast<std::size_t>(i)] = x + y;
  }
  auto an = a.node(), bn = b.node();
  return make_op(p.out_shape, std::move(out), {a, b}, [an, bn, p](TensorNode& self) {
    if (p.a_small) {
      reduce_to(self.grad, p.na, an);
    } else {
      an->add_grad(self.grad.data(), p.n_out);
    }
    if (p.b_small) {
      reduce_to(self.grad, p.nb, bn);
    } else {
      bn->add_grad(self.grad.data(), p.n_out);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto p = plan_broadcast(a, b, "sub");
  std::vector<double> out(static_cast<std::size_t>(p.n_out));
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::int64_t i = 0; i < p.n_out; ++i) {
    const double x = av[static_cast<std::size_t>(p.a_small ? i % p.na : i)];
    const double y = bv[static_cast<std::size_t>(p.b_small ? i % p.nb : i)];
    out[static_cast<std::size_t>(i)] = x - y;
  }
  auto an = a.node(), bn = b.node();
  return make_op(p.out_shape, std::move(out), {a, b}, [an, bn, p](TensorNode& self) {
    if (p.a_small) {
      reduce_to(self.grad, p.na, an);
    } else {
      an->add_grad(self.grad.data(), p.n_out);
    }
    std::vector<double> ng(self.grad.size());
    for (std::size_t i = 0; i < ng.size(); ++i) ng[i] = -self.grad[i];
    if (p.b_small) {
      reduce_to(ng, p.nb, bn);
    } else {
      bn->add_grad(ng.data(), p.n_out);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto p = plan_broadcast(a, b, "mul");
  std::vector<double> out(static_cast<std::size_t>(p.n_out));
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::int64_t i = 0; i < p.n_out; ++i) {
    const double x = av[static_cast<std::size_t>(p.a_small ? i % p.na : i)];
    const double y = bv[static_cast<std::size_t>(p.b_small ? i % p.nb : i)];
    out[static_cast<std::size_t>(i)] = x * y;
  }
  auto an = a.node(), bn = b.node();
  return make_op(p.out_shape, std::move(out), {a, b}, [an, bn, p](TensorNode& self) {
    const auto& g = self.grad;
    const auto& av = an->value;
    const auto& bv = bn->value;
    if (an->requires_grad) {
      std::vector<double> da(static_cast<std::size_t>(p.n_out));
      for (std::int64_t i = 0; i < p.n_out; ++i) {
        da[static_cast<std::size_t>(i)] =
            g[static_cast<std::size_t>(i)] * bv[static_cast<std::size_t>(p.b_small ? i % p.nb : i)];
      }
      if (p.a_small) {
        reduce_to(da, p.na, an);
      } else {
        an->add_grad(da.data(), p.n_out);
      }
    }
    if (bn->requires_grad) {
      std::vector<double> db(static_cast<std::size_t>(p.n_out));
      for (std::int64_t i = 0; i < p.n_out; ++i) {
        db[static_cast<std::size_t>(i)] =
            g[static_cast<std::size_t>(i)] * av[static_cast<std::size_t>(p.a_small ? i % p.na : i)];
      }
      if (p.b_small) {
        reduce_to(db, p.nb, bn);
      } else {
        bn->add_grad(db.data(), p.n_out);
      }
    }
  });
}

Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.data());
  for (auto& v : out) v += c;
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
    xn->add_grad(self.grad.data(), self.numel());
  });
}

Tensor mul_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.data());
  for (auto& v : out) v *= c;
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, c](TensorNode& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * c;
    xn->add_grad(g.data(), self.numel());
  });
}

Tensor scalar_sub(double c, const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = c - v;
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
    xn->add_grad(g.data(), self.numel());
  });
}

Tensor neg(const Tensor& x) { return scalar_sub(0.0, x); }

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n]
void mm_nn(const double* A, const double* B, double* C, std::int64_t m, std::int64_t k,
           std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* Ci = C + i * n;
    const double* Ai = A + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double a = Ai[kk];
      const double* Bk = B + kk * n;
      for (std::int64_t j = 0; j < n; ++j) Ci[j] += a * Bk[j];
    }
  }
}

// C[p,r] += A[p,q] * B[r,q]^T
void mm_nt(const double* A, const double* B, double* C, std::int64_t p, std::int64_t q,
           std::int64_t r) {
  for (std::int64_t i = 0; i < p; ++i) {
    const double* Ai = A + i * q;
    double* Ci = C + i * r;
    for (std::int64_t j = 0; j < r; ++j) {
      const double* Bj = B + j * q;
      double acc = 0.0;
      for (std::int64_t kk = 0; kk < q; ++kk) acc += Ai[kk] * Bj[kk];
      Ci[j] += acc;
    }
  }
}

// C[p,r] += A[q,p]^T * B[q,r]
void mm_tn(const double* A, const double* B, double* C, std::int64_t p, std::int64_t q,
           std::int64_t r) {
  for (std::int64_t kk = 0; kk < q; ++kk) {
    const double* Ak = A + kk * p;
    const double* Bk = B + kk * r;
    for (std::int64_t i = 0; i < p; ++i) {
      const double a = Ak[i];
      double* Ci = C + i * r;
      for (std::int64_t j = 0; j < r; ++j) Ci[j] += a * Bk[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw std::invalid_argument("matmul: operands must have rank >= 2, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(a.rank() - 2);
  const std::int64_t ka = a.dim(a.rank() - 1);
  const std::int64_t kb = b.dim(b.rank() - 2);
  const std::int64_t n = b.dim(b.rank() - 1);
  if (ka != kb) {
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape out_batch;
  if (a_batch == b_batch) {
    out_batch = a_batch;
  } else if (b_batch.empty()) {
    out_batch = a_batch;
  } else if (a_batch.empty()) {
    out_batch = b_batch;
  } else {
    throw std::invalid_argument("matmul: batch extents differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::int64_t batches = shape_numel(out_batch);
  const bool a_bcast = a_batch.empty() && !out_batch.empty();
  const bool b_bcast = b_batch.empty() && !out_batch.empty();

  Shape out_shape = out_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(static_cast<std::size_t>(batches * m * n), 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::int64_t bi = 0; bi < batches; ++bi) {
    mm_nn(A + (a_bcast ? 0 : bi * m * ka), B + (b_bcast ? 0 : bi * ka * n), out.data() + bi * m * n,
          m, ka, n);
  }

  auto an = a.node(), bn = b.node();
  const std::int64_t k = ka;
  return make_op(std::move(out_shape), std::move(out), {a, b},
                 [an, bn, m, k, n, batches, a_bcast, b_bcast](TensorNode& self) {
                   const double* G = self.grad.data();
                   const double* A = an->value.data();
                   const double* B = bn->value.data();
                   if (an->requires_grad) {
                     std::vector<double> da(an->value.size(), 0.0);
                     for (std::int64_t bi = 0; bi < batches; ++bi) {
                       // dA = dC * B^T
                       mm_nt(G + bi * m * n, B + (b_bcast ? 0 : bi * k * n),
                             da.data() + (a_bcast ? 0 : bi * m * k), m, n, k);
                     }
                     an->add_grad(da.data(), an->numel());
                   }
                   if (bn->requires_grad) {
                     std::vector<double> db(bn->value.size(), 0.0);
                     for (std::int64_t bi = 0; bi < batches; ++bi) {
                       // dB = A^T * dC
                       mm_tn(A + (a_bcast ? 0 : bi * m * k), G + bi * m * n,
                             db.data() + (b_bcast ? 0 : bi * k * n), k, m, n);
                     }
                     bn->add_grad(db.data(), bn->numel());
                   }
                 });
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = std::exp(v);
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * self.value[i];
    xn->add_grad(g.data(), self.numel());
  });
}

Tensor log(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = std::log(v);
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] / xn->value[i];
    xn->add_grad(g.data(), self.numel());
  });
}

Tensor pow_scalar(const Tensor& x, double p) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = std::pow(v, p);
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, p](TensorNode& self) {
    if (p == 0.0) return;  // constant 1, zero gradient
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = self.grad[i] * p * std::pow(xn->value[i], p - 1.0);
    }
    xn->add_grad(g.data(), self.numel());
  });
}

Tensor clamp_min(const Tensor& x, double lo) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = std::max(v, lo);
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, lo](TensorNode& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = xn->value[i] >= lo ? self.grad[i] : 0.0;
    }
    xn->add_grad(g.data(), self.numel());
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  constexpr double kC = kGeluC;
  constexpr double kA = kGeluA;
  std::vector<double> out(x.data());
  for (auto& v : out) {
    const double u = kC * (v + kA * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xn->value[i];
      const double u = kGeluC * (v + kGeluA * v * v * v);
      const double t = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      g[i] = self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
    xn->add_grad(g.data(), self.numel());
  });
}

// ---------------------------------------------------------------------------
// softmax / layer_norm
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::int64_t axis) {
  const auto ax = normalize_axis(axis, x.rank(), "softmax");
  const auto& sh = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < ax; ++i) outer *= sh[static_cast<std::size_t>(i)];
  for (std::int64_t i = ax + 1; i < x.rank(); ++i) inner *= sh[static_cast<std::size_t>(i)];
  const std::int64_t extent = sh[static_cast<std::size_t>(ax)];

  std::vector<double> out(x.data().size());
  const auto& xv = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * extent * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t e = 0; e < extent; ++e) {
        mx = std::max(mx, xv[static_cast<std::size_t>(base + e * inner)]);
      }
      double denom = 0.0;
      for (std::int64_t e = 0; e < extent; ++e) {
        const double ev = std::exp(xv[static_cast<std::size_t>(base + e * inner)] - mx);
        out[static_cast<std::size_t>(base + e * inner)] = ev;
        denom += ev;
      }
      for (std::int64_t e = 0; e < extent; ++e) {
        out[static_cast<std::size_t>(base + e * inner)] /= denom;
      }
    }
  }

  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, outer, inner, extent](TensorNode& self) {
    std::vector<double> g(self.grad.size());
    const auto& y = self.value;
    const auto& dy = self.grad;
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * extent * inner + i;
        double dot = 0.0;
        for (std::int64_t e = 0; e < extent; ++e) {
          const auto idx = static_cast<std::size_t>(base + e * inner);
          dot += dy[idx] * y[idx];
        }
        for (std::int64_t e = 0; e < extent; ++e) {
          const auto idx = static_cast<std::size_t>(base + e * inner);
          g[idx] = y[idx] * (dy[idx] - dot);
        }
      }
    }
    xn->add_grad(g.data(), self.numel());
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::int64_t n = x.dim(x.rank() - 1);
  if (gain.numel() != n || bias.numel() != n) {
    throw std::invalid_argument("layer_norm: gain/bias shape " + shape_str(gain.shape()) + "/" +
                                shape_str(bias.shape()) + " does not match last extent of " +
                                shape_str(x.shape()));
  }
  const std::int64_t rows = x.numel() / n;
  std::vector<double> out(x.data().size());
  auto mu = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    double m = 0.0;
    for (std::int64_t j = 0; j < n; ++j) m += xr[j];
    m /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      const double d = xr[j] - m;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double iv = 1.0 / std::sqrt(var + eps);
    (*mu)[static_cast<std::size_t>(r)] = m;
    (*inv)[static_cast<std::size_t>(r)] = iv;
    double* yr = out.data() + r * n;
    for (std::int64_t j = 0; j < n; ++j) {
      yr[j] = (xr[j] - m) * iv * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
    }
  }

  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [xn, gn, bn, mu, inv, rows, n](TensorNode& self) {
                   const auto& dy = self.grad;
                   const auto& xv = xn->value;
                   const auto& gv = gn->value;
                   std::vector<double> dx(xv.size(), 0.0);
                   std::vector<double> dg(static_cast<std::size_t>(n), 0.0);
                   std::vector<double> db(static_cast<std::size_t>(n), 0.0);
                   const double dn = static_cast<double>(n);
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const double* xr = xv.data() + r * n;
                     const double* dyr = dy.data() + r * n;
                     double* dxr = dx.data() + r * n;
                     const double m = (*mu)[static_cast<std::size_t>(r)];
                     const double iv = (*inv)[static_cast<std::size_t>(r)];
                     double sum_dxh = 0.0, sum_dxh_xc = 0.0, sum_xc = 0.0;
                     for (std::int64_t j = 0; j < n; ++j) {
                       const double xc = xr[j] - m;
                       const double dxh = dyr[j] * gv[static_cast<std::size_t>(j)];
                       sum_dxh += dxh;
                       sum_dxh_xc += dxh * xc;
                       sum_xc += xc;
                       dg[static_cast<std::size_t>(j)] += dyr[j] * xc * iv;
                       db[static_cast<std::size_t>(j)] += dyr[j];
                     }
                     const double dvar = sum_dxh_xc * (-0.5) * iv * iv * iv;
                     const double dmu = -iv * sum_dxh + dvar * (-2.0 / dn) * sum_xc;
                     for (std::int64_t j = 0; j < n; ++j) {
                       const double xc = xr[j] - m;
                       const double dxh = dyr[j] * gv[static_cast<std::size_t>(j)];
                       dxr[j] = dxh * iv + dvar * 2.0 * xc / dn + dmu / dn;
                     }
                   }
                   xn->add_grad(dx.data(), xn->numel());
                   gn->add_grad(dg.data(), n);
                   bn->add_grad(db.data(), n);
                 });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  auto xn = x.node();
  return make_op(std::move(shape), std::vector<double>(x.data()), {x}, [xn](TensorNode& self) {
    xn->add_grad(self.grad.data(), self.numel());
  });
}

namespace {

// dst[out_linear] = src[sum_j out_index[j] * in_strides[dims[j]]]
void permute_raw(const double* src, double* dst, const Shape& in_shape,
                 const std::vector<std::int64_t>& dims) {
  const auto r = static_cast<std::int64_t>(in_shape.size());
  const auto in_strides = row_major_strides(in_shape);
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<std::int64_t> step(static_cast<std::size_t>(r));
  for (std::int64_t j = 0; j < r; ++j) {
    out_shape[static_cast<std::size_t>(j)] = in_shape[static_cast<std::size_t>(dims[j])];
    step[static_cast<std::size_t>(j)] = in_strides[static_cast<std::size_t>(dims[j])];
  }
  const std::int64_t total = shape_numel(in_shape);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t src_off = 0;
  for (std::int64_t o = 0; o < total; ++o) {
    dst[o] = src[src_off];
    for (std::int64_t j = r - 1; j >= 0; --j) {
      auto& ij = idx[static_cast<std::size_t>(j)];
      src_off += step[static_cast<std::size_t>(j)];
      if (++ij < out_shape[static_cast<std::size_t>(j)]) break;
      src_off -= ij * step[static_cast<std::size_t>(j)];
      ij = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::int64_t>& dims) {
  const auto r = x.rank();
  if (static_cast<std::int64_t>(dims.size()) != r) {
    throw std::invalid_argument("permute: dims rank mismatch for " + shape_str(x.shape()));
  }
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (auto d : dims) {
    if (d < 0 || d >= r || seen[static_cast<std::size_t>(d)]) {
      throw std::invalid_argument("permute: dims is not a permutation");
    }
    seen[static_cast<std::size_t>(d)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(r));
  for (std::int64_t j = 0; j < r; ++j) {
    out_shape[static_cast<std::size_t>(j)] = x.dim(dims[static_cast<std::size_t>(j)]);
  }
  std::vector<double> out(x.data().size());
  permute_raw(x.data().data(), out.data(), x.shape(), dims);

  std::vector<std::int64_t> inverse(static_cast<std::size_t>(r));
  for (std::int64_t j = 0; j < r; ++j) inverse[static_cast<std::size_t>(dims[j])] = j;
  auto xn = x.node();
  Shape self_shape = out_shape;
  return make_op(std::move(out_shape), std::move(out), {x},
                 [xn, inverse, self_shape](TensorNode& self) {
                   std::vector<double> g(self.grad.size());
                   permute_raw(self.grad.data(), g.data(), self_shape, inverse);
                   xn->add_grad(g.data(), self.numel());
                 });
}

Tensor transpose(const Tensor& x, std::int64_t a, std::int64_t b) {
  const auto r = x.rank();
  const auto na = normalize_axis(a, r, "transpose");
  const auto nb = normalize_axis(b, r, "transpose");
  std::vector<std::int64_t> dims(static_cast<std::size_t>(r));
  std::iota(dims.begin(), dims.end(), 0);
  std::swap(dims[static_cast<std::size_t>(na)], dims[static_cast<std::size_t>(nb)]);
  return permute(x, dims);
}

Tensor concat(const std::vector<Tensor>& xs, std::int64_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: empty input list");
  const auto r = xs[0].rank();
  const auto ax = normalize_axis(axis, r, "concat");
  Shape out_shape = xs[0].shape();
  std::int64_t total_extent = 0;
  for (const auto& x : xs) {
    if (x.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (std::int64_t d = 0; d < r; ++d) {
      if (d != ax && x.dim(d) != out_shape[static_cast<std::size_t>(d)]) {
        throw std::invalid_argument("concat: shape mismatch, " + shape_str(out_shape) + " vs " +
                                    shape_str(x.shape()));
      }
    }
    total_extent += x.dim(ax);
  }
  out_shape[static_cast<std::size_t>(ax)] = total_extent;

  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < ax; ++d) outer *= xs[0].dim(d);
  for (std::int64_t d = ax + 1; d < r; ++d) inner *= xs[0].dim(d);

  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::int64_t off = 0;
  std::vector<std::int64_t> block(xs.size());
  for (std::size_t t = 0; t < xs.size(); ++t) {
    block[t] = xs[t].dim(ax) * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + o * total_extent * inner + off,
                  xs[t].data().data() + o * block[t], static_cast<std::size_t>(block[t]) * 8);
    }
    off += block[t];
  }

  std::vector<std::shared_ptr<TensorNode>> in_nodes;
  in_nodes.reserve(xs.size());
  for (const auto& x : xs) in_nodes.push_back(x.node());
  return make_op(std::move(out_shape), std::move(out), xs,
                 [in_nodes, block, outer, inner, total_extent](TensorNode& self) {
                   std::int64_t off = 0;
                   for (std::size_t t = 0; t < in_nodes.size(); ++t) {
                     if (in_nodes[t]->requires_grad) {
                       std::vector<double> g(static_cast<std::size_t>(outer * block[t]));
                       for (std::int64_t o = 0; o < outer; ++o) {
                         std::memcpy(g.data() + o * block[t],
                                     self.grad.data() + o * total_extent * inner + off,
                                     static_cast<std::size_t>(block[t]) * 8);
                       }
                       in_nodes[t]->add_grad(g.data(), outer * block[t]);
                     }
                     off += block[t];
                   }
                 });
}

Tensor slice(const Tensor& x, const std::vector<std::int64_t>& starts,
             const std::vector<std::int64_t>& extents) {
  const auto r = x.rank();
  if (static_cast<std::int64_t>(starts.size()) != r ||
      static_cast<std::int64_t>(extents.size()) != r) {
    throw std::invalid_argument("slice: starts/extents rank mismatch for " + shape_str(x.shape()));
  }
  for (std::int64_t d = 0; d < r; ++d) {
    const auto s = starts[static_cast<std::size_t>(d)];
    const auto e = extents[static_cast<std::size_t>(d)];
    if (s < 0 || e <= 0 || s + e > x.dim(d)) {
      throw std::invalid_argument("slice: out-of-range region on axis " + std::to_string(d) +
                                  " of " + shape_str(x.shape()));
    }
  }
  Shape out_shape(extents.begin(), extents.end());
  const auto in_strides = row_major_strides(x.shape());
  const std::int64_t total = shape_numel(out_shape);
  std::vector<double> out(static_cast<std::size_t>(total));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  const auto& xv = x.data();
  for (std::int64_t o = 0; o < total; ++o) {
    std::int64_t src = 0;
    for (std::int64_t d = 0; d < r; ++d) {
      src += (starts[static_cast<std::size_t>(d)] + idx[static_cast<std::size_t>(d)]) *
             in_strides[static_cast<std::size_t>(d)];
    }
    out[static_cast<std::size_t>(o)] = xv[static_cast<std::size_t>(src)];
    for (std::int64_t d = r - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < extents[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
  auto xn = x.node();
  return make_op(std::move(out_shape), std::move(out), {x},
                 [xn, starts, extents, in_strides, r](TensorNode& self) {
                   std::vector<double> g(xn->value.size(), 0.0);
                   std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
                   const std::int64_t total = self.numel();
                   for (std::int64_t o = 0; o < total; ++o) {
                     std::int64_t dst = 0;
                     for (std::int64_t d = 0; d < r; ++d) {
                       dst += (starts[static_cast<std::size_t>(d)] + idx[static_cast<std::size_t>(d)]) *
                              in_strides[static_cast<std::size_t>(d)];
                     }
                     g[static_cast<std::size_t>(dst)] = self.grad[static_cast<std::size_t>(o)];
                     for (std::int64_t d = r - 1; d >= 0; --d) {
                       if (++idx[static_cast<std::size_t>(d)] < extents[static_cast<std::size_t>(d)]) break;
                       idx[static_cast<std::size_t>(d)] = 0;
                     }
                   }
                   xn->add_grad(g.data(), xn->numel());
                 });
}

namespace {

void roll2d_raw(const double* src, double* dst, std::int64_t b, std::int64_t h, std::int64_t w,
                std::int64_t c, std::int64_t sy, std::int64_t sx) {
  sy = ((sy % h) + h) % h;
  sx = ((sx % w) + w) % w;
  const std::int64_t row = w * c;
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t i = 0; i < h; ++i) {
      const std::int64_t si = (i - sy + h) % h;
      const double* s = src + (bi * h + si) * row;
      double* d = dst + (bi * h + i) * row;
      // out column j comes from source column (j - sx) mod w: two segments
      std::memcpy(d + sx * c, s, static_cast<std::size_t>((w - sx) * c) * 8);
      std::memcpy(d, s + (w - sx) * c, static_cast<std::size_t>(sx * c) * 8);
    }
  }
}

}  // namespace

Tensor roll2d(const Tensor& x, std::int64_t shift_y, std::int64_t shift_x) {
  if (x.rank() != 4) {
    throw std::invalid_argument("roll2d: expected rank-4 [B,h,w,C], got " + shape_str(x.shape()));
  }
  const auto b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  std::vector<double> out(x.data().size());
  roll2d_raw(x.data().data(), out.data(), b, h, w, c, shift_y, shift_x);
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x},
                 [xn, b, h, w, c, shift_y, shift_x](TensorNode& self) {
                   std::vector<double> g(self.grad.size());
                   roll2d_raw(self.grad.data(), g.data(), b, h, w, c, -shift_y, -shift_x);
                   xn->add_grad(g.data(), self.numel());
                 });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xn = x.node();
  return make_op({1}, {acc}, {x}, [xn](TensorNode& self) {
    std::vector<double> g(xn->value.size(), self.grad[0]);
    xn->add_grad(g.data(), xn->numel());
  });
}

Tensor mean_all(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xn = x.node();
  return make_op({1}, {acc / n}, {x}, [xn, n](TensorNode& self) {
    std::vector<double> g(xn->value.size(), self.grad[0] / n);
    xn->add_grad(g.data(), xn->numel());
  });
}

namespace {

Tensor reduce_axis(const Tensor& x, std::int64_t axis, bool take_mean, const char* op) {
  const auto ax = normalize_axis(axis, x.rank(), op);
  const auto& sh = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < ax; ++i) outer *= sh[static_cast<std::size_t>(i)];
  for (std::int64_t i = ax + 1; i < x.rank(); ++i) inner *= sh[static_cast<std::size_t>(i)];
  const std::int64_t extent = sh[static_cast<std::size_t>(ax)];
  Shape out_shape;
  for (std::int64_t i = 0; i < x.rank(); ++i) {
    if (i != ax) out_shape.push_back(sh[static_cast<std::size_t>(i)]);
  }
  if (out_shape.empty()) out_shape = {1};
  const double scale = take_mean ? 1.0 / static_cast<double>(extent) : 1.0;

  std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
  const auto& xv = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t e = 0; e < extent; ++e) {
      const double* src = xv.data() + (o * extent + e) * inner;
      double* dst = out.data() + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  if (take_mean) {
    for (auto& v : out) v *= scale;
  }
  auto xn = x.node();
  return make_op(std::move(out_shape), std::move(out), {x},
                 [xn, outer, inner, extent, scale](TensorNode& self) {
                   std::vector<double> g(xn->value.size());
                   for (std::int64_t o = 0; o < outer; ++o) {
                     for (std::int64_t e = 0; e < extent; ++e) {
                       const double* src = self.grad.data() + o * inner;
                       double* dst = g.data() + (o * extent + e) * inner;
                       for (std::int64_t i = 0; i < inner; ++i) dst[i] = src[i] * scale;
                     }
                   }
                   xn->add_grad(g.data(), xn->numel());
                 });
}

}  // namespace

Tensor sum(const Tensor& x, std::int64_t axis) { return reduce_axis(x, axis, false, "sum"); }
Tensor mean(const Tensor& x, std::int64_t axis) { return reduce_axis(x, axis, true, "mean"); }

Tensor repeat_last(const Tensor& x, std::int64_t k) {
  if (k <= 0) throw std::invalid_argument("repeat_last: k must be positive");
  Shape out_shape = x.shape();
  out_shape.push_back(k);
  const std::int64_t n = x.numel();
  std::vector<double> out(static_cast<std::size_t>(n * k));
  const auto& xv = x.data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < k; ++j) {
      out[static_cast<std::size_t>(i * k + j)] = xv[static_cast<std::size_t>(i)];
    }
  }
  auto xn = x.node();
  return make_op(std::move(out_shape), std::move(out), {x}, [xn, n, k](TensorNode& self) {
    std::vector<double> g(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < k; ++j) {
        g[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(i * k + j)];
      }
    }
    xn->add_grad(g.data(), n);
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& indices) {
  if (x.rank() < 1) throw std::invalid_argument("gather_rows: rank >= 1 required");
  const std::int64_t rows = x.dim(0);
  const std::int64_t row_size = x.numel() / rows;
  for (auto i : indices) {
    if (i < 0 || i >= rows) {
      throw std::invalid_argument("gather_rows: index " + std::to_string(i) +
                                  " out of range for " + shape_str(x.shape()));
    }
  }
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<std::int64_t>(indices.size());
  std::vector<double> out(indices.size() * static_cast<std::size_t>(row_size));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::memcpy(out.data() + static_cast<std::int64_t>(r) * row_size,
                x.data().data() + indices[r] * row_size, static_cast<std::size_t>(row_size) * 8);
  }
  auto xn = x.node();
  return make_op(std::move(out_shape), std::move(out), {x}, [xn, indices, row_size](TensorNode& self) {
    std::vector<double> g(xn->value.size(), 0.0);
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const double* src = self.grad.data() + static_cast<std::int64_t>(r) * row_size;
      double* dst = g.data() + indices[r] * row_size;
      for (std::int64_t i = 0; i < row_size; ++i) dst[i] += src[i];
    }
    xn->add_grad(g.data(), xn->numel());
  });
}

Tensor detach(const Tensor& x) { return Tensor::from_data(x.shape(), x.data()); }

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

std::vector<std::int64_t> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("argmax_rows: expected [B, K], got " + shape_str(logits.shape()));
  }
  const std::int64_t b = logits.dim(0), k = logits.dim(1);
  std::vector<std::int64_t> out(static_cast<std::size_t>(b));
  const auto& v = logits.data();
  for (std::int64_t i = 0; i < b; ++i) {
    std::int64_t best = 0;
    double bv = v[static_cast<std::size_t>(i * k)];
    for (std::int64_t j = 1; j < k; ++j) {
      const double c = v[static_cast<std::size_t>(i * k + j)];
      if (c > bv) {
        bv = c;
        best = j;
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

bool all_finite(const Tensor& x) {
  for (double v : x.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void check_finite(const Tensor& x, const std::string& context) {
  if (!all_finite(x)) {
    throw std::runtime_error("non-finite values in " + context);
  }
}

}  // namespace lesionformer
