#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace lesionformer {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::vector<std::int64_t> row_major_strides(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// One value in the computation graph. Nodes are shared between Tensor handles;
// the tape holds them alive for the duration of a forward/backward pass.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward touches this node
  bool requires_grad = false;

  // Tape registration. serial 0 means "not recorded anywhere".
  std::uint64_t tape_serial = 0;
  std::int64_t node_id = -1;

  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void()> backward_fn;  // empty for leaves

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad();
  // Accumulates additively; no-op when requires_grad is false.
  void add_grad(const double* g, std::int64_t n);
};

// Value-semantics handle onto a graph node. Copying a Tensor aliases the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);  // shape {1}
  static Tensor from_data(Shape shape, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return node_->numel(); }

  const std::vector<double>& data() const { return node_->value; }
  // In-place mutation is for leaves only (optimizer updates, finite-difference
  // probes); mutating a recorded intermediate invalidates the tape.
  std::vector<double>& mutable_data() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b);
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad() { node_->grad.clear(); }

  double value() const;  // scalar tensors only
  double at(std::initializer_list<std::int64_t> idx) const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode> node_;
  friend Tensor make_op_result(Shape shape, std::vector<double> value,
                               std::vector<Tensor> inputs, std::function<void()> backward_fn,
                               TensorNode** self_out);
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Wengert-list tape. Constructing a Tape activates it for the current thread;
// ops executed while a tape is active record themselves onto it. With no
// active tape, ops compute values only (eval mode). One tape per model
// instance; tapes must be destroyed in reverse order of construction.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Drops all recorded nodes and re-arms backward().
  void reset();
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the node list once in reverse order.
  // Requires a scalar loss recorded on this tape; throws if called twice
  // without reset().
  void backward(const Tensor& loss);

  static Tape* active();

  std::int64_t record(const std::shared_ptr<TensorNode>& n);
  bool owns(const TensorNode& n) const { return n.tape_serial == serial_; }

 private:
  std::uint64_t serial_;
  std::vector<std::shared_ptr<TensorNode>> nodes_;
  bool backward_done_ = false;
};

// Convenience: backward on the currently active tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. Each registers a backward rule when a tape is active and any
// input requires grad. Broadcasting is restricted to (a) scalar operands and
// (b) a right operand whose shape equals a trailing suffix of the left
// operand's shape (leading batch axes broadcast).
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor scalar_sub(double c, const Tensor& x);  // c - x
Tensor neg(const Tensor& x);

// a: [..., m, k], b: [..., k, n]. Leading batch extents must match exactly or
// be absent on one side.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow_scalar(const Tensor& x, double p);
Tensor clamp_min(const Tensor& x, double lo);
Tensor gelu(const Tensor& x);  // tanh approximation

Tensor softmax(const Tensor& x, std::int64_t axis);
// Normalizes over the last axis; gain/bias extents must equal the last extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::int64_t>& dims);
Tensor transpose(const Tensor& x, std::int64_t a, std::int64_t b);
Tensor concat(const std::vector<Tensor>& xs, std::int64_t axis);
Tensor slice(const Tensor& x, const std::vector<std::int64_t>& starts,
             const std::vector<std::int64_t>& extents);
// np.roll semantics on axes 1 and 2 of a rank-4 tensor:
// out[b, i, j, c] = in[b, (i - sy) mod h, (j - sx) mod w, c].
Tensor roll2d(const Tensor& x, std::int64_t shift_y, std::int64_t shift_x);

Tensor sum_all(const Tensor& x);   // -> shape {1}
Tensor mean_all(const Tensor& x);  // -> shape {1}
Tensor sum(const Tensor& x, std::int64_t axis);
Tensor mean(const Tensor& x, std::int64_t axis);
// [d0, ..., dn] -> [d0, ..., dn, k] by replication.
Tensor repeat_last(const Tensor& x, std::int64_t k);
// Selects rows along axis 0; backward scatter-adds.
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& indices);

// Stops gradient flow: a constant copy of x's values.
Tensor detach(const Tensor& x);

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

// Row-wise argmax of a [B, K] tensor; ties resolve to the lowest index.
std::vector<std::int64_t> argmax_rows(const Tensor& logits);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& x);
// Throws std::runtime_error naming `context` if x contains NaN/Inf.
void check_finite(const Tensor& x, const std::string& context);

}  // namespace lesionformer
