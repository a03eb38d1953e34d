#pragma once

// Minimal reverse-mode automatic differentiation over dense f64 tensors.
//
// A Tensor is an immutable value: shape plus shared row-major data. Tensors
// produced by operations on taped inputs are recorded on that Tape as nodes;
// Tape::backward walks the nodes in reverse recording order (a valid
// topological order, since a node is recorded after all of its inputs) and
// accumulates gradients additively. Tensors not on any tape are constants.
//
// Parameters live outside tapes. Tape::param binds a parameter's current
// value as a leaf; after backward, Tape::grad(param) reads its gradient.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cctr::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tape;

class Tensor {
 public:
  static constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);

  // Scalar zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor full(Shape shape, double value);
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  // Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t size() const { return data_->size(); }
  std::span<const double> data() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;
  std::vector<double> to_vector() const { return *data_; }

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }
  // Same values, no tape. Gradient never flows through the result.
  Tensor detach() const;
  const std::shared_ptr<const std::vector<double>>& shared_data() const { return data_; }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = kNoNode;
};

// A learnable tensor owned by a model. The value is replaced (never mutated
// in place) by optimizer steps, so tapes that captured an older value stay
// consistent.
struct Parameter {
  std::string name;
  Tensor value;

  Parameter() = default;
  Parameter(std::string name, Tensor value)
      : name(std::move(name)), value(std::move(value)) {}
};

// grad_in[k] is empty when input k does not need a gradient.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<const std::span<double>> grad_in)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(const Tensor& value);
  // Binds a parameter; repeated calls return the same leaf.
  Tensor param(const Parameter& p);

  // Appends an operation node. The output lives on the tape shared by the
  // taped inputs; if no input is taped the result is a constant.
  static Tensor record(Shape shape, std::vector<double> data,
                       std::span<const Tensor> inputs, BackwardFn backward);
  static Tensor record(Shape shape, std::shared_ptr<const std::vector<double>> data,
                       std::span<const Tensor> inputs, BackwardFn backward);

  // Requires a one-element tensor recorded on this tape. Repeated calls
  // recompute from scratch.
  void backward(const Tensor& loss);

  // Gradient of the last backward loss w.r.t. a node; zeros if unreachable.
  std::vector<double> grad(const Tensor& t) const;
  // Zeros if the parameter was never bound or is unreachable.
  std::vector<double> grad(const Parameter& p) const;

  std::size_t node_count() const { return nodes_.size(); }
  // Input node ids of a node (kNoNode entries are constants).
  const std::vector<std::size_t>& inputs_of(std::size_t node) const {
    return nodes_[node].inputs;
  }

 private:
  struct Node {
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::size_t size = 0;
  };

  Tensor attach(Tensor value, Node node);

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const Parameter*, Tensor> bound_;
};

// ---- elementwise (numpy-style broadcasting for binary ops) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// Gradient at exactly zero is taken as zero.
Tensor sqrt(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// tanh approximation.
Tensor gelu(const Tensor& x);
// log(1 + e^x), stable for large |x|.
Tensor softplus(const Tensor& x);
// Gradient passes where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
// Max-subtracted log-sum-exp along an axis (axis removed).
Tensor logsumexp(const Tensor& x, int axis);

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(std::initializer_list<Tensor> parts, int axis);
// Half-open range [begin, end) along axis.
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
// Gathers entries along an axis; repeated indices accumulate gradient.
Tensor index_select(const Tensor& x, int axis, std::span<const std::size_t> indices);

// ---- linear algebra / attention ----
// [m,k]x[k,n], [b,m,k]x[b,k,n] (either batch may be 1), [b,m,k]x[k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
// -inf entries map to exactly 0. A slice that is entirely -inf throws
// DegenerateRowError.
Tensor softmax(const Tensor& x, int axis);

}  // namespace cctr::ad
