#include "cctr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "cctr/error.hpp"

namespace cctr::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw DimensionError("tensor: zero-sized dimension in " + to_string(shape_));
  }
  if (numel(shape_) != data.size()) {
    throw DimensionError("tensor: shape " + to_string(shape_) + " needs " +
                         std::to_string(numel(shape_)) + " values, got " +
                         std::to_string(data.size()));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(a)];
}

double Tensor::item() const {
  if (size() != 1) throw RankError("item() on tensor of shape " + to_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::attach(Tensor value, Node node) {
  node.size = value.size();
  value.tape_ = this;
  value.node_ = nodes_.size();
  nodes_.push_back(std::move(node));
  return value;
}

Tensor Tape::leaf(const Tensor& value) { return attach(value.detach(), Node{}); }

Tensor Tape::param(const Parameter& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  Tensor t = leaf(p.value);
  bound_.emplace(&p, t);
  return t;
}

Tensor Tape::record(Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                    BackwardFn backward) {
  return record(std::move(shape), std::make_shared<const std::vector<double>>(std::move(data)),
                inputs, std::move(backward));
}

Tensor Tape::record(Shape shape, std::shared_ptr<const std::vector<double>> data,
                    std::span<const Tensor> inputs, BackwardFn backward) {
  if (numel(shape) != data->size()) {
    throw DimensionError("record: shape " + to_string(shape) + " does not match data size " +
                         std::to_string(data->size()));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = std::move(data);

  Tape* tape = nullptr;
  for (const Tensor& in : inputs) {
    if (!in.on_tape()) continue;
    if (tape && in.tape() != tape) throw Error("operation mixes tensors from different tapes");
    tape = in.tape();
  }
  if (!tape) return out;

  Node node;
  node.inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) node.inputs.push_back(in.node_);
  node.backward = std::move(backward);
  return tape->attach(std::move(out), std::move(node));
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw RankError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  if (loss.tape_ && loss.tape_ != this) throw Error("backward: loss belongs to another tape");
  grads_.assign(nodes_.size(), {});
  if (!loss.tape_) return;
  grads_[loss.node_].assign(1, 1.0);
  std::vector<std::span<double>> grad_in;
  for (std::size_t id = loss.node_ + 1; id-- > 0;) {
    if (grads_[id].empty()) continue;
    const Node& node = nodes_[id];
    if (!node.backward) continue;
    grad_in.assign(node.inputs.size(), {});
    for (std::size_t in : node.inputs) {
      if (in != Tensor::kNoNode && grads_[in].empty()) grads_[in].assign(nodes_[in].size, 0.0);
    }
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (in != Tensor::kNoNode) grad_in[k] = grads_[in];
    }
    node.backward(grads_[id], grad_in);
  }
}

std::vector<double> Tape::grad(const Tensor& t) const {
  if (t.tape_ == this && t.node_ < grads_.size() && !grads_[t.node_].empty()) {
    return grads_[t.node_];
  }
  return std::vector<double>(t.size(), 0.0);
}

std::vector<double> Tape::grad(const Parameter& p) const {
  auto it = bound_.find(&p);
  if (it == bound_.end()) return std::vector<double>(p.value.size(), 0.0);
  return grad(it->second);
}

// ---------------------------------------------------------------------------
// helpers

namespace {

using Data = std::shared_ptr<const std::vector<double>>;

Tensor emit(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
            BackwardFn fn) {
  return Tape::record(std::move(shape), std::move(data),
                      std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(fn));
}

Tensor emit(Shape shape, Data data, std::initializer_list<Tensor> inputs, BackwardFn fn) {
  return Tape::record(std::move(shape), std::move(data),
                      std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(fn));
}

std::size_t norm_axis(int axis, std::size_t rank, const Shape& shape) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape));
  }
  return static_cast<std::size_t>(a);
}

// outer x len x inner decomposition around one axis
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// Maps every output element of a broadcast to the flat index of each operand.
struct BroadcastPlan {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia, ib;
};

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                           to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t off = r - in.size();
  std::vector<std::size_t> in_stride(r, 0);
  {
    const auto st = strides_of(in);
    for (std::size_t i = 0; i < in.size(); ++i) in_stride[i + off] = in[i] == 1 ? 0 : st[i];
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t cur = 0;
  for (std::size_t k = 0; k < n; ++k) {
    idx[k] = cur;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      cur += in_stride[d];
      if (counter[d] < out[d]) break;
      cur -= in_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

std::shared_ptr<const BroadcastPlan> make_plan(const Shape& a, const Shape& b, const char* op) {
  auto plan = std::make_shared<BroadcastPlan>();
  if (a == b) {
    plan->out = a;
    plan->same = true;
    return plan;
  }
  plan->out = broadcast_shape(a, b, op);
  plan->ia = broadcast_index(a, plan->out);
  plan->ib = broadcast_index(b, plan->out);
  return plan;
}

// Elementwise binary op. da/db give the local partials given (x, y, out).
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  auto plan = make_plan(a.shape(), b.shape(), name);
  const std::size_t n = numel(plan->out);
  auto out = std::make_shared<std::vector<double>>(n);
  const auto& x = *a.shared_data();
  const auto& y = *b.shared_data();
  if (plan->same) {
    for (std::size_t k = 0; k < n; ++k) (*out)[k] = f(x[k], y[k]);
  } else {
    for (std::size_t k = 0; k < n; ++k) (*out)[k] = f(x[plan->ia[k]], y[plan->ib[k]]);
  }
  Data od = out;
  Data ad = a.shared_data(), bd = b.shared_data();
  return emit(plan->out, od, {a, b},
              [plan, ad, bd, od, da, db](std::span<const double> g,
                                         std::span<const std::span<double>> gin) {
                const auto& x = *ad;
                const auto& y = *bd;
                const auto& o = *od;
                const std::size_t n = g.size();
                for (std::size_t k = 0; k < n; ++k) {
                  const std::size_t i = plan->same ? k : plan->ia[k];
                  const std::size_t j = plan->same ? k : plan->ib[k];
                  if (!gin[0].empty()) gin[0][i] += g[k] * da(x[i], y[j], o[k]);
                  if (!gin[1].empty()) gin[1][j] += g[k] * db(x[i], y[j], o[k]);
                }
              });
}

// Elementwise unary op. d gives the local derivative given (x, out).
template <class F, class D>
Tensor unary(const Tensor& x, F f, D d) {
  const auto& in = *x.shared_data();
  auto out = std::make_shared<std::vector<double>>(in.size());
  for (std::size_t k = 0; k < in.size(); ++k) (*out)[k] = f(in[k]);
  Data od = out;
  Data xd = x.shared_data();
  return emit(x.shape(), od, {x},
              [xd, od, d](std::span<const double> g, std::span<const std::span<double>> gin) {
                const auto& in = *xd;
                const auto& o = *od;
                for (std::size_t k = 0; k < g.size(); ++k) gin[0][k] += g[k] * d(in[k], o[k]);
              });
}

// Adds g into the gradient of an operand whose elements map 1:1.
BackwardFn pass_through() {
  return [](std::span<const double> g, std::span<const std::span<double>> gin) {
    for (std::size_t k = 0; k < g.size(); ++k) gin[0][k] += g[k];
  };
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Tensor scale(const Tensor& x, double c) {
  return unary(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double o) { return o; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, [](double v) { return std::sqrt(v); },
      [](double, double o) { return o > 0.0 ? 0.5 / o : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double o) { return 1.0 - o * o; });
}

Tensor sigmoid(const Tensor& x) {
  static constexpr double hi = 1.0 - 0x1.0p-53;
  static constexpr double lo = std::numeric_limits<double>::min();
  return unary(
      x,
      [](double v) {
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        return std::clamp(s, lo, hi);
      },
      [](double, double o) { return o * (1.0 - o); });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(c * (v + k * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
      });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
  const auto& in = x.data();
  double s = 0.0;
  for (double v : in) s += v;
  return emit({}, std::vector<double>{s}, {x},
              [](std::span<const double> g, std::span<const std::span<double>> gin) {
                for (double& v : gin[0]) v += g[0];
              });
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.rank(), x.shape());
  const AxisSplit s = split_at(x.shape(), ax);
  Shape shape = x.shape();
  if (keepdim) {
    shape[ax] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const auto& in = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += in[(o * s.len + l) * s.inner + i];
  return emit(std::move(shape), std::move(out), {x},
              [s](std::span<const double> g, std::span<const std::span<double>> gin) {
                for (std::size_t o = 0; o < s.outer; ++o)
                  for (std::size_t l = 0; l < s.len; ++l)
                    for (std::size_t i = 0; i < s.inner; ++i)
                      gin[0][(o * s.len + l) * s.inner + i] += g[o * s.inner + i];
              });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const std::size_t len = x.dim(axis);
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

Tensor logsumexp(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), x.shape());
  const AxisSplit s = split_at(x.shape(), ax);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  const auto& in = x.data();
  auto out = std::make_shared<std::vector<double>>(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) m = std::max(m, in[(o * s.len + l) * s.inner + i]);
      if (m == -std::numeric_limits<double>::infinity()) {
        throw DegenerateRowError("logsumexp: every entry of a slice is -inf");
      }
      double acc = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) acc += std::exp(in[(o * s.len + l) * s.inner + i] - m);
      (*out)[o * s.inner + i] = m + std::log(acc);
    }
  }
  Data od = out;
  Data xd = x.shared_data();
  return emit(std::move(shape), od, {x},
              [s, xd, od](std::span<const double> g, std::span<const std::span<double>> gin) {
                const auto& in = *xd;
                for (std::size_t o = 0; o < s.outer; ++o)
                  for (std::size_t l = 0; l < s.len; ++l)
                    for (std::size_t i = 0; i < s.inner; ++i) {
                      const std::size_t k = (o * s.len + l) * s.inner + i;
                      const std::size_t r = o * s.inner + i;
                      gin[0][k] += g[r] * std::exp(in[k] - (*od)[r]);
                    }
              });
}

// ---------------------------------------------------------------------------
// shape

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " +
                         to_string(shape));
  }
  return emit(std::move(shape), x.shared_data(), {x}, pass_through());
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  const Shape out = broadcast_shape(x.shape(), shape, "broadcast_to");
  if (out != shape) {
    throw DimensionError("broadcast_to: " + to_string(x.shape()) + " does not broadcast to " +
                         to_string(shape));
  }
  auto idx = std::make_shared<const std::vector<std::size_t>>(broadcast_index(x.shape(), shape));
  const auto& in = x.data();
  std::vector<double> data(idx->size());
  for (std::size_t k = 0; k < idx->size(); ++k) data[k] = in[(*idx)[k]];
  return emit(shape, std::move(data), {x},
              [idx](std::span<const double> g, std::span<const std::span<double>> gin) {
                for (std::size_t k = 0; k < g.size(); ++k) gin[0][(*idx)[k]] += g[k];
              });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  if (order.size() != r) {
    throw DimensionError("permute: order has " + std::to_string(order.size()) +
                         " axes for shape " + to_string(x.shape()));
  }
  std::vector<bool> seen(r, false);
  for (std::size_t a : order) {
    if (a >= r || seen[a]) throw DimensionError("permute: invalid axis order");
    seen[a] = true;
  }
  Shape shape(r);
  for (std::size_t i = 0; i < r; ++i) shape[i] = x.shape()[order[i]];
  const auto in_st = strides_of(x.shape());
  std::vector<std::size_t> st(r);
  for (std::size_t i = 0; i < r; ++i) st[i] = in_st[order[i]];

  const std::size_t n = x.size();
  auto idx = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t cur = 0;
  for (std::size_t k = 0; k < n; ++k) {
    (*idx)[k] = cur;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      cur += st[d];
      if (counter[d] < shape[d]) break;
      cur -= st[d] * counter[d];
      counter[d] = 0;
    }
  }
  const auto& in = x.data();
  std::vector<double> data(n);
  for (std::size_t k = 0; k < n; ++k) data[k] = in[(*idx)[k]];
  std::shared_ptr<const std::vector<std::size_t>> cidx = idx;
  return emit(std::move(shape), std::move(data), {x},
              [cidx](std::span<const double> g, std::span<const std::span<double>> gin) {
                for (std::size_t k = 0; k < g.size(); ++k) gin[0][(*cidx)[k]] += g[k];
              });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw RankError("transpose: need rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[x.rank() - 1], order[x.rank() - 2]);
  return permute(x, order);
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const std::size_t ax = norm_axis(axis, first.size(), first);
  Shape shape = first;
  shape[ax] = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shape " + to_string(s) + " incompatible with " +
                           to_string(first) + " along axis " + std::to_string(axis));
    }
    offsets.push_back(shape[ax]);
    shape[ax] += s[ax];
  }
  const AxisSplit total = split_at(shape, ax);
  std::vector<double> data(numel(shape));
  std::vector<std::size_t> lens;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& in = parts[p].data();
    const std::size_t len = parts[p].shape()[ax];
    lens.push_back(len);
    for (std::size_t o = 0; o < total.outer; ++o)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * len * total.inner), len * total.inner,
                  data.begin() + static_cast<std::ptrdiff_t>((o * total.len + offsets[p]) * total.inner));
  }
  return Tape::record(
      std::move(shape), std::move(data), parts,
      [total, offsets, lens](std::span<const double> g, std::span<const std::span<double>> gin) {
        for (std::size_t p = 0; p < gin.size(); ++p) {
          if (gin[p].empty()) continue;
          const std::size_t chunk = lens[p] * total.inner;
          for (std::size_t o = 0; o < total.outer; ++o) {
            const std::size_t src = (o * total.len + offsets[p]) * total.inner;
            for (std::size_t k = 0; k < chunk; ++k) gin[p][o * chunk + k] += g[src + k];
          }
        }
      });
}

Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = norm_axis(axis, x.rank(), x.shape());
  if (begin >= end || end > x.shape()[ax]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of bounds for axis " + std::to_string(axis) + " of " +
                         to_string(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), ax);
  Shape shape = x.shape();
  shape[ax] = end - begin;
  const std::size_t chunk = (end - begin) * s.inner;
  const auto& in = x.data();
  std::vector<double> data(s.outer * chunk);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * s.len + begin) * s.inner), chunk,
                data.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  return emit(std::move(shape), std::move(data), {x},
              [s, begin, chunk](std::span<const double> g, std::span<const std::span<double>> gin) {
                for (std::size_t o = 0; o < s.outer; ++o)
                  for (std::size_t k = 0; k < chunk; ++k)
                    gin[0][(o * s.len + begin) * s.inner + k] += g[o * chunk + k];
              });
}

Tensor index_select(const Tensor& x, int axis, std::span<const std::size_t> indices) {
  const std::size_t ax = norm_axis(axis, x.rank(), x.shape());
  if (indices.empty()) throw DimensionError("index_select: empty index list");
  for (std::size_t i : indices) {
    if (i >= x.shape()[ax]) {
      throw DimensionError("index_select: index " + std::to_string(i) + " out of range for " +
                           to_string(x.shape()));
    }
  }
  const AxisSplit s = split_at(x.shape(), ax);
  Shape shape = x.shape();
  shape[ax] = indices.size();
  auto idx = std::make_shared<const std::vector<std::size_t>>(indices.begin(), indices.end());
  const std::size_t m = idx->size();
  const auto& in = x.data();
  std::vector<double> data(s.outer * m * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < m; ++j)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * s.len + (*idx)[j]) * s.inner),
                  s.inner, data.begin() + static_cast<std::ptrdiff_t>((o * m + j) * s.inner));
  return emit(std::move(shape), std::move(data), {x},
              [s, idx](std::span<const double> g, std::span<const std::span<double>> gin) {
                const std::size_t m = idx->size();
                for (std::size_t o = 0; o < s.outer; ++o)
                  for (std::size_t j = 0; j < m; ++j)
                    for (std::size_t i = 0; i < s.inner; ++i)
                      gin[0][(o * s.len + (*idx)[j]) * s.inner + i] += g[(o * m + j) * s.inner + i];
              });
}

// ---------------------------------------------------------------------------
// matmul / softmax

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto mismatch = [&] {
    return DimensionError("matmul: shape mismatch " + to_string(a.shape()) + " x " +
                          to_string(b.shape()));
  };
  if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3) throw mismatch();
  const std::size_t ba = a.rank() == 3 ? a.shape()[0] : 1;
  const std::size_t bb = b.rank() == 3 ? b.shape()[0] : 1;
  const std::size_t m = a.dim(-2), k = a.dim(-1);
  const std::size_t k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2 || (ba != bb && ba != 1 && bb != 1)) throw mismatch();
  const std::size_t batch = std::max(ba, bb);
  const bool batched = a.rank() == 3 || b.rank() == 3;

  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  const auto& x = a.data();
  const auto& y = b.data();
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t t = 0; t < batch; ++t) {
    const double* ap = x.data() + (ba == 1 ? 0 : t * m * k);
    const double* bp = y.data() + (bb == 1 ? 0 : t * k * n);
    double* cp = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ap[i * k + p];
        for (std::size_t j = 0; j < n; ++j) cp[i * n + j] += av * bp[p * n + j];
      }
  }
  Data ad = a.shared_data(), bd = b.shared_data();
  return emit(std::move(shape), std::move(out), {a, b},
              [ad, bd, ba, bb, batch, m, k, n](std::span<const double> g,
                                               std::span<const std::span<double>> gin) {
                const auto& x = *ad;
                const auto& y = *bd;
                for (std::size_t t = 0; t < batch; ++t) {
                  const double* ap = x.data() + (ba == 1 ? 0 : t * m * k);
                  const double* bp = y.data() + (bb == 1 ? 0 : t * k * n);
                  const double* gp = g.data() + t * m * n;
                  if (!gin[0].empty()) {
                    double* ga = gin[0].data() + (ba == 1 ? 0 : t * m * k);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += gp[i * n + j] * bp[p * n + j];
                        ga[i * k + p] += acc;
                      }
                  }
                  if (!gin[1].empty()) {
                    double* gb = gin[1].data() + (bb == 1 ? 0 : t * k * n);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        const double av = ap[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * gp[i * n + j];
                      }
                  }
                }
              });
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), x.shape());
  const AxisSplit s = split_at(x.shape(), ax);
  const auto& in = x.data();
  auto out = std::make_shared<std::vector<double>>(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) m = std::max(m, in[at(l)]);
      if (m == -std::numeric_limits<double>::infinity()) {
        throw DegenerateRowError("softmax: every entry of a slice is -inf");
      }
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(in[at(l)] - m);
        (*out)[at(l)] = e;
        z += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) (*out)[at(l)] /= z;
    }
  }
  Data od = out;
  return emit(x.shape(), od, {x},
              [s, od](std::span<const double> g, std::span<const std::span<double>> gin) {
                const auto& y = *od;
                for (std::size_t o = 0; o < s.outer; ++o)
                  for (std::size_t i = 0; i < s.inner; ++i) {
                    const auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
                    double dot = 0.0;
                    for (std::size_t l = 0; l < s.len; ++l) dot += g[at(l)] * y[at(l)];
                    for (std::size_t l = 0; l < s.len; ++l)
                      gin[0][at(l)] += y[at(l)] * (g[at(l)] - dot);
                  }
              });
}

}  // namespace cctr::ad
