// SPDX-License-Identifier: Apache-2.0

#include "mmtoc/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mmtoc {

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::vector<int> shape_in, std::vector<double> values_in)
    : shape(std::move(shape_in)), values(std::move(values_in)) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw Error("tensor dimension must be positive, got " + shape_str(shape));
    n *= d;
  }
  if (n != static_cast<std::int64_t>(values.size())) {
    throw Error("tensor shape " + shape_str(shape) + " does not match value count " +
                std::to_string(values.size()));
  }
}

Tensor Tensor::zeros(std::vector<int> shape_in) {
  std::int64_t n = 1;
  for (int d : shape_in) n *= d;
  return Tensor(std::move(shape_in), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(std::vector<int> shape_in, double v) {
  Tensor t = zeros(std::move(shape_in));
  std::fill(t.values.begin(), t.values.end(), v);
  return t;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::vector(std::vector<double> v) {
  int n = static_cast<int>(v.size());
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

std::int64_t Tensor::size() const {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

int Tensor::rows() const { return shape.empty() ? 1 : shape[0]; }

int Tensor::cols() const {
  if (shape.size() == 2) return shape[1];
  if (shape.size() == 1) return shape[0];
  return 1;
}

double& Tensor::at(int r, int c) { return values[static_cast<std::size_t>(r) * cols() + c]; }

double Tensor::at(int r, int c) const {
  return values[static_cast<std::size_t>(r) * cols() + c];
}

bool Tensor::all_finite() const {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// ---------------------------------------------------------------------------
// Rng

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : state_(seed) {}

std::uint64_t Rng::next_u64() {
  state_ += kGolden;
  return mix64(state_);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
  if (has_cached_gaussian_) {
    has_cached_gaussian_ = false;
    return cached_gaussian_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  double f = std::sqrt(-2.0 * std::log(s) / s);
  cached_gaussian_ = v * f;
  has_cached_gaussian_ = true;
  return u * f;
}

int Rng::below(int n) {
  if (n <= 0) throw Error("Rng::below needs n > 0");
  std::uint64_t un = static_cast<std::uint64_t>(n);
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<int>(x % un);
}

Rng Rng::fork(std::uint64_t tag) const {
  return Rng(mix64(state_ ^ (tag * 0xD1B54A32D192ED03ULL) ^ kGolden));
}

Tensor Rng::gaussian_tensor(std::vector<int> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values) v = gaussian();
  return t;
}

Tensor Rng::uniform_tensor(std::vector<int> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values) v = uniform();
  return t;
}

std::vector<int> Rng::permutation(int n) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    int j = below(i + 1);
    std::swap(p[i], p[j]);
  }
  return p;
}

std::vector<int> Rng::derangement(int n) {
  if (n < 2) throw Error("derangement needs batch size >= 2, got " + std::to_string(n));
  for (;;) {
    std::vector<int> p = permutation(n);
    bool fixed = false;
    for (int i = 0; i < n; ++i) {
      if (p[i] == i) {
        fixed = true;
        break;
      }
    }
    if (!fixed) return p;
  }
}

// ---------------------------------------------------------------------------
// Graph

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::multiply: return "multiply";
    case Op::negate: return "negate";
    case Op::exponent: return "exponent";
    case Op::logarithm: return "logarithm";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::relu: return "relu";
    case Op::softplus: return "softplus";
    case Op::reduce_sum: return "reduce_sum";
    case Op::reduce_mean: return "reduce_mean";
    case Op::broadcast: return "broadcast";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::grl: return "grl";
  }
  return "?";
}

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

void require_same_shape(Op op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw Error(std::string(op_name(op)) + ": shape mismatch " + shape_str(a.shape) +
                " vs " + shape_str(b.shape));
  }
}

}  // namespace

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  NodeId id = static_cast<NodeId>(nodes_.size()) - 1;
  check_finite(id);
  return id;
}

void Graph::check_finite(NodeId id) {
  if (!nodes_[id].out.all_finite()) {
    throw Error("non-finite output at node " + std::to_string(id) + " (" +
                op_name(nodes_[id].op) + ")");
  }
}

NodeId Graph::constant(Tensor t) {
  Node n;
  n.op = Op::leaf;
  n.out = std::move(t);
  n.requires_grad = false;
  return push(std::move(n));
}

NodeId Graph::input(Tensor t) {
  Node n;
  n.op = Op::leaf;
  n.out = std::move(t);
  n.requires_grad = true;
  return push(std::move(n));
}

NodeId Graph::param(Param& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  Node n;
  n.op = Op::leaf;
  n.out = p.value;
  n.out.grad.clear();
  n.requires_grad = true;
  n.bound = &p;
  NodeId id = push(std::move(n));
  bound_.emplace(&p, id);
  return id;
}

NodeId Graph::build_primitive(Op kind, const std::vector<NodeId>& inputs) {
  switch (kind) {
    case Op::matmul: return matmul(inputs.at(0), inputs.at(1));
    case Op::add: return add(inputs.at(0), inputs.at(1));
    case Op::multiply: return multiply(inputs.at(0), inputs.at(1));
    case Op::negate: return negate(inputs.at(0));
    case Op::exponent: return exponent(inputs.at(0));
    case Op::logarithm: return logarithm(inputs.at(0));
    case Op::sigmoid: return sigmoid(inputs.at(0));
    case Op::tanh: return tanh(inputs.at(0));
    case Op::relu: return relu(inputs.at(0));
    case Op::softplus: return softplus(inputs.at(0));
    case Op::reduce_sum: return reduce_sum(inputs.at(0));
    case Op::reduce_mean: return reduce_mean(inputs.at(0));
    case Op::concat: return concat(inputs.at(0), inputs.at(1));
    default:
      throw Error(std::string("build_primitive: ") + op_name(kind) +
                  " needs its attribute-carrying wrapper");
  }
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.is_matrix() || !tb.is_matrix() || ta.shape[1] != tb.shape[0]) {
    throw Error("matmul: incompatible shapes " + shape_str(ta.shape) + " x " +
                shape_str(tb.shape));
  }
  int n = ta.shape[0], k = ta.shape[1], m = tb.shape[1];
  Node node;
  node.op = Op::matmul;
  node.inputs = {a, b};
  node.out = Tensor::zeros({n, m});
  const double* pa = ta.values.data();
  const double* pb = tb.values.data();
  double* pc = node.out.values.data();
  for (int i = 0; i < n; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      double aik = pa[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = pb + kk * m;
      double* crow = pc + i * m;
      for (int j = 0; j < m; ++j) crow[j] += aik * brow[j];
    }
  }
  node.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(node));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_same_shape(Op::add, ta, tb);
  Node node;
  node.op = Op::add;
  node.inputs = {a, b};
  node.out = ta;
  for (std::size_t i = 0; i < tb.values.size(); ++i) node.out.values[i] += tb.values[i];
  node.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(node));
}

NodeId Graph::multiply(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_same_shape(Op::multiply, ta, tb);
  Node node;
  node.op = Op::multiply;
  node.inputs = {a, b};
  node.out = ta;
  for (std::size_t i = 0; i < tb.values.size(); ++i) node.out.values[i] *= tb.values[i];
  node.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(node));
}

namespace {
template <class F>
Node unary_node(Op op, NodeId x, const Tensor& tx, bool req, F&& f) {
  Node node;
  node.op = op;
  node.inputs = {x};
  node.out = tx;
  for (double& v : node.out.values) v = f(v);
  node.requires_grad = req;
  return node;
}
}  // namespace

NodeId Graph::negate(NodeId x) {
  return push(unary_node(Op::negate, x, value(x), nodes_[x].requires_grad,
                         [](double v) { return -v; }));
}

NodeId Graph::exponent(NodeId x) {
  return push(unary_node(Op::exponent, x, value(x), nodes_[x].requires_grad,
                         [](double v) { return std::exp(v); }));
}

NodeId Graph::logarithm(NodeId x) {
  return push(unary_node(Op::logarithm, x, value(x), nodes_[x].requires_grad,
                         [](double v) { return std::log(v); }));
}

NodeId Graph::sigmoid(NodeId x) {
  return push(unary_node(Op::sigmoid, x, value(x), nodes_[x].requires_grad,
                         [](double v) { return stable_sigmoid(v); }));
}

NodeId Graph::tanh(NodeId x) {
  return push(unary_node(Op::tanh, x, value(x), nodes_[x].requires_grad,
                         [](double v) { return std::tanh(v); }));
}

NodeId Graph::relu(NodeId x) {
  return push(unary_node(Op::relu, x, value(x), nodes_[x].requires_grad,
                         [](double v) { return v > 0.0 ? v : 0.0; }));
}

NodeId Graph::softplus(NodeId x) {
  return push(unary_node(Op::softplus, x, value(x), nodes_[x].requires_grad,
                         [](double v) { return stable_softplus(v); }));
}

NodeId Graph::reduce_sum(NodeId x, int axis) {
  const Tensor& tx = value(x);
  Node node;
  node.op = Op::reduce_sum;
  node.inputs = {x};
  node.axis = axis;
  if (axis == -1) {
    double s = 0.0;
    for (double v : tx.values) s += v;
    node.out = Tensor::scalar(s);
  } else if (axis == 1 && tx.is_matrix()) {
    int n = tx.shape[0], d = tx.shape[1];
    node.out = Tensor::zeros({n, 1});
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += tx.values[static_cast<std::size_t>(i) * d + j];
      node.out.values[i] = s;
    }
  } else {
    throw Error("reduce_sum: unsupported axis " + std::to_string(axis) + " for shape " +
                shape_str(tx.shape));
  }
  node.requires_grad = nodes_[x].requires_grad;
  return push(std::move(node));
}

NodeId Graph::reduce_mean(NodeId x, int axis) {
  const Tensor& tx = value(x);
  Node node;
  node.op = Op::reduce_mean;
  node.inputs = {x};
  node.axis = axis;
  if (axis == -1) {
    double s = 0.0;
    for (double v : tx.values) s += v;
    node.out = Tensor::scalar(s / static_cast<double>(tx.size()));
  } else if (axis == 1 && tx.is_matrix()) {
    int n = tx.shape[0], d = tx.shape[1];
    node.out = Tensor::zeros({n, 1});
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += tx.values[static_cast<std::size_t>(i) * d + j];
      node.out.values[i] = s / d;
    }
  } else {
    throw Error("reduce_mean: unsupported axis " + std::to_string(axis) + " for shape " +
                shape_str(tx.shape));
  }
  node.requires_grad = nodes_[x].requires_grad;
  return push(std::move(node));
}

NodeId Graph::broadcast(NodeId x, int rows, int cols) {
  const Tensor& tx = value(x);
  Node node;
  node.op = Op::broadcast;
  node.inputs = {x};
  node.out = Tensor::zeros({rows, cols});
  if (tx.size() == 1) {
    std::fill(node.out.values.begin(), node.out.values.end(), tx.values[0]);
  } else if ((tx.shape.size() == 1 && tx.shape[0] == cols) ||
             (tx.is_matrix() && tx.shape[0] == 1 && tx.shape[1] == cols)) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) node.out.at(i, j) = tx.values[j];
  } else if (tx.is_matrix() && tx.shape[1] == 1 && tx.shape[0] == rows) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) node.out.at(i, j) = tx.values[i];
  } else {
    throw Error("broadcast: cannot expand " + shape_str(tx.shape) + " to (" +
                std::to_string(rows) + "," + std::to_string(cols) + ")");
  }
  node.requires_grad = nodes_[x].requires_grad;
  return push(std::move(node));
}

NodeId Graph::concat(NodeId a, NodeId b, int axis) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (axis != 1 || !ta.is_matrix() || !tb.is_matrix() || ta.shape[0] != tb.shape[0]) {
    throw Error("concat: needs two matrices with equal rows on axis 1, got " +
                shape_str(ta.shape) + " and " + shape_str(tb.shape));
  }
  int n = ta.shape[0], da = ta.shape[1], db = tb.shape[1];
  Node node;
  node.op = Op::concat;
  node.inputs = {a, b};
  node.axis = axis;
  node.out = Tensor::zeros({n, da + db});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < da; ++j) node.out.at(i, j) = ta.at(i, j);
    for (int j = 0; j < db; ++j) node.out.at(i, da + j) = tb.at(i, j);
  }
  node.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(node));
}

NodeId Graph::slice(NodeId x, int axis, int start, int len) {
  const Tensor& tx = value(x);
  if (!tx.is_matrix() || (axis != 0 && axis != 1)) {
    throw Error("slice: needs a matrix and axis 0 or 1, got " + shape_str(tx.shape));
  }
  int extent = tx.shape[axis];
  if (start < 0 || len <= 0 || start + len > extent) {
    throw Error("slice: range [" + std::to_string(start) + "," +
                std::to_string(start + len) + ") outside extent " + std::to_string(extent));
  }
  int n = tx.shape[0], d = tx.shape[1];
  Node node;
  node.op = Op::slice;
  node.inputs = {x};
  node.axis = axis;
  node.start = start;
  node.len = len;
  if (axis == 1) {
    node.out = Tensor::zeros({n, len});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < len; ++j) node.out.at(i, j) = tx.at(i, start + j);
  } else {
    node.out = Tensor::zeros({len, d});
    for (int i = 0; i < len; ++i)
      for (int j = 0; j < d; ++j) node.out.at(i, j) = tx.at(start + i, j);
  }
  node.requires_grad = nodes_[x].requires_grad;
  return push(std::move(node));
}

NodeId Graph::grl(NodeId x, double alpha) {
  if (alpha < 0.0) throw Error("grl: alpha must be >= 0");
  Node node;
  node.op = Op::grl;
  node.inputs = {x};
  node.alpha = alpha;
  node.out = value(x);
  node.requires_grad = nodes_[x].requires_grad;
  return push(std::move(node));
}

NodeId Graph::scale(NodeId x, double c) {
  const Tensor& tx = value(x);
  NodeId cn = constant(Tensor::full(tx.shape, c));
  return multiply(x, cn);
}

NodeId Graph::add_scalar(NodeId x, double c) {
  const Tensor& tx = value(x);
  NodeId cn = constant(Tensor::full(tx.shape, c));
  return add(x, cn);
}

const Tensor& Graph::value(NodeId id) const { return nodes_.at(id).out; }

const std::vector<double>& Graph::grad_of(NodeId id) const {
  const Node& n = nodes_.at(id);
  if (n.grad.empty()) throw Error("node " + std::to_string(id) + " has no gradient");
  return n.grad;
}

double Graph::scalar_value(NodeId id) const {
  const Tensor& t = value(id);
  if (!t.is_scalar()) throw Error("expected scalar node, got shape " + shape_str(t.shape));
  return t.values[0];
}

void Graph::backward(NodeId loss) {
  if (loss < 0 || loss >= static_cast<NodeId>(nodes_.size())) throw Error("backward: bad node id");
  if (!value(loss).is_scalar()) {
    throw Error("backward: loss must be scalar, got shape " + shape_str(value(loss).shape));
  }
  for (Node& n : nodes_) {
    n.grad.assign(n.out.values.size(), 0.0);
  }
  nodes_[loss].grad[0] = 1.0;

  for (NodeId id = loss; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.op == Op::leaf) continue;
    const std::vector<double>& g = n.grad;
    bool any = false;
    for (double v : g) {
      if (v != 0.0) {
        any = true;
        break;
      }
    }
    if (!any) continue;

    switch (n.op) {
      case Op::matmul: {
        const Tensor& ta = nodes_[n.inputs[0]].out;
        const Tensor& tb = nodes_[n.inputs[1]].out;
        int rows = ta.shape[0], k = ta.shape[1], m = tb.shape[1];
        if (nodes_[n.inputs[0]].requires_grad) {
          std::vector<double>& da = nodes_[n.inputs[0]].grad;
          for (int i = 0; i < rows; ++i)
            for (int kk = 0; kk < k; ++kk) {
              double s = 0.0;
              const double* grow = g.data() + static_cast<std::size_t>(i) * m;
              const double* brow = tb.values.data() + static_cast<std::size_t>(kk) * m;
              for (int j = 0; j < m; ++j) s += grow[j] * brow[j];
              da[static_cast<std::size_t>(i) * k + kk] += s;
            }
        }
        if (nodes_[n.inputs[1]].requires_grad) {
          std::vector<double>& db = nodes_[n.inputs[1]].grad;
          for (int kk = 0; kk < k; ++kk)
            for (int i = 0; i < rows; ++i) {
              double aik = ta.values[static_cast<std::size_t>(i) * k + kk];
              if (aik == 0.0) continue;
              const double* grow = g.data() + static_cast<std::size_t>(i) * m;
              double* dbrow = db.data() + static_cast<std::size_t>(kk) * m;
              for (int j = 0; j < m; ++j) dbrow[j] += aik * grow[j];
            }
        }
        break;
      }
      case Op::add: {
        for (int s = 0; s < 2; ++s) {
          Node& in = nodes_[n.inputs[s]];
          if (!in.requires_grad) continue;
          for (std::size_t i = 0; i < g.size(); ++i) in.grad[i] += g[i];
        }
        break;
      }
      case Op::multiply: {
        Node& a = nodes_[n.inputs[0]];
        Node& b = nodes_[n.inputs[1]];
        if (a.requires_grad)
          for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] * b.out.values[i];
        if (b.requires_grad)
          for (std::size_t i = 0; i < g.size(); ++i) b.grad[i] += g[i] * a.out.values[i];
        break;
      }
      case Op::negate: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] -= g[i];
        break;
      }
      case Op::exponent: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] * n.out.values[i];
        break;
      }
      case Op::logarithm: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] / a.out.values[i];
        break;
      }
      case Op::sigmoid: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t i = 0; i < g.size(); ++i) {
          double s = n.out.values[i];
          a.grad[i] += g[i] * s * (1.0 - s);
        }
        break;
      }
      case Op::tanh: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t i = 0; i < g.size(); ++i) {
          double t = n.out.values[i];
          a.grad[i] += g[i] * (1.0 - t * t);
        }
        break;
      }
      case Op::relu: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t i = 0; i < g.size(); ++i)
          if (a.out.values[i] > 0.0) a.grad[i] += g[i];
        break;
      }
      case Op::softplus: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t i = 0; i < g.size(); ++i)
          a.grad[i] += g[i] * stable_sigmoid(a.out.values[i]);
        break;
      }
      case Op::reduce_sum: {
        Node& a = nodes_[n.inputs[0]];
        if (n.axis == -1) {
          for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += g[0];
        } else {
          int nn = a.out.shape[0], d = a.out.shape[1];
          for (int i = 0; i < nn; ++i)
            for (int j = 0; j < d; ++j) a.grad[static_cast<std::size_t>(i) * d + j] += g[i];
        }
        break;
      }
      case Op::reduce_mean: {
        Node& a = nodes_[n.inputs[0]];
        if (n.axis == -1) {
          double w = 1.0 / static_cast<double>(a.out.size());
          for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += g[0] * w;
        } else {
          int nn = a.out.shape[0], d = a.out.shape[1];
          double w = 1.0 / d;
          for (int i = 0; i < nn; ++i)
            for (int j = 0; j < d; ++j)
              a.grad[static_cast<std::size_t>(i) * d + j] += g[i] * w;
        }
        break;
      }
      case Op::broadcast: {
        Node& a = nodes_[n.inputs[0]];
        int rows = n.out.shape[0], cols = n.out.shape[1];
        if (a.out.size() == 1) {
          double s = 0.0;
          for (double v : g) s += v;
          a.grad[0] += s;
        } else if (a.out.rows() == 1 || a.out.shape.size() == 1) {
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) a.grad[j] += g[static_cast<std::size_t>(i) * cols + j];
        } else {
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) a.grad[i] += g[static_cast<std::size_t>(i) * cols + j];
        }
        break;
      }
      case Op::concat: {
        Node& a = nodes_[n.inputs[0]];
        Node& b = nodes_[n.inputs[1]];
        int rows = n.out.shape[0], da = a.out.shape[1], db = b.out.shape[1];
        for (int i = 0; i < rows; ++i) {
          if (a.requires_grad)
            for (int j = 0; j < da; ++j)
              a.grad[static_cast<std::size_t>(i) * da + j] +=
                  g[static_cast<std::size_t>(i) * (da + db) + j];
          if (b.requires_grad)
            for (int j = 0; j < db; ++j)
              b.grad[static_cast<std::size_t>(i) * db + j] +=
                  g[static_cast<std::size_t>(i) * (da + db) + da + j];
        }
        break;
      }
      case Op::slice: {
        Node& a = nodes_[n.inputs[0]];
        int d = a.out.shape[1];
        if (n.axis == 1) {
          int rows = n.out.shape[0];
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < n.len; ++j)
              a.grad[static_cast<std::size_t>(i) * d + n.start + j] +=
                  g[static_cast<std::size_t>(i) * n.len + j];
        } else {
          for (int i = 0; i < n.len; ++i)
            for (int j = 0; j < d; ++j)
              a.grad[static_cast<std::size_t>(n.start + i) * d + j] +=
                  g[static_cast<std::size_t>(i) * d + j];
        }
        break;
      }
      case Op::grl: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += -n.alpha * g[i];
        break;
      }
      case Op::leaf:
        break;
    }
  }

  for (auto& [p, id] : bound_) {
    Param* mp = const_cast<Param*>(p);
    mp->value.grad = nodes_[id].grad;
  }
}

// ---------------------------------------------------------------------------
// Dense layers

NodeId apply_activation(Graph& g, NodeId x, Activation act) {
  switch (act) {
    case Activation::identity: return x;
    case Activation::tanh: return g.tanh(x);
    case Activation::relu: return g.relu(x);
    case Activation::sigmoid: return g.sigmoid(x);
    case Activation::softplus: return g.softplus(x);
  }
  throw Error("unknown activation");
}

NodeId dense(Graph& g, NodeId x, NodeId w, NodeId b, Activation act) {
  const Tensor& tw = g.value(w);
  const Tensor& tb = g.value(b);
  if (!tw.is_matrix()) throw Error("dense: weights must be (in,out), got " + shape_str(tw.shape));
  if (tb.size() != tw.shape[1]) {
    throw Error("dense: bias length " + std::to_string(tb.size()) +
                " does not match out dim " + std::to_string(tw.shape[1]));
  }
  NodeId z = g.matmul(x, w);
  NodeId bb = g.broadcast(b, g.value(z).shape[0], tw.shape[1]);
  return apply_activation(g, g.add(z, bb), act);
}

DenseLayer make_dense(int in, int out, Activation act, Rng& rng, const std::string& name) {
  DenseLayer layer;
  double r = std::sqrt(6.0 / (in + out));
  Tensor w = Tensor::zeros({in, out});
  for (double& v : w.values) v = (2.0 * rng.uniform() - 1.0) * r;
  layer.weight = Param{name + ".w", std::move(w), {}, {}};
  layer.bias = Param{name + ".b", Tensor::zeros({1, out}), {}, {}};
  layer.act = act;
  return layer;
}

NodeId Mlp::apply(Graph& g, NodeId x) {
  NodeId h = x;
  for (DenseLayer& layer : layers) {
    h = dense(g, h, g.param(layer.weight), g.param(layer.bias), layer.act);
  }
  return h;
}

void Mlp::for_each_param(const std::function<void(Param&)>& fn) {
  for (DenseLayer& layer : layers) {
    fn(layer.weight);
    fn(layer.bias);
  }
}

int Mlp::input_dim() const { return layers.front().weight.value.shape[0]; }

int Mlp::output_dim() const { return layers.back().weight.value.shape[1]; }

Mlp make_mlp(int in, const std::vector<int>& hidden, int out, Activation hidden_act,
             Activation out_act, Rng& rng, const std::string& prefix) {
  Mlp mlp;
  int prev = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    mlp.layers.push_back(
        make_dense(prev, hidden[i], hidden_act, rng, prefix + ".l" + std::to_string(i)));
    prev = hidden[i];
  }
  mlp.layers.push_back(
      make_dense(prev, out, out_act, rng, prefix + ".l" + std::to_string(hidden.size())));
  return mlp;
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(std::span<Param* const> params) {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Param* p : params) {
    std::size_t n = p->value.values.size();
    if (p->value.grad.size() != n) continue;  // never touched by backward
    if (p->adam_m.size() != n) {
      p->adam_m.assign(n, 0.0);
      p->adam_v.assign(n, 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
      double gi = p->value.grad[i];
      p->adam_m[i] = cfg_.beta1 * p->adam_m[i] + (1.0 - cfg_.beta1) * gi;
      p->adam_v[i] = cfg_.beta2 * p->adam_v[i] + (1.0 - cfg_.beta2) * gi * gi;
      double mhat = p->adam_m[i] / bc1;
      double vhat = p->adam_v[i] / bc2;
      p->value.values[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Finite differences

std::vector<double> finite_diff_grad(
    const std::function<double(std::span<const double>)>& f, std::span<const double> point,
    double step) {
  if (step <= 0.0) throw Error("finite_diff_grad: step must be > 0");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double saved = x[i];
    x[i] = saved + step;
    double fp = f(x);
    x[i] = saved - step;
    double fm = f(x);
    x[i] = saved;
    grad[i] = (fp - fm) / (2.0 * step);
  }
  return grad;
}

}  // namespace mmtoc
