// SPDX-License-Identifier: Apache-2.0
//
// Dense-tensor arithmetic with reverse-mode automatic differentiation and
// seeded randomness. Every other module builds on this one.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace mmtoc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Tensor

struct Tensor {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a backward pass populates it

  Tensor() = default;
  Tensor(std::vector<int> shape_in, std::vector<double> values_in);

  static Tensor zeros(std::vector<int> shape_in);
  static Tensor full(std::vector<int> shape_in, double v);
  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> v);                 // shape {n}
  static Tensor matrix(int rows, int cols, std::vector<double> v);

  std::int64_t size() const;
  bool is_scalar() const { return size() == 1; }
  bool is_matrix() const { return shape.size() == 2; }
  int rows() const;
  int cols() const;
  double& at(int r, int c);
  double at(int r, int c) const;
  bool all_finite() const;
};

std::string shape_str(const std::vector<int>& shape);

// ---------------------------------------------------------------------------
// Rng: splitmix64 counter generator. Same seed gives a bit-identical draw
// sequence across runs and platforms; distributions are hand-rolled because
// the standard library ones are implementation-defined.

class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();    // [0, 1), 53-bit
  double gaussian();   // standard normal, polar method
  int below(int n);    // uniform in [0, n), rejection sampled (no modulo bias)

  // Independent stream derived from (current seed, tag); does not advance
  // this generator.
  Rng fork(std::uint64_t tag) const;

  Tensor gaussian_tensor(std::vector<int> shape);
  Tensor uniform_tensor(std::vector<int> shape);
  std::vector<int> permutation(int n);
  // Uniform over permutations with no fixed point; n >= 2.
  std::vector<int> derangement(int n);

 private:
  std::uint64_t state_;
  bool has_cached_gaussian_ = false;
  double cached_gaussian_ = 0.0;
};

// ---------------------------------------------------------------------------
// Trainable parameter: a named tensor plus optimizer slots.

struct Param {
  std::string name;
  Tensor value;
  std::vector<double> adam_m, adam_v;
};

// ---------------------------------------------------------------------------
// Graph: eager forward evaluation with a recorded tape.
//
// Ops work on rank-1 and rank-2 tensors. Elementwise kinds require exactly
// matching shapes; mixing shapes must go through an explicit broadcast node.
// Every node output is checked for NaN/Inf on creation.

enum class Op {
  leaf,
  matmul,
  add,
  multiply,
  negate,
  exponent,
  logarithm,
  sigmoid,
  tanh,
  relu,
  softplus,
  reduce_sum,
  reduce_mean,
  broadcast,
  concat,
  slice,
  grl,
};

const char* op_name(Op op);

using NodeId = int;

struct Node {
  Op op = Op::leaf;
  std::vector<NodeId> inputs;
  Tensor out;
  std::vector<double> grad;    // allocated lazily by backward()
  bool requires_grad = false;  // true if any ancestor leaf tracks gradients

  // Attributes (meaning depends on op):
  double alpha = 0.0;          // grl scale
  int axis = -1;               // reduce_*: -1 = all, 1 = per row; concat/slice axis
  int start = 0, len = 0;      // slice range
  Param* bound = nullptr;      // param leaf write-back target
};

class Graph {
 public:
  // Leaves.
  NodeId constant(Tensor t);          // no gradient tracking
  NodeId input(Tensor t);             // gradient-tracked leaf
  NodeId param(Param& p);             // tracked leaf bound to an external Param

  // Primitive builder; shape rules are per kind. Attribute-carrying kinds
  // (broadcast, slice, grl, axis reductions) have dedicated wrappers below.
  NodeId build_primitive(Op kind, const std::vector<NodeId>& inputs);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId multiply(NodeId a, NodeId b);
  NodeId negate(NodeId x);
  NodeId exponent(NodeId x);
  NodeId logarithm(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId tanh(NodeId x);
  NodeId relu(NodeId x);
  NodeId softplus(NodeId x);
  NodeId reduce_sum(NodeId x, int axis = -1);   // axis -1: all -> {1}; axis 1: {n,d} -> {n,1}
  NodeId reduce_mean(NodeId x, int axis = -1);
  NodeId broadcast(NodeId x, int rows, int cols);
  NodeId concat(NodeId a, NodeId b, int axis = 1);
  NodeId slice(NodeId x, int axis, int start, int len);
  NodeId grl(NodeId x, double alpha);

  // Composites.
  NodeId sub(NodeId a, NodeId b) { return add(a, negate(b)); }
  NodeId square(NodeId x) { return multiply(x, x); }
  NodeId scale(NodeId x, double c);       // x * c, c constant
  NodeId add_scalar(NodeId x, double c);  // x + c, c constant
  NodeId mean_all(NodeId x) { return reduce_mean(x, -1); }

  // Populates grad on every tracked node reachable from loss (others get
  // zeros) and writes gradients back into bound Params' grad slots.
  void backward(NodeId loss);

  const Tensor& value(NodeId id) const;
  const std::vector<double>& grad_of(NodeId id) const;
  double scalar_value(NodeId id) const;
  std::size_t node_count() const { return nodes_.size(); }

 private:
  NodeId push(Node n);
  void check_finite(NodeId id);
  std::vector<Node> nodes_;
  std::unordered_map<const Param*, NodeId> bound_;
};

// ---------------------------------------------------------------------------
// Dense layer and small MLPs.

enum class Activation { identity, tanh, relu, sigmoid, softplus };

NodeId apply_activation(Graph& g, NodeId x, Activation act);

// activation(x . W + b); x is {n, in}, W {in, out}, b {1, out}.
NodeId dense(Graph& g, NodeId x, NodeId w, NodeId b, Activation act);

struct DenseLayer {
  Param weight;
  Param bias;
  Activation act = Activation::identity;
};

// Weights uniform in +-sqrt(6 / (in + out)), biases zero.
DenseLayer make_dense(int in, int out, Activation act, Rng& rng,
                      const std::string& name);

struct Mlp {
  std::vector<DenseLayer> layers;
  NodeId apply(Graph& g, NodeId x);
  void for_each_param(const std::function<void(Param&)>& fn);
  int input_dim() const;
  int output_dim() const;
};

Mlp make_mlp(int in, const std::vector<int>& hidden, int out,
             Activation hidden_act, Activation out_act, Rng& rng,
             const std::string& prefix);

// ---------------------------------------------------------------------------
// Adam with bias correction; reads Param::value.grad.

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  void step(std::span<Param* const> params);

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Central-difference gradient, the test oracle for backward().

std::vector<double> finite_diff_grad(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> point, double step);

}  // namespace mmtoc
