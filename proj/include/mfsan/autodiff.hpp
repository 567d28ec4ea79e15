#pragma once

// Dense 64-bit tensors and a tape for reverse-mode differentiation.
//
// A Graph is built fresh for every forward pass. Leaves are either constants,
// free variables owned by the graph, or Parameters owned by a model; after
// Graph::backward the gradient of a Parameter leaf is accumulated into
// Parameter::grad.
//
// Broadcasting for binary ops: the operand with fewer dimensions must match
// the trailing dimensions of the other one, or be a scalar (rank 0 or a
// single element). The result takes the larger shape.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfsan {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor vector(std::vector<double> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double item() const;

  Tensor transposed() const;
  Tensor row_slice(std::size_t begin, std::size_t end) const;
  Tensor gather_rows(std::span<const std::size_t> rows) const;

  bool all_finite() const;
  // Throws DomainError naming `what` if any value is NaN or infinite.
  void check_finite(const std::string& what) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

// A trainable leaf that outlives graphs. `grad` always mirrors `value`.
struct Parameter {
  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape()) {}

  Tensor value;
  Tensor grad;

  void zero_grad();
};

class Graph;

// Handle to a node in a graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  Var param(Parameter& p);

  // Reverse sweep from a scalar node. Parameter grads are accumulated
  // (call Parameter::zero_grad beforehand for fresh gradients).
  void backward(Var loss);

  // Gradient of a node after backward; zeros if nothing flowed into it.
  const Tensor& grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

  // Op-building interface. `backward` receives the graph and the id of the
  // recorded node; it reads grad_of(id) and accumulates into the inputs.
  using BackwardFn = std::function<void(Graph&, std::size_t)>;
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }
  std::size_t input(std::size_t id, std::size_t k) const { return nodes_[id].inputs[k]; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Accumulation target for input k of node id; null when that input does not
  // require a gradient.
  Tensor* input_grad(std::size_t id, std::size_t k);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter* parameter = nullptr;
  };

  std::size_t push(Node node);

  std::vector<Node> nodes_;
};

// ---- operations ------------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var mul_scalar(Var a, double s);
Var add_scalar(Var a, double s);

Var exp(Var a);
Var log(Var a);
Var abs(Var a);
Var relu(Var a);
Var square(Var a);

Var sum(Var a);
Var mean(Var a);

// Row-wise softmax / log-softmax of an n×K matrix, stabilised by subtracting
// the row maximum.
Var softmax(Var logits);
Var log_softmax(Var logits);

// out[i] = a[i, index[i]] for an n×K matrix.
Var pick(Var a, std::span<const std::size_t> index);

// n×m matrix of squared Euclidean distances between rows of x and rows of y.
Var pairwise_sq_dist(Var x, Var y);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double s) { return mul_scalar(a, s); }
inline Var operator*(double s, Var a) { return mul_scalar(a, s); }

// ---- finite-difference checking ---------------------------------------------

struct GradientCheckEntry {
  std::size_t parameter = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradientCheckReport {
  std::vector<GradientCheckEntry> entries;
  double tolerance = 0.0;

  double max_rel_error() const;
  bool passed() const { return max_rel_error() < tolerance; }
  std::string describe() const;
};

// Compares the analytic gradient of `f` with central differences for every
// coordinate of every parameter. The relative error of one coordinate is
// |a - n| / max(|a|, |n|, rel_floor); the floor keeps coordinates whose true
// gradient is zero from reporting noise as a relative blow-up.
using ScalarFunction = std::function<Var(Graph&)>;

GradientCheckReport check_gradients(const ScalarFunction& f,
                                    std::span<Parameter* const> params,
                                    double step, double tolerance,
                                    double rel_floor = 1e-6);

}  // namespace mfsan
