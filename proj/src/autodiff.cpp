#include "mfsan/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mfsan {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_size(shape_) != values_.size())
    throw DimensionError("tensor shape " + shape_string(shape_) + " does not hold " +
                         std::to_string(values_.size()) + " values");
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("expected a matrix, got shape " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("expected a matrix, got shape " + shape_string(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (values_.size() != 1)
    throw ContractError("item() on non-scalar tensor of shape " + shape_string(shape_));
  return values_[0];
}

Tensor Tensor::transposed() const {
  const std::size_t r = rows(), c = cols();
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.values_[j * r + i] = values_[i * c + j];
  return out;
}

Tensor Tensor::row_slice(std::size_t begin, std::size_t end) const {
  const std::size_t c = cols();
  if (begin > end || end > rows()) throw DimensionError("row slice out of range");
  return Tensor(Shape{end - begin, c},
                std::vector<double>(values_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                                    values_.begin() + static_cast<std::ptrdiff_t>(end * c)));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> idx) const {
  const std::size_t c = cols(), r = rows();
  Tensor out(Shape{idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= r) throw DimensionError("row index out of range");
    std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                out.values_.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::check_finite(const std::string& what) const {
  if (!all_finite()) throw DomainError("non-finite value in " + what);
}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) grad = Tensor(value.shape());
  std::fill(grad.values().begin(), grad.values().end(), 0.0);
}

// ---- Graph -----------------------------------------------------------------

const Tensor& Var::value() const { return graph_->value_of(id_); }

std::size_t Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return Var(this, push(std::move(n)));
}

Var Graph::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return Var(this, push(std::move(n)));
}

Var Graph::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.parameter = &p;
  return Var(this, push(std::move(n)));
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    if (&v.graph() != this) throw ContractError("operands belong to different graphs");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return Var(this, push(std::move(n)));
}

Tensor* Graph::input_grad(std::size_t id, std::size_t k) {
  Node& in = nodes_[nodes_[id].inputs[k]];
  return in.requires_grad ? &in.grad : nullptr;
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) throw ContractError("loss belongs to a different graph");
  if (nodes_.empty()) throw ContractError("backward on an empty graph");
  if (loss.value().size() != 1)
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(loss.value().shape()));
  for (std::size_t i = 0; i <= loss.id(); ++i)
    if (nodes_[i].requires_grad) nodes_[i].grad = Tensor(nodes_[i].value.shape());
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad[0] = 1.0;
  // Inputs always precede their consumers, so a reverse index sweep visits
  // every node once, after all of its consumers.
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.backward) n.backward(*this, i);
    if (n.parameter) {
      Parameter& p = *n.parameter;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
      for (std::size_t k = 0; k < n.grad.size(); ++k) p.grad[k] += n.grad[k];
    }
  }
}

const Tensor& Graph::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.shape() != n.value.shape()) {
    static thread_local Tensor empty;
    empty = Tensor(n.value.shape());
    return empty;
  }
  return n.grad;
}

// ---- operations ------------------------------------------------------------

namespace {

void check_same_graph(Var a, Var b) {
  if (&a.graph() != &b.graph()) throw ContractError("operands belong to different graphs");
}

bool is_scalar_like(const Shape& s) { return shape_size(s) == 1; }

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Result shape of a broadcast binary op plus how each operand maps onto it:
// operand index = out index % operand size (trailing alignment / scalar).
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return a;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  if (is_scalar_like(b)) return a;
  if (is_scalar_like(a)) return b;
  throw DimensionError(std::string(op) + ": shapes " + shape_string(a) + " and " +
                       shape_string(b) + " are not broadcastable");
}

template <typename Fwd, typename DA, typename DB>
Var binary(Var a, Var b, const char* name, Fwd fwd, DA da, DB db) {
  check_same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Shape out_shape = broadcast_shape(av.shape(), bv.shape(), name);
  Tensor out(out_shape);
  const std::size_t na = av.size(), nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i % na], bv[i % nb]);
  return a.graph().record(std::move(out), {a, b}, [da, db](Graph& g, std::size_t id) {
    const Tensor& go = g.grad_of(id);
    const Tensor& x = g.value_of(g.input(id, 0));
    const Tensor& y = g.value_of(g.input(id, 1));
    const std::size_t nx = x.size(), ny = y.size();
    if (Tensor* gx = g.input_grad(id, 0))
      for (std::size_t i = 0; i < go.size(); ++i)
        (*gx)[i % nx] += go[i] * da(x[i % nx], y[i % ny]);
    if (Tensor* gy = g.input_grad(id, 1))
      for (std::size_t i = 0; i < go.size(); ++i)
        (*gy)[i % ny] += go[i] * db(x[i % nx], y[i % ny]);
  });
}

// Elementwise unary op; `deriv` receives (input, output).
template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  return a.graph().record(std::move(out), {a}, [deriv](Graph& g, std::size_t id) {
    Tensor* gx = g.input_grad(id, 0);
    if (!gx) return;
    const Tensor& go = g.grad_of(id);
    const Tensor& x = g.value_of(g.input(id, 0));
    const Tensor& y = g.value_of(id);
    for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i] * deriv(x[i], y[i]);
  });
}

void matmul_into(const Tensor& a, const Tensor& b, Tensor& out, bool ta, bool tb,
                 double scale_accumulate) {
  // out (+)= op(a) * op(b)
  const std::size_t r = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t c = tb ? b.rows() : b.cols();
  const std::size_t ac = a.cols(), bc = b.cols();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * ac + i] : a[i * ac + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j) {
        const double bv = tb ? b[j * bc + p] : b[p * bc + j];
        out[i * c + j] += scale_accumulate * av * bv;
      }
    }
  }
}

const Shape& require_matrix(Var a, const char* op) {
  if (a.value().rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_string(a.value().shape()));
  return a.value().shape();
}

}  // namespace

Var matmul(Var a, Var b) {
  check_same_graph(a, b);
  const Shape& sa = require_matrix(a, "matmul");
  const Shape& sb = require_matrix(b, "matmul");
  if (sa[1] != sb[0])
    throw DimensionError("matmul: inner dimensions differ for " + shape_string(sa) + " x " +
                         shape_string(sb));
  Tensor out(Shape{sa[0], sb[1]});
  matmul_into(a.value(), b.value(), out, false, false, 1.0);
  return a.graph().record(std::move(out), {a, b}, [](Graph& g, std::size_t id) {
    const Tensor& go = g.grad_of(id);
    const Tensor& x = g.value_of(g.input(id, 0));
    const Tensor& y = g.value_of(g.input(id, 1));
    if (Tensor* gx = g.input_grad(id, 0)) matmul_into(go, y, *gx, false, true, 1.0);
    if (Tensor* gy = g.input_grad(id, 1)) matmul_into(x, go, *gy, true, false, 1.0);
  });
}

Var transpose(Var a) {
  require_matrix(a, "transpose");
  return a.graph().record(a.value().transposed(), {a}, [](Graph& g, std::size_t id) {
    Tensor* gx = g.input_grad(id, 0);
    if (!gx) return;
    const Tensor gt = g.grad_of(id).transposed();
    for (std::size_t i = 0; i < gt.size(); ++i) (*gx)[i] += gt[i];
  });
}

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var mul_scalar(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i)
    if (!(av[i] > 0.0))
      throw DomainError("log of non-positive value " + std::to_string(av[i]) + " at index " +
                        std::to_string(i));
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// Subgradient 0 at the kink.
Var abs(Var a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// Derivative 0 at the kink.
Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  return a.graph().record(Tensor::scalar(s), {a}, [](Graph& g, std::size_t id) {
    Tensor* gx = g.input_grad(id, 0);
    if (!gx) return;
    const double go = g.grad_of(id)[0];
    for (double& v : gx->values()) v += go;
  });
}

Var mean(Var a) {
  const Tensor& av = a.value();
  if (av.size() == 0) throw DimensionError("mean of an empty tensor");
  double s = 0.0;
  for (double v : av.values()) s += v;
  const double n = static_cast<double>(av.size());
  return a.graph().record(Tensor::scalar(s / n), {a}, [n](Graph& g, std::size_t id) {
    Tensor* gx = g.input_grad(id, 0);
    if (!gx) return;
    const double go = g.grad_of(id)[0] / n;
    for (double& v : gx->values()) v += go;
  });
}

namespace {

Tensor row_log_softmax(const Tensor& x) {
  const std::size_t n = x.rows(), k = x.cols();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = x.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(x.at(i, j) - mx);
    const double lz = std::log(z) + mx;
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) = x.at(i, j) - lz;
  }
  return out;
}

void require_classes(Var logits, const char* op) {
  require_matrix(logits, op);
  if (logits.value().cols() < 2)
    throw DimensionError(std::string(op) + ": need at least 2 classes, got shape " +
                         shape_string(logits.value().shape()));
}

}  // namespace

Var softmax(Var logits) {
  require_classes(logits, "softmax");
  Tensor out = row_log_softmax(logits.value());
  for (double& v : out.values()) v = std::exp(v);
  return logits.graph().record(std::move(out), {logits}, [](Graph& g, std::size_t id) {
    Tensor* gx = g.input_grad(id, 0);
    if (!gx) return;
    const Tensor& y = g.value_of(id);
    const Tensor& go = g.grad_of(id);
    const std::size_t n = y.rows(), k = y.cols();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += go.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < k; ++j) gx->at(i, j) += y.at(i, j) * (go.at(i, j) - dot);
    }
  });
}

Var log_softmax(Var logits) {
  require_classes(logits, "log_softmax");
  return logits.graph().record(
      row_log_softmax(logits.value()), {logits}, [](Graph& g, std::size_t id) {
        Tensor* gx = g.input_grad(id, 0);
        if (!gx) return;
        const Tensor& y = g.value_of(id);
        const Tensor& go = g.grad_of(id);
        const std::size_t n = y.rows(), k = y.cols();
        for (std::size_t i = 0; i < n; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < k; ++j) s += go.at(i, j);
          for (std::size_t j = 0; j < k; ++j) gx->at(i, j) += go.at(i, j) - std::exp(y.at(i, j)) * s;
        }
      });
}

Var pick(Var a, std::span<const std::size_t> index) {
  require_matrix(a, "pick");
  const Tensor& av = a.value();
  if (index.size() != av.rows())
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for " +
                         shape_string(av.shape()));
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor out(Shape{idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= av.cols()) throw DimensionError("pick: column index out of range");
    out[i] = av.at(i, idx[i]);
  }
  return a.graph().record(std::move(out), {a}, [idx = std::move(idx)](Graph& g, std::size_t id) {
    Tensor* gx = g.input_grad(id, 0);
    if (!gx) return;
    const Tensor& go = g.grad_of(id);
    for (std::size_t i = 0; i < idx.size(); ++i) gx->at(i, idx[i]) += go[i];
  });
}

Var pairwise_sq_dist(Var x, Var y) {
  check_same_graph(x, y);
  const Shape& sx = require_matrix(x, "pairwise_sq_dist");
  const Shape& sy = require_matrix(y, "pairwise_sq_dist");
  if (sx[1] != sy[1])
    throw DimensionError("pairwise_sq_dist: feature dimensions differ for " + shape_string(sx) +
                         " and " + shape_string(sy));
  const Tensor& xv = x.value();
  const Tensor& yv = y.value();
  const std::size_t n = sx[0], m = sy[0], d = sx[1];
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t u = 0; u < d; ++u) {
        const double diff = xv.at(i, u) - yv.at(j, u);
        s += diff * diff;
      }
      out.at(i, j) = s;
    }
  return x.graph().record(std::move(out), {x, y}, [](Graph& g, std::size_t id) {
    const Tensor& go = g.grad_of(id);
    const Tensor& xv = g.value_of(g.input(id, 0));
    const Tensor& yv = g.value_of(g.input(id, 1));
    Tensor* gx = g.input_grad(id, 0);
    Tensor* gy = g.input_grad(id, 1);
    const std::size_t n = xv.rows(), m = yv.rows(), d = xv.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double w = 2.0 * go.at(i, j);
        if (w == 0.0) continue;
        for (std::size_t u = 0; u < d; ++u) {
          const double diff = xv.at(i, u) - yv.at(j, u);
          if (gx) gx->at(i, u) += w * diff;
          if (gy) gy->at(j, u) -= w * diff;
        }
      }
  });
}

// ---- gradient checking -------------------------------------------------------

double GradientCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

std::string GradientCheckReport::describe() const {
  std::ostringstream os;
  os << "gradient check (tolerance " << tolerance << "):";
  for (const auto& e : entries)
    os << "\n  param " << e.parameter << ": max rel err " << e.max_rel_error << " at index "
       << e.worst_index << " (analytic " << e.analytic << ", numeric " << e.numeric << ")";
  return os.str();
}

GradientCheckReport check_gradients(const ScalarFunction& f, std::span<Parameter* const> params,
                                    double step, double tolerance, double rel_floor) {
  GradientCheckReport report;
  report.tolerance = tolerance;
  for (Parameter* p : params) p->zero_grad();
  {
    Graph g;
    Var loss = f(g);
    g.backward(loss);
  }
  auto eval = [&f] {
    Graph g;
    return f(g).item();
  };
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    GradientCheckEntry entry;
    entry.parameter = k;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + step;
      const double up = eval();
      p.value[i] = saved - step;
      const double down = eval();
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p.grad[i];
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), rel_floor});
      const double rel = std::fabs(analytic - numeric) / denom;
      if (i == 0 || rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.analytic = analytic;
        entry.numeric = numeric;
      }
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace mfsan
