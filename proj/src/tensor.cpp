#include "qbit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace qbit {

namespace {

void require_finite(const std::vector<double>& values, const std::string& what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            std::ostringstream os;
            os << "non-finite value " << values[i] << " at index " << i << " in " << what;
            throw NumericError(os.str());
        }
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_matrix(const Tensor& a, const char* op) {
    if (a.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
    }
}

std::vector<std::vector<double>> one(std::vector<double> g) {
    std::vector<std::vector<double>> out;
    out.push_back(std::move(g));
    return out;
}

} // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
    }
    require_finite(values, "leaf tensor");
    auto node = std::make_shared<Node>();
    node->op = "leaf";
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    auto n = values.size();
    return from({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad) {
    return from({rows, cols}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw Error("use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::numel() const { return values().size(); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return shape()[axis];
}

std::span<const double> Tensor::data() const { return values(); }

const std::vector<double>& Tensor::values() const {
    if (!node_) throw Error("use of undefined tensor");
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->parents.empty(); }
bool Tensor::has_grad() const { return node_ && node_->grad.has_value(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw Error("tensor has no gradient");
    return *node_->grad;
}

Tensor Tensor::grad_tensor() const { return from(shape(), grad()); }

void Tensor::zero_grad() {
    if (node_) node_->grad.reset();
}

std::span<double> Tensor::mutable_data() {
    if (!is_leaf()) throw Error("mutable_data() is only allowed on leaf tensors");
    return node_->data;
}

void Tensor::check_finite(const std::string& what) const { require_finite(values(), what); }

Tensor Tensor::detach() const { return from(shape(), values(), false); }

Tensor Tensor::clone_leaf(bool requires_grad) const { return from(shape(), values(), requires_grad); }

const std::string& Tensor::op_name() const {
    if (!node_) throw Error("use of undefined tensor");
    return node_->op;
}

Tensor make_op_tensor(std::string op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      BackwardRule backward) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError(op + ": produced " + std::to_string(values.size()) + " values for shape " +
                         shape_str(shape));
    }
    require_finite(values, op);
    auto node = std::make_shared<Node>();
    node->op = std::move(op);
    node->shape = std::move(shape);
    node->data = std::move(values);
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        node->backward = std::move(backward);
        node->parents.reserve(inputs.size());
        for (auto& t : inputs) node->parents.push_back(t.node());
    }
    return Tensor(std::move(node));
}

// ---- operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const auto& A = a.values();
    const auto& B = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = &B[p * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    auto an = a.node(), bn = b.node();
    return make_op_tensor("matmul", {m, n}, std::move(out), {a, b},
                          [an, bn, m, k, n](const Node&, const std::vector<double>& g) {
                              std::vector<std::vector<double>> grads(2);
                              if (an->requires_grad) {
                                  // grad_a = g * b^T, accumulated row-wise over a transposed copy of b
                                  std::vector<double> bt(n * k);
                                  for (std::size_t p = 0; p < k; ++p)
                                      for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bn->data[p * n + j];
                                  std::vector<double> ga(m * k, 0.0);
                                  for (std::size_t i = 0; i < m; ++i) {
                                      double* arow = &ga[i * k];
                                      for (std::size_t j = 0; j < n; ++j) {
                                          const double gv = g[i * n + j];
                                          const double* btrow = &bt[j * k];
                                          for (std::size_t p = 0; p < k; ++p) arow[p] += gv * btrow[p];
                                      }
                                  }
                                  grads[0] = std::move(ga);
                              }
                              if (bn->requires_grad) {
                                  // grad_b = a^T * g
                                  std::vector<double> gb(k * n, 0.0);
                                  for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t p = 0; p < k; ++p) {
                                          const double av = an->data[i * k + p];
                                          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
                                      }
                                  grads[1] = std::move(gb);
                              }
                              return grads;
                          });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return make_op_tensor("add", a.shape(), std::move(out), {a, b},
                          [](const Node&, const std::vector<double>& g) {
                              return std::vector<std::vector<double>>{g, g};
                          });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return make_op_tensor("sub", a.shape(), std::move(out), {a, b},
                          [](const Node&, const std::vector<double>& g) {
                              std::vector<double> neg(g);
                              for (auto& v : neg) v = -v;
                              return std::vector<std::vector<double>>{g, std::move(neg)};
                          });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    auto an = a.node(), bn = b.node();
    return make_op_tensor("mul", a.shape(), std::move(out), {a, b},
                          [an, bn](const Node&, const std::vector<double>& g) {
                              std::vector<std::vector<double>> grads(2);
                              if (an->requires_grad) {
                                  grads[0].resize(g.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) grads[0][i] = g[i] * bn->data[i];
                              }
                              if (bn->requires_grad) {
                                  grads[1].resize(g.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) grads[1][i] = g[i] * an->data[i];
                              }
                              return grads;
                          });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.values());
    for (auto& v : out) v *= factor;
    return make_op_tensor("scale", a.shape(), std::move(out), {a},
                          [factor](const Node&, const std::vector<double>& g) {
                              std::vector<double> ga(g);
                              for (auto& v : ga) v *= factor;
                              return one(std::move(ga));
                          });
}

Tensor tanh(const Tensor& a) {
    std::vector<double> out(a.values());
    for (auto& v : out) v = std::tanh(v);
    return make_op_tensor("tanh", a.shape(), std::move(out), {a},
                          [](const Node& self, const std::vector<double>& g) {
                              std::vector<double> ga(g.size());
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  ga[i] = g[i] * (1.0 - self.data[i] * self.data[i]);
                              return one(std::move(ga));
                          });
}

Tensor exp(const Tensor& a) {
    std::vector<double> out(a.values());
    for (auto& v : out) v = std::exp(v);
    return make_op_tensor("exp", a.shape(), std::move(out), {a},
                          [](const Node& self, const std::vector<double>& g) {
                              std::vector<double> ga(g.size());
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * self.data[i];
                              return one(std::move(ga));
                          });
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.values());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    auto an = a.node();
    return make_op_tensor("relu", a.shape(), std::move(out), {a},
                          [an](const Node&, const std::vector<double>& g) {
                              std::vector<double> ga(g.size());
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] = an->data[i] > 0.0 ? g[i] : 0.0;
                              return one(std::move(ga));
                          });
}

Tensor clip(const Tensor& a, double lo, double hi) {
    if (hi < lo) throw ParameterError("clip: hi < lo");
    std::vector<double> out(a.values());
    for (auto& v : out) v = std::clamp(v, lo, hi);
    auto an = a.node();
    return make_op_tensor("clip", a.shape(), std::move(out), {a},
                          [an, lo, hi](const Node&, const std::vector<double>& g) {
                              std::vector<double> ga(g.size());
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  const double x = an->data[i];
                                  ga[i] = (x >= lo && x <= hi) ? g[i] : 0.0;
                              }
                              return one(std::move(ga));
                          });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
    const auto& shape = a.shape();
    if (axis >= shape.size()) {
        throw ShapeError("softmax: invalid axis " + std::to_string(axis) + " for " + shape_str(shape));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t len = shape[axis];
    const auto& x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = x[base];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
            double s = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                out[base + j * inner] = std::exp(x[base + j * inner] - mx);
                s += out[base + j * inner];
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= s;
        }
    }
    return make_op_tensor("softmax", shape, std::move(out), {a},
                          [outer, inner, len](const Node& self, const std::vector<double>& g) {
                              const auto& y = self.data;
                              std::vector<double> ga(g.size());
                              for (std::size_t o = 0; o < outer; ++o) {
                                  for (std::size_t in = 0; in < inner; ++in) {
                                      const std::size_t base = o * len * inner + in;
                                      double dot = 0.0;
                                      for (std::size_t j = 0; j < len; ++j)
                                          dot += g[base + j * inner] * y[base + j * inner];
                                      for (std::size_t j = 0; j < len; ++j) {
                                          const auto idx = base + j * inner;
                                          ga[idx] = y[idx] * (g[idx] - dot);
                                      }
                                  }
                              }
                              return one(std::move(ga));
                          });
}

Tensor sum(const Tensor& a) {
    const auto& x = a.values();
    double s = std::accumulate(x.begin(), x.end(), 0.0);
    const auto n = x.size();
    return make_op_tensor("sum", {1}, {s}, {a}, [n](const Node&, const std::vector<double>& g) {
        return one(std::vector<double>(n, g[0]));
    });
}

Tensor mean(const Tensor& a) {
    const auto& x = a.values();
    const auto n = x.size();
    double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    return make_op_tensor("mean", {1}, {m}, {a}, [n](const Node&, const std::vector<double>& g) {
        return one(std::vector<double>(n, g[0] / static_cast<double>(n)));
    });
}

Tensor stddev(const Tensor& a) {
    const auto& x = a.values();
    const auto n = x.size();
    const double nd = static_cast<double>(n);
    const double m = std::accumulate(x.begin(), x.end(), 0.0) / nd;
    double var = 0.0;
    for (double v : x) var += (v - m) * (v - m);
    var /= nd;
    const double sd = std::sqrt(var);
    auto an = a.node();
    return make_op_tensor("stddev", {1}, {sd}, {a}, [an, m, sd, nd](const Node&, const std::vector<double>& g) {
        std::vector<double> ga(an->data.size(), 0.0);
        // d sd / d x_i = (x_i - m) / (N sd); undefined at sd == 0, where we return 0.
        if (sd > 0.0) {
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[0] * (an->data[i] - m) / (nd * sd);
        }
        return one(std::move(ga));
    });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    const auto n = a.numel();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    auto an = a.node(), bn = b.node();
    return make_op_tensor("mse", {1}, {s / static_cast<double>(n)}, {a, b},
                          [an, bn, n](const Node&, const std::vector<double>& g) {
                              std::vector<std::vector<double>> grads(2);
                              const double c = 2.0 * g[0] / static_cast<double>(n);
                              if (an->requires_grad) {
                                  grads[0].resize(n);
                                  for (std::size_t i = 0; i < n; ++i) grads[0][i] = c * (an->data[i] - bn->data[i]);
                              }
                              if (bn->requires_grad) {
                                  grads[1].resize(n);
                                  for (std::size_t i = 0; i < n; ++i) grads[1][i] = c * (bn->data[i] - an->data[i]);
                              }
                              return grads;
                          });
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    const auto& x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return make_op_tensor("transpose", {c, r}, std::move(out), {a},
                          [r, c](const Node&, const std::vector<double>& g) {
                              std::vector<double> ga(g.size());
                              for (std::size_t i = 0; i < r; ++i)
                                  for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[j * r + i];
                              return one(std::move(ga));
                          });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return make_op_tensor("reshape", std::move(shape), a.values(), {a},
                          [](const Node&, const std::vector<double>& g) { return one(g); });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    require_matrix(x, "add_rowvec");
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (v.numel() != m) {
        throw ShapeError("add_rowvec: vector of size " + std::to_string(v.numel()) + " for " + shape_str(x.shape()));
    }
    std::vector<double> out(x.values());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] += v[j];
    auto vn = v.node();
    return make_op_tensor("add_rowvec", x.shape(), std::move(out), {x, v},
                          [n, m, vn](const Node&, const std::vector<double>& g) {
                              std::vector<std::vector<double>> grads(2);
                              grads[0] = g;
                              if (vn->requires_grad) {
                                  grads[1].assign(m, 0.0);
                                  for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < m; ++j) grads[1][j] += g[i * m + j];
                              }
                              return grads;
                          });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    require_matrix(x, "mul_rowvec");
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (v.numel() != m) {
        throw ShapeError("mul_rowvec: vector of size " + std::to_string(v.numel()) + " for " + shape_str(x.shape()));
    }
    std::vector<double> out(x.values());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] *= v[j];
    auto xn = x.node(), vn = v.node();
    return make_op_tensor("mul_rowvec", x.shape(), std::move(out), {x, v},
                          [n, m, xn, vn](const Node&, const std::vector<double>& g) {
                              std::vector<std::vector<double>> grads(2);
                              if (xn->requires_grad) {
                                  grads[0].resize(n * m);
                                  for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < m; ++j) grads[0][i * m + j] = g[i * m + j] * vn->data[j];
                              }
                              if (vn->requires_grad) {
                                  grads[1].assign(m, 0.0);
                                  for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < m; ++j) grads[1][j] += g[i * m + j] * xn->data[i * m + j];
                              }
                              return grads;
                          });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
    require_matrix(x, "slice_cols");
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (count == 0 || start + count > m) {
        throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_str(x.shape()));
    }
    const auto& xv = x.values();
    std::vector<double> out(n * count);
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(&xv[i * m + start], count, &out[i * count]);
    return make_op_tensor("slice_cols", {n, count}, std::move(out), {x},
                          [n, m, start, count](const Node&, const std::vector<double>& g) {
                              std::vector<double> ga(n * m, 0.0);
                              for (std::size_t i = 0; i < n; ++i)
                                  std::copy_n(&g[i * count], count, &ga[i * m + start]);
                              return one(std::move(ga));
                          });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t n = parts.front().dim(0);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_matrix(p, "concat_cols");
        if (p.dim(0) != n) throw ShapeError("concat_cols: row count mismatch");
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    std::vector<double> out(n * total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = parts[k].values();
        for (std::size_t i = 0; i < n; ++i) std::copy_n(&pv[i * widths[k]], widths[k], &out[i * total + off]);
        off += widths[k];
    }
    return make_op_tensor("concat_cols", {n, total}, std::move(out), parts,
                          [n, total, widths](const Node&, const std::vector<double>& g) {
                              std::vector<std::vector<double>> grads(widths.size());
                              std::size_t off = 0;
                              for (std::size_t k = 0; k < widths.size(); ++k) {
                                  grads[k].resize(n * widths[k]);
                                  for (std::size_t i = 0; i < n; ++i)
                                      std::copy_n(&g[i * total + off], widths[k], &grads[k][i * widths[k]]);
                                  off += widths[k];
                              }
                              return grads;
                          });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t m = parts.front().dim(1);
    std::vector<std::size_t> sizes;
    std::vector<double> out;
    std::size_t rows = 0;
    for (const auto& p : parts) {
        require_matrix(p, "concat_rows");
        if (p.dim(1) != m) throw ShapeError("concat_rows: column count mismatch");
        sizes.push_back(p.numel());
        rows += p.dim(0);
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    return make_op_tensor("concat_rows", {rows, m}, std::move(out), parts,
                          [sizes](const Node&, const std::vector<double>& g) {
                              std::vector<std::vector<double>> grads;
                              std::size_t off = 0;
                              for (auto s : sizes) {
                                  grads.emplace_back(g.begin() + static_cast<std::ptrdiff_t>(off),
                                                     g.begin() + static_cast<std::ptrdiff_t>(off + s));
                                  off += s;
                              }
                              return grads;
                          });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
    require_matrix(x, "layer_norm");
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (gain.numel() != m || shift.numel() != m) throw ShapeError("layer_norm: parameter size mismatch");
    const auto& xv = x.values();
    std::vector<double> xhat(n * m), inv_std(n), out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < m; ++j) mu += xv[i * m + j];
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) var += (xv[i * m + j] - mu) * (xv[i * m + j] - mu);
        var /= static_cast<double>(m);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < m; ++j) {
            xhat[i * m + j] = (xv[i * m + j] - mu) * inv_std[i];
            out[i * m + j] = xhat[i * m + j] * gain[j] + shift[j];
        }
    }
    auto xn = x.node(), gn = gain.node(), sn = shift.node();
    return make_op_tensor(
        "layer_norm", {n, m}, std::move(out), {x, gain, shift},
        [n, m, xhat = std::move(xhat), inv_std = std::move(inv_std), xn, gn, sn](const Node&,
                                                                                const std::vector<double>& g) {
            std::vector<std::vector<double>> grads(3);
            if (xn->requires_grad) {
                grads[0].resize(n * m);
                for (std::size_t i = 0; i < n; ++i) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < m; ++j) {
                        const double gh = g[i * m + j] * gn->data[j];
                        s1 += gh;
                        s2 += gh * xhat[i * m + j];
                    }
                    const double md = static_cast<double>(m);
                    for (std::size_t j = 0; j < m; ++j) {
                        const double gh = g[i * m + j] * gn->data[j];
                        grads[0][i * m + j] = inv_std[i] * (gh - s1 / md - xhat[i * m + j] * s2 / md);
                    }
                }
            }
            if (gn->requires_grad) {
                grads[1].assign(m, 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) grads[1][j] += g[i * m + j] * xhat[i * m + j];
            }
            if (sn->requires_grad) {
                grads[2].assign(m, 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) grads[2][j] += g[i * m + j];
            }
            return grads;
        });
}

// ---- custom gradients -------------------------------------------------------

Tensor custom_grad(const CustomForward& forward, const CustomBackward& backward, std::vector<Tensor> inputs,
                   std::string name) {
    std::vector<Tensor> detached;
    detached.reserve(inputs.size());
    for (const auto& t : inputs) detached.push_back(t.detach());
    Tensor out = forward(std::span<const Tensor>(detached));
    if (!out.defined()) throw Error(name + ": forward returned an undefined tensor");
    auto shapes = std::make_shared<std::vector<Shape>>();
    for (const auto& t : inputs) shapes->push_back(t.shape());
    Shape out_shape = out.shape();
    return make_op_tensor(
        name, out_shape, out.values(), inputs,
        [backward, detached, shapes, out_shape, name](const Node& self, const std::vector<double>& g) {
            Tensor out_t = Tensor::from(out_shape, self.data);
            Tensor grad_out = Tensor::from(out_shape, g);
            auto user = backward(std::span<const Tensor>(detached), out_t, grad_out);
            if (user.size() != detached.size()) {
                throw ShapeError(name + ": backward returned " + std::to_string(user.size()) + " gradients for " +
                                 std::to_string(detached.size()) + " inputs");
            }
            std::vector<std::vector<double>> grads(user.size());
            for (std::size_t k = 0; k < user.size(); ++k) {
                if (!user[k].defined()) continue;
                if (user[k].shape() != (*shapes)[k]) {
                    throw ShapeError(name + ": gradient for input " + std::to_string(k) + " has shape " +
                                     shape_str(user[k].shape()) + ", expected " + shape_str((*shapes)[k]));
                }
                grads[k] = user[k].values();
            }
            return grads;
        });
}

// ---- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
    }
    Node* root = loss.node().get();
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    std::unordered_map<Node*, std::vector<double>> pending;
    pending[root] = {1.0};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        auto found = pending.find(node);
        if (found == pending.end()) continue;
        std::vector<double> g = std::move(found->second);
        pending.erase(found);
        if (node->parents.empty()) {
            if (!node->grad) {
                node->grad = std::move(g);
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) (*node->grad)[i] += g[i];
            }
            continue;
        }
        auto grads = node->backward(*node, g);
        for (std::size_t k = 0; k < node->parents.size() && k < grads.size(); ++k) {
            Node* p = node->parents[k].get();
            if (!p->requires_grad || grads[k].empty()) continue;
            if (grads[k].size() != p->data.size()) {
                throw ShapeError("backward: " + node->op + " produced a gradient of size " +
                                 std::to_string(grads[k].size()) + " for an input of size " +
                                 std::to_string(p->data.size()));
            }
            auto& acc = pending[p];
            if (acc.empty()) {
                acc = std::move(grads[k]);
            } else {
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grads[k][i];
            }
        }
    }
}

} // namespace qbit
