#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qbit {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Raised on incompatible shapes, invalid axes, or gradients of the wrong size.
class ShapeError : public Error {
  public:
    using Error::Error;
};

/// Raised when a NaN or Inf would be stored in a tensor.
class NumericError : public Error {
  public:
    using Error::Error;
};

/// Raised on invalid operator or quantizer parameters (e.g. clip with hi < lo).
class ParameterError : public Error {
  public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

/// Dense row-major tensor of doubles with an optional link into the autograd tape.
///
/// A Tensor is a cheap handle; copies share the same underlying node. Values are
/// immutable once created, except for leaf tensors which the optimizer updates in
/// place through mutable_data().
class Tensor {
  public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    /// Row vector helper: shape {values.size()}.
    static Tensor vector(std::vector<double> values, bool requires_grad = false);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t numel() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::span<const double> data() const;
    const std::vector<double>& values() const;
    double item() const;
    double operator[](std::size_t i) const { return data()[i]; }

    bool requires_grad() const;
    bool is_leaf() const;
    bool has_grad() const;
    /// Accumulated gradient; throws if none is present.
    const std::vector<double>& grad() const;
    Tensor grad_tensor() const;
    void zero_grad();

    /// In-place access for leaf tensors only (optimizer updates, initialization).
    std::span<double> mutable_data();
    /// Re-validates values after an in-place update.
    void check_finite(const std::string& what) const;

    /// Same values, no tape history, no gradient.
    Tensor detach() const;
    /// Copy of the values as a new leaf.
    Tensor clone_leaf(bool requires_grad) const;

    const std::string& op_name() const;
    std::shared_ptr<Node> node() const { return node_; }

  private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    std::shared_ptr<Node> node_;

    friend Tensor make_op_tensor(std::string, Shape, std::vector<double>,
                                 std::vector<Tensor>,
                                 std::function<std::vector<std::vector<double>>(
                                     const Node&, const std::vector<double>&)>);
};

/// Backward rule: given the output node and its upstream gradient, return one
/// gradient buffer per input (an empty buffer means "no gradient").
using BackwardRule =
    std::function<std::vector<std::vector<double>>(const Node&, const std::vector<double>&)>;

struct Node {
    std::string op;
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardRule backward;
};

/// Builds an op output. The backward rule is kept only if some input requires grad.
Tensor make_op_tensor(std::string op, Shape shape, std::vector<double> values,
                      std::vector<Tensor> inputs, BackwardRule backward);

// ---- operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor clip(const Tensor& a, double lo, double hi);
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Population standard deviation (divides by N).
Tensor stddev(const Tensor& a);
/// Mean of squared differences over all elements.
Tensor mse(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// x[n x m] + v[m], v broadcast over rows.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
/// x[n x m] * v[m], scaling column j by v[j].
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Row-wise layer normalization with learnable gain and shift.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-5);

// ---- custom gradients -------------------------------------------------------

using CustomForward = std::function<Tensor(std::span<const Tensor>)>;
/// Receives the (detached) inputs, the output, and the upstream gradient; returns
/// one gradient tensor per input. An undefined Tensor means "no gradient".
using CustomBackward =
    std::function<std::vector<Tensor>(std::span<const Tensor>, const Tensor&, const Tensor&)>;

/// Runs forward on detached inputs and records backward as the gradient rule,
/// bypassing the forward function's true Jacobian.
Tensor custom_grad(const CustomForward& forward, const CustomBackward& backward,
                   std::vector<Tensor> inputs, std::string name = "custom");

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable leaf that requires grad.
void backward(const Tensor& loss);

} // namespace qbit
