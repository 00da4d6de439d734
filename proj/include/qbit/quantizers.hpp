#pragma once

#include "qbit/tensor.hpp"

#include <string>
#include <vector>

namespace qbit {

enum class Scheme { none, elastic, squashed };
enum class Scope { linear_only, linear_attention };
/// Which of the two elastic formulas applies: nonnegative tensors (softmax outputs)
/// or tensors that take both signs.
enum class RangeKind { nonneg, symmetric };

std::string to_string(Scheme s);
std::string to_string(Scope s);
std::string to_string(RangeKind r);
Scheme scheme_from_string(const std::string& s);
Scope scope_from_string(const std::string& s);

/// Bit-widths a precision label may carry.
bool is_valid_bits(int bits);

/// Precision configuration of a model, e.g. elastic w4a2 over linear + attention.
struct QuantSpec {
    Scheme scheme = Scheme::none;
    int weight_bits = 16;
    int act_bits = 16;
    Scope scope = Scope::linear_only;

    static QuantSpec full_precision() { return {}; }
    static QuantSpec elastic(int wb, int ab, Scope scope = Scope::linear_only) {
        return {Scheme::elastic, wb, ab, scope};
    }
    static QuantSpec squashed(int wb) { return {Scheme::squashed, wb, 8, Scope::linear_only}; }

    /// Throws ParameterError if the bit-widths or scheme combination are invalid.
    void validate() const;
    /// "fp16", "w8a8", "w4" (squashed labels omit the fixed activation width).
    std::string label() const;
    bool quantizes_weights() const { return scheme != Scheme::none && weight_bits < 16; }
    bool quantizes_activations() const { return scheme != Scheme::none && act_bits < 16; }
    bool quantizes_attention() const { return scheme == Scheme::elastic && scope == Scope::linear_attention; }

    friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

/// Learnable scale (alpha > 0) and threshold (beta) of one quantized tensor.
/// Both are 1-element leaf tensors so gradients reach them through the tape.
struct ElasticParams {
    Tensor alpha;
    Tensor beta;
    RangeKind range = RangeKind::symmetric;

    static ElasticParams make(double alpha, double beta, RangeKind range, bool trainable = true);
    /// Data-driven initial values for a tensor first seen during calibration.
    static ElasticParams calibrate(const Tensor& x, RangeKind range, int bits, bool trainable = true);
    /// Restores alpha >= floor after an optimizer step.
    void clamp_alpha(double floor = 1e-4);
};

/// Per-output-channel gain of a squashed linear layer plus its regularizer settings.
struct SquashedParams {
    Tensor gain;
    double lambda_q = 1e-3;
    double sigma_t = 0.75;
};

/// Uniformly spaced quantization levels over [0, 1] (nonneg) or [-1, 1] (symmetric).
std::vector<double> level_set(int bits, RangeKind range);

/// Nearest level of level_set(bits, range); ties resolve to the larger level.
/// `v` must already lie in the level range.
double round_to_level(double v, int bits, RangeKind range);

/// Fake-quantizes X with the two-set elastic rule:
///   nonneg:    alpha * round(clip((X - beta) / alpha, 0, 1))
///   symmetric: alpha * round(clip(X - beta, -1, 1))
/// Backward treats rounding as identity and differentiates the clip/affine part
/// exactly with respect to X, alpha and beta. bits == 16 is an exact bypass.
Tensor elastic_quantize(const Tensor& x, const ElasticParams& p, int bits);

/// y = Q(W) Q(x)^T-style linear layer over rows of x: x[n x in], W[out x in], b[out].
Tensor elastic_linear(const Tensor& x, const Tensor& w, const Tensor& b, const QuantSpec& spec,
                      const ElasticParams& weight_params, const ElasticParams& act_params);

/// Rounds tanh-squashed weights to the symmetric lattice with straight-through backward.
Tensor squash_weights(const Tensor& w, int bits);

/// y = (x Q(tanh(W))^T) scaled per output channel by exp(g), plus b.
Tensor squashed_linear(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& gain, int bits);

/// Initial gain so that exp(g_i) * Q(tanh(W_i)) best matches row W_i in least squares.
Tensor initial_squash_gain(const Tensor& w, int bits);

/// lambda_q * ((stddev(W) - sigma_t)^2 + mean(W)^2).
Tensor squash_reg_loss(const Tensor& w, double lambda_q, double sigma_t);

} // namespace qbit
