#include "qbit/quantizers.hpp"

#include <algorithm>
#include <cmath>

namespace qbit {

std::string to_string(Scheme s) {
    switch (s) {
    case Scheme::none: return "none";
    case Scheme::elastic: return "elastic";
    case Scheme::squashed: return "squashed";
    }
    return "?";
}

std::string to_string(Scope s) { return s == Scope::linear_only ? "linear_only" : "linear_attention"; }

std::string to_string(RangeKind r) { return r == RangeKind::nonneg ? "nonneg" : "symmetric"; }

Scheme scheme_from_string(const std::string& s) {
    if (s == "none") return Scheme::none;
    if (s == "elastic") return Scheme::elastic;
    if (s == "squashed") return Scheme::squashed;
    throw ParameterError("unknown quantization scheme '" + s + "'");
}

Scope scope_from_string(const std::string& s) {
    if (s == "linear_only") return Scope::linear_only;
    if (s == "linear_attention") return Scope::linear_attention;
    throw ParameterError("unknown quantization scope '" + s + "'");
}

bool is_valid_bits(int bits) { return bits == 1 || bits == 2 || bits == 4 || bits == 8 || bits == 16; }

void QuantSpec::validate() const {
    if (!is_valid_bits(weight_bits) || !is_valid_bits(act_bits)) {
        throw ParameterError("invalid bit-widths w" + std::to_string(weight_bits) + "a" + std::to_string(act_bits));
    }
    if (scheme == Scheme::none && (weight_bits != 16 || act_bits != 16)) {
        throw ParameterError("scheme none requires 16-bit weights and activations");
    }
    if (scheme == Scheme::squashed) {
        if (act_bits != 8) throw ParameterError("squashed quantization uses 8-bit activations");
        if (weight_bits == 16) throw ParameterError("squashed quantization needs weight bits in {1,2,4,8}");
    }
}

std::string QuantSpec::label() const {
    if (scheme == Scheme::none) return "fp16";
    if (scheme == Scheme::squashed) return "w" + std::to_string(weight_bits);
    return "w" + std::to_string(weight_bits) + "a" + std::to_string(act_bits);
}

// ---- levels -----------------------------------------------------------------

namespace {

void require_level_bits(int bits) {
    if (bits != 1 && bits != 2 && bits != 4 && bits != 8) {
        throw ParameterError("unsupported quantization bit-width " + std::to_string(bits));
    }
}

double level_count(int bits) { return std::ldexp(1.0, bits) - 1.0; }

} // namespace

std::vector<double> level_set(int bits, RangeKind range) {
    require_level_bits(bits);
    const double n = level_count(bits);
    std::vector<double> levels;
    levels.reserve(static_cast<std::size_t>(n) + 1);
    for (int k = 0; k <= static_cast<int>(n); ++k) {
        levels.push_back(range == RangeKind::nonneg ? k / n : -1.0 + 2.0 * k / n);
    }
    return levels;
}

double round_to_level(double v, int bits, RangeKind range) {
    const double n = level_count(bits);
    // Map onto [0, 1], pick the nearest grid index with ties going up, map back.
    // The slack absorbs representation error so computed midpoints still tie upward.
    const double t = range == RangeKind::nonneg ? v : (v + 1.0) / 2.0;
    const double k = std::clamp(std::floor(t * n + 0.5 + 1e-9), 0.0, n);
    return range == RangeKind::nonneg ? k / n : -1.0 + 2.0 * k / n;
}

// ---- elastic ----------------------------------------------------------------

ElasticParams ElasticParams::make(double alpha, double beta, RangeKind range, bool trainable) {
    if (!(alpha > 0.0)) throw ParameterError("elastic alpha must be positive");
    return {Tensor::scalar(alpha, trainable), Tensor::scalar(beta, trainable), range};
}

ElasticParams ElasticParams::calibrate(const Tensor& x, RangeKind range, int bits, bool trainable) {
    const auto& v = x.values();
    if (range == RangeKind::nonneg) {
        double amax = 0.0;
        for (double e : v) amax = std::max(amax, std::abs(e));
        const double beta = *std::min_element(v.begin(), v.end());
        return make(amax > 0.0 ? amax : 1.0, beta, range, trainable);
    }
    // Symmetric lattice is not rescaled by alpha on the input side, so alpha only
    // sets the output magnitude; fit it by least squares against the input.
    if (bits >= 16) return make(1.0, 0.0, range, trainable);
    require_level_bits(bits);
    double num = 0.0, den = 0.0;
    for (double e : v) {
        const double q = round_to_level(std::clamp(e, -1.0, 1.0), bits, range);
        num += e * q;
        den += q * q;
    }
    const double alpha = (den > 0.0 && num > 0.0) ? num / den : 1.0;
    return make(alpha, 0.0, range, trainable);
}

void ElasticParams::clamp_alpha(double floor) {
    auto a = alpha.mutable_data();
    a[0] = std::max(a[0], floor);
}

Tensor elastic_quantize(const Tensor& x, const ElasticParams& p, int bits) {
    if (bits >= 16) return x;
    require_level_bits(bits);
    if (!p.alpha.defined() || !p.beta.defined()) throw ParameterError("elastic_quantize: parameters not initialized");
    if (!(p.alpha.item() > 0.0)) throw ParameterError("elastic_quantize: alpha must be positive");
    const RangeKind range = p.range;

    auto forward = [bits, range](std::span<const Tensor> in) {
        const auto& xv = in[0].values();
        const double alpha = in[1].item(), beta = in[2].item();
        std::vector<double> out(xv.size());
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double u = range == RangeKind::nonneg ? std::clamp((xv[i] - beta) / alpha, 0.0, 1.0)
                                                        : std::clamp(xv[i] - beta, -1.0, 1.0);
            out[i] = alpha * round_to_level(u, bits, range);
        }
        return Tensor::from(in[0].shape(), std::move(out));
    };

    // Rounding is replaced by identity; what remains is differentiated exactly.
    //   nonneg:    f = alpha * clip((x - beta) / alpha, 0, 1)
    //     df/dx = [active],  df/dalpha = clip(u) - u [active],  df/dbeta = -[active]
    //   symmetric: f = alpha * clip(x - beta, -1, 1)
    //     df/dx = alpha [active],  df/dalpha = clip(v),  df/dbeta = -alpha [active]
    auto backward = [range](std::span<const Tensor> in, const Tensor&, const Tensor& grad_out) {
        const auto& xv = in[0].values();
        const auto& g = grad_out.values();
        const double alpha = in[1].item(), beta = in[2].item();
        std::vector<double> gx(xv.size());
        double ga = 0.0, gb = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) {
            if (range == RangeKind::nonneg) {
                const double u = (xv[i] - beta) / alpha;
                const bool active = u >= 0.0 && u <= 1.0;
                gx[i] = active ? g[i] : 0.0;
                ga += g[i] * (std::clamp(u, 0.0, 1.0) - (active ? u : 0.0));
                gb -= active ? g[i] : 0.0;
            } else {
                const double v = xv[i] - beta;
                const bool active = v >= -1.0 && v <= 1.0;
                gx[i] = active ? alpha * g[i] : 0.0;
                ga += g[i] * std::clamp(v, -1.0, 1.0);
                gb -= active ? alpha * g[i] : 0.0;
            }
        }
        return std::vector<Tensor>{Tensor::from(in[0].shape(), std::move(gx)), Tensor::scalar(ga), Tensor::scalar(gb)};
    };

    return custom_grad(forward, backward, {x, p.alpha, p.beta}, "elastic_quantize");
}

Tensor elastic_linear(const Tensor& x, const Tensor& w, const Tensor& b, const QuantSpec& spec,
                      const ElasticParams& weight_params, const ElasticParams& act_params) {
    if (w.rank() != 2 || x.rank() != 2 || x.dim(1) != w.dim(1) || b.numel() != w.dim(0)) {
        throw ShapeError("elastic_linear: x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()) + ", b " +
                         shape_str(b.shape()));
    }
    const bool active = spec.scheme != Scheme::none;
    Tensor wq = w, xq = x;
    if (active && spec.weight_bits < 16) {
        if (weight_params.range != RangeKind::symmetric) {
            throw ParameterError("elastic_linear: weights use the symmetric range");
        }
        wq = elastic_quantize(w, weight_params, spec.weight_bits);
    }
    if (active && spec.act_bits < 16) xq = elastic_quantize(x, act_params, spec.act_bits);
    return add_rowvec(matmul(xq, transpose(wq)), b);
}

// ---- squashed ---------------------------------------------------------------

Tensor squash_weights(const Tensor& w, int bits) {
    require_level_bits(bits);
    Tensor squashed = tanh(w);
    return custom_grad(
        [bits](std::span<const Tensor> in) {
            std::vector<double> out(in[0].values());
            for (auto& v : out) v = round_to_level(std::clamp(v, -1.0, 1.0), bits, RangeKind::symmetric);
            return Tensor::from(in[0].shape(), std::move(out));
        },
        [](std::span<const Tensor>, const Tensor&, const Tensor& g) { return std::vector<Tensor>{g}; },
        {squashed}, "squash_round");
}

Tensor squashed_linear(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& gain, int bits) {
    require_level_bits(bits);
    if (w.rank() != 2 || x.rank() != 2 || x.dim(1) != w.dim(1) || b.numel() != w.dim(0)) {
        throw ShapeError("squashed_linear: x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()) + ", b " +
                         shape_str(b.shape()));
    }
    if (gain.numel() != w.dim(0)) {
        throw ShapeError("squashed_linear: gain length " + std::to_string(gain.numel()) + " != output dim " +
                         std::to_string(w.dim(0)));
    }
    Tensor q = squash_weights(w, bits);
    Tensor y = mul_rowvec(matmul(x, transpose(q)), exp(gain));
    return add_rowvec(y, b);
}

Tensor initial_squash_gain(const Tensor& w, int bits) {
    require_level_bits(bits);
    const std::size_t rows = w.dim(0), cols = w.dim(1);
    const auto& wv = w.values();
    std::vector<double> g(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double q = round_to_level(std::tanh(wv[i * cols + j]), bits, RangeKind::symmetric);
            num += wv[i * cols + j] * q;
            den += q * q;
        }
        g[i] = (den > 0.0 && num > 0.0) ? std::log(num / den) : 0.0;
    }
    return Tensor::vector(std::move(g), true);
}

Tensor squash_reg_loss(const Tensor& w, double lambda_q, double sigma_t) {
    if (!w.defined() || w.numel() == 0) throw ShapeError("squash_reg_loss: empty tensor");
    if (lambda_q < 0.0) throw ParameterError("squash_reg_loss: lambda_q must be nonnegative");
    if (!(sigma_t > 0.0)) throw ParameterError("squash_reg_loss: sigma_t must be positive");
    Tensor dev = sub(stddev(w), Tensor::scalar(sigma_t));
    Tensor m = mean(w);
    return scale(add(mul(dev, dev), mul(m, m)), lambda_q);
}

} // namespace qbit
