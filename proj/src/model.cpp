#include "qbit/model.hpp"

#include <cmath>
#include <random>

namespace qbit {

void TransformerConfig::validate() const {
    if (layers == 0 || heads == 0 || dim == 0 || ffn_dim == 0 || seq_len == 0 || clusters == 0) {
        throw ParameterError("transformer dimensions must all be >= 1");
    }
    if (dim % heads != 0) {
        throw ParameterError("model dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                             " heads");
    }
}

namespace {

Tensor random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
    std::vector<double> v(rows * cols);
    for (auto& e : v) e = dist(rng);
    return Tensor::matrix(rows, cols, std::move(v), true);
}

LinearParams random_linear(std::mt19937_64& rng, std::size_t out, std::size_t in) {
    return {random_matrix(rng, out, in), Tensor::zeros({out}, true)};
}

void push_linear(std::vector<NamedParam>& out, const std::string& name, const LinearParams& p,
                 ParamRole weight_role) {
    out.push_back({name + ".weight", p.weight, weight_role});
    out.push_back({name + ".bias", p.bias, ParamRole::bias});
}

struct LayerRef {
    const char* name;
    LinearParams LayerParams::*member;
};

constexpr LayerRef kLinears[] = {
    {"query", &LayerParams::query},   {"key", &LayerParams::key},         {"value", &LayerParams::value},
    {"out", &LayerParams::out},       {"ffn_in", &LayerParams::ffn_in},   {"ffn_out", &LayerParams::ffn_out},
};

std::string layer_prefix(std::size_t i) { return "layer" + std::to_string(i); }

} // namespace

Model::Model(const TransformerConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const auto d = cfg.dim, f = cfg.ffn_dim;
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        LayerParams l;
        l.norm1_gain = Tensor::full({d}, 1.0, true);
        l.norm1_shift = Tensor::zeros({d}, true);
        l.query = random_linear(rng, d, d);
        l.key = random_linear(rng, d, d);
        l.value = random_linear(rng, d, d);
        l.out = random_linear(rng, d, d);
        l.norm2_gain = Tensor::full({d}, 1.0, true);
        l.norm2_shift = Tensor::zeros({d}, true);
        l.ffn_in = random_linear(rng, f, d);
        l.ffn_out = random_linear(rng, d, f);
        layers.push_back(std::move(l));
    }
    final_norm_gain = Tensor::full({d}, 1.0, true);
    final_norm_shift = Tensor::zeros({d}, true);
    head = random_linear(rng, cfg.clusters, d);
}

std::vector<NamedParam> Model::model_parameters() const {
    std::vector<NamedParam> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto p = layer_prefix(i);
        const auto& l = layers[i];
        out.push_back({p + ".norm1.gain", l.norm1_gain, ParamRole::norm});
        out.push_back({p + ".norm1.shift", l.norm1_shift, ParamRole::norm});
        out.push_back({p + ".norm2.gain", l.norm2_gain, ParamRole::norm});
        out.push_back({p + ".norm2.shift", l.norm2_shift, ParamRole::norm});
        for (const auto& ref : kLinears) push_linear(out, p + "." + ref.name, l.*(ref.member), ParamRole::linear_weight);
    }
    out.push_back({"final_norm.gain", final_norm_gain, ParamRole::norm});
    out.push_back({"final_norm.shift", final_norm_shift, ParamRole::norm});
    push_linear(out, "head", head, ParamRole::head);
    return out;
}

std::vector<NamedParam> Model::named_parameters() const {
    auto out = model_parameters();
    for (const auto& [site, p] : quant.sites) {
        out.push_back({"quant." + site + ".alpha", p.alpha, ParamRole::quantizer});
        out.push_back({"quant." + site + ".beta", p.beta, ParamRole::quantizer});
    }
    for (const auto& [name, g] : quant.gains) out.push_back({"quant." + name + ".gain", g, ParamRole::quantizer});
    return out;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : model_parameters()) n += p.tensor.numel();
    return n;
}

Model Model::clone() const {
    std::map<std::string, Tensor> tensors;
    for (const auto& p : named_parameters()) tensors.emplace(p.name, p.tensor.clone_leaf(p.tensor.requires_grad()));
    return model_from_tensors(cfg_, tensors);
}

void Model::zero_grad() {
    for (auto& p : named_parameters()) p.tensor.zero_grad();
}

Model model_from_tensors(const TransformerConfig& cfg, const std::map<std::string, Tensor>& tensors) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    auto take = [&](const std::string& name, const Shape& shape) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw Error("missing parameter '" + name + "'");
        if (it->second.shape() != shape) {
            throw ShapeError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                             shape_str(shape));
        }
        return it->second;
    };
    auto take_linear = [&](const std::string& name, std::size_t out, std::size_t in) {
        return LinearParams{take(name + ".weight", {out, in}), take(name + ".bias", {out})};
    };
    const auto d = cfg.dim, f = cfg.ffn_dim;
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        const auto p = layer_prefix(i);
        LayerParams l;
        l.norm1_gain = take(p + ".norm1.gain", {d});
        l.norm1_shift = take(p + ".norm1.shift", {d});
        l.norm2_gain = take(p + ".norm2.gain", {d});
        l.norm2_shift = take(p + ".norm2.shift", {d});
        l.query = take_linear(p + ".query", d, d);
        l.key = take_linear(p + ".key", d, d);
        l.value = take_linear(p + ".value", d, d);
        l.out = take_linear(p + ".out", d, d);
        l.ffn_in = take_linear(p + ".ffn_in", f, d);
        l.ffn_out = take_linear(p + ".ffn_out", d, f);
        m.layers.push_back(std::move(l));
    }
    m.final_norm_gain = take("final_norm.gain", {d});
    m.final_norm_shift = take("final_norm.shift", {d});
    m.head = take_linear("head", cfg.clusters, d);

    const std::string prefix = "quant.";
    for (const auto& [name, t] : tensors) {
        if (name.rfind(prefix, 0) != 0) continue;
        const auto dot = name.rfind('.');
        const std::string key = name.substr(prefix.size(), dot - prefix.size());
        const std::string field = name.substr(dot + 1);
        if (field == "gain") {
            m.quant.gains[key] = t;
        } else if (field == "alpha" || field == "beta") {
            auto& site = m.quant.sites[key];
            site.range = key.ends_with(".attn.p") ? RangeKind::nonneg : RangeKind::symmetric;
            (field == "alpha" ? site.alpha : site.beta) = t;
        } else {
            throw Error("unknown quantizer entry '" + name + "'");
        }
    }
    for (const auto& [key, site] : m.quant.sites) {
        if (!site.alpha.defined() || !site.beta.defined()) throw Error("incomplete quantizer site '" + key + "'");
    }
    return m;
}

// ---- forward ----------------------------------------------------------------

namespace {

struct Pass {
    const QuantSpec& spec;
    QuantState* calibrating; // non-null: create missing sites
    const QuantState& state;

    const ElasticParams& site(const std::string& name, const Tensor& observed, RangeKind range, int bits,
                              bool train_beta = true) {
        auto it = state.sites.find(name);
        if (it != state.sites.end()) return it->second;
        if (!calibrating) throw Error("quantizer site '" + name + "' is not calibrated");
        auto p = ElasticParams::calibrate(observed.detach(), range, bits);
        if (!train_beta) p.beta = Tensor::scalar(p.beta.item(), false);
        return calibrating->sites.emplace(name, std::move(p)).first->second;
    }

    const Tensor& gain(const std::string& name, const Tensor& weight, int bits) {
        auto it = state.gains.find(name);
        if (it != state.gains.end()) return it->second;
        if (!calibrating) throw Error("squashed gain '" + name + "' is not calibrated");
        return calibrating->gains.emplace(name, initial_squash_gain(weight, bits)).first->second;
    }

    Tensor linear(const std::string& name, const Tensor& x, const LinearParams& p) {
        switch (spec.scheme) {
        case Scheme::none:
            return add_rowvec(matmul(x, transpose(p.weight)), p.bias);
        case Scheme::elastic: {
            const auto& pw = site(name + ".w", p.weight, RangeKind::symmetric, spec.weight_bits);
            const auto& px = site(name + ".x", x, RangeKind::symmetric, spec.act_bits);
            return elastic_linear(x, p.weight, p.bias, spec, pw, px);
        }
        case Scheme::squashed: {
            const auto& px = site(name + ".x", x, RangeKind::symmetric, spec.act_bits, false);
            const auto& g = gain(name, p.weight, spec.weight_bits);
            return squashed_linear(elastic_quantize(x, px, spec.act_bits), p.weight, p.bias, g, spec.weight_bits);
        }
        }
        throw Error("unreachable");
    }

    Tensor quantize_operand(const std::string& name, const Tensor& x, RangeKind range) {
        if (!spec.quantizes_attention() || spec.act_bits >= 16) return x;
        return elastic_quantize(x, site(name, x, range, spec.act_bits), spec.act_bits);
    }
};

ForwardResult run_forward(const Model& model, const Tensor& input, Pass& pass) {
    const auto& cfg = model.config();
    if (model.layers.size() != cfg.layers || !model.head.weight.defined()) {
        throw Error("model parameters are not initialized");
    }
    if (input.rank() != 2 || input.dim(0) != cfg.seq_len || input.dim(1) != cfg.dim) {
        throw ShapeError("forward: input " + shape_str(input.shape()) + " does not match [" +
                         std::to_string(cfg.seq_len) + "x" + std::to_string(cfg.dim) + "]");
    }
    pass.spec.validate();
    const std::size_t heads = cfg.heads, dh = cfg.head_dim(), T = cfg.seq_len;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardResult result;
    Tensor x = cfg.positional_encoding ? add(input, positional_table(T, cfg.dim)) : input;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& l = model.layers[i];
        const auto p = layer_prefix(i);

        Tensor h = layer_norm(x, l.norm1_gain, l.norm1_shift);
        Tensor q = pass.quantize_operand(p + ".attn.q", pass.linear(p + ".query", h, l.query), RangeKind::symmetric);
        Tensor k = pass.quantize_operand(p + ".attn.k", pass.linear(p + ".key", h, l.key), RangeKind::symmetric);
        Tensor v = pass.quantize_operand(p + ".attn.v", pass.linear(p + ".value", h, l.value), RangeKind::symmetric);

        std::vector<Tensor> probs, contexts;
        for (std::size_t hh = 0; hh < heads; ++hh) {
            Tensor qh = slice_cols(q, hh * dh, dh);
            Tensor kh = slice_cols(k, hh * dh, dh);
            Tensor vh = slice_cols(v, hh * dh, dh);
            Tensor attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
            probs.push_back(attn);
            contexts.push_back(matmul(pass.quantize_operand(p + ".attn.p", attn, RangeKind::nonneg), vh));
        }
        Tensor ctx = heads == 1 ? contexts.front() : concat_cols(contexts);
        x = add(x, pass.linear(p + ".out", ctx, l.out));

        Tensor h2 = layer_norm(x, l.norm2_gain, l.norm2_shift);
        Tensor ff = relu(pass.linear(p + ".ffn_in", h2, l.ffn_in));
        x = add(x, pass.linear(p + ".ffn_out", ff, l.ffn_out));

        result.trace.outputs.push_back(x);
        Tensor stacked = heads == 1 ? probs.front() : concat_rows(probs);
        result.trace.attention.push_back(reshape(stacked, {heads, T, T}));
    }
    Tensor hf = layer_norm(x, model.final_norm_gain, model.final_norm_shift);
    result.output = add_rowvec(matmul(hf, transpose(model.head.weight)), model.head.bias);
    return result;
}

} // namespace

ForwardResult forward(const Model& model, const Tensor& input, const QuantSpec& spec) {
    Pass pass{spec, nullptr, model.quant};
    return run_forward(model, input, pass);
}

ForwardResult calibrate(Model& model, const Tensor& input, const QuantSpec& spec) {
    Pass pass{spec, &model.quant, model.quant};
    return run_forward(model, input, pass);
}

Tensor positional_table(std::size_t seq_len, std::size_t dim) {
    std::vector<double> v(seq_len * dim);
    for (std::size_t t = 0; t < seq_len; ++t) {
        for (std::size_t j = 0; j < dim; ++j) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(dim));
            v[t * dim + j] = (j % 2 == 0) ? std::sin(t * rate) : std::cos(t * rate);
        }
    }
    return Tensor::matrix(seq_len, dim, std::move(v));
}

Tensor masked_prediction_loss(const Tensor& logits, const std::vector<int>& targets, const std::vector<bool>& mask) {
    if (logits.rank() != 2) throw ShapeError("masked_prediction_loss: logits must be [T x C]");
    const std::size_t T = logits.dim(0), C = logits.dim(1);
    if (targets.size() != T || mask.size() != T) throw ShapeError("masked_prediction_loss: targets/mask length != T");
    std::size_t count = 0;
    for (bool m : mask) count += m ? 1 : 0;
    if (count == 0) throw Error("masked_prediction_loss: mask selects no positions");

    const auto& z = logits.values();
    std::vector<double> probs(T * C, 0.0);
    double loss = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        if (!mask[t]) continue;
        const int y = targets[t];
        if (y < 0 || static_cast<std::size_t>(y) >= C) throw ParameterError("masked_prediction_loss: target out of range");
        double mx = z[t * C];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, z[t * C + c]);
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += std::exp(z[t * C + c] - mx);
        loss += std::log(s) + mx - z[t * C + static_cast<std::size_t>(y)];
        for (std::size_t c = 0; c < C; ++c) probs[t * C + c] = std::exp(z[t * C + c] - mx) / s;
    }
    const double n = static_cast<double>(count);
    return make_op_tensor("masked_prediction_loss", {1}, {loss / n}, {logits},
                          [probs = std::move(probs), targets, mask, T, C, n](const Node&, const std::vector<double>& g) {
                              std::vector<double> gz(T * C, 0.0);
                              for (std::size_t t = 0; t < T; ++t) {
                                  if (!mask[t]) continue;
                                  for (std::size_t c = 0; c < C; ++c) gz[t * C + c] = g[0] * probs[t * C + c] / n;
                                  gz[t * C + static_cast<std::size_t>(targets[t])] -= g[0] / n;
                              }
                              return std::vector<std::vector<double>>{std::move(gz)};
                          });
}

std::size_t expected_parameter_count(const TransformerConfig& cfg) {
    const auto d = cfg.dim, f = cfg.ffn_dim;
    const std::size_t attention = 4 * d * d + 4 * d;
    const std::size_t ffn = 2 * d * f + f + d;
    const std::size_t norms = 4 * d;
    return cfg.layers * (attention + ffn + norms) + 2 * d + cfg.clusters * d + cfg.clusters;
}

} // namespace qbit
