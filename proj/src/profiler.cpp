#include "qbit/profiler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace qbit {

namespace {

bool quantized(int bits) { return bits >= 1 && bits <= 8; }

} // namespace

CostOp CostOp::mul(std::string name, std::uint64_t count, int bits_a, int bits_b) {
    CostOp op;
    op.name = std::move(name);
    op.kind = Kind::scalar_mul;
    op.count = count;
    op.bits_a = bits_a;
    op.bits_b = bits_b;
    return op;
}

CostOp CostOp::add(std::string name, std::uint64_t count, int bits_a, int bits_b) {
    CostOp op = mul(std::move(name), count, bits_a, bits_b);
    op.kind = Kind::scalar_add;
    return op;
}

CostOp CostOp::matmul(std::string name, std::uint64_t m, std::uint64_t k, std::uint64_t n, int bits_a, int bits_b) {
    CostOp op;
    op.name = std::move(name);
    op.kind = Kind::matmul;
    op.m = m;
    op.k = k;
    op.n = n;
    op.bits_a = bits_a;
    op.bits_b = bits_b;
    return op;
}

CostOp CostOp::elementwise(std::string name, std::uint64_t count, std::uint64_t flops_per_element) {
    CostOp op;
    op.name = std::move(name);
    op.kind = Kind::float_elementwise;
    op.count = count;
    op.flops_per_element = flops_per_element;
    return op;
}

std::uint64_t quantized_mul_bits(int bits_a, int bits_b) {
    return static_cast<std::uint64_t>(bits_a) * static_cast<std::uint64_t>(bits_b);
}

std::uint64_t quantized_add_bits(int bits_a, int bits_b) {
    return static_cast<std::uint64_t>(std::max(bits_a, bits_b));
}

OpCost op_cost(const CostOp& op) {
    const bool both = quantized(op.bits_a) && quantized(op.bits_b);
    switch (op.kind) {
    case CostOp::Kind::scalar_mul:
        return both ? OpCost{0, op.count * quantized_mul_bits(op.bits_a, op.bits_b)} : OpCost{op.count, 0};
    case CostOp::Kind::scalar_add:
        return both ? OpCost{0, op.count * quantized_add_bits(op.bits_a, op.bits_b)} : OpCost{op.count, 0};
    case CostOp::Kind::matmul: {
        // N MACs: N multiplies and N accumulator adds.
        const auto n = op.macs();
        if (both) {
            return {0, n * (quantized_mul_bits(op.bits_a, op.bits_b) + quantized_add_bits(op.bits_a, op.bits_b))};
        }
        return {2 * n, 0};
    }
    case CostOp::Kind::float_elementwise:
        return {op.count * op.flops_per_element, 0};
    }
    return {};
}

OpCost count_ops(const CostGraph& graph) {
    OpCost total;
    for (const auto& op : graph.ops) total += op_cost(op);
    return total;
}

CostGraph build_cost_graph(const TransformerConfig& cfg, const QuantSpec& spec) {
    cfg.validate();
    spec.validate();
    const std::uint64_t T = cfg.seq_len, d = cfg.dim, f = cfg.ffn_dim, H = cfg.heads, dh = cfg.head_dim();
    const int wbits = spec.quantizes_weights() ? spec.weight_bits : 0;
    const int abits = spec.quantizes_activations() ? spec.act_bits : 0;
    const bool attn_q = spec.quantizes_attention() && abits != 0;

    CostGraph g;
    auto& ops = g.ops;
    auto linear = [&](const std::string& name, std::uint64_t in, std::uint64_t out) {
        if (wbits) {
            if (spec.scheme == Scheme::squashed) {
                ops.push_back(CostOp::elementwise(name + ".squash", in * out, FlopConvention::squash));
            }
            ops.push_back(CostOp::elementwise(name + ".quant_w", in * out, FlopConvention::quantizer));
        }
        if (abits) ops.push_back(CostOp::elementwise(name + ".quant_x", T * in, FlopConvention::quantizer));
        ops.push_back(CostOp::matmul(name + ".matmul", T, in, out, abits, wbits));
        if (spec.scheme == Scheme::squashed) {
            ops.push_back(CostOp::elementwise(name + ".gain_exp", out, 1));
            ops.push_back(CostOp::mul(name + ".gain_scale", T * out, 0, 0));
        }
        ops.push_back(CostOp::add(name + ".bias", T * out, 0, 0));
    };

    if (cfg.positional_encoding) ops.push_back(CostOp::add("position", T * d, 0, 0));
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        const auto p = "layer" + std::to_string(i);
        ops.push_back(CostOp::elementwise(p + ".norm1", T * d, FlopConvention::layer_norm));
        linear(p + ".query", d, d);
        linear(p + ".key", d, d);
        linear(p + ".value", d, d);
        if (attn_q) ops.push_back(CostOp::elementwise(p + ".attn.quant_qkv", 3 * T * d, FlopConvention::quantizer));
        const int op_bits = attn_q ? abits : 0;
        ops.push_back(CostOp::matmul(p + ".attn.scores", H * T, dh, T, op_bits, op_bits));
        ops.push_back(CostOp::mul(p + ".attn.scale", H * T * T, 0, 0));
        ops.push_back(CostOp::elementwise(p + ".attn.softmax", H * T * T, FlopConvention::softmax));
        if (attn_q) ops.push_back(CostOp::elementwise(p + ".attn.quant_p", H * T * T, FlopConvention::quantizer));
        ops.push_back(CostOp::matmul(p + ".attn.context", H * T, T, dh, op_bits, op_bits));
        linear(p + ".out", d, d);
        ops.push_back(CostOp::add(p + ".residual1", T * d, 0, 0));
        ops.push_back(CostOp::elementwise(p + ".norm2", T * d, FlopConvention::layer_norm));
        linear(p + ".ffn_in", d, f);
        ops.push_back(CostOp::elementwise(p + ".relu", T * f, 1));
        linear(p + ".ffn_out", f, d);
        ops.push_back(CostOp::add(p + ".residual2", T * d, 0, 0));
    }
    ops.push_back(CostOp::elementwise("final_norm", T * d, FlopConvention::layer_norm));
    ops.push_back(CostOp::matmul("head.matmul", T, d, cfg.clusters, 0, 0));
    ops.push_back(CostOp::add("head.bias", T * cfg.clusters, 0, 0));
    return g;
}

OpCost count_ops(const TransformerConfig& cfg, const QuantSpec& spec, const Shape& input_shape) {
    if (input_shape.size() != 2 || input_shape[0] == 0 || input_shape[1] == 0) {
        throw ShapeError("count_ops: static [T x d] input shape required, got " + shape_str(input_shape));
    }
    if (input_shape[1] != cfg.dim) throw ShapeError("count_ops: input width does not match model dim");
    TransformerConfig c = cfg;
    c.seq_len = input_shape[0];
    return count_ops(build_cost_graph(c, spec));
}

// ---- storage ----------------------------------------------------------------

ParamCensus param_census(const Model& model, const QuantSpec& spec) {
    ParamCensus c;
    const bool qw = spec.quantizes_weights();
    for (const auto& p : model.named_parameters()) {
        if (qw && p.role == ParamRole::linear_weight) {
            c.quantized += p.tensor.numel();
        } else {
            c.fp16 += p.tensor.numel();
        }
    }
    return c;
}

ParamCensus param_census(const TransformerConfig& cfg, const QuantSpec& spec) {
    cfg.validate();
    spec.validate();
    const std::uint64_t d = cfg.dim, f = cfg.ffn_dim;
    const std::uint64_t linear_weights = cfg.layers * (4 * d * d + 2 * d * f);
    const std::uint64_t total = expected_parameter_count(cfg);
    ParamCensus c;
    if (!spec.quantizes_weights()) {
        c.fp16 = total;
    } else {
        c.quantized = linear_weights;
        c.fp16 = total - linear_weights;
    }
    // Quantizer state: two scalars per elastic site, plus one gain per output
    // channel for squashed layers.
    const std::uint64_t linears_per_layer = 6;
    const std::uint64_t out_channels_per_layer = 5 * d + f;
    if (spec.scheme == Scheme::elastic && spec.weight_bits < 16) c.fp16 += cfg.layers * linears_per_layer * 2;
    if (spec.scheme == Scheme::elastic && spec.act_bits < 16) {
        c.fp16 += cfg.layers * linears_per_layer * 2;
        if (spec.scope == Scope::linear_attention) c.fp16 += cfg.layers * 4 * 2;
    }
    if (spec.scheme == Scheme::squashed) {
        c.fp16 += cfg.layers * (linears_per_layer * 2 + out_channels_per_layer);
    }
    return c;
}

std::uint64_t count_storage(const ParamCensus& census, int weight_bits) {
    const std::uint64_t bits = census.quantized * static_cast<std::uint64_t>(weight_bits) + 16 * census.fp16;
    return (bits + 7) / 8;
}

std::uint64_t count_storage(const Model& model, const QuantSpec& spec) {
    return count_storage(param_census(model, spec), spec.weight_bits);
}

CostReport profile(const TransformerConfig& cfg, const QuantSpec& spec) {
    const auto ops = count_ops(build_cost_graph(cfg, spec));
    CostReport r;
    r.flops = ops.flops;
    r.quantops_bits = ops.quantops_bits;
    r.storage_bytes = count_storage(param_census(cfg, spec), spec.weight_bits);
    return r;
}

// ---- runtime ----------------------------------------------------------------

double Anchor::rate() const {
    if (!calibrated()) throw ParameterError("anchor is not calibrated");
    return quantops / flops_equiv;
}

Anchor calibrate_anchor(double baseline_flops, double anchor_flops, double anchor_quantops) {
    const double equiv = baseline_flops - anchor_flops;
    if (!(equiv > 0.0)) throw ParameterError("anchor must save FLOPs relative to the baseline");
    if (!(anchor_quantops > 0.0)) throw ParameterError("anchor QuantOPs must be positive");
    return {equiv, anchor_quantops};
}

double estimate_runtime(double flops, double quantops, double baseline_flops, const Anchor& anchor) {
    if (!anchor.calibrated()) throw ParameterError("estimate_runtime: anchor is not calibrated");
    if (!(baseline_flops > 0.0)) throw ParameterError("estimate_runtime: baseline FLOPs must be positive");
    return (flops + quantops / anchor.rate()) / baseline_flops;
}

// ---- fixtures ---------------------------------------------------------------

std::vector<TableRow> parse_table_fixture(const std::string& csv_text) {
    std::istringstream in(csv_text);
    std::string line;
    if (!std::getline(in, line)) throw Error("fixture is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "name,flops_g,quantops_gbits,storage_mb,runtime_x") {
        throw Error("fixture header must be 'name,flops_g,quantops_gbits,storage_mb,runtime_x', got '" + line + "'");
    }
    std::vector<TableRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ls(line);
        std::string field;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() != 5) {
            throw Error("fixture line " + std::to_string(lineno) + ": expected 5 fields, got " +
                        std::to_string(fields.size()));
        }
        TableRow row;
        row.name = fields[0];
        double* targets[] = {&row.flops_g, &row.quantops_gbits, &row.storage_mb, &row.runtime_x};
        for (std::size_t k = 0; k < 4; ++k) {
            try {
                std::size_t used = 0;
                *targets[k] = std::stod(fields[k + 1], &used);
                if (used != fields[k + 1].size()) throw std::invalid_argument("trailing characters");
            } catch (const std::exception&) {
                throw Error("fixture line " + std::to_string(lineno) + ": field " + std::to_string(k + 2) +
                            " is missing or not numeric");
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<TableRow> read_table_fixture(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open fixture '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_table_fixture(ss.str());
}

std::optional<double> StorageModel::predict_mb(const std::string& family, int weight_bits) const {
    auto it = residual_mb.find(family);
    if (it == residual_mb.end()) return std::nullopt;
    return quantized_params * weight_bits / 8e6 + it->second;
}

std::optional<std::pair<std::string, int>> parse_row_precision(const std::string& name) {
    const auto pos = name.rfind("-w");
    if (pos == std::string::npos) return std::nullopt;
    std::size_t i = pos + 2, start = i;
    while (i < name.size() && std::isdigit(static_cast<unsigned char>(name[i]))) ++i;
    if (i == start) return std::nullopt;
    if (i != name.size() && name[i] != 'a') return std::nullopt;
    return std::make_pair(name.substr(0, pos), std::stoi(name.substr(start, i - start)));
}

std::size_t FixtureReport::passed() const {
    return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const RowCheck& r) { return r.pass(); }));
}

FixtureReport validate_table_fixture(const std::vector<TableRow>& rows, const FixtureOptions& options) {
    auto find = [&](const std::string& name) -> const TableRow& {
        auto it = std::find_if(rows.begin(), rows.end(), [&](const TableRow& r) { return r.name == name; });
        if (it == rows.end()) throw Error("fixture has no row named '" + name + "'");
        return *it;
    };
    const TableRow& base = find(options.baseline_row);
    const TableRow& anchor_row = find(options.anchor_row);

    FixtureReport report;
    report.anchor = calibrate_anchor(base.flops_g, anchor_row.flops_g, anchor_row.quantops_gbits);
    for (const auto& row : rows) {
        RowCheck check;
        check.name = row.name;
        check.runtime_printed = row.runtime_x;
        check.runtime_computed = estimate_runtime(row.flops_g, row.quantops_gbits, base.flops_g, report.anchor);
        check.runtime_ok = std::abs(check.runtime_computed - row.runtime_x) <= options.runtime_tolerance + 1e-12;
        if (auto prec = parse_row_precision(row.name)) {
            check.storage_computed = options.storage.predict_mb(prec->first, prec->second);
            if (check.storage_computed) {
                check.storage_ok = std::abs(*check.storage_computed - row.storage_mb) <= options.storage_tolerance + 1e-12;
            }
        }
        report.rows.push_back(std::move(check));
    }
    return report;
}

FixtureReport validate_table_fixture(const std::string& path, const FixtureOptions& options) {
    return validate_table_fixture(read_table_fixture(path), options);
}

} // namespace qbit
