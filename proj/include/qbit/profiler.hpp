#pragma once

#include "qbit/model.hpp"
#include "qbit/quantizers.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace qbit {

/// Four-metric cost summary of one forward pass.
struct CostReport {
    std::uint64_t storage_bytes = 0;
    std::uint64_t flops = 0;
    std::uint64_t quantops_bits = 0;
    std::optional<double> runtime_rel; // set once an anchor is applied
};

// ---- operation accounting -----------------------------------------------------

/// One costed operation. Operand bit-widths of 0 (or >= 16) mean floating point.
struct CostOp {
    enum class Kind {
        scalar_mul,       // `count` multiplies of a x b
        scalar_add,       // `count` additions of a + b
        matmul,           // [m x k] . [k x n], one mul and one add per MAC
        float_elementwise // `count` elements at `flops_per_element` each
    };

    std::string name;
    Kind kind = Kind::float_elementwise;
    std::uint64_t count = 0;
    std::uint64_t m = 0, k = 0, n = 0;
    int bits_a = 0, bits_b = 0;
    std::uint64_t flops_per_element = 1;

    static CostOp mul(std::string name, std::uint64_t count, int bits_a, int bits_b);
    static CostOp add(std::string name, std::uint64_t count, int bits_a, int bits_b);
    static CostOp matmul(std::string name, std::uint64_t m, std::uint64_t k, std::uint64_t n, int bits_a, int bits_b);
    static CostOp elementwise(std::string name, std::uint64_t count, std::uint64_t flops_per_element);

    std::uint64_t macs() const { return m * k * n; }
};

struct OpCost {
    std::uint64_t flops = 0;
    std::uint64_t quantops_bits = 0;

    OpCost& operator+=(const OpCost& o) {
        flops += o.flops;
        quantops_bits += o.quantops_bits;
        return *this;
    }
    friend bool operator==(const OpCost&, const OpCost&) = default;
};

/// Bit cost of one multiply / add when both operands are quantized:
/// b1 * b2 for a multiply, max(b1, b2) for an add.
std::uint64_t quantized_mul_bits(int bits_a, int bits_b);
std::uint64_t quantized_add_bits(int bits_a, int bits_b);

/// Cost of one op. Both operands quantized accrue QuantOPs; otherwise FLOPs.
OpCost op_cost(const CostOp& op);

struct CostGraph {
    std::vector<CostOp> ops;
};

OpCost count_ops(const CostGraph& graph);

/// Floating-point cost conventions used when walking the model graph.
struct FlopConvention {
    static constexpr std::uint64_t softmax = 4;    // max-subtract, exp, sum share, divide
    static constexpr std::uint64_t layer_norm = 8; // mean, centre, square, variance, scale, gain, shift, rsqrt share
    static constexpr std::uint64_t quantizer = 3;  // scale, clip, round at the op site
    static constexpr std::uint64_t squash = 1;     // tanh before rounding
};

/// Static forward graph of the toy transformer under `spec`.
CostGraph build_cost_graph(const TransformerConfig& cfg, const QuantSpec& spec);

/// Walks the forward graph for an input of `input_shape` ([T, d]).
OpCost count_ops(const TransformerConfig& cfg, const QuantSpec& spec, const Shape& input_shape);

// ---- storage ----------------------------------------------------------------

/// Parameters stored at the weight bit-width vs. those kept at 16 bits.
struct ParamCensus {
    std::uint64_t quantized = 0;
    std::uint64_t fp16 = 0;
};

/// Census of an instantiated model (its quantizer state included).
ParamCensus param_census(const Model& model, const QuantSpec& spec);
/// Census predicted from the config alone, including the quantizer parameters
/// calibration would create for `spec`.
ParamCensus param_census(const TransformerConfig& cfg, const QuantSpec& spec);

/// ceil((quantized * weight_bits + 16 * fp16) / 8).
std::uint64_t count_storage(const ParamCensus& census, int weight_bits);
std::uint64_t count_storage(const Model& model, const QuantSpec& spec);

CostReport profile(const TransformerConfig& cfg, const QuantSpec& spec);

// ---- runtime ----------------------------------------------------------------

/// Equal-speed pairing between a FLOPs budget and a QuantOPs budget.
struct Anchor {
    double flops_equiv = 0.0; // GFLOPs
    double quantops = 0.0;    // GBits

    bool calibrated() const { return flops_equiv > 0.0 && quantops > 0.0; }
    /// QuantOPs that run as fast as one FLOP.
    double rate() const;
};

/// The anchor model is assumed to run as fast as the baseline, so the FLOPs it
/// saves are worth exactly its QuantOPs.
Anchor calibrate_anchor(double baseline_flops, double anchor_flops, double anchor_quantops);

/// (flops + quantops / rate) / baseline_flops.
double estimate_runtime(double flops, double quantops, double baseline_flops, const Anchor& anchor);

// ---- published-table fixtures -------------------------------------------------

struct TableRow {
    std::string name;
    double flops_g = 0.0;
    double quantops_gbits = 0.0;
    double storage_mb = 0.0;
    double runtime_x = 0.0;
};

/// Reads `name,flops_g,quantops_gbits,storage_mb,runtime_x` CSV.
std::vector<TableRow> read_table_fixture(const std::string& path);
std::vector<TableRow> parse_table_fixture(const std::string& csv_text);

/// Storage in MB (1e6 bytes) = quantized_params * bits / 8e6 + per-family
/// fp16 residual (gains, scales, thresholds, biases, norms, front-end).
struct StorageModel {
    double quantized_params = 84.92e6;
    std::map<std::string, double> residual_mb{{"SqWQ", 14.73}, {"BiT-L", 14.56}, {"BiT-LA", 14.62}};

    std::optional<double> predict_mb(const std::string& family, int weight_bits) const;
};

/// Splits "BiT-LA-w1a1" into family "BiT-LA" and weight bits 1; nullopt for
/// rows without a precision suffix.
std::optional<std::pair<std::string, int>> parse_row_precision(const std::string& name);

struct FixtureOptions {
    std::string baseline_row = "HuBERT-FastConv";
    std::string anchor_row = "SqWQ-w8";
    double runtime_tolerance = 0.01;
    double storage_tolerance = 0.05;
    StorageModel storage;
};

struct RowCheck {
    std::string name;
    double runtime_printed = 0.0;
    double runtime_computed = 0.0;
    bool runtime_ok = false;
    std::optional<double> storage_computed;
    bool storage_ok = true;

    bool pass() const { return runtime_ok && storage_ok; }
};

struct FixtureReport {
    Anchor anchor;
    std::vector<RowCheck> rows;

    std::size_t passed() const;
    bool all_pass() const { return passed() == rows.size(); }
};

FixtureReport validate_table_fixture(const std::vector<TableRow>& rows, const FixtureOptions& options = {});
FixtureReport validate_table_fixture(const std::string& path, const FixtureOptions& options = {});

} // namespace qbit
