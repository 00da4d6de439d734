#pragma once

#include "qbit/quantizers.hpp"
#include "qbit/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace qbit {

struct TransformerConfig {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t dim = 64;
    std::size_t ffn_dim = 256;
    std::size_t seq_len = 64;
    std::size_t clusters = 16;
    std::uint64_t seed = 0;
    bool positional_encoding = true;

    void validate() const;
    std::size_t head_dim() const { return dim / heads; }
};

/// How a parameter is stored once the model is quantized.
enum class ParamRole { linear_weight, bias, norm, head, quantizer };

struct LinearParams {
    Tensor weight; // [out x in]
    Tensor bias;   // [out]
};

struct LayerParams {
    Tensor norm1_gain, norm1_shift;
    LinearParams query, key, value, out;
    Tensor norm2_gain, norm2_shift;
    LinearParams ffn_in, ffn_out;
};

/// Learned quantizer state: elastic (alpha, beta) per quantization site and the
/// squashed-weight gain per linear layer. Sites are created by calibrate().
struct QuantState {
    std::map<std::string, ElasticParams> sites;
    std::map<std::string, Tensor> gains;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
    ParamRole role;
};

class Model {
  public:
    Model() = default;
    /// Random initialization from cfg.seed.
    explicit Model(const TransformerConfig& cfg);

    const TransformerConfig& config() const { return cfg_; }

    std::vector<LayerParams> layers;
    Tensor final_norm_gain, final_norm_shift;
    LinearParams head;
    QuantState quant;

    /// Every leaf tensor in a fixed, name-sorted order (model weights, then
    /// quantizer parameters). Trainable leaves have requires_grad set.
    std::vector<NamedParam> named_parameters() const;
    /// Model weights only (no quantizer state).
    std::vector<NamedParam> model_parameters() const;
    std::size_t parameter_count() const;

    /// Deep copy with independent leaves.
    Model clone() const;
    void zero_grad();

  private:
    TransformerConfig cfg_;
    friend Model model_from_tensors(const TransformerConfig&, const std::map<std::string, Tensor>&);
};

/// Rebuilds a model from named tensors (checkpoint loading). Entries named
/// "quant.<site>.alpha|beta|range" and "quant.<layer>.gain" restore quantizer state.
Model model_from_tensors(const TransformerConfig& cfg, const std::map<std::string, Tensor>& tensors);

/// Per-layer intermediate outputs o_i [T x d] and attention weights a_i [H x T x T].
struct LayerTrace {
    std::vector<Tensor> outputs;
    std::vector<Tensor> attention;
};

struct ForwardResult {
    Tensor output; // [T x C] logits
    LayerTrace trace;
};

/// Forward pass under `spec`. Throws if a required quantizer site has not been
/// calibrated for this model.
ForwardResult forward(const Model& model, const Tensor& input, const QuantSpec& spec);

/// Forward pass that first creates any missing quantizer sites from the values
/// observed in this pass. Existing sites are left untouched.
ForwardResult calibrate(Model& model, const Tensor& input, const QuantSpec& spec);

/// Sinusoidal position table [T x d].
Tensor positional_table(std::size_t seq_len, std::size_t dim);

/// Mean cross-entropy over masked positions. Throws if no position is masked.
Tensor masked_prediction_loss(const Tensor& logits, const std::vector<int>& targets, const std::vector<bool>& mask);

/// Closed-form parameter count of the float model.
std::size_t expected_parameter_count(const TransformerConfig& cfg);

} // namespace qbit
