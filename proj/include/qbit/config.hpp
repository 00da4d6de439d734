#pragma once

#include "qbit/model.hpp"
#include "qbit/quantizers.hpp"
#include "qbit/trainer.hpp"

#include <json.hpp>

#include <string>

namespace qbit {

/// Everything one run needs: model, quantization, trainer and data settings.
/// Serialized as nested JSON; absent keys keep their defaults, unknown keys are
/// rejected.
struct RunConfig {
    TransformerConfig model;
    Scheme scheme = Scheme::elastic;
    Scope scope = Scope::linear_attention;
    TrainConfig train;
    std::string schedule = "fp16";
    std::string teacher;             // checkpoint path, required for distill runs
    std::size_t teacher_steps = 0;   // sweep teacher budget; 0 means train.steps
    std::size_t eval_samples = 64;
    double mask_prob = 0.15;
    double correlation = 0.98;
    std::uint64_t data_seed = 0;

    SyntheticDataset dataset() const;
    void validate() const;
};

/// Raised for malformed or inconsistent configuration files.
class ConfigError : public Error {
  public:
    using Error::Error;
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

nlohmann::json to_json(const TransformerConfig& cfg);
TransformerConfig transformer_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const QuantSpec& spec);
QuantSpec quant_spec_from_json(const nlohmann::json& j);

nlohmann::json to_json(const StepRecord& r);
nlohmann::json to_json(const EvalMetrics& m);

} // namespace qbit
