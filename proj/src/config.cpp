#include "qbit/config.hpp"

#include <fstream>
#include <set>

namespace qbit {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError("'" + where + "' must be an object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in '" + where + "'");
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

} // namespace

SyntheticDataset RunConfig::dataset() const {
    SyntheticDataset d;
    d.seed = data_seed;
    d.seq_len = model.seq_len;
    d.dim = model.dim;
    d.clusters = model.clusters;
    d.mask_prob = mask_prob;
    d.correlation = correlation;
    return d;
}

void RunConfig::validate() const {
    try {
        model.validate();
        train.validate();
        parse_schedule(schedule);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    if (!(mask_prob > 0.0 && mask_prob <= 1.0)) throw ConfigError("data.mask_prob must be in (0, 1]");
    if (!(correlation >= 0.0 && correlation < 1.0)) throw ConfigError("data.correlation must be in [0, 1)");
    if (eval_samples == 0) throw ConfigError("trainer.eval_samples must be > 0");
}

json to_json(const TransformerConfig& c) {
    return {{"layers", c.layers},     {"heads", c.heads},       {"dim", c.dim},
            {"ffn_dim", c.ffn_dim},   {"seq_len", c.seq_len},   {"clusters", c.clusters},
            {"seed", c.seed},         {"positional_encoding", c.positional_encoding}};
}

TransformerConfig transformer_config_from_json(const json& j) {
    reject_unknown(j, {"layers", "heads", "dim", "ffn_dim", "seq_len", "clusters", "seed", "positional_encoding"},
                   "model");
    TransformerConfig c;
    read(j, "layers", c.layers);
    read(j, "heads", c.heads);
    read(j, "dim", c.dim);
    read(j, "ffn_dim", c.ffn_dim);
    read(j, "seq_len", c.seq_len);
    read(j, "clusters", c.clusters);
    read(j, "seed", c.seed);
    read(j, "positional_encoding", c.positional_encoding);
    return c;
}

json to_json(const QuantSpec& s) {
    return {{"scheme", to_string(s.scheme)},
            {"scope", to_string(s.scope)},
            {"weight_bits", s.weight_bits},
            {"act_bits", s.act_bits}};
}

QuantSpec quant_spec_from_json(const json& j) {
    reject_unknown(j, {"scheme", "scope", "weight_bits", "act_bits"}, "spec");
    QuantSpec s;
    std::string scheme = "none", scope = "linear_only";
    read(j, "scheme", scheme);
    read(j, "scope", scope);
    read(j, "weight_bits", s.weight_bits);
    read(j, "act_bits", s.act_bits);
    s.scheme = scheme_from_string(scheme);
    s.scope = scope_from_string(scope);
    s.validate();
    return s;
}

json to_json(const RunConfig& c) {
    json weights = {{"final_output", c.train.distill_weights.final_output},
                    {"layer_output", c.train.distill_weights.layer_output},
                    {"attention", c.train.distill_weights.attention}};
    return {
        {"model", to_json(c.model)},
        {"quant", {{"scheme", to_string(c.scheme)}, {"scope", to_string(c.scope)}}},
        {"trainer",
         {{"steps", c.train.steps},
          {"batch_size", c.train.batch_size},
          {"seed", c.train.seed},
          {"lr", c.train.adam.lr},
          {"beta1", c.train.adam.beta1},
          {"beta2", c.train.adam.beta2},
          {"eps", c.train.adam.eps},
          {"loss", to_string(c.train.loss)},
          {"lambda_q", c.train.lambda_q},
          {"sigma_t", c.train.sigma_t},
          {"alpha_floor", c.train.alpha_floor},
          {"stage_steps", c.train.stage_steps},
          {"distill_weights", weights},
          {"schedule", c.schedule},
          {"teacher", c.teacher},
          {"teacher_steps", c.teacher_steps},
          {"eval_samples", c.eval_samples}}},
        {"data", {{"seed", c.data_seed}, {"mask_prob", c.mask_prob}, {"correlation", c.correlation}}},
    };
}

RunConfig run_config_from_json(const json& j) {
    reject_unknown(j, {"model", "quant", "trainer", "data"}, "config");
    RunConfig c;
    try {
        if (j.contains("model")) c.model = transformer_config_from_json(j["model"]);
        if (j.contains("quant")) {
            const auto& q = j["quant"];
            reject_unknown(q, {"scheme", "scope"}, "quant");
            std::string scheme = to_string(c.scheme), scope = to_string(c.scope);
            read(q, "scheme", scheme);
            read(q, "scope", scope);
            c.scheme = scheme_from_string(scheme);
            c.scope = scope_from_string(scope);
        }
        if (j.contains("trainer")) {
            const auto& t = j["trainer"];
            reject_unknown(t,
                           {"steps", "batch_size", "seed", "lr", "beta1", "beta2", "eps", "loss", "lambda_q", "sigma_t",
                            "alpha_floor", "stage_steps", "distill_weights", "schedule", "teacher", "teacher_steps",
                            "eval_samples"},
                           "trainer");
            read(t, "steps", c.train.steps);
            read(t, "batch_size", c.train.batch_size);
            read(t, "seed", c.train.seed);
            read(t, "lr", c.train.adam.lr);
            read(t, "beta1", c.train.adam.beta1);
            read(t, "beta2", c.train.adam.beta2);
            read(t, "eps", c.train.adam.eps);
            std::string loss = to_string(c.train.loss);
            read(t, "loss", loss);
            c.train.loss = loss_kind_from_string(loss);
            read(t, "lambda_q", c.train.lambda_q);
            read(t, "sigma_t", c.train.sigma_t);
            read(t, "alpha_floor", c.train.alpha_floor);
            read(t, "stage_steps", c.train.stage_steps);
            if (t.contains("distill_weights")) {
                const auto& w = t["distill_weights"];
                reject_unknown(w, {"final_output", "layer_output", "attention"}, "distill_weights");
                read(w, "final_output", c.train.distill_weights.final_output);
                read(w, "layer_output", c.train.distill_weights.layer_output);
                read(w, "attention", c.train.distill_weights.attention);
            }
            read(t, "schedule", c.schedule);
            read(t, "teacher", c.teacher);
            read(t, "teacher_steps", c.teacher_steps);
            read(t, "eval_samples", c.eval_samples);
        }
        if (j.contains("data")) {
            const auto& d = j["data"];
            reject_unknown(d, {"seed", "mask_prob", "correlation"}, "data");
            read(d, "seed", c.data_seed);
            read(d, "mask_prob", c.mask_prob);
            read(d, "correlation", c.correlation);
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(f, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

json to_json(const StepRecord& r) { return {{"step", r.step}, {"stage", r.stage}, {"loss", r.loss}, {"lr", r.lr}}; }

json to_json(const EvalMetrics& m) {
    return {{"masked_pred_accuracy", m.masked_pred_accuracy},
            {"distill_mse", m.distill_mse},
            {"masked_frames", m.masked_frames},
            {"correct", m.correct}};
}

} // namespace qbit
