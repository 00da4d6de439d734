#include "qbit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace qbit {

// ---- schedule ---------------------------------------------------------------

std::string Stage::label() const {
    if (full_precision) return "fp16";
    return "w" + std::to_string(weight_bits) + "a" + std::to_string(act_bits);
}

QuantSpec Stage::spec(Scheme scheme, Scope scope) const {
    if (full_precision || scheme == Scheme::none) return QuantSpec::full_precision();
    QuantSpec s{scheme, weight_bits, act_bits, scope};
    s.validate();
    return s;
}

std::string Schedule::text() const {
    std::string out;
    for (std::size_t i = 0; i < stages.size(); ++i) out += (i ? ">" : "") + stages[i].label();
    return out;
}

namespace {

int parse_bits(const std::string& token, std::size_t& pos) {
    std::size_t start = pos;
    while (pos < token.size() && std::isdigit(static_cast<unsigned char>(token[pos]))) ++pos;
    if (start == pos || pos - start > 2) throw ParameterError("malformed precision token '" + token + "'");
    const int bits = std::stoi(token.substr(start, pos - start));
    if (bits != 1 && bits != 2 && bits != 4 && bits != 8) {
        throw ParameterError("invalid bit-width " + std::to_string(bits) + " in '" + token + "'");
    }
    return bits;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

} // namespace

Schedule parse_schedule(const std::string& text) {
    if (trim(text).empty()) throw ParameterError("empty schedule");
    Schedule schedule;
    std::stringstream ss(text);
    std::string raw;
    while (std::getline(ss, raw, '>')) {
        const std::string token = trim(raw);
        if (token.empty()) throw ParameterError("empty stage in schedule '" + text + "'");
        Stage stage;
        if (token == "fp16") {
            schedule.stages.push_back(stage);
            continue;
        }
        if (token[0] != 'w') throw ParameterError("malformed precision token '" + token + "'");
        std::size_t pos = 1;
        stage.full_precision = false;
        stage.weight_bits = parse_bits(token, pos);
        if (pos == token.size()) {
            stage.act_bits = 8;
        } else {
            if (token[pos] != 'a') throw ParameterError("malformed precision token '" + token + "'");
            ++pos;
            stage.act_bits = parse_bits(token, pos);
            if (pos != token.size()) throw ParameterError("malformed precision token '" + token + "'");
        }
        schedule.stages.push_back(stage);
    }
    if (text.back() == '>') throw ParameterError("empty stage in schedule '" + text + "'");
    return schedule;
}

std::string to_string(LossKind k) { return k == LossKind::task ? "task" : "distill"; }

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "task") return LossKind::task;
    if (s == "distill") return LossKind::distill;
    throw ParameterError("unknown loss kind '" + s + "' (expected task or distill)");
}

void TrainConfig::validate() const {
    if (steps == 0) throw ParameterError("trainer steps must be > 0");
    if (batch_size == 0) throw ParameterError("batch size must be > 0");
    if (!(adam.lr > 0.0)) throw ParameterError("learning rate must be positive");
    if (lambda_q < 0.0) throw ParameterError("lambda_q must be nonnegative");
    if (!(sigma_t > 0.0)) throw ParameterError("sigma_t must be positive");
}

// ---- data -------------------------------------------------------------------

std::vector<double> SyntheticDataset::projection() const {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> p(clusters * dim);
    for (auto& v : p) v = dist(rng);
    return p;
}

SyntheticDataset::Sample SyntheticDataset::sample(Split split, std::uint64_t index) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const double innovation = std::sqrt(1.0 - correlation * correlation);
    std::vector<double> frames(seq_len * dim);
    for (std::size_t j = 0; j < dim; ++j) frames[j] = normal(rng);
    for (std::size_t t = 1; t < seq_len; ++t)
        for (std::size_t j = 0; j < dim; ++j)
            frames[t * dim + j] = correlation * frames[(t - 1) * dim + j] + innovation * normal(rng);

    const auto proj = projection();
    Sample s;
    s.targets.resize(seq_len);
    for (std::size_t t = 0; t < seq_len; ++t) {
        int best = 0;
        double best_score = -1e300;
        for (std::size_t c = 0; c < clusters; ++c) {
            double score = 0.0;
            for (std::size_t j = 0; j < dim; ++j) score += proj[c * dim + j] * frames[t * dim + j];
            if (score > best_score) {
                best_score = score;
                best = static_cast<int>(c);
            }
        }
        s.targets[t] = best;
    }

    s.mask.assign(seq_len, false);
    bool any = false;
    for (std::size_t t = 0; t < seq_len; ++t) {
        s.mask[t] = unit(rng) < mask_prob;
        any = any || s.mask[t];
    }
    if (!any) s.mask[std::uniform_int_distribution<std::size_t>(0, seq_len - 1)(rng)] = true;
    for (std::size_t t = 0; t < seq_len; ++t)
        if (s.mask[t]) std::fill_n(&frames[t * dim], dim, 0.0);
    s.input = Tensor::matrix(seq_len, dim, std::move(frames));
    return s;
}

// ---- optimizer --------------------------------------------------------------

void AdamOptimizer::step(const std::vector<NamedParam>& params) {
    ++t_;
    for (const auto& p : params) {
        if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
        Tensor leaf = p.tensor;
        const auto& g = leaf.grad();
        auto& st = state_[p.name];
        if (st.m.empty()) {
            st.m.assign(g.size(), 0.0);
            st.v.assign(g.size(), 0.0);
        }
        ++st.t;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
        auto w = leaf.mutable_data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
            st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            w[i] -= cfg_.lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + cfg_.eps);
        }
    }
}

// ---- training ---------------------------------------------------------------

Model frozen_copy(const Model& model) {
    std::map<std::string, Tensor> tensors;
    for (const auto& p : model.named_parameters()) tensors.emplace(p.name, p.tensor.clone_leaf(false));
    return model_from_tensors(model.config(), tensors);
}

namespace {

std::vector<std::size_t> split_steps(const Schedule& schedule, const TrainConfig& train) {
    const std::size_t n = schedule.stages.size();
    if (!train.stage_steps.empty()) {
        if (train.stage_steps.size() != n) throw ParameterError("stage_steps length does not match the schedule");
        return train.stage_steps;
    }
    std::vector<std::size_t> out(n, train.steps / n);
    out.back() += train.steps % n;
    return out;
}

Tensor squash_regularizer(const Model& m, const TrainConfig& train) {
    Tensor total;
    for (const auto& p : m.model_parameters()) {
        if (p.role != ParamRole::linear_weight) continue;
        Tensor r = squash_reg_loss(p.tensor, train.lambda_q, train.sigma_t);
        total = total.defined() ? add(total, r) : r;
    }
    return total;
}

void check_parameters(const Model& m, std::size_t step, const std::string& stage) {
    for (const auto& p : m.named_parameters()) {
        for (double v : p.tensor.values()) {
            if (!std::isfinite(v)) {
                throw TrainingError("non-finite parameter at step " + std::to_string(step) + ", stage " + stage +
                                    ", tensor " + p.name);
            }
        }
    }
}

} // namespace

TrainResult run_qat(const Model* init, const Model* teacher, const TransformerConfig& cfg, Scheme scheme, Scope scope,
                    const Schedule& schedule, const TrainConfig& train, const SyntheticDataset& data,
                    std::size_t eval_samples) {
    train.validate();
    cfg.validate();
    if (schedule.stages.empty()) throw ParameterError("empty schedule");
    if (train.loss == LossKind::distill && teacher == nullptr) {
        throw ParameterError("distillation requires a teacher model");
    }
    if (data.seq_len != cfg.seq_len || data.dim != cfg.dim || data.clusters != cfg.clusters) {
        throw ShapeError("dataset dimensions do not match the model config");
    }

    if (init) check_parameters(*init, 0, schedule.stages.front().label());
    TrainResult result{init ? init->clone() : Model(cfg), {}};
    Model& student = result.student;
    std::optional<Model> frozen_teacher;
    if (teacher) frozen_teacher = frozen_copy(*teacher);

    AdamOptimizer opt(train.adam);
    const auto stage_steps = split_steps(schedule, train);
    std::uint64_t sample_index = train.seed * 1000003ULL;
    std::size_t global_step = 0;
    QuantSpec spec;

    for (std::size_t s = 0; s < schedule.stages.size(); ++s) {
        const Stage& stage = schedule.stages[s];
        spec = stage.spec(scheme, scope);
        const std::string label = stage.label();

        check_parameters(student, global_step, label);
        // New quantizer sites come from the first batch of the stage; sites from
        // earlier stages carry over unchanged.
        if (spec.scheme != Scheme::none) {
            calibrate(student, data.sample(SyntheticDataset::Split::train, sample_index).input, spec);
        }

        for (std::size_t k = 0; k < stage_steps[s]; ++k, ++global_step) {
            student.zero_grad();
            double batch_loss = 0.0;
            try {
                for (std::size_t b = 0; b < train.batch_size; ++b) {
                    const auto sample = data.sample(SyntheticDataset::Split::train, sample_index++);
                    auto out = forward(student, sample.input, spec);
                    Tensor loss;
                    if (train.loss == LossKind::task) {
                        loss = masked_prediction_loss(out.output, sample.targets, sample.mask);
                    } else {
                        auto targets = DistillTargets::from(forward(*frozen_teacher, sample.input, QuantSpec{}));
                        loss = distill_loss(targets, out.output, out.trace, train.distill_weights);
                    }
                    if (spec.scheme == Scheme::squashed && train.lambda_q > 0.0) {
                        loss = add(loss, squash_regularizer(student, train));
                    }
                    batch_loss += loss.item();
                    backward(scale(loss, 1.0 / static_cast<double>(train.batch_size)));
                }
            } catch (const NumericError& e) {
                throw TrainingError("non-finite value at step " + std::to_string(global_step) + ", stage " + label +
                                    ": " + e.what());
            }
            batch_loss /= static_cast<double>(train.batch_size);
            if (!std::isfinite(batch_loss)) {
                throw TrainingError("non-finite loss at step " + std::to_string(global_step) + ", stage " + label +
                                    ", tensor loss");
            }
            opt.step(student.named_parameters());
            for (auto& [name, site] : student.quant.sites) {
                if (site.alpha.requires_grad()) site.clamp_alpha(train.alpha_floor);
            }
            check_parameters(student, global_step, label);
            result.log.steps.push_back({global_step, label, batch_loss, train.adam.lr});
        }
    }

    result.log.schedule = schedule.text();
    result.log.scheme = to_string(scheme);
    result.log.scope = to_string(scope);
    result.log.final_metrics =
        evaluate(student, spec, data, frozen_teacher ? &*frozen_teacher : nullptr, eval_samples);
    return result;
}

EvalMetrics evaluate(const Model& model, const QuantSpec& spec, const SyntheticDataset& data, const Model* teacher,
                     std::size_t samples) {
    const Model frozen = frozen_copy(model);
    std::optional<Model> frozen_teacher;
    if (teacher) frozen_teacher = frozen_copy(*teacher);
    EvalMetrics m;
    double distill_total = 0.0;
    const std::size_t C = model.config().clusters;
    for (std::size_t i = 0; i < samples; ++i) {
        const auto sample = data.sample(SyntheticDataset::Split::eval, i);
        const auto out = forward(frozen, sample.input, spec);
        const auto& z = out.output.values();
        for (std::size_t t = 0; t < sample.mask.size(); ++t) {
            if (!sample.mask[t]) continue;
            const auto row = z.begin() + static_cast<std::ptrdiff_t>(t * C);
            const auto pred = std::max_element(row, row + static_cast<std::ptrdiff_t>(C)) - row;
            m.correct += pred == sample.targets[t] ? 1 : 0;
            ++m.masked_frames;
        }
        if (frozen_teacher) {
            auto targets = DistillTargets::from(forward(*frozen_teacher, sample.input, QuantSpec{}));
            distill_total += distill_loss(targets, out.output, out.trace).item();
        }
    }
    m.masked_pred_accuracy = m.masked_frames ? static_cast<double>(m.correct) / static_cast<double>(m.masked_frames) : 0.0;
    m.distill_mse = samples ? distill_total / static_cast<double>(samples) : 0.0;
    return m;
}

} // namespace qbit
