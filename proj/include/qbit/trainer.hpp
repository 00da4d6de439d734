#pragma once

#include "qbit/distill.hpp"
#include "qbit/model.hpp"
#include "qbit/quantizers.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace qbit {

/// One rung of a precision ladder: fp16 or w{b}a{b}.
struct Stage {
    bool full_precision = true;
    int weight_bits = 16;
    int act_bits = 16;

    std::string label() const;
    /// Spec for this stage under the run's scheme and scope.
    QuantSpec spec(Scheme scheme, Scope scope) const;
};

struct Schedule {
    std::vector<Stage> stages;

    const Stage& target() const { return stages.back(); }
    bool one_step() const { return stages.size() == 1; }
    /// Canonical text form, e.g. "fp16>w8a8>w4a4".
    std::string text() const;
};

/// Parses "fp16>w8a8>w4a4" style ladders. A single token is one-step
/// quantization. "w{b}" alone is shorthand for w{b}a8.
Schedule parse_schedule(const std::string& text);

enum class LossKind { task, distill };
std::string to_string(LossKind k);
LossKind loss_kind_from_string(const std::string& s);

struct AdamConfig {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    AdamConfig adam;
    std::size_t steps = 2000;
    std::size_t batch_size = 4;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::task;
    double lambda_q = 1e-3;
    double sigma_t = 0.75;
    DistillWeights distill_weights;
    /// Optional explicit steps per stage; empty means an equal split of `steps`.
    std::vector<std::size_t> stage_steps;
    double alpha_floor = 1e-4;

    void validate() const;
};

/// Frames follow a per-dimension AR(1) process so a masked frame is predictable
/// from its neighbours; targets are the argmax of a fixed random projection.
struct SyntheticDataset {
    std::uint64_t seed = 0;
    std::size_t seq_len = 64;
    std::size_t dim = 64;
    std::size_t clusters = 16;
    double mask_prob = 0.15;
    double correlation = 0.98;

    enum class Split : std::uint64_t { train = 0, eval = 1 };

    struct Sample {
        Tensor input;              // [T x d], masked frames zeroed
        std::vector<int> targets;  // cluster id of every clean frame
        std::vector<bool> mask;    // at least one entry is true
    };

    /// Deterministic in (seed, split, index).
    Sample sample(Split split, std::uint64_t index) const;
    /// Fixed projection [C x d] behind the cluster ids.
    std::vector<double> projection() const;
};

struct StepRecord {
    std::size_t step = 0;
    std::string stage;
    double loss = 0.0;
    double lr = 0.0;
};

struct EvalMetrics {
    double masked_pred_accuracy = 0.0;
    double distill_mse = 0.0;
    std::size_t masked_frames = 0;
    std::size_t correct = 0;
};

struct MetricsLog {
    std::vector<StepRecord> steps;
    EvalMetrics final_metrics;
    std::string schedule;
    std::string scheme;
    std::string scope;
};

/// Raised when a loss or parameter turns non-finite; the message names the
/// step, stage and offending tensor.
class TrainingError : public Error {
  public:
    using Error::Error;
};

struct TrainResult {
    Model student;
    MetricsLog log;
};

/// Copy of `model` whose leaves do not require grad (teachers, evaluation).
Model frozen_copy(const Model& model);

/// Quantization-aware training over the schedule. The student starts as a copy
/// of `init` (or a fresh model from cfg when null). With LossKind::distill the
/// full-precision `teacher` supplies targets and must be non-null.
TrainResult run_qat(const Model* init, const Model* teacher, const TransformerConfig& cfg, Scheme scheme,
                    Scope scope, const Schedule& schedule, const TrainConfig& train, const SyntheticDataset& data,
                    std::size_t eval_samples = 64);

/// Accuracy on masked frames of the held-out split, and the mean distillation
/// loss against `teacher` (0 when teacher is null).
EvalMetrics evaluate(const Model& model, const QuantSpec& spec, const SyntheticDataset& data, const Model* teacher,
                     std::size_t samples = 64);

/// Adam over named leaves. State is keyed by name so parameters added at a
/// stage transition join with fresh moments.
class AdamOptimizer {
  public:
    explicit AdamOptimizer(AdamConfig cfg) : cfg_(cfg) {}
    /// Applies one update to every leaf that has a gradient.
    void step(const std::vector<NamedParam>& params);
    std::size_t steps_taken() const { return t_; }

  private:
    struct Moments {
        std::vector<double> m, v;
        std::size_t t = 0;
    };
    AdamConfig cfg_;
    std::map<std::string, Moments> state_;
    std::size_t t_ = 0;
};

} // namespace qbit
