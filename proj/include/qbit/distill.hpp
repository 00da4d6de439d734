#pragma once

#include "qbit/model.hpp"

namespace qbit {

/// Relative weights of the three loss families. All 1 reproduces the plain sum.
struct DistillWeights {
    double final_output = 1.0;
    double layer_output = 1.0;
    double attention = 1.0;
};

/// Teacher tensors the student is trained to match. Always gradient-detached.
struct DistillTargets {
    Tensor output;
    LayerTrace trace;

    static DistillTargets from(const ForwardResult& teacher);
};

/// MSE(y_T, y_S) + sum_i [ MSE(o_T,i, o_S,i) + MSE(a_T,i, a_S,i) ], with optional
/// per-family weights. Throws ShapeError on layer-count or shape mismatch.
Tensor distill_loss(const DistillTargets& targets, const Tensor& student_output, const LayerTrace& student_trace,
                    const DistillWeights& weights = {});

} // namespace qbit
