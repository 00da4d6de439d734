#include "qbit/distill.hpp"

namespace qbit {

DistillTargets DistillTargets::from(const ForwardResult& teacher) {
    DistillTargets t;
    t.output = teacher.output.detach();
    for (const auto& o : teacher.trace.outputs) t.trace.outputs.push_back(o.detach());
    for (const auto& a : teacher.trace.attention) t.trace.attention.push_back(a.detach());
    return t;
}

Tensor distill_loss(const DistillTargets& targets, const Tensor& student_output, const LayerTrace& student_trace,
                    const DistillWeights& weights) {
    const auto& tt = targets.trace;
    if (tt.outputs.size() != student_trace.outputs.size() || tt.attention.size() != student_trace.attention.size() ||
        tt.outputs.size() != tt.attention.size()) {
        throw ShapeError("distill_loss: teacher has " + std::to_string(tt.outputs.size()) + " layers, student has " +
                         std::to_string(student_trace.outputs.size()));
    }
    // mse() rejects shape mismatches; detach() keeps the teacher side off the tape.
    Tensor loss = scale(mse(targets.output.detach(), student_output), weights.final_output);
    for (std::size_t i = 0; i < tt.outputs.size(); ++i) {
        loss = add(loss, scale(mse(tt.outputs[i].detach(), student_trace.outputs[i]), weights.layer_output));
        loss = add(loss, scale(mse(tt.attention[i].detach(), student_trace.attention[i]), weights.attention));
    }
    return loss;
}

} // namespace qbit
