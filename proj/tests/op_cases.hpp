#pragma once

// One finite-difference case per differentiable tensor op.

#include "oracles.hpp"

#include "qbit/tensor.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace qbit::oracle {

struct OpCase {
    const char* name;
    std::vector<Shape> shapes;
    std::function<Tensor(const std::vector<Tensor>&)> build;
    double lo = -1.0, hi = 1.0;
};

inline std::vector<OpCase> op_cases() {
    return {
        {"add", {{3, 4}, {3, 4}}, [](auto& v) { return oracle::weighted_sum(add(v[0], v[1]), 1); }},
        {"sub", {{3, 4}, {3, 4}}, [](auto& v) { return oracle::weighted_sum(sub(v[0], v[1]), 2); }},
        {"mul", {{3, 4}, {3, 4}}, [](auto& v) { return oracle::weighted_sum(mul(v[0], v[1]), 3); }},
        {"scale", {{5}}, [](auto& v) { return oracle::weighted_sum(scale(v[0], -2.5), 4); }},
        {"tanh", {{2, 5}}, [](auto& v) { return oracle::weighted_sum(tanh(v[0]), 5); }, -2.0, 2.0},
        {"exp", {{2, 5}}, [](auto& v) { return oracle::weighted_sum(exp(v[0]), 6); }},
        {"relu", {{4, 4}}, [](auto& v) { return oracle::weighted_sum(relu(v[0]), 7); }},
        {"clip", {{4, 4}}, [](auto& v) { return oracle::weighted_sum(clip(v[0], -0.5, 0.5), 8); }},
        {"softmax0", {{3, 4}}, [](auto& v) { return oracle::weighted_sum(softmax(v[0], 0), 9); }, -2.0, 2.0},
        {"softmax1", {{3, 4}}, [](auto& v) { return oracle::weighted_sum(softmax(v[0], 1), 10); }, -2.0, 2.0},
        {"softmax3d", {{2, 3, 4}}, [](auto& v) { return oracle::weighted_sum(softmax(v[0], 1), 11); }},
        {"sum", {{3, 3}}, [](auto& v) { return scale(sum(v[0]), 0.7); }},
        {"mean", {{3, 3}}, [](auto& v) { return mul(mean(v[0]), mean(v[0])); }},
        {"stddev", {{12}}, [](auto& v) { return stddev(v[0]); }},
        {"mse", {{2, 6}, {2, 6}}, [](auto& v) { return mse(v[0], v[1]); }},
        {"transpose", {{3, 5}}, [](auto& v) { return oracle::weighted_sum(transpose(v[0]), 12); }},
        {"reshape", {{3, 4}}, [](auto& v) { return oracle::weighted_sum(reshape(v[0], {2, 6}), 13); }},
        {"matmul", {{3, 4}, {4, 2}}, [](auto& v) { return oracle::weighted_sum(matmul(v[0], v[1]), 14); }},
        {"add_rowvec", {{3, 4}, {4}}, [](auto& v) { return oracle::weighted_sum(add_rowvec(v[0], v[1]), 15); }},
        {"mul_rowvec", {{3, 4}, {4}}, [](auto& v) { return oracle::weighted_sum(mul_rowvec(v[0], v[1]), 16); }},
        {"slice_cols", {{3, 6}}, [](auto& v) { return oracle::weighted_sum(slice_cols(v[0], 2, 3), 17); }},
        {"concat_cols", {{3, 2}, {3, 3}}, [](auto& v) { return oracle::weighted_sum(concat_cols({v[0], v[1]}), 18); }},
        {"concat_rows", {{2, 3}, {1, 3}}, [](auto& v) { return oracle::weighted_sum(concat_rows({v[0], v[1]}), 19); }},
        {"layer_norm", {{3, 5}, {5}, {5}}, [](auto& v) { return oracle::weighted_sum(layer_norm(v[0], v[1], v[2]), 20); }},
    };
}

/// Worst relative error of autodiff against central differences over `seeds`
/// random draws of the case's inputs.
inline double worst_op_error(const OpCase& c, std::uint64_t seeds = 100) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        std::mt19937_64 rng(seed * 131 + 17);
        std::vector<Tensor> leaves;
        for (const auto& s : c.shapes) {
            auto v = random_values(rng, shape_numel(s), c.lo, c.hi);
            // keep clear of the kinks of relu and clip
            for (auto& e : v) {
                if (std::abs(e) < 1e-3 || std::abs(std::abs(e) - 0.5) < 1e-3) e += 0.01;
            }
            leaves.push_back(Tensor::from(s, v));
        }
        worst = std::max(worst, gradient_check(c.build, leaves));
    }
    return worst;
}

} // namespace qbit::oracle
