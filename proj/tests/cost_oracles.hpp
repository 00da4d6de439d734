#pragma once

// Brute-force cost references shared by the profiler tests and the acceptance run.

#include "qbit/profiler.hpp"

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace qbit::oracle {

// Visits every scalar multiply and accumulate of a quantized [m x k].[k x n]
// product and charges each one individually.
inline std::uint64_t enumerate_matmul_bits(std::uint64_t m, std::uint64_t k, std::uint64_t n, int ba, int bb) {
    std::uint64_t bits = 0;
    for (std::uint64_t i = 0; i < m; ++i)
        for (std::uint64_t j = 0; j < n; ++j)
            for (std::uint64_t p = 0; p < k; ++p) {
                bits += std::uint64_t(ba) * std::uint64_t(bb); // a[i,p] * b[p,j]
                bits += std::uint64_t(std::max(ba, bb));       // acc += product
            }
    return bits;
}

// Ordinary least squares for storage = P * b / 8e6 + r_family over the
// quantized rows, solved by Gaussian elimination on the normal equations.
struct StorageFit {
    double p = 0.0;
    std::map<std::string, double> residual;
};

inline StorageFit fit_storage(const std::vector<TableRow>& rows) {
    const std::vector<std::string> families{"SqWQ", "BiT-L", "BiT-LA"};
    const std::size_t n = 1 + families.size();
    std::vector<std::vector<double>> ata(n, std::vector<double>(n + 1, 0.0));
    for (const auto& row : rows) {
        auto prec = parse_row_precision(row.name);
        if (!prec) continue;
        std::vector<double> x(n, 0.0);
        x[0] = prec->second / 8.0; // P in millions
        x[1 + std::size_t(std::find(families.begin(), families.end(), prec->first) - families.begin())] = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) ata[i][j] += x[i] * x[j];
            ata[i][n] += x[i] * row.storage_mb;
        }
    }
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t r = c + 1; r < n; ++r) {
            const double f = ata[r][c] / ata[c][c];
            for (std::size_t j = c; j <= n; ++j) ata[r][j] -= f * ata[c][j];
        }
    }
    std::vector<double> sol(n);
    for (std::size_t c = n; c-- > 0;) {
        double s = ata[c][n];
        for (std::size_t j = c + 1; j < n; ++j) s -= ata[c][j] * sol[j];
        sol[c] = s / ata[c][c];
    }
    StorageFit fit{sol[0] * 1e6, {}};
    for (std::size_t i = 0; i < families.size(); ++i) fit.residual[families[i]] = sol[1 + i];
    return fit;
}

} // namespace qbit::oracle
