#pragma once

#include "qbit/config.hpp"
#include "qbit/trainer.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace qbit {

/// Entry point behind the `qbit` binary: train, profile and sweep subcommands.
/// Returns the process exit code; never calls exit().
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Content hash of the sources this binary was built from.
std::string code_version();

/// "0..4" (inclusive range) or "0,3,7". Throws ParameterError on empty input.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);
/// Comma-separated precision labels; each must parse as a one-stage schedule.
std::vector<std::string> parse_precision_list(const std::string& text);

/// Ladder prefix ending at `precision`, or an empty schedule when the ladder
/// never reaches it.
Schedule truncate_ladder(const Schedule& ladder, const std::string& precision);

struct SweepCell {
    std::string precision;
    std::uint64_t seed = 0;
    std::string schedule; // "one-step" or the ladder text
    Schedule executed;
    double task_metric = 0.0;
    double distill_mse = 0.0;
    bool ok = false;
    std::string error;
};

struct SweepOptions {
    std::vector<std::string> precisions;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> ladders;
    std::size_t threads = 1;
};

/// Trains one full-precision teacher per seed, then every (seed, precision,
/// schedule) student distilled or task-trained from it. Cells are independent;
/// a failing cell is recorded and the rest still run.
std::vector<SweepCell> run_sweep(const RunConfig& base, const SweepOptions& options);

/// Config for seed `seed` derived from a base config.
RunConfig seeded_config(const RunConfig& base, std::uint64_t seed);

/// Trains the full-precision teacher for a seeded config.
Model train_teacher(const RunConfig& cfg);

std::string sweep_csv(const std::vector<SweepCell>& cells);

} // namespace qbit
