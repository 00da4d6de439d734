// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// nonzero if any selected criterion fails.
//
//   acceptance                 run every criterion
//   acceptance --criterion 6   run one criterion

#include "cost_oracles.hpp"
#include "op_cases.hpp"
#include "oracles.hpp"

#include "qbit/cli.hpp"
#include "qbit/config.hpp"
#include "qbit/profiler.hpp"
#include "qbit/quantizers.hpp"
#include "qbit/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#ifndef QBIT_FIXTURE_DIR
#define QBIT_FIXTURE_DIR "fixtures"
#endif

using namespace qbit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string table_path = std::string(QBIT_FIXTURE_DIR) + "/table1.csv";

struct Outcome {
    bool pass = false;
    std::string detail;
    std::vector<std::string> notes; // printed indented above the verdict line
};

std::string fmt(double v, int digits = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::string sci(double v) {
    std::ostringstream os;
    os << std::scientific << std::setprecision(2) << v;
    return os.str();
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- 1: runtime column -------------------------------------------------------

Outcome table_runtime() {
    Outcome o;
    const auto rows = read_table_fixture(table_path);
    const auto report = validate_table_fixture(rows);
    double worst = 0.0;
    std::size_t ok = 0;
    for (const auto& r : report.rows) {
        worst = std::max(worst, std::abs(r.runtime_computed - r.runtime_printed));
        ok += r.runtime_ok;
        if (!r.runtime_ok)
            o.notes.push_back(r.name + ": computed " + fmt(r.runtime_computed) + " printed " + fmt(r.runtime_printed, 2));
    }
    bool examples = true;
    for (auto [name, want] : std::vector<std::pair<std::string, double>>{
             {"BiT-LA-w1a1", 0.12}, {"HuBERT-Base", 1.38}, {"DistillHuBERT", 0.73}}) {
        auto it = std::find_if(report.rows.begin(), report.rows.end(), [&](const RowCheck& r) { return r.name == name; });
        examples = examples && it != report.rows.end() && std::abs(it->runtime_computed - want) <= 0.01;
    }
    o.pass = ok == report.rows.size() && report.rows.size() >= 14 && examples;
    o.detail = std::to_string(ok) + "/" + std::to_string(report.rows.size()) + " rows within 0.01, worst " + fmt(worst);
    return o;
}

// ---- 2: storage column -------------------------------------------------------

Outcome table_storage() {
    Outcome o;
    const auto rows = read_table_fixture(table_path);
    const auto fit = oracle::fit_storage(rows);
    StorageModel model;
    model.quantized_params = fit.p;
    model.residual_mb = fit.residual;

    std::size_t quantized = 0, ok = 0;
    double worst = 0.0;
    for (const auto& r : rows) {
        auto prec = parse_row_precision(r.name);
        if (!prec) continue;
        ++quantized;
        const double err = std::abs(*model.predict_mb(prec->first, prec->second) - r.storage_mb);
        worst = std::max(worst, err);
        ok += err <= 0.05;
    }
    // residuals must be pairwise separated by more than the fit tolerance
    const double sq = fit.residual.at("SqWQ"), l = fit.residual.at("BiT-L"), la = fit.residual.at("BiT-LA");
    const double gap = std::min({std::abs(sq - l), std::abs(sq - la), std::abs(l - la)});
    const bool p_ok = std::abs(fit.p - 84.92e6) / 84.92e6 < 1e-3;
    o.pass = quantized == 12 && ok == quantized && gap > 0.02 && p_ok;
    o.detail = std::to_string(ok) + "/" + std::to_string(quantized) + " rows within 0.05 MB, worst " + fmt(worst) +
               ", P = " + fmt(fit.p / 1e6, 3) + "e6, residuals SqWQ " + fmt(sq, 3) + " BiT-L " + fmt(l, 3) +
               " BiT-LA " + fmt(la, 3);
    return o;
}

// ---- 3: QuantOPs closed form -------------------------------------------------

Outcome quantops_closed_form() {
    Outcome o;
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::uint64_t> dim(1, 16);
    std::size_t checked = 0, matched = 0;
    for (int shape = 0; shape < 24; ++shape) {
        const auto m = dim(rng), k = dim(rng), n = dim(rng);
        for (int bw : {1, 2, 4, 8}) {
            for (int ba : {1, 2, 4, 8}) {
                const auto counted = op_cost(CostOp::matmul("mm", m, k, n, bw, ba)).quantops_bits;
                const auto closed = m * k * n * std::uint64_t(bw * ba + std::max(bw, ba));
                ++checked;
                matched += counted == closed && counted == oracle::enumerate_matmul_bits(m, k, n, bw, ba);
            }
        }
    }

    const auto rows = read_table_fixture(table_path);
    const double macs = 26.367;
    double worst = 0.0;
    std::size_t table_rows = 0;
    for (const auto& r : rows) {
        auto prec = parse_row_precision(r.name);
        if (!prec || prec->first == "BiT-LA") continue;
        const int b = prec->second;
        // squashed rows keep 8-bit activations
        const int a = prec->first == "SqWQ" ? 8 : b;
        const double implied = r.quantops_gbits / double(b * a + std::max(a, b));
        worst = std::max(worst, std::abs(implied - macs) / macs);
        ++table_rows;
    }
    o.pass = matched == checked && table_rows == 8 && worst <= 0.005;
    o.detail = std::to_string(matched) + "/" + std::to_string(checked) + " shape x bit-pair cases exact; " +
               std::to_string(table_rows) + " table rows within " + fmt(100.0 * worst, 3) + "% of 26.367G MACs";
    return o;
}

// ---- 4: gradients ------------------------------------------------------------

double surrogate(double x, double alpha, double beta, RangeKind range) {
    if (range == RangeKind::nonneg) return alpha * std::clamp((x - beta) / alpha, 0.0, 1.0);
    return alpha * std::clamp(x - beta, -1.0, 1.0);
}

// Worst FD error of the elastic quantizer against its rounding-free surrogate,
// w.r.t. X, alpha and beta.
double elastic_fd_error(RangeKind range, std::uint64_t seeds) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        std::mt19937_64 rng(seed * 7 + 3);
        std::uniform_real_distribution<double> a(0.5, 2.0), b(-0.3, 0.3);
        const double alpha = a(rng), beta = b(rng);
        auto xv = oracle::random_values(rng, 8, -3.0, 3.0);
        for (auto& v : xv) {
            const double s = range == RangeKind::nonneg ? (v - beta) / alpha : v - beta;
            for (double corner : {-1.0, 0.0, 1.0})
                if (std::abs(s - corner) < 1e-3) v += 0.01;
        }
        const auto weights = oracle::random_values(rng, 8);
        auto p = ElasticParams::make(alpha, beta, range);
        auto x = Tensor::vector(xv, true);
        backward(sum(mul(elastic_quantize(x, p, 4), Tensor::vector(weights))));
        std::vector<std::vector<double>> analytic{x.grad(), p.alpha.grad(), p.beta.grad()};
        auto f = [&](const std::vector<Tensor>& v) {
            double total = 0.0;
            for (std::size_t i = 0; i < 8; ++i) total += weights[i] * surrogate(v[0][i], v[1][0], v[2][0], range);
            return total;
        };
        auto numeric =
            oracle::finite_difference(f, {Tensor::vector(xv), Tensor::vector({alpha}), Tensor::vector({beta})});
        worst = std::max(worst, oracle::relative_error(analytic, numeric));
    }
    return worst;
}

// Worst FD error of the squashed layer w.r.t. x, b and g with W held fixed.
double squashed_fd_error(std::uint64_t seeds) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        std::mt19937_64 rng(seed * 11 + 5);
        auto x = oracle::random_tensor(rng, {3, 4}, false);
        auto w = oracle::random_tensor(rng, {2, 4}, false);
        auto b = oracle::random_tensor(rng, {2}, false);
        auto g = oracle::random_tensor(rng, {2}, false, -0.5, 0.5);
        worst = std::max(worst, oracle::gradient_check(
                                    [w](const std::vector<Tensor>& v) {
                                        return oracle::weighted_sum(squashed_linear(v[0], w, v[1], v[2], 2), 3);
                                    },
                                    {x, b, g}));
    }
    return worst;
}

// STE: the X gradient must not depend on where rounding lands. Two inputs in
// the same clip region but with different rounded outputs get identical slopes,
// equal to the exact derivative of the surrogate.
bool ste_exact(std::uint64_t seeds) {
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        std::mt19937_64 rng(seed * 13 + 1);
        std::uniform_real_distribution<double> a(0.3, 2.5), b(-0.4, 0.4);
        for (auto range : {RangeKind::nonneg, RangeKind::symmetric}) {
            const double alpha = a(rng), beta = b(rng);
            auto p = ElasticParams::make(alpha, beta, range);
            auto x = oracle::random_tensor(rng, {12}, true, -3.0, 3.0);
            const auto upstream = oracle::random_values(rng, 12);
            backward(sum(mul(elastic_quantize(x, p, 2), Tensor::vector(upstream))));
            for (std::size_t i = 0; i < 12; ++i) {
                const double s = range == RangeKind::nonneg ? (x[i] - beta) / alpha : x[i] - beta;
                const double lo = range == RangeKind::nonneg ? 0.0 : -1.0;
                const bool inside = s > lo && s < 1.0;
                const double slope = inside ? (range == RangeKind::nonneg ? 1.0 : alpha) : 0.0;
                if (x.grad()[i] != upstream[i] * slope) return false;
            }
        }
        // squashed weights: gradient is the tanh derivative whatever level is chosen
        auto w = oracle::random_tensor(rng, {3, 4}, true, -1.5, 1.5);
        const auto up = oracle::random_values(rng, 12);
        backward(sum(mul(squash_weights(w, 2), Tensor::from({3, 4}, up))));
        for (std::size_t i = 0; i < 12; ++i) {
            const double t = std::tanh(w[i]);
            if (std::abs(w.grad()[i] - up[i] * (1.0 - t * t)) > 1e-15 * std::abs(up[i])) return false;
        }
    }
    return true;
}

Outcome gradients() {
    Outcome o;
    double worst = 0.0;
    std::string worst_name;
    const auto cases = oracle::op_cases();
    for (const auto& c : cases) {
        const double e = oracle::worst_op_error(c, 100);
        if (e > worst) worst = e, worst_name = c.name;
    }
    const double nonneg = elastic_fd_error(RangeKind::nonneg, 100);
    const double symmetric = elastic_fd_error(RangeKind::symmetric, 100);
    const double squashed = squashed_fd_error(100);
    const bool ste = ste_exact(100);
    o.notes.push_back("worst op " + worst_name + " rel " + sci(worst));
    o.pass = worst < 1e-4 && nonneg < 1e-4 && symmetric < 1e-4 && squashed < 1e-4 && ste;
    o.detail = std::to_string(cases.size()) + " ops x 100 seeds max rel " + sci(worst) +
               "; elastic nonneg " + sci(nonneg) + ", symmetric " + sci(symmetric) + ", squashed " + sci(squashed) +
               "; STE " + (ste ? "exact" : "MISMATCH");
    return o;
}

// ---- 5: quantizer invariants -------------------------------------------------

Outcome quantizer_invariants() {
    Outcome o;
    std::mt19937_64 rng(55);
    bool distinct_ok = true, monotone_ok = true, bypass_ok = true, idempotent_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        for (int bits : {1, 2, 4, 8}) {
            for (auto range : {RangeKind::nonneg, RangeKind::symmetric}) {
                auto x = oracle::random_tensor(rng, {40, 25}, false, -4.0, 4.0);
                auto q = elastic_quantize(x, ElasticParams::calibrate(x, range, bits), bits);
                distinct_ok = distinct_ok && std::set<double>(q.data().begin(), q.data().end()).size() <= (1u << bits);

                auto sorted = oracle::random_values(rng, 200, -3.0, 3.0);
                std::sort(sorted.begin(), sorted.end());
                std::uniform_real_distribution<double> a(0.2, 3.0), b(-0.5, 0.5);
                auto m = elastic_quantize(Tensor::vector(sorted), ElasticParams::make(a(rng), b(rng), range), bits);
                for (std::size_t i = 1; i < sorted.size(); ++i) monotone_ok = monotone_ok && m[i - 1] <= m[i];

                // the beta = 0 family: any alpha for nonneg, unit alpha for symmetric
                const double alpha = range == RangeKind::nonneg ? a(rng) : 1.0;
                auto p = ElasticParams::make(alpha, 0.0, range);
                auto once = elastic_quantize(x, p, bits);
                auto twice = elastic_quantize(once, p, bits);
                for (std::size_t i = 0; i < once.numel(); ++i)
                    idempotent_ok = idempotent_ok && std::abs(twice[i] - once[i]) <= 1e-12 * std::max(1.0, alpha);
            }
            auto w = oracle::random_tensor(rng, {30, 30}, false, -3.0, 3.0);
            auto s = squash_weights(w, bits);
            distinct_ok = distinct_ok && std::set<double>(s.data().begin(), s.data().end()).size() <= (1u << bits);
        }
        auto x = oracle::random_tensor(rng, {6, 6}, false, -5.0, 5.0);
        for (auto range : {RangeKind::nonneg, RangeKind::symmetric})
            bypass_ok = bypass_ok && elastic_quantize(x, ElasticParams::make(0.3, 0.1, range), 16).values() == x.values();
    }
    o.pass = distinct_ok && monotone_ok && bypass_ok && idempotent_ok;
    auto yn = [](bool b) { return b ? "ok" : "FAILED"; };
    o.detail = std::string("distinct values ") + yn(distinct_ok) + ", monotone " + yn(monotone_ok) +
               ", 16-bit bypass " + yn(bypass_ok) + ", beta=0 idempotence " + yn(idempotent_ok);
    return o;
}

// ---- 6: directional training properties --------------------------------------

struct ToyRun {
    json config;
    std::vector<std::uint64_t> seeds;
    double lambda_q = 0.0; // regularized arm of the SqWQ comparison
};

ToyRun toy_run() {
    std::ifstream in(std::string(QBIT_FIXTURE_DIR) + "/acceptance.json");
    const json j = json::parse(in);
    return {j.at("config"), j.at("seeds").get<std::vector<std::uint64_t>>(), j.at("lambda_q").get<double>()};
}

// |stddev(W) - sigma_t| per linear layer, population convention.
std::map<std::string, double> stddev_gaps(const Model& m, double sigma_t) {
    std::map<std::string, double> gaps;
    for (const auto& p : m.model_parameters())
        if (p.role == ParamRole::linear_weight) gaps[p.name] = std::abs(stddev(p.tensor.detach()).item() - sigma_t);
    return gaps;
}

Outcome training_directions() {
    Outcome o;
    const std::vector<std::string> ladder{"fp16", "w8a8", "w4a4", "w2a2", "w1a1"};
    std::map<std::string, std::vector<double>> metric;     // distill-trained BiT-LA, per precision
    std::map<std::string, std::vector<double>> mse_kd, mse_task;
    std::map<double, std::map<std::string, std::vector<double>>> gaps; // lambda_q -> layer -> per seed

    const auto toy = toy_run();
    const RunConfig base = run_config_from_json(toy.config);
    for (auto seed : toy.seeds) {
        const RunConfig rc = seeded_config(base, seed);
        const auto data = rc.dataset();
        const Model teacher = train_teacher(rc);

        for (const auto& p : ladder) {
            TrainConfig t = rc.train;
            t.loss = LossKind::distill;
            auto r = run_qat(&teacher, &teacher, rc.model, rc.scheme, rc.scope, parse_schedule(p), t, data,
                             rc.eval_samples);
            metric[p].push_back(r.log.final_metrics.masked_pred_accuracy);
            mse_kd[p].push_back(r.log.final_metrics.distill_mse);
        }
        for (const std::string p : {"w2a2", "w1a1"}) {
            TrainConfig t = rc.train;
            t.loss = LossKind::task;
            auto r = run_qat(&teacher, &teacher, rc.model, rc.scheme, rc.scope, parse_schedule(p), t, data,
                             rc.eval_samples);
            mse_task[p].push_back(r.log.final_metrics.distill_mse);
        }
        for (double lambda : {toy.lambda_q, rc.train.lambda_q, 0.0}) {
            TrainConfig t = rc.train;
            t.loss = LossKind::task;
            t.lambda_q = lambda;
            auto r = run_qat(&teacher, nullptr, rc.model, Scheme::squashed, Scope::linear_only, parse_schedule("w2"),
                             t, data, rc.eval_samples);
            for (const auto& [name, gap] : stddev_gaps(r.student, t.sigma_t)) gaps[lambda][name].push_back(gap);
        }
    }

    std::string order = "medians";
    bool ordered = true;
    for (std::size_t i = 0; i < ladder.size(); ++i) {
        order += " " + ladder[i] + " " + fmt(median(metric[ladder[i]]), 3);
        if (i > 0) ordered = ordered && median(metric[ladder[i - 1]]) >= median(metric[ladder[i]]);
    }
    o.notes.push_back("(a) " + order);

    bool kd_better = true;
    std::string kd = "median MSE to teacher";
    for (const std::string p : {"w2a2", "w1a1"}) {
        const double a = median(mse_kd[p]), b = median(mse_task[p]);
        kd_better = kd_better && a < b;
        kd += " " + p + " distill " + fmt(a) + " vs task " + fmt(b);
    }
    o.notes.push_back("(b) " + kd);

    // layers where the median gap with regularization is below the lambda_q = 0 control
    auto compare = [&](double lambda) {
        std::size_t better = 0;
        double worst = std::numeric_limits<double>::infinity();
        for (const auto& [name, g] : gaps.at(lambda)) {
            const double margin = median(gaps.at(0.0).at(name)) - median(g);
            better += margin > 0.0;
            worst = std::min(worst, margin);
        }
        o.notes.push_back("(c) lambda_q " + sci(lambda) + ": median |stddev(W) - sigma_t| smaller on " +
                          std::to_string(better) + "/" + std::to_string(gaps.at(lambda).size()) +
                          " linear layers, smallest margin " + sci(worst));
        return better == gaps.at(lambda).size();
    };
    const bool reg_helps = compare(toy.lambda_q);
    compare(base.train.lambda_q);

    o.pass = ordered && kd_better && reg_helps;
    auto yn = [](bool b) { return b ? "holds" : "VIOLATED"; };
    o.detail = std::to_string(toy.seeds.size()) + " seeds: (a) ordering " + yn(ordered) + ", (b) distill beats task " + yn(kd_better) +
               ", (c) regularizer " + yn(reg_helps);
    return o;
}

// ---- 7: schedule parity sweep --------------------------------------------------

struct Cli {
    int code = 0;
    std::string out, err;
};

Cli cli(std::vector<std::string> args) {
    args.insert(args.begin(), "qbit");
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / "qbit_acceptance" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path write_config(const fs::path& dir, const json& cfg) {
    const auto path = dir / "config.json";
    std::ofstream(path) << cfg.dump(2);
    return path;
}

Outcome schedule_parity() {
    Outcome o;
    const auto dir = scratch("sweep");
    const auto toy = toy_run();
    const auto config = write_config(dir, toy.config);
    std::string seeds;
    for (auto s : toy.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
    auto r = cli({"sweep", config.string(), "--precisions", "w8a8,w4a4,w2a2,w1a1", "--seeds", seeds, "--loss", "distill", "--ladder",
                  "fp16>w8a8>w4a4>w2a2>w1a1", "--out", (dir / "out").string()});
    if (r.code != 0) {
        o.detail = "sweep exited with " + std::to_string(r.code) + ": " + r.err;
        return o;
    }

    std::map<std::string, std::map<std::string, std::vector<double>>> curves; // schedule -> precision -> metrics
    std::size_t failed = 0;
    std::istringstream csv(slurp(dir / "out" / "sweep.csv"));
    std::string line;
    std::getline(csv, line);
    while (std::getline(csv, line)) {
        std::vector<std::string> f;
        std::istringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() < 6 || f[5] != "ok") {
            ++failed;
            continue;
        }
        curves[f[2] == "one-step" ? "one-step" : "ladder"][f[0]].push_back(std::stod(f[3]));
    }

    bool complete = failed == 0 && curves.size() == 2;
    for (const auto& [schedule, by_precision] : curves) {
        std::string c = schedule + " curve:";
        for (const std::string p : {"w8a8", "w4a4", "w2a2", "w1a1"}) {
            const auto it = by_precision.find(p);
            complete = complete && it != by_precision.end() && it->second.size() == toy.seeds.size();
            if (it != by_precision.end()) c += " " + p + " " + fmt(median(it->second), 3);
        }
        o.notes.push_back(c);
    }
    o.pass = complete;
    if (complete) {
        const double one = median(curves["one-step"]["w1a1"]), lad = median(curves["ladder"]["w1a1"]);
        o.detail = "both curves emitted over " + std::to_string(toy.seeds.size()) + " seeds; w1a1 |one-step - ladder| = " + fmt(std::abs(one - lad), 4) +
                   " (one-step " + fmt(one, 3) + ", ladder " + fmt(lad, 3) + ")";
    } else {
        o.detail = "sweep incomplete: " + std::to_string(failed) + " failed cells, " + std::to_string(curves.size()) +
                   " curves";
    }
    return o;
}

// ---- 8: determinism ------------------------------------------------------------

// Every file under `root`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
    return files;
}

Outcome determinism() {
    Outcome o;
    const json cfg = {
        {"model", {{"layers", 2}, {"heads", 2}, {"dim", 8}, {"ffn_dim", 16}, {"seq_len", 8}, {"clusters", 4}}},
        {"trainer", {{"steps", 20}, {"batch_size", 2}, {"eval_samples", 8}, {"teacher_steps", 20}}}};

    std::vector<std::map<std::string, std::string>> runs;
    std::vector<std::string> stdouts;
    bool all_ok = true;
    for (int rep = 0; rep < 2; ++rep) {
        const auto dir = scratch("repeat");
        const auto config = write_config(dir, cfg);
        json squashed_cfg = cfg;
        squashed_cfg["quant"] = {{"scheme", "squashed"}, {"scope", "linear_only"}};
        const auto squashed = dir / "squashed.json";
        std::ofstream(squashed) << squashed_cfg.dump(2);
        const auto out = dir / "out";
        std::vector<Cli> results;
        results.push_back(cli({"train", config.string(), "--schedule", "fp16", "--out", (out / "teacher").string()}));
        results.push_back(cli({"train", config.string(), "--schedule", "fp16>w4a4>w1a1", "--loss", "distill",
                               "--teacher", (out / "teacher" / "checkpoint.qbit").string(), "--out",
                               (out / "student").string()}));
        results.push_back(cli({"train", squashed.string(), "--schedule", "w2", "--out", (out / "squashed").string()}));
        results.push_back(cli({"profile", config.string(), "--precision", "w2a2", "--format", "json"}));
        results.push_back(cli({"profile", (out / "student" / "checkpoint.qbit").string(), "--format", "csv"}));
        results.push_back(cli({"profile", "--fixture", table_path}));
        results.push_back(cli({"sweep", config.string(), "--precisions", "w2a2,w1a1", "--seeds", "0,1", "--ladder",
                               "fp16>w4a4>w2a2>w1a1", "--out", (out / "sweep").string()}));
        std::string joined;
        for (const auto& r : results) {
            all_ok = all_ok && r.code == 0;
            joined += r.out;
        }
        stdouts.push_back(joined);
        runs.push_back(tree(out));
    }
    std::size_t same = 0;
    for (const auto& [name, bytes] : runs[0]) {
        auto it = runs[1].find(name);
        if (it != runs[1].end() && it->second == bytes) ++same;
        else o.notes.push_back("differs: " + name);
    }
    const bool stdout_same = stdouts[0] == stdouts[1];
    o.pass = all_ok && !runs[0].empty() && same == runs[0].size() && runs[0].size() == runs[1].size() && stdout_same;
    o.detail = std::to_string(same) + "/" + std::to_string(runs[0].size()) +
               " output files byte-identical across repeats, stdout " + (stdout_same ? "identical" : "DIFFERS") +
               (all_ok ? "" : ", a command failed");
    return o;
}

struct Criterion {
    int id;
    const char* title;
    std::function<Outcome()> run;
    double time_limit_s = 0.0; // 0 means unbounded
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::vector<int> selected;
    app.add_option("--criterion", selected, "Criterion number(s) to run; all when omitted")->check(CLI::Range(1, 8));
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> criteria{
        {1, "table runtime", table_runtime, 1.0},
        {2, "table storage", table_storage, 1.0},
        {3, "QuantOPs closed form", quantops_closed_form},
        {4, "gradient correctness", gradients},
        {5, "quantizer invariants", quantizer_invariants},
        {6, "directional training properties", training_directions, 1800.0},
        {7, "schedule parity sweep", schedule_parity},
        {8, "determinism", determinism},
    };

    bool all = true;
    for (const auto& c : criteria) {
        if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (c.time_limit_s > 0.0 && secs > c.time_limit_s) {
            o.pass = false;
            o.detail += ", over the " + fmt(c.time_limit_s, 0) + " s limit";
        }
        for (const auto& n : o.notes) std::cout << "    " << n << '\n';
        std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << c.id << " (" << c.title << "): " << o.detail
                  << " [" << fmt(secs, 1) << " s]" << std::endl;
        all = all && o.pass;
    }
    return all ? 0 : 1;
}
