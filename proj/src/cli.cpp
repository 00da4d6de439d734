#include "qbit/cli.hpp"

#include "qbit/checkpoint.hpp"
#include "qbit/profiler.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#ifndef QBIT_CODE_HASH
#define QBIT_CODE_HASH "unknown"
#endif

namespace qbit {

namespace fs = std::filesystem;
using nlohmann::json;

std::string code_version() { return QBIT_CODE_HASH; }

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    auto number = [&](const std::string& s) -> std::uint64_t {
        if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); })) {
            throw ParameterError("invalid seed '" + s + "'");
        }
        return std::stoull(s);
    };
    if (const auto dots = text.find(".."); dots != std::string::npos) {
        const auto lo = number(text.substr(0, dots)), hi = number(text.substr(dots + 2));
        if (hi < lo) throw ParameterError("seed range '" + text + "' is empty");
        for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
    } else {
        std::stringstream ss(text);
        std::string part;
        while (std::getline(ss, part, ',')) {
            if (!part.empty()) seeds.push_back(number(part));
        }
    }
    if (seeds.empty()) throw ParameterError("seed list is empty");
    return seeds;
}

std::vector<std::string> parse_precision_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        if (part.empty()) continue;
        const auto s = parse_schedule(part);
        if (!s.one_step()) throw ParameterError("precision '" + part + "' must be a single stage");
        out.push_back(s.target().label());
    }
    if (out.empty()) throw ParameterError("precision list is empty");
    return out;
}

Schedule truncate_ladder(const Schedule& ladder, const std::string& precision) {
    Schedule out;
    for (const auto& st : ladder.stages) {
        out.stages.push_back(st);
        if (st.label() == precision) return out;
    }
    return {};
}

RunConfig seeded_config(const RunConfig& base, std::uint64_t seed) {
    RunConfig c = base;
    c.model.seed = seed;
    c.train.seed = seed;
    c.data_seed = seed;
    return c;
}

Model train_teacher(const RunConfig& cfg) {
    TrainConfig t = cfg.train;
    t.loss = LossKind::task;
    t.stage_steps.clear();
    if (cfg.teacher_steps) t.steps = cfg.teacher_steps;
    return run_qat(nullptr, nullptr, cfg.model, Scheme::none, cfg.scope, parse_schedule("fp16"), t, cfg.dataset(),
                   cfg.eval_samples)
        .student;
}

std::vector<SweepCell> run_sweep(const RunConfig& base, const SweepOptions& options) {
    if (options.seeds.empty()) throw ParameterError("sweep needs at least one seed");
    if (options.precisions.empty()) throw ParameterError("sweep needs at least one precision");
    std::vector<Schedule> ladders;
    for (const auto& l : options.ladders) ladders.push_back(parse_schedule(l));

    std::vector<SweepCell> cells;
    for (auto seed : options.seeds) {
        for (const auto& p : options.precisions) {
            SweepCell one;
            one.precision = p;
            one.seed = seed;
            one.schedule = "one-step";
            one.executed = parse_schedule(p);
            cells.push_back(one);
            for (std::size_t k = 0; k < ladders.size(); ++k) {
                Schedule prefix = truncate_ladder(ladders[k], p);
                if (prefix.stages.empty()) continue;
                // Students start from the fp16 teacher, so a leading fp16 rung is
                // the initialization itself.
                if (prefix.stages.size() > 1 && prefix.stages.front().full_precision) {
                    prefix.stages.erase(prefix.stages.begin());
                }
                SweepCell c = one;
                c.schedule = ladders[k].text();
                c.executed = prefix;
                cells.push_back(c);
            }
        }
    }

    const std::size_t threads = std::max<std::size_t>(1, options.threads);
    auto parallel = [threads](std::size_t n, auto&& fn) {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < std::min(threads, n); ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) fn(i);
            });
        }
        for (auto& th : pool) th.join();
    };

    std::vector<std::optional<Model>> teachers(options.seeds.size());
    std::vector<std::string> teacher_errors(options.seeds.size());
    parallel(options.seeds.size(), [&](std::size_t i) {
        try {
            teachers[i] = train_teacher(seeded_config(base, options.seeds[i]));
        } catch (const std::exception& e) {
            teacher_errors[i] = e.what();
        }
    });

    parallel(cells.size(), [&](std::size_t i) {
        auto& cell = cells[i];
        const auto seed_pos = static_cast<std::size_t>(
            std::find(options.seeds.begin(), options.seeds.end(), cell.seed) - options.seeds.begin());
        if (!teachers[seed_pos]) {
            cell.error = "teacher failed: " + teacher_errors[seed_pos];
            return;
        }
        try {
            const RunConfig cfg = seeded_config(base, cell.seed);
            const Model& teacher = *teachers[seed_pos];
            auto result = run_qat(&teacher, &teacher, cfg.model, cfg.scheme, cfg.scope, cell.executed, cfg.train,
                                  cfg.dataset(), cfg.eval_samples);
            cell.task_metric = result.log.final_metrics.masked_pred_accuracy;
            cell.distill_mse = result.log.final_metrics.distill_mse;
            cell.ok = true;
        } catch (const std::exception& e) {
            cell.error = e.what();
        }
    });
    return cells;
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
    std::ostringstream os;
    os << "precision,seed,schedule,task_metric,distill_mse,status\n";
    os << std::setprecision(17);
    for (const auto& c : cells) {
        os << c.precision << ',' << c.seed << ',' << c.schedule << ',';
        if (c.ok) {
            os << c.task_metric << ',' << c.distill_mse << ",ok\n";
        } else {
            std::string msg = c.error;
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            os << ",,failed: " << msg << '\n';
        }
    }
    return os.str();
}

namespace {

struct UsageError : Error {
    using Error::Error;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write '" + path.string() + "'");
    f << text;
    if (!f) throw Error("failed writing '" + path.string() + "'");
}

void prepare_out_dir(const fs::path& dir, bool no_clobber) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw Error("output path '" + dir.string() + "' is not a directory");
        if (no_clobber && !fs::is_empty(dir)) {
            throw Error("output directory '" + dir.string() + "' is not empty (--no-clobber)");
        }
    } else {
        fs::create_directories(dir);
    }
}

std::size_t worker_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("QBIT_THREADS")) {
        try {
            const auto cap = std::stoul(env);
            if (cap > 0) n = std::min<std::size_t>(n, cap);
        } catch (const std::exception&) {
            throw UsageError(std::string("QBIT_THREADS must be a positive integer, got '") + env + "'");
        }
    }
    return n;
}

json manifest(const std::string& command, const RunConfig& cfg, const json& outputs) {
    return {{"command", command},
            {"config", to_json(cfg)},
            {"seed", cfg.train.seed},
            {"code_version", code_version()},
            {"outputs", outputs}};
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string schedule;
    std::string loss;
    std::string teacher;
    std::string out;
    bool no_clobber = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    RunConfig cfg = load_run_config(a.config);
    if (!a.schedule.empty()) cfg.schedule = a.schedule;
    if (!a.loss.empty()) cfg.train.loss = loss_kind_from_string(a.loss);
    if (!a.teacher.empty()) cfg.teacher = a.teacher;
    const Schedule schedule = parse_schedule(cfg.schedule);

    std::optional<Model> teacher;
    if (cfg.train.loss == LossKind::distill) {
        if (cfg.teacher.empty()) throw Error("distillation needs a teacher checkpoint (--teacher)");
        if (!fs::exists(cfg.teacher)) throw Error("teacher checkpoint not found: " + cfg.teacher);
    }
    if (!cfg.teacher.empty()) {
        if (!fs::exists(cfg.teacher)) throw Error("teacher checkpoint not found: " + cfg.teacher);
        auto ck = load_checkpoint(cfg.teacher);
        if (to_json(ck.model.config()) != to_json(cfg.model)) {
            throw Error("teacher checkpoint '" + cfg.teacher + "' was trained with a different model config");
        }
        teacher = std::move(ck.model);
    }

    const fs::path dir = a.out;
    prepare_out_dir(dir, a.no_clobber);

    auto result = run_qat(teacher ? &*teacher : nullptr, teacher ? &*teacher : nullptr, cfg.model, cfg.scheme,
                          cfg.scope, schedule, cfg.train, cfg.dataset(), cfg.eval_samples);
    const QuantSpec final_spec = schedule.target().spec(cfg.scheme, cfg.scope);

    save_checkpoint((dir / "checkpoint.qbit").string(), result.student, final_spec);
    std::string lines;
    for (const auto& r : result.log.steps) lines += to_json(r).dump() + "\n";
    write_text(dir / "metrics.jsonl", lines);
    const json summary = {{"schedule", result.log.schedule},
                          {"scheme", result.log.scheme},
                          {"scope", result.log.scope},
                          {"loss", to_string(cfg.train.loss)},
                          {"final", to_json(result.log.final_metrics)},
                          {"final_loss", result.log.steps.empty() ? 0.0 : result.log.steps.back().loss}};
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    write_text(dir / "manifest.json",
               manifest("train", cfg,
                        {{"checkpoint", "checkpoint.qbit"}, {"metrics", "metrics.jsonl"}, {"summary", "summary.json"}})
                       .dump(2) +
                   "\n");

    out << "trained " << schedule.text() << " (" << to_string(cfg.train.loss) << ") -> " << dir.string()
        << ": accuracy " << result.log.final_metrics.masked_pred_accuracy << ", distill_mse "
        << result.log.final_metrics.distill_mse << "\n";
    return 0;
}

// ---- profile ----------------------------------------------------------------

struct ProfileArgs {
    std::string input;
    std::string fixture;
    std::string format = "json";
    std::string precision;
};

int cmd_profile(const ProfileArgs& a, std::ostream& out, std::ostream& err) {
    std::optional<CostReport> report;
    if (!a.input.empty()) {
        if (!fs::exists(a.input)) throw Error("input not found: " + a.input);
        TransformerConfig mcfg;
        QuantSpec spec;
        std::optional<Model> model;
        if (is_checkpoint_file(a.input)) {
            auto ck = load_checkpoint(a.input);
            mcfg = ck.model.config();
            spec = ck.spec;
            if (!a.precision.empty()) {
                const auto sch = spec.scheme == Scheme::none ? Scheme::elastic : spec.scheme;
                spec = parse_schedule(a.precision).target().spec(sch, spec.scope);
            }
            model = std::move(ck.model);
        } else {
            const auto cfg = load_run_config(a.input);
            mcfg = cfg.model;
            const auto sched = parse_schedule(a.precision.empty() ? cfg.schedule : a.precision);
            spec = sched.target().spec(cfg.scheme, cfg.scope);
        }
        report = profile(mcfg, spec);
        // A checkpoint at its own precision knows its exact quantizer census.
        if (model && a.precision.empty()) report->storage_bytes = count_storage(*model, spec);
        const auto baseline = profile(mcfg, QuantSpec::full_precision());
        const auto anchor_model = profile(mcfg, QuantSpec::squashed(8));
        const auto anchor = calibrate_anchor(static_cast<double>(baseline.flops), static_cast<double>(anchor_model.flops),
                                             static_cast<double>(anchor_model.quantops_bits));
        report->runtime_rel = estimate_runtime(static_cast<double>(report->flops),
                                               static_cast<double>(report->quantops_bits),
                                               static_cast<double>(baseline.flops), anchor);
    }

    std::optional<FixtureReport> fixture;
    if (!a.fixture.empty()) fixture = validate_table_fixture(a.fixture);

    if (a.format == "json") {
        json j = json::object();
        if (report) {
            j["storage_bytes"] = report->storage_bytes;
            j["flops"] = report->flops;
            j["quantops_bits"] = report->quantops_bits;
            j["runtime_rel"] = *report->runtime_rel;
        }
        if (fixture) {
            json rows = json::array();
            for (const auto& r : fixture->rows) {
                json row = {{"name", r.name},
                            {"runtime_printed", r.runtime_printed},
                            {"runtime_computed", r.runtime_computed},
                            {"runtime_ok", r.runtime_ok},
                            {"storage_ok", r.storage_ok},
                            {"pass", r.pass()}};
                if (r.storage_computed) row["storage_computed"] = *r.storage_computed;
                rows.push_back(row);
            }
            j["fixture"] = {{"anchor", {{"flops_equiv", fixture->anchor.flops_equiv},
                                        {"quantops", fixture->anchor.quantops},
                                        {"rate", fixture->anchor.rate()}}},
                            {"rows", rows},
                            {"passed", fixture->passed()},
                            {"total", fixture->rows.size()}};
        }
        out << j.dump(2) << "\n";
    } else {
        out << std::setprecision(10);
        if (report) {
            out << "storage_bytes,flops,quantops_bits,runtime_rel\n"
                << report->storage_bytes << ',' << report->flops << ',' << report->quantops_bits << ','
                << *report->runtime_rel << "\n";
        }
        if (fixture) {
            if (report) out << "\n";
            out << "name,runtime_printed,runtime_computed,runtime_ok,storage_computed,storage_ok,pass\n";
            for (const auto& r : fixture->rows) {
                out << r.name << ',' << r.runtime_printed << ',' << std::fixed << std::setprecision(4)
                    << r.runtime_computed << std::defaultfloat << std::setprecision(10) << ','
                    << (r.runtime_ok ? "true" : "false") << ',';
                if (r.storage_computed) out << std::fixed << std::setprecision(3) << *r.storage_computed
                                            << std::defaultfloat << std::setprecision(10);
                out << ',' << (r.storage_ok ? "true" : "false") << ',' << (r.pass() ? "pass" : "FAIL") << "\n";
            }
        }
    }
    if (fixture && !fixture->all_pass()) {
        err << "fixture check failed: " << fixture->passed() << "/" << fixture->rows.size() << " rows pass\n";
        return 1;
    }
    return 0;
}

// ---- sweep ------------------------------------------------------------------

struct SweepArgs {
    std::string config;
    std::string precisions;
    std::string seeds;
    std::vector<std::string> ladders;
    std::string loss;
    std::string out;
    bool no_clobber = false;
};

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
    RunConfig cfg = load_run_config(a.config);
    if (!a.loss.empty()) cfg.train.loss = loss_kind_from_string(a.loss);
    SweepOptions opts;
    try {
        opts.seeds = parse_seed_list(a.seeds);
        opts.precisions = parse_precision_list(a.precisions);
        for (const auto& l : a.ladders) parse_schedule(l);
    } catch (const ParameterError& e) {
        throw UsageError(e.what());
    }
    opts.ladders = a.ladders;
    opts.threads = worker_threads();

    const fs::path dir = a.out;
    prepare_out_dir(dir, a.no_clobber);
    const auto cells = run_sweep(cfg, opts);
    write_text(dir / "sweep.csv", sweep_csv(cells));

    // Median task metric per (schedule, precision) for plotting and the
    // one-step vs ladder comparison.
    std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
    std::size_t failed = 0;
    for (const auto& c : cells) {
        if (c.ok) groups[{c.schedule, c.precision}].push_back(c.task_metric);
        else ++failed;
    }
    json medians = json::array();
    for (const auto& [key, values] : groups) {
        medians.push_back({{"schedule", key.first}, {"precision", key.second}, {"median_task_metric", median(values)},
                           {"cells", values.size()}});
    }
    json gaps = json::array();
    for (const auto& l : opts.ladders) {
        const auto text = parse_schedule(l).text();
        for (const auto& p : opts.precisions) {
            auto one = groups.find({"one-step", p});
            auto lad = groups.find({text, p});
            if (one == groups.end() || lad == groups.end()) continue;
            gaps.push_back({{"ladder", text}, {"precision", p},
                            {"median_gap", std::abs(median(one->second) - median(lad->second))}});
        }
    }
    write_text(dir / "sweep_summary.json", json{{"medians", medians}, {"schedule_gaps", gaps}}.dump(2) + "\n");
    write_text(dir / "manifest.json",
               manifest("sweep", cfg, {{"sweep", "sweep.csv"}, {"summary", "sweep_summary.json"}}).dump(2) + "\n");

    out << "sweep: " << cells.size() << " cells, " << failed << " failed -> " << (dir / "sweep.csv").string() << "\n";
    for (const auto& g : gaps) {
        out << "  |median(one-step) - median(" << g["ladder"].get<std::string>() << ")| at "
            << g["precision"].get<std::string>() << " = " << g["median_gap"].get<double>() << "\n";
    }
    if (failed) {
        err << failed << " sweep cell(s) failed; see sweep.csv\n";
        return 1;
    }
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Quantization-aware training lab: train, profile, sweep", "qbit"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train a model under a precision schedule");
    train->add_option("config", ta.config, "Run config (JSON)")->required();
    train->add_option("--schedule", ta.schedule, "Precision ladder, e.g. \"fp16>w1a2>w1a1\"");
    train->add_option("--loss", ta.loss, "task | distill")->check(CLI::IsMember({"task", "distill"}));
    train->add_option("--teacher", ta.teacher, "Teacher checkpoint (required for --loss distill)");
    train->add_option("--out", ta.out, "Output directory")->required();
    train->add_flag("--no-clobber", ta.no_clobber, "Refuse to write into a non-empty output directory");

    ProfileArgs pa;
    auto* prof = app.add_subcommand("profile", "Storage / FLOPs / QuantOPs / runtime estimate");
    prof->add_option("input", pa.input, "Checkpoint or run config");
    prof->add_option("--fixture", pa.fixture, "Published-table CSV to validate");
    prof->add_option("--format", pa.format, "csv | json")->check(CLI::IsMember({"csv", "json"}));
    prof->add_option("--precision", pa.precision, "Override precision, e.g. w1a1");

    SweepArgs sa;
    auto* sweep = app.add_subcommand("sweep", "Precision x seed grid, one-step vs ladder schedules");
    sweep->add_option("config", sa.config, "Run config (JSON)")->required();
    sweep->add_option("--precisions", sa.precisions, "Comma-separated, e.g. w8a8,w4a4,w2a2,w1a1")->required();
    sweep->add_option("--seeds", sa.seeds, "\"0..4\" or \"0,1,2\"")->required();
    sweep->add_option("--ladder", sa.ladders, "Ladder schedule compared against one-step (repeatable)");
    sweep->add_option("--loss", sa.loss, "task | distill")->check(CLI::IsMember({"task", "distill"}));
    sweep->add_option("--out", sa.out, "Output directory")->required();
    sweep->add_flag("--no-clobber", sa.no_clobber, "Refuse to write into a non-empty output directory");

    std::vector<std::string> storage(args.begin(), args.end());
    if (storage.empty()) storage.emplace_back("qbit");
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? 0 : 2;
    }

    try {
        if (train->parsed()) return cmd_train(ta, out);
        if (prof->parsed()) {
            if (pa.input.empty() && pa.fixture.empty()) throw UsageError("profile needs an input or --fixture");
            return cmd_profile(pa, out, err);
        }
        if (sweep->parsed()) return cmd_sweep(sa, out, err);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

} // namespace qbit
