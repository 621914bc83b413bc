#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"
#include "distrib.hpp"
#include "evalpipe.hpp"
#include "fitness.hpp"
#include "orchestrator.hpp"

namespace kforge {

// One line of the per-task table: the final kernel of one run.
struct TaskRow {
    std::string task_id;
    std::string run_id;
    std::string profile;
    std::string candidate_id;
    EvalStatus status = EvalStatus::CompileFail;
    std::optional<double> runtime_ms;
    double baseline_ms = 0;
    std::optional<double> speedup;
    std::optional<double> violation_fraction;
    std::optional<double> max_nu;
    std::optional<double> cosine;
    double fitness = 0;

    bool operator==(const TaskRow&) const = default;
};

inline void to_json(json& j, const TaskRow& r) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    j = json{{"task_id", r.task_id},       {"run_id", r.run_id},         {"profile", r.profile},
             {"candidate_id", r.candidate_id}, {"status", to_string(r.status)}, {"runtime_ms", opt(r.runtime_ms)},
             {"baseline_ms", r.baseline_ms}, {"speedup", opt(r.speedup)}, {"violation_fraction", opt(r.violation_fraction)},
             {"max_nu", opt(r.max_nu)},     {"cosine", opt(r.cosine)},   {"fitness", r.fitness}};
}

struct Aggregate {
    std::size_t tasks = 0;
    double correct_rate = 0;
    double fast_1 = 0;
    double fast_2 = 0;
    std::optional<double> mean_speedup;  // over correct tasks
    std::optional<double> geomean_speedup;

    bool operator==(const Aggregate&) const = default;
};

inline void to_json(json& j, const Aggregate& a) {
    j = json{{"tasks", a.tasks},
             {"correct_rate", a.correct_rate},
             {"fast_1", a.fast_1},
             {"fast_2", a.fast_2},
             {"mean_speedup", a.mean_speedup ? json(*a.mean_speedup) : json(nullptr)},
             {"geomean_speedup", a.geomean_speedup ? json(*a.geomean_speedup) : json(nullptr)}};
}

inline TaskRow row_from_result(const std::string& task_id, const std::string& run_id, const std::string& profile,
                               const std::string& candidate_id, const EvaluationResult& res, double target_speedup) {
    TaskRow r;
    r.task_id = task_id;
    r.run_id = run_id;
    r.profile = profile;
    r.candidate_id = candidate_id;
    r.status = res.status;
    r.runtime_ms = res.runtime_ms;
    r.baseline_ms = res.baseline_ms;
    r.speedup = res.speedup;
    if (res.nu_stats) {
        r.violation_fraction = res.nu_stats->violation_fraction;
        r.max_nu = res.nu_stats->max_nu;
    }
    r.cosine = res.cosine_sim;
    r.fitness = compute_fitness(res, target_speedup);
    return r;
}

inline TaskRow row_from_report(const RunReport& rep) {
    if (!rep.final_kernel) {
        TaskRow r;
        r.task_id = rep.task_id;
        r.run_id = rep.run_id;
        r.profile = rep.hardware_profile_id;
        return r;
    }
    return row_from_result(rep.task_id, rep.run_id, rep.hardware_profile_id, rep.final_kernel->candidate_id,
                           rep.final_kernel->result, rep.target_speedup);
}

// The same row rebuilt from the raw evaluation record of the reported kernel.
// Migrated elites carry an "@" suffix and share their donor's evaluation.
inline TaskRow row_from_records(RecordStore& db, const RunReport& rep) {
    if (!rep.final_kernel) return row_from_report(rep);
    const std::string id = rep.final_kernel->candidate_id;
    const std::string source_id = id.substr(0, id.find('@'));
    const LoadedRun run = load_run(db, rep.run_id);
    for (std::size_t i = run.records.size(); i-- > 0;) {
        const RunRecord& r = run.records[i];
        if (r.kind == RecordKind::Evaluation && r.body.at("candidate_id") == source_id)
            return row_from_result(rep.task_id, rep.run_id, rep.hardware_profile_id, id,
                                   r.body.at("report").at("result").get<EvaluationResult>(), rep.target_speedup);
    }
    throw Error(ErrorCode::CorruptRecord, "no evaluation record for " + source_id + " in run " + rep.run_id);
}

// Incorrect and failed tasks count as speedup 0 for fast_p; means use correct tasks only.
inline Aggregate aggregate(const std::vector<TaskRow>& rows) {
    if (rows.empty()) throw Error(ErrorCode::EmptyInput, "no tasks to aggregate");
    Aggregate a;
    a.tasks = rows.size();
    std::vector<double> all, correct;
    for (const auto& r : rows) {
        const bool ok = r.status == EvalStatus::Correct && r.speedup;
        all.push_back(ok ? *r.speedup : 0.0);
        if (ok) correct.push_back(*r.speedup);
    }
    a.correct_rate = static_cast<double>(correct.size()) / static_cast<double>(rows.size());
    a.fast_1 = fast_p(all, 1.0);
    a.fast_2 = fast_p(all, 2.0);
    if (!correct.empty()) {
        a.mean_speedup = arithmetic_mean(correct);
        a.geomean_speedup = geometric_mean(correct);
    }
    return a;
}

namespace detail {

inline std::string fmt(const std::optional<double>& v, const char* f = "%.4f") {
    if (!v) return "-";
    char buf[64];
    std::snprintf(buf, sizeof buf, f, *v);
    return buf;
}

inline std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f %%", 100.0 * v);
    return buf;
}

inline std::string render_columns(const std::vector<std::vector<std::string>>& cells) {
    std::vector<std::size_t> w;
    for (const auto& row : cells)
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (w.size() <= i) w.push_back(0);
            w[i] = std::max(w[i], row[i].size());
        }
    std::string out;
    for (std::size_t r = 0; r < cells.size(); ++r) {
        std::string line;
        for (std::size_t i = 0; i < cells[r].size(); ++i) {
            const std::string& c = cells[r][i];
            const std::string pad(w[i] - c.size(), ' ');
            line += i == 0 ? c + pad : "  " + pad + c;
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out += line + "\n";
        if (r == 0) {
            std::size_t total = 0;
            for (std::size_t x : w) total += x + 2;
            out += std::string(total - 2, '-') + "\n";
        }
    }
    return out;
}

} // namespace detail

inline std::string format_table(const std::vector<TaskRow>& rows, const Aggregate& a) {
    std::vector<std::vector<std::string>> cells{
        {"task", "profile", "status", "runtime_ms", "baseline_ms", "speedup", "nu_viol", "nu_max", "cosine", "fitness"}};
    for (const auto& r : rows)
        cells.push_back({r.task_id, r.profile, to_string(r.status), detail::fmt(r.runtime_ms), detail::fmt(r.baseline_ms),
                         detail::fmt(r.speedup, "%.3f"), detail::fmt(r.violation_fraction, "%.4f"), detail::fmt(r.max_nu, "%.3g"),
                         detail::fmt(r.cosine, "%.6f"), detail::fmt(r.fitness, "%.4f")});
    std::string out = detail::render_columns(cells);
    out += "\n";
    out += detail::render_columns({{"n", "correct rate", "fast_1", "fast_2", "avg. speedup", "geom. speedup"},
                                   {std::to_string(a.tasks), detail::pct(a.correct_rate), detail::pct(a.fast_1),
                                    detail::pct(a.fast_2), detail::fmt(a.mean_speedup, "%.3f"),
                                    detail::fmt(a.geomean_speedup, "%.3f")}});
    return out;
}

inline json summary_json(const std::vector<TaskRow>& rows, const Aggregate& a) {
    return json{{"rows", rows}, {"aggregate", a}};
}

// Rows recomputed from evaluation records must match the stored report.
// Returns a description of each mismatch; empty means consistent.
inline std::vector<std::string> check_consistency(RecordStore& db, const std::vector<RunReport>& reports) {
    std::vector<std::string> problems;
    for (const auto& rep : reports) {
        try {
            const TaskRow stored = row_from_report(rep);
            const TaskRow replayed = row_from_records(db, rep);
            if (!(stored == replayed)) problems.push_back(rep.run_id + ": final kernel row differs from its evaluation record");
            if (rep.final_kernel && std::abs(stored.fitness - rep.final_kernel->fitness) > 1e-12)
                problems.push_back(rep.run_id + ": stored fitness does not match the recomputed fitness");
        } catch (const Error& e) {
            problems.push_back(rep.run_id + ": " + e.what());
        }
    }
    return problems;
}

// Max fitness over the remaining dimension, as rows of tab-separated values.
// Empty cells are written as "nan".
inline std::string heatmap_tsv(const json& archive_json, Dimension row_dim, Dimension col_dim) {
    const Archive a = Archive::from_json(archive_json);
    const int n = a.bins();
    std::vector<std::vector<double>> grid(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), NAN));
    for (const auto& [c, e] : a.cells()) {
        double& v = grid[static_cast<std::size_t>(c[index_of(row_dim)])][static_cast<std::size_t>(c[index_of(col_dim)])];
        if (std::isnan(v) || e.fitness > v) v = e.fitness;
    }
    std::string out = std::string(to_string(row_dim)) + "\\" + to_string(col_dim);
    for (int j = 0; j < n; ++j) out += "\t" + std::to_string(j);
    out += "\n";
    for (int i = 0; i < n; ++i) {
        out += std::to_string(i);
        for (int j = 0; j < n; ++j) {
            const double v = grid[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            char buf[32];
            if (std::isnan(v))
                std::snprintf(buf, sizeof buf, "nan");
            else
                std::snprintf(buf, sizeof buf, "%.4f", v);
            out += std::string("\t") + buf;
        }
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Crossover: kernels tuned on two hardware profiles, each timed on both.

struct CrossoverRow {
    std::string task_id;
    double a_on_a = 0, b_on_a = 0, hws_a = 0;  // t_A(k^A), t_A(k^B), t_A(k^B)/t_A(k^A)
    double a_on_b = 0, b_on_b = 0, hws_b = 0;  // t_B(k^A), t_B(k^B), t_B(k^A)/t_B(k^B)
};

struct HwsSummary {
    double hws_1 = 0, hws_1_5 = 0, mean = 0, geomean = 0;
};

inline HwsSummary summarize_hws(const std::vector<double>& hws) {
    return HwsSummary{hws_p(hws, 1.0), hws_p(hws, 1.5), arithmetic_mean(hws), geometric_mean(hws)};
}

// The task definition stored with a run.
inline TaskSpec task_of_run(RecordStore& db, const std::string& run_id) {
    if (!db.exists(run_id)) throw Error(ErrorCode::UnknownRun, run_id);
    const LoadedRun run = db.load(run_id, false);
    for (const auto& r : run.records)
        if (r.kind == RecordKind::Config && r.body.contains("task")) return r.body.at("task").get<TaskSpec>();
    throw Error(ErrorCode::UnknownRun, run_id + " has no task record");
}

// Runtime of a kernel on another hardware profile. A templated kernel keeps the
// configuration it selected on its home profile, so nothing is re-tuned.
inline double time_on_profile(EvalBackend& backend, TaskSpec task, const std::string& profile, const KernelSummary& k,
                              BaselineCache& cache, const EvalOptions& opt = {}) {
    task.hardware_profile_id = profile;
    const CompileResult built = backend.compile(k.source, task);
    if (!built.ok) throw Error(ErrorCode::Infrastructure, k.candidate_id + " no longer builds on " + profile + ": " + built.log);
    const Baseline base = get_baseline(backend, task, k.source, cache, opt);
    const EvalReport rep = evaluate_config(backend, built.artifact, task, base, k.result.config_used, opt);
    if (rep.result.status != EvalStatus::Correct)
        throw Error(ErrorCode::Infrastructure, k.candidate_id + " is not correct on " + profile + ": " + rep.result.log);
    return *rep.result.runtime_ms;
}

using KernelTimer = std::function<double(const std::string& task_id, const std::string& profile, const KernelSummary&)>;

// Pairs runs of the same task tuned on profile A and on profile B.
inline std::vector<CrossoverRow> crossover_rows(const std::vector<RunReport>& runs_a, const std::vector<RunReport>& runs_b,
                                                const KernelTimer& time_on) {
    std::map<std::string, const RunReport*> by_task;
    for (const auto& r : runs_b) by_task[r.task_id] = &r;
    std::vector<CrossoverRow> rows;
    for (const auto& a : runs_a) {
        auto it = by_task.find(a.task_id);
        if (it == by_task.end()) continue;
        const RunReport& b = *it->second;
        if (!a.final_kernel || !b.final_kernel) continue;
        if (a.final_kernel->result.status != EvalStatus::Correct || b.final_kernel->result.status != EvalStatus::Correct) continue;
        CrossoverRow row;
        row.task_id = a.task_id;
        row.a_on_a = time_on(a.task_id, a.hardware_profile_id, *a.final_kernel);
        row.b_on_a = time_on(a.task_id, a.hardware_profile_id, *b.final_kernel);
        row.a_on_b = time_on(a.task_id, b.hardware_profile_id, *a.final_kernel);
        row.b_on_b = time_on(a.task_id, b.hardware_profile_id, *b.final_kernel);
        row.hws_a = hardware_speedup(row.b_on_a, row.a_on_a);
        row.hws_b = hardware_speedup(row.a_on_b, row.b_on_b);
        rows.push_back(row);
    }
    if (rows.empty()) throw Error(ErrorCode::EmptyInput, "no task has a correct final kernel on both profiles");
    return rows;
}

inline std::string format_crossover(const std::vector<CrossoverRow>& rows, const std::string& profile_a, const std::string& profile_b) {
    std::vector<std::vector<std::string>> cells{{"task", "on " + profile_a + ": opt. " + profile_a, "opt. " + profile_b, "hws",
                                                 "on " + profile_b + ": opt. " + profile_a, "opt. " + profile_b, "hws"}};
    std::vector<double> ha, hb;
    for (const auto& r : rows) {
        cells.push_back({r.task_id, detail::fmt(r.a_on_a, "%.3f"), detail::fmt(r.b_on_a, "%.3f"), detail::fmt(r.hws_a, "%.3f"),
                         detail::fmt(r.a_on_b, "%.3f"), detail::fmt(r.b_on_b, "%.3f"), detail::fmt(r.hws_b, "%.3f")});
        ha.push_back(r.hws_a);
        hb.push_back(r.hws_b);
    }
    std::string out = detail::render_columns(cells) + "\n";
    const HwsSummary sa = summarize_hws(ha), sb = summarize_hws(hb);
    out += detail::render_columns({{"kernels", "hws_1", "hws_1.5", "avg. hws", "geom. hws"},
                                   {profile_a + "-optimized", detail::pct(sa.hws_1), detail::pct(sa.hws_1_5),
                                    detail::fmt(sa.mean, "%.3f"), detail::fmt(sa.geomean, "%.3f")},
                                   {profile_b + "-optimized", detail::pct(sb.hws_1), detail::pct(sb.hws_1_5),
                                    detail::fmt(sb.mean, "%.3f"), detail::fmt(sb.geomean, "%.3f")}});
    return out;
}

} // namespace kforge
