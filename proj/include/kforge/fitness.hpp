#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"

namespace kforge {

enum class EvalStatus { CompileFail, Incorrect, Correct };

inline const char* to_string(EvalStatus s) {
    switch (s) {
        case EvalStatus::CompileFail: return "CompileFail";
        case EvalStatus::Incorrect: return "Incorrect";
        case EvalStatus::Correct: return "Correct";
    }
    return "?";
}

inline EvalStatus parse_eval_status(const std::string& s) {
    if (s == "CompileFail") return EvalStatus::CompileFail;
    if (s == "Incorrect") return EvalStatus::Incorrect;
    if (s == "Correct") return EvalStatus::Correct;
    throw Error(ErrorCode::MalformedMessage, "unknown status '" + s + "'");
}

struct NuStats {
    double violation_fraction = 0.0;
    double max_nu = 0.0;

    bool operator==(const NuStats&) const = default;
};

struct EvaluationResult {
    EvalStatus status = EvalStatus::CompileFail;
    std::optional<double> runtime_ms;
    double baseline_ms = 0.0;
    std::optional<double> speedup;
    std::optional<NuStats> nu_stats;
    std::optional<double> cosine_sim;
    std::string log;
    std::optional<std::vector<long long>> config_used;

    bool operator==(const EvaluationResult&) const = default;
};

inline void to_json(json& j, const EvaluationResult& r) {
    j = json{{"status", to_string(r.status)}, {"baseline_ms", r.baseline_ms}, {"log", r.log}};
    j["runtime_ms"] = r.runtime_ms ? json(*r.runtime_ms) : json(nullptr);
    j["speedup"] = r.speedup ? json(*r.speedup) : json(nullptr);
    j["nu_stats"] = r.nu_stats ? json{{"violation_fraction", r.nu_stats->violation_fraction}, {"max_nu", r.nu_stats->max_nu}}
                               : json(nullptr);
    j["cosine_sim"] = r.cosine_sim ? json(*r.cosine_sim) : json(nullptr);
    j["config_used"] = r.config_used ? json(*r.config_used) : json(nullptr);
}

inline void from_json(const json& j, EvaluationResult& r) {
    r.status = parse_eval_status(j.at("status").get<std::string>());
    r.baseline_ms = j.at("baseline_ms").get<double>();
    r.log = j.value("log", std::string());
    auto opt = [&](const char* k) -> std::optional<double> {
        if (!j.contains(k) || j[k].is_null()) return std::nullopt;
        return j[k].get<double>();
    };
    r.runtime_ms = opt("runtime_ms");
    r.speedup = opt("speedup");
    r.cosine_sim = opt("cosine_sim");
    if (j.contains("nu_stats") && !j["nu_stats"].is_null())
        r.nu_stats = NuStats{j["nu_stats"].at("violation_fraction").get<double>(), j["nu_stats"].at("max_nu").get<double>()};
    else
        r.nu_stats.reset();
    if (j.contains("config_used") && !j["config_used"].is_null())
        r.config_used = j["config_used"].get<std::vector<long long>>();
    else
        r.config_used.reset();
}

/// 0 for compile failures, 0.1 for wrong answers, and 0.5..1 for correct kernels
/// scaled by speedup relative to the target.
inline double compute_fitness(const EvaluationResult& res, double target_speedup) {
    if (!(target_speedup > 0.0)) throw Error(ErrorCode::InvalidConfig, "target speedup must be positive");
    switch (res.status) {
        case EvalStatus::CompileFail: return 0.0;
        case EvalStatus::Incorrect: return 0.1;
        case EvalStatus::Correct:
            if (!res.speedup) throw Error(ErrorCode::MissingSpeedup, "correct result without speedup");
            return 0.5 + 0.5 * std::min(1.0, std::max(0.0, *res.speedup) / target_speedup);
    }
    return 0.0;
}

struct NumericArray {
    std::vector<std::size_t> shape;
    std::vector<double> values;

    static NumericArray vector(std::vector<double> v) {
        NumericArray a;
        a.shape = {v.size()};
        a.values = std::move(v);
        return a;
    }

    bool operator==(const NumericArray&) const = default;
};

struct CorrectnessVerdict {
    bool pass = false;
    NuStats stats;
};

inline CorrectnessVerdict check_correctness(const NumericArray& expected, const NumericArray& actual, double rel_tol = 0.01,
                                            double pass_fraction = 0.99, double eps = 1e-6) {
    if (expected.shape != actual.shape || expected.values.size() != actual.values.size())
        throw Error(ErrorCode::ShapeMismatch, "expected and actual shapes differ");
    if (!(eps > 0.0)) throw Error(ErrorCode::InvalidConfig, "epsilon must be positive");
    const std::size_t n = expected.values.size();
    if (n == 0) return {true, {}};
    std::size_t within = 0;
    double max_nu = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double y = expected.values[i];
        double nu = std::abs(y - actual.values[i]) / (std::abs(y) + eps);
        if (std::isnan(nu)) nu = std::numeric_limits<double>::infinity();
        if (nu < rel_tol) ++within;
        max_nu = std::max(max_nu, nu);
    }
    const double ok_fraction = static_cast<double>(within) / static_cast<double>(n);
    return {ok_fraction >= pass_fraction, {static_cast<double>(n - within) / static_cast<double>(n), max_nu}};
}

inline double cosine_similarity(const NumericArray& expected, const NumericArray& actual) {
    if (expected.shape != actual.shape || expected.values.size() != actual.values.size())
        throw Error(ErrorCode::ShapeMismatch, "expected and actual shapes differ");
    double dot = 0.0, ne = 0.0, na = 0.0;
    for (std::size_t i = 0; i < expected.values.size(); ++i) {
        dot += expected.values[i] * actual.values[i];
        ne += expected.values[i] * expected.values[i];
        na += actual.values[i] * actual.values[i];
    }
    if (ne == 0.0 || na == 0.0) throw Error(ErrorCode::ZeroVector, "cosine similarity of a zero vector");
    return std::clamp(dot / (std::sqrt(ne) * std::sqrt(na)), -1.0, 1.0);
}

/// Fraction of entries strictly greater than p.
inline double fast_p(const std::vector<double>& speedups, double p) {
    if (speedups.empty()) throw Error(ErrorCode::EmptyInput, "fast_p of an empty list");
    const auto hits = std::count_if(speedups.begin(), speedups.end(), [p](double s) { return s > p; });
    return static_cast<double>(hits) / static_cast<double>(speedups.size());
}

/// Speedup on hardware A of A's own kernel over the kernel tuned for hardware B.
inline double hardware_speedup(double t_A_of_kB, double t_A_of_kA) {
    if (!(t_A_of_kB > 0.0) || !(t_A_of_kA > 0.0)) throw Error(ErrorCode::NonPositiveTime, "times must be positive");
    return t_A_of_kB / t_A_of_kA;
}

inline double hws_p(const std::vector<double>& hws, double p) { return fast_p(hws, p); }

inline double arithmetic_mean(const std::vector<double>& xs) {
    if (xs.empty()) throw Error(ErrorCode::EmptyInput, "mean of an empty list");
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

inline double geometric_mean(const std::vector<double>& xs) {
    if (xs.empty()) throw Error(ErrorCode::EmptyInput, "mean of an empty list");
    double s = 0.0;
    for (double x : xs) {
        if (!(x > 0.0)) throw Error(ErrorCode::NonPositiveTime, "geometric mean needs positive values");
        s += std::log(x);
    }
    return std::exp(s / static_cast<double>(xs.size()));
}

} // namespace kforge
