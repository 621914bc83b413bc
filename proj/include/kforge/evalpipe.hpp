#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "classifier.hpp"
#include "common.hpp"
#include "fitness.hpp"
#include "taskspec.hpp"

namespace kforge {

// ---------------------------------------------------------------------------
// Benchmark schedule

struct BenchSchedule {
    int warmup_iters = 10;
    int main_iters = 10;
    int inner_loop = 1;

    bool operator==(const BenchSchedule&) const = default;

    bool valid(const BenchConstraints& c) const {
        return warmup_iters >= c.min_warmup_iters && main_iters >= c.min_main_iters && inner_loop >= 1 &&
               main_iters % inner_loop == 0;
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BenchSchedule, warmup_iters, main_iters, inner_loop)

namespace detail {

// ceil that forgives representation error, so 1.0 / 0.0005 counts as 2000.
inline long long ceil_tolerant(double x) {
    const double c = std::ceil(x);
    if (c - x > 1.0 - 1e-9 * std::max(1.0, std::abs(x))) return static_cast<long long>(c) - 1;
    return static_cast<long long>(c);
}

inline int clamp_iters(long long v) { return static_cast<int>(std::min<long long>(v, 1'000'000'000LL)); }

} // namespace detail

inline BenchSchedule plan_schedule(double initial_iter_time_s, const BenchConstraints& c) {
    if (!(initial_iter_time_s > 0.0) || !std::isfinite(initial_iter_time_s))
        throw Error(ErrorCode::NonPositiveTime, "initial iteration time must be positive");
    const double t = initial_iter_time_s;
    BenchSchedule s;
    s.warmup_iters = detail::clamp_iters(std::max<long long>(c.min_warmup_iters, detail::ceil_tolerant(c.min_warmup_time_s / t)));
    s.inner_loop = detail::clamp_iters(std::max<long long>(1, detail::ceil_tolerant(c.inner_loop_min_time_s / t)));
    long long main = std::max<long long>(c.min_main_iters, detail::ceil_tolerant(c.min_main_time_s / t));
    main = (main + s.inner_loop - 1) / s.inner_loop * s.inner_loop;
    s.main_iters = detail::clamp_iters(main);
    return s;
}

// ---------------------------------------------------------------------------
// Backend contract

struct Artifact {
    std::string id;
    json data;  // backend-specific handle; must survive a JSON round trip

    bool operator==(const Artifact&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Artifact, id, data)

struct CompileResult {
    bool ok = false;
    std::string log;
    Artifact artifact;

    bool operator==(const CompileResult&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CompileResult, ok, log, artifact)

struct ExecuteRequest {
    std::optional<std::vector<long long>> config;
    int warmup_iters = 0;
    int main_iters = 1;
    int inner_loop = 1;
    bool want_outputs = false;
};

inline void to_json(json& j, const ExecuteRequest& r) {
    j = json{{"config", r.config ? json(*r.config) : json(nullptr)},
             {"warmup_iters", r.warmup_iters},
             {"main_iters", r.main_iters},
             {"inner_loop", r.inner_loop},
             {"want_outputs", r.want_outputs}};
}

inline void from_json(const json& j, ExecuteRequest& r) {
    r.config = j.at("config").is_null() ? std::nullopt
                                        : std::optional<std::vector<long long>>(j["config"].get<std::vector<long long>>());
    r.warmup_iters = j.at("warmup_iters").get<int>();
    r.main_iters = j.at("main_iters").get<int>();
    r.inner_loop = j.at("inner_loop").get<int>();
    r.want_outputs = j.at("want_outputs").get<bool>();
}

struct ExecuteResult {
    bool ok = false;
    std::string log;
    std::optional<NumericArray> outputs;
    std::vector<double> chunk_ms;  // wall time of each synchronized chunk
    bool compile_error = false;    // this instantiation failed to build
};

inline void to_json(json& j, const ExecuteResult& r) {
    j = json{{"ok", r.ok}, {"log", r.log}, {"chunk_ms", r.chunk_ms}, {"compile_error", r.compile_error}};
    j["outputs"] = r.outputs ? json{{"shape", r.outputs->shape}, {"values", r.outputs->values}} : json(nullptr);
}

inline void from_json(const json& j, ExecuteResult& r) {
    r.ok = j.at("ok").get<bool>();
    r.log = j.value("log", std::string());
    r.chunk_ms = j.value("chunk_ms", std::vector<double>{});
    r.compile_error = j.value("compile_error", false);
    if (j.contains("outputs") && !j["outputs"].is_null()) {
        NumericArray a;
        a.shape = j["outputs"].at("shape").get<std::vector<std::size_t>>();
        a.values = j["outputs"].at("values").get<std::vector<double>>();
        r.outputs = std::move(a);
    }
}

class EvalBackend {
public:
    virtual ~EvalBackend() = default;
    virtual std::string name() const = 0;
    virtual std::set<Language> capabilities() const = 0;
    virtual bool deterministic() const { return false; }
    virtual CompileResult compile(const std::string& source, const TaskSpec& task) = 0;
    // `candidate_source` lets a backend derive a reference stand-in; real backends ignore it.
    virtual CompileResult compile_reference(const TaskSpec& task, const std::string& candidate_source) = 0;
    virtual ExecuteResult execute(const Artifact& artifact, const TaskSpec& task, const ExecuteRequest& req) = 0;
};

// ---------------------------------------------------------------------------
// Mock backend. Sources carry directive lines such as
//   // KF-MOCK: compile=ok correct=0.98 time_ms=0.9 base_ms=1.2 sync_ms=0.05 first_iter_mult=10
//   // KF-MOCK[32,8]: time_ms=0.9
// A key may be suffixed with @<hardware profile> to apply only on that profile.

struct MockDirectives {
    std::map<std::string, std::string> base;
    std::map<std::string, std::map<std::string, std::string>> per_config;  // "32,8" -> fields
    bool present = false;
};

inline MockDirectives parse_mock_directives(const std::string& source) {
    MockDirectives d;
    static const std::regex line_re(R"(KF-MOCK(?:\[([-0-9,\s]+)\])?:(.*))");
    static const std::regex kv_re(R"(([A-Za-z_]+(?:@[A-Za-z0-9_.-]+)?)=([^\s]+))");
    std::istringstream in(source);
    for (std::string line; std::getline(in, line);) {
        std::smatch m;
        if (!std::regex_search(line, m, line_re)) continue;
        d.present = true;
        std::string key;
        if (m[1].matched)
            for (char ch : m[1].str())
                if (!std::isspace(static_cast<unsigned char>(ch))) key.push_back(ch);
        auto& target = key.empty() ? d.base : d.per_config[key];
        const std::string rest = m[2].str();
        for (auto it = std::sregex_iterator(rest.begin(), rest.end(), kv_re); it != std::sregex_iterator(); ++it)
            target[(*it)[1].str()] = (*it)[2].str();
    }
    return d;
}

inline void to_json(json& j, const MockDirectives& d) { j = json{{"base", d.base}, {"per_config", d.per_config}}; }

inline void from_json(const json& j, MockDirectives& d) {
    d.base = j.at("base").get<std::map<std::string, std::string>>();
    d.per_config = j.at("per_config").get<std::map<std::string, std::map<std::string, std::string>>>();
    d.present = true;
}

// Planted outputs: 1000 values 1 + (i mod 7) / 4; a (1 - correct) share is scaled by 1.5.
inline NumericArray mock_outputs(double correct_fraction, std::size_t n = 1000) {
    NumericArray a;
    a.shape = {n};
    a.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) a.values[i] = 1.0 + 0.25 * static_cast<double>(i % 7);
    const double bad_share = std::clamp(1.0 - correct_fraction, 0.0, 1.0);
    const auto bad = static_cast<std::size_t>(std::llround(bad_share * static_cast<double>(n)));
    if (bad > 0) {
        const std::size_t stride = n / bad;
        for (std::size_t k = 0; k < bad; ++k) a.values[k * stride] *= 1.5;
    }
    return a;
}

class MockEvalBackend : public EvalBackend {
public:
    std::string name() const override { return "mock"; }
    std::set<Language> capabilities() const override { return {Language::SYCL, Language::CUDA, Language::TRITON}; }
    bool deterministic() const override { return true; }

    CompileResult compile(const std::string& source, const TaskSpec& task) override {
        CompileResult r;
        const MockDirectives d = parse_mock_directives(source);
        const std::string file = task.language == Language::TRITON ? "kernel.py" : (task.language == Language::CUDA ? "kernel.cu" : "kernel.cpp");
        if (!d.present) {
            r.log = file + ": error: mock backend found no KF-MOCK directive in the source";
            return r;
        }
        auto it = d.base.find("compile");
        if (it != d.base.end() && it->second != "ok") {
            r.log = file + ":1:1: error: mock compiler rejected this kernel (compile=" + it->second + ")";
            return r;
        }
        r.ok = true;
        r.artifact.id = "mock-" + sha256_hex(source).substr(0, 16);
        r.artifact.data = json{{"kind", "candidate"}, {"directives", d}};
        r.log = "mock compile ok: " + r.artifact.id;
        return r;
    }

    CompileResult compile_reference(const TaskSpec& task, const std::string& candidate_source) override {
        MockDirectives ref = parse_mock_directives(task.reference_code);
        if (!ref.present || !ref.base.count("time_ms")) {
            // No timing on the reference: fall back to the candidate's base_ms, then 1 ms.
            const MockDirectives cand = parse_mock_directives(candidate_source);
            auto it = cand.base.find("base_ms");
            ref.base["time_ms"] = it != cand.base.end() ? it->second : "1.0";
            ref.present = true;
        }
        ref.base["correct"] = "1.0";
        CompileResult r;
        r.ok = true;
        r.artifact.id = "mock-ref-" + sha256_hex(json(ref).dump()).substr(0, 16);
        r.artifact.data = json{{"kind", "reference"}, {"directives", ref}};
        r.log = "mock reference ok";
        return r;
    }

    ExecuteResult execute(const Artifact& artifact, const TaskSpec& task, const ExecuteRequest& req) override {
        ExecuteResult r;
        if (!artifact.data.contains("directives")) {
            r.log = "mock execute: not a mock artifact";
            return r;
        }
        const MockDirectives d = artifact.data["directives"].get<MockDirectives>();
        std::map<std::string, std::string> f = d.base;
        if (req.config) {
            std::string key;
            for (std::size_t i = 0; i < req.config->size(); ++i) key += (i ? "," : "") + std::to_string((*req.config)[i]);
            auto it = d.per_config.find(key);
            if (it != d.per_config.end())
                for (const auto& [k, v] : it->second) f[k] = v;
        }
        auto num = [&](const std::string& key, double dflt) {
            auto it = f.find(key + "@" + task.hardware_profile_id);
            if (it == f.end()) it = f.find(key);
            if (it == f.end()) return dflt;
            try {
                return std::stod(it->second);
            } catch (const std::exception&) {
                return dflt;
            }
        };
        if (f.count("compile") && f["compile"] != "ok") {
            r.compile_error = true;
            r.log = "mock compiler: this instantiation failed to build (compile=" + f["compile"] + ")";
            return r;
        }
        if (f.count("run") && f["run"] != "ok") {
            r.log = "mock runtime error: kernel aborted (run=" + f["run"] + ")";
            return r;
        }
        const double time_ms = num("time_ms", 1.0);
        const double sync_ms = num("sync_ms", 0.0);
        const double first_mult = num("first_iter_mult", 1.0);
        if (req.want_outputs) r.outputs = mock_outputs(num("correct", 1.0));
        // The first iteration of every call pays `first_iter_mult`; warmup absorbs it when present.
        double pending_spike = (first_mult - 1.0) * time_ms;
        if (req.warmup_iters > 0) pending_spike = 0.0;
        const int inner = std::max(1, req.inner_loop);
        for (int done = 0; done < req.main_iters; done += inner) {
            const int n = std::min(inner, req.main_iters - done);
            r.chunk_ms.push_back(n * time_ms + sync_ms + pending_spike);
            pending_spike = 0.0;
        }
        r.ok = true;
        return r;
    }
};

// ---------------------------------------------------------------------------
// External adapter. Runs `<command> <op> <request.json>` and reads one JSON
// object from stdout. Ops: compile, compile_reference, execute.

class ExternalBackend : public EvalBackend {
public:
    ExternalBackend(std::string command, std::set<Language> langs = {Language::SYCL, Language::CUDA, Language::TRITON},
                    std::filesystem::path work_dir = std::filesystem::temp_directory_path())
        : command_(std::move(command)), langs_(std::move(langs)), work_dir_(std::move(work_dir)) {}

    std::string name() const override { return "external:" + command_; }
    std::set<Language> capabilities() const override { return langs_; }

    CompileResult compile(const std::string& source, const TaskSpec& task) override {
        json reply;
        if (!call("compile", json{{"source", source}, {"task", task}}, reply)) return CompileResult{false, reply.value("log", ""), {}};
        return reply.get<CompileResult>();
    }

    CompileResult compile_reference(const TaskSpec& task, const std::string&) override {
        json reply;
        if (!call("compile_reference", json{{"task", task}}, reply)) return CompileResult{false, reply.value("log", ""), {}};
        return reply.get<CompileResult>();
    }

    ExecuteResult execute(const Artifact& artifact, const TaskSpec& task, const ExecuteRequest& req) override {
        json reply;
        if (!call("execute", json{{"artifact", artifact}, {"task", task}, {"request", req}}, reply))
            return ExecuteResult{false, reply.value("log", ""), std::nullopt, {}};
        return reply.get<ExecuteResult>();
    }

private:
    bool call(const std::string& op, const json& request, json& reply) {
        std::filesystem::create_directories(work_dir_);
        const auto req_path =
            work_dir_ / ("kf-req-" + std::to_string(::getpid()) + "-" + std::to_string(counter_++) + ".json");
        {
            std::ofstream out(req_path);
            out << request.dump();
        }
        const std::string cmd = command_ + " " + op + " '" + req_path.string() + "'";
        std::string out;
        int status = -1;
        if (FILE* p = ::popen(cmd.c_str(), "r")) {
            char buf[4096];
            std::size_t n;
            while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) out.append(buf, n);
            status = ::pclose(p);
        }
        std::error_code ec;
        std::filesystem::remove(req_path, ec);
        if (status != 0) {
            reply = json{{"log", "adapter '" + cmd + "' exited with status " + std::to_string(status) + "\n" + out}};
            return false;
        }
        try {
            reply = json::parse(out);
        } catch (const json::exception& e) {
            reply = json{{"log", std::string("adapter output is not JSON: ") + e.what()}};
            return false;
        }
        return true;
    }

    std::string command_;
    std::set<Language> langs_;
    std::filesystem::path work_dir_;
    std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Benchmarking

struct BenchStats {
    BenchSchedule schedule;
    std::vector<double> trial_ms;       // initial trials
    std::vector<double> per_iter_ms;    // chunk time / inner_loop, one per chunk
    double mean_ms = 0.0;
    double stddev_ms = 0.0;

    bool operator==(const BenchStats&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BenchStats, schedule, trial_ms, per_iter_ms, mean_ms, stddev_ms)

inline BenchStats run_benchmark(EvalBackend& backend, const Artifact& artifact, const TaskSpec& task,
                                const BenchSchedule& schedule,
                                const std::optional<std::vector<long long>>& config = std::nullopt) {
    if (schedule.inner_loop < 1 || schedule.main_iters < 1 || schedule.warmup_iters < 0)
        throw Error(ErrorCode::InvalidConfig, "invalid benchmark schedule");
    ExecuteRequest req{config, schedule.warmup_iters, schedule.main_iters, schedule.inner_loop, false};
    const ExecuteResult r = backend.execute(artifact, task, req);
    if (!r.ok || r.chunk_ms.empty()) throw Error(ErrorCode::ExecutionFailure, r.log.empty() ? "benchmark produced no timings" : r.log);
    BenchStats s;
    s.schedule = schedule;
    int remaining = schedule.main_iters;
    for (double c : r.chunk_ms) {
        const int n = std::min(schedule.inner_loop, std::max(remaining, 1));
        s.per_iter_ms.push_back(c / n);
        remaining -= n;
    }
    double sum = 0;
    for (double v : s.per_iter_ms) sum += v;
    s.mean_ms = sum / static_cast<double>(s.per_iter_ms.size());
    double sq = 0;
    for (double v : s.per_iter_ms) sq += (v - s.mean_ms) * (v - s.mean_ms);
    s.stddev_ms = std::sqrt(sq / static_cast<double>(s.per_iter_ms.size()));
    return s;
}

struct Measurement {
    bool ok = false;
    bool compile_error = false;
    std::string log;
    std::optional<NumericArray> outputs;
    BenchStats bench;
};

// One code path for baseline and candidate: a few single-iteration trials
// (which also return outputs), a schedule from their median, then the run.
inline Measurement measure_outputs(EvalBackend& backend, const Artifact& artifact, const TaskSpec& task,
                                   const std::optional<std::vector<long long>>& config, int initial_trials) {
    Measurement m;
    const ExecuteRequest probe{config, 0, initial_trials, 1, true};
    const ExecuteResult r = backend.execute(artifact, task, probe);
    m.log = r.log;
    m.compile_error = r.compile_error;
    if (!r.ok || !r.outputs || r.chunk_ms.empty()) {
        if (m.log.empty()) m.log = "execution produced no outputs";
        return m;
    }
    m.ok = true;
    m.outputs = r.outputs;
    m.bench.trial_ms = r.chunk_ms;
    return m;
}

inline void measure_timing(EvalBackend& backend, const Artifact& artifact, const TaskSpec& task,
                           const std::optional<std::vector<long long>>& config, Measurement& m) {
    std::vector<double> t = m.bench.trial_ms;
    std::sort(t.begin(), t.end());
    const double median_ms = t[t.size() / 2];
    const auto trials = m.bench.trial_ms;
    m.bench = run_benchmark(backend, artifact, task, plan_schedule(median_ms / 1000.0, task.test_config.benchmark_constraints), config);
    m.bench.trial_ms = trials;
}

struct Baseline {
    double mean_ms = 0.0;
    NumericArray expected;
    BenchStats bench;
    std::string artifact_id;
};

// Task-scoped single-flight cache of reference timings and outputs.
class BaselineCache {
public:
    Baseline get(const std::string& key, const std::function<Baseline()>& compute) {
        std::shared_future<Baseline> fut;
        bool owner = false;
        std::promise<Baseline> prom;
        {
            std::lock_guard lock(mu_);
            auto it = entries_.find(key);
            if (it != entries_.end()) {
                fut = it->second;
            } else {
                fut = prom.get_future().share();
                entries_.emplace(key, fut);
                owner = true;
            }
        }
        if (owner) {
            try {
                prom.set_value(compute());
                std::lock_guard lock(mu_);
                ++computations_;
            } catch (...) {
                {
                    std::lock_guard lock(mu_);
                    entries_.erase(key);
                }
                prom.set_exception(std::current_exception());
            }
        }
        return fut.get();
    }

    int computations() const {
        std::lock_guard lock(mu_);
        return computations_;
    }

private:
    mutable std::mutex mu_;
    std::map<std::string, std::shared_future<Baseline>> entries_;
    int computations_ = 0;
};

// ---------------------------------------------------------------------------
// Templated kernels

struct TemplateInfo {
    std::vector<std::string> parameter_names;
    std::vector<std::vector<long long>> configs;

    bool operator==(const TemplateInfo&) const = default;
};

namespace detail {

inline std::size_t match_close(const std::string& s, std::size_t open, char o, char c) {
    int depth = 0;
    for (std::size_t i = open; i < s.size(); ++i) {
        if (s[i] == o) ++depth;
        if (s[i] == c && --depth == 0) return i;
    }
    return std::string::npos;
}

inline bool is_integral_type(std::string t) {
    static const std::regex strip(R"(\b(const|volatile|std::)\b|std::)");
    t = std::regex_replace(t, strip, "");
    t = trim(t);
    static const std::set<std::string> ok{"int", "long", "long long", "short", "unsigned", "unsigned int",
                                          "unsigned long", "size_t", "int64_t", "int32_t", "uint32_t", "uint64_t",
                                          "long int", "int64"};
    return ok.count(t) > 0;
}

inline bool mentions(const std::string& text, const std::string& ident) {
    return std::regex_search(text, std::regex("\\b" + ident + "\\b"));
}

} // namespace detail

// Finds a `forward` dispatcher whose branches test its integer parameters
// against constants. Returns nothing for ordinary kernels.
inline std::optional<TemplateInfo> detect_template(const std::string& source) {
    const std::string code = strip_comments(source);
    static const std::regex fwd(R"(\bforward\s*\()");
    std::size_t body_open = std::string::npos, params_open = std::string::npos, params_close = std::string::npos;
    for (auto it = std::sregex_iterator(code.begin(), code.end(), fwd); it != std::sregex_iterator(); ++it) {
        const std::size_t po = static_cast<std::size_t>(it->position()) + it->length() - 1;
        const std::size_t pc = detail::match_close(code, po, '(', ')');
        if (pc == std::string::npos) continue;
        std::size_t k = pc + 1;
        while (k < code.size() && std::isspace(static_cast<unsigned char>(code[k]))) ++k;
        if (k < code.size() && code[k] == '{') {
            params_open = po;
            params_close = pc;
            body_open = k;
            break;
        }
    }
    if (body_open == std::string::npos) return std::nullopt;

    std::vector<std::string> names;
    {
        const std::string params = code.substr(params_open + 1, params_close - params_open - 1);
        std::string cur;
        int depth = 0;
        std::vector<std::string> parts;
        for (char ch : params) {
            if (ch == '<' || ch == '(') ++depth;
            if (ch == '>' || ch == ')') --depth;
            if (ch == ',' && depth == 0) {
                parts.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
        parts.push_back(cur);
        static const std::regex decl(R"(^\s*(.*?)\s*\b([A-Za-z_]\w*)\s*(=.*)?$)");
        for (const auto& p : parts) {
            std::smatch m;
            if (!std::regex_match(p, m, decl)) continue;
            if (detail::is_integral_type(m[1].str())) names.push_back(m[2].str());
        }
    }
    if (names.empty()) return std::nullopt;

    const std::size_t body_close = detail::match_close(code, body_open, '{', '}');
    const std::string body = code.substr(body_open, body_close == std::string::npos ? std::string::npos : body_close - body_open + 1);

    TemplateInfo info;
    info.parameter_names = names;
    static const std::regex if_kw(R"(\bif\s*\()");
    static const std::regex eq_term(R"(^\s*\(?\s*(?:([A-Za-z_]\w*)\s*==\s*(-?\d+)[uUlL]*|(-?\d+)[uUlL]*\s*==\s*([A-Za-z_]\w*))\s*\)?\s*$)");
    for (auto it = std::sregex_iterator(body.begin(), body.end(), if_kw); it != std::sregex_iterator(); ++it) {
        const std::size_t co = static_cast<std::size_t>(it->position()) + it->length() - 1;
        const std::size_t cc = detail::match_close(body, co, '(', ')');
        if (cc == std::string::npos) throw Error(ErrorCode::MalformedDispatch, "unbalanced if condition");
        const std::string cond = body.substr(co + 1, cc - co - 1);
        bool relevant = false;
        for (const auto& n : names) relevant = relevant || detail::mentions(cond, n);
        if (!relevant) continue;
        std::map<std::string, long long> values;
        std::size_t start = 0;
        while (true) {
            const std::size_t amp = cond.find("&&", start);
            const std::string term = cond.substr(start, amp == std::string::npos ? std::string::npos : amp - start);
            std::smatch m;
            if (!std::regex_match(term, m, eq_term))
                throw Error(ErrorCode::MalformedDispatch, "branch condition is not a constant equality: " + detail::trim(cond));
            const std::string name = m[1].matched ? m[1].str() : m[4].str();
            const long long v = std::stoll(m[1].matched ? m[2].str() : m[3].str());
            if (std::find(names.begin(), names.end(), name) == names.end() || values.count(name))
                throw Error(ErrorCode::MalformedDispatch, "branch tests '" + name + "', which is not a dispatch parameter");
            values[name] = v;
            if (amp == std::string::npos) break;
            start = amp + 2;
        }
        if (values.size() != names.size())
            throw Error(ErrorCode::MalformedDispatch, "branch does not fix every dispatch parameter: " + detail::trim(cond));
        std::vector<long long> tuple;
        for (const auto& n : names) tuple.push_back(values[n]);
        if (std::find(info.configs.begin(), info.configs.end(), tuple) == info.configs.end()) info.configs.push_back(tuple);
    }
    if (info.configs.empty()) return std::nullopt;
    return info;
}

struct TemplateSweep {
    std::vector<std::string> parameter_names;
    std::vector<std::vector<long long>> configs;
    std::map<std::vector<long long>, EvaluationResult> per_config_results;

    std::string log() const {
        std::string out;
        for (const auto& c : configs) {
            const auto& r = per_config_results.at(c);
            out += "config (";
            for (std::size_t i = 0; i < c.size(); ++i)
                out += (i ? ", " : "") + parameter_names[i] + "=" + std::to_string(c[i]);
            out += "): ";
            out += to_string(r.status);
            if (r.runtime_ms) {
                char buf[64];
                std::snprintf(buf, sizeof buf, ", %.4f ms", *r.runtime_ms);
                out += buf;
            }
            out += "\n";
        }
        return out;
    }
};

inline void to_json(json& j, const TemplateSweep& s) {
    json results = json::array();
    for (const auto& c : s.configs) results.push_back({{"config", c}, {"result", s.per_config_results.at(c)}});
    j = json{{"parameter_names", s.parameter_names}, {"configs", s.configs}, {"results", results}};
}

inline void from_json(const json& j, TemplateSweep& s) {
    s.parameter_names = j.at("parameter_names").get<std::vector<std::string>>();
    s.configs = j.at("configs").get<std::vector<std::vector<long long>>>();
    for (const auto& r : j.at("results"))
        s.per_config_results[r.at("config").get<std::vector<long long>>()] = r.at("result").get<EvaluationResult>();
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
    int initial_trials = 3;
};

struct EvalReport {
    EvaluationResult result;
    std::optional<TemplateSweep> sweep;
    std::optional<BenchStats> bench;        // winning configuration
    std::optional<BenchStats> baseline_bench;
    std::string artifact_id;
};

inline void to_json(json& j, const EvalReport& r) {
    j = json{{"result", r.result}, {"artifact_id", r.artifact_id}};
    j["sweep"] = r.sweep ? json(*r.sweep) : json(nullptr);
    j["bench"] = r.bench ? json(*r.bench) : json(nullptr);
    j["baseline_bench"] = r.baseline_bench ? json(*r.baseline_bench) : json(nullptr);
}

inline void from_json(const json& j, EvalReport& r) {
    r.result = j.at("result").get<EvaluationResult>();
    r.artifact_id = j.value("artifact_id", std::string());
    if (!j.at("sweep").is_null()) r.sweep = j["sweep"].get<TemplateSweep>();
    if (!j.at("bench").is_null()) r.bench = j["bench"].get<BenchStats>();
    if (!j.at("baseline_bench").is_null()) r.baseline_bench = j["baseline_bench"].get<BenchStats>();
}

inline Baseline get_baseline(EvalBackend& backend, const TaskSpec& task, const std::string& candidate_source,
                             BaselineCache& cache, const EvalOptions& opt) {
    const CompileResult ref = backend.compile_reference(task, candidate_source);
    if (!ref.ok) throw Error(ErrorCode::Infrastructure, "reference failed to build: " + ref.log);
    const std::string key = task.task_id + "|" + task.hardware_profile_id + "|" + ref.artifact.id;
    return cache.get(key, [&] {
        Measurement m = measure_outputs(backend, ref.artifact, task, std::nullopt, opt.initial_trials);
        if (!m.ok) throw Error(ErrorCode::Infrastructure, "reference failed to run: " + m.log);
        measure_timing(backend, ref.artifact, task, std::nullopt, m);
        return Baseline{m.bench.mean_ms, *m.outputs, m.bench, ref.artifact.id};
    });
}

// Correctness then timing for one configuration of a built candidate.
inline EvalReport evaluate_config(EvalBackend& backend, const Artifact& artifact, const TaskSpec& task, const Baseline& base,
                                  const std::optional<std::vector<long long>>& config, const EvalOptions& opt) {
    EvalReport rep;
    rep.artifact_id = artifact.id;
    rep.baseline_bench = base.bench;
    EvaluationResult& res = rep.result;
    res.baseline_ms = base.mean_ms;
    res.config_used = config;
    Measurement m = measure_outputs(backend, artifact, task, config, opt.initial_trials);
    if (!m.ok) {
        res.status = m.compile_error ? EvalStatus::CompileFail : EvalStatus::Incorrect;
        res.log = m.log;
        return rep;
    }
    const TestConfig& tc = task.test_config;
    try {
        const CorrectnessVerdict v =
            check_correctness(base.expected, *m.outputs, tc.correctness_rel_tol, tc.correctness_pass_fraction, tc.epsilon_div);
        res.nu_stats = v.stats;
        try {
            res.cosine_sim = cosine_similarity(base.expected, *m.outputs);
        } catch (const Error&) {
        }
        char buf[160];
        std::snprintf(buf, sizeof buf, "correctness: %.4f%% of elements beyond relative tolerance %g (max %.4g)",
                      100.0 * v.stats.violation_fraction, tc.correctness_rel_tol, v.stats.max_nu);
        res.log = m.log.empty() ? std::string(buf) : m.log + "\n" + buf;
        bool pass = v.pass;
        if (pass && tc.cosine_gate && (!res.cosine_sim || *res.cosine_sim < tc.cosine_min)) {
            pass = false;
            res.log += "\ncosine similarity below gate";
        }
        if (!pass) {
            res.status = EvalStatus::Incorrect;
            return rep;
        }
    } catch (const Error& e) {
        res.status = EvalStatus::Incorrect;
        res.log = std::string("output check failed: ") + e.what();
        return rep;
    }
    try {
        measure_timing(backend, artifact, task, config, m);
    } catch (const Error& e) {
        res.status = EvalStatus::Incorrect;
        res.log += std::string("\nbenchmark failed: ") + e.what();
        return rep;
    }
    res.status = EvalStatus::Correct;
    res.runtime_ms = m.bench.mean_ms;
    res.speedup = base.mean_ms / m.bench.mean_ms;
    rep.bench = m.bench;
    return rep;
}

namespace detail {

inline bool better_fallback(const EvaluationResult& a, const EvaluationResult& b, double target) {
    return compute_fitness(a, target) > compute_fitness(b, target);
}

} // namespace detail

// Evaluates every configuration of an already built artifact.
inline EvalReport sweep_built(EvalBackend& backend, const Artifact& artifact, const TaskSpec& task, const Baseline& base,
                              const TemplateInfo& tmpl, const EvalOptions& opt) {
    if (tmpl.configs.empty()) throw Error(ErrorCode::InvalidConfig, "template sweep needs at least one configuration");
    TemplateSweep sweep{tmpl.parameter_names, tmpl.configs, {}};
    std::optional<EvalReport> best;
    for (const auto& c : tmpl.configs) {
        EvalReport r = evaluate_config(backend, artifact, task, base, c, opt);
        sweep.per_config_results[c] = r.result;
        const bool r_ok = r.result.status == EvalStatus::Correct;
        if (!best) {
            best = std::move(r);
            continue;
        }
        const bool b_ok = best->result.status == EvalStatus::Correct;
        if (r_ok && (!b_ok || *r.result.runtime_ms < *best->result.runtime_ms)) best = std::move(r);
        else if (!r_ok && !b_ok && detail::better_fallback(r.result, best->result, task.target_speedup)) best = std::move(r);
    }
    best->sweep = sweep;
    best->result.log = "template sweep over " + std::to_string(tmpl.configs.size()) + " configurations\n" + sweep.log() +
                       "selected: " + best->result.log;
    return *best;
}

// Second half of the pipeline, for a compile result produced here or on a compile worker.
inline EvalReport evaluate_built(EvalBackend& backend, const CompileResult& built, const std::string& source, const TaskSpec& task,
                                 BaselineCache& cache, const EvalOptions& opt = {}) {
    if (!built.ok) {
        EvalReport rep;
        rep.result.status = EvalStatus::CompileFail;
        rep.result.log = built.log;
        return rep;
    }
    const Baseline base = get_baseline(backend, task, source, cache, opt);
    std::optional<TemplateInfo> tmpl;
    std::string note;
    try {
        tmpl = detect_template(source);
    } catch (const Error& e) {
        note = std::string("template detection skipped: ") + e.what() + "\n";
    }
    EvalReport rep = tmpl ? sweep_built(backend, built.artifact, task, base, *tmpl, opt)
                          : evaluate_config(backend, built.artifact, task, base, std::nullopt, opt);
    if (!note.empty()) rep.result.log = note + rep.result.log;
    return rep;
}

inline EvalReport evaluate_detailed(EvalBackend& backend, const std::string& source, const TaskSpec& task, BaselineCache& cache,
                                    const EvalOptions& opt = {}) {
    CompileResult built;
    try {
        built = backend.compile(source, task);
    } catch (const std::exception& e) {
        built = CompileResult{false, std::string("compile step failed: ") + e.what(), {}};
    }
    return evaluate_built(backend, built, source, task, cache, opt);
}

inline EvaluationResult evaluate(EvalBackend& backend, const std::string& source, const TaskSpec& task, BaselineCache& cache,
                                 const EvalOptions& opt = {}) {
    return evaluate_detailed(backend, source, task, cache, opt).result;
}

// Compiles once and evaluates each configuration.
inline std::pair<EvaluationResult, TemplateSweep> sweep_parameters(EvalBackend& backend, const std::string& source,
                                                                   const TaskSpec& task, const TemplateInfo& tmpl,
                                                                   BaselineCache& cache, const EvalOptions& opt = {}) {
    if (tmpl.configs.empty()) throw Error(ErrorCode::InvalidConfig, "template sweep needs at least one configuration");
    const CompileResult built = backend.compile(source, task);
    if (!built.ok) {
        TemplateSweep s{tmpl.parameter_names, tmpl.configs, {}};
        EvaluationResult fail;
        fail.status = EvalStatus::CompileFail;
        fail.log = built.log;
        for (const auto& c : tmpl.configs) {
            s.per_config_results[c] = fail;
            s.per_config_results[c].config_used = c;
        }
        return {fail, s};
    }
    const Baseline base = get_baseline(backend, task, source, cache, opt);
    EvalReport rep = sweep_built(backend, built.artifact, task, base, tmpl, opt);
    return {rep.result, *rep.sweep};
}

} // namespace kforge
