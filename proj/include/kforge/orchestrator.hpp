#pragma once

#include <chrono>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "archive.hpp"
#include "classifier.hpp"
#include "common.hpp"
#include "distrib.hpp"
#include "evalpipe.hpp"
#include "fitness.hpp"
#include "gradient.hpp"
#include "promptgen.hpp"
#include "taskspec.hpp"

namespace kforge {

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
    int max_generations = 40;
    int population_per_generation = 8;
    std::map<SelectionKind, double> selection{{SelectionKind::Curiosity, 0.7},
                                              {SelectionKind::Uniform, 0.1},
                                              {SelectionKind::FitnessProportionate, 0.1},
                                              {SelectionKind::Island, 0.1}};
    int bins = 4;
    int islands = 4;
    int migration_period = 10;
    std::optional<double> target_speedup;  // unset: the task's own target
    int prompt_update_frequency = 10;
    int max_prompt_mutations = 3;
    int prompt_archive_size = 16;
    std::string prompt_mode = "latest";  // or "sample"
    int meta_recent_limit = 16;
    ChatConfig generator{};
    ChatConfig meta{"mock-meta", 0.3, 1.0, 8000};
    int param_opt_iterations = 2;
    int param_opt_best_of = 8;
    GradientConfig gradient{};
    HintOptions hints{};
    int transition_capacity = 256;
    int initial_trials = 3;
    std::uint64_t seed = 0;

    void validate() const {
        auto at_least = [](int v, int lo, const char* what) {
            if (v < lo) throw Error(ErrorCode::InvalidConfig, std::string(what) + " must be >= " + std::to_string(lo));
        };
        at_least(max_generations, 1, "max_generations");
        at_least(population_per_generation, 1, "population_per_generation");
        at_least(bins, 1, "bins");
        at_least(islands, 1, "islands");
        if (islands > bins) throw Error(ErrorCode::InvalidConfig, "islands must not exceed bins");
        at_least(migration_period, 1, "migration_period");
        at_least(prompt_update_frequency, 1, "prompt_update_frequency");
        at_least(max_prompt_mutations, 1, "max_prompt_mutations");
        at_least(prompt_archive_size, 2, "prompt_archive_size");
        at_least(meta_recent_limit, 1, "meta_recent_limit");
        at_least(param_opt_iterations, 0, "param_opt_iterations");
        at_least(param_opt_best_of, 1, "param_opt_best_of");
        at_least(transition_capacity, 1, "transition_capacity");
        at_least(initial_trials, 1, "initial_trials");
        if (target_speedup && !(*target_speedup > 0)) throw Error(ErrorCode::InvalidConfig, "target_speedup must be positive");
        if (prompt_mode != "latest" && prompt_mode != "sample")
            throw Error(ErrorCode::InvalidConfig, "prompt_mode must be 'latest' or 'sample'");
        mix_strategies(selection);
    }
};

inline void to_json(json& j, const RunConfig& c) {
    json sel = json::object();
    for (const auto& [k, v] : c.selection) sel[to_string(k)] = v;
    auto chat = [](const ChatConfig& g) {
        return json{{"model", g.model}, {"temperature", g.temperature}, {"top_p", g.top_p}, {"max_tokens", g.max_tokens}};
    };
    j = json{{"max_generations", c.max_generations},
             {"population_per_generation", c.population_per_generation},
             {"selection", sel},
             {"bins", c.bins},
             {"islands", c.islands},
             {"migration_period", c.migration_period},
             {"target_speedup", c.target_speedup ? json(*c.target_speedup) : json(nullptr)},
             {"prompt_update_frequency", c.prompt_update_frequency},
             {"max_prompt_mutations", c.max_prompt_mutations},
             {"prompt_archive_size", c.prompt_archive_size},
             {"prompt_mode", c.prompt_mode},
             {"meta_recent_limit", c.meta_recent_limit},
             {"generator", chat(c.generator)},
             {"meta", chat(c.meta)},
             {"param_opt_iterations", c.param_opt_iterations},
             {"param_opt_best_of", c.param_opt_best_of},
             {"gradient",
              {{"half_life", c.gradient.decay.half_life_iterations},
               {"alpha", c.gradient.weights.alpha},
               {"beta", c.gradient.weights.beta},
               {"gamma", c.gradient.weights.gamma},
               {"low_quality_threshold", c.gradient.low_quality_threshold},
               {"temperature", c.gradient.temperature}}},
             {"hints", {{"threshold", c.hints.threshold}, {"max_hints", c.hints.max_hints}, {"max_level", c.hints.max_level}}},
             {"transition_capacity", c.transition_capacity},
             {"initial_trials", c.initial_trials},
             {"seed", c.seed}};
}

// Missing keys keep their defaults, so config files may be partial.
inline void from_json(const json& j, RunConfig& c) {
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k) && !j[k].is_null()) field = j[k].get<std::decay_t<decltype(field)>>();
    };
    get("max_generations", c.max_generations);
    get("population_per_generation", c.population_per_generation);
    if (j.contains("selection")) {
        c.selection.clear();
        for (const auto& [k, v] : j["selection"].items()) c.selection[parse_selection_kind(k)] = v.get<double>();
    }
    get("bins", c.bins);
    get("islands", c.islands);
    get("migration_period", c.migration_period);
    if (j.contains("target_speedup"))
        c.target_speedup = j["target_speedup"].is_null() ? std::nullopt : std::optional<double>(j["target_speedup"].get<double>());
    get("prompt_update_frequency", c.prompt_update_frequency);
    get("max_prompt_mutations", c.max_prompt_mutations);
    get("prompt_archive_size", c.prompt_archive_size);
    get("prompt_mode", c.prompt_mode);
    get("meta_recent_limit", c.meta_recent_limit);
    auto chat = [&](const char* k, ChatConfig& g) {
        if (!j.contains(k)) return;
        const json& s = j[k];
        g.model = s.value("model", g.model);
        g.temperature = s.value("temperature", g.temperature);
        g.top_p = s.value("top_p", g.top_p);
        g.max_tokens = s.value("max_tokens", g.max_tokens);
    };
    chat("generator", c.generator);
    chat("meta", c.meta);
    get("param_opt_iterations", c.param_opt_iterations);
    get("param_opt_best_of", c.param_opt_best_of);
    if (j.contains("gradient")) {
        const json& g = j["gradient"];
        c.gradient.decay.half_life_iterations = g.value("half_life", c.gradient.decay.half_life_iterations);
        c.gradient.weights.alpha = g.value("alpha", c.gradient.weights.alpha);
        c.gradient.weights.beta = g.value("beta", c.gradient.weights.beta);
        c.gradient.weights.gamma = g.value("gamma", c.gradient.weights.gamma);
        c.gradient.low_quality_threshold = g.value("low_quality_threshold", c.gradient.low_quality_threshold);
        c.gradient.temperature = g.value("temperature", c.gradient.temperature);
    }
    if (j.contains("hints")) {
        const json& h = j["hints"];
        c.hints.threshold = h.value("threshold", c.hints.threshold);
        c.hints.max_hints = h.value("max_hints", c.hints.max_hints);
        c.hints.max_level = h.value("max_level", c.hints.max_level);
    }
    get("transition_capacity", c.transition_capacity);
    get("initial_trials", c.initial_trials);
    get("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Helpers

// The last complete fenced block of a model response.
inline std::optional<std::string> extract_code_block(const std::string& text) {
    std::optional<std::string> last;
    std::istringstream in(text);
    std::string line, body;
    bool open = false;
    while (std::getline(in, line)) {
        const std::string t = detail::trim(line);
        if (t.rfind("```", 0) == 0) {
            if (open) {
                last = body;
                open = false;
            } else {
                open = true;
                body.clear();
            }
            continue;
        }
        if (open) body += line + "\n";
    }
    return last;
}

inline json to_json_outcome(const RecentOutcome& o) { return json{{"candidate", o.candidate}, {"result", o.result}}; }

inline RecentOutcome recent_outcome_from_json(const json& j) {
    return RecentOutcome{j.at("candidate").get<KernelCandidate>(), j.at("result").get<EvaluationResult>()};
}

// ---------------------------------------------------------------------------
// Report

struct KernelSummary {
    std::string candidate_id;
    double fitness = 0;
    BehavioralCoord coord;
    EvaluationResult result;
    std::string source;

    bool operator==(const KernelSummary&) const = default;
};

inline void to_json(json& j, const KernelSummary& k) {
    j = json{{"candidate_id", k.candidate_id}, {"fitness", k.fitness}, {"coord", k.coord}, {"result", k.result}, {"source", k.source}};
}

inline void from_json(const json& j, KernelSummary& k) {
    k.candidate_id = j.at("candidate_id").get<std::string>();
    k.fitness = j.at("fitness").get<double>();
    k.coord = j.at("coord").get<BehavioralCoord>();
    k.result = j.at("result").get<EvaluationResult>();
    k.source = j.at("source").get<std::string>();
}

struct ParamOptStep {
    int iteration = 0;
    int variants = 0;
    int correct = 0;
    std::optional<std::string> adopted_id;
    std::optional<double> runtime_ms;  // best kernel's runtime after this iteration
};

inline void to_json(json& j, const ParamOptStep& s) {
    j = json{{"iteration", s.iteration},
             {"variants", s.variants},
             {"correct", s.correct},
             {"adopted_id", s.adopted_id ? json(*s.adopted_id) : json(nullptr)},
             {"runtime_ms", s.runtime_ms ? json(*s.runtime_ms) : json(nullptr)}};
}

inline void from_json(const json& j, ParamOptStep& s) {
    s.iteration = j.at("iteration").get<int>();
    s.variants = j.at("variants").get<int>();
    s.correct = j.at("correct").get<int>();
    s.adopted_id = j.at("adopted_id").is_null() ? std::nullopt : std::optional<std::string>(j["adopted_id"].get<std::string>());
    s.runtime_ms = j.at("runtime_ms").is_null() ? std::nullopt : std::optional<double>(j["runtime_ms"].get<double>());
}

struct RunReport {
    std::string run_id;
    std::string task_id;
    std::string hardware_profile_id;
    std::uint64_t seed = 0;
    double target_speedup = 2.0;
    int generations_completed = 0;
    int candidates_evaluated = 0;
    int transitions_recorded = 0;
    int generator_requests = 0;
    int migrations_accepted = 0;
    std::vector<double> best_fitness_history;  // index = generation, 0 is the seed
    std::vector<std::size_t> occupancy_history;
    std::optional<KernelSummary> best_evolved;  // best archive member before tuning
    std::optional<KernelSummary> final_kernel;  // after parameter optimization
    std::vector<ParamOptStep> param_opt;
    std::size_t occupancy = 0;
    double mean_fitness = 0;
    std::size_t prompt_versions = 0;
    std::string prompt_version;
    long long prompt_chars = 0;
    long long response_chars = 0;
    json archive;
};

inline void to_json(json& j, const RunReport& r) {
    j = json{{"run_id", r.run_id},
             {"task_id", r.task_id},
             {"hardware_profile_id", r.hardware_profile_id},
             {"seed", r.seed},
             {"target_speedup", r.target_speedup},
             {"generations_completed", r.generations_completed},
             {"candidates_evaluated", r.candidates_evaluated},
             {"transitions_recorded", r.transitions_recorded},
             {"generator_requests", r.generator_requests},
             {"migrations_accepted", r.migrations_accepted},
             {"best_fitness_history", r.best_fitness_history},
             {"occupancy_history", r.occupancy_history},
             {"best_evolved", r.best_evolved ? json(*r.best_evolved) : json(nullptr)},
             {"final_kernel", r.final_kernel ? json(*r.final_kernel) : json(nullptr)},
             {"param_opt", r.param_opt},
             {"occupancy", r.occupancy},
             {"mean_fitness", r.mean_fitness},
             {"prompt_versions", r.prompt_versions},
             {"prompt_version", r.prompt_version},
             {"prompt_chars", r.prompt_chars},
             {"response_chars", r.response_chars},
             {"archive", r.archive}};
}

inline void from_json(const json& j, RunReport& r) {
    r.run_id = j.at("run_id").get<std::string>();
    r.task_id = j.at("task_id").get<std::string>();
    r.hardware_profile_id = j.at("hardware_profile_id").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.target_speedup = j.at("target_speedup").get<double>();
    r.generations_completed = j.at("generations_completed").get<int>();
    r.candidates_evaluated = j.at("candidates_evaluated").get<int>();
    r.transitions_recorded = j.at("transitions_recorded").get<int>();
    r.generator_requests = j.at("generator_requests").get<int>();
    r.migrations_accepted = j.at("migrations_accepted").get<int>();
    r.best_fitness_history = j.at("best_fitness_history").get<std::vector<double>>();
    r.occupancy_history = j.at("occupancy_history").get<std::vector<std::size_t>>();
    if (!j.at("best_evolved").is_null()) r.best_evolved = j["best_evolved"].get<KernelSummary>();
    if (!j.at("final_kernel").is_null()) r.final_kernel = j["final_kernel"].get<KernelSummary>();
    r.param_opt = j.at("param_opt").get<std::vector<ParamOptStep>>();
    r.occupancy = j.at("occupancy").get<std::size_t>();
    r.mean_fitness = j.at("mean_fitness").get<double>();
    r.prompt_versions = j.at("prompt_versions").get<std::size_t>();
    r.prompt_version = j.at("prompt_version").get<std::string>();
    r.prompt_chars = j.at("prompt_chars").get<long long>();
    r.response_chars = j.at("response_chars").get<long long>();
    r.archive = j.at("archive");
}

// ---------------------------------------------------------------------------
// Run wiring

struct Backends {
    std::vector<ChatBackend*> generators;     // equal-weight ensemble
    ChatBackend* first_generation = nullptr;  // optional stronger model for generation 1
    ChatBackend* meta = nullptr;              // optional; no prompt evolution without it
};

struct GenerationSummary {
    int generation = 0;
    int candidates = 0;
    int correct = 0;
    int inserted = 0;
    double best_fitness = 0;
    std::size_t occupancy = 0;
    std::string prompt_version;
    std::string phase = "evolve";
};

struct RunContext {
    JobQueue* queue = nullptr;
    RecordStore* db = nullptr;
    EvalBackend* inline_backend = nullptr;  // set: the orchestrator drains the queue itself
    double lease_s = 300.0;
    int poll_ms = 10;
    double job_timeout_s = 0;  // 0 waits forever
    bool fresh = false;        // discard an existing run with the same id
    std::function<void(const GenerationSummary&)> on_generation;
    std::function<void(const std::string&)> log;
};

inline std::string default_run_id(const TaskSpec& task, std::uint64_t seed) { return task.task_id + "-s" + std::to_string(seed); }

namespace detail {

struct EvalJob {
    std::string source;
    std::optional<EvalReport> report;
};

class RunEngine {
public:
    RunEngine(const RunConfig& cfg, const TaskSpec& task, const Backends& be, RunContext& ctx, std::string run_id)
        : cfg_(cfg),
          task_(task),
          be_(be),
          ctx_(ctx),
          run_id_(std::move(run_id)),
          table_(default_pattern_table(task.language)),
          strategy_(mix_strategies(cfg.selection)),
          archive_(cfg.bins, cfg.islands),
          prompts_(static_cast<std::size_t>(cfg.prompt_archive_size)),
          transitions_(static_cast<std::size_t>(cfg.transition_capacity)),
          select_rng_(mix64(cfg.seed ^ 0x5e1ec7ULL)),
          prompt_rng_(mix64(cfg.seed ^ 0x9a0b7ULL)),
          ensemble_rng_(mix64(cfg.seed ^ 0xe75eULL)) {
        if (cfg_.target_speedup) task_.target_speedup = *cfg_.target_speedup;
        eval_opt_.initial_trials = cfg_.initial_trials;
    }

    RunReport run() {
        if (!ctx_.queue || !ctx_.db) throw Error(ErrorCode::InvalidConfig, "run needs a queue and a run database");
        if (be_.generators.empty()) throw Error(ErrorCode::InvalidConfig, "run needs at least one generator backend");
        for (auto* g : be_.generators)
            if (!g) throw Error(ErrorCode::InvalidConfig, "null generator backend");

        if (ctx_.fresh && ctx_.db->exists(run_id_)) ctx_.db->remove(run_id_);
        if (ctx_.db->exists(run_id_) && resume()) {
            if (finished_) return report_;
        } else {
            if (ctx_.db->exists(run_id_)) ctx_.db->remove(run_id_);
            start();
        }
        for (int g = generation_ + 1; g <= cfg_.max_generations; ++g) run_generation(g);
        for (int it = param_iteration_ + 1; it <= cfg_.param_opt_iterations; ++it) param_opt_iteration(it);
        finish();
        return report_;
    }

private:
    // ---- persistence -----------------------------------------------------

    json config_body() const {
        return json{{"config", cfg_}, {"task_id", task_.task_id}, {"task_sha", sha256_hex(json(task_).dump())}, {"task", task_},
                    {"epoch", epoch_}};
    }

    std::uint64_t append(RecordKind k, int ts, const json& body) { return ctx_.db->append(run_id_, k, ts, body); }

    void start() {
        epoch_ = 0;
        append(RecordKind::Config, 0, config_body());
        prompts_.add(seed_prompt());
        append(RecordKind::PromptVersion, 0, json{{"state", prompts_.latest()}, {"parent", nullptr}});
        seed_generation();
        snapshot("evolve");
    }

    // Returns false if nothing usable was recorded and the run should start over.
    bool resume() {
        const LoadedRun run = ctx_.db->load(run_id_, false);
        if (run.records.empty() || run.records.front().kind != RecordKind::Config) return false;
        const json& first = run.records.front().body;
        json mine = config_body();
        if (first.at("config") != mine.at("config") || first.at("task_sha") != mine.at("task_sha"))
            throw Error(ErrorCode::InvalidConfig, "run '" + run_id_ + "' was started with a different configuration or task");
        const auto snap = run.last_index_of(RecordKind::ArchiveSnapshot);
        if (!snap) return false;
        int configs = 0;
        for (std::size_t i = 0; i <= *snap; ++i) configs += run.records[i].kind == RecordKind::Config;
        ctx_.db->truncate_after(run_id_, run.records[*snap].seq);
        restore(run.records[*snap].body);
        if (finished_) return true;
        epoch_ = configs;
        append(RecordKind::Config, generation_, config_body());
        say("resumed " + run_id_ + " after generation " + std::to_string(generation_));
        return true;
    }

    json state_json(const std::string& phase) const {
        json results = json::object();
        for (const auto& [id, r] : results_) results[id] = r;
        json recent = json::array();
        for (const auto& o : recent_) recent.push_back(to_json_outcome(o));
        return json{{"phase", phase},
                    {"generation", generation_},
                    {"param_iteration", param_iteration_},
                    {"archive", archive_.to_json()},
                    {"prompts", prompts_.to_json()},
                    {"transitions", transitions_.to_json()},
                    {"results", results},
                    {"recent", recent},
                    {"rng", {select_rng_.state(), prompt_rng_.state(), ensemble_rng_.state()}},
                    {"final_id", final_id_ ? json(*final_id_) : json(nullptr)},
                    {"report", report_}};
    }

    void restore(const json& s) {
        finished_ = s.at("phase") == "final";
        generation_ = s.at("generation").get<int>();
        param_iteration_ = s.at("param_iteration").get<int>();
        archive_ = Archive::from_json(s.at("archive"));
        prompts_ = PromptArchive::from_json(s.at("prompts"));
        transitions_ = TransitionBuffer::from_json(s.at("transitions"));
        results_.clear();
        for (const auto& [id, r] : s.at("results").items()) results_[id] = r.get<EvaluationResult>();
        recent_.clear();
        for (const auto& o : s.at("recent")) recent_.push_back(recent_outcome_from_json(o));
        select_rng_.restore(s.at("rng")[0]);
        prompt_rng_.restore(s.at("rng")[1]);
        ensemble_rng_.restore(s.at("rng")[2]);
        final_id_ = s.at("final_id").is_null() ? std::nullopt : std::optional<std::string>(s["final_id"].get<std::string>());
        report_ = s.at("report").get<RunReport>();
    }

    void snapshot(const std::string& phase) {
        refresh_report();
        append(RecordKind::ArchiveSnapshot, generation_ + param_iteration_, state_json(phase));
    }

    void say(const std::string& s) const {
        if (ctx_.log) ctx_.log(s);
    }

    // ---- evaluation through the queue -----------------------------------

    std::string job_id(const std::string& cid, const char* kind) const {
        return run_id_ + "/e" + std::to_string(epoch_) + "/" + cid + "/" + kind;
    }

    JobOutcome await(const std::string& id) {
        const auto start = std::chrono::steady_clock::now();
        for (;;) {
            if (auto o = ctx_.queue->take(id)) {
                if (o->state != JobState::Done)
                    throw Error(ErrorCode::Infrastructure, "job " + id + " failed after " + std::to_string(o->attempts) + " attempts: " + o->log);
                return *o;
            }
            if (ctx_.job_timeout_s > 0 &&
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() > ctx_.job_timeout_s)
                throw Error(ErrorCode::Infrastructure, "timed out waiting for job " + id);
            std::this_thread::sleep_for(std::chrono::milliseconds(ctx_.poll_ms));
        }
    }

    void drain(JobKind kind) {
        if (ctx_.inline_backend)
            drain_queue(*ctx_.queue, kind, task_.hardware_profile_id, *ctx_.inline_backend, cache_, "inline", ctx_.lease_s);
    }

    // Compile jobs for every source, then execute jobs for those that built.
    void evaluate_all(std::vector<std::pair<std::string, EvalJob*>>& jobs) {
        for (auto& [cid, j] : jobs) ctx_.queue->enqueue(make_compile_job(job_id(cid, "compile"), task_, j->source));
        drain(JobKind::Compile);
        std::vector<std::pair<std::string, CompileResult>> built;
        for (auto& [cid, j] : jobs) built.emplace_back(cid, await(job_id(cid, "compile")).result.get<CompileResult>());
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            if (built[i].second.ok)
                ctx_.queue->enqueue(make_execute_job(job_id(jobs[i].first, "execute"), task_, jobs[i].second->source, built[i].second));
            else {
                EvalReport rep;
                rep.result.status = EvalStatus::CompileFail;
                rep.result.log = built[i].second.log;
                jobs[i].second->report = rep;
            }
        }
        drain(JobKind::Execute);
        for (std::size_t i = 0; i < jobs.size(); ++i)
            if (built[i].second.ok) jobs[i].second->report = await(job_id(jobs[i].first, "execute")).result.get<EvalReport>();
    }

    // ---- generation steps ------------------------------------------------

    struct Child {
        KernelCandidate cand;
        std::optional<KernelCandidate> parent;
        std::string backend;
        std::uint64_t request_seed = 0;
        std::string prompt_sha;
        std::string response_sha;
        bool has_code = false;
        EvalJob job;
    };

    void seed_generation() {
        generation_ = 0;
        if (!task_.initial_kernel) return;
        Child c;
        c.cand.candidate_id = "g0c0";
        c.cand.source = *task_.initial_kernel;
        c.cand.generation = 0;
        c.cand.prompt_version_id = prompts_.latest().version_id;
        c.backend = "initial_kernel";
        c.has_code = true;
        c.job.source = c.cand.source;
        std::vector<Child> kids;
        kids.push_back(std::move(c));
        settle(kids, 0);
    }

    std::string pick_backend_and_complete(int g, const ChatRequest& req, std::string& backend_name) {
        ChatBackend* b = nullptr;
        if (g == 1 && be_.first_generation) {
            b = be_.first_generation;
        } else if (be_.generators.size() == 1) {
            b = be_.generators.front();
        } else {
            b = be_.generators[ensemble_rng_.below(be_.generators.size())];
        }
        backend_name = b->name();
        try {
            return b->complete(req);
        } catch (const Error& e) {
            throw Error(ErrorCode::Infrastructure, "generator " + backend_name + ": " + e.what());
        }
    }

    void run_generation(int g) {
        const std::vector<GradientEstimate> est = archive_.empty() ? std::vector<GradientEstimate>{}
                                                                   : estimate_all(transitions_, archive_, cfg_.gradient, g);
        const CellWeights<3> weights = sampling_weights(est, cfg_.gradient.temperature);
        std::map<BehavioralCoord, Vec3> combined;
        for (const auto& e : est) combined[e.cell] = e.combined;

        const PromptState& prompt = cfg_.prompt_mode == "sample" ? prompts_.sample(prompt_rng_) : prompts_.latest();
        const PromptState prompt_copy = prompt;
        std::vector<Child> kids(static_cast<std::size_t>(cfg_.population_per_generation));
        for (int i = 0; i < cfg_.population_per_generation; ++i) {
            Child& c = kids[static_cast<std::size_t>(i)];
            std::optional<KernelSnapshot> top, last;
            std::vector<std::string> hints;
            if (!archive_.empty()) {
                const auto sel = archive_.select_parent(strategy_, &weights, select_rng_, i % archive_.island_count());
                c.parent = *sel.elite;
                const KernelCandidate* best = archive_.best();
                top = snapshot_of(*best);
                last = snapshot_of(*c.parent);
                if (auto it = combined.find(c.parent->coord); it != combined.end())
                    hints = gradient_to_hints(it->second, c.parent->coord, kforge::default_hint_table(), cfg_.hints);
            }
            const std::string text = build_prompt(task_, top, last, hints, task_.hardware_spec, prompt_copy);
            c.request_seed = mix64(cfg_.seed ^ mix64(static_cast<std::uint64_t>(g) * 1009 + static_cast<std::uint64_t>(i)));
            const ChatRequest req = make_request(cfg_.generator, text, c.request_seed);
            const std::string response = pick_backend_and_complete(g, req, c.backend);
            ++report_.generator_requests;
            report_.prompt_chars += static_cast<long long>(text.size());
            report_.response_chars += static_cast<long long>(response.size());
            c.prompt_sha = sha256_hex(text).substr(0, 16);
            c.response_sha = sha256_hex(response).substr(0, 16);
            c.cand.candidate_id = "g" + std::to_string(g) + "c" + std::to_string(i);
            c.cand.generation = g;
            c.cand.prompt_version_id = prompt_copy.version_id;
            if (c.parent) c.cand.parent_id = c.parent->candidate_id;
            if (auto code = extract_code_block(response)) {
                c.cand.source = *code;
                c.has_code = true;
                c.job.source = *code;
            } else {
                c.job.report = EvalReport{};
                c.job.report->result.status = EvalStatus::CompileFail;
                c.job.report->result.log = "no code block";
            }
        }
        GenerationSummary sum = settle(kids, g);

        const auto mig = archive_.migrate(g, cfg_.migration_period);
        for (const auto& ev : mig.accepted()) {
            ++report_.migrations_accepted;
            const KernelCandidate* m = archive_.elite(ev.target);
            if (m && results_.count(ev.donor_id)) results_[m->candidate_id] = results_.at(ev.donor_id);
        }
        prune_results();

        if (be_.meta && should_update_prompt(g, cfg_.prompt_update_frequency) && !recent_.empty()) meta_update(g);

        generation_ = g;
        snapshot("evolve");
        sum.best_fitness = archive_.best() ? archive_.best()->fitness : 0.0;
        sum.occupancy = archive_.occupancy();
        sum.prompt_version = prompts_.latest().version_id;
        if (ctx_.on_generation) ctx_.on_generation(sum);
    }

    std::optional<KernelSnapshot> snapshot_of(const KernelCandidate& k) const {
        KernelSnapshot s{k.source, std::nullopt, ""};
        if (auto it = results_.find(k.candidate_id); it != results_.end()) {
            s.runtime_ms = it->second.runtime_ms;
            s.log = it->second.log;
        }
        return s;
    }

    // Evaluates, classifies, inserts and records a batch of children.
    GenerationSummary settle(std::vector<Child>& kids, int g) {
        std::vector<std::pair<std::string, EvalJob*>> pending;
        for (auto& c : kids)
            if (c.has_code) pending.emplace_back(c.cand.candidate_id, &c.job);
        evaluate_all(pending);

        GenerationSummary sum;
        sum.generation = g;
        for (auto& c : kids) {
            const EvalReport& rep = *c.job.report;
            c.cand.fitness = compute_fitness(rep.result, task_.target_speedup);
            c.cand.coord = c.has_code ? classify(c.cand.source, table_, task_.language) : (c.parent ? c.parent->coord : BehavioralCoord{});
            c.cand.eval_record_id = c.cand.candidate_id + "/eval";
            append(RecordKind::Candidate, g,
                   json{{"candidate", c.cand},
                        {"backend", c.backend},
                        {"request_seed", c.request_seed},
                        {"prompt_sha", c.prompt_sha},
                        {"response_sha", c.response_sha}});
            append(RecordKind::Evaluation, g, json{{"candidate_id", c.cand.candidate_id}, {"report", rep}});
            ++report_.candidates_evaluated;
            ++sum.candidates;
            sum.correct += rep.result.status == EvalStatus::Correct;

            InsertOutcome out;
            if (rep.result.status != EvalStatus::CompileFail) {
                out = archive_.insert(c.cand);
                if (out.kind != InsertOutcome::Kind::Rejected) {
                    results_[c.cand.candidate_id] = rep.result;
                    ++sum.inserted;
                }
            }
            if (c.parent) {
                TransitionRecord t;
                t.parent_coord = c.parent->coord;
                t.child_coord = c.cand.coord;
                t.delta_fitness = c.cand.fitness - c.parent->fitness;
                t.outcome = transition_outcome(t.delta_fitness, out.kind != InsertOutcome::Kind::Rejected);
                t.timestamp = g;
                t.iteration = g;
                transitions_.record(t);
                ++report_.transitions_recorded;
                append(RecordKind::Transition, g,
                       json{{"transition", t}, {"parent_id", c.parent->candidate_id}, {"child_id", c.cand.candidate_id},
                            {"insert", to_string(out.kind)}});
            }
            if (prompts_.find(c.cand.prompt_version_id)) prompts_.record_fitness(c.cand.prompt_version_id, c.cand.fitness);
            recent_.push_back({c.cand, rep.result});
            while (static_cast<int>(recent_.size()) > cfg_.meta_recent_limit) recent_.pop_front();
        }
        return sum;
    }

    void prune_results() {
        for (auto it = results_.begin(); it != results_.end();) {
            if (archive_.find(it->first) || (final_id_ && *final_id_ == it->first))
                ++it;
            else
                it = results_.erase(it);
        }
    }

    void meta_update(int g) {
        const PromptState current = prompts_.latest();
        const std::vector<RecentOutcome> recent(recent_.begin(), recent_.end());
        std::vector<std::string> dropped;
        std::vector<PromptDiff> diffs;
        try {
            diffs = request_prompt_update(*be_.meta, cfg_.meta, task_, current, recent, cfg_.max_prompt_mutations,
                                          mix64(cfg_.seed ^ 0x3e7aULL ^ static_cast<std::uint64_t>(g)), &dropped);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::BackendUnavailable) throw Error(ErrorCode::Infrastructure, std::string("meta backend: ") + e.what());
            say(std::string("prompt update skipped: ") + e.what());
            recent_.clear();
            return;
        }
        std::vector<PromptDiff> kept;
        PromptState probe = current;
        for (const auto& d : diffs) {
            try {
                probe = apply_prompt_diff(probe, {d}, cfg_.max_prompt_mutations);
                kept.push_back(d);
            } catch (const Error& e) {
                dropped.push_back(std::string(to_string(e.code())) + ": " + e.what());
            }
        }
        recent_.clear();
        if (kept.empty()) {
            say("prompt update produced no applicable edits");
            return;
        }
        const PromptState next = apply_prompt_diff(current, kept, cfg_.max_prompt_mutations);
        prompts_.add(next);
        append(RecordKind::PromptVersion, g, json{{"state", next}, {"parent", current.version_id}, {"diffs", kept}, {"dropped", dropped}});
    }

    // ---- parameter optimization -----------------------------------------

    void param_opt_iteration(int it) {
        ParamOptStep step;
        step.iteration = it;
        if (!final_kernel_) refresh_report();
        std::optional<KernelSummary> cur = report_.final_kernel;
        if (!cur || cur->result.status != EvalStatus::Correct || !cur->result.runtime_ms) {
            say("parameter optimization skipped: no correct kernel");
            param_iteration_ = it;
            report_.param_opt.push_back(step);
            snapshot("param_opt");
            return;
        }
        const std::string prompt = build_template_prompt(task_.language, cur->source);
        std::vector<Child> kids(static_cast<std::size_t>(cfg_.param_opt_best_of));
        const int ts = cfg_.max_generations + it;
        KernelCandidate parent;
        parent.candidate_id = cur->candidate_id;
        parent.coord = cur->coord;
        parent.fitness = cur->fitness;
        parent.source = cur->source;
        for (int b = 0; b < cfg_.param_opt_best_of; ++b) {
            Child& c = kids[static_cast<std::size_t>(b)];
            c.parent = parent;
            c.request_seed = mix64(cfg_.seed ^ mix64(0x7a3a000ULL + static_cast<std::uint64_t>(it) * 131 + static_cast<std::uint64_t>(b)));
            const std::string response = pick_backend_and_complete(ts, make_request(cfg_.generator, prompt, c.request_seed), c.backend);
            ++report_.generator_requests;
            report_.prompt_chars += static_cast<long long>(prompt.size());
            report_.response_chars += static_cast<long long>(response.size());
            c.prompt_sha = sha256_hex(prompt).substr(0, 16);
            c.response_sha = sha256_hex(response).substr(0, 16);
            c.cand.candidate_id = "p" + std::to_string(it) + "b" + std::to_string(b);
            c.cand.generation = ts;
            c.cand.parent_id = parent.candidate_id;
            c.cand.prompt_version_id = "template-request";
            if (auto code = extract_code_block(response)) {
                c.cand.source = *code;
                c.has_code = true;
                c.job.source = *code;
            } else {
                c.job.report = EvalReport{};
                c.job.report->result.status = EvalStatus::CompileFail;
                c.job.report->result.log = "no code block";
            }
        }
        settle(kids, ts);
        step.variants = static_cast<int>(kids.size());
        const Child* winner = nullptr;
        for (const auto& c : kids) {
            const auto& r = c.job.report->result;
            if (r.status != EvalStatus::Correct || !r.runtime_ms) continue;
            ++step.correct;
            const double best_rt = winner ? *winner->job.report->result.runtime_ms : *cur->result.runtime_ms;
            if (*r.runtime_ms < best_rt) winner = &c;
        }
        if (winner) {
            final_id_ = winner->cand.candidate_id;
            final_kernel_ = KernelSummary{winner->cand.candidate_id, winner->cand.fitness, winner->cand.coord,
                                          winner->job.report->result, winner->cand.source};
            results_[winner->cand.candidate_id] = winner->job.report->result;
            step.adopted_id = winner->cand.candidate_id;
        }
        step.runtime_ms = winner ? winner->job.report->result.runtime_ms : cur->result.runtime_ms;
        prune_results();
        param_iteration_ = it;
        report_.param_opt.push_back(step);
        snapshot("param_opt");
        GenerationSummary sum;
        sum.generation = ts;
        sum.phase = "param_opt";
        sum.candidates = step.variants;
        sum.correct = step.correct;
        sum.best_fitness = archive_.best() ? archive_.best()->fitness : 0.0;
        sum.occupancy = archive_.occupancy();
        sum.prompt_version = prompts_.latest().version_id;
        if (ctx_.on_generation) ctx_.on_generation(sum);
    }

    // ---- report ----------------------------------------------------------

    KernelSummary summary_of(const KernelCandidate& k) const {
        KernelSummary s{k.candidate_id, k.fitness, k.coord, {}, k.source};
        if (auto it = results_.find(k.candidate_id); it != results_.end()) s.result = it->second;
        return s;
    }

    void refresh_report() {
        RunReport& r = report_;
        r.run_id = run_id_;
        r.task_id = task_.task_id;
        r.hardware_profile_id = task_.hardware_profile_id;
        r.seed = cfg_.seed;
        r.target_speedup = task_.target_speedup;
        r.generations_completed = generation_;
        const KernelCandidate* best = archive_.best();
        if (param_iteration_ == 0) {
            r.best_evolved = best ? std::optional<KernelSummary>(summary_of(*best)) : std::nullopt;
            r.final_kernel = r.best_evolved;
        }
        if (final_kernel_) r.final_kernel = final_kernel_;
        if (static_cast<int>(r.best_fitness_history.size()) == generation_ && param_iteration_ == 0) {
            r.best_fitness_history.push_back(best ? best->fitness : 0.0);
            r.occupancy_history.push_back(archive_.occupancy());
        }
        const auto cov = archive_.coverage_stats();
        r.occupancy = cov.occupancy;
        r.mean_fitness = cov.mean_fitness;
        r.prompt_versions = prompts_.size() + prompts_.evicted().size();
        r.prompt_version = prompts_.latest().version_id;
        r.archive = archive_.to_json();
    }

    void finish() {
        refresh_report();
        append(RecordKind::ArchiveSnapshot, generation_ + param_iteration_ + 1, state_json("final"));
        finished_ = true;
    }

    RunConfig cfg_;
    TaskSpec task_;
    Backends be_;
    RunContext& ctx_;
    std::string run_id_;
    PatternTable table_;
    SelectionStrategy strategy_;
    EvalOptions eval_opt_;
    BaselineCache cache_;

    Archive archive_;
    PromptArchive prompts_;
    TransitionBuffer transitions_;
    std::map<std::string, EvaluationResult> results_;  // archive members and the tuned kernel
    std::deque<RecentOutcome> recent_;
    Rng select_rng_, prompt_rng_, ensemble_rng_;
    int generation_ = 0;
    int param_iteration_ = 0;
    int epoch_ = 0;
    bool finished_ = false;
    std::optional<std::string> final_id_;
    std::optional<KernelSummary> final_kernel_;
    RunReport report_;
};

} // namespace detail

// Runs (or resumes) the evolutionary search and the parameter optimization
// phase, persisting every step to `ctx.db` under `run_id`.
inline RunReport run(const RunConfig& cfg, const TaskSpec& task, const Backends& backends, RunContext& ctx,
                     std::string run_id = "") {
    cfg.validate();
    detail::check_task_invariants(task);
    if (run_id.empty()) run_id = default_run_id(task, cfg.seed);
    if (!detail::valid_task_id(run_id)) throw Error(ErrorCode::InvalidConfig, "invalid run id '" + run_id + "'");
    detail::RunEngine engine(cfg, task, backends, ctx, run_id);
    return engine.run();
}

// Single-machine convenience: an in-process queue drained by the orchestrator.
inline RunReport run_in_process(const RunConfig& cfg, const TaskSpec& task, const Backends& backends, EvalBackend& eval,
                                RecordStore& db, std::string run_id = "", bool fresh = false,
                                std::function<void(const GenerationSummary&)> on_generation = {}) {
    InProcessQueue q;
    RunContext ctx;
    ctx.queue = &q;
    ctx.db = &db;
    ctx.inline_backend = &eval;
    ctx.fresh = fresh;
    ctx.on_generation = std::move(on_generation);
    return run(cfg, task, backends, ctx, std::move(run_id));
}

// The report stored by a finished run.
inline RunReport load_report(RecordStore& db, const std::string& run_id) {
    if (!db.exists(run_id)) throw Error(ErrorCode::UnknownRun, run_id);
    const LoadedRun run = db.load(run_id, false);
    for (std::size_t i = run.records.size(); i-- > 0;) {
        const RunRecord& r = run.records[i];
        if (r.kind == RecordKind::ArchiveSnapshot && r.body.at("phase") == "final") return r.body.at("report").get<RunReport>();
    }
    throw Error(ErrorCode::UnknownRun, run_id + " has not finished");
}

} // namespace kforge
