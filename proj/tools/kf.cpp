// kf: run searches, host the job queue, run workers, and print reports.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <thread>

#include <unistd.h>

#include <CLI11.hpp>
#include <yaml-cpp/yaml.h>

#include <kforge/chat_http.hpp>
#include <kforge/classifier.hpp>
#include <kforge/orchestrator.hpp>
#include <kforge/remote.hpp>
#include <kforge/report.hpp>

using namespace kforge;
namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

void install_signal_handlers() {
    struct sigaction sa {};
    sa.sa_handler = on_signal;
    sigemptyset(&sa.sa_mask);
    sigaction(SIGTERM, &sa, nullptr);
    sigaction(SIGINT, &sa, nullptr);
}

// Exit codes: 2 for bad input (missing task, invalid config), 1 for everything else.
int exit_code_for(ErrorCode c) {
    switch (c) {
        case ErrorCode::InvalidConfig:
        case ErrorCode::MissingField:
        case ErrorCode::MalformedPatternTable:
        case ErrorCode::UnknownRun: return 2;
        default: return 1;
    }
}

json yaml_to_json(const YAML::Node& n) {
    switch (n.Type()) {
        case YAML::NodeType::Map: {
            json j = json::object();
            for (const auto& kv : n) j[kv.first.as<std::string>()] = yaml_to_json(kv.second);
            return j;
        }
        case YAML::NodeType::Sequence: {
            json j = json::array();
            for (const auto& v : n) j.push_back(yaml_to_json(v));
            return j;
        }
        case YAML::NodeType::Scalar: {
            if (n.Tag() == "!") return n.as<std::string>();  // quoted
            const std::string s = n.as<std::string>();
            if (s == "true" || s == "false") return s == "true";
            if (s == "null" || s == "~") return nullptr;
            long long i;
            if (YAML::convert<long long>::decode(n, i)) return i;
            double d;
            if (YAML::convert<double>::decode(n, d)) return d;
            return s;
        }
        default: return nullptr;
    }
}

// JSON is read as JSON; anything else as YAML.
json read_config_file(const fs::path& p) {
    const std::string text = detail::read_file(p);
    if (p.extension() == ".json") return json::parse(text);
    return yaml_to_json(YAML::Load(text));
}

std::string default_db_path() {
    if (const char* e = std::getenv("KF_DB_PATH")) return e;
    return "kf-runs";
}

void write_file(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << text;
        if (!out) throw Error(ErrorCode::Infrastructure, "cannot write " + tmp.string());
    }
    fs::rename(tmp, p);
}

struct BackendArgs {
    std::string backend = "mock";
    std::string adapter;
    std::string generator_url, strong_url, meta_url;
    std::string api_key_env = "KF_API_KEY";
};

std::unique_ptr<EvalBackend> make_eval_backend(const BackendArgs& a) {
    if (a.backend == "mock") return std::make_unique<MockEvalBackend>();
    if (a.adapter.empty()) throw Error(ErrorCode::InvalidConfig, "--backend external needs --adapter <command>");
    return std::make_unique<ExternalBackend>(a.adapter);
}

// ---------------------------------------------------------------------------
// run

struct RunArgs {
    std::string task, config, db_path, queue_url, run_id, out, profile;
    bool distributed = false, fresh = false;
    std::optional<std::uint64_t> seed;
    std::optional<int> generations, population, bins, islands, migration_period, prompt_update_frequency,
        max_prompt_mutations, prompt_archive_size, param_opt_iterations, param_opt_best_of, initial_trials, max_tokens;
    std::optional<double> target_speedup, temperature, top_p, job_timeout_s;
    std::optional<std::string> prompt_mode, generator_model, meta_model;
    double lease_s = 300;
    BackendArgs be;
};

void add_run_options(CLI::App* cmd, RunArgs& a) {
    cmd->add_option("--task", a.task, "Task directory")->required();
    cmd->add_option("--config", a.config, "Run config file (YAML or JSON); flags override it");
    cmd->add_option("--backend", a.be.backend, "Generator and evaluator backends")->check(CLI::IsMember({"mock", "external"}));
    cmd->add_option("--adapter", a.be.adapter, "Evaluation adapter command for --backend external");
    cmd->add_option("--generator-url", a.be.generator_url, "Chat endpoint of the code generator");
    cmd->add_option("--strong-url", a.be.strong_url, "Chat endpoint used for the first generation");
    cmd->add_option("--meta-url", a.be.meta_url, "Chat endpoint of the meta-prompter");
    cmd->add_option("--api-key-env", a.be.api_key_env, "Environment variable holding the API key");
    cmd->add_option("--seed", a.seed);
    cmd->add_flag("--distributed", a.distributed, "Dispatch jobs to workers through --queue-url");
    cmd->add_option("--queue-url", a.queue_url, "Queue server, e.g. http://127.0.0.1:7070");
    cmd->add_option("--db-path", a.db_path, "Run database directory (default $KF_DB_PATH or ./kf-runs)");
    cmd->add_option("--run-id", a.run_id, "Run id (default <task>-s<seed>)");
    cmd->add_flag("--fresh", a.fresh, "Discard an existing run with the same id instead of resuming");
    cmd->add_option("--out", a.out, "Report file (default <db-path>/<run-id>.report.json)");
    cmd->add_option("--profile", a.profile, "Override the task's hardware profile");
    cmd->add_option("--lease-s", a.lease_s, "Job lease in seconds");
    cmd->add_option("--job-timeout-s", a.job_timeout_s, "Give up on a job after this long (0 waits forever)");
    cmd->add_option("--generations", a.generations);
    cmd->add_option("--population", a.population);
    cmd->add_option("--target-speedup", a.target_speedup);
    cmd->add_option("--bins", a.bins);
    cmd->add_option("--islands", a.islands);
    cmd->add_option("--migration-period", a.migration_period);
    cmd->add_option("--prompt-update-frequency", a.prompt_update_frequency);
    cmd->add_option("--max-prompt-mutations", a.max_prompt_mutations);
    cmd->add_option("--prompt-archive-size", a.prompt_archive_size);
    cmd->add_option("--prompt-mode", a.prompt_mode)->check(CLI::IsMember({"latest", "sample"}));
    cmd->add_option("--param-opt-iterations", a.param_opt_iterations);
    cmd->add_option("--param-opt-best-of", a.param_opt_best_of);
    cmd->add_option("--initial-trials", a.initial_trials);
    cmd->add_option("--generator-model", a.generator_model);
    cmd->add_option("--meta-model", a.meta_model);
    cmd->add_option("--temperature", a.temperature);
    cmd->add_option("--top-p", a.top_p);
    cmd->add_option("--max-tokens", a.max_tokens);
}

RunConfig effective_config(const RunArgs& a) {
    json j = a.config.empty() ? json::object() : read_config_file(a.config);
    RunConfig c = j.get<RunConfig>();
    auto set = [](auto& field, const auto& v) {
        if (v) field = *v;
    };
    set(c.seed, a.seed);
    set(c.max_generations, a.generations);
    set(c.population_per_generation, a.population);
    if (a.target_speedup) c.target_speedup = a.target_speedup;
    set(c.bins, a.bins);
    set(c.islands, a.islands);
    set(c.migration_period, a.migration_period);
    set(c.prompt_update_frequency, a.prompt_update_frequency);
    set(c.max_prompt_mutations, a.max_prompt_mutations);
    set(c.prompt_archive_size, a.prompt_archive_size);
    set(c.prompt_mode, a.prompt_mode);
    set(c.param_opt_iterations, a.param_opt_iterations);
    set(c.param_opt_best_of, a.param_opt_best_of);
    set(c.initial_trials, a.initial_trials);
    set(c.generator.model, a.generator_model);
    set(c.meta.model, a.meta_model);
    set(c.generator.temperature, a.temperature);
    set(c.generator.top_p, a.top_p);
    set(c.generator.max_tokens, a.max_tokens);
    c.validate();
    return c;
}

int cmd_run(const RunArgs& a) {
    if (!fs::is_directory(a.task)) {
        std::cerr << "kf run: task directory not found: " << a.task << "\n";
        return 2;
    }
    TaskSpec task = load_task_dir(a.task);
    if (!a.profile.empty()) task.hardware_profile_id = a.profile;
    const RunConfig cfg = effective_config(a);

    std::vector<std::unique_ptr<ChatBackend>> owned;
    Backends be;
    if (a.be.backend == "mock") {
        const auto bank = MockGeneratorBackend::load_bank(fs::path(a.task) / "mock_bank");
        owned.push_back(std::make_unique<MockGeneratorBackend>(bank, "mock-generator"));
        be.generators = {owned.back().get()};
        owned.push_back(std::make_unique<MockGeneratorBackend>(bank, "mock-strong"));
        be.first_generation = owned.back().get();
        owned.push_back(std::make_unique<MockMetaBackend>());
        be.meta = owned.back().get();
    } else {
        if (a.be.generator_url.empty()) throw Error(ErrorCode::InvalidConfig, "--backend external needs --generator-url");
        owned.push_back(std::make_unique<HttpChatBackend>(a.be.generator_url, a.be.api_key_env));
        be.generators = {owned.back().get()};
        if (!a.be.strong_url.empty()) {
            owned.push_back(std::make_unique<HttpChatBackend>(a.be.strong_url, a.be.api_key_env));
            be.first_generation = owned.back().get();
        }
        if (!a.be.meta_url.empty()) {
            owned.push_back(std::make_unique<HttpChatBackend>(a.be.meta_url, a.be.api_key_env));
            be.meta = owned.back().get();
        }
    }

    const std::string run_id = a.run_id.empty() ? default_run_id(task, cfg.seed) : a.run_id;
    const bool explicit_db = !a.db_path.empty() || std::getenv("KF_DB_PATH");
    const std::string db_path = a.db_path.empty() ? default_db_path() : a.db_path;

    std::unique_ptr<RecordStore> db;
    std::unique_ptr<JobQueue> queue;
    std::unique_ptr<EvalBackend> eval;
    RunContext ctx;
    if (a.distributed) {
        if (a.queue_url.empty()) throw Error(ErrorCode::InvalidConfig, "--distributed needs --queue-url");
        queue = std::make_unique<RemoteQueue>(a.queue_url);
        // Without an explicit local path the server's run database is used.
        if (explicit_db)
            db = std::make_unique<FileRunDb>(db_path);
        else
            db = std::make_unique<RemoteRecordStore>(a.queue_url);
    } else {
        queue = std::make_unique<InProcessQueue>();
        db = std::make_unique<FileRunDb>(db_path);
        eval = make_eval_backend(a.be);
        ctx.inline_backend = eval.get();
    }
    ctx.queue = queue.get();
    ctx.db = db.get();
    ctx.lease_s = a.lease_s;
    if (a.job_timeout_s) ctx.job_timeout_s = *a.job_timeout_s;
    ctx.fresh = a.fresh;
    ctx.on_generation = [&](const GenerationSummary& s) {
        std::fprintf(stderr, "[%s] %-9s gen %3d  candidates %2d  correct %2d  inserted %2d  best %.4f  cells %2zu  prompt %s\n",
                     run_id.c_str(), s.phase.c_str(), s.generation, s.candidates, s.correct, s.inserted, s.best_fitness,
                     s.occupancy, s.prompt_version.substr(0, 12).c_str());
    };
    ctx.log = [](const std::string& m) { std::fprintf(stderr, "kf: %s\n", m.c_str()); };

    const RunReport rep = run(cfg, task, be, ctx, run_id);
    const fs::path out = a.out.empty() ? fs::path(db_path) / (run_id + ".report.json") : fs::path(a.out);
    write_file(out, json(rep).dump(2) + "\n");

    const TaskRow row = row_from_report(rep);
    std::cout << format_table({row}, aggregate({row}));
    std::cout << "report: " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// worker

struct WorkerArgs {
    std::string queue_url, profile = "default", worker_id, db_path, port_file, host = "127.0.0.1";
    int port = 0;
    double lease_s = 300;
    int max_retries = 2;
    bool exit_when_idle = false;
    BackendArgs be;
};

int cmd_server(const WorkerArgs& a) {
    QueueOptions opt;
    opt.default_lease_s = a.lease_s;
    opt.max_retries = a.max_retries;
    std::shared_ptr<RecordStore> db;
    if (!a.db_path.empty()) db = std::make_shared<FileRunDb>(a.db_path);
    QueueServer server(opt, db);
    const int port = server.start(a.host, a.port);
    if (!a.port_file.empty()) write_file(a.port_file, std::to_string(port) + "\n");
    std::fprintf(stderr, "kf: queue server listening on %s:%d\n", a.host.c_str(), port);
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    server.stop();
    return 0;
}

int cmd_worker(JobKind kind, const WorkerArgs& a) {
    if (a.queue_url.empty()) throw Error(ErrorCode::InvalidConfig, "workers need --queue-url");
    auto eval = make_eval_backend(a.be);
    RemoteQueue q(a.queue_url);
    WorkerOptions opt;
    opt.kind = kind;
    opt.profile = a.profile;
    opt.worker_id = a.worker_id.empty() ? std::string(to_string(kind)) + "-" + std::to_string(::getpid()) : a.worker_id;
    opt.lease_s = a.lease_s;
    opt.exit_when_idle = a.exit_when_idle;
    auto log = [&](const std::string& m) { std::fprintf(stderr, "kf %s: %s\n", opt.worker_id.c_str(), m.c_str()); };
    // A job in flight at shutdown has had its lease released; leave without finishing it.
    const int done = run_worker(q, *eval, opt, g_stop, [] { std::_Exit(143); }, log);
    log("stopped after " + std::to_string(done) + " jobs");
    return 0;
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
    std::vector<std::string> runs;
    std::string db_path, out;
    bool all = false, crossover = false;
    BackendArgs be;
};

int cmd_report(const ReportArgs& a) {
    FileRunDb db(a.db_path.empty() ? default_db_path() : a.db_path);
    std::vector<std::string> ids = a.runs;
    if (a.all) {
        for (const auto& id : db.runs()) {
            try {
                load_report(db, id);
                ids.push_back(id);
            } catch (const Error&) {
            }
        }
    }
    if (ids.empty()) throw Error(ErrorCode::UnknownRun, "no finished runs given");
    std::vector<RunReport> reports;
    for (const auto& id : ids) reports.push_back(load_report(db, id));

    if (a.crossover) {
        std::map<std::string, std::vector<RunReport>> by_profile;
        for (const auto& r : reports) by_profile[r.hardware_profile_id].push_back(r);
        if (by_profile.size() != 2)
            throw Error(ErrorCode::InvalidConfig, "crossover needs runs from exactly two hardware profiles, got " +
                                                      std::to_string(by_profile.size()));
        const auto& [pa, runs_a] = *by_profile.begin();
        const auto& [pb, runs_b] = *by_profile.rbegin();
        std::map<std::string, TaskSpec> tasks;
        for (const auto& r : reports) tasks.emplace(r.task_id, task_of_run(db, r.run_id));
        auto eval = make_eval_backend(a.be);
        BaselineCache cache;
        const auto rows = crossover_rows(runs_a, runs_b, [&](const std::string& task_id, const std::string& profile, const KernelSummary& k) {
            return time_on_profile(*eval, tasks.at(task_id), profile, k, cache);
        });
        const std::string table = format_crossover(rows, pa, pb);
        std::cout << table;
        if (!a.out.empty()) {
            json j = json::array();
            for (const auto& r : rows)
                j.push_back({{"task_id", r.task_id},
                             {pa, {{"own", r.a_on_a}, {"other", r.b_on_a}, {"hws", r.hws_a}}},
                             {pb, {{"own", r.b_on_b}, {"other", r.a_on_b}, {"hws", r.hws_b}}}});
            write_file(fs::path(a.out) / "crossover.txt", table);
            write_file(fs::path(a.out) / "crossover.json", j.dump(2) + "\n");
        }
        return 0;
    }

    std::vector<TaskRow> rows, replayed;
    for (const auto& r : reports) {
        rows.push_back(row_from_report(r));
        replayed.push_back(row_from_records(db, r));
    }
    const Aggregate agg = aggregate(rows);
    const std::string table = format_table(rows, agg);
    std::cout << table;

    std::vector<std::string> problems = check_consistency(db, reports);
    if (!(aggregate(replayed) == agg)) problems.push_back("aggregate recomputed from evaluation records differs");
    for (const auto& p : problems) std::cerr << "kf report: inconsistent: " << p << "\n";

    if (!a.out.empty()) {
        const fs::path dir(a.out);
        write_file(dir / "table.txt", table);
        json summary = summary_json(rows, agg);
        summary["consistent"] = problems.empty();
        write_file(dir / "summary.json", summary.dump(2) + "\n");
        const std::pair<Dimension, Dimension> planes[] = {
            {Dimension::Mem, Dimension::Algo}, {Dimension::Mem, Dimension::Sync}, {Dimension::Algo, Dimension::Sync}};
        for (const auto& r : reports)
            for (const auto& [x, y] : planes)
                write_file(dir / (r.run_id + "." + to_string(x) + "_" + to_string(y) + ".tsv"), heatmap_tsv(r.archive, x, y));
    }
    return problems.empty() ? 0 : 1;
}

// ---------------------------------------------------------------------------
// patterns

struct PatternArgs {
    std::string language = "SYCL", table;
    std::vector<std::string> files;
};

int cmd_patterns(const PatternArgs& a) {
    const Language lang = parse_language(a.language);
    const PatternTable table = a.table.empty() ? default_pattern_table(lang) : PatternTable::parse(detail::read_file(a.table));
    if (a.files.empty()) {
        if (!a.table.empty()) {
            std::cout << a.table << ": ok\n";
            return 0;
        }
        switch (lang) {
            case Language::SYCL: std::cout << detail::sycl_pattern_table; break;
            case Language::CUDA: std::cout << detail::cuda_pattern_table; break;
            case Language::TRITON: std::cout << detail::triton_pattern_table; break;
        }
        return 0;
    }
    for (const auto& f : a.files) {
        const std::string src = detail::read_file(f);
        std::cout << f << " " << classify(src, table, lang).str();
        for (Dimension d : {Dimension::Mem, Dimension::Algo, Dimension::Sync}) {
            const DimensionScore s = dimension_score(src, table, d, lang);
            std::printf("  %s=%d (%.2f)", to_string(d), s.level, s.score);
            std::fflush(stdout);
        }
        std::cout << "\n";
    }
    return 0;
}

void add_backend_options(CLI::App* cmd, BackendArgs& be) {
    cmd->add_option("--backend", be.backend, "Evaluation backend")->check(CLI::IsMember({"mock", "external"}));
    cmd->add_option("--adapter", be.adapter, "Evaluation adapter command for --backend external");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"kf: quality-diversity search for GPU kernels"};
    app.require_subcommand(1);

    RunArgs run_args;
    auto* run_cmd = app.add_subcommand("run", "Start or resume a search run");
    add_run_options(run_cmd, run_args);

    WorkerArgs wa;
    auto* worker_cmd = app.add_subcommand("worker", "Queue server and job workers");
    worker_cmd->require_subcommand(1);
    auto* server_cmd = worker_cmd->add_subcommand("server", "Host the job queue (and optionally the run database)");
    server_cmd->add_option("--host", wa.host);
    server_cmd->add_option("--port", wa.port, "0 picks a free port");
    server_cmd->add_option("--port-file", wa.port_file, "Write the bound port here");
    server_cmd->add_option("--db-path", wa.db_path, "Serve this run database to orchestrators");
    server_cmd->add_option("--lease-s", wa.lease_s, "Default lease");
    server_cmd->add_option("--max-retries", wa.max_retries);
    std::vector<std::pair<CLI::App*, JobKind>> kinds;
    for (auto [name, kind] : {std::pair{"compile", JobKind::Compile}, std::pair{"execute", JobKind::Execute}}) {
        auto* c = worker_cmd->add_subcommand(name, std::string(name) + " worker");
        c->add_option("--queue-url", wa.queue_url)->required();
        c->add_option("--profile", wa.profile, "Hardware profile to claim jobs for");
        c->add_option("--worker-id", wa.worker_id);
        c->add_option("--lease-s", wa.lease_s);
        c->add_flag("--exit-when-idle", wa.exit_when_idle, "Stop once the queue has nothing to claim");
        add_backend_options(c, wa.be);
        kinds.push_back({c, kind});
    }

    ReportArgs ra;
    auto* report_cmd = app.add_subcommand("report", "Tables, heatmaps and summaries of finished runs");
    report_cmd->add_option("runs", ra.runs, "Run ids");
    report_cmd->add_flag("--all", ra.all, "Every finished run in the database");
    report_cmd->add_option("--db-path", ra.db_path);
    report_cmd->add_option("--out", ra.out, "Directory for table, summary and heatmap files");
    report_cmd->add_flag("--crossover", ra.crossover, "Time each kernel on the other profile and print hardware speedups");
    add_backend_options(report_cmd, ra.be);

    PatternArgs pa;
    auto* patterns_cmd = app.add_subcommand("patterns", "Print, check, or apply a descriptor pattern table");
    patterns_cmd->add_option("--language", pa.language);
    patterns_cmd->add_option("--table", pa.table, "Custom table file to check or use");
    patterns_cmd->add_option("files", pa.files, "Kernel sources to classify");

    CLI11_PARSE(app, argc, argv);

    install_signal_handlers();
    try {
        if (*run_cmd) return cmd_run(run_args);
        if (*server_cmd) return cmd_server(wa);
        for (auto& [c, kind] : kinds)
            if (*c) return cmd_worker(kind, wa);
        if (*report_cmd) return cmd_report(ra);
        if (*patterns_cmd) return cmd_patterns(pa);
    } catch (const Error& e) {
        std::cerr << "kf: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "kf: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
