#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <set>
#include <thread>

#include <sys/wait.h>
#include <unistd.h>

#include <kforge/orchestrator.hpp>
#include <kforge/remote.hpp>

using namespace kforge;
namespace fs = std::filesystem;

namespace {

const fs::path kTaskDir = fs::path(KF_SOURCE_DIR) / "tasks" / "mock_add";

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorCode::Infrastructure;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("kf_orch_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

std::vector<BankEntry> bank(bool plain = true, bool templated = true) {
    std::vector<BankEntry> out;
    for (auto& e : MockGeneratorBackend::load_bank(kTaskDir / "mock_bank")) {
        const bool t = e.name.rfind("templated_", 0) == 0;
        if ((t && templated) || (!t && plain)) out.push_back(e);
    }
    return out;
}

RunConfig small(int gens = 10, int pop = 4) {
    RunConfig c;
    c.max_generations = gens;
    c.population_per_generation = pop;
    c.seed = 7;
    return c;
}

struct MockRig {
    TaskSpec task = load_task_dir(kTaskDir);
    MockGeneratorBackend gen{bank(), "mock-generator"};
    MockGeneratorBackend strong{bank(), "mock-strong"};
    MockMetaBackend meta;
    MockEvalBackend eval;
    Backends be() {
        Backends b;
        b.generators = {&gen};
        b.first_generation = &strong;
        b.meta = &meta;
        return b;
    }
};

double best_bank_fitness(const TaskSpec& task) {
    MockEvalBackend eval;
    BaselineCache cache;
    double best = 0;
    std::vector<std::string> sources;
    if (task.initial_kernel) sources.push_back(*task.initial_kernel);
    for (const auto& e : bank(true, false))
        if (auto code = extract_code_block(MockGeneratorBackend({e}).complete(make_request({}, "x", 0)))) sources.push_back(*code);
    for (const auto& s : sources) best = std::max(best, compute_fitness(evaluate(eval, s, task, cache), task.target_speedup));
    return best;
}

std::vector<RunRecord> records_of(RecordStore& db, const std::string& run_id) { return load_run(db, run_id).records; }

} // namespace

TEST(CodeBlock, LastFencedBlockWins) {
    EXPECT_EQ(*extract_code_block("a\n```cpp\nfirst\n```\ntext\n```\nsecond\nline\n```\n"), "second\nline\n");
    EXPECT_FALSE(extract_code_block("no code here"));
    EXPECT_EQ(*extract_code_block("```\nclosed\n```\n```cpp\nunterminated"), "closed\n");
}

TEST(RunConfigTest, DefaultsMatchHyperparameterTable) {
    const RunConfig c;
    EXPECT_EQ(c.max_generations, 40);
    EXPECT_EQ(c.population_per_generation, 8);
    EXPECT_EQ(c.prompt_update_frequency, 10);
    EXPECT_EQ(c.max_prompt_mutations, 3);
    EXPECT_EQ(c.prompt_archive_size, 16);
    EXPECT_DOUBLE_EQ(c.generator.temperature, 0.3);
    EXPECT_DOUBLE_EQ(c.generator.top_p, 1.0);
    EXPECT_EQ(c.generator.max_tokens, 8000);
    EXPECT_EQ(c.param_opt_iterations, 2);
    EXPECT_EQ(c.param_opt_best_of, 8);
    EXPECT_EQ(c.bins, 4);
    EXPECT_DOUBLE_EQ(c.selection.at(SelectionKind::Curiosity), 0.7);
    c.validate();
}

TEST(RunConfigTest, JsonRoundTripAndPartialFiles) {
    RunConfig c = small(3, 2);
    c.target_speedup = 3.0;
    c.prompt_mode = "sample";
    const RunConfig back = json(c).get<RunConfig>();
    EXPECT_EQ(json(back), json(c));
    const RunConfig partial = json{{"max_generations", 5}}.get<RunConfig>();
    EXPECT_EQ(partial.max_generations, 5);
    EXPECT_EQ(partial.population_per_generation, 8);
}

TEST(RunConfigTest, ValidationRejectsBadCounts) {
    RunConfig c;
    c.population_per_generation = 0;
    EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::InvalidConfig);
    c = RunConfig{};
    c.islands = 5;
    EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::InvalidConfig);
    c = RunConfig{};
    c.selection = {{SelectionKind::Uniform, 0.0}};
    EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::AllZeroRatios);
}

TEST(TransitionOutcomeTest, CellDiscoveryDominates) {
    EXPECT_EQ(transition_outcome(-0.1, true), TransitionOutcome::Improvement);
    EXPECT_EQ(transition_outcome(-0.2, false), TransitionOutcome::Regression);
    EXPECT_EQ(transition_outcome(0.0, false), TransitionOutcome::Neutral);
}

TEST(MockBank, CoversFiveDistinctCoordinates) {
    const TaskSpec task = load_task_dir(kTaskDir);
    const PatternTable table = default_pattern_table(task.language);
    std::set<BehavioralCoord> coords;
    for (const auto& e : bank(true, false))
        if (e.name.ends_with(".cpp")) coords.insert(classify(e.text, table, task.language));
    EXPECT_GE(coords.size(), 5u);
}

TEST(Orchestrator, MockRunFillsArchiveAndFindsBestBankKernel) {
    MockRig rig;
    const auto dir = fresh_dir("fill");
    FileRunDb db(dir);
    RunConfig cfg = small(10, 8);
    cfg.param_opt_iterations = 0;
    const RunReport rep = run_in_process(cfg, rig.task, rig.be(), rig.eval, db);
    EXPECT_GE(rep.occupancy, 5u);
    ASSERT_TRUE(rep.best_evolved);
    EXPECT_DOUBLE_EQ(rep.best_evolved->fitness, best_bank_fitness(rig.task));
    fs::remove_all(dir);
}

TEST(Orchestrator, OneGenerationOneCandidate) {
    MockRig rig;
    rig.task.initial_kernel.reset();
    const auto dir = fresh_dir("one");
    FileRunDb db(dir);
    RunConfig cfg = small(1, 1);
    cfg.param_opt_iterations = 0;
    const RunReport rep = run_in_process(cfg, rig.task, rig.be(), rig.eval, db);
    EXPECT_EQ(rep.candidates_evaluated, 1);
    EXPECT_EQ(rep.transitions_recorded, 0);

    // With a seed kernel, the single child has a parent.
    MockRig seeded;
    const RunReport rep2 = run_in_process(cfg, seeded.task, seeded.be(), seeded.eval, db, "seeded");
    int gen1 = 0, transitions = 0;
    for (const auto& r : records_of(db, "seeded")) {
        gen1 += r.kind == RecordKind::Candidate && r.ts == 1;
        transitions += r.kind == RecordKind::Transition;
    }
    EXPECT_EQ(gen1, 1);
    EXPECT_EQ(transitions, 1);
    EXPECT_EQ(rep2.transitions_recorded, 1);
    fs::remove_all(dir);
}

TEST(Orchestrator, RequestCountsAndStrongModelRouting) {
    MockRig rig;
    const auto dir = fresh_dir("routing");
    FileRunDb db(dir);
    RunConfig cfg = small(4, 3);
    cfg.param_opt_iterations = 0;
    std::vector<int> per_gen;
    const RunReport rep = run_in_process(cfg, rig.task, rig.be(), rig.eval, db, "", false,
                                         [&](const GenerationSummary& s) { per_gen.push_back(s.candidates); });
    EXPECT_EQ(rig.strong.call_count(), 3u);
    EXPECT_EQ(rig.gen.call_count(), 9u);
    EXPECT_EQ(per_gen, (std::vector<int>{3, 3, 3, 3}));
    EXPECT_EQ(rep.generator_requests, 12);
    // Every candidate with a parent contributed a transition.
    int with_parent = 0;
    for (const auto& r : records_of(db, rep.run_id))
        if (r.kind == RecordKind::Candidate && !r.body["candidate"]["parent_id"].is_null()) ++with_parent;
    EXPECT_EQ(with_parent, rep.transitions_recorded);
    fs::remove_all(dir);
}

TEST(Orchestrator, BestFitnessNeverDecreasesAndBestIsAnArchiveMember) {
    MockRig rig;
    const auto dir = fresh_dir("monotone");
    FileRunDb db(dir);
    const RunReport rep = run_in_process(small(10, 4), rig.task, rig.be(), rig.eval, db);
    ASSERT_EQ(rep.best_fitness_history.size(), 11u);
    for (std::size_t i = 1; i < rep.best_fitness_history.size(); ++i)
        EXPECT_GE(rep.best_fitness_history[i], rep.best_fitness_history[i - 1]);
    const Archive a = Archive::from_json(rep.archive);
    ASSERT_TRUE(rep.best_evolved);
    EXPECT_NE(a.find(rep.best_evolved->candidate_id), nullptr);
    fs::remove_all(dir);
}

TEST(Orchestrator, PromptEvolvesOnSchedule) {
    MockRig rig;
    const auto dir = fresh_dir("prompt");
    FileRunDb db(dir);
    RunConfig cfg = small(10, 2);
    cfg.prompt_update_frequency = 5;
    cfg.param_opt_iterations = 0;
    const RunReport rep = run_in_process(cfg, rig.task, rig.be(), rig.eval, db);
    EXPECT_EQ(rig.meta.calls(), 2);
    EXPECT_EQ(rep.prompt_versions, 3u);
    // The version forest is recoverable from the records alone.
    std::map<std::string, std::optional<std::string>> parent;
    for (const auto& r : records_of(db, rep.run_id))
        if (r.kind == RecordKind::PromptVersion)
            parent[r.body["state"]["version_id"]] =
                r.body["parent"].is_null() ? std::nullopt : std::optional<std::string>(r.body["parent"].get<std::string>());
    ASSERT_TRUE(parent.count(rep.prompt_version));
    std::string v = rep.prompt_version;
    int depth = 0;
    while (parent.at(v)) {
        v = *parent.at(v);
        ++depth;
    }
    EXPECT_EQ(v, "pv-seed");
    EXPECT_EQ(depth, 2);
    fs::remove_all(dir);
}

TEST(Orchestrator, ParameterOptimizationAdoptsFasterConfig) {
    MockRig rig;
    const auto dir = fresh_dir("paramopt");
    FileRunDb db(dir);
    const RunReport rep = run_in_process(small(10, 8), rig.task, rig.be(), rig.eval, db);
    ASSERT_TRUE(rep.best_evolved && rep.final_kernel);
    ASSERT_EQ(rep.param_opt.size(), 2u);
    ASSERT_TRUE(rep.param_opt[0].adopted_id);
    EXPECT_EQ(rep.final_kernel->candidate_id, *rep.param_opt[0].adopted_id);
    EXPECT_EQ(*rep.final_kernel->result.config_used, (std::vector<long long>{32, 8}));
    const double before = *rep.best_evolved->result.runtime_ms;
    const double after = *rep.final_kernel->result.runtime_ms;
    EXPECT_LT(after, before);
    EXPECT_NEAR(after / before, 0.675 / 0.75, 0.01);
    EXPECT_NE(rep.final_kernel->result.log.find("template sweep over 3 configurations"), std::string::npos);
    fs::remove_all(dir);
}

TEST(Orchestrator, ParameterOptimizationKeepsOriginalWhenVariantsAreSlower) {
    MockRig rig;
    std::vector<BankEntry> b = bank(true, false);
    for (auto& e : bank(false, true))
        if (e.name.find("templated_b") == 0) b.push_back(e);
    MockGeneratorBackend gen(b);
    Backends be = rig.be();
    be.generators = {&gen};
    const auto dir = fresh_dir("paramslow");
    FileRunDb db(dir);
    const RunReport rep = run_in_process(small(10, 8), rig.task, be, rig.eval, db);
    for (const auto& s : rep.param_opt) EXPECT_FALSE(s.adopted_id);
    EXPECT_EQ(rep.final_kernel->candidate_id, rep.best_evolved->candidate_id);
    fs::remove_all(dir);
}

TEST(Orchestrator, ParameterOptimizationRequiresStrictImprovement) {
    MockRig rig;
    // A templated variant whose best configuration costs exactly what the best kernel costs.
    std::vector<BankEntry> b = bank(true, false);
    std::string equal = bank(false, true).front().text;
    equal.replace(equal.find("time_ms=0.675"), 13, "time_ms=0.75");
    b.push_back({"templated_equal.cpp", equal});
    MockGeneratorBackend gen(b);
    Backends be = rig.be();
    be.generators = {&gen};
    const auto dir = fresh_dir("paramequal");
    FileRunDb db(dir);
    const RunReport rep = run_in_process(small(10, 8), rig.task, be, rig.eval, db);
    ASSERT_NEAR(*rep.best_evolved->result.runtime_ms, 0.75, 0.01);
    ASSERT_GT(rep.param_opt[0].correct, 0);
    for (const auto& s : rep.param_opt) EXPECT_FALSE(s.adopted_id);
    EXPECT_EQ(rep.final_kernel->candidate_id, rep.best_evolved->candidate_id);
    fs::remove_all(dir);
}

TEST(Orchestrator, SameSeedSameBytes) {
    const auto d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
    std::string r1, r2;
    for (const auto& d : {d1, d2}) {
        MockRig rig;
        FileRunDb db(d);
        const RunReport rep = run_in_process(small(10, 4), rig.task, rig.be(), rig.eval, db);
        (d == d1 ? r1 : r2) = json(rep).dump();
    }
    EXPECT_EQ(r1, r2);
    EXPECT_EQ(detail::read_file(d1 / "mock_add-s7.kfdb"), detail::read_file(d2 / "mock_add-s7.kfdb"));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Orchestrator, ResumeAfterCrashMatchesUninterruptedRun) {
    const auto ref_dir = fresh_dir("ref"), crash_dir = fresh_dir("crash");
    std::string expected;
    {
        MockRig rig;
        FileRunDb db(ref_dir);
        expected = json(run_in_process(small(6, 3), rig.task, rig.be(), rig.eval, db)).dump();
    }
    for (int cut : {5, 23, 47}) {
        fs::remove_all(crash_dir);
        const pid_t pid = ::fork();
        ASSERT_GE(pid, 0);
        if (pid == 0) {
            ::setenv("KF_FAULT_AFTER_RECORDS", std::to_string(cut).c_str(), 1);
            MockRig rig;
            FileRunDb db(crash_dir);
            run_in_process(small(6, 3), rig.task, rig.be(), rig.eval, db);
            std::_Exit(0);
        }
        int status = 0;
        ::waitpid(pid, &status, 0);
        ASSERT_TRUE(WIFEXITED(status));
        ASSERT_EQ(WEXITSTATUS(status), 137) << "cut " << cut;
        MockRig rig;
        FileRunDb db(crash_dir);
        EXPECT_EQ(json(run_in_process(small(6, 3), rig.task, rig.be(), rig.eval, db)).dump(), expected) << "cut " << cut;
        EXPECT_EQ(json(load_report(db, "mock_add-s7")).dump(), expected);
    }
    fs::remove_all(ref_dir);
    fs::remove_all(crash_dir);
}

TEST(Orchestrator, ResumeWithDifferentConfigIsRejected) {
    const auto dir = fresh_dir("mismatch");
    MockRig rig;
    FileRunDb db(dir);
    run_in_process(small(2, 2), rig.task, rig.be(), rig.eval, db, "r");
    EXPECT_EQ(code_of([&] { run_in_process(small(3, 2), rig.task, rig.be(), rig.eval, db, "r"); }), ErrorCode::InvalidConfig);
    // A finished run with the same config returns its stored report.
    const RunReport again = run_in_process(small(2, 2), rig.task, rig.be(), rig.eval, db, "r");
    EXPECT_EQ(again.generations_completed, 2);
    EXPECT_EQ(code_of([&] { load_report(db, "nope"); }), ErrorCode::UnknownRun);
    fs::remove_all(dir);
}

TEST(Orchestrator, RemoteWorkersProduceTheSameArchive) {
    const auto d1 = fresh_dir("inproc"), d2 = fresh_dir("remote");
    json in_process;
    {
        MockRig rig;
        FileRunDb db(d1);
        in_process = run_in_process(small(5, 4), rig.task, rig.be(), rig.eval, db).archive;
    }
    QueueServer server({300, 2}, std::make_shared<FileRunDb>(d2));
    const std::string url = "http://127.0.0.1:" + std::to_string(server.start());
    std::atomic<bool> stop{false};
    std::vector<std::thread> workers;
    for (JobKind k : {JobKind::Compile, JobKind::Execute, JobKind::Execute})
        workers.emplace_back([&, k] {
            RemoteQueue q(url);
            MockEvalBackend be;
            WorkerOptions opt;
            opt.kind = k;
            opt.poll_ms = 5;
            run_worker(q, be, opt, stop);
        });
    MockRig rig;
    RemoteQueue q(url);
    RemoteRecordStore db(url);
    RunContext ctx;
    ctx.queue = &q;
    ctx.db = &db;
    ctx.poll_ms = 5;
    ctx.job_timeout_s = 60;
    const RunReport rep = run(small(5, 4), rig.task, rig.be(), ctx);
    stop = true;
    for (auto& t : workers) t.join();
    EXPECT_EQ(rep.archive, in_process);
    fs::remove_all(d1);
    fs::remove_all(d2);
}
