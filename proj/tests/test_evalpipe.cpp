#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include <kforge/evalpipe.hpp>
#include <kforge/prompt_seed.hpp>

using namespace kforge;

namespace {

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

TaskSpec task(const std::string& ref_directive = "# KF-MOCK: time_ms=1.2") {
    TaskSpec t;
    t.task_id = "unit";
    t.language = Language::SYCL;
    t.reference_code = ref_directive + "\nreturn torch.relu(a + b)";
    t.target_speedup = 2.0;
    return t;
}

Artifact mock_artifact(MockEvalBackend& be, const std::string& directive) {
    const auto r = be.compile("// KF-MOCK: " + directive + "\nvoid k() {}", task());
    EXPECT_TRUE(r.ok) << r.log;
    return r.artifact;
}

std::string e2_source(const std::string& extra = "// KF-MOCK[16,16]: time_ms=1.2\n// KF-MOCK[32,8]: time_ms=0.9\n"
                                                 "// KF-MOCK[8,32]: time_ms=1.5\n") {
    return "// KF-MOCK: compile=ok correct=1.0 time_ms=2.0\n" + extra + seed::dispatch_example;
}

// Counts execute calls per configuration.
class CountingBackend : public MockEvalBackend {
public:
    ExecuteResult execute(const Artifact& a, const TaskSpec& t, const ExecuteRequest& r) override {
        ++executes;
        if (r.want_outputs) ++output_runs;
        return MockEvalBackend::execute(a, t, r);
    }
    CompileResult compile(const std::string& s, const TaskSpec& t) override {
        ++compiles;
        return MockEvalBackend::compile(s, t);
    }
    std::atomic<int> executes{0}, output_runs{0}, compiles{0};
};

} // namespace

TEST(PlanSchedule, HalfMillisecond) {
    const auto s = plan_schedule(0.0005, BenchConstraints{});
    EXPECT_EQ(s.warmup_iters, 2000);
    EXPECT_EQ(s.inner_loop, 20);
    EXPECT_EQ(s.main_iters, 2000);
}

TEST(PlanSchedule, SlowIterations) {
    const auto s = plan_schedule(0.2, BenchConstraints{});
    EXPECT_EQ(s.warmup_iters, 10);
    EXPECT_EQ(s.inner_loop, 1);
    EXPECT_EQ(s.main_iters, 10);
    EXPECT_EQ(plan_schedule(1.0, BenchConstraints{}), (BenchSchedule{10, 10, 1}));
}

TEST(PlanSchedule, RoundsMainUpToInnerMultiple) {
    const auto s = plan_schedule(0.003, BenchConstraints{});
    EXPECT_EQ(s.inner_loop, 4);
    EXPECT_EQ(s.main_iters % s.inner_loop, 0);
    EXPECT_GE(s.main_iters, 334);
}

TEST(PlanSchedule, NonPositiveTime) {
    EXPECT_EQ(code_of([] { plan_schedule(0.0, BenchConstraints{}); }), ErrorCode::NonPositiveTime);
    EXPECT_EQ(code_of([] { plan_schedule(-1.0, BenchConstraints{}); }), ErrorCode::NonPositiveTime);
}

TEST(PlanSchedule, BoundsHoldForRandomCosts) {
    Rng rng(61);
    const BenchConstraints c;
    for (int i = 0; i < 1000; ++i) {
        const double t = std::pow(10.0, -6.0 + 7.0 * rng.uniform01());
        const auto s = plan_schedule(t, c);
        EXPECT_TRUE(s.valid(c));
        EXPECT_GE(s.warmup_iters * t, c.min_warmup_time_s * (1 - 1e-9));
        EXPECT_GE(s.main_iters * t, c.min_main_time_s * (1 - 1e-9));
        EXPECT_GE(s.inner_loop * t, c.inner_loop_min_time_s * (1 - 1e-9));
        // Not more than one extra iteration (or inner chunk) beyond the bound.
        EXPECT_LT((s.warmup_iters - 1) * t, std::max(c.min_warmup_time_s, c.min_warmup_iters * t));
        EXPECT_LT((s.inner_loop - 1) * t, std::max(c.inner_loop_min_time_s, t));
    }
}

TEST(RunBenchmark, ConstantCost) {
    MockEvalBackend be;
    const auto s = run_benchmark(be, mock_artifact(be, "time_ms=1.0"), task(), BenchSchedule{10, 100, 10});
    EXPECT_DOUBLE_EQ(s.mean_ms, 1.0);
    EXPECT_DOUBLE_EQ(s.stddev_ms, 0.0);
    EXPECT_EQ(s.per_iter_ms.size(), 10u);
}

TEST(RunBenchmark, InnerLoopAmortizesSyncOverhead) {
    MockEvalBackend be;
    const Artifact a = mock_artifact(be, "time_ms=1.0 sync_ms=0.5");
    EXPECT_NEAR(run_benchmark(be, a, task(), BenchSchedule{10, 100, 10}).mean_ms, 1.05, 1e-12);
    EXPECT_NEAR(run_benchmark(be, a, task(), BenchSchedule{10, 100, 1}).mean_ms, 1.5, 1e-12);
}

TEST(RunBenchmark, WarmupAbsorbsFirstIterationSpike) {
    MockEvalBackend be;
    const Artifact a = mock_artifact(be, "time_ms=1.0 first_iter_mult=10");
    EXPECT_DOUBLE_EQ(run_benchmark(be, a, task(), BenchSchedule{10, 100, 10}).mean_ms, 1.0);
    EXPECT_GT(run_benchmark(be, a, task(), BenchSchedule{0, 100, 10}).mean_ms, 1.0);
}

TEST(RunBenchmark, FailurePropagatesLog) {
    MockEvalBackend be;
    const Artifact a = mock_artifact(be, "time_ms=1.0 run=crash");
    try {
        run_benchmark(be, a, task(), BenchSchedule{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ExecutionFailure);
        EXPECT_NE(std::string(e.what()).find("run=crash"), std::string::npos);
    }
}

TEST(DetectTemplate, DispatchExample) {
    const auto t = detect_template(seed::dispatch_example);
    ASSERT_TRUE(t);
    EXPECT_EQ(t->parameter_names, (std::vector<std::string>{"block_x", "block_y"}));
    EXPECT_EQ(t->configs, (std::vector<std::vector<long long>>{{16, 16}, {32, 8}, {8, 32}}));
}

TEST(DetectTemplate, PlainKernelIsAbsent) {
    const std::string plain = R"(
torch::Tensor forward(torch::Tensor a, torch::Tensor b) {
    if (a.numel() == 0) return a;
    return a + b;
})";
    EXPECT_FALSE(detect_template(plain));
    EXPECT_FALSE(detect_template("int main() { return 0; }"));
}

TEST(DetectTemplate, NonConstantConditionIsMalformed) {
    const std::string src = R"(
torch::Tensor forward(torch::Tensor a, int block) {
    if (block == a.size(0)) return forward_templated<16>(a);
    TORCH_CHECK(false, "unsupported");
})";
    EXPECT_EQ(code_of([&] { detect_template(src); }), ErrorCode::MalformedDispatch);
    const std::string partial = R"(
torch::Tensor forward(torch::Tensor a, int bx, int by) {
    if (bx == 16) return forward_templated<16, 16>(a);
    TORCH_CHECK(false, "unsupported");
})";
    EXPECT_EQ(code_of([&] { detect_template(partial); }), ErrorCode::MalformedDispatch);
}

TEST(DetectTemplate, IgnoresCommentsCallsAndUnrelatedBranches) {
    const std::string src = R"(
// torch::Tensor forward(torch::Tensor a, int old) { if (old == 1) {} }
torch::Tensor forward(torch::Tensor a, const int64_t tile, int unroll = 1) {
    auto y = helper.forward(a);
    if (!a.is_contiguous()) a = a.contiguous();
    if (tile == 64 && unroll == 4) { return forward_templated<64, 4>(a); }
    /* else if (tile == 1 && unroll == 1) */
    else if (128 == tile && unroll == 2) { return forward_templated<128, 2>(a); }
    else if (tile == 64 && unroll == 4) { return forward_templated<64, 4>(a); }
    TORCH_CHECK(false, "unsupported");
})";
    const auto t = detect_template(src);
    ASSERT_TRUE(t);
    EXPECT_EQ(t->parameter_names, (std::vector<std::string>{"tile", "unroll"}));
    EXPECT_EQ(t->configs, (std::vector<std::vector<long long>>{{64, 4}, {128, 2}}));
}

TEST(Sweep, PicksFastestCorrectConfig) {
    CountingBackend be;
    BaselineCache cache;
    const auto t = detect_template(e2_source());
    ASSERT_TRUE(t);
    const auto [best, sweep] = sweep_parameters(be, e2_source(), task(), *t, cache);
    EXPECT_EQ(best.status, EvalStatus::Correct);
    EXPECT_EQ(best.config_used, (std::vector<long long>{32, 8}));
    EXPECT_NEAR(*best.runtime_ms, 0.9, 1e-12);
    EXPECT_NEAR(*best.speedup, 1.2 / 0.9, 1e-12);
    EXPECT_EQ(sweep.per_config_results.size(), 3u);
    EXPECT_NEAR(*sweep.per_config_results.at({16, 16}).runtime_ms, 1.2, 1e-12);
    EXPECT_NEAR(*sweep.per_config_results.at({8, 32}).runtime_ms, 1.5, 1e-12);
    for (const auto& [cfg, r] : sweep.per_config_results)
        if (r.status == EvalStatus::Correct) EXPECT_LE(*best.runtime_ms, *r.runtime_ms);
    EXPECT_EQ(be.compiles.load(), 1);
    // One output run for the reference plus one per configuration.
    EXPECT_EQ(be.output_runs.load(), 4);
    const std::string log = sweep.log();
    EXPECT_NE(log.find("block_x=16, block_y=16"), std::string::npos);
    EXPECT_NE(log.find("block_x=32, block_y=8"), std::string::npos);
    EXPECT_NE(log.find("block_x=8, block_y=32"), std::string::npos);
}

TEST(Sweep, SkipsConfigThatFailsToBuild) {
    MockEvalBackend be;
    BaselineCache cache;
    const std::string src = e2_source("// KF-MOCK[16,16]: compile=fail\n// KF-MOCK[32,8]: time_ms=0.9\n"
                                      "// KF-MOCK[8,32]: time_ms=0.7\n");
    const auto [best, sweep] = sweep_parameters(be, src, task(), *detect_template(src), cache);
    EXPECT_EQ(sweep.per_config_results.at({16, 16}).status, EvalStatus::CompileFail);
    EXPECT_EQ(best.config_used, (std::vector<long long>{8, 32}));
    EXPECT_NEAR(*best.runtime_ms, 0.7, 1e-12);
}

TEST(Sweep, AllIncorrectKeepsCompleteLog) {
    MockEvalBackend be;
    BaselineCache cache;
    const std::string src = "// KF-MOCK: correct=0.9 time_ms=1.0\n" + std::string(seed::dispatch_example);
    const auto [best, sweep] = sweep_parameters(be, src, task(), *detect_template(src), cache);
    EXPECT_EQ(best.status, EvalStatus::Incorrect);
    EXPECT_NEAR(compute_fitness(best, 2.0), 0.1, 1e-12);
    EXPECT_EQ(sweep.per_config_results.size(), 3u);
}

TEST(Sweep, EvaluateRoutesTemplatedSources) {
    MockEvalBackend be;
    BaselineCache cache;
    const EvalReport rep = evaluate_detailed(be, e2_source(), task(), cache);
    ASSERT_TRUE(rep.sweep);
    EXPECT_EQ(rep.result.config_used, (std::vector<long long>{32, 8}));
    EXPECT_NE(rep.result.log.find("template sweep over 3 configurations"), std::string::npos);
}

TEST(Evaluate, FastKernelIsCorrectWithSpeedup) {
    MockEvalBackend be;
    BaselineCache cache;
    const auto r = evaluate(be, "// KF-MOCK: compile=ok correct=1.0 time_ms=0.6\n", task(), cache);
    EXPECT_EQ(r.status, EvalStatus::Correct);
    EXPECT_NEAR(r.baseline_ms, 1.2, 1e-12);
    EXPECT_NEAR(*r.speedup, 2.0, 1e-12);
    EXPECT_NEAR(compute_fitness(r, 2.0), 1.0, 1e-12);
    ASSERT_TRUE(r.cosine_sim);
    EXPECT_NEAR(*r.cosine_sim, 1.0, 1e-12);
}

TEST(Evaluate, CompileFailCarriesLog) {
    MockEvalBackend be;
    BaselineCache cache;
    const auto r = evaluate(be, "// KF-MOCK: compile=fail\n", task(), cache);
    EXPECT_EQ(r.status, EvalStatus::CompileFail);
    EXPECT_NE(r.log.find("error"), std::string::npos);
    EXPECT_EQ(compute_fitness(r, 2.0), 0.0);
    EXPECT_EQ(evaluate(be, "no directive at all", task(), cache).status, EvalStatus::CompileFail);
}

TEST(Evaluate, SlowButCorrect) {
    MockEvalBackend be;
    BaselineCache cache;
    const auto r = evaluate(be, "// KF-MOCK: correct=1.0 time_ms=2.4\n", task(), cache);
    EXPECT_EQ(r.status, EvalStatus::Correct);
    EXPECT_NEAR(*r.speedup, 0.5, 1e-12);
    EXPECT_NEAR(compute_fitness(r, 2.0), 0.625, 1e-12);
}

TEST(Evaluate, IncorrectOutputs) {
    MockEvalBackend be;
    BaselineCache cache;
    const auto r = evaluate(be, "// KF-MOCK: correct=0.98 time_ms=0.5\n", task(), cache);
    EXPECT_EQ(r.status, EvalStatus::Incorrect);
    ASSERT_TRUE(r.nu_stats);
    EXPECT_NEAR(r.nu_stats->violation_fraction, 0.02, 1e-12);
    EXPECT_FALSE(r.speedup);
    EXPECT_EQ(evaluate(be, "// KF-MOCK: correct=0.995 time_ms=0.5\n", task(), cache).status, EvalStatus::Correct);
    EXPECT_EQ(evaluate(be, "// KF-MOCK: run=segfault\n", task(), cache).status, EvalStatus::Incorrect);
}

TEST(Evaluate, CosineGate) {
    MockEvalBackend be;
    BaselineCache cache;
    TaskSpec t = task();
    t.test_config.cosine_gate = true;
    t.test_config.cosine_min = 0.99999;
    EXPECT_EQ(evaluate(be, "// KF-MOCK: correct=0.995 time_ms=0.5\n", t, cache).status, EvalStatus::Incorrect);
    EXPECT_EQ(evaluate(be, "// KF-MOCK: correct=1.0 time_ms=0.5\n", t, cache).status, EvalStatus::Correct);
}

TEST(Evaluate, BaselineUsesSameRuleAsCandidate) {
    MockEvalBackend be;
    BaselineCache cache;
    const auto rep = evaluate_detailed(be, "// KF-MOCK: time_ms=0.0005\n", task(), cache);
    ASSERT_TRUE(rep.bench && rep.baseline_bench);
    EXPECT_EQ(rep.baseline_bench->schedule, plan_schedule(0.0012, BenchConstraints{}));
    EXPECT_EQ(rep.bench->schedule, plan_schedule(0.0000005, BenchConstraints{}));
    EXPECT_EQ(rep.baseline_bench->trial_ms.size(), 3u);
    EXPECT_EQ(rep.bench->trial_ms.size(), 3u);
}

TEST(Evaluate, MedianTrialIgnoresFirstIterationSpike) {
    MockEvalBackend be;
    BaselineCache cache;
    const auto rep = evaluate_detailed(be, "// KF-MOCK: time_ms=1.0 first_iter_mult=10\n", task(), cache);
    EXPECT_EQ(rep.bench->schedule, plan_schedule(0.001, BenchConstraints{}));
    EXPECT_NEAR(*rep.result.runtime_ms, 1.0, 1e-12);
}

TEST(Evaluate, BaselineFallsBackToCandidateBaseMs) {
    MockEvalBackend be;
    BaselineCache cache;
    const TaskSpec t = task("# nothing here");
    EXPECT_NEAR(evaluate(be, "// KF-MOCK: time_ms=0.5 base_ms=1.5\n", t, cache).baseline_ms, 1.5, 1e-12);
    EXPECT_NEAR(evaluate(be, "// KF-MOCK: time_ms=0.5\n", t, cache).baseline_ms, 1.0, 1e-12);
}

TEST(Evaluate, HardwareProfileOverride) {
    MockEvalBackend be;
    BaselineCache cache;
    TaskSpec t = task();
    const std::string src = "// KF-MOCK: time_ms=0.6 time_ms@lnl=0.9\n";
    EXPECT_NEAR(*evaluate(be, src, t, cache).runtime_ms, 0.6, 1e-12);
    t.hardware_profile_id = "lnl";
    EXPECT_NEAR(*evaluate(be, src, t, cache).runtime_ms, 0.9, 1e-12);
}

TEST(Evaluate, BitReproducible) {
    MockEvalBackend be1, be2;
    BaselineCache c1, c2;
    for (const std::string& src : std::vector<std::string>{"// KF-MOCK: time_ms=0.7 sync_ms=0.03\n", e2_source(), "// KF-MOCK: correct=0.5\n"}) {
        const auto a = evaluate_detailed(be1, src, task(), c1);
        const auto b = evaluate_detailed(be2, src, task(), c2);
        EXPECT_EQ(json(a).dump(), json(b).dump());
    }
}

TEST(Evaluate, BaselineComputedOnceUnderConcurrency) {
    CountingBackend be;
    BaselineCache cache;
    std::vector<std::thread> threads;
    std::vector<EvaluationResult> results(8);
    for (int i = 0; i < 8; ++i)
        threads.emplace_back([&, i] {
            results[static_cast<std::size_t>(i)] =
                evaluate(be, "// KF-MOCK: time_ms=0." + std::to_string(5 + i) + "\n", task(), cache);
        });
    for (auto& th : threads) th.join();
    EXPECT_EQ(cache.computations(), 1);
    for (const auto& r : results) EXPECT_NEAR(r.baseline_ms, 1.2, 1e-12);
}

TEST(EvalReportJson, RoundTrip) {
    MockEvalBackend be;
    BaselineCache cache;
    const auto rep = evaluate_detailed(be, e2_source(), task(), cache);
    const json j = rep;
    EXPECT_EQ(json(j.get<EvalReport>()).dump(), j.dump());
}

TEST(ExternalBackend, SpeaksAdapterProtocol) {
    const std::string cmd = "python3 '" + std::string(KF_SOURCE_DIR) + "/tests/data/fake_adapter.py'";
    ExternalBackend be(cmd);
    BaselineCache cache;
    const auto ok = evaluate(be, "kernel // FAKE time_ms=0.5", task(), cache);
    EXPECT_EQ(ok.status, EvalStatus::Correct) << ok.log;
    EXPECT_NEAR(ok.baseline_ms, 2.0, 1e-12);
    EXPECT_NEAR(*ok.speedup, 4.0, 1e-12);
    const auto bad = evaluate(be, "FAKE_FAIL", task(), cache);
    EXPECT_EQ(bad.status, EvalStatus::CompileFail);
    EXPECT_NE(bad.log.find("undeclared identifier"), std::string::npos);
    ExternalBackend broken("false");
    const auto br = evaluate(broken, "x", task(), cache);
    EXPECT_EQ(br.status, EvalStatus::CompileFail);
    EXPECT_NE(br.log.find("exited"), std::string::npos);
}
