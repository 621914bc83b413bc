#include <gtest/gtest.h>

#include <set>
#include <thread>

#include <kforge/chat_http.hpp>
#include <kforge/promptgen.hpp>

using namespace kforge;

namespace {

TaskSpec mock_task() { return load_task_dir(std::filesystem::path(KF_SOURCE_DIR) / "tasks" / "mock_add"); }

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

std::size_t pos(const std::string& hay, const std::string& needle) {
    const auto p = hay.find(needle);
    EXPECT_NE(p, std::string::npos) << needle;
    return p;
}

KernelCandidate cand(const std::string& id, double fitness) {
    KernelCandidate c;
    c.candidate_id = id;
    c.source = "// kernel " + id;
    c.fitness = fitness;
    return c;
}

} // namespace

TEST(BuildPrompt, FirstGenerationHasNoKernelSlots) {
    const TaskSpec t = mock_task();
    const std::string p = build_prompt(t, std::nullopt, std::nullopt, {}, t.hardware_spec, seed_prompt());
    EXPECT_NE(p.find(t.reference_code), std::string::npos);
    EXPECT_NE(p.find(*t.user_instructions), std::string::npos);
    EXPECT_EQ(p.find("Top performing kernel"), std::string::npos);
    EXPECT_EQ(p.find("Last tested kernel"), std::string::npos);
    EXPECT_EQ(p.find("## Examples"), std::string::npos);
    EXPECT_EQ(p.find("{{"), std::string::npos);
    EXPECT_EQ(p.find("\n\n\n"), std::string::npos);
}

TEST(BuildPrompt, SectionsInSkeletonOrder) {
    const TaskSpec t = mock_task();
    const std::string p = build_prompt(t, KernelSnapshot{"top code", 0.5, ""}, KernelSnapshot{"last code", 0.7, "ok"},
                                       {"hint one"}, "HW", seed_prompt(), ExamplePair{"ref ex", "kernel ex"}, true);
    const std::vector<std::string> order{"You are a SYCL programming expert", "## Examples", "## Reference code / Task",
                                         "## Top performing kernel",          "## Last tested kernel",
                                         "## Hardware specification",         "## Main Instructions",
                                         "## Tunable parameters",             "## Optimization strategies",
                                         "## Critical Requirements",          "## Response Format"};
    std::size_t prev = 0;
    for (const auto& s : order) {
        const std::size_t at = pos(p, s);
        EXPECT_GE(at, prev) << s;
        prev = at;
    }
    EXPECT_NE(p.find("(Runtime: 0.5000 ms)"), std::string::npos);
    EXPECT_NE(p.find("kernel.cpp"), std::string::npos);
    EXPECT_NE(p.find("torch.utils.cpp_extension.load()"), std::string::npos);
    EXPECT_NE(p.find("// KF:ALGO=3"), std::string::npos);
}

TEST(BuildPrompt, LastLogAppearsVerbatim) {
    const TaskSpec t = mock_task();
    const std::string log = "compilation error: undeclared identifier";
    const std::string p =
        build_prompt(t, std::nullopt, KernelSnapshot{"bad code", std::nullopt, log}, {}, "HW", seed_prompt());
    const auto last = pos(p, "## Last tested kernel");
    const auto hw = pos(p, "## Hardware specification");
    const auto at = pos(p, log);
    EXPECT_GT(at, last);
    EXPECT_LT(at, hw);
    EXPECT_NE(p.find("Console output from running this kernel"), std::string::npos);
    EXPECT_NE(p.find("(Runtime: n/a)"), std::string::npos);
}

TEST(BuildPrompt, HintsInsideStrategiesRegion) {
    const TaskSpec t = mock_task();
    const std::string p =
        build_prompt(t, std::nullopt, std::nullopt, {"consider adding shared memory tiling"}, "HW", seed_prompt());
    const auto regions = extract_regions(p);
    ASSERT_EQ(regions.size(), 4u);
    EXPECT_NE(regions.at("strategies").find("- consider adding shared memory tiling"), std::string::npos);
    for (const auto& r : {"philosophy", "pitfalls", "analysis_guidance"})
        EXPECT_EQ(regions.at(r).find("shared memory tiling"), std::string::npos);
    EXPECT_EQ(regions.at("pitfalls"), seed_prompt().evolvable.at("pitfalls"));
}

TEST(BuildPrompt, MarkersAreUnique) {
    const TaskSpec t = mock_task();
    const std::string p = build_prompt(t, std::nullopt, std::nullopt, {}, "HW", seed_prompt());
    for (const auto& r : region_names()) {
        EXPECT_EQ(detail::count_occurrences(p, region_begin_marker(r)), 1u);
        EXPECT_EQ(detail::count_occurrences(p, region_end_marker(r)), 1u);
    }
}

TEST(BuildPrompt, DeterministicAndCodeBracesStayLiteral) {
    const TaskSpec t = mock_task();
    const KernelSnapshot top{"auto x = std::vector<int>{{1, 2}};  // {{not_a_slot}}", 1.0, ""};
    const std::string a = build_prompt(t, top, std::nullopt, {"h"}, "HW", seed_prompt());
    const std::string b = build_prompt(t, top, std::nullopt, {"h"}, "HW", seed_prompt());
    EXPECT_EQ(a, b);
    EXPECT_NE(a.find("{{not_a_slot}}"), std::string::npos);
}

TEST(BuildPrompt, TemplateSectionOnlyInTuningMode) {
    const TaskSpec t = mock_task();
    EXPECT_EQ(build_prompt(t, std::nullopt, std::nullopt, {}, "HW", seed_prompt()).find("## Tunable parameters"),
              std::string::npos);
    EXPECT_NE(build_prompt(t, std::nullopt, std::nullopt, {}, "HW", seed_prompt(), std::nullopt, true)
                  .find("## Tunable parameters"),
              std::string::npos);
}

TEST(BuildPrompt, UnfilledSlotIsRenderError) {
    const TaskSpec t = mock_task();
    PromptState s = seed_prompt();
    s.fixed_scaffold += "\n{{no_such_slot}}\n";
    EXPECT_EQ(code_of([&] { build_prompt(t, std::nullopt, std::nullopt, {}, "HW", s); }), ErrorCode::RenderError);
    PromptState broken = seed_prompt();
    broken.evolvable.erase("pitfalls");
    EXPECT_EQ(code_of([&] { build_prompt(t, std::nullopt, std::nullopt, {}, "HW", broken); }), ErrorCode::RenderError);
}

TEST(BuildPrompt, TritonUsesPythonFile) {
    TaskSpec t = mock_task();
    t.language = Language::TRITON;
    const std::string p = build_prompt(t, std::nullopt, std::nullopt, {}, "HW", seed_prompt());
    EXPECT_NE(p.find("kernel.py"), std::string::npos);
    EXPECT_NE(p.find("`# KF:ALGO=3"), std::string::npos);
    EXPECT_EQ(p.find("cpp_extension"), std::string::npos);
}

TEST(RenderTemplate, Sections) {
    EXPECT_EQ(render_template("a\n{{#x}}\nX={{x}}\n{{/x}}\nb", {{"x", "1"}}), "a\nX=1\nb");
    EXPECT_EQ(render_template("a\n{{#x}}\nX={{x}}\n{{/x}}\nb", {}), "a\nb");
    EXPECT_EQ(code_of([] { render_template("{{#x}} never closed", {}); }), ErrorCode::RenderError);
    EXPECT_EQ(code_of([] { render_template("{{/x}}", {}); }), ErrorCode::RenderError);
}

TEST(TemplatePrompt, CarriesDispatchExample) {
    const std::string p = build_template_prompt(Language::SYCL, "my kernel");
    EXPECT_NE(p.find("my kernel"), std::string::npos);
    EXPECT_NE(p.find("if (block_x == 16 && block_y == 16)"), std::string::npos);
    EXPECT_NE(p.find("forward_templated<32, 8>(A, B)"), std::string::npos);
    EXPECT_NE(p.find("TORCH_CHECK(false, \"Unsupported block size combination\")"), std::string::npos);
    EXPECT_TRUE(is_template_request(p));
    EXPECT_FALSE(is_template_request(build_prompt(mock_task(), std::nullopt, std::nullopt, {}, "HW", seed_prompt())));
}

TEST(SeedPrompt, DataFilesMatchBuiltIn) {
    const PromptState s = load_seed_prompt(std::filesystem::path(KF_SOURCE_DIR) / "data" / "prompt");
    EXPECT_EQ(s, seed_prompt());
    EXPECT_TRUE(s.valid());
}

TEST(ApplyDiff, ValidDiffInsideStrategies) {
    const PromptState s = seed_prompt();
    const PromptDiff d{"strategies", "Fuse elementwise epilogues", "Always fuse elementwise epilogues"};
    const PromptState n = apply_prompt_diff(s, {d});
    EXPECT_EQ(n.parent_version, s.version_id);
    EXPECT_NE(n.version_id, s.version_id);
    EXPECT_EQ(n.version_id.rfind("pv-", 0), 0u);
    EXPECT_NE(n.evolvable.at("strategies").find("Always fuse elementwise epilogues"), std::string::npos);
    EXPECT_EQ(n.fixed_scaffold, s.fixed_scaffold);
    EXPECT_EQ(apply_prompt_diff(s, {d}).version_id, n.version_id);
}

TEST(ApplyDiff, ScaffoldOnlyTextIsRegionViolation) {
    const PromptDiff d{"strategies", "## Critical Requirements", "## Optional Requirements"};
    EXPECT_EQ(code_of([&] { apply_prompt_diff(seed_prompt(), {d}); }), ErrorCode::RegionViolation);
}

TEST(ApplyDiff, TooManyMutations) {
    const PromptDiff d{"pitfalls", "bank conflicts", "bank conflicts (pad by one)"};
    EXPECT_EQ(code_of([&] { apply_prompt_diff(seed_prompt(), {d, d, d, d}, 3); }), ErrorCode::TooManyMutations);
}

TEST(ApplyDiff, OtherErrors) {
    const PromptState s = seed_prompt();
    EXPECT_EQ(code_of([&] { apply_prompt_diff(s, {{"strategies", "no such text", "x"}}); }), ErrorCode::SearchNotFound);
    EXPECT_EQ(code_of([&] { apply_prompt_diff(s, {{"strategies", "- ", "x"}}); }), ErrorCode::AmbiguousMatch);
    EXPECT_EQ(code_of([&] { apply_prompt_diff(s, {{"scaffold", "Memory:", "x"}}); }), ErrorCode::RegionViolation);
    EXPECT_EQ(code_of([&] { apply_prompt_diff(s, {{"strategies", "Memory:", "<!-- KF:END strategies -->"}}); }),
              ErrorCode::RegionViolation);
    EXPECT_EQ(code_of([&] { apply_prompt_diff(s, {{"strategies", "", "x"}}); }), ErrorCode::SearchNotFound);
    // A later failing diff leaves the input untouched.
    const PromptState copy = s;
    EXPECT_EQ(code_of([&] { apply_prompt_diff(s, {{"strategies", "Memory:", "Mem:"}, {"pitfalls", "zzz", "y"}}); }),
              ErrorCode::SearchNotFound);
    EXPECT_EQ(s, copy);
}

TEST(ApplyDiff, NeverTouchesTextOutsideNamedRegion) {
    const TaskSpec t = mock_task();
    Rng rng(2024);
    PromptState s = seed_prompt();
    const std::string base_scaffold =
        scaffold_outside_regions(build_prompt(t, std::nullopt, std::nullopt, {}, "HW", s));
    int applied = 0;
    for (int trial = 0; trial < 300; ++trial) {
        const std::string& region = region_names()[rng.below(4)];
        const std::string& text = s.evolvable.at(region);
        const std::size_t start = rng.below(text.size());
        const std::size_t len = 1 + rng.below(std::min<std::size_t>(24, text.size() - start));
        const std::string search = text.substr(start, len);
        if (detail::count_occurrences(text, search) != 1) continue;
        const std::string repl = "edit" + std::to_string(trial);
        const PromptState n = apply_prompt_diff(s, {{region, search, repl}});
        for (const auto& r : region_names())
            if (r != region) EXPECT_EQ(n.evolvable.at(r), s.evolvable.at(r));
        EXPECT_EQ(scaffold_outside_regions(build_prompt(t, std::nullopt, std::nullopt, {}, "HW", n)), base_scaffold);
        EXPECT_EQ(extract_regions(build_prompt(t, std::nullopt, std::nullopt, {}, "HW", n)), n.evolvable);
        s = n;
        ++applied;
    }
    EXPECT_GT(applied, 50);
}

TEST(ParseDiffs, OneWellFormedBlock) {
    const std::string text = "Some prose.\n" + format_diff({"pitfalls", "line a\nline b", "line c"}) + "trailing prose";
    std::vector<std::string> dropped;
    const auto diffs = parse_meta_diffs(text, 3, &dropped);
    ASSERT_EQ(diffs.size(), 1u);
    EXPECT_EQ(diffs[0], (PromptDiff{"pitfalls", "line a\nline b", "line c"}));
    EXPECT_TRUE(dropped.empty());
}

TEST(ParseDiffs, ProseOnlyIsNoParsableDiffs) {
    EXPECT_EQ(code_of([] { parse_meta_diffs("I think the prompt is fine as it is.", 3); }), ErrorCode::NoParsableDiffs);
}

TEST(ParseDiffs, KeepsFirstThreeOfFive) {
    std::string text;
    for (int i = 0; i < 5; ++i) text += format_diff({"strategies", "s" + std::to_string(i), "r" + std::to_string(i)});
    std::vector<std::string> dropped;
    const auto diffs = parse_meta_diffs(text, 3, &dropped);
    ASSERT_EQ(diffs.size(), 3u);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(diffs[static_cast<std::size_t>(i)].search, "s" + std::to_string(i));
    EXPECT_EQ(dropped.size(), 2u);
}

TEST(ParseDiffs, MalformedBlocksDroppedWithReason) {
    const std::string text = "<<<<SEARCH region=strategies\nunterminated\n====\nnothing\n" +
                             std::string("<<<<SEARCH\nno region\n====\nx\n>>>>REPLACE\n") +
                             "<<<<SEARCH region=pitfalls\n====\nempty search\n>>>>REPLACE\n" +
                             format_diff({"philosophy", "ok", "fine"});
    std::vector<std::string> dropped;
    const auto diffs = parse_meta_diffs(text, 3, &dropped);
    ASSERT_EQ(diffs.size(), 1u);
    EXPECT_EQ(diffs[0].region, "philosophy");
    ASSERT_EQ(dropped.size(), 3u);
    EXPECT_NE(dropped[0].find("unterminated"), std::string::npos);
    EXPECT_NE(dropped[1].find("missing region"), std::string::npos);
    EXPECT_NE(dropped[2].find("empty search"), std::string::npos);
}

TEST(ShouldUpdatePrompt, Schedule) {
    EXPECT_TRUE(should_update_prompt(10, 10));
    EXPECT_FALSE(should_update_prompt(5, 10));
    EXPECT_FALSE(should_update_prompt(0, 10));
    EXPECT_TRUE(should_update_prompt(20, 10));
    EXPECT_EQ(code_of([] { should_update_prompt(3, 0); }), ErrorCode::InvalidConfig);
}

namespace {

class DownBackend : public ChatBackend {
public:
    std::string complete(const ChatRequest&) override { throw Error(ErrorCode::BackendUnavailable, "down"); }
    std::string name() const override { return "down"; }
};

class FixedBackend : public ChatBackend {
public:
    explicit FixedBackend(std::string text) : text_(std::move(text)) {}
    std::string complete(const ChatRequest& r) override {
        last = r;
        return text_;
    }
    std::string name() const override { return "fixed"; }
    ChatRequest last;

private:
    std::string text_;
};

} // namespace

TEST(RequestPromptUpdate, MockMetaReturnsOneApplicableDiff) {
    const TaskSpec t = mock_task();
    MockMetaBackend meta;
    EvaluationResult ok;
    ok.status = EvalStatus::Correct;
    ok.speedup = 1.2;
    EvaluationResult bad;
    bad.status = EvalStatus::CompileFail;
    bad.log = "error: no member named 'foo'";
    const std::vector<RecentOutcome> recent{{cand("c1", 0.8), ok}, {cand("c2", 0.0), bad}};
    const auto diffs = request_prompt_update(meta, ChatConfig{}, t, seed_prompt(), recent);
    ASSERT_EQ(diffs.size(), 1u);
    EXPECT_EQ(diffs[0].region, "strategies");
    const PromptState n = apply_prompt_diff(seed_prompt(), diffs);
    EXPECT_NE(n.evolvable.at("strategies").find("Lesson (2 kernels, 1 correct"), std::string::npos);
    // Repeated updates keep producing applicable diffs.
    PromptState s = n;
    for (int i = 0; i < 5; ++i) s = apply_prompt_diff(s, request_prompt_update(meta, ChatConfig{}, t, s, recent));
    EXPECT_EQ(meta.calls(), 6);
}

TEST(RequestPromptUpdate, SendsRegionsAndOutcomes) {
    const TaskSpec t = mock_task();
    FixedBackend meta(format_diff({"pitfalls", "bank conflicts", "bank conflicts!"}));
    EvaluationResult bad;
    bad.status = EvalStatus::CompileFail;
    bad.log = "error: expected ';'";
    ChatConfig cfg;
    cfg.model = "meta-model";
    cfg.temperature = 0.7;
    request_prompt_update(meta, cfg, t, seed_prompt(), {{cand("c9", 0.0), bad}});
    ASSERT_EQ(meta.last.messages.size(), 1u);
    const std::string& sent = meta.last.messages[0].content;
    EXPECT_EQ(extract_regions(sent), seed_prompt().evolvable);
    EXPECT_NE(sent.find("error: expected ';'"), std::string::npos);
    EXPECT_NE(sent.find("// kernel c9"), std::string::npos);
    EXPECT_EQ(meta.last.model, "meta-model");
    EXPECT_EQ(meta.last.temperature, 0.7);
}

TEST(RequestPromptUpdate, Errors) {
    const TaskSpec t = mock_task();
    DownBackend down;
    EvaluationResult r;
    EXPECT_EQ(code_of([&] { request_prompt_update(down, {}, t, seed_prompt(), {{cand("a", 0.1), r}}); }),
              ErrorCode::BackendUnavailable);
    FixedBackend prose("Looks fine.");
    EXPECT_EQ(code_of([&] { request_prompt_update(prose, {}, t, seed_prompt(), {{cand("a", 0.1), r}}); }),
              ErrorCode::NoParsableDiffs);
    EXPECT_EQ(code_of([&] { request_prompt_update(prose, {}, t, seed_prompt(), {}); }), ErrorCode::InvalidConfig);
}

TEST(PromptArchive, MaxUpdateAndUses) {
    PromptArchive a;
    a.add(seed_prompt());
    a.record_fitness("pv-seed", 0.6);
    a.record_fitness("pv-seed", 0.8);
    EXPECT_EQ(a.find("pv-seed")->fitness, 0.8);
    a.record_fitness("pv-seed", 0.5);
    EXPECT_EQ(a.find("pv-seed")->fitness, 0.8);
    EXPECT_EQ(a.find("pv-seed")->uses, 3);
    EXPECT_EQ(code_of([&] { a.record_fitness("pv-nope", 0.5); }), ErrorCode::UnknownVersion);
    EXPECT_EQ(code_of([&] { a.record_fitness("pv-seed", 1.5); }), ErrorCode::InvalidConfig);
}

namespace {

std::vector<PromptState> chain(int n) {
    std::vector<PromptState> out{seed_prompt()};
    for (int i = 1; i < n; ++i)
        out.push_back(apply_prompt_diff(out.back(), {{"philosophy", "Prioritize", "Prioritize" + std::string(i, '!')}}));
    return out;
}

} // namespace

TEST(PromptArchive, SeventeenthVersionEvictsLowestNonBest) {
    PromptArchive a(16);
    const auto versions = chain(17);
    for (int i = 0; i < 16; ++i) {
        a.add(versions[static_cast<std::size_t>(i)]);
        a.record_fitness(versions[static_cast<std::size_t>(i)].version_id, 0.2 + 0.01 * ((i * 7) % 16));
    }
    // Version 0 is the best; version 3 has the lowest fitness among the rest.
    a.record_fitness(versions[0].version_id, 0.9);
    double lowest = 2;
    std::string expected;
    for (const auto& e : a.entries())
        if (e.state.version_id != versions[0].version_id && e.fitness < lowest) {
            lowest = e.fitness;
            expected = e.state.version_id;
        }
    a.add(versions[16]);
    EXPECT_EQ(a.size(), 16u);
    ASSERT_EQ(a.evicted().size(), 1u);
    EXPECT_EQ(a.evicted()[0], expected);
    EXPECT_NE(a.find(versions[0].version_id), nullptr);
    EXPECT_NE(a.find(versions[16].version_id), nullptr);
    EXPECT_EQ(a.latest().version_id, versions[16].version_id);
}

TEST(PromptArchive, BestNeverEvictedAndFitnessNonDecreasing) {
    Rng rng(5);
    PromptArchive a(4);
    PromptState cur = seed_prompt();
    a.add(cur);
    std::map<std::string, std::string> parent_of;  // every version ever created
    parent_of[cur.version_id] = "";
    std::map<std::string, double> seen;
    for (int step = 0; step < 400; ++step) {
        if (rng.below(4) == 0) {
            const PromptState n =
                apply_prompt_diff(cur, {{"analysis_guidance", "Before writing code",
                                         "Before writing code " + std::to_string(step)}});
            parent_of[n.version_id] = *n.parent_version;
            const std::string best_before = a.best().state.version_id;
            a.add(n);
            EXPECT_NE(a.find(best_before), nullptr);
            cur = n;
        }
        const auto& entries = a.entries();
        const std::string id = entries[rng.below(entries.size())].state.version_id;
        a.record_fitness(id, rng.uniform01());
        for (const auto& e : a.entries()) {
            EXPECT_GE(e.fitness, seen[e.state.version_id]);
            seen[e.state.version_id] = e.fitness;
        }
        EXPECT_LE(a.size(), 4u);
    }
    for (const auto& e : a.entries()) {
        std::string v = e.state.version_id;
        int hops = 0;
        while (!parent_of.at(v).empty() && hops < 1000) {
            v = parent_of.at(v);
            ++hops;
        }
        EXPECT_EQ(v, "pv-seed");
    }
}

TEST(PromptArchive, JsonRoundTrip) {
    PromptArchive a(3);
    for (const auto& v : chain(5)) {
        a.add(v);
        a.record_fitness(v.version_id, 0.3);
    }
    const PromptArchive b = PromptArchive::from_json(a.to_json());
    EXPECT_EQ(b.to_json(), a.to_json());
}

TEST(MockGenerator, DeterministicAndPoolAware) {
    MockGeneratorBackend gen({{"a.cpp", "kernel A"}, {"b.cpp", "kernel B"}, {"c.txt", "no code here"},
                              {"templated_x.cpp", "templated kernel"}});
    const auto r1 = gen.complete(make_request({}, "prompt one", 7));
    EXPECT_EQ(r1, gen.complete(make_request({}, "prompt one", 7)));
    std::set<std::string> seen;
    for (std::uint64_t s = 0; s < 64; ++s) seen.insert(gen.complete(make_request({}, "prompt", s)));
    EXPECT_EQ(seen.size(), 3u);
    EXPECT_TRUE(seen.count("no code here"));
    const auto t = gen.complete(make_request({}, build_template_prompt(Language::SYCL, "k"), 1));
    EXPECT_NE(t.find("templated kernel"), std::string::npos);
    EXPECT_EQ(gen.call_count(), 67u);
}

TEST(HttpChat, TalksToLocalServer) {
    httplib::Server srv;
    json received;
    srv.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        received = json::parse(req.body);
        res.set_content(json{{"choices", {{{"message", {{"content", "hello"}}}}}}}.dump(), "application/json");
    });
    srv.Post("/plain", [&](const httplib::Request&, httplib::Response& res) {
        res.set_content(json{{"text", "plain"}}.dump(), "application/json");
    });
    const int port = srv.bind_to_any_port("127.0.0.1");
    std::thread th([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    HttpChatBackend be("http://127.0.0.1:" + std::to_string(port));
    ChatConfig cfg;
    cfg.model = "m";
    EXPECT_EQ(be.complete(make_request(cfg, "hi", 3)), "hello");
    EXPECT_EQ(received["model"], "m");
    EXPECT_EQ(received["max_tokens"], 8000);
    EXPECT_EQ(received["top_p"], 1.0);
    EXPECT_EQ(received["messages"][0]["content"], "hi");
    HttpChatBackend plain("http://127.0.0.1:" + std::to_string(port) + "/plain");
    EXPECT_EQ(plain.complete(make_request(cfg, "hi", 3)), "plain");
    HttpChatBackend missing("http://127.0.0.1:" + std::to_string(port) + "/missing");
    EXPECT_EQ(code_of([&] { missing.complete(make_request(cfg, "hi", 3)); }), ErrorCode::BackendUnavailable);
    srv.stop();
    th.join();
    HttpChatBackend dead("http://127.0.0.1:" + std::to_string(port));
    EXPECT_EQ(code_of([&] { dead.complete(make_request(cfg, "hi", 3)); }), ErrorCode::BackendUnavailable);
}
