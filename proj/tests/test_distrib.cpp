#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <random>
#include <thread>

#include <sys/wait.h>
#include <unistd.h>

#include <kforge/distrib.hpp>
#include <kforge/remote.hpp>

using namespace kforge;
namespace fs = std::filesystem;

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

struct FakeClock {
    double now = 0;
    std::function<double()> fn() {
        return [this] { return now; };
    }
};

Job job(const std::string& id, JobKind kind = JobKind::Compile, const std::string& profile = "default") {
    Job j;
    j.job_id = id;
    j.kind = kind;
    j.task_id = "t";
    j.payload = json{{"n", id}};
    j.hardware_profile_id = profile;
    return j;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("kf_distrib_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

TaskSpec mock_task() {
    TaskSpec t;
    t.task_id = "unit";
    t.language = Language::SYCL;
    t.reference_code = "# KF-MOCK: time_ms=1.2\nreturn a + b";
    t.target_speedup = 2.0;
    return t;
}

} // namespace

TEST(Queue, FifoWithinKindAndProfile) {
    InProcessQueue q;
    q.enqueue(job("a"));
    q.enqueue(job("x", JobKind::Execute));
    q.enqueue(job("b"));
    q.enqueue(job("p", JobKind::Compile, "other"));
    EXPECT_EQ(q.claim(JobKind::Compile, "default", 10, "w")->job.job_id, "a");
    EXPECT_EQ(q.claim(JobKind::Compile, "default", 10, "w")->job.job_id, "b");
    EXPECT_FALSE(q.claim(JobKind::Compile, "default", 10, "w"));
    EXPECT_EQ(q.claim(JobKind::Execute, "default", 10, "w")->job.job_id, "x");
    EXPECT_EQ(q.claim(JobKind::Compile, "other", 10, "w")->job.job_id, "p");
}

TEST(Queue, DuplicateAndUnknownIds) {
    InProcessQueue q;
    q.enqueue(job("a"));
    EXPECT_EQ(code_of([&] { q.enqueue(job("a")); }), ErrorCode::DuplicateJobId);
    EXPECT_EQ(code_of([&] { q.take("zzz"); }), ErrorCode::UnknownJob);
    EXPECT_EQ(code_of([&] { q.claim(JobKind::Compile, "default", 0, "w"); }), ErrorCode::InvalidConfig);
}

TEST(Queue, CompleteAndTakeExactlyOnce) {
    InProcessQueue q;
    q.enqueue(job("a"));
    EXPECT_FALSE(q.take("a"));
    auto c = q.claim(JobKind::Compile, "default", 10, "w");
    q.complete("a", c->lease_token, json{{"ok", true}});
    auto o = q.take("a");
    ASSERT_TRUE(o);
    EXPECT_EQ(o->state, JobState::Done);
    EXPECT_EQ(o->result["ok"], true);
    EXPECT_EQ(code_of([&] { q.take("a"); }), ErrorCode::AlreadyCompleted);
    EXPECT_EQ(code_of([&] { q.enqueue(job("a")); }), ErrorCode::DuplicateJobId);
}

TEST(Queue, ExpiredLeaseRequeuesWithAttemptCounted) {
    FakeClock clk;
    InProcessQueue q({300, 2}, clk.fn());
    q.enqueue(job("a"));
    auto first = q.claim(JobKind::Compile, "default", 5, "w1");
    clk.now = 5.0;
    auto second = q.claim(JobKind::Compile, "default", 5, "w2");
    ASSERT_TRUE(second);
    EXPECT_EQ(second->job.attempts, 1);
    EXPECT_NE(first->lease_token, second->lease_token);
    // The late first worker still wins if it reports first.
    q.complete("a", first->lease_token, json{{"by", 1}});
    EXPECT_EQ(code_of([&] { q.complete("a", second->lease_token, json{{"by", 2}}); }), ErrorCode::AlreadyCompleted);
    EXPECT_EQ(q.take("a")->result["by"], 1);
    EXPECT_FALSE(q.drain_log().empty());
}

TEST(Queue, FailsAfterMaxRetries) {
    FakeClock clk;
    InProcessQueue q({300, 2}, clk.fn());
    q.enqueue(job("a"));
    for (int i = 0; i < 3; ++i) {
        ASSERT_TRUE(q.claim(JobKind::Compile, "default", 1, "w")) << i;
        clk.now += 1.0;
    }
    EXPECT_FALSE(q.claim(JobKind::Compile, "default", 1, "w"));
    auto o = q.take("a");
    ASSERT_TRUE(o);
    EXPECT_EQ(o->state, JobState::Failed);
    EXPECT_EQ(o->attempts, 3);
}

TEST(Queue, ExplicitFailCountsAndReleaseDoesNot) {
    InProcessQueue q({300, 1});
    q.enqueue(job("a"));
    auto c = q.claim(JobKind::Compile, "default", 10, "w");
    q.release("a", c->lease_token);
    c = q.claim(JobKind::Compile, "default", 10, "w");
    EXPECT_EQ(c->job.attempts, 0);
    q.fail("a", c->lease_token, "boom");
    c = q.claim(JobKind::Compile, "default", 10, "w");
    EXPECT_EQ(c->job.attempts, 1);
    q.fail("a", c->lease_token, "boom again");
    auto o = q.take("a");
    EXPECT_EQ(o->state, JobState::Failed);
    EXPECT_EQ(o->log, "boom again");
}

TEST(Queue, ForeignTokenIsRejected) {
    InProcessQueue q;
    q.enqueue(job("a"));
    q.claim(JobKind::Compile, "default", 10, "w");
    EXPECT_EQ(code_of([&] { q.complete("a", "a#99", json{}); }), ErrorCode::NotClaimed);
}

TEST(Queue, RandomLeaseFaultsCompleteExactlyOnce) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 300; ++trial) {
        FakeClock clk;
        InProcessQueue q({300, 2}, clk.fn());
        q.enqueue(job("a"));
        std::vector<std::string> tokens;
        int completions = 0;
        std::optional<JobOutcome> out;
        for (int step = 0; step < 12 && !out; ++step) {
            switch (rng() % 4) {
            case 0:
                if (auto c = q.claim(JobKind::Compile, "default", 1, "w")) tokens.push_back(c->lease_token);
                break;
            case 1: clk.now += 1.0; break;
            case 2:
                if (!tokens.empty()) {
                    try {
                        q.complete("a", tokens[rng() % tokens.size()], json{{"v", step}});
                        ++completions;
                    } catch (const Error& e) {
                        EXPECT_EQ(e.code(), ErrorCode::AlreadyCompleted);
                    }
                }
                break;
            default: out = q.take("a");
            }
        }
        EXPECT_LE(completions, 1);
        if (out && out->state == JobState::Done) EXPECT_EQ(completions, 1);
    }
}

TEST(Worker, DrainsCompileThenExecute) {
    InProcessQueue q;
    MockEvalBackend be;
    BaselineCache cache;
    const TaskSpec t = mock_task();
    const std::string src = "// KF-MOCK: compile=ok correct=1.0 time_ms=0.6\nvoid k() {}";
    q.enqueue(make_compile_job("c1", t, src));
    EXPECT_EQ(drain_queue(q, JobKind::Compile, "default", be, cache, "w"), 1);
    const CompileResult built = q.take("c1")->result.get<CompileResult>();
    ASSERT_TRUE(built.ok);
    q.enqueue(make_execute_job("e1", t, src, built));
    EXPECT_EQ(drain_queue(q, JobKind::Execute, "default", be, cache, "w"), 1);
    const EvalReport rep = q.take("e1")->result.get<EvalReport>();
    EXPECT_EQ(rep.result.status, EvalStatus::Correct);
    EXPECT_NEAR(*rep.result.speedup, 2.0, 1e-9);
}

TEST(RunDb, RoundTripAndSeqContinuation) {
    const auto dir = fresh_dir("roundtrip");
    {
        FileRunDb db(dir);
        EXPECT_EQ(db.append("r", RecordKind::Config, 0, json{{"a", 1}}), 1u);
        EXPECT_EQ(db.append("r", RecordKind::Candidate, 1, json{{"b", 2}}), 2u);
    }
    FileRunDb db(dir);
    EXPECT_EQ(db.append("r", RecordKind::Evaluation, 1, json{{"c", 3}}), 3u);
    const LoadedRun run = load_run(db, "r");
    ASSERT_EQ(run.records.size(), 3u);
    EXPECT_EQ(run.records[1].kind, RecordKind::Candidate);
    EXPECT_EQ(run.records[2].body["c"], 3);
    EXPECT_EQ(*run.last_index_of(RecordKind::Config), 0u);
    EXPECT_EQ(db.runs(), std::vector<std::string>{"r"});
    EXPECT_EQ(code_of([&] { db.load("missing", true); }), ErrorCode::UnknownRun);
    fs::remove_all(dir);
}

TEST(RunDb, TruncatedTailIsReportedAtItsSeq) {
    const auto dir = fresh_dir("trunc");
    FileRunDb db(dir);
    for (int i = 0; i < 5; ++i) db.append("r", RecordKind::Transition, i, json{{"i", i}});
    const auto p = db.path_of("r");
    const LoadedRun full = load_run(db, "r");
    fs::resize_file(p, full.end_offsets[2] + 10);
    try {
        load_run(db, "r");
        FAIL() << "expected corruption";
    } catch (const CorruptRecordError& e) {
        EXPECT_EQ(e.code(), ErrorCode::CorruptRecord);
        EXPECT_EQ(e.info().seq, 4u);
        EXPECT_EQ(e.info().offset, full.end_offsets[2]);
    }
    const LoadedRun lenient = db.load("r", false);
    EXPECT_EQ(lenient.records.size(), 3u);
    ASSERT_TRUE(lenient.corruption);
    fs::remove_all(dir);
}

TEST(RunDb, FlippedByteFailsChecksum) {
    const auto dir = fresh_dir("crc");
    FileRunDb db(dir);
    db.append("r", RecordKind::Config, 0, json{{"payload", "abcdef"}});
    db.append("r", RecordKind::Config, 0, json{{"payload", "ghijkl"}});
    auto bytes = detail::read_file(db.path_of("r"));
    bytes[bytes.size() - 5] ^= 0x20;
    const LoadedRun run = read_run_bytes(bytes, "r", false);
    EXPECT_EQ(run.records.size(), 1u);
    EXPECT_EQ(run.corruption->reason, "checksum mismatch");
    EXPECT_EQ(run.corruption->seq, 2u);
    fs::remove_all(dir);
}

TEST(RunDb, TruncateAfterDropsTailAndReusesSeq) {
    const auto dir = fresh_dir("truncafter");
    FileRunDb db(dir);
    for (int i = 0; i < 6; ++i) db.append("r", RecordKind::Candidate, i, json{{"i", i}});
    db.truncate_after("r", 4);
    EXPECT_EQ(load_run(db, "r").records.size(), 4u);
    EXPECT_EQ(db.append("r", RecordKind::Evaluation, 9, json{}), 5u);
    EXPECT_EQ(load_run(db, "r").records.back().seq, 5u);
    db.remove("r");
    EXPECT_FALSE(db.exists("r"));
    fs::remove_all(dir);
}

TEST(RunDb, OpeningACorruptRunForAppendFails) {
    const auto dir = fresh_dir("corruptopen");
    {
        FileRunDb db(dir);
        db.append("r", RecordKind::Config, 0, json{});
        db.append("r", RecordKind::Config, 0, json{});
        fs::resize_file(db.path_of("r"), fs::file_size(db.path_of("r")) - 3);
    }
    FileRunDb db(dir);
    EXPECT_EQ(code_of([&] { db.append("r", RecordKind::Config, 0, json{}); }), ErrorCode::CorruptRecord);
    fs::remove_all(dir);
}

TEST(RunDb, FaultInjectionWritesHalfAFrameAndExits) {
    const auto dir = fresh_dir("fault");
    const pid_t pid = ::fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
        ::setenv("KF_FAULT_AFTER_RECORDS", "3", 1);
        FileRunDb db(dir);
        for (int i = 0; i < 10; ++i) db.append("r", RecordKind::Candidate, i, json{{"i", i}});
        std::_Exit(0);
    }
    int status = 0;
    ::waitpid(pid, &status, 0);
    ASSERT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 137);
    FileRunDb db(dir);
    try {
        load_run(db, "r");
        FAIL() << "expected corruption";
    } catch (const CorruptRecordError& e) {
        EXPECT_EQ(e.info().seq, 4u);
    }
    fs::remove_all(dir);
}

TEST(Wire, FramingRoundTripAndRejects) {
    const std::string m = encode_message(json{{"x", 1}});
    EXPECT_EQ(decode_message(m)["x"], 1);
    EXPECT_EQ(decode_message(m)["schema"], kWireSchema);
    EXPECT_EQ(code_of([&] { decode_message("ab"); }), ErrorCode::MalformedMessage);
    EXPECT_EQ(code_of([&] { decode_message(m.substr(0, m.size() - 1)); }), ErrorCode::MalformedMessage);
    std::string bad = m;
    bad[4] = '!';
    EXPECT_EQ(code_of([&] { decode_message(bad); }), ErrorCode::MalformedMessage);
    json noschema = json{{"x", 1}};
    std::string raw = noschema.dump();
    std::string framed{0, 0, 0, static_cast<char>(raw.size())};
    EXPECT_EQ(code_of([&] { decode_message(framed + raw); }), ErrorCode::MalformedMessage);
}

TEST(Remote, QueueAndRecordsOverHttp) {
    const auto dir = fresh_dir("remote");
    QueueServer server({300, 2}, std::make_shared<FileRunDb>(dir));
    const int port = server.start();
    const std::string url = "http://127.0.0.1:" + std::to_string(port);
    RemoteQueue q(url);
    q.enqueue(job("a"));
    EXPECT_EQ(code_of([&] { q.enqueue(job("a")); }), ErrorCode::DuplicateJobId);
    auto c = q.claim(JobKind::Compile, "default", 10, "w");
    ASSERT_TRUE(c);
    EXPECT_EQ(c->job.payload["n"], "a");
    EXPECT_FALSE(q.take("a"));
    q.complete("a", c->lease_token, json{{"r", 5}});
    EXPECT_EQ(code_of([&] { q.complete("a", c->lease_token, json{}); }), ErrorCode::AlreadyCompleted);
    EXPECT_EQ(q.take("a")->result["r"], 5);

    RemoteRecordStore db(url);
    EXPECT_FALSE(db.exists("run"));
    EXPECT_EQ(db.append("run", RecordKind::Config, 0, json{{"k", 1}}), 1u);
    EXPECT_EQ(db.append("run", RecordKind::Candidate, 1, json{}), 2u);
    EXPECT_EQ(load_run(db, "run").records.size(), 2u);
    db.truncate_after("run", 1);
    EXPECT_EQ(load_run(db, "run").records.size(), 1u);
    db.remove("run");
    EXPECT_FALSE(db.exists("run"));
    server.stop();
    EXPECT_EQ(code_of([&] { q.enqueue(job("b")); }), ErrorCode::Infrastructure);
    fs::remove_all(dir);
}

TEST(Remote, WorkerProcessesAndReleasesOnStop) {
    QueueServer server;
    const std::string url = "http://127.0.0.1:" + std::to_string(server.start());
    RemoteQueue q(url);
    MockEvalBackend be;
    const TaskSpec t = mock_task();
    q.enqueue(make_compile_job("c1", t, "// KF-MOCK: compile=ok\nvoid k() {}"));
    std::atomic<bool> stop{false};
    WorkerOptions opt;
    opt.kind = JobKind::Compile;
    opt.exit_when_idle = true;
    EXPECT_EQ(run_worker(q, be, opt, stop), 1);
    EXPECT_TRUE(q.take("c1")->result.get<CompileResult>().ok);

    // A worker asked to stop mid-job gives the lease back.
    class SlowBackend : public MockEvalBackend {
    public:
        std::atomic<bool>* started = nullptr;
        CompileResult compile(const std::string& s, const TaskSpec& task) override {
            *started = true;
            std::this_thread::sleep_for(std::chrono::milliseconds(300));
            return MockEvalBackend::compile(s, task);
        }
    } slow;
    std::atomic<bool> started{false};
    slow.started = &started;
    q.enqueue(make_compile_job("c2", t, "// KF-MOCK: compile=ok\nvoid k() {}"));
    std::atomic<bool> abandoned{false};
    std::thread th([&] { run_worker(q, slow, opt, stop, [&] { abandoned = true; }); });
    while (!started) std::this_thread::sleep_for(std::chrono::milliseconds(5));
    stop = true;
    th.join();
    EXPECT_TRUE(abandoned);
    auto peek = server.queue().peek("c2");
    ASSERT_TRUE(peek);
    EXPECT_EQ(peek->state, JobState::Queued);
    EXPECT_EQ(peek->attempts, 0);
}
