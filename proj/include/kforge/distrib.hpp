#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include "common.hpp"
#include "evalpipe.hpp"
#include "taskspec.hpp"

namespace kforge {

// ---------------------------------------------------------------------------
// Jobs

enum class JobKind { Compile, Execute };
enum class JobState { Queued, Claimed, Done, Failed };

inline const char* to_string(JobKind k) { return k == JobKind::Compile ? "compile" : "execute"; }

inline JobKind parse_job_kind(const std::string& s) {
    if (s == "compile") return JobKind::Compile;
    if (s == "execute") return JobKind::Execute;
    throw Error(ErrorCode::MalformedMessage, "unknown job kind '" + s + "'");
}

inline const char* to_string(JobState s) {
    switch (s) {
        case JobState::Queued: return "queued";
        case JobState::Claimed: return "claimed";
        case JobState::Done: return "done";
        case JobState::Failed: return "failed";
    }
    return "?";
}

inline JobState parse_job_state(const std::string& s) {
    if (s == "queued") return JobState::Queued;
    if (s == "claimed") return JobState::Claimed;
    if (s == "done") return JobState::Done;
    if (s == "failed") return JobState::Failed;
    throw Error(ErrorCode::MalformedMessage, "unknown job state '" + s + "'");
}

struct Job {
    std::string job_id;
    JobKind kind = JobKind::Compile;
    std::string task_id;
    json payload;
    std::string hardware_profile_id = "default";
    int attempts = 0;
    JobState state = JobState::Queued;
};

inline void to_json(json& j, const Job& job) {
    j = json{{"job_id", job.job_id},   {"kind", to_string(job.kind)}, {"task_id", job.task_id},
             {"payload", job.payload}, {"profile", job.hardware_profile_id}, {"attempts", job.attempts},
             {"state", to_string(job.state)}};
}

inline void from_json(const json& j, Job& job) {
    job.job_id = j.at("job_id").get<std::string>();
    job.kind = parse_job_kind(j.at("kind").get<std::string>());
    job.task_id = j.at("task_id").get<std::string>();
    job.payload = j.at("payload");
    job.hardware_profile_id = j.at("profile").get<std::string>();
    job.attempts = j.at("attempts").get<int>();
    job.state = parse_job_state(j.at("state").get<std::string>());
}

struct ClaimedJob {
    Job job;
    std::string lease_token;
};

// Terminal outcome handed to the orchestrator exactly once.
struct JobOutcome {
    JobState state = JobState::Done;
    json result;
    std::string log;
    int attempts = 0;
};

inline void to_json(json& j, const JobOutcome& o) {
    j = json{{"state", to_string(o.state)}, {"result", o.result}, {"log", o.log}, {"attempts", o.attempts}};
}

inline void from_json(const json& j, JobOutcome& o) {
    o.state = parse_job_state(j.at("state").get<std::string>());
    o.result = j.at("result");
    o.log = j.value("log", std::string());
    o.attempts = j.value("attempts", 0);
}

class JobQueue {
public:
    virtual ~JobQueue() = default;
    virtual void enqueue(const Job& job) = 0;
    virtual std::optional<ClaimedJob> claim(JobKind kind, const std::string& profile, double lease_s,
                                            const std::string& worker_id) = 0;
    virtual void complete(const std::string& job_id, const std::string& lease_token, const json& result) = 0;
    virtual void fail(const std::string& job_id, const std::string& lease_token, const std::string& log) = 0;
    // Gives the job back without counting an attempt.
    virtual void release(const std::string& job_id, const std::string& lease_token) = 0;
    // Removes and returns a terminal job; nullopt while it is still pending.
    virtual std::optional<JobOutcome> take(const std::string& job_id) = 0;
};

struct QueueOptions {
    double default_lease_s = 300.0;
    int max_retries = 2;
};

inline double steady_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

// Lease rules: an expired claim counts as a failed attempt; a job goes back to
// Queued while attempts <= max_retries. Any holder of a lease ever issued for
// a job may complete it; the first completion wins and later ones get
// AlreadyCompleted.
class InProcessQueue : public JobQueue {
public:
    explicit InProcessQueue(QueueOptions opt = {}, std::function<double()> clock = steady_seconds)
        : opt_(opt), clock_(std::move(clock)) {}

    void enqueue(const Job& job) override {
        std::lock_guard lock(mu_);
        if (jobs_.count(job.job_id) || taken_.count(job.job_id)) throw Error(ErrorCode::DuplicateJobId, job.job_id);
        Entry e;
        e.job = job;
        e.job.state = JobState::Queued;
        e.job.attempts = 0;
        e.order = next_order_++;
        jobs_.emplace(job.job_id, std::move(e));
    }

    std::optional<ClaimedJob> claim(JobKind kind, const std::string& profile, double lease_s,
                                    const std::string& worker_id) override {
        if (!(lease_s > 0)) throw Error(ErrorCode::InvalidConfig, "lease must be positive");
        std::lock_guard lock(mu_);
        reap();
        Entry* best = nullptr;
        for (auto& [id, e] : jobs_) {
            if (e.job.state != JobState::Queued || e.job.kind != kind || e.job.hardware_profile_id != profile) continue;
            if (!best || e.order < best->order) best = &e;
        }
        if (!best) return std::nullopt;
        best->job.state = JobState::Claimed;
        best->lease_expiry = clock_() + lease_s;
        best->claims++;
        best->current_token = best->job.job_id + "#" + std::to_string(best->claims);
        best->issued_tokens.insert(best->current_token);
        best->worker = worker_id;
        return ClaimedJob{best->job, best->current_token};
    }

    void complete(const std::string& job_id, const std::string& token, const json& result) override {
        std::lock_guard lock(mu_);
        reap();
        Entry& e = entry(job_id);
        if (!e.issued_tokens.count(token)) throw Error(ErrorCode::NotClaimed, job_id + " was not claimed with lease " + token);
        if (e.job.state == JobState::Done) {
            log_.push_back("discarded late result for " + job_id + " from lease " + token);
            throw Error(ErrorCode::AlreadyCompleted, job_id);
        }
        e.job.state = JobState::Done;
        e.result = result;
        e.completed_by = token;
    }

    void fail(const std::string& job_id, const std::string& token, const std::string& log) override {
        std::lock_guard lock(mu_);
        reap();
        Entry& e = entry(job_id);
        if (!e.issued_tokens.count(token)) throw Error(ErrorCode::NotClaimed, job_id);
        if (e.job.state == JobState::Done) throw Error(ErrorCode::AlreadyCompleted, job_id);
        if (e.job.state != JobState::Claimed || e.current_token != token) return;  // stale lease, already handled
        e.log = log;
        attempt_failed(e);
    }

    void release(const std::string& job_id, const std::string& token) override {
        std::lock_guard lock(mu_);
        reap();
        Entry& e = entry(job_id);
        if (e.job.state != JobState::Claimed || e.current_token != token) return;
        e.job.state = JobState::Queued;
        e.order = next_order_++;
    }

    std::optional<JobOutcome> take(const std::string& job_id) override {
        std::lock_guard lock(mu_);
        reap();
        if (taken_.count(job_id)) throw Error(ErrorCode::AlreadyCompleted, job_id + " outcome already taken");
        Entry& e = entry(job_id);
        if (e.job.state != JobState::Done && e.job.state != JobState::Failed) return std::nullopt;
        JobOutcome out{e.job.state, e.result, e.log, e.job.attempts};
        taken_.insert(job_id);
        jobs_.erase(job_id);
        return out;
    }

    std::optional<Job> peek(const std::string& job_id) {
        std::lock_guard lock(mu_);
        reap();
        auto it = jobs_.find(job_id);
        if (it == jobs_.end()) return std::nullopt;
        return it->second.job;
    }

    std::size_t pending() {
        std::lock_guard lock(mu_);
        reap();
        std::size_t n = 0;
        for (const auto& [id, e] : jobs_) n += (e.job.state == JobState::Queued || e.job.state == JobState::Claimed);
        return n;
    }

    std::vector<std::string> drain_log() {
        std::lock_guard lock(mu_);
        auto out = std::move(log_);
        log_.clear();
        return out;
    }

    const QueueOptions& options() const { return opt_; }

private:
    struct Entry {
        Job job;
        std::uint64_t order = 0;
        double lease_expiry = 0;
        int claims = 0;
        std::string current_token;
        std::set<std::string> issued_tokens;
        std::string worker;
        json result;
        std::string log;
        std::string completed_by;
    };

    Entry& entry(const std::string& id) {
        auto it = jobs_.find(id);
        if (it == jobs_.end()) throw Error(ErrorCode::UnknownJob, id);
        return it->second;
    }

    void attempt_failed(Entry& e) {
        e.job.attempts++;
        if (e.job.attempts <= opt_.max_retries) {
            e.job.state = JobState::Queued;
            e.order = next_order_++;
        } else {
            e.job.state = JobState::Failed;
            if (e.log.empty()) e.log = "lease expired " + std::to_string(e.job.attempts) + " times";
        }
    }

    void reap() {
        const double now = clock_();
        for (auto& [id, e] : jobs_)
            if (e.job.state == JobState::Claimed && now >= e.lease_expiry) {
                log_.push_back("lease expired for " + id + " (" + e.current_token + ")");
                attempt_failed(e);
            }
    }

    QueueOptions opt_;
    std::function<double()> clock_;
    std::mutex mu_;
    std::map<std::string, Entry> jobs_;
    std::set<std::string> taken_;
    std::uint64_t next_order_ = 0;
    std::vector<std::string> log_;
};

// ---------------------------------------------------------------------------
// Worker side

inline Job make_compile_job(const std::string& job_id, const TaskSpec& task, const std::string& source) {
    Job j;
    j.job_id = job_id;
    j.kind = JobKind::Compile;
    j.task_id = task.task_id;
    j.hardware_profile_id = task.hardware_profile_id;
    j.payload = json{{"source", source}, {"task", task}};
    return j;
}

inline Job make_execute_job(const std::string& job_id, const TaskSpec& task, const std::string& source,
                            const CompileResult& built) {
    Job j;
    j.job_id = job_id;
    j.kind = JobKind::Execute;
    j.task_id = task.task_id;
    j.hardware_profile_id = task.hardware_profile_id;
    j.payload = json{{"source", source}, {"task", task}, {"compile", built}};
    return j;
}

// Runs one job. Compile jobs yield a CompileResult, execute jobs an EvalReport.
inline json process_job(const Job& job, EvalBackend& backend, BaselineCache& cache, const EvalOptions& opt = {}) {
    const TaskSpec task = job.payload.at("task").get<TaskSpec>();
    const std::string source = job.payload.at("source").get<std::string>();
    if (job.kind == JobKind::Compile) {
        try {
            return json(backend.compile(source, task));
        } catch (const std::exception& e) {
            return json(CompileResult{false, std::string("compile step failed: ") + e.what(), {}});
        }
    }
    const CompileResult built = job.payload.at("compile").get<CompileResult>();
    return json(evaluate_built(backend, built, source, task, cache, opt));
}

// Claims and processes jobs of one kind until none is left. Returns the count.
inline int drain_queue(JobQueue& q, JobKind kind, const std::string& profile, EvalBackend& backend, BaselineCache& cache,
                       const std::string& worker_id, double lease_s = 300.0) {
    int n = 0;
    while (auto c = q.claim(kind, profile, lease_s, worker_id)) {
        json result;
        try {
            result = process_job(c->job, backend, cache);
        } catch (const std::exception& e) {
            q.fail(c->job.job_id, c->lease_token, e.what());
            continue;
        }
        try {
            q.complete(c->job.job_id, c->lease_token, result);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::AlreadyCompleted && e.code() != ErrorCode::UnknownJob) throw;
        }
        ++n;
    }
    return n;
}

// ---------------------------------------------------------------------------
// Run database: one append-only file per run of frames
//   [u32 length LE][u32 crc32 LE][JSON {kind, schema, seq, ts, run_id, body}]

enum class RecordKind { Candidate, Evaluation, Transition, PromptVersion, ArchiveSnapshot, Config };

inline const char* to_string(RecordKind k) {
    switch (k) {
        case RecordKind::Candidate: return "Candidate";
        case RecordKind::Evaluation: return "Evaluation";
        case RecordKind::Transition: return "Transition";
        case RecordKind::PromptVersion: return "PromptVersion";
        case RecordKind::ArchiveSnapshot: return "ArchiveSnapshot";
        case RecordKind::Config: return "Config";
    }
    return "?";
}

inline RecordKind parse_record_kind(const std::string& s) {
    for (auto k : {RecordKind::Candidate, RecordKind::Evaluation, RecordKind::Transition, RecordKind::PromptVersion,
                   RecordKind::ArchiveSnapshot, RecordKind::Config})
        if (s == to_string(k)) return k;
    throw Error(ErrorCode::CorruptRecord, "unknown record kind '" + s + "'");
}

inline constexpr int kRecordSchema = 1;

struct RunRecord {
    RecordKind kind = RecordKind::Config;
    int schema = kRecordSchema;
    std::uint64_t seq = 0;
    std::int64_t ts = 0;  // logical time (generation), so replays are byte-identical
    std::string run_id;
    json body;

    bool operator==(const RunRecord&) const = default;
};

inline void to_json(json& j, const RunRecord& r) {
    j = json{{"kind", to_string(r.kind)}, {"schema", r.schema}, {"seq", r.seq}, {"ts", r.ts}, {"run_id", r.run_id}, {"body", r.body}};
}

inline void from_json(const json& j, RunRecord& r) {
    r.kind = parse_record_kind(j.at("kind").get<std::string>());
    r.schema = j.at("schema").get<int>();
    r.seq = j.at("seq").get<std::uint64_t>();
    r.ts = j.at("ts").get<std::int64_t>();
    r.run_id = j.at("run_id").get<std::string>();
    r.body = j.at("body");
}

struct CorruptionInfo {
    std::uint64_t seq = 0;     // sequence number the bad frame would have had
    std::uint64_t offset = 0;  // byte offset of the bad frame
    std::string reason;
};

class CorruptRecordError : public Error {
public:
    explicit CorruptRecordError(CorruptionInfo info)
        : Error(ErrorCode::CorruptRecord,
                "record " + std::to_string(info.seq) + " at byte " + std::to_string(info.offset) + ": " + info.reason),
          info_(std::move(info)) {}
    const CorruptionInfo& info() const { return info_; }

private:
    CorruptionInfo info_;
};

struct LoadedRun {
    std::string run_id;
    std::vector<RunRecord> records;
    std::vector<std::uint64_t> end_offsets;  // byte offset just past each record
    std::optional<CorruptionInfo> corruption;

    std::optional<std::size_t> last_index_of(RecordKind k) const {
        for (std::size_t i = records.size(); i-- > 0;)
            if (records[i].kind == k) return i;
        return std::nullopt;
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

inline std::string encode_frame(const RunRecord& r) {
    const std::string payload = json(r).dump();
    std::string out;
    put_u32(out, static_cast<std::uint32_t>(payload.size()));
    put_u32(out, crc32_of(payload));
    out += payload;
    return out;
}

} // namespace detail

// Reads every intact frame. With `strict`, a bad frame throws CorruptRecordError;
// otherwise reading stops there and the diagnostics are returned.
inline LoadedRun read_run_bytes(const std::string& bytes, const std::string& run_id, bool strict) {
    LoadedRun out;
    out.run_id = run_id;
    std::size_t at = 0;
    std::uint64_t expected_seq = 1;
    while (at < bytes.size()) {
        auto bad = [&](const std::string& why) {
            CorruptionInfo c{expected_seq, at, why};
            if (strict) throw CorruptRecordError(c);
            out.corruption = c;
        };
        if (bytes.size() - at < 8) {
            bad("truncated frame header");
            break;
        }
        const std::uint32_t len = detail::get_u32(bytes, at);
        const std::uint32_t crc = detail::get_u32(bytes, at + 4);
        if (bytes.size() - at - 8 < len) {
            bad("truncated frame body");
            break;
        }
        const std::string payload = bytes.substr(at + 8, len);
        if (crc32_of(payload) != crc) {
            bad("checksum mismatch");
            break;
        }
        RunRecord r;
        try {
            r = json::parse(payload).get<RunRecord>();
        } catch (const std::exception& e) {
            bad(std::string("unreadable record: ") + e.what());
            break;
        }
        if (r.seq != expected_seq) {
            bad("sequence gap: found " + std::to_string(r.seq));
            break;
        }
        at += 8 + len;
        out.records.push_back(std::move(r));
        out.end_offsets.push_back(at);
        ++expected_seq;
    }
    return out;
}

class RecordStore {
public:
    virtual ~RecordStore() = default;
    virtual std::uint64_t append(const std::string& run_id, RecordKind kind, std::int64_t ts, const json& body) = 0;
    virtual LoadedRun load(const std::string& run_id, bool strict) = 0;
    // Drops every record with seq > `seq`.
    virtual void truncate_after(const std::string& run_id, std::uint64_t seq) = 0;
    virtual bool exists(const std::string& run_id) = 0;
    virtual void remove(const std::string& run_id) = 0;
};

// File-backed store. Appends are fsynced before returning.
// KF_FAULT_AFTER_RECORDS=N makes the process write half of record N+1 and
// exit with status 137, simulating a crash mid-write.
class FileRunDb : public RecordStore {
public:
    explicit FileRunDb(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
        if (const char* f = std::getenv("KF_FAULT_AFTER_RECORDS")) fault_after_ = std::strtoll(f, nullptr, 10);
    }

    std::filesystem::path path_of(const std::string& run_id) const { return dir_ / (run_id + ".kfdb"); }

    std::uint64_t append(const std::string& run_id, RecordKind kind, std::int64_t ts, const json& body) override {
        std::lock_guard lock(mu_);
        auto& next = next_seq(run_id);
        RunRecord r{kind, kRecordSchema, next, ts, run_id, body};
        const std::string frame = detail::encode_frame(r);
        const auto p = path_of(run_id);
        const int fd = ::open(p.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
        if (fd < 0) throw Error(ErrorCode::Infrastructure, "cannot open run database " + p.string());
        std::size_t to_write = frame.size();
        const bool crash = fault_after_ >= 0 && appended_ == fault_after_;
        if (crash) to_write = frame.size() / 2;
        write_all(fd, frame.data(), to_write, p);
        if (::fsync(fd) != 0) {
            ::close(fd);
            throw Error(ErrorCode::Infrastructure, "fsync failed on " + p.string());
        }
        ::close(fd);
        if (crash) std::_Exit(137);
        ++appended_;
        return next++;
    }

    LoadedRun load(const std::string& run_id, bool strict) override {
        const auto p = path_of(run_id);
        if (!std::filesystem::exists(p)) throw Error(ErrorCode::UnknownRun, run_id);
        return read_run_bytes(detail::read_file(p), run_id, strict);
    }

    void truncate_after(const std::string& run_id, std::uint64_t seq) override {
        std::lock_guard lock(mu_);
        const LoadedRun run = read_run_bytes(detail::read_file(path_of(run_id)), run_id, false);
        std::uint64_t keep = 0;
        for (std::size_t i = 0; i < run.records.size() && run.records[i].seq <= seq; ++i) keep = run.end_offsets[i];
        std::filesystem::resize_file(path_of(run_id), keep);
        seqs_[run_id] = std::min<std::uint64_t>(seq, run.records.size()) + 1;
    }

    bool exists(const std::string& run_id) override { return std::filesystem::exists(path_of(run_id)); }

    void remove(const std::string& run_id) override {
        std::lock_guard lock(mu_);
        std::filesystem::remove(path_of(run_id));
        seqs_.erase(run_id);
    }

    std::vector<std::string> runs() const {
        std::vector<std::string> out;
        if (!std::filesystem::is_directory(dir_)) return out;
        for (const auto& e : std::filesystem::directory_iterator(dir_))
            if (e.path().extension() == ".kfdb") out.push_back(e.path().stem().string());
        std::sort(out.begin(), out.end());
        return out;
    }

private:
    std::uint64_t& next_seq(const std::string& run_id) {
        auto it = seqs_.find(run_id);
        if (it != seqs_.end()) return it->second;
        std::uint64_t next = 1;
        if (std::filesystem::exists(path_of(run_id))) {
            const LoadedRun run = read_run_bytes(detail::read_file(path_of(run_id)), run_id, false);
            if (run.corruption) throw CorruptRecordError(*run.corruption);
            next = run.records.size() + 1;
        }
        return seqs_[run_id] = next;
    }

    static void write_all(int fd, const char* data, std::size_t n, const std::filesystem::path& p) {
        while (n > 0) {
            const ssize_t w = ::write(fd, data, n);
            if (w < 0) {
                ::close(fd);
                throw Error(ErrorCode::Infrastructure, "write failed on " + p.string());
            }
            data += w;
            n -= static_cast<std::size_t>(w);
        }
    }

    std::filesystem::path dir_;
    std::mutex mu_;
    std::map<std::string, std::uint64_t> seqs_;
    long long fault_after_ = -1;
    long long appended_ = 0;
};

// Strict load: throws CorruptRecordError at the first bad frame.
inline LoadedRun load_run(RecordStore& db, const std::string& run_id) { return db.load(run_id, true); }

} // namespace kforge
