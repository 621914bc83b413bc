#pragma once

#include <atomic>
#include <chrono>
#include <memory>
#include <string>
#include <thread>

#include <httplib.h>

#include "common.hpp"
#include "distrib.hpp"

namespace kforge {

// Wire messages: a 4-byte big-endian length followed by that many bytes of
// JSON. Every message carries "schema".

inline constexpr int kWireSchema = 1;

inline std::string encode_message(json msg) {
    msg["schema"] = kWireSchema;
    const std::string body = msg.dump();
    std::string out;
    const auto n = static_cast<std::uint32_t>(body.size());
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((n >> (8 * i)) & 0xff));
    return out + body;
}

inline json decode_message(const std::string& bytes) {
    if (bytes.size() < 4) throw Error(ErrorCode::MalformedMessage, "message shorter than its length prefix");
    std::uint32_t n = 0;
    for (int i = 0; i < 4; ++i) n = (n << 8) | static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]);
    if (bytes.size() - 4 != n)
        throw Error(ErrorCode::MalformedMessage,
                    "length prefix says " + std::to_string(n) + " bytes, got " + std::to_string(bytes.size() - 4));
    json j;
    try {
        j = json::parse(bytes.substr(4));
    } catch (const json::exception& e) {
        throw Error(ErrorCode::MalformedMessage, e.what());
    }
    if (!j.is_object() || !j.contains("schema")) throw Error(ErrorCode::MalformedMessage, "missing schema");
    if (j["schema"] != kWireSchema)
        throw Error(ErrorCode::MalformedMessage, "unsupported schema " + j["schema"].dump());
    return j;
}

// Hosts a queue and, optionally, a run database for remote workers and orchestrators.
class QueueServer {
public:
    explicit QueueServer(QueueOptions opt = {}, std::shared_ptr<RecordStore> db = nullptr)
        : queue_(opt), db_(std::move(db)) {
        route("/enqueue", [this](const json& m) {
            queue_.enqueue(m.at("job").get<Job>());
            return json::object();
        });
        route("/claim", [this](const json& m) {
            auto c = queue_.claim(parse_job_kind(m.at("kind")), m.at("profile"), m.at("lease_s").get<double>(),
                                  m.value("worker", std::string()));
            if (!c) return json{{"job", nullptr}};
            return json{{"job", c->job}, {"token", c->lease_token}};
        });
        route("/complete", [this](const json& m) {
            queue_.complete(m.at("job_id"), m.at("token"), m.at("result"));
            return json::object();
        });
        route("/fail", [this](const json& m) {
            queue_.fail(m.at("job_id"), m.at("token"), m.value("log", std::string()));
            return json::object();
        });
        route("/release", [this](const json& m) {
            queue_.release(m.at("job_id"), m.at("token"));
            return json::object();
        });
        route("/result", [this](const json& m) {
            auto o = queue_.take(m.at("job_id"));
            return o ? json{{"outcome", *o}} : json{{"outcome", nullptr}};
        });
        route("/record", [this](const json& m) {
            return json{{"seq", store().append(m.at("run_id"), parse_record_kind(m.at("kind")), m.at("ts").get<std::int64_t>(),
                                               m.at("body"))}};
        });
        route("/records", [this](const json& m) {
            const LoadedRun run = store().load(m.at("run_id"), false);
            json out{{"records", run.records}, {"corruption", nullptr}};
            if (run.corruption)
                out["corruption"] = {{"seq", run.corruption->seq}, {"offset", run.corruption->offset}, {"reason", run.corruption->reason}};
            return out;
        });
        route("/truncate", [this](const json& m) {
            store().truncate_after(m.at("run_id"), m.at("seq").get<std::uint64_t>());
            return json::object();
        });
        route("/run_exists", [this](const json& m) { return json{{"exists", store().exists(m.at("run_id"))}}; });
        route("/run_remove", [this](const json& m) {
            store().remove(m.at("run_id"));
            return json::object();
        });
        srv_.Get("/health", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });
    }

    ~QueueServer() { stop(); }

    // Binds (port 0 picks a free one) and serves on a background thread.
    int start(const std::string& host = "127.0.0.1", int port = 0) {
        port_ = port == 0 ? srv_.bind_to_any_port(host) : (srv_.bind_to_port(host, port) ? port : -1);
        if (port_ < 0) throw Error(ErrorCode::Infrastructure, "cannot bind " + host + ":" + std::to_string(port));
        thread_ = std::thread([this] { srv_.listen_after_bind(); });
        srv_.wait_until_ready();
        return port_;
    }

    void stop() {
        if (thread_.joinable()) {
            srv_.stop();
            thread_.join();
        }
    }

    int port() const { return port_; }
    InProcessQueue& queue() { return queue_; }

private:
    RecordStore& store() {
        if (!db_) throw Error(ErrorCode::InvalidConfig, "this server hosts no run database");
        return *db_;
    }

    void route(const std::string& path, std::function<json(const json&)> fn) {
        srv_.Post(path, [fn = std::move(fn)](const httplib::Request& req, httplib::Response& res) {
            try {
                const json reply = fn(decode_message(req.body));
                res.set_content(encode_message(reply), "application/octet-stream");
            } catch (const Error& e) {
                const std::string msg = e.what();
                const std::string prefix = std::string(to_string(e.code())) + ": ";
                res.status = 409;
                res.set_content(encode_message(json{{"error", {{"code", to_string(e.code())},
                                                               {"message", msg.rfind(prefix, 0) == 0 ? msg.substr(prefix.size()) : msg}}}}),
                                "application/octet-stream");
            } catch (const std::exception& e) {
                res.status = 400;
                res.set_content(encode_message(json{{"error", {{"code", "MalformedMessage"}, {"message", e.what()}}}}),
                                "application/octet-stream");
            }
        });
    }

    InProcessQueue queue_;
    std::shared_ptr<RecordStore> db_;
    httplib::Server srv_;
    std::thread thread_;
    int port_ = -1;
};

// Client for a QueueServer. Transport failures raise Infrastructure errors;
// server-side errors come back with their original code.
class RemoteClient {
public:
    explicit RemoteClient(std::string url) : url_(std::move(url)) {}

    json call(const std::string& path, const json& msg) const {
        httplib::Client cli(url_);
        cli.set_connection_timeout(5);
        cli.set_read_timeout(600);
        auto res = cli.Post(path, encode_message(msg), "application/octet-stream");
        if (!res) throw Error(ErrorCode::Infrastructure, url_ + path + ": " + httplib::to_string(res.error()));
        const json reply = decode_message(res->body);
        if (reply.contains("error")) {
            const auto code = parse_error_code(reply["error"].value("code", std::string()));
            throw Error(code.value_or(ErrorCode::Infrastructure), reply["error"].value("message", std::string()));
        }
        return reply;
    }

    const std::string& url() const { return url_; }

private:
    std::string url_;
};

class RemoteQueue : public JobQueue {
public:
    explicit RemoteQueue(std::string url) : client_(std::move(url)) {}

    void enqueue(const Job& job) override { client_.call("/enqueue", {{"job", job}}); }

    std::optional<ClaimedJob> claim(JobKind kind, const std::string& profile, double lease_s,
                                    const std::string& worker_id) override {
        const json r = client_.call("/claim", {{"kind", to_string(kind)}, {"profile", profile}, {"lease_s", lease_s}, {"worker", worker_id}});
        if (r.at("job").is_null()) return std::nullopt;
        return ClaimedJob{r["job"].get<Job>(), r.at("token").get<std::string>()};
    }

    void complete(const std::string& job_id, const std::string& token, const json& result) override {
        client_.call("/complete", {{"job_id", job_id}, {"token", token}, {"result", result}});
    }

    void fail(const std::string& job_id, const std::string& token, const std::string& log) override {
        client_.call("/fail", {{"job_id", job_id}, {"token", token}, {"log", log}});
    }

    void release(const std::string& job_id, const std::string& token) override {
        client_.call("/release", {{"job_id", job_id}, {"token", token}});
    }

    std::optional<JobOutcome> take(const std::string& job_id) override {
        const json r = client_.call("/result", {{"job_id", job_id}});
        if (r.at("outcome").is_null()) return std::nullopt;
        return r["outcome"].get<JobOutcome>();
    }

private:
    RemoteClient client_;
};

class RemoteRecordStore : public RecordStore {
public:
    explicit RemoteRecordStore(std::string url) : client_(std::move(url)) {}

    std::uint64_t append(const std::string& run_id, RecordKind kind, std::int64_t ts, const json& body) override {
        return client_.call("/record", {{"run_id", run_id}, {"kind", to_string(kind)}, {"ts", ts}, {"body", body}})
            .at("seq")
            .get<std::uint64_t>();
    }

    LoadedRun load(const std::string& run_id, bool strict) override {
        const json r = client_.call("/records", {{"run_id", run_id}});
        LoadedRun out;
        out.run_id = run_id;
        out.records = r.at("records").get<std::vector<RunRecord>>();
        for (std::size_t i = 0; i < out.records.size(); ++i) out.end_offsets.push_back(i + 1);
        if (!r.at("corruption").is_null()) {
            CorruptionInfo c{r["corruption"].at("seq"), r["corruption"].at("offset"), r["corruption"].at("reason")};
            if (strict) throw CorruptRecordError(c);
            out.corruption = c;
        }
        return out;
    }

    void truncate_after(const std::string& run_id, std::uint64_t seq) override {
        client_.call("/truncate", {{"run_id", run_id}, {"seq", seq}});
    }

    bool exists(const std::string& run_id) override { return client_.call("/run_exists", {{"run_id", run_id}}).at("exists"); }

    void remove(const std::string& run_id) override { client_.call("/run_remove", {{"run_id", run_id}}); }

private:
    RemoteClient client_;
};

struct WorkerOptions {
    JobKind kind = JobKind::Execute;
    std::string profile = "default";
    std::string worker_id = "worker";
    double lease_s = 300.0;
    int poll_ms = 20;
    int max_backoff_ms = 2000;
    bool exit_when_idle = false;
};

// Claim -> process -> complete until `stop` is set. If `stop` is raised while
// a job is in flight, its lease is released so a peer can take it, and
// `on_abandon` runs (the CLI exits there). Returns the number of completed jobs.
inline int run_worker(JobQueue& q, EvalBackend& backend, const WorkerOptions& opt, const std::atomic<bool>& stop,
                      const std::function<void()>& on_abandon = {}, std::function<void(const std::string&)> log = {}) {
    BaselineCache cache;
    int done = 0;
    int backoff = opt.poll_ms;
    auto say = [&](const std::string& s) {
        if (log) log(s);
    };
    while (!stop.load()) {
        std::optional<ClaimedJob> c;
        try {
            c = q.claim(opt.kind, opt.profile, opt.lease_s, opt.worker_id);
            backoff = opt.poll_ms;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::Infrastructure) throw;
            say(std::string("queue unavailable, retrying: ") + e.what());
            std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
            backoff = std::min(backoff * 2, opt.max_backoff_ms);
            continue;
        }
        if (!c) {
            if (opt.exit_when_idle) break;
            std::this_thread::sleep_for(std::chrono::milliseconds(opt.poll_ms));
            continue;
        }
        std::atomic<bool> finished{false};
        std::thread watcher([&] {
            while (!finished.load()) {
                if (stop.load()) {
                    try {
                        q.release(c->job.job_id, c->lease_token);
                        say("released " + c->job.job_id + " on shutdown");
                    } catch (const std::exception&) {
                    }
                    if (on_abandon) on_abandon();
                    return;
                }
                std::this_thread::sleep_for(std::chrono::milliseconds(10));
            }
        });
        json result;
        std::string failure;
        try {
            result = process_job(c->job, backend, cache);
        } catch (const std::exception& e) {
            failure = e.what();
        }
        finished = true;
        watcher.join();
        if (stop.load()) break;
        try {
            if (failure.empty()) {
                q.complete(c->job.job_id, c->lease_token, result);
                ++done;
            } else {
                q.fail(c->job.job_id, c->lease_token, failure);
            }
        } catch (const Error& e) {
            if (e.code() == ErrorCode::AlreadyCompleted || e.code() == ErrorCode::UnknownJob || e.code() == ErrorCode::NotClaimed)
                say(std::string("result discarded: ") + e.what());
            else if (e.code() == ErrorCode::Infrastructure)
                say(std::string("could not report result: ") + e.what());
            else
                throw;
        }
    }
    return done;
}

} // namespace kforge
