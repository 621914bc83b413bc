#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "archive.hpp"
#include "common.hpp"
#include "fitness.hpp"
#include "prompt_seed.hpp"
#include "taskspec.hpp"

namespace kforge {

inline const std::array<std::string, 4>& region_names() {
    static const std::array<std::string, 4> names{"philosophy", "strategies", "pitfalls", "analysis_guidance"};
    return names;
}

inline bool is_region_name(std::string_view name) {
    const auto& n = region_names();
    return std::find(n.begin(), n.end(), name) != n.end();
}

inline std::string region_begin_marker(const std::string& r) { return "<!-- KF:REGION " + r + " -->"; }
inline std::string region_end_marker(const std::string& r) { return "<!-- KF:END " + r + " -->"; }
inline constexpr std::string_view kMarkerPrefix = "<!-- KF:";

struct PromptState {
    std::string fixed_scaffold = seed::scaffold;
    std::map<std::string, std::string> evolvable;
    std::string version_id;
    std::optional<std::string> parent_version;

    bool operator==(const PromptState&) const = default;

    bool valid() const {
        if (evolvable.size() != 4) return false;
        for (const auto& r : region_names()) {
            auto it = evolvable.find(r);
            if (it == evolvable.end()) return false;
            if (it->second.find(kMarkerPrefix) != std::string::npos) return false;
        }
        return !version_id.empty();
    }
};

inline PromptState seed_prompt() {
    PromptState s;
    s.evolvable = {{"philosophy", seed::philosophy},
                   {"strategies", seed::strategies},
                   {"pitfalls", seed::pitfalls},
                   {"analysis_guidance", seed::analysis_guidance}};
    s.version_id = "pv-seed";
    return s;
}

// Region files named <region>.md in `dir` override the built-in seed text.
inline PromptState load_seed_prompt(const std::filesystem::path& dir) {
    PromptState s = seed_prompt();
    for (const auto& r : region_names()) {
        const auto p = dir / (r + ".md");
        if (!std::filesystem::exists(p)) continue;
        std::string text = detail::read_file(p);
        while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
        s.evolvable[r] = text;
    }
    if (s.evolvable != seed_prompt().evolvable) s.version_id = "pv-seed-" + sha256_hex(json(s.evolvable).dump()).substr(0, 8);
    return s;
}

inline void to_json(json& j, const PromptState& s) {
    j = json{{"version_id", s.version_id},
             {"parent_version", s.parent_version ? json(*s.parent_version) : json(nullptr)},
             {"evolvable", s.evolvable},
             {"scaffold_hash", sha256_hex(s.fixed_scaffold).substr(0, 16)}};
    if (s.fixed_scaffold != seed::scaffold) j["fixed_scaffold"] = s.fixed_scaffold;
}

inline void from_json(const json& j, PromptState& s) {
    s.version_id = j.at("version_id").get<std::string>();
    s.parent_version = j.at("parent_version").is_null() ? std::nullopt
                                                        : std::optional<std::string>(j["parent_version"].get<std::string>());
    s.evolvable = j.at("evolvable").get<std::map<std::string, std::string>>();
    s.fixed_scaffold = j.contains("fixed_scaffold") ? j["fixed_scaffold"].get<std::string>() : std::string(seed::scaffold);
}

// ---------------------------------------------------------------------------
// Template rendering: `{{slot}}` and `{{#flag}}...{{/flag}}`. A section tag
// that ends its line swallows the newline so omitted sections leave no gap.

namespace detail {

inline std::string render_into(std::string_view tpl, const std::map<std::string, std::string>& vars) {
    std::string out;
    std::size_t pos = 0;
    while (pos < tpl.size()) {
        const std::size_t open = tpl.find("{{", pos);
        if (open == std::string_view::npos) {
            out.append(tpl.substr(pos));
            break;
        }
        out.append(tpl.substr(pos, open - pos));
        const std::size_t close = tpl.find("}}", open + 2);
        if (close == std::string_view::npos) throw Error(ErrorCode::RenderError, "unclosed tag");
        const std::string tag(tpl.substr(open + 2, close - open - 2));
        pos = close + 2;
        if (tag.empty()) throw Error(ErrorCode::RenderError, "empty tag");
        if (tag[0] == '/') throw Error(ErrorCode::RenderError, "unmatched section end " + tag.substr(1));
        if (tag[0] == '#') {
            const std::string name = tag.substr(1);
            const std::string end_tag = "{{/" + name + "}}";
            const std::size_t end = tpl.find(end_tag, pos);
            if (end == std::string_view::npos) throw Error(ErrorCode::RenderError, "unterminated section " + name);
            std::size_t body_start = pos;
            if (body_start < tpl.size() && tpl[body_start] == '\n') ++body_start;
            std::size_t after = end + end_tag.size();
            if (after < tpl.size() && tpl[after] == '\n') ++after;
            auto it = vars.find(name);
            if (it != vars.end() && !it->second.empty()) out += render_into(tpl.substr(body_start, end - body_start), vars);
            pos = after;
            continue;
        }
        auto it = vars.find(tag);
        if (it == vars.end()) throw Error(ErrorCode::RenderError, "unfilled slot " + tag);
        out += it->second;
    }
    return out;
}

struct LanguageText {
    std::string display, kernel_file, fence, comment, load;
};

inline LanguageText language_text(Language lang) {
    const std::string cpp_load =
        "loaded using torch.utils.cpp_extension.load():\n```\nload(name=task_name, sources=[\"{{file}}\"])\n```\n"
        "Later, the function will be called via load(name=task_name, ...).forward and thoroughly tested.";
    auto with_file = [&](const std::string& f) {
        std::string s = cpp_load;
        s.replace(s.find("{{file}}"), 8, f);
        return s;
    };
    switch (lang) {
        case Language::SYCL: return {"SYCL", "kernel.cpp", "cpp", "//", with_file("kernel.cpp")};
        case Language::CUDA: return {"CUDA", "kernel.cu", "cuda", "//", with_file("kernel.cu")};
        case Language::TRITON:
            return {"Triton", "kernel.py", "python", "#",
                    "imported as a Python module; its `forward` function is called with the same arguments as the "
                    "reference and thoroughly tested."};
    }
    return {};
}

inline std::string format_runtime(const std::optional<double>& ms) {
    if (!ms) return "n/a";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f ms", *ms);
    return buf;
}

inline void put_regions(std::map<std::string, std::string>& vars, const PromptState& p) {
    for (const auto& r : region_names()) vars["region_" + r] = p.evolvable.at(r);
}

} // namespace detail

inline std::string render_template(std::string_view tpl, const std::map<std::string, std::string>& vars) {
    return detail::render_into(tpl, vars);
}

struct KernelSnapshot {
    std::string code;
    std::optional<double> runtime_ms;
    std::string log;
};

struct ExamplePair {
    std::string reference;
    std::string kernel;
};

inline std::string build_prompt(const TaskSpec& task, const std::optional<KernelSnapshot>& top,
                                const std::optional<KernelSnapshot>& last, const std::vector<std::string>& hints,
                                const std::string& hardware, const PromptState& prompt,
                                const std::optional<ExamplePair>& example = std::nullopt, bool template_mode = false) {
    if (!prompt.valid()) throw Error(ErrorCode::RenderError, "prompt state needs exactly four clean regions and a version");
    const auto lt = detail::language_text(task.language);
    std::map<std::string, std::string> vars{{"language", lt.display},
                                            {"reference_language", task.reference_language},
                                            {"kernel_file", lt.kernel_file},
                                            {"load_instructions", lt.load},
                                            {"fence", lt.fence},
                                            {"comment", lt.comment},
                                            {"reference_code", task.reference_code},
                                            {"hardware", hardware}};
    if (example) {
        vars["example"] = "1";
        vars["example_reference"] = example->reference;
        vars["example_kernel"] = example->kernel;
    }
    if (task.user_instructions && !detail::trim(*task.user_instructions).empty()) vars["instructions"] = *task.user_instructions;
    if (top) {
        vars["top"] = "1";
        vars["top_code"] = top->code;
        vars["top_runtime"] = detail::format_runtime(top->runtime_ms);
    }
    if (last) {
        vars["last"] = "1";
        vars["last_code"] = last->code;
        vars["last_runtime"] = detail::format_runtime(last->runtime_ms);
        vars["last_log"] = last->log.empty() ? "(no output)" : last->log;
    }
    if (template_mode) vars["template_mode"] = "1";
    std::string hint_text;
    for (const auto& h : hints) hint_text += (hint_text.empty() ? "- " : "\n- ") + h;
    vars["hints"] = hint_text;
    detail::put_regions(vars, prompt);
    // Slot values are inserted verbatim, so `{{` inside code stays literal.
    return render_template(prompt.fixed_scaffold, vars);
}

// Request for a tunable variant of `kernel_code` with a `forward` dispatcher.
inline std::string build_template_prompt(Language lang, const std::string& kernel_code) {
    const auto lt = detail::language_text(lang);
    return render_template(seed::template_request, {{"language", lt.display},
                                                    {"fence", lt.fence},
                                                    {"kernel_code", kernel_code},
                                                    {"dispatch_example", seed::dispatch_example}});
}

inline std::map<std::string, std::string> extract_regions(const std::string& rendered) {
    std::map<std::string, std::string> out;
    for (const auto& r : region_names()) {
        const std::string b = region_begin_marker(r) + "\n";
        const std::string e = "\n" + region_end_marker(r);
        const auto bp = rendered.find(b);
        if (bp == std::string::npos) continue;
        const auto ep = rendered.find(e, bp + b.size());
        if (ep == std::string::npos) continue;
        out[r] = rendered.substr(bp + b.size(), ep - bp - b.size());
    }
    return out;
}

// Rendered text with every region body blanked out.
inline std::string scaffold_outside_regions(const std::string& rendered) {
    std::string out = rendered;
    for (const auto& r : region_names()) {
        const std::string b = region_begin_marker(r);
        const std::string e = region_end_marker(r);
        const auto bp = out.find(b);
        if (bp == std::string::npos) continue;
        const auto ep = out.find(e, bp);
        if (ep == std::string::npos) continue;
        out.erase(bp + b.size(), ep - bp - b.size());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Diffs

struct PromptDiff {
    std::string region;
    std::string search;
    std::string replace;

    bool operator==(const PromptDiff&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(PromptDiff, region, search, replace)

inline std::string prompt_version_id(const std::optional<std::string>& parent, const std::map<std::string, std::string>& regions) {
    std::string material = parent.value_or("");
    material.push_back('\0');
    material += json(regions).dump();
    return "pv-" + sha256_hex(material).substr(0, 12);
}

inline PromptState apply_prompt_diff(const PromptState& state, const std::vector<PromptDiff>& diffs, int max_mutations = 3) {
    if (static_cast<int>(diffs.size()) > max_mutations)
        throw Error(ErrorCode::TooManyMutations,
                    std::to_string(diffs.size()) + " diffs exceed the limit of " + std::to_string(max_mutations));
    PromptState next = state;
    for (const auto& d : diffs) {
        if (!is_region_name(d.region)) throw Error(ErrorCode::RegionViolation, "unknown region '" + d.region + "'");
        if (d.search.empty()) throw Error(ErrorCode::SearchNotFound, "empty search text");
        if (d.replace.find(kMarkerPrefix) != std::string::npos)
            throw Error(ErrorCode::RegionViolation, "replacement contains a region marker");
        std::string& text = next.evolvable.at(d.region);
        const std::size_t n = detail::count_occurrences(text, d.search);
        if (n == 0) {
            if (detail::count_occurrences(state.fixed_scaffold, d.search) > 0)
                throw Error(ErrorCode::RegionViolation, "search text lies in the fixed scaffold");
            throw Error(ErrorCode::SearchNotFound, "search text not in region " + d.region);
        }
        if (n > 1) throw Error(ErrorCode::AmbiguousMatch, "search text occurs " + std::to_string(n) + " times in " + d.region);
        text.replace(text.find(d.search), d.search.size(), d.replace);
    }
    next.parent_version = state.version_id;
    next.version_id = prompt_version_id(next.parent_version, next.evolvable);
    return next;
}

inline std::string format_diff(const PromptDiff& d) {
    return "<<<<SEARCH region=" + d.region + "\n" + d.search + "\n====\n" + d.replace + "\n>>>>REPLACE\n";
}

// Parses SEARCH/REPLACE blocks out of free text. Malformed blocks and blocks
// beyond `max_mutations` are dropped with a reason appended to `dropped`.
inline std::vector<PromptDiff> parse_meta_diffs(const std::string& text, int max_mutations,
                                                std::vector<std::string>* dropped = nullptr) {
    auto note = [&](const std::string& why) {
        if (dropped) dropped->push_back(why);
    };
    std::vector<std::string> lines;
    {
        std::istringstream in(text);
        std::string l;
        while (std::getline(in, l)) {
            if (!l.empty() && l.back() == '\r') l.pop_back();
            lines.push_back(l);
        }
    }
    auto join = [](const std::vector<std::string>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "\n" : "") + v[i];
        return s;
    };
    std::vector<PromptDiff> out;
    int block = 0;
    for (std::size_t i = 0; i < lines.size();) {
        const std::string head = detail::trim(lines[i]);
        if (head.rfind("<<<<SEARCH", 0) != 0) {
            ++i;
            continue;
        }
        ++block;
        const std::string tag = "block " + std::to_string(block) + ": ";
        std::string region;
        const auto rp = head.find("region=");
        if (rp != std::string::npos) region = detail::trim(head.substr(rp + 7));
        std::vector<std::string> search, replace;
        int phase = 0;
        std::size_t j = i + 1;
        bool closed = false;
        for (; j < lines.size(); ++j) {
            const std::string t = detail::trim(lines[j]);
            if (t.rfind("<<<<SEARCH", 0) == 0) break;
            if (phase == 0 && t == "====") {
                phase = 1;
                continue;
            }
            if (phase == 1 && t == ">>>>REPLACE") {
                closed = true;
                ++j;
                break;
            }
            (phase == 0 ? search : replace).push_back(lines[j]);
        }
        i = j;
        if (!closed) {
            note(tag + "unterminated block");
            continue;
        }
        if (region.empty()) {
            note(tag + "missing region");
            continue;
        }
        PromptDiff d{region, join(search), join(replace)};
        if (d.search.empty()) {
            note(tag + "empty search text");
            continue;
        }
        out.push_back(std::move(d));
    }
    if (out.empty()) throw Error(ErrorCode::NoParsableDiffs, "no well-formed SEARCH/REPLACE block");
    if (static_cast<int>(out.size()) > max_mutations) {
        for (std::size_t k = static_cast<std::size_t>(max_mutations); k < out.size(); ++k)
            note("diff " + std::to_string(k + 1) + ": exceeds max_mutations " + std::to_string(max_mutations));
        out.resize(static_cast<std::size_t>(max_mutations));
    }
    return out;
}

inline bool should_update_prompt(int generation, int frequency) {
    if (frequency < 1) throw Error(ErrorCode::InvalidConfig, "prompt update frequency must be >= 1");
    return generation > 0 && generation % frequency == 0;
}

// ---------------------------------------------------------------------------
// Chat backends

struct ChatMessage {
    std::string role;
    std::string content;

    bool operator==(const ChatMessage&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ChatMessage, role, content)

struct ChatConfig {
    std::string model = "mock";
    double temperature = 0.3;
    double top_p = 1.0;
    int max_tokens = 8000;
};

struct ChatRequest {
    std::string model;
    std::vector<ChatMessage> messages;
    double temperature = 0.3;
    double top_p = 1.0;
    int max_tokens = 8000;
    std::uint64_t seed = 0;
};

inline void to_json(json& j, const ChatRequest& r) {
    j = json{{"model", r.model},
             {"messages", r.messages},
             {"temperature", r.temperature},
             {"top_p", r.top_p},
             {"max_tokens", r.max_tokens},
             {"seed", r.seed}};
}

inline ChatRequest make_request(const ChatConfig& cfg, const std::string& user_text, std::uint64_t seed) {
    return ChatRequest{cfg.model, {{"user", user_text}}, cfg.temperature, cfg.top_p, cfg.max_tokens, seed};
}

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    // Returns the response text. Throws BackendUnavailable on transport failure.
    virtual std::string complete(const ChatRequest& req) = 0;
    virtual std::string name() const = 0;
};

struct BankEntry {
    std::string name;
    std::string text;
};

inline bool is_template_request(const std::string& prompt) {
    return prompt.find("forward_templated") != std::string::npos && prompt.find("dispatch-options") != std::string::npos;
}

// Deterministic stand-in for the code generator. Entries are picked by hashing
// the request seed and prompt; `templated_*` entries answer tuning requests.
// A `.txt` entry is returned verbatim, anything else is wrapped as a code block.
class MockGeneratorBackend : public ChatBackend {
public:
    explicit MockGeneratorBackend(std::vector<BankEntry> bank, std::string label = "mock-generator")
        : label_(std::move(label)) {
        for (auto& e : bank) (e.name.rfind("templated_", 0) == 0 ? templated_ : plain_).push_back(std::move(e));
        if (plain_.empty()) throw Error(ErrorCode::InvalidConfig, "mock bank has no entries");
    }

    static std::vector<BankEntry> load_bank(const std::filesystem::path& dir) {
        std::vector<BankEntry> out;
        if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::MissingField, "mock bank directory " + dir.string());
        for (const auto& f : std::filesystem::directory_iterator(dir))
            if (f.is_regular_file()) out.push_back({f.path().filename().string(), detail::read_file(f.path())});
        std::sort(out.begin(), out.end(), [](const BankEntry& a, const BankEntry& b) { return a.name < b.name; });
        return out;
    }

    std::string complete(const ChatRequest& req) override {
        const std::string& prompt = req.messages.empty() ? std::string() : req.messages.back().content;
        const bool templ = is_template_request(prompt) && !templated_.empty();
        const auto& pool = templ ? templated_ : plain_;
        const std::uint64_t h = mix64(req.seed ^ stable_hash(prompt));
        const BankEntry& e = pool[h % pool.size()];
        {
            std::lock_guard lock(mu_);
            requests_.push_back(req);
        }
        if (e.name.size() > 4 && e.name.substr(e.name.size() - 4) == ".txt") return e.text;
        return "Analysis: applying the variant '" + e.name + "'.\n\n```cpp\n" + e.text + (e.text.ends_with("\n") ? "" : "\n") + "```\n";
    }

    std::string name() const override { return label_; }

    std::size_t call_count() const {
        std::lock_guard lock(mu_);
        return requests_.size();
    }

    std::vector<ChatRequest> requests() const {
        std::lock_guard lock(mu_);
        return requests_;
    }

private:
    std::string label_;
    std::vector<BankEntry> plain_, templated_;
    mutable std::mutex mu_;
    std::vector<ChatRequest> requests_;
};

// Deterministic stand-in for the meta-prompter: appends one lesson line to the
// strategies region, anchored on a line that occurs exactly once there.
class MockMetaBackend : public ChatBackend {
public:
    std::string complete(const ChatRequest& req) override {
        const std::string prompt = req.messages.empty() ? std::string() : req.messages.back().content;
        ++calls_;
        const auto regions = extract_regions(prompt);
        auto it = regions.find("strategies");
        if (it == regions.end()) return "The guidance looks adequate; no edits.";
        const std::string& region = it->second;
        std::vector<std::string> lines;
        std::istringstream in(region);
        for (std::string l; std::getline(in, l);) lines.push_back(l);
        std::string anchor;
        for (auto l = lines.rbegin(); l != lines.rend(); ++l)
            if (!detail::trim(*l).empty() && detail::count_occurrences(region, *l) == 1) {
                anchor = *l;
                break;
            }
        if (anchor.empty()) return "The guidance looks adequate; no edits.";
        std::string summary;
        const auto sp = prompt.find("Summary: ");
        if (sp != std::string::npos) summary = prompt.substr(sp + 9, prompt.find('\n', sp) - sp - 9);
        static const char* lessons[] = {
            "when kernels fail to compile, restate the exact helper signatures before using them",
            "when correct kernels are slow, check that global loads are coalesced before tuning work-group sizes",
            "when results are wrong, re-check index bounds at the edges of each tile",
            "when speedups stall, try fusing the epilogue instead of launching a second kernel"};
        const std::string lesson = lessons[stable_hash(prompt) % 4];
        return "Diagnosis: the strategies lack a rule for this pattern.\n\n<<<<SEARCH region=strategies\n" + anchor +
               "\n====\n" + anchor + "\n- Lesson (" + summary + "): " + lesson + ".\n>>>>REPLACE\n";
    }

    std::string name() const override { return "mock-meta"; }
    int calls() const { return calls_; }

private:
    int calls_ = 0;
};

struct RecentOutcome {
    KernelCandidate candidate;
    EvaluationResult result;
};

inline std::string build_meta_prompt(const TaskSpec& task, const PromptState& state, const std::vector<RecentOutcome>& recent,
                                     int max_mutations) {
    auto clip = [](const std::string& s, std::size_t n) { return s.size() <= n ? s : s.substr(0, n) + "\n[... truncated]"; };
    std::string outcomes;
    int correct = 0;
    double best = 0.0;
    for (const auto& r : recent) {
        char head[256];
        std::snprintf(head, sizeof head, "### %s: %s, speedup %s, fitness %.3f\n", r.candidate.candidate_id.c_str(),
                      to_string(r.result.status), r.result.speedup ? std::to_string(*r.result.speedup).c_str() : "n/a",
                      r.candidate.fitness);
        outcomes += head;
        outcomes += "```\n" + clip(r.candidate.source, 3000) + "\n```\n";
        if (!r.result.log.empty()) outcomes += "Log:\n```\n" + clip(r.result.log, 800) + "\n```\n";
        if (r.result.status == EvalStatus::Correct) {
            ++correct;
            best = std::max(best, r.result.speedup.value_or(0.0));
        }
    }
    char summary[128];
    std::snprintf(summary, sizeof summary, "%zu kernels, %d correct, best speedup %.3f", recent.size(), correct, best);
    std::map<std::string, std::string> vars{{"language", detail::language_text(task.language).display},
                                            {"outcomes", outcomes},
                                            {"summary", summary},
                                            {"max_mutations", std::to_string(max_mutations)}};
    detail::put_regions(vars, state);
    return render_template(seed::meta_request, vars);
}

// Asks the meta backend for edits. Never applies them.
inline std::vector<PromptDiff> request_prompt_update(ChatBackend& meta, const ChatConfig& cfg, const TaskSpec& task,
                                                     const PromptState& state, const std::vector<RecentOutcome>& recent,
                                                     int max_mutations = 3, std::uint64_t seed = 0,
                                                     std::vector<std::string>* dropped = nullptr) {
    if (recent.empty()) throw Error(ErrorCode::InvalidConfig, "prompt update needs at least one recent outcome");
    const std::string text = meta.complete(make_request(cfg, build_meta_prompt(task, state, recent, max_mutations), seed));
    return parse_meta_diffs(text, max_mutations, dropped);
}

// ---------------------------------------------------------------------------
// Prompt archive

struct PromptArchiveEntry {
    PromptState state;
    double fitness = 0.0;
    int uses = 0;
    std::uint64_t order = 0;
};

class PromptArchive {
public:
    explicit PromptArchive(std::size_t capacity = 16) : capacity_(capacity) {
        if (capacity_ < 2) throw Error(ErrorCode::InvalidConfig, "prompt archive capacity must be >= 2");
    }

    // Adds a version and makes it current. Over capacity, evicts the lowest
    // fitness entry that is neither the best nor the one just added.
    void add(const PromptState& s) {
        latest_ = s.version_id;
        if (find(s.version_id)) return;
        entries_.push_back({s, 0.0, 0, next_order_++});
        while (entries_.size() > capacity_) {
            const std::string best_id = best().state.version_id;
            auto victim = entries_.end();
            for (auto it = entries_.begin(); it != entries_.end(); ++it) {
                if (it->state.version_id == best_id || it->state.version_id == latest_) continue;
                if (victim == entries_.end() || it->fitness < victim->fitness ||
                    (it->fitness == victim->fitness && it->order < victim->order))
                    victim = it;
            }
            evicted_.push_back(victim->state.version_id);
            entries_.erase(victim);
        }
    }

    void record_fitness(const std::string& version_id, double kernel_fitness) {
        if (!(kernel_fitness >= 0.0 && kernel_fitness <= 1.0)) throw Error(ErrorCode::InvalidConfig, "fitness outside [0,1]");
        auto* e = find_mut(version_id);
        if (!e) throw Error(ErrorCode::UnknownVersion, version_id);
        e->fitness = std::max(e->fitness, kernel_fitness);
        e->uses++;
    }

    const PromptArchiveEntry* find(const std::string& id) const {
        for (const auto& e : entries_)
            if (e.state.version_id == id) return &e;
        return nullptr;
    }

    // Highest fitness; ties go to the oldest entry.
    const PromptArchiveEntry& best() const {
        if (entries_.empty()) throw Error(ErrorCode::EmptyArchive, "prompt archive is empty");
        const PromptArchiveEntry* b = &entries_.front();
        for (const auto& e : entries_)
            if (e.fitness > b->fitness) b = &e;
        return *b;
    }

    const PromptState& latest() const {
        const auto* e = find(latest_);
        if (!e) throw Error(ErrorCode::EmptyArchive, "prompt archive is empty");
        return e->state;
    }

    // Fitness-proportionate draw; uniform when every entry is at zero.
    const PromptState& sample(Rng& rng) const {
        if (entries_.empty()) throw Error(ErrorCode::EmptyArchive, "prompt archive is empty");
        double total = 0;
        for (const auto& e : entries_) total += e.fitness;
        if (total <= 0) return entries_[rng.below(entries_.size())].state;
        double u = rng.uniform01() * total;
        for (const auto& e : entries_) {
            u -= e.fitness;
            if (u < 0) return e.state;
        }
        return entries_.back().state;
    }

    const std::vector<PromptArchiveEntry>& entries() const { return entries_; }
    const std::vector<std::string>& evicted() const { return evicted_; }
    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }

    json to_json() const {
        json arr = json::array();
        for (const auto& e : entries_)
            arr.push_back({{"state", e.state}, {"fitness", e.fitness}, {"uses", e.uses}, {"order", e.order}});
        return json{{"capacity", capacity_}, {"latest", latest_}, {"next_order", next_order_}, {"entries", arr},
                    {"evicted", evicted_}};
    }

    static PromptArchive from_json(const json& j) {
        PromptArchive a(j.at("capacity").get<std::size_t>());
        a.latest_ = j.at("latest").get<std::string>();
        a.next_order_ = j.at("next_order").get<std::uint64_t>();
        for (const auto& e : j.at("entries"))
            a.entries_.push_back({e.at("state").get<PromptState>(), e.at("fitness").get<double>(), e.at("uses").get<int>(),
                                  e.at("order").get<std::uint64_t>()});
        a.evicted_ = j.at("evicted").get<std::vector<std::string>>();
        return a;
    }

private:
    PromptArchiveEntry* find_mut(const std::string& id) {
        for (auto& e : entries_)
            if (e.state.version_id == id) return &e;
        return nullptr;
    }

    std::size_t capacity_;
    std::vector<PromptArchiveEntry> entries_;
    std::vector<std::string> evicted_;
    std::string latest_;
    std::uint64_t next_order_ = 0;
};

} // namespace kforge
