#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "coord.hpp"
#include "taskspec.hpp"

namespace kforge {

/// Routes a match to another dimension's category when both occur in the same
/// scope (e.g. a barrier that synchronizes local-memory staging).
struct PatternRedirect {
    Dimension dim = Dimension::Mem;
    std::string category;
    double weight = 0.0;

    bool operator==(const PatternRedirect&) const = default;
};

struct PatternRule {
    Dimension dim = Dimension::Mem;
    std::string category;
    int level = 0;
    double weight = 0.0;
    std::string pattern;
    std::optional<PatternRedirect> redirect;
};

/// Per-language descriptor evidence. Immutable once loaded.
///
/// Text format, one record per line, tab separated:
///
///     <dimension> <category> <level> <weight> <regex> [redirect=<dim>:<category>:<weight>]
///     @version <id>
///     @threshold <dimension> <level> <value>
///     @annotation <regex>          (marks algo level 3; matched inside comments)
///
/// Blank lines and lines starting with '#' are ignored.
class PatternTable {
public:
    static constexpr double default_threshold = 1.0;

    PatternTable() { for (auto& t : thresholds_) t.fill(default_threshold); }

    static PatternTable parse(const std::string& text) {
        PatternTable table;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (detail::trim(line).empty() || line[0] == '#') continue;
            std::vector<std::string> f;
            std::size_t start = 0;
            for (std::size_t tab = line.find('\t'); tab != std::string::npos; tab = line.find('\t', start)) {
                f.push_back(line.substr(start, tab - start));
                start = tab + 1;
            }
            f.push_back(line.substr(start));
            auto fail = [&](const std::string& why) {
                throw Error(ErrorCode::MalformedPatternTable, "line " + std::to_string(lineno) + ": " + why);
            };
            try {
                if (f[0] == "@version") {
                    if (f.size() != 2) fail("@version takes one field");
                    table.version_ = f[1];
                } else if (f[0] == "@threshold") {
                    if (f.size() != 4) fail("@threshold takes dimension, level, value");
                    const int lvl = std::stoi(f[2]);
                    if (lvl < 0 || lvl > 3) fail("level out of range");
                    table.thresholds_[index_of(parse_dimension(f[1]))][lvl] = std::stod(f[3]);
                } else if (f[0] == "@annotation") {
                    if (f.size() != 2) fail("@annotation takes one regex");
                    table.set_annotation(f[1]);
                } else {
                    if (f.size() != 5 && f.size() != 6) fail("expected 5 or 6 tab-separated fields");
                    PatternRule r;
                    r.dim = parse_dimension(f[0]);
                    r.category = f[1];
                    r.level = std::stoi(f[2]);
                    r.weight = std::stod(f[3]);
                    r.pattern = f[4];
                    if (r.level < 0 || r.level > 3) fail("level out of range");
                    if (!(r.weight >= 0.0)) fail("negative weight");
                    if (f.size() == 6) {
                        const std::string& spec = f[5];
                        if (spec.rfind("redirect=", 0) != 0) fail("unknown option '" + spec + "'");
                        const auto parts = split(spec.substr(9), ':');
                        if (parts.size() != 3) fail("redirect needs dim:category:weight");
                        r.redirect = PatternRedirect{parse_dimension(parts[0]), parts[1], std::stod(parts[2])};
                        if (r.redirect->dim == r.dim) fail("redirect must target another dimension");
                    }
                    table.add_rule(std::move(r));
                }
            } catch (const std::regex_error& e) {
                fail(std::string("bad regex: ") + e.what());
            } catch (const std::invalid_argument&) {
                fail("bad number");
            } catch (const std::out_of_range&) {
                fail("number out of range");
            }
        }
        return table;
    }

    std::string serialize() const {
        std::ostringstream out;
        out << "@version\t" << version_ << "\n";
        for (std::size_t d = 0; d < 3; ++d)
            for (int l = 0; l < 4; ++l)
                if (thresholds_[d][l] != default_threshold)
                    out << "@threshold\t" << to_string(static_cast<Dimension>(d)) << "\t" << l << "\t" << thresholds_[d][l] << "\n";
        if (!annotation_.empty()) out << "@annotation\t" << annotation_ << "\n";
        for (const auto& r : rules_) {
            out << to_string(r.dim) << "\t" << r.category << "\t" << r.level << "\t" << r.weight << "\t" << r.pattern;
            if (r.redirect) out << "\tredirect=" << to_string(r.redirect->dim) << ":" << r.redirect->category << ":" << r.redirect->weight;
            out << "\n";
        }
        return out.str();
    }

    /// Recorded in the run log so a run's descriptors can be reproduced.
    std::string content_hash() const { return sha256_hex(serialize()); }

    void add_rule(PatternRule rule) {
        compiled_.emplace_back(rule.pattern, std::regex::ECMAScript | std::regex::optimize);
        rules_.push_back(std::move(rule));
    }

    void set_threshold(Dimension d, int level, double value) { thresholds_[index_of(d)][level] = value; }
    double threshold(Dimension d, int level) const { return thresholds_[index_of(d)][level]; }

    void set_annotation(const std::string& re) {
        annotation_ = re;
        annotation_re_ = std::regex(re, std::regex::ECMAScript);
    }

    const std::string& version() const { return version_; }
    const std::vector<PatternRule>& rules() const { return rules_; }
    const std::regex& compiled(std::size_t i) const { return compiled_[i]; }
    const std::optional<std::regex>& annotation() const { return annotation_re_; }

    bool has_category(Dimension d, const std::string& category) const {
        return std::any_of(rules_.begin(), rules_.end(), [&](const PatternRule& r) { return r.dim == d && r.category == category; });
    }

private:
    static std::vector<std::string> split(const std::string& s, char sep) {
        std::vector<std::string> out;
        std::size_t start = 0;
        for (std::size_t p = s.find(sep); p != std::string::npos; p = s.find(sep, start)) {
            out.push_back(s.substr(start, p - start));
            start = p + 1;
        }
        out.push_back(s.substr(start));
        return out;
    }

    std::string version_ = "custom";
    std::vector<PatternRule> rules_;
    std::vector<std::regex> compiled_;
    std::array<std::array<double, 4>, 3> thresholds_{};
    std::string annotation_;
    std::optional<std::regex> annotation_re_;
};

namespace detail {

// clang-format off
inline constexpr const char* sycl_pattern_table = R"TBL(# SYCL descriptor evidence
@version	sycl-1
@annotation	(//|/\*)[^\n]*KF:ALGO=3
mem	vectorized	1	1.5	\bsycl::vec\s*<
mem	vectorized	1	1.5	\b(sycl::)?(float|half)(2|4|8|16)\b
mem	vectorized	1	1.5	\bmulti_ptr\s*<
mem	vectorized	1	0.6	\balignas\s*\(
mem	slm_tiling	2	0.6	\blocal_accessor\s*<
mem	slm_tiling	2	0.6	\bgroup_local_memory(_for_overwrite)?\s*<
mem	slm_tiling	2	0.6	\blocal_ptr\s*<
mem	slm_tiling	2	0.6	\bfor\s*\([^)]*\b\w*(tile|TILE|Tile)\w*
mem	hierarchy	3	0.6	\b(reg|register)_?(tile|block|blk)\w*
mem	hierarchy	3	0.6	\b\w*[Aa]cc(um)?\w*\s*\[\s*\w+\s*\]\s*\[
mem	hierarchy	3	0.6	\bprefetch\w*\s*\(
algo	fusion	1	0.4	\bsycl::(exp|tanh|fmax|fmin|log|sqrt|rsqrt|erf)\s*\(
algo	fusion	1	0.4	\b(relu|gelu|sigmoid|silu|swish|mish|hardtanh|hardswish|clamp)\w*\s*\(
algo	fusion	1	0.6	\b\w*(fused|fuse|Fused)\w*\b
algo	online	2	0.6	\b(running|online)_?(max|sum|mean|var)\w*
algo	online	2	0.6	\b(m_prev|m_new|l_prev|l_new|row_max|row_sum)\b
algo	online	2	0.6	\b[Ww]elford\w*
algo	online	2	0.6	\bexp\s*\([^)]*-\s*\w*(max|m_new|m_prev)\w*
sync	barrier	1	1.5	\b(sycl::)?group_barrier\s*\(	redirect=mem:slm_tiling:0.4
sync	barrier	1	1.5	\.barrier\s*\(	redirect=mem:slm_tiling:0.4
sync	subgroup	2	1.5	\b(shift_group_left|shift_group_right|permute_group_by_xor|select_from_group|group_broadcast)\s*\(
sync	subgroup	2	1.5	\b(reduce_over_group|exclusive_scan_over_group|inclusive_scan_over_group)\s*\(
sync	subgroup	2	0.6	\bget_sub_group\s*\(
sync	global	3	1.5	\batomic_ref\s*<
sync	global	3	1.5	\bfetch_(add|sub|max|min|and|or)\s*\(
sync	global	3	1.5	\batomic_fence\s*\(
)TBL";

inline constexpr const char* cuda_pattern_table = R"TBL(# CUDA descriptor evidence
@version	cuda-1
@annotation	(//|/\*)[^\n]*KF:ALGO=3
mem	vectorized	1	1.5	\b(float|half)(2|4)\b
mem	vectorized	1	1.5	\b__ldg\s*\(
mem	vectorized	1	0.6	\b__align__\s*\(
mem	slm_tiling	2	0.6	\b__shared__\b
mem	slm_tiling	2	0.6	\bfor\s*\([^)]*\b\w*(tile|TILE|Tile)\w*
mem	hierarchy	3	0.6	\b(reg|register)_?(tile|block|blk)\w*
mem	hierarchy	3	0.6	\b\w*[Aa]cc(um)?\w*\s*\[\s*\w+\s*\]\s*\[
mem	hierarchy	3	0.6	\b(__pipeline_memcpy_async|__prefetch\w*|prefetch\w*)\s*\(
mem	hierarchy	3	0.6	cp\.async
algo	fusion	1	0.4	\b(expf|__expf|tanhf|fmaxf|fminf|logf|sqrtf|rsqrtf|erff)\s*\(
algo	fusion	1	0.4	\b(relu|gelu|sigmoid|silu|swish|mish|hardtanh|hardswish|clamp)\w*\s*\(
algo	fusion	1	0.6	\b\w*(fused|fuse|Fused)\w*\b
algo	online	2	0.6	\b(running|online)_?(max|sum|mean|var)\w*
algo	online	2	0.6	\b(m_prev|m_new|l_prev|l_new|row_max|row_sum)\b
algo	online	2	0.6	\b[Ww]elford\w*
algo	online	2	0.6	\b__?expf?\s*\([^)]*-\s*\w*(max|m_new|m_prev)\w*
sync	barrier	1	1.5	\b__syncthreads\s*\(	redirect=mem:slm_tiling:0.4
sync	barrier	1	1.5	\b(block|cta)\.sync\s*\(	redirect=mem:slm_tiling:0.4
sync	subgroup	2	1.5	\b__shfl(_xor|_down|_up)?_sync\s*\(
sync	subgroup	2	1.5	\b__reduce_\w+_sync\s*\(
sync	subgroup	2	1.5	\bcg::reduce\s*\(
sync	subgroup	2	0.6	\b__ballot_sync\s*\(
sync	global	3	1.5	\batomic(Add|Sub|Max|Min|CAS|Exch|And|Or)\s*\(
sync	global	3	1.5	\bgrid\.sync\s*\(
sync	global	3	1.5	\b__threadfence\s*\(
)TBL";

inline constexpr const char* triton_pattern_table = R"TBL(# Triton descriptor evidence (reduced)
@version	triton-1
@annotation	#[^\n]*KF:ALGO=3
mem	vectorized	1	1.5	\btl\.multiple_of\s*\(
mem	vectorized	1	1.5	\btl\.max_contiguous\s*\(
mem	slm_tiling	2	1.5	\btl\.make_block_ptr\s*\(
mem	slm_tiling	2	0.6	\btl\.dot\s*\(
algo	fusion	1	0.4	\btl\.(exp|sigmoid|maximum|minimum|sqrt|rsqrt|log)\s*\(
algo	online	2	0.6	\b(m_i|l_i|m_ij|l_ij|row_max|running_\w+)\b
sync	subgroup	2	1.5	\btl\.(reduce|sum|max|min|cumsum|associative_scan)\s*\(
sync	global	3	1.5	\btl\.atomic_\w+\s*\(
)TBL";
// clang-format on

} // namespace detail

inline PatternTable default_pattern_table(Language language) {
    switch (language) {
        case Language::SYCL: return PatternTable::parse(detail::sycl_pattern_table);
        case Language::CUDA: return PatternTable::parse(detail::cuda_pattern_table);
        case Language::TRITON: return PatternTable::parse(detail::triton_pattern_table);
    }
    throw Error(ErrorCode::UnknownLanguage, "no pattern table");
}

/// Replaces comment bytes with spaces, keeping newlines and offsets intact.
/// String and character literals are skipped, so comment leaders inside them survive.
inline std::string strip_comments(std::string_view src, bool hash_comments = false) {
    std::string out(src);
    enum class State { Code, Line, Block, Str, Chr } st = State::Code;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const char c = src[i];
        const char n = i + 1 < src.size() ? src[i + 1] : '\0';
        switch (st) {
            case State::Code:
                if (!hash_comments && c == '/' && n == '/') {
                    st = State::Line;
                    out[i] = ' ';
                } else if (!hash_comments && c == '/' && n == '*') {
                    st = State::Block;
                    out[i] = out[i + 1] = ' ';
                    ++i;
                } else if (hash_comments && c == '#') {
                    st = State::Line;
                    out[i] = ' ';
                } else if (c == '"') {
                    st = State::Str;
                } else if (c == '\'' && !hash_comments) {
                    st = State::Chr;
                } else if (c == '\'' && hash_comments) {
                    st = State::Str;  // python single-quoted strings
                }
                break;
            case State::Line:
                if (c == '\n') st = State::Code;
                else out[i] = ' ';
                break;
            case State::Block:
                if (c == '*' && n == '/') {
                    out[i] = out[i + 1] = ' ';
                    ++i;
                    st = State::Code;
                } else if (c != '\n') {
                    out[i] = ' ';
                }
                break;
            case State::Str:
            case State::Chr:
                if (c == '\\') ++i;
                else if (c == '\n') st = State::Code;
                else if ((st == State::Str && (c == '"' || (hash_comments && c == '\''))) || (st == State::Chr && c == '\''))
                    st = State::Code;
                break;
        }
    }
    return out;
}

struct DimensionScore {
    double score = 0.0;
    int level = 0;
};

namespace detail {

// Scope of a position = index of the outermost brace block containing it, or -1 at file level.
inline std::vector<int> outer_scopes(const std::string& code) {
    std::vector<int> scope(code.size() + 1, -1);
    int depth = 0, current = -1, next_id = 0;
    for (std::size_t i = 0; i < code.size(); ++i) {
        if (code[i] == '{') {
            if (depth == 0) current = next_id++;
            ++depth;
        }
        scope[i] = depth > 0 ? current : -1;
        if (code[i] == '}' && depth > 0) {
            --depth;
            if (depth == 0) current = -1;
        }
    }
    return scope;
}

struct Match {
    std::size_t rule;
    int scope;
};

struct Evidence {
    // [dim][category] -> cumulative score; [dim] -> total score; matched rules per dim.
    std::array<std::map<std::string, double>, 3> category_score;
    std::array<double, 3> total{};
    std::array<std::vector<std::size_t>, 3> matched_rules;
    bool algo_annotation = false;
};

inline Evidence gather_evidence(std::string_view source, const PatternTable& table, bool hash_comments) {
    Evidence ev;
    if (table.annotation()) {
        const std::string raw(source);
        ev.algo_annotation = std::regex_search(raw, *table.annotation());
    }
    const std::string code = strip_comments(source, hash_comments);
    const auto scopes = outer_scopes(code);

    std::vector<Match> matches;
    for (std::size_t i = 0; i < table.rules().size(); ++i) {
        for (auto it = std::sregex_iterator(code.begin(), code.end(), table.compiled(i)); it != std::sregex_iterator(); ++it) {
            matches.push_back({i, scopes[static_cast<std::size_t>(it->position())]});
            if (it->length() == 0) break;
        }
    }

    for (const auto& m : matches) {
        const PatternRule& r = table.rules()[m.rule];
        bool redirected = false;
        if (r.redirect) {
            redirected = std::any_of(matches.begin(), matches.end(), [&](const Match& o) {
                const PatternRule& other = table.rules()[o.rule];
                return o.scope == m.scope && other.dim == r.redirect->dim && other.category == r.redirect->category;
            });
        }
        if (redirected) {
            const std::size_t d = index_of(r.redirect->dim);
            ev.category_score[d][r.redirect->category] += r.redirect->weight;
            ev.total[d] += r.redirect->weight;
        } else {
            const std::size_t d = index_of(r.dim);
            ev.category_score[d][r.category] += r.weight;
            ev.total[d] += r.weight;
            ev.matched_rules[d].push_back(m.rule);
        }
    }
    return ev;
}

inline DimensionScore score_from_evidence(const Evidence& ev, const PatternTable& table, Dimension dim) {
    const std::size_t d = index_of(dim);
    DimensionScore out{ev.total[d], 0};
    for (std::size_t rule : ev.matched_rules[d]) {
        const PatternRule& r = table.rules()[rule];
        const double cat = ev.category_score[d].at(r.category);
        if (cat > table.threshold(dim, r.level)) out.level = std::max(out.level, r.level);
    }
    if (dim == Dimension::Algo) {
        // Level 3 is not statically decidable; only the explicit annotation grants it.
        out.level = ev.algo_annotation ? 3 : std::min(out.level, 2);
    }
    return out;
}

} // namespace detail

/// Score and level of one descriptor dimension for `source`.
inline DimensionScore dimension_score(std::string_view source, const PatternTable& table, Dimension dim,
                                      Language language = Language::SYCL) {
    const auto ev = detail::gather_evidence(source, table, language == Language::TRITON);
    return detail::score_from_evidence(ev, table, dim);
}

inline BehavioralCoord classify(std::string_view source, const PatternTable& table, Language language = Language::SYCL) {
    const auto ev = detail::gather_evidence(source, table, language == Language::TRITON);
    BehavioralCoord c;
    for (Dimension d : {Dimension::Mem, Dimension::Algo, Dimension::Sync})
        c[index_of(d)] = detail::score_from_evidence(ev, table, d).level;
    return c;
}

} // namespace kforge
