#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "common.hpp"

namespace kforge {

enum class Language { SYCL, CUDA, TRITON };

inline const char* to_string(Language lang) {
    switch (lang) {
        case Language::SYCL: return "SYCL";
        case Language::CUDA: return "CUDA";
        case Language::TRITON: return "TRITON";
    }
    return "?";
}

inline Language parse_language(std::string_view text) {
    std::string up(text);
    std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (up == "SYCL") return Language::SYCL;
    if (up == "CUDA") return Language::CUDA;
    if (up == "TRITON") return Language::TRITON;
    throw Error(ErrorCode::UnknownLanguage, "unsupported language '" + std::string(text) + "'");
}

struct BenchConstraints {
    double min_warmup_time_s = 1.0;
    int min_warmup_iters = 10;
    double inner_loop_min_time_s = 0.01;
    int min_main_iters = 10;
    double min_main_time_s = 1.0;

    bool operator==(const BenchConstraints&) const = default;
};

struct TestConfig {
    double correctness_rel_tol = 0.01;
    double correctness_pass_fraction = 0.99;
    double epsilon_div = 1e-6;
    /// Optional gate on cosine similarity; off by default (reported only).
    bool cosine_gate = false;
    double cosine_min = 0.999;
    BenchConstraints benchmark_constraints;
    /// Opaque harness scripts, run by the execution side. Paths relative to the task dir.
    std::vector<std::string> harness_paths;

    bool operator==(const TestConfig&) const = default;
};

struct TaskSpec {
    std::string task_id;
    Language language = Language::SYCL;
    std::string reference_code;
    std::optional<std::string> user_instructions;
    std::optional<std::string> initial_kernel;
    TestConfig test_config;
    double target_speedup = 2.0;
    std::string hardware_profile_id = "default";
    /// Free text describing the device; rendered into prompts.
    std::string hardware_spec;
    std::string reference_language = "PyTorch";

    bool operator==(const TaskSpec&) const = default;
};

namespace section {
inline constexpr const char* reference = "reference";
inline constexpr const char* instructions = "instructions";
inline constexpr const char* initial_kernel = "initial_kernel";
} // namespace section

namespace detail {

inline std::string canonical_section_name(std::string name) {
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (name == "reference_code") return section::reference;
    if (name == "user_instructions") return section::instructions;
    if (name == "initial" || name == "initial_kernels") return section::initial_kernel;
    return name;
}

struct MarkerLine {
    bool begin;
    std::string name;
};

// `### KF:BEGIN <name>` / `### KF:END <name>`, optionally behind a host comment leader.
inline std::optional<MarkerLine> parse_marker_line(std::string_view line) {
    static const std::regex re(R"(^[ \t]*(?:(?://|#|--|;|/\*)[ \t]*)?### KF:(BEGIN|END) ([A-Za-z_][A-Za-z0-9_]*)[ \t]*(?:\*/)?[ \t]*\r?$)");
    std::match_results<std::string_view::const_iterator> m;
    if (!std::regex_match(line.begin(), line.end(), m, re)) return std::nullopt;
    return MarkerLine{m[1].str() == "BEGIN", canonical_section_name(m[2].str())};
}

inline bool valid_task_id(const std::string& id) {
    static const std::regex re(R"(^[A-Za-z0-9_][A-Za-z0-9._-]*$)");
    return !id.empty() && id.size() <= 128 && std::regex_match(id, re);
}

} // namespace detail

/// Returns every marked section keyed by canonical name.
///
/// A section's text is the bytes between the end of its BEGIN line and the
/// start of its END line, minus the single newline that terminates the last
/// content line. Text outside markers is ignored.
inline std::map<std::string, std::string> extract_marked_sections(std::string_view text) {
    std::map<std::string, std::string> out;
    std::optional<std::string> open_name;
    std::size_t content_begin = 0;

    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        const bool last = eol == std::string_view::npos;
        if (last) eol = text.size();
        const std::string_view line = text.substr(pos, eol - pos);
        const std::size_t next = last ? text.size() + 1 : eol + 1;

        if (auto marker = detail::parse_marker_line(line)) {
            if (marker->begin) {
                if (open_name) {
                    throw Error(ErrorCode::UnterminatedSection,
                                "section '" + *open_name + "' not closed before BEGIN " + marker->name);
                }
                if (out.count(marker->name)) throw Error(ErrorCode::DuplicateSection, "section '" + marker->name + "' appears twice");
                open_name = marker->name;
                content_begin = std::min(next, text.size());
            } else {
                if (!open_name || *open_name != marker->name) {
                    throw Error(ErrorCode::UnterminatedSection, "END " + marker->name + " without matching BEGIN");
                }
                std::size_t content_end = pos;
                if (content_end > content_begin && text[content_end - 1] == '\n') --content_end;
                out.emplace(*open_name, std::string(text.substr(content_begin, content_end - content_begin)));
                open_name.reset();
            }
        }
        pos = next;
    }
    if (open_name) throw Error(ErrorCode::UnterminatedSection, "section '" + *open_name + "' has no END marker");
    return out;
}

/// Inverse of extract_marked_sections for one section.
inline std::string wrap_section(const std::string& name, const std::string& content) {
    return "### KF:BEGIN " + name + "\n" + content + "\n### KF:END " + name + "\n";
}

namespace detail {

template <typename T>
T yaml_scalar(const YAML::Node& node, const char* key, T fallback) {
    const YAML::Node v = node[key];
    if (!v) return fallback;
    try {
        return v.as<T>();
    } catch (const YAML::Exception& e) {
        throw Error(ErrorCode::MalformedConfig, std::string("bad value for '") + key + "': " + e.what());
    }
}

inline void check_task_invariants(const TaskSpec& spec) {
    const auto& tc = spec.test_config;
    const auto& bc = tc.benchmark_constraints;
    if (!(tc.correctness_rel_tol > 0.0 && tc.correctness_rel_tol < 1.0))
        throw Error(ErrorCode::MalformedConfig, "rel_tol must lie in (0,1)");
    if (!(tc.correctness_pass_fraction > 0.0 && tc.correctness_pass_fraction <= 1.0))
        throw Error(ErrorCode::MalformedConfig, "pass_fraction must lie in (0,1]");
    if (!(tc.epsilon_div > 0.0)) throw Error(ErrorCode::MalformedConfig, "epsilon must be positive");
    if (!(bc.min_warmup_time_s > 0 && bc.min_warmup_iters > 0 && bc.inner_loop_min_time_s > 0 && bc.min_main_iters > 0 &&
          bc.min_main_time_s > 0))
        throw Error(ErrorCode::MalformedConfig, "benchmark constraints must be strictly positive");
    if (!(spec.target_speedup > 0.0)) throw Error(ErrorCode::MalformedConfig, "target_speedup must be positive");
}

} // namespace detail

/// Parses a task from its config text and the contents of its marked source files.
inline TaskSpec parse_task(const std::string& config_text, const std::map<std::string, std::string>& section_files) {
    YAML::Node root;
    try {
        root = YAML::Load(config_text);
    } catch (const YAML::Exception& e) {
        throw Error(ErrorCode::MalformedConfig, e.what());
    }
    if (!root.IsMap()) throw Error(ErrorCode::MalformedConfig, "task config must be a key/value mapping");

    TaskSpec spec;
    if (!root["task_id"]) throw Error(ErrorCode::MissingField, "task_id");
    if (!root["language"]) throw Error(ErrorCode::MissingField, "language");
    spec.task_id = detail::yaml_scalar<std::string>(root, "task_id", "");
    if (!detail::valid_task_id(spec.task_id)) throw Error(ErrorCode::MalformedConfig, "task_id '" + spec.task_id + "' is not filesystem-safe");
    spec.language = parse_language(detail::yaml_scalar<std::string>(root, "language", ""));
    spec.target_speedup = detail::yaml_scalar<double>(root, "target_speedup", 2.0);
    spec.hardware_profile_id = detail::yaml_scalar<std::string>(root, "hardware_profile", "default");
    spec.hardware_spec = detail::yaml_scalar<std::string>(root, "hardware_spec", "");
    spec.reference_language = detail::yaml_scalar<std::string>(root, "reference_language", "PyTorch");

    auto& tc = spec.test_config;
    if (const YAML::Node tol = root["tolerance"]) {
        if (!tol.IsMap()) throw Error(ErrorCode::MalformedConfig, "tolerance must be a mapping");
        tc.correctness_rel_tol = detail::yaml_scalar<double>(tol, "rel_tol", tc.correctness_rel_tol);
        tc.correctness_pass_fraction = detail::yaml_scalar<double>(tol, "pass_fraction", tc.correctness_pass_fraction);
        tc.epsilon_div = detail::yaml_scalar<double>(tol, "epsilon", tc.epsilon_div);
        tc.cosine_gate = detail::yaml_scalar<bool>(tol, "cosine_gate", tc.cosine_gate);
        tc.cosine_min = detail::yaml_scalar<double>(tol, "cosine_min", tc.cosine_min);
    }
    if (const YAML::Node b = root["benchmark"]) {
        if (!b.IsMap()) throw Error(ErrorCode::MalformedConfig, "benchmark must be a mapping");
        auto& bc = tc.benchmark_constraints;
        bc.min_warmup_time_s = detail::yaml_scalar<double>(b, "min_warmup_time_s", bc.min_warmup_time_s);
        bc.min_warmup_iters = detail::yaml_scalar<int>(b, "min_warmup_iters", bc.min_warmup_iters);
        bc.inner_loop_min_time_s = detail::yaml_scalar<double>(b, "inner_loop_min_time_s", bc.inner_loop_min_time_s);
        bc.min_main_iters = detail::yaml_scalar<int>(b, "min_main_iters", bc.min_main_iters);
        bc.min_main_time_s = detail::yaml_scalar<double>(b, "min_main_time_s", bc.min_main_time_s);
    }
    if (const YAML::Node tests = root["tests"]) {
        if (tests.IsScalar()) {
            tc.harness_paths.push_back(tests.as<std::string>());
        } else if (tests.IsSequence()) {
            for (const auto& t : tests) tc.harness_paths.push_back(t.as<std::string>());
        } else {
            throw Error(ErrorCode::MalformedConfig, "tests must be a path or a list of paths");
        }
    }
    detail::check_task_invariants(spec);

    std::map<std::string, std::string> sections;
    for (const auto& [file, text] : section_files) {
        for (auto& [name, body] : extract_marked_sections(text)) {
            if (sections.count(name)) throw Error(ErrorCode::DuplicateSection, "section '" + name + "' defined again in " + file);
            sections.emplace(name, std::move(body));
        }
    }
    auto it = sections.find(section::reference);
    if (it == sections.end() || detail::trim(it->second).empty()) throw Error(ErrorCode::MissingField, "reference section");
    spec.reference_code = it->second;
    if (auto i = sections.find(section::instructions); i != sections.end()) spec.user_instructions = i->second;
    if (auto i = sections.find(section::initial_kernel); i != sections.end()) spec.initial_kernel = i->second;
    return spec;
}

/// Non-fatal observations about a parsed task.
inline std::vector<std::string> validate_task(const TaskSpec& spec) {
    std::vector<std::string> warnings;
    if (!spec.user_instructions && !spec.initial_kernel)
        warnings.push_back("no user instructions and no initial kernel: pure-reference mode");
    if (spec.test_config.harness_paths.empty())
        warnings.push_back("no tests configured: correctness relies on reference-output comparison only");
    if (spec.target_speedup > 10.0) {
        warnings.push_back("fitness saturates early in its lower range: target_speedup " + std::to_string(spec.target_speedup) +
                           " squeezes every correct kernel's fitness toward 0.5");
    } else if (spec.target_speedup <= 1.0) {
        warnings.push_back("fitness saturates early: target_speedup <= 1 gives any baseline-speed kernel fitness 1.0");
    }
    if (spec.user_instructions && detail::count_occurrences(*spec.user_instructions, "```") > 0)
        warnings.push_back("user instructions contain fenced code blocks; they are passed to the prompt verbatim");
    return warnings;
}

/// On-disk representation of a task: config text plus marked source files.
struct TaskFiles {
    std::string config_text;
    std::map<std::string, std::string> files;
};

inline TaskFiles serialize_task(const TaskSpec& spec) {
    YAML::Emitter out;
    out.SetDoublePrecision(17);
    out << YAML::BeginMap;
    out << YAML::Key << "task_id" << YAML::Value << spec.task_id;
    out << YAML::Key << "language" << YAML::Value << to_string(spec.language);
    out << YAML::Key << "target_speedup" << YAML::Value << spec.target_speedup;
    out << YAML::Key << "hardware_profile" << YAML::Value << spec.hardware_profile_id;
    if (!spec.hardware_spec.empty()) out << YAML::Key << "hardware_spec" << YAML::Value << YAML::Literal << spec.hardware_spec;
    out << YAML::Key << "reference_language" << YAML::Value << spec.reference_language;
    const auto& tc = spec.test_config;
    out << YAML::Key << "tolerance" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "rel_tol" << YAML::Value << tc.correctness_rel_tol;
    out << YAML::Key << "pass_fraction" << YAML::Value << tc.correctness_pass_fraction;
    out << YAML::Key << "epsilon" << YAML::Value << tc.epsilon_div;
    out << YAML::Key << "cosine_gate" << YAML::Value << tc.cosine_gate;
    out << YAML::Key << "cosine_min" << YAML::Value << tc.cosine_min;
    out << YAML::EndMap;
    const auto& bc = tc.benchmark_constraints;
    out << YAML::Key << "benchmark" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "min_warmup_time_s" << YAML::Value << bc.min_warmup_time_s;
    out << YAML::Key << "min_warmup_iters" << YAML::Value << bc.min_warmup_iters;
    out << YAML::Key << "inner_loop_min_time_s" << YAML::Value << bc.inner_loop_min_time_s;
    out << YAML::Key << "min_main_iters" << YAML::Value << bc.min_main_iters;
    out << YAML::Key << "min_main_time_s" << YAML::Value << bc.min_main_time_s;
    out << YAML::EndMap;
    if (!tc.harness_paths.empty()) {
        out << YAML::Key << "tests" << YAML::Value << YAML::BeginSeq;
        for (const auto& p : tc.harness_paths) out << p;
        out << YAML::EndSeq;
    }
    out << YAML::Key << "sources" << YAML::Value << YAML::BeginSeq << "sections.txt" << YAML::EndSeq;
    out << YAML::EndMap;

    std::string sections = wrap_section(section::reference, spec.reference_code);
    if (spec.user_instructions) sections += wrap_section(section::instructions, *spec.user_instructions);
    if (spec.initial_kernel) sections += wrap_section(section::initial_kernel, *spec.initial_kernel);
    return TaskFiles{std::string(out.c_str()) + "\n", {{"sections.txt", sections}}};
}

namespace detail {
inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorCode::MalformedConfig, "cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}
} // namespace detail

/// Loads `task.yaml` plus its marked sources from a task directory.
///
/// When the config lists `sources`, only those files are scanned for markers;
/// otherwise every regular file except the config and harness scripts is.
inline TaskSpec load_task_dir(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const fs::path config = dir / "task.yaml";
    if (!fs::is_regular_file(config)) throw Error(ErrorCode::MissingField, "task.yaml not found in " + dir.string());
    const std::string config_text = detail::read_file(config);

    std::vector<std::string> listed;
    std::vector<std::string> harness;
    try {
        const YAML::Node root = YAML::Load(config_text);
        if (root.IsMap()) {
            if (const auto s = root["sources"]; s && s.IsSequence())
                for (const auto& f : s) listed.push_back(f.as<std::string>());
            if (const auto t = root["tests"]) {
                if (t.IsScalar()) harness.push_back(t.as<std::string>());
                if (t.IsSequence())
                    for (const auto& f : t) harness.push_back(f.as<std::string>());
            }
        }
    } catch (const YAML::Exception& e) {
        throw Error(ErrorCode::MalformedConfig, e.what());
    }

    std::map<std::string, std::string> files;
    if (!listed.empty()) {
        for (const auto& f : listed) files[f] = detail::read_file(dir / f);
    } else {
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (!entry.is_regular_file()) continue;
            const std::string name = entry.path().filename().string();
            if (name == "task.yaml" || std::find(harness.begin(), harness.end(), name) != harness.end()) continue;
            files[name] = detail::read_file(entry.path());
        }
    }
    return parse_task(config_text, files);
}

inline void to_json(json& j, const TaskSpec& t) {
    const auto& tc = t.test_config;
    const auto& bc = tc.benchmark_constraints;
    j = json{{"task_id", t.task_id},
             {"language", to_string(t.language)},
             {"reference_code", t.reference_code},
             {"target_speedup", t.target_speedup},
             {"hardware_profile", t.hardware_profile_id},
             {"hardware_spec", t.hardware_spec},
             {"reference_language", t.reference_language},
             {"tolerance",
              {{"rel_tol", tc.correctness_rel_tol},
               {"pass_fraction", tc.correctness_pass_fraction},
               {"epsilon", tc.epsilon_div},
               {"cosine_gate", tc.cosine_gate},
               {"cosine_min", tc.cosine_min}}},
             {"benchmark",
              {{"min_warmup_time_s", bc.min_warmup_time_s},
               {"min_warmup_iters", bc.min_warmup_iters},
               {"inner_loop_min_time_s", bc.inner_loop_min_time_s},
               {"min_main_iters", bc.min_main_iters},
               {"min_main_time_s", bc.min_main_time_s}}},
             {"tests", tc.harness_paths}};
    j["instructions"] = t.user_instructions ? json(*t.user_instructions) : json(nullptr);
    j["initial_kernel"] = t.initial_kernel ? json(*t.initial_kernel) : json(nullptr);
}

inline void from_json(const json& j, TaskSpec& t) {
    t.task_id = j.at("task_id").get<std::string>();
    t.language = parse_language(j.at("language").get<std::string>());
    t.reference_code = j.at("reference_code").get<std::string>();
    t.target_speedup = j.at("target_speedup").get<double>();
    t.hardware_profile_id = j.at("hardware_profile").get<std::string>();
    t.hardware_spec = j.value("hardware_spec", std::string());
    t.reference_language = j.value("reference_language", std::string("PyTorch"));
    auto& tc = t.test_config;
    const auto& tol = j.at("tolerance");
    tc.correctness_rel_tol = tol.at("rel_tol").get<double>();
    tc.correctness_pass_fraction = tol.at("pass_fraction").get<double>();
    tc.epsilon_div = tol.at("epsilon").get<double>();
    tc.cosine_gate = tol.value("cosine_gate", false);
    tc.cosine_min = tol.value("cosine_min", 0.999);
    auto& bc = tc.benchmark_constraints;
    const auto& b = j.at("benchmark");
    bc.min_warmup_time_s = b.at("min_warmup_time_s").get<double>();
    bc.min_warmup_iters = b.at("min_warmup_iters").get<int>();
    bc.inner_loop_min_time_s = b.at("inner_loop_min_time_s").get<double>();
    bc.min_main_iters = b.at("min_main_iters").get<int>();
    bc.min_main_time_s = b.at("min_main_time_s").get<double>();
    tc.harness_paths = j.value("tests", std::vector<std::string>{});
    t.user_instructions = j.contains("instructions") && !j["instructions"].is_null()
                              ? std::optional<std::string>(j["instructions"].get<std::string>())
                              : std::nullopt;
    t.initial_kernel = j.contains("initial_kernel") && !j["initial_kernel"].is_null()
                           ? std::optional<std::string>(j["initial_kernel"].get<std::string>())
                           : std::nullopt;
}

} // namespace kforge
