#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include <openssl/evp.h>
#include <zlib.h>

#include <json.hpp>

namespace kforge {

using json = nlohmann::json;

enum class ErrorCode {
    // taskspec
    MissingField,
    UnknownLanguage,
    MalformedConfig,
    UnterminatedSection,
    DuplicateSection,
    // classifier
    MalformedPatternTable,
    // archive
    EmptyArchive,
    MissingWeights,
    AllZeroRatios,
    InvalidCoord,
    // fitness
    MissingSpeedup,
    ShapeMismatch,
    ZeroVector,
    EmptyInput,
    NonPositiveTime,
    // promptgen
    RenderError,
    SearchNotFound,
    AmbiguousMatch,
    RegionViolation,
    TooManyMutations,
    BackendUnavailable,
    NoParsableDiffs,
    UnknownVersion,
    // evalpipe
    ExecutionFailure,
    MalformedDispatch,
    // distrib
    DuplicateJobId,
    NotClaimed,
    AlreadyCompleted,
    UnknownJob,
    CorruptRecord,
    MalformedMessage,
    // cli / orchestrator
    UnknownRun,
    InvalidConfig,
    Infrastructure,
};

inline const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MissingField: return "MissingField";
        case ErrorCode::UnknownLanguage: return "UnknownLanguage";
        case ErrorCode::MalformedConfig: return "MalformedConfig";
        case ErrorCode::UnterminatedSection: return "UnterminatedSection";
        case ErrorCode::DuplicateSection: return "DuplicateSection";
        case ErrorCode::MalformedPatternTable: return "MalformedPatternTable";
        case ErrorCode::EmptyArchive: return "EmptyArchive";
        case ErrorCode::MissingWeights: return "MissingWeights";
        case ErrorCode::AllZeroRatios: return "AllZeroRatios";
        case ErrorCode::InvalidCoord: return "InvalidCoord";
        case ErrorCode::MissingSpeedup: return "MissingSpeedup";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::ZeroVector: return "ZeroVector";
        case ErrorCode::EmptyInput: return "EmptyInput";
        case ErrorCode::NonPositiveTime: return "NonPositiveTime";
        case ErrorCode::RenderError: return "RenderError";
        case ErrorCode::SearchNotFound: return "SearchNotFound";
        case ErrorCode::AmbiguousMatch: return "AmbiguousMatch";
        case ErrorCode::RegionViolation: return "RegionViolation";
        case ErrorCode::TooManyMutations: return "TooManyMutations";
        case ErrorCode::BackendUnavailable: return "BackendUnavailable";
        case ErrorCode::NoParsableDiffs: return "NoParsableDiffs";
        case ErrorCode::UnknownVersion: return "UnknownVersion";
        case ErrorCode::ExecutionFailure: return "ExecutionFailure";
        case ErrorCode::MalformedDispatch: return "MalformedDispatch";
        case ErrorCode::DuplicateJobId: return "DuplicateJobId";
        case ErrorCode::NotClaimed: return "NotClaimed";
        case ErrorCode::AlreadyCompleted: return "AlreadyCompleted";
        case ErrorCode::UnknownJob: return "UnknownJob";
        case ErrorCode::CorruptRecord: return "CorruptRecord";
        case ErrorCode::MalformedMessage: return "MalformedMessage";
        case ErrorCode::UnknownRun: return "UnknownRun";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::Infrastructure: return "Infrastructure";
    }
    return "Unknown";
}

inline std::optional<ErrorCode> parse_error_code(std::string_view name) {
    for (int i = 0; i <= static_cast<int>(ErrorCode::Infrastructure); ++i)
        if (name == to_string(static_cast<ErrorCode>(i))) return static_cast<ErrorCode>(i);
    return std::nullopt;
}

/// Every failure the library reports carries one of the codes above.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Deterministic generator for every stochastic decision in a run.
///
/// Wraps mt19937_64 and derives doubles from raw bits so that draws are
/// identical across standard libraries (std distributions are not).
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below(0)");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - (std::numeric_limits<std::uint64_t>::max() % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void restore(const std::string& state) {
        std::istringstream is(state);
        is >> engine_;
        if (!is) throw Error(ErrorCode::CorruptRecord, "unreadable rng state");
    }

private:
    std::mt19937_64 engine_;
};

/// splitmix64 finalizer; used to derive stable sub-seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::string sha256_hex(std::string_view data) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

/// First 8 bytes of sha256 as an integer.
inline std::uint64_t stable_hash(std::string_view data) {
    const std::string hex = sha256_hex(data);
    return std::stoull(hex.substr(0, 16), nullptr, 16);
}

inline std::uint32_t crc32_of(std::string_view data) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
}

namespace detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '\n')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '\n')) --e;
    return std::string(s.substr(b, e - b));
}

inline std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
    if (needle.empty()) return 0;
    std::size_t n = 0;
    for (std::size_t pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + 1)) ++n;
    return n;
}

} // namespace detail

} // namespace kforge
