#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <string>

#include "common.hpp"

namespace kforge {

/// A cell of the behavioral grid: one discrete level per descriptor dimension.
template <std::size_t Dims>
struct GridCoord {
    std::array<int, Dims> level{};

    static constexpr std::size_t dims = Dims;

    constexpr int& operator[](std::size_t d) { return level[d]; }
    constexpr int operator[](std::size_t d) const { return level[d]; }

    auto operator<=>(const GridCoord&) const = default;

    std::string str() const {
        std::string s = "(";
        for (std::size_t d = 0; d < Dims; ++d) {
            if (d) s += ",";
            s += std::to_string(level[d]);
        }
        return s + ")";
    }
};

/// The three kernel descriptors: memory access, algorithmic structure, parallel coordination.
using BehavioralCoord = GridCoord<3>;

enum class Dimension : std::size_t { Mem = 0, Algo = 1, Sync = 2 };

inline constexpr std::size_t index_of(Dimension d) { return static_cast<std::size_t>(d); }

inline const char* to_string(Dimension d) {
    switch (d) {
        case Dimension::Mem: return "mem";
        case Dimension::Algo: return "algo";
        case Dimension::Sync: return "sync";
    }
    return "?";
}

inline Dimension parse_dimension(const std::string& s) {
    if (s == "mem") return Dimension::Mem;
    if (s == "algo") return Dimension::Algo;
    if (s == "sync") return Dimension::Sync;
    throw Error(ErrorCode::MalformedPatternTable, "unknown dimension '" + s + "'");
}

template <std::size_t Dims>
void to_json(json& j, const GridCoord<Dims>& c) {
    j = c.level;
}

template <std::size_t Dims>
void from_json(const json& j, GridCoord<Dims>& c) {
    c.level = j.get<std::array<int, Dims>>();
}

} // namespace kforge
