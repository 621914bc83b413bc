#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"
#include "coord.hpp"

namespace kforge {

template <std::size_t Dims>
struct Candidate {
    std::string candidate_id;
    std::string source;
    GridCoord<Dims> coord;
    double fitness = 0.0;
    std::optional<std::string> parent_id;
    int generation = 0;
    std::optional<std::string> eval_record_id;
    std::string prompt_version_id;

    bool operator==(const Candidate&) const = default;
};

using KernelCandidate = Candidate<3>;

template <std::size_t Dims>
void to_json(json& j, const Candidate<Dims>& c) {
    j = json{{"candidate_id", c.candidate_id},
             {"source", c.source},
             {"coord", c.coord},
             {"fitness", c.fitness},
             {"parent_id", c.parent_id ? json(*c.parent_id) : json(nullptr)},
             {"generation", c.generation},
             {"eval_record_id", c.eval_record_id ? json(*c.eval_record_id) : json(nullptr)},
             {"prompt_version_id", c.prompt_version_id}};
}

template <std::size_t Dims>
void from_json(const json& j, Candidate<Dims>& c) {
    c.candidate_id = j.at("candidate_id").get<std::string>();
    c.source = j.at("source").get<std::string>();
    c.coord = j.at("coord").get<GridCoord<Dims>>();
    c.fitness = j.at("fitness").get<double>();
    c.parent_id = j.at("parent_id").is_null() ? std::nullopt : std::optional<std::string>(j["parent_id"].get<std::string>());
    c.generation = j.at("generation").get<int>();
    c.eval_record_id =
        j.at("eval_record_id").is_null() ? std::nullopt : std::optional<std::string>(j["eval_record_id"].get<std::string>());
    c.prompt_version_id = j.at("prompt_version_id").get<std::string>();
}

struct InsertOutcome {
    enum class Kind { NewCell, ReplacedElite, Rejected };
    Kind kind = Kind::Rejected;
    std::optional<std::string> displaced_id;

    bool improved() const { return kind != Kind::Rejected; }
};

inline const char* to_string(InsertOutcome::Kind k) {
    switch (k) {
        case InsertOutcome::Kind::NewCell: return "NewCell";
        case InsertOutcome::Kind::ReplacedElite: return "ReplacedElite";
        case InsertOutcome::Kind::Rejected: return "Rejected";
    }
    return "?";
}

enum class SelectionKind : std::size_t { Uniform = 0, FitnessProportionate = 1, Curiosity = 2, Island = 3 };

inline const char* to_string(SelectionKind k) {
    switch (k) {
        case SelectionKind::Uniform: return "uniform";
        case SelectionKind::FitnessProportionate: return "fitness";
        case SelectionKind::Curiosity: return "curiosity";
        case SelectionKind::Island: return "island";
    }
    return "?";
}

inline SelectionKind parse_selection_kind(const std::string& s) {
    if (s == "uniform") return SelectionKind::Uniform;
    if (s == "fitness" || s == "fitness_proportionate") return SelectionKind::FitnessProportionate;
    if (s == "curiosity") return SelectionKind::Curiosity;
    if (s == "island") return SelectionKind::Island;
    throw Error(ErrorCode::InvalidConfig, "unknown selection strategy '" + s + "'");
}

/// A (possibly mixed) parent-selection strategy: normalized ratios over the four base strategies.
struct SelectionStrategy {
    std::array<double, 4> ratios{1.0, 0.0, 0.0, 0.0};

    static SelectionStrategy pure(SelectionKind k) {
        SelectionStrategy s;
        s.ratios.fill(0.0);
        s.ratios[static_cast<std::size_t>(k)] = 1.0;
        return s;
    }

    double ratio(SelectionKind k) const { return ratios[static_cast<std::size_t>(k)]; }
    bool uses(SelectionKind k) const { return ratio(k) > 0.0; }
};

inline SelectionStrategy mix_strategies(const std::map<SelectionKind, double>& ratios) {
    SelectionStrategy s;
    s.ratios.fill(0.0);
    double total = 0.0;
    for (const auto& [k, r] : ratios) {
        if (!(r >= 0.0) || !std::isfinite(r)) throw Error(ErrorCode::AllZeroRatios, "ratios must be finite and non-negative");
        s.ratios[static_cast<std::size_t>(k)] += r;
        total += r;
    }
    if (!(total > 0.0)) throw Error(ErrorCode::AllZeroRatios, "mixing ratios sum to zero");
    for (auto& r : s.ratios) r /= total;
    return s;
}

template <std::size_t Dims>
using CellWeights = std::map<GridCoord<Dims>, double>;

template <std::size_t Dims>
struct MigrationEvent {
    std::string donor_id;
    int from_island = 0;
    int to_island = 0;
    GridCoord<Dims> target;
    InsertOutcome outcome;
};

template <std::size_t Dims>
struct MigrationReport {
    std::vector<MigrationEvent<Dims>> offers;

    std::vector<MigrationEvent<Dims>> accepted() const {
        std::vector<MigrationEvent<Dims>> out;
        std::copy_if(offers.begin(), offers.end(), std::back_inserter(out), [](const auto& e) { return e.outcome.improved(); });
        return out;
    }
};

template <std::size_t Dims>
struct CoverageStats {
    std::size_t occupancy = 0;
    double best_fitness = 0.0;
    double mean_fitness = 0.0;
    std::array<std::vector<std::size_t>, Dims> histograms;
};

template <std::size_t Dims>
struct Selection {
    const Candidate<Dims>* elite = nullptr;
    SelectionKind used = SelectionKind::Uniform;
};

/// MAP-Elites grid: at most one elite per cell, plus an island partition of the
/// cells by bands of one descriptor dimension.
template <std::size_t Dims = 3>
class GridArchive {
public:
    using Coord = GridCoord<Dims>;
    using Elite = Candidate<Dims>;

    explicit GridArchive(int bins = 4, int islands = 4, std::size_t island_dim = Dims > 1 ? 1 : 0)
        : bins_(bins), islands_(islands), island_dim_(island_dim) {
        if (bins_ < 1) throw Error(ErrorCode::InvalidConfig, "bins must be >= 1");
        if (islands_ < 1 || islands_ > bins_) throw Error(ErrorCode::InvalidConfig, "islands must lie in [1, bins]");
        if (island_dim_ >= Dims) throw Error(ErrorCode::InvalidConfig, "island dimension out of range");
    }

    int bins() const { return bins_; }
    int island_count() const { return islands_; }
    std::size_t cell_count() const {
        std::size_t n = 1;
        for (std::size_t d = 0; d < Dims; ++d) n *= static_cast<std::size_t>(bins_);
        return n;
    }
    std::size_t occupancy() const { return cells_.size(); }
    bool empty() const { return cells_.empty(); }
    const std::map<Coord, Elite>& cells() const { return cells_; }

    bool valid(const Coord& c) const {
        return std::all_of(c.level.begin(), c.level.end(), [&](int v) { return v >= 0 && v < bins_; });
    }

    const Elite* elite(const Coord& c) const {
        auto it = cells_.find(c);
        return it == cells_.end() ? nullptr : &it->second;
    }

    const Elite* find(const std::string& candidate_id) const {
        for (const auto& [c, e] : cells_)
            if (e.candidate_id == candidate_id) return &e;
        return nullptr;
    }

    const Elite* best() const {
        const Elite* b = nullptr;
        for (const auto& [c, e] : cells_)
            if (!b || e.fitness > b->fitness) b = &e;
        return b;
    }

    /// Enumerates every cell of the grid in index order.
    Coord coord_of(std::size_t index) const {
        Coord c;
        for (std::size_t d = Dims; d-- > 0;) {
            c[d] = static_cast<int>(index % static_cast<std::size_t>(bins_));
            index /= static_cast<std::size_t>(bins_);
        }
        return c;
    }

    int island_of(const Coord& c) const { return c[island_dim_] * islands_ / bins_; }

    /// Strict improvement replaces; ties keep the incumbent.
    InsertOutcome insert(const Elite& cand) {
        if (!valid(cand.coord)) throw Error(ErrorCode::InvalidCoord, "coordinate " + cand.coord.str() + " outside grid");
        if (!(cand.fitness >= 0.0 && cand.fitness <= 1.0)) throw Error(ErrorCode::InvalidConfig, "fitness outside [0,1]");
        if (cand.parent_id && *cand.parent_id == cand.candidate_id) throw Error(ErrorCode::InvalidConfig, "candidate is its own parent");
        auto it = cells_.find(cand.coord);
        if (it == cells_.end()) {
            cells_.emplace(cand.coord, cand);
            return {InsertOutcome::Kind::NewCell, std::nullopt};
        }
        if (cand.fitness > it->second.fitness) {
            std::string displaced = it->second.candidate_id;
            it->second = cand;
            return {InsertOutcome::Kind::ReplacedElite, std::move(displaced)};
        }
        return {InsertOutcome::Kind::Rejected, std::nullopt};
    }

    /// Samples a parent. `current_island` is the caller's island for island-based selection;
    /// if that island is empty the nearest non-empty island along the ring is used.
    Selection<Dims> select_parent(const SelectionStrategy& strategy, const CellWeights<Dims>* weights, Rng& rng,
                                  int current_island = 0) const {
        if (cells_.empty()) throw Error(ErrorCode::EmptyArchive, "cannot select from an empty archive");
        SelectionKind kind = SelectionKind::Uniform;
        std::size_t nonzero = 0;
        for (std::size_t k = 0; k < 4; ++k)
            if (strategy.ratios[k] > 0.0) {
                ++nonzero;
                kind = static_cast<SelectionKind>(k);
            }
        if (nonzero == 0) throw Error(ErrorCode::AllZeroRatios, "strategy has no active component");
        if (nonzero > 1) {
            std::vector<double> w(strategy.ratios.begin(), strategy.ratios.end());
            kind = static_cast<SelectionKind>(sample_index(w, rng));
        }
        return {&select_with(kind, weights, rng, current_island), kind};
    }

    /// Periodic elite migration between ring-adjacent islands; a no-op unless
    /// `generation` is a positive multiple of `period`.
    MigrationReport<Dims> migrate(int generation, int period) {
        MigrationReport<Dims> report;
        if (period < 1 || generation <= 0 || generation % period != 0 || islands_ < 2) return report;

        std::vector<const Elite*> donors(static_cast<std::size_t>(islands_), nullptr);
        for (const auto& [c, e] : cells_) {
            auto& d = donors[static_cast<std::size_t>(island_of(c))];
            if (!d || e.fitness > d->fitness) d = &e;
        }
        std::vector<Elite> donor_copies;
        std::vector<int> donor_island;
        for (int i = 0; i < islands_; ++i)
            if (donors[static_cast<std::size_t>(i)]) {
                donor_copies.push_back(*donors[static_cast<std::size_t>(i)]);
                donor_island.push_back(i);
            }
        const std::vector<bool> populated = [&] {
            std::vector<bool> p(static_cast<std::size_t>(islands_), false);
            for (int i : donor_island) p[static_cast<std::size_t>(i)] = true;
            return p;
        }();

        for (std::size_t k = 0; k < donor_copies.size(); ++k) {
            const Elite& donor = donor_copies[k];
            const int from = donor_island[k];
            std::vector<int> neighbors{(from + 1) % islands_, (from + islands_ - 1) % islands_};
            if (neighbors[0] == neighbors[1]) neighbors.pop_back();
            for (int to : neighbors) {
                if (!populated[static_cast<std::size_t>(to)]) continue;
                Elite migrant = donor;
                migrant.coord = corresponding_cell(donor.coord, to);
                migrant.candidate_id = donor.candidate_id + "@g" + std::to_string(generation) + "i" + std::to_string(to);
                migrant.parent_id = donor.candidate_id;
                migrant.generation = generation;
                const InsertOutcome out = insert(migrant);
                report.offers.push_back({donor.candidate_id, from, to, migrant.coord, out});
            }
        }
        return report;
    }

    CoverageStats<Dims> coverage_stats() const {
        CoverageStats<Dims> s;
        for (auto& h : s.histograms) h.assign(static_cast<std::size_t>(bins_), 0);
        s.occupancy = cells_.size();
        double sum = 0.0;
        for (const auto& [c, e] : cells_) {
            s.best_fitness = std::max(s.best_fitness, e.fitness);
            sum += e.fitness;
            for (std::size_t d = 0; d < Dims; ++d) ++s.histograms[d][static_cast<std::size_t>(c[d])];
        }
        s.mean_fitness = cells_.empty() ? 0.0 : sum / static_cast<double>(cells_.size());
        return s;
    }

    json to_json() const {
        json cells = json::array();
        for (const auto& [c, e] : cells_) cells.push_back(e);
        return json{{"bins", bins_}, {"islands", islands_}, {"island_dim", island_dim_}, {"cells", cells}};
    }

    static GridArchive from_json(const json& j) {
        GridArchive a(j.at("bins").get<int>(), j.at("islands").get<int>(), j.at("island_dim").get<std::size_t>());
        for (const auto& e : j.at("cells")) {
            Elite c = e.get<Elite>();
            a.cells_.emplace(c.coord, std::move(c));
        }
        return a;
    }

    bool operator==(const GridArchive& o) const {
        return bins_ == o.bins_ && islands_ == o.islands_ && island_dim_ == o.island_dim_ && cells_ == o.cells_;
    }

private:
    static std::size_t sample_index(const std::vector<double>& w, Rng& rng) {
        double total = 0.0;
        for (double x : w) total += x;
        const double u = rng.uniform01() * total;
        double acc = 0.0;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (w[i] <= 0.0) continue;
            last_positive = i;
            acc += w[i];
            if (u < acc) return i;
        }
        return last_positive;
    }

    const Elite& uniform_among(const std::vector<const Elite*>& pool, Rng& rng) const {
        return *pool[static_cast<std::size_t>(rng.below(pool.size()))];
    }

    const Elite& select_with(SelectionKind kind, const CellWeights<Dims>* weights, Rng& rng, int current_island) const {
        std::vector<const Elite*> pool;
        pool.reserve(cells_.size());
        for (const auto& [c, e] : cells_) pool.push_back(&e);

        switch (kind) {
            case SelectionKind::Uniform: return uniform_among(pool, rng);
            case SelectionKind::FitnessProportionate: {
                std::vector<double> w;
                double total = 0.0;
                for (const Elite* e : pool) {
                    w.push_back(e->fitness);
                    total += e->fitness;
                }
                if (!(total > 0.0)) return uniform_among(pool, rng);
                return *pool[sample_index(w, rng)];
            }
            case SelectionKind::Curiosity: {
                if (!weights || weights->empty()) throw Error(ErrorCode::MissingWeights, "curiosity selection needs cell weights");
                std::vector<double> w;
                double total = 0.0;
                for (const Elite* e : pool) {
                    auto it = weights->find(e->coord);
                    const double x = it == weights->end() ? 0.0 : std::max(0.0, it->second);
                    w.push_back(x);
                    total += x;
                }
                if (!(total > 0.0)) return uniform_among(pool, rng);
                return *pool[sample_index(w, rng)];
            }
            case SelectionKind::Island: {
                const int start = ((current_island % islands_) + islands_) % islands_;
                for (int step = 0; step < islands_; ++step) {
                    // Search outward along the ring: start, start+1, start-1, start+2, ...
                    const int offset = (step + 1) / 2 * (step % 2 == 1 ? 1 : -1);
                    const int island = ((start + offset) % islands_ + islands_) % islands_;
                    std::vector<const Elite*> local;
                    for (const Elite* e : pool)
                        if (island_of(e->coord) == island) local.push_back(e);
                    if (!local.empty()) return uniform_among(local, rng);
                }
                return uniform_among(pool, rng);
            }
        }
        return uniform_among(pool, rng);
    }

    Coord corresponding_cell(Coord c, int island) const {
        const int band_lo = (island * bins_ + islands_ - 1) / islands_;
        const int from_lo = (island_of(c) * bins_ + islands_ - 1) / islands_;
        const int band_hi = ((island + 1) * bins_ + islands_ - 1) / islands_ - 1;
        c[island_dim_] = std::clamp(band_lo + (c[island_dim_] - from_lo), band_lo, band_hi);
        return c;
    }

    int bins_;
    int islands_;
    std::size_t island_dim_;
    std::map<Coord, Elite> cells_;
};

using Archive = GridArchive<3>;

} // namespace kforge
