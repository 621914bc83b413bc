#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "archive.hpp"
#include "common.hpp"
#include "coord.hpp"

namespace kforge {

using Vec3 = std::array<double, 3>;

enum class TransitionOutcome { Improvement, Neutral, Regression };

inline const char* to_string(TransitionOutcome o) {
    switch (o) {
        case TransitionOutcome::Improvement: return "Improvement";
        case TransitionOutcome::Neutral: return "Neutral";
        case TransitionOutcome::Regression: return "Regression";
    }
    return "?";
}

inline TransitionOutcome parse_transition_outcome(const std::string& s) {
    if (s == "Improvement") return TransitionOutcome::Improvement;
    if (s == "Neutral") return TransitionOutcome::Neutral;
    if (s == "Regression") return TransitionOutcome::Regression;
    throw Error(ErrorCode::CorruptRecord, "unknown transition outcome '" + s + "'");
}

/// Improvement when the child entered the archive; otherwise the sign of the fitness change decides.
inline TransitionOutcome transition_outcome(double delta_fitness, bool entered_archive) {
    if (entered_archive) return TransitionOutcome::Improvement;
    return delta_fitness < 0.0 ? TransitionOutcome::Regression : TransitionOutcome::Neutral;
}

struct TransitionRecord {
    BehavioralCoord parent_coord;
    BehavioralCoord child_coord;
    double delta_fitness = 0.0;
    TransitionOutcome outcome = TransitionOutcome::Neutral;
    std::int64_t timestamp = 0;
    int iteration = 0;

    bool operator==(const TransitionRecord&) const = default;
};

inline void to_json(json& j, const TransitionRecord& t) {
    j = json{{"parent", t.parent_coord}, {"child", t.child_coord},  {"delta_f", t.delta_fitness},
             {"outcome", to_string(t.outcome)}, {"ts", t.timestamp}, {"iteration", t.iteration}};
}

inline void from_json(const json& j, TransitionRecord& t) {
    t.parent_coord = j.at("parent").get<BehavioralCoord>();
    t.child_coord = j.at("child").get<BehavioralCoord>();
    t.delta_fitness = j.at("delta_f").get<double>();
    t.outcome = parse_transition_outcome(j.at("outcome").get<std::string>());
    t.timestamp = j.at("ts").get<std::int64_t>();
    t.iteration = j.at("iteration").get<int>();
}

/// Fixed-capacity ring of recent parent-to-child transitions.
class TransitionBuffer {
public:
    explicit TransitionBuffer(std::size_t capacity = 256) : capacity_(capacity) {
        if (capacity_ == 0) throw Error(ErrorCode::InvalidConfig, "transition buffer capacity must be positive");
    }

    void record(const TransitionRecord& rec) {
        if (records_.size() == capacity_) records_.pop_front();
        records_.push_back(rec);
    }

    std::size_t size() const { return records_.size(); }
    std::size_t capacity() const { return capacity_; }
    const std::deque<TransitionRecord>& records() const { return records_; }

    std::vector<TransitionRecord> from_parent(const BehavioralCoord& b) const {
        std::vector<TransitionRecord> out;
        for (const auto& r : records_)
            if (r.parent_coord == b) out.push_back(r);
        return out;
    }

    json to_json() const { return json{{"capacity", capacity_}, {"records", records_}}; }

    static TransitionBuffer from_json(const json& j) {
        TransitionBuffer b(j.at("capacity").get<std::size_t>());
        for (const auto& r : j.at("records")) b.record(r.get<TransitionRecord>());
        return b;
    }

    bool operator==(const TransitionBuffer&) const = default;

private:
    std::size_t capacity_;
    std::deque<TransitionRecord> records_;
};

struct DecayWeight {
    int half_life_iterations = 50;

    double operator()(int record_iteration, int now_iter) const {
        const double age = std::max(0, now_iter - record_iteration);
        return std::exp2(-age / static_cast<double>(half_life_iterations));
    }
};

namespace detail {
inline int sign_of(int x) { return (x > 0) - (x < 0); }
} // namespace detail

inline Vec3 fitness_gradient(const TransitionBuffer& buffer, const BehavioralCoord& b, DecayWeight decay, int now_iter) {
    Vec3 g{0.0, 0.0, 0.0};
    std::size_t n = 0;
    for (const auto& t : buffer.records()) {
        if (t.parent_coord != b) continue;
        ++n;
        const double w = decay(t.iteration, now_iter);
        for (std::size_t d = 0; d < 3; ++d)
            g[d] += t.delta_fitness * detail::sign_of(t.child_coord[d] - t.parent_coord[d]) * w;
    }
    if (n > 0)
        for (double& x : g) x /= static_cast<double>(n);
    return g;
}

inline Vec3 improvement_rate_gradient(const TransitionBuffer& buffer, const BehavioralCoord& b) {
    std::array<int, 3> up{}, up_imp{}, down{}, down_imp{};
    for (const auto& t : buffer.records()) {
        if (t.parent_coord != b) continue;
        const bool imp = t.outcome == TransitionOutcome::Improvement;
        for (std::size_t d = 0; d < 3; ++d) {
            const int delta = t.child_coord[d] - t.parent_coord[d];
            if (delta > 0) {
                ++up[d];
                up_imp[d] += imp;
            } else if (delta < 0) {
                ++down[d];
                down_imp[d] += imp;
            }
        }
    }
    Vec3 g{};
    for (std::size_t d = 0; d < 3; ++d) {
        const double p_up = up[d] ? static_cast<double>(up_imp[d]) / up[d] : 0.0;
        const double p_down = down[d] ? static_cast<double>(down_imp[d]) / down[d] : 0.0;
        g[d] = p_up - p_down;
    }
    return g;
}

/// Per-cell fitness snapshot of an archive; absent cells are empty.
struct ArchiveView {
    int bins = 4;
    std::map<BehavioralCoord, double> occupied;
    double f_max = 0.0;

    static ArchiveView of(const Archive& a) {
        ArchiveView v;
        v.bins = a.bins();
        for (const auto& [c, e] : a.cells()) {
            v.occupied[c] = e.fitness;
            v.f_max = std::max(v.f_max, e.fitness);
        }
        return v;
    }
};

inline double l2_norm(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

inline Vec3 exploration_gradient(const ArchiveView& view, const BehavioralCoord& b, double low_quality_threshold = 0.5) {
    Vec3 g{};
    for (int x = 0; x < view.bins; ++x)
        for (int y = 0; y < view.bins; ++y)
            for (int z = 0; z < view.bins; ++z) {
                const BehavioralCoord c{{x, y, z}};
                if (c == b) continue;
                double fc = 0.0;
                if (auto it = view.occupied.find(c); it != view.occupied.end()) {
                    if (!(it->second < low_quality_threshold)) continue;
                    fc = it->second;
                }
                const int dist = std::abs(x - b[0]) + std::abs(y - b[1]) + std::abs(z - b[2]);
                const double scale = (view.f_max - fc) / dist / dist;
                for (std::size_t d = 0; d < 3; ++d) g[d] += scale * (c[d] - b[d]);
            }
    const double n = l2_norm(g);
    if (n > 1e-12)
        for (double& v : g) v /= n;
    else
        g = {0.0, 0.0, 0.0};
    return g;
}

struct GradientWeights {
    double alpha = 0.4;
    double beta = 0.4;
    double gamma = 0.2;
};

inline Vec3 combined_gradient(const Vec3& gF, const Vec3& gR, const Vec3& gE, GradientWeights w = {}) {
    if (w.alpha < 0.0 || w.beta < 0.0 || w.gamma < 0.0) throw Error(ErrorCode::InvalidConfig, "gradient weights must be non-negative");
    Vec3 c{};
    for (std::size_t d = 0; d < 3; ++d) c[d] = w.alpha * gF[d] + w.beta * gR[d] + w.gamma * gE[d];
    return c;
}

struct GradientEstimate {
    BehavioralCoord cell;
    Vec3 grad_F{};
    Vec3 grad_R{};
    Vec3 grad_E{};
    Vec3 combined{};
    int support = 0;
};

inline void to_json(json& j, const GradientEstimate& g) {
    j = json{{"cell", g.cell}, {"grad_F", g.grad_F}, {"grad_R", g.grad_R}, {"grad_E", g.grad_E}, {"combined", g.combined}, {"support", g.support}};
}

struct GradientConfig {
    DecayWeight decay{};
    GradientWeights weights{};
    double low_quality_threshold = 0.5;
    double temperature = 0.5;
};

inline GradientEstimate estimate_gradient(const TransitionBuffer& buffer, const ArchiveView& view, const BehavioralCoord& b,
                                          const GradientConfig& cfg, int now_iter) {
    GradientEstimate g;
    g.cell = b;
    g.grad_F = fitness_gradient(buffer, b, cfg.decay, now_iter);
    g.grad_R = improvement_rate_gradient(buffer, b);
    g.grad_E = exploration_gradient(view, b, cfg.low_quality_threshold);
    g.combined = combined_gradient(g.grad_F, g.grad_R, g.grad_E, cfg.weights);
    g.support = static_cast<int>(std::count_if(buffer.records().begin(), buffer.records().end(),
                                               [&](const TransitionRecord& t) { return t.parent_coord == b; }));
    return g;
}

/// One estimate per occupied cell of the archive, in cell order.
inline std::vector<GradientEstimate> estimate_all(const TransitionBuffer& buffer, const Archive& archive, const GradientConfig& cfg,
                                                  int now_iter) {
    const ArchiveView view = ArchiveView::of(archive);
    std::vector<GradientEstimate> out;
    for (const auto& [c, e] : archive.cells()) out.push_back(estimate_gradient(buffer, view, c, cfg, now_iter));
    return out;
}

inline CellWeights<3> sampling_weights(const std::vector<GradientEstimate>& estimates, double temperature = 0.5) {
    if (!(temperature > 0.0)) throw Error(ErrorCode::InvalidConfig, "temperature must be positive");
    CellWeights<3> w;
    if (estimates.empty()) return w;
    double top = -std::numeric_limits<double>::infinity();
    std::vector<double> logits;
    for (const auto& e : estimates) {
        logits.push_back(l2_norm(e.combined) / temperature);
        top = std::max(top, logits.back());
    }
    double z = 0.0;
    for (double& l : logits) {
        l = std::exp(l - top);
        z += l;
    }
    for (std::size_t i = 0; i < estimates.size(); ++i) w[estimates[i].cell] += logits[i] / z;
    return w;
}

/// Phrases keyed by (dimension, direction, current level).
class HintTable {
public:
    static HintTable parse(const std::string& text) {
        HintTable t;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string trimmed = detail::trim(line);
            if (trimmed.empty() || trimmed[0] == '#') continue;
            std::vector<std::string> f;
            std::istringstream ls(trimmed);
            std::string field;
            while (std::getline(ls, field, '\t')) f.push_back(field);
            if (f.size() != 4 || (f[1] != "+" && f[1] != "-"))
                throw Error(ErrorCode::MalformedPatternTable, "hint table line " + std::to_string(lineno));
            t.set(parse_dimension(f[0]), f[1] == "+" ? 1 : -1, std::stoi(f[2]), f[3]);
        }
        return t;
    }

    void set(Dimension d, int sign, int level, std::string phrase) { phrases_[{index_of(d), sign, level}] = std::move(phrase); }

    const std::string* find(Dimension d, int sign, int level) const {
        auto it = phrases_.find({index_of(d), sign, level});
        return it == phrases_.end() ? nullptr : &it->second;
    }

    std::string content_hash() const {
        std::string s;
        for (const auto& [k, v] : phrases_)
            s += std::to_string(std::get<0>(k)) + "|" + std::to_string(std::get<1>(k)) + "|" + std::to_string(std::get<2>(k)) + "|" + v + "\n";
        return sha256_hex(s);
    }

private:
    std::map<std::tuple<std::size_t, int, int>, std::string> phrases_;
};

namespace detail {
inline constexpr const char* default_hint_table = R"(# dimension	direction	level	phrase
mem	+	0	vectorize global memory accesses so each work-item loads contiguous elements
mem	+	1	consider adding shared memory tiling so loaded data is reused across the work-group
mem	+	2	implement register blocking for data reuse across a multi-level memory hierarchy
mem	-	1	simplify the memory access pattern back to direct global loads
mem	-	2	replace the shared memory tiles with plain vectorized loads
mem	-	3	drop the register blocking and keep a single level of tiling
algo	+	0	fuse adjacent operations into one kernel to avoid intermediate round-trips
algo	+	1	restructure the computation as a single-pass online algorithm
algo	+	2	reformulate the algorithm around a different mathematical decomposition
algo	-	1	split the fused kernel into simpler stages
algo	-	2	replace the online formulation with a straightforward multi-pass version
algo	-	3	return to a conventional formulation of the algorithm
sync	+	0	introduce work-group barriers so cooperating work-items can share data
sync	+	1	use sub-group shuffles and reductions instead of shared memory round-trips
sync	+	2	coordinate across work-groups with global atomics
sync	-	1	remove barriers by giving each work-item independent work
sync	-	2	replace sub-group collectives with plain work-group barriers
sync	-	3	avoid global atomics by reducing within each work-group first
)";
} // namespace detail

inline const HintTable& default_hint_table() {
    static const HintTable t = HintTable::parse(detail::default_hint_table);
    return t;
}

struct HintOptions {
    double threshold = 0.05;
    std::size_t max_hints = 3;
    int max_level = 3;
};

inline std::vector<std::string> gradient_to_hints(const Vec3& combined, const BehavioralCoord& b, const HintTable& table,
                                                  HintOptions opt = {}) {
    std::vector<std::pair<double, std::string>> ranked;
    for (std::size_t d = 0; d < 3; ++d) {
        const double g = combined[d];
        if (!(std::abs(g) > opt.threshold)) continue;
        const int sign = g > 0 ? 1 : -1;
        const int next = b[d] + sign;
        if (next < 0 || next > opt.max_level) continue;
        if (const std::string* phrase = table.find(static_cast<Dimension>(d), sign, b[d])) ranked.emplace_back(std::abs(g), *phrase);
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < ranked.size() && i < opt.max_hints; ++i) out.push_back(ranked[i].second);
    return out;
}

} // namespace kforge
