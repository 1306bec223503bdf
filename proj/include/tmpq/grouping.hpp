#pragma once

// Timestep grouping. The non-uniform scheme assigns group h (1-based) to
//
//   (sqrt(0.8T) (h-1)/(H-1))² <= t < (sqrt(0.8T) h/(H-1))²   for t < 0.8T
//   H                                                      for t >= 0.8T
//
// so groups are narrow near the data end and wide near pure noise. The
// uniform scheme cuts [0, T) into H equal pieces.

#include "tmpq/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tmpq {

enum class GroupingKind { non_uniform, uniform };

inline const char* to_string(GroupingKind k) { return k == GroupingKind::uniform ? "uniform" : "non-uniform"; }

inline GroupingKind grouping_kind_from_string(const std::string& s) {
    if (s == "uniform") return GroupingKind::uniform;
    if (s == "non-uniform" || s == "non_uniform" || s == "nonuniform") return GroupingKind::non_uniform;
    throw std::invalid_argument("unknown grouping kind '" + s + "'");
}

struct GroupingScheme {
    int T = 0;
    int H = 0;
    GroupingKind kind = GroupingKind::non_uniform;
    std::vector<int> boundaries;  // H + 1 entries, boundaries[0] = 0, boundaries[H] = T

    int width(int h) const { return boundaries.at(h + 1) - boundaries.at(h); }  // h is 0-based
    int begin(int h) const { return boundaries.at(h); }
    int end(int h) const { return boundaries.at(h + 1); }

    /// 0-based group containing t.
    int group_of(int t) const {
        if (t < 0 || t >= T) throw std::out_of_range("group_of: timestep outside [0, T)");
        auto it = std::upper_bound(boundaries.begin(), boundaries.end(), t);
        return static_cast<int>(it - boundaries.begin()) - 1;
    }

    friend bool operator==(const GroupingScheme&, const GroupingScheme&) = default;
};

namespace detail {

/// ceil(0.8 T h² / (H-1)²) in exact integer arithmetic.
inline std::int64_t quadratic_cut(int T, int H, int h) {
    const std::int64_t num = 4LL * T * h * h;
    const std::int64_t den = 5LL * (H - 1) * (H - 1);
    return (num + den - 1) / den;
}

}  // namespace detail

namespace detail {

/// The piecewise rule itself, 1-based, before any empty-group repair.
/// Integer t satisfies x <= t exactly when ceil(x) <= t, so comparing against
/// the ceiled cuts is exact.
inline int raw_group_index(int T, int H, int t) {
    if (5LL * t >= 4LL * T) return H;
    const double root = std::sqrt(0.8 * T);
    // Initial guess from the closed form, then settle against exact cuts.
    int h = static_cast<int>(std::floor(std::sqrt(static_cast<double>(t)) / root * (H - 1))) + 1;
    h = std::clamp(h, 1, H - 1);
    while (h > 1 && quadratic_cut(T, H, h - 1) > t) --h;
    while (h < H - 1 && quadratic_cut(T, H, h) <= t) ++h;
    return h;
}

inline bool needs_repair(int T, int H) {
    std::int64_t prev = 0;
    for (int h = 1; h < H; ++h) {
        const std::int64_t cut = quadratic_cut(T, H, h);
        if (cut <= prev) return true;
        prev = cut;
    }
    return prev >= T;
}

}  // namespace detail

inline GroupingScheme build_groups(int T, int H, GroupingKind kind);

/// Non-uniform group index in [1, H] for timestep t.
inline int group_index(int T, int H, int t) {
    if (H < 2) throw std::invalid_argument("group_index: H must be at least 2");
    if (H > T) throw std::invalid_argument("group_index: more groups than timesteps");
    if (t < 0 || t >= T) throw std::out_of_range("group_index: timestep outside [0, T)");
    if (detail::needs_repair(T, H)) return build_groups(T, H, GroupingKind::non_uniform).group_of(t) + 1;
    return detail::raw_group_index(T, H, t);
}

/// Builds an H-group partition of [0, T). Integer cuts are the ceilings of
/// the real-valued boundaries; a group left empty by the rounding takes one
/// timestep from its right neighbour (cascading left to right).
inline GroupingScheme build_groups(int T, int H, GroupingKind kind) {
    if (H < 2) throw std::invalid_argument("build_groups: H must be at least 2");
    if (H > T) throw std::invalid_argument("build_groups: more groups than timesteps");
    GroupingScheme g{T, H, kind, {}};
    g.boundaries.resize(static_cast<std::size_t>(H) + 1);
    if (kind == GroupingKind::uniform) {
        for (int h = 0; h <= H; ++h) g.boundaries[h] = static_cast<int>(static_cast<std::int64_t>(h) * T / H);
    } else {
        for (int h = 0; h < H; ++h) g.boundaries[h] = static_cast<int>(detail::quadratic_cut(T, H, h));
        g.boundaries[H] = T;
    }
    for (int h = 1; h < H; ++h)
        if (g.boundaries[h] <= g.boundaries[h - 1]) g.boundaries[h] = g.boundaries[h - 1] + 1;
    // Tiny T can leave the last group empty; it then borrows from the left.
    for (int h = H - 1; h >= 1; --h)
        if (g.boundaries[h] >= g.boundaries[h + 1]) g.boundaries[h] = g.boundaries[h + 1] - 1;
    return g;
}

inline GroupingScheme groups_from_boundaries(int T, GroupingKind kind, std::vector<int> boundaries) {
    GroupingScheme g{T, static_cast<int>(boundaries.size()) - 1, kind, std::move(boundaries)};
    if (g.H < 1 || g.boundaries.front() != 0 || g.boundaries.back() != T)
        throw std::invalid_argument("grouping boundaries must run from 0 to T");
    for (int h = 0; h < g.H; ++h)
        if (g.boundaries[h + 1] <= g.boundaries[h]) throw std::invalid_argument("grouping boundaries must increase");
    return g;
}

/// Sum of consecutive-step MSEs over a window: Σ_{i=1}^{W} MSE(x_{t+i-1}, x_{t+i}).
/// `trajectory[k]` is the state at timestep k.
inline double temporal_difference(const std::vector<Tensor>& trajectory, int window, int t) {
    if (window < 0 || t < 0) throw std::invalid_argument("temporal_difference: negative window or timestep");
    if (static_cast<std::size_t>(t) + static_cast<std::size_t>(window) >= trajectory.size())
        throw std::out_of_range("temporal_difference: window exceeds trajectory");
    double acc = 0.0;
    for (int i = 1; i <= window; ++i) acc += mean_squared_error(trajectory[t + i - 1], trajectory[t + i]);
    return acc;
}

/// log10 C(n, k), via lgamma.
inline double log10_binomial(int n, int k) {
    if (k < 0 || k > n) throw std::invalid_argument("log10_binomial: k outside [0, n]");
    return (std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0)) / std::log(10.0);
}

}  // namespace tmpq
