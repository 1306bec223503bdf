#pragma once

#include "tmpq/quant.hpp"

#include <string>
#include <vector>

namespace tmpq {

/// One point of the joint search space: a timestep per group (increasing)
/// and a per-slot bit-width policy shared by all of those timesteps.
struct Candidate {
    std::vector<int> timesteps;
    Policy policy;

    friend bool operator==(const Candidate&, const Candidate&) = default;
    friend auto operator<=>(const Candidate&, const Candidate&) = default;
};

/// Compact text key, used for de-duplication and memoisation.
inline std::string candidate_key(const Candidate& c) {
    std::string k;
    for (int t : c.timesteps) k += std::to_string(t) + ',';
    k += '|';
    for (const auto& b : c.policy) k += std::to_string(b.weight_bits) + '/' + std::to_string(b.act_bits) + ',';
    return k;
}

}  // namespace tmpq
