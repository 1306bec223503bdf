#pragma once

// BitOPs accounting. A linear slot costs MACs · b_w · b_a per step; an
// attention matmul, whose operands are both activations, costs MACs · b_a · b_a.
// Overall BitOPs multiply the per-step cost by the number of sampled steps.

#include "tmpq/grouping.hpp"
#include "tmpq/nn.hpp"
#include "tmpq/quant.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace tmpq {

using BitOps = std::uint64_t;

namespace detail {

inline BitOps narrow_bitops(unsigned __int128 v) {
    if (v > std::numeric_limits<BitOps>::max()) throw std::overflow_error("BitOPs exceed 64 bits");
    return static_cast<BitOps>(v);
}

}  // namespace detail

struct CostModel {
    std::vector<std::string> names;
    std::vector<SlotKind> kinds;
    std::vector<std::uint64_t> macs;

    std::size_t slots() const noexcept { return macs.size(); }

    std::uint64_t total_macs() const {
        std::uint64_t acc = 0;
        for (auto m : macs) acc += m;
        return acc;
    }

    static CostModel from_net(const DenoiserNet& net) {
        CostModel m;
        for (const auto& s : net.slots()) {
            m.names.push_back(s.name);
            m.kinds.push_back(s.kind);
            m.macs.push_back(s.macs);
        }
        return m;
    }
};

inline BitOps slot_bitops(std::uint64_t macs, int weight_bits, int act_bits, SlotKind kind) {
    if (weight_bits < 1 || act_bits < 1) throw std::invalid_argument("slot_bitops: bit-widths must be positive");
    const unsigned __int128 a = static_cast<unsigned>(act_bits);
    const unsigned __int128 w = kind == SlotKind::attention ? a : static_cast<unsigned>(weight_bits);
    return detail::narrow_bitops(static_cast<unsigned __int128>(macs) * w * a);
}

/// Cost of one denoiser evaluation under `policy`.
inline BitOps step_bitops(const CostModel& model, const Policy& policy) {
    if (policy.size() != model.slots()) throw std::invalid_argument("step_bitops: policy does not cover every slot");
    unsigned __int128 acc = 0;
    for (std::size_t s = 0; s < model.slots(); ++s)
        acc += slot_bitops(model.macs[s], policy[s].weight_bits, policy[s].act_bits, model.kinds[s]);
    return detail::narrow_bitops(acc);
}

inline BitOps overall_bitops(BitOps step, std::size_t n_steps) {
    if (n_steps < 1) throw std::invalid_argument("overall_bitops: need at least one step");
    return detail::narrow_bitops(static_cast<unsigned __int128>(step) * n_steps);
}

struct Budget {
    BitOps limit = 0;
    std::string description;
};

/// Budget equal to running every slot at W`weight_bits`A`act_bits` for `steps` steps.
inline Budget uniform_budget(const CostModel& model, int weight_bits, int act_bits, std::size_t steps) {
    const Policy p = uniform_policy(model.slots(), weight_bits, act_bits);
    Budget b{overall_bitops(step_bitops(model, p), steps),
             "uniform W" + std::to_string(weight_bits) + "A" + std::to_string(act_bits) + " at " +
                 std::to_string(steps) + " steps"};
    if (b.limit == 0) throw std::invalid_argument("uniform_budget: budget must be positive");
    return b;
}

inline bool within_budget(const Policy& policy, std::size_t n_steps, const CostModel& model, const Budget& budget) {
    return overall_bitops(step_bitops(model, policy), n_steps) <= budget.limit;
}

/// log10 of the number of joint candidates: one timestep per group times
/// M·N bit-width choices for each of L slots.
inline double search_space_size(const GroupingScheme& grouping, std::size_t slots, std::size_t weight_choices,
                                std::size_t act_choices) {
    double acc = 0.0;
    for (int h = 0; h < grouping.H; ++h) acc += std::log10(static_cast<double>(grouping.width(h)));
    return acc + static_cast<double>(slots) * std::log10(static_cast<double>(weight_choices * act_choices));
}

}  // namespace tmpq
