#include "tmpq/cost.hpp"

#include <gtest/gtest.h>

using namespace tmpq;

namespace {

CostModel reference_model() { return CostModel::from_net(DenoiserNet(Architecture{}, 0)); }

// Independent per-slot recount straight from the formulas.
BitOps recount(const CostModel& m, const Policy& p, std::size_t steps) {
    long double acc = 0;
    for (std::size_t s = 0; s < m.slots(); ++s) {
        const long double a = p[s].act_bits;
        const long double w = m.kinds[s] == SlotKind::attention ? a : p[s].weight_bits;
        acc += static_cast<long double>(m.macs[s]) * w * a;
    }
    return static_cast<BitOps>(acc * steps);
}

}  // namespace

TEST(SlotBitops, Examples) {
    EXPECT_EQ(slot_bitops(1'000'000, 6, 6, SlotKind::linear), 36'000'000u);
    EXPECT_EQ(slot_bitops(5000, 4, 8, SlotKind::attention), 320'000u);
    EXPECT_EQ(slot_bitops(10, 4, 8, SlotKind::linear), 320u);
    EXPECT_THROW(slot_bitops(10, 0, 8, SlotKind::linear), std::invalid_argument);
}

TEST(StepBitops, UniformPolicyFactorsOut) {
    const CostModel m = reference_model();
    EXPECT_EQ(step_bitops(m, uniform_policy(m.slots(), 6, 6)), 36 * m.total_macs());
    EXPECT_EQ(step_bitops(CostModel{}, Policy{}), 0u);
    EXPECT_THROW(step_bitops(m, uniform_policy(m.slots() - 1, 6, 6)), std::invalid_argument);
}

TEST(StepBitops, RaisingAnySlotStrictlyIncreasesCost) {
    const CostModel m = reference_model();
    const Policy base = uniform_policy(m.slots(), 6, 6);
    for (std::size_t s = 0; s < m.slots(); ++s) {
        Policy up = base;
        up[s].act_bits = 7;
        EXPECT_GT(step_bitops(m, up), step_bitops(m, base));
        if (m.kinds[s] == SlotKind::linear) {
            up = base;
            up[s].weight_bits = 7;
            EXPECT_GT(step_bitops(m, up), step_bitops(m, base));
        }
    }
}

TEST(StepBitops, InvariantToSlotOrder) {
    CostModel m = reference_model();
    Rng rng(1);
    Policy p(m.slots());
    for (auto& b : p) b = {5 + static_cast<int>(rng.below(4)), 5 + static_cast<int>(rng.below(4))};
    const BitOps before = step_bitops(m, p);
    std::vector<std::size_t> order(m.slots());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    CostModel shuffled;
    Policy q;
    for (auto i : order) {
        shuffled.names.push_back(m.names[i]);
        shuffled.kinds.push_back(m.kinds[i]);
        shuffled.macs.push_back(m.macs[i]);
        q.push_back(p[i]);
    }
    EXPECT_EQ(step_bitops(shuffled, q), before);
}

TEST(OverallBitops, TableScaling) {
    // Per-step cost chosen so that 100 steps give 44.3 T.
    const BitOps step = 443'000'000'000ULL;
    EXPECT_EQ(overall_bitops(step, 100), 44'300'000'000'000ULL);
    EXPECT_EQ(overall_bitops(step, 100), 10 * overall_bitops(step, 10));
    EXPECT_EQ(overall_bitops(step, 10), 4'430'000'000'000ULL);
    EXPECT_NEAR(overall_bitops(step, 5) / 1e12, 2.21, 0.01);
    EXPECT_EQ(overall_bitops(step, 1), step);
    EXPECT_THROW(overall_bitops(step, 0), std::invalid_argument);
}

TEST(OverallBitops, WideAccumulationDetectsOverflow) {
    EXPECT_THROW(overall_bitops(std::numeric_limits<BitOps>::max() / 2, 3), std::overflow_error);
}

TEST(Budget, UniformBudgetCases) {
    const CostModel m = reference_model();
    const Budget b = uniform_budget(m, 6, 6, 5);
    EXPECT_EQ(b.limit, 36 * m.total_macs() * 5);
    EXPECT_EQ(b.description, "uniform W6A6 at 5 steps");
    EXPECT_TRUE(within_budget(uniform_policy(m.slots(), 6, 6), 5, m, b));
    EXPECT_FALSE(within_budget(uniform_policy(m.slots(), 8, 8), 5, m, b));
    EXPECT_TRUE(within_budget(uniform_policy(m.slots(), 5, 5), 5, m, b));
    EXPECT_FALSE(within_budget(uniform_policy(m.slots(), 6, 6), 6, m, b));
    EXPECT_TRUE(within_budget(uniform_policy(m.slots(), 8, 8), 2, m, b));
}

TEST(Budget, AdmittedPoliciesRecountWithinLimit) {
    const CostModel m = reference_model();
    const Budget b = uniform_budget(m, 6, 6, 5);
    Rng rng(2);
    int admitted = 0;
    for (int trial = 0; trial < 5000; ++trial) {
        Policy p(m.slots());
        for (auto& s : p) s = {5 + static_cast<int>(rng.below(4)), 5 + static_cast<int>(rng.below(4))};
        const std::size_t steps = 3 + rng.below(4);
        if (!within_budget(p, steps, m, b)) continue;
        ++admitted;
        EXPECT_LE(recount(m, p, steps), b.limit);
        EXPECT_EQ(recount(m, p, steps), overall_bitops(step_bitops(m, p), steps));
    }
    EXPECT_GT(admitted, 100);
}

TEST(SearchSpaceSize, Examples) {
    const auto g = build_groups(1000, 20, GroupingKind::non_uniform);
    EXPECT_NEAR(search_space_size(build_groups(20, 20, GroupingKind::uniform), 250, 4, 1), 250 * std::log10(4.0), 1e-9);
    EXPECT_NEAR(250 * std::log10(4.0), 150.5, 0.05);
    EXPECT_NEAR(search_space_size(build_groups(20, 20, GroupingKind::uniform), 0, 4, 4), 0.0, 1e-12);
    // 4^250 x C(1000, 20) is roughly 3 x 10^192.
    EXPECT_NEAR(250 * std::log10(4.0) + log10_binomial(1000, 20), std::log10(3e192), 1.0);
    double widths = 0.0;
    for (int h = 0; h < 20; ++h) widths += std::log10(g.width(h));
    EXPECT_NEAR(search_space_size(g, 8, 4, 4), widths + 8 * std::log10(16.0), 1e-9);
}
