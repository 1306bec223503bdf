#include "tmpq/nn.hpp"
#include "tmpq/quant.hpp"

#include <gtest/gtest.h>

using namespace tmpq;

namespace {

double act(double v, double s, double z, int b) {
    return quantize_act(Tensor::matrix(1, 1, {v}), {s, z, b})[0];
}

double weight(double v, double s, double z, int b) {
    return quantize_weight(Tensor::matrix(1, 1, {v}), {s, z, b})[0];
}

}  // namespace

TEST(QuantizeAct, Examples) {
    EXPECT_EQ(act(0.0, 0.7, 0.0, 4), 0.0);
    EXPECT_EQ(act(2.3, 1.0, 0.0, 2), 2.0);
    EXPECT_EQ(act(100.0, 1.0, 0.0, 2), 3.0);
    EXPECT_EQ(act(-3.0, 1.0, 0.0, 2), 0.0);
}

TEST(QuantizeWeight, Examples) {
    EXPECT_EQ(weight(-5.0, 1.0, 0.0, 3), -4.0);
    EXPECT_EQ(weight(0.49, 1.0, 0.0, 3), 0.0);
    EXPECT_EQ(weight(0.5, 1.0, 0.0, 3), 1.0);
    EXPECT_EQ(weight(-0.5, 1.0, 0.0, 3), -1.0);
    for (int k = -4; k <= 3; ++k) EXPECT_EQ(weight(0.25 * k, 0.25, 0.0, 3), 0.25 * k);
}

TEST(Rounding, HalfAwayFromZeroMatchesStdRound) {
    Rng rng(1);
    for (int i = 0; i < 100000; ++i) {
        const double u = (rng.uniform() - 0.5) * 1000.0;
        ASSERT_EQ(round_half_away(u), std::round(u)) << u;
        const double half = std::floor(u) + 0.5;
        ASSERT_EQ(round_half_away(half), std::round(half)) << half;
    }
    EXPECT_EQ(round_half_away(0.49999999999999994), 0.0);
    EXPECT_EQ(round_half_away(-2.5), -3.0);
    EXPECT_EQ(round_half_away(4503599627370495.5), 4503599627370496.0);
}

TEST(FakeQuantize, TensorPathMatchesScalarPath) {
    Rng rng(2);
    const Tensor v = scaled(rng.normal_tensor({50, 7}), 3.0);
    for (auto range : {QuantRange::unsigned_act, QuantRange::signed_weight}) {
        const QuantParams p{0.137, range == QuantRange::unsigned_act ? 11.3 : 0.4, 5};
        const Tensor out = fake_quantize(v, p, range);
        const ClipBounds b = clip_bounds(range, 5);
        for (std::size_t i = 0; i < v.size(); ++i) ASSERT_EQ(out[i], fake_quantize(v[i], p, b));
    }
}

TEST(FakeQuantize, GridLaw) {
    Rng rng(3);
    for (int trial = 0; trial < 2000; ++trial) {
        const int bits = 2 + static_cast<int>(rng.below(7));
        const auto range = trial % 2 ? QuantRange::unsigned_act : QuantRange::signed_weight;
        const ClipBounds b = clip_bounds(range, bits);
        const double s = 0.01 + rng.uniform();
        const double v = (rng.uniform() - 0.5) * 100.0;
        // Integer zero-point: s·(q - z) with integer q inside the clip range.
        const double zi = std::round((rng.uniform() - 0.5) * 20.0);
        const double q = fake_quantize(v, {s, zi, bits}, b) / s + zi;
        ASSERT_NEAR(q, std::round(q), 1e-9);
        ASSERT_GE(std::round(q), b.lo);
        ASSERT_LE(std::round(q), b.hi);
        // Continuous zero-point shifts only the clip thresholds: the output is
        // either an integer multiple of s or a clip bound.
        const double zc = (rng.uniform() - 0.5) * 20.0;
        const double n = fake_quantize(v, {s, zc, bits}, b) / s;
        const bool on_grid = std::abs(n - std::round(n)) < 1e-9;
        const bool at_bound = std::abs(n + zc - b.lo) < 1e-9 || std::abs(n + zc - b.hi) < 1e-9;
        ASSERT_TRUE(on_grid || at_bound) << n;
    }
}

TEST(FakeQuantize, ErrorBoundedInsideRange) {
    Rng rng(4);
    for (int trial = 0; trial < 5000; ++trial) {
        const int bits = 2 + static_cast<int>(rng.below(7));
        const QuantParams p{0.05 + rng.uniform(), std::floor(rng.uniform() * 4.0), bits};
        const ClipBounds b = clip_bounds(QuantRange::unsigned_act, bits);
        const double v = (rng.uniform() - 0.3) * 50.0;
        const double q = round_half_away(v / p.scale) + p.zero_point;
        if (q > b.lo && q < b.hi) {
            ASSERT_LE(std::abs(v - fake_quantize(v, p, b)), p.scale / 2 + 1e-12);
        }
    }
}

// Holds for integer zero-points. With a continuous z a clip bound can sit
// closer to v than the nearest grid point, so widening the range may hurt.
TEST(FakeQuantize, MoreBitsNeverIncreaseError) {
    Rng rng(5);
    for (int trial = 0; trial < 2000; ++trial) {
        const double s = 0.05 + rng.uniform(), z = std::round((rng.uniform() - 0.5) * 6.0);
        const double v = (rng.uniform() - 0.5) * 200.0;
        for (auto range : {QuantRange::unsigned_act, QuantRange::signed_weight}) {
            double prev = INFINITY;
            for (int bits = 2; bits <= 12; ++bits) {
                const double err = std::abs(v - fake_quantize(v, {s, z, bits}, clip_bounds(range, bits)));
                ASSERT_LE(err, prev + 1e-12);
                prev = err;
            }
        }
    }
}

TEST(FakeQuantize, BitWidthOutOfRangeThrows) {
    EXPECT_THROW(clip_bounds(QuantRange::unsigned_act, 0), std::invalid_argument);
    EXPECT_THROW(clip_bounds(QuantRange::signed_weight, 54), std::invalid_argument);
}

TEST(FakeQuantizeBackward, StraightThroughInsideClipRange) {
    const Tensor v = Tensor::matrix(1, 4, {-1.0, 0.4, 2.6, 9.0});
    const QuantParams p{1.0, 0.0, 2};  // levels 0..3
    QuantParamGrad g;
    const Tensor dv = fake_quantize_backward(v, p, QuantRange::unsigned_act, Tensor::matrix(1, 4, {1, 1, 1, 1}), g);
    EXPECT_EQ(dv, Tensor::matrix(1, 4, {0, 1, 1, 0}));
    // ds: clipped low contributes lo - z = 0, inside round(u) - u, clipped high hi - z = 3.
    EXPECT_NEAR(g.scale, 0.0 + (0.0 - 0.4) + (3.0 - 2.6) + 3.0, 1e-12);
    EXPECT_NEAR(g.zero_point, -2.0, 1e-12);
}

TEST(InitMinmax, Examples) {
    const auto a = init_minmax(0.0, 15.0, 4, QuantRange::unsigned_act);
    EXPECT_DOUBLE_EQ(a.scale, 1.0);
    EXPECT_DOUBLE_EQ(a.zero_point, 0.0);
    const auto w = init_minmax(-4.0, 4.0, 4, QuantRange::signed_weight);
    EXPECT_DOUBLE_EQ(w.scale, 4.0 / 7.0);
    EXPECT_DOUBLE_EQ(w.zero_point, 0.0);
    const Tensor flat = Tensor::matrix(1, 3, {2.5, 2.5, 2.5});
    const auto c = init_minmax(flat, 8, QuantRange::unsigned_act);
    EXPECT_EQ(c.scale, 1e-8);
    EXPECT_TRUE(std::isfinite(quantize_act(flat, c)[0]));
}

TEST(InitMinmax, ActivationRangeIsReproducedExactly) {
    // s = 1, z = 2: both ends are grid points.
    const auto p = init_minmax(-2.0, 5.0, 3, QuantRange::unsigned_act);
    EXPECT_NEAR(act(-2.0, p.scale, p.zero_point, 3), -2.0, 1e-12);
    EXPECT_NEAR(act(5.0, p.scale, p.zero_point, 3), 5.0, 1e-12);
    // Otherwise z is fractional and every in-range value is within s/2.
    const auto f = init_minmax(-2.0, 6.0, 3, QuantRange::unsigned_act);
    for (double v = -2.0; v <= 6.0; v += 0.01) EXPECT_LE(std::abs(act(v, f.scale, f.zero_point, 3) - v), f.scale / 2 + 1e-12);
    EXPECT_THROW(init_minmax(Tensor(), 8, QuantRange::unsigned_act), std::invalid_argument);
}

TEST(QuantizerBank, EveryEntryExistsForEveryCandidate) {
    const DenoiserNet net(Architecture{}, 0);
    const QuantizerBank bank = net.make_bank({5, 6, 7, 8}, {6, 8});
    for (std::size_t s = 0; s < bank.slots().size(); ++s) {
        for (int b : bank.first_bits(s)) EXPECT_NO_THROW(bank.slot(s).first.at(b));
        for (int b : bank.act_bits()) EXPECT_NO_THROW(bank.slot(s).second.at(b));
        EXPECT_THROW(bank.slot(s).second.at(5), std::out_of_range);
    }
}

TEST(QuantizerBank, RemovingABitWidthKeepsOtherEntries) {
    const DenoiserNet net(Architecture{}, 0);
    QuantizerBank bank = net.make_bank({5, 6, 7, 8}, {5, 6, 7, 8});
    bank.slot(2).first.at(6).scale = 0.123;
    const QuantizerBank before = bank;
    bank.remove_bit_width(7);
    EXPECT_EQ(bank.weight_bits(), (std::vector<int>{5, 6, 8}));
    for (std::size_t s = 0; s < bank.slots().size(); ++s)
        for (int b : {5, 6, 8}) {
            EXPECT_EQ(bank.slot(s).first.at(b), before.slot(s).first.at(b));
            EXPECT_EQ(bank.slot(s).second.at(b), before.slot(s).second.at(b));
        }
}

TEST(QuantContext, SwitchingPoliciesReadsTheBankOnly) {
    const DenoiserNet net(Architecture{}, 0);
    const QuantizerBank bank = net.make_bank({5, 8}, {5, 8});
    const QuantizerBank before = bank;
    Rng rng(6);
    const Tensor x = rng.normal_tensor({16, 2});
    for (int b : {5, 8, 5}) {
        const QuantContext ctx(bank, uniform_policy(net.slot_count(), b, b));
        net.forward(x, 10, &ctx);
        EXPECT_EQ(&ctx.first(0), &bank.slot(0).first.at(b));
    }
    EXPECT_TRUE(bank == before);
}

TEST(QuantContext, PolicyMustCoverEverySlot) {
    const DenoiserNet net(Architecture{}, 0);
    const QuantizerBank bank = net.make_bank({8}, {8});
    EXPECT_THROW(QuantContext(bank, uniform_policy(net.slot_count() - 1, 8, 8)), std::invalid_argument);
}

TEST(QuantContext, AttentionSlotsUseActivationBitsOnBothOperands) {
    const DenoiserNet net(Architecture{}, 0);
    const QuantizerBank bank = net.make_bank({5, 8}, {5, 8});
    Policy p = uniform_policy(net.slot_count(), 5, 8);
    const QuantContext ctx(bank, p);
    for (std::size_t s = 0; s < net.slot_count(); ++s) {
        if (net.slots()[s].kind != SlotKind::attention) continue;
        EXPECT_EQ(ctx.first(s).bits, 8);
        EXPECT_EQ(ctx.second(s).bits, 8);
    }
}
