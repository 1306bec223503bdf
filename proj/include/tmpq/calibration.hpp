#pragma once

// Block-wise calibration of a multi-precision quantizer bank.
//
// For block j, each iteration picks one bit-width setting, switches every
// quantizer of the block to that setting's (s, z), and takes an Adam step on
// the block reconstruction error ||F̂_b(x) - F(x)||² w.r.t. the active (s, z)
// only. The block input x comes from the already calibrated, quantized prefix
// at the same setting. Network weights are never touched.

#include "tmpq/diffusion.hpp"
#include "tmpq/nn.hpp"
#include "tmpq/quant.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>
#include <tuple>
#include <vector>

namespace tmpq {

struct CalibrationSet {
    Tensor x;            // noisy inputs x_t
    std::vector<int> t;  // their timesteps

    std::size_t size() const noexcept { return t.size(); }
};

/// `count` pairs (x_t, t): x_0 drawn from `data`, t stratified uniformly over
/// [0, T) (one draw per stratum), x_t from the forward marginal.
inline CalibrationSet build_calibration_set(const NoiseSchedule& sched, const Tensor& data, std::size_t count,
                                            Rng& rng) {
    if (count == 0 || data.rows() == 0) throw std::invalid_argument("build_calibration_set: empty input");
    Tensor x0({count, data.cols()});
    std::vector<int> t(count);
    const double T = sched.steps();
    for (std::size_t i = 0; i < count; ++i) {
        const auto src = data.row(rng.below(data.rows()));
        std::copy(src.begin(), src.end(), x0.row(i).begin());
        const double u = (static_cast<double>(i) + rng.uniform()) * T / static_cast<double>(count);
        t[i] = std::min(sched.steps() - 1, static_cast<int>(u));
    }
    auto fs = forward_sample(sched, x0, std::span<const int>(t), rng);
    return {std::move(fs.noisy), std::move(t)};
}

struct CalibrationOptions {
    std::size_t iterations = 512;  // per block
    std::size_t batch = 64;
    double lr = 1e-2;
    std::uint64_t seed = 0;
};

struct SettingReport {
    SlotBits bits;
    double init_loss = 0.0;
    double final_loss = 0.0;
    std::size_t updates = 0;
    bool reverted = false;
};

struct BlockCalibrationReport {
    std::size_t block = 0;
    std::vector<SettingReport> settings;
};

/// Bit settings a block is calibrated under: (b, b) for every candidate when
/// the weight and activation sets coincide, the full product otherwise.
inline std::vector<SlotBits> calibration_settings(const QuantizerBank& bank) {
    std::vector<SlotBits> out;
    if (bank.weight_bits() == bank.act_bits()) {
        for (int b : bank.weight_bits()) out.push_back({b, b});
    } else {
        for (int bw : bank.weight_bits())
            for (int ba : bank.act_bits()) out.push_back({bw, ba});
    }
    return out;
}

namespace detail {

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
    Tensor out({idx.size(), x.cols()});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto src = x.row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

inline Tensor prefix_output(const DenoiserNet& net, std::size_t block, const Tensor& x, std::span<const int> t,
                            const QuantContext* ctx) {
    Tensor h = x;
    for (std::size_t k = 0; k < block; ++k) h = net.forward_block(k, h, t, ctx, nullptr);
    return h;
}

}  // namespace detail

/// ||F̂_b(x) - F(x)||² (mean over elements) for block j on the whole set,
/// with x taken from the quantized prefix at the same setting.
inline double block_reconstruction_loss(const DenoiserNet& net, std::size_t block, const QuantizerBank& bank,
                                        const CalibrationSet& calib, SlotBits setting) {
    const QuantContext ctx(bank, uniform_policy(bank.slots().size(), setting.weight_bits, setting.act_bits));
    const Tensor in = detail::prefix_output(net, block, calib.x, calib.t, &ctx);
    const Tensor ref = net.forward_block(block, in, calib.t, nullptr, nullptr);
    const Tensor got = net.forward_block(block, in, calib.t, &ctx, nullptr);
    return mean_squared_error(got, ref);
}

/// Whole-network output error of a quantized forward against full precision.
inline double network_reconstruction_error(const DenoiserNet& net, const QuantContext& ctx, const Tensor& x,
                                           std::span<const int> t) {
    return mean_squared_error(net.forward(x, t, &ctx), net.forward(x, t));
}

inline BlockCalibrationReport calibrate_block(const DenoiserNet& net, std::size_t block, QuantizerBank& bank,
                                              const CalibrationSet& calib, const CalibrationOptions& opts) {
    if (calib.size() == 0) throw std::invalid_argument("calibrate_block: empty calibration set");
    if (block >= net.block_count() || bank.block_count() != net.block_count())
        throw std::invalid_argument("calibrate_block: bank does not match the network");
    for (std::size_t k = 0; k < block; ++k)
        if (!bank.block_calibrated(k)) throw std::logic_error("calibrate_block: preceding block not calibrated");
    bank.note_calibration_call();

    const auto slots = net.block_slots(block);
    const auto settings = calibration_settings(bank);
    const std::size_t n_slots = bank.slots().size();
    const std::size_t n = calib.size();

    struct SettingState {
        SlotBits bits;
        Tensor input;   // block input from the quantized prefix
        Tensor target;  // full-precision block output
        Rng rng{0};
        std::size_t updates = 0;
    };
    std::vector<SettingState> state;
    for (const auto& s : settings) {
        SettingState st;
        st.bits = s;
        const QuantContext ctx(bank, uniform_policy(n_slots, s.weight_bits, s.act_bits));
        st.input = detail::prefix_output(net, block, calib.x, calib.t, &ctx);
        st.target = net.forward_block(block, st.input, calib.t, nullptr, nullptr);
        st.rng = Rng(derive_seed(opts.seed, (block << 16) ^ (static_cast<std::uint64_t>(s.weight_bits) << 8) ^
                                                static_cast<std::uint64_t>(s.act_bits)));
        state.push_back(std::move(st));
    }

    // Min-max initialisation from the statistics each quantizer actually sees.
    std::map<std::pair<std::size_t, int>, bool> act_initialised;
    for (const auto& st : state) {
        ForwardTrace trace;
        net.forward_block(block, st.input, calib.t, nullptr, &trace);
        const BlockCache& c = trace.blocks[block];
        for (std::size_t s : slots) {
            auto& q = bank.slot(s);
            if (q.kind == SlotKind::linear) {
                const Linear& l = net.linears()[net.slot_linear(s)];
                q.first.at(st.bits.weight_bits) = init_minmax(l.weight, st.bits.weight_bits, QuantRange::signed_weight);
                if (!act_initialised[{s, st.bits.act_bits}]) {
                    const bool is_temb = net.block_kind(block) == BlockKind::stem && s == slots[1];
                    const Tensor& seen = is_temb ? c.temb.input : c.main.input;
                    q.second.at(st.bits.act_bits) = init_minmax(seen, st.bits.act_bits, QuantRange::unsigned_act);
                    act_initialised[{s, st.bits.act_bits}] = true;
                }
            } else if (!act_initialised[{s, st.bits.act_bits}]) {
                // attn_qk sees the block input on both sides; attn_av sees the
                // softmax probabilities and the block input.
                const bool is_av = s == slots[1];
                q.first.at(st.bits.act_bits) =
                    init_minmax(is_av ? c.probs : c.input, st.bits.act_bits, QuantRange::unsigned_act);
                q.second.at(st.bits.act_bits) = init_minmax(c.input, st.bits.act_bits, QuantRange::unsigned_act);
                act_initialised[{s, st.bits.act_bits}] = true;
            }
        }
    }

    BlockCalibrationReport report;
    report.block = block;
    for (const auto& st : state) {
        SettingReport r;
        r.bits = st.bits;
        r.init_loss = block_reconstruction_loss(net, block, bank, calib, st.bits);
        report.settings.push_back(r);
    }
    const QuantizerBank initial = bank;

    // Balanced random schedule: every setting gets the same number of steps.
    const std::size_t per_setting = (opts.iterations + settings.size() - 1) / settings.size();
    std::vector<std::size_t> schedule;
    Rng order_rng(derive_seed(opts.seed, 0xC0FFEE ^ block));
    for (std::size_t round = 0; round < per_setting; ++round) {
        std::vector<std::size_t> perm(settings.size());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        order_rng.shuffle(perm);
        schedule.insert(schedule.end(), perm.begin(), perm.end());
    }

    Adam adam(AdamConfig{opts.lr});
    // Adam group per (slot, quantizer, bits).
    auto group_of = [](std::size_t slot, int which, int bits) { return (slot * 2 + which) * 64 + bits; };

    const std::size_t batch = std::min(opts.batch, n);
    for (std::size_t which_setting : schedule) {
        SettingState& st = state[which_setting];
        std::vector<std::size_t> idx(batch);
        for (auto& i : idx) i = st.rng.below(n);
        const Tensor x = detail::gather_rows(st.input, idx);
        const Tensor y = detail::gather_rows(st.target, idx);
        std::vector<int> t(batch);
        for (std::size_t i = 0; i < batch; ++i) t[i] = calib.t[idx[i]];

        const QuantContext ctx(bank, uniform_policy(n_slots, st.bits.weight_bits, st.bits.act_bits));
        ForwardTrace trace;
        const Tensor out = net.forward_block(block, x, t, &ctx, &trace);
        Tensor grad(out.shape());
        const double k = 2.0 / static_cast<double>(out.size());
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = k * (out[i] - y[i]);
        Gradients g = net.zero_gradients();
        net.backward_block(block, trace, grad, g);

        for (std::size_t s : slots) {
            auto& q = bank.slot(s);
            const int first_bits = q.kind == SlotKind::linear ? st.bits.weight_bits : st.bits.act_bits;
            const std::pair<QuantParams*, const QuantParamGrad*> entries[2] = {
                {&q.first.at(first_bits), &g.first[s]}, {&q.second.at(st.bits.act_bits), &g.second[s]}};
            for (int which = 0; which < 2; ++which) {
                QuantParams& p = *entries[which].first;
                const QuantParamGrad& pg = *entries[which].second;
                // Scale is optimised in log space so it stays positive.
                double params[2] = {std::log(p.scale), p.zero_point};
                const double grads[2] = {pg.scale * p.scale, pg.zero_point};
                adam.update(group_of(s, which, which == 0 ? first_bits : st.bits.act_bits), params, grads);
                p.scale = std::max(std::exp(params[0]), kMinScale);
                p.zero_point = params[1];
            }
        }
        ++st.updates;
    }

    const bool diagonal = bank.weight_bits() == bank.act_bits();
    for (std::size_t i = 0; i < state.size(); ++i) {
        auto& r = report.settings[i];
        r.updates = state[i].updates;
        r.final_loss = block_reconstruction_loss(net, block, bank, calib, r.bits);
        if (diagonal && r.final_loss > r.init_loss) {
            // Keep the better of the initial and optimised parameters.
            for (std::size_t s : slots) {
                auto& q = bank.slot(s);
                const int fb = q.kind == SlotKind::linear ? r.bits.weight_bits : r.bits.act_bits;
                q.first.at(fb) = initial.slot(s).first.at(fb);
                q.second.at(r.bits.act_bits) = initial.slot(s).second.at(r.bits.act_bits);
            }
            r.final_loss = r.init_loss;
            r.reverted = true;
        }
    }
    bank.mark_calibrated(block);
    return report;
}

/// Calibrates every block front to back. One-time cost: searching policies
/// afterwards only reads the bank.
inline std::vector<BlockCalibrationReport> calibrate_all(const DenoiserNet& net, QuantizerBank& bank,
                                                         const CalibrationSet& calib, const CalibrationOptions& opts) {
    if (calib.size() == 0) throw std::invalid_argument("calibrate_all: empty calibration set");
    std::vector<BlockCalibrationReport> out;
    for (std::size_t j = 0; j < net.block_count(); ++j) out.push_back(calibrate_block(net, j, bank, calib, opts));
    bank.seed = opts.seed;
    return out;
}

}  // namespace tmpq
