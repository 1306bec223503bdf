#pragma once

// Uniform fake quantizers and the multi-precision quantizer bank.
//
//   activation:  s * (clip(round(v/s) + z, 0, 2^b - 1) - z)
//   weight:      s * (clip(round(v/s) + z, -2^(b-1), 2^(b-1) - 1) - z)
//
// round() is half-away-from-zero. z is stored as a real number.

#include "tmpq/numerics.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tmpq {

enum class QuantRange { unsigned_act, signed_weight };

struct QuantParams {
    double scale = 1.0;
    double zero_point = 0.0;
    int bits = 8;

    friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

struct ClipBounds {
    double lo;
    double hi;
};

inline ClipBounds clip_bounds(QuantRange range, int bits) {
    // Up to 53 bits every level is an exact double.
    if (bits < 1 || bits > 53) throw std::invalid_argument("quantizer bit-width out of range");
    if (range == QuantRange::unsigned_act) return {0.0, std::ldexp(1.0, bits) - 1.0};
    return {-std::ldexp(1.0, bits - 1), std::ldexp(1.0, bits - 1) - 1.0};
}

/// Records the rounding residual round(u) - u and the clip region of every
/// element quantized during one forward pass, and can replay them. Replaying
/// turns the quantizer into the smooth surrogate whose exact derivative is the
/// straight-through gradient, which is what finite-difference checks compare
/// against.
struct RoundingTape {
    enum class Mode { record, replay };
    Mode mode = Mode::record;
    std::vector<double> residual;
    std::vector<std::int8_t> region;  // -1 clipped low, 0 inside, +1 clipped high
    std::size_t cursor = 0;

    void start_replay() {
        mode = Mode::replay;
        cursor = 0;
    }
};

/// Round half away from zero; agrees with std::round but vectorizes.
/// u - trunc(u) is exact, so the comparison against 0.5 is too.
inline double round_half_away(double u) {
    const double t = std::trunc(u);
    const double f = u - t;
    return f >= 0.5 ? t + 1.0 : (f <= -0.5 ? t - 1.0 : t);
}

inline double fake_quantize(double v, const QuantParams& p, ClipBounds b, RoundingTape* tape = nullptr) {
    const double u = v / p.scale;
    if (tape && tape->mode == RoundingTape::Mode::replay) {
        const std::size_t i = tape->cursor++;
        const std::int8_t region = tape->region.at(i);
        if (region < 0) return p.scale * (b.lo - p.zero_point);
        if (region > 0) return p.scale * (b.hi - p.zero_point);
        return p.scale * (u + tape->residual[i]);
    }
    const double r = round_half_away(u);
    const double q = r + p.zero_point;
    const double c = std::clamp(q, b.lo, b.hi);
    if (tape) {
        tape->residual.push_back(r - u);
        tape->region.push_back(q < b.lo ? -1 : (q > b.hi ? 1 : 0));
    }
    return p.scale * (c - p.zero_point);
}

inline Tensor fake_quantize(const Tensor& v, const QuantParams& p, QuantRange range, RoundingTape* tape = nullptr) {
    const ClipBounds b = clip_bounds(range, p.bits);
    Tensor out = v;
    if (tape) {
        for (auto& x : out.storage()) x = fake_quantize(x, p, b, tape);
        return out;
    }
    // Branch-free form of the scalar path so the loop vectorizes.
    const double s = p.scale, z = p.zero_point, lo = b.lo, hi = b.hi;
    double* d = out.storage().data();
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double u = d[i] / s;
        double r = std::trunc(u);
        const double f = u - r;
        r += f >= 0.5 ? 1.0 : 0.0;
        r -= f <= -0.5 ? 1.0 : 0.0;
        double q = r + z;
        q = q < lo ? lo : q;
        q = hi < q ? hi : q;
        d[i] = s * (q - z);
    }
    return out;
}

inline Tensor quantize_act(const Tensor& v, const QuantParams& p) {
    return fake_quantize(v, p, QuantRange::unsigned_act);
}

inline Tensor quantize_weight(const Tensor& v, const QuantParams& p) {
    return fake_quantize(v, p, QuantRange::signed_weight);
}

/// Straight-through backward of one fake quantizer over a tensor.
/// Accumulates d(loss)/d(scale) and d(loss)/d(zero_point) and returns
/// d(loss)/d(v): 1 inside the clip range, 0 where clipped.
struct QuantParamGrad {
    double scale = 0.0;
    double zero_point = 0.0;
};

inline Tensor fake_quantize_backward(const Tensor& v, const QuantParams& p, QuantRange range,
                                     const Tensor& grad_out, QuantParamGrad& grad) {
    const ClipBounds b = clip_bounds(range, p.bits);
    Tensor grad_in(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double u = v[i] / p.scale;
        const double r = std::round(u);
        const double q = r + p.zero_point;
        const double g = grad_out[i];
        if (q < b.lo || q > b.hi) {
            const double bound = q < b.lo ? b.lo : b.hi;
            grad.scale += g * (bound - p.zero_point);
            grad.zero_point += g * -p.scale;
        } else {
            grad_in[i] = g;
            grad.scale += g * (r - u);
        }
    }
    return grad_in;
}

inline constexpr double kMinScale = 1e-8;

/// Min-max initialisation. Activations use the asymmetric range
/// s = (max - min) / (2^b - 1), z = -min / s; weights the symmetric range
/// s = max(|min|, |max|) / (2^(b-1) - 1), z = 0. Degenerate ranges get the
/// floor scale 1e-8.
inline QuantParams init_minmax(double lo, double hi, int bits, QuantRange range) {
    if (lo > hi) std::swap(lo, hi);
    QuantParams p;
    p.bits = bits;
    if (range == QuantRange::unsigned_act) {
        const double levels = std::ldexp(1.0, bits) - 1.0;
        p.scale = std::max((hi - lo) / levels, kMinScale);
        p.zero_point = hi > lo ? -lo / p.scale : 0.0;
    } else {
        const double levels = std::ldexp(1.0, bits - 1) - 1.0;
        p.scale = std::max(std::max(std::abs(lo), std::abs(hi)) / levels, kMinScale);
        p.zero_point = 0.0;
    }
    return p;
}

inline QuantParams init_minmax(const Tensor& observed, int bits, QuantRange range) {
    if (observed.empty()) throw std::invalid_argument("init_minmax: empty tensor");
    const auto [lo, hi] = std::minmax_element(observed.storage().begin(), observed.storage().end());
    return init_minmax(*lo, *hi, bits, range);
}

// ---------------------------------------------------------------------------
// Bank

enum class SlotKind { linear, attention };

inline const char* to_string(SlotKind k) { return k == SlotKind::linear ? "linear" : "attention"; }

/// One quantizer with an independent (s, z) per candidate bit-width.
struct MultiPrecisionQuantizer {
    std::string name;
    QuantRange range = QuantRange::unsigned_act;
    std::map<int, QuantParams> by_bits;

    const QuantParams& at(int bits) const {
        auto it = by_bits.find(bits);
        if (it == by_bits.end())
            throw std::out_of_range("quantizer '" + name + "' has no entry for " + std::to_string(bits) + " bits");
        return it->second;
    }
    QuantParams& at(int bits) { return const_cast<QuantParams&>(std::as_const(*this).at(bits)); }
};

/// Quantizers owned by one quantizable slot. Linear slots: `first` quantizes
/// the weight, `second` the layer input. Attention slots: `first` and
/// `second` quantize the left and right matmul operands (both activations).
struct SlotQuantizers {
    std::string slot;
    SlotKind kind = SlotKind::linear;
    std::size_t block = 0;
    MultiPrecisionQuantizer first;
    MultiPrecisionQuantizer second;
};

struct SlotBits {
    int weight_bits = 8;
    int act_bits = 8;

    friend bool operator==(const SlotBits&, const SlotBits&) = default;
    friend auto operator<=>(const SlotBits&, const SlotBits&) = default;
};

/// Per-slot bit-widths, shared by every sampled timestep.
using Policy = std::vector<SlotBits>;

inline Policy uniform_policy(std::size_t slots, int weight_bits, int act_bits) {
    return Policy(slots, SlotBits{weight_bits, act_bits});
}

class QuantizerBank {
public:
    QuantizerBank() = default;

    QuantizerBank(std::vector<SlotQuantizers> slots, std::vector<int> weight_bits, std::vector<int> act_bits,
                  std::size_t blocks)
        : slots_(std::move(slots)), weight_bits_(std::move(weight_bits)), act_bits_(std::move(act_bits)),
          calibrated_(blocks, false) {
        if (weight_bits_.empty() || act_bits_.empty()) throw std::invalid_argument("QuantizerBank: empty bit-width set");
        std::sort(weight_bits_.begin(), weight_bits_.end());
        std::sort(act_bits_.begin(), act_bits_.end());
    }

    const std::vector<SlotQuantizers>& slots() const noexcept { return slots_; }
    std::vector<SlotQuantizers>& slots() noexcept { return slots_; }
    const SlotQuantizers& slot(std::size_t i) const { return slots_.at(i); }
    SlotQuantizers& slot(std::size_t i) { return slots_.at(i); }

    const std::vector<int>& weight_bits() const noexcept { return weight_bits_; }
    const std::vector<int>& act_bits() const noexcept { return act_bits_; }

    /// Bits used by the first quantizer of slot i: weight bits for linear
    /// slots, activation bits for attention operands.
    const std::vector<int>& first_bits(std::size_t i) const {
        return slot(i).kind == SlotKind::linear ? weight_bits_ : act_bits_;
    }

    std::size_t block_count() const noexcept { return calibrated_.size(); }
    bool block_calibrated(std::size_t j) const { return calibrated_.at(j); }
    void mark_calibrated(std::size_t j) { calibrated_.at(j) = true; }
    bool fully_calibrated() const {
        return std::all_of(calibrated_.begin(), calibrated_.end(), [](bool b) { return b; });
    }

    /// Number of block calibrations ever run against this bank.
    std::size_t calibration_calls() const noexcept { return calibration_calls_; }
    void note_calibration_call() noexcept { ++calibration_calls_; }

    std::uint64_t seed = 0;
    std::string model_signature;

    /// Drops every entry for `bits` from the bank.
    void remove_bit_width(int bits) {
        std::erase(weight_bits_, bits);
        std::erase(act_bits_, bits);
        for (auto& s : slots_) {
            s.first.by_bits.erase(bits);
            s.second.by_bits.erase(bits);
        }
    }

    friend bool operator==(const QuantizerBank& a, const QuantizerBank& b) {
        if (a.slots_.size() != b.slots_.size() || a.weight_bits_ != b.weight_bits_ || a.act_bits_ != b.act_bits_)
            return false;
        for (std::size_t i = 0; i < a.slots_.size(); ++i) {
            const auto& x = a.slots_[i];
            const auto& y = b.slots_[i];
            if (x.slot != y.slot || x.kind != y.kind || x.first.by_bits != y.first.by_bits ||
                x.second.by_bits != y.second.by_bits)
                return false;
        }
        return true;
    }

private:
    std::vector<SlotQuantizers> slots_;
    std::vector<int> weight_bits_;
    std::vector<int> act_bits_;
    std::vector<bool> calibrated_;
    std::size_t calibration_calls_ = 0;
};

/// A bank plus the active per-slot bit-widths. Reads the bank only.
class QuantContext {
public:
    QuantContext(const QuantizerBank& bank, Policy policy) : bank_(&bank), policy_(std::move(policy)) {
        if (policy_.size() != bank.slots().size())
            throw std::invalid_argument("QuantContext: policy must cover every slot exactly once");
    }

    const QuantizerBank& bank() const noexcept { return *bank_; }
    const Policy& policy() const noexcept { return policy_; }

    /// Parameters of the first quantizer of `slot` under the active policy.
    const QuantParams& first(std::size_t slot) const {
        const auto& s = bank_->slot(slot);
        const int bits = s.kind == SlotKind::linear ? policy_[slot].weight_bits : policy_[slot].act_bits;
        return s.first.at(bits);
    }
    const QuantParams& second(std::size_t slot) const { return bank_->slot(slot).second.at(policy_[slot].act_bits); }

    QuantRange first_range(std::size_t slot) const {
        return bank_->slot(slot).kind == SlotKind::linear ? QuantRange::signed_weight : QuantRange::unsigned_act;
    }

    /// When false, weights are assumed to be quantized already.
    bool quantize_weights = true;
    /// Optional straight-through surrogate recording/replay.
    RoundingTape* tape = nullptr;

private:
    const QuantizerBank* bank_;
    Policy policy_;
};

}  // namespace tmpq
