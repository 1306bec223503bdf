#pragma once

// Toy noise-prediction network for 2-D data.
//
//   stem:       silu(in(x) + temb(sinusoid(t)))
//   hidden_k:   silu(linear_k(h))                 k = 1..hidden_layers
//   attention:  h + softmax(X Xᵀ / sqrt(d_h)) X   X = h viewed as tokens × d_h
//   output:     out(h)
//
// Every linear weight and every linear input can be fake-quantized through a
// QuantContext; the attention block quantizes both operands of X·Xᵀ and of
// attn·X. Each of these is a "slot" in the quantizer bank and in the cost
// model. Backward rules are hand-written; rounding uses the straight-through
// estimator.

#include "tmpq/numerics.hpp"
#include "tmpq/quant.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tmpq {

struct Architecture {
    std::size_t data_dim = 2;
    std::size_t hidden = 64;
    std::size_t temb_dim = 32;
    std::size_t hidden_layers = 3;
    std::size_t attn_tokens = 4;  // 0 disables the attention block

    bool has_attention() const noexcept { return attn_tokens > 0; }
    std::size_t head_dim() const noexcept { return attn_tokens ? hidden / attn_tokens : 0; }

    void validate() const {
        if (data_dim == 0 || hidden == 0 || temb_dim == 0) throw std::invalid_argument("Architecture: zero dimension");
        if (temb_dim % 2 != 0) throw std::invalid_argument("Architecture: temb_dim must be even");
        if (attn_tokens && hidden % attn_tokens != 0)
            throw std::invalid_argument("Architecture: hidden width must be divisible by the token count");
    }

    friend bool operator==(const Architecture&, const Architecture&) = default;
};

enum class LayerKind { linear, activation, timestep_embed, self_attention };

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::linear;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    std::size_t tokens = 0;
    std::size_t head_dim = 0;
};

/// MACs of each quantizable matmul inside a layer. Linear layers have one
/// entry; self-attention has two (Q·Kᵀ and attn·V, n²·d_h each); everything
/// else has none. Independent of bit-widths.
inline std::vector<std::uint64_t> count_slot_macs(const LayerSpec& layer) {
    switch (layer.kind) {
    case LayerKind::linear: return {static_cast<std::uint64_t>(layer.in_dim) * layer.out_dim};
    case LayerKind::self_attention: {
        const std::uint64_t per = static_cast<std::uint64_t>(layer.tokens) * layer.tokens * layer.head_dim;
        return {per, per};
    }
    default: return {};
    }
}

inline std::uint64_t count_macs(const LayerSpec& layer) {
    std::uint64_t total = 0;
    for (auto m : count_slot_macs(layer)) total += m;
    return total;
}

struct Linear {
    std::string name;
    Tensor weight;  // [in, out]; y = x·W + b
    std::vector<double> bias;

    std::size_t in_dim() const { return weight.shape()[0]; }
    std::size_t out_dim() const { return weight.shape()[1]; }
};

struct SlotInfo {
    std::string name;
    SlotKind kind = SlotKind::linear;
    std::uint64_t macs = 0;
    std::size_t block = 0;
};

enum class BlockKind { stem, hidden, attention, output };

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

inline Tensor sinusoidal_embedding(std::span<const int> t, std::size_t dim) {
    const std::size_t half = dim / 2;
    Tensor out({t.size(), dim});
    for (std::size_t r = 0; r < t.size(); ++r) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double a = static_cast<double>(t[r]) * freq;
            out(r, i) = std::sin(a);
            out(r, half + i) = std::cos(a);
        }
    }
    return out;
}

struct LinearCache {
    Tensor input;
    Tensor input_used;   // quantized when a context is active
    Tensor weight_used;  // quantized weight (or the raw weight)
    QuantParams weight_params;
    QuantParams input_params;
    bool quantized = false;
    bool weight_quantized = false;
};

struct BlockCache {
    bool recorded = false;
    Tensor input;
    Tensor pre;  // pre-activation (stem, hidden)
    LinearCache main;
    LinearCache temb;
    // attention
    Tensor lhs, rhs, probs, probs_used, values_used;
    QuantParams qk_lhs, qk_rhs, av_lhs, av_rhs;
    bool attn_quantized = false;
};

struct ForwardTrace {
    std::vector<BlockCache> blocks;
    std::vector<int> t;
    bool quantized = false;
};

struct Gradients {
    std::vector<Tensor> weight;
    std::vector<std::vector<double>> bias;
    std::vector<QuantParamGrad> first;   // per slot
    std::vector<QuantParamGrad> second;  // per slot
};

class DenoiserNet {
public:
    DenoiserNet() = default;

    DenoiserNet(Architecture arch, std::uint64_t seed) : arch_(arch) {
        arch_.validate();
        Rng rng(seed);
        auto make = [&](std::string name, std::size_t in, std::size_t out) {
            Linear l;
            l.name = std::move(name);
            l.weight = Tensor({in, out});
            l.bias.assign(out, 0.0);
            const double bound = 1.0 / std::sqrt(static_cast<double>(in));
            for (auto& w : l.weight.storage()) w = (2.0 * rng.uniform() - 1.0) * bound;
            for (auto& b : l.bias) b = (2.0 * rng.uniform() - 1.0) * bound;
            return l;
        };
        linears_.push_back(make("in", arch_.data_dim, arch_.hidden));
        linears_.push_back(make("temb", arch_.temb_dim, arch_.hidden));
        for (std::size_t k = 0; k < arch_.hidden_layers; ++k)
            linears_.push_back(make("hidden" + std::to_string(k + 1), arch_.hidden, arch_.hidden));
        linears_.push_back(make("out", arch_.hidden, arch_.data_dim));
        build_topology();
    }

    const Architecture& arch() const noexcept { return arch_; }
    std::vector<Linear>& linears() noexcept { return linears_; }
    const std::vector<Linear>& linears() const noexcept { return linears_; }

    const std::vector<SlotInfo>& slots() const noexcept { return slots_; }
    std::size_t slot_count() const noexcept { return slots_.size(); }
    std::size_t block_count() const noexcept { return blocks_.size(); }
    BlockKind block_kind(std::size_t j) const { return blocks_.at(j); }

    std::vector<std::size_t> block_slots(std::size_t j) const {
        std::vector<std::size_t> out;
        for (std::size_t s = 0; s < slots_.size(); ++s)
            if (slots_[s].block == j) out.push_back(s);
        return out;
    }

    /// Layer list in execution order (the timestep branch first).
    std::vector<LayerSpec> layers() const {
        std::vector<LayerSpec> out;
        out.push_back({"temb_sinusoid", LayerKind::timestep_embed, 1, arch_.temb_dim});
        out.push_back({"temb", LayerKind::linear, arch_.temb_dim, arch_.hidden});
        out.push_back({"in", LayerKind::linear, arch_.data_dim, arch_.hidden});
        out.push_back({"silu", LayerKind::activation, arch_.hidden, arch_.hidden});
        for (std::size_t k = 0; k < arch_.hidden_layers; ++k) {
            out.push_back({linears_[2 + k].name, LayerKind::linear, arch_.hidden, arch_.hidden});
            out.push_back({"silu", LayerKind::activation, arch_.hidden, arch_.hidden});
        }
        if (arch_.has_attention())
            out.push_back({"attn", LayerKind::self_attention, arch_.hidden, arch_.hidden, arch_.attn_tokens,
                           arch_.head_dim()});
        out.push_back({"out", LayerKind::linear, arch_.hidden, arch_.data_dim});
        return out;
    }

    /// Stable description of the slot layout; banks and checkpoints compare it.
    std::string signature() const {
        std::string s = "d" + std::to_string(arch_.data_dim) + "-h" + std::to_string(arch_.hidden) + "-e" +
                        std::to_string(arch_.temb_dim) + "-l" + std::to_string(arch_.hidden_layers) + "-a" +
                        std::to_string(arch_.attn_tokens);
        return s;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : linears_) n += l.weight.size() + l.bias.size();
        return n;
    }

    /// Fresh bank for this net: weight entries min-max initialised from the
    /// weights, activation entries at s = 1, z = 0 until calibrated.
    QuantizerBank make_bank(const std::vector<int>& weight_bits, const std::vector<int>& act_bits) const {
        std::vector<SlotQuantizers> out;
        for (std::size_t s = 0; s < slots_.size(); ++s) {
            SlotQuantizers q;
            q.slot = slots_[s].name;
            q.kind = slots_[s].kind;
            q.block = slots_[s].block;
            if (q.kind == SlotKind::linear) {
                const Linear& l = linears_[slot_linear_[s]];
                q.first = {q.slot + ".weight", QuantRange::signed_weight, {}};
                q.second = {q.slot + ".input", QuantRange::unsigned_act, {}};
                for (int b : weight_bits) q.first.by_bits[b] = init_minmax(l.weight, b, QuantRange::signed_weight);
                for (int b : act_bits) q.second.by_bits[b] = QuantParams{1.0, 0.0, b};
            } else {
                q.first = {q.slot + ".lhs", QuantRange::unsigned_act, {}};
                q.second = {q.slot + ".rhs", QuantRange::unsigned_act, {}};
                for (int b : act_bits) {
                    q.first.by_bits[b] = QuantParams{1.0, 0.0, b};
                    q.second.by_bits[b] = QuantParams{1.0, 0.0, b};
                }
            }
            out.push_back(std::move(q));
        }
        QuantizerBank bank(std::move(out), weight_bits, act_bits, blocks_.size());
        bank.model_signature = signature();
        return bank;
    }

    /// Copy with every linear weight replaced by its fake-quantized value
    /// under `ctx`; pair it with a context whose quantize_weights is false.
    DenoiserNet with_quantized_weights(const QuantContext& ctx) const {
        DenoiserNet out = *this;
        for (std::size_t s = 0; s < slots_.size(); ++s) {
            if (slots_[s].kind != SlotKind::linear) continue;
            Linear& l = out.linears_[slot_linear_[s]];
            l.weight = fake_quantize(l.weight, ctx.first(s), QuantRange::signed_weight);
        }
        return out;
    }

    Tensor forward(const Tensor& x, std::span<const int> t, const QuantContext* q = nullptr,
                   ForwardTrace* trace = nullptr) const {
        check_input(x, t);
        if (trace) begin_trace(*trace, t, q);
        Tensor h = x;
        for (std::size_t j = 0; j < blocks_.size(); ++j) h = run_block(j, h, t, q, trace);
        return h;
    }

    Tensor forward(const Tensor& x, int t, const QuantContext* q = nullptr, ForwardTrace* trace = nullptr) const {
        const int ts[1] = {t};
        return forward(x, std::span<const int>(ts, 1), q, trace);
    }

    /// Runs block j alone. The trace, if given, must have been started with
    /// begin_trace (forward() does this itself).
    Tensor forward_block(std::size_t j, const Tensor& input, std::span<const int> t, const QuantContext* q,
                         ForwardTrace* trace) const {
        if (j >= blocks_.size()) throw std::out_of_range("forward_block: block index");
        if (trace && trace->blocks.size() != blocks_.size()) begin_trace(*trace, t, q);
        return run_block(j, input, t, q, trace);
    }

    void begin_trace(ForwardTrace& trace, std::span<const int> t, const QuantContext* q) const {
        trace.blocks.assign(blocks_.size(), BlockCache{});
        trace.t.assign(t.begin(), t.end());
        trace.quantized = q != nullptr;
    }

    Gradients zero_gradients() const {
        Gradients g;
        for (const auto& l : linears_) {
            g.weight.emplace_back(l.weight.shape());
            g.bias.emplace_back(l.bias.size(), 0.0);
        }
        g.first.assign(slots_.size(), {});
        g.second.assign(slots_.size(), {});
        return g;
    }

    /// Gradients of a scalar loss whose adjoint w.r.t. the output is
    /// `grad_out`, for all parameters and for the (s, z) of every quantizer
    /// active in the recorded pass.
    Gradients backward(const ForwardTrace& trace, const Tensor& grad_out) const {
        if (trace.blocks.size() != blocks_.size() || !trace.blocks.back().recorded)
            throw std::logic_error("backward called before forward");
        Gradients g = zero_gradients();
        Tensor d = grad_out;
        for (std::size_t j = blocks_.size(); j-- > 0;) d = backward_block(j, trace, d, g);
        return g;
    }

    /// Backward through block j only; returns the gradient w.r.t. its input.
    Tensor backward_block(std::size_t j, const ForwardTrace& trace, const Tensor& grad_out, Gradients& g) const {
        if (j >= trace.blocks.size() || !trace.blocks[j].recorded)
            throw std::logic_error("backward called before forward");
        const BlockCache& c = trace.blocks[j];
        const auto slots = block_slots(j);
        switch (blocks_[j]) {
        case BlockKind::stem: {
            Tensor dpre = grad_out;
            for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] *= silu_grad(c.pre[i]);
            const Tensor dx = linear_backward(slots[0], c.main, dpre, g);
            Tensor dtemb = dpre;
            const std::size_t m = c.temb.input.rows();
            if (m != dpre.rows()) {
                dtemb = Tensor({m, dpre.cols()});
                for (std::size_t r = 0; r < dpre.rows(); ++r)
                    for (std::size_t k = 0; k < dpre.cols(); ++k) dtemb(0, k) += dpre(r, k);
            }
            linear_backward(slots[1], c.temb, dtemb, g);
            return dx;
        }
        case BlockKind::hidden: {
            Tensor dpre = grad_out;
            for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] *= silu_grad(c.pre[i]);
            return linear_backward(slots[0], c.main, dpre, g);
        }
        case BlockKind::attention: return attention_backward(slots[0], slots[1], c, grad_out, g);
        case BlockKind::output: return linear_backward(slots[0], c.main, grad_out, g);
        }
        return {};
    }

    std::size_t slot_linear(std::size_t slot) const { return slot_linear_.at(slot); }

    // Flat parameter view (weights then biases, layer by layer); used by
    // checkpoints and finite-difference tests.
    std::vector<double> flat_parameters() const {
        std::vector<double> out;
        for (const auto& l : linears_) {
            out.insert(out.end(), l.weight.storage().begin(), l.weight.storage().end());
            out.insert(out.end(), l.bias.begin(), l.bias.end());
        }
        return out;
    }

    void set_flat_parameters(std::span<const double> p) {
        if (p.size() != parameter_count()) throw std::invalid_argument("set_flat_parameters: size mismatch");
        std::size_t k = 0;
        for (auto& l : linears_) {
            for (auto& w : l.weight.storage()) w = p[k++];
            for (auto& b : l.bias) b = p[k++];
        }
    }

    static std::vector<double> flatten(const Gradients& g) {
        std::vector<double> out;
        for (std::size_t i = 0; i < g.weight.size(); ++i) {
            out.insert(out.end(), g.weight[i].storage().begin(), g.weight[i].storage().end());
            out.insert(out.end(), g.bias[i].begin(), g.bias[i].end());
        }
        return out;
    }

private:
    void build_topology() {
        slots_.clear();
        slot_linear_.clear();
        blocks_.clear();
        auto add_linear_slot = [&](std::size_t li, std::size_t block) {
            const Linear& l = linears_[li];
            slots_.push_back({l.name, SlotKind::linear, static_cast<std::uint64_t>(l.in_dim()) * l.out_dim(), block});
            slot_linear_.push_back(li);
        };
        blocks_.push_back(BlockKind::stem);
        add_linear_slot(0, 0);
        add_linear_slot(1, 0);
        for (std::size_t k = 0; k < arch_.hidden_layers; ++k) {
            blocks_.push_back(BlockKind::hidden);
            add_linear_slot(2 + k, blocks_.size() - 1);
        }
        if (arch_.has_attention()) {
            blocks_.push_back(BlockKind::attention);
            const LayerSpec spec{"attn", LayerKind::self_attention, arch_.hidden, arch_.hidden, arch_.attn_tokens,
                                 arch_.head_dim()};
            const auto macs = count_slot_macs(spec);
            slots_.push_back({"attn_qk", SlotKind::attention, macs[0], blocks_.size() - 1});
            slot_linear_.push_back(static_cast<std::size_t>(-1));
            slots_.push_back({"attn_av", SlotKind::attention, macs[1], blocks_.size() - 1});
            slot_linear_.push_back(static_cast<std::size_t>(-1));
        }
        blocks_.push_back(BlockKind::output);
        add_linear_slot(linears_.size() - 1, blocks_.size() - 1);
    }

    void check_input(const Tensor& x, std::span<const int> t) const {
        if (x.rank() != 2 || x.cols() != arch_.data_dim) throw std::invalid_argument("forward: input has wrong shape");
        if (t.size() != 1 && t.size() != x.rows())
            throw std::invalid_argument("forward: need one timestep or one per row");
    }

    Tensor linear_forward(std::size_t slot, const Tensor& x, const QuantContext* q, LinearCache* cache) const {
        const Linear& l = linears_[slot_linear_[slot]];
        Tensor xin = x;
        const Tensor* w = &l.weight;
        Tensor wq;
        LinearCache local;
        LinearCache& c = cache ? *cache : local;
        c.quantized = q != nullptr;
        c.weight_quantized = false;
        if (q) {
            c.input_params = q->second(slot);
            if (q->quantize_weights) {
                c.weight_params = q->first(slot);
                wq = fake_quantize(l.weight, c.weight_params, QuantRange::signed_weight, q->tape);
                w = &wq;
                c.weight_quantized = true;
            }
            xin = fake_quantize(x, c.input_params, QuantRange::unsigned_act, q->tape);
        }
        Tensor y = matmul(xin, *w);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            auto row = y.row(r);
            for (std::size_t k = 0; k < row.size(); ++k) row[k] += l.bias[k];
        }
        if (cache) {
            c.input = x;
            c.weight_used = *w;
            c.input_used = std::move(xin);
        }
        return y;
    }

    Tensor linear_backward(std::size_t slot, const LinearCache& c, const Tensor& dy, Gradients& g) const {
        const std::size_t li = slot_linear_[slot];
        const Linear& l = linears_[li];
        for (std::size_t r = 0; r < dy.rows(); ++r)
            for (std::size_t k = 0; k < dy.cols(); ++k) g.bias[li][k] += dy(r, k);
        const Tensor dw_used = matmul_tn(c.input_used, dy);
        Tensor dx_used = matmul(dy, transpose(c.weight_used));
        if (c.weight_quantized) {
            const Tensor dw = fake_quantize_backward(l.weight, c.weight_params, QuantRange::signed_weight, dw_used,
                                                     g.first[slot]);
            g.weight[li] = add(g.weight[li], dw);
        } else {
            g.weight[li] = add(g.weight[li], dw_used);
        }
        if (c.quantized)
            return fake_quantize_backward(c.input, c.input_params, QuantRange::unsigned_act, dx_used, g.second[slot]);
        return dx_used;
    }

    Tensor run_block(std::size_t j, const Tensor& h, std::span<const int> t, const QuantContext* q,
                     ForwardTrace* trace) const {
        BlockCache* c = trace ? &trace->blocks[j] : nullptr;
        const auto slots = block_slots(j);
        Tensor out;
        switch (blocks_[j]) {
        case BlockKind::stem: {
            if (t.size() != 1 && t.size() != h.rows())
                throw std::invalid_argument("forward: need one timestep or one per row");
            Tensor pre = linear_forward(slots[0], h, q, c ? &c->main : nullptr);
            const Tensor emb = sinusoidal_embedding(t, arch_.temb_dim);
            const Tensor te = linear_forward(slots[1], emb, q, c ? &c->temb : nullptr);
            for (std::size_t r = 0; r < pre.rows(); ++r) {
                const std::size_t tr = te.rows() == 1 ? 0 : r;
                for (std::size_t k = 0; k < pre.cols(); ++k) pre(r, k) += te(tr, k);
            }
            out = pre;
            for (auto& v : out.storage()) v = silu(v);
            if (c) c->pre = std::move(pre);
            break;
        }
        case BlockKind::hidden: {
            Tensor pre = linear_forward(slots[0], h, q, c ? &c->main : nullptr);
            out = pre;
            for (auto& v : out.storage()) v = silu(v);
            if (c) c->pre = std::move(pre);
            break;
        }
        case BlockKind::attention: out = attention_forward(slots[0], slots[1], h, q, c); break;
        case BlockKind::output: out = linear_forward(slots[0], h, q, c ? &c->main : nullptr); break;
        }
        if (c) {
            c->input = h;
            c->recorded = true;
        }
        return out;
    }

    Tensor attention_forward(std::size_t qk, std::size_t av, const Tensor& x, const QuantContext* q,
                             BlockCache* c) const {
        const std::size_t n = x.rows(), tok = arch_.attn_tokens, dh = arch_.head_dim();
        const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
        Tensor lhs = x, rhs = x;
        if (q) {
            lhs = fake_quantize(x, q->first(qk), QuantRange::unsigned_act, q->tape);
            rhs = fake_quantize(x, q->second(qk), QuantRange::unsigned_act, q->tape);
        }
        Tensor probs({n, tok * tok});
        for (std::size_t r = 0; r < n; ++r) {
            const double* a = lhs.storage().data() + r * tok * dh;
            const double* b = rhs.storage().data() + r * tok * dh;
            double* p = probs.storage().data() + r * tok * tok;
            for (std::size_t i = 0; i < tok; ++i) {
                double mx = -INFINITY;
                for (std::size_t k = 0; k < tok; ++k) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) s += a[i * dh + e] * b[k * dh + e];
                    p[i * tok + k] = s * inv;
                    mx = std::max(mx, p[i * tok + k]);
                }
                double z = 0.0;
                for (std::size_t k = 0; k < tok; ++k) z += (p[i * tok + k] = std::exp(p[i * tok + k] - mx));
                for (std::size_t k = 0; k < tok; ++k) p[i * tok + k] /= z;
            }
        }
        Tensor probs_used = probs, values = x;
        if (q) {
            probs_used = fake_quantize(probs, q->first(av), QuantRange::unsigned_act, q->tape);
            values = fake_quantize(x, q->second(av), QuantRange::unsigned_act, q->tape);
        }
        Tensor y = x;
        for (std::size_t r = 0; r < n; ++r) {
            const double* p = probs_used.storage().data() + r * tok * tok;
            const double* v = values.storage().data() + r * tok * dh;
            double* o = y.storage().data() + r * tok * dh;
            for (std::size_t i = 0; i < tok; ++i)
                for (std::size_t k = 0; k < tok; ++k) {
                    const double w = p[i * tok + k];
                    for (std::size_t e = 0; e < dh; ++e) o[i * dh + e] += w * v[k * dh + e];
                }
        }
        if (c) {
            c->attn_quantized = q != nullptr;
            if (q) {
                c->qk_lhs = q->first(qk);
                c->qk_rhs = q->second(qk);
                c->av_lhs = q->first(av);
                c->av_rhs = q->second(av);
            }
            c->lhs = std::move(lhs);
            c->rhs = std::move(rhs);
            c->probs = std::move(probs);
            c->probs_used = std::move(probs_used);
            c->values_used = std::move(values);
        }
        return y;
    }

    Tensor attention_backward(std::size_t qk, std::size_t av, const BlockCache& c, const Tensor& dy,
                              Gradients& g) const {
        const std::size_t n = dy.rows(), tok = arch_.attn_tokens, dh = arch_.head_dim();
        const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
        Tensor dx = dy;  // residual path
        Tensor dprobs_used({n, tok * tok}), dvalues(dy.shape());
        for (std::size_t r = 0; r < n; ++r) {
            const double* d = dy.storage().data() + r * tok * dh;
            const double* p = c.probs_used.storage().data() + r * tok * tok;
            const double* v = c.values_used.storage().data() + r * tok * dh;
            double* dp = dprobs_used.storage().data() + r * tok * tok;
            double* dv = dvalues.storage().data() + r * tok * dh;
            for (std::size_t i = 0; i < tok; ++i)
                for (std::size_t k = 0; k < tok; ++k) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) {
                        s += d[i * dh + e] * v[k * dh + e];
                        dv[k * dh + e] += p[i * tok + k] * d[i * dh + e];
                    }
                    dp[i * tok + k] = s;
                }
        }
        Tensor dprobs = dprobs_used;
        if (c.attn_quantized) {
            dprobs = fake_quantize_backward(c.probs, c.av_lhs, QuantRange::unsigned_act, dprobs_used, g.first[av]);
            dvalues = fake_quantize_backward(c.input, c.av_rhs, QuantRange::unsigned_act, dvalues, g.second[av]);
        }
        Tensor dlhs(dy.shape()), drhs(dy.shape());
        for (std::size_t r = 0; r < n; ++r) {
            const double* p = c.probs.storage().data() + r * tok * tok;
            const double* dp = dprobs.storage().data() + r * tok * tok;
            const double* a = c.lhs.storage().data() + r * tok * dh;
            const double* b = c.rhs.storage().data() + r * tok * dh;
            double* da = dlhs.storage().data() + r * tok * dh;
            double* db = drhs.storage().data() + r * tok * dh;
            for (std::size_t i = 0; i < tok; ++i) {
                double dot = 0.0;
                for (std::size_t k = 0; k < tok; ++k) dot += dp[i * tok + k] * p[i * tok + k];
                for (std::size_t k = 0; k < tok; ++k) {
                    const double ds = p[i * tok + k] * (dp[i * tok + k] - dot) * inv;
                    for (std::size_t e = 0; e < dh; ++e) {
                        da[i * dh + e] += ds * b[k * dh + e];
                        db[k * dh + e] += ds * a[i * dh + e];
                    }
                }
            }
        }
        if (c.attn_quantized) {
            dlhs = fake_quantize_backward(c.input, c.qk_lhs, QuantRange::unsigned_act, dlhs, g.first[qk]);
            drhs = fake_quantize_backward(c.input, c.qk_rhs, QuantRange::unsigned_act, drhs, g.second[qk]);
        }
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dlhs[i] + drhs[i] + dvalues[i];
        return dx;
    }

    Architecture arch_;
    std::vector<Linear> linears_;
    std::vector<SlotInfo> slots_;
    std::vector<std::size_t> slot_linear_;
    std::vector<BlockKind> blocks_;
};

// ---------------------------------------------------------------------------
// Optimisation

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over independently stepped parameter groups. Each group keeps its own
/// step count, so groups that are updated on different iterations do not
/// influence each other's bias correction.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const noexcept { return cfg_; }
    void set_lr(double lr) noexcept { cfg_.lr = lr; }

    void update(std::size_t group, std::span<double> params, std::span<const double> grads) {
        if (params.size() != grads.size()) throw std::invalid_argument("Adam: gradient size mismatch");
        if (group >= state_.size()) state_.resize(group + 1);
        auto& st = state_[group];
        if (st.m.empty()) {
            st.m.assign(params.size(), 0.0);
            st.v.assign(params.size(), 0.0);
        }
        ++st.steps;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.steps));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.steps));
        for (std::size_t i = 0; i < params.size(); ++i) {
            st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * grads[i];
            st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
            const double mhat = st.m[i] / c1;
            const double vhat = st.v[i] / c2;
            params[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }

    std::size_t steps(std::size_t group) const { return group < state_.size() ? state_[group].steps : 0; }

private:
    struct Group {
        std::vector<double> m, v;
        std::size_t steps = 0;
    };
    AdamConfig cfg_;
    std::vector<Group> state_;
};

/// One ε-prediction batch: noisy inputs x_t, their timesteps and the noise
/// that produced them.
struct TrainBatch {
    Tensor noisy;
    std::vector<int> t;
    Tensor eps;
};

/// One Adam step on mean((ε̂ - ε)²). Returns the loss before the step.
inline double train_step(DenoiserNet& net, const TrainBatch& batch, Adam& opt) {
    ForwardTrace trace;
    const Tensor pred = net.forward(batch.noisy, batch.t, nullptr, &trace);
    const double loss = mean_squared_error(pred, batch.eps);
    if (!std::isfinite(loss)) throw std::runtime_error("train_step: non-finite loss");
    Tensor grad(pred.shape());
    const double k = 2.0 / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = k * (pred[i] - batch.eps[i]);
    Gradients g = net.backward(trace, grad);
    for (std::size_t li = 0; li < net.linears().size(); ++li) {
        Linear& l = net.linears()[li];
        opt.update(2 * li, l.weight.storage(), g.weight[li].storage());
        opt.update(2 * li + 1, l.bias, g.bias[li]);
    }
    return loss;
}

}  // namespace tmpq
