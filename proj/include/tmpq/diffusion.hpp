#pragma once

// Noise schedule, forward marginal q(x_t | x_0), the DDPM posterior, and a
// deterministic (eta = 0) DDIM sampler over an arbitrary increasing timestep
// subsequence. Timesteps are 0-indexed; t = 0 is the data end and
// alpha_bar(-1) := 1 for the final hop.

#include "tmpq/nn.hpp"
#include "tmpq/numerics.hpp"
#include "tmpq/quant.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace tmpq {

class NoiseSchedule {
public:
    NoiseSchedule() : NoiseSchedule(1000) {}

    /// Linear beta schedule from beta_start to beta_end over T steps.
    explicit NoiseSchedule(int steps, double beta_start = 1e-4, double beta_end = 0.02) {
        if (steps < 1) throw std::invalid_argument("NoiseSchedule: need at least one step");
        std::vector<double> beta(static_cast<std::size_t>(steps));
        for (int t = 0; t < steps; ++t)
            beta[t] = steps == 1 ? beta_start
                                 : beta_start + (beta_end - beta_start) * static_cast<double>(t) / (steps - 1);
        *this = from_betas(std::move(beta));
    }

    static NoiseSchedule from_betas(std::vector<double> beta) {
        NoiseSchedule s(Uninit{});
        for (double b : beta)
            if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("NoiseSchedule: beta must lie in (0, 1)");
        s.beta_ = std::move(beta);
        s.alpha_.resize(s.beta_.size());
        s.alpha_bar_.resize(s.beta_.size());
        double acc = 1.0;
        for (std::size_t t = 0; t < s.beta_.size(); ++t) {
            s.alpha_[t] = 1.0 - s.beta_[t];
            acc *= s.alpha_[t];
            s.alpha_bar_[t] = acc;
        }
        return s;
    }

    int steps() const noexcept { return static_cast<int>(beta_.size()); }
    const std::vector<double>& beta() const noexcept { return beta_; }
    const std::vector<double>& alpha() const noexcept { return alpha_; }
    const std::vector<double>& alpha_bar() const noexcept { return alpha_bar_; }

    /// alpha_bar at t, with alpha_bar(-1) = 1.
    double alpha_bar_at(int t) const {
        if (t == -1) return 1.0;
        check(t);
        return alpha_bar_[static_cast<std::size_t>(t)];
    }

    void check(int t) const {
        if (t < 0 || t >= steps()) throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, T)");
    }

private:
    struct Uninit {};
    explicit NoiseSchedule(Uninit) {}

    std::vector<double> beta_, alpha_, alpha_bar_;
};

struct ForwardSample {
    Tensor noisy;
    Tensor eps;
};

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, eps ~ N(0, I).
inline ForwardSample forward_sample(const NoiseSchedule& sched, const Tensor& x0, int t, Rng& rng) {
    const double ab = sched.alpha_bar_at(t);
    if (t < 0) throw std::out_of_range("forward_sample: timestep must be in [0, T)");
    ForwardSample out{x0, rng.normal_tensor(x0.shape())};
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < x0.size(); ++i) out.noisy[i] = a * x0[i] + b * out.eps[i];
    return out;
}

/// Per-row timesteps version (rows of x0 are independent samples).
inline ForwardSample forward_sample(const NoiseSchedule& sched, const Tensor& x0, std::span<const int> t, Rng& rng) {
    if (t.size() != x0.rows()) throw std::invalid_argument("forward_sample: one timestep per row required");
    ForwardSample out{x0, rng.normal_tensor(x0.shape())};
    for (std::size_t r = 0; r < x0.rows(); ++r) {
        sched.check(t[r]);
        const double ab = sched.alpha_bar_at(t[r]);
        const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
        auto xr = out.noisy.row(r);
        const auto er = out.eps.row(r);
        for (std::size_t k = 0; k < xr.size(); ++k) xr[k] = a * xr[k] + b * er[k];
    }
    return out;
}

/// q(x_{t-1} | x_t, x_0) = N(coef_x0 * x0 + coef_xt * x_t, variance * I).
struct PosteriorParams {
    double coef_x0 = 0.0;
    double coef_xt = 0.0;
    double variance = 0.0;
};

inline PosteriorParams posterior_coefficients(double beta_t, double alpha_bar_t, double alpha_bar_prev) {
    const double alpha_t = 1.0 - beta_t;
    const double denom = 1.0 - alpha_bar_t;
    return {std::sqrt(alpha_bar_prev) * beta_t / denom, std::sqrt(alpha_t) * (1.0 - alpha_bar_prev) / denom,
            (1.0 - alpha_bar_prev) / denom * beta_t};
}

inline PosteriorParams posterior_params(const NoiseSchedule& sched, int t) {
    sched.check(t);
    if (t == 0) throw std::out_of_range("posterior_params: t must be >= 1");
    return posterior_coefficients(sched.beta()[t], sched.alpha_bar()[t], sched.alpha_bar()[t - 1]);
}

/// Deterministic DDIM update from t_cur to t_prev (t_prev = -1 is the data end).
inline Tensor ddim_step(const NoiseSchedule& sched, const Tensor& x_t, const Tensor& eps_hat, int t_cur, int t_prev) {
    if (t_prev > t_cur) throw std::invalid_argument("ddim_step: t_prev must not exceed t_cur");
    if (t_prev < -1) throw std::out_of_range("ddim_step: t_prev below -1");
    sched.check(t_cur);
    if (t_prev == t_cur) return x_t;
    if (x_t.shape() != eps_hat.shape()) throw std::invalid_argument("ddim_step: shape mismatch");
    const double ab_cur = sched.alpha_bar_at(t_cur);
    const double ab_prev = sched.alpha_bar_at(t_prev);
    const double s_cur = std::sqrt(1.0 - ab_cur), r_cur = std::sqrt(ab_cur);
    const double s_prev = std::sqrt(1.0 - ab_prev), r_prev = std::sqrt(ab_prev);
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        const double x0 = (x_t[i] - s_cur * eps_hat[i]) / r_cur;
        out[i] = r_prev * x0 + s_prev * eps_hat[i];
    }
    return out;
}

inline void check_subsequence(const NoiseSchedule& sched, std::span<const int> seq) {
    if (seq.empty()) throw std::invalid_argument("subsequence is empty");
    for (std::size_t i = 0; i < seq.size(); ++i) {
        sched.check(seq[i]);
        if (i > 0 && seq[i] <= seq[i - 1]) throw std::invalid_argument("subsequence must be strictly increasing");
    }
}

/// Runs DDIM from `x_init` at the largest timestep of `seq` down to the data
/// end. `eps_fn(x, t)` predicts the noise; it is called once per timestep.
/// `observer(x, t)`, when given, sees the state before each model call.
template <class EpsFn, class Observer>
Tensor ddim_sample(const NoiseSchedule& sched, std::span<const int> seq, Tensor x_init, EpsFn&& eps_fn,
                   Observer&& observer) {
    check_subsequence(sched, seq);
    Tensor x = std::move(x_init);
    for (std::size_t i = seq.size(); i-- > 0;) {
        const int t_cur = seq[i];
        const int t_prev = i > 0 ? seq[i - 1] : -1;
        observer(static_cast<const Tensor&>(x), t_cur);
        const Tensor eps = eps_fn(static_cast<const Tensor&>(x), t_cur);
        x = ddim_step(sched, x, eps, t_cur, t_prev);
    }
    return x;
}

template <class EpsFn>
Tensor ddim_sample(const NoiseSchedule& sched, std::span<const int> seq, Tensor x_init, EpsFn&& eps_fn) {
    return ddim_sample(sched, seq, std::move(x_init), std::forward<EpsFn>(eps_fn), [](const Tensor&, int) {});
}

struct SamplerConfig {
    double eta = 0.0;  // only the deterministic sampler is provided
    std::vector<int> subsequence;
};

/// Draws n samples from `net` along the configured subsequence. The same
/// quantization policy applies at every step; pass nullptr for full precision.
inline Tensor sample(const DenoiserNet& net, const NoiseSchedule& sched, const SamplerConfig& config,
                     const QuantContext* quant, std::size_t n, Rng& rng) {
    if (config.eta != 0.0) throw std::invalid_argument("sample: only eta = 0 is supported");
    check_subsequence(sched, config.subsequence);
    const std::size_t d = net.arch().data_dim;
    Tensor x_init = rng.normal_tensor({n, d});
    if (n == 0) return x_init;
    if (!quant) {
        return ddim_sample(sched, config.subsequence, std::move(x_init),
                           [&](const Tensor& x, int t) { return net.forward(x, t); });
    }
    // Weights do not depend on the input; quantize them once per run.
    const DenoiserNet prepared = quant->quantize_weights ? net.with_quantized_weights(*quant) : net;
    QuantContext acts = *quant;
    acts.quantize_weights = false;
    return ddim_sample(sched, config.subsequence, std::move(x_init),
                       [&](const Tensor& x, int t) { return prepared.forward(x, t, &acts); });
}

/// DDIM steps evenly spaced over [0, T): {0, T/H, 2T/H, ...}.
inline std::vector<int> uniform_subsequence(int T, int steps) {
    if (steps < 1 || steps > T) throw std::invalid_argument("uniform_subsequence: steps out of range");
    std::vector<int> out;
    for (int i = 0; i < steps; ++i)
        out.push_back(static_cast<int>(static_cast<long long>(i) * T / steps));
    return out;
}

inline std::vector<int> full_subsequence(int T) {
    std::vector<int> out(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) out[t] = t;
    return out;
}

// ---------------------------------------------------------------------------
// Training data and batches

/// Mixture of `components` isotropic Gaussians evenly spaced on a circle.
inline Tensor ring_mixture(std::size_t n, Rng& rng, std::size_t components = 8, double radius = 4.0,
                           double sigma = 0.1) {
    Tensor out({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = rng.below(components);
        const double angle = 2.0 * 3.14159265358979323846 * static_cast<double>(c) / static_cast<double>(components);
        out(i, 0) = radius * std::cos(angle) + sigma * rng.normal();
        out(i, 1) = radius * std::sin(angle) + sigma * rng.normal();
    }
    return out;
}

/// Random minibatch of rows from `data`, uniform timesteps, forward-noised.
inline TrainBatch make_train_batch(const NoiseSchedule& sched, const Tensor& data, std::size_t batch, Rng& rng) {
    Tensor x0({batch, data.cols()});
    std::vector<int> t(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        const auto src = data.row(rng.below(data.rows()));
        std::copy(src.begin(), src.end(), x0.row(i).begin());
        t[i] = static_cast<int>(rng.below(static_cast<std::size_t>(sched.steps())));
    }
    auto fs = forward_sample(sched, x0, std::span<const int>(t), rng);
    return {std::move(fs.noisy), std::move(t), std::move(fs.eps)};
}

/// Every DDIM state along `seq`, indexed by position: states[i] is x at
/// seq[i] before the model call there, and states.back() is the final output.
template <class EpsFn>
std::vector<Tensor> ddim_trajectory(const NoiseSchedule& sched, std::span<const int> seq, Tensor x_init,
                                    EpsFn&& eps_fn) {
    std::vector<Tensor> states(seq.size());
    std::size_t pos = seq.size();
    Tensor out = ddim_sample(sched, seq, std::move(x_init), std::forward<EpsFn>(eps_fn),
                             [&](const Tensor& x, int) { states[--pos] = x; });
    states.push_back(std::move(out));
    return states;
}

}  // namespace tmpq
