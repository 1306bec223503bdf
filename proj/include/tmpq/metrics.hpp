#pragma once

// Fréchet distance between Gaussian fits, and the search fitness built on it.

#include "tmpq/candidate.hpp"
#include "tmpq/diffusion.hpp"
#include "tmpq/nn.hpp"
#include "tmpq/numerics.hpp"
#include "tmpq/quant.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace tmpq {

/// ||μ_r - μ_g||² + Tr(Σ_r + Σ_g - 2 (Σ_r Σ_g)^½).
///
/// Tr((Σ_r Σ_g)^½) is evaluated as Tr(sqrt(sqrt(Σ_r) Σ_g sqrt(Σ_r))): the
/// inner product is symmetric PSD, so its root is real, and it has the same
/// eigenvalues as Σ_r Σ_g. Results below zero (round-off) are clamped.
inline double frechet_distance(const GaussianStats& r, const GaussianStats& g) {
    if (r.dim() != g.dim() || r.cov.rows() != r.dim() || g.cov.rows() != g.dim())
        throw std::invalid_argument("frechet_distance: dimension mismatch");
    double mean_term = 0.0;
    for (std::size_t i = 0; i < r.dim(); ++i) {
        const double d = r.mean[i] - g.mean[i];
        mean_term += d * d;
    }
    const Tensor root_r = psd_sqrt(r.cov);
    Tensor inner = matmul(matmul(root_r, g.cov), root_r);
    for (std::size_t i = 0; i < inner.rows(); ++i)
        for (std::size_t j = i + 1; j < inner.rows(); ++j) inner(i, j) = inner(j, i) = 0.5 * (inner(i, j) + inner(j, i));
    const double cross = trace(psd_sqrt(inner));
    const double value = mean_term + trace(r.cov) + trace(g.cov) - 2.0 * cross;
    return value < 0.0 ? 0.0 : value;
}

struct FitnessReport {
    double frechet = 0.0;
    std::size_t n_samples = 0;
    std::uint64_t seed = 0;
};

/// Samples n points with the candidate's timesteps and policy and scores them
/// against the reference statistics. `bank` may be null for full precision.
inline FitnessReport evaluate_fitness(const Candidate& candidate, const DenoiserNet& net, const NoiseSchedule& sched,
                                      const QuantizerBank* bank, const GaussianStats& reference, std::size_t n,
                                      std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("evaluate_fitness: need at least two samples");
    Rng rng(seed);
    SamplerConfig cfg{0.0, candidate.timesteps};
    Tensor samples;
    if (bank) {
        if (!bank->fully_calibrated()) throw std::logic_error("evaluate_fitness: bank is not calibrated");
        const QuantContext ctx(*bank, candidate.policy);
        samples = sample(net, sched, cfg, &ctx, n, rng);
    } else {
        samples = sample(net, sched, cfg, nullptr, n, rng);
    }
    if (!samples.all_finite()) throw std::runtime_error("evaluate_fitness: sampler produced non-finite values");
    return {frechet_distance(reference, gaussian_stats(samples)), n, seed};
}

}  // namespace tmpq
