#pragma once

// End-to-end helpers shared by the command-line tool and the experiments:
// denoiser training, and the search-space / fitness wiring around a
// calibrated bank.

#include "tmpq/calibration.hpp"
#include "tmpq/cost.hpp"
#include "tmpq/diffusion.hpp"
#include "tmpq/grouping.hpp"
#include "tmpq/metrics.hpp"
#include "tmpq/nn.hpp"
#include "tmpq/search.hpp"

#include <cmath>
#include <vector>

namespace tmpq {

struct TrainOptions {
    std::size_t steps = 6000;
    std::size_t batch = 256;
    double lr = 1e-3;
    double final_lr = 1e-4;  // cosine decay target
    std::uint64_t seed = 0;
};

/// Trains the denoiser on the epsilon-prediction MSE. Returns the per-step
/// losses.
inline std::vector<double> train_denoiser(DenoiserNet& net, const NoiseSchedule& sched, const Tensor& data,
                                          const TrainOptions& opts) {
    if (data.rows() == 0 || data.cols() != net.arch().data_dim)
        throw std::invalid_argument("train_denoiser: dataset does not match the model input");
    if (opts.steps == 0 || opts.batch == 0) throw std::invalid_argument("train_denoiser: steps and batch must be positive");
    Rng rng(opts.seed);
    Adam adam(AdamConfig{opts.lr});
    std::vector<double> history;
    history.reserve(opts.steps);
    for (std::size_t i = 0; i < opts.steps; ++i) {
        const double progress = static_cast<double>(i) / static_cast<double>(opts.steps);
        adam.set_lr(opts.final_lr + 0.5 * (opts.lr - opts.final_lr) * (1.0 + std::cos(3.14159265358979323846 * progress)));
        history.push_back(train_step(net, make_train_batch(sched, data, opts.batch, rng), adam));
    }
    return history;
}

inline SearchSpace make_search_space(const DenoiserNet& net, const QuantizerBank& bank, int T, int H,
                                     GroupingKind kind) {
    return {build_groups(T, H, kind), bank.weight_bits(), bank.act_bits(), CostModel::from_net(net)};
}

/// Fitness closure for run_search: Fréchet distance of n quantized samples
/// drawn with the given seed. Reads net, bank and reference only.
struct FrechetFitness {
    const DenoiserNet* net;
    const NoiseSchedule* sched;
    const QuantizerBank* bank;
    const GaussianStats* reference;
    std::size_t samples;

    double operator()(const Candidate& c, std::uint64_t seed) const {
        return evaluate_fitness(c, *net, *sched, bank, *reference, samples, seed).frechet;
    }
};

}  // namespace tmpq
