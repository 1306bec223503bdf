#pragma once

// Budget-constrained evolutionary search over (timestep per group, per-slot
// bit-widths). Epoch 0 evaluates C random candidates; each later epoch adds
// m mutations and c crossovers of elite parents plus P - m - c fresh random
// candidates, and keeps the k best (lowest fitness) seen so far.

#include "tmpq/candidate.hpp"
#include "tmpq/cost.hpp"
#include "tmpq/grouping.hpp"
#include "tmpq/numerics.hpp"
#include "tmpq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tmpq {

struct SearchSpace {
    GroupingScheme grouping;
    std::vector<int> weight_bits;
    std::vector<int> act_bits;
    CostModel cost;

    std::size_t slots() const noexcept { return cost.slots(); }
    std::size_t steps() const noexcept { return static_cast<std::size_t>(grouping.H); }

    bool contains(const Candidate& c) const {
        if (c.timesteps.size() != steps() || c.policy.size() != slots()) return false;
        for (int h = 0; h < grouping.H; ++h)
            if (c.timesteps[h] < grouping.begin(h) || c.timesteps[h] >= grouping.end(h)) return false;
        for (std::size_t s = 0; s < slots(); ++s) {
            const auto& b = c.policy[s];
            if (std::find(act_bits.begin(), act_bits.end(), b.act_bits) == act_bits.end()) return false;
            if (cost.kinds[s] == SlotKind::attention) {
                if (b.weight_bits != b.act_bits) return false;
            } else if (std::find(weight_bits.begin(), weight_bits.end(), b.weight_bits) == weight_bits.end()) {
                return false;
            }
        }
        return true;
    }

    Policy min_policy() const {
        Policy p(slots());
        const int bw = *std::min_element(weight_bits.begin(), weight_bits.end());
        const int ba = *std::min_element(act_bits.begin(), act_bits.end());
        for (std::size_t s = 0; s < slots(); ++s) p[s] = {cost.kinds[s] == SlotKind::attention ? ba : bw, ba};
        return p;
    }

    Policy max_policy() const {
        Policy p(slots());
        const int bw = *std::max_element(weight_bits.begin(), weight_bits.end());
        const int ba = *std::max_element(act_bits.begin(), act_bits.end());
        for (std::size_t s = 0; s < slots(); ++s) p[s] = {cost.kinds[s] == SlotKind::attention ? ba : bw, ba};
        return p;
    }
};

inline BitOps candidate_bitops(const Candidate& c, const CostModel& model) {
    return overall_bitops(step_bitops(model, c.policy), c.timesteps.size());
}

inline bool within_budget(const Candidate& c, const CostModel& model, const Budget& budget) {
    return candidate_bitops(c, model) <= budget.limit;
}

inline void require_feasible(const SearchSpace& space, const Budget& budget) {
    if (!within_budget(space.min_policy(), space.steps(), space.cost, budget))
        throw std::invalid_argument("budget is infeasible: even the all-minimum policy exceeds it (" +
                                    budget.description + ")");
}

// ---------------------------------------------------------------------------
// Operators

inline int draw(const std::vector<int>& domain, Rng& rng) { return domain[rng.below(domain.size())]; }

inline std::vector<int> random_timesteps(const GroupingScheme& g, Rng& rng) {
    std::vector<int> out(static_cast<std::size_t>(g.H));
    for (int h = 0; h < g.H; ++h) out[h] = g.begin(h) + static_cast<int>(rng.below(static_cast<std::size_t>(g.width(h))));
    return out;
}

/// Uniform per-slot draw. Attention slots carry b_w = b_a, since both of
/// their operands are activations.
inline Policy random_policy(const SearchSpace& space, Rng& rng) {
    Policy p(space.slots());
    for (std::size_t s = 0; s < space.slots(); ++s) {
        const int bw = draw(space.weight_bits, rng);
        const int ba = draw(space.act_bits, rng);
        p[s] = {space.cost.kinds[s] == SlotKind::attention ? ba : bw, ba};
    }
    return p;
}

/// Lowers randomly chosen genes one notch at a time until the policy fits.
inline Policy repair_policy(const SearchSpace& space, const Budget& budget, Policy p, Rng& rng) {
    auto lower = [](const std::vector<int>& domain, int v) {
        int best = v;
        for (int d : domain)
            if (d < v && (best == v || d > best)) best = d;
        return best;
    };
    while (!within_budget(p, space.steps(), space.cost, budget)) {
        std::vector<std::pair<std::size_t, int>> genes;  // (slot, 0 = weight / 1 = act)
        for (std::size_t s = 0; s < space.slots(); ++s) {
            if (space.cost.kinds[s] == SlotKind::linear && lower(space.weight_bits, p[s].weight_bits) != p[s].weight_bits)
                genes.push_back({s, 0});
            if (lower(space.act_bits, p[s].act_bits) != p[s].act_bits) genes.push_back({s, 1});
        }
        if (genes.empty()) throw std::invalid_argument("repair_policy: budget is infeasible");
        const auto [s, which] = genes[rng.below(genes.size())];
        if (which == 0) {
            p[s].weight_bits = lower(space.weight_bits, p[s].weight_bits);
        } else {
            p[s].act_bits = lower(space.act_bits, p[s].act_bits);
            if (space.cost.kinds[s] == SlotKind::attention) p[s].weight_bits = p[s].act_bits;
        }
    }
    return p;
}

/// Rejection-sampled within-budget policy; after `max_tries` misses the last
/// draw is repaired by lowering bits.
inline Policy random_feasible_policy(const SearchSpace& space, const Budget& budget, Rng& rng,
                                     std::size_t max_tries = 64) {
    require_feasible(space, budget);
    Policy p;
    for (std::size_t i = 0; i < max_tries; ++i) {
        p = random_policy(space, rng);
        if (within_budget(p, space.steps(), space.cost, budget)) return p;
    }
    return repair_policy(space, budget, std::move(p), rng);
}

struct PolicyPool {
    std::vector<Policy> policies;
    std::vector<std::uint64_t> seeds;
    Budget budget;

    bool empty() const noexcept { return policies.empty(); }
};

inline Candidate random_candidate(const SearchSpace& space, const Budget& budget, Rng& rng,
                                  const PolicyPool* pool = nullptr) {
    Candidate c;
    c.timesteps = random_timesteps(space.grouping, rng);
    if (pool && !pool->empty())
        c.policy = pool->policies[rng.below(pool->policies.size())];
    else
        c.policy = random_feasible_policy(space, budget, rng);
    return c;
}

inline void require_compatible(const Candidate& a, const Candidate& b) {
    if (a.timesteps.size() != b.timesteps.size() || a.policy.size() != b.policy.size())
        throw std::invalid_argument("crossover: parents come from different search spaces");
}

/// Each timestep gene and each slot's (b_w, b_a) pair comes from either parent
/// with probability 1/2.
inline Candidate crossover(const Candidate& a, const Candidate& b, Rng& rng) {
    require_compatible(a, b);
    Candidate child = a;
    for (std::size_t h = 0; h < child.timesteps.size(); ++h)
        if (rng.uniform() < 0.5) child.timesteps[h] = b.timesteps[h];
    for (std::size_t s = 0; s < child.policy.size(); ++s)
        if (rng.uniform() < 0.5) child.policy[s] = b.policy[s];
    return child;
}

/// Resamples each gene independently with probability p (a resample may
/// redraw the same value).
inline Candidate mutate(const SearchSpace& space, const Candidate& a, double p, Rng& rng) {
    Candidate child = a;
    for (int h = 0; h < space.grouping.H; ++h)
        if (rng.uniform() < p)
            child.timesteps[h] = space.grouping.begin(h) +
                                 static_cast<int>(rng.below(static_cast<std::size_t>(space.grouping.width(h))));
    for (std::size_t s = 0; s < space.slots(); ++s) {
        auto& bits = child.policy[s];
        if (space.cost.kinds[s] == SlotKind::attention) {
            if (rng.uniform() < p) bits.act_bits = bits.weight_bits = draw(space.act_bits, rng);
        } else {
            if (rng.uniform() < p) bits.weight_bits = draw(space.weight_bits, rng);
            if (rng.uniform() < p) bits.act_bits = draw(space.act_bits, rng);
        }
    }
    return child;
}

// ---------------------------------------------------------------------------
// Offline pre-sampling

/// `count` distinct within-budget policies from independent seeded streams.
/// The result depends only on the seed list, never on the worker count.
inline PolicyPool presample_pool(const SearchSpace& space, const Budget& budget, std::size_t count,
                                 const std::vector<std::uint64_t>& seeds, std::size_t workers = 1) {
    if (count < 1) throw std::invalid_argument("presample_pool: count must be at least 1");
    if (seeds.empty()) throw std::invalid_argument("presample_pool: need at least one seed");
    require_feasible(space, budget);

    struct Stream {
        Rng rng;
        std::vector<Policy> out;
        std::set<Policy> seen;
        std::size_t attempts = 0;
    };
    const std::size_t quota = (count + seeds.size() - 1) / seeds.size();
    const std::size_t max_attempts = 50 * quota + 100;
    std::vector<Stream> streams;
    for (auto s : seeds) streams.push_back({Rng(s), {}, {}, 0});

    auto fill = [&](Stream& st, std::size_t target) {
        while (st.out.size() < target && st.attempts < max_attempts) {
            ++st.attempts;
            Policy p = random_feasible_policy(space, budget, st.rng);
            if (st.seen.insert(p).second) st.out.push_back(std::move(p));
        }
    };

    workers = std::max<std::size_t>(1, std::min(workers, streams.size()));
    if (workers == 1) {
        for (auto& st : streams) fill(st, quota);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < streams.size(); i += workers) fill(streams[i], quota);
            });
        for (auto& t : pool) t.join();
    }

    PolicyPool result{{}, seeds, budget};
    std::set<Policy> global;
    std::vector<std::size_t> taken(streams.size(), 0);
    auto take_round = [&]() {
        bool progress = false;
        for (std::size_t i = 0; i < streams.size() && result.policies.size() < count; ++i) {
            auto& st = streams[i];
            while (taken[i] < st.out.size()) {
                const Policy& p = st.out[taken[i]++];
                if (global.insert(p).second) {
                    result.policies.push_back(p);
                    progress = true;
                    break;
                }
            }
        }
        return progress;
    };
    while (result.policies.size() < count && take_round()) {
    }
    // Cross-stream duplicates can leave the pool short; extend streams in order.
    while (result.policies.size() < count) {
        bool progress = false;
        for (std::size_t i = 0; i < streams.size() && result.policies.size() < count; ++i) {
            auto& st = streams[i];
            fill(st, st.out.size() + 1);
            while (taken[i] < st.out.size()) {
                const Policy& p = st.out[taken[i]++];
                if (global.insert(p).second) {
                    result.policies.push_back(p);
                    progress = true;
                    break;
                }
            }
        }
        if (!progress) break;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Search loop

struct SearchConfig {
    std::size_t population = 50;  // P
    std::size_t mutations = 25;   // m
    std::size_t crossovers = 10;  // c
    double mutation_prob = 0.25;  // p
    std::size_t epochs = 20;
    std::size_t elite = 10;    // k
    std::size_t initial = 50;  // C
    std::uint64_t seed = 0;
    std::uint64_t eval_seed = 0;
    std::size_t workers = 1;
    std::size_t max_retries = 16;

    void validate() const {
        if (population == 0 || elite == 0 || initial == 0 || epochs == 0)
            throw std::invalid_argument("SearchConfig: sizes must be positive");
        if (mutations + crossovers > population)
            throw std::invalid_argument("SearchConfig: m + c must not exceed P");
        if (mutation_prob < 0.0 || mutation_prob > 1.0)
            throw std::invalid_argument("SearchConfig: mutation probability outside [0, 1]");
    }
};

enum class Origin { random, mutation, crossover };

inline const char* to_string(Origin o) {
    switch (o) {
    case Origin::mutation: return "mutation";
    case Origin::crossover: return "crossover";
    default: return "random";
    }
}

struct EvalRecord {
    std::size_t epoch = 0;
    std::size_t index = 0;
    Origin origin = Origin::random;
    Candidate candidate;
    BitOps overall_bitops = 0;
    std::optional<double> fitness;  // empty when evaluation failed
    std::uint64_t seed = 0;
    std::string error;
};

struct EliteEntry {
    Candidate candidate;
    double fitness = 0.0;
    std::size_t order = 0;  // position in the evaluation log
};

struct SearchState {
    std::size_t epoch = 0;
    std::vector<EliteEntry> elite;
    std::vector<EvalRecord> log;
    std::vector<double> best_per_epoch;
    std::size_t fitness_calls = 0;
};

/// Keeps the k lowest-fitness distinct candidates; ties go to the earlier
/// evaluation.
inline void merge_elite(std::vector<EliteEntry>& elite, std::vector<EliteEntry> incoming, std::size_t k) {
    elite.insert(elite.end(), std::make_move_iterator(incoming.begin()), std::make_move_iterator(incoming.end()));
    std::sort(elite.begin(), elite.end(), [](const EliteEntry& a, const EliteEntry& b) {
        return a.fitness != b.fitness ? a.fitness < b.fitness : a.order < b.order;
    });
    std::vector<EliteEntry> out;
    std::set<std::string> seen;
    for (auto& e : elite) {
        if (out.size() == k) break;
        if (seen.insert(candidate_key(e.candidate)).second) out.push_back(std::move(e));
    }
    elite = std::move(out);
}

/// Top-k of a finished log; equals the final elite of the run that wrote it.
inline std::vector<EliteEntry> elite_from_log(std::span<const EvalRecord> log, std::size_t k) {
    std::vector<EliteEntry> all;
    for (std::size_t i = 0; i < log.size(); ++i)
        if (log[i].fitness) all.push_back({log[i].candidate, *log[i].fitness, i});
    std::vector<EliteEntry> elite;
    merge_elite(elite, std::move(all), k);
    return elite;
}

/// Called after each epoch with the state and the index of the epoch's first
/// log record.
using EpochObserver = std::function<void(const SearchState&, std::size_t)>;

/// Runs the search. `fitness(candidate, seed)` must be deterministic and
/// safe to call concurrently; an exception marks that evaluation as failed.
/// Records in `resume` (a log from an interrupted run with the same
/// configuration) are reused instead of re-evaluated.
template <class Fitness>
SearchState run_search(const SearchConfig& config, const SearchSpace& space, const Budget& budget, Fitness&& fitness,
                       const PolicyPool* pool = nullptr, std::span<const EvalRecord> resume = {},
                       const EpochObserver& on_epoch = {}) {
    config.validate();
    require_feasible(space, budget);
    Rng rng(config.seed);
    SearchState state;

    std::map<std::pair<std::size_t, std::size_t>, const EvalRecord*> prior;
    for (const auto& r : resume) prior[{r.epoch, r.index}] = &r;

    struct Outcome {
        std::optional<double> value;
        std::string error;
    };
    std::map<std::string, Outcome> memo;

    auto fresh = [&]() { return random_candidate(space, budget, rng, pool); };

    auto evaluate_epoch = [&](std::size_t epoch, std::vector<std::pair<Candidate, Origin>> batch) {
        // Reuse prior log entries, then evaluate the remaining distinct keys.
        std::vector<std::string> keys;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            keys.push_back(candidate_key(batch[i].first));
            auto it = prior.find({epoch, i});
            if (it != prior.end()) {
                if (it->second->candidate != batch[i].first)
                    throw std::runtime_error("resume log does not match this search configuration");
                if (!memo.count(keys.back()))
                    memo[keys.back()] = Outcome{it->second->fitness, it->second->error};
            }
        }
        std::vector<std::size_t> todo;
        std::set<std::string> queued;
        for (std::size_t i = 0; i < batch.size(); ++i)
            if (!memo.count(keys[i]) && queued.insert(keys[i]).second) todo.push_back(i);

        std::vector<Outcome> results(todo.size());
        auto work = [&](std::size_t w, std::size_t stride) {
            for (std::size_t j = w; j < todo.size(); j += stride) {
                try {
                    results[j].value = fitness(static_cast<const Candidate&>(batch[todo[j]].first), config.eval_seed);
                } catch (const std::exception& e) {
                    results[j].error = e.what();
                }
            }
        };
        const std::size_t workers = std::max<std::size_t>(1, std::min(config.workers, todo.size()));
        if (workers == 1) {
            work(0, 1);
        } else {
            std::vector<std::thread> threads;
            for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work, w, workers);
            for (auto& t : threads) t.join();
        }
        state.fitness_calls += todo.size();
        for (std::size_t j = 0; j < todo.size(); ++j) memo[keys[todo[j]]] = results[j];

        std::vector<EliteEntry> incoming;
        const std::size_t first_record = state.log.size();
        for (std::size_t i = 0; i < batch.size(); ++i) {
            EvalRecord rec;
            rec.epoch = epoch;
            rec.index = i;
            rec.origin = batch[i].second;
            rec.candidate = batch[i].first;
            rec.overall_bitops = candidate_bitops(rec.candidate, space.cost);
            rec.seed = config.eval_seed;
            const Outcome& o = memo[keys[i]];
            rec.fitness = o.value;
            rec.error = o.error;
            if (rec.fitness && std::isfinite(*rec.fitness))
                incoming.push_back({rec.candidate, *rec.fitness, state.log.size()});
            state.log.push_back(std::move(rec));
        }
        merge_elite(state.elite, std::move(incoming), config.elite);
        state.epoch = epoch;
        state.best_per_epoch.push_back(state.elite.empty() ? INFINITY : state.elite.front().fitness);
        if (on_epoch) on_epoch(state, first_record);
    };

    std::vector<std::pair<Candidate, Origin>> batch;
    for (std::size_t i = 0; i < config.initial; ++i) batch.push_back({fresh(), Origin::random});
    evaluate_epoch(0, std::move(batch));

    for (std::size_t epoch = 1; epoch < config.epochs; ++epoch) {
        batch.clear();
        if (state.elite.empty()) {
            for (std::size_t i = 0; i < config.population; ++i) batch.push_back({fresh(), Origin::random});
        } else {
            const auto& elite = state.elite;
            for (std::size_t i = 0; i < config.mutations; ++i) {
                const Candidate& parent = elite[rng.below(elite.size())].candidate;
                std::optional<Candidate> child;
                for (std::size_t r = 0; r < config.max_retries && !child; ++r) {
                    Candidate c = mutate(space, parent, config.mutation_prob, rng);
                    if (within_budget(c, space.cost, budget)) child = std::move(c);
                }
                batch.push_back(child ? std::pair{std::move(*child), Origin::mutation} : std::pair{fresh(), Origin::random});
            }
            for (std::size_t i = 0; i < config.crossovers; ++i) {
                std::optional<Candidate> child;
                for (std::size_t r = 0; r < config.max_retries && !child; ++r) {
                    const Candidate& a = elite[rng.below(elite.size())].candidate;
                    const Candidate& b = elite[rng.below(elite.size())].candidate;
                    Candidate c = crossover(a, b, rng);
                    if (within_budget(c, space.cost, budget)) child = std::move(c);
                }
                batch.push_back(child ? std::pair{std::move(*child), Origin::crossover}
                                      : std::pair{fresh(), Origin::random});
            }
            for (std::size_t i = config.mutations + config.crossovers; i < config.population; ++i)
                batch.push_back({fresh(), Origin::random});
        }
        evaluate_epoch(epoch, std::move(batch));
    }
    return state;
}

struct RankedCandidate {
    Candidate candidate;
    double search_fitness = 0.0;
    double validation_fitness = 0.0;
};

/// Re-scores the elite with a separate fitness (typically more samples and a
/// fresh seed) and orders it by that score; ties keep the search order.
/// Guards against picking a candidate that only won on its evaluation noise.
template <class Fitness>
std::vector<RankedCandidate> rerank_elite(const std::vector<EliteEntry>& elite, Fitness&& validate,
                                          std::uint64_t seed) {
    std::vector<RankedCandidate> out;
    for (const auto& e : elite) out.push_back({e.candidate, e.fitness, validate(e.candidate, seed)});
    std::stable_sort(out.begin(), out.end(), [](const RankedCandidate& a, const RankedCandidate& b) {
        return a.validation_fitness < b.validation_fitness;
    });
    return out;
}

/// Pure random search with the same number of evaluations as `config`
/// implies; used as the baseline for the evolutionary operators.
template <class Fitness>
SearchState run_random_search(const SearchConfig& config, const SearchSpace& space, const Budget& budget,
                              Fitness&& fitness) {
    SearchConfig cfg = config;
    cfg.mutations = 0;
    cfg.crossovers = 0;
    return run_search(cfg, space, budget, std::forward<Fitness>(fitness));
}

}  // namespace tmpq
