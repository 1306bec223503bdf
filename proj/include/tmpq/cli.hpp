#pragma once

// Command implementations behind the `tmpq` tool. Every command reads one
// JSON run configuration, derives its seeds from the root seed, and stamps
// its outputs with a hash of the configuration sections it depends on.

#include "tmpq/io.hpp"
#include "tmpq/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace tmpq::cli {

using io::InputError;
using io::json;
namespace fs = std::filesystem;

enum ExitCode : int { ok = 0, internal_error = 1, bad_input = 2 };

// Seed streams derived from the root seed, one per consumer.
enum class Stream : std::uint64_t {
    init = 1,
    train = 2,
    calibration_set = 3,
    calibration = 4,
    search = 5,
    evaluation = 6,
    sample = 7,
    rerank = 8,
    synthetic_data = 9,
    pool = 100,
};

struct RunConfig {
    std::uint64_t seed = 0;
    fs::path out = "runs/default";
    fs::path dataset;            // empty: synthesize the ring mixture
    std::size_t synthetic_points = 8192;
    Architecture model;
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    TrainOptions train;
    std::vector<int> weight_bits{5, 6, 7, 8};
    std::vector<int> act_bits{5, 6, 7, 8};
    std::size_t calibration_samples = 256;
    CalibrationOptions calibration;
    int H = 5;
    GroupingKind grouping = GroupingKind::non_uniform;
    // Budget: either an explicit BitOPs limit or uniform W/A bits at N steps.
    std::optional<BitOps> budget_bitops;
    int budget_weight_bits = 6;
    int budget_act_bits = 6;
    int budget_steps = 0;  // 0: use H
    SearchConfig search;
    std::size_t fitness_samples = 1024;
    std::size_t rerank_samples = 0;  // 0 disables re-ranking of the final elite
    std::size_t pool_size = 0;       // 0: draw random policies on the fly
    std::vector<std::uint64_t> pool_seeds;
    std::size_t sample_count = 1000;
    std::size_t workers = 1;

    std::uint64_t derived(Stream s, std::uint64_t k = 0) const {
        return derive_seed(seed, static_cast<std::uint64_t>(s) + k);
    }
    std::size_t budget_step_count() const { return budget_steps > 0 ? static_cast<std::size_t>(budget_steps) : H; }
};

inline json to_json(const RunConfig& c) {
    json budget = c.budget_bitops ? json{{"bitops", *c.budget_bitops}}
                                   : json{{"weight_bits", c.budget_weight_bits},
                                          {"act_bits", c.budget_act_bits},
                                          {"steps", c.budget_step_count()}};
    return {{"seed", c.seed},
            {"out", c.out.string()},
            {"dataset", c.dataset.string()},
            {"synthetic_points", c.synthetic_points},
            {"model", io::to_json(c.model)},
            {"schedule", {{"T", c.T}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}}},
            {"train",
             {{"steps", c.train.steps}, {"batch", c.train.batch}, {"lr", c.train.lr}, {"final_lr", c.train.final_lr}}},
            {"quant",
             {{"weight_bits", c.weight_bits},
              {"act_bits", c.act_bits},
              {"calibration_samples", c.calibration_samples},
              {"iterations", c.calibration.iterations},
              {"batch", c.calibration.batch},
              {"lr", c.calibration.lr}}},
            {"grouping", {{"H", c.H}, {"kind", to_string(c.grouping)}}},
            {"budget", budget},
            {"search",
             {{"population", c.search.population},
              {"mutations", c.search.mutations},
              {"crossovers", c.search.crossovers},
              {"mutation_prob", c.search.mutation_prob},
              {"epochs", c.search.epochs},
              {"elite", c.search.elite},
              {"initial", c.search.initial},
              {"max_retries", c.search.max_retries},
              {"fitness_samples", c.fitness_samples},
              {"rerank_samples", c.rerank_samples},
              {"pool_size", c.pool_size},
              {"pool_seeds", c.pool_seeds}}},
            {"sample", {{"n", c.sample_count}}}};
}

inline void check_bits(const std::vector<int>& bits, const char* what) {
    if (bits.empty()) throw InputError(std::string(what) + " must not be empty");
    for (int b : bits)
        if (b < 2 || b > 16) throw InputError(std::string(what) + ": bit-widths must lie in [2, 16]");
}

/// Parses a configuration document. Missing sections take their defaults.
/// `base_dir` resolves a relative dataset path.
inline RunConfig config_from_json(const json& j, const fs::path& base_dir = {}) {
    using io::field_or;
    if (!j.is_object()) throw InputError("configuration must be a JSON object");
    RunConfig c;
    c.seed = field_or<std::uint64_t>(j, "seed", c.seed);
    c.out = field_or<std::string>(j, "out", c.out.string());
    const auto dataset = field_or<std::string>(j, "dataset", "");
    if (!dataset.empty()) {
        c.dataset = fs::path(dataset).is_absolute() || base_dir.empty() ? fs::path(dataset) : base_dir / dataset;
        if (!fs::exists(c.dataset)) throw InputError("dataset not found: " + c.dataset.string());
    }
    c.synthetic_points = field_or<std::size_t>(j, "synthetic_points", c.synthetic_points);
    c.model = io::architecture_from_json(field_or<json>(j, "model", json::object()));

    const json sched = field_or<json>(j, "schedule", json::object());
    c.T = field_or<int>(sched, "T", c.T);
    c.beta_start = field_or<double>(sched, "beta_start", c.beta_start);
    c.beta_end = field_or<double>(sched, "beta_end", c.beta_end);
    if (c.T < 2) throw InputError("schedule.T must be at least 2");
    if (!(c.beta_start > 0.0 && c.beta_start <= c.beta_end && c.beta_end < 1.0))
        throw InputError("schedule: need 0 < beta_start <= beta_end < 1");

    const json train = field_or<json>(j, "train", json::object());
    c.train.steps = field_or<std::size_t>(train, "steps", c.train.steps);
    c.train.batch = field_or<std::size_t>(train, "batch", c.train.batch);
    c.train.lr = field_or<double>(train, "lr", c.train.lr);
    c.train.final_lr = field_or<double>(train, "final_lr", c.train.final_lr);
    if (c.train.steps == 0 || c.train.batch == 0) throw InputError("train.steps and train.batch must be positive");

    const json quant = field_or<json>(j, "quant", json::object());
    c.weight_bits = field_or<std::vector<int>>(quant, "weight_bits", c.weight_bits);
    c.act_bits = field_or<std::vector<int>>(quant, "act_bits", c.act_bits);
    check_bits(c.weight_bits, "quant.weight_bits");
    check_bits(c.act_bits, "quant.act_bits");
    std::sort(c.weight_bits.begin(), c.weight_bits.end());
    std::sort(c.act_bits.begin(), c.act_bits.end());
    c.weight_bits.erase(std::unique(c.weight_bits.begin(), c.weight_bits.end()), c.weight_bits.end());
    c.act_bits.erase(std::unique(c.act_bits.begin(), c.act_bits.end()), c.act_bits.end());
    c.calibration_samples = field_or<std::size_t>(quant, "calibration_samples", c.calibration_samples);
    c.calibration.iterations = field_or<std::size_t>(quant, "iterations", c.calibration.iterations);
    c.calibration.batch = field_or<std::size_t>(quant, "batch", c.calibration.batch);
    c.calibration.lr = field_or<double>(quant, "lr", c.calibration.lr);
    if (c.calibration_samples == 0 || c.calibration.batch == 0)
        throw InputError("quant.calibration_samples and quant.batch must be positive");

    const json grouping = field_or<json>(j, "grouping", json::object());
    c.H = field_or<int>(grouping, "H", c.H);
    if (c.H < 2) throw InputError("grouping.H must be at least 2");
    if (c.H > c.T) throw InputError("grouping.H must not exceed schedule.T");
    try {
        c.grouping = grouping_kind_from_string(field_or<std::string>(grouping, "kind", to_string(c.grouping)));
    } catch (const std::invalid_argument& e) {
        throw InputError(std::string("grouping.kind: ") + e.what());
    }

    const json budget = field_or<json>(j, "budget", json::object());
    if (budget.contains("bitops")) c.budget_bitops = io::field<BitOps>(budget, "bitops");
    c.budget_weight_bits = field_or<int>(budget, "weight_bits", c.budget_weight_bits);
    c.budget_act_bits = field_or<int>(budget, "act_bits", c.budget_act_bits);
    c.budget_steps = field_or<int>(budget, "steps", c.budget_steps);

    const json search = field_or<json>(j, "search", json::object());
    auto& s = c.search;
    s.population = field_or<std::size_t>(search, "population", s.population);
    s.mutations = field_or<std::size_t>(search, "mutations", s.mutations);
    s.crossovers = field_or<std::size_t>(search, "crossovers", s.crossovers);
    s.mutation_prob = field_or<double>(search, "mutation_prob", s.mutation_prob);
    s.epochs = field_or<std::size_t>(search, "epochs", s.epochs);
    s.elite = field_or<std::size_t>(search, "elite", s.elite);
    s.initial = field_or<std::size_t>(search, "initial", s.population);
    s.max_retries = field_or<std::size_t>(search, "max_retries", s.max_retries);
    c.fitness_samples = field_or<std::size_t>(search, "fitness_samples", c.fitness_samples);
    c.rerank_samples = field_or<std::size_t>(search, "rerank_samples", c.rerank_samples);
    c.pool_size = field_or<std::size_t>(search, "pool_size", c.pool_size);
    c.pool_seeds = field_or<std::vector<std::uint64_t>>(search, "pool_seeds", {});
    try {
        s.validate();
    } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
    }
    if (c.fitness_samples < 2) throw InputError("search.fitness_samples must be at least 2");
    if (c.rerank_samples == 1) throw InputError("search.rerank_samples must be 0 or at least 2");
    if (c.pool_seeds.empty())
        for (std::uint64_t k = 0; k < 8; ++k) c.pool_seeds.push_back(c.derived(Stream::pool, k));
    s.seed = c.derived(Stream::search);
    s.eval_seed = c.derived(Stream::evaluation);

    c.sample_count = field_or<std::size_t>(field_or<json>(j, "sample", json::object()), "n", c.sample_count);
    c.calibration.seed = c.derived(Stream::calibration);
    c.train.seed = c.derived(Stream::train);
    return c;
}

inline RunConfig load_config(const fs::path& path) {
    return config_from_json(io::read_json(path), path.parent_path());
}

// ---------------------------------------------------------------------------
// Stage hashes. Each artifact records the hash of the configuration it
// depends on, so a later stage can refuse inputs from another run.

inline std::string dataset_fingerprint(const RunConfig& c) {
    if (c.dataset.empty()) return "synthetic:" + std::to_string(c.synthetic_points);
    return io::hex64(io::fnv1a64(io::read_file(c.dataset)));
}

inline std::string train_hash(const RunConfig& c) {
    const json j = to_json(c);
    return io::hash_json({{"seed", c.seed},
                          {"data", dataset_fingerprint(c)},
                          {"model", j["model"]},
                          {"schedule", j["schedule"]},
                          {"train", j["train"]}});
}

inline std::string calibration_hash(const RunConfig& c) {
    return io::hash_json({{"train", train_hash(c)}, {"quant", to_json(c)["quant"]}});
}

inline std::string pool_hash(const RunConfig& c) {
    const json j = to_json(c);
    return io::hash_json({{"model", j["model"]},
                          {"weight_bits", c.weight_bits},
                          {"act_bits", c.act_bits},
                          {"schedule", j["schedule"]},
                          {"grouping", j["grouping"]},
                          {"budget", j["budget"]},
                          {"pool_size", c.pool_size},
                          {"pool_seeds", c.pool_seeds}});
}

inline std::string search_hash(const RunConfig& c) {
    const json j = to_json(c);
    json s = j["search"];
    return io::hash_json({{"calibration", calibration_hash(c)},
                          {"pool", c.pool_size ? pool_hash(c) : std::string()},
                          {"grouping", j["grouping"]},
                          {"budget", j["budget"]},
                          {"search", s}});
}

// ---------------------------------------------------------------------------
// Artifact paths and loaders

struct Paths {
    fs::path out;
    fs::path checkpoint() const { return out / "checkpoint.json"; }
    fs::path train_loss() const { return out / "train_loss.csv"; }
    fs::path bank() const { return out / "bank.json"; }
    fs::path pool() const { return out / "pool.json"; }
    fs::path log() const { return out / "search_log.jsonl"; }
    fs::path elite() const { return out / "elite.json"; }
    fs::path samples() const { return out / "samples.csv"; }
    fs::path report() const { return out / "report.md"; }
};

inline Tensor load_dataset(const RunConfig& c) {
    if (c.dataset.empty()) {
        Rng rng(c.derived(Stream::synthetic_data));
        return ring_mixture(c.synthetic_points, rng);
    }
    Tensor data = io::tensor_from_csv(io::read_file(c.dataset), c.model.data_dim);
    if (data.rows() < 2) throw InputError("dataset needs at least two rows: " + c.dataset.string());
    if (!data.all_finite()) throw InputError("dataset contains non-finite values");
    return data;
}

inline NoiseSchedule make_schedule(const RunConfig& c) { return NoiseSchedule(c.T, c.beta_start, c.beta_end); }

inline void expect_hash(const json& artifact, const std::string& expected, const fs::path& path) {
    const auto got = io::field_or<std::string>(artifact, "config_hash", "");
    if (got != expected)
        throw InputError(path.string() + " was produced by a different configuration (hash " + got + ", expected " +
                         expected + ")");
}

inline DenoiserNet load_checkpoint(const RunConfig& c, const fs::path& path) {
    if (!fs::exists(path)) throw InputError("checkpoint not found: " + path.string() + " (run `train` first)");
    const json j = io::read_json(path);
    expect_hash(j, train_hash(c), path);
    DenoiserNet net = io::checkpoint_from_json(io::field<json>(j, "model"));
    if (!(net.arch() == c.model)) throw InputError("checkpoint architecture does not match the configuration");
    return net;
}

inline QuantizerBank load_bank(const RunConfig& c, const DenoiserNet& net, const fs::path& path) {
    if (!fs::exists(path)) throw InputError("bank not found: " + path.string() + " (run `calibrate` first)");
    const json j = io::read_json(path);
    expect_hash(j, calibration_hash(c), path);
    QuantizerBank bank = io::bank_from_json(io::field<json>(j, "bank"));
    if (bank.model_signature != net.signature() || bank.slots().size() != net.slot_count())
        throw InputError("bank does not match the checkpoint architecture");
    if (!bank.fully_calibrated()) throw InputError("bank is not fully calibrated");
    return bank;
}

inline Budget make_budget(const RunConfig& c, const CostModel& model) {
    if (c.budget_bitops) return {*c.budget_bitops, "explicit " + std::to_string(*c.budget_bitops) + " BitOPs"};
    return uniform_budget(model, c.budget_weight_bits, c.budget_act_bits, c.budget_step_count());
}

inline SearchSpace make_space(const RunConfig& c, const CostModel& model) {
    return {build_groups(c.T, c.H, c.grouping), c.weight_bits, c.act_bits, model};
}

/// Gaussian fit of the dataset: the "real" statistics fitness compares to.
inline GaussianStats reference_stats(const RunConfig& c) { return gaussian_stats(load_dataset(c)); }

// ---------------------------------------------------------------------------
// Formatting

inline std::string format_bitops(BitOps v) {
    char buf[32];
    const double d = static_cast<double>(v);
    if (d >= 1e12) std::snprintf(buf, sizeof buf, "%.2fT", d / 1e12);
    else if (d >= 1e9) std::snprintf(buf, sizeof buf, "%.2fG", d / 1e9);
    else if (d >= 1e6) std::snprintf(buf, sizeof buf, "%.2fM", d / 1e6);
    else if (d >= 1e3) std::snprintf(buf, sizeof buf, "%.2fK", d / 1e3);
    else std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string bits_histogram(const Policy& p, bool weights) {
    std::map<int, int> h;
    for (const auto& b : p) ++h[weights ? b.weight_bits : b.act_bits];
    std::string s;
    for (const auto& [bits, n] : h) s += (s.empty() ? "" : " ") + std::to_string(bits) + ":" + std::to_string(n);
    return s;
}

inline std::string join(const std::vector<int>& v) {
    std::string s;
    for (int x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
    return s;
}

// ---------------------------------------------------------------------------
// Commands. Each returns normally on success and throws InputError for bad
// input; the entry point maps exceptions to exit codes.

inline void cmd_make_data(const RunConfig& c, const fs::path& path, std::size_t n, std::ostream& log) {
    Rng rng(c.derived(Stream::synthetic_data));
    io::write_file(path, io::tensor_to_csv(ring_mixture(n, rng), {"x", "y"}));
    log << "wrote " << n << " points to " << path.string() << "\n";
}

inline void cmd_train(const RunConfig& c, std::ostream& log) {
    const Paths p{c.out};
    const Tensor data = load_dataset(c);
    const NoiseSchedule sched = make_schedule(c);
    DenoiserNet net(c.model, c.derived(Stream::init));
    const std::vector<double> history = train_denoiser(net, sched, data, c.train);

    const std::size_t window = std::min<std::size_t>(100, history.size());
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
        head += history[i] / window;
        tail += history[history.size() - 1 - i] / window;
    }
    json j = {{"kind", "checkpoint"},
              {"config_hash", train_hash(c)},
              {"seed", c.seed},
              {"steps", c.train.steps},
              {"initial_loss", head},
              {"final_loss", tail},
              {"model", io::checkpoint_to_json(net)},
              {"loss_history", history}};
    io::write_json(p.checkpoint(), j);
    Tensor curve({history.size(), 2});
    for (std::size_t i = 0; i < history.size(); ++i) {
        curve(i, 0) = static_cast<double>(i);
        curve(i, 1) = history[i];
    }
    io::write_file(p.train_loss(), io::tensor_to_csv(curve, {"step", "loss"}));
    log << "trained " << net.parameter_count() << " parameters for " << c.train.steps << " steps; loss " << head
        << " -> " << tail << "\n"
        << "wrote " << p.checkpoint().string() << "\n";
}

inline void cmd_calibrate(const RunConfig& c, std::ostream& log) {
    const Paths p{c.out};
    const DenoiserNet net = load_checkpoint(c, p.checkpoint());
    const Tensor data = load_dataset(c);
    const NoiseSchedule sched = make_schedule(c);
    Rng rng(c.derived(Stream::calibration_set));
    const CalibrationSet calib = build_calibration_set(sched, data, c.calibration_samples, rng);
    QuantizerBank bank = net.make_bank(c.weight_bits, c.act_bits);
    bank.model_signature = net.signature();
    const auto reports = calibrate_all(net, bank, calib, c.calibration);

    json blocks = json::array();
    for (const auto& r : reports) {
        blocks.push_back(io::to_json(r));
        for (const auto& s : r.settings) {
            if (!std::isfinite(s.final_loss))
                throw std::runtime_error("calibration produced a non-finite loss in block " + std::to_string(r.block));
            log << "block " << r.block << " W" << s.bits.weight_bits << "A" << s.bits.act_bits << ": loss "
                << s.init_loss << " -> " << s.final_loss << (s.reverted ? " (kept min-max init)" : "") << "\n";
        }
    }
    io::write_json(p.bank(), {{"kind", "bank"},
                              {"config_hash", calibration_hash(c)},
                              {"checkpoint_hash", train_hash(c)},
                              {"calibration_seed", c.calibration.seed},
                              {"bank", io::bank_to_json(bank)},
                              {"reports", blocks}});
    log << "wrote " << p.bank().string() << "\n";
}

inline void cmd_presample(const RunConfig& c, std::ostream& log) {
    const Paths p{c.out};
    if (c.pool_size == 0) throw InputError("search.pool_size must be positive to presample");
    const DenoiserNet shape(c.model, 0);
    const CostModel model = CostModel::from_net(shape);
    const Budget budget = make_budget(c, model);
    PolicyPool pool;
    try {
        pool = presample_pool(make_space(c, model), budget, c.pool_size, c.pool_seeds, c.workers);
    } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
    }
    json j = io::pool_to_json(pool);
    j["kind"] = "pool";
    j["config_hash"] = pool_hash(c);
    io::write_json(p.pool(), j);
    log << "pooled " << pool.policies.size() << " distinct policies within " << budget.description << "\n";
    if (pool.policies.size() < c.pool_size)
        log << "warning: only " << pool.policies.size() << " distinct policies exist under this budget\n";
}

inline json elite_json(const std::vector<RankedCandidate>& ranked, const CostModel& model, std::size_t steps) {
    json out = json::array();
    for (const auto& r : ranked) {
        const BitOps step = step_bitops(model, r.candidate.policy);
        json e = io::to_json(r.candidate);
        e["fitness"] = r.search_fitness;
        e["validation_fitness"] = r.validation_fitness;
        e["step_bitops"] = step;
        e["overall_bitops"] = overall_bitops(step, steps);
        e["cost"] = io::cost_breakdown(r.candidate, model);
        out.push_back(e);
    }
    return out;
}

inline void print_summary(const std::vector<RankedCandidate>& ranked, const CostModel& model, const Budget& budget,
                          std::ostream& log) {
    log << "budget: " << budget.description << " = " << format_bitops(budget.limit) << " BitOPs\n";
    char line[512];
    std::snprintf(line, sizeof line, "%-4s  %-28s  %-18s  %-18s  %-14s  %s\n", "rank", "steps", "weight bits",
                  "act bits", "overall BitOPs", "fitness");
    log << line;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        const auto& c = ranked[i].candidate;
        std::snprintf(line, sizeof line, "%-4zu  %-28s  %-18s  %-18s  %-14s  %.6f\n", i + 1, join(c.timesteps).c_str(),
                      bits_histogram(c.policy, true).c_str(), bits_histogram(c.policy, false).c_str(),
                      format_bitops(candidate_bitops(c, model)).c_str(), ranked[i].validation_fitness);
        log << line;
    }
}

struct SearchOptions {
    bool resume = false;
};

inline void cmd_search(const RunConfig& c, const SearchOptions& opts, std::ostream& log) {
    const Paths p{c.out};
    const DenoiserNet net = load_checkpoint(c, p.checkpoint());
    const QuantizerBank bank = load_bank(c, net, p.bank());
    if (bank.weight_bits() != c.weight_bits || bank.act_bits() != c.act_bits)
        throw InputError("bank bit-width sets differ from the configuration");
    const NoiseSchedule sched = make_schedule(c);
    const CostModel model = CostModel::from_net(net);
    const Budget budget = make_budget(c, model);
    const SearchSpace space = make_space(c, model);
    const GaussianStats reference = reference_stats(c);
    const std::string hash = search_hash(c);

    std::optional<PolicyPool> pool;
    if (c.pool_size > 0) {
        if (!fs::exists(p.pool())) throw InputError("pool not found: " + p.pool().string() + " (run `presample` first)");
        const json j = io::read_json(p.pool());
        expect_hash(j, pool_hash(c), p.pool());
        pool = io::pool_from_json(j);
        for (const auto& pol : pool->policies)
            if (pol.size() != space.slots() || !within_budget(pol, space.steps(), model, budget))
                throw InputError("pool contains a policy outside the budget or the slot layout");
    }

    io::SearchLog prior;
    if (opts.resume && fs::exists(p.log())) {
        prior = io::parse_log(io::read_file(p.log()), true);
        if (!prior.records.empty() && prior.config_hash != hash)
            throw InputError("existing log was produced by a different configuration; refusing to resume");
        log << "resuming: " << prior.records.size() << " logged evaluations available\n";
    }

    // The log is rewritten epoch by epoch, so an interruption leaves every
    // completed epoch on disk.
    fs::create_directories(c.out);
    std::ofstream out(p.log(), std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.log().string());
    const EpochObserver observer = [&](const SearchState& s, std::size_t first) {
        for (std::size_t i = first; i < s.log.size(); ++i) out << io::to_json(s.log[i], hash).dump() << "\n";
        out.flush();
        log << "epoch " << s.epoch << ": best fitness " << s.best_per_epoch.back() << "\n";
    };

    SearchConfig cfg = c.search;
    cfg.workers = c.workers;
    const FrechetFitness fitness{&net, &sched, &bank, &reference, c.fitness_samples};
    SearchState state;
    try {
        state = run_search(cfg, space, budget, fitness, pool ? &*pool : nullptr, prior.records, observer);
    } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
    } catch (const std::runtime_error& e) {
        if (std::string(e.what()).find("resume log") != std::string::npos) throw InputError(e.what());
        throw;
    }
    out.close();
    log << "fitness evaluations: " << state.fitness_calls << " computed, "
        << state.log.size() - state.fitness_calls << " reused or duplicate\n";

    std::vector<RankedCandidate> ranked;
    if (c.rerank_samples > 0) {
        const FrechetFitness validate{&net, &sched, &bank, &reference, c.rerank_samples};
        ranked = rerank_elite(state.elite, validate, c.derived(Stream::rerank));
    } else {
        for (const auto& e : state.elite) ranked.push_back({e.candidate, e.fitness, e.fitness});
    }
    for (const auto& r : ranked)
        if (!within_budget(r.candidate, model, budget)) throw std::logic_error("elite candidate exceeds the budget");
    io::write_json(p.elite(), {{"kind", "elite"},
                               {"config_hash", hash},
                               {"budget", {{"limit", budget.limit}, {"description", budget.description}}},
                               {"grouping",
                                {{"T", c.T},
                                 {"H", c.H},
                                 {"kind", to_string(c.grouping)},
                                 {"boundaries", space.grouping.boundaries}}},
                               {"reranked", c.rerank_samples > 0},
                               {"elite", elite_json(ranked, model, space.steps())}});
    print_summary(ranked, model, budget, log);
    log << "wrote " << p.log().string() << " and " << p.elite().string() << "\n";
}

struct SampleOptions {
    fs::path candidate;  // elite file or bare candidate; empty: the run's elite.json
    std::optional<std::size_t> n;
    bool svg = false;
};

inline Candidate read_candidate(const fs::path& path) {
    const json j = io::read_json(path);
    try {
        if (j.is_object() && j.contains("elite")) {
            const json& e = j.at("elite");
            if (!e.is_array() || e.empty()) throw InputError("elite file has no entries");
            return io::candidate_from_json(e.at(0));
        }
        return io::candidate_from_json(j);
    } catch (const InputError& e) {
        throw InputError("malformed candidate in " + path.string() + ": " + e.what());
    }
}

inline std::string scatter_svg(const Tensor& generated, const Tensor& real) {
    double lim = 1.0;
    for (const Tensor* t : {&generated, &real})
        for (double v : t->storage())
            if (std::isfinite(v)) lim = std::max(lim, std::abs(v));
    lim *= 1.05;
    const double size = 480.0;
    auto px = [&](double v) { return (v + lim) / (2.0 * lim) * size; };
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    auto dots = [&](const Tensor& t, const char* colour) {
        for (std::size_t r = 0; r < t.rows(); ++r)
            s << "<circle cx=\"" << px(t(r, 0)) << "\" cy=\"" << size - px(t(r, 1)) << "\" r=\"1.5\" fill=\"" << colour
              << "\" fill-opacity=\"0.5\"/>\n";
    };
    dots(real, "#999999");
    dots(generated, "#d62728");
    s << "</svg>\n";
    return s.str();
}

inline void cmd_sample(const RunConfig& c, const SampleOptions& opts, std::ostream& log) {
    const Paths p{c.out};
    const fs::path cand_path = opts.candidate.empty() ? p.elite() : opts.candidate;
    if (!fs::exists(cand_path)) throw InputError("candidate file not found: " + cand_path.string());
    const Candidate cand = read_candidate(cand_path);
    const DenoiserNet net = load_checkpoint(c, p.checkpoint());
    const QuantizerBank bank = load_bank(c, net, p.bank());
    const NoiseSchedule sched = make_schedule(c);
    if (cand.policy.size() != net.slot_count()) throw InputError("candidate policy does not cover every slot");
    for (std::size_t s = 0; s < cand.policy.size(); ++s) {
        const auto& b = cand.policy[s];
        const auto& wb = bank.first_bits(s);
        if (std::find(wb.begin(), wb.end(), net.slots()[s].kind == SlotKind::attention ? b.act_bits : b.weight_bits) ==
                wb.end() ||
            std::find(bank.act_bits().begin(), bank.act_bits().end(), b.act_bits) == bank.act_bits().end())
            throw InputError("candidate uses a bit-width the bank was not calibrated for");
    }
    try {
        check_subsequence(sched, cand.timesteps);
    } catch (const std::exception& e) {
        throw InputError(std::string("candidate timesteps: ") + e.what());
    }
    const std::size_t n = opts.n.value_or(c.sample_count);
    const std::uint64_t seed = c.derived(Stream::sample);
    Rng rng(seed);
    const QuantContext ctx(bank, cand.policy);
    const Tensor samples = sample(net, sched, SamplerConfig{0.0, cand.timesteps}, &ctx, n, rng);

    io::write_file(p.samples(), io::tensor_to_csv(samples, {"x", "y"}));
    json sidecar = {{"kind", "samples"},
                    {"config_hash", search_hash(c)},
                    {"seed", seed},
                    {"n", n},
                    {"candidate", io::to_json(cand)},
                    {"overall_bitops", candidate_bitops(cand, CostModel::from_net(net))}};
    if (n >= 2) sidecar["frechet"] = frechet_distance(reference_stats(c), gaussian_stats(samples));
    io::write_json(fs::path(p.samples()).replace_extension(".json"), sidecar);
    if (opts.svg) io::write_file(fs::path(p.samples()).replace_extension(".svg"), scatter_svg(samples, load_dataset(c)));
    log << "wrote " << n << " samples to " << p.samples().string() << "\n";
}

struct ReportOptions {
    fs::path log;  // empty: the run's search_log.jsonl
    std::size_t k = 10;
    std::optional<std::string> expected_hash;
};

/// Markdown report: best-fitness curve, bit-width histograms over the final
/// elite and timestep selections per group. Returns the report text.
inline std::string build_report(const io::SearchLog& log, std::size_t k) {
    std::ostringstream md;
    md << "# Search report\n\n";
    if (log.records.empty()) {
        md << "No evaluations logged.\n";
        return md.str();
    }
    md << "Config hash: `" << log.config_hash << "`. Evaluations: " << log.records.size() << ".\n\n";

    md << "## Best fitness per epoch\n\n| epoch | best so far | evaluated |\n|---|---|---|\n";
    double best = INFINITY;
    std::size_t i = 0;
    while (i < log.records.size()) {
        const std::size_t epoch = log.records[i].epoch;
        std::size_t count = 0;
        for (; i < log.records.size() && log.records[i].epoch == epoch; ++i, ++count)
            if (log.records[i].fitness) best = std::min(best, *log.records[i].fitness);
        md << "| " << epoch << " | " << best << " | " << count << " |\n";
    }

    const auto elite = elite_from_log(log.records, k);
    md << "\n## Final elite (top " << elite.size() << ")\n\n| rank | timesteps | fitness | overall BitOPs |\n|---|---|---|---|\n";
    std::map<std::string, BitOps> cost_of;
    for (const auto& r : log.records) cost_of[candidate_key(r.candidate)] = r.overall_bitops;
    for (std::size_t r = 0; r < elite.size(); ++r)
        md << "| " << r + 1 << " | " << join(elite[r].candidate.timesteps) << " | " << elite[r].fitness << " | "
           << cost_of[candidate_key(elite[r].candidate)] << " |\n";

    std::map<int, std::size_t> wh, ah;
    std::map<std::size_t, std::map<int, std::size_t>> picks;
    for (const auto& e : elite) {
        for (const auto& b : e.candidate.policy) {
            ++wh[b.weight_bits];
            ++ah[b.act_bits];
        }
        for (std::size_t h = 0; h < e.candidate.timesteps.size(); ++h) ++picks[h][e.candidate.timesteps[h]];
    }
    md << "\n## Bit-width allocation over the elite\n\n| bits | weight slots | activation slots |\n|---|---|---|\n";
    std::set<int> all_bits;
    for (const auto& [b, n] : wh) all_bits.insert(b);
    for (const auto& [b, n] : ah) all_bits.insert(b);
    for (int b : all_bits) md << "| " << b << " | " << wh[b] << " | " << ah[b] << " |\n";

    md << "\n## Timestep selections per group\n\n| group | timestep: count |\n|---|---|\n";
    for (const auto& [h, counts] : picks) {
        md << "| " << h + 1 << " | ";
        bool first = true;
        for (const auto& [t, n] : counts) {
            md << (first ? "" : ", ") << t << ": " << n;
            first = false;
        }
        md << " |\n";
    }
    return md.str();
}

inline void cmd_report(const fs::path& out_dir, const ReportOptions& opts, std::ostream& log) {
    const Paths p{out_dir};
    const fs::path log_path = opts.log.empty() ? p.log() : opts.log;
    const io::SearchLog parsed = io::parse_log(io::read_file(log_path));
    if (opts.expected_hash && !parsed.records.empty() && parsed.config_hash != *opts.expected_hash)
        throw InputError("log " + log_path.string() + " was produced by a different configuration");
    if (fs::exists(p.elite()) && !parsed.records.empty()) {
        const json elite = io::read_json(p.elite());
        expect_hash(elite, parsed.config_hash, p.elite());
    }
    io::write_file(p.report(), build_report(parsed, opts.k));

    std::ostringstream csv;
    csv << "epoch,best_fitness\n";
    double best = INFINITY;
    for (std::size_t i = 0; i < parsed.records.size(); ++i) {
        if (parsed.records[i].fitness) best = std::min(best, *parsed.records[i].fitness);
        if (i + 1 == parsed.records.size() || parsed.records[i + 1].epoch != parsed.records[i].epoch)
            csv << parsed.records[i].epoch << "," << std::setprecision(17) << best << "\n";
    }
    io::write_file(p.out / "fitness_curve.csv", csv.str());
    log << "wrote " << p.report().string() << "\n";
}

}  // namespace tmpq::cli
