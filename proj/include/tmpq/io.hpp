#pragma once

// JSON / JSON-lines / CSV persistence for checkpoints, banks, pools, search
// logs and elites. Doubles go through nlohmann's shortest round-trip
// formatting, so save → load is bit-exact.

#include "tmpq/calibration.hpp"
#include "tmpq/candidate.hpp"
#include "tmpq/cost.hpp"
#include "tmpq/nn.hpp"
#include "tmpq/numerics.hpp"
#include "tmpq/quant.hpp"
#include "tmpq/search.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tmpq::io {

using json = nlohmann::ordered_json;

/// Malformed or missing user input (as opposed to an internal failure).
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string hash_json(const json& j) { return hex64(fnv1a64(j.dump())); }

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline json read_json(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

/// Typed field access that reports the offending key as bad input.
template <class T>
T field(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) throw InputError(std::string("missing field '") + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw InputError(std::string("field '") + key + "': " + e.what());
    }
}

template <class T>
T field_or(const json& j, const char* key, T fallback) {
    return j.is_object() && j.contains(key) ? field<T>(j, key) : fallback;
}

// ---------------------------------------------------------------------------
// CSV

/// Writes rows with a header line; numbers use 17 significant digits.
inline std::string tensor_to_csv(const Tensor& t, const std::vector<std::string>& header) {
    std::ostringstream ss;
    ss << std::setprecision(17);
    for (std::size_t c = 0; c < header.size(); ++c) ss << (c ? "," : "") << header[c];
    ss << '\n';
    for (std::size_t r = 0; r < t.rows(); ++r) {
        for (std::size_t c = 0; c < t.cols(); ++c) ss << (c ? "," : "") << t(r, c);
        ss << '\n';
    }
    return ss.str();
}

/// Numeric CSV with one header line.
inline Tensor tensor_from_csv(const std::string& text, std::size_t expected_cols) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw InputError("CSV is empty (expected a header line)");
    std::vector<double> values;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string cell;
        std::size_t cols = 0;
        while (std::getline(fields, cell, ',')) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0) throw InputError("CSV row " + std::to_string(rows + 2) + ": '" + cell + "' is not a number");
            values.push_back(v);
            ++cols;
        }
        if (cols != expected_cols)
            throw InputError("CSV row " + std::to_string(rows + 2) + ": expected " + std::to_string(expected_cols) +
                             " columns");
        ++rows;
    }
    return Tensor({rows, expected_cols}, std::move(values));
}

// ---------------------------------------------------------------------------
// Model and quantizers

inline json to_json(const Architecture& a) {
    return {{"data_dim", a.data_dim},
            {"hidden", a.hidden},
            {"temb_dim", a.temb_dim},
            {"hidden_layers", a.hidden_layers},
            {"attn_tokens", a.attn_tokens}};
}

inline Architecture architecture_from_json(const json& j) {
    Architecture a;
    a.data_dim = field_or<std::size_t>(j, "data_dim", a.data_dim);
    a.hidden = field_or<std::size_t>(j, "hidden", a.hidden);
    a.temb_dim = field_or<std::size_t>(j, "temb_dim", a.temb_dim);
    a.hidden_layers = field_or<std::size_t>(j, "hidden_layers", a.hidden_layers);
    a.attn_tokens = field_or<std::size_t>(j, "attn_tokens", a.attn_tokens);
    try {
        a.validate();
    } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
    }
    return a;
}

inline json checkpoint_to_json(const DenoiserNet& net) {
    json layers = json::array();
    for (const auto& l : net.linears())
        layers.push_back({{"name", l.name}, {"weight", l.weight.storage()}, {"bias", l.bias}});
    json specs = json::array();
    for (const auto& l : net.layers())
        specs.push_back({{"name", l.name}, {"in_dim", l.in_dim}, {"out_dim", l.out_dim}, {"tokens", l.tokens}});
    return {{"architecture", to_json(net.arch())},
            {"signature", net.signature()},
            {"layers", specs},
            {"linears", layers}};
}

inline DenoiserNet checkpoint_from_json(const json& j) {
    DenoiserNet net(architecture_from_json(field<json>(j, "architecture")), 0);
    const json layers = field<json>(j, "linears");
    if (!layers.is_array() || layers.size() != net.linears().size())
        throw InputError("checkpoint: layer count does not match the architecture");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        Linear& l = net.linears()[i];
        if (field<std::string>(layers[i], "name") != l.name) throw InputError("checkpoint: unexpected layer order");
        auto w = field<std::vector<double>>(layers[i], "weight");
        auto b = field<std::vector<double>>(layers[i], "bias");
        if (w.size() != l.weight.size() || b.size() != l.bias.size())
            throw InputError("checkpoint: parameter shape mismatch in layer " + l.name);
        l.weight.storage() = std::move(w);
        l.bias = std::move(b);
    }
    return net;
}

inline json to_json(const MultiPrecisionQuantizer& q) {
    json entries = json::array();
    for (const auto& [bits, p] : q.by_bits)
        entries.push_back({{"bits", bits}, {"scale", p.scale}, {"zero_point", p.zero_point}});
    return {{"name", q.name},
            {"range", q.range == QuantRange::unsigned_act ? "unsigned" : "signed"},
            {"entries", entries}};
}

inline MultiPrecisionQuantizer quantizer_from_json(const json& j) {
    MultiPrecisionQuantizer q;
    q.name = field<std::string>(j, "name");
    const auto range = field<std::string>(j, "range");
    if (range != "unsigned" && range != "signed") throw InputError("bank: unknown quantizer range '" + range + "'");
    q.range = range == "unsigned" ? QuantRange::unsigned_act : QuantRange::signed_weight;
    for (const auto& e : field<json>(j, "entries")) {
        QuantParams p{field<double>(e, "scale"), field<double>(e, "zero_point"), field<int>(e, "bits")};
        if (!(p.scale > 0.0) || !std::isfinite(p.zero_point)) throw InputError("bank: invalid quantizer entry");
        q.by_bits[p.bits] = p;
    }
    return q;
}

inline json bank_to_json(const QuantizerBank& bank) {
    json slots = json::array();
    for (const auto& s : bank.slots())
        slots.push_back({{"slot", s.slot},
                         {"kind", to_string(s.kind)},
                         {"block", s.block},
                         {"first", to_json(s.first)},
                         {"second", to_json(s.second)}});
    std::vector<bool> calibrated;
    for (std::size_t j = 0; j < bank.block_count(); ++j) calibrated.push_back(bank.block_calibrated(j));
    return {{"model_signature", bank.model_signature},
            {"seed", bank.seed},
            {"weight_bits", bank.weight_bits()},
            {"act_bits", bank.act_bits()},
            {"calibrated_blocks", calibrated},
            {"slots", slots}};
}

inline QuantizerBank bank_from_json(const json& j) {
    std::vector<SlotQuantizers> slots;
    for (const auto& s : field<json>(j, "slots")) {
        SlotQuantizers q;
        q.slot = field<std::string>(s, "slot");
        const auto kind = field<std::string>(s, "kind");
        if (kind != "linear" && kind != "attention") throw InputError("bank: unknown slot kind '" + kind + "'");
        q.kind = kind == "linear" ? SlotKind::linear : SlotKind::attention;
        q.block = field<std::size_t>(s, "block");
        q.first = quantizer_from_json(field<json>(s, "first"));
        q.second = quantizer_from_json(field<json>(s, "second"));
        slots.push_back(std::move(q));
    }
    const auto calibrated = field<std::vector<bool>>(j, "calibrated_blocks");
    QuantizerBank bank(std::move(slots), field<std::vector<int>>(j, "weight_bits"), field<std::vector<int>>(j, "act_bits"),
                       calibrated.size());
    for (std::size_t b = 0; b < calibrated.size(); ++b)
        if (calibrated[b]) bank.mark_calibrated(b);
    bank.seed = field<std::uint64_t>(j, "seed");
    bank.model_signature = field<std::string>(j, "model_signature");
    return bank;
}

inline json to_json(const BlockCalibrationReport& r) {
    json settings = json::array();
    for (const auto& s : r.settings)
        settings.push_back({{"weight_bits", s.bits.weight_bits},
                            {"act_bits", s.bits.act_bits},
                            {"init_loss", s.init_loss},
                            {"final_loss", s.final_loss},
                            {"updates", s.updates},
                            {"reverted", s.reverted}});
    return {{"block", r.block}, {"settings", settings}};
}

// ---------------------------------------------------------------------------
// Candidates, pools, logs

inline json to_json(const Policy& p) {
    json out = json::array();
    for (const auto& b : p) out.push_back({b.weight_bits, b.act_bits});
    return out;
}

inline Policy policy_from_json(const json& j) {
    if (!j.is_array()) throw InputError("policy must be an array of [weight_bits, act_bits] pairs");
    Policy p;
    for (const auto& e : j) {
        if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number_integer())
            throw InputError("policy entries must be [weight_bits, act_bits] integer pairs");
        p.push_back({e[0].get<int>(), e[1].get<int>()});
    }
    return p;
}

inline json to_json(const Candidate& c) { return {{"timesteps", c.timesteps}, {"policy", to_json(c.policy)}}; }

inline Candidate candidate_from_json(const json& j) {
    return {field<std::vector<int>>(j, "timesteps"), policy_from_json(field<json>(j, "policy"))};
}

inline json pool_to_json(const PolicyPool& pool) {
    json policies = json::array();
    for (const auto& p : pool.policies) policies.push_back(to_json(p));
    return {{"budget", {{"limit", pool.budget.limit}, {"description", pool.budget.description}}},
            {"seeds", pool.seeds},
            {"policies", policies}};
}

inline PolicyPool pool_from_json(const json& j) {
    PolicyPool pool;
    const json budget = field<json>(j, "budget");
    pool.budget = {field<BitOps>(budget, "limit"), field_or<std::string>(budget, "description", "")};
    pool.seeds = field<std::vector<std::uint64_t>>(j, "seeds");
    for (const auto& p : field<json>(j, "policies")) pool.policies.push_back(policy_from_json(p));
    return pool;
}

inline json to_json(const EvalRecord& r, const std::string& config_hash) {
    json j = {{"epoch", r.epoch},
              {"index", r.index},
              {"origin", to_string(r.origin)},
              {"candidate", to_json(r.candidate)},
              {"overall_bitops", r.overall_bitops},
              {"fitness", r.fitness ? json(*r.fitness) : json(nullptr)},
              {"seed", r.seed},
              {"config_hash", config_hash}};
    if (!r.error.empty()) j["error"] = r.error;
    return j;
}

inline EvalRecord record_from_json(const json& j) {
    EvalRecord r;
    r.epoch = field<std::size_t>(j, "epoch");
    r.index = field<std::size_t>(j, "index");
    const auto origin = field_or<std::string>(j, "origin", "random");
    r.origin = origin == "mutation" ? Origin::mutation : origin == "crossover" ? Origin::crossover : Origin::random;
    r.candidate = candidate_from_json(field<json>(j, "candidate"));
    r.overall_bitops = field<BitOps>(j, "overall_bitops");
    if (!j.contains("fitness")) throw InputError("missing field 'fitness'");
    if (!j.at("fitness").is_null()) r.fitness = field<double>(j, "fitness");
    r.seed = field<std::uint64_t>(j, "seed");
    r.error = field_or<std::string>(j, "error", "");
    return r;
}

struct SearchLog {
    std::vector<EvalRecord> records;
    std::string config_hash;  // empty for an empty log
};

/// Parses a JSON-lines log. All records must carry the same config hash.
/// With `allow_truncated_tail`, an unparseable final line (an interrupted
/// write) is dropped instead of rejected.
inline SearchLog parse_log(const std::string& text, bool allow_truncated_tail = false) {
    SearchLog log;
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        json j;
        try {
            j = json::parse(lines[i]);
        } catch (const json::parse_error&) {
            if (allow_truncated_tail && i + 1 == lines.size()) break;
            throw InputError("log line " + std::to_string(i + 1) + " is not valid JSON");
        }
        EvalRecord r;
        try {
            r = record_from_json(j);
        } catch (const InputError& e) {
            throw InputError("log line " + std::to_string(i + 1) + ": " + e.what());
        }
        const auto hash = field<std::string>(j, "config_hash");
        if (log.config_hash.empty()) log.config_hash = hash;
        if (hash != log.config_hash) throw InputError("log mixes records from different configurations");
        log.records.push_back(std::move(r));
    }
    return log;
}

/// Per-slot cost rows for an elite or summary file.
inline json cost_breakdown(const Candidate& c, const CostModel& model) {
    json rows = json::array();
    for (std::size_t s = 0; s < model.slots(); ++s)
        rows.push_back({{"slot", model.names[s]},
                        {"macs", model.macs[s]},
                        {"weight_bits", c.policy[s].weight_bits},
                        {"act_bits", c.policy[s].act_bits},
                        {"step_bitops",
                         slot_bitops(model.macs[s], c.policy[s].weight_bits, c.policy[s].act_bits, model.kinds[s])}});
    return rows;
}

}  // namespace tmpq::io
