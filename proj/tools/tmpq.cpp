// tmpq: train, calibrate, presample, search, sample and report.

#include "tmpq/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace tmpq;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
    std::string out;
};

void add_common(CLI::App* sub, Common& c, bool config_required = true) {
    auto* opt = sub->add_option("--config", c.config, "run configuration (JSON)");
    if (config_required) opt->required();
    sub->add_option("--seed", c.seed, "override the root seed");
    sub->add_option("--workers", c.workers, "maximum worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", c.out, "output directory (overrides the config)");
}

cli::RunConfig resolve(const Common& c) {
    io::json j = io::read_json(c.config);
    if (c.seed) j["seed"] = *c.seed;
    if (!c.out.empty()) j["out"] = c.out;
    cli::RunConfig cfg = cli::config_from_json(j, std::filesystem::path(c.config).parent_path());
    if (c.workers) cfg.workers = *c.workers;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint timestep and mixed-precision search for a toy diffusion model"};
    app.require_subcommand(1);
    Common common;

    auto* make_data = app.add_subcommand("make-data", "write the 8-Gaussian ring dataset as CSV");
    add_common(make_data, common);
    std::string data_path;
    std::size_t data_points = 8192;
    make_data->add_option("path", data_path, "output CSV")->required();
    make_data->add_option("--points", data_points, "number of points");

    auto* train = app.add_subcommand("train", "train the denoiser; writes checkpoint.json");
    add_common(train, common);

    auto* calibrate = app.add_subcommand("calibrate", "calibrate the multi-precision quantizer bank");
    add_common(calibrate, common);

    auto* presample = app.add_subcommand("presample", "pre-sample within-budget policies into pool.json");
    add_common(presample, common);

    auto* search = app.add_subcommand("search", "run the evolutionary search; writes the log and elite");
    add_common(search, common);
    cli::SearchOptions search_opts;
    search->add_flag("--resume", search_opts.resume, "reuse evaluations from an existing log");

    auto* sample = app.add_subcommand("sample", "draw samples with a candidate; writes CSV and sidecar");
    add_common(sample, common);
    cli::SampleOptions sample_opts;
    std::string candidate_path;
    std::optional<std::size_t> sample_n;
    sample->add_option("--candidate", candidate_path, "elite file or candidate JSON (default: the run's elite)");
    sample->add_option("-n,--n", sample_n, "number of samples");
    sample->add_flag("--svg", sample_opts.svg, "also write a scatter plot");

    auto* report = app.add_subcommand("report", "summarize a search log as markdown");
    add_common(report, common, false);
    cli::ReportOptions report_opts;
    std::string log_path;
    report->add_option("--log", log_path, "search log (default: <out>/search_log.jsonl)");
    report->add_option("--k", report_opts.k, "elite size")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? cli::ok : cli::bad_input;
    }

    try {
        if (*report) {
            std::filesystem::path out = common.out;
            if (!common.config.empty()) {
                const cli::RunConfig cfg = resolve(common);
                out = cfg.out;
                report_opts.expected_hash = cli::search_hash(cfg);
                if (report->count("--k") == 0) report_opts.k = cfg.search.elite;
            }
            if (out.empty() && log_path.empty()) throw io::InputError("report needs --config, --out or --log");
            report_opts.log = log_path;
            if (out.empty()) out = std::filesystem::path(log_path).parent_path();
            cli::cmd_report(out, report_opts, std::cout);
            return cli::ok;
        }
        const cli::RunConfig cfg = resolve(common);
        if (*make_data) cli::cmd_make_data(cfg, data_path, data_points, std::cout);
        else if (*train) cli::cmd_train(cfg, std::cout);
        else if (*calibrate) cli::cmd_calibrate(cfg, std::cout);
        else if (*presample) cli::cmd_presample(cfg, std::cout);
        else if (*search) cli::cmd_search(cfg, search_opts, std::cout);
        else if (*sample) {
            sample_opts.candidate = candidate_path;
            sample_opts.n = sample_n;
            cli::cmd_sample(cfg, sample_opts, std::cout);
        }
        return cli::ok;
    } catch (const io::InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::bad_input;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return cli::internal_error;
    }
}
