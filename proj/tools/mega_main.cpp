#include "mega/commands.hpp"
#include "mega/toygen.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

namespace {

using mega::cli::RunConfig;

struct CommonFlags {
    std::string config_path;
    std::optional<size_t> limit;
    std::optional<uint64_t> seed;
    std::optional<size_t> threads;
    bool emit_svg = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool with_svg = false) {
    cmd->add_option("--config", flags.config_path, "Run config JSON")->required();
    cmd->add_option("--limit", flags.limit, "Evaluate at most N dataset cases");
    cmd->add_option("--seed", flags.seed, "Override the config seed");
    cmd->add_option("--threads", flags.threads, "Case-level worker threads");
    if (with_svg) cmd->add_flag("--emit-svg", flags.emit_svg, "Also render SVG charts");
}

RunConfig apply_flags(const CommonFlags& flags) {
    RunConfig config = mega::cli::load_config(flags.config_path);
    if (flags.limit) config.dataset.limit = *flags.limit;
    if (flags.seed) config.dataset.seed = *flags.seed;
    if (flags.emit_svg) config.output.emit_svg = true;
    // --threads beats MEGA_THREADS beats the config file.
    if (flags.threads) {
        config.threads = *flags.threads;
    } else if (const char* env = std::getenv("MEGA_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end && *end == '\0' && v >= 1) config.threads = size_t(v);
    }
    config.validate();
    return config;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Neuron-level attribution and scope-gated activation steering for GPT-2 style "
                 "transformers"};
    app.require_subcommand(1);

    CommonFlags attr_flags;
    std::string edited_weights;
    CLI::App* attribute = app.add_subcommand(
        "attribute", "Per-layer contribution profiles, edited vs. base, with classification");
    add_common(attribute, attr_flags, /*with_svg=*/true);
    attribute->add_option("--edited-weights", edited_weights,
                          "Edited model weights; defaults to the in-context edited system");

    CommonFlags fit_flags;
    CLI::App* steer_fit =
        app.add_subcommand("steer-fit", "Fit per-case steering policies over the layer window");
    add_common(steer_fit, fit_flags);

    CommonFlags eval_flags;
    std::string policies_dir;
    std::string baseline = "none";
    CLI::App* eval_cmd = app.add_subcommand("eval", "Score a system on the dataset metrics");
    add_common(eval_cmd, eval_flags);
    CLI::Option* policies_opt =
        eval_cmd->add_option("--policies", policies_dir, "Directory of fitted policy files");
    eval_cmd->add_option("--baseline", baseline, "Baseline system: none or ike")
        ->check(CLI::IsMember({"none", "ike"}))
        ->excludes(policies_opt);

    std::vector<std::string> report_csvs;
    std::string report_out = ".";
    CLI::App* report = app.add_subcommand("report", "Render layer-profile SVG charts from CSVs");
    report->add_option("csv", report_csvs, "attribution CSV files")->required();
    report->add_option("--out", report_out, "Output directory");

    std::string toy_out = "toy";
    uint64_t toy_seed = 42;
    size_t toy_cases = 10;
    CLI::App* gen_toy =
        app.add_subcommand("gen-toy", "Write a seeded toy model, dataset, and config");
    gen_toy->add_option("--out", toy_out, "Output directory");
    gen_toy->add_option("--seed", toy_seed, "Generator seed");
    gen_toy->add_option("--cases", toy_cases, "Number of synthetic cases");

    std::string convert_in, convert_out;
    CLI::App* convert =
        app.add_subcommand("convert", "Convert an EasyEdit CounterFact JSON array to JSONL");
    convert->add_option("--in", convert_in, "EasyEdit JSON file")->required();
    convert->add_option("--out", convert_out, "Output JSONL path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*attribute) {
            RunConfig config = apply_flags(attr_flags);
            mega::cli::AttributeOptions options;
            options.edited_weights_path = edited_weights;
            return mega::cli::cmd_attribute(config, options, std::cout, std::cerr);
        }
        if (*steer_fit) {
            return mega::cli::cmd_steer_fit(apply_flags(fit_flags), std::cout, std::cerr);
        }
        if (*eval_cmd) {
            RunConfig config = apply_flags(eval_flags);
            mega::cli::EvalMode mode = mega::cli::EvalMode::BaselineNone;
            if (!policies_dir.empty()) {
                mode = mega::cli::EvalMode::Policies;
            } else if (baseline == "ike") {
                mode = mega::cli::EvalMode::BaselineIke;
            }
            return mega::cli::cmd_eval(config, mode, policies_dir, std::cout, std::cerr);
        }
        if (*report) {
            return mega::cli::cmd_report(report_csvs, report_out, std::cout, std::cerr);
        }
        if (*gen_toy) {
            return mega::cli::cmd_gen_toy(toy_out, toy_seed, toy_cases, std::cout, std::cerr);
        }
        if (*convert) {
            return mega::cli::cmd_convert(convert_in, convert_out, std::cout, std::cerr);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
