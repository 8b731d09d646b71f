#include "mega/commands.hpp"

#include "mega/attribution.hpp"
#include "mega/evaluation.hpp"
#include "mega/toygen.hpp"

#include "parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

namespace mega::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CaseFailure {
    std::string case_id;
    std::string message;
};

int finish(const std::vector<CaseFailure>& failures, std::ostream& err) {
    if (failures.empty()) return 0;
    err << failures.size() << " case(s) failed:\n";
    for (const CaseFailure& f : failures) err << "  " << f.case_id << ": " << f.message << "\n";
    return 1;
}

std::vector<eval::EditCase> load_dataset(const RunConfig& config) {
    if (config.dataset.path.empty()) throw Error("config: dataset.path is required");
    std::vector<eval::EditCase> cases = eval::load_cases_jsonl(config.dataset.path);
    if (cases.empty()) throw Error("dataset: " + config.dataset.path + " holds no cases");
    return eval::sample_cases(std::move(cases), config.dataset.limit, config.dataset.sampling,
                              config.dataset.seed);
}

double system_accuracy(const eval::System& system, const eval::EditCase& c) {
    size_t hits = answer_match(system, c.prompt, c.target_new) ? 1 : 0;
    size_t attempts = 1;
    for (const std::string& p : c.paraphrase_prompts) {
        ++attempts;
        if (answer_match(system, p, c.target_new)) ++hits;
    }
    return double(hits) / double(attempts);
}

struct MeanProfilePair {
    attr::ContributionProfile base, edited;
    size_t count = 0;
};

void accumulate(MeanProfilePair& acc, const attr::ContributionProfile& base,
                const attr::ContributionProfile& edited) {
    if (acc.count == 0) {
        acc.base = base;
        acc.edited = edited;
        acc.base.token_id = acc.edited.token_id = -1;
    } else {
        for (size_t l = 0; l < base.n_layers(); ++l) {
            for (size_t k = 0; k < 2; ++k) {
                acc.base.c[l][k] += base.c[l][k];
                acc.edited.c[l][k] += edited.c[l][k];
            }
        }
        acc.base.baseline_logprob += base.baseline_logprob;
        acc.base.final_logprob += base.final_logprob;
        acc.edited.baseline_logprob += edited.baseline_logprob;
        acc.edited.final_logprob += edited.final_logprob;
    }
    ++acc.count;
}

void finalize(MeanProfilePair& acc) {
    if (acc.count < 2) return;
    const double inv = 1.0 / double(acc.count);
    for (size_t l = 0; l < acc.base.n_layers(); ++l) {
        for (size_t k = 0; k < 2; ++k) {
            acc.base.c[l][k] *= inv;
            acc.edited.c[l][k] *= inv;
        }
    }
    acc.base.baseline_logprob *= inv;
    acc.base.final_logprob *= inv;
    acc.edited.baseline_logprob *= inv;
    acc.edited.final_logprob *= inv;
}

// Bars of mean delta per layer, one pair (attn, ffn) per layer.
void write_profile_svg(const std::string& path, const std::string& role,
                       const std::map<size_t, std::array<double, 2>>& by_layer) {
    const size_t n_layers = by_layer.empty() ? 0 : by_layer.rbegin()->first + 1;
    const double bar_w = 14.0, group_w = 2 * bar_w + 10.0;
    const double margin = 50.0, height = 320.0, base_y = height / 2.0;
    const double width = margin * 2 + std::max<double>(1, double(n_layers)) * group_w;

    double peak = 1e-12;
    for (const auto& [layer, delta] : by_layer) {
        peak = std::max({peak, std::fabs(delta[0]), std::fabs(delta[1])});
    }
    const double scale = (base_y - 40.0) / peak;

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("report: cannot write " + path);
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    out << "  <text x=\"" << margin << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">"
        << "mean delta-C per layer (" << role << ")</text>\n";
    out << "  <line x1=\"" << margin - 10 << "\" y1=\"" << base_y << "\" x2=\"" << width - margin + 10
        << "\" y2=\"" << base_y << "\" stroke=\"#444\" stroke-width=\"1\"/>\n";
    for (const auto& [layer, delta] : by_layer) {
        const double x0 = margin + double(layer) * group_w;
        for (size_t comp = 0; comp < 2; ++comp) {
            const double v = delta[comp] * scale;
            const double x = x0 + double(comp) * (bar_w + 2.0);
            const double y = v >= 0 ? base_y - v : base_y;
            const char* fill = comp == 0 ? "#4878b0" : "#e08a3c";
            out << "  <rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << bar_w
                << "\" height=\"" << std::fabs(v) << "\" fill=\"" << fill << "\"/>\n";
        }
        out << "  <text x=\"" << x0 << "\" y=\"" << height - 8
            << "\" font-family=\"sans-serif\" font-size=\"10\">" << layer << "</text>\n";
    }
    out << "  <rect x=\"" << width - margin - 120 << "\" y=\"30\" width=\"10\" height=\"10\" "
        << "fill=\"#4878b0\"/>\n";
    out << "  <text x=\"" << width - margin - 105
        << "\" y=\"40\" font-family=\"sans-serif\" font-size=\"11\">attn</text>\n";
    out << "  <rect x=\"" << width - margin - 60 << "\" y=\"30\" width=\"10\" height=\"10\" "
        << "fill=\"#e08a3c\"/>\n";
    out << "  <text x=\"" << width - margin - 45
        << "\" y=\"40\" font-family=\"sans-serif\" font-size=\"11\">ffn</text>\n";
    out << "</svg>\n";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    cells.push_back(cur);
    return cells;
}

} // namespace

std::string policy_path(const std::string& dir, const std::string& case_id) {
    std::string safe;
    for (char c : case_id) {
        safe.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
    }
    return (fs::path(dir) / ("policy_" + safe + ".json")).string();
}

int cmd_attribute(const RunConfig& config, const AttributeOptions& options, std::ostream& log,
                  std::ostream& err) {
    config.validate();
    const model::Model base_model = load_model(config.model);
    const model::Tokenizer tok = make_tokenizer(config.model.tokenizer);
    std::optional<model::Model> edited_model;
    if (!options.edited_weights_path.empty()) {
        edited_model = model::Model::load(options.edited_weights_path, config.model.config);
    }
    const std::vector<eval::EditCase> cases = load_dataset(config);
    fs::create_directories(config.output.dir);

    struct CaseResult {
        std::string case_id;
        bool ok = false;
        std::string error;
        bool has_gt = false;
        attr::ContributionProfile base_tgt, edit_tgt, base_gt, edit_gt;
        double acc_pre = 0.0, acc_post = 0.0;
        bool pre_correct = false;
        attr::Outcome outcome = attr::Outcome::Failed;
    };
    std::vector<CaseResult> results(cases.size());

    const eval::BaseSystem base_sys(base_model, tok);
    parallel_for(cases.size(), config.threads, [&](size_t i) {
        CaseResult& r = results[i];
        const eval::EditCase& c = cases[i];
        r.case_id = c.case_id;
        try {
            std::vector<int> base_tokens = tok.encode(c.prompt);
            if (base_tokens.empty()) throw Error("prompt tokenizes to nothing");
            const int y_tgt = attr::first_answer_token(tok, c.prompt, c.target_new);

            model::ResidualTrace base_trace =
                base_model.forward_trace(base_tokens, base_tokens.size() - 1);
            r.base_tgt = attr::contribution_profile_from_trace(base_model, base_trace, y_tgt,
                                                               attr::TokenRole::TargetNew);

            model::ResidualTrace edit_trace;
            const model::Model& attributed_model = edited_model ? *edited_model : base_model;
            if (edited_model) {
                edit_trace = edited_model->forward_trace(base_tokens, base_tokens.size() - 1);
            } else {
                // In-context editing: attribute the extended prompt at its
                // last token.
                std::vector<int> ike_tokens =
                    tok.encode(attr::build_ike_context({}, c.prompt, c.target_new));
                edit_trace = base_model.forward_trace(ike_tokens, ike_tokens.size() - 1);
            }
            r.edit_tgt = attr::contribution_profile_from_trace(attributed_model, edit_trace, y_tgt,
                                                               attr::TokenRole::TargetNew);

            if (!c.ground_truth.empty()) {
                r.has_gt = true;
                const int y_gt = attr::first_answer_token(tok, c.prompt, c.ground_truth);
                r.base_gt = attr::contribution_profile_from_trace(base_model, base_trace, y_gt,
                                                                  attr::TokenRole::GroundTruth);
                r.edit_gt = attr::contribution_profile_from_trace(attributed_model, edit_trace,
                                                                  y_gt,
                                                                  attr::TokenRole::GroundTruth);
            }

            r.acc_pre = system_accuracy(base_sys, c);
            if (edited_model) {
                eval::BaseSystem edited_sys(*edited_model, tok);
                r.acc_post = system_accuracy(edited_sys, c);
            } else {
                eval::IkeSystem ike_sys(base_model, tok, c);
                r.acc_post = system_accuracy(ike_sys, c);
            }
            r.pre_correct = eval::answer_match(base_sys, c.prompt, c.target_new);
            r.outcome = attr::classify_outcome(r.acc_pre, r.acc_post, r.pre_correct);
            r.ok = true;
        } catch (const std::exception& e) {
            r.error = e.what();
        }
    });

    std::ofstream cases_csv(fs::path(config.output.dir) / "attribution_cases.csv",
                            std::ios::trunc);
    attr::write_delta_csv_header(cases_csv);
    MeanProfilePair mean_success_tgt, mean_success_gt, mean_failed_tgt, mean_failed_gt;
    size_t n_excluded = 0;
    std::vector<CaseFailure> failures;
    json summary_cases = json::array();

    for (const CaseResult& r : results) {
        if (!r.ok) {
            failures.push_back({r.case_id, r.error});
            continue;
        }
        attr::write_delta_csv_rows(cases_csv, r.case_id, r.base_tgt, r.edit_tgt);
        if (r.has_gt) attr::write_delta_csv_rows(cases_csv, r.case_id, r.base_gt, r.edit_gt);
        switch (r.outcome) {
            case attr::Outcome::Successful:
                accumulate(mean_success_tgt, r.base_tgt, r.edit_tgt);
                if (r.has_gt) accumulate(mean_success_gt, r.base_gt, r.edit_gt);
                break;
            case attr::Outcome::Failed:
                accumulate(mean_failed_tgt, r.base_tgt, r.edit_tgt);
                if (r.has_gt) accumulate(mean_failed_gt, r.base_gt, r.edit_gt);
                break;
            case attr::Outcome::Excluded: ++n_excluded; break;
        }
        summary_cases.push_back({{"case_id", r.case_id},
                                 {"classification", attr::outcome_name(r.outcome)},
                                 {"acc_pre", r.acc_pre},
                                 {"acc_post", r.acc_post},
                                 {"pre_correct", r.pre_correct},
                                 {"sum_c_base", r.base_tgt.total()},
                                 {"sum_c_edit", r.edit_tgt.total()}});
    }
    cases_csv.close();

    auto write_mean = [&](const std::string& name, MeanProfilePair& tgt, MeanProfilePair& gt) {
        finalize(tgt);
        finalize(gt);
        std::ofstream out(fs::path(config.output.dir) / ("attribution_" + name + ".csv"),
                          std::ios::trunc);
        attr::write_delta_csv_header(out);
        if (tgt.count > 0) attr::write_delta_csv_rows(out, name, tgt.base, tgt.edited);
        if (gt.count > 0) attr::write_delta_csv_rows(out, name, gt.base, gt.edited);
    };
    write_mean("mean_successful", mean_success_tgt, mean_success_gt);
    write_mean("mean_failed", mean_failed_tgt, mean_failed_gt);

    json summary;
    summary["edited_system"] =
        options.edited_weights_path.empty() ? "ike" : options.edited_weights_path;
    summary["n_cases"] = cases.size();
    summary["n_successful"] = mean_success_tgt.count;
    summary["n_failed"] = mean_failed_tgt.count;
    summary["n_excluded"] = n_excluded;
    summary["cases"] = std::move(summary_cases);
    {
        std::ofstream out(fs::path(config.output.dir) / "attribution_summary.json",
                          std::ios::trunc);
        out << summary.dump(2) << "\n";
    }

    if (config.output.emit_svg) {
        std::vector<std::string> csvs = {
            (fs::path(config.output.dir) / "attribution_mean_successful.csv").string(),
            (fs::path(config.output.dir) / "attribution_mean_failed.csv").string()};
        cmd_report(csvs, config.output.dir, log, err);
    }

    log << "attribute: " << cases.size() - failures.size() << "/" << cases.size()
        << " cases -> " << config.output.dir << " (successful " << mean_success_tgt.count
        << ", failed " << mean_failed_tgt.count << ", excluded " << n_excluded << ")\n";
    return finish(failures, err);
}

int cmd_steer_fit(const RunConfig& config, std::ostream& log, std::ostream& err) {
    config.validate();
    const model::Model m = load_model(config.model);
    const model::Tokenizer tok = make_tokenizer(config.model.tokenizer);
    const std::vector<eval::EditCase> cases = load_dataset(config);
    fs::create_directories(config.output.dir);

    struct FitResult {
        bool ok = false;
        std::string error;
        steer::SteeringPolicy policy;
        double prompt_distance = 0.0;
        double max_paraphrase_distance = 0.0;
        double min_probe_distance = 0.0;
        bool prompt_in_scope = false;
    };
    std::vector<FitResult> results(cases.size());

    parallel_for(cases.size(), config.threads, [&](size_t i) {
        FitResult& r = results[i];
        const eval::EditCase& c = cases[i];
        try {
            r.policy = steer::fit_policy(m, tok, c, config.policy_config(config.dataset.seed));
            steer::ScopeResult sr = steer::in_scope(r.policy.detector, m, tok, c.prompt);
            r.prompt_distance = sr.distance;
            r.prompt_in_scope = sr.in_scope;
            for (const std::string& p : c.paraphrase_prompts) {
                r.max_paraphrase_distance =
                    std::max(r.max_paraphrase_distance,
                             steer::in_scope(r.policy.detector, m, tok, p).distance);
            }
            r.min_probe_distance = 1e300;
            for (const eval::LocalityProbe& p : c.locality_probes) {
                r.min_probe_distance =
                    std::min(r.min_probe_distance,
                             steer::in_scope(r.policy.detector, m, tok, p.prompt).distance);
            }
            if (c.locality_probes.empty()) r.min_probe_distance = 0.0;
            r.ok = true;
        } catch (const std::exception& e) {
            r.error = e.what();
        }
    });

    std::vector<CaseFailure> failures;
    json manifest_entries = json::array();
    for (size_t i = 0; i < cases.size(); ++i) {
        const FitResult& r = results[i];
        if (!r.ok) {
            failures.push_back({cases[i].case_id, r.error});
            continue;
        }
        const std::string path = policy_path(config.output.dir, cases[i].case_id);
        steer::save_policy(path, r.policy);
        manifest_entries.push_back({{"case_id", cases[i].case_id},
                                    {"file", fs::path(path).filename().string()},
                                    {"tau", r.policy.tau},
                                    {"k_effective", r.policy.k_effective},
                                    {"prompt_distance", r.prompt_distance},
                                    {"prompt_in_scope", r.prompt_in_scope},
                                    {"max_paraphrase_distance", r.max_paraphrase_distance},
                                    {"min_probe_distance", r.min_probe_distance}});
    }

    json manifest;
    manifest["window"] = {config.steering.window_lo, config.steering.window_hi};
    manifest["component"] = config.steering.component;
    manifest["k"] = config.steering.k;
    manifest["lambda"] = config.steering.lambda;
    manifest["tau"] = config.steering.tau;
    manifest["seed"] = config.dataset.seed;
    manifest["policies"] = std::move(manifest_entries);
    {
        std::ofstream out(fs::path(config.output.dir) / "steer_manifest.json", std::ios::trunc);
        out << manifest.dump(2) << "\n";
    }

    log << "steer-fit: " << cases.size() - failures.size() << "/" << cases.size()
        << " policies -> " << config.output.dir << "\n";
    return finish(failures, err);
}

int cmd_eval(const RunConfig& config, EvalMode mode, const std::string& policies_dir,
             std::ostream& log, std::ostream& err) {
    config.validate();
    const model::Model m = load_model(config.model);
    const model::Tokenizer tok = make_tokenizer(config.model.tokenizer);
    const std::vector<eval::EditCase> cases = load_dataset(config);
    fs::create_directories(config.output.dir);

    bool ripple_mode = false;
    for (const eval::EditCase& c : cases) {
        if (!c.ripple_tests.empty()) ripple_mode = true;
    }

    struct EvalResult {
        bool ok = false;
        std::string error;
        eval::CaseMetrics metrics;
    };
    std::vector<EvalResult> results(cases.size());
    const eval::BaseSystem base_sys(m, tok);

    parallel_for(cases.size(), config.threads, [&](size_t i) {
        EvalResult& r = results[i];
        const eval::EditCase& c = cases[i];
        try {
            std::unique_ptr<eval::System> system;
            steer::SteeringPolicy policy;
            switch (mode) {
                case EvalMode::BaselineNone:
                    system = std::make_unique<eval::BaseSystem>(m, tok);
                    break;
                case EvalMode::BaselineIke:
                    system = std::make_unique<eval::IkeSystem>(m, tok, c);
                    break;
                case EvalMode::Policies: {
                    policy = steer::load_policy(policy_path(policies_dir, c.case_id));
                    system = std::make_unique<eval::SteeredSystem>(m, tok, policy);
                    break;
                }
            }
            eval::CounterfactResult cf = eval::eval_counterfact(*system, base_sys, c);
            if (ripple_mode && !c.ripple_tests.empty()) {
                eval::RippleResult rr = eval::eval_ripple(*system, base_sys, c);
                r.metrics = eval::ripple_metrics(cf.acc, rr);
            } else if (ripple_mode) {
                r.metrics = {{"Acc", cf.acc ? 1.0 : 0.0}};
            } else {
                r.metrics = eval::counterfact_metrics(cf);
            }
            r.ok = true;
        } catch (const std::exception& e) {
            r.error = e.what();
        }
    });

    std::vector<CaseFailure> failures;
    std::vector<eval::CaseMetrics> per_case;
    json per_case_json = json::array();
    for (size_t i = 0; i < cases.size(); ++i) {
        if (!results[i].ok) {
            failures.push_back({cases[i].case_id, results[i].error});
            continue;
        }
        per_case.push_back(results[i].metrics);
        json scores = json::object();
        for (const auto& [name, value] : results[i].metrics) scores[name] = value;
        per_case_json.push_back({{"case_id", cases[i].case_id}, {"scores", std::move(scores)}});
    }
    if (per_case.empty()) {
        err << "eval: no case evaluated successfully\n";
        return finish(failures, err) == 0 ? 1 : 1;
    }

    std::string desc;
    switch (mode) {
        case EvalMode::BaselineNone: desc = "base"; break;
        case EvalMode::BaselineIke: desc = "ike"; break;
        case EvalMode::Policies:
            desc = "mega w=" + std::to_string(config.steering.window_lo) + "-" +
                   std::to_string(config.steering.window_hi) + " " + config.steering.component +
                   " k=" + std::to_string(config.steering.k);
            break;
    }
    eval::MetricReport report = eval::aggregate_report(
        per_case, ripple_mode ? eval::kRippleMetricSet : eval::kCounterfactMetricSet, desc);

    const std::string table = eval::render_report_table(report);
    log << table;
    {
        std::ofstream out(fs::path(config.output.dir) / "eval_report.json", std::ios::trunc);
        out << eval::report_to_json(report);
        std::ofstream per_out(fs::path(config.output.dir) / "eval_per_case.json",
                              std::ios::trunc);
        per_out << per_case_json.dump(2) << "\n";
        std::ofstream table_out(fs::path(config.output.dir) / "eval_report.txt", std::ios::trunc);
        table_out << table;
    }
    return finish(failures, err);
}

int cmd_report(const std::vector<std::string>& csv_paths, const std::string& out_dir,
               std::ostream& log, std::ostream& err) {
    (void)err;
    fs::create_directories(out_dir);
    for (const std::string& csv_path : csv_paths) {
        std::ifstream in(csv_path);
        if (!in) throw Error("report: cannot open " + csv_path);
        std::string line;
        if (!std::getline(in, line)) throw Error("report: empty CSV " + csv_path);
        if (split_csv_line(line) !=
            std::vector<std::string>{"case_id", "layer", "component", "token_role", "c_base",
                                     "c_edit", "delta"}) {
            throw Error("report: unexpected CSV header in " + csv_path);
        }
        // role -> layer -> (sum attn, sum ffn, count attn, count ffn)
        std::map<std::string, std::map<size_t, std::array<double, 4>>> grouped;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> cells = split_csv_line(line);
            if (cells.size() != 7) throw Error("report: malformed row in " + csv_path);
            size_t layer = size_t(std::stoul(cells[1]));
            size_t comp = cells[2] == "attn" ? 0 : 1;
            double delta = std::stod(cells[6]);
            auto& slot = grouped[cells[3]][layer];
            slot[comp] += delta;
            slot[2 + comp] += 1.0;
        }
        for (const auto& [role, layers] : grouped) {
            std::map<size_t, std::array<double, 2>> means;
            for (const auto& [layer, sums] : layers) {
                means[layer] = {sums[2] > 0 ? sums[0] / sums[2] : 0.0,
                                sums[3] > 0 ? sums[1] / sums[3] : 0.0};
            }
            const std::string stem = fs::path(csv_path).stem().string();
            const std::string out_path =
                (fs::path(out_dir) / (stem + "." + role + ".svg")).string();
            write_profile_svg(out_path, role, means);
            log << "report: wrote " << out_path << "\n";
        }
    }
    return 0;
}

int cmd_gen_toy(const std::string& out_dir, uint64_t seed, size_t n_cases, std::ostream& log,
                std::ostream& err) {
    (void)err;
    ToyGenResult r = generate_toy(out_dir, seed, n_cases);
    log << "gen-toy: wrote " << r.model_path << ", " << r.dataset_path << " (" << r.n_cases
        << " cases), " << r.config_path << " (tau " << r.tau << ", min flip margin "
        << r.min_flip_margin << ")\n";
    return 0;
}

int cmd_convert(const std::string& in_path, const std::string& out_path, std::ostream& log,
                std::ostream& err) {
    (void)err;
    size_t n = eval::convert_easyedit_counterfact(in_path, out_path);
    log << "convert: wrote " << n << " cases to " << out_path << "\n";
    return 0;
}

} // namespace mega::cli
