#include "mega/evaluation.hpp"

#include "mega/attribution.hpp"

#include <nlohmann/json.hpp>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace mega::eval {

using nlohmann::json;

std::string BaseSystem::answer(const std::string& prompt, size_t max_new) const {
    std::vector<int> ids = tok_.encode(prompt);
    if (ids.empty()) throw Error("answer: prompt tokenizes to nothing");
    return tok_.decode(model_.greedy_decode(ids, max_new));
}

std::string IkeSystem::answer(const std::string& prompt, size_t max_new) const {
    std::string extended = attr::build_ike_context({}, case_.prompt, case_.target_new, prompt);
    std::vector<int> ids = tok_.encode(extended);
    return tok_.decode(model_.greedy_decode(ids, max_new));
}

std::string SteeredSystem::answer(const std::string& prompt, size_t max_new) const {
    std::vector<int> ids = tok_.encode(prompt);
    if (ids.empty()) throw Error("answer: prompt tokenizes to nothing");
    return tok_.decode(steer::steered_decode(model_, policy_, ids, max_new));
}

std::string normalize_answer(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (unsigned char c : s) {
        if (std::isspace(c)) {
            if (!out.empty()) pending_space = true;
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(char(std::tolower(c)));
    }
    return out;
}

bool answer_match(const System& system, const std::string& prompt, const std::string& expected,
                  size_t max_new) {
    if (expected.empty()) throw Error("answer_match: empty expected string");
    std::string got = normalize_answer(system.answer(prompt, max_new));
    std::string want = normalize_answer(expected);
    return got.rfind(want, 0) == 0;
}

DoubtPrompts make_doubt_prompts(const std::string& prompt, const std::string& ground_truth,
                                const std::string& target_new) {
    if (prompt.empty()) throw Error("make_doubt_prompts: empty prompt");
    if (target_new.empty()) throw Error("make_doubt_prompts: empty target_new");
    if (ground_truth.empty()) throw Error("make_doubt_prompts: empty ground_truth");
    DoubtPrompts d;
    d.di = prompt + ", " + target_new +
           " ??? No, it can't be, this contradicts my understanding. It is pretty clear that "
           "the answer to " +
           prompt + " is something else. Rethink and give the correct answer:";
    d.dii = prompt + ", " + target_new + "? Really? But I am pretty sure that " + prompt + " " +
            ground_truth +
            ". Am I right? Yes, you are right. I apologize for any confusion. Reconsider that "
            "the answer to " +
            prompt + " should be:";
    return d;
}

DoubtPrompts make_doubt_prompts(const EditCase& edit_case) {
    return make_doubt_prompts(edit_case.prompt, edit_case.ground_truth, edit_case.target_new);
}

CounterfactResult eval_counterfact(const System& system, const System& base,
                                   const EditCase& edit_case, size_t max_new) {
    edit_case.validate();
    CounterfactResult r;
    r.acc = answer_match(system, edit_case.prompt, edit_case.target_new, max_new);
    for (const std::string& p : edit_case.paraphrase_prompts) {
        r.gen.attempts++;
        if (answer_match(system, p, edit_case.target_new, max_new)) r.gen.hits++;
    }
    for (const LocalityProbe& probe : edit_case.locality_probes) {
        r.spec.attempts++;
        std::string sys_ans = normalize_answer(system.answer(probe.prompt, max_new));
        std::string base_ans = normalize_answer(base.answer(probe.prompt, max_new));
        if (sys_ans == base_ans) r.spec.hits++;
    }
    DoubtPrompts doubt = make_doubt_prompts(edit_case);
    r.di = answer_match(system, doubt.di, edit_case.target_new, max_new);
    r.dii = answer_match(system, doubt.dii, edit_case.target_new, max_new);
    return r;
}

namespace {

Fraction match_any_fraction(const System& system, const std::vector<RippleTest>& tests,
                            size_t max_new) {
    Fraction f;
    for (const RippleTest& t : tests) {
        f.attempts++;
        std::string got = normalize_answer(system.answer(t.prompt, max_new));
        for (const std::string& acceptable : t.answers) {
            if (!acceptable.empty() && got.rfind(normalize_answer(acceptable), 0) == 0) {
                f.hits++;
                break;
            }
        }
    }
    return f;
}

} // namespace

RippleResult eval_ripple(const System& system, const System& base, const EditCase& edit_case,
                         size_t max_new) {
    if (edit_case.ripple_tests.empty()) {
        throw Error("eval_ripple: case " + edit_case.case_id + " has no ripple tests");
    }
    RippleResult r;
    r.ci = match_any_fraction(system, edit_case.ripple_tests.ci, max_new);
    r.cii = match_any_fraction(system, edit_case.ripple_tests.cii, max_new);
    r.sa = match_any_fraction(system, edit_case.ripple_tests.sa, max_new);
    for (const RippleTest& t : edit_case.ripple_tests.rs) {
        r.rs.attempts++;
        std::string sys_ans = normalize_answer(system.answer(t.prompt, max_new));
        std::string base_ans = normalize_answer(base.answer(t.prompt, max_new));
        if (sys_ans == base_ans) r.rs.hits++;
    }
    return r;
}

const std::vector<std::string> kCounterfactMetricSet = {"Acc", "Gen", "Spec", "DI", "DII"};
const std::vector<std::string> kRippleMetricSet = {"Acc", "CI", "CII", "RS", "SA"};

CaseMetrics counterfact_metrics(const CounterfactResult& r) {
    CaseMetrics m;
    m.emplace_back("Acc", r.acc ? 1.0 : 0.0);
    if (r.gen.present()) m.emplace_back("Gen", r.gen.value());
    if (r.spec.present()) m.emplace_back("Spec", r.spec.value());
    m.emplace_back("DI", r.di ? 1.0 : 0.0);
    m.emplace_back("DII", r.dii ? 1.0 : 0.0);
    return m;
}

CaseMetrics ripple_metrics(bool acc, const RippleResult& r) {
    CaseMetrics m;
    m.emplace_back("Acc", acc ? 1.0 : 0.0);
    if (r.ci.present()) m.emplace_back("CI", r.ci.value());
    if (r.cii.present()) m.emplace_back("CII", r.cii.value());
    if (r.rs.present()) m.emplace_back("RS", r.rs.value());
    if (r.sa.present()) m.emplace_back("SA", r.sa.value());
    return m;
}

MetricReport aggregate_report(const std::vector<CaseMetrics>& per_case,
                              const std::vector<std::string>& metric_set,
                              const std::string& config_desc) {
    if (per_case.empty()) throw Error("aggregate_report: no cases");
    MetricReport report;
    report.metric_names = metric_set;
    report.n_cases = per_case.size();
    report.config_desc = config_desc;

    for (const std::string& metric : metric_set) {
        double sum = 0.0;
        size_t count = 0;
        for (const CaseMetrics& cm : per_case) {
            for (const auto& [name, value] : cm) {
                if (name != metric) continue;
                if (value < 0.0 || value > 1.0) {
                    throw Error("aggregate_report: metric " + name + " out of [0,1]");
                }
                sum += value;
                ++count;
            }
        }
        if (count > 0) {
            report.scores[metric] = sum / double(count);
            report.counts[metric] = count;
        }
    }
    if (report.scores.empty()) throw Error("aggregate_report: no metrics present");

    double total = 0.0;
    for (const std::string& metric : metric_set) {
        if (report.has(metric)) total += report.scores.at(metric);
    }
    report.avg = total / double(report.scores.size());
    return report;
}

std::string render_report_table(const MetricReport& report) {
    auto cell = [](double v) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.2f", v);
        return std::string(buf);
    };
    std::ostringstream out;
    out << "config";
    size_t head_w = std::max<size_t>(report.config_desc.size(), 6);
    for (size_t i = 6; i < head_w; ++i) out << ' ';
    for (const std::string& m : report.metric_names) {
        out << "  " << m;
        for (size_t i = m.size(); i < 5; ++i) out << ' ';
    }
    out << "  Avg\n";
    out << report.config_desc;
    for (size_t i = report.config_desc.size(); i < head_w; ++i) out << ' ';
    for (const std::string& m : report.metric_names) {
        std::string v = report.has(m) ? cell(report.scores.at(m)) : "--";
        out << "  " << v;
        for (size_t i = v.size(); i < 5; ++i) out << ' ';
    }
    out << "  " << cell(report.avg) << '\n';
    return out.str();
}

std::string report_to_json(const MetricReport& report) {
    json j;
    j["config"] = report.config_desc;
    j["n_cases"] = report.n_cases;
    json metrics = json::object();
    for (const std::string& m : report.metric_names) {
        if (report.has(m)) {
            metrics[m] = {{"score", report.scores.at(m)}, {"cases", report.counts.at(m)}};
        } else {
            metrics[m] = nullptr;
        }
    }
    j["metrics"] = std::move(metrics);
    j["avg"] = report.avg;
    return j.dump(2) + "\n";
}

} // namespace mega::eval
