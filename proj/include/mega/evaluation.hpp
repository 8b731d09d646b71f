#pragma once

#include "mega/dataset.hpp"
#include "mega/model.hpp"
#include "mega/steering.hpp"
#include "mega/tokenizer.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mega::eval {

// Anything that can answer a prompt with a greedy continuation.
class System {
public:
    virtual ~System() = default;
    virtual std::string name() const = 0;
    virtual std::string answer(const std::string& prompt, size_t max_new) const = 0;
};

// The unedited model.
class BaseSystem final : public System {
public:
    BaseSystem(const model::Model& m, const model::Tokenizer& tok) : model_(m), tok_(tok) {}
    std::string name() const override { return "base"; }
    std::string answer(const std::string& prompt, size_t max_new) const override;

private:
    const model::Model& model_;
    const model::Tokenizer& tok_;
};

// In-context editing: every query is prefixed with the case's edit context.
class IkeSystem final : public System {
public:
    IkeSystem(const model::Model& m, const model::Tokenizer& tok, const EditCase& edit_case)
        : model_(m), tok_(tok), case_(edit_case) {}
    std::string name() const override { return "ike"; }
    std::string answer(const std::string& prompt, size_t max_new) const override;

private:
    const model::Model& model_;
    const model::Tokenizer& tok_;
    const EditCase& case_;
};

// Scope-gated activation steering.
class SteeredSystem final : public System {
public:
    SteeredSystem(const model::Model& m, const model::Tokenizer& tok,
                  const steer::SteeringPolicy& policy)
        : model_(m), tok_(tok), policy_(policy) {}
    std::string name() const override { return "mega"; }
    std::string answer(const std::string& prompt, size_t max_new) const override;

private:
    const model::Model& model_;
    const model::Tokenizer& tok_;
    const steer::SteeringPolicy& policy_;
};

// Trim, casefold (ASCII), collapse whitespace runs to single spaces.
std::string normalize_answer(const std::string& s);

// Greedy-decodes up to max_new tokens and tests whether the normalized
// continuation starts with the normalized expected string.
bool answer_match(const System& system, const std::string& prompt, const std::string& expected,
                  size_t max_new = 8);

struct DoubtPrompts {
    std::string di, dii;
};
DoubtPrompts make_doubt_prompts(const EditCase& edit_case);
DoubtPrompts make_doubt_prompts(const std::string& prompt, const std::string& ground_truth,
                                const std::string& target_new);

// successes / attempts; a metric with zero attempts is absent.
struct Fraction {
    size_t hits = 0;
    size_t attempts = 0;
    bool present() const { return attempts > 0; }
    double value() const { return attempts ? double(hits) / double(attempts) : 0.0; }
};

struct CounterfactResult {
    bool acc = false;
    Fraction gen;  // paraphrases answering target_new
    Fraction spec; // locality probes agreeing with the base model
    bool di = false, dii = false;
};
CounterfactResult eval_counterfact(const System& system, const System& base,
                                   const EditCase& edit_case, size_t max_new = 8);

struct RippleResult {
    Fraction ci, cii, rs, sa;
};
// Throws when the case carries no ripple tests at all.
RippleResult eval_ripple(const System& system, const System& base, const EditCase& edit_case,
                         size_t max_new = 8);

// One case's metric values; absent metrics are simply missing.
using CaseMetrics = std::vector<std::pair<std::string, double>>;

CaseMetrics counterfact_metrics(const CounterfactResult& r);
CaseMetrics ripple_metrics(bool acc, const RippleResult& r);

extern const std::vector<std::string> kCounterfactMetricSet; // Acc Gen Spec DI DII
extern const std::vector<std::string> kRippleMetricSet;      // Acc CI CII RS SA

struct MetricReport {
    // metric -> (mean score, cases contributing); ordered per the metric set
    std::vector<std::string> metric_names;
    std::map<std::string, double> scores;
    std::map<std::string, size_t> counts;
    double avg = 0.0;
    size_t n_cases = 0;
    std::string config_desc;

    bool has(const std::string& metric) const { return scores.count(metric) > 0; }
};

MetricReport aggregate_report(const std::vector<CaseMetrics>& per_case,
                              const std::vector<std::string>& metric_set,
                              const std::string& config_desc = {});

// Aligned table with 2-decimal display; the JSON keeps full precision.
std::string render_report_table(const MetricReport& report);
std::string report_to_json(const MetricReport& report);

} // namespace mega::eval
