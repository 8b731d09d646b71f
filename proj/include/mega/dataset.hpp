#pragma once

#include <string>
#include <vector>

namespace mega::eval {

struct LocalityProbe {
    std::string prompt;
    std::string answer;
};

struct RippleTest {
    std::string prompt;
    std::vector<std::string> answers; // any acceptable answer counts
};

struct RippleTests {
    std::vector<RippleTest> ci, cii, rs, sa;
    bool empty() const { return ci.empty() && cii.empty() && rs.empty() && sa.empty(); }
};

// One knowledge-editing record: rewrite fact (e, r, o) -> (e, r, o*), its
// paraphrases, locality probes, and optional ripple tests.
struct EditCase {
    std::string case_id;
    std::string prompt;
    std::string subject;
    std::string ground_truth; // o
    std::string target_new;   // o*
    std::vector<std::string> paraphrase_prompts;
    std::vector<LocalityProbe> locality_probes;
    RippleTests ripple_tests;
    std::vector<std::string> implication_prompts;

    void validate() const; // prompt non-empty, target_new != ground_truth
};

enum class Sampling { FirstN, Random };

// JSONL, one case per line; absent keys default to empty lists.
std::vector<EditCase> load_cases_jsonl(const std::string& path);
void save_cases_jsonl(const std::string& path, const std::vector<EditCase>& cases);

// First-n or seeded random subset, preserving file order within the sample.
std::vector<EditCase> sample_cases(std::vector<EditCase> cases, size_t limit, Sampling sampling,
                                   uint64_t seed);

// Converts an EasyEdit CounterFact-style JSON array (rephrase_prompt,
// locality_prompt / locality_ground_truth, flat or requested_rewrite layout)
// into the JSONL schema above. Returns the number of cases written.
size_t convert_easyedit_counterfact(const std::string& in_path, const std::string& out_path);

} // namespace mega::eval
