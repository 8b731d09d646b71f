#pragma once

#include "mega/model.hpp"
#include "mega/tokenizer.hpp"

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mega::attr {

enum class TokenRole { TargetNew, GroundTruth };
const char* token_role_name(TokenRole role);

// Per-layer contribution of the attention and FFN outputs to log p(y),
// measured by the log-probability change when each component's output is
// added to the residual state preceding it. Purely observational.
struct ContributionProfile {
    int token_id = -1;
    TokenRole role = TokenRole::TargetNew;
    // c[l][0]: attention, c[l][1]: ffn
    std::vector<std::array<double, 2>> c;
    double baseline_logprob = 0.0; // log p(y | lin_0)
    double final_logprob = 0.0;    // log p(y | lout_{L-1})

    size_t n_layers() const { return c.size(); }
    // Telescopes to final_logprob - baseline_logprob.
    double total() const;
};

// Edited-minus-base contribution differences, same layout as the profiles.
struct DeltaProfile {
    int token_id = -1;
    TokenRole role = TokenRole::TargetNew;
    std::vector<std::array<double, 2>> delta;

    size_t n_layers() const { return delta.size(); }
};

enum class Outcome { Successful, Failed, Excluded };
const char* outcome_name(Outcome o);

ContributionProfile contribution_profile(const model::Model& m, std::span<const int> tokens,
                                         size_t position, int token_id, TokenRole role);

// Same scores computed from an existing trace; used to attribute both tracked
// tokens over a single forward pass.
ContributionProfile contribution_profile_from_trace(const model::Model& m,
                                                    const model::ResidualTrace& trace,
                                                    int token_id, TokenRole role);

DeltaProfile delta_profile(const ContributionProfile& base, const ContributionProfile& edited);

// Successful iff acc_post > acc_pre and acc_post >= 0.9; cases the model
// already answered correctly pre-edit are excluded as outliers.
Outcome classify_outcome(double acc_pre, double acc_post, bool pre_correct);

struct AggregateDelta {
    DeltaProfile mean;
    size_t count = 0;
};

// Elementwise arithmetic mean over the profiles matching `role_filter`
// (all roles when unset). Throws on an empty selection or ragged shapes.
AggregateDelta aggregate_deltas(const std::vector<DeltaProfile>& profiles,
                                std::optional<TokenRole> role_filter = std::nullopt);

// In-context editing prefix:
//   [demos]\nNew Fact: {prompt} {target_new}\nPrompt: {query}
// with single-newline separators; demos are preformatted lines. Attribution
// over the returned string is taken at its last token.
std::string build_ike_context(const std::vector<std::string>& demos, const std::string& prompt,
                              const std::string& target_new, const std::string& query_prompt);
std::string build_ike_context(const std::vector<std::string>& demos, const std::string& prompt,
                              const std::string& target_new);

// Token tracked for a multi-token answer string: its first token. In BPE
// mode a leading space is inserted when the prompt does not already end in
// whitespace, matching how the answer would actually continue the prompt.
int first_answer_token(const model::Tokenizer& tok, const std::string& prompt,
                       const std::string& answer);

// CSV rows: case_id,layer,component,token_role,c_base,c_edit,delta with
// floats at 6 significant digits.
void write_delta_csv_header(std::ostream& out);
void write_delta_csv_rows(std::ostream& out, const std::string& case_id,
                          const ContributionProfile& base, const ContributionProfile& edited);

} // namespace mega::attr
