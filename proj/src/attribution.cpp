#include "mega/attribution.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

namespace mega::attr {

const char* token_role_name(TokenRole role) {
    return role == TokenRole::TargetNew ? "target_new" : "ground_truth";
}

const char* outcome_name(Outcome o) {
    switch (o) {
        case Outcome::Successful: return "successful";
        case Outcome::Failed: return "failed";
        case Outcome::Excluded: return "excluded";
    }
    return "?";
}

double ContributionProfile::total() const {
    double acc = 0.0;
    for (const auto& row : c) acc += row[0] + row[1];
    return acc;
}

ContributionProfile contribution_profile_from_trace(const model::Model& m,
                                                    const model::ResidualTrace& trace,
                                                    int token_id, TokenRole role) {
    ContributionProfile p;
    p.token_id = token_id;
    p.role = role;
    p.c.resize(trace.layers.size());
    p.baseline_logprob = m.logprob_from_state(trace.lin0(), token_id);

    double prev = p.baseline_logprob;
    for (size_t l = 0; l < trace.layers.size(); ++l) {
        const model::LayerSnapshot& snap = trace.layers[l];
        double at_lres = m.logprob_from_state(snap.lres, token_id);
        double at_lout = m.logprob_from_state(snap.lout, token_id);
        p.c[l][0] = at_lres - prev;   // attention: lin -> lres
        p.c[l][1] = at_lout - at_lres; // ffn: lres -> lout
        prev = at_lout;
    }
    p.final_logprob = prev;
    return p;
}

ContributionProfile contribution_profile(const model::Model& m, std::span<const int> tokens,
                                         size_t position, int token_id, TokenRole role) {
    model::ResidualTrace trace = m.forward_trace(tokens, position);
    return contribution_profile_from_trace(m, trace, token_id, role);
}

DeltaProfile delta_profile(const ContributionProfile& base, const ContributionProfile& edited) {
    if (base.token_id != edited.token_id) {
        throw Error("delta_profile: token mismatch (" + std::to_string(base.token_id) + " vs " +
                    std::to_string(edited.token_id) + ")");
    }
    if (base.role != edited.role) throw Error("delta_profile: role mismatch");
    if (base.n_layers() != edited.n_layers()) {
        throw Error("delta_profile: layer count mismatch (" + std::to_string(base.n_layers()) +
                    " vs " + std::to_string(edited.n_layers()) + ")");
    }
    DeltaProfile d;
    d.token_id = base.token_id;
    d.role = base.role;
    d.delta.resize(base.n_layers());
    for (size_t l = 0; l < base.n_layers(); ++l) {
        d.delta[l][0] = edited.c[l][0] - base.c[l][0];
        d.delta[l][1] = edited.c[l][1] - base.c[l][1];
    }
    return d;
}

Outcome classify_outcome(double acc_pre, double acc_post, bool pre_correct) {
    if (acc_pre < 0.0 || acc_pre > 1.0 || acc_post < 0.0 || acc_post > 1.0) {
        throw Error("classify_outcome: accuracies must lie in [0,1]");
    }
    if (pre_correct) return Outcome::Excluded;
    if (acc_post > acc_pre && acc_post >= 0.9) return Outcome::Successful;
    return Outcome::Failed;
}

AggregateDelta aggregate_deltas(const std::vector<DeltaProfile>& profiles,
                                std::optional<TokenRole> role_filter) {
    AggregateDelta agg;
    for (const DeltaProfile& p : profiles) {
        if (role_filter && p.role != *role_filter) continue;
        if (agg.count == 0) {
            agg.mean.role = p.role;
            agg.mean.delta.assign(p.n_layers(), {0.0, 0.0});
        } else if (p.n_layers() != agg.mean.n_layers()) {
            throw Error("aggregate_deltas: profiles have mismatched layer counts");
        }
        for (size_t l = 0; l < p.n_layers(); ++l) {
            agg.mean.delta[l][0] += p.delta[l][0];
            agg.mean.delta[l][1] += p.delta[l][1];
        }
        ++agg.count;
    }
    if (agg.count == 0) throw Error("aggregate_deltas: empty selection");
    for (auto& row : agg.mean.delta) {
        row[0] /= double(agg.count);
        row[1] /= double(agg.count);
    }
    return agg;
}

std::string build_ike_context(const std::vector<std::string>& demos, const std::string& prompt,
                              const std::string& target_new, const std::string& query_prompt) {
    if (prompt.empty()) throw Error("build_ike_context: empty prompt");
    if (target_new.empty()) throw Error("build_ike_context: empty target");
    std::string out;
    for (const std::string& demo : demos) {
        out += demo;
        out += '\n';
    }
    out += "New Fact: " + prompt + " " + target_new + "\n";
    out += "Prompt: " + query_prompt;
    return out;
}

std::string build_ike_context(const std::vector<std::string>& demos, const std::string& prompt,
                              const std::string& target_new) {
    return build_ike_context(demos, prompt, target_new, prompt);
}

int first_answer_token(const model::Tokenizer& tok, const std::string& prompt,
                       const std::string& answer) {
    if (answer.empty()) throw Error("first_answer_token: empty answer");
    std::string text = answer;
    if (tok.mode() == model::TokenizerMode::Bpe && !prompt.empty() &&
        !std::isspace(static_cast<unsigned char>(prompt.back())) &&
        !std::isspace(static_cast<unsigned char>(answer.front()))) {
        text = " " + answer;
    }
    std::vector<int> ids = tok.encode(text);
    if (ids.empty()) throw Error("first_answer_token: answer tokenizes to nothing");
    return ids.front();
}

namespace {

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

} // namespace

void write_delta_csv_header(std::ostream& out) {
    out << "case_id,layer,component,token_role,c_base,c_edit,delta\n";
}

void write_delta_csv_rows(std::ostream& out, const std::string& case_id,
                          const ContributionProfile& base, const ContributionProfile& edited) {
    DeltaProfile d = delta_profile(base, edited);
    static const char* kComponents[2] = {"attn", "ffn"};
    for (size_t l = 0; l < base.n_layers(); ++l) {
        for (size_t comp = 0; comp < 2; ++comp) {
            out << case_id << ',' << l << ',' << kComponents[comp] << ','
                << token_role_name(base.role) << ',' << fmt6(base.c[l][comp]) << ','
                << fmt6(edited.c[l][comp]) << ',' << fmt6(d.delta[l][comp]) << '\n';
        }
    }
}

} // namespace mega::attr
