#include "mega/attribution.hpp"
#include "mega/rng.hpp"

#include "test_helpers.hpp"

#include <doctest.h>

#include <cmath>

using namespace mega;
using attr::ContributionProfile;
using attr::DeltaProfile;
using attr::TokenRole;
using model::Model;
using model::ModelConfig;
using num::Rng;
using num::TensorF32;

namespace {

// Independent readout: log softmax(head(ln_f(h)))[y] computed from scratch.
double readout_oracle(const model::ModelWeights& w, float ln_eps,
                      const std::vector<float>& h, int y) {
    const size_t d = h.size();
    double mean = 0.0;
    for (float v : h) mean += v;
    mean /= double(d);
    double var = 0.0;
    for (float v : h) var += (v - mean) * (v - mean);
    var /= double(d);
    std::vector<double> normed(d);
    for (size_t j = 0; j < d; ++j) {
        normed[j] = (double(h[j]) - mean) / std::sqrt(var + double(ln_eps)) *
                        double(w.ln_f_w.data[j]) +
                    double(w.ln_f_b.data[j]);
    }
    const TensorF32& head = w.lm_head ? *w.lm_head : w.wte;
    std::vector<double> logits(head.rows());
    for (size_t v = 0; v < head.rows(); ++v) {
        double acc = 0.0;
        for (size_t j = 0; j < d; ++j) acc += normed[j] * double(head.at(v, j));
        logits[v] = acc;
    }
    double mx = -1e300;
    for (double v : logits) mx = std::max(mx, v);
    double lse = 0.0;
    for (double v : logits) lse += std::exp(v - mx);
    return logits[size_t(y)] - mx - std::log(lse);
}

DeltaProfile random_delta(Rng& rng, size_t layers, TokenRole role) {
    DeltaProfile d;
    d.role = role;
    d.token_id = 1;
    d.delta.resize(layers);
    for (auto& row : d.delta) {
        row[0] = rng.normal();
        row[1] = rng.normal();
    }
    return d;
}

} // namespace

TEST_CASE("telescoping identity: contributions sum to the end-to-end lift") {
    Model m = test::make_toy_model(42);
    Rng rng(99);
    for (int iter = 0; iter < 20; ++iter) {
        std::vector<int> tokens(6 + rng.below(6));
        for (int& t : tokens) t = int(rng.below(m.config().vocab_size));
        int y = int(rng.below(m.config().vocab_size));
        ContributionProfile p =
            attr::contribution_profile(m, tokens, tokens.size() - 1, y, TokenRole::TargetNew);

        // Oracle: two direct readouts of the trace endpoints.
        model::ResidualTrace tr = m.forward_trace(tokens, tokens.size() - 1);
        double lo = m.logprob_from_state(tr.lin0(), y);
        double hi = m.logprob_from_state(tr.final_state(), y);
        CHECK(std::fabs(p.total() - (hi - lo)) <= 1e-4);
        CHECK(p.baseline_logprob == doctest::Approx(lo));
        CHECK(p.final_logprob == doctest::Approx(hi));
    }
}

TEST_CASE("zeroed attention output means zero attention contributions") {
    ModelConfig config;
    config.n_layers = 3;
    config.d_model = 8;
    config.n_heads = 2;
    config.d_ff = 16;
    config.vocab_size = 32;
    config.max_positions = 16;
    model::ModelWeights w = test::zero_weights(config);
    Rng rng(8);
    for (float& v : w.wte.data) v = float(rng.normal());
    for (float& v : w.wpe.data) v = float(rng.normal());
    for (auto& lw : w.layers) {
        for (float& v : lw.fc_w.data) v = float(0.3 * rng.normal());
        for (float& v : lw.ffn_proj_w.data) v = float(0.3 * rng.normal());
    }
    Model m = Model::from_weights(std::move(w), config);
    std::vector<int> tokens = {3, 1, 4};
    ContributionProfile p = attr::contribution_profile(m, tokens, 2, 7, TokenRole::TargetNew);
    for (size_t l = 0; l < p.n_layers(); ++l) {
        CHECK(std::fabs(p.c[l][0]) <= 1e-6);
    }
}

TEST_CASE("one-layer contributions match an independent readout oracle") {
    ModelConfig config;
    config.n_layers = 1;
    config.d_model = 6;
    config.n_heads = 2;
    config.d_ff = 12;
    config.vocab_size = 24;
    config.max_positions = 8;
    model::ModelWeights w = test::zero_weights(config);
    Rng rng(55);
    for (float& v : w.wte.data) v = float(rng.normal());
    for (float& v : w.wpe.data) v = float(rng.normal());
    for (auto& lw : w.layers) {
        for (float& v : lw.qkv_w.data) v = float(0.4 * rng.normal());
        for (float& v : lw.attn_proj_w.data) v = float(0.4 * rng.normal());
        for (float& v : lw.fc_w.data) v = float(0.4 * rng.normal());
        for (float& v : lw.ffn_proj_w.data) v = float(0.4 * rng.normal());
    }
    Model m = Model::from_weights(std::move(w), config);
    std::vector<int> tokens = {2, 9, 17};
    const int y = 5;
    model::ResidualTrace tr = m.forward_trace(tokens, 2);
    ContributionProfile p = attr::contribution_profile_from_trace(m, tr, y, TokenRole::TargetNew);

    double at_lin = readout_oracle(m.weights(), m.config().ln_eps, tr.layers[0].lin, y);
    double at_lres = readout_oracle(m.weights(), m.config().ln_eps, tr.layers[0].lres, y);
    double at_lout = readout_oracle(m.weights(), m.config().ln_eps, tr.layers[0].lout, y);
    CHECK(p.c[0][0] == doctest::Approx(at_lres - at_lin).epsilon(1e-5));
    CHECK(p.c[0][1] == doctest::Approx(at_lout - at_lres).epsilon(1e-5));
}

TEST_CASE("observational purity: profiling does not disturb the model") {
    Model m = test::make_toy_model(10);
    std::vector<int> tokens = {9, 8, 7};
    std::vector<float> before = m.forward_logits(tokens, 2);
    for (int i = 0; i < 3; ++i) {
        (void)attr::contribution_profile(m, tokens, 2, i + 1, TokenRole::TargetNew);
    }
    CHECK(m.forward_logits(tokens, 2) == before);
}

TEST_CASE("delta_profile is elementwise and antisymmetric") {
    Model m = test::make_toy_model(12);
    std::vector<int> t1 = {1, 2, 3};
    std::vector<int> t2 = {4, 5, 6};
    ContributionProfile a = attr::contribution_profile(m, t1, 2, 11, TokenRole::TargetNew);
    ContributionProfile b = attr::contribution_profile(m, t2, 2, 11, TokenRole::TargetNew);

    DeltaProfile zero = attr::delta_profile(a, a);
    for (const auto& row : zero.delta) {
        CHECK(row[0] == 0.0);
        CHECK(row[1] == 0.0);
    }

    DeltaProfile ab = attr::delta_profile(a, b);
    DeltaProfile ba = attr::delta_profile(b, a);
    for (size_t l = 0; l < ab.n_layers(); ++l) {
        CHECK(ab.delta[l][0] == doctest::Approx(b.c[l][0] - a.c[l][0]));
        CHECK(ab.delta[l][1] == doctest::Approx(b.c[l][1] - a.c[l][1]));
        CHECK(ab.delta[l][0] == doctest::Approx(-ba.delta[l][0]));
    }

    ContributionProfile other = attr::contribution_profile(m, t1, 2, 12, TokenRole::TargetNew);
    CHECK_THROWS_AS((void)attr::delta_profile(a, other), Error);
}

TEST_CASE("classify_outcome truth table") {
    using attr::Outcome;
    CHECK(attr::classify_outcome(0.0, 1.0, false) == Outcome::Successful);
    CHECK(attr::classify_outcome(0.0, 0.85, false) == Outcome::Failed);
    CHECK(attr::classify_outcome(0.5, 0.95, false) == Outcome::Successful);
    CHECK(attr::classify_outcome(0.95, 0.9, false) == Outcome::Failed);
    CHECK(attr::classify_outcome(0.3, 0.95, true) == Outcome::Excluded);
    CHECK(attr::classify_outcome(0.9, 0.9, false) == Outcome::Failed); // no improvement
    CHECK_THROWS_AS((void)attr::classify_outcome(-0.1, 0.5, false), Error);
}

TEST_CASE("aggregate_deltas averages and filters") {
    Rng rng(77);
    DeltaProfile single = random_delta(rng, 4, TokenRole::TargetNew);
    attr::AggregateDelta one = attr::aggregate_deltas({single});
    CHECK(one.count == 1);
    for (size_t l = 0; l < 4; ++l) {
        CHECK(one.mean.delta[l][0] == doctest::Approx(single.delta[l][0]));
    }

    DeltaProfile negated = single;
    for (auto& row : negated.delta) {
        row[0] = -row[0];
        row[1] = -row[1];
    }
    attr::AggregateDelta sym = attr::aggregate_deltas({single, negated});
    for (const auto& row : sym.mean.delta) {
        CHECK(row[0] == doctest::Approx(0.0));
        CHECK(row[1] == doctest::Approx(0.0));
    }
}

TEST_CASE("aggregate_deltas matches a brute-force mean and ignores order") {
    Rng rng(123);
    std::vector<DeltaProfile> profiles;
    for (int i = 0; i < 50; ++i) profiles.push_back(random_delta(rng, 3, TokenRole::GroundTruth));

    std::array<std::array<double, 2>, 3> brute{};
    for (const DeltaProfile& p : profiles) {
        for (size_t l = 0; l < 3; ++l) {
            brute[l][0] += p.delta[l][0];
            brute[l][1] += p.delta[l][1];
        }
    }
    attr::AggregateDelta agg = attr::aggregate_deltas(profiles, TokenRole::GroundTruth);
    CHECK(agg.count == 50);
    for (size_t l = 0; l < 3; ++l) {
        CHECK(agg.mean.delta[l][0] == doctest::Approx(brute[l][0] / 50.0).epsilon(1e-6));
        CHECK(agg.mean.delta[l][1] == doctest::Approx(brute[l][1] / 50.0).epsilon(1e-6));
    }

    std::vector<DeltaProfile> shuffled(profiles.rbegin(), profiles.rend());
    attr::AggregateDelta agg2 = attr::aggregate_deltas(shuffled, TokenRole::GroundTruth);
    for (size_t l = 0; l < 3; ++l) {
        CHECK(agg2.mean.delta[l][0] == doctest::Approx(agg.mean.delta[l][0]).epsilon(1e-6));
    }

    CHECK_THROWS_AS((void)attr::aggregate_deltas(profiles, TokenRole::TargetNew), Error);
    CHECK_THROWS_AS((void)attr::aggregate_deltas({}), Error);
}

TEST_CASE("ike context layout") {
    CHECK(attr::build_ike_context({}, "P", "T") == "New Fact: P T\nPrompt: P");
    CHECK(attr::build_ike_context({"Q? A."}, "P", "T") == "Q? A.\nNew Fact: P T\nPrompt: P");
    CHECK(attr::build_ike_context({}, "P", "T", "S") == "New Fact: P T\nPrompt: S");
    CHECK_THROWS_AS((void)attr::build_ike_context({}, "P", ""), Error);
    CHECK_THROWS_AS((void)attr::build_ike_context({}, "", "T"), Error);
}

TEST_CASE("first_answer_token prefixes a space only for BPE continuations") {
    model::Tokenizer byte_tok = model::Tokenizer::byte_mode();
    CHECK(attr::first_answer_token(byte_tok, "abc", "xyz") == int('x'));
    CHECK_THROWS_AS((void)attr::first_answer_token(byte_tok, "abc", ""), Error);
}
