#include "mega/steering.hpp"

#include "mega/attribution.hpp"
#include "mega/linalg.hpp"
#include "mega/rng.hpp"

#include "test_helpers.hpp"

#include <doctest.h>

#include <cmath>

using namespace mega;
using model::Model;
using model::Tokenizer;
using num::Rng;
using num::TensorF32;
using steer::Component;
using steer::PolicyConfig;
using steer::SteeringPolicy;
using steer::TransportMap;

namespace {

TensorF32 gaussian_samples(Rng& rng, size_t n, const std::vector<double>& mean,
                           const std::vector<double>& scale) {
    TensorF32 out({n, mean.size()}, 0.0f);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < mean.size(); ++j) {
            out.at(i, j) = float(mean[j] + scale[j] * rng.normal());
        }
    }
    return out;
}

eval::EditCase small_case() {
    eval::EditCase c;
    c.case_id = "steer_case";
    c.prompt = "alpha beta gamma";
    c.subject = "alpha";
    c.ground_truth = "x";
    c.target_new = "z";
    c.paraphrase_prompts = {"alpha beta gamm4", "alpha b3ta gamma", "4lpha beta gamma",
                            "alpha bet4 gamma"};
    return c;
}

} // namespace

TEST_CASE("collect_activations rows equal the trace components") {
    Model m = test::make_toy_model(42);
    Tokenizer tok = Tokenizer::byte_mode();
    std::vector<std::string> prompts = {"hello world", "hello world", "another one"};
    for (Component comp :
         {Component::Attn, Component::AttnRes, Component::Ffn, Component::Res}) {
        TensorF32 acts = steer::collect_activations(m, tok, prompts, 2, comp);
        REQUIRE(acts.rows() == 3);

        // duplicate prompts give identical rows
        for (size_t j = 0; j < acts.cols(); ++j) CHECK(acts.at(0, j) == acts.at(1, j));

        std::vector<int> ids = tok.encode(prompts[2]);
        model::ResidualTrace tr = m.forward_trace(ids, ids.size() - 1);
        const std::vector<float>* want = nullptr;
        switch (comp) {
            case Component::Attn: want = &tr.layers[2].attn; break;
            case Component::AttnRes: want = &tr.layers[2].lres; break;
            case Component::Ffn: want = &tr.layers[2].ffn; break;
            case Component::Res: want = &tr.layers[2].lout; break;
        }
        for (size_t j = 0; j < acts.cols(); ++j) CHECK(acts.at(2, j) == (*want)[j]);
    }
    CHECK_THROWS_AS((void)steer::collect_activations(m, tok, {}, 0, Component::Attn), Error);
    CHECK_THROWS_AS((void)steer::collect_activations(m, tok, prompts, 99, Component::Attn), Error);
}

TEST_CASE("augment_gaussian row bookkeeping") {
    TensorF32 acts({110, 3}, 0.5f);
    TensorF32 aug = steer::augment_gaussian(acts, 4, 0.1f, 42);
    CHECK(aug.rows() == 550); // 110 originals + 4 perturbations each

    TensorF32 copies = steer::augment_gaussian(acts, 4, 0.0f, 42);
    for (size_t i = 0; i < copies.rows(); ++i) {
        for (size_t j = 0; j < 3; ++j) CHECK(copies.at(i, j) == 0.5f);
    }

    // originals retained up front
    for (size_t i = 0; i < 110; ++i)
        for (size_t j = 0; j < 3; ++j) CHECK(aug.at(i, j) == 0.5f);

    // deterministic under the seed
    TensorF32 again = steer::augment_gaussian(acts, 4, 0.1f, 42);
    CHECK(again.data == aug.data);
    TensorF32 other = steer::augment_gaussian(acts, 4, 0.1f, 43);
    CHECK(other.data != aug.data);
}

TEST_CASE("augment_gaussian noise has the requested scale") {
    TensorF32 acts({1, 100}, 0.0f);
    TensorF32 aug = steer::augment_gaussian(acts, 1000, 0.1f, 1234);
    double acc = 0.0;
    size_t n = 0;
    for (size_t i = 1; i < aug.rows(); ++i) {
        for (size_t j = 0; j < 100; ++j) {
            acc += double(aug.at(i, j)) * double(aug.at(i, j));
            ++n;
        }
    }
    double std_dev = std::sqrt(acc / double(n));
    CHECK(std_dev == doctest::Approx(0.1).epsilon(0.03));
}

TEST_CASE("fit_transport recovers the 1-D closed form") {
    Rng rng(4242);
    TensorF32 src = gaussian_samples(rng, 10000, {0.0}, {1.0});
    TensorF32 tgt = gaussian_samples(rng, 10000, {3.0}, {2.0});
    TransportMap map = steer::fit_transport(src, tgt, 1e-6f);
    CHECK(double(map.a.at(0, 0)) >= 1.95);
    CHECK(double(map.a.at(0, 0)) <= 2.05);
    CHECK(double(map.b[0]) >= 2.9);
    CHECK(double(map.b[0]) <= 3.1);
}

TEST_CASE("fit_transport on identical samples is the identity map") {
    Rng rng(77);
    TensorF32 src = gaussian_samples(rng, 200, {1.0, -2.0, 0.5}, {1.0, 0.5, 2.0});
    TransportMap map = steer::fit_transport(src, src, 1e-2f);
    double fro = 0.0;
    for (size_t i = 0; i < 3; ++i) {
        for (size_t j = 0; j < 3; ++j) {
            double d = double(map.a.at(i, j)) - (i == j ? 1.0 : 0.0);
            fro += d * d;
        }
    }
    CHECK(std::sqrt(fro) <= 0.05);
    CHECK(num::norm2(map.b) <= 0.05);
}

TEST_CASE("fit_transport pushforward matches the target moments in 8-D") {
    Rng rng(31337);
    std::vector<double> mu_s(8), mu_t(8), sc_s(8), sc_t(8);
    for (size_t j = 0; j < 8; ++j) {
        mu_s[j] = rng.normal();
        mu_t[j] = 2.0 + rng.normal();
        sc_s[j] = 0.5 + 0.2 * rng.uniform();
        sc_t[j] = 1.0 + 0.5 * rng.uniform();
    }
    TensorF32 src = gaussian_samples(rng, 10000, mu_s, sc_s);
    TensorF32 tgt = gaussian_samples(rng, 10000, mu_t, sc_t);
    TransportMap map = steer::fit_transport(src, tgt, 1e-2f);

    // push the source samples through and compare moments
    TensorF32 pushed({src.rows(), 8}, 0.0f);
    for (size_t i = 0; i < src.rows(); ++i) {
        std::vector<float> z = map.apply(src.row(i));
        std::copy(z.begin(), z.end(), pushed.row(i).begin());
    }
    std::vector<float> mean_push;
    num::SymmetricMatrix cov_push = num::covariance(pushed, &mean_push);
    std::vector<float> mean_tgt;
    num::SymmetricMatrix cov_tgt = num::covariance(tgt, &mean_tgt);

    double mean_err = 0.0, mean_norm = 0.0, cov_err = 0.0, cov_norm = 0.0;
    for (size_t j = 0; j < 8; ++j) {
        mean_err += std::pow(double(mean_push[j]) - double(mean_tgt[j]), 2);
        mean_norm += std::pow(double(mean_tgt[j]), 2);
    }
    for (size_t i = 0; i < 64; ++i) {
        cov_err += std::pow(double(cov_push.data[i]) - double(cov_tgt.data[i]), 2);
        cov_norm += std::pow(double(cov_tgt.data[i]), 2);
    }
    CHECK(std::sqrt(mean_err) <= 0.02 * std::sqrt(mean_norm));
    CHECK(std::sqrt(cov_err) <= 0.05 * std::sqrt(cov_norm));
}

TEST_CASE("fit_transport is invertible up to regularization") {
    Rng rng(5150);
    std::vector<double> mu_s(8), mu_t(8), sc_s(8), sc_t(8);
    for (size_t j = 0; j < 8; ++j) {
        mu_s[j] = rng.normal();
        mu_t[j] = rng.normal();
        sc_s[j] = 0.8 + 0.4 * rng.uniform();
        sc_t[j] = 0.8 + 0.4 * rng.uniform();
    }
    TensorF32 src = gaussian_samples(rng, 5000, mu_s, sc_s);
    TensorF32 tgt = gaussian_samples(rng, 5000, mu_t, sc_t);
    TransportMap fwd = steer::fit_transport(src, tgt, 1e-6f);
    TransportMap bwd = steer::fit_transport(tgt, src, 1e-6f);
    TensorF32 prod = num::matmul(fwd.a, bwd.a);
    double fro = 0.0;
    for (size_t i = 0; i < 8; ++i)
        for (size_t j = 0; j < 8; ++j)
            fro += std::pow(double(prod.at(i, j)) - (i == j ? 1.0 : 0.0), 2);
    CHECK(std::sqrt(fro) <= 0.1);
}

TEST_CASE("fit_transport input validation") {
    TensorF32 one({1, 2}, 0.0f);
    TensorF32 ok({3, 2}, 0.5f);
    CHECK_THROWS_AS((void)steer::fit_transport(one, ok, 0.01f), Error);
    TensorF32 wide({3, 3}, 0.5f);
    CHECK_THROWS_AS((void)steer::fit_transport(ok, wide, 0.01f), Error);
    CHECK_THROWS_AS((void)steer::fit_transport(ok, ok, -1.0f), Error);
}

TEST_CASE("steer_transform identity map leaves the state alone") {
    Rng rng(2);
    num::PcaProjector proj;
    proj.mean.assign(6, 0.0f);
    TensorF32 data({20, 6}, 0.0f);
    for (float& v : data.data) v = float(rng.normal());
    proj = num::pca_fit(data, 3);

    TransportMap identity;
    identity.a = TensorF32::identity(3);
    identity.b.assign(3, 0.0f);

    std::vector<float> h(6);
    for (float& v : h) v = float(rng.normal());
    std::vector<float> out = steer::steer_transform(h, proj, identity);
    for (size_t j = 0; j < 6; ++j) CHECK(std::fabs(out[j] - h[j]) <= 1e-6);
}

TEST_CASE("steer_transform with a full basis is the affine map itself") {
    TransportMap map;
    map.a = TensorF32({2, 2}, {0.0f, 1.0f, 1.0f, 0.0f}); // swap
    map.b = {1.0f, -1.0f};
    num::PcaProjector proj;
    proj.mean = {0.0f, 0.0f};
    proj.basis = TensorF32::identity(2);

    std::vector<float> h = {3.0f, 5.0f};
    std::vector<float> out = steer::steer_transform(h, proj, map);
    CHECK(out[0] == doctest::Approx(6.0f));  // swap + b
    CHECK(out[1] == doctest::Approx(2.0f));
}

TEST_CASE("steer_transform never touches the orthogonal complement") {
    Rng rng(14);
    TensorF32 data({40, 10}, 0.0f);
    for (float& v : data.data) v = float(rng.normal());
    num::PcaProjector proj = num::pca_fit(data, 4);

    TransportMap map;
    map.a = TensorF32({4, 4}, 0.0f);
    for (size_t i = 0; i < 4; ++i) map.a.at(i, i) = 1.5f;
    map.b = {0.3f, -0.7f, 0.1f, 2.0f};

    std::vector<float> h(10);
    for (float& v : h) v = float(rng.normal());
    std::vector<float> out = steer::steer_transform(h, proj, map);

    // residual = (h' - h) projected off the rowspace must vanish
    std::vector<double> diff(10);
    for (size_t j = 0; j < 10; ++j) diff[j] = double(out[j]) - double(h[j]);
    std::vector<double> coeff(4, 0.0);
    for (size_t i = 0; i < 4; ++i)
        for (size_t j = 0; j < 10; ++j) coeff[i] += double(proj.basis.at(i, j)) * diff[j];
    double resid = 0.0;
    for (size_t j = 0; j < 10; ++j) {
        double r = diff[j];
        for (size_t i = 0; i < 4; ++i) r -= coeff[i] * double(proj.basis.at(i, j));
        resid += r * r;
    }
    CHECK(std::sqrt(resid) <= 1e-5);
}

TEST_CASE("policy config defaults mirror the reference hyperparameters") {
    PolicyConfig pc;
    CHECK(pc.k == 512);
    CHECK(pc.lambda == doctest::Approx(1e-2f));
    CHECK(pc.sigma == doctest::Approx(0.1f));
    CHECK(pc.per_sample == 4);
    CHECK(pc.tau == doctest::Approx(6.5f));
    CHECK(pc.seed == 42);
    CHECK(pc.component == Component::AttnRes);
}

TEST_CASE("fit_policy produces one sorted entry per window layer") {
    Model m = test::make_toy_model(42);
    Tokenizer tok = Tokenizer::byte_mode();
    eval::EditCase c = small_case();

    PolicyConfig pc;
    pc.window_lo = 1;
    pc.window_hi = 1;
    pc.k = 4;
    pc.tau = 5.0f;
    SteeringPolicy single = steer::fit_policy(m, tok, c, pc);
    CHECK(single.entries.size() == 1);
    CHECK(single.entries[0].layer == 1);

    pc.window_hi = 3;
    SteeringPolicy multi = steer::fit_policy(m, tok, c, pc);
    CHECK(multi.entries.size() == 3);
    for (size_t i = 0; i < 3; ++i) CHECK(multi.entries[i].layer == i + 1);
    CHECK(multi.detector.space.layer == 1);
    CHECK(multi.detector.tau == doctest::Approx(5.0f));
    CHECK(multi.k_effective <= pc.k);

    pc.window_hi = 99;
    CHECK_THROWS_AS((void)steer::fit_policy(m, tok, c, pc), Error);
    eval::EditCase no_para = c;
    no_para.paraphrase_prompts.clear();
    pc.window_hi = 2;
    CHECK_THROWS_AS((void)steer::fit_policy(m, tok, no_para, pc), Error);
}

TEST_CASE("fit_policy shared map reuses one transport across the window") {
    Model m = test::make_toy_model(42);
    Tokenizer tok = Tokenizer::byte_mode();
    PolicyConfig pc;
    pc.window_lo = 1;
    pc.window_hi = 2;
    pc.k = 4;
    pc.shared_map = true;
    SteeringPolicy p = steer::fit_policy(m, tok, small_case(), pc);
    REQUIRE(p.entries.size() == 2);
    CHECK(p.entries[0].map.a.data == p.entries[1].map.a.data);
    CHECK(p.entries[0].projector.mean == p.entries[1].projector.mean);
}

TEST_CASE("in_scope distance semantics and inclusive boundary") {
    Model m = test::make_toy_model(42);
    Tokenizer tok = Tokenizer::byte_mode();
    const std::string prompt = "scope me please";

    steer::ScopeDetector det;
    det.space = {1, Component::AttnRes};
    std::vector<int> ids = tok.encode(prompt);
    det.reference = steer::scope_query(m, det.space, ids);
    det.tau = 0.0f;

    steer::ScopeResult self = steer::in_scope(det, m, tok, prompt);
    CHECK(self.in_scope);
    CHECK(self.distance == doctest::Approx(0.0));

    steer::ScopeResult other = steer::in_scope(det, m, tok, "totally different");
    CHECK_FALSE(other.in_scope);
    CHECK(other.distance > 0.0);

    // the zero-distance self case above already exercises the inclusive
    // boundary (0 <= 0); here the verdict must track tau around the distance
    det.tau = std::nextafterf(float(other.distance), 1e30f);
    CHECK(steer::in_scope(det, m, tok, "totally different").in_scope);
    det.tau = std::nextafterf(float(other.distance) * 0.99f, 0.0f);
    CHECK_FALSE(steer::in_scope(det, m, tok, "totally different").in_scope);
}

TEST_CASE("steered_forward gates off bit-identically out of scope") {
    Model m = test::make_toy_model(42);
    Tokenizer tok = Tokenizer::byte_mode();
    PolicyConfig pc;
    pc.window_lo = 1;
    pc.window_hi = 2;
    pc.k = 4;
    pc.tau = 0.5f;
    SteeringPolicy p = steer::fit_policy(m, tok, small_case(), pc);

    Rng rng(88);
    for (int iter = 0; iter < 10; ++iter) {
        std::string prompt;
        size_t len = 6 + rng.below(10);
        for (size_t i = 0; i < len; ++i) prompt.push_back(char('a' + rng.below(26)));
        steer::ScopeResult scope;
        std::vector<int> ids = tok.encode(prompt);
        std::vector<float> steered = steer::steered_forward(m, p, ids, &scope);
        if (!scope.in_scope) {
            CHECK(steered == m.forward_logits(ids, ids.size() - 1));
        }
    }
}

TEST_CASE("identity-map policies change logits by at most 1e-5") {
    Model m = test::make_toy_model(42);
    Tokenizer tok = Tokenizer::byte_mode();
    PolicyConfig pc;
    pc.window_lo = 1;
    pc.window_hi = 2;
    pc.k = 4;
    pc.tau = 1e9f; // everything in scope
    SteeringPolicy p = steer::fit_policy(m, tok, small_case(), pc);
    for (steer::LayerSteering& e : p.entries) {
        e.map.a = TensorF32::identity(e.map.k());
        std::fill(e.map.b.begin(), e.map.b.end(), 0.0f);
    }
    std::vector<int> ids = tok.encode(small_case().prompt);
    std::vector<float> base = m.forward_logits(ids, ids.size() - 1);
    std::vector<float> steered = steer::steered_forward(m, p, ids);
    for (size_t v = 0; v < base.size(); ++v) {
        CHECK(std::fabs(steered[v] - base[v]) <= 1e-5f);
    }
}

TEST_CASE("fit_policy echoes the reference window configuration into metadata") {
    // Deep, narrow model so a 15..40 window exists.
    model::ModelConfig config;
    config.n_layers = 48;
    config.d_model = 8;
    config.n_heads = 2;
    config.d_ff = 16;
    config.vocab_size = 64;
    config.max_positions = 128;
    model::ModelWeights w = test::zero_weights(config);
    Rng rng(6);
    for (float& v : w.wte.data) v = float(rng.normal());
    for (float& v : w.wpe.data) v = float(0.1 * rng.normal());
    for (auto& lw : w.layers) {
        for (float& v : lw.qkv_w.data) v = float(0.3 * rng.normal());
        for (float& v : lw.attn_proj_w.data) v = float(0.3 * rng.normal());
        for (float& v : lw.fc_w.data) v = float(0.3 * rng.normal());
        for (float& v : lw.ffn_proj_w.data) v = float(0.3 * rng.normal());
    }
    Model m = Model::from_weights(std::move(w), config);
    Tokenizer tok = Tokenizer::byte_mode();

    eval::EditCase c;
    c.case_id = "deep";
    c.prompt = "abc def";
    c.target_new = "z";
    c.ground_truth = "y";
    c.paraphrase_prompts = {"abd def", "abe def", "abf def"};

    PolicyConfig pc; // defaults: k=512, lambda=1e-2, tau=6.5, seed=42
    pc.window_lo = 15;
    pc.window_hi = 40;
    SteeringPolicy p = steer::fit_policy(m, tok, c, pc);
    CHECK(p.entries.size() == 26);
    CHECK(p.window_lo == 15);
    CHECK(p.window_hi == 40);
    CHECK(p.k_requested == 512);
    CHECK(p.k_effective < 512); // capped at the pooled-activation rank
    CHECK(p.lambda == doctest::Approx(1e-2f));
    CHECK(p.tau == doctest::Approx(6.5f));
    CHECK(p.seed == 42);

    std::string text = steer::policy_to_json(p);
    CHECK(text.find("\"mega-policy/1\"") != std::string::npos);
    SteeringPolicy back = steer::policy_from_json(text);
    CHECK(back.k_requested == 512);
    CHECK(back.entries.size() == 26);
}

TEST_CASE("policy JSON roundtrip is exact and deterministic") {
    Model m = test::make_toy_model(42);
    Tokenizer tok = Tokenizer::byte_mode();
    PolicyConfig pc;
    pc.window_lo = 0;
    pc.window_hi = 1;
    pc.k = 3;
    SteeringPolicy p = steer::fit_policy(m, tok, small_case(), pc);

    std::string text = steer::policy_to_json(p);
    SteeringPolicy back = steer::policy_from_json(text);
    CHECK(back.entries.size() == p.entries.size());
    for (size_t i = 0; i < p.entries.size(); ++i) {
        CHECK(back.entries[i].layer == p.entries[i].layer);
        CHECK(back.entries[i].map.a.data == p.entries[i].map.a.data);       // bit-exact
        CHECK(back.entries[i].map.b == p.entries[i].map.b);
        CHECK(back.entries[i].projector.basis.data == p.entries[i].projector.basis.data);
        CHECK(back.entries[i].projector.mean == p.entries[i].projector.mean);
    }
    CHECK(back.detector.reference == p.detector.reference);
    CHECK(back.detector.tau == p.detector.tau);
    CHECK(back.case_id == p.case_id);

    // refitting with the same seed serializes byte-identically
    SteeringPolicy p2 = steer::fit_policy(m, tok, small_case(), pc);
    CHECK(steer::policy_to_json(p2) == text);

    CHECK_THROWS_AS((void)steer::policy_from_json("{}"), Error);
    CHECK_THROWS_AS((void)steer::policy_from_json("not json"), Error);
}
