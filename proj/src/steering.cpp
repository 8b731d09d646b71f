#include "mega/steering.hpp"

#include "mega/attribution.hpp"
#include "mega/linalg.hpp"
#include "mega/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mega::steer {

using nlohmann::json;
using num::SymmetricMatrix;
using num::TensorF32;

const char* component_name(Component c) {
    switch (c) {
        case Component::Attn: return "attn";
        case Component::AttnRes: return "attn_res";
        case Component::Ffn: return "ffn";
        case Component::Res: return "res";
    }
    return "?";
}

Component component_from_name(const std::string& name) {
    if (name == "attn") return Component::Attn;
    if (name == "attn_res") return Component::AttnRes;
    if (name == "ffn") return Component::Ffn;
    if (name == "res") return Component::Res;
    throw Error("steering: unknown component '" + name + "'");
}

std::vector<float> TransportMap::apply(std::span<const float> z) const {
    if (z.size() != k()) throw Error("TransportMap: coordinate dimension mismatch");
    std::vector<float> out = num::matvec(a, z);
    for (size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

num::TensorF32 collect_activations(const model::Model& m, const model::Tokenizer& tok,
                                   const std::vector<std::string>& prompts, size_t layer,
                                   Component component) {
    if (prompts.empty()) throw Error("collect_activations: empty prompt list");
    if (layer >= m.config().n_layers) {
        throw Error("collect_activations: layer " + std::to_string(layer) + " out of range");
    }
    TensorF32 acts({prompts.size(), m.config().d_model}, 0.0f);
    for (size_t i = 0; i < prompts.size(); ++i) {
        std::vector<int> ids = tok.encode(prompts[i]);
        if (ids.empty()) throw Error("collect_activations: prompt " + std::to_string(i) +
                                     " tokenizes to nothing");
        model::ResidualTrace trace = m.forward_trace(ids, ids.size() - 1);
        const model::LayerSnapshot& snap = trace.layers[layer];
        const std::vector<float>* src = nullptr;
        switch (component) {
            case Component::Attn: src = &snap.attn; break;
            case Component::AttnRes: src = &snap.lres; break;
            case Component::Ffn: src = &snap.ffn; break;
            case Component::Res: src = &snap.lout; break;
        }
        std::copy(src->begin(), src->end(), acts.row(i).begin());
    }
    acts.check_finite("collected activations");
    return acts;
}

num::TensorF32 augment_gaussian(const num::TensorF32& acts, size_t per_sample, float sigma,
                                uint64_t seed) {
    if (sigma < 0.0f) throw Error("augment_gaussian: negative sigma");
    const size_t n = acts.rows(), d = acts.cols();
    TensorF32 out({n * (1 + per_sample), d}, 0.0f);
    for (size_t i = 0; i < n; ++i) {
        std::copy(acts.row(i).begin(), acts.row(i).end(), out.row(i).begin());
    }
    num::Rng rng(seed);
    for (size_t i = 0; i < n; ++i) {
        for (size_t s = 0; s < per_sample; ++s) {
            std::span<float> dst = out.row(n + i * per_sample + s);
            std::span<const float> src = acts.row(i);
            for (size_t j = 0; j < d; ++j) {
                dst[j] = float(double(src[j]) + double(sigma) * rng.normal());
            }
        }
    }
    return out;
}

namespace {

SymmetricMatrix regularized_covariance(const TensorF32& data, float lambda,
                                       std::vector<float>* mean_out) {
    SymmetricMatrix cov = num::covariance(data, mean_out);
    for (size_t i = 0; i < cov.dim; ++i) cov.at(i, i) += lambda;
    return cov;
}

// V diag(w^p) V^T for a PSD matrix; eigenvalues floored at `min_eig`.
SymmetricMatrix psd_power(const SymmetricMatrix& s, double power, double min_eig) {
    num::EigResult eig = num::sym_eig(s);
    const size_t n = s.dim;
    std::vector<double> wp(n);
    for (size_t i = 0; i < n; ++i) {
        double w = std::max(double(eig.eigenvalues[i]), min_eig);
        wp[i] = std::pow(w, power);
    }
    TensorF32 r({n, n}, 0.0f);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i; j < n; ++j) {
            double acc = 0.0;
            for (size_t l = 0; l < n; ++l)
                acc += double(eig.eigenvectors.at(i, l)) * wp[l] *
                       double(eig.eigenvectors.at(j, l));
            r.at(i, j) = float(acc);
            r.at(j, i) = float(acc);
        }
    }
    return SymmetricMatrix::from_tensor(r);
}

TensorF32 symmetrized(const TensorF32& m) {
    TensorF32 out = m;
    for (size_t i = 0; i < m.rows(); ++i) {
        for (size_t j = i + 1; j < m.cols(); ++j) {
            float v = 0.5f * (m.at(i, j) + m.at(j, i));
            out.at(i, j) = v;
            out.at(j, i) = v;
        }
    }
    return out;
}

} // namespace

TransportMap fit_transport(const num::TensorF32& src, const num::TensorF32& tgt, float lambda) {
    if (src.ndim() != 2 || tgt.ndim() != 2 || src.cols() != tgt.cols()) {
        throw Error("fit_transport: source and target must share their column count");
    }
    if (src.rows() < 2 || tgt.rows() < 2) throw Error("fit_transport: need >= 2 samples per side");
    if (lambda < 0.0f) throw Error("fit_transport: negative lambda");
    src.check_finite("fit_transport source");
    tgt.check_finite("fit_transport target");

    const size_t k = src.cols();
    std::vector<float> mu_s, mu_t;
    SymmetricMatrix cov_s = regularized_covariance(src, lambda, &mu_s);
    SymmetricMatrix cov_t = regularized_covariance(tgt, lambda, &mu_t);

    const double floor_eig = std::max(1e-12, 0.5 * double(lambda));
    SymmetricMatrix s_half = num::sqrtm_psd(cov_s, 0.0f);
    SymmetricMatrix s_half_inv = psd_power(cov_s, -0.5, floor_eig);

    TensorF32 mid = num::matmul(num::matmul(s_half.to_tensor(), cov_t.to_tensor()),
                                s_half.to_tensor());
    SymmetricMatrix mid_sym = SymmetricMatrix::from_tensor(symmetrized(mid));
    SymmetricMatrix mid_root = num::sqrtm_psd(mid_sym, 0.0f);

    TensorF32 a = num::matmul(num::matmul(s_half_inv.to_tensor(), mid_root.to_tensor()),
                              s_half_inv.to_tensor());
    a = symmetrized(a);
    a.check_finite("transport A");

    TransportMap map;
    map.a = std::move(a);
    map.lambda = lambda;
    map.b.resize(k);
    for (size_t i = 0; i < k; ++i) {
        double acc = double(mu_t[i]);
        for (size_t j = 0; j < k; ++j) acc -= double(map.a.at(i, j)) * double(mu_s[j]);
        map.b[i] = float(acc);
    }
    num::check_finite(map.b, "transport b");
    return map;
}

std::vector<float> steer_transform(std::span<const float> h, const num::PcaProjector& projector,
                                   const TransportMap& map) {
    if (map.k() != projector.k()) {
        throw Error("steer_transform: projector and map dimensions disagree");
    }
    std::vector<float> z = projector.project(h);
    std::vector<float> w = map.apply(z);
    std::vector<float> out(h.begin(), h.end());
    const size_t k = z.size(), d = h.size();
    for (size_t j = 0; j < d; ++j) {
        double acc = double(out[j]);
        for (size_t i = 0; i < k; ++i) {
            acc += double(projector.basis.at(i, j)) * (double(w[i]) - double(z[i]));
        }
        out[j] = float(acc);
    }
    num::check_finite(out, "steered state");
    return out;
}

SteeringPolicy fit_policy(const model::Model& m, const model::Tokenizer& tok,
                          const eval::EditCase& edit_case, const PolicyConfig& config) {
    edit_case.validate();
    const size_t n_layers = m.config().n_layers;
    if (config.window_lo > config.window_hi || config.window_hi >= n_layers) {
        throw Error("fit_policy: window [" + std::to_string(config.window_lo) + "," +
                    std::to_string(config.window_hi) + "] out of range for " +
                    std::to_string(n_layers) + " layers");
    }
    if (config.k < 1) throw Error("fit_policy: k must be >= 1");
    if (edit_case.paraphrase_prompts.empty()) {
        throw Error("fit_policy: case " + edit_case.case_id + " has no paraphrase prompts");
    }

    std::vector<std::string> source_prompts = edit_case.paraphrase_prompts;
    source_prompts.insert(source_prompts.end(), edit_case.implication_prompts.begin(),
                          edit_case.implication_prompts.end());
    std::vector<std::string> target_prompts;
    target_prompts.reserve(source_prompts.size());
    for (const std::string& s : source_prompts) {
        target_prompts.push_back(
            attr::build_ike_context({}, edit_case.prompt, edit_case.target_new, s));
    }

    SteeringPolicy policy;
    policy.seed = config.seed;
    policy.case_id = edit_case.case_id;
    policy.window_lo = config.window_lo;
    policy.window_hi = config.window_hi;
    policy.component = config.component;
    policy.k_requested = config.k;
    policy.k_effective = config.k;
    policy.lambda = config.lambda;
    policy.sigma = config.sigma;
    policy.tau = config.tau;
    policy.per_sample = config.per_sample;
    policy.shared_map = config.shared_map;

    const uint64_t case_seed = num::hash_label(config.seed, edit_case.case_id);
    std::vector<TensorF32> src_aug_by_layer, tgt_aug_by_layer;
    for (size_t layer = config.window_lo; layer <= config.window_hi; ++layer) {
        TensorF32 src_raw = collect_activations(m, tok, source_prompts, layer, config.component);
        TensorF32 tgt_raw = collect_activations(m, tok, target_prompts, layer, config.component);
        const std::string tag = "layer" + std::to_string(layer);
        src_aug_by_layer.push_back(augment_gaussian(src_raw, config.per_sample, config.sigma,
                                                    num::hash_label(case_seed, tag + "/src")));
        tgt_aug_by_layer.push_back(augment_gaussian(tgt_raw, config.per_sample, config.sigma,
                                                    num::hash_label(case_seed, tag + "/tgt")));
    }

    auto fit_pair = [&](const TensorF32& src_aug, const TensorF32& tgt_aug) {
        TensorF32 pooled({src_aug.rows() + tgt_aug.rows(), src_aug.cols()}, 0.0f);
        std::copy(src_aug.data.begin(), src_aug.data.end(), pooled.data.begin());
        std::copy(tgt_aug.data.begin(), tgt_aug.data.end(),
                  pooled.data.begin() + std::ptrdiff_t(src_aug.size()));
        size_t k_eff = std::min(config.k, num::pca_rank(pooled));
        if (k_eff == 0) throw Error("fit_policy: pooled activations are rank deficient");
        policy.k_effective = std::min(policy.k_effective, k_eff);
        num::PcaProjector proj = num::pca_fit(pooled, k_eff);
        TransportMap map = fit_transport(proj.project_rows(src_aug),
                                         proj.project_rows(tgt_aug), config.lambda);
        return std::make_pair(std::move(proj), std::move(map));
    };

    if (config.shared_map) {
        // Single-map reading: one pair fitted on the window-pooled activations.
        size_t d = m.config().d_model;
        size_t rows_per = src_aug_by_layer.front().rows();
        TensorF32 src_all({rows_per * src_aug_by_layer.size(), d}, 0.0f);
        TensorF32 tgt_all({rows_per * tgt_aug_by_layer.size(), d}, 0.0f);
        for (size_t i = 0; i < src_aug_by_layer.size(); ++i) {
            std::copy(src_aug_by_layer[i].data.begin(), src_aug_by_layer[i].data.end(),
                      src_all.data.begin() + std::ptrdiff_t(i * rows_per * d));
            std::copy(tgt_aug_by_layer[i].data.begin(), tgt_aug_by_layer[i].data.end(),
                      tgt_all.data.begin() + std::ptrdiff_t(i * rows_per * d));
        }
        auto [proj, map] = fit_pair(src_all, tgt_all);
        for (size_t layer = config.window_lo; layer <= config.window_hi; ++layer) {
            policy.entries.push_back({layer, config.component, proj, map});
        }
    } else {
        for (size_t i = 0; i < src_aug_by_layer.size(); ++i) {
            auto [proj, map] = fit_pair(src_aug_by_layer[i], tgt_aug_by_layer[i]);
            policy.entries.push_back(
                {config.window_lo + i, config.component, std::move(proj), std::move(map)});
        }
    }

    // Detector centroid: mean of the augmented source activations at the
    // first window layer.
    const TensorF32& first_src = src_aug_by_layer.front();
    policy.detector.reference.assign(first_src.cols(), 0.0f);
    for (size_t j = 0; j < first_src.cols(); ++j) {
        double acc = 0.0;
        for (size_t i = 0; i < first_src.rows(); ++i) acc += double(first_src.at(i, j));
        policy.detector.reference[j] = float(acc / double(first_src.rows()));
    }
    policy.detector.tau = config.tau;
    policy.detector.space = {config.window_lo, config.component};
    return policy;
}

std::vector<float> scope_query(const model::Model& m, const ScopeSpace& space,
                               std::span<const int> tokens) {
    model::ResidualTrace trace = m.forward_trace(tokens, tokens.size() - 1);
    const model::LayerSnapshot& snap = trace.layers.at(space.layer);
    switch (space.component) {
        case Component::Attn: return snap.attn;
        case Component::AttnRes: return snap.lres;
        case Component::Ffn: return snap.ffn;
        case Component::Res: return snap.lout;
    }
    throw Error("scope_query: bad component");
}

ScopeResult in_scope(const ScopeDetector& detector, const model::Model& m,
                     const model::Tokenizer& tok, const std::string& prompt) {
    if (detector.tau < 0.0f) throw Error("in_scope: negative tau");
    std::vector<int> ids = tok.encode(prompt);
    if (ids.empty()) throw Error("in_scope: prompt tokenizes to nothing");
    std::vector<float> query = scope_query(m, detector.space, ids);
    double dist = num::euclidean_distance(query, detector.reference);
    return {dist <= double(detector.tau), dist};
}

PolicyHook::PolicyHook(const SteeringPolicy& policy) : policy_(policy) {
    for (size_t i = 1; i < policy.entries.size(); ++i) {
        if (policy.entries[i - 1].layer >= policy.entries[i].layer) {
            throw Error("PolicyHook: entries must be sorted by layer without duplicates");
        }
    }
}

const LayerSteering* PolicyHook::entry(size_t layer, Component c) const {
    for (const LayerSteering& e : policy_.entries) {
        if (e.layer == layer && e.component == c) return &e;
    }
    return nullptr;
}

void PolicyHook::on_attn(size_t layer, std::span<const float> lin, std::span<float> attn_out) {
    if (const LayerSteering* e = entry(layer, Component::Attn)) {
        std::vector<float> steered = steer_transform(attn_out, e->projector, e->map);
        std::copy(steered.begin(), steered.end(), attn_out.begin());
        return;
    }
    if (const LayerSteering* e = entry(layer, Component::AttnRes)) {
        // Rewrite the attention output so the post-attention residual state
        // becomes the transformed one.
        std::vector<float> lres(lin.size());
        for (size_t j = 0; j < lin.size(); ++j) lres[j] = lin[j] + attn_out[j];
        std::vector<float> steered = steer_transform(lres, e->projector, e->map);
        for (size_t j = 0; j < lin.size(); ++j) attn_out[j] = steered[j] - lin[j];
    }
}

void PolicyHook::on_ffn(size_t layer, std::span<const float> lres, std::span<float> ffn_out) {
    (void)lres;
    if (const LayerSteering* e = entry(layer, Component::Ffn)) {
        std::vector<float> steered = steer_transform(ffn_out, e->projector, e->map);
        std::copy(steered.begin(), steered.end(), ffn_out.begin());
    }
}

void PolicyHook::on_res(size_t layer, std::span<float> lout) {
    if (const LayerSteering* e = entry(layer, Component::Res)) {
        std::vector<float> steered = steer_transform(lout, e->projector, e->map);
        std::copy(steered.begin(), steered.end(), lout.begin());
    }
}

std::vector<float> steered_forward(const model::Model& m, const SteeringPolicy& policy,
                                   std::span<const int> tokens, ScopeResult* scope_out) {
    std::vector<float> query = scope_query(m, policy.detector.space, tokens);
    double dist = num::euclidean_distance(query, policy.detector.reference);
    ScopeResult scope{dist <= double(policy.detector.tau), dist};
    if (scope_out) *scope_out = scope;
    if (!scope.in_scope) {
        return m.forward_logits(tokens, tokens.size() - 1);
    }
    PolicyHook hook(policy);
    return m.forward_logits(tokens, tokens.size() - 1, &hook);
}

std::vector<int> steered_decode(const model::Model& m, const SteeringPolicy& policy,
                                std::span<const int> tokens, size_t max_new,
                                ScopeResult* scope_out) {
    if (tokens.empty()) throw Error("steered_decode: empty token sequence");
    std::vector<float> query = scope_query(m, policy.detector.space, tokens);
    double dist = num::euclidean_distance(query, policy.detector.reference);
    ScopeResult scope{dist <= double(policy.detector.tau), dist};
    if (scope_out) *scope_out = scope;
    if (!scope.in_scope) {
        return m.greedy_decode(tokens, max_new);
    }
    PolicyHook hook(policy);
    return m.greedy_decode(tokens, max_new, &hook);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

const char kB64Chars[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string b64_encode(std::span<const float> values) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
    size_t n = values.size() * 4;
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (size_t i = 0; i < n; i += 3) {
        uint32_t chunk = uint32_t(bytes[i]) << 16;
        if (i + 1 < n) chunk |= uint32_t(bytes[i + 1]) << 8;
        if (i + 2 < n) chunk |= uint32_t(bytes[i + 2]);
        out.push_back(kB64Chars[(chunk >> 18) & 63]);
        out.push_back(kB64Chars[(chunk >> 12) & 63]);
        out.push_back(i + 1 < n ? kB64Chars[(chunk >> 6) & 63] : '=');
        out.push_back(i + 2 < n ? kB64Chars[chunk & 63] : '=');
    }
    return out;
}

std::vector<float> b64_decode_f32(const std::string& text) {
    static int lookup[256];
    static bool init = [] {
        std::fill(std::begin(lookup), std::end(lookup), -1);
        for (int i = 0; i < 64; ++i) lookup[int(kB64Chars[i])] = i;
        return true;
    }();
    (void)init;
    std::vector<unsigned char> bytes;
    bytes.reserve(text.size() / 4 * 3);
    uint32_t chunk = 0;
    int bits = 0;
    for (char c : text) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        int v = lookup[int(static_cast<unsigned char>(c))];
        if (v < 0) throw Error("policy: invalid base64 payload");
        chunk = (chunk << 6) | uint32_t(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            bytes.push_back(static_cast<unsigned char>((chunk >> bits) & 0xFF));
        }
    }
    if (bytes.size() % 4 != 0) throw Error("policy: base64 payload is not f32-aligned");
    std::vector<float> values(bytes.size() / 4);
    std::memcpy(values.data(), bytes.data(), bytes.size());
    return values;
}

} // namespace

std::string policy_to_json(const SteeringPolicy& policy) {
    json j;
    j["format"] = "mega-policy/1";
    j["metadata"] = {{"case_id", policy.case_id},
                     {"window", {policy.window_lo, policy.window_hi}},
                     {"component", component_name(policy.component)},
                     {"k", policy.k_requested},
                     {"k_effective", policy.k_effective},
                     {"lambda", policy.lambda},
                     {"sigma", policy.sigma},
                     {"per_sample", policy.per_sample},
                     {"tau", policy.tau},
                     {"seed", policy.seed},
                     {"shared_map", policy.shared_map}};
    j["detector"] = {{"reference", b64_encode(policy.detector.reference)},
                     {"tau", policy.detector.tau},
                     {"space", {{"layer", policy.detector.space.layer},
                                {"component", component_name(policy.detector.space.component)}}}};
    json entries = json::array();
    for (const LayerSteering& e : policy.entries) {
        entries.push_back({{"layer", e.layer},
                           {"component", component_name(e.component)},
                           {"k", e.projector.k()},
                           {"mean", b64_encode(e.projector.mean)},
                           {"basis", b64_encode(e.projector.basis.data)},
                           {"A", b64_encode(e.map.a.data)},
                           {"b", b64_encode(e.map.b)},
                           {"lambda", e.map.lambda}});
    }
    j["entries"] = std::move(entries);
    return j.dump(2) + "\n";
}

SteeringPolicy policy_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(std::string("policy: malformed JSON: ") + e.what());
    }
    if (j.value("format", std::string{}) != "mega-policy/1") {
        throw Error("policy: unsupported format '" + j.value("format", std::string{}) + "'");
    }
    SteeringPolicy p;
    const json& meta = j.at("metadata");
    p.case_id = meta.value("case_id", std::string{});
    p.window_lo = meta.at("window").at(0).get<size_t>();
    p.window_hi = meta.at("window").at(1).get<size_t>();
    p.component = component_from_name(meta.at("component").get<std::string>());
    p.k_requested = meta.value("k", size_t{0});
    p.k_effective = meta.value("k_effective", p.k_requested);
    p.lambda = meta.value("lambda", 0.0f);
    p.sigma = meta.value("sigma", 0.0f);
    p.per_sample = meta.value("per_sample", size_t{0});
    p.tau = meta.value("tau", 0.0f);
    p.seed = meta.value("seed", uint64_t{0});
    p.shared_map = meta.value("shared_map", false);

    const json& det = j.at("detector");
    p.detector.reference = b64_decode_f32(det.at("reference").get<std::string>());
    p.detector.tau = det.at("tau").get<float>();
    p.detector.space.layer = det.at("space").at("layer").get<size_t>();
    p.detector.space.component =
        component_from_name(det.at("space").at("component").get<std::string>());

    for (const json& e : j.at("entries")) {
        LayerSteering ls;
        ls.layer = e.at("layer").get<size_t>();
        ls.component = component_from_name(e.at("component").get<std::string>());
        size_t k = e.at("k").get<size_t>();
        ls.projector.mean = b64_decode_f32(e.at("mean").get<std::string>());
        std::vector<float> basis = b64_decode_f32(e.at("basis").get<std::string>());
        if (k == 0 || basis.empty() || basis.size() % k != 0) {
            throw Error("policy: basis size mismatch");
        }
        const size_t dim = basis.size() / k;
        ls.projector.basis = TensorF32({k, dim}, std::move(basis));
        if (ls.projector.mean.size() != ls.projector.dim()) {
            throw Error("policy: mean length does not match basis columns");
        }
        std::vector<float> a = b64_decode_f32(e.at("A").get<std::string>());
        if (a.size() != k * k) throw Error("policy: A size mismatch");
        ls.map.a = TensorF32({k, k}, std::move(a));
        ls.map.b = b64_decode_f32(e.at("b").get<std::string>());
        if (ls.map.b.size() != k) throw Error("policy: b size mismatch");
        ls.map.lambda = e.value("lambda", 0.0f);
        p.entries.push_back(std::move(ls));
    }
    std::sort(p.entries.begin(), p.entries.end(),
              [](const LayerSteering& x, const LayerSteering& y) { return x.layer < y.layer; });
    return p;
}

void save_policy(const std::string& path, const SteeringPolicy& policy) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw Error("policy: cannot write " + path);
    out << policy_to_json(policy);
    if (!out) throw Error("policy: write failed for " + path);
}

SteeringPolicy load_policy(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("policy: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return policy_from_json(text);
}

} // namespace mega::steer
