#pragma once

#include "mega/dataset.hpp"
#include "mega/model.hpp"
#include "mega/pca.hpp"
#include "mega/tokenizer.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mega::steer {

// Which per-layer state gets rewritten at the last token position.
//   Attn:    the attention output itself
//   AttnRes: the post-attention residual state (rewrites the attention
//            output so lres lands on the transformed value)
//   Ffn:     the FFN output
//   Res:     the layer output, after the FFN addition
enum class Component { Attn, AttnRes, Ffn, Res };
const char* component_name(Component c);
Component component_from_name(const std::string& name);

// Affine map m(z) = A z + b fitted between Gaussian moment estimates in
// PCA coordinates; A is symmetric PSD.
struct TransportMap {
    num::TensorF32 a;     // k x k
    std::vector<float> b; // k
    float lambda = 0.0f;

    size_t k() const { return b.size(); }
    std::vector<float> apply(std::span<const float> z) const;
};

struct ScopeSpace {
    size_t layer = 0;
    Component component = Component::AttnRes;
};

// Euclidean gate: a prompt is in scope iff the distance between its
// component state and `reference` is <= tau (inclusive).
struct ScopeDetector {
    std::vector<float> reference;
    float tau = 0.0f;
    ScopeSpace space;
};

struct ScopeResult {
    bool in_scope = false;
    double distance = 0.0;
};

struct LayerSteering {
    size_t layer = 0;
    Component component = Component::AttnRes;
    num::PcaProjector projector;
    TransportMap map;
};

struct PolicyConfig {
    size_t window_lo = 0, window_hi = 0; // inclusive layer range
    Component component = Component::AttnRes;
    size_t k = 512;
    float lambda = 1e-2f;
    float sigma = 0.1f;
    size_t per_sample = 4;
    float tau = 6.5f;
    uint64_t seed = 42;
    bool shared_map = false;
};

struct SteeringPolicy {
    std::vector<LayerSteering> entries; // sorted by layer, no duplicates
    ScopeDetector detector;
    uint64_t seed = 42;

    // provenance
    std::string case_id;
    size_t window_lo = 0, window_hi = 0;
    Component component = Component::AttnRes;
    size_t k_requested = 0, k_effective = 0;
    float lambda = 0.0f, sigma = 0.0f, tau = 0.0f;
    size_t per_sample = 0;
    bool shared_map = false;
};

// Row i = the component's state at the last token of prompts[i], from the
// unmodified model.
num::TensorF32 collect_activations(const model::Model& m, const model::Tokenizer& tok,
                                   const std::vector<std::string>& prompts, size_t layer,
                                   Component component);

// Keeps the n originals, then appends per_sample N(0, sigma^2 I) perturbations
// of each row, grouped by source row. Deterministic under `seed`.
num::TensorF32 augment_gaussian(const num::TensorF32& acts, size_t per_sample, float sigma,
                                uint64_t seed);

// Closed-form Gaussian Monge map between the rows of src and tgt with
// covariance regularization Sigma + lambda I on both sides:
//   A = Ss^{-1/2} (Ss^{1/2} St Ss^{1/2})^{1/2} Ss^{-1/2},  b = mu_t - A mu_s.
TransportMap fit_transport(const num::TensorF32& src, const num::TensorF32& tgt, float lambda);

// h' = h + P^T ((A z + b) - z) with z = P (h - mean); the component of h
// orthogonal to the PCA rowspace is untouched.
std::vector<float> steer_transform(std::span<const float> h, const num::PcaProjector& projector,
                                   const TransportMap& map);

// Fits one (projector, map) pair per window layer: source activations come
// from the case's paraphrase + implication prompts, target activations from
// the same prompts prefixed with the case's edit context. The detector
// centroid lives at the first window layer. With shared_map, a single pair is
// fitted on activations pooled across the window.
SteeringPolicy fit_policy(const model::Model& m, const model::Tokenizer& tok,
                          const eval::EditCase& edit_case, const PolicyConfig& config);

std::vector<float> scope_query(const model::Model& m, const ScopeSpace& space,
                               std::span<const int> tokens);
ScopeResult in_scope(const ScopeDetector& detector, const model::Model& m,
                     const model::Tokenizer& tok, const std::string& prompt);

// LayerHook that applies the policy's transforms; scope gating is the
// caller's job (see steered_forward / steered_decode).
class PolicyHook final : public model::LayerHook {
public:
    explicit PolicyHook(const SteeringPolicy& policy);
    void on_attn(size_t layer, std::span<const float> lin, std::span<float> attn_out) override;
    void on_ffn(size_t layer, std::span<const float> lres, std::span<float> ffn_out) override;
    void on_res(size_t layer, std::span<float> lout) override;

private:
    const LayerSteering* entry(size_t layer, Component c) const;
    const SteeringPolicy& policy_;
};

// Logits at the last position. Out-of-scope token sequences go through the
// untouched forward pass and are bit-identical to the base model.
std::vector<float> steered_forward(const model::Model& m, const SteeringPolicy& policy,
                                   std::span<const int> tokens,
                                   ScopeResult* scope_out = nullptr);

// Greedy decode with the gate evaluated once on the initial prompt tokens.
std::vector<int> steered_decode(const model::Model& m, const SteeringPolicy& policy,
                                std::span<const int> tokens, size_t max_new,
                                ScopeResult* scope_out = nullptr);

// mega-policy/1 JSON envelope, tensors base64-encoded little-endian f32.
std::string policy_to_json(const SteeringPolicy& policy);
SteeringPolicy policy_from_json(const std::string& text);
void save_policy(const std::string& path, const SteeringPolicy& policy);
SteeringPolicy load_policy(const std::string& path);

} // namespace mega::steer
