#pragma once

#include "mega/tensor.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mega::model {

struct ModelConfig {
    size_t n_layers = 0;
    size_t d_model = 0;
    size_t n_heads = 0;
    size_t d_ff = 0;
    size_t vocab_size = 0;
    size_t max_positions = 0;
    float ln_eps = 1e-5f;

    void validate() const;
};

struct LayerWeights {
    num::TensorF32 ln1_w, ln1_b;
    num::TensorF32 qkv_w, qkv_b;           // [d, 3d], [3d]
    num::TensorF32 attn_proj_w, attn_proj_b; // [d, d], [d]
    num::TensorF32 ln2_w, ln2_b;
    num::TensorF32 fc_w, fc_b;             // [d, d_ff], [d_ff]
    num::TensorF32 ffn_proj_w, ffn_proj_b; // [d_ff, d], [d]
};

struct ModelWeights {
    num::TensorF32 wte; // [V, d]
    num::TensorF32 wpe; // [max_positions, d]
    std::vector<LayerWeights> layers;
    num::TensorF32 ln_f_w, ln_f_b;
    std::optional<num::TensorF32> lm_head; // [V, d]; absent means tied to wte
};

// Residual-stream snapshots at one token position. The stored vectors are
// the exact f32 values the forward pass produced, so
//   lres == lin + attn  and  lout == lres + ffn
// hold bit-for-bit, and layer l+1's lin equals layer l's lout.
struct LayerSnapshot {
    std::vector<float> lin, attn, lres, ffn, lout;
};

struct ResidualTrace {
    size_t position = 0;
    std::vector<LayerSnapshot> layers;
    std::vector<float> logits; // final logits at `position`

    const std::vector<float>& lin0() const { return layers.front().lin; }
    const std::vector<float>& final_state() const { return layers.back().lout; }
};

// Inference-time intervention points. Callbacks fire at the last position of
// the sequence only, once per layer, in layer order; each may rewrite the
// passed row in place. Rows are d_model long.
class LayerHook {
public:
    virtual ~LayerHook() = default;
    // After the attention output projection; `lin` is the pre-attention
    // residual state at the last position.
    virtual void on_attn(size_t layer, std::span<const float> lin, std::span<float> attn_out) {
        (void)layer; (void)lin; (void)attn_out;
    }
    // After the FFN; `lres` is the post-attention residual state.
    virtual void on_ffn(size_t layer, std::span<const float> lres, std::span<float> ffn_out) {
        (void)layer; (void)lres; (void)ffn_out;
    }
    // After the FFN output has been added into the residual stream.
    virtual void on_res(size_t layer, std::span<float> lout) { (void)layer; (void)lout; }
};

class Model {
public:
    // Reads a safetensors file laid out with the GPT-2 checkpoint names
    // (wte.weight, h.{i}.attn.c_attn.weight, ..., ln_f.weight; a leading
    // "transformer." prefix is accepted). Throws on missing tensors, shape
    // mismatches against `config`, or non-finite weights.
    static Model load(const std::string& weights_path, const ModelConfig& config);
    static Model from_weights(ModelWeights weights, const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const ModelWeights& weights() const { return weights_; }

    // Full forward pass (no KV cache); returns the logits row at `position`.
    // `hook`, when given, fires at the last position of `tokens`.
    std::vector<float> forward_logits(std::span<const int> tokens, size_t position,
                                      LayerHook* hook = nullptr) const;

    // Forward pass recording the residual decomposition at `position`. When a
    // hook rewrites the stream, the recorded components are the effective
    // ones, so the trace identities still hold exactly.
    ResidualTrace forward_trace(std::span<const int> tokens, size_t position,
                                LayerHook* hook = nullptr) const;

    // log softmax(head(ln_f(h)))[token_id]; always <= 0.
    double logprob_from_state(std::span<const float> h, int token_id) const;
    // Full readout of a residual state through ln_f and the LM head.
    std::vector<float> logits_from_state(std::span<const float> h) const;

    // Appends up to `max_new` argmax tokens (ties break to the lowest id).
    // `hook` fires at the current last position of every step.
    std::vector<int> greedy_decode(std::span<const int> tokens, size_t max_new,
                                   LayerHook* hook = nullptr) const;

    static int argmax_token(std::span<const float> logits);

private:
    Model() = default;

    struct TraceRecorder;
    std::vector<float> run_forward(std::span<const int> tokens, size_t logits_position,
                                   LayerHook* hook, TraceRecorder* recorder) const;
    void check_tokens(std::span<const int> tokens, size_t position) const;

    ModelConfig config_;
    ModelWeights weights_;
};

} // namespace mega::model
