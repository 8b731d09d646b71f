#include "mega/model.hpp"

#include "mega/safetensors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mega::model {

using num::TensorF32;

void ModelConfig::validate() const {
    if (n_layers < 1) throw Error("ModelConfig: n_layers must be >= 1");
    if (vocab_size < 2) throw Error("ModelConfig: vocab_size must be >= 2");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
        throw Error("ModelConfig: d_model must be a positive multiple of n_heads");
    }
    if (d_ff == 0 || max_positions == 0) {
        throw Error("ModelConfig: d_ff and max_positions must be positive");
    }
    if (!(ln_eps > 0.0f)) throw Error("ModelConfig: ln_eps must be positive");
}

namespace {

void expect_shape(const TensorF32& t, std::vector<size_t> shape, const std::string& name) {
    if (t.shape != shape) {
        throw Error("model: tensor " + name + " has shape " + num::shape_str(t.shape) +
                    ", expected " + num::shape_str(shape));
    }
    t.check_finite(name);
}

const TensorF32& named(const io::TensorMap& tensors, const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        it = tensors.find("transformer." + name);
        if (it == tensors.end()) throw Error("model: missing tensor " + name);
    }
    return it->second;
}

void layer_norm_row(std::span<const float> x, std::span<const float> w,
                    std::span<const float> b, float eps, std::span<float> out) {
    const size_t d = x.size();
    double mean = 0.0;
    for (float v : x) mean += double(v);
    mean /= double(d);
    double var = 0.0;
    for (float v : x) {
        double c = double(v) - mean;
        var += c * c;
    }
    var /= double(d);
    const double inv_std = 1.0 / std::sqrt(var + double(eps));
    for (size_t j = 0; j < d; ++j) {
        out[j] = float((double(x[j]) - mean) * inv_std * double(w[j]) + double(b[j]));
    }
}

inline float gelu_tanh(float x) {
    const float k = 0.7978845608028654f; // sqrt(2/pi)
    float inner = k * (x + 0.044715f * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(inner));
}

// out[i, :] = x[i, :] @ w + b. Accumulates in double over ascending input
// index, so results are fixed regardless of how the compiler vectorizes.
void linear_rows(const TensorF32& x, const TensorF32& w, const TensorF32& b, TensorF32& out,
                 std::vector<double>& scratch) {
    const size_t n = x.rows(), in = x.cols(), o = w.cols();
    scratch.resize(o);
    const float* wd = w.data.data();
    for (size_t i = 0; i < n; ++i) {
        const float* xi = x.data.data() + i * in;
        for (size_t j = 0; j < o; ++j) scratch[j] = double(b.data[j]);
        for (size_t l = 0; l < in; ++l) {
            const double xv = double(xi[l]);
            const float* wr = wd + l * o;
            for (size_t j = 0; j < o; ++j) scratch[j] += xv * double(wr[j]);
        }
        float* oi = out.data.data() + i * o;
        for (size_t j = 0; j < o; ++j) oi[j] = float(scratch[j]);
    }
}

} // namespace

struct Model::TraceRecorder {
    size_t position;
    ResidualTrace trace;

    explicit TraceRecorder(size_t pos) : position(pos) {}

    void snapshot(std::span<const float> row, std::vector<float>& dst) {
        dst.assign(row.begin(), row.end());
    }
};

Model Model::load(const std::string& weights_path, const ModelConfig& config) {
    config.validate();
    io::TensorMap tensors = io::read_safetensors(weights_path);

    const size_t d = config.d_model, dff = config.d_ff;
    ModelWeights w;
    w.wte = named(tensors, "wte.weight");
    expect_shape(w.wte, {config.vocab_size, d}, "wte.weight");
    w.wpe = named(tensors, "wpe.weight");
    expect_shape(w.wpe, {config.max_positions, d}, "wpe.weight");

    w.layers.resize(config.n_layers);
    for (size_t l = 0; l < config.n_layers; ++l) {
        const std::string p = "h." + std::to_string(l) + ".";
        LayerWeights& lw = w.layers[l];
        lw.ln1_w = named(tensors, p + "ln_1.weight");
        expect_shape(lw.ln1_w, {d}, p + "ln_1.weight");
        lw.ln1_b = named(tensors, p + "ln_1.bias");
        expect_shape(lw.ln1_b, {d}, p + "ln_1.bias");
        lw.qkv_w = named(tensors, p + "attn.c_attn.weight");
        expect_shape(lw.qkv_w, {d, 3 * d}, p + "attn.c_attn.weight");
        lw.qkv_b = named(tensors, p + "attn.c_attn.bias");
        expect_shape(lw.qkv_b, {3 * d}, p + "attn.c_attn.bias");
        lw.attn_proj_w = named(tensors, p + "attn.c_proj.weight");
        expect_shape(lw.attn_proj_w, {d, d}, p + "attn.c_proj.weight");
        lw.attn_proj_b = named(tensors, p + "attn.c_proj.bias");
        expect_shape(lw.attn_proj_b, {d}, p + "attn.c_proj.bias");
        lw.ln2_w = named(tensors, p + "ln_2.weight");
        expect_shape(lw.ln2_w, {d}, p + "ln_2.weight");
        lw.ln2_b = named(tensors, p + "ln_2.bias");
        expect_shape(lw.ln2_b, {d}, p + "ln_2.bias");
        lw.fc_w = named(tensors, p + "mlp.c_fc.weight");
        expect_shape(lw.fc_w, {d, dff}, p + "mlp.c_fc.weight");
        lw.fc_b = named(tensors, p + "mlp.c_fc.bias");
        expect_shape(lw.fc_b, {dff}, p + "mlp.c_fc.bias");
        lw.ffn_proj_w = named(tensors, p + "mlp.c_proj.weight");
        expect_shape(lw.ffn_proj_w, {dff, d}, p + "mlp.c_proj.weight");
        lw.ffn_proj_b = named(tensors, p + "mlp.c_proj.bias");
        expect_shape(lw.ffn_proj_b, {d}, p + "mlp.c_proj.bias");
    }

    w.ln_f_w = named(tensors, "ln_f.weight");
    expect_shape(w.ln_f_w, {d}, "ln_f.weight");
    w.ln_f_b = named(tensors, "ln_f.bias");
    expect_shape(w.ln_f_b, {d}, "ln_f.bias");

    if (tensors.count("lm_head.weight")) {
        w.lm_head = tensors.at("lm_head.weight");
        expect_shape(*w.lm_head, {config.vocab_size, d}, "lm_head.weight");
    }

    return from_weights(std::move(w), config);
}

Model Model::from_weights(ModelWeights weights, const ModelConfig& config) {
    config.validate();
    if (weights.layers.size() != config.n_layers) {
        throw Error("model: expected " + std::to_string(config.n_layers) + " layers, got " +
                    std::to_string(weights.layers.size()));
    }
    Model m;
    m.config_ = config;
    m.weights_ = std::move(weights);
    return m;
}

void Model::check_tokens(std::span<const int> tokens, size_t position) const {
    if (tokens.empty()) throw Error("model: empty token sequence");
    if (tokens.size() > config_.max_positions) {
        throw Error("model: sequence length " + std::to_string(tokens.size()) +
                    " exceeds max_positions " + std::to_string(config_.max_positions));
    }
    if (position >= tokens.size()) {
        throw Error("model: position " + std::to_string(position) + " out of range for " +
                    std::to_string(tokens.size()) + " tokens");
    }
    for (int t : tokens) {
        if (t < 0 || size_t(t) >= config_.vocab_size) {
            throw Error("model: token id " + std::to_string(t) + " out of vocabulary");
        }
    }
}

std::vector<float> Model::run_forward(std::span<const int> tokens, size_t logits_position,
                                      LayerHook* hook, TraceRecorder* rec) const {
    const size_t T = tokens.size();
    const size_t d = config_.d_model;
    const size_t n_heads = config_.n_heads;
    const size_t dh = d / n_heads;
    const size_t last = T - 1;

    TensorF32 x({T, d}, 0.0f);
    for (size_t i = 0; i < T; ++i) {
        std::span<const float> te = weights_.wte.row(size_t(tokens[i]));
        std::span<const float> pe = weights_.wpe.row(i);
        std::span<float> xi = x.row(i);
        for (size_t j = 0; j < d; ++j) xi[j] = te[j] + pe[j];
    }

    if (rec) {
        rec->trace.layers.resize(config_.n_layers);
        rec->snapshot(x.row(rec->position), rec->trace.layers[0].lin);
    }

    TensorF32 x_norm({T, d}, 0.0f);
    TensorF32 qkv({T, 3 * d}, 0.0f);
    TensorF32 attn_mix({T, d}, 0.0f);
    TensorF32 attn_out({T, d}, 0.0f);
    TensorF32 ffn_hidden({T, config_.d_ff}, 0.0f);
    TensorF32 ffn_out({T, d}, 0.0f);
    std::vector<double> scores(T);
    std::vector<double> head_acc(dh);
    std::vector<double> scratch;

    for (size_t l = 0; l < config_.n_layers; ++l) {
        const LayerWeights& lw = weights_.layers[l];
        if (rec && l > 0) rec->snapshot(x.row(rec->position), rec->trace.layers[l].lin);

        for (size_t i = 0; i < T; ++i) {
            layer_norm_row(x.row(i), lw.ln1_w.data, lw.ln1_b.data, config_.ln_eps, x_norm.row(i));
        }
        linear_rows(x_norm, lw.qkv_w, lw.qkv_b, qkv, scratch);

        // Causal multi-head attention; scores and softmax in double.
        const double scale = 1.0 / std::sqrt(double(dh));
        const float* qkv_d = qkv.data.data();
        const size_t qkv_stride = 3 * d;
        for (size_t h = 0; h < n_heads; ++h) {
            const size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
            for (size_t i = 0; i < T; ++i) {
                const float* qi = qkv_d + i * qkv_stride + qo;
                double max_score = -1e300;
                for (size_t j = 0; j <= i; ++j) {
                    const float* kj = qkv_d + j * qkv_stride + ko;
                    double s = 0.0;
                    for (size_t t = 0; t < dh; ++t) s += double(qi[t]) * double(kj[t]);
                    s *= scale;
                    scores[j] = s;
                    max_score = std::max(max_score, s);
                }
                double denom = 0.0;
                for (size_t j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - max_score);
                    denom += scores[j];
                }
                std::fill(head_acc.begin(), head_acc.end(), 0.0);
                for (size_t j = 0; j <= i; ++j) {
                    const double a = scores[j];
                    const float* vj = qkv_d + j * qkv_stride + vo;
                    for (size_t t = 0; t < dh; ++t) head_acc[t] += a * double(vj[t]);
                }
                float* out = attn_mix.data.data() + i * d + qo;
                for (size_t t = 0; t < dh; ++t) out[t] = float(head_acc[t] / denom);
            }
        }
        linear_rows(attn_mix, lw.attn_proj_w, lw.attn_proj_b, attn_out, scratch);

        if (hook) hook->on_attn(l, x.row(last), attn_out.row(last));
        if (rec) rec->snapshot(attn_out.row(rec->position), rec->trace.layers[l].attn);

        for (size_t i = 0; i < T; ++i) {
            std::span<float> xi = x.row(i);
            std::span<const float> ai = attn_out.row(i);
            for (size_t j = 0; j < d; ++j) xi[j] += ai[j];
        }
        if (rec) rec->snapshot(x.row(rec->position), rec->trace.layers[l].lres);

        for (size_t i = 0; i < T; ++i) {
            layer_norm_row(x.row(i), lw.ln2_w.data, lw.ln2_b.data, config_.ln_eps, x_norm.row(i));
        }
        linear_rows(x_norm, lw.fc_w, lw.fc_b, ffn_hidden, scratch);
        for (float& v : ffn_hidden.data) v = gelu_tanh(v);
        linear_rows(ffn_hidden, lw.ffn_proj_w, lw.ffn_proj_b, ffn_out, scratch);

        if (hook) hook->on_ffn(l, x.row(last), ffn_out.row(last));
        if (rec) rec->snapshot(ffn_out.row(rec->position), rec->trace.layers[l].ffn);

        for (size_t i = 0; i < T; ++i) {
            std::span<float> xi = x.row(i);
            std::span<const float> fi = ffn_out.row(i);
            for (size_t j = 0; j < d; ++j) xi[j] += fi[j];
        }
        if (hook) {
            hook->on_res(l, x.row(last));
            if (rec && rec->position == last) {
                // Fold any res-hook rewrite into the ffn snapshot so the
                // lout == lres + ffn identity survives steered traces.
                LayerSnapshot& snap = rec->trace.layers[l];
                std::span<const float> xr = x.row(last);
                for (size_t j = 0; j < d; ++j) snap.ffn[j] = xr[j] - snap.lres[j];
            }
        }
        if (rec) rec->snapshot(x.row(rec->position), rec->trace.layers[l].lout);
    }

    std::vector<float> logits = logits_from_state(x.row(logits_position));
    if (rec) {
        rec->trace.logits = (rec->position == logits_position)
                                ? logits
                                : logits_from_state(x.row(rec->position));
    }
    return logits;
}

std::vector<float> Model::forward_logits(std::span<const int> tokens, size_t position,
                                         LayerHook* hook) const {
    check_tokens(tokens, position);
    return run_forward(tokens, position, hook, nullptr);
}

ResidualTrace Model::forward_trace(std::span<const int> tokens, size_t position,
                                   LayerHook* hook) const {
    check_tokens(tokens, position);
    TraceRecorder rec(position);
    run_forward(tokens, position, hook, &rec);
    rec.trace.position = position;
    num::check_finite(rec.trace.logits, "forward_trace logits");
    return std::move(rec.trace);
}

std::vector<float> Model::logits_from_state(std::span<const float> h) const {
    if (h.size() != config_.d_model) {
        throw Error("model: state has dimension " + std::to_string(h.size()) + ", expected " +
                    std::to_string(config_.d_model));
    }
    num::check_finite(h, "residual state");
    std::vector<float> normed(config_.d_model);
    layer_norm_row(h, weights_.ln_f_w.data, weights_.ln_f_b.data, config_.ln_eps, normed);
    const TensorF32& head = weights_.lm_head ? *weights_.lm_head : weights_.wte;
    std::vector<float> logits(config_.vocab_size);
    for (size_t v = 0; v < config_.vocab_size; ++v) {
        logits[v] = float(num::dot(normed, head.row(v)));
    }
    return logits;
}

double Model::logprob_from_state(std::span<const float> h, int token_id) const {
    if (token_id < 0 || size_t(token_id) >= config_.vocab_size) {
        throw Error("model: token id " + std::to_string(token_id) + " out of vocabulary");
    }
    std::vector<float> logits = logits_from_state(h);
    double max_logit = -1e300;
    for (float v : logits) max_logit = std::max(max_logit, double(v));
    double lse = 0.0;
    for (float v : logits) lse += std::exp(double(v) - max_logit);
    return double(logits[size_t(token_id)]) - max_logit - std::log(lse);
}

int Model::argmax_token(std::span<const float> logits) {
    size_t best = 0;
    for (size_t v = 1; v < logits.size(); ++v) {
        if (logits[v] > logits[best]) best = v;
    }
    return int(best);
}

std::vector<int> Model::greedy_decode(std::span<const int> tokens, size_t max_new,
                                      LayerHook* hook) const {
    if (max_new < 1) throw Error("model: greedy_decode needs max_new >= 1");
    if (tokens.empty()) throw Error("model: empty token sequence");
    if (tokens.size() + max_new > config_.max_positions) {
        throw Error("model: context overflow: " + std::to_string(tokens.size()) + " + " +
                    std::to_string(max_new) + " tokens exceeds max_positions " +
                    std::to_string(config_.max_positions));
    }
    std::vector<int> ctx(tokens.begin(), tokens.end());
    std::vector<int> generated;
    generated.reserve(max_new);
    for (size_t step = 0; step < max_new; ++step) {
        std::vector<float> logits = forward_logits(ctx, ctx.size() - 1, hook);
        int next = argmax_token(logits);
        generated.push_back(next);
        ctx.push_back(next);
    }
    return generated;
}

} // namespace mega::model
