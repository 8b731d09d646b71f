#include "mega/toygen.hpp"

#include "mega/attribution.hpp"
#include "mega/evaluation.hpp"
#include "mega/rng.hpp"
#include "mega/steering.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace mega::cli {

namespace fs = std::filesystem;
using num::Rng;
using num::TensorF32;

model::ModelConfig toy_model_config() {
    model::ModelConfig c;
    c.n_layers = 4;
    c.d_model = 32;
    c.n_heads = 4;
    c.d_ff = 128;
    c.vocab_size = 256;
    c.max_positions = 512; // doubt prompts triple the raw prompt length
    c.ln_eps = 1e-5f;
    return c;
}

namespace {

TensorF32 random_tensor(Rng& rng, std::vector<size_t> shape, double std_dev, double mean = 0.0) {
    TensorF32 t(std::move(shape), 0.0f);
    for (float& v : t.data) v = float(mean + std_dev * rng.normal());
    return t;
}

constexpr double kFlipMarginMin = 2.5;
constexpr double kFlipMarginBackup = 2.0; // fallback pool when a seed is unlucky
constexpr size_t kScanCandidates = 24;
constexpr size_t kParaphrases = 8;
constexpr size_t kProbes = 3;

std::string random_word(Rng& rng, size_t min_len, size_t max_len) {
    size_t len = min_len + rng.below(max_len - min_len + 1);
    std::string w;
    for (size_t i = 0; i < len; ++i) w.push_back(char('a' + rng.below(26)));
    return w;
}

std::string random_prompt(Rng& rng, size_t words) {
    std::string p;
    for (size_t i = 0; i < words; ++i) {
        if (i) p.push_back(' ');
        p += random_word(rng, 3, 6);
    }
    return p;
}

double logit_margin(std::span<const float> logits, int token) {
    double best_other = -1e300;
    for (size_t v = 0; v < logits.size(); ++v) {
        if (int(v) != token) best_other = std::max(best_other, double(logits[v]));
    }
    return double(logits[size_t(token)]) - best_other;
}

bool printable_byte(int b) { return b >= 33 && b <= 126; }

struct Candidate {
    eval::EditCase edit;
    double flip_margin = 0.0;
    double d_in = 0.0;  // widest in-scope distance (prompt + paraphrases)
    double d_out = 0.0; // closest probe distance
};

} // namespace

io::TensorMap random_toy_weights(const model::ModelConfig& config, uint64_t seed) {
    Rng rng(seed);
    const size_t d = config.d_model, dff = config.d_ff;
    const double w_std = 1.0 / std::sqrt(double(d));
    const double wff_std = 1.0 / std::sqrt(double(dff));

    io::TensorMap t;
    t.emplace("wte.weight", random_tensor(rng, {config.vocab_size, d}, 1.0));
    // Positions stay an order of magnitude below token content so that
    // context edits, not position offsets, dominate state differences.
    t.emplace("wpe.weight", random_tensor(rng, {config.max_positions, d}, 0.1));
    for (size_t l = 0; l < config.n_layers; ++l) {
        const std::string p = "h." + std::to_string(l) + ".";
        t.emplace(p + "ln_1.weight", random_tensor(rng, {d}, 0.05, 1.0));
        t.emplace(p + "ln_1.bias", random_tensor(rng, {d}, 0.05));
        // The last layer mixes gently, so mid-layer interventions reach the
        // readout instead of being rewritten by one final random mixer.
        const double proj_scale = (l + 1 == config.n_layers) ? 0.25 : 1.0;
        t.emplace(p + "attn.c_attn.weight", random_tensor(rng, {d, 3 * d}, w_std));
        t.emplace(p + "attn.c_attn.bias", random_tensor(rng, {3 * d}, 0.02));
        t.emplace(p + "attn.c_proj.weight", random_tensor(rng, {d, d}, w_std * proj_scale));
        t.emplace(p + "attn.c_proj.bias", random_tensor(rng, {d}, 0.02));
        t.emplace(p + "ln_2.weight", random_tensor(rng, {d}, 0.05, 1.0));
        t.emplace(p + "ln_2.bias", random_tensor(rng, {d}, 0.05));
        t.emplace(p + "mlp.c_fc.weight", random_tensor(rng, {d, dff}, w_std));
        t.emplace(p + "mlp.c_fc.bias", random_tensor(rng, {dff}, 0.02));
        t.emplace(p + "mlp.c_proj.weight", random_tensor(rng, {dff, d}, wff_std));
        t.emplace(p + "mlp.c_proj.bias", random_tensor(rng, {d}, 0.02));
    }
    t.emplace("ln_f.weight", random_tensor(rng, {d}, 0.05, 1.0));
    t.emplace("ln_f.bias", random_tensor(rng, {d}, 0.05));
    return t;
}

ToyGenResult generate_toy(const std::string& outdir, uint64_t seed, size_t n_cases) {
    fs::create_directories(outdir);
    const model::ModelConfig mc = toy_model_config();

    ToyGenResult result;
    result.model_path = (fs::path(outdir) / "toy_model.safetensors").string();
    result.dataset_path = (fs::path(outdir) / "toy_cases.jsonl").string();
    result.config_path = (fs::path(outdir) / "toy_config.json").string();

    io::write_safetensors(result.model_path, random_toy_weights(mc, seed));
    const model::Model m = model::Model::load(result.model_path, mc);
    const model::Tokenizer tok = model::Tokenizer::byte_mode();

    RunConfig cfg;
    cfg.model.weights_path = "toy_model.safetensors";
    cfg.model.tokenizer.mode = "byte";
    cfg.model.config = mc;
    cfg.dataset.path = "toy_cases.jsonl";
    cfg.dataset.seed = seed;
    cfg.steering.window_lo = mc.n_layers / 4;
    cfg.steering.window_hi = 3 * mc.n_layers / 4 - 1;
    cfg.steering.component = "attn_res";
    cfg.steering.k = 16;
    cfg.steering.lambda = 1e-2f;
    cfg.steering.sigma = 0.1f;
    cfg.steering.per_sample = 4;
    cfg.steering.tau = 0.0f; // calibrated below
    cfg.output.dir = "out";
    cfg.threads = 1;

    Rng rng(num::hash_label(seed, "toy-cases"));
    std::vector<Candidate> kept;
    result.min_flip_margin = 1e300;

    // Builds the full case around a verified flip and applies the cluster
    // geometry filters; returns false when the candidate has to be dropped.
    auto try_accept = [&](const std::string& prompt, int base_answer, int target_token,
                          double flip_margin) {
        Candidate cand;
        cand.flip_margin = flip_margin;
        cand.edit.case_id = "toy_" + std::to_string(kept.size());
        cand.edit.prompt = prompt;
        cand.edit.subject = prompt.substr(0, prompt.find(' '));
        cand.edit.ground_truth = std::string(1, char(uint8_t(base_answer)));
        cand.edit.target_new = std::string(1, char(uint8_t(target_token)));

        // Single-character mutations in the first half keep the suffix (and
        // the attributed last token) identical across the source cloud. A
        // paraphrase whose base answer already matches the target would blur
        // the generalization signal, so it is rejected.
        for (size_t p = 0; p < kParaphrases; ++p) {
            std::string para = prompt;
            for (int tries = 0; tries < 64; ++tries) {
                size_t pos = rng.below(std::max<size_t>(prompt.size() / 2, 1));
                char repl = char('a' + rng.below(26));
                if (para[pos] == ' ' || repl == prompt[pos]) continue;
                para[pos] = repl;
                break;
            }
            if (para == prompt) continue;
            std::vector<int> para_ids = tok.encode(para);
            std::vector<float> para_logits = m.forward_logits(para_ids, para_ids.size() - 1);
            int para_answer = model::Model::argmax_token(para_logits);
            if (std::tolower(char(uint8_t(para_answer))) ==
                std::tolower(char(uint8_t(target_token)))) {
                continue;
            }
            cand.edit.paraphrase_prompts.push_back(para);
        }
        if (cand.edit.paraphrase_prompts.size() < 4) return false;

        for (size_t p = 0; p < kProbes; ++p) {
            std::string probe = random_prompt(rng, 2 + rng.below(3));
            cand.edit.locality_probes.push_back({probe, ""});
        }

        // Scope geometry: the fitted detector centroid must keep the edit
        // cluster comfortably closer than every probe.
        steer::SteeringPolicy probe_policy =
            steer::fit_policy(m, tok, cand.edit, cfg.policy_config(seed));
        auto distance_of = [&](const std::string& text) {
            std::vector<int> q = tok.encode(text);
            std::vector<float> query = steer::scope_query(m, probe_policy.detector.space, q);
            return num::euclidean_distance(query, probe_policy.detector.reference);
        };
        cand.d_in = distance_of(cand.edit.prompt);
        for (const std::string& p : cand.edit.paraphrase_prompts) {
            cand.d_in = std::max(cand.d_in, distance_of(p));
        }
        cand.d_out = 1e300;
        for (const eval::LocalityProbe& p : cand.edit.locality_probes) {
            cand.d_out = std::min(cand.d_out, distance_of(p.prompt));
        }
        if (cand.d_in * 1.3 >= cand.d_out) return false;

        // One threshold must separate every case at once.
        double global_in = cand.d_in, global_out = cand.d_out;
        for (const Candidate& k : kept) {
            global_in = std::max(global_in, k.d_in);
            global_out = std::min(global_out, k.d_out);
        }
        if (global_in * 1.2 >= global_out) return false;

        result.min_flip_margin = std::min(result.min_flip_margin, flip_margin);
        kept.push_back(std::move(cand));
        return true;
    };

    struct Backup {
        std::string prompt;
        int base_answer;
        int target_token;
        double margin;
    };
    std::vector<Backup> backups;

    const size_t max_attempts = 4000;
    for (size_t attempt = 0; attempt < max_attempts && kept.size() < n_cases; ++attempt) {
        std::string prompt = random_prompt(rng, 3);
        std::vector<int> ids = tok.encode(prompt);
        std::vector<float> base_logits = m.forward_logits(ids, ids.size() - 1);
        int base_answer = model::Model::argmax_token(base_logits);
        if (!printable_byte(base_answer)) continue;

        // Scan shuffled single-char targets for one the edit context promotes
        // to argmax with a margin.
        std::string alphabet;
        for (char c = 'a'; c <= 'z'; ++c) alphabet.push_back(c);
        for (char c = '0'; c <= '9'; ++c) alphabet.push_back(c);
        for (size_t i = alphabet.size() - 1; i > 0; --i) {
            std::swap(alphabet[i], alphabet[rng.below(i + 1)]);
        }

        int target_token = -1;
        double flip_margin = 0.0;
        size_t scanned = 0;
        for (char cand_char : alphabet) {
            if (++scanned > kScanCandidates) break;
            int t = int(uint8_t(cand_char));
            if (std::tolower(cand_char) == std::tolower(char(uint8_t(base_answer)))) continue;
            std::string ike =
                attr::build_ike_context({}, prompt, std::string(1, cand_char), prompt);
            std::vector<int> ike_ids = tok.encode(ike);
            std::vector<float> ike_logits = m.forward_logits(ike_ids, ike_ids.size() - 1);
            if (model::Model::argmax_token(ike_logits) != t) continue;
            double margin = logit_margin(ike_logits, t);
            if (margin >= kFlipMarginMin) {
                target_token = t;
                flip_margin = margin;
                break;
            }
            if (margin >= kFlipMarginBackup && backups.size() < 4 * n_cases) {
                backups.push_back({prompt, base_answer, t, margin});
            }
        }
        if (target_token < 0) continue;
        try_accept(prompt, base_answer, target_token, flip_margin);
    }

    // Unlucky seeds top up from the widest-margin backups.
    std::stable_sort(backups.begin(), backups.end(),
                     [](const Backup& a, const Backup& b) { return a.margin > b.margin; });
    for (const Backup& b : backups) {
        if (kept.size() >= n_cases) break;
        try_accept(b.prompt, b.base_answer, b.target_token, b.margin);
    }

    if (kept.size() < n_cases) {
        throw Error("gen-toy: found only " + std::to_string(kept.size()) + " of " +
                    std::to_string(n_cases) + " flip cases; try another seed");
    }

    double tau_lo = 0.0, tau_hi = 1e300;
    for (const Candidate& c : kept) {
        tau_lo = std::max(tau_lo, c.d_in);
        tau_hi = std::min(tau_hi, c.d_out);
    }
    cfg.steering.tau = float(std::sqrt(tau_lo * tau_hi));

    // Fill probe answers with the base model's own continuations; byte-mode
    // decodes can contain arbitrary bytes, so keep the JSON printable.
    eval::BaseSystem base(m, tok);
    std::vector<eval::EditCase> cases;
    for (Candidate& c : kept) {
        for (eval::LocalityProbe& p : c.edit.locality_probes) {
            std::string raw = base.answer(p.prompt, 4);
            for (char& ch : raw) {
                if (!printable_byte(int(uint8_t(ch))) && ch != ' ') ch = '.';
            }
            p.answer = raw;
        }
        cases.push_back(std::move(c.edit));
    }

    eval::save_cases_jsonl(result.dataset_path, cases);
    save_config(result.config_path, cfg);

    // The returned config carries resolved paths, as load_config would.
    cfg.model.weights_path = result.model_path;
    cfg.dataset.path = result.dataset_path;
    result.config = cfg;
    result.n_cases = cases.size();
    result.tau = cfg.steering.tau;
    return result;
}

} // namespace mega::cli
