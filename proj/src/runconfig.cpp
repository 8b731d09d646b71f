#include "mega/runconfig.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

namespace mega::cli {

using nlohmann::json;
namespace fs = std::filesystem;

bool ModelSection::operator==(const ModelSection& o) const {
    return weights_path == o.weights_path && tokenizer == o.tokenizer &&
           config.n_layers == o.config.n_layers && config.d_model == o.config.d_model &&
           config.n_heads == o.config.n_heads && config.d_ff == o.config.d_ff &&
           config.vocab_size == o.config.vocab_size &&
           config.max_positions == o.config.max_positions && config.ln_eps == o.config.ln_eps;
}

void RunConfig::validate() const {
    model.config.validate();
    if (model.tokenizer.mode != "byte" && model.tokenizer.mode != "bpe") {
        throw Error("config: tokenizer mode must be 'byte' or 'bpe'");
    }
    if (steering.window_lo > steering.window_hi ||
        steering.window_hi >= model.config.n_layers) {
        throw Error("config: steering window [" + std::to_string(steering.window_lo) + "," +
                    std::to_string(steering.window_hi) + "] invalid for " +
                    std::to_string(model.config.n_layers) + " layers");
    }
    if (steering.k < 1) throw Error("config: steering.k must be >= 1");
    if (steering.tau < 0.0f) throw Error("config: steering.tau must be >= 0");
    steer::component_from_name(steering.component);
    if (threads < 1) throw Error("config: threads must be >= 1");
}

steer::PolicyConfig RunConfig::policy_config(uint64_t seed) const {
    steer::PolicyConfig pc;
    pc.window_lo = steering.window_lo;
    pc.window_hi = steering.window_hi;
    pc.component = steer::component_from_name(steering.component);
    pc.k = steering.k;
    pc.lambda = steering.lambda;
    pc.sigma = steering.sigma;
    pc.per_sample = steering.per_sample;
    pc.tau = steering.tau;
    pc.seed = seed;
    pc.shared_map = steering.shared_map;
    return pc;
}

std::string serialize_config(const RunConfig& c) {
    json j;
    j["model"] = {{"weights_path", c.model.weights_path},
                  {"tokenizer",
                   {{"mode", c.model.tokenizer.mode},
                    {"vocab_path", c.model.tokenizer.vocab_path},
                    {"merges_path", c.model.tokenizer.merges_path}}},
                  {"config",
                   {{"n_layers", c.model.config.n_layers},
                    {"d_model", c.model.config.d_model},
                    {"n_heads", c.model.config.n_heads},
                    {"d_ff", c.model.config.d_ff},
                    {"vocab_size", c.model.config.vocab_size},
                    {"max_positions", c.model.config.max_positions},
                    {"ln_eps", c.model.config.ln_eps}}}};
    j["dataset"] = {{"path", c.dataset.path},
                    {"limit", c.dataset.limit},
                    {"seed", c.dataset.seed},
                    {"sampling", c.dataset.sampling == eval::Sampling::FirstN ? "first_n" : "random"}};
    j["steering"] = {{"window", {c.steering.window_lo, c.steering.window_hi}},
                     {"component", c.steering.component},
                     {"k", c.steering.k},
                     {"lambda", c.steering.lambda},
                     {"sigma", c.steering.sigma},
                     {"per_sample", c.steering.per_sample},
                     {"tau", c.steering.tau},
                     {"shared_map", c.steering.shared_map}};
    j["output"] = {{"dir", c.output.dir}, {"emit_svg", c.output.emit_svg}};
    j["threads"] = c.threads;
    return j.dump(2) + "\n";
}

RunConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(std::string("config: malformed JSON: ") + e.what());
    }
    RunConfig c;
    try {
        const json& m = j.at("model");
        c.model.weights_path = m.at("weights_path").get<std::string>();
        if (m.contains("tokenizer")) {
            const json& t = m.at("tokenizer");
            c.model.tokenizer.mode = t.value("mode", std::string("byte"));
            c.model.tokenizer.vocab_path = t.value("vocab_path", std::string{});
            c.model.tokenizer.merges_path = t.value("merges_path", std::string{});
        }
        const json& mc = m.at("config");
        c.model.config.n_layers = mc.at("n_layers").get<size_t>();
        c.model.config.d_model = mc.at("d_model").get<size_t>();
        c.model.config.n_heads = mc.at("n_heads").get<size_t>();
        c.model.config.d_ff = mc.at("d_ff").get<size_t>();
        c.model.config.vocab_size = mc.at("vocab_size").get<size_t>();
        c.model.config.max_positions = mc.at("max_positions").get<size_t>();
        c.model.config.ln_eps = mc.value("ln_eps", 1e-5f);

        if (j.contains("dataset")) {
            const json& d = j.at("dataset");
            c.dataset.path = d.value("path", std::string{});
            c.dataset.limit = d.value("limit", size_t{0});
            c.dataset.seed = d.value("seed", uint64_t{42});
            std::string sampling = d.value("sampling", std::string("first_n"));
            if (sampling == "first_n") {
                c.dataset.sampling = eval::Sampling::FirstN;
            } else if (sampling == "random") {
                c.dataset.sampling = eval::Sampling::Random;
            } else {
                throw Error("config: dataset.sampling must be 'first_n' or 'random'");
            }
        }
        if (j.contains("steering")) {
            const json& s = j.at("steering");
            if (s.contains("window")) {
                c.steering.window_lo = s.at("window").at(0).get<size_t>();
                c.steering.window_hi = s.at("window").at(1).get<size_t>();
            }
            c.steering.component = s.value("component", std::string("attn_res"));
            c.steering.k = s.value("k", size_t{512});
            c.steering.lambda = s.value("lambda", 1e-2f);
            c.steering.sigma = s.value("sigma", 0.1f);
            c.steering.per_sample = s.value("per_sample", size_t{4});
            c.steering.tau = s.value("tau", 6.5f);
            c.steering.shared_map = s.value("shared_map", false);
        }
        if (j.contains("output")) {
            c.output.dir = j.at("output").value("dir", std::string("out"));
            c.output.emit_svg = j.at("output").value("emit_svg", false);
        }
        c.threads = j.value("threads", size_t{1});
    } catch (const json::exception& e) {
        throw Error(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    RunConfig c = parse_config(text);

    const fs::path base = fs::path(path).parent_path();
    auto resolve = [&](std::string& p) {
        if (!p.empty() && fs::path(p).is_relative()) p = (base / p).string();
    };
    resolve(c.model.weights_path);
    resolve(c.model.tokenizer.vocab_path);
    resolve(c.model.tokenizer.merges_path);
    resolve(c.dataset.path);
    resolve(c.output.dir);
    return c;
}

void save_config(const std::string& path, const RunConfig& config) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("config: cannot write " + path);
    out << serialize_config(config);
}

model::Tokenizer make_tokenizer(const TokenizerSection& section) {
    if (section.mode == "byte") return model::Tokenizer::byte_mode();
    if (section.mode == "bpe") {
        return model::Tokenizer::bpe_from_files(section.vocab_path, section.merges_path);
    }
    throw Error("config: unknown tokenizer mode '" + section.mode + "'");
}

model::Model load_model(const ModelSection& section) {
    return model::Model::load(section.weights_path, section.config);
}

} // namespace mega::cli
