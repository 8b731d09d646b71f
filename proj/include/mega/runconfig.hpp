#pragma once

#include "mega/dataset.hpp"
#include "mega/model.hpp"
#include "mega/steering.hpp"
#include "mega/tokenizer.hpp"

#include <cstdint>
#include <string>

namespace mega::cli {

struct TokenizerSection {
    std::string mode = "byte"; // "byte" | "bpe"
    std::string vocab_path;
    std::string merges_path;

    bool operator==(const TokenizerSection&) const = default;
};

struct ModelSection {
    std::string weights_path;
    TokenizerSection tokenizer;
    model::ModelConfig config;

    bool operator==(const ModelSection& o) const;
};

struct DatasetSection {
    std::string path;
    size_t limit = 0; // 0 = all
    uint64_t seed = 42;
    eval::Sampling sampling = eval::Sampling::FirstN;

    bool operator==(const DatasetSection&) const = default;
};

struct SteeringSection {
    size_t window_lo = 0, window_hi = 0; // inclusive
    std::string component = "attn_res";
    size_t k = 512;
    float lambda = 1e-2f;
    float sigma = 0.1f;
    size_t per_sample = 4;
    float tau = 6.5f;
    bool shared_map = false;

    bool operator==(const SteeringSection&) const = default;
};

struct OutputSection {
    std::string dir = "out";
    bool emit_svg = false;

    bool operator==(const OutputSection&) const = default;
};

struct RunConfig {
    ModelSection model;
    DatasetSection dataset;
    SteeringSection steering;
    OutputSection output;
    size_t threads = 1;

    void validate() const;
    steer::PolicyConfig policy_config(uint64_t seed) const;

    bool operator==(const RunConfig&) const = default;
};

std::string serialize_config(const RunConfig& config);
RunConfig parse_config(const std::string& text);

// Loads a config file; relative paths inside it are resolved against the
// file's directory.
RunConfig load_config(const std::string& path);
void save_config(const std::string& path, const RunConfig& config);

// Instantiates the tokenizer / model named by the config.
model::Tokenizer make_tokenizer(const TokenizerSection& section);
model::Model load_model(const ModelSection& section);

} // namespace mega::cli
