#pragma once

#include "mega/model.hpp"
#include "mega/runconfig.hpp"
#include "mega/safetensors.hpp"

#include <cstdint>
#include <string>

namespace mega::cli {

// Seeded toy artifacts for tests and demos: a random 4-layer byte-level
// model, a synthetic edit dataset whose cases verifiably flip their argmax
// under the in-context edit prefix, and a ready-to-run config with a
// calibrated scope threshold.
struct ToyGenResult {
    std::string model_path;
    std::string dataset_path;
    std::string config_path;
    RunConfig config;
    size_t n_cases = 0;
    float tau = 0.0f;
    double min_flip_margin = 0.0; // worst logit margin of the in-context argmax
};

model::ModelConfig toy_model_config();

// Random toy weights in GPT-2 checkpoint naming; deterministic under seed.
io::TensorMap random_toy_weights(const model::ModelConfig& config, uint64_t seed);

ToyGenResult generate_toy(const std::string& outdir, uint64_t seed, size_t n_cases = 10);

} // namespace mega::cli
