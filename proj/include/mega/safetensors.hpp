#pragma once

#include "mega/tensor.hpp"

#include <map>
#include <string>

namespace mega::io {

// Minimal safetensors container, f32 only: 8-byte little-endian header
// length, UTF-8 JSON header {name: {dtype, shape, data_offsets}}, raw
// little-endian tensor data. Offsets are relative to the data section.
using TensorMap = std::map<std::string, num::TensorF32>;

TensorMap read_safetensors(const std::string& path);
void write_safetensors(const std::string& path, const TensorMap& tensors);

} // namespace mega::io
