#include "mega/safetensors.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace mega::io {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "safetensors i/o assumes a little-endian host");

TensorMap read_safetensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("safetensors: cannot open " + path);

    uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), 8);
    if (!in || header_len == 0 || header_len > (1ull << 31)) {
        throw Error("safetensors: bad header length in " + path);
    }
    std::string header(header_len, '\0');
    in.read(header.data(), std::streamsize(header_len));
    if (!in) throw Error("safetensors: truncated header in " + path);

    json meta;
    try {
        meta = json::parse(header);
    } catch (const json::exception& e) {
        throw Error("safetensors: malformed JSON header in " + path + ": " + e.what());
    }

    std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    TensorMap out;
    for (auto& [name, desc] : meta.items()) {
        if (name == "__metadata__") continue;
        std::string dtype = desc.at("dtype").get<std::string>();
        // Non-f32 entries (attention mask buffers and the like) are ignored;
        // anything the model needs will be reported missing by the loader.
        if (dtype != "F32") continue;
        std::vector<size_t> shape = desc.at("shape").get<std::vector<size_t>>();
        auto offsets = desc.at("data_offsets").get<std::vector<uint64_t>>();
        if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > blob.size()) {
            throw Error("safetensors: bad data_offsets for tensor " + name);
        }
        size_t n_bytes = offsets[1] - offsets[0];
        size_t n_elems = 1;
        for (size_t d : shape) n_elems *= d;
        if (shape.empty()) n_elems = 1;
        if (n_bytes != n_elems * 4) {
            throw Error("safetensors: tensor " + name + " byte count " + std::to_string(n_bytes) +
                        " does not match shape " + num::shape_str(shape));
        }
        std::vector<float> data(n_elems);
        std::memcpy(data.data(), blob.data() + offsets[0], n_bytes);
        out.emplace(name, num::TensorF32(shape, std::move(data)));
    }
    return out;
}

void write_safetensors(const std::string& path, const TensorMap& tensors) {
    json meta = json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        uint64_t bytes = uint64_t(t.size()) * 4;
        meta[name] = {{"dtype", "F32"},
                      {"shape", t.shape},
                      {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string header = meta.dump();
    // Pad to 8 bytes as the reference implementation does.
    while (header.size() % 8 != 0) header.push_back(' ');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("safetensors: cannot write " + path);
    uint64_t header_len = header.size();
    out.write(reinterpret_cast<const char*>(&header_len), 8);
    out.write(header.data(), std::streamsize(header.size()));
    for (const auto& [name, t] : tensors) {
        (void)name;
        out.write(reinterpret_cast<const char*>(t.data.data()), std::streamsize(t.size() * 4));
    }
    if (!out) throw Error("safetensors: write failed for " + path);
}

} // namespace mega::io
