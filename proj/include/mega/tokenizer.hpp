#pragma once

#include "mega/tensor.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace mega::model {

enum class TokenizerMode { Byte, Bpe };

// Byte mode maps each byte to its own id (vocabulary 0..255). BPE mode
// implements the GPT-2 procedure: bytes are remapped to printable unicode
// units, pre-split into word-like chunks, then merged greedily by lowest
// merge rank. decode(encode(s)) == s for arbitrary byte strings in both
// modes.
class Tokenizer {
public:
    static Tokenizer byte_mode();
    // vocab.json: {"token": id, ...}; merges.txt: one "left right" pair per
    // line, rank = line order, optional "#version" first line.
    static Tokenizer bpe_from_files(const std::string& vocab_path, const std::string& merges_path);

    TokenizerMode mode() const { return mode_; }
    size_t vocab_size() const;

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

private:
    Tokenizer() = default;

    std::vector<int> encode_chunk_bpe(const std::string& chunk_bytes) const;

    TokenizerMode mode_ = TokenizerMode::Byte;
    std::unordered_map<std::string, int> vocab_;
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> merge_rank_; // "left right" -> rank
    std::vector<std::string> byte_to_unit_;           // 256 unicode units (utf-8)
    std::unordered_map<std::string, uint8_t> unit_to_byte_;
};

} // namespace mega::model
