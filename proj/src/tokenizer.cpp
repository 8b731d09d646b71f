#include "mega/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

namespace mega::model {

using nlohmann::json;

namespace {

std::string codepoint_to_utf8(uint32_t cp) {
    std::string s;
    if (cp < 0x80) {
        s.push_back(char(cp));
    } else if (cp < 0x800) {
        s.push_back(char(0xC0 | (cp >> 6)));
        s.push_back(char(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        s.push_back(char(0xE0 | (cp >> 12)));
        s.push_back(char(0x80 | ((cp >> 6) & 0x3F)));
        s.push_back(char(0x80 | (cp & 0x3F)));
    } else {
        s.push_back(char(0xF0 | (cp >> 18)));
        s.push_back(char(0x80 | ((cp >> 12) & 0x3F)));
        s.push_back(char(0x80 | ((cp >> 6) & 0x3F)));
        s.push_back(char(0x80 | (cp & 0x3F)));
    }
    return s;
}

// Decodes one UTF-8 codepoint at `i`; malformed sequences fall back to the
// single raw byte so arbitrary byte strings still round-trip.
std::pair<uint32_t, size_t> utf8_at(const std::string& s, size_t i) {
    uint8_t b0 = uint8_t(s[i]);
    size_t remain = s.size() - i;
    auto cont = [&](size_t k) { return k < remain && (uint8_t(s[i + k]) & 0xC0) == 0x80; };
    if (b0 < 0x80) return {b0, 1};
    if ((b0 & 0xE0) == 0xC0 && cont(1)) return {uint32_t(b0 & 0x1F) << 6 | (uint8_t(s[i + 1]) & 0x3F), 2};
    if ((b0 & 0xF0) == 0xE0 && cont(1) && cont(2))
        return {uint32_t(b0 & 0x0F) << 12 | uint32_t(uint8_t(s[i + 1]) & 0x3F) << 6 |
                    (uint8_t(s[i + 2]) & 0x3F),
                3};
    if ((b0 & 0xF8) == 0xF0 && cont(1) && cont(2) && cont(3))
        return {uint32_t(b0 & 0x07) << 18 | uint32_t(uint8_t(s[i + 1]) & 0x3F) << 12 |
                    uint32_t(uint8_t(s[i + 2]) & 0x3F) << 6 | (uint8_t(s[i + 3]) & 0x3F),
                4};
    return {b0, 1};
}

enum class CharClass { Letter, Number, Space, Other };

// ASCII classes are exact; non-ASCII codepoints are treated as letters. This
// only moves chunk boundaries for non-ASCII text, never the decoded bytes.
CharClass classify(uint32_t cp, size_t n_bytes) {
    if (n_bytes > 1 || cp >= 0x80) return CharClass::Letter;
    if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return CharClass::Letter;
    if (cp >= '0' && cp <= '9') return CharClass::Number;
    if (cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\f' || cp == '\v')
        return CharClass::Space;
    return CharClass::Other;
}

// GPT-2 byte-to-unit table: printable bytes map to themselves, the rest to
// codepoints 256, 257, ... in byte order.
std::vector<std::string> make_byte_units() {
    std::vector<bool> printable(256, false);
    for (int b = 33; b <= 126; ++b) printable[size_t(b)] = true;
    for (int b = 161; b <= 172; ++b) printable[size_t(b)] = true;
    for (int b = 174; b <= 255; ++b) printable[size_t(b)] = true;
    std::vector<std::string> units(256);
    uint32_t next = 256;
    for (int b = 0; b < 256; ++b) {
        units[size_t(b)] = printable[size_t(b)] ? codepoint_to_utf8(uint32_t(b))
                                                : codepoint_to_utf8(next++);
    }
    return units;
}

// Splits `text` into the word-like chunks GPT-2 merges within: contractions,
// optionally space-prefixed letter/number/symbol runs, and whitespace runs
// that leave their last char to prefix the next word.
std::vector<std::string> pre_split(const std::string& text) {
    static const char* kContractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
    std::vector<std::string> chunks;
    size_t i = 0;
    const size_t n = text.size();

    auto class_at = [&](size_t pos) {
        auto [cp, len] = utf8_at(text, pos);
        return std::pair<CharClass, size_t>(classify(cp, len), len);
    };
    auto take_run = [&](size_t start, CharClass cls) {
        size_t j = start;
        while (j < n) {
            auto [c, len] = class_at(j);
            if (c != cls) break;
            j += len;
        }
        return j;
    };

    while (i < n) {
        if (text[i] == '\'') {
            bool matched = false;
            for (const char* suffix : kContractions) {
                size_t len = std::char_traits<char>::length(suffix);
                if (text.compare(i, len, suffix) == 0) {
                    chunks.push_back(text.substr(i, len));
                    i += len;
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
        }

        auto [cls, len] = class_at(i);
        if (cls == CharClass::Space) {
            if (text[i] == ' ' && i + 1 < n) {
                auto [next_cls, next_len] = class_at(i + 1);
                (void)next_len;
                if (next_cls != CharClass::Space) {
                    size_t end = take_run(i + 1, next_cls);
                    chunks.push_back(text.substr(i, end - i));
                    i = end;
                    continue;
                }
            }
            size_t end = take_run(i, CharClass::Space);
            if (end < n && end - i > 1) {
                // Keep the last whitespace char for the following chunk.
                chunks.push_back(text.substr(i, end - i - 1));
                auto [cp_last, len_last] = utf8_at(text, end - 1);
                (void)cp_last;
                i = end - len_last;
                // A multi-byte "space" cannot occur (ASCII whitespace only).
            } else {
                chunks.push_back(text.substr(i, end - i));
                i = end;
            }
            continue;
        }

        size_t end = take_run(i, cls);
        chunks.push_back(text.substr(i, end - i));
        i = (end > i) ? end : i + len;
    }
    return chunks;
}

} // namespace

Tokenizer Tokenizer::byte_mode() {
    Tokenizer t;
    t.mode_ = TokenizerMode::Byte;
    return t;
}

Tokenizer Tokenizer::bpe_from_files(const std::string& vocab_path,
                                    const std::string& merges_path) {
    Tokenizer t;
    t.mode_ = TokenizerMode::Bpe;
    t.byte_to_unit_ = make_byte_units();
    for (int b = 0; b < 256; ++b) t.unit_to_byte_[t.byte_to_unit_[size_t(b)]] = uint8_t(b);

    std::ifstream vf(vocab_path);
    if (!vf) throw Error("tokenizer: cannot open vocab file " + vocab_path);
    json vocab;
    try {
        vf >> vocab;
    } catch (const json::exception& e) {
        throw Error("tokenizer: malformed vocab file " + vocab_path + ": " + e.what());
    }
    if (!vocab.is_object() || vocab.empty()) {
        throw Error("tokenizer: vocab file " + vocab_path + " is not a non-empty object");
    }
    int max_id = -1;
    for (auto& [token, id] : vocab.items()) {
        if (!id.is_number_integer()) {
            throw Error("tokenizer: non-integer id for token in " + vocab_path);
        }
        max_id = std::max(max_id, id.get<int>());
    }
    t.id_to_token_.assign(size_t(max_id) + 1, "");
    for (auto& [token, id] : vocab.items()) {
        int i = id.get<int>();
        if (i < 0) throw Error("tokenizer: negative token id in " + vocab_path);
        t.vocab_[token] = i;
        t.id_to_token_[size_t(i)] = token;
    }

    std::ifstream mf(merges_path);
    if (!mf) throw Error("tokenizer: cannot open merges file " + merges_path);
    std::string line;
    int rank = 0;
    bool first = true;
    while (std::getline(mf, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (first && line.rfind("#version", 0) == 0) {
            first = false;
            continue;
        }
        first = false;
        if (line.empty()) continue;
        size_t sp = line.find(' ');
        if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() ||
            line.find(' ', sp + 1) != std::string::npos) {
            throw Error("tokenizer: malformed merge line " + std::to_string(rank + 1) + " in " +
                        merges_path + ": '" + line + "'");
        }
        t.merge_rank_.emplace(line, rank++);
    }
    return t;
}

size_t Tokenizer::vocab_size() const {
    return mode_ == TokenizerMode::Byte ? 256 : id_to_token_.size();
}

std::vector<int> Tokenizer::encode_chunk_bpe(const std::string& chunk_bytes) const {
    std::vector<std::string> units;
    units.reserve(chunk_bytes.size());
    for (unsigned char b : chunk_bytes) units.push_back(byte_to_unit_[b]);

    while (units.size() > 1) {
        int best_rank = std::numeric_limits<int>::max();
        size_t best_pos = 0;
        for (size_t i = 0; i + 1 < units.size(); ++i) {
            auto it = merge_rank_.find(units[i] + " " + units[i + 1]);
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
                best_pos = i;
            }
        }
        if (best_rank == std::numeric_limits<int>::max()) break;
        // Merge every occurrence of the winning pair, left to right.
        const std::string left = units[best_pos], right = units[best_pos + 1];
        std::vector<std::string> merged;
        merged.reserve(units.size());
        for (size_t i = 0; i < units.size();) {
            if (i + 1 < units.size() && units[i] == left && units[i + 1] == right) {
                merged.push_back(left + right);
                i += 2;
            } else {
                merged.push_back(units[i]);
                i += 1;
            }
        }
        units = std::move(merged);
    }

    std::vector<int> ids;
    ids.reserve(units.size());
    for (const std::string& u : units) {
        auto it = vocab_.find(u);
        if (it == vocab_.end()) {
            throw Error("tokenizer: unit '" + u + "' missing from vocabulary");
        }
        ids.push_back(it->second);
    }
    return ids;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    if (mode_ == TokenizerMode::Byte) {
        ids.reserve(text.size());
        for (unsigned char b : text) ids.push_back(int(b));
        return ids;
    }
    for (const std::string& chunk : pre_split(text)) {
        std::vector<int> part = encode_chunk_bpe(chunk);
        ids.insert(ids.end(), part.begin(), part.end());
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    if (mode_ == TokenizerMode::Byte) {
        out.reserve(ids.size());
        for (int id : ids) {
            if (id < 0 || id > 255) {
                throw Error("tokenizer: byte-mode id out of range: " + std::to_string(id));
            }
            out.push_back(char(uint8_t(id)));
        }
        return out;
    }
    std::string units;
    for (int id : ids) {
        if (id < 0 || size_t(id) >= id_to_token_.size() || id_to_token_[size_t(id)].empty()) {
            throw Error("tokenizer: id " + std::to_string(id) + " not in vocabulary");
        }
        units += id_to_token_[size_t(id)];
    }
    size_t i = 0;
    while (i < units.size()) {
        auto [cp, len] = utf8_at(units, i);
        (void)cp;
        auto it = unit_to_byte_.find(units.substr(i, len));
        if (it == unit_to_byte_.end()) {
            throw Error("tokenizer: token text contains a non byte-unit character");
        }
        out.push_back(char(it->second));
        i += len;
    }
    return out;
}

} // namespace mega::model
