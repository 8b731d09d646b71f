#include "mega/rng.hpp"
#include "mega/tokenizer.hpp"

#include <doctest.h>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

using namespace mega;
using model::Tokenizer;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

// A minimal BPE vocabulary: every single-byte unit plus a few merges.
void write_bpe_files(const std::string& vocab_path, const std::string& merges_path) {
    // Reproduce the byte-to-unit table to enumerate single-byte tokens.
    auto unit_of = [](int b) {
        auto printable = [](int x) {
            return (x >= 33 && x <= 126) || (x >= 161 && x <= 172) || (x >= 174 && x <= 255);
        };
        uint32_t cp;
        if (printable(b)) {
            cp = uint32_t(b);
        } else {
            uint32_t next = 256;
            for (int q = 0; q < b; ++q)
                if (!printable(q)) ++next;
            cp = next;
        }
        std::string s;
        if (cp < 0x80) {
            s.push_back(char(cp));
        } else {
            s.push_back(char(0xC0 | (cp >> 6)));
            s.push_back(char(0x80 | (cp & 0x3F)));
        }
        return s;
    };

    nlohmann::json vocab = nlohmann::json::object();
    int id = 0;
    for (int b = 0; b < 256; ++b) vocab[unit_of(b)] = id++;
    vocab["he"] = id++;
    vocab["hel"] = id++;
    vocab["ll"] = id++;
    std::ofstream(vocab_path) << vocab.dump();

    std::ofstream merges(merges_path);
    merges << "#version: test\n";
    merges << "h e\n";   // rank 0
    merges << "he l\n";  // rank 1
    merges << "l l\n";   // rank 2
}

} // namespace

TEST_CASE("byte mode is the identity over bytes") {
    Tokenizer tok = Tokenizer::byte_mode();
    CHECK(tok.encode("ab") == std::vector<int>{97, 98});
    CHECK(tok.decode({97, 98}) == "ab");
    CHECK(tok.encode("").empty());
    CHECK(tok.vocab_size() == 256);
    CHECK_THROWS_AS((void)tok.decode({300}), Error);
}

TEST_CASE("bpe merges follow rank order") {
    const std::string vp = temp_path("mega_vocab.json"), mp = temp_path("mega_merges.txt");
    write_bpe_files(vp, mp);
    Tokenizer tok = Tokenizer::bpe_from_files(vp, mp);

    // "hello": h+e -> he (rank 0), he+l -> hel (rank 1); the trailing "lo"
    // stays split because "hel l" and "l o" are not merges.
    std::vector<int> ids = tok.encode("hello");
    CHECK(ids.size() == 3); // hel, l, o
    CHECK(tok.decode(ids) == "hello");

    // "llll" merges pairwise left to right: ll, ll.
    std::vector<int> lls = tok.encode("llll");
    CHECK(lls.size() == 2);
    CHECK(tok.decode(lls) == "llll");
}

TEST_CASE("bpe roundtrip identity over random byte strings") {
    const std::string vp = temp_path("mega_vocab.json"), mp = temp_path("mega_merges.txt");
    write_bpe_files(vp, mp);
    Tokenizer tok = Tokenizer::bpe_from_files(vp, mp);

    num::Rng rng(2024);
    for (int iter = 0; iter < 1000; ++iter) {
        size_t len = rng.below(24);
        std::string s;
        for (size_t i = 0; i < len; ++i) s.push_back(char(uint8_t(rng.below(256))));
        CAPTURE(iter);
        CHECK(tok.decode(tok.encode(s)) == s);
    }
}

TEST_CASE("bpe pre-split keeps words, spaces, and contractions apart") {
    const std::string vp = temp_path("mega_vocab.json"), mp = temp_path("mega_merges.txt");
    write_bpe_files(vp, mp);
    Tokenizer tok = Tokenizer::bpe_from_files(vp, mp);

    // Merges never cross a space boundary: " hh" would need a merge starting
    // with the space unit, which the table lacks.
    std::string text = "isn't a hell";
    CHECK(tok.decode(tok.encode(text)) == text);
    std::string multi = "  two  spaces ";
    CHECK(tok.decode(tok.encode(multi)) == multi);
}

TEST_CASE("bpe rejects malformed files") {
    const std::string vp = temp_path("mega_badvocab.json"), mp = temp_path("mega_badmerges.txt");
    std::ofstream(vp) << "[1,2,3]";
    std::ofstream(mp) << "a b\n";
    CHECK_THROWS_AS((void)Tokenizer::bpe_from_files(vp, mp), Error);

    std::ofstream(vp) << R"({"a": 0})";
    std::ofstream(mp) << "a b c\n";
    CHECK_THROWS_AS((void)Tokenizer::bpe_from_files(vp, mp), Error);

    CHECK_THROWS_AS((void)Tokenizer::bpe_from_files(temp_path("nope.json"), mp), Error);
}

TEST_CASE("bpe reports text that cannot be mapped to the vocabulary") {
    const std::string vp = temp_path("mega_tinyvocab.json"), mp = temp_path("mega_tinymerges.txt");
    std::ofstream(vp) << R"({"a": 0})"; // unit for byte 'b' missing
    std::ofstream(mp) << "";
    Tokenizer tok = Tokenizer::bpe_from_files(vp, mp);
    CHECK(tok.encode("a") == std::vector<int>{0});
    CHECK_THROWS_AS((void)tok.encode("b"), Error);
}
