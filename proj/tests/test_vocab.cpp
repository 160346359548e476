#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "rxnseq/error.hpp"
#include "rxnseq/rng.hpp"
#include "rxnseq/smiles.hpp"
#include "rxnseq/vocab.hpp"

using namespace rxnseq;

namespace {

std::string temp_path(const std::string& name) {
    return std::string("/tmp/rxnseq_test_") + name;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path, std::ios::binary);
    for (const auto& line : lines) out << line << '\n';
}

} // namespace

TEST_CASE("load_vocab basics") {
    auto path = temp_path("vocab_ok.txt");
    write_lines(path, {"C", "Br", "("});
    Vocabulary v = load_vocab(path);
    CHECK(v.size() == 6); // 3 specials + 3 pieces
    CHECK(v.piece(kPadId) == "<pad>");
    CHECK(v.piece(kEosId) == "</s>");
    CHECK(v.piece(kUnkId) == "<unk>");
    CHECK(v.piece(3) == "C");
    CHECK(v.piece(5) == "(");
    std::remove(path.c_str());
}

TEST_CASE("load_vocab error cases") {
    auto dup = temp_path("vocab_dup.txt");
    write_lines(dup, {"C", "C"});
    CHECK_THROWS_AS(load_vocab(dup), Error);
    std::remove(dup.c_str());

    auto empty = temp_path("vocab_empty.txt");
    write_lines(empty, {});
    CHECK_THROWS_AS(load_vocab(empty), Error);
    std::remove(empty.c_str());

    CHECK_THROWS_AS(load_vocab("/nonexistent/vocab.txt"), Error);
}

TEST_CASE("byte vocabulary") {
    Vocabulary v = byte_vocab();
    CHECK(v.size() == 259); // 256 byte pieces + 3 specials
    CHECK(v.encode("C", false) == IdSequence{3 + 0x43});
    CHECK(v.encode("0123456789", false).size() == 10);
    CHECK(v.encode("0123456789", true).size() == 11);
    CHECK(v.decode(v.encode("N[C@@H](C)C(=O)O", false)) == "N[C@@H](C)C(=O)O");
}

TEST_CASE("subword encode: greedy longest match") {
    Vocabulary v = Vocabulary::subword({"C", " ", "Br", "B", "r"});
    IdSequence ids = v.encode("C C Br", false);
    // hand-run longest match: C, space, C, space, Br
    CHECK(ids == IdSequence{3, 4, 3, 4, 5});

    CHECK(v.encode("Z", false) == IdSequence{kUnkId});
    CHECK(v.encode("", true) == IdSequence{kEosId});
    CHECK(v.encode("rB", false) == IdSequence{7, 6}); // no greedy overreach
}

TEST_CASE("decode") {
    Vocabulary v = Vocabulary::subword({"C", "Br", " "});
    CHECK(v.decode(v.encode("C Br", false)) == "C Br");
    CHECK(v.decode({kEosId}) == "");
    CHECK(v.decode({kPadId, 3, kEosId}) == "C");
    CHECK(v.decode({kUnkId}) == "\xef\xbf\xbd");
    CHECK_THROWS_AS(v.decode({40000}), Error);
    CHECK_THROWS_AS(v.decode({-1}), Error);
}

TEST_CASE("trim keeps exactly the emitted pieces in first-seen order") {
    // with the space piece available it is kept as an ordinary piece
    Vocabulary base = Vocabulary::subword({"C", "Br", "N", "qq", " "});
    TrimResult result = trim_vocab(base, std::vector<std::string>{"C Br", "C C"});
    CHECK(result.vocab.content_pieces() == std::vector<std::string>{"C", " ", "Br"});
    CHECK(result.sequences_consumed == 2);
    CHECK_FALSE(result.stalled);
    // mapping: specials map to themselves, pieces to their base ids
    CHECK(result.mapping == std::vector<int32_t>{0, 1, 2, 3, 7, 4});

    // without a space piece, whitespace falls to unk and is not kept
    Vocabulary no_space = Vocabulary::subword({"C", "Br", "N", "qq"});
    TrimResult r2 = trim_vocab(no_space, std::vector<std::string>{"C Br", "C C"});
    CHECK(r2.vocab.content_pieces() == std::vector<std::string>{"C", "Br"});
}

TEST_CASE("trim stall rule terminates early") {
    Vocabulary base = Vocabulary::subword({"C", "O", " "});
    uint64_t calls = 0;
    auto next = [&]() -> std::optional<std::string> {
        ++calls;
        return "C O"; // same line forever
    };
    TrimResult result = trim_vocab(base, next, 1000);
    CHECK(result.stalled);
    CHECK(result.sequences_consumed == 1001); // first adds pieces, then 1000 stalls
    CHECK(result.stall_counter_at_stop == 1000);
    CHECK(result.vocab.content_pieces() == std::vector<std::string>{"C", " ", "O"});
}

TEST_CASE("trim of an empty corpus fails") {
    Vocabulary base = Vocabulary::subword({"C"});
    CHECK_THROWS_AS(trim_vocab(base, std::vector<std::string>{}), Error);
}

TEST_CASE("trim consistency: trimmed encode emits identical piece strings") {
    // random base vocabulary with multi-character pieces
    Rng rng(99);
    std::vector<std::string> pieces = {" ", "C", "N", "O", "Br", "Cl", "(", ")", "=", "1", "2"};
    for (int i = 0; i < 120; ++i) {
        std::string piece;
        int len = 2 + static_cast<int>(rng.next_index(3));
        for (int j = 0; j < len; ++j) piece += "CNOclrB=12()"[rng.next_index(12)];
        pieces.push_back(piece);
    }
    std::sort(pieces.begin(), pieces.end());
    pieces.erase(std::unique(pieces.begin(), pieces.end()), pieces.end());
    Vocabulary base = Vocabulary::subword(pieces);

    std::vector<std::string> corpus;
    for (int i = 0; i < 300; ++i) {
        std::string line;
        int len = 1 + static_cast<int>(rng.next_index(8));
        for (int j = 0; j < len; ++j) {
            line += pieces[rng.next_index(pieces.size())];
            if (j + 1 < len) line += " ";
        }
        corpus.push_back(line);
    }

    TrimResult result = trim_vocab(base, corpus);
    CHECK(result.vocab.content_size() <= base.content_size());
    for (const auto& line : corpus) {
        CHECK(result.vocab.encode_pieces(line) == base.encode_pieces(line));
    }

    // determinism given corpus order
    TrimResult again = trim_vocab(base, corpus);
    CHECK(again.vocab.content_pieces() == result.vocab.content_pieces());

    // trimmed piece set is a subset of the base piece set
    for (const auto& piece : result.vocab.content_pieces()) {
        CHECK(std::find(pieces.begin(), pieces.end(), piece) != pieces.end());
    }
}

TEST_CASE("trim_embeddings copies mapped rows") {
    // base: 3 specials + 3 pieces = 6 rows, dim 4
    std::vector<float> base(6 * 4);
    for (size_t i = 0; i < base.size(); ++i) base[i] = static_cast<float>(i);

    Vocabulary base_vocab = Vocabulary::subword({"A", "B", "CC"});
    TrimResult trim = trim_vocab(base_vocab, std::vector<std::string>{"CCA"});
    // encode "CCA": CC (id 5), A (id 3)
    CHECK(trim.vocab.content_pieces() == std::vector<std::string>{"CC", "A"});
    CHECK(trim.mapping == std::vector<int32_t>{0, 1, 2, 5, 3});

    auto out = trim_embeddings(base, 6, 4, trim.mapping);
    CHECK(out.size() == 5 * 4);
    for (int j = 0; j < 4; ++j) {
        CHECK(out[0 * 4 + j] == base[0 * 4 + j]); // pad row preserved
        CHECK(out[3 * 4 + j] == base[5 * 4 + j]); // "CC" row
        CHECK(out[4 * 4 + j] == base[3 * 4 + j]); // "A" row
    }

    // identity mapping reproduces the matrix
    std::vector<int32_t> identity = {0, 1, 2, 3, 4, 5};
    CHECK(trim_embeddings(base, 6, 4, identity) == base);

    CHECK_THROWS_AS(trim_embeddings(base, 7, 4, identity), Error);
}

TEST_CASE("encode/decode round trip is exact without unk") {
    Rng rng(4);
    Vocabulary v = Vocabulary::subword({"C", "N", "Br", " ", "(", ")"});
    for (int i = 0; i < 200; ++i) {
        std::string text;
        int len = static_cast<int>(rng.next_index(12));
        for (int j = 0; j < len; ++j) {
            text += v.piece(kNumSpecials + static_cast<int32_t>(rng.next_index(v.content_size())));
        }
        IdSequence ids = v.encode(text, false);
        bool has_unk = std::find(ids.begin(), ids.end(), kUnkId) != ids.end();
        CHECK_FALSE(has_unk);
        CHECK(v.decode(ids) == text);
    }
}

TEST_CASE("content hash changes with pieces and mode") {
    Vocabulary a = Vocabulary::subword({"C", "N"});
    Vocabulary b = Vocabulary::subword({"C", "O"});
    CHECK(a.content_hash() != b.content_hash());
    CHECK(a.content_hash() == Vocabulary::subword({"C", "N"}).content_hash());
    CHECK(byte_vocab().content_hash() == byte_vocab().content_hash());
    CHECK(a.content_hash() != byte_vocab().content_hash());
}
