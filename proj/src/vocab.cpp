#include "rxnseq/vocab.hpp"

#include <fstream>
#include <unordered_set>

#include "rxnseq/error.hpp"

namespace rxnseq {

namespace {

const std::string kPadPiece = "<pad>";
const std::string kEosPiece = "</s>";
const std::string kUnkPiece = "<unk>";
const std::string kUnkGlyph = "\xef\xbf\xbd"; // U+FFFD

size_t utf8_char_len(std::string_view s, size_t i) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    size_t len = 1;
    if (c >= 0xf0) len = 4;
    else if (c >= 0xe0) len = 3;
    else if (c >= 0xc0) len = 2;
    if (i + len > s.size()) len = s.size() - i;
    return len;
}

} // namespace

Vocabulary Vocabulary::subword(std::vector<std::string> pieces) {
    Vocabulary v;
    v.mode_ = VocabMode::Subword;
    v.pieces_ = std::move(pieces);
    for (size_t i = 0; i < v.pieces_.size(); ++i) {
        const auto& piece = v.pieces_[i];
        if (piece.empty()) fail(ErrorCode::EmptyFile, "empty vocabulary piece");
        auto [it, inserted] = v.piece_ids_.emplace(piece, static_cast<int32_t>(i) + kNumSpecials);
        if (!inserted) fail(ErrorCode::DuplicatePiece, "duplicate piece '" + piece + "'");
        v.max_piece_bytes_ = std::max(v.max_piece_bytes_, piece.size());
    }
    return v;
}

Vocabulary Vocabulary::bytes() {
    Vocabulary v;
    v.mode_ = VocabMode::ByteLevel;
    v.pieces_.reserve(256);
    for (int b = 0; b < 256; ++b) {
        v.pieces_.emplace_back(1, static_cast<char>(b));
    }
    v.max_piece_bytes_ = 1;
    return v;
}

const std::string& Vocabulary::piece(int32_t id) const {
    switch (id) {
        case kPadId: return kPadPiece;
        case kEosId: return kEosPiece;
        case kUnkId: return kUnkPiece;
        default: break;
    }
    int32_t content = id - kNumSpecials;
    if (content < 0 || content >= static_cast<int32_t>(pieces_.size())) {
        fail(ErrorCode::IdOutOfRange,
             "id " + std::to_string(id) + " for vocabulary of size " + std::to_string(size()));
    }
    return pieces_[content];
}

IdSequence Vocabulary::encode(std::string_view text, bool append_eos) const {
    IdSequence ids;
    ids.reserve(text.size() + 1);
    if (mode_ == VocabMode::ByteLevel) {
        for (unsigned char byte : text) {
            ids.push_back(static_cast<int32_t>(byte) + kNumSpecials);
        }
    } else {
        size_t i = 0;
        while (i < text.size()) {
            size_t limit = std::min(max_piece_bytes_, text.size() - i);
            int32_t matched = -1;
            size_t matched_len = 0;
            for (size_t len = limit; len >= 1; --len) {
                auto it = piece_ids_.find(text.substr(i, len));
                if (it != piece_ids_.end()) {
                    matched = it->second;
                    matched_len = len;
                    break;
                }
            }
            if (matched >= 0) {
                ids.push_back(matched);
                i += matched_len;
            } else {
                ids.push_back(kUnkId);
                i += utf8_char_len(text, i);
            }
        }
    }
    if (append_eos) ids.push_back(kEosId);
    return ids;
}

std::string Vocabulary::decode(const IdSequence& ids) const {
    std::string out;
    for (int32_t id : ids) {
        if (id == kPadId || id == kEosId) continue;
        if (id == kUnkId) {
            out += kUnkGlyph;
            continue;
        }
        out += piece(id);
    }
    return out;
}

std::vector<std::string> Vocabulary::encode_pieces(std::string_view text) const {
    std::vector<std::string> pieces;
    for (int32_t id : encode(text, false)) {
        pieces.push_back(piece(id));
    }
    return pieces;
}

uint64_t fnv1a64(std::string_view bytes, uint64_t seed) {
    uint64_t hash = seed;
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

std::string fnv1a64_hex(std::string_view bytes) {
    static const char digits[] = "0123456789abcdef";
    uint64_t hash = fnv1a64(bytes);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[hash & 0xf];
        hash >>= 4;
    }
    return out;
}

std::string Vocabulary::content_hash() const {
    uint64_t hash = fnv1a64(mode_ == VocabMode::ByteLevel ? "bytes" : "subword");
    for (const auto& piece : pieces_) {
        hash = fnv1a64(piece, hash);
        hash = fnv1a64(std::string_view("\n"), hash);
    }
    static const char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[hash & 0xf];
        hash >>= 4;
    }
    return out;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot open '" + path + "' for writing");
    for (const auto& piece : pieces_) {
        out << piece << '\n';
    }
    if (!out) fail(ErrorCode::IoError, "write failed for '" + path + "'");
}

Vocabulary load_vocab(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open '" + path + "'");
    std::vector<std::string> pieces;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        pieces.push_back(line);
    }
    if (pieces.empty()) fail(ErrorCode::EmptyFile, "'" + path + "' contains no pieces");
    return Vocabulary::subword(std::move(pieces));
}

TrimResult trim_vocab(const Vocabulary& base,
                      const std::function<std::optional<std::string>()>& next_line,
                      uint64_t stall_threshold) {
    if (base.mode() != VocabMode::Subword) {
        fail(ErrorCode::BadConfig, "trim requires a subword vocabulary");
    }
    std::vector<int32_t> seen_base_ids;           // first-seen order
    std::unordered_set<int32_t> seen;
    uint64_t consumed = 0;
    uint64_t stall = 0;
    bool stalled = false;
    while (auto line = next_line()) {
        ++consumed;
        bool added = false;
        for (int32_t id : base.encode(*line, false)) {
            if (id < kNumSpecials) continue; // unk is not a content piece
            if (seen.insert(id).second) {
                seen_base_ids.push_back(id);
                added = true;
            }
        }
        stall = added ? 0 : stall + 1;
        if (stall >= stall_threshold) {
            stalled = true;
            break;
        }
    }
    if (consumed == 0) fail(ErrorCode::EmptyCorpus, "trim corpus is empty");

    TrimResult result;
    std::vector<std::string> pieces;
    pieces.reserve(seen_base_ids.size());
    result.mapping = {kPadId, kEosId, kUnkId};
    for (int32_t base_id : seen_base_ids) {
        pieces.push_back(base.piece(base_id));
        result.mapping.push_back(base_id);
    }
    result.vocab = Vocabulary::subword(std::move(pieces));
    result.sequences_consumed = consumed;
    result.stall_counter_at_stop = stall;
    result.stalled = stalled;
    return result;
}

TrimResult trim_vocab(const Vocabulary& base, const std::vector<std::string>& corpus,
                      uint64_t stall_threshold) {
    size_t i = 0;
    return trim_vocab(
        base,
        [&]() -> std::optional<std::string> {
            if (i >= corpus.size()) return std::nullopt;
            return corpus[i++];
        },
        stall_threshold);
}

std::vector<float> trim_embeddings(const std::vector<float>& base_rows, int64_t base_vocab_size,
                                   int64_t dim, const std::vector<int32_t>& mapping) {
    if (base_vocab_size * dim != static_cast<int64_t>(base_rows.size())) {
        fail(ErrorCode::ShapeMismatch,
             "embedding matrix has " + std::to_string(base_rows.size()) + " values, expected " +
                 std::to_string(base_vocab_size * dim));
    }
    std::vector<float> out(mapping.size() * static_cast<size_t>(dim));
    for (size_t row = 0; row < mapping.size(); ++row) {
        int32_t base_id = mapping[row];
        if (base_id < 0 || base_id >= base_vocab_size) {
            fail(ErrorCode::IdOutOfRange, "mapping entry " + std::to_string(base_id));
        }
        std::copy_n(base_rows.begin() + base_id * dim, dim, out.begin() + row * dim);
    }
    return out;
}

} // namespace rxnseq
