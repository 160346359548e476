#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rxnseq {

using IdSequence = std::vector<int32_t>;

enum class VocabMode { Subword, ByteLevel };

// Three reserved specials occupy fixed ids in every vocabulary so that
// checkpoints stay portable across trims. Content pieces start at id 3.
constexpr int32_t kPadId = 0;
constexpr int32_t kEosId = 1;
constexpr int32_t kUnkId = 2;
constexpr int32_t kNumSpecials = 3;

class Vocabulary {
public:
    Vocabulary() = default;

    // Subword vocabulary over an explicit piece list (file order preserved).
    static Vocabulary subword(std::vector<std::string> pieces);
    // Byte-level vocabulary: 256 content pieces, one per byte value.
    static Vocabulary bytes();

    VocabMode mode() const { return mode_; }
    int32_t size() const { return kNumSpecials + static_cast<int32_t>(pieces_.size()); }
    int32_t content_size() const { return static_cast<int32_t>(pieces_.size()); }

    // Piece text for any id, including the reserved specials.
    const std::string& piece(int32_t id) const;
    const std::vector<std::string>& content_pieces() const { return pieces_; }

    // Subword mode: greedy longest-match against the piece list; a position
    // with no match consumes one UTF-8 code point and emits unk.
    // Byte-level mode: one id per input byte.
    IdSequence encode(std::string_view text, bool append_eos) const;

    // Concatenates pieces, skipping pad/eos; unk renders as U+FFFD.
    std::string decode(const IdSequence& ids) const;

    // Piece strings emitted by encode, in order (test/trim helper).
    std::vector<std::string> encode_pieces(std::string_view text) const;

    // FNV-1a 64 over mode and piece list; ties checkpoints to the vocabulary
    // they were trained with.
    std::string content_hash() const;

    void save(const std::string& path) const;

private:
    VocabMode mode_ = VocabMode::Subword;
    std::vector<std::string> pieces_;            // content pieces, id = index + 3
    size_t max_piece_bytes_ = 0;
    struct StringHash {
        using is_transparent = void;
        size_t operator()(std::string_view s) const { return std::hash<std::string_view>()(s); }
    };
    struct StringEq {
        using is_transparent = void;
        bool operator()(std::string_view a, std::string_view b) const { return a == b; }
    };
    std::unordered_map<std::string, int32_t, StringHash, StringEq> piece_ids_;
};

// One piece per line, UTF-8; specials are implicit.
Vocabulary load_vocab(const std::string& path);

inline Vocabulary byte_vocab() { return Vocabulary::bytes(); }

struct TrimResult {
    Vocabulary vocab;
    // mapping[i] = id in the base vocabulary of the piece at trimmed id i;
    // identity for the three specials.
    std::vector<int32_t> mapping;
    uint64_t sequences_consumed = 0;
    uint64_t stall_counter_at_stop = 0;
    bool stalled = false;
};

// Streams already-preprocessed sequences from `next_line` and keeps exactly
// the base pieces emitted by encode, in first-seen order. Stops at corpus end
// or after `stall_threshold` consecutive sequences that add no new piece.
TrimResult trim_vocab(const Vocabulary& base,
                      const std::function<std::optional<std::string>()>& next_line,
                      uint64_t stall_threshold = 500000);

TrimResult trim_vocab(const Vocabulary& base, const std::vector<std::string>& corpus,
                      uint64_t stall_threshold = 500000);

// Row i of the result is the base embedding row of the piece mapped to
// trimmed id i. `rows x cols` given explicitly so any dense storage works.
std::vector<float> trim_embeddings(const std::vector<float>& base_rows, int64_t base_vocab_size,
                                   int64_t dim, const std::vector<int32_t>& mapping);

uint64_t fnv1a64(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ULL);
std::string fnv1a64_hex(std::string_view bytes);

} // namespace rxnseq
