#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rxnseq/rng.hpp"
#include "rxnseq/smiles.hpp"

namespace rxnseq {

enum class Split { Train, Dev, Test };

struct Dataset {
    std::vector<ReactionRecord> records;
    Split split = Split::Train;

    size_t size() const { return records.size(); }
};

// TSV: `source<TAB>target` with an optional third column task tag
// (forward|retro|reagent). Lines starting with '#' are ignored.
Dataset load_dataset(const std::string& path, Split split);
Dataset parse_dataset(std::istream& in, Split split, const std::string& origin);
void save_dataset(const Dataset& dataset, const std::string& path);

// Multi-task formatting: prefixes the source with the task marker
// (Product: / Reactants: / Reagents: ). Off: input is the source unchanged.
std::pair<std::string, std::string> format_example(const ReactionRecord& record, bool multi_task);

struct MaskingConfig {
    double mask_fraction = 0.15;
    double p_mask = 0.80;
    double p_random = 0.10;
    double p_keep = 0.10;
    std::string mask_token = "$";
    uint64_t seed = 42;

    void validate() const;
};

struct MaskedPair {
    std::vector<std::string> corrupted;
    std::vector<std::string> target; // the unmodified original sequence
};

// Each token is independently selected with probability mask_fraction; a
// selected token is replaced by the mask token (p_mask), by a uniformly drawn
// token of the same sequence (p_random), or kept as is (p_keep).
// Draw order per token is part of the seeded-reproducibility contract:
// one selection draw, then an action draw if selected, then an index draw
// if the action is `random`.
MaskedPair mask_sequence(const std::vector<std::string>& tokens, const MaskingConfig& cfg, Rng& rng);

// ceil(size / 2^k) records: one global seeded shuffle, then a prefix, so the
// k+1 sample is always a subset of the k sample.
Dataset subsample_nested(const Dataset& dataset, uint32_t k, uint64_t seed = 42);

// Tokenizes each SMILES, corrupts it per cfg, and renders both sides under
// the given strategy. Record i draws from the (cfg.seed, i) stream.
std::vector<std::pair<std::string, std::string>> build_pretrain_pairs(
    const std::vector<std::string>& smiles, const MaskingConfig& cfg, PreprocessStrategy strat);

// Streaming variant: one `input<TAB>target` line per input SMILES line.
// Returns the number of pairs written.
uint64_t build_pretrain_corpus(std::istream& smiles_in, std::ostream& pairs_out,
                               const MaskingConfig& cfg, PreprocessStrategy strat);

// Renders a token sequence the way `preprocess` renders raw text under the
// same strategy (spaces between tokens for +smiles, between characters for
// +simple, nothing for +none).
std::string render_tokens(const std::vector<std::string>& tokens, PreprocessStrategy strat);

} // namespace rxnseq
