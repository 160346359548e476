#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rxnseq/corpus.hpp"
#include "rxnseq/vocab.hpp"

namespace rxnseq {

// Reversible string-rewriting "reaction" grammar for desk-scale experiments:
// the product is the reactant token sequence reversed, with every token
// swapped through a fixed involutive atom map (C<->N, O<->S, c<->n, o<->s,
// Br<->Cl). Applying the rewrite twice gives back the source.
const std::vector<std::string>& rewrite_alphabet();

std::vector<std::string> rewrite_tokens(const std::vector<std::string>& tokens);

// Uniform random sources of min_len..max_len tokens; target = rewrite(source).
Dataset make_rewrite_dataset(size_t n_records, uint64_t seed, int min_len = 4, int max_len = 10);

// Identity task over the same alphabet; used for memorization checks.
Dataset make_copy_dataset(size_t n_records, uint64_t seed, int min_len = 4, int max_len = 10);

// Subword vocabulary covering the grammar alphabet plus the space and mask
// pieces, so every preprocessing strategy round-trips.
Vocabulary rewrite_vocab();

} // namespace rxnseq
