#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace rxnseq {

enum class Task { Forward, Retro, Reagent, Untagged };

// One line of a reaction dataset: reactants (optionally `>`-separated
// reagents) on the source side, product on the target side.
struct ReactionRecord {
    std::string source;
    std::string target;
    Task task = Task::Untagged;
};

enum class PreprocessStrategy { None, Simple, Smiles };

PreprocessStrategy parse_strategy(std::string_view name);
const char* strategy_name(PreprocessStrategy strat);

// Splits a SMILES string into atom/bond/ring tokens with leftmost-longest
// matching: bracket atoms `[...]`, Br, Cl, single-letter atoms
// B C N O S P F I b c n o s p, bonds = # - + / \ : ~ @ ? > * $,
// parentheses, dot, `%` followed by two digits, and single digits.
// Throws UnmatchedInput on any character the pattern cannot consume.
std::vector<std::string> tokenize_smiles(std::string_view s);

// +none: identity. +simple: one space between every character.
// +smiles: tokenize_smiles tokens joined by single spaces.
std::string preprocess(std::string_view s, PreprocessStrategy strat);

// Inverse of preprocess for evaluation-time comparison; removes all
// whitespace. Throws EmptyResult when nothing remains.
std::string strip_spaces(std::string_view text);

// Parses `source>>target`; exactly one `>>`, both sides non-empty.
ReactionRecord parse_reaction(std::string_view line);

} // namespace rxnseq
