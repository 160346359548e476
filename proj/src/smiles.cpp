#include "rxnseq/smiles.hpp"

#include <cctype>

#include "rxnseq/error.hpp"

namespace rxnseq {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnmatchedInput: return "UnmatchedInput";
        case ErrorCode::EmptyResult: return "EmptyResult";
        case ErrorCode::MalformedReaction: return "MalformedReaction";
        case ErrorCode::DuplicatePiece: return "DuplicatePiece";
        case ErrorCode::EmptyFile: return "EmptyFile";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::IdOutOfRange: return "IdOutOfRange";
        case ErrorCode::EmptyCorpus: return "EmptyCorpus";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::MalformedLine: return "MalformedLine";
        case ErrorCode::MissingTask: return "MissingTask";
        case ErrorCode::FractionTooLarge: return "FractionTooLarge";
        case ErrorCode::AllPositionsMasked: return "AllPositionsMasked";
        case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::SourceTooLong: return "SourceTooLong";
        case ErrorCode::IndexMismatch: return "IndexMismatch";
        case ErrorCode::MalformedPredictions: return "MalformedPredictions";
        case ErrorCode::PositionOutOfRange: return "PositionOutOfRange";
        case ErrorCode::TooManyTokens: return "TooManyTokens";
        case ErrorCode::BadCheckpoint: return "BadCheckpoint";
        case ErrorCode::VocabHashMismatch: return "VocabHashMismatch";
        case ErrorCode::BadConfig: return "BadConfig";
    }
    return "UnknownError";
}

PreprocessStrategy parse_strategy(std::string_view name) {
    if (name == "none") return PreprocessStrategy::None;
    if (name == "simple") return PreprocessStrategy::Simple;
    if (name == "smiles") return PreprocessStrategy::Smiles;
    fail(ErrorCode::BadConfig, "unknown preprocessing strategy '" + std::string(name) + "'");
}

const char* strategy_name(PreprocessStrategy strat) {
    switch (strat) {
        case PreprocessStrategy::None: return "none";
        case PreprocessStrategy::Simple: return "simple";
        case PreprocessStrategy::Smiles: return "smiles";
    }
    return "?";
}

namespace {

bool is_single_char_token(char c) {
    switch (c) {
        // one-letter atoms (upper case aliphatic, lower case aromatic)
        case 'B': case 'C': case 'N': case 'O': case 'S': case 'P': case 'F': case 'I':
        case 'b': case 'c': case 'n': case 'o': case 's': case 'p':
        // bonds, charges, stereo marks, wildcards, the mask character
        case '=': case '#': case '-': case '+': case '/': case '\\':
        case ':': case '~': case '@': case '?': case '>': case '*': case '$':
        case '(': case ')': case '.':
            return true;
        default:
            return c >= '0' && c <= '9';
    }
}

// Number of bytes in the UTF-8 code point starting at s[i].
size_t utf8_len(std::string_view s, size_t i) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    size_t len = 1;
    if (c >= 0xf0) len = 4;
    else if (c >= 0xe0) len = 3;
    else if (c >= 0xc0) len = 2;
    if (i + len > s.size()) len = s.size() - i;
    return len;
}

} // namespace

std::vector<std::string> tokenize_smiles(std::string_view s) {
    if (s.empty()) fail(ErrorCode::UnmatchedInput, "empty SMILES");
    std::vector<std::string> tokens;
    size_t i = 0;
    while (i < s.size()) {
        char c = s[i];
        if (c == '[') {
            size_t close = s.find(']', i + 1);
            if (close == std::string_view::npos || close == i + 1) {
                fail(ErrorCode::UnmatchedInput,
                     "unterminated or empty bracket atom at position " + std::to_string(i));
            }
            tokens.emplace_back(s.substr(i, close - i + 1));
            i = close + 1;
        } else if (c == '%') {
            if (i + 2 >= s.size() || !std::isdigit(static_cast<unsigned char>(s[i + 1])) ||
                !std::isdigit(static_cast<unsigned char>(s[i + 2]))) {
                fail(ErrorCode::UnmatchedInput,
                     "'%' not followed by two digits at position " + std::to_string(i));
            }
            tokens.emplace_back(s.substr(i, 3));
            i += 3;
        } else if (c == 'B' && i + 1 < s.size() && s[i + 1] == 'r') {
            tokens.emplace_back("Br");
            i += 2;
        } else if (c == 'C' && i + 1 < s.size() && s[i + 1] == 'l') {
            tokens.emplace_back("Cl");
            i += 2;
        } else if (is_single_char_token(c)) {
            tokens.emplace_back(1, c);
            i += 1;
        } else {
            fail(ErrorCode::UnmatchedInput,
                 "cannot consume character '" + std::string(1, c) + "' at position " + std::to_string(i));
        }
    }
    return tokens;
}

std::string preprocess(std::string_view s, PreprocessStrategy strat) {
    switch (strat) {
        case PreprocessStrategy::None:
            return std::string(s);
        case PreprocessStrategy::Simple: {
            std::string out;
            out.reserve(s.size() * 2);
            size_t i = 0;
            while (i < s.size()) {
                size_t len = utf8_len(s, i);
                if (!out.empty()) out.push_back(' ');
                out.append(s.substr(i, len));
                i += len;
            }
            return out;
        }
        case PreprocessStrategy::Smiles: {
            std::string out;
            out.reserve(s.size() * 2);
            for (const auto& token : tokenize_smiles(s)) {
                if (!out.empty()) out.push_back(' ');
                out.append(token);
            }
            return out;
        }
    }
    fail(ErrorCode::BadConfig, "invalid strategy");
}

std::string strip_spaces(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    for (char c : text) {
        if (!std::isspace(static_cast<unsigned char>(c))) out.push_back(c);
    }
    if (out.empty()) fail(ErrorCode::EmptyResult, "string is empty after whitespace removal");
    return out;
}

ReactionRecord parse_reaction(std::string_view line) {
    size_t sep = line.find(">>");
    if (sep == std::string_view::npos) {
        fail(ErrorCode::MalformedReaction, "missing '>>' separator");
    }
    if (line.find(">>", sep + 2) != std::string_view::npos) {
        fail(ErrorCode::MalformedReaction, "multiple '>>' separators");
    }
    ReactionRecord record;
    record.source = std::string(line.substr(0, sep));
    record.target = std::string(line.substr(sep + 2));
    if (record.source.empty() || record.target.empty()) {
        fail(ErrorCode::MalformedReaction, "empty reaction side");
    }
    return record;
}

} // namespace rxnseq
