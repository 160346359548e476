#include "rxnseq/synthetic.hpp"

#include <unordered_map>

#include "rxnseq/error.hpp"
#include "rxnseq/rng.hpp"

namespace rxnseq {

namespace {

const std::unordered_map<std::string, std::string>& atom_swap() {
    static const std::unordered_map<std::string, std::string> swap = {
        {"C", "N"}, {"N", "C"}, {"O", "S"}, {"S", "O"}, {"c", "n"},
        {"n", "c"}, {"o", "s"}, {"s", "o"}, {"Br", "Cl"}, {"Cl", "Br"},
    };
    return swap;
}

std::vector<std::string> random_tokens(Rng& rng, int min_len, int max_len) {
    const auto& alphabet = rewrite_alphabet();
    int len = min_len + static_cast<int>(rng.next_index(max_len - min_len + 1));
    std::vector<std::string> tokens(len);
    for (auto& token : tokens) {
        token = alphabet[rng.next_index(alphabet.size())];
    }
    return tokens;
}

std::string join(const std::vector<std::string>& tokens) {
    std::string out;
    for (const auto& token : tokens) out += token;
    return out;
}

} // namespace

const std::vector<std::string>& rewrite_alphabet() {
    static const std::vector<std::string> alphabet = {"C", "N", "O", "S",  "c",
                                                      "n", "o", "s", "Br", "Cl"};
    return alphabet;
}

std::vector<std::string> rewrite_tokens(const std::vector<std::string>& tokens) {
    std::vector<std::string> out;
    out.reserve(tokens.size());
    for (auto it = tokens.rbegin(); it != tokens.rend(); ++it) {
        auto found = atom_swap().find(*it);
        if (found == atom_swap().end()) {
            fail(ErrorCode::BadConfig, "token '" + *it + "' is outside the rewrite alphabet");
        }
        out.push_back(found->second);
    }
    return out;
}

Dataset make_rewrite_dataset(size_t n_records, uint64_t seed, int min_len, int max_len) {
    if (min_len < 1 || max_len < min_len) fail(ErrorCode::BadConfig, "bad length range");
    Dataset dataset;
    dataset.records.reserve(n_records);
    Rng rng(seed);
    for (size_t i = 0; i < n_records; ++i) {
        auto tokens = random_tokens(rng, min_len, max_len);
        dataset.records.push_back({join(tokens), join(rewrite_tokens(tokens)), Task::Forward});
    }
    return dataset;
}

Dataset make_copy_dataset(size_t n_records, uint64_t seed, int min_len, int max_len) {
    if (min_len < 1 || max_len < min_len) fail(ErrorCode::BadConfig, "bad length range");
    Dataset dataset;
    dataset.records.reserve(n_records);
    Rng rng(seed);
    for (size_t i = 0; i < n_records; ++i) {
        auto tokens = random_tokens(rng, min_len, max_len);
        std::string text = join(tokens);
        dataset.records.push_back({text, text, Task::Forward});
    }
    return dataset;
}

Vocabulary rewrite_vocab() {
    std::vector<std::string> pieces = rewrite_alphabet();
    pieces.push_back(" ");
    pieces.push_back("$");
    return Vocabulary::subword(std::move(pieces));
}

} // namespace rxnseq
