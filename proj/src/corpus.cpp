#include "rxnseq/corpus.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "rxnseq/error.hpp"

namespace rxnseq {

namespace {

Task parse_task_tag(std::string_view tag, uint64_t line_no, const std::string& origin) {
    if (tag == "forward") return Task::Forward;
    if (tag == "retro") return Task::Retro;
    if (tag == "reagent") return Task::Reagent;
    fail(ErrorCode::MalformedLine,
         origin + ":" + std::to_string(line_no) + ": unknown task tag '" + std::string(tag) + "'");
}

const char* task_tag(Task task) {
    switch (task) {
        case Task::Forward: return "forward";
        case Task::Retro: return "retro";
        case Task::Reagent: return "reagent";
        case Task::Untagged: return "";
    }
    return "";
}

} // namespace

Dataset parse_dataset(std::istream& in, Split split, const std::string& origin) {
    Dataset dataset;
    dataset.split = split;
    std::string line;
    uint64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        size_t tab1 = line.find('\t');
        if (tab1 == std::string::npos) {
            fail(ErrorCode::MalformedLine,
                 origin + ":" + std::to_string(line_no) + ": expected `source<TAB>target`");
        }
        size_t tab2 = line.find('\t', tab1 + 1);
        ReactionRecord record;
        record.source = line.substr(0, tab1);
        if (tab2 == std::string::npos) {
            record.target = line.substr(tab1 + 1);
        } else {
            record.target = line.substr(tab1 + 1, tab2 - tab1 - 1);
            record.task = parse_task_tag(line.substr(tab2 + 1), line_no, origin);
        }
        if (record.source.empty() || record.target.empty()) {
            fail(ErrorCode::MalformedLine,
                 origin + ":" + std::to_string(line_no) + ": empty source or target");
        }
        dataset.records.push_back(std::move(record));
    }
    return dataset;
}

Dataset load_dataset(const std::string& path, Split split) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open '" + path + "'");
    return parse_dataset(in, split, path);
}

void save_dataset(const Dataset& dataset, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot open '" + path + "' for writing");
    for (const auto& record : dataset.records) {
        out << record.source << '\t' << record.target;
        if (record.task != Task::Untagged) out << '\t' << task_tag(record.task);
        out << '\n';
    }
    if (!out) fail(ErrorCode::IoError, "write failed for '" + path + "'");
}

std::pair<std::string, std::string> format_example(const ReactionRecord& record, bool multi_task) {
    if (!multi_task) return {record.source, record.target};
    switch (record.task) {
        case Task::Forward: return {"Product: " + record.source, record.target};
        case Task::Retro: return {"Reactants: " + record.source, record.target};
        case Task::Reagent: return {"Reagents: " + record.source, record.target};
        case Task::Untagged:
            fail(ErrorCode::MissingTask, "multi-task formatting needs a task tag");
    }
    fail(ErrorCode::MissingTask, "invalid task");
}

void MaskingConfig::validate() const {
    if (!(mask_fraction > 0.0 && mask_fraction < 1.0)) {
        fail(ErrorCode::BadConfig, "mask_fraction must be in (0, 1)");
    }
    if (p_mask + p_random + p_keep != 1.0) {
        fail(ErrorCode::BadConfig, "mask/random/keep probabilities must sum to 1 exactly");
    }
    if (p_mask < 0.0 || p_random < 0.0 || p_keep < 0.0) {
        fail(ErrorCode::BadConfig, "negative action probability");
    }
}

MaskedPair mask_sequence(const std::vector<std::string>& tokens, const MaskingConfig& cfg, Rng& rng) {
    MaskedPair pair;
    pair.target = tokens;
    pair.corrupted = tokens;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (!rng.bernoulli(cfg.mask_fraction)) continue;
        double action = rng.next_double();
        if (action < cfg.p_mask) {
            pair.corrupted[i] = cfg.mask_token;
        } else if (action < cfg.p_mask + cfg.p_random) {
            // a uniformly drawn token of the same sequence (may be itself)
            pair.corrupted[i] = tokens[rng.next_index(tokens.size())];
        }
        // else: keep as is
    }
    return pair;
}

Dataset subsample_nested(const Dataset& dataset, uint32_t k, uint64_t seed) {
    size_t n = dataset.size();
    if (k >= 63 || (uint64_t(1) << k) > n) {
        fail(ErrorCode::FractionTooLarge,
             "2^" + std::to_string(k) + " exceeds dataset size " + std::to_string(n));
    }
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(seed);
    rng.shuffle(order);
    size_t keep = (n + (uint64_t(1) << k) - 1) >> k; // ceil(n / 2^k)
    Dataset out;
    out.split = dataset.split;
    out.records.reserve(keep);
    for (size_t i = 0; i < keep; ++i) {
        out.records.push_back(dataset.records[order[i]]);
    }
    return out;
}

std::string render_tokens(const std::vector<std::string>& tokens, PreprocessStrategy strat) {
    std::string joined;
    for (const auto& token : tokens) joined += token;
    switch (strat) {
        case PreprocessStrategy::None:
            return joined;
        case PreprocessStrategy::Simple:
            return preprocess(joined, PreprocessStrategy::Simple);
        case PreprocessStrategy::Smiles: {
            std::string out;
            for (const auto& token : tokens) {
                if (!out.empty()) out.push_back(' ');
                out += token;
            }
            return out;
        }
    }
    fail(ErrorCode::BadConfig, "invalid strategy");
}

std::vector<std::pair<std::string, std::string>> build_pretrain_pairs(
    const std::vector<std::string>& smiles, const MaskingConfig& cfg, PreprocessStrategy strat) {
    cfg.validate();
    std::vector<std::pair<std::string, std::string>> pairs;
    pairs.reserve(smiles.size());
    for (size_t i = 0; i < smiles.size(); ++i) {
        auto tokens = tokenize_smiles(smiles[i]);
        Rng rng = Rng::for_stream(cfg.seed, i);
        MaskedPair masked = mask_sequence(tokens, cfg, rng);
        pairs.emplace_back(render_tokens(masked.corrupted, strat), render_tokens(masked.target, strat));
    }
    return pairs;
}

uint64_t build_pretrain_corpus(std::istream& smiles_in, std::ostream& pairs_out,
                               const MaskingConfig& cfg, PreprocessStrategy strat) {
    cfg.validate();
    std::string line;
    uint64_t index = 0;
    while (std::getline(smiles_in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto tokens = tokenize_smiles(line);
        Rng rng = Rng::for_stream(cfg.seed, index);
        MaskedPair masked = mask_sequence(tokens, cfg, rng);
        pairs_out << render_tokens(masked.corrupted, strat) << '\t'
                  << render_tokens(masked.target, strat) << '\n';
        ++index;
    }
    return index;
}

} // namespace rxnseq
