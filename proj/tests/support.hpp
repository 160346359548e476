#pragma once

// Shared toy-model builders for the unit and acceptance suites.

#include <string>
#include <vector>

#include "rxnseq/model.hpp"
#include "rxnseq/optim.hpp"
#include "rxnseq/rng.hpp"
#include "rxnseq/synthetic.hpp"
#include "rxnseq/vocab.hpp"

namespace testsup {

using namespace rxnseq;

inline ModelConfig tiny_config(int32_t vocab_size, int32_t d_model = 8, int32_t heads = 2,
                               int32_t d_ff = 16, int32_t layers = 1, int32_t max_len = 24) {
    ModelConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.d_model = d_model;
    cfg.n_heads = heads;
    cfg.d_ff = d_ff;
    cfg.n_enc_layers = layers;
    cfg.n_dec_layers = layers;
    cfg.max_src_len = max_len;
    cfg.max_tgt_len = max_len;
    return cfg;
}

// Small vocabulary of single-letter pieces for decode/attribution tests.
inline Vocabulary letters_vocab(int n_letters) {
    std::vector<std::string> pieces;
    const char* letters = "abcdefghijklmnop";
    for (int i = 0; i < n_letters; ++i) pieces.emplace_back(1, letters[i]);
    return Vocabulary::subword(std::move(pieces));
}

// Random source text over the content pieces of a letters vocabulary.
inline std::string random_letters(Rng& rng, const Vocabulary& vocab, int min_len, int max_len) {
    int len = min_len + static_cast<int>(rng.next_index(max_len - min_len + 1));
    std::string out;
    for (int i = 0; i < len; ++i) {
        out += vocab.piece(kNumSpecials + static_cast<int32_t>(rng.next_index(vocab.content_size())));
    }
    return out;
}

// Trains a small copy model over the rewrite alphabet; converges in a couple
// of seconds and gives decode/attribution tests realistic weights.
struct ToyModel {
    Params params;
    Vocabulary vocab;
};

inline ToyModel trained_copy_model(size_t n_pairs = 24, int64_t steps = 400) {
    ToyModel toy;
    toy.vocab = rewrite_vocab();
    ModelConfig cfg = tiny_config(toy.vocab.size(), 32, 2, 64, 1, 16);
    Dataset data = make_copy_dataset(n_pairs, 11, 2, 5);
    std::vector<TrainExample> examples;
    for (const auto& record : data.records) {
        examples.push_back({toy.vocab.encode(preprocess(record.source, PreprocessStrategy::Smiles), false),
                            toy.vocab.encode(preprocess(record.target, PreprocessStrategy::Smiles), false)});
    }
    TrainConfig tcfg;
    tcfg.total_steps = steps;
    tcfg.warmup_steps = 40;
    tcfg.batch_size = static_cast<int32_t>(n_pairs);
    tcfg.eval_every = steps;
    tcfg.seed = 5;
    TrainResult result = train(init_params<float>(cfg, 5), examples, tcfg, {}, toy.vocab);
    toy.params = result.best_params;
    return toy;
}

} // namespace testsup
