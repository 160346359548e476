#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rxnseq/corpus.hpp"
#include "rxnseq/model.hpp"
#include "rxnseq/vocab.hpp"

namespace rxnseq {

enum class DecodeStrategy { Greedy, Beam, TopK, Nucleus, Contrastive };

DecodeStrategy parse_decode_strategy(std::string_view name);
const char* decode_strategy_name(DecodeStrategy strategy);

struct DecodeConfig {
    DecodeStrategy strategy = DecodeStrategy::Greedy;
    int32_t beam_width = 5;
    int32_t num_return = 1;  // <= beam_width for beam search
    int32_t max_len = 144;   // generated tokens, terminating eos included
    int32_t top_k = 10;
    double top_p = 1.0;
    double temperature = 1.0;
    double alpha = 0.6; // degeneration-penalty weight for contrastive search
    uint64_t seed = 42;
    int32_t num_samples = 1; // independent draws for the sampling strategies

    void validate() const;
};

struct Hypothesis {
    IdSequence ids; // generated pieces, eos excluded
    std::string text;
    double logprob = 0.0; // model log-probability, eos term included when finished
    bool finished = false;
};

// Sorted by logprob descending, texts deduplicated; unfinished fallbacks are
// flagged via Hypothesis::finished.
using HypothesisList = std::vector<Hypothesis>;

// Greedy continuation from already-encoded source ids (shared by the full
// decoder and the training loop's dev evaluation). Returns generated ids
// (eos excluded), the cumulative model logprob (eos term included when
// finished), and the finished flag.
struct GreedyResult {
    IdSequence ids;
    double logprob = 0.0;
    bool finished = false;
};
GreedyResult greedy_ids(const Params& params, const IdSequence& src_ids, int32_t max_len);

// `src` is the already-preprocessed input text fed straight to the encoder.
HypothesisList greedy(const Params& params, const Vocabulary& vocab, const std::string& src,
                      const DecodeConfig& cfg);
// Length-unnormalized beam search; ties break towards lower token ids.
HypothesisList beam(const Params& params, const Vocabulary& vocab, const std::string& src,
                    const DecodeConfig& cfg);
HypothesisList sample_topk(const Params& params, const Vocabulary& vocab, const std::string& src,
                           const DecodeConfig& cfg);
HypothesisList sample_nucleus(const Params& params, const Vocabulary& vocab, const std::string& src,
                              const DecodeConfig& cfg);
HypothesisList contrastive(const Params& params, const Vocabulary& vocab, const std::string& src,
                           const DecodeConfig& cfg);

HypothesisList decode(const Params& params, const Vocabulary& vocab, const std::string& src,
                      const DecodeConfig& cfg);

// Decoding primitives, exposed for direct testing.
// Token indices of the smallest probability-sorted prefix with cumulative
// mass >= top_p, ties towards lower indices.
std::vector<int32_t> nucleus_support(const std::vector<double>& probs, double top_p);

struct ContrastiveCandidate {
    int32_t token;
    double prob;           // model probability of the candidate
    double max_similarity; // max cosine to previously chosen hidden states
};

// argmax of (1 - alpha) * prob - alpha * max_similarity, ties towards the
// lower token id.
int32_t pick_contrastive(const std::vector<ContrastiveCandidate>& candidates, double alpha);

// Teacher-forced model score of a hypothesis (eos appended when finished);
// decoders must return exactly this value as the logprob.
double score_hypothesis(const Params& params, const Vocabulary& vocab, const std::string& src,
                        const Hypothesis& hyp);

// Model input text for one record: optional task prefix plus the preprocessed
// source. The prefix is prepended after preprocessing so that SMILES
// tokenization never sees prefix characters.
std::string build_model_input(const ReactionRecord& record, PreprocessStrategy strat,
                              bool multi_task);

// One `index<TAB>rank<TAB>logprob<TAB>text` line per hypothesis, text
// whitespace-stripped, record indices 0-based in dataset order. Sampling
// strategies derive a per-record seed from (cfg.seed, record index).
void predict_file(const Params& params, const Vocabulary& vocab, const Dataset& dataset,
                  PreprocessStrategy strat, bool multi_task, const DecodeConfig& cfg,
                  std::ostream& out);

} // namespace rxnseq
