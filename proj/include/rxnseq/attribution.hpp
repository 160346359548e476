#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "rxnseq/decode.hpp"
#include "rxnseq/model.hpp"
#include "rxnseq/smiles.hpp"
#include "rxnseq/vocab.hpp"

namespace rxnseq {

// Set-function interface for Shapley computation. Bit i of the coalition mask
// is set when player i is present; absent players are replaced by the mask
// token in the model-backed implementation.
class CoalitionValueFn {
public:
    virtual ~CoalitionValueFn() = default;
    virtual int n_players() const = 0;
    virtual double value(uint64_t coalition) const = 0;
};

// Exact Shapley values over all 2^n coalitions (n <= 12, else TooManyTokens):
// phi_i = sum over S not containing i of |S|!(n-|S|-1)!/n! (v(S+i) - v(S)).
std::vector<double> shapley_exact(const CoalitionValueFn& fn);

// Permutation-sampling estimator: average marginal contributions over
// n_permutations seeded uniform permutations; unbiased for the exact values.
std::vector<double> shapley_sampled(const CoalitionValueFn& fn, int64_t n_permutations,
                                    uint64_t seed);

// ---------------------------------------------------------------------------

struct AttributionMatrix {
    std::vector<std::string> input_tokens;  // SMILES tokens of the source (y axis)
    std::vector<std::string> output_tokens; // realized product pieces (x axis)
    Mat<double> values;                     // n_input x n_output, log-probability units
};

enum class ShapleyEstimator { Auto, Exact, Sampled };

struct AttributionConfig {
    ShapleyEstimator estimator = ShapleyEstimator::Auto; // exact when n <= 12
    int64_t n_permutations = 2000;
    uint64_t seed = 42;
    int32_t max_output_len = 144;
    std::string mask_token = "$";
};

// Model-backed coalition values for one reaction: the realized output is the
// greedy decode of the source; v(S) at output position j is the log-probability
// of the realized piece at j, teacher-forcing the realized prefix, with input
// tokens outside S replaced by the mask token. Forward passes are cached per
// coalition and shared across output positions.
class ReactionAttributor {
public:
    ReactionAttributor(const Params& params, const Vocabulary& vocab, const ReactionRecord& record,
                       PreprocessStrategy strat, bool multi_task, const AttributionConfig& cfg);

    int n_players() const { return static_cast<int>(input_tokens_.size()); }
    const std::vector<std::string>& input_tokens() const { return input_tokens_; }
    // Whitespace pieces of the realized output are conditioning context, not
    // attribution columns.
    const std::vector<std::string>& output_tokens() const { return output_tokens_; }

    // Log-probabilities at every output column under one coalition.
    const Vec<double>& values(uint64_t coalition) const;
    double value(uint64_t coalition, size_t output_pos) const;

    // CoalitionValueFn view of a single output position.
    std::unique_ptr<CoalitionValueFn> position_fn(size_t output_pos) const;

private:
    const Params& params_;
    const Vocabulary& vocab_;
    PreprocessStrategy strat_;
    bool multi_task_;
    Task task_;
    std::string mask_token_;
    std::vector<std::string> input_tokens_;
    IdSequence realized_;               // full generated piece ids
    std::vector<size_t> column_to_pos_; // output column -> realized position
    std::vector<std::string> output_tokens_;
    mutable std::unordered_map<uint64_t, Vec<double>> cache_;
};

AttributionMatrix attribute_reaction(const Params& params, const Vocabulary& vocab,
                                     const ReactionRecord& record, PreprocessStrategy strat,
                                     bool multi_task, const AttributionConfig& cfg);

// TSV: header row of output tokens, one row per input token.
void export_heatmap_tsv(const AttributionMatrix& matrix, const std::string& path);
AttributionMatrix parse_heatmap_tsv(const std::string& path);

// Grid heatmap on a symmetric diverging scale centered at zero, extremes
// annotated.
void export_heatmap_svg(const AttributionMatrix& matrix, const std::string& path);

} // namespace rxnseq
