#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rxnseq/corpus.hpp"
#include "rxnseq/decode.hpp"
#include "rxnseq/optim.hpp"

namespace rxnseq {

struct EvalConfig {
    std::vector<int32_t> ks = {1, 3, 5}; // sorted ascending
    void validate() const;
};

struct EvalReport {
    std::vector<std::pair<int32_t, double>> acc_at; // (K, accuracy)
    int64_t n_records = 0;
    int64_t n_missing = 0; // records with fewer than max(K) deduplicated hypotheses
};

// Deduplicated hypothesis texts per record, rank order preserved.
using PredictionTexts = std::vector<std::vector<std::string>>;

// Parses `index<TAB>rank<TAB>logprob<TAB>text` lines. Indices must fall in
// [0, n_records); ranks order hypotheses within a record.
PredictionTexts parse_predictions(std::istream& in, size_t n_records);

// A record scores 1 at K iff the whitespace-stripped gold target appears among
// its first K deduplicated hypothesis texts.
EvalReport acc_at_k(const PredictionTexts& preds, const Dataset& gold, const EvalConfig& cfg);
EvalReport acc_at_k_file(const std::string& preds_path, const Dataset& gold, const EvalConfig& cfg);

std::string render_report_text(const EvalReport& report);
std::string render_report_machine(const EvalReport& report); // metric<TAB>value lines

// ---------------------------------------------------------------------------

struct SweepRow {
    int32_t width = 0;
    std::vector<std::pair<int32_t, double>> acc_at;
};

// Beam decoding at each width over the same dataset; num_return is
// min(width, max(K)).
std::vector<SweepRow> beam_sweep(const Params& params, const Vocabulary& vocab,
                                 const Dataset& dataset, PreprocessStrategy strat, bool multi_task,
                                 const std::vector<int32_t>& widths, const DecodeConfig& base,
                                 const EvalConfig& ecfg);

std::string render_sweep_tsv(const std::vector<SweepRow>& rows);

// ---------------------------------------------------------------------------

struct DataEfficiencyRow {
    uint32_t k = 0; // training set is ceil(full / 2^k)
    size_t train_size = 0;
    std::vector<std::pair<int32_t, double>> acc_at;
};

struct DataEfficiencyConfig {
    std::vector<uint32_t> ks = {0, 1, 2, 3, 4, 5, 6, 7};
    uint64_t subsample_seed = 42;
    EvalConfig eval;
    DecodeConfig decode; // beam settings used for test-set decoding
};

// Trains one model per nested subsample (nesting is re-verified before each
// run) and evaluates every model on the same fixed test set.
std::vector<DataEfficiencyRow> data_efficiency_run(
    const ModelConfig& mcfg, const TrainConfig& tcfg, const Dataset& train_set,
    const Dataset& dev_set, const Dataset& test_set, const Vocabulary& vocab,
    PreprocessStrategy strat, bool multi_task, const DataEfficiencyConfig& dcfg,
    std::ostream* progress = nullptr);

std::string render_data_efficiency_tsv(const std::vector<DataEfficiencyRow>& rows);

// Shared by the trainer, sweeps, and the data-efficiency loop: encodes a
// dataset into model-ready examples under one preprocessing strategy.
std::vector<TrainExample> encode_training_set(const Dataset& dataset, const Vocabulary& vocab,
                                              PreprocessStrategy strat, bool multi_task);
std::vector<DevExample> encode_dev_set(const Dataset& dataset, const Vocabulary& vocab,
                                       PreprocessStrategy strat, bool multi_task);

} // namespace rxnseq
