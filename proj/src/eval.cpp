#include "rxnseq/eval.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "rxnseq/error.hpp"

namespace rxnseq {

namespace {

std::string stripped_or_empty(const std::string& text) {
    std::string out;
    for (char c : text) {
        if (!std::isspace(static_cast<unsigned char>(c))) out.push_back(c);
    }
    return out;
}

} // namespace

void EvalConfig::validate() const {
    if (ks.empty()) fail(ErrorCode::BadConfig, "no K values");
    for (size_t i = 0; i < ks.size(); ++i) {
        if (ks[i] < 1) fail(ErrorCode::BadConfig, "K values must be >= 1");
        if (i > 0 && ks[i] <= ks[i - 1]) fail(ErrorCode::BadConfig, "K values must be ascending");
    }
}

PredictionTexts parse_predictions(std::istream& in, size_t n_records) {
    struct Row {
        int64_t rank;
        std::string text;
    };
    std::vector<std::vector<Row>> rows(n_records);
    std::string line;
    uint64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        size_t t1 = line.find('\t');
        size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        size_t t3 = t2 == std::string::npos ? std::string::npos : line.find('\t', t2 + 1);
        if (t3 == std::string::npos) {
            fail(ErrorCode::MalformedPredictions,
                 "line " + std::to_string(line_no) + ": expected 4 tab-separated fields");
        }
        int64_t index = -1, rank = -1;
        try {
            index = std::stoll(line.substr(0, t1));
            rank = std::stoll(line.substr(t1 + 1, t2 - t1 - 1));
            (void)std::stod(line.substr(t2 + 1, t3 - t2 - 1)); // logprob must parse
        } catch (const std::exception&) {
            fail(ErrorCode::MalformedPredictions,
                 "line " + std::to_string(line_no) + ": non-numeric index/rank/logprob");
        }
        if (index < 0 || index >= static_cast<int64_t>(n_records)) {
            fail(ErrorCode::IndexMismatch, "line " + std::to_string(line_no) + ": record index " +
                                               std::to_string(index) + " outside gold set of " +
                                               std::to_string(n_records));
        }
        if (rank < 1) {
            fail(ErrorCode::MalformedPredictions,
                 "line " + std::to_string(line_no) + ": rank must be >= 1");
        }
        rows[static_cast<size_t>(index)].push_back({rank, line.substr(t3 + 1)});
    }

    PredictionTexts texts(n_records);
    for (size_t i = 0; i < n_records; ++i) {
        std::stable_sort(rows[i].begin(), rows[i].end(),
                         [](const Row& a, const Row& b) { return a.rank < b.rank; });
        for (auto& row : rows[i]) {
            bool seen = false;
            for (const auto& kept : texts[i]) seen = seen || kept == row.text;
            if (!seen) texts[i].push_back(std::move(row.text));
        }
    }
    return texts;
}

EvalReport acc_at_k(const PredictionTexts& preds, const Dataset& gold, const EvalConfig& cfg) {
    cfg.validate();
    if (preds.size() != gold.size()) {
        fail(ErrorCode::IndexMismatch, "prediction set covers " + std::to_string(preds.size()) +
                                           " records, gold has " + std::to_string(gold.size()));
    }
    EvalReport report;
    report.n_records = static_cast<int64_t>(gold.size());
    const int32_t max_k = cfg.ks.back();
    std::vector<int64_t> hits(cfg.ks.size(), 0);
    for (size_t i = 0; i < gold.size(); ++i) {
        std::string want = stripped_or_empty(gold.records[i].target);
        if (static_cast<int32_t>(preds[i].size()) < max_k) report.n_missing += 1;
        int32_t found_rank = 0; // 1-based, 0: not found
        for (size_t r = 0; r < preds[i].size() && r < static_cast<size_t>(max_k); ++r) {
            if (preds[i][r] == want) {
                found_rank = static_cast<int32_t>(r) + 1;
                break;
            }
        }
        if (found_rank > 0) {
            for (size_t j = 0; j < cfg.ks.size(); ++j) {
                if (found_rank <= cfg.ks[j]) hits[j] += 1;
            }
        }
    }
    for (size_t j = 0; j < cfg.ks.size(); ++j) {
        report.acc_at.emplace_back(cfg.ks[j],
                                   static_cast<double>(hits[j]) / static_cast<double>(gold.size()));
    }
    return report;
}

EvalReport acc_at_k_file(const std::string& preds_path, const Dataset& gold,
                         const EvalConfig& cfg) {
    std::ifstream in(preds_path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open '" + preds_path + "'");
    return acc_at_k(parse_predictions(in, gold.size()), gold, cfg);
}

std::string render_report_text(const EvalReport& report) {
    std::ostringstream out;
    out.precision(6);
    out << "records: " << report.n_records << "\n";
    out << "records with missing hypotheses: " << report.n_missing << "\n";
    for (const auto& [k, acc] : report.acc_at) {
        out << "Acc@" << k << ": " << acc * 100.0 << "%\n";
    }
    return out.str();
}

std::string render_report_machine(const EvalReport& report) {
    std::ostringstream out;
    out.precision(10);
    out << "n_records\t" << report.n_records << "\n";
    out << "n_missing\t" << report.n_missing << "\n";
    for (const auto& [k, acc] : report.acc_at) {
        out << "acc@" << k << "\t" << acc << "\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------

std::vector<TrainExample> encode_training_set(const Dataset& dataset, const Vocabulary& vocab,
                                              PreprocessStrategy strat, bool multi_task) {
    std::vector<TrainExample> out;
    out.reserve(dataset.size());
    for (const auto& record : dataset.records) {
        TrainExample example;
        example.src = vocab.encode(build_model_input(record, strat, multi_task), false);
        example.tgt = vocab.encode(preprocess(record.target, strat), false);
        out.push_back(std::move(example));
    }
    return out;
}

std::vector<DevExample> encode_dev_set(const Dataset& dataset, const Vocabulary& vocab,
                                       PreprocessStrategy strat, bool multi_task) {
    std::vector<DevExample> out;
    out.reserve(dataset.size());
    for (const auto& record : dataset.records) {
        DevExample example;
        example.src = vocab.encode(build_model_input(record, strat, multi_task), false);
        example.target_text = stripped_or_empty(record.target);
        out.push_back(std::move(example));
    }
    return out;
}

std::vector<SweepRow> beam_sweep(const Params& params, const Vocabulary& vocab,
                                 const Dataset& dataset, PreprocessStrategy strat, bool multi_task,
                                 const std::vector<int32_t>& widths, const DecodeConfig& base,
                                 const EvalConfig& ecfg) {
    ecfg.validate();
    std::vector<SweepRow> rows;
    for (int32_t width : widths) {
        if (width < 1) fail(ErrorCode::BadConfig, "beam width must be >= 1");
        DecodeConfig cfg = base;
        cfg.strategy = DecodeStrategy::Beam;
        cfg.beam_width = width;
        cfg.num_return = std::min(width, ecfg.ks.back());
        PredictionTexts preds(dataset.size());
        for (size_t i = 0; i < dataset.records.size(); ++i) {
            std::string input = build_model_input(dataset.records[i], strat, multi_task);
            for (const auto& hyp : beam(params, vocab, input, cfg)) {
                preds[i].push_back(stripped_or_empty(hyp.text));
            }
        }
        EvalReport report = acc_at_k(preds, dataset, ecfg);
        rows.push_back({width, report.acc_at});
    }
    return rows;
}

std::string render_sweep_tsv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out.precision(10);
    out << "width";
    if (!rows.empty()) {
        for (const auto& [k, acc] : rows.front().acc_at) out << "\tacc@" << k;
    }
    out << "\n";
    for (const auto& row : rows) {
        out << row.width;
        for (const auto& [k, acc] : row.acc_at) out << '\t' << acc;
        out << "\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------

namespace {

// Record identity for the nesting assertion.
std::set<std::string> record_keys(const Dataset& dataset) {
    std::set<std::string> keys;
    for (const auto& record : dataset.records) {
        keys.insert(record.source + "\t" + record.target);
    }
    return keys;
}

} // namespace

std::vector<DataEfficiencyRow> data_efficiency_run(
    const ModelConfig& mcfg, const TrainConfig& tcfg, const Dataset& train_set,
    const Dataset& dev_set, const Dataset& test_set, const Vocabulary& vocab,
    PreprocessStrategy strat, bool multi_task, const DataEfficiencyConfig& dcfg,
    std::ostream* progress) {
    dcfg.eval.validate();
    std::vector<DataEfficiencyRow> rows;
    std::set<std::string> previous_keys;
    bool have_previous = false;
    std::vector<uint32_t> ks = dcfg.ks;
    std::sort(ks.begin(), ks.end());
    auto dev_examples = encode_dev_set(dev_set, vocab, strat, multi_task);

    for (uint32_t k : ks) {
        Dataset subset = subsample_nested(train_set, k, dcfg.subsample_seed);
        std::set<std::string> keys = record_keys(subset);
        if (have_previous) {
            // hard nesting assertion: every record of the smaller set must
            // come from the larger one
            if (!std::includes(previous_keys.begin(), previous_keys.end(), keys.begin(),
                               keys.end())) {
                fail(ErrorCode::FractionTooLarge, "nested subsample property violated");
            }
        }
        previous_keys = std::move(keys);
        have_previous = true;

        if (progress) {
            (*progress) << "data-efficiency: training on 1/" << (uint64_t(1) << k) << " ("
                        << subset.size() << " records)" << std::endl;
        }
        Params init = init_params<float>(mcfg, tcfg.seed);
        TrainOptions options;
        options.progress = progress;
        TrainResult result = train(init, encode_training_set(subset, vocab, strat, multi_task),
                                   tcfg, dev_examples, vocab, options);

        DecodeConfig cfg = dcfg.decode;
        cfg.strategy = DecodeStrategy::Beam;
        cfg.num_return = std::min(cfg.beam_width, dcfg.eval.ks.back());
        PredictionTexts preds(test_set.size());
        for (size_t i = 0; i < test_set.records.size(); ++i) {
            std::string input = build_model_input(test_set.records[i], strat, multi_task);
            for (const auto& hyp : beam(result.best_params, vocab, input, cfg)) {
                preds[i].push_back(stripped_or_empty(hyp.text));
            }
        }
        EvalReport report = acc_at_k(preds, test_set, dcfg.eval);
        rows.push_back({k, subset.size(), report.acc_at});
        if (progress) {
            (*progress) << "data-efficiency: 1/" << (uint64_t(1) << k) << " acc@"
                        << dcfg.eval.ks.front() << " = " << report.acc_at.front().second
                        << std::endl;
        }
    }
    return rows;
}

std::string render_data_efficiency_tsv(const std::vector<DataEfficiencyRow>& rows) {
    std::ostringstream out;
    out.precision(10);
    out << "fraction\ttrain_size";
    if (!rows.empty()) {
        for (const auto& [k, acc] : rows.front().acc_at) out << "\tacc@" << k;
    }
    out << "\n";
    for (const auto& row : rows) {
        out << "1/" << (uint64_t(1) << row.k) << '\t' << row.train_size;
        for (const auto& [k, acc] : row.acc_at) out << '\t' << acc;
        out << "\n";
    }
    return out.str();
}

} // namespace rxnseq
