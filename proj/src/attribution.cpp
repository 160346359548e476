#include "rxnseq/attribution.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "rxnseq/error.hpp"
#include "rxnseq/rng.hpp"

namespace rxnseq {

namespace {
constexpr int kExactLimit = 12;
constexpr int kSampledLimit = 64; // coalition masks are 64-bit
} // namespace

std::vector<double> shapley_exact(const CoalitionValueFn& fn) {
    const int n = fn.n_players();
    if (n <= 0) fail(ErrorCode::BadConfig, "no players");
    if (n > kExactLimit) {
        fail(ErrorCode::TooManyTokens, std::to_string(n) + " players need 2^" + std::to_string(n) +
                                           " coalitions; use shapley_sampled");
    }
    const uint64_t full = uint64_t(1) << n;
    std::vector<double> v(full);
    for (uint64_t mask = 0; mask < full; ++mask) v[mask] = fn.value(mask);

    // weight by coalition size: s!(n-1-s)!/n!
    std::vector<double> factorial(n + 1, 1.0);
    for (int i = 1; i <= n; ++i) factorial[i] = factorial[i - 1] * i;
    std::vector<double> weight(n);
    for (int s = 0; s < n; ++s) weight[s] = factorial[s] * factorial[n - 1 - s] / factorial[n];

    std::vector<double> phi(n, 0.0);
    for (uint64_t mask = 0; mask < full; ++mask) {
        int size = std::popcount(mask);
        for (int i = 0; i < n; ++i) {
            if (mask & (uint64_t(1) << i)) continue;
            phi[i] += weight[size] * (v[mask | (uint64_t(1) << i)] - v[mask]);
        }
    }
    return phi;
}

std::vector<double> shapley_sampled(const CoalitionValueFn& fn, int64_t n_permutations,
                                    uint64_t seed) {
    const int n = fn.n_players();
    if (n <= 0) fail(ErrorCode::BadConfig, "no players");
    if (n > kSampledLimit) fail(ErrorCode::TooManyTokens, "more than 64 players");
    if (n_permutations < 1) fail(ErrorCode::BadConfig, "need at least one permutation");

    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<double> phi(n, 0.0);
    Rng rng(seed);
    for (int64_t m = 0; m < n_permutations; ++m) {
        rng.shuffle(perm);
        uint64_t mask = 0;
        double prev = fn.value(0);
        for (int i : perm) {
            mask |= uint64_t(1) << i;
            double next = fn.value(mask);
            phi[i] += next - prev;
            prev = next;
        }
    }
    for (double& p : phi) p /= static_cast<double>(n_permutations);
    return phi;
}

// ---------------------------------------------------------------------------

namespace {

bool is_whitespace_piece(const std::string& piece) {
    if (piece.empty()) return true;
    for (char c : piece) {
        if (!std::isspace(static_cast<unsigned char>(c))) return false;
    }
    return true;
}

class PositionFn : public CoalitionValueFn {
public:
    PositionFn(const ReactionAttributor& owner, size_t output_pos)
        : owner_(owner), output_pos_(output_pos) {}

    int n_players() const override { return owner_.n_players(); }
    double value(uint64_t coalition) const override { return owner_.value(coalition, output_pos_); }

private:
    const ReactionAttributor& owner_;
    size_t output_pos_;
};

} // namespace

ReactionAttributor::ReactionAttributor(const Params& params, const Vocabulary& vocab,
                                       const ReactionRecord& record, PreprocessStrategy strat,
                                       bool multi_task, const AttributionConfig& cfg)
    : params_(params), vocab_(vocab), strat_(strat), multi_task_(multi_task), task_(record.task),
      mask_token_(cfg.mask_token) {
    input_tokens_ = tokenize_smiles(record.source);
    if (input_tokens_.size() > kSampledLimit) {
        fail(ErrorCode::TooManyTokens, "source has more than 64 tokens");
    }

    std::string input = build_model_input(record, strat, multi_task);
    GreedyResult realized =
        greedy_ids(params, vocab.encode(input, false), cfg.max_output_len);
    realized_ = realized.ids;
    for (size_t pos = 0; pos < realized_.size(); ++pos) {
        const std::string& piece = vocab.piece(realized_[pos]);
        if (is_whitespace_piece(piece)) continue;
        column_to_pos_.push_back(pos);
        output_tokens_.push_back(piece);
    }
}

const Vec<double>& ReactionAttributor::values(uint64_t coalition) const {
    auto it = cache_.find(coalition);
    if (it != cache_.end()) return it->second;

    std::vector<std::string> tokens = input_tokens_;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (!(coalition & (uint64_t(1) << i))) tokens[i] = mask_token_;
    }
    // positional masking: render the corrupted token list directly so that
    // token count and alignment never change with the coalition
    std::string input = render_tokens(tokens, strat_);
    if (multi_task_) {
        ReactionRecord rendered;
        rendered.source = input;
        rendered.task = task_;
        input = format_example(rendered, true).first;
    }

    Vec<double> column_values(column_to_pos_.size());
    if (!realized_.empty() && !column_to_pos_.empty()) {
        Mat<float> memory = encode_source(params_, vocab_.encode(input, false));
        Vec<float> logprobs = position_logprobs(params_, memory, realized_);
        for (size_t c = 0; c < column_to_pos_.size(); ++c) {
            column_values(c) = static_cast<double>(logprobs(column_to_pos_[c]));
        }
    }
    auto [inserted, ok] = cache_.emplace(coalition, std::move(column_values));
    (void)ok;
    return inserted->second;
}

double ReactionAttributor::value(uint64_t coalition, size_t output_pos) const {
    if (output_pos >= column_to_pos_.size()) {
        fail(ErrorCode::PositionOutOfRange, "output position " + std::to_string(output_pos) +
                                                " for " + std::to_string(column_to_pos_.size()) +
                                                " output tokens");
    }
    return values(coalition)(static_cast<Eigen::Index>(output_pos));
}

std::unique_ptr<CoalitionValueFn> ReactionAttributor::position_fn(size_t output_pos) const {
    if (output_pos >= column_to_pos_.size()) {
        fail(ErrorCode::PositionOutOfRange, "output position " + std::to_string(output_pos));
    }
    return std::make_unique<PositionFn>(*this, output_pos);
}

AttributionMatrix attribute_reaction(const Params& params, const Vocabulary& vocab,
                                     const ReactionRecord& record, PreprocessStrategy strat,
                                     bool multi_task, const AttributionConfig& cfg) {
    ReactionAttributor attributor(params, vocab, record, strat, multi_task, cfg);
    const int n = attributor.n_players();
    const size_t n_out = attributor.output_tokens().size();

    AttributionMatrix matrix;
    matrix.input_tokens = attributor.input_tokens();
    matrix.output_tokens = attributor.output_tokens();
    matrix.values.setZero(n, static_cast<Eigen::Index>(n_out));
    if (n_out == 0) return matrix;

    bool exact = cfg.estimator == ShapleyEstimator::Exact ||
                 (cfg.estimator == ShapleyEstimator::Auto && n <= kExactLimit);
    if (exact) {
        if (n > kExactLimit) {
            fail(ErrorCode::TooManyTokens,
                 "exact estimator supports at most " + std::to_string(kExactLimit) + " tokens");
        }
        const uint64_t full = uint64_t(1) << n;
        std::vector<double> factorial(n + 1, 1.0);
        for (int i = 1; i <= n; ++i) factorial[i] = factorial[i - 1] * i;
        std::vector<double> weight(n);
        for (int s = 0; s < n; ++s) weight[s] = factorial[s] * factorial[n - 1 - s] / factorial[n];
        for (uint64_t mask = 0; mask < full; ++mask) {
            int size = std::popcount(mask);
            const Vec<double>& base = attributor.values(mask);
            for (int i = 0; i < n; ++i) {
                if (mask & (uint64_t(1) << i)) continue;
                const Vec<double>& with = attributor.values(mask | (uint64_t(1) << i));
                matrix.values.row(i) += weight[size] * (with - base).transpose();
            }
        }
    } else {
        // permutations shared across output columns: each coalition forward
        // pass updates the whole row set at once
        std::vector<int> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        Rng rng(cfg.seed);
        for (int64_t m = 0; m < cfg.n_permutations; ++m) {
            rng.shuffle(perm);
            uint64_t mask = 0;
            Vec<double> prev = attributor.values(0);
            for (int i : perm) {
                mask |= uint64_t(1) << i;
                const Vec<double>& next = attributor.values(mask);
                matrix.values.row(i) += (next - prev).transpose();
                prev = next;
            }
        }
        matrix.values /= static_cast<double>(cfg.n_permutations);
    }
    return matrix;
}

// ---------------------------------------------------------------------------

void export_heatmap_tsv(const AttributionMatrix& matrix, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot open '" + path + "' for writing");
    out << std::setprecision(17);
    for (const auto& token : matrix.output_tokens) out << '\t' << token;
    out << '\n';
    for (Eigen::Index i = 0; i < matrix.values.rows(); ++i) {
        out << matrix.input_tokens[static_cast<size_t>(i)];
        for (Eigen::Index j = 0; j < matrix.values.cols(); ++j) out << '\t' << matrix.values(i, j);
        out << '\n';
    }
    if (!out) fail(ErrorCode::IoError, "write failed for '" + path + "'");
}

AttributionMatrix parse_heatmap_tsv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open '" + path + "'");
    AttributionMatrix matrix;
    std::string line;
    if (!std::getline(in, line)) fail(ErrorCode::IoError, "empty heatmap file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    {
        std::stringstream header(line);
        std::string cell;
        bool first = true;
        while (std::getline(header, cell, '\t')) {
            if (first) {
                first = false; // empty corner cell
                continue;
            }
            matrix.output_tokens.push_back(cell);
        }
    }
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream row(line);
        std::string cell;
        std::getline(row, cell, '\t');
        matrix.input_tokens.push_back(cell);
        std::vector<double> values;
        while (std::getline(row, cell, '\t')) values.push_back(std::stod(cell));
        if (values.size() != matrix.output_tokens.size()) {
            fail(ErrorCode::ShapeMismatch, "ragged heatmap row");
        }
        rows.push_back(std::move(values));
    }
    matrix.values.resize(static_cast<Eigen::Index>(rows.size()),
                         static_cast<Eigen::Index>(matrix.output_tokens.size()));
    for (size_t i = 0; i < rows.size(); ++i) {
        for (size_t j = 0; j < rows[i].size(); ++j) {
            matrix.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
        }
    }
    return matrix;
}

namespace {

std::string xml_escape(const std::string& text) {
    std::string out;
    for (char c : text) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

// Symmetric blue-white-red diverging scale centered at zero.
std::string cell_color(double value, double vmax) {
    int r = 255, g = 255, b = 255;
    if (vmax > 0.0) {
        double t = std::clamp(std::abs(value) / vmax, 0.0, 1.0);
        int fade = static_cast<int>(std::lround(255.0 * (1.0 - t)));
        if (value >= 0.0) {
            g = fade;
            b = fade;
        } else {
            r = fade;
            g = fade;
        }
    }
    std::ostringstream out;
    out << "rgb(" << r << ',' << g << ',' << b << ')';
    return out.str();
}

} // namespace

void export_heatmap_svg(const AttributionMatrix& matrix, const std::string& path) {
    const int cell = 18;
    const int label_w = 80, label_h = 60, margin = 10, footer = 28;
    const Eigen::Index rows = matrix.values.rows(), cols = matrix.values.cols();
    const int width = label_w + static_cast<int>(cols) * cell + margin;
    const int height = label_h + static_cast<int>(rows) * cell + margin + footer;

    double vmin = 0.0, vmax_value = 0.0, scale = 0.0;
    if (rows > 0 && cols > 0) {
        vmin = matrix.values.minCoeff();
        vmax_value = matrix.values.maxCoeff();
        scale = std::max(std::abs(vmin), std::abs(vmax_value));
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot open '" + path + "' for writing");
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" font-family=\"monospace\" font-size=\"10\">\n";
    for (Eigen::Index j = 0; j < cols; ++j) {
        int x = label_w + static_cast<int>(j) * cell + cell / 2;
        out << "  <text x=\"" << x << "\" y=\"" << label_h - 6 << "\" text-anchor=\"start\""
            << " transform=\"rotate(-60 " << x << ' ' << label_h - 6 << ")\">"
            << xml_escape(matrix.output_tokens[static_cast<size_t>(j)]) << "</text>\n";
    }
    for (Eigen::Index i = 0; i < rows; ++i) {
        int y = label_h + static_cast<int>(i) * cell;
        out << "  <text x=\"" << label_w - 6 << "\" y=\"" << y + cell - 5
            << "\" text-anchor=\"end\">" << xml_escape(matrix.input_tokens[static_cast<size_t>(i)])
            << "</text>\n";
        for (Eigen::Index j = 0; j < cols; ++j) {
            out << "  <rect x=\"" << label_w + static_cast<int>(j) * cell << "\" y=\"" << y
                << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
                << cell_color(matrix.values(i, j), scale) << "\" stroke=\"#ccc\"/>\n";
        }
    }
    out << "  <text x=\"" << label_w << "\" y=\"" << height - 10 << "\">min "
        << std::setprecision(6) << vmin << "  max " << vmax_value << "</text>\n";
    out << "</svg>\n";
    if (!out) fail(ErrorCode::IoError, "write failed for '" + path + "'");
}

} // namespace rxnseq
