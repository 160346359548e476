#include "rxnseq/decode.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "rxnseq/error.hpp"
#include "rxnseq/rng.hpp"

namespace rxnseq {

DecodeStrategy parse_decode_strategy(std::string_view name) {
    if (name == "greedy") return DecodeStrategy::Greedy;
    if (name == "beam") return DecodeStrategy::Beam;
    if (name == "topk" || name == "top-k") return DecodeStrategy::TopK;
    if (name == "nucleus" || name == "top-p") return DecodeStrategy::Nucleus;
    if (name == "contrastive") return DecodeStrategy::Contrastive;
    fail(ErrorCode::BadConfig, "unknown decoding strategy '" + std::string(name) + "'");
}

const char* decode_strategy_name(DecodeStrategy strategy) {
    switch (strategy) {
        case DecodeStrategy::Greedy: return "greedy";
        case DecodeStrategy::Beam: return "beam";
        case DecodeStrategy::TopK: return "topk";
        case DecodeStrategy::Nucleus: return "nucleus";
        case DecodeStrategy::Contrastive: return "contrastive";
    }
    return "?";
}

void DecodeConfig::validate() const {
    if (beam_width < 1) fail(ErrorCode::BadConfig, "beam_width must be >= 1");
    if (strategy == DecodeStrategy::Beam && (num_return < 1 || num_return > beam_width)) {
        fail(ErrorCode::BadConfig, "num_return must be in [1, beam_width]");
    }
    if (max_len < 1) fail(ErrorCode::BadConfig, "max_len must be >= 1");
    if (top_k < 1) fail(ErrorCode::BadConfig, "top_k must be >= 1");
    if (!(top_p > 0.0 && top_p <= 1.0)) fail(ErrorCode::BadConfig, "top_p must be in (0, 1]");
    if (temperature <= 0.0) fail(ErrorCode::BadConfig, "temperature must be positive");
    if (alpha < 0.0 || alpha > 1.0) fail(ErrorCode::BadConfig, "alpha must be in [0, 1]");
    if (num_samples < 1) fail(ErrorCode::BadConfig, "num_samples must be >= 1");
}

namespace {

IdSequence encode_checked(const Params& params, const Vocabulary& vocab, const std::string& src) {
    IdSequence ids = vocab.encode(src, false);
    if (static_cast<int64_t>(ids.size()) > params.config.max_src_len) {
        fail(ErrorCode::SourceTooLong, "source encodes to " + std::to_string(ids.size()) +
                                           " ids, limit " +
                                           std::to_string(params.config.max_src_len));
    }
    if (ids.empty()) fail(ErrorCode::SourceTooLong, "source encodes to zero ids");
    return ids;
}

int32_t effective_max_len(const Params& params, const DecodeConfig& cfg) {
    return std::min(cfg.max_len, params.config.max_tgt_len);
}

Hypothesis finish_hypothesis(const Vocabulary& vocab, IdSequence ids, double logprob,
                             bool finished) {
    Hypothesis hyp;
    hyp.text = vocab.decode(ids);
    hyp.ids = std::move(ids);
    hyp.logprob = logprob;
    hyp.finished = finished;
    return hyp;
}

// Sort, then drop later duplicates of the same text.
void sort_and_dedup(HypothesisList& list) {
    std::sort(list.begin(), list.end(), [](const Hypothesis& a, const Hypothesis& b) {
        if (a.logprob != b.logprob) return a.logprob > b.logprob;
        return a.ids < b.ids;
    });
    HypothesisList out;
    for (auto& hyp : list) {
        bool seen = false;
        for (const auto& kept : out) {
            if (kept.text == hyp.text) {
                seen = true;
                break;
            }
        }
        if (!seen) out.push_back(std::move(hyp));
    }
    list = std::move(out);
}

int32_t argmax_lowest_id(const Vec<float>& v) {
    Eigen::Index idx = 0;
    v.maxCoeff(&idx); // first occurrence wins, i.e. the lowest token id
    return static_cast<int32_t>(idx);
}

// Token ids ordered by descending probability, ties towards lower ids.
std::vector<int32_t> order_by_prob(const Vec<float>& log_probs) {
    std::vector<int32_t> order(log_probs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int32_t>(i);
    std::stable_sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
        return log_probs(a) > log_probs(b);
    });
    return order;
}

using SampledStep = std::pair<int32_t, double>; // chosen id, model logprob of it

// One independently seeded sampled sequence; `pick` chooses the next token
// from the full log-probability vector.
template <typename Pick>
Hypothesis run_sampled(const Params& params, const Vocabulary& vocab, const Mat<float>& memory,
                       const DecodeConfig& cfg, Pick&& pick) {
    IdSequence generated;
    double logprob = 0.0;
    bool finished = false;
    const int32_t limit = effective_max_len(params, cfg);
    for (int32_t t = 0; t < limit; ++t) {
        DecodeStep<float> step = decode_step(params, memory, generated);
        SampledStep chosen = pick(step.log_probs);
        logprob += chosen.second;
        if (chosen.first == kEosId) {
            finished = true;
            break;
        }
        generated.push_back(chosen.first);
    }
    return finish_hypothesis(vocab, std::move(generated), logprob, finished);
}

} // namespace

std::string build_model_input(const ReactionRecord& record, PreprocessStrategy strat,
                              bool multi_task) {
    std::string input = preprocess(record.source, strat);
    if (multi_task) {
        ReactionRecord prefixed = record;
        prefixed.source = input;
        return format_example(prefixed, true).first;
    }
    return input;
}

GreedyResult greedy_ids(const Params& params, const IdSequence& src_ids, int32_t max_len) {
    Mat<float> memory = encode_source(params, src_ids);
    GreedyResult result;
    const int32_t limit = std::min(max_len, params.config.max_tgt_len);
    for (int32_t t = 0; t < limit; ++t) {
        DecodeStep<float> step = decode_step(params, memory, result.ids);
        int32_t best = argmax_lowest_id(step.log_probs);
        result.logprob += static_cast<double>(step.log_probs(best));
        if (best == kEosId) {
            result.finished = true;
            break;
        }
        result.ids.push_back(best);
    }
    return result;
}

HypothesisList greedy(const Params& params, const Vocabulary& vocab, const std::string& src,
                      const DecodeConfig& cfg) {
    cfg.validate();
    GreedyResult result = greedy_ids(params, encode_checked(params, vocab, src), cfg.max_len);
    return {finish_hypothesis(vocab, std::move(result.ids), result.logprob, result.finished)};
}

HypothesisList beam(const Params& params, const Vocabulary& vocab, const std::string& src,
                    const DecodeConfig& cfg) {
    cfg.validate();
    Mat<float> memory = encode_source(params, encode_checked(params, vocab, src));
    const int32_t width = cfg.beam_width;
    const int32_t limit = effective_max_len(params, cfg);
    const int32_t vocab_size = params.config.vocab_size;

    struct Live {
        IdSequence ids;
        double logprob = 0.0;
    };
    struct Candidate {
        double logprob;
        int32_t parent;
        int32_t token;
    };

    std::vector<Live> live{{{}, 0.0}};
    std::vector<Live> finished;

    for (int32_t t = 0; t < limit && !live.empty(); ++t) {
        std::vector<Candidate> candidates;
        candidates.reserve(live.size() * static_cast<size_t>(vocab_size));
        for (size_t parent = 0; parent < live.size(); ++parent) {
            DecodeStep<float> step = decode_step(params, memory, live[parent].ids);
            for (int32_t v = 0; v < vocab_size; ++v) {
                candidates.push_back({live[parent].logprob + step.log_probs(v),
                                      static_cast<int32_t>(parent), v});
            }
        }
        auto better = [&](const Candidate& a, const Candidate& b) {
            if (a.logprob != b.logprob) return a.logprob > b.logprob;
            if (a.token != b.token) return a.token < b.token;
            return a.parent < b.parent;
        };
        size_t keep = std::min<size_t>(width, candidates.size());
        std::partial_sort(candidates.begin(), candidates.begin() + keep, candidates.end(), better);
        candidates.resize(keep);

        std::vector<Live> next_live;
        for (const auto& cand : candidates) {
            IdSequence ids = live[cand.parent].ids;
            if (cand.token == kEosId) {
                if (finished.size() < static_cast<size_t>(width)) {
                    finished.push_back({std::move(ids), cand.logprob});
                }
            } else {
                ids.push_back(cand.token);
                next_live.push_back({std::move(ids), cand.logprob});
            }
        }
        live = std::move(next_live);
        if (finished.size() >= static_cast<size_t>(width)) break;
    }

    HypothesisList hyps;
    for (auto& f : finished) {
        hyps.push_back(finish_hypothesis(vocab, std::move(f.ids), f.logprob, true));
    }
    sort_and_dedup(hyps);
    if (hyps.size() < static_cast<size_t>(cfg.num_return)) {
        // degraded results: pad out with the best unfinished hypotheses
        HypothesisList fallback;
        for (auto& l : live) {
            fallback.push_back(finish_hypothesis(vocab, std::move(l.ids), l.logprob, false));
        }
        sort_and_dedup(fallback);
        for (auto& hyp : fallback) {
            if (hyps.size() >= static_cast<size_t>(cfg.num_return)) break;
            bool seen = false;
            for (const auto& kept : hyps) seen = seen || kept.text == hyp.text;
            if (!seen) hyps.push_back(std::move(hyp));
        }
        std::stable_sort(hyps.begin(), hyps.end(),
                         [](const Hypothesis& a, const Hypothesis& b) { return a.logprob > b.logprob; });
    }
    if (hyps.size() > static_cast<size_t>(cfg.num_return)) hyps.resize(cfg.num_return);
    return hyps;
}

HypothesisList sample_topk(const Params& params, const Vocabulary& vocab, const std::string& src,
                           const DecodeConfig& cfg) {
    cfg.validate();
    Mat<float> memory = encode_source(params, encode_checked(params, vocab, src));
    HypothesisList hyps;
    for (int32_t sample = 0; sample < cfg.num_samples; ++sample) {
        Rng rng(derive_seed(cfg.seed, static_cast<uint64_t>(sample)));
        auto pick = [&](const Vec<float>& log_probs) -> SampledStep {
            auto order = order_by_prob(log_probs);
            size_t k = std::min<size_t>(cfg.top_k, order.size());
            // renormalized softmax over the top-k, sharpened by temperature
            std::vector<double> weights(k);
            double best = log_probs(order[0]);
            double total = 0.0;
            for (size_t i = 0; i < k; ++i) {
                weights[i] = std::exp((static_cast<double>(log_probs(order[i])) - best) /
                                      cfg.temperature);
                total += weights[i];
            }
            double u = rng.next_double() * total;
            size_t chosen = k - 1;
            double running = 0.0;
            for (size_t i = 0; i < k; ++i) {
                running += weights[i];
                if (u < running) {
                    chosen = i;
                    break;
                }
            }
            return {order[chosen], static_cast<double>(log_probs(order[chosen]))};
        };
        hyps.push_back(run_sampled(params, vocab, memory, cfg, pick));
    }
    sort_and_dedup(hyps);
    return hyps;
}

std::vector<int32_t> nucleus_support(const std::vector<double>& probs, double top_p) {
    std::vector<int32_t> order(probs.size());
    for (size_t i = 0; i < probs.size(); ++i) order[i] = static_cast<int32_t>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int32_t a, int32_t b) { return probs[a] > probs[b]; });
    double mass = 0.0;
    std::vector<int32_t> support;
    for (int32_t idx : order) {
        support.push_back(idx);
        mass += probs[idx];
        if (mass >= top_p) break;
    }
    return support;
}

HypothesisList sample_nucleus(const Params& params, const Vocabulary& vocab, const std::string& src,
                              const DecodeConfig& cfg) {
    cfg.validate();
    Mat<float> memory = encode_source(params, encode_checked(params, vocab, src));
    HypothesisList hyps;
    for (int32_t sample = 0; sample < cfg.num_samples; ++sample) {
        Rng rng(derive_seed(cfg.seed, static_cast<uint64_t>(sample)));
        auto pick = [&](const Vec<float>& log_probs) -> SampledStep {
            // temperature first, then the smallest prefix with mass >= top_p
            Vec<float> scaled = log_probs / static_cast<float>(cfg.temperature);
            double best = scaled.maxCoeff();
            double total = 0.0;
            std::vector<double> probs(scaled.size());
            for (Eigen::Index i = 0; i < scaled.size(); ++i) {
                probs[i] = std::exp(static_cast<double>(scaled(i)) - best);
                total += probs[i];
            }
            for (auto& p : probs) p /= total;
            std::vector<int32_t> support = nucleus_support(probs, cfg.top_p);
            double subset = 0.0;
            for (int32_t idx : support) subset += probs[idx];
            double u = rng.next_double() * subset;
            int32_t chosen = support.back();
            double running = 0.0;
            for (int32_t idx : support) {
                running += probs[idx];
                if (u < running) {
                    chosen = idx;
                    break;
                }
            }
            return {chosen, static_cast<double>(log_probs(chosen))};
        };
        hyps.push_back(run_sampled(params, vocab, memory, cfg, pick));
    }
    sort_and_dedup(hyps);
    return hyps;
}

int32_t pick_contrastive(const std::vector<ContrastiveCandidate>& candidates, double alpha) {
    int32_t best_token = -1;
    double best_score = 0.0;
    for (const auto& cand : candidates) {
        double score = (1.0 - alpha) * cand.prob - alpha * cand.max_similarity;
        if (best_token < 0 || score > best_score ||
            (score == best_score && cand.token < best_token)) {
            best_token = cand.token;
            best_score = score;
        }
    }
    return best_token;
}

HypothesisList contrastive(const Params& params, const Vocabulary& vocab, const std::string& src,
                           const DecodeConfig& cfg) {
    cfg.validate();
    Mat<float> memory = encode_source(params, encode_checked(params, vocab, src));
    IdSequence generated;
    std::vector<Vec<float>> chosen_states;
    double logprob = 0.0;
    bool finished = false;
    const int32_t limit = effective_max_len(params, cfg);

    auto cosine = [](const Vec<float>& a, const Vec<float>& b) -> double {
        double denom = static_cast<double>(a.norm()) * static_cast<double>(b.norm());
        if (denom == 0.0) return 0.0;
        return static_cast<double>(a.dot(b)) / denom;
    };

    for (int32_t t = 0; t < limit; ++t) {
        DecodeStep<float> step = decode_step(params, memory, generated);
        auto order = order_by_prob(step.log_probs);
        size_t k = std::min<size_t>(cfg.top_k, order.size());
        std::vector<ContrastiveCandidate> candidates;
        std::vector<Vec<float>> hiddens;
        for (size_t i = 0; i < k; ++i) {
            int32_t token = order[i];
            IdSequence with_token = generated;
            with_token.push_back(token);
            // one extra forward per candidate: the decoder state at the
            // candidate's own position
            DecodeStep<float> probe = decode_step(params, memory, with_token);
            double penalty = 0.0;
            for (const auto& prev : chosen_states) {
                penalty = std::max(penalty, cosine(probe.hidden, prev));
            }
            candidates.push_back(
                {token, std::exp(static_cast<double>(step.log_probs(token))), penalty});
            hiddens.push_back(std::move(probe.hidden));
        }
        int32_t best_token = pick_contrastive(candidates, cfg.alpha);
        logprob += static_cast<double>(step.log_probs(best_token));
        if (best_token == kEosId) {
            finished = true;
            break;
        }
        for (size_t i = 0; i < candidates.size(); ++i) {
            if (candidates[i].token == best_token) {
                chosen_states.push_back(std::move(hiddens[i]));
                break;
            }
        }
        generated.push_back(best_token);
    }
    return {finish_hypothesis(vocab, std::move(generated), logprob, finished)};
}

HypothesisList decode(const Params& params, const Vocabulary& vocab, const std::string& src,
                      const DecodeConfig& cfg) {
    switch (cfg.strategy) {
        case DecodeStrategy::Greedy: return greedy(params, vocab, src, cfg);
        case DecodeStrategy::Beam: return beam(params, vocab, src, cfg);
        case DecodeStrategy::TopK: return sample_topk(params, vocab, src, cfg);
        case DecodeStrategy::Nucleus: return sample_nucleus(params, vocab, src, cfg);
        case DecodeStrategy::Contrastive: return contrastive(params, vocab, src, cfg);
    }
    fail(ErrorCode::BadConfig, "invalid strategy");
}

double score_hypothesis(const Params& params, const Vocabulary& vocab, const std::string& src,
                        const Hypothesis& hyp) {
    Mat<float> memory = encode_source(params, encode_checked(params, vocab, src));
    IdSequence tgt = hyp.ids;
    if (hyp.finished) tgt.push_back(kEosId);
    if (tgt.empty()) return 0.0;
    Vec<float> lp = position_logprobs(params, memory, tgt);
    return static_cast<double>(lp.sum());
}

void predict_file(const Params& params, const Vocabulary& vocab, const Dataset& dataset,
                  PreprocessStrategy strat, bool multi_task, const DecodeConfig& cfg,
                  std::ostream& out) {
    cfg.validate();
    const bool sampled =
        cfg.strategy == DecodeStrategy::TopK || cfg.strategy == DecodeStrategy::Nucleus;
    out << std::fixed << std::setprecision(6);
    for (size_t index = 0; index < dataset.records.size(); ++index) {
        DecodeConfig record_cfg = cfg;
        if (sampled) record_cfg.seed = derive_seed(cfg.seed, index);
        std::string input = build_model_input(dataset.records[index], strat, multi_task);
        HypothesisList hyps = decode(params, vocab, input, record_cfg);
        for (size_t rank = 0; rank < hyps.size(); ++rank) {
            std::string stripped;
            for (char c : hyps[rank].text) {
                if (!std::isspace(static_cast<unsigned char>(c))) stripped.push_back(c);
            }
            out << index << '\t' << rank + 1 << '\t' << hyps[rank].logprob << '\t' << stripped
                << '\n';
        }
    }
    if (!out) fail(ErrorCode::IoError, "failed to write predictions");
}

} // namespace rxnseq
