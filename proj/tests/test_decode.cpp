#include <doctest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "rxnseq/decode.hpp"
#include "rxnseq/error.hpp"
#include "support.hpp"

using namespace rxnseq;

namespace {

// Exhaustive search over every eos-terminated generation of at most max_len
// tokens (eos included), scored with the same next-token distributions the
// decoders consume.
struct Enumerated {
    IdSequence ids;
    double logprob;
};

Enumerated enumerate_best(const Params& params, const Vocabulary& vocab, const std::string& src,
                          int32_t max_len) {
    Mat<float> memory = encode_source(params, vocab.encode(src, false));
    Enumerated best{{}, -1e300};
    std::vector<int32_t> content;
    for (int32_t v = 0; v < params.config.vocab_size; ++v) {
        if (v != kEosId) content.push_back(v);
    }
    // depth-first over prefixes; a prefix of length l can still finish with
    // eos as its (l+1)-th token while l + 1 <= max_len
    std::function<void(IdSequence&, double)> visit = [&](IdSequence& prefix, double score) {
        DecodeStep<float> step = decode_step(params, memory, prefix);
        double with_eos = score + static_cast<double>(step.log_probs(kEosId));
        if (with_eos > best.logprob) best = {prefix, with_eos};
        if (static_cast<int32_t>(prefix.size()) + 1 >= max_len) return;
        for (int32_t v : content) {
            prefix.push_back(v);
            visit(prefix, score + static_cast<double>(step.log_probs(v)));
            prefix.pop_back();
        }
    };
    IdSequence prefix;
    visit(prefix, 0.0);
    return best;
}

} // namespace

TEST_CASE("beam width 1 equals greedy everywhere") {
    Vocabulary vocab = testsup::letters_vocab(4); // vocab size 7
    ModelConfig cfg = testsup::tiny_config(vocab.size(), 8, 2, 16, 1, 12);
    Rng rng(31);
    for (int trial = 0; trial < 25; ++trial) {
        Params params = init_params<float>(cfg, 100 + trial);
        std::string src = testsup::random_letters(rng, vocab, 1, 6);
        DecodeConfig dcfg;
        dcfg.max_len = 6;
        HypothesisList g = greedy(params, vocab, src, dcfg);
        DecodeConfig bcfg = dcfg;
        bcfg.strategy = DecodeStrategy::Beam;
        bcfg.beam_width = 1;
        bcfg.num_return = 1;
        HypothesisList b = beam(params, vocab, src, bcfg);
        REQUIRE(b.size() == 1);
        CHECK(b[0].text == g[0].text);
        CHECK(b[0].logprob == doctest::Approx(g[0].logprob).epsilon(1e-9));
        CHECK(b[0].finished == g[0].finished);
    }
}

TEST_CASE("beam with width = vocab size matches exhaustive enumeration") {
    Vocabulary vocab = testsup::letters_vocab(4);
    ModelConfig cfg = testsup::tiny_config(vocab.size(), 8, 2, 16, 1, 12);
    Rng rng(57);
    const int32_t max_len = 4;
    for (int trial = 0; trial < 40; ++trial) {
        Params params = init_params<float>(cfg, 500 + trial);
        std::string src = testsup::random_letters(rng, vocab, 1, 5);
        Enumerated oracle = enumerate_best(params, vocab, src, max_len);

        DecodeConfig bcfg;
        bcfg.strategy = DecodeStrategy::Beam;
        bcfg.beam_width = vocab.size();
        bcfg.num_return = 1;
        bcfg.max_len = max_len;
        HypothesisList result = beam(params, vocab, src, bcfg);
        REQUIRE_FALSE(result.empty());
        CHECK(result[0].finished);
        CHECK(result[0].logprob == doctest::Approx(oracle.logprob).epsilon(1e-6));
    }
}

TEST_CASE("beam quality is monotone in width") {
    Vocabulary vocab = testsup::letters_vocab(5);
    ModelConfig cfg = testsup::tiny_config(vocab.size(), 8, 2, 16, 1, 12);
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        Params params = init_params<float>(cfg, 900 + trial);
        std::string src = testsup::random_letters(rng, vocab, 2, 6);
        double previous = -1e300;
        for (int32_t width = 1; width <= 8; ++width) {
            DecodeConfig bcfg;
            bcfg.strategy = DecodeStrategy::Beam;
            bcfg.beam_width = width;
            bcfg.num_return = 1;
            bcfg.max_len = 6;
            HypothesisList result = beam(params, vocab, src, bcfg);
            REQUIRE_FALSE(result.empty());
            CHECK(result[0].logprob >= previous - 1e-9);
            previous = result[0].logprob;
        }
    }
}

TEST_CASE("beam output is sorted, deduplicated, and correctly scored") {
    testsup::ToyModel toy = testsup::trained_copy_model();
    DecodeConfig bcfg;
    bcfg.strategy = DecodeStrategy::Beam;
    bcfg.beam_width = 6;
    bcfg.num_return = 6;
    bcfg.max_len = 10;
    std::string src = "C N O";
    HypothesisList hyps = beam(toy.params, toy.vocab, src, bcfg);
    REQUIRE(hyps.size() >= 2);
    for (size_t i = 1; i < hyps.size(); ++i) {
        CHECK(hyps[i - 1].logprob >= hyps[i].logprob);
        for (size_t j = 0; j < i; ++j) CHECK(hyps[i].text != hyps[j].text);
    }
    for (const auto& hyp : hyps) {
        CHECK(hyp.logprob <= 1e-6);
        CHECK(score_hypothesis(toy.params, toy.vocab, src, hyp) ==
              doctest::Approx(hyp.logprob).epsilon(1e-5));
    }
    // the memorized copy task decodes to its input
    CHECK(hyps[0].text == "C N O");
    CHECK(greedy(toy.params, toy.vocab, src, bcfg)[0].text == "C N O");
}

TEST_CASE("greedy follows the stepwise argmax chain") {
    // the oracle enumerates the model's own next-token tables and replays
    // the argmax path
    Vocabulary vocab = testsup::letters_vocab(4);
    ModelConfig cfg = testsup::tiny_config(vocab.size(), 8, 2, 16, 1, 12);
    Params params = init_params<float>(cfg, 77);
    std::string src = "abba";
    Mat<float> memory = encode_source(params, vocab.encode(src, false));

    IdSequence expected;
    double expected_logprob = 0.0;
    bool expected_finished = false;
    for (int step_i = 0; step_i < 5; ++step_i) {
        DecodeStep<float> step = decode_step(params, memory, expected);
        int32_t arg = 0;
        for (int32_t v = 1; v < vocab.size(); ++v) {
            if (step.log_probs(v) > step.log_probs(arg)) arg = v;
        }
        expected_logprob += static_cast<double>(step.log_probs(arg));
        if (arg == kEosId) {
            expected_finished = true;
            break;
        }
        expected.push_back(arg);
    }
    DecodeConfig dcfg;
    dcfg.max_len = 5;
    HypothesisList result = greedy(params, vocab, src, dcfg);
    CHECK(result[0].ids == expected);
    CHECK(result[0].logprob == doctest::Approx(expected_logprob).epsilon(1e-9));
    CHECK(result[0].finished == expected_finished);
}

TEST_CASE("top-k sampling degenerate and statistical behavior") {
    Vocabulary vocab = testsup::letters_vocab(5);
    ModelConfig cfg = testsup::tiny_config(vocab.size(), 8, 2, 16, 1, 12);
    Params params = init_params<float>(cfg, 13);
    std::string src = "abc";

    // top_k = 1 equals greedy for any temperature
    for (double temperature : {0.3, 1.0, 4.0}) {
        DecodeConfig scfg;
        scfg.strategy = DecodeStrategy::TopK;
        scfg.top_k = 1;
        scfg.temperature = temperature;
        scfg.max_len = 6;
        HypothesisList sampled = sample_topk(params, vocab, src, scfg);
        HypothesisList g = greedy(params, vocab, src, scfg);
        CHECK(sampled[0].text == g[0].text);
    }

    // near-zero temperature concentrates on the argmax
    {
        DecodeConfig scfg;
        scfg.strategy = DecodeStrategy::TopK;
        scfg.top_k = 3;
        scfg.temperature = 0.01;
        scfg.max_len = 1;
        Mat<float> memory = encode_source(params, vocab.encode(src, false));
        DecodeStep<float> step = decode_step(params, memory, {});
        int32_t arg = 0;
        for (int32_t v = 1; v < vocab.size(); ++v) {
            if (step.log_probs(v) > step.log_probs(arg)) arg = v;
        }
        int hit = 0;
        const int draws = 2000;
        for (int i = 0; i < draws; ++i) {
            DecodeConfig one = scfg;
            one.seed = 1000 + i;
            HypothesisList sampled = sample_topk(params, vocab, src, one);
            int32_t first = sampled[0].ids.empty() ? kEosId : sampled[0].ids[0];
            if (first == arg) ++hit;
        }
        CHECK(static_cast<double>(hit) / draws >= 0.999);
    }

    // empirical first-token frequencies match the renormalized top-k mass
    {
        const int32_t k = 3;
        Mat<float> memory = encode_source(params, vocab.encode(src, false));
        DecodeStep<float> step = decode_step(params, memory, {});
        std::vector<std::pair<double, int32_t>> ranked;
        for (int32_t v = 0; v < vocab.size(); ++v) {
            ranked.push_back({-static_cast<double>(step.log_probs(v)), v});
        }
        std::sort(ranked.begin(), ranked.end());
        std::map<int32_t, double> expected;
        double total = 0.0;
        for (int i = 0; i < k; ++i) total += std::exp(-ranked[i].first);
        for (int i = 0; i < k; ++i) expected[ranked[i].second] = std::exp(-ranked[i].first) / total;

        std::map<int32_t, int> counts;
        const int draws = 50000;
        DecodeConfig scfg;
        scfg.strategy = DecodeStrategy::TopK;
        scfg.top_k = k;
        scfg.max_len = 1;
        for (int i = 0; i < draws; ++i) {
            DecodeConfig one = scfg;
            one.seed = i;
            HypothesisList sampled = sample_topk(params, vocab, src, one);
            int32_t first = sampled[0].ids.empty() ? kEosId : sampled[0].ids[0];
            counts[first] += 1;
        }
        // every draw must come from the top-k support
        int64_t in_support = 0;
        double chi2 = 0.0;
        for (const auto& [token, p] : expected) {
            double want = p * draws;
            double have = counts.count(token) ? counts[token] : 0;
            in_support += static_cast<int64_t>(have);
            chi2 += (have - want) * (have - want) / want;
        }
        CHECK(in_support == draws);
        CHECK(chi2 < 13.8155); // df = 2, alpha = 0.001
    }
}

TEST_CASE("nucleus support arithmetic") {
    // hand-built distribution: smallest prefix reaching 0.8 is {0, 1}
    std::vector<double> probs = {0.5, 0.3, 0.15, 0.05};
    CHECK(nucleus_support(probs, 0.8) == std::vector<int32_t>{0, 1});
    CHECK(nucleus_support(probs, 0.81) == std::vector<int32_t>{0, 1, 2});
    CHECK(nucleus_support(probs, 1.0) == std::vector<int32_t>{0, 1, 2, 3});
    // top_p below the max probability gives the singleton argmax
    CHECK(nucleus_support(probs, 0.3) == std::vector<int32_t>{0});
    // unsorted input is ranked by probability
    std::vector<double> shuffled = {0.05, 0.5, 0.15, 0.3};
    CHECK(nucleus_support(shuffled, 0.8) == std::vector<int32_t>{1, 3});
}

TEST_CASE("nucleus sampling end to end") {
    Vocabulary vocab = testsup::letters_vocab(5);
    ModelConfig cfg = testsup::tiny_config(vocab.size(), 8, 2, 16, 1, 12);
    Params params = init_params<float>(cfg, 19);
    std::string src = "ba";

    // top_p = 1: frequencies match the full softmax
    {
        Mat<float> memory = encode_source(params, vocab.encode(src, false));
        DecodeStep<float> step = decode_step(params, memory, {});
        std::map<int32_t, int> counts;
        const int draws = 50000;
        for (int i = 0; i < draws; ++i) {
            DecodeConfig scfg;
            scfg.strategy = DecodeStrategy::Nucleus;
            scfg.top_p = 1.0;
            scfg.max_len = 1;
            scfg.seed = i;
            HypothesisList sampled = sample_nucleus(params, vocab, src, scfg);
            int32_t first = sampled[0].ids.empty() ? kEosId : sampled[0].ids[0];
            counts[first] += 1;
        }
        double chi2 = 0.0;
        int df = 0;
        for (int32_t v = 0; v < vocab.size(); ++v) {
            if (v == kPadId || v == kUnkId) continue; // never the argmax of a trained row, but
                                                      // possible here; fold tiny cells below
            double want = std::exp(static_cast<double>(step.log_probs(v))) * draws;
            if (want < 5.0) continue; // chi-squared needs adequately filled cells
            double have = counts.count(v) ? counts[v] : 0;
            chi2 += (have - want) * (have - want) / want;
            ++df;
        }
        REQUIRE(df >= 2);
        static const double crit[] = {0, 10.828, 13.816, 16.266, 18.467, 20.515,
                                      22.458, 24.322, 26.124, 27.877, 29.588};
        CHECK(chi2 < crit[df - 1 > 10 ? 10 : df - 1]);
    }

    // top_p below the max prob: deterministic argmax path equals greedy
    {
        DecodeConfig scfg;
        scfg.strategy = DecodeStrategy::Nucleus;
        scfg.top_p = 1e-6;
        scfg.max_len = 6;
        HypothesisList a = sample_nucleus(params, vocab, src, scfg);
        HypothesisList g = greedy(params, vocab, src, scfg);
        CHECK(a[0].text == g[0].text);
    }
}

TEST_CASE("contrastive scoring rule") {
    // probability argmax is fully similar to a previous state: with a strong
    // penalty the second-ranked candidate wins
    std::vector<ContrastiveCandidate> candidates = {
        {5, 0.6, 1.0},
        {7, 0.3, 0.0},
    };
    CHECK(pick_contrastive(candidates, 0.9) == 7);
    CHECK(pick_contrastive(candidates, 0.0) == 5);
    // ties go to the lower token id
    std::vector<ContrastiveCandidate> tied = {{4, 0.5, 0.2}, {3, 0.5, 0.2}};
    CHECK(pick_contrastive(tied, 0.5) == 3);
}

TEST_CASE("contrastive with alpha 0 equals greedy") {
    Vocabulary vocab = testsup::letters_vocab(5);
    ModelConfig cfg = testsup::tiny_config(vocab.size(), 8, 2, 16, 1, 12);
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        Params params = init_params<float>(cfg, 2000 + trial);
        std::string src = testsup::random_letters(rng, vocab, 1, 5);
        for (int32_t top_k : {1, 4}) {
            DecodeConfig ccfg;
            ccfg.strategy = DecodeStrategy::Contrastive;
            ccfg.alpha = 0.0;
            ccfg.top_k = top_k;
            ccfg.max_len = 6;
            HypothesisList c = contrastive(params, vocab, src, ccfg);
            HypothesisList g = greedy(params, vocab, src, ccfg);
            CHECK(c[0].text == g[0].text);
            CHECK(c[0].logprob == doctest::Approx(g[0].logprob).epsilon(1e-9));
        }
    }
}

TEST_CASE("sampling reproducibility and scores") {
    testsup::ToyModel toy = testsup::trained_copy_model();
    std::string src = "Br N";
    for (auto strategy : {DecodeStrategy::TopK, DecodeStrategy::Nucleus}) {
        DecodeConfig scfg;
        scfg.strategy = strategy;
        scfg.top_k = 4;
        scfg.top_p = 0.9;
        scfg.max_len = 8;
        scfg.seed = 77;
        scfg.num_samples = 4;
        HypothesisList a = decode(toy.params, toy.vocab, src, scfg);
        HypothesisList b = decode(toy.params, toy.vocab, src, scfg);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].text == b[i].text);
            CHECK(a[i].logprob == b[i].logprob);
            CHECK(a[i].logprob ==
                  doctest::Approx(score_hypothesis(toy.params, toy.vocab, src, a[i]))
                      .epsilon(1e-5));
        }
    }
}

TEST_CASE("source length guard") {
    Vocabulary vocab = testsup::letters_vocab(4);
    ModelConfig cfg = testsup::tiny_config(vocab.size(), 8, 2, 16, 1, 6);
    Params params = init_params<float>(cfg, 5);
    DecodeConfig dcfg;
    CHECK_THROWS_AS(greedy(params, vocab, "aaaaaaaaaa", dcfg), Error);
}

TEST_CASE("predict_file format and determinism") {
    testsup::ToyModel toy = testsup::trained_copy_model();
    Dataset dataset;
    dataset.records = {{"CN", "CN", Task::Untagged}, {"OBr", "OBr", Task::Untagged}};

    DecodeConfig bcfg;
    bcfg.strategy = DecodeStrategy::Beam;
    bcfg.beam_width = 5;
    bcfg.num_return = 5;
    bcfg.max_len = 8;

    std::ostringstream out1, out2;
    predict_file(toy.params, toy.vocab, dataset, PreprocessStrategy::Smiles, false, bcfg, out1);
    predict_file(toy.params, toy.vocab, dataset, PreprocessStrategy::Smiles, false, bcfg, out2);
    CHECK(out1.str() == out2.str());

    int lines = 0;
    std::istringstream reader(out1.str());
    std::string line;
    int32_t max_rank = 0;
    while (std::getline(reader, line)) {
        ++lines;
        std::istringstream fields(line);
        std::string index, rank, logprob, text;
        std::getline(fields, index, '\t');
        std::getline(fields, rank, '\t');
        std::getline(fields, logprob, '\t');
        std::getline(fields, text, '\t');
        CHECK((index == "0" || index == "1"));
        max_rank = std::max(max_rank, std::stoi(rank));
        CHECK(text.find(' ') == std::string::npos); // whitespace stripped
    }
    CHECK(lines <= 10);
    CHECK(lines >= 2);
    CHECK(max_rank <= 5);

    // top-1 for a memorized pair reproduces the product
    CHECK(out1.str().find("0\t1\t") != std::string::npos);
    CHECK(out1.str().substr(0, out1.str().find('\n')).find("CN") != std::string::npos);

    // seeded sampling is byte-identical across runs too
    DecodeConfig scfg;
    scfg.strategy = DecodeStrategy::Nucleus;
    scfg.top_p = 0.95;
    scfg.max_len = 8;
    scfg.seed = 5;
    std::ostringstream s1, s2;
    predict_file(toy.params, toy.vocab, dataset, PreprocessStrategy::Smiles, false, scfg, s1);
    predict_file(toy.params, toy.vocab, dataset, PreprocessStrategy::Smiles, false, scfg, s2);
    CHECK(s1.str() == s2.str());
}
