#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "rxnseq/corpus.hpp"
#include "rxnseq/error.hpp"

using namespace rxnseq;

namespace {

enum class Action { NotSelected, Mask, Random, Keep };

// Replays the documented draw order on a parallel generator so the test can
// see which tokens were selected and which action fired, including the
// otherwise invisible keep action.
std::vector<Action> replay_actions(size_t n_tokens, const MaskingConfig& cfg, Rng& rng) {
    std::vector<Action> actions(n_tokens, Action::NotSelected);
    for (size_t i = 0; i < n_tokens; ++i) {
        if (!rng.bernoulli(cfg.mask_fraction)) continue;
        double draw = rng.next_double();
        if (draw < cfg.p_mask) {
            actions[i] = Action::Mask;
        } else if (draw < cfg.p_mask + cfg.p_random) {
            actions[i] = Action::Random;
            rng.next_index(n_tokens);
        } else {
            actions[i] = Action::Keep;
        }
    }
    return actions;
}

} // namespace

TEST_CASE("dataset parsing") {
    std::istringstream in("A>B\tC\n# comment\nCC\tOO\tretro\nN\tO\tforward\n");
    Dataset d = parse_dataset(in, Split::Train, "test");
    REQUIRE(d.size() == 3);
    CHECK(d.records[0].source == "A>B");
    CHECK(d.records[0].target == "C");
    CHECK(d.records[0].task == Task::Untagged);
    CHECK(d.records[1].task == Task::Retro);
    CHECK(d.records[2].task == Task::Forward);

    std::istringstream bad("no_tab_here\n");
    CHECK_THROWS_AS(parse_dataset(bad, Split::Train, "test"), Error);

    std::istringstream bad_tag("A\tB\tnonsense\n");
    CHECK_THROWS_AS(parse_dataset(bad_tag, Split::Train, "test"), Error);

    std::istringstream empty_side("A\t\n");
    CHECK_THROWS_AS(parse_dataset(empty_side, Split::Train, "test"), Error);
}

TEST_CASE("dataset save/load round trip") {
    Dataset d;
    d.records = {{"CC", "OO", Task::Forward}, {"N", "S", Task::Untagged}};
    const char* path = "/tmp/rxnseq_test_dataset.tsv";
    save_dataset(d, path);
    Dataset loaded = load_dataset(path, Split::Train);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded.records[0].source == "CC");
    CHECK(loaded.records[0].task == Task::Forward);
    CHECK(loaded.records[1].task == Task::Untagged);
    std::remove(path);
}

TEST_CASE("format_example") {
    ReactionRecord fwd{"A", "B", Task::Forward};
    CHECK(format_example(fwd, true) == std::pair<std::string, std::string>{"Product: A", "B"});
    ReactionRecord retro{"P", "R", Task::Retro};
    CHECK(format_example(retro, true).first == "Reactants: P");
    ReactionRecord reag{"X", "Y", Task::Reagent};
    CHECK(format_example(reag, true).first == "Reagents: X");
    CHECK(format_example(fwd, false) == std::pair<std::string, std::string>{"A", "B"});

    ReactionRecord untagged{"A", "B", Task::Untagged};
    CHECK_THROWS_AS(format_example(untagged, true), Error);
    CHECK(format_example(untagged, false).first == "A");
}

TEST_CASE("masking config validation") {
    MaskingConfig bad;
    bad.p_mask = 0.7; // 0.7 + 0.1 + 0.1 != 1
    CHECK_THROWS_AS(bad.validate(), Error);
    MaskingConfig zero_fraction;
    zero_fraction.mask_fraction = 0.0;
    CHECK_THROWS_AS(zero_fraction.validate(), Error);
    CHECK_NOTHROW(MaskingConfig{}.validate());
}

TEST_CASE("mask_sequence matches the replayed action trace") {
    MaskingConfig cfg;
    std::vector<std::string> tokens = {"A0", "A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8", "A9",
                                       "B0", "B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B9"};
    int64_t selected = 0, masked = 0, randomized = 0, kept = 0;
    const int64_t trials = 100000;
    for (int64_t trial = 0; trial < trials; ++trial) {
        Rng rng = Rng::for_stream(cfg.seed, static_cast<uint64_t>(trial));
        Rng replay = Rng::for_stream(cfg.seed, static_cast<uint64_t>(trial));
        MaskedPair pair = mask_sequence(tokens, cfg, rng);
        auto actions = replay_actions(tokens.size(), cfg, replay);
        REQUIRE(pair.corrupted.size() == tokens.size());
        REQUIRE(pair.target == tokens);
        for (size_t i = 0; i < tokens.size(); ++i) {
            switch (actions[i]) {
                case Action::NotSelected:
                case Action::Keep:
                    CHECK(pair.corrupted[i] == tokens[i]);
                    break;
                case Action::Mask:
                    CHECK(pair.corrupted[i] == cfg.mask_token);
                    break;
                case Action::Random: {
                    bool member = std::find(tokens.begin(), tokens.end(), pair.corrupted[i]) !=
                                  tokens.end();
                    CHECK(member);
                    break;
                }
            }
            if (actions[i] != Action::NotSelected) ++selected;
            if (actions[i] == Action::Mask) ++masked;
            if (actions[i] == Action::Random) ++randomized;
            if (actions[i] == Action::Keep) ++kept;
        }
    }
    double n_positions = static_cast<double>(trials) * tokens.size();
    double selected_fraction = selected / n_positions;
    CHECK(selected_fraction > 0.145);
    CHECK(selected_fraction < 0.155);

    double p_mask = static_cast<double>(masked) / selected;
    double p_random = static_cast<double>(randomized) / selected;
    double p_keep = static_cast<double>(kept) / selected;
    CHECK(std::abs(p_mask - 0.80) < 0.01);
    CHECK(std::abs(p_random - 0.10) < 0.01);
    CHECK(std::abs(p_keep - 0.10) < 0.01);

    // chi-squared over the three conditional actions, alpha = 0.001, df = 2
    double expected[3] = {0.80 * selected, 0.10 * selected, 0.10 * selected};
    double observed[3] = {static_cast<double>(masked), static_cast<double>(randomized),
                          static_cast<double>(kept)};
    double chi2 = 0.0;
    for (int i = 0; i < 3; ++i) {
        double diff = observed[i] - expected[i];
        chi2 += diff * diff / expected[i];
    }
    CHECK(chi2 < 13.8155);
}

TEST_CASE("mask_sequence determinism and edge cases") {
    MaskingConfig cfg;
    cfg.seed = 42;
    std::vector<std::string> tokens = {"C", "C", "O", "N", "Br"};
    Rng a(42), b(42);
    MaskedPair pa = mask_sequence(tokens, cfg, a);
    MaskedPair pb = mask_sequence(tokens, cfg, b);
    CHECK(pa.corrupted == pb.corrupted);

    // near-zero fraction: overwhelmingly a no-op
    MaskingConfig tiny;
    tiny.mask_fraction = 0.0001;
    int changed = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        Rng rng = Rng::for_stream(7, static_cast<uint64_t>(trial));
        MaskedPair pair = mask_sequence(tokens, tiny, rng);
        if (pair.corrupted != pair.target) ++changed;
    }
    CHECK(changed <= 5);

    // length-1 sequences are allowed; a random draw returns the sole token
    std::vector<std::string> solo = {"C"};
    for (int trial = 0; trial < 50; ++trial) {
        Rng rng = Rng::for_stream(9, static_cast<uint64_t>(trial));
        MaskedPair pair = mask_sequence(solo, cfg, rng);
        CHECK(pair.corrupted.size() == 1);
        bool valid = pair.corrupted[0] == "C" || pair.corrupted[0] == cfg.mask_token;
        CHECK(valid);
    }
}

TEST_CASE("nested subsampling sizes match the ceil rule") {
    Dataset d;
    d.records.resize(409035, {"C", "C", Task::Untagged});
    CHECK(subsample_nested(d, 0).size() == 409035);
    CHECK(subsample_nested(d, 1).size() == 204518);
    CHECK(subsample_nested(d, 7).size() == 3196);

    Dataset small;
    small.records.resize(5, {"C", "C", Task::Untagged});
    CHECK(subsample_nested(small, 1).size() == 3); // ceil(5/2)
    CHECK(subsample_nested(small, 2).size() == 2);
    CHECK_THROWS_AS(subsample_nested(small, 3), Error);
}

TEST_CASE("nested subsampling is nested and deterministic") {
    Dataset d;
    for (int i = 0; i < 1000; ++i) {
        d.records.push_back({"S" + std::to_string(i), "T", Task::Untagged});
    }
    std::set<std::string> previous;
    for (uint32_t k = 0; k <= 7; ++k) {
        Dataset sub = subsample_nested(d, k, 42);
        CHECK(sub.size() == (1000 + (1u << k) - 1) / (1u << k));
        std::set<std::string> current;
        for (const auto& record : sub.records) current.insert(record.source);
        CHECK(current.size() == sub.size());
        if (k > 0) {
            CHECK(std::includes(previous.begin(), previous.end(), current.begin(), current.end()));
        }
        previous = std::move(current);
    }
    // k = 0 is the full set in shuffled order
    Dataset full = subsample_nested(d, 0, 42);
    CHECK(full.size() == d.size());
    bool same_order = true;
    for (size_t i = 0; i < d.size(); ++i) {
        same_order = same_order && full.records[i].source == d.records[i].source;
    }
    CHECK_FALSE(same_order);

    Dataset again = subsample_nested(d, 3, 42);
    Dataset once = subsample_nested(d, 3, 42);
    for (size_t i = 0; i < again.size(); ++i) {
        CHECK(again.records[i].source == once.records[i].source);
    }
}

TEST_CASE("pretraining pair construction") {
    MaskingConfig cfg;
    cfg.seed = 31;

    // forced path: find a record stream index whose replayed trace selects
    // exactly token 1 of "CCO" with the mask action
    std::vector<std::string> tokens = {"C", "C", "O"};
    std::optional<uint64_t> found;
    for (uint64_t index = 0; index < 4000 && !found; ++index) {
        Rng replay = Rng::for_stream(cfg.seed, index);
        auto actions = replay_actions(tokens.size(), cfg, replay);
        if (actions[0] == Action::NotSelected && actions[1] == Action::Mask &&
            actions[2] == Action::NotSelected) {
            found = index;
        }
    }
    REQUIRE(found.has_value());
    std::vector<std::string> smiles(*found + 1, "CCO");
    auto pairs = build_pretrain_pairs(smiles, cfg, PreprocessStrategy::Smiles);
    CHECK(pairs[*found].first == "C $ O");
    CHECK(pairs[*found].second == "C C O");

    // zero selected tokens: input equals target
    std::optional<uint64_t> untouched;
    for (uint64_t index = 0; index < 100 && !untouched; ++index) {
        Rng replay = Rng::for_stream(cfg.seed, index);
        auto actions = replay_actions(tokens.size(), cfg, replay);
        if (actions[0] == Action::NotSelected && actions[1] == Action::NotSelected &&
            actions[2] == Action::NotSelected) {
            untouched = index;
        }
    }
    REQUIRE(untouched.has_value());
    CHECK(pairs[*untouched].first == pairs[*untouched].second);
}

TEST_CASE("pretraining stream preserves order and renders by strategy") {
    MaskingConfig cfg;
    std::vector<std::string> smiles;
    for (int i = 0; i < 100; ++i) smiles.push_back(i % 2 == 0 ? "CCO" : "NBr");
    auto pairs = build_pretrain_pairs(smiles, cfg, PreprocessStrategy::Smiles);
    REQUIRE(pairs.size() == 100);
    CHECK(pairs[0].second == "C C O");
    CHECK(pairs[1].second == "N Br");

    auto none_pairs = build_pretrain_pairs({"NBr"}, cfg, PreprocessStrategy::None);
    CHECK(none_pairs[0].second == "NBr");
    auto simple_pairs = build_pretrain_pairs({"NBr"}, cfg, PreprocessStrategy::Simple);
    CHECK(simple_pairs[0].second == "N B r");

    // streaming writer emits one TSV line per input line, identically seeded
    std::istringstream in("CCO\nNBr\n");
    std::ostringstream out;
    uint64_t n = build_pretrain_corpus(in, out, cfg, PreprocessStrategy::Smiles);
    CHECK(n == 2);
    std::istringstream in2("CCO\nNBr\n");
    std::ostringstream out2;
    build_pretrain_corpus(in2, out2, cfg, PreprocessStrategy::Smiles);
    CHECK(out.str() == out2.str());
    CHECK(out.str().find('\t') != std::string::npos);

    std::istringstream bad("C C\n");
    std::ostringstream sink;
    CHECK_THROWS_AS(build_pretrain_corpus(bad, sink, cfg, PreprocessStrategy::Smiles), Error);
}
