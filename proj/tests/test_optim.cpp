#include <doctest.h>

#include <cmath>

#include "rxnseq/checkpoint.hpp"
#include "rxnseq/decode.hpp"
#include "rxnseq/error.hpp"
#include "rxnseq/optim.hpp"
#include "support.hpp"

using namespace rxnseq;

TEST_CASE("learning rate schedules") {
    TrainConfig cfg;
    cfg.lr = 0.003;
    cfg.warmup_steps = 5000;
    cfg.total_steps = 100000;

    cfg.schedule = LrSchedule::WarmupConstant;
    CHECK(lr_at(2500, cfg) == doctest::Approx(0.0015).epsilon(1e-12));
    CHECK(lr_at(5000, cfg) == doctest::Approx(0.003).epsilon(1e-12));
    CHECK(lr_at(50000, cfg) == doctest::Approx(0.003).epsilon(1e-12));
    // continuity at the warmup boundary
    CHECK(std::abs(lr_at(5000, cfg) - lr_at(4999, cfg)) < 0.003 * 2.0 / 5000.0);

    cfg.schedule = LrSchedule::InverseSqrt;
    cfg.lr = 0.0001;
    CHECK(lr_at(5000, cfg) == doctest::Approx(0.0001).epsilon(1e-12));
    CHECK(lr_at(4 * 5000, cfg) == doctest::Approx(0.00005).epsilon(1e-12)); // sqrt(1/4)
    CHECK(std::abs(lr_at(5001, cfg) - lr_at(5000, cfg)) < 0.0001 * 2.0 / 5000.0);
    CHECK(lr_at(2500, cfg) == doctest::Approx(0.00005).epsilon(1e-12)); // ramp at midpoint
}

TEST_CASE("adafactor scalar trace on a 1x1 tensor") {
    // two hand-computed steps of the published recurrences
    const double g1 = 0.3, g2 = -0.08, lr = 0.01, wd = 0.0, eps1 = 1e-30;
    double p = 1.5;
    double p_hand = p;
    double r = 0.0;

    auto hand_step = [&](int64_t t, double g) {
        double beta2hat = 1.0 - std::pow(static_cast<double>(t), -0.8);
        r = beta2hat * r + (1.0 - beta2hat) * (g * g + eps1);
        // 1x1 factored: vhat = r*c/sum(r) = r with c == r
        double u = g / std::sqrt(r);
        double rms = std::abs(u);
        double divisor = std::max(1.0, rms / 1.0);
        u /= divisor;
        p_hand = p_hand - lr * u - lr * wd * p_hand;
    };
    hand_step(1, g1);
    hand_step(2, g2);

    AdafactorState<double>::TensorState state;
    state.row = Vec<double>::Zero(1);
    state.col = Vec<double>::Zero(1);
    double param = p;
    double grad = g1;
    adafactor_update(&param, &grad, 1, 1, 2, state, 1, lr, wd);
    grad = g2;
    adafactor_update(&param, &grad, 1, 1, 2, state, 2, lr, wd);
    CHECK(param == doctest::Approx(p_hand).epsilon(1e-12));
}

TEST_CASE("adafactor vector path and decoupled weight decay") {
    // rank-1 tensor, one step: update is sign(g) after clipping when rms > 1
    AdafactorState<double>::TensorState state;
    state.full = Vec<double>::Zero(2);
    double params[2] = {1.0, -2.0};
    double grads[2] = {0.5, -0.25};
    const double lr = 0.1, wd = 0.01, eps1 = 1e-30;

    double expected[2];
    {
        double v0 = 0.5 * 0.5 + eps1, v1 = 0.25 * 0.25 + eps1; // beta2hat(1) = 0
        double u0 = 0.5 / std::sqrt(v0), u1 = -0.25 / std::sqrt(v1);
        double rms = std::sqrt((u0 * u0 + u1 * u1) / 2.0);
        double divisor = std::max(1.0, rms);
        u0 /= divisor;
        u1 /= divisor;
        expected[0] = 1.0 - lr * u0 - lr * wd * 1.0;
        expected[1] = -2.0 - lr * u1 - lr * wd * -2.0;
    }
    adafactor_update(params, grads, 2, 1, 1, state, 1, lr, wd);
    CHECK(params[0] == doctest::Approx(expected[0]).epsilon(1e-12));
    CHECK(params[1] == doctest::Approx(expected[1]).epsilon(1e-12));
}

TEST_CASE("adafactor state shapes are factored for matrices") {
    ModelConfig cfg = testsup::tiny_config(9, 8, 2, 16, 1);
    Params params = init_params<float>(cfg, 1);
    AdafactorState<float> state = init_adafactor(params);
    auto refs = tensor_refs(params);
    REQUIRE(refs.size() == state.tensors.size());
    for (size_t i = 0; i < refs.size(); ++i) {
        if (refs[i].rank == 2) {
            // m + n accumulator values, never m * n
            CHECK(state.tensors[i].row.size() == refs[i].rows);
            CHECK(state.tensors[i].col.size() == refs[i].cols);
            CHECK(state.tensors[i].full.size() == 0);
        } else {
            CHECK(state.tensors[i].full.size() == refs[i].rows);
            CHECK(state.tensors[i].row.size() == 0);
        }
    }
}

TEST_CASE("adafactor zero gradient leaves parameters unchanged") {
    ModelConfig cfg = testsup::tiny_config(9);
    Params params = init_params<float>(cfg, 5);
    Params copy = params;
    Params grads = zeros_like(params);
    AdafactorState<float> state = init_adafactor(params);
    adafactor_step(params, grads, state, 0.01f, 0.0f);
    CHECK(state.step == 1);
    for (auto refs = tensor_refs(params), orig = tensor_refs(copy); !refs.empty();) {
        for (size_t i = 0; i < refs.size(); ++i) {
            for (int64_t j = 0; j < refs[i].size(); ++j) {
                CHECK(refs[i].data[j] == orig[i].data[j]);
            }
        }
        break;
    }
}

TEST_CASE("adafactor rejects non-finite gradients") {
    ModelConfig cfg = testsup::tiny_config(9);
    Params params = init_params<float>(cfg, 5);
    Params grads = zeros_like(params);
    grads.token_embedding(0, 0) = std::numeric_limits<float>::quiet_NaN();
    AdafactorState<float> state = init_adafactor(params);
    CHECK_THROWS_AS(adafactor_step(params, grads, state, 0.01f, 0.0f), Error);
}

TEST_CASE("clipped update has unit rms at most before lr scaling") {
    ModelConfig cfg = testsup::tiny_config(9, 8, 2, 16, 1);
    ParamsT<double> params = init_params<double>(cfg, 9);
    ParamsT<double> before = params;
    ParamsT<double> grads = zeros_like(params);
    Rng rng(3);
    for (auto& ref : tensor_refs(grads)) {
        for (int64_t i = 0; i < ref.size(); ++i) ref.data[i] = rng.next_gaussian() * 10.0;
    }
    AdafactorState<double> state = init_adafactor(params);
    const double lr = 0.05;
    adafactor_step(params, grads, state, lr, 0.0);
    auto now = tensor_refs(params);
    auto old = tensor_refs(before);
    for (size_t i = 0; i < now.size(); ++i) {
        double sq = 0.0;
        for (int64_t j = 0; j < now[i].size(); ++j) {
            double delta = (old[i].data[j] - now[i].data[j]) / lr;
            sq += delta * delta;
        }
        double rms = std::sqrt(sq / now[i].size());
        CHECK(rms <= 1.0 + 1e-9);
    }
}

TEST_CASE("train with zero steps is a no-op") {
    ModelConfig cfg = testsup::tiny_config(15, 16, 2, 32, 1, 16);
    Vocabulary vocab = rewrite_vocab();
    cfg.vocab_size = vocab.size();
    Params init = init_params<float>(cfg, 1);
    TrainConfig tcfg;
    tcfg.total_steps = 0;
    TrainResult result = train(init, {{{3, 4}, {4, 3}}}, tcfg, {}, vocab);
    CHECK(result.log.empty());
    CHECK(result.best_params.token_embedding == init.token_embedding);
}

TEST_CASE("toy memorization and seeded determinism") {
    Vocabulary vocab = rewrite_vocab();
    ModelConfig cfg = testsup::tiny_config(vocab.size(), 32, 2, 64, 1, 16);
    Dataset data = make_copy_dataset(16, 3, 2, 4);
    std::vector<TrainExample> examples;
    std::vector<DevExample> dev;
    for (const auto& record : data.records) {
        IdSequence src = vocab.encode(preprocess(record.source, PreprocessStrategy::Smiles), false);
        examples.push_back({src, src});
        dev.push_back({src, record.target});
    }
    TrainConfig tcfg;
    tcfg.total_steps = 250;
    tcfg.warmup_steps = 25;
    tcfg.batch_size = 16;
    tcfg.eval_every = 50;
    tcfg.seed = 17;
    tcfg.dev_max_len = 8;

    Params init = init_params<float>(cfg, 17);
    TrainResult first = train(init, examples, tcfg, dev, vocab);
    REQUIRE_FALSE(first.log.empty());
    CHECK(first.log.back().train_loss < 0.05);
    CHECK(first.best_acc == 1.0);
    // smoothed loss decreased overall
    CHECK(first.log.back().train_loss < first.log.front().train_loss);

    TrainResult second = train(init, examples, tcfg, dev, vocab);
    REQUIRE(second.log.size() == first.log.size());
    for (size_t i = 0; i < first.log.size(); ++i) {
        CHECK(first.log[i].train_loss == second.log[i].train_loss);
        CHECK(first.log[i].dev_acc1 == second.log[i].dev_acc1);
        CHECK(first.log[i].lr == second.log[i].lr);
    }
    std::string rendered = render_metrics(first.log);
    CHECK(rendered.find('\t') != std::string::npos);
}

TEST_CASE("checkpoint selection keeps the best dev accuracy, later step wins ties") {
    // train long enough that accuracy saturates at 1.0 across several evals:
    // the recorded best step must be the last evaluated step
    Vocabulary vocab = rewrite_vocab();
    ModelConfig cfg = testsup::tiny_config(vocab.size(), 32, 2, 64, 1, 16);
    Dataset data = make_copy_dataset(8, 4, 2, 3);
    std::vector<TrainExample> examples;
    std::vector<DevExample> dev;
    for (const auto& record : data.records) {
        IdSequence src = vocab.encode(preprocess(record.source, PreprocessStrategy::Smiles), false);
        examples.push_back({src, src});
        dev.push_back({src, record.target});
    }
    TrainConfig tcfg;
    tcfg.total_steps = 300;
    tcfg.warmup_steps = 30;
    tcfg.batch_size = 8;
    tcfg.eval_every = 100;
    tcfg.dev_max_len = 8;
    TrainResult result = train(init_params<float>(cfg, 2), examples, tcfg, dev, vocab);
    CHECK(result.best_acc == 1.0);
    CHECK(result.best_step == 300);
}
