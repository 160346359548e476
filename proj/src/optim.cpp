#include "rxnseq/optim.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "rxnseq/decode.hpp"
#include "rxnseq/error.hpp"
#include "rxnseq/rng.hpp"

namespace rxnseq {

namespace {
constexpr double kEps1 = 1e-30;
constexpr double kClipThreshold = 1.0;
constexpr double kDecayExponent = 0.8;
} // namespace

void TrainConfig::validate() const {
    if (lr <= 0.0) fail(ErrorCode::BadConfig, "learning rate must be positive");
    if (batch_size < 1) fail(ErrorCode::BadConfig, "batch size must be >= 1");
    if (warmup_steps < 1) fail(ErrorCode::BadConfig, "warmup_steps must be >= 1");
    if (total_steps < 0) fail(ErrorCode::BadConfig, "total_steps must be >= 0");
    if (total_steps > 0 && warmup_steps > total_steps) {
        fail(ErrorCode::BadConfig, "warmup_steps exceeds total_steps");
    }
    if (grad_accum < 1) fail(ErrorCode::BadConfig, "grad_accum must be >= 1");
    if (eval_every < 1) fail(ErrorCode::BadConfig, "eval_every must be >= 1");
    if (threads < 1) fail(ErrorCode::BadConfig, "threads must be >= 1");
}

double lr_at(int64_t step, const TrainConfig& cfg) {
    double warmup = static_cast<double>(cfg.warmup_steps);
    double ramp = std::min(1.0, static_cast<double>(step) / warmup);
    switch (cfg.schedule) {
        case LrSchedule::WarmupConstant:
            return cfg.lr * ramp;
        case LrSchedule::InverseSqrt:
            return cfg.lr * ramp * std::sqrt(warmup / static_cast<double>(std::max(step, cfg.warmup_steps)));
    }
    return cfg.lr;
}

template <typename T>
AdafactorState<T> init_adafactor(ParamsT<T>& params) {
    AdafactorState<T> state;
    for (const auto& ref : tensor_refs(params)) {
        typename AdafactorState<T>::TensorState ts;
        if (ref.rank == 2) {
            ts.row = Vec<T>::Zero(ref.rows);
            ts.col = Vec<T>::Zero(ref.cols);
        } else {
            ts.full = Vec<T>::Zero(ref.rows);
        }
        state.tensors.push_back(std::move(ts));
    }
    return state;
}

template <typename T>
void adafactor_update(T* param, const T* grad, int64_t rows, int64_t cols, int rank,
                      typename AdafactorState<T>::TensorState& state, int64_t step, T lr,
                      T weight_decay) {
    const T beta2hat = static_cast<T>(1.0 - std::pow(static_cast<double>(step), -kDecayExponent));
    const T eps1 = static_cast<T>(kEps1);
    Eigen::Map<Mat<T>> p(param, rows, cols);
    Eigen::Map<const Mat<T>> g(grad, rows, cols);
    if (!g.allFinite()) fail(ErrorCode::NonFiniteGradient, "non-finite gradient");

    Mat<T> update;
    if (rank == 2) {
        Mat<T> sq = (g.array().square() + eps1).matrix();
        state.row = beta2hat * state.row + (T(1) - beta2hat) * sq.rowwise().sum();
        state.col = beta2hat * state.col + (T(1) - beta2hat) * sq.colwise().sum().transpose();
        // vhat = outer(row, col) / sum(row); factored storage is rows + cols
        T row_sum = state.row.sum();
        update = g.array() / ((state.row * state.col.transpose()).array() / row_sum).sqrt();
    } else {
        Vec<T> sq = (g.col(0).array().square() + eps1).matrix();
        state.full = beta2hat * state.full + (T(1) - beta2hat) * sq;
        update = (g.col(0).array() / state.full.array().sqrt()).matrix();
    }
    T rms = std::sqrt(update.array().square().mean());
    T divisor = std::max(T(1), rms / static_cast<T>(kClipThreshold));
    update /= divisor;
    if (weight_decay != T(0)) {
        // decoupled decay on the pre-update parameter value
        p = p * (T(1) - lr * weight_decay) - lr * update;
    } else {
        p.noalias() -= lr * update;
    }
}

template <typename T>
void adafactor_step(ParamsT<T>& params, ParamsT<T>& grads, AdafactorState<T>& state, T lr,
                    T weight_decay) {
    auto p_refs = tensor_refs(params);
    auto g_refs = tensor_refs(grads);
    if (p_refs.size() != state.tensors.size() || g_refs.size() != p_refs.size()) {
        fail(ErrorCode::ShapeMismatch, "optimizer state does not match parameters");
    }
    state.step += 1;
    for (size_t i = 0; i < p_refs.size(); ++i) {
        try {
            adafactor_update(p_refs[i].data, g_refs[i].data, p_refs[i].rows, p_refs[i].cols,
                             p_refs[i].rank, state.tensors[i], state.step, lr, weight_decay);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::NonFiniteGradient) {
                fail(ErrorCode::NonFiniteGradient, "non-finite gradient in " + p_refs[i].name);
            }
            throw;
        }
    }
}

template AdafactorState<float> init_adafactor<float>(ParamsT<float>&);
template AdafactorState<double> init_adafactor<double>(ParamsT<double>&);
template void adafactor_update<float>(float*, const float*, int64_t, int64_t, int,
                                      AdafactorState<float>::TensorState&, int64_t, float, float);
template void adafactor_update<double>(double*, const double*, int64_t, int64_t, int,
                                       AdafactorState<double>::TensorState&, int64_t, double,
                                       double);
template void adafactor_step<float>(ParamsT<float>&, ParamsT<float>&, AdafactorState<float>&, float,
                                    float);
template void adafactor_step<double>(ParamsT<double>&, ParamsT<double>&, AdafactorState<double>&,
                                     double, double);

// ---------------------------------------------------------------------------

namespace {

void add_scaled(Params& accum, Params& delta, float scale) {
    auto a_refs = tensor_refs(accum);
    auto d_refs = tensor_refs(delta);
    for (size_t i = 0; i < a_refs.size(); ++i) {
        Eigen::Map<Mat<float>> a(a_refs[i].data, a_refs[i].rows, a_refs[i].cols);
        Eigen::Map<Mat<float>> d(d_refs[i].data, d_refs[i].rows, d_refs[i].cols);
        a += scale * d;
    }
}

void scale_params(Params& p, float scale) {
    for (auto& ref : tensor_refs(p)) {
        Eigen::Map<Mat<float>> m(ref.data, ref.rows, ref.cols);
        m *= scale;
    }
}

double dev_accuracy(const Params& params, const std::vector<DevExample>& dev,
                    const Vocabulary& vocab, int32_t max_len) {
    if (dev.empty()) return 0.0;
    int64_t hits = 0;
    for (const auto& example : dev) {
        GreedyResult result = greedy_ids(params, example.src, max_len);
        std::string text = vocab.decode(result.ids);
        std::string stripped;
        for (char c : text) {
            if (!std::isspace(static_cast<unsigned char>(c))) stripped.push_back(c);
        }
        if (stripped == example.target_text) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(dev.size());
}

// Deterministic batch cursor: one global shuffled order per epoch.
class BatchCursor {
public:
    BatchCursor(size_t n, uint64_t seed) : order_(n), rng_(seed) {
        std::iota(order_.begin(), order_.end(), size_t{0});
        rng_.shuffle(order_);
    }

    size_t next() {
        if (pos_ >= order_.size()) {
            rng_.shuffle(order_);
            pos_ = 0;
        }
        return order_[pos_++];
    }

private:
    std::vector<size_t> order_;
    Rng rng_;
    size_t pos_ = 0;
};

Batch build_batch(const std::vector<TrainExample>& data, const std::vector<size_t>& indices) {
    std::vector<IdSequence> src, tgt;
    src.reserve(indices.size());
    tgt.reserve(indices.size());
    for (size_t idx : indices) {
        src.push_back(data[idx].src);
        IdSequence t = data[idx].tgt;
        t.push_back(kEosId);
        tgt.push_back(std::move(t));
    }
    return make_batch(src, tgt);
}

} // namespace

std::string render_metrics(const std::vector<MetricsRow>& rows) {
    std::ostringstream out;
    out.precision(8);
    for (const auto& row : rows) {
        out << row.step << '\t' << row.train_loss << '\t' << row.dev_acc1 << '\t' << row.lr << '\n';
    }
    return out.str();
}

TrainResult train(const Params& init, const std::vector<TrainExample>& data,
                  const TrainConfig& tcfg, const std::vector<DevExample>& dev,
                  const Vocabulary& vocab, const TrainOptions& options) {
    tcfg.validate();
    if (data.empty()) fail(ErrorCode::EmptyCorpus, "no training examples");

    TrainResult result;
    result.best_params = init;
    if (tcfg.total_steps == 0) {
        // no-op run: the initial parameters are the result
        if (!options.outdir.empty()) {
            std::filesystem::create_directories(options.outdir);
            save_checkpoint(options.outdir + "/best.bin", init, options.meta);
            std::ofstream metrics(options.outdir + "/metrics.tsv");
        }
        return result;
    }

    Params params = init;
    AdafactorState<float> state = init_adafactor(params);
    BatchCursor cursor(data.size(), tcfg.seed);
    Rng dropout_rng(derive_seed(tcfg.seed, 0xd20));

    const int32_t dev_max_len =
        tcfg.dev_max_len > 0 ? tcfg.dev_max_len : params.config.max_tgt_len;
    const int n_shards = std::max(1, tcfg.threads);

    double window_loss = 0.0;
    int64_t window_count = 0;
    bool have_best = false;

    if (!options.outdir.empty()) std::filesystem::create_directories(options.outdir);

    for (int64_t step = 1; step <= tcfg.total_steps; ++step) {
        Params accum = zeros_like(params);
        double loss_sum = 0.0;
        int64_t position_sum = 0;
        for (int32_t micro = 0; micro < tcfg.grad_accum; ++micro) {
            std::vector<size_t> indices(tcfg.batch_size);
            for (auto& idx : indices) idx = cursor.next();
            if (n_shards == 1) {
                Batch batch = build_batch(data, indices);
                BackwardResult<float> res =
                    backward(params, batch, params.config.dropout > 0 ? &dropout_rng : nullptr);
                add_scaled(accum, res.grads, static_cast<float>(res.n_positions));
                loss_sum += static_cast<double>(res.loss_value) * res.n_positions;
                position_sum += res.n_positions;
            } else {
                // fixed shard boundaries keep the reduction order independent
                // of scheduling; results depend only on the shard count
                std::vector<BackwardResult<float>> shard_results(n_shards);
                std::vector<std::thread> workers;
                size_t per = (indices.size() + n_shards - 1) / n_shards;
                for (int shard = 0; shard < n_shards; ++shard) {
                    size_t begin = std::min(indices.size(), shard * per);
                    size_t end = std::min(indices.size(), begin + per);
                    if (begin >= end) continue;
                    std::vector<size_t> part(indices.begin() + begin, indices.begin() + end);
                    workers.emplace_back([&, shard, part]() {
                        Batch batch = build_batch(data, part);
                        shard_results[shard] = backward(params, batch, nullptr);
                    });
                }
                for (auto& worker : workers) worker.join();
                for (auto& res : shard_results) {
                    if (res.n_positions == 0) continue;
                    add_scaled(accum, res.grads, static_cast<float>(res.n_positions));
                    loss_sum += static_cast<double>(res.loss_value) * res.n_positions;
                    position_sum += res.n_positions;
                }
            }
        }
        scale_params(accum, 1.0f / static_cast<float>(position_sum));
        double step_loss = loss_sum / static_cast<double>(position_sum);
        if (!std::isfinite(step_loss)) {
            fail(ErrorCode::NonFiniteLoss, "training loss diverged at step " + std::to_string(step));
        }
        double lr = lr_at(step, tcfg);
        adafactor_step(params, accum, state, static_cast<float>(lr),
                       static_cast<float>(tcfg.weight_decay));

        window_loss += step_loss;
        window_count += 1;

        if (step % tcfg.eval_every == 0 || step == tcfg.total_steps) {
            double acc = dev_accuracy(params, dev, vocab, dev_max_len);
            MetricsRow row{step, window_loss / window_count, acc, lr};
            result.log.push_back(row);
            window_loss = 0.0;
            window_count = 0;
            if (options.progress) {
                (*options.progress) << "step " << row.step << " loss " << row.train_loss
                                    << " dev_acc1 " << row.dev_acc1 << " lr " << row.lr
                                    << std::endl;
            }
            // ties go to the later step; with no dev set the last checkpoint wins
            if (!have_best || acc >= result.best_acc) {
                have_best = true;
                result.best_acc = acc;
                result.best_step = step;
                result.best_params = params;
                if (!options.outdir.empty()) {
                    CheckpointMeta meta = options.meta;
                    meta.step = step;
                    save_checkpoint(options.outdir + "/ckpt-" + std::to_string(step) + ".bin",
                                    params, meta);
                }
            }
        }
    }

    if (!options.outdir.empty()) {
        CheckpointMeta meta = options.meta;
        meta.step = result.best_step;
        save_checkpoint(options.outdir + "/best.bin", result.best_params, meta);
        std::ofstream metrics(options.outdir + "/metrics.tsv");
        metrics << render_metrics(result.log);
    }
    return result;
}

} // namespace rxnseq
