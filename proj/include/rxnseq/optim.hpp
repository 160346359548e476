#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rxnseq/checkpoint.hpp"
#include "rxnseq/model.hpp"
#include "rxnseq/vocab.hpp"

namespace rxnseq {

enum class LrSchedule { WarmupConstant, InverseSqrt };

struct TrainConfig {
    double lr = 0.003;
    int32_t batch_size = 64;
    double weight_decay = 0.01;
    int64_t warmup_steps = 5000;
    int64_t total_steps = 0;
    LrSchedule schedule = LrSchedule::WarmupConstant;
    uint64_t seed = 42;
    int32_t grad_accum = 1;    // micro-batch x accumulation = effective batch
    int64_t eval_every = 500;
    int32_t threads = 1;
    int32_t dev_max_len = 0;   // 0: decode dev up to the model's max target length

    void validate() const;
};

// lr_at is continuous at step == warmup_steps for both schedules.
double lr_at(int64_t step, const TrainConfig& cfg);

// Adafactor: factored second moments (one row vector + one column vector) for
// rank-2 tensors, a full vector for rank-1 tensors. Fixed external learning
// rate, beta2hat(t) = 1 - t^-0.8, eps1 = 1e-30, update clipped to unit RMS,
// decoupled weight decay.
template <typename T>
struct AdafactorState {
    struct TensorState {
        Vec<T> row;  // length rows, factored path
        Vec<T> col;  // length cols, factored path
        Vec<T> full; // rank-1 path
    };
    std::vector<TensorState> tensors;
    int64_t step = 0;
};

template <typename T>
AdafactorState<T> init_adafactor(ParamsT<T>& params);

// Single-tensor update (step already incremented); adafactor_step applies it
// to every parameter tensor in tensor_refs order.
template <typename T>
void adafactor_update(T* param, const T* grad, int64_t rows, int64_t cols, int rank,
                      typename AdafactorState<T>::TensorState& state, int64_t step, T lr,
                      T weight_decay);

template <typename T>
void adafactor_step(ParamsT<T>& params, ParamsT<T>& grads, AdafactorState<T>& state, T lr,
                    T weight_decay);

// ---------------------------------------------------------------------------

struct TrainExample {
    IdSequence src; // encoded input, no eos
    IdSequence tgt; // encoded target, no eos (appended at batch build)
};

struct DevExample {
    IdSequence src;
    std::string target_text; // whitespace-stripped gold target
};

struct MetricsRow {
    int64_t step = 0;
    double train_loss = 0.0; // mean over the window since the previous row
    double dev_acc1 = 0.0;
    double lr = 0.0;
};

std::string render_metrics(const std::vector<MetricsRow>& rows); // step\tloss\tacc\tlr

struct TrainResult {
    Params best_params;
    std::vector<MetricsRow> log;
    int64_t best_step = 0;
    double best_acc = 0.0;
};

struct TrainOptions {
    std::string outdir;          // empty: keep checkpoints in memory only
    CheckpointMeta meta;         // stamped into written checkpoints
    std::ostream* progress = nullptr;
};

// Runs total_steps Adafactor updates over seeded, reshuffled batches and
// selects the checkpoint with the best dev greedy Acc@1 (ties go to the later
// step). With no dev examples the final checkpoint wins.
TrainResult train(const Params& init, const std::vector<TrainExample>& data,
                  const TrainConfig& tcfg, const std::vector<DevExample>& dev,
                  const Vocabulary& vocab, const TrainOptions& options = {});

} // namespace rxnseq
