#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rxnseq/rng.hpp"
#include "rxnseq/tensor.hpp"
#include "rxnseq/vocab.hpp"

namespace rxnseq {

// Desk-scale encoder-decoder transformer: pre-norm residual blocks with
// RMSNorm gains, learned absolute positional embeddings shared by encoder and
// decoder, and a token embedding tied to the output projection. All shapes
// derive from this config.
struct ModelConfig {
    int32_t vocab_size = 0;
    int32_t d_model = 128;
    int32_t n_heads = 4;
    int32_t d_ff = 512;
    int32_t n_enc_layers = 2;
    int32_t n_dec_layers = 2;
    int32_t max_src_len = 144;
    int32_t max_tgt_len = 144;
    float dropout = 0.0f;

    int32_t max_len() const { return max_src_len > max_tgt_len ? max_src_len : max_tgt_len; }
    int32_t head_dim() const { return d_model / n_heads; }
    void validate() const;
};

template <typename T>
struct AttentionWeights {
    Mat<T> wq, wk, wv, wo; // each d_model x d_model
};

template <typename T>
struct EncoderLayerParams {
    Vec<T> norm_attn, norm_ff;
    AttentionWeights<T> attn;
    Mat<T> ff_in;  // d_model x d_ff
    Mat<T> ff_out; // d_ff x d_model
};

template <typename T>
struct DecoderLayerParams {
    Vec<T> norm_self, norm_cross, norm_ff;
    AttentionWeights<T> self_attn, cross_attn;
    Mat<T> ff_in;
    Mat<T> ff_out;
};

template <typename T>
struct ParamsT {
    ModelConfig config;
    Mat<T> token_embedding; // vocab_size x d_model, tied to the output projection
    Mat<T> positional;      // max_len x d_model, shared encoder/decoder
    std::vector<EncoderLayerParams<T>> encoder;
    std::vector<DecoderLayerParams<T>> decoder;
    // Final norms exist only when the corresponding stack has layers.
    Vec<T> enc_final_norm, dec_final_norm;
};

using Params = ParamsT<float>;
using ParamsD = ParamsT<double>;

template <typename T>
ParamsT<T> init_params(const ModelConfig& config, uint64_t seed);

template <typename T>
ParamsT<T> zeros_like(const ParamsT<T>& params);

template <typename From, typename To>
ParamsT<To> cast_params(const ParamsT<From>& params);

int64_t count_params(const ModelConfig& config);

// Flat view over every parameter tensor, in a fixed traversal order shared by
// the optimizer, checkpoints, and gradient checking. rank 1 tensors get the
// unfactored second-moment path in Adafactor.
template <typename T>
struct TensorRef {
    std::string name;
    T* data;
    int64_t rows;
    int64_t cols;
    int rank;

    int64_t size() const { return rows * cols; }
};

template <typename T>
std::vector<TensorRef<T>> tensor_refs(ParamsT<T>& params);

// ---------------------------------------------------------------------------

// src/tgt ids padded to a rectangle; masks mark real (non-pad) positions.
// tgt_ids are the label side: the decoder input is derived internally by
// shifting right with the pad id as the start token.
struct Batch {
    IntMat src_ids, tgt_ids;
    ByteMat src_mask, tgt_mask;

    int64_t batch_size() const { return src_ids.rows(); }
    int64_t src_len() const { return src_ids.cols(); }
    int64_t tgt_len() const { return tgt_ids.cols(); }
};

Batch make_batch(const std::vector<IdSequence>& src, const std::vector<IdSequence>& tgt_with_eos);

// Logits for every target position, flattened to (B*T) x vocab; row b*T + t
// scores position t of example b. Decoder positions attend causally; pad key
// positions receive zero attention everywhere.
template <typename T>
Mat<T> forward(const ParamsT<T>& params, const Batch& batch);

// Mean token-level negative log-likelihood of tgt_ids over unmasked positions.
template <typename T>
T loss(const Mat<T>& logits, const Batch& batch);

template <typename T>
struct BackwardResult {
    ParamsT<T> grads;
    T loss_value;
    int64_t n_positions; // unmasked target positions contributing to the mean
};

// Exact gradients of loss w.r.t. every parameter tensor. Dropout is applied
// only when params.config.dropout > 0 and a generator is supplied.
template <typename T>
BackwardResult<T> backward(const ParamsT<T>& params, const Batch& batch, Rng* dropout_rng = nullptr);

// ---------------------------------------------------------------------------
// Single-example inference path used by the decoders and attribution.

// Encoder output (post final norm when present) for one source, S x d_model.
template <typename T>
Mat<T> encode_source(const ParamsT<T>& params, const IdSequence& src_ids);

template <typename T>
struct DecodeStep {
    Vec<T> log_probs; // log-softmax over the vocabulary at the next position
    Vec<T> hidden;    // final decoder hidden state at the next position
};

// Runs the decoder over [start] + generated and scores the next token.
template <typename T>
DecodeStep<T> decode_step(const ParamsT<T>& params, const Mat<T>& memory,
                          const IdSequence& generated);

// Teacher-forced per-position log-probabilities: entry t is
// log P(tgt[t] | tgt[<t], memory). tgt may or may not end with eos.
template <typename T>
Vec<T> position_logprobs(const ParamsT<T>& params, const Mat<T>& memory, const IdSequence& tgt);

extern template struct ParamsT<float>;
extern template struct ParamsT<double>;

} // namespace rxnseq
