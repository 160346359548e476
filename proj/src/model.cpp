#include "rxnseq/model.hpp"

#include <cmath>
#include <limits>

#include "rxnseq/error.hpp"

namespace rxnseq {

namespace {

constexpr double kRmsEps = 1e-6;

template <typename T>
T neg_inf() {
    return -std::numeric_limits<T>::infinity();
}

// ---------------------------------------------------------------- rmsnorm

template <typename T>
void rmsnorm_forward(const Mat<T>& x, const Vec<T>& gain, Mat<T>& out, Vec<T>& inv_r) {
    const auto d = x.cols();
    inv_r = ((x.rowwise().squaredNorm() / static_cast<T>(d)).array() + static_cast<T>(kRmsEps))
                .rsqrt();
    out = (x.array().colwise() * inv_r.array()).rowwise() * gain.transpose().array();
}

// Accumulates into d_x and d_gain.
template <typename T>
void rmsnorm_backward(const Mat<T>& x, const Vec<T>& gain, const Vec<T>& inv_r, const Mat<T>& d_out,
                      Mat<T>& d_x, Vec<T>& d_gain) {
    const auto d = x.cols();
    d_gain.array() +=
        ((d_out.array() * x.array()).colwise() * inv_r.array()).colwise().sum().transpose();
    Mat<T> gd = d_out.array().rowwise() * gain.transpose().array();
    Vec<T> dot = (gd.array() * x.array()).rowwise().sum();
    Vec<T> coef = dot.array() * inv_r.array().cube() / static_cast<T>(d);
    d_x.array() += gd.array().colwise() * inv_r.array();
    d_x.array() -= x.array().colwise() * coef.array();
}

// --------------------------------------------------------------- attention

template <typename T>
struct AttnCache {
    Mat<T> q, k, v, ctx;
    std::vector<Mat<T>> probs; // one Lq x Lk matrix per (example, head)
};

// q_in: (B*Lq) x d, kv_in: (B*Lk) x d. key_mask marks attendable key
// positions per example; causal additionally hides keys beyond the query.
template <typename T>
void attention_forward(const AttentionWeights<T>& w, const Mat<T>& q_in, const Mat<T>& kv_in,
                       int64_t batch, const ByteMat& key_mask, bool causal, int32_t n_heads,
                       AttnCache<T>& cache, Mat<T>& out) {
    const int64_t d = q_in.cols();
    const int64_t lq = q_in.rows() / batch;
    const int64_t lk = kv_in.rows() / batch;
    const int64_t dh = d / n_heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    cache.q.noalias() = q_in * w.wq;
    cache.k.noalias() = kv_in * w.wk;
    cache.v.noalias() = kv_in * w.wv;
    cache.ctx.resize(batch * lq, d);
    cache.probs.assign(static_cast<size_t>(batch * n_heads), Mat<T>());

    Mat<T> scores(lq, lk);
    for (int64_t b = 0; b < batch; ++b) {
        for (int32_t h = 0; h < n_heads; ++h) {
            auto qb = cache.q.block(b * lq, h * dh, lq, dh);
            auto kb = cache.k.block(b * lk, h * dh, lk, dh);
            auto vb = cache.v.block(b * lk, h * dh, lk, dh);
            scores.noalias() = qb * kb.transpose();
            scores *= scale;
            for (int64_t kpos = 0; kpos < lk; ++kpos) {
                if (!key_mask(b, kpos)) scores.col(kpos).setConstant(neg_inf<T>());
            }
            if (causal) {
                for (int64_t qpos = 0; qpos < lq; ++qpos) {
                    for (int64_t kpos = qpos + 1; kpos < lk; ++kpos) {
                        scores(qpos, kpos) = neg_inf<T>();
                    }
                }
            }
            // stable row softmax; rows can never be fully masked because every
            // sequence has at least one real position
            for (int64_t qpos = 0; qpos < lq; ++qpos) {
                T row_max = scores.row(qpos).maxCoeff();
                scores.row(qpos) = (scores.row(qpos).array() - row_max).exp();
                T sum = scores.row(qpos).sum();
                scores.row(qpos) /= sum;
            }
            cache.probs[static_cast<size_t>(b * n_heads + h)] = scores;
            cache.ctx.block(b * lq, h * dh, lq, dh).noalias() = scores * vb;
        }
    }
    out.noalias() = cache.ctx * w.wo;
}

// Accumulates into every d_* argument. d_q_in and d_kv_in may alias (self-attention).
template <typename T>
void attention_backward(const AttentionWeights<T>& w, const AttnCache<T>& cache, const Mat<T>& q_in,
                        const Mat<T>& kv_in, int64_t batch, int32_t n_heads, const Mat<T>& d_out,
                        AttentionWeights<T>& d_w, Mat<T>& d_q_in, Mat<T>& d_kv_in) {
    const int64_t d = q_in.cols();
    const int64_t lq = q_in.rows() / batch;
    const int64_t lk = kv_in.rows() / batch;
    const int64_t dh = d / n_heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    d_w.wo.noalias() += cache.ctx.transpose() * d_out;
    Mat<T> d_ctx = d_out * w.wo.transpose();

    Mat<T> d_q(batch * lq, d), d_k(batch * lk, d), d_v(batch * lk, d);
    d_q.setZero();
    d_k.setZero();
    d_v.setZero();

    Mat<T> d_probs(lq, lk), d_scores(lq, lk);
    for (int64_t b = 0; b < batch; ++b) {
        for (int32_t h = 0; h < n_heads; ++h) {
            const Mat<T>& probs = cache.probs[static_cast<size_t>(b * n_heads + h)];
            auto qb = cache.q.block(b * lq, h * dh, lq, dh);
            auto kb = cache.k.block(b * lk, h * dh, lk, dh);
            auto vb = cache.v.block(b * lk, h * dh, lk, dh);
            auto d_ctx_b = d_ctx.block(b * lq, h * dh, lq, dh);

            d_probs.noalias() = d_ctx_b * vb.transpose();
            d_v.block(b * lk, h * dh, lk, dh).noalias() += probs.transpose() * d_ctx_b;

            Vec<T> row_dot = (d_probs.array() * probs.array()).rowwise().sum();
            d_scores = probs.array() * (d_probs.array().colwise() - (-row_dot).array() * T(-1));
            // masked entries have probs == 0, so no gradient leaks through them
            d_q.block(b * lq, h * dh, lq, dh).noalias() += (d_scores * kb) * scale;
            d_k.block(b * lk, h * dh, lk, dh).noalias() += (d_scores.transpose() * qb) * scale;
        }
    }

    d_w.wq.noalias() += q_in.transpose() * d_q;
    d_w.wk.noalias() += kv_in.transpose() * d_k;
    d_w.wv.noalias() += kv_in.transpose() * d_v;
    d_q_in.noalias() += d_q * w.wq.transpose();
    d_kv_in.noalias() += d_k * w.wk.transpose();
    d_kv_in.noalias() += d_v * w.wv.transpose();
}

// ----------------------------------------------------------------- dropout

template <typename T>
void apply_dropout(Mat<T>& x, T p, Rng& rng, ByteMat& mask) {
    mask.resize(x.rows(), x.cols());
    const T scale = static_cast<T>(1) / (static_cast<T>(1) - p);
    for (int64_t i = 0; i < x.rows(); ++i) {
        for (int64_t j = 0; j < x.cols(); ++j) {
            if (rng.bernoulli(static_cast<double>(p))) {
                mask(i, j) = 0;
                x(i, j) = 0;
            } else {
                mask(i, j) = 1;
                x(i, j) *= scale;
            }
        }
    }
}

template <typename T>
void dropout_backward(Mat<T>& d_x, const ByteMat& mask, T p) {
    if (mask.size() == 0) return;
    const T scale = static_cast<T>(1) / (static_cast<T>(1) - p);
    for (int64_t i = 0; i < d_x.rows(); ++i) {
        for (int64_t j = 0; j < d_x.cols(); ++j) {
            d_x(i, j) = mask(i, j) ? d_x(i, j) * scale : T(0);
        }
    }
}

// ------------------------------------------------------------------- trace

template <typename T>
struct EncLayerTrace {
    Mat<T> x_in, xn_attn;
    Vec<T> inv_r_attn;
    AttnCache<T> attn;
    ByteMat drop_attn;
    Mat<T> x_mid, xn_ff;
    Vec<T> inv_r_ff;
    Mat<T> ff_pre, ff_act;
    ByteMat drop_ff;
};

template <typename T>
struct DecLayerTrace {
    Mat<T> y_in, yn_self;
    Vec<T> inv_r_self;
    AttnCache<T> self_attn;
    ByteMat drop_self;
    Mat<T> y_mid1, yn_cross;
    Vec<T> inv_r_cross;
    AttnCache<T> cross_attn;
    ByteMat drop_cross;
    Mat<T> y_mid2, yn_ff;
    Vec<T> inv_r_ff;
    Mat<T> ff_pre, ff_act;
    ByteMat drop_ff;
};

template <typename T>
struct Trace {
    IntMat dec_input;
    Mat<T> x0, y0;
    ByteMat drop_x0, drop_y0;
    std::vector<EncLayerTrace<T>> enc;
    std::vector<DecLayerTrace<T>> dec;
    Mat<T> enc_stream_final;
    Vec<T> inv_r_enc_final;
    Mat<T> memory;
    Mat<T> dec_stream_final;
    Vec<T> inv_r_dec_final;
    Mat<T> dec_out;
};

void validate_batch(const ModelConfig& config, const Batch& batch) {
    const int64_t b = batch.batch_size();
    if (batch.src_mask.rows() != b || batch.tgt_ids.rows() != b || batch.tgt_mask.rows() != b ||
        batch.src_mask.cols() != batch.src_ids.cols() ||
        batch.tgt_mask.cols() != batch.tgt_ids.cols()) {
        fail(ErrorCode::ShapeMismatch, "batch id/mask shapes disagree");
    }
    if (batch.src_len() > config.max_src_len || batch.tgt_len() > config.max_tgt_len) {
        fail(ErrorCode::ShapeMismatch, "sequence length exceeds configured maximum");
    }
    if (batch.src_len() == 0 || batch.tgt_len() == 0 || b == 0) {
        fail(ErrorCode::ShapeMismatch, "empty batch");
    }
    auto check_ids = [&](const IntMat& ids) {
        for (int64_t i = 0; i < ids.rows(); ++i) {
            for (int64_t j = 0; j < ids.cols(); ++j) {
                if (ids(i, j) < 0 || ids(i, j) >= config.vocab_size) {
                    fail(ErrorCode::IdOutOfRange, "token id " + std::to_string(ids(i, j)));
                }
            }
        }
    };
    check_ids(batch.src_ids);
    check_ids(batch.tgt_ids);
}

template <typename T>
void gather_embeddings(const ParamsT<T>& params, const IntMat& ids, Mat<T>& out) {
    const int64_t b = ids.rows(), l = ids.cols(), d = params.config.d_model;
    out.resize(b * l, d);
    for (int64_t i = 0; i < b; ++i) {
        for (int64_t t = 0; t < l; ++t) {
            out.row(i * l + t) =
                params.token_embedding.row(ids(i, t)) + params.positional.row(t);
        }
    }
}

// Shared by the encoder and decoder stacks.
template <typename T>
void ffn_forward(const Mat<T>& ff_in_w, const Mat<T>& ff_out_w, const Mat<T>& xn, Mat<T>& pre,
                 Mat<T>& act, Mat<T>& out) {
    pre.noalias() = xn * ff_in_w;
    act = pre.cwiseMax(T(0));
    out.noalias() = act * ff_out_w;
}

template <typename T>
Trace<T> run_forward(const ParamsT<T>& params, const Batch& batch, Rng* dropout_rng) {
    const ModelConfig& cfg = params.config;
    validate_batch(cfg, batch);
    const int64_t b = batch.batch_size();
    const int64_t s = batch.src_len(), t = batch.tgt_len();
    const T p_drop = static_cast<T>(cfg.dropout);
    const bool training = p_drop > T(0) && dropout_rng != nullptr;

    Trace<T> tr;
    tr.enc.resize(cfg.n_enc_layers);
    tr.dec.resize(cfg.n_dec_layers);

    // ---- encoder
    gather_embeddings(params, batch.src_ids, tr.x0);
    if (training) apply_dropout(tr.x0, p_drop, *dropout_rng, tr.drop_x0);
    Mat<T> x = tr.x0;
    Mat<T> sub_out;
    for (int32_t l = 0; l < cfg.n_enc_layers; ++l) {
        auto& lt = tr.enc[l];
        const auto& lp = params.encoder[l];
        lt.x_in = x;
        rmsnorm_forward(x, lp.norm_attn, lt.xn_attn, lt.inv_r_attn);
        attention_forward(lp.attn, lt.xn_attn, lt.xn_attn, b, batch.src_mask, false, cfg.n_heads,
                          lt.attn, sub_out);
        if (training) apply_dropout(sub_out, p_drop, *dropout_rng, lt.drop_attn);
        x += sub_out;
        lt.x_mid = x;
        rmsnorm_forward(x, lp.norm_ff, lt.xn_ff, lt.inv_r_ff);
        ffn_forward(lp.ff_in, lp.ff_out, lt.xn_ff, lt.ff_pre, lt.ff_act, sub_out);
        if (training) apply_dropout(sub_out, p_drop, *dropout_rng, lt.drop_ff);
        x += sub_out;
    }
    tr.enc_stream_final = x;
    if (cfg.n_enc_layers > 0) {
        rmsnorm_forward(x, params.enc_final_norm, tr.memory, tr.inv_r_enc_final);
    } else {
        tr.memory = x;
    }

    // ---- decoder input: shift right, pad id as the start token
    tr.dec_input.resize(b, t);
    for (int64_t i = 0; i < b; ++i) {
        tr.dec_input(i, 0) = kPadId;
        for (int64_t j = 1; j < t; ++j) tr.dec_input(i, j) = batch.tgt_ids(i, j - 1);
    }

    gather_embeddings(params, tr.dec_input, tr.y0);
    if (training) apply_dropout(tr.y0, p_drop, *dropout_rng, tr.drop_y0);
    Mat<T> y = tr.y0;
    for (int32_t l = 0; l < cfg.n_dec_layers; ++l) {
        auto& lt = tr.dec[l];
        const auto& lp = params.decoder[l];
        lt.y_in = y;
        rmsnorm_forward(y, lp.norm_self, lt.yn_self, lt.inv_r_self);
        attention_forward(lp.self_attn, lt.yn_self, lt.yn_self, b, batch.tgt_mask, true,
                          cfg.n_heads, lt.self_attn, sub_out);
        if (training) apply_dropout(sub_out, p_drop, *dropout_rng, lt.drop_self);
        y += sub_out;
        lt.y_mid1 = y;
        rmsnorm_forward(y, lp.norm_cross, lt.yn_cross, lt.inv_r_cross);
        attention_forward(lp.cross_attn, lt.yn_cross, tr.memory, b, batch.src_mask, false,
                          cfg.n_heads, lt.cross_attn, sub_out);
        if (training) apply_dropout(sub_out, p_drop, *dropout_rng, lt.drop_cross);
        y += sub_out;
        lt.y_mid2 = y;
        rmsnorm_forward(y, lp.norm_ff, lt.yn_ff, lt.inv_r_ff);
        ffn_forward(lp.ff_in, lp.ff_out, lt.yn_ff, lt.ff_pre, lt.ff_act, sub_out);
        if (training) apply_dropout(sub_out, p_drop, *dropout_rng, lt.drop_ff);
        y += sub_out;
    }
    tr.dec_stream_final = y;
    if (cfg.n_dec_layers > 0) {
        rmsnorm_forward(y, params.dec_final_norm, tr.dec_out, tr.inv_r_dec_final);
    } else {
        tr.dec_out = y;
    }
    return tr;
}

} // namespace

void ModelConfig::validate() const {
    if (vocab_size < 4) fail(ErrorCode::BadConfig, "vocab_size must be at least 4");
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
        fail(ErrorCode::BadConfig, "d_model must be a positive multiple of n_heads");
    }
    if (d_ff <= 0) fail(ErrorCode::BadConfig, "d_ff must be positive");
    if (n_enc_layers < 0 || n_dec_layers < 0) fail(ErrorCode::BadConfig, "negative layer count");
    if (max_src_len < 1 || max_tgt_len < 1) fail(ErrorCode::BadConfig, "max lengths must be >= 1");
    if (dropout < 0.0f || dropout >= 1.0f) fail(ErrorCode::BadConfig, "dropout must be in [0, 1)");
}

Batch make_batch(const std::vector<IdSequence>& src, const std::vector<IdSequence>& tgt_with_eos) {
    if (src.size() != tgt_with_eos.size() || src.empty()) {
        fail(ErrorCode::ShapeMismatch, "source/target example counts disagree");
    }
    int64_t b = static_cast<int64_t>(src.size());
    int64_t s = 0, t = 0;
    for (const auto& ids : src) s = std::max<int64_t>(s, ids.size());
    for (const auto& ids : tgt_with_eos) t = std::max<int64_t>(t, ids.size());
    if (s == 0 || t == 0) fail(ErrorCode::ShapeMismatch, "empty sequence in batch");
    Batch batch;
    batch.src_ids.setConstant(b, s, kPadId);
    batch.tgt_ids.setConstant(b, t, kPadId);
    batch.src_mask.setZero(b, s);
    batch.tgt_mask.setZero(b, t);
    for (int64_t i = 0; i < b; ++i) {
        for (size_t j = 0; j < src[i].size(); ++j) {
            batch.src_ids(i, j) = src[i][j];
            batch.src_mask(i, j) = 1;
        }
        for (size_t j = 0; j < tgt_with_eos[i].size(); ++j) {
            batch.tgt_ids(i, j) = tgt_with_eos[i][j];
            batch.tgt_mask(i, j) = 1;
        }
    }
    return batch;
}

template <typename T>
Mat<T> forward(const ParamsT<T>& params, const Batch& batch) {
    Trace<T> tr = run_forward(params, batch, nullptr);
    Mat<T> logits;
    logits.noalias() = tr.dec_out * params.token_embedding.transpose();
    return logits;
}

template <typename T>
T loss(const Mat<T>& logits, const Batch& batch) {
    const int64_t b = batch.batch_size(), t = batch.tgt_len();
    if (logits.rows() != b * t) fail(ErrorCode::ShapeMismatch, "logit rows != batch positions");
    T total = 0;
    int64_t n = 0;
    for (int64_t i = 0; i < b; ++i) {
        for (int64_t j = 0; j < t; ++j) {
            if (!batch.tgt_mask(i, j)) continue;
            auto row = logits.row(i * t + j);
            T row_max = row.maxCoeff();
            T lse = row_max + std::log((row.array() - row_max).exp().sum());
            total += lse - row(batch.tgt_ids(i, j));
            ++n;
        }
    }
    if (n == 0) fail(ErrorCode::AllPositionsMasked, "no unmasked target positions");
    return total / static_cast<T>(n);
}

template <typename T>
BackwardResult<T> backward(const ParamsT<T>& params, const Batch& batch, Rng* dropout_rng) {
    const ModelConfig& cfg = params.config;
    const int64_t b = batch.batch_size();
    const int64_t s = batch.src_len(), t = batch.tgt_len();
    const T p_drop = static_cast<T>(cfg.dropout);

    Trace<T> tr = run_forward(params, batch, dropout_rng);
    Mat<T> logits;
    logits.noalias() = tr.dec_out * params.token_embedding.transpose();

    // fused softmax cross-entropy: d_logits = (softmax - onehot) / n
    int64_t n = 0;
    for (int64_t i = 0; i < b; ++i) {
        for (int64_t j = 0; j < t; ++j) n += batch.tgt_mask(i, j) ? 1 : 0;
    }
    if (n == 0) fail(ErrorCode::AllPositionsMasked, "no unmasked target positions");
    const T inv_n = static_cast<T>(1) / static_cast<T>(n);

    T total_loss = 0;
    Mat<T>& d_logits = logits; // rewrite rows in place
    for (int64_t i = 0; i < b; ++i) {
        for (int64_t j = 0; j < t; ++j) {
            auto row = d_logits.row(i * t + j);
            if (!batch.tgt_mask(i, j)) {
                row.setZero();
                continue;
            }
            const int32_t gold = batch.tgt_ids(i, j);
            T row_max = row.maxCoeff();
            Vec<T> ex = (row.array() - row_max).exp();
            T sum = ex.sum();
            total_loss += row_max + std::log(sum) - row(gold);
            row = (ex.transpose() / sum) * inv_n;
            row(gold) -= inv_n;
        }
    }

    BackwardResult<T> result;
    result.loss_value = total_loss * inv_n;
    result.n_positions = n;
    result.grads = zeros_like(params);
    ParamsT<T>& g = result.grads;

    // ---- output projection (tied embedding)
    g.token_embedding.noalias() += d_logits.transpose() * tr.dec_out;
    Mat<T> d_dec_out;
    d_dec_out.noalias() = d_logits * params.token_embedding;

    Mat<T> d_y(b * t, cfg.d_model);
    d_y.setZero();
    if (cfg.n_dec_layers > 0) {
        rmsnorm_backward(tr.dec_stream_final, params.dec_final_norm, tr.inv_r_dec_final, d_dec_out,
                         d_y, g.dec_final_norm);
    } else {
        d_y = d_dec_out;
    }

    Mat<T> d_memory(b * s, cfg.d_model);
    d_memory.setZero();
    Mat<T> d_sub, d_act, d_pre, d_norm_in;
    for (int32_t l = cfg.n_dec_layers - 1; l >= 0; --l) {
        auto& lt = tr.dec[l];
        const auto& lp = params.decoder[l];
        auto& lg = g.decoder[l];
        // ffn
        d_sub = d_y;
        dropout_backward(d_sub, lt.drop_ff, p_drop);
        lg.ff_out.noalias() += lt.ff_act.transpose() * d_sub;
        d_act.noalias() = d_sub * lp.ff_out.transpose();
        d_pre = (lt.ff_pre.array() > T(0)).select(d_act, T(0));
        lg.ff_in.noalias() += lt.yn_ff.transpose() * d_pre;
        d_norm_in.noalias() = d_pre * lp.ff_in.transpose();
        rmsnorm_backward(lt.y_mid2, lp.norm_ff, lt.inv_r_ff, d_norm_in, d_y, lg.norm_ff);
        // cross attention
        d_sub = d_y;
        dropout_backward(d_sub, lt.drop_cross, p_drop);
        d_norm_in.setZero(b * t, cfg.d_model);
        attention_backward(lp.cross_attn, lt.cross_attn, lt.yn_cross, tr.memory, b, cfg.n_heads,
                           d_sub, lg.cross_attn, d_norm_in, d_memory);
        rmsnorm_backward(lt.y_mid1, lp.norm_cross, lt.inv_r_cross, d_norm_in, d_y, lg.norm_cross);
        // self attention
        d_sub = d_y;
        dropout_backward(d_sub, lt.drop_self, p_drop);
        d_norm_in.setZero(b * t, cfg.d_model);
        attention_backward(lp.self_attn, lt.self_attn, lt.yn_self, lt.yn_self, b, cfg.n_heads,
                           d_sub, lg.self_attn, d_norm_in, d_norm_in);
        rmsnorm_backward(lt.y_in, lp.norm_self, lt.inv_r_self, d_norm_in, d_y, lg.norm_self);
    }
    dropout_backward(d_y, tr.drop_y0, p_drop);
    for (int64_t i = 0; i < b; ++i) {
        for (int64_t j = 0; j < t; ++j) {
            g.token_embedding.row(tr.dec_input(i, j)) += d_y.row(i * t + j);
            g.positional.row(j) += d_y.row(i * t + j);
        }
    }

    // ---- encoder, fed by the accumulated memory gradient
    Mat<T> d_x(b * s, cfg.d_model);
    d_x.setZero();
    if (cfg.n_enc_layers > 0) {
        rmsnorm_backward(tr.enc_stream_final, params.enc_final_norm, tr.inv_r_enc_final, d_memory,
                         d_x, g.enc_final_norm);
    } else {
        d_x = d_memory;
    }
    for (int32_t l = cfg.n_enc_layers - 1; l >= 0; --l) {
        auto& lt = tr.enc[l];
        const auto& lp = params.encoder[l];
        auto& lg = g.encoder[l];
        d_sub = d_x;
        dropout_backward(d_sub, lt.drop_ff, p_drop);
        lg.ff_out.noalias() += lt.ff_act.transpose() * d_sub;
        d_act.noalias() = d_sub * lp.ff_out.transpose();
        d_pre = (lt.ff_pre.array() > T(0)).select(d_act, T(0));
        lg.ff_in.noalias() += lt.xn_ff.transpose() * d_pre;
        d_norm_in.noalias() = d_pre * lp.ff_in.transpose();
        rmsnorm_backward(lt.x_mid, lp.norm_ff, lt.inv_r_ff, d_norm_in, d_x, lg.norm_ff);

        d_sub = d_x;
        dropout_backward(d_sub, lt.drop_attn, p_drop);
        d_norm_in.setZero(b * s, cfg.d_model);
        attention_backward(lp.attn, lt.attn, lt.xn_attn, lt.xn_attn, b, cfg.n_heads, d_sub,
                           lg.attn, d_norm_in, d_norm_in);
        rmsnorm_backward(lt.x_in, lp.norm_attn, lt.inv_r_attn, d_norm_in, d_x, lg.norm_attn);
    }
    dropout_backward(d_x, tr.drop_x0, p_drop);
    for (int64_t i = 0; i < b; ++i) {
        for (int64_t j = 0; j < s; ++j) {
            g.token_embedding.row(batch.src_ids(i, j)) += d_x.row(i * s + j);
            g.positional.row(j) += d_x.row(i * s + j);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// single-example inference

namespace {

template <typename T>
Mat<T> attn_single(const AttentionWeights<T>& w, const Mat<T>& q_in, const Mat<T>& kv_in,
                   int32_t n_heads, bool causal) {
    const int64_t d = q_in.cols();
    const int64_t lq = q_in.rows(), lk = kv_in.rows();
    const int64_t dh = d / n_heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    Mat<T> q = q_in * w.wq, k = kv_in * w.wk, v = kv_in * w.wv;
    Mat<T> ctx(lq, d);
    Mat<T> scores(lq, lk);
    for (int32_t h = 0; h < n_heads; ++h) {
        scores.noalias() = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
        scores *= scale;
        if (causal) {
            for (int64_t qpos = 0; qpos < lq; ++qpos) {
                for (int64_t kpos = qpos + 1; kpos < lk; ++kpos) {
                    scores(qpos, kpos) = neg_inf<T>();
                }
            }
        }
        for (int64_t qpos = 0; qpos < lq; ++qpos) {
            T row_max = scores.row(qpos).maxCoeff();
            scores.row(qpos) = (scores.row(qpos).array() - row_max).exp();
            scores.row(qpos) /= scores.row(qpos).sum();
        }
        ctx.middleCols(h * dh, dh).noalias() = scores * v.middleCols(h * dh, dh);
    }
    return ctx * w.wo;
}

template <typename T>
void check_single_ids(const ModelConfig& cfg, const IdSequence& ids, int64_t limit,
                      const char* what) {
    if (static_cast<int64_t>(ids.size()) > limit) {
        fail(ErrorCode::ShapeMismatch, std::string(what) + " length " +
                                           std::to_string(ids.size()) + " exceeds limit " +
                                           std::to_string(limit));
    }
    for (int32_t id : ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            fail(ErrorCode::IdOutOfRange, "token id " + std::to_string(id));
        }
    }
}

template <typename T>
Mat<T> embed_single(const ParamsT<T>& params, const IdSequence& ids) {
    Mat<T> x(ids.size(), params.config.d_model);
    for (size_t i = 0; i < ids.size(); ++i) {
        x.row(i) = params.token_embedding.row(ids[i]) +
                   params.positional.row(static_cast<int64_t>(i));
    }
    return x;
}

// Decoder stack over a full input prefix; returns post-final-norm hidden rows.
template <typename T>
Mat<T> decoder_hidden(const ParamsT<T>& params, const Mat<T>& memory, const IdSequence& dec_input) {
    const ModelConfig& cfg = params.config;
    check_single_ids<T>(cfg, dec_input, cfg.max_tgt_len, "decoder prefix");
    Mat<T> y = embed_single(params, dec_input);
    Mat<T> xn;
    Vec<T> inv_r;
    for (const auto& lp : params.decoder) {
        rmsnorm_forward(y, lp.norm_self, xn, inv_r);
        y += attn_single(lp.self_attn, xn, xn, cfg.n_heads, true);
        rmsnorm_forward(y, lp.norm_cross, xn, inv_r);
        y += attn_single(lp.cross_attn, xn, memory, cfg.n_heads, false);
        rmsnorm_forward(y, lp.norm_ff, xn, inv_r);
        Mat<T> act = (xn * lp.ff_in).cwiseMax(T(0));
        y.noalias() += act * lp.ff_out;
    }
    if (cfg.n_dec_layers > 0) {
        Mat<T> out;
        rmsnorm_forward(y, params.dec_final_norm, out, inv_r);
        return out;
    }
    return y;
}

template <typename T>
Vec<T> log_softmax_vec(const Vec<T>& logits) {
    T vmax = logits.maxCoeff();
    T lse = vmax + std::log((logits.array() - vmax).exp().sum());
    return logits.array() - lse;
}

} // namespace

template <typename T>
Mat<T> encode_source(const ParamsT<T>& params, const IdSequence& src_ids) {
    const ModelConfig& cfg = params.config;
    if (src_ids.empty()) fail(ErrorCode::ShapeMismatch, "empty source");
    check_single_ids<T>(cfg, src_ids, cfg.max_src_len, "source");
    Mat<T> x = embed_single(params, src_ids);
    Mat<T> xn;
    Vec<T> inv_r;
    for (const auto& lp : params.encoder) {
        rmsnorm_forward(x, lp.norm_attn, xn, inv_r);
        x += attn_single(lp.attn, xn, xn, cfg.n_heads, false);
        rmsnorm_forward(x, lp.norm_ff, xn, inv_r);
        Mat<T> act = (xn * lp.ff_in).cwiseMax(T(0));
        x.noalias() += act * lp.ff_out;
    }
    if (cfg.n_enc_layers > 0) {
        Mat<T> out;
        rmsnorm_forward(x, params.enc_final_norm, out, inv_r);
        return out;
    }
    return x;
}

template <typename T>
DecodeStep<T> decode_step(const ParamsT<T>& params, const Mat<T>& memory,
                          const IdSequence& generated) {
    IdSequence dec_input;
    dec_input.reserve(generated.size() + 1);
    dec_input.push_back(kPadId);
    dec_input.insert(dec_input.end(), generated.begin(), generated.end());
    Mat<T> hidden = decoder_hidden(params, memory, dec_input);
    DecodeStep<T> step;
    step.hidden = hidden.row(hidden.rows() - 1).transpose();
    Vec<T> logits = params.token_embedding * step.hidden;
    step.log_probs = log_softmax_vec(logits);
    return step;
}

template <typename T>
Vec<T> position_logprobs(const ParamsT<T>& params, const Mat<T>& memory, const IdSequence& tgt) {
    if (tgt.empty()) fail(ErrorCode::ShapeMismatch, "empty target");
    IdSequence dec_input;
    dec_input.reserve(tgt.size());
    dec_input.push_back(kPadId);
    dec_input.insert(dec_input.end(), tgt.begin(), tgt.end() - 1);
    Mat<T> hidden = decoder_hidden(params, memory, dec_input);
    Vec<T> out(tgt.size());
    for (size_t i = 0; i < tgt.size(); ++i) {
        Vec<T> logits = params.token_embedding * hidden.row(i).transpose();
        out(i) = log_softmax_vec(logits)(tgt[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// parameter plumbing

template <typename T>
ParamsT<T> init_params(const ModelConfig& config, uint64_t seed) {
    config.validate();
    ParamsT<T> p;
    p.config = config;
    Rng rng(seed);
    auto randn = [&](int64_t rows, int64_t cols) {
        Mat<T> m(rows, cols);
        for (int64_t i = 0; i < rows; ++i) {
            for (int64_t j = 0; j < cols; ++j) {
                m(i, j) = static_cast<T>(rng.next_gaussian() * 0.02);
            }
        }
        return m;
    };
    const int64_t d = config.d_model, f = config.d_ff;
    p.token_embedding = randn(config.vocab_size, d);
    p.positional = randn(config.max_len(), d);
    p.encoder.resize(config.n_enc_layers);
    for (auto& layer : p.encoder) {
        layer.norm_attn = Vec<T>::Ones(d);
        layer.norm_ff = Vec<T>::Ones(d);
        layer.attn = {randn(d, d), randn(d, d), randn(d, d), randn(d, d)};
        layer.ff_in = randn(d, f);
        layer.ff_out = randn(f, d);
    }
    p.decoder.resize(config.n_dec_layers);
    for (auto& layer : p.decoder) {
        layer.norm_self = Vec<T>::Ones(d);
        layer.norm_cross = Vec<T>::Ones(d);
        layer.norm_ff = Vec<T>::Ones(d);
        layer.self_attn = {randn(d, d), randn(d, d), randn(d, d), randn(d, d)};
        layer.cross_attn = {randn(d, d), randn(d, d), randn(d, d), randn(d, d)};
        layer.ff_in = randn(d, f);
        layer.ff_out = randn(f, d);
    }
    if (config.n_enc_layers > 0) p.enc_final_norm = Vec<T>::Ones(d);
    if (config.n_dec_layers > 0) p.dec_final_norm = Vec<T>::Ones(d);
    return p;
}

template <typename T>
ParamsT<T> zeros_like(const ParamsT<T>& params) {
    ParamsT<T> z;
    z.config = params.config;
    auto zero_mat = [](const Mat<T>& m) { return Mat<T>::Zero(m.rows(), m.cols()).eval(); };
    auto zero_vec = [](const Vec<T>& v) { return Vec<T>::Zero(v.size()).eval(); };
    z.token_embedding = zero_mat(params.token_embedding);
    z.positional = zero_mat(params.positional);
    z.encoder.resize(params.encoder.size());
    for (size_t l = 0; l < params.encoder.size(); ++l) {
        const auto& src = params.encoder[l];
        auto& dst = z.encoder[l];
        dst.norm_attn = zero_vec(src.norm_attn);
        dst.norm_ff = zero_vec(src.norm_ff);
        dst.attn = {zero_mat(src.attn.wq), zero_mat(src.attn.wk), zero_mat(src.attn.wv),
                    zero_mat(src.attn.wo)};
        dst.ff_in = zero_mat(src.ff_in);
        dst.ff_out = zero_mat(src.ff_out);
    }
    z.decoder.resize(params.decoder.size());
    for (size_t l = 0; l < params.decoder.size(); ++l) {
        const auto& src = params.decoder[l];
        auto& dst = z.decoder[l];
        dst.norm_self = zero_vec(src.norm_self);
        dst.norm_cross = zero_vec(src.norm_cross);
        dst.norm_ff = zero_vec(src.norm_ff);
        dst.self_attn = {zero_mat(src.self_attn.wq), zero_mat(src.self_attn.wk),
                         zero_mat(src.self_attn.wv), zero_mat(src.self_attn.wo)};
        dst.cross_attn = {zero_mat(src.cross_attn.wq), zero_mat(src.cross_attn.wk),
                          zero_mat(src.cross_attn.wv), zero_mat(src.cross_attn.wo)};
        dst.ff_in = zero_mat(src.ff_in);
        dst.ff_out = zero_mat(src.ff_out);
    }
    z.enc_final_norm = zero_vec(params.enc_final_norm);
    z.dec_final_norm = zero_vec(params.dec_final_norm);
    return z;
}

template <typename From, typename To>
ParamsT<To> cast_params(const ParamsT<From>& params) {
    ParamsT<To> out;
    out.config = params.config;
    auto cast_mat = [](const Mat<From>& m) { return m.template cast<To>().eval(); };
    auto cast_vec = [](const Vec<From>& v) { return v.template cast<To>().eval(); };
    out.token_embedding = cast_mat(params.token_embedding);
    out.positional = cast_mat(params.positional);
    out.encoder.resize(params.encoder.size());
    for (size_t l = 0; l < params.encoder.size(); ++l) {
        const auto& src = params.encoder[l];
        auto& dst = out.encoder[l];
        dst.norm_attn = cast_vec(src.norm_attn);
        dst.norm_ff = cast_vec(src.norm_ff);
        dst.attn = {cast_mat(src.attn.wq), cast_mat(src.attn.wk), cast_mat(src.attn.wv),
                    cast_mat(src.attn.wo)};
        dst.ff_in = cast_mat(src.ff_in);
        dst.ff_out = cast_mat(src.ff_out);
    }
    out.decoder.resize(params.decoder.size());
    for (size_t l = 0; l < params.decoder.size(); ++l) {
        const auto& src = params.decoder[l];
        auto& dst = out.decoder[l];
        dst.norm_self = cast_vec(src.norm_self);
        dst.norm_cross = cast_vec(src.norm_cross);
        dst.norm_ff = cast_vec(src.norm_ff);
        dst.self_attn = {cast_mat(src.self_attn.wq), cast_mat(src.self_attn.wk),
                         cast_mat(src.self_attn.wv), cast_mat(src.self_attn.wo)};
        dst.cross_attn = {cast_mat(src.cross_attn.wq), cast_mat(src.cross_attn.wk),
                          cast_mat(src.cross_attn.wv), cast_mat(src.cross_attn.wo)};
        dst.ff_in = cast_mat(src.ff_in);
        dst.ff_out = cast_mat(src.ff_out);
    }
    out.enc_final_norm = cast_vec(params.enc_final_norm);
    out.dec_final_norm = cast_vec(params.dec_final_norm);
    return out;
}

int64_t count_params(const ModelConfig& config) {
    const int64_t d = config.d_model, f = config.d_ff;
    int64_t total = static_cast<int64_t>(config.vocab_size) * d; // token embedding
    total += static_cast<int64_t>(config.max_len()) * d;         // positional
    total += config.n_enc_layers * (2 * d + 4 * d * d + 2 * d * f);
    total += config.n_dec_layers * (3 * d + 8 * d * d + 2 * d * f);
    if (config.n_enc_layers > 0) total += d;
    if (config.n_dec_layers > 0) total += d;
    return total;
}

template <typename T>
std::vector<TensorRef<T>> tensor_refs(ParamsT<T>& params) {
    std::vector<TensorRef<T>> refs;
    auto add_mat = [&](const std::string& name, Mat<T>& m) {
        refs.push_back({name, m.data(), m.rows(), m.cols(), 2});
    };
    auto add_vec = [&](const std::string& name, Vec<T>& v) {
        if (v.size() > 0) refs.push_back({name, v.data(), v.size(), 1, 1});
    };
    add_mat("token_embedding", params.token_embedding);
    add_mat("positional", params.positional);
    for (size_t l = 0; l < params.encoder.size(); ++l) {
        auto& layer = params.encoder[l];
        std::string prefix = "enc." + std::to_string(l) + ".";
        add_vec(prefix + "norm_attn", layer.norm_attn);
        add_mat(prefix + "attn.wq", layer.attn.wq);
        add_mat(prefix + "attn.wk", layer.attn.wk);
        add_mat(prefix + "attn.wv", layer.attn.wv);
        add_mat(prefix + "attn.wo", layer.attn.wo);
        add_vec(prefix + "norm_ff", layer.norm_ff);
        add_mat(prefix + "ff_in", layer.ff_in);
        add_mat(prefix + "ff_out", layer.ff_out);
    }
    for (size_t l = 0; l < params.decoder.size(); ++l) {
        auto& layer = params.decoder[l];
        std::string prefix = "dec." + std::to_string(l) + ".";
        add_vec(prefix + "norm_self", layer.norm_self);
        add_mat(prefix + "self.wq", layer.self_attn.wq);
        add_mat(prefix + "self.wk", layer.self_attn.wk);
        add_mat(prefix + "self.wv", layer.self_attn.wv);
        add_mat(prefix + "self.wo", layer.self_attn.wo);
        add_vec(prefix + "norm_cross", layer.norm_cross);
        add_mat(prefix + "cross.wq", layer.cross_attn.wq);
        add_mat(prefix + "cross.wk", layer.cross_attn.wk);
        add_mat(prefix + "cross.wv", layer.cross_attn.wv);
        add_mat(prefix + "cross.wo", layer.cross_attn.wo);
        add_vec(prefix + "norm_ff", layer.norm_ff);
        add_mat(prefix + "ff_in", layer.ff_in);
        add_mat(prefix + "ff_out", layer.ff_out);
    }
    add_vec("enc_final_norm", params.enc_final_norm);
    add_vec("dec_final_norm", params.dec_final_norm);
    return refs;
}

template struct ParamsT<float>;
template struct ParamsT<double>;

template ParamsT<float> init_params<float>(const ModelConfig&, uint64_t);
template ParamsT<double> init_params<double>(const ModelConfig&, uint64_t);
template ParamsT<float> zeros_like<float>(const ParamsT<float>&);
template ParamsT<double> zeros_like<double>(const ParamsT<double>&);
template ParamsT<double> cast_params<float, double>(const ParamsT<float>&);
template ParamsT<float> cast_params<double, float>(const ParamsT<double>&);
template std::vector<TensorRef<float>> tensor_refs<float>(ParamsT<float>&);
template std::vector<TensorRef<double>> tensor_refs<double>(ParamsT<double>&);
template Mat<float> forward<float>(const ParamsT<float>&, const Batch&);
template Mat<double> forward<double>(const ParamsT<double>&, const Batch&);
template float loss<float>(const Mat<float>&, const Batch&);
template double loss<double>(const Mat<double>&, const Batch&);
template BackwardResult<float> backward<float>(const ParamsT<float>&, const Batch&, Rng*);
template BackwardResult<double> backward<double>(const ParamsT<double>&, const Batch&, Rng*);
template Mat<float> encode_source<float>(const ParamsT<float>&, const IdSequence&);
template Mat<double> encode_source<double>(const ParamsT<double>&, const IdSequence&);
template DecodeStep<float> decode_step<float>(const ParamsT<float>&, const Mat<float>&,
                                              const IdSequence&);
template DecodeStep<double> decode_step<double>(const ParamsT<double>&, const Mat<double>&,
                                                const IdSequence&);
template Vec<float> position_logprobs<float>(const ParamsT<float>&, const Mat<float>&,
                                             const IdSequence&);
template Vec<double> position_logprobs<double>(const ParamsT<double>&, const Mat<double>&,
                                               const IdSequence&);

} // namespace rxnseq
