#pragma once

// Class-token cross-attention over frames and the InfoNCE video-text loss.

#include <cmath>
#include <string>
#include <vector>

#include "star/numkernel.hpp"

namespace star {

struct AttentionConfig {
    std::size_t dim = 64;
    std::size_t heads = 2;
    double tau_init = 0.07;
    double tau_floor = 1e-3;

    std::size_t head_dim() const { return dim / heads; }

    void validate() const {
        if (heads == 0 || dim % heads != 0)
            throw ConfigError("AttentionConfig: heads (" + std::to_string(heads) + ") must divide dim (" +
                              std::to_string(dim) + ")");
        if (!(tau_init > 0.0) || !(tau_floor > 0.0)) throw ConfigError("AttentionConfig: temperature must be positive");
    }
};

struct TsaParams {
    Var wq, bq, wk, bk, wv, bv, wo, bo;
    Var log_tau;  // [1]

    std::vector<Parameter> parameters() const {
        return {{"tsa.wq", wq, true}, {"tsa.bq", bq, true}, {"tsa.wk", wk, true}, {"tsa.bk", bk, true},
                {"tsa.wv", wv, true}, {"tsa.bv", bv, true}, {"tsa.wo", wo, true}, {"tsa.bo", bo, true},
                {"tsa.log_tau", log_tau, true}};
    }
};

template <class Rng>
TsaParams init_tsa(const AttentionConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    TsaParams p;
    p.wq = parameter(uniform_tensor({d, d}, bound, rng));
    p.bq = parameter(Tensor({d}, 0.0));
    p.wk = parameter(uniform_tensor({d, d}, bound, rng));
    p.bk = parameter(Tensor({d}, 0.0));
    p.wv = parameter(uniform_tensor({d, d}, bound, rng));
    p.bv = parameter(Tensor({d}, 0.0));
    p.wo = parameter(uniform_tensor({d, d}, bound, rng));
    p.bo = parameter(Tensor({d}, 0.0));
    p.log_tau = parameter(Tensor::scalar(std::log(cfg.tau_init)));
    return p;
}

struct AttentionResult {
    Var output;                    // [M x D]
    std::vector<Tensor> weights;   // per head, [M x F]
};

// Multi-head attention with class embeddings as queries and frames as keys
// and values. Row i summarizes the video as seen by class token i.
inline AttentionResult cross_attention_detailed(const Var& class_embs, const Var& frames, const TsaParams& p,
                                                std::size_t heads) {
    if (class_embs.value().empty() || frames.value().empty())
        throw EmptySequenceError("cross_attention needs at least one class and one frame");
    const std::size_t d = frames.cols();
    if (heads == 0 || d % heads != 0)
        throw ConfigError("cross_attention: heads (" + std::to_string(heads) + ") must divide D (" + std::to_string(d) + ")");
    if (class_embs.cols() != d)
        throw DimensionError("cross_attention: class embeddings " + shape_string(class_embs.shape()) + " vs frames " +
                             shape_string(frames.shape()));
    const std::size_t dh = d / heads;
    Var q = add_row(matmul(class_embs, p.wq), p.bq);
    Var k = add_row(matmul(frames, p.wk), p.bk);
    Var v = add_row(matmul(frames, p.wv), p.bv);
    const double s = 1.0 / std::sqrt(static_cast<double>(dh));

    AttentionResult out;
    std::vector<Var> head_out;
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = slice_cols(q, h * dh, dh);
        Var kh = slice_cols(k, h * dh, dh);
        Var vh = slice_cols(v, h * dh, dh);
        Var attn = softmax(scale(matmul(qh, transpose(kh)), s));
        out.weights.push_back(attn.value());
        head_out.push_back(matmul(attn, vh));
    }
    Var merged = heads == 1 ? head_out.front() : concat_cols(head_out);
    out.output = add_row(matmul(merged, p.wo), p.bo);
    return out;
}

inline Var cross_attention(const Var& class_embs, const Var& frames, const TsaParams& p, std::size_t heads) {
    return cross_attention_detailed(class_embs, frames, p, heads).output;
}

// 1 / tau as a differentiable scalar; below the floor tau is held constant.
inline Var inverse_temperature(const TsaParams& p, double floor) {
    if (std::exp(p.log_tau.value()[0]) < floor) return constant(Tensor::scalar(1.0 / floor));
    return exp(scale(p.log_tau, -1.0));
}

// -(1/M) sum_i log softmax_j(cos(v_i, c_j) / tau)[i]
inline Var video_text_loss(const Var& v_enh, const Var& class_embs, const Var& inv_tau) {
    const std::size_t m = v_enh.rows();
    if (v_enh.value().empty() || m == 0) throw EmptySequenceError("video_text_loss with no classes");
    if (class_embs.shape() != v_enh.shape())
        throw DimensionError("video_text_loss: " + shape_string(v_enh.shape()) + " vs " + shape_string(class_embs.shape()));
    Var cos = matmul(row_normalize(v_enh), transpose(row_normalize(class_embs)));
    Var logp = log_softmax(mul_scalar(cos, inv_tau));
    Tensor eye({m, m}, 0.0);
    for (std::size_t i = 0; i < m; ++i) eye(i, i) = 1.0;
    return scale(sum(mul(logp, constant(std::move(eye)))), -1.0 / static_cast<double>(m));
}

} // namespace star
