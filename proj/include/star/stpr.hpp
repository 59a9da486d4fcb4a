#pragma once

// Semantic temporal prototype refiner: text-guided frame reweighting,
// multi-stride causal refinement and bidirectional multi-stride fusion
// followed by channel recalibration.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "star/numkernel.hpp"
#include "star/tssm.hpp"

namespace star {

struct StprConfig {
    std::vector<std::size_t> strides{1, 2, 4};
    // Empty means uniform 1/|W|.
    std::vector<double> fuse_weights;
    std::size_t recal_kernel = 3;
    bool sgf_support = true;
    // Kept for config symmetry; the query path never sees a class embedding
    // so this must stay off.
    bool sgf_query = false;
    bool asd = true;
    bool acu = true;
    std::size_t tssm_layers = 1;

    std::vector<double> weights() const {
        if (!fuse_weights.empty()) return fuse_weights;
        return std::vector<double>(strides.size(), 1.0 / static_cast<double>(strides.size()));
    }

    void validate(std::size_t frames) const {
        if (strides.empty()) throw ConfigError("StprConfig: at least one stride is required");
        for (std::size_t i = 0; i < strides.size(); ++i) {
            if (strides[i] < 1 || strides[i] >= frames)
                throw ConfigError("StprConfig: stride " + std::to_string(strides[i]) + " must lie in [1, " +
                                  std::to_string(frames) + ")");
            for (std::size_t j = 0; j < i; ++j)
                if (strides[j] == strides[i]) throw ConfigError("StprConfig: duplicate stride");
        }
        const auto w = weights();
        if (w.size() != strides.size()) throw ConfigError("StprConfig: one fuse weight per stride is required");
        if (std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0) > 1e-9)
            throw ConfigError("StprConfig: fuse weights must sum to 1");
        if (recal_kernel % 2 == 0) throw ConfigError("StprConfig: recal_kernel must be odd");
        if (sgf_query) throw ConfigError("StprConfig: SGF cannot be applied to queries (no label on the query path)");
        if (tssm_layers < 1) throw ConfigError("StprConfig: tssm_layers must be >= 1");
    }
};

struct StrideBranch {
    std::size_t stride = 1;
    std::vector<TSSMParams> asd;
    std::vector<TSSMParams> acu_fwd;
    std::vector<TSSMParams> acu_bwd;
};

struct StprParams {
    std::vector<StrideBranch> branches;
    Var recal_kernel;  // [k_e]

    const StrideBranch& branch(std::size_t stride) const {
        for (const auto& b : branches)
            if (b.stride == stride) return b;
        throw InconsistencyError("no parameters for stride " + std::to_string(stride));
    }

    std::vector<Parameter> parameters() const {
        std::vector<Parameter> out;
        auto append = [&out](const std::vector<TSSMParams>& layers, const std::string& prefix) {
            for (std::size_t l = 0; l < layers.size(); ++l) {
                auto ps = layers[l].parameters(prefix + ".l" + std::to_string(l));
                out.insert(out.end(), ps.begin(), ps.end());
            }
        };
        for (const auto& b : branches) {
            const std::string w = "stpr.w" + std::to_string(b.stride);
            append(b.asd, w + ".asd");
            append(b.acu_fwd, w + ".acu_fwd");
            append(b.acu_bwd, w + ".acu_bwd");
        }
        out.push_back({"stpr.recal_kernel", recal_kernel, true});
        return out;
    }
};

template <class Rng>
StprParams init_stpr(const StprConfig& cfg, const SSMConfig& ssm, Rng& rng) {
    StprParams p;
    auto stack = [&](std::vector<TSSMParams>& layers) {
        for (std::size_t l = 0; l < cfg.tssm_layers; ++l) layers.push_back(init_tssm(ssm, rng));
    };
    for (std::size_t w : cfg.strides) {
        StrideBranch b;
        b.stride = w;
        stack(b.asd);
        stack(b.acu_fwd);
        stack(b.acu_bwd);
        p.branches.push_back(std::move(b));
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.recal_kernel));
    p.recal_kernel = parameter(uniform_tensor({cfg.recal_kernel}, bound, rng));
    return p;
}

// ---------------------------------------------------------------------------

// gate_f = sigmoid(<text_norm, v_f> / sqrt(D)); out_f = v_f + gate_f * v_f.
inline Var sgf_reweight(const Var& text_norm, const Var& frames) {
    if (frames.value().empty()) throw EmptySequenceError("sgf_reweight of an empty sequence");
    const std::size_t d = frames.cols();
    if (text_norm.value().size() != d)
        throw DimensionError("sgf_reweight: text " + shape_string(text_norm.shape()) + " vs frames " +
                             shape_string(frames.shape()));
    Var scores = matmul(frames, reshape(text_norm, {d, 1}));
    Var gate = sigmoid(scale(reshape(scores, {frames.rows()}), 1.0 / std::sqrt(static_cast<double>(d))));
    return add(frames, mul_col(frames, gate));
}

// Rows o, o+w, o+2w, ... of `frames`.
inline std::vector<std::size_t> subsample_indices(std::size_t frames, std::size_t w, std::size_t o) {
    if (w == 0 || o >= w) throw DomainError("asd_subsample: need 0 <= o < w, got o=" + std::to_string(o) + " w=" + std::to_string(w));
    if (w > frames) throw DomainError("asd_subsample: stride " + std::to_string(w) + " exceeds " + std::to_string(frames) + " frames");
    std::vector<std::size_t> idx;
    for (std::size_t i = o; i < frames; i += w) idx.push_back(i);
    return idx;
}

inline Var asd_subsample(const Var& frames, std::size_t w, std::size_t o) {
    if (frames.value().empty()) throw EmptySequenceError("asd_subsample of an empty sequence");
    return select_rows(frames, subsample_indices(frames.rows(), w, o));
}

// Offset-averaged causal refinement at one stride, plus the semantic residual
// on the support path.
inline Var asd_refine(const Var& frames, const std::optional<Var>& sgf_out, std::size_t w,
                      const std::vector<TSSMParams>& tssm) {
    const std::size_t f = frames.rows();
    std::vector<Var> parts;
    parts.reserve(w);
    for (std::size_t o = 0; o < w; ++o)
        parts.push_back(temporal_resample(tssm_stack(asd_subsample(frames, w, o), tssm), f));
    Var avg = weighted_sum(parts, std::vector<double>(w, 1.0 / static_cast<double>(w)));
    if (sgf_out) return add(avg, *sgf_out);
    return avg;
}

inline Var acu_bidirectional(const Var& x, const std::vector<TSSMParams>& fwd, const std::vector<TSSMParams>& bwd) {
    return add(tssm_stack(x, fwd), reverse_rows(tssm_stack(reverse_rows(x), bwd)));
}

struct StrideFeature {
    std::size_t stride;
    Var feature;
};

inline Var acu_fuse(const std::vector<StrideFeature>& bundle, const std::vector<std::size_t>& strides,
                    const std::vector<double>& weights) {
    std::vector<Var> parts;
    for (std::size_t w : strides) {
        auto it = std::find_if(bundle.begin(), bundle.end(), [w](const StrideFeature& s) { return s.stride == w; });
        if (it == bundle.end()) throw InconsistencyError("acu_fuse: missing stride " + std::to_string(w));
        parts.push_back(it->feature);
    }
    return weighted_sum(parts, weights);
}

// out = x + x * sigmoid(conv1d(mean_f x)) with the conv running over channels.
inline Var channel_recalibrate(const Var& x, const Var& kernel) {
    const std::size_t d = x.cols();
    const std::size_t k = kernel.value().size();
    if (k % 2 == 0) throw ConfigError("channel_recalibrate needs an odd kernel");
    Var context = reshape(mean_rows(x), {d, 1});
    Var gate = sigmoid(reshape(conv1d(context, reshape(kernel, {k, 1, 1})), {d}));
    return add(x, mul_row(x, gate));
}

// Shared refinement path. `text_norm` is present only for supports with SGF on.
inline Var stpr_refine(const Var& frames, const std::optional<Var>& text_norm, const StprConfig& cfg,
                       const StprParams& params) {
    std::optional<Var> sgf_out;
    if (text_norm) sgf_out = sgf_reweight(*text_norm, frames);
    const Var& base = sgf_out ? *sgf_out : frames;

    std::vector<StrideFeature> bundle;
    for (std::size_t w : cfg.strides) {
        const StrideBranch& br = params.branch(w);
        Var local = cfg.asd ? asd_refine(base, sgf_out, w, br.asd) : base;
        Var global = cfg.acu ? acu_bidirectional(local, br.acu_fwd, br.acu_bwd) : local;
        bundle.push_back({w, global});
    }
    return channel_recalibrate(acu_fuse(bundle, cfg.strides, cfg.weights()), params.recal_kernel);
}

inline Var refine_support(const Var& frames, const Var& text_norm, const StprConfig& cfg, const StprParams& params) {
    return stpr_refine(frames, cfg.sgf_support ? std::optional<Var>(text_norm) : std::nullopt, cfg, params);
}

inline Var refine_query(const Var& frames, const StprConfig& cfg, const StprParams& params) {
    return stpr_refine(frames, std::nullopt, cfg, params);
}

struct StprOutput {
    std::vector<Var> supports;
    std::vector<Var> queries;
};

inline StprOutput stpr_forward(const std::vector<Var>& supports, const std::vector<Var>& support_text_norms,
                               const std::vector<Var>& queries, const StprConfig& cfg, const StprParams& params) {
    if (supports.size() != support_text_norms.size())
        throw InconsistencyError("stpr_forward: one class embedding per support is required");
    const Var* ref = !supports.empty() ? &supports.front() : (!queries.empty() ? &queries.front() : nullptr);
    if (!ref) return {};
    const Shape shape = ref->shape();
    auto check = [&shape](const Var& v) {
        if (v.shape() != shape)
            throw InconsistencyError("stpr_forward: mixed frame/feature shapes " + shape_string(v.shape()) + " vs " +
                                     shape_string(shape));
    };
    for (const auto& s : supports) check(s);
    for (const auto& q : queries) check(q);
    cfg.validate(shape[0]);

    StprOutput out;
    for (std::size_t i = 0; i < supports.size(); ++i)
        out.supports.push_back(refine_support(supports[i], support_text_norms[i], cfg, params));
    for (const auto& q : queries) out.queries.push_back(refine_query(q, cfg, params));
    return out;
}

} // namespace star
