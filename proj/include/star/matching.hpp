#pragma once

// Prototype construction, frame-level temporal distances and the episode loss.

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "star/numkernel.hpp"

namespace star {

enum class Metric { otam, bimhm };

inline const char* metric_name(Metric m) { return m == Metric::otam ? "otam" : "bimhm"; }

inline Metric parse_metric(const std::string& s) {
    if (s == "otam") return Metric::otam;
    if (s == "bimhm") return Metric::bimhm;
    throw ConfigError("unknown metric '" + s + "' (expected otam or bimhm)");
}

struct Prototype {
    std::size_t class_index;
    Var feature;
};

// Frame-wise mean of the supports of each class. `supports` pairs an
// episode class index with a refined support sequence.
inline std::vector<Prototype> build_prototypes(const std::vector<std::pair<std::size_t, Var>>& supports,
                                               std::size_t num_classes) {
    std::vector<std::vector<Var>> per_class(num_classes);
    for (const auto& [cls, feat] : supports) {
        if (cls >= num_classes) throw InconsistencyError("build_prototypes: class index out of range");
        per_class[cls].push_back(feat);
    }
    const std::size_t shot = per_class.empty() ? 0 : per_class.front().size();
    std::vector<Prototype> out;
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (per_class[c].empty() || per_class[c].size() != shot)
            throw InconsistencyError("build_prototypes: class " + std::to_string(c) + " has " +
                                     std::to_string(per_class[c].size()) + " supports, expected " + std::to_string(shot));
        if (shot == 1) {
            out.push_back({c, per_class[c].front()});
            continue;
        }
        out.push_back({c, weighted_sum(per_class[c], std::vector<double>(shot, 1.0 / static_cast<double>(shot)))});
    }
    return out;
}

// C[i][j] = 1 - cos(q_i, p_j)
inline Var frame_cost(const Var& q, const Var& p) {
    if (q.cols() != p.cols())
        throw DimensionError("frame_cost: " + shape_string(q.shape()) + " vs " + shape_string(p.shape()));
    Var cos = matmul(row_normalize(q), transpose(row_normalize(p)));
    return add_scalar(scale(cos, -1.0), 1.0);
}

namespace detail {

struct SoftMin {
    double value;
    double weights[3];
};

// lambda == 0: hard min with all weight on the first minimizer.
inline SoftMin soft_min(const double* v, int n, double lambda) {
    SoftMin out{0.0, {0.0, 0.0, 0.0}};
    int arg = 0;
    for (int i = 1; i < n; ++i)
        if (v[i] < v[arg]) arg = i;
    const double m = v[arg];
    if (lambda <= 0.0) {
        out.value = m;
        out.weights[arg] = 1.0;
        return out;
    }
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::exp(-(v[i] - m) / lambda);
    out.value = m - lambda * std::log(s);
    for (int i = 0; i < n; ++i) out.weights[i] = std::exp((out.value - v[i]) / lambda);
    return out;
}

// Ordered alignment over rows of `cost` with zero-cost padding columns on
// both sides of the column axis. Moves: diagonal and horizontal everywhere,
// vertical only inside the padding columns. Returns the accumulated cost of
// reaching the bottom-right padding cell and, if requested, its gradient with
// respect to every cost entry.
inline double otam_directional(const Tensor& cost, double lambda, Tensor* grad) {
    const std::size_t rows = cost.rows();
    const std::size_t s = cost.cols();
    const std::size_t width = s + 2;
    auto d = [&](std::size_t r, std::size_t m) { return (m == 0 || m == s + 1) ? 0.0 : cost(r, m - 1); };

    struct Cell {
        double g = 0.0;
        int npred = 0;
        std::size_t pr[3]{}, pm[3]{};
        double w[3]{};
    };
    std::vector<Cell> cells(rows * width);
    auto at = [&](std::size_t r, std::size_t m) -> Cell& { return cells[r * width + m]; };

    for (std::size_t m = 1; m < width; ++m) {
        Cell& c = at(0, m);
        c.g = d(0, m) + at(0, m - 1).g;
        c.npred = 1;
        c.pr[0] = 0;
        c.pm[0] = m - 1;
        c.w[0] = 1.0;
    }
    for (std::size_t r = 1; r < rows; ++r) {
        for (std::size_t m = 1; m < width; ++m) {
            Cell& c = at(r, m);
            if (m == s + 1) {
                c.npred = 3;
                c.pr[0] = r - 1; c.pm[0] = s;
                c.pr[1] = r;     c.pm[1] = s;
                c.pr[2] = r - 1; c.pm[2] = s + 1;
            } else {
                c.npred = 2;
                c.pr[0] = r - 1; c.pm[0] = m - 1;
                c.pr[1] = r;     c.pm[1] = m - 1;
            }
            double vals[3];
            for (int i = 0; i < c.npred; ++i) vals[i] = at(c.pr[i], c.pm[i]).g;
            const SoftMin sm = soft_min(vals, c.npred, lambda);
            c.g = d(r, m) + sm.value;
            for (int i = 0; i < c.npred; ++i) c.w[i] = sm.weights[i];
        }
    }
    const double result = at(rows - 1, s + 1).g;

    if (grad) {
        *grad = Tensor(cost.shape(), 0.0);
        std::vector<double> adj(rows * width, 0.0);
        adj[(rows - 1) * width + s + 1] = 1.0;
        for (std::size_t r = rows; r-- > 0;)
            for (std::size_t m = width; m-- > 1;) {
                const double a = adj[r * width + m];
                if (a == 0.0) continue;
                if (m >= 1 && m <= s) (*grad)(r, m - 1) += a;
                const Cell& c = at(r, m);
                for (int i = 0; i < c.npred; ++i) adj[c.pr[i] * width + c.pm[i]] += a * c.w[i];
            }
    }
    return result;
}

} // namespace detail

// Bidirectional ordered alignment distance, averaged over both directions and
// normalized by the number of query frames. lambda = 0 uses the hard min.
inline Var otam_distance(const Var& cost, double lambda) {
    const Tensor& c = cost.value();
    if (c.empty()) throw EmptySequenceError("otam_distance of an empty cost matrix");
    kernel::require_rank2(c, "otam_distance");
    if (lambda < 0.0) throw DomainError("otam_distance: lambda must be >= 0");
    const bool need = cost.requires_grad() && grad_enabled();
    Tensor g_fwd, g_bwd;
    const Tensor ct = kernel::transpose(c);
    const double fwd = detail::otam_directional(c, lambda, need ? &g_fwd : nullptr);
    const double bwd = detail::otam_directional(ct, lambda, need ? &g_bwd : nullptr);
    const double norm = 1.0 / (2.0 * static_cast<double>(c.rows()));
    Tensor grad;
    if (need) {
        grad = g_fwd;
        for (std::size_t i = 0; i < c.rows(); ++i)
            for (std::size_t j = 0; j < c.cols(); ++j) grad(i, j) = (g_fwd(i, j) + g_bwd(j, i)) * norm;
    }
    return record(Tensor::scalar((fwd + bwd) * norm), {cost}, [grad = std::move(grad)](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * grad[i];
    });
}

// Mean over query frames of the closest support frame plus the converse.
inline Var bimhm_distance(const Var& cost) {
    if (cost.value().empty()) throw EmptySequenceError("bimhm_distance of an empty cost matrix");
    return add(mean(min_axis(cost, 1)), mean(min_axis(cost, 0)));
}

inline Var sequence_distance(const Var& query, const Var& prototype, Metric metric, double lambda) {
    Var cost = frame_cost(query, prototype);
    return metric == Metric::otam ? otam_distance(cost, lambda) : bimhm_distance(cost);
}

// softmax(-d)
inline Tensor episode_probs(const Tensor& distances) {
    Tensor neg = distances;
    for (auto& v : neg.storage()) v = -v;
    return kernel::softmax(neg);
}

// Index of the smallest distance, lowest index on ties.
inline std::size_t predict(std::span<const double> distances) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < distances.size(); ++i)
        if (distances[i] < distances[best]) best = i;
    return best;
}

// Mean cross-entropy of softmax(logits) against labels; logits [P x N].
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
    const std::size_t p = logits.rows(), n = logits.cols();
    if (labels.size() != p) throw InconsistencyError("cross_entropy: one label per query is required");
    Tensor pick({p, n}, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        if (labels[i] >= n) throw DomainError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(n) + ")");
        pick(i, labels[i]) = 1.0;
    }
    return scale(sum(mul(log_softmax(logits), constant(std::move(pick)))), -1.0 / static_cast<double>(p));
}

inline Var total_loss(const Var& vt_loss, const Var& few_shot_loss, double alpha) {
    if (alpha < 0.0) throw DomainError("total_loss: alpha must be >= 0");
    return add(vt_loss, scale(few_shot_loss, alpha));
}

// Same objective from already-normalized probabilities, one row per query.
inline double total_loss(const Tensor& probs, const std::vector<std::size_t>& labels, double vt_loss, double alpha) {
    if (alpha < 0.0) throw DomainError("total_loss: alpha must be >= 0");
    const std::size_t n = probs.cols();
    const std::size_t p = probs.size() / n;
    if (labels.size() != p) throw InconsistencyError("total_loss: one label per query is required");
    double ce = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        if (labels[i] >= n) throw DomainError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(n) + ")");
        ce -= std::log(probs[i * n + labels[i]]);
    }
    return vt_loss + alpha * ce / static_cast<double>(p);
}

} // namespace star
