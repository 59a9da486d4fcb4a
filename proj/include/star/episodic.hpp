#pragma once

// The full model, one-episode forward pass, optimizer, training loop and
// evaluation over sampled tasks.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "star/data.hpp"
#include "star/matching.hpp"
#include "star/stpr.hpp"
#include "star/tsa.hpp"

namespace star {

struct ModuleToggles {
    bool tcr = true;   // descriptor embeddings; off uses per-class template embeddings
    bool tsa = true;
    bool stpr = true;
    bool sgf = true;
    bool asd = true;
    bool acu = true;

    static ModuleToggles all_off() { return {false, false, false, false, false, false}; }
};

struct ModelConfig {
    SSMConfig ssm;
    StprConfig stpr;
    AttentionConfig attention;
    ModuleToggles modules;

    std::size_t dim() const { return ssm.model_dim; }

    // Stride/refiner settings with the module toggles applied.
    StprConfig effective_stpr() const {
        StprConfig c = stpr;
        c.sgf_support = stpr.sgf_support && modules.sgf;
        c.asd = stpr.asd && modules.asd;
        c.acu = stpr.acu && modules.acu;
        return c;
    }

    void validate(std::size_t frames) const {
        ssm.validate();
        attention.validate();
        if (attention.dim != ssm.model_dim)
            throw ConfigError("attention dim " + std::to_string(attention.dim) + " differs from model dim " +
                              std::to_string(ssm.model_dim));
        stpr.validate(frames);
    }
};

struct StarModel {
    ModelConfig cfg;
    Var text_gain, text_bias;  // layer norm on class embeddings
    StprParams stpr;
    TsaParams tsa;

    std::vector<Parameter> parameters() const {
        std::vector<Parameter> out{{"text.gain", text_gain, true}, {"text.bias", text_bias, true}};
        for (auto& p : stpr.parameters()) out.push_back(p);
        for (auto& p : tsa.parameters()) out.push_back(p);
        std::set<std::string> seen;
        for (const auto& p : out)
            if (!seen.insert(p.name).second) throw InconsistencyError("duplicate parameter name " + p.name);
        return out;
    }
};

inline StarModel init_model(const ModelConfig& cfg, std::size_t frames, std::uint64_t seed) {
    cfg.validate(frames);
    std::mt19937_64 rng(seed);
    StarModel m;
    m.cfg = cfg;
    const std::size_t d = cfg.dim();
    m.text_gain = parameter(Tensor({d}, 1.0));
    m.text_bias = parameter(Tensor({d}, 0.0));
    m.stpr = init_stpr(cfg.stpr, cfg.ssm, rng);
    m.tsa = init_tsa(cfg.attention, rng);
    return m;
}

enum class Mode { train, eval };

struct EpisodeOptions {
    Metric metric = Metric::otam;
    double lambda_train = 0.1;
    double alpha = 1.5;
};

struct EpisodeResult {
    Var loss;                 // scalar; graph attached in train mode
    double vt_loss = 0.0;
    double ce_loss = 0.0;
    Tensor distances;         // [P x N]
    std::vector<std::size_t> predictions;
};

inline Tensor class_embedding(const TextEntry& e, bool tcr, std::size_t dim) {
    return tcr ? e.embedding : template_embedding(e.class_id, dim);
}

// Refined features for one video. Queries never receive a class embedding.
inline Var refine(const StarModel& m, const Tensor& frames, const std::optional<Var>& text_norm) {
    Var x = constant(frames);
    if (!m.cfg.modules.stpr) return x;
    const StprConfig sc = m.cfg.effective_stpr();
    return text_norm ? refine_support(x, *text_norm, sc, m.stpr) : refine_query(x, sc, m.stpr);
}

inline EpisodeResult run_episode(const StarModel& m, const Episode& ep, Mode mode, const EpisodeOptions& opt = {}) {
    const std::size_t n = ep.way, d = m.cfg.dim();
    if (ep.support.empty() || ep.queries.empty()) throw EmptySequenceError("episode without supports or queries");
    const std::size_t frames = ep.support.front().frames.rows();
    if (ep.support.front().frames.cols() != d)
        throw ConfigError("episode feature dim " + std::to_string(ep.support.front().frames.cols()) +
                          " does not match model dim " + std::to_string(d));
    if (m.cfg.modules.stpr) m.cfg.effective_stpr().validate(frames);

    std::optional<NoGradGuard> guard;
    if (mode == Mode::eval) guard.emplace();
    const double lambda = mode == Mode::train ? opt.lambda_train : 0.0;

    Tensor raw({n, d});
    for (std::size_t c = 0; c < n; ++c) {
        const Tensor e = class_embedding(ep.descriptors[c], m.cfg.modules.tcr, d);
        if (e.size() != d) throw ConfigError("class embedding dim does not match model dim");
        for (std::size_t j = 0; j < d; ++j) raw(c, j) = e[j];
    }
    Var text_norm = layer_norm(constant(raw), m.text_gain, m.text_bias);

    std::vector<std::pair<std::size_t, Var>> refined_support;
    for (const auto& s : ep.support) {
        std::optional<Var> t;
        if (m.cfg.modules.sgf) t = reshape(select_rows(text_norm, {s.label}), {d});
        refined_support.emplace_back(s.label, refine(m, s.frames, t));
    }
    std::vector<Var> refined_query;
    for (const auto& q : ep.queries) refined_query.push_back(refine(m, q.frames, std::nullopt));

    EpisodeResult r;
    Var vt = constant(Tensor::scalar(0.0));
    if (mode == Mode::train && m.cfg.modules.tsa) {
        std::vector<Var> rows;
        for (std::size_t c = 0; c < n; ++c) {
            Var token = select_rows(text_norm, {c});
            std::vector<Var> shots;
            for (const auto& [label, feat] : refined_support)
                if (label == c) shots.push_back(cross_attention(token, feat, m.tsa, m.cfg.attention.heads));
            rows.push_back(shots.size() == 1 ? shots.front()
                                             : weighted_sum(shots, std::vector<double>(shots.size(), 1.0 / shots.size())));
        }
        vt = video_text_loss(concat_rows(rows), constant(raw), inverse_temperature(m.tsa, m.cfg.attention.tau_floor));
    }

    const auto protos = build_prototypes(refined_support, n);
    std::vector<Var> dists;
    for (const auto& q : refined_query)
        for (const auto& p : protos) dists.push_back(sequence_distance(q, p.feature, opt.metric, lambda));
    Var dmat = stack_scalars(dists, {ep.queries.size(), n});
    r.distances = dmat.value();
    for (std::size_t i = 0; i < ep.queries.size(); ++i) r.predictions.push_back(predict(r.distances.row(i)));

    Var ce = cross_entropy(scale(dmat, -1.0), ep.query_labels());
    r.loss = total_loss(vt, ce, opt.alpha);
    r.vt_loss = vt.value().item();
    r.ce_loss = ce.value().item();
    return r;
}

// ---------------------------------------------------------------------------

struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t t = 0;
    std::vector<Tensor> m, v;

    void step(const std::vector<Parameter>& params, double lr) {
        if (m.empty()) {
            for (const auto& p : params) {
                m.emplace_back(p.var.shape(), 0.0);
                v.emplace_back(p.var.shape(), 0.0);
            }
        }
        if (m.size() != params.size()) throw InconsistencyError("Adam: parameter list changed between steps");
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].trainable || !params[i].var.has_grad()) continue;
            Var var = params[i].var;
            const Tensor& g = var.grad();
            Tensor& x = var.mutable_value();
            for (std::size_t k = 0; k < x.size(); ++k) {
                m[i][k] = beta1 * m[i][k] + (1.0 - beta1) * g[k];
                v[i][k] = beta2 * v[i][k] + (1.0 - beta2) * g[k] * g[k];
                x[k] -= lr * (m[i][k] / c1) / (std::sqrt(v[i][k] / c2) + eps);
            }
        }
    }
};

struct TrainConfig {
    std::size_t epochs = 1;
    std::size_t episodes_per_epoch = 2000;
    double lr = 1e-4;
    std::vector<double> milestones{0.6, 0.8};  // fractions of the run
    double decay = 0.1;
    std::size_t way = 5, shot = 1, queries = 5;
    std::uint64_t seed = 1;
    EpisodeOptions episode;

    std::size_t total_episodes() const { return epochs * episodes_per_epoch; }

    double lr_at(std::size_t episode_index) const {
        double lr_now = lr;
        const double frac = static_cast<double>(episode_index) / static_cast<double>(std::max<std::size_t>(1, total_episodes()));
        for (double ms : milestones)
            if (frac >= ms) lr_now *= decay;
        return lr_now;
    }

    void validate() const {
        if (total_episodes() == 0) throw ConfigError("training needs at least one episode");
        if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
        if (!(episode.alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
        if (!(episode.lambda_train >= 0.0)) throw ConfigError("lambda must be >= 0");
    }
};

struct LossRecord {
    std::size_t episode;
    double lr, loss, vt_loss, ce_loss;
};

// Runs episodic Adam training in place. `on_episode` sees every record.
inline std::vector<LossRecord> train(StarModel& m, const Dataset& data, const TrainConfig& tc,
                                     const std::function<void(const LossRecord&)>& on_episode = {}) {
    tc.validate();
    m.cfg.validate(data.frames);
    std::mt19937_64 rng(tc.seed);
    const auto params = m.parameters();
    Adam opt;
    std::vector<LossRecord> log;
    for (std::size_t e = 0; e < tc.total_episodes(); ++e) {
        Episode ep = sample_episode(data, tc.way, tc.shot, tc.queries, rng);
        for (const auto& p : params) {
            Var v = p.var;
            v.zero_grad();
        }
        EpisodeResult r = run_episode(m, ep, Mode::train, tc.episode);
        const double loss = r.loss.value().item();
        if (!std::isfinite(loss))
            throw NumericError("training diverged at episode " + std::to_string(e) + ": loss " + std::to_string(loss) +
                               " (vt " + std::to_string(r.vt_loss) + ", ce " + std::to_string(r.ce_loss) + ")");
        const double lr = tc.lr_at(e);
        if (r.loss.requires_grad()) {
            backward(r.loss);
            opt.step(params, lr);
        }
        LossRecord rec{e, lr, loss, r.vt_loss, r.ce_loss};
        log.push_back(rec);
        if (on_episode) on_episode(rec);
    }
    return log;
}

// ---------------------------------------------------------------------------

struct EvalReport {
    std::size_t tasks = 0;
    double accuracy = 0.0;
    std::optional<double> half_width;  // absent for a single task
    std::vector<double> task_accuracy;
};

using Scorer = std::function<std::vector<std::size_t>(const Episode&)>;

inline std::uint64_t task_seed(std::uint64_t seed, std::size_t task) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(task), static_cast<std::uint32_t>(static_cast<std::uint64_t>(task) >> 32)};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

inline EvalReport summarize(std::vector<double> per_task) {
    EvalReport rep;
    rep.tasks = per_task.size();
    if (per_task.empty()) return rep;
    double s = 0.0;
    for (double a : per_task) s += a;
    rep.accuracy = s / static_cast<double>(rep.tasks);
    if (rep.tasks > 1) {
        double ss = 0.0;
        for (double a : per_task) ss += (a - rep.accuracy) * (a - rep.accuracy);
        const double sd = std::sqrt(ss / static_cast<double>(rep.tasks - 1));
        rep.half_width = 1.96 * sd / std::sqrt(static_cast<double>(rep.tasks));
    }
    rep.task_accuracy = std::move(per_task);
    return rep;
}

// Accuracy over `tasks` independently seeded episodes. Workers fill fixed
// slots and the reduction runs in task order, so the thread count never
// changes the result.
inline EvalReport evaluate(const Scorer& scorer, const Dataset& data, std::size_t way, std::size_t shot, std::size_t queries,
                           std::size_t tasks, std::uint64_t seed, std::size_t threads = 1) {
    if (tasks == 0) throw ConfigError("evaluation needs at least one task");
    std::vector<double> acc(tasks, 0.0);
    auto work = [&](std::size_t begin, std::size_t stride) {
        NoGradGuard guard;
        for (std::size_t t = begin; t < tasks; t += stride) {
            std::mt19937_64 rng(task_seed(seed, t));
            Episode ep = sample_episode(data, way, shot, queries, rng);
            const auto pred = scorer(ep);
            std::size_t hit = 0;
            for (std::size_t i = 0; i < ep.queries.size(); ++i) hit += pred.at(i) == ep.queries[i].label;
            acc[t] = static_cast<double>(hit) / static_cast<double>(ep.queries.size());
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, tasks));
    if (threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(work, i, threads);
        for (auto& th : pool) th.join();
    }
    return summarize(std::move(acc));
}

inline Scorer model_scorer(const StarModel& m, const EpisodeOptions& opt) {
    return [&m, opt](const Episode& ep) { return run_episode(m, ep, Mode::eval, opt).predictions; };
}

// Nearest prototype on unprocessed frames.
inline Scorer raw_prototype_scorer(Metric metric) {
    return [metric](const Episode& ep) {
        NoGradGuard guard;
        std::vector<std::pair<std::size_t, Var>> sup;
        for (const auto& s : ep.support) sup.emplace_back(s.label, constant(s.frames));
        const auto protos = build_prototypes(sup, ep.way);
        std::vector<std::size_t> out;
        for (const auto& q : ep.queries) {
            std::vector<double> d;
            for (const auto& p : protos) d.push_back(sequence_distance(constant(q.frames), p.feature, metric, 0.0).value().item());
            out.push_back(predict(d));
        }
        return out;
    };
}

// Equal distances everywhere, so every query goes to the first class.
inline Scorer constant_scorer() {
    return [](const Episode& ep) { return std::vector<std::size_t>(ep.queries.size(), 0); };
}

// Uniform guesses, reproducible from the episode's query ids.
inline Scorer random_guess_scorer(std::uint64_t seed) {
    return [seed](const Episode& ep) {
        std::vector<std::size_t> out;
        for (const auto& q : ep.queries) {
            std::mt19937_64 rng(task_seed(seed, q.video_id));
            out.push_back(std::uniform_int_distribution<std::size_t>(0, ep.way - 1)(rng));
        }
        return out;
    };
}

} // namespace star
