#pragma once

// Finite-difference gradient checks for every trainable component, at
// micro sizes so they run in seconds.

#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "star/episodic.hpp"
#include "star/gradcheck.hpp"

namespace star {

struct CheckOutcome {
    std::string name;
    double value = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    std::string detail;
};

namespace detail {

template <class Rng>
Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> g(0.0, stddev);
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = g(rng);
    return t;
}

// Fixed random projection to a scalar, so every output entry matters.
inline Var probe(const Var& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sum(mul(y, constant(normal_tensor(y.shape(), 1.0, rng))));
}

inline CheckOutcome grad_outcome(const std::string& name, const std::function<Var()>& f, const std::vector<Parameter>& params,
                                 double tol, std::size_t coords = 0, double eps = GradCheckOptions{}.eps) {
    GradCheckOptions opt;
    opt.coords_per_param = coords;
    opt.eps = eps;
    const GradCheckResult r = grad_check(f, params, opt);
    std::ostringstream os;
    os << "coords=" << r.coords_checked << " worst=" << r.worst_param << "[" << r.worst_index << "] analytic=" << r.worst_analytic
       << " numeric=" << r.worst_numeric;
    return {name, r.max_rel_error, tol, r.max_rel_error < tol, os.str()};
}

inline SSMConfig micro_ssm(std::size_t d) {
    SSMConfig c;
    c.model_dim = d;
    c.state_dim = 4;
    c.expansion = 2;
    c.conv_kernel = 3;
    c.dt_min = 0.05;
    c.dt_max = 0.5;
    return c;
}

} // namespace detail

// Micro configuration used for the end-to-end check: 2-way 1-shot, F=4, D=8.
inline ModelConfig micro_model_config() {
    ModelConfig mc;
    mc.ssm = detail::micro_ssm(8);
    mc.attention.dim = 8;
    mc.attention.heads = 2;
    mc.stpr.strides = {1, 2};
    return mc;
}

inline Episode micro_episode(std::uint64_t seed, std::size_t frames = 4, std::size_t dim = 8) {
    std::mt19937_64 rng(seed);
    Episode ep;
    ep.way = 2;
    ep.shot = 1;
    for (std::uint32_t c = 0; c < 2; ++c) {
        ep.classes.push_back(c);
        TextEntry e;
        e.class_id = c;
        e.name = "c" + std::to_string(c);
        e.embedding = detail::normal_tensor({dim}, 1.0, rng);
        ep.descriptors.push_back(e);
        ep.support.push_back({c, c, detail::normal_tensor({frames, dim}, 1.0, rng)});
    }
    for (std::uint32_t q = 0; q < 2; ++q) ep.queries.push_back({10 + q, q, detail::normal_tensor({frames, dim}, 1.0, rng)});
    return ep;
}

// Module-level checks use `module_tol`; the full episode loss uses `e2e_tol`.
inline std::vector<CheckOutcome> gradient_suite(std::uint64_t seed = 17, double module_tol = 1e-5, double e2e_tol = 1e-4) {
    using detail::grad_outcome;
    using detail::normal_tensor;
    using detail::probe;
    std::vector<CheckOutcome> out;
    std::mt19937_64 rng(seed);

    // Kernel ops on small random shapes.
    {
        Var a = parameter(normal_tensor({3, 4}, 1.0, rng)), b = parameter(normal_tensor({4, 5}, 1.0, rng));
        Var g = parameter(normal_tensor({4}, 1.0, rng)), bias = parameter(normal_tensor({4}, 1.0, rng));
        Var k = parameter(normal_tensor({3, 4, 2}, 0.5, rng));
        Var s = parameter(normal_tensor({1}, 1.0, rng));
        std::vector<Parameter> ps{{"a", a}, {"b", b}, {"gain", g}, {"bias", bias}, {"kernel", k}, {"s", s}};
        out.push_back(grad_outcome("kernel.ops", [&] {
            Var m = matmul(a, b);
            Var t = add(probe(softmax(m), 1), probe(log_softmax(m), 2));
            t = add(t, probe(layer_norm(a, g, bias), 3));
            t = add(t, probe(temporal_resample(a, 7), 4));
            t = add(t, probe(conv1d(a, k), 5));
            t = add(t, probe(row_normalize(a), 6));
            t = add(t, probe(mul_scalar(sigmoid(a), s), 7));
            t = add(t, probe(silu(a), 8));
            t = add(t, probe(softplus(a), 9));
            t = add(t, probe(mean_rows(exp(scale(a, 0.3))), 10));
            return t;
        }, ps, module_tol));
    }

    // Selective scan alone.
    {
        const std::size_t L = 6, C = 3, H = 2;
        Var x = parameter(normal_tensor({L, C}, 1.0, rng));
        Tensor dt0({L, C});
        std::uniform_real_distribution<double> u(0.05, 0.8);
        for (auto& v : dt0.storage()) v = u(rng);
        Var dt = parameter(dt0);
        Var bm = parameter(normal_tensor({L, H}, 1.0, rng)), cm = parameter(normal_tensor({L, H}, 1.0, rng));
        Tensor a0({C, H});
        for (auto& v : a0.storage()) v = -u(rng) * 2.0;
        Var a = parameter(a0);
        out.push_back(grad_outcome("tssm.scan", [&] { return probe(ssm_scan(x, dt, bm, cm, a), 11); },
                                   {{"x", x}, {"dt", dt}, {"b", bm}, {"c", cm}, {"a", a}}, module_tol));
    }

    // Full block, every parameter.
    {
        const SSMConfig cfg = detail::micro_ssm(6);
        TSSMParams p = init_tssm(cfg, rng);
        Var x = constant(normal_tensor({5, 6}, 1.0, rng));
        out.push_back(grad_outcome("tssm.block", [&] { return probe(tssm_block(x, p), 12); }, p.parameters("tssm"), module_tol));
    }

    // Refiner on a support and a query.
    {
        const std::size_t f = 6, d = 6;
        StprConfig sc;
        sc.strides = {1, 2, 4};
        StprParams sp = init_stpr(sc, detail::micro_ssm(d), rng);
        Var text = parameter(normal_tensor({d}, 1.0, rng));
        Var sup = constant(normal_tensor({f, d}, 1.0, rng)), qry = constant(normal_tensor({f, d}, 1.0, rng));
        auto ps = sp.parameters();
        ps.push_back({"text", text});
        out.push_back(grad_outcome("stpr", [&] {
            return add(probe(refine_support(sup, text, sc, sp), 13), probe(refine_query(qry, sc, sp), 14));
        }, ps, module_tol, 6, 1e-2));
    }

    // Cross-attention with the video-text loss, temperature included.
    {
        AttentionConfig ac;
        ac.dim = 8;
        ac.heads = 2;
        TsaParams tp = init_tsa(ac, rng);
        Var cls = parameter(normal_tensor({3, 8}, 1.0, rng));
        Var frames = parameter(normal_tensor({4, 8}, 1.0, rng));
        Tensor raw = normal_tensor({3, 8}, 1.0, rng);
        auto ps = tp.parameters();
        ps.push_back({"class_embs", cls});
        ps.push_back({"frames", frames});
        out.push_back(grad_outcome("tsa", [&] {
            return video_text_loss(cross_attention(cls, frames, tp, ac.heads), constant(raw), inverse_temperature(tp, ac.tau_floor));
        }, ps, module_tol, 0, 1e-3));
    }

    // Distances and the classification loss.
    {
        Var q = parameter(normal_tensor({4, 5}, 1.0, rng)), p = parameter(normal_tensor({3, 5}, 1.0, rng));
        Var logits = parameter(normal_tensor({3, 4}, 1.0, rng));
        out.push_back(grad_outcome("matching", [&] {
            Var t = otam_distance(frame_cost(q, p), 0.1);
            t = add(t, bimhm_distance(frame_cost(q, p)));
            return add(t, cross_entropy(logits, {0, 3, 1}));
        }, {{"q", q}, {"p", p}, {"logits", logits}}, module_tol));
    }

    // Whole episode loss on a 2-way 1-shot micro-episode.
    {
        StarModel m = init_model(micro_model_config(), 4, seed);
        const Episode ep = micro_episode(seed + 1);
        out.push_back(grad_outcome("episode.total_loss", [&] { return run_episode(m, ep, Mode::train).loss; }, m.parameters(),
                                   e2e_tol, 6));
    }
    return out;
}

} // namespace star
