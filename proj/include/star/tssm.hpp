#pragma once

// Temporal state-space block: a Mamba-style gated block around a selective
// scan whose diagonal state matrix is discretized by zero-order hold.

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "star/autodiff.hpp"
#include "star/numkernel.hpp"

namespace star {

struct SSMConfig {
    std::size_t model_dim = 64;
    std::size_t state_dim = 16;
    std::size_t conv_kernel = 3;
    std::size_t expansion = 2;
    double dt_min = 0.001;
    double dt_max = 0.1;
    // Multiplier on the output projection's initial range; 0 yields a block
    // that starts as the identity map.
    double out_init_scale = 1.0;

    std::size_t inner_dim() const { return expansion * model_dim; }

    void validate() const {
        if (model_dim < 1 || state_dim < 1 || expansion < 1)
            throw ConfigError("SSMConfig: model_dim, state_dim and expansion must be >= 1");
        if (conv_kernel < 1 || conv_kernel % 2 == 0)
            throw ConfigError("SSMConfig: conv_kernel must be odd, got " + std::to_string(conv_kernel));
        if (!(dt_min > 0.0) || dt_min > dt_max)
            throw ConfigError("SSMConfig: need 0 < dt_min <= dt_max");
    }
};

// ---------------------------------------------------------------------------
// Zero-order hold

namespace zoh {

// Below this |a*dt| the input coefficient uses its a -> 0 limit.
inline constexpr double kLimitThreshold = 1e-8;

// d/dz of (exp(z) - 1) / z, with a series near 0.
inline double phi1_prime(double z) {
    if (std::abs(z) < 1e-3) {
        // sum_{k>=1} k z^{k-1} / (k+1)!
        double zpow = 1.0, fact = 1.0, s = 0.0;
        for (int k = 1; k <= 8; ++k) {
            fact *= k + 1;
            s += k * zpow / fact;
            zpow *= z;
        }
        return s;
    }
    return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

// b-bar / b for one (a, dt) pair.
inline double input_coef(double a, double dt) {
    if (std::abs(a * dt) < kLimitThreshold) return dt;
    return std::expm1(a * dt) / a;
}

} // namespace zoh

struct Discretized {
    Tensor a_bar;
    Tensor b_bar;
};

// a_bar = exp(dt a), b_bar = (exp(dt a) - 1) / a * b for a diagonal state matrix.
inline Discretized discretize_zoh(const Tensor& a_diag, const Tensor& b, double dt) {
    if (!(dt > 0.0)) throw DomainError("discretize_zoh: dt must be positive, got " + std::to_string(dt));
    if (a_diag.size() != b.size())
        throw DimensionError("discretize_zoh: a " + shape_string(a_diag.shape()) + " vs b " + shape_string(b.shape()));
    Discretized out{Tensor(a_diag.shape()), Tensor(b.shape())};
    for (std::size_t i = 0; i < a_diag.size(); ++i) {
        out.a_bar[i] = std::exp(dt * a_diag[i]);
        out.b_bar[i] = zoh::input_coef(a_diag[i], dt) * b[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Selective scan
//
//   x, dt: [L x C]   b, c: [L x H]   a: [C x H] (negative)
//   h_t[ch, n] = exp(dt[t,ch] a[ch,n]) h_{t-1}[ch, n] + coef(a, dt) b[t,n] x[t,ch]
//   y[t, ch]   = sum_n c[t,n] h_t[ch, n]
inline Var ssm_scan(const Var& x, const Var& dt, const Var& b, const Var& c, const Var& a) {
    const std::size_t len = x.rows();
    if (x.value().empty() || len == 0) throw EmptySequenceError("ssm_scan of an empty sequence");
    const std::size_t ch = x.cols();
    const std::size_t hs = a.cols();
    if (dt.shape() != x.shape() || b.rows() != len || c.rows() != len || b.cols() != hs || c.cols() != hs ||
        a.rows() != ch)
        throw DimensionError("ssm_scan: inconsistent shapes x" + shape_string(x.shape()) + " dt" +
                             shape_string(dt.shape()) + " B" + shape_string(b.shape()) + " C" +
                             shape_string(c.shape()) + " A" + shape_string(a.shape()));

    const Tensor& xv = x.value();
    const Tensor& dv = dt.value();
    const Tensor& bv = b.value();
    const Tensor& cv = c.value();
    const Tensor& av = a.value();

    // Hidden states for every step are kept for the reverse pass.
    std::vector<double> states(len * ch * hs);
    Tensor y({len, ch}, 0.0);
    std::vector<double> h(ch * hs, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t k = 0; k < ch; ++k) {
            const double step = dv(t, k);
            const double xt = xv(t, k);
            double acc = 0.0;
            for (std::size_t n = 0; n < hs; ++n) {
                const double an = av(k, n);
                const double abar = std::exp(step * an);
                double& hn = h[k * hs + n];
                hn = abar * hn + zoh::input_coef(an, step) * bv(t, n) * xt;
                acc += cv(t, n) * hn;
            }
            y(t, k) = acc;
        }
        std::copy(h.begin(), h.end(), states.begin() + static_cast<std::ptrdiff_t>(t * ch * hs));
    }

    return record(std::move(y), {x, dt, b, c, a}, [states = std::move(states), len, ch, hs](Node& node) {
        auto& px = node.parents[0];
        auto& pd = node.parents[1];
        auto& pb = node.parents[2];
        auto& pc = node.parents[3];
        auto& pa = node.parents[4];
        const Tensor& xv = px->value;
        const Tensor& dv = pd->value;
        const Tensor& bv = pb->value;
        const Tensor& cv = pc->value;
        const Tensor& av = pa->value;
        const Tensor& gy = node.grad;

        Tensor gx(xv.shape(), 0.0), gd(dv.shape(), 0.0), gb(bv.shape(), 0.0), gc(cv.shape(), 0.0), ga(av.shape(), 0.0);
        std::vector<double> carry(ch * hs, 0.0);
        for (std::size_t tt = len; tt-- > 0;) {
            const double* ht = states.data() + tt * ch * hs;
            const double* hprev = tt ? states.data() + (tt - 1) * ch * hs : nullptr;
            for (std::size_t k = 0; k < ch; ++k) {
                const double step = dv(tt, k);
                const double xt = xv(tt, k);
                const double g_out = gy(tt, k);
                for (std::size_t n = 0; n < hs; ++n) {
                    const double an = av(k, n);
                    const double z = step * an;
                    const double abar = std::exp(z);
                    const double hp = hprev ? hprev[k * hs + n] : 0.0;
                    gc(tt, n) += g_out * ht[k * hs + n];
                    const double dh = carry[k * hs + n] + cv(tt, n) * g_out;

                    double coef, dcoef_da, dcoef_ddt;
                    if (std::abs(z) < zoh::kLimitThreshold) {
                        coef = step;
                        dcoef_da = step * step * 0.5;
                        dcoef_ddt = 1.0;
                    } else {
                        coef = std::expm1(z) / an;
                        dcoef_da = step * step * zoh::phi1_prime(z);
                        dcoef_ddt = abar;
                    }
                    const double bx = bv(tt, n) * xt;
                    gx(tt, k) += dh * coef * bv(tt, n);
                    gb(tt, n) += dh * coef * xt;
                    gd(tt, k) += dh * (hp * an * abar + bx * dcoef_ddt);
                    ga(k, n) += dh * (hp * step * abar + bx * dcoef_da);
                    carry[k * hs + n] = dh * abar;
                }
            }
        }
        if (px->requires_grad) px->accumulate(gx);
        if (pd->requires_grad) pd->accumulate(gd);
        if (pb->requires_grad) pb->accumulate(gb);
        if (pc->requires_grad) pc->accumulate(gc);
        if (pa->requires_grad) pa->accumulate(ga);
    });
}

// ---------------------------------------------------------------------------
// Block parameters

struct TSSMParams {
    Var in_proj;    // [D x E]
    Var gate_proj;  // [D x E]
    Var conv_w;     // [k x E], depthwise causal
    Var conv_b;     // [E]
    Var dt_proj;    // [E x E]
    Var dt_bias;    // [E]
    Var b_proj;     // [E x H]
    Var c_proj;     // [E x H]
    Var a_log;      // [E x H], A = -exp(a_log)
    Var d_skip;     // [E], direct path around the scan
    Var out_proj;   // [E x D]

    std::vector<Parameter> parameters(const std::string& prefix) const {
        return {
            {prefix + ".in_proj", in_proj, true},   {prefix + ".gate_proj", gate_proj, true},
            {prefix + ".conv_w", conv_w, true},     {prefix + ".conv_b", conv_b, true},
            {prefix + ".dt_proj", dt_proj, true},   {prefix + ".dt_bias", dt_bias, true},
            {prefix + ".b_proj", b_proj, true},     {prefix + ".c_proj", c_proj, true},
            {prefix + ".a_log", a_log, true},       {prefix + ".d_skip", d_skip, true},
            {prefix + ".out_proj", out_proj, true},
        };
    }

    void check(const SSMConfig& cfg) const {
        const std::size_t d = cfg.model_dim, e = cfg.inner_dim(), h = cfg.state_dim, k = cfg.conv_kernel;
        auto expect = [](const Var& v, Shape s, const char* name) {
            if (v.shape() != s)
                throw ConfigError(std::string("TSSM parameter ") + name + " has shape " + shape_string(v.shape()) +
                                  ", expected " + shape_string(s));
        };
        expect(in_proj, {d, e}, "in_proj");
        expect(gate_proj, {d, e}, "gate_proj");
        expect(conv_w, {k, e}, "conv_w");
        expect(conv_b, {e}, "conv_b");
        expect(dt_proj, {e, e}, "dt_proj");
        expect(dt_bias, {e}, "dt_bias");
        expect(b_proj, {e, h}, "b_proj");
        expect(c_proj, {e, h}, "c_proj");
        expect(a_log, {e, h}, "a_log");
        expect(d_skip, {e}, "d_skip");
        expect(out_proj, {e, d}, "out_proj");
    }
};

inline double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

template <class Rng>
TSSMParams init_tssm(const SSMConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.model_dim, e = cfg.inner_dim(), h = cfg.state_dim, k = cfg.conv_kernel;
    const double in_bound = 1.0 / std::sqrt(static_cast<double>(d));
    const double inner_bound = 1.0 / std::sqrt(static_cast<double>(e));
    TSSMParams p;
    p.in_proj = parameter(uniform_tensor({d, e}, in_bound, rng));
    p.gate_proj = parameter(uniform_tensor({d, e}, in_bound, rng));
    p.conv_w = parameter(uniform_tensor({k, e}, 1.0 / std::sqrt(static_cast<double>(k)), rng));
    p.conv_b = parameter(Tensor({e}, 0.0));
    p.dt_proj = parameter(uniform_tensor({e, e}, inner_bound, rng));

    Tensor dt_bias({e});
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double lo = std::log(cfg.dt_min), hi = std::log(cfg.dt_max);
    for (auto& v : dt_bias.storage()) v = inverse_softplus(std::exp(lo + unit(rng) * (hi - lo)));
    p.dt_bias = parameter(std::move(dt_bias));

    p.b_proj = parameter(uniform_tensor({e, h}, inner_bound, rng));
    p.c_proj = parameter(uniform_tensor({e, h}, inner_bound, rng));
    Tensor a_log({e, h});
    for (std::size_t i = 0; i < e; ++i)
        for (std::size_t n = 0; n < h; ++n) a_log(i, n) = std::log(static_cast<double>(n + 1));
    p.a_log = parameter(std::move(a_log));
    p.d_skip = parameter(Tensor({e}, 1.0));
    p.out_proj = parameter(uniform_tensor({e, d}, inner_bound * cfg.out_init_scale, rng));
    return p;
}

// Negative diagonal state matrix.
inline Var state_matrix(const Var& a_log) { return scale(exp(a_log), -1.0); }

// in_proj -> causal depthwise conv -> SiLU -> selective scan (plus the
// per-channel skip d_skip * u), gated by
// SiLU(gate_proj x), then out_proj and a residual connection.
inline Var tssm_block(const Var& x, const TSSMParams& p) {
    if (x.value().empty()) throw EmptySequenceError("tssm_block of an empty sequence");
    if (x.value().rank() != 2 || x.cols() != p.in_proj.rows())
        throw ConfigError("tssm_block: input " + shape_string(x.shape()) + " does not match in_proj " +
                          shape_string(p.in_proj.shape()));
    Var u = silu(causal_depthwise_conv(matmul(x, p.in_proj), p.conv_w, p.conv_b));
    Var step = softplus(add_row(matmul(u, p.dt_proj), p.dt_bias));
    Var y = add(ssm_scan(u, step, matmul(u, p.b_proj), matmul(u, p.c_proj), state_matrix(p.a_log)), mul_row(u, p.d_skip));
    Var gated = mul(y, silu(matmul(x, p.gate_proj)));
    return add(x, matmul(gated, p.out_proj));
}

inline Var tssm_stack(const Var& x, const std::vector<TSSMParams>& layers) {
    Var h = x;
    for (const auto& layer : layers) h = tssm_block(h, layer);
    return h;
}

} // namespace star
