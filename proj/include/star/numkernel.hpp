#pragma once

// Dense kernels over Tensor plus their differentiable wrappers over Var.
//
// Matrices are [rows x cols]; sequences are [frames x channels]. Rank-1
// tensors stand in for per-channel vectors.

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "star/autodiff.hpp"
#include "star/tensor.hpp"

namespace star {

namespace kernel {

inline void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_string(t.shape()));
}

// c += a * b  (a: m x k, b: k x n), raw row-major buffers.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c += a^T * b  (a: k x m, b: k x n)
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            if (av == 0.0) continue;
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c += a * b^T  (a: m x k, b: n x k)
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw DimensionError("matmul inner extents differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    Tensor c({a.rows(), b.cols()}, 0.0);
    gemm_acc(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
    return c;
}

inline Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    Tensor t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

// Softmax along the last axis, one row at a time.
inline Tensor softmax(const Tensor& x) {
    Tensor y(x.shape());
    const std::size_t n = x.cols();
    for (std::size_t r = 0; r < x.size() / n; ++r) {
        const double* in = x.data() + r * n;
        double* out = y.data() + r * n;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) m = std::max(m, in[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += (out[j] = std::exp(in[j] - m));
        for (std::size_t j = 0; j < n; ++j) out[j] /= s;
    }
    return y;
}

inline Tensor log_softmax(const Tensor& x) {
    Tensor y(x.shape());
    const std::size_t n = x.cols();
    for (std::size_t r = 0; r < x.size() / n; ++r) {
        const double* in = x.data() + r * n;
        double* out = y.data() + r * n;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) m = std::max(m, in[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(in[j] - m);
        const double lse = m + std::log(s);
        for (std::size_t j = 0; j < n; ++j) out[j] = in[j] - lse;
    }
    return y;
}

// Per-row normalization over the last axis, then gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t d = x.cols();
    if (gain.size() != d || bias.size() != d)
        throw DimensionError("layer_norm affine size mismatch for " + shape_string(x.shape()));
    Tensor y(x.shape());
    for (std::size_t r = 0; r < x.size() / d; ++r) {
        const double* in = x.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        double* out = y.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) out[j] = (in[j] - mean) * inv * gain[j] + bias[j];
    }
    return y;
}

// Source position and blend weight of output frame f when stretching t
// frames onto `target` frames with both endpoints pinned.
struct ResampleTap {
    std::size_t lo;
    std::size_t hi;
    double w_hi;
};

inline std::vector<ResampleTap> resample_taps(std::size_t t, std::size_t target) {
    std::vector<ResampleTap> taps(target);
    for (std::size_t f = 0; f < target; ++f) {
        if (t == 1) {
            taps[f] = {0, 0, 0.0};
            continue;
        }
        if (target == 1) {
            taps[f] = {0, 0, 0.0};
            continue;
        }
        const double pos = static_cast<double>(f) * static_cast<double>(t - 1) / static_cast<double>(target - 1);
        std::size_t lo = static_cast<std::size_t>(std::floor(pos));
        if (lo >= t - 1) lo = t - 1;
        const std::size_t hi = std::min(lo + 1, t - 1);
        taps[f] = {lo, hi, pos - static_cast<double>(lo)};
    }
    return taps;
}

inline Tensor temporal_resample(const Tensor& x, std::size_t target) {
    if (x.empty()) throw EmptySequenceError("temporal_resample of an empty sequence");
    require_rank2(x, "temporal_resample");
    if (target == 0) throw DomainError("temporal_resample target length must be >= 1");
    const std::size_t t = x.rows();
    if (t == target) return x;
    const std::size_t d = x.cols();
    Tensor y({target, d});
    const auto taps = resample_taps(t, target);
    for (std::size_t f = 0; f < target; ++f) {
        const auto& tp = taps[f];
        for (std::size_t c = 0; c < d; ++c)
            y(f, c) = (1.0 - tp.w_hi) * x(tp.lo, c) + tp.w_hi * x(tp.hi, c);
    }
    return y;
}

} // namespace kernel

// ---------------------------------------------------------------------------
// Differentiable ops

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var parameter(Tensor t) { return Var(std::move(t), true); }

inline void require_same_shape(const Var& a, const Var& b, const char* what) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return record(std::move(out), {a, b}, [](Node& n) {
        for (auto& p : n.parents)
            if (p->requires_grad) p->accumulate(n.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return record(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return record(std::move(out), {a, b}, [](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->requires_grad) {
            Tensor& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa->value[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.storage()) v *= s;
    return record(std::move(out), {a}, [s](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.storage()) v += s;
    return record(std::move(out), {a}, [](Node& n) { n.parents[0]->accumulate(n.grad); });
}

// a * s where s is a differentiable scalar ([1]).
inline Var mul_scalar(const Var& a, const Var& s) {
    if (s.value().size() != 1) throw DimensionError("mul_scalar expects a [1] scalar");
    const double sv = s.value()[0];
    Tensor out = a.value();
    for (auto& v : out.storage()) v *= sv;
    return record(std::move(out), {a, s}, [](Node& n) {
        auto& pa = n.parents[0];
        auto& ps = n.parents[1];
        const double sv = ps->value[0];
        if (pa->requires_grad) {
            Tensor& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sv * n.grad[i];
        }
        if (ps->requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * pa->value[i];
            ps->grad_buffer()[0] += acc;
        }
    });
}

inline Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return record(std::move(out), {a}, [](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

// x[r, c] + b[c]
inline Var add_row(const Var& x, const Var& b) {
    const std::size_t c = x.cols();
    if (b.value().size() != c)
        throw DimensionError("add_row: bias " + shape_string(b.shape()) + " vs " + shape_string(x.shape()));
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i % c];
    return record(std::move(out), {x, b}, [c](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % c] += n.grad[i];
        }
    });
}

// x[r, c] * s[c]
inline Var mul_row(const Var& x, const Var& s) {
    const std::size_t c = x.cols();
    if (s.value().size() != c)
        throw DimensionError("mul_row: scale " + shape_string(s.shape()) + " vs " + shape_string(x.shape()));
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s.value()[i % c];
    return record(std::move(out), {x, s}, [c](Node& n) {
        auto& px = n.parents[0];
        auto& ps = n.parents[1];
        if (px->requires_grad) {
            Tensor& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * ps->value[i % c];
        }
        if (ps->requires_grad) {
            Tensor& g = ps->grad_buffer();
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % c] += n.grad[i] * px->value[i];
        }
    });
}

// x[r, c] * s[r]
inline Var mul_col(const Var& x, const Var& s) {
    const std::size_t r = x.rows();
    const std::size_t c = x.cols();
    if (s.value().size() != r)
        throw DimensionError("mul_col: scale " + shape_string(s.shape()) + " vs " + shape_string(x.shape()));
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s.value()[i / c];
    return record(std::move(out), {x, s}, [c](Node& n) {
        auto& px = n.parents[0];
        auto& ps = n.parents[1];
        if (px->requires_grad) {
            Tensor& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * ps->value[i / c];
        }
        if (ps->requires_grad) {
            Tensor& g = ps->grad_buffer();
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i / c] += n.grad[i] * px->value[i];
        }
    });
}

inline Var matmul(const Var& a, const Var& b) {
    Tensor out = kernel::matmul(a.value(), b.value());
    return record(std::move(out), {a, b}, [](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        const std::size_t m = pa->value.rows(), k = pa->value.cols(), c = pb->value.cols();
        if (pa->requires_grad) kernel::gemm_nt_acc(n.grad.data(), pb->value.data(), pa->grad_buffer().data(), m, c, k);
        if (pb->requires_grad) kernel::gemm_tn_acc(pa->value.data(), n.grad.data(), pb->grad_buffer().data(), m, k, c);
    });
}

inline Var transpose(const Var& a) {
    return record(kernel::transpose(a.value()), {a}, [](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        const std::size_t r = n.grad.rows(), c = n.grad.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g(j, i) += n.grad(i, j);
    });
}

namespace detail {
template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
    Tensor out = a.value();
    for (auto& v : out.storage()) v = f(v);
    return record(std::move(out), {a}, [df](Node& n) {
        auto& p = n.parents[0];
        Tensor& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * df(p->value[i], n.value[i]);
    });
}
} // namespace detail

inline double sigmoid_scalar(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus_scalar(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline Var sigmoid(const Var& a) {
    return detail::unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Var silu(const Var& a) {
    return detail::unary(
        a, [](double x) { return x * sigmoid_scalar(x); },
        [](double x, double) {
            const double s = sigmoid_scalar(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

inline Var softplus(const Var& a) {
    return detail::unary(a, softplus_scalar, [](double x, double) { return sigmoid_scalar(x); });
}

inline Var exp(const Var& a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return record(Tensor::scalar(s), {a}, [](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
    });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// Average over rows (frames): [r x c] -> [c].
inline Var mean_rows(const Var& x) {
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out({c}, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += x.value()(i, j);
    for (auto& v : out.storage()) v /= static_cast<double>(r);
    return record(std::move(out), {x}, [r, c](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        const double inv = 1.0 / static_cast<double>(r);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j] * inv;
    });
}

inline Var softmax(const Var& x) {
    return record(kernel::softmax(x.value()), {x}, [](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        const std::size_t c = n.value.cols();
        for (std::size_t r = 0; r < n.value.size() / c; ++r) {
            const double* y = n.value.data() + r * c;
            const double* gy = n.grad.data() + r * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
            for (std::size_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (gy[j] - dot);
        }
    });
}

inline Var log_softmax(const Var& x) {
    return record(kernel::log_softmax(x.value()), {x}, [](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        const std::size_t c = n.value.cols();
        for (std::size_t r = 0; r < n.value.size() / c; ++r) {
            const double* ly = n.value.data() + r * c;
            const double* gy = n.grad.data() + r * c;
            double total = 0.0;
            for (std::size_t j = 0; j < c; ++j) total += gy[j];
            for (std::size_t j = 0; j < c; ++j) g[r * c + j] += gy[j] - std::exp(ly[j]) * total;
        }
    });
}

inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    Tensor out = kernel::layer_norm(x.value(), gain.value(), bias.value(), eps);
    return record(std::move(out), {x, gain, bias}, [eps](Node& n) {
        auto& px = n.parents[0];
        auto& pg = n.parents[1];
        auto& pb = n.parents[2];
        const std::size_t d = px->value.cols();
        const std::size_t rows = px->value.size() / d;
        std::vector<double> xhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* in = px->value.data() + r * d;
            const double* gy = n.grad.data() + r * d;
            double mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += in[j];
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
            var /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(var + eps);
            for (std::size_t j = 0; j < d; ++j) xhat[j] = (in[j] - mean) * inv;
            if (pg->requires_grad) {
                Tensor& g = pg->grad_buffer();
                for (std::size_t j = 0; j < d; ++j) g[j] += gy[j] * xhat[j];
            }
            if (pb->requires_grad) {
                Tensor& g = pb->grad_buffer();
                for (std::size_t j = 0; j < d; ++j) g[j] += gy[j];
            }
            if (px->requires_grad) {
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double gh = gy[j] * pg->value[j];
                    s1 += gh;
                    s2 += gh * xhat[j];
                }
                Tensor& g = px->grad_buffer();
                const double dd = static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double gh = gy[j] * pg->value[j];
                    g[r * d + j] += inv * (gh - s1 / dd - xhat[j] * s2 / dd);
                }
            }
        }
    });
}

inline Var temporal_resample(const Var& x, std::size_t target) {
    if (x.value().empty()) throw EmptySequenceError("temporal_resample of an empty sequence");
    kernel::require_rank2(x.value(), "temporal_resample");
    if (x.rows() == target) return x;
    const std::size_t t = x.rows();
    Tensor out = kernel::temporal_resample(x.value(), target);
    return record(std::move(out), {x}, [t, target](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        const auto taps = kernel::resample_taps(t, target);
        const std::size_t d = n.grad.cols();
        for (std::size_t f = 0; f < target; ++f) {
            const auto& tp = taps[f];
            for (std::size_t c = 0; c < d; ++c) {
                g(tp.lo, c) += (1.0 - tp.w_hi) * n.grad(f, c);
                g(tp.hi, c) += tp.w_hi * n.grad(f, c);
            }
        }
    });
}

// Same-padded cross-correlation: x [L x Cin], kernel [k x Cin x Cout].
inline Var conv1d(const Var& x, const Var& kernel) {
    const Tensor& xv = x.value();
    const Tensor& kv = kernel.value();
    kernel::require_rank2(xv, "conv1d");
    if (kv.rank() != 3) throw DimensionError("conv1d kernel must be [k x Cin x Cout], got " + shape_string(kv.shape()));
    const std::size_t k = kv.dim(0), cin = kv.dim(1), cout = kv.dim(2);
    if (k % 2 == 0) throw ConfigError("conv1d same padding needs an odd kernel, got k=" + std::to_string(k));
    if (cin != xv.cols()) throw DimensionError("conv1d channel mismatch: " + shape_string(xv.shape()) + " vs " + shape_string(kv.shape()));
    const std::size_t len = xv.rows();
    const long half = static_cast<long>(k / 2);
    Tensor out({len, cout}, 0.0);
    for (std::size_t l = 0; l < len; ++l)
        for (std::size_t tap = 0; tap < k; ++tap) {
            const long src = static_cast<long>(l) + static_cast<long>(tap) - half;
            if (src < 0 || src >= static_cast<long>(len)) continue;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const double xvv = xv(static_cast<std::size_t>(src), ci);
                const double* kr = kv.data() + (tap * cin + ci) * cout;
                for (std::size_t co = 0; co < cout; ++co) out(l, co) += xvv * kr[co];
            }
        }
    return record(std::move(out), {x, kernel}, [len, k, cin, cout, half](Node& n) {
        auto& px = n.parents[0];
        auto& pk = n.parents[1];
        for (std::size_t l = 0; l < len; ++l)
            for (std::size_t tap = 0; tap < k; ++tap) {
                const long src = static_cast<long>(l) + static_cast<long>(tap) - half;
                if (src < 0 || src >= static_cast<long>(len)) continue;
                const auto s = static_cast<std::size_t>(src);
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const std::size_t kbase = (tap * cin + ci) * cout;
                    for (std::size_t co = 0; co < cout; ++co) {
                        const double gy = n.grad(l, co);
                        if (px->requires_grad) px->grad_buffer()(s, ci) += gy * pk->value[kbase + co];
                        if (pk->requires_grad) pk->grad_buffer()[kbase + co] += gy * px->value(s, ci);
                    }
                }
            }
    });
}

// Causal depthwise conv: y[l, c] = bias[c] + sum_j kernel[j, c] * x[l - (k-1) + j, c],
// zero for negative indices.
inline Var causal_depthwise_conv(const Var& x, const Var& kernel, const Var& bias) {
    const Tensor& xv = x.value();
    const Tensor& kv = kernel.value();
    const std::size_t len = xv.rows(), ch = xv.cols();
    if (kv.rank() != 2 || kv.cols() != ch || bias.value().size() != ch)
        throw DimensionError("causal_depthwise_conv: kernel " + shape_string(kv.shape()) + " for input " + shape_string(xv.shape()));
    const std::size_t k = kv.rows();
    Tensor out({len, ch});
    for (std::size_t l = 0; l < len; ++l)
        for (std::size_t c = 0; c < ch; ++c) {
            double s = bias.value()[c];
            for (std::size_t j = 0; j < k; ++j) {
                const long src = static_cast<long>(l) - static_cast<long>(k - 1) + static_cast<long>(j);
                if (src >= 0) s += kv(j, c) * xv(static_cast<std::size_t>(src), c);
            }
            out(l, c) = s;
        }
    return record(std::move(out), {x, kernel, bias}, [len, ch, k](Node& n) {
        auto& px = n.parents[0];
        auto& pk = n.parents[1];
        auto& pb = n.parents[2];
        for (std::size_t l = 0; l < len; ++l)
            for (std::size_t c = 0; c < ch; ++c) {
                const double gy = n.grad(l, c);
                if (pb->requires_grad) pb->grad_buffer()[c] += gy;
                for (std::size_t j = 0; j < k; ++j) {
                    const long src = static_cast<long>(l) - static_cast<long>(k - 1) + static_cast<long>(j);
                    if (src < 0) continue;
                    const auto s = static_cast<std::size_t>(src);
                    if (px->requires_grad) px->grad_buffer()(s, c) += gy * pk->value(j, c);
                    if (pk->requires_grad) pk->grad_buffer()(j, c) += gy * px->value(s, c);
                }
            }
    });
}

inline Var select_rows(const Var& x, std::vector<std::size_t> idx) {
    if (idx.empty()) throw EmptySequenceError("select_rows with no indices");
    const std::size_t c = x.cols();
    Tensor out({idx.size(), c});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= x.rows()) throw DimensionError("select_rows index out of range");
        for (std::size_t j = 0; j < c; ++j) out(i, j) = x.value()(idx[i], j);
    }
    return record(std::move(out), {x}, [idx = std::move(idx), c](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) g(idx[i], j) += n.grad(i, j);
    });
}

inline Var reverse_rows(const Var& x) {
    std::vector<std::size_t> idx(x.rows());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = idx.size() - 1 - i;
    return select_rows(x, std::move(idx));
}

// Stacks row blocks with equal column counts.
inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw EmptySequenceError("concat_rows of nothing");
    const std::size_t c = parts.front().cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.cols() != c) throw DimensionError("concat_rows column mismatch");
        total += p.value().size() / c;
    }
    Tensor out({total, c});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
        off += p.value().size();
    }
    return record(std::move(out), parts, [](Node& n) {
        std::size_t off = 0;
        for (auto& p : n.parents) {
            const std::size_t sz = p->value.size();
            if (p->requires_grad) {
                Tensor& g = p->grad_buffer();
                for (std::size_t i = 0; i < sz; ++i) g[i] += n.grad[off + i];
            }
            off += sz;
        }
    });
}

inline Var slice_cols(const Var& x, std::size_t start, std::size_t count) {
    const std::size_t r = x.rows(), c = x.cols();
    if (start + count > c) throw DimensionError("slice_cols out of range");
    Tensor out({r, count});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = x.value()(i, start + j);
    return record(std::move(out), {x}, [start, count, r](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < count; ++j) g(i, start + j) += n.grad(i, j);
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw EmptySequenceError("concat_cols of nothing");
    const std::size_t r = parts.front().rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rows() != r || p.value().rank() != 2) throw DimensionError("concat_cols row mismatch");
        total += p.cols();
    }
    Tensor out({r, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
        off += p.cols();
    }
    return record(std::move(out), parts, [r](Node& n) {
        std::size_t off = 0;
        for (auto& p : n.parents) {
            const std::size_t pc = p->value.cols();
            if (p->requires_grad) {
                Tensor& g = p->grad_buffer();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < pc; ++j) g(i, j) += n.grad(i, off + j);
            }
            off += pc;
        }
    });
}

// Scales each row to unit L2 norm; norms below `floor` are clamped to it.
inline Var row_normalize(const Var& x, double floor = 1e-8) {
    const std::size_t c = x.cols();
    const std::size_t r = x.value().size() / c;
    Tensor out = x.value();
    std::vector<double> norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += out[i * c + j] * out[i * c + j];
        norms[i] = std::max(std::sqrt(s), floor);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= norms[i];
    }
    return record(std::move(out), {x}, [norms = std::move(norms), c, floor](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < norms.size(); ++i) {
            const double* y = n.value.data() + i * c;
            const double* gy = n.grad.data() + i * c;
            if (norms[i] <= floor) {
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += gy[j] / norms[i];
                continue;
            }
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += (gy[j] - y[j] * dot) / norms[i];
        }
    });
}

// Minimum along `axis` of a matrix (0: over rows -> [cols], 1: over cols -> [rows]).
// The gradient flows to the first minimizing entry.
inline Var min_axis(const Var& x, int axis) {
    kernel::require_rank2(x.value(), "min_axis");
    const std::size_t r = x.rows(), c = x.cols();
    const std::size_t n_out = axis == 0 ? c : r;
    Tensor out({n_out});
    std::vector<std::size_t> arg(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t where = 0;
        const std::size_t len = axis == 0 ? r : c;
        for (std::size_t i = 0; i < len; ++i) {
            const std::size_t flat = axis == 0 ? i * c + o : o * c + i;
            if (x.value()[flat] < best) {
                best = x.value()[flat];
                where = flat;
            }
        }
        out[o] = best;
        arg[o] = where;
    }
    return record(std::move(out), {x}, [arg = std::move(arg)](Node& n) {
        Tensor& g = n.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += n.grad[o];
    });
}

inline Var element(const Var& x, std::size_t i) {
    if (i >= x.value().size()) throw DimensionError("element index out of range");
    return record(Tensor::scalar(x.value()[i]), {x}, [i](Node& n) { n.parents[0]->grad_buffer()[i] += n.grad[0]; });
}

// Weighted sum of equally shaped tensors.
inline Var weighted_sum(const std::vector<Var>& parts, const std::vector<double>& weights) {
    if (parts.empty()) throw EmptySequenceError("weighted_sum of nothing");
    if (parts.size() != weights.size()) throw InconsistencyError("weighted_sum: parts and weights differ in count");
    Tensor out(parts.front().shape(), 0.0);
    for (std::size_t p = 0; p < parts.size(); ++p) {
        if (parts[p].shape() != out.shape()) throw DimensionError("weighted_sum shape mismatch");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[p] * parts[p].value()[i];
    }
    return record(std::move(out), parts, [weights](Node& n) {
        for (std::size_t p = 0; p < n.parents.size(); ++p) {
            if (!n.parents[p]->requires_grad) continue;
            Tensor& g = n.parents[p]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += weights[p] * n.grad[i];
        }
    });
}

// Packs single-element values into one tensor of the given shape.
inline Var stack_scalars(const std::vector<Var>& items, Shape shape) {
    if (shape_numel(shape) != items.size())
        throw DimensionError("stack_scalars: " + std::to_string(items.size()) + " items for shape " + shape_string(shape));
    Tensor out(std::move(shape));
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].value().size() != 1) throw DimensionError("stack_scalars expects single-element inputs");
        out[i] = items[i].value()[0];
    }
    return record(std::move(out), items, [](Node& n) {
        for (std::size_t i = 0; i < n.parents.size(); ++i)
            if (n.parents[i]->requires_grad) n.parents[i]->grad_buffer()[0] += n.grad[i];
    });
}

template <class Rng>
Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = dist(rng);
    return t;
}

} // namespace star
