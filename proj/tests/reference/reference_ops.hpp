#pragma once

// Straightforward double-precision loop implementations of every network
// operation. They share no code with the library kernels and serve as the
// function under central finite differences in the gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "fedskel/tensor.hpp"

namespace ref {

using Vec = std::vector<double>;

inline Vec to_double(std::span<const float> v) { return Vec(v.begin(), v.end()); }

inline Vec matmul(const Vec& a, const Vec& b, int64_t m, int64_t k, int64_t n) {
    Vec c(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
    return c;
}

inline Vec softmax_rows(const Vec& x, int64_t n, int64_t c, double temperature = 1.0) {
    Vec y(x.size());
    for (int64_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < c; ++j) mx = std::max(mx, x[i * c + j] / temperature);
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) z += std::exp(x[i * c + j] / temperature - mx);
        for (int64_t j = 0; j < c; ++j) y[i * c + j] = std::exp(x[i * c + j] / temperature - mx) / z;
    }
    return y;
}

// x: [N, Cin, T, V], w: [Cout, Cin, kt]
inline Vec temporal_conv(const Vec& x, const Vec& w, int64_t n, int64_t cin, int64_t t, int64_t v, int64_t cout,
                         int64_t kt, int64_t stride, int64_t* tout_out = nullptr) {
    const int64_t pad = (kt - 1) / 2;
    const int64_t tout = (t + stride - 1) / stride;
    if (tout_out) *tout_out = tout;
    Vec y(static_cast<size_t>(n * cout * tout * v), 0.0);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t o = 0; o < cout; ++o)
            for (int64_t to = 0; to < tout; ++to)
                for (int64_t j = 0; j < v; ++j) {
                    double s = 0.0;
                    for (int64_t ci = 0; ci < cin; ++ci)
                        for (int64_t k = 0; k < kt; ++k) {
                            const int64_t ti = to * stride + k - pad;
                            if (ti < 0 || ti >= t) continue;
                            s += w[(o * cin + ci) * kt + k] * x[((b * cin + ci) * t + ti) * v + j];
                        }
                    y[((b * cout + o) * tout + to) * v + j] = s;
                }
    return y;
}

// training-mode batch norm over N*T*V per channel
inline Vec batchnorm_train(const Vec& x, const Vec& gamma, const Vec& beta, int64_t n, int64_t c, int64_t plane,
                           double eps = 1e-5) {
    Vec y(x.size());
    for (int64_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int64_t b = 0; b < n; ++b)
            for (int64_t j = 0; j < plane; ++j) s += x[(b * c + ch) * plane + j];
        const double mu = s / static_cast<double>(n * plane);
        double sq = 0.0;
        for (int64_t b = 0; b < n; ++b)
            for (int64_t j = 0; j < plane; ++j) {
                const double d = x[(b * c + ch) * plane + j] - mu;
                sq += d * d;
            }
        const double var = sq / static_cast<double>(n * plane);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t b = 0; b < n; ++b)
            for (int64_t j = 0; j < plane; ++j) {
                const int64_t k = (b * c + ch) * plane + j;
                y[k] = (x[k] - mu) * inv * gamma[ch] + beta[ch];
            }
    }
    return y;
}

// Spatial graph convolution: y[b,o,t,w] = sum_s sum_c W[o,s,c] sum_v x[b,c,t,v] adj[s,v,w]
inline Vec graph_conv(const Vec& x, const Vec& adj, const Vec& w, int64_t n, int64_t cin, int64_t t, int64_t v,
                      int64_t s_count, int64_t cout) {
    Vec y(static_cast<size_t>(n * cout * t * v), 0.0);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t o = 0; o < cout; ++o)
            for (int64_t tt = 0; tt < t; ++tt)
                for (int64_t wj = 0; wj < v; ++wj) {
                    double acc = 0.0;
                    for (int64_t s = 0; s < s_count; ++s)
                        for (int64_t c = 0; c < cin; ++c) {
                            double g = 0.0;
                            for (int64_t vj = 0; vj < v; ++vj)
                                g += x[((b * cin + c) * t + tt) * v + vj] * adj[(s * v + vj) * v + wj];
                            acc += w[(o * s_count + s) * cin + c] * g;
                        }
                    y[((b * cout + o) * t + tt) * v + wj] = acc;
                }
    return y;
}

inline Vec relu(Vec x) {
    for (auto& e : x) e = e > 0.0 ? e : 0.0;
    return x;
}

// [N, C, P] -> [N, C]
inline Vec avg_pool(const Vec& x, int64_t n, int64_t c, int64_t plane) {
    Vec y(static_cast<size_t>(n * c), 0.0);
    for (int64_t i = 0; i < n * c; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < plane; ++j) s += x[i * plane + j];
        y[i] = s / static_cast<double>(plane);
    }
    return y;
}

// x: [N, d], w: [o, d], b: [o]
inline Vec linear(const Vec& x, const Vec& w, const Vec& b, int64_t n, int64_t d, int64_t o) {
    Vec y(static_cast<size_t>(n * o));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < o; ++j) {
            double s = b[j];
            for (int64_t p = 0; p < d; ++p) s += x[i * d + p] * w[j * d + p];
            y[i * o + j] = s;
        }
    return y;
}

inline double cross_entropy(const Vec& logits, const std::vector<int>& labels, int64_t c) {
    const int64_t n = static_cast<int64_t>(labels.size());
    Vec p = softmax_rows(logits, n, c);
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) total -= std::log(p[i * c + labels[i]]);
    return total / static_cast<double>(n);
}

inline double kl(const Vec& teacher, const Vec& student, int64_t n, int64_t c, double temperature = 1.0) {
    Vec p = softmax_rows(teacher, n, c, temperature);
    Vec q = softmax_rows(student, n, c, temperature);
    double total = 0.0;
    for (size_t k = 0; k < p.size(); ++k) total += p[k] * (std::log(p[k]) - std::log(q[k]));
    return total / static_cast<double>(n);
}

inline double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Central difference of f at x for every coordinate.
inline Vec finite_difference(const std::function<double(const Vec&)>& f, Vec x, double eps = 1e-6) {
    Vec g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + eps;
        const double up = f(x);
        x[i] = keep - eps;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2.0 * eps);
    }
    return g;
}

struct GradMismatch {
    size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    size_t failures = 0;
};

inline GradMismatch compare_gradients(std::span<const float> analytic, const Vec& numeric, double rtol = 1e-3,
                                      double atol = 1e-5) {
    GradMismatch worst;
    for (size_t i = 0; i < numeric.size(); ++i) {
        const double a = analytic.empty() ? 0.0 : analytic[i];
        if (std::abs(a - numeric[i]) > atol + rtol * std::abs(numeric[i])) {
            if (worst.failures++ == 0) worst = {i, a, numeric[i], 1};
        }
    }
    return worst;
}

inline std::vector<float> random_values(size_t n, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> d(lo, hi);
    std::vector<float> out(n);
    for (auto& x : out) x = d(rng);
    return out;
}

}  // namespace ref
