#include <cmath>
#include <string>

#include "fedskel/errors.hpp"
#include "fedskel/tensor.hpp"
#include "tensor_internal.hpp"

namespace fedskel {

namespace {

struct Dims4 {
    int64_t n, c, t, v;
};

Dims4 dims4(const Tensor& x, const char* op) {
    if (x.rank() != 4) {
        throw DimensionError(std::string(op) + " expects [N x C x T x V] input, got " + shape_str(x.shape()));
    }
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

// col[(ci*kt + k), to*V + v] = x[ci, to*stride + k - pad, v]
void im2col(const float* x, float* col, int64_t cin, int64_t t, int64_t v, int64_t kt, int64_t stride,
            int64_t tout) {
    const int64_t pad = (kt - 1) / 2;
    for (int64_t ci = 0; ci < cin; ++ci) {
        for (int64_t k = 0; k < kt; ++k) {
            float* row = col + (ci * kt + k) * tout * v;
            for (int64_t to = 0; to < tout; ++to) {
                const int64_t ti = to * stride + k - pad;
                float* dst = row + to * v;
                if (ti < 0 || ti >= t) {
                    for (int64_t j = 0; j < v; ++j) dst[j] = 0.0f;
                } else {
                    const float* src = x + (ci * t + ti) * v;
                    for (int64_t j = 0; j < v; ++j) dst[j] = src[j];
                }
            }
        }
    }
}

void col2im_add(const float* col, float* dx, int64_t cin, int64_t t, int64_t v, int64_t kt, int64_t stride,
                int64_t tout) {
    const int64_t pad = (kt - 1) / 2;
    for (int64_t ci = 0; ci < cin; ++ci) {
        for (int64_t k = 0; k < kt; ++k) {
            const float* row = col + (ci * kt + k) * tout * v;
            for (int64_t to = 0; to < tout; ++to) {
                const int64_t ti = to * stride + k - pad;
                if (ti < 0 || ti >= t) continue;
                const float* src = row + to * v;
                float* dst = dx + (ci * t + ti) * v;
                for (int64_t j = 0; j < v; ++j) dst[j] += src[j];
            }
        }
    }
}

}  // namespace

Tensor temporal_conv1d(const Tensor& x, const Tensor& kernel, int stride) {
    if (x.rank() == 3) {
        Tensor batched = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
        Tensor y = temporal_conv1d(batched, kernel, stride);
        return reshape(y, {y.dim(1), y.dim(2), y.dim(3)});
    }
    const auto [n, cin, t, v] = dims4(x, "temporal_conv1d");
    if (kernel.rank() != 3 || kernel.dim(1) != cin) {
        throw DimensionError("temporal_conv1d kernel " + shape_str(kernel.shape()) + " incompatible with input " +
                             shape_str(x.shape()));
    }
    const int64_t cout = kernel.dim(0), kt = kernel.dim(2);
    if (kt % 2 == 0) throw ConfigError("temporal kernel size must be odd, got " + std::to_string(kt));
    if (stride < 1) throw ConfigError("temporal stride must be >= 1, got " + std::to_string(stride));
    const int64_t tout = (t + stride - 1) / stride;
    const int64_t rows = cin * kt, cols = tout * v;

    std::vector<float> out(static_cast<size_t>(n * cout * cols));
    std::vector<float> col(static_cast<size_t>(rows * cols));
    CMapR w(kernel.data().data(), cout, rows);
    for (int64_t i = 0; i < n; ++i) {
        im2col(x.data().data() + i * cin * t * v, col.data(), cin, t, v, kt, stride, tout);
        MapR(out.data() + i * cout * cols, cout, cols).noalias() = w * CMapR(col.data(), rows, cols);
    }
    auto* xn = x.node().get();
    auto* kn = kernel.node().get();
    return detail::make_result(
        {n, cout, tout, v}, std::move(out), {&x, &kernel},
        [xn, kn, n, cin, t, v, cout, kt, stride, tout, rows, cols](detail::Node& self) {
            float* gx = detail::grad_of(xn);
            float* gk = detail::grad_of(kn);
            std::vector<float> col(static_cast<size_t>(rows * cols));
            std::vector<float> dcol(gx ? col.size() : 0);
            CMapR w(kn->value.data(), cout, rows);
            for (int64_t i = 0; i < n; ++i) {
                CMapR dy(self.grad.data() + i * cout * cols, cout, cols);
                if (gk) {
                    im2col(xn->value.data() + i * cin * t * v, col.data(), cin, t, v, kt, stride, tout);
                    MapR(gk, cout, rows).noalias() += dy * CMapR(col.data(), rows, cols).transpose();
                }
                if (gx) {
                    MapR(dcol.data(), rows, cols).noalias() = w.transpose() * dy;
                    col2im_add(dcol.data(), gx + i * cin * t * v, cin, t, v, kt, stride, tout);
                }
            }
        });
}

BatchNormState BatchNormState::create(int64_t channels) {
    BatchNormState s;
    s.scale = Tensor::full({channels}, 1.0f).set_requires_grad(true);
    s.shift = Tensor::zeros({channels}).set_requires_grad(true);
    s.running_mean = Tensor::zeros({channels});
    s.running_var = Tensor::full({channels}, 1.0f);
    return s;
}

Tensor batchnorm(const Tensor& x, const BatchNormState& state, bool training, bool update_running) {
    const auto [n, c, t, v] = dims4(x, "batchnorm");
    if (state.channels() != c) {
        throw DimensionError("batchnorm expects " + std::to_string(state.channels()) + " channels, input is " +
                             shape_str(x.shape()));
    }
    const int64_t plane = t * v;
    const int64_t count = n * plane;
    auto xv = x.data();
    auto gamma = state.scale.data();
    auto beta = state.shift.data();

    std::vector<float> mean(static_cast<size_t>(c)), invstd(static_cast<size_t>(c));
    if (training) {
        for (int64_t ch = 0; ch < c; ++ch) {
            float s = 0.0f;
            for (int64_t i = 0; i < n; ++i) {
                const float* p = xv.data() + (i * c + ch) * plane;
                for (int64_t j = 0; j < plane; ++j) s += p[j];
            }
            const float mu = s / static_cast<float>(count);
            float sq = 0.0f;
            for (int64_t i = 0; i < n; ++i) {
                const float* p = xv.data() + (i * c + ch) * plane;
                for (int64_t j = 0; j < plane; ++j) {
                    const float d = p[j] - mu;
                    sq += d * d;
                }
            }
            const float var = sq / static_cast<float>(count);
            mean[ch] = mu;
            invstd[ch] = 1.0f / std::sqrt(var + kBatchNormEps);
            if (update_running) {
                auto rm = state.running_mean.mutable_data();
                auto rv = state.running_var.mutable_data();
                const float unbiased = count > 1 ? sq / static_cast<float>(count - 1) : var;
                rm[ch] = (1.0f - kBatchNormMomentum) * rm[ch] + kBatchNormMomentum * mu;
                rv[ch] = (1.0f - kBatchNormMomentum) * rv[ch] + kBatchNormMomentum * unbiased;
            }
        }
    } else {
        auto rm = state.running_mean.data();
        auto rv = state.running_var.data();
        for (int64_t ch = 0; ch < c; ++ch) {
            mean[ch] = rm[ch];
            invstd[ch] = 1.0f / std::sqrt(rv[ch] + kBatchNormEps);
        }
    }

    std::vector<float> out(xv.size());
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const int64_t off = (i * c + ch) * plane;
            for (int64_t j = 0; j < plane; ++j) {
                const float xhat = (xv[off + j] - mean[ch]) * invstd[ch];
                out[off + j] = xhat * gamma[ch] + beta[ch];
            }
        }
    }

    auto* xn = x.node().get();
    auto* gn = state.scale.node().get();
    auto* bn = state.shift.node().get();
    return detail::make_result(
        x.shape(), std::move(out), {&x, &state.scale, &state.shift},
        [xn, gn, bn, n, c, plane, count, training, mean = std::move(mean),
         invstd = std::move(invstd)](detail::Node& self) {
            float* gx = detail::grad_of(xn);
            float* gg = detail::grad_of(gn);
            float* gb = detail::grad_of(bn);
            const float* dy = self.grad.data();
            const float* xv = xn->value.data();
            for (int64_t ch = 0; ch < c; ++ch) {
                float sum_dy = 0.0f, sum_dy_xhat = 0.0f;
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t off = (i * c + ch) * plane;
                    for (int64_t j = 0; j < plane; ++j) {
                        const float xhat = (xv[off + j] - mean[ch]) * invstd[ch];
                        sum_dy += dy[off + j];
                        sum_dy_xhat += dy[off + j] * xhat;
                    }
                }
                if (gg) gg[ch] += sum_dy_xhat;
                if (gb) gb[ch] += sum_dy;
                if (!gx) continue;
                const float g = gn->value[ch];
                if (training) {
                    const float inv_count = 1.0f / static_cast<float>(count);
                    for (int64_t i = 0; i < n; ++i) {
                        const int64_t off = (i * c + ch) * plane;
                        for (int64_t j = 0; j < plane; ++j) {
                            const float xhat = (xv[off + j] - mean[ch]) * invstd[ch];
                            gx[off + j] += g * invstd[ch] *
                                           (dy[off + j] - inv_count * sum_dy - xhat * inv_count * sum_dy_xhat);
                        }
                    }
                } else {
                    for (int64_t i = 0; i < n; ++i) {
                        const int64_t off = (i * c + ch) * plane;
                        for (int64_t j = 0; j < plane; ++j) gx[off + j] += dy[off + j] * g * invstd[ch];
                    }
                }
            }
        });
}

Tensor adjacency_apply(const Tensor& x, const Tensor& adjacency) {
    const auto [n, c, t, v] = dims4(x, "adjacency_apply");
    if (adjacency.rank() != 3 || adjacency.dim(1) != v || adjacency.dim(2) != v) {
        throw DimensionError("adjacency " + shape_str(adjacency.shape()) + " incompatible with input " +
                             shape_str(x.shape()));
    }
    const int64_t s_count = adjacency.dim(0);
    const int64_t rows = c * t;
    std::vector<float> out(static_cast<size_t>(n * s_count * rows * v));
    for (int64_t i = 0; i < n; ++i) {
        CMapR xi(x.data().data() + i * rows * v, rows, v);
        for (int64_t s = 0; s < s_count; ++s) {
            MapR(out.data() + (i * s_count + s) * rows * v, rows, v).noalias() =
                xi * CMapR(adjacency.data().data() + s * v * v, v, v);
        }
    }
    auto* xn = x.node().get();
    auto* an = adjacency.node().get();
    return detail::make_result(
        {n, s_count * c, t, v}, std::move(out), {&x, &adjacency},
        [xn, an, n, s_count, rows, v](detail::Node& self) {
            float* gx = detail::grad_of(xn);
            float* ga = detail::grad_of(an);
            for (int64_t i = 0; i < n; ++i) {
                for (int64_t s = 0; s < s_count; ++s) {
                    CMapR dz(self.grad.data() + (i * s_count + s) * rows * v, rows, v);
                    if (gx) {
                        MapR(gx + i * rows * v, rows, v).noalias() +=
                            dz * CMapR(an->value.data() + s * v * v, v, v).transpose();
                    }
                    if (ga) {
                        MapR(ga + s * v * v, v, v).noalias() +=
                            CMapR(xn->value.data() + i * rows * v, rows, v).transpose() * dz;
                    }
                }
            }
        });
}

Tensor channel_mix(const Tensor& z, const Tensor& weight) {
    const auto [n, cz, t, v] = dims4(z, "channel_mix");
    if (weight.rank() < 2 || weight.numel() != weight.dim(0) * cz) {
        throw DimensionError("channel_mix weight " + shape_str(weight.shape()) + " incompatible with input " +
                             shape_str(z.shape()));
    }
    const int64_t cout = weight.dim(0), plane = t * v;
    std::vector<float> out(static_cast<size_t>(n * cout * plane));
    CMapR w(weight.data().data(), cout, cz);
    for (int64_t i = 0; i < n; ++i) {
        MapR(out.data() + i * cout * plane, cout, plane).noalias() =
            w * CMapR(z.data().data() + i * cz * plane, cz, plane);
    }
    auto* zn = z.node().get();
    auto* wn = weight.node().get();
    return detail::make_result({n, cout, t, v}, std::move(out), {&z, &weight},
                               [zn, wn, n, cz, cout, plane](detail::Node& self) {
                                   float* gz = detail::grad_of(zn);
                                   float* gw = detail::grad_of(wn);
                                   CMapR w(wn->value.data(), cout, cz);
                                   for (int64_t i = 0; i < n; ++i) {
                                       CMapR dy(self.grad.data() + i * cout * plane, cout, plane);
                                       if (gw) {
                                           MapR(gw, cout, cz).noalias() +=
                                               dy * CMapR(zn->value.data() + i * cz * plane, cz, plane).transpose();
                                       }
                                       if (gz) MapR(gz + i * cz * plane, cz, plane).noalias() += w.transpose() * dy;
                                   }
                               });
}

Tensor global_avg_pool(const Tensor& x) {
    const auto [n, c, t, v] = dims4(x, "global_avg_pool");
    const int64_t plane = t * v;
    const float inv = 1.0f / static_cast<float>(plane);
    std::vector<float> out(static_cast<size_t>(n * c));
    auto xv = x.data();
    for (int64_t i = 0; i < n * c; ++i) {
        float s = 0.0f;
        for (int64_t j = 0; j < plane; ++j) s += xv[i * plane + j];
        out[i] = s * inv;
    }
    auto* xn = x.node().get();
    return detail::make_result({n, c}, std::move(out), {&x}, [xn, n, c, plane, inv](detail::Node& self) {
        if (float* g = detail::grad_of(xn)) {
            for (int64_t i = 0; i < n * c; ++i) {
                const float d = self.grad[i] * inv;
                for (int64_t j = 0; j < plane; ++j) g[i * plane + j] += d;
            }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || weight.dim(1) != x.dim(1) || bias.numel() != weight.dim(0)) {
        throw DimensionError("linear shape mismatch: input " + shape_str(x.shape()) + ", weight " +
                             shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
    }
    const int64_t n = x.dim(0), d = x.dim(1), o = weight.dim(0);
    std::vector<float> out(static_cast<size_t>(n * o));
    MapR y(out.data(), n, o);
    y.noalias() = CMapR(x.data().data(), n, d) * CMapR(weight.data().data(), o, d).transpose();
    auto bv = bias.data();
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < o; ++j) y(i, j) += bv[j];
    }
    auto* xn = x.node().get();
    auto* wn = weight.node().get();
    auto* bn = bias.node().get();
    return detail::make_result({n, o}, std::move(out), {&x, &weight, &bias},
                               [xn, wn, bn, n, d, o](detail::Node& self) {
                                   CMapR dy(self.grad.data(), n, o);
                                   if (float* gx = detail::grad_of(xn)) {
                                       MapR(gx, n, d).noalias() += dy * CMapR(wn->value.data(), o, d);
                                   }
                                   if (float* gw = detail::grad_of(wn)) {
                                       MapR(gw, o, d).noalias() += dy.transpose() * CMapR(xn->value.data(), n, d);
                                   }
                                   if (float* gb = detail::grad_of(bn)) {
                                       for (int64_t i = 0; i < n; ++i) {
                                           for (int64_t j = 0; j < o; ++j) gb[j] += dy(i, j);
                                       }
                                   }
                               });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<int64_t>(labels.size())) {
        throw DimensionError("cross_entropy expects [n x c] logits matching " + std::to_string(labels.size()) +
                             " labels, got " + shape_str(logits.shape()));
    }
    const int64_t n = logits.dim(0), c = logits.dim(1);
    for (int y : labels) {
        if (y < 0 || y >= c) {
            throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
        }
    }
    std::vector<float> logp(static_cast<size_t>(n * c));
    float total = 0.0f;
    for (int64_t i = 0; i < n; ++i) {
        detail::log_softmax_row(logits.data().data() + i * c, logp.data() + i * c, c, 1.0f);
        total -= logp[i * c + labels[i]];
    }
    const float inv_n = 1.0f / static_cast<float>(n);
    std::vector<int> ys(labels.begin(), labels.end());
    auto* ln = logits.node().get();
    return detail::make_result({}, {total * inv_n}, {&logits},
                               [ln, n, c, inv_n, ys = std::move(ys), logp = std::move(logp)](detail::Node& self) {
                                   float* g = detail::grad_of(ln);
                                   if (!g) return;
                                   const float d = self.grad[0] * inv_n;
                                   for (int64_t i = 0; i < n; ++i) {
                                       for (int64_t j = 0; j < c; ++j) {
                                           const float p = std::exp(logp[i * c + j]);
                                           g[i * c + j] += d * (p - (j == ys[i] ? 1.0f : 0.0f));
                                       }
                                   }
                               });
}

Tensor kl_divergence(const Tensor& teacher_logits, const Tensor& student_logits, float temperature) {
    if (teacher_logits.rank() != 2 || teacher_logits.shape() != student_logits.shape()) {
        throw DimensionError("kl_divergence shape mismatch: " + shape_str(teacher_logits.shape()) + " vs " +
                             shape_str(student_logits.shape()));
    }
    if (!(temperature > 0.0f)) throw ConfigError("kd temperature must be positive");
    const int64_t n = student_logits.dim(0), c = student_logits.dim(1);
    const float inv_t = 1.0f / temperature;
    std::vector<float> p(static_cast<size_t>(n * c)), logp(p.size()), logq(p.size());
    float total = 0.0f;
    for (int64_t i = 0; i < n; ++i) {
        detail::softmax_row(teacher_logits.data().data() + i * c, p.data() + i * c, c, inv_t);
        detail::log_softmax_row(teacher_logits.data().data() + i * c, logp.data() + i * c, c, inv_t);
        detail::log_softmax_row(student_logits.data().data() + i * c, logq.data() + i * c, c, inv_t);
        for (int64_t j = 0; j < c; ++j) {
            const size_t k = static_cast<size_t>(i * c + j);
            if (p[k] > 0.0f) total += p[k] * (logp[k] - logq[k]);
        }
    }
    const float inv_n = 1.0f / static_cast<float>(n);
    auto* sn = student_logits.node().get();
    // Only the student participates; the teacher is a fixed target.
    return detail::make_result(
        {}, {total * inv_n}, {&student_logits},
        [sn, n, c, inv_n, inv_t, p = std::move(p), logq = std::move(logq)](detail::Node& self) {
            float* g = detail::grad_of(sn);
            if (!g) return;
            const float d = self.grad[0] * inv_n * inv_t;
            for (size_t k = 0; k < static_cast<size_t>(n * c); ++k) g[k] += d * (std::exp(logq[k]) - p[k]);
        });
}

}  // namespace fedskel
