#include "fedskel/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "fedskel/errors.hpp"
#include "tensor_internal.hpp"

namespace fedskel {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatD to_matrix(const Tensor& t) {
    const int64_t n = t.dim(0);
    const int64_t d = t.numel() / std::max<int64_t>(n, 1);
    return CMapR(t.data().data(), n, d).cast<double>();
}

std::vector<int64_t> chunk(int64_t start, int64_t stop) {
    std::vector<int64_t> r;
    for (int64_t i = start; i < stop; ++i) r.push_back(i);
    return r;
}

Dataset as_dataset(const Tensor& x) { return {x, std::vector<int>(static_cast<size_t>(x.dim(0)), 0)}; }

}  // namespace

double top1_accuracy(const Tensor& logits, std::span<const int> labels) {
    const int64_t n = logits.dim(0), c = logits.dim(1);
    if (n == 0) return 0.0;
    int64_t hit = 0;
    for (int64_t i = 0; i < n; ++i) {
        const float* row = logits.data().data() + i * c;
        const int64_t arg = std::max_element(row, row + c) - row;
        hit += arg == labels[static_cast<size_t>(i)];
    }
    return static_cast<double>(hit) / static_cast<double>(n);
}

double linear_accuracy(const Architecture& arch, const ParamStore& params, const Dataset& data, int batch_size) {
    NoGradGuard ng;
    int64_t hit = 0;
    const int64_t n = data.size();
    for (int64_t s = 0; s < n; s += batch_size) {
        const auto rows = chunk(s, std::min<int64_t>(n, s + batch_size));
        ForwardTrace t = forward(arch, params, data.gather(rows), {false, false});
        const auto labels = data.gather_labels(rows);
        hit += std::lround(top1_accuracy(t.logits, labels) * static_cast<double>(rows.size()));
    }
    return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

Tensor extract_features(const Architecture& arch, const ParamStore& params, const Tensor& x, AdjacencySource source,
                        bool batch_stats, int batch_size) {
    NoGradGuard ng;
    const Dataset d = as_dataset(x);
    const int64_t n = d.size();
    std::vector<float> out;
    int64_t f = 0;
    for (int64_t s = 0; s < n; s += batch_size) {
        const auto rows = chunk(s, std::min<int64_t>(n, s + batch_size));
        ForwardTrace t = forward(arch, params, d.gather(rows), {batch_stats, false, source});
        f = t.h.dim(1);
        out.insert(out.end(), t.h.data().begin(), t.h.data().end());
    }
    return Tensor::from({n, f}, std::move(out));
}

double knn_accuracy(const Tensor& train_features, std::span<const int> train_labels, const Tensor& test_features,
                    std::span<const int> test_labels, int k) {
    if (train_labels.empty()) throw UsageError("k-NN needs a non-empty train split");
    const int64_t ntr = train_features.dim(0), nte = test_features.dim(0);
    if (static_cast<size_t>(ntr) != train_labels.size() || static_cast<size_t>(nte) != test_labels.size()) {
        throw DimensionError("k-NN features and labels disagree in length");
    }
    if (k < 1) throw UsageError("k-NN needs k >= 1");
    MatD a = to_matrix(train_features), b = to_matrix(test_features);
    for (int64_t i = 0; i < a.rows(); ++i) {
        const double nrm = a.row(i).norm();
        if (nrm > 0) a.row(i) /= nrm;
    }
    for (int64_t i = 0; i < b.rows(); ++i) {
        const double nrm = b.row(i).norm();
        if (nrm > 0) b.row(i) /= nrm;
    }
    const MatD sim = b * a.transpose();
    const int64_t kk = std::min<int64_t>(k, ntr);
    int64_t hit = 0;
    std::vector<int64_t> idx(static_cast<size_t>(ntr));
    for (int64_t i = 0; i < nte; ++i) {
        for (int64_t j = 0; j < ntr; ++j) idx[j] = j;
        // nearest first; equal distances resolved by train index for stability
        std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&](int64_t p, int64_t q) {
            if (sim(i, p) != sim(i, q)) return sim(i, p) > sim(i, q);
            return p < q;
        });
        std::map<int, std::pair<int, double>> votes;  // class -> (count, summed distance)
        for (int64_t r = 0; r < kk; ++r) {
            auto& v = votes[train_labels[static_cast<size_t>(idx[r])]];
            v.first += 1;
            v.second += 1.0 - sim(i, idx[r]);
        }
        int best = -1;
        std::pair<int, double> best_v{-1, 0.0};
        for (const auto& [cls, v] : votes) {
            if (v.first > best_v.first || (v.first == best_v.first && v.second < best_v.second)) {
                best = cls;
                best_v = v;
            }
        }
        hit += best == test_labels[static_cast<size_t>(i)];
    }
    return nte ? static_cast<double>(hit) / static_cast<double>(nte) : 0.0;
}

double cka(const Tensor& a, const Tensor& b) {
    if (a.dim(0) != b.dim(0)) {
        throw DimensionError("cka needs equal sample counts, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    MatD x = to_matrix(a), y = to_matrix(b);
    x.rowwise() -= x.colwise().mean();
    y.rowwise() -= y.colwise().mean();
    // Gram form: ||Y^T X||_F^2 = <X X^T, Y Y^T>
    const MatD kx = x * x.transpose(), ky = y * y.transpose();
    const double nx = kx.norm(), ny = ky.norm();
    if (nx == 0.0 || ny == 0.0) return 0.0;
    return (kx.cwiseProduct(ky)).sum() / (nx * ny);
}

double CkaMatrix::mean_off_diagonal() const {
    if (clients < 2) return 1.0;
    double s = 0.0;
    for (int i = 0; i < clients; ++i)
        for (int j = 0; j < clients; ++j)
            if (i != j) s += at(i, j);
    return s / static_cast<double>(clients * (clients - 1));
}

std::vector<CkaMatrix> block_cka_report(const Architecture& arch, const std::vector<const ParamStore*>& clients,
                                        const Tensor& probe, int batch_size) {
    NoGradGuard ng;
    const int m = arch.config.blocks();
    const int n = static_cast<int>(clients.size());
    const int64_t rows = probe.dim(0);
    const Dataset d = as_dataset(probe);
    // feats[client][block] = [rows, C*T*V]
    std::vector<std::vector<Tensor>> feats(static_cast<size_t>(n));
    for (int c = 0; c < n; ++c) {
        std::vector<std::vector<float>> acc(static_cast<size_t>(m));
        for (int64_t s = 0; s < rows; s += batch_size) {
            ForwardTrace t = forward(arch, *clients[c], d.gather(chunk(s, std::min<int64_t>(rows, s + batch_size))),
                                     {false, false});
            for (int b = 0; b < m; ++b) acc[b].insert(acc[b].end(), t.blocks[b].data().begin(), t.blocks[b].data().end());
        }
        for (int b = 0; b < m; ++b) {
            const int64_t width = static_cast<int64_t>(acc[b].size()) / rows;
            feats[c].push_back(Tensor::from({rows, width}, std::move(acc[b])));
        }
    }
    std::vector<CkaMatrix> out;
    for (int b = 0; b < m; ++b) {
        CkaMatrix cm;
        cm.block = b;
        cm.clients = n;
        cm.values.assign(static_cast<size_t>(n * n), 1.0);
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) {
                const double v = cka(feats[i][b], feats[j][b]);
                cm.values[i * n + j] = cm.values[j * n + i] = v;
            }
        out.push_back(std::move(cm));
    }
    return out;
}

}  // namespace fedskel
