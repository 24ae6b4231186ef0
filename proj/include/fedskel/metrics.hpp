#pragma once

#include <span>
#include <string>
#include <vector>

#include "fedskel/model.hpp"
#include "fedskel/synth.hpp"

namespace fedskel {

enum class EvalProtocol { Linear, Knn };

struct EvalResult {
    EvalProtocol protocol = EvalProtocol::Linear;
    std::string client;  // client id, or "unseen"
    double accuracy = 0.0;
    int round = 0;
};

double top1_accuracy(const Tensor& logits, std::span<const int> labels);

/// Eval-mode forward of the given model over a dataset in chunks of
/// `batch_size`; top-1 accuracy of its classifier.
double linear_accuracy(const Architecture& arch, const ParamStore& params, const Dataset& data, int batch_size);

/// Pooled features h for every row of `x` ([N, F]). With `batch_stats` BN
/// normalises with the statistics of each chunk instead of running stats.
Tensor extract_features(const Architecture& arch, const ParamStore& params, const Tensor& x, AdjacencySource source,
                        bool batch_stats, int batch_size);

/// Cosine k-NN; majority vote, ties broken by the smaller summed cosine
/// distance and then the lower class id. Throws UsageError for an empty
/// train set.
double knn_accuracy(const Tensor& train_features, std::span<const int> train_labels, const Tensor& test_features,
                    std::span<const int> test_labels, int k);

/// Linear CKA between [n, d1] and [n, d2] feature matrices.
double cka(const Tensor& a, const Tensor& b);

struct CkaMatrix {
    int block = 0;
    int clients = 0;
    std::vector<double> values;  // clients x clients, row-major

    double at(int i, int j) const { return values[static_cast<size_t>(i * clients + j)]; }
    double mean_off_diagonal() const;
};

/// Per block, pairwise CKA between the clients' flattened block outputs on a
/// common probe batch (eval-mode BN, each client's own adjacency).
std::vector<CkaMatrix> block_cka_report(const Architecture& arch, const std::vector<const ParamStore*>& clients,
                                        const Tensor& probe, int batch_size);

}  // namespace fedskel
