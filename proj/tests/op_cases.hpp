#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fedskel/graph.hpp"
#include "gradcheck.hpp"

namespace testutil {

struct OpCase {
    std::string name;
    FloatFn f;
    RefFn g;
    std::vector<fedskel::Shape> shapes;
    float lo = -1.0f;
    float hi = 1.0f;
    std::vector<bool> differentiable;
};

inline ref::Vec pointwise(const std::vector<ref::Vec>& in, double (*op)(double, double)) {
    ref::Vec y(in[0].size());
    for (size_t i = 0; i < y.size(); ++i) y[i] = op(in[0][i], in.size() > 1 ? in[1][i] : 0.0);
    return y;
}

/// Every differentiable kernel, each against its double reference.
inline std::vector<OpCase> all_op_cases() {
    using namespace fedskel;
    std::vector<OpCase> c;
    c.push_back({"matmul", [](const auto& in) { return matmul(in[0], in[1]); },
                 [](const auto& in) { return ref::matmul(in[0], in[1], 3, 4, 2); }, {{3, 4}, {4, 2}}});
    c.push_back({"mul", [](const auto& in) { return mul(in[0], in[1]); },
                 [](const auto& in) { return pointwise(in, [](double a, double b) { return a * b; }); },
                 {{2, 3}, {2, 3}}});
    c.push_back({"add_sub", [](const auto& in) { return sub(add(in[0], in[1]), in[2]); },
                 [](const auto& in) {
                     ref::Vec y(in[0].size());
                     for (size_t i = 0; i < y.size(); ++i) y[i] = in[0][i] + in[1][i] - in[2][i];
                     return y;
                 },
                 {{4}, {4}, {4}}});
    c.push_back({"relu", [](const auto& in) { return relu(in[0]); }, [](const auto& in) { return ref::relu(in[0]); },
                 {{3, 5}}});
    c.push_back({"scale", [](const auto& in) { return scale_by(scale(in[0], 0.5f), in[1]); },
                 [](const auto& in) {
                     ref::Vec y(in[0].size());
                     for (size_t i = 0; i < y.size(); ++i) y[i] = in[0][i] * 0.5 * in[1][0];
                     return y;
                 },
                 {{2, 2}, {1}}});
    c.push_back({"sum_mean", [](const auto& in) { return add(sum(in[0]), mean(in[1])); },
                 [](const auto& in) {
                     double s = 0, m = 0;
                     for (double v : in[0]) s += v;
                     for (double v : in[1]) m += v;
                     return ref::Vec{s + m / static_cast<double>(in[1].size())};
                 },
                 {{2, 3}, {5}}});
    c.push_back({"select_reshape", [](const auto& in) { return reshape(select(in[0], 1), {6}); },
                 [](const auto& in) { return ref::Vec(in[0].begin() + 6, in[0].begin() + 12); }, {{3, 2, 3}}});
    c.push_back({"softmax", [](const auto& in) { return softmax_rows(in[0]); },
                 [](const auto& in) { return ref::softmax_rows(in[0], 3, 4); }, {{3, 4}}, -2, 2});
    c.push_back({"log_softmax", [](const auto& in) { return log_softmax_rows(in[0]); },
                 [](const auto& in) {
                     auto p = ref::softmax_rows(in[0], 3, 4);
                     for (auto& e : p) e = std::log(e);
                     return p;
                 },
                 {{3, 4}}, -2, 2});
    for (int stride : {1, 2}) {
        c.push_back({"temporal_conv_s" + std::to_string(stride),
                     [stride](const auto& in) { return temporal_conv1d(in[0], in[1], stride); },
                     [stride](const auto& in) { return ref::temporal_conv(in[0], in[1], 1, 2, 6, 3, 3, 3, stride); },
                     {{2, 6, 3}, {3, 2, 3}}});
    }
    c.push_back({"batchnorm",
                 [](const auto& in) {
                     BatchNormState st{in[1], in[2], Tensor::zeros({3}), Tensor::full({3}, 1.0f)};
                     return batchnorm(in[0], st, true);
                 },
                 [](const auto& in) { return ref::batchnorm_train(in[0], in[1], in[2], 2, 3, 8); },
                 {{2, 3, 2, 4}, {3}, {3}}});
    c.push_back({"adjacency_channel_mix",
                 [](const auto& in) { return channel_mix(adjacency_apply(in[0], in[1]), in[2]); },
                 [](const auto& in) { return ref::graph_conv(in[0], in[1], in[2], 2, 2, 3, 4, 3, 5); },
                 {{2, 2, 3, 4}, {3, 4, 4}, {5, 3, 2}}});
    c.push_back({"pool_linear", [](const auto& in) { return linear(global_avg_pool(in[0]), in[1], in[2]); },
                 [](const auto& in) { return ref::linear(ref::avg_pool(in[0], 2, 3, 10), in[1], in[2], 2, 3, 4); },
                 {{2, 3, 2, 5}, {4, 3}, {4}}});
    const std::vector<int> labels{2, 0, 1};
    c.push_back({"cross_entropy", [labels](const auto& in) { return cross_entropy(in[0], labels); },
                 [labels](const auto& in) { return ref::Vec{ref::cross_entropy(in[0], labels, 4)}; }, {{3, 4}}, -3, 3});
    for (float temp : {1.0f, 2.0f}) {
        c.push_back({"kl_T" + std::to_string(static_cast<int>(temp)),
                     [temp](const auto& in) { return kl_divergence(in[0], in[1], temp); },
                     [temp](const auto& in) { return ref::Vec{ref::kl(in[0], in[1], 3, 4, temp)}; },
                     {{3, 4}, {3, 4}}, -3, 3, {false, true}});
    }
    const PartitionedAdjacency base = build_partitions(SkeletonGraph{4, {{0, 1}, {1, 2}, {1, 3}}, 1});
    const Tensor a = base.matrices;
    const ref::Vec ad(a.data().begin(), a.data().end());
    c.push_back({"mix_ternary", [a](const auto& in) { return mix_ternary(a, in[0], in[1], in[2]); },
                 [ad](const auto& in) {
                     ref::Vec y(ad.size());
                     for (size_t k = 0; k < y.size(); ++k)
                         y[k] = in[2][0] * ad[k] + in[2][1] * in[0][k] + in[2][2] * in[1][k];
                     return y;
                 },
                 {{3, 4, 4}, {3, 4, 4}, {3}}});
    c.push_back({"mix_shared", [a](const auto& in) { return mix_shared(a, in[0], 0.7f, 1.3f); },
                 [ad](const auto& in) {
                     ref::Vec y(ad.size());
                     for (size_t k = 0; k < y.size(); ++k)
                         y[k] = static_cast<double>(0.7f) * ad[k] + static_cast<double>(1.3f) * in[0][k];
                     return y;
                 },
                 {{3, 4, 4}}});
    return c;
}

}  // namespace testutil
