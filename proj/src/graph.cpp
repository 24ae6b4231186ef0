#include "fedskel/graph.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <random>

#include "fedskel/errors.hpp"

namespace fedskel {

SkeletonGraph SkeletonGraph::ntu25() {
    // 1-based pairs from the NTU RGB+D joint list, converted to 0-based.
    static const int pairs[][2] = {{1, 2},   {2, 21},  {3, 21},  {4, 3},   {5, 21},  {6, 5},  {7, 6},  {8, 7},
                                   {9, 21},  {10, 9},  {11, 10}, {12, 11}, {13, 1},  {14, 13}, {15, 14}, {16, 15},
                                   {17, 1},  {18, 17}, {19, 18}, {20, 19}, {22, 23}, {23, 8}, {24, 25}, {25, 12}};
    SkeletonGraph g;
    g.joints = 25;
    for (const auto& p : pairs) g.edges.emplace_back(p[0] - 1, p[1] - 1);
    g.root = 20;  // spine shoulder / chest centre
    return g;
}

std::vector<Edge> SkeletonGraph::canonical_edges() const {
    std::vector<Edge> out;
    out.reserve(edges.size());
    for (auto [a, b] : edges) out.emplace_back(std::min(a, b), std::max(a, b));
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<int> SkeletonGraph::hop_distance() const {
    std::vector<std::vector<int>> nbr(static_cast<size_t>(joints));
    for (auto [a, b] : canonical_edges()) {
        nbr[a].push_back(b);
        nbr[b].push_back(a);
    }
    std::vector<int> dist(static_cast<size_t>(joints), -1);
    if (root < 0 || root >= joints) return dist;
    std::queue<int> q;
    dist[root] = 0;
    q.push(root);
    while (!q.empty()) {
        const int u = q.front();
        q.pop();
        for (int w : nbr[u]) {
            if (dist[w] < 0) {
                dist[w] = dist[u] + 1;
                q.push(w);
            }
        }
    }
    return dist;
}

void SkeletonGraph::validate() const {
    if (joints <= 0) throw TopologyError("skeleton needs at least one joint");
    if (root < 0 || root >= joints) {
        throw TopologyError("root joint " + std::to_string(root) + " outside [0, " + std::to_string(joints) + ")");
    }
    for (auto [a, b] : edges) {
        if (a < 0 || a >= joints || b < 0 || b >= joints) {
            throw TopologyError("edge (" + std::to_string(a) + ", " + std::to_string(b) + ") outside [0, " +
                                std::to_string(joints) + ")");
        }
        if (a == b) throw TopologyError("self-loop edge on joint " + std::to_string(a));
    }
    const auto dist = hop_distance();
    for (int j = 0; j < joints; ++j) {
        if (dist[j] < 0) throw TopologyError("skeleton graph is disconnected: joint " + std::to_string(j) +
                                             " unreachable from root " + std::to_string(root));
    }
}

namespace {

std::vector<float> degrees_with_self_loops(const SkeletonGraph& g, const std::vector<Edge>& edges) {
    std::vector<float> deg(static_cast<size_t>(g.joints), 1.0f);
    for (auto [a, b] : edges) {
        deg[a] += 1.0f;
        deg[b] += 1.0f;
    }
    return deg;
}

}  // namespace

PartitionedAdjacency build_partitions(const SkeletonGraph& graph) {
    graph.validate();
    const int v = graph.joints;
    const auto edges = graph.canonical_edges();
    const auto dist = graph.hop_distance();
    const auto deg = degrees_with_self_loops(graph, edges);
    std::vector<float> inv_sqrt(deg.size());
    for (size_t i = 0; i < deg.size(); ++i) inv_sqrt[i] = 1.0f / std::sqrt(deg[i]);

    std::vector<float> m(static_cast<size_t>(kSpatialPartitions * v * v), 0.0f);
    auto put = [&](int s, int src, int dst) {
        m[static_cast<size_t>((s * v + src) * v + dst)] = inv_sqrt[src] * inv_sqrt[dst];
    };
    for (int j = 0; j < v; ++j) put(0, j, j);
    for (auto [a, b] : edges) {
        for (auto [src, dst] : {Edge{a, b}, Edge{b, a}}) {
            int s = 0;
            if (dist[src] > dist[dst]) s = 1;
            else if (dist[src] < dist[dst]) s = 2;
            put(s, src, dst);
        }
    }
    PartitionedAdjacency out;
    out.joints = v;
    out.matrices = Tensor::from({kSpatialPartitions, v, v}, std::move(m));
    return out;
}

Tensor normalized_adjacency(const SkeletonGraph& graph) {
    graph.validate();
    const int v = graph.joints;
    const auto edges = graph.canonical_edges();
    const auto deg = degrees_with_self_loops(graph, edges);
    std::vector<float> m(static_cast<size_t>(v * v), 0.0f);
    for (int j = 0; j < v; ++j) m[j * v + j] = 1.0f / deg[j];
    for (auto [a, b] : edges) {
        const float w = 1.0f / std::sqrt(deg[a] * deg[b]);
        m[a * v + b] = w;
        m[b * v + a] = w;
    }
    return Tensor::from({v, v}, std::move(m));
}

std::vector<float> uniform_noise(size_t count, float bound, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(-bound, bound);
    std::vector<float> out(count);
    for (auto& x : out) x = dist(rng);
    return out;
}

AdjacencyTernary init_ternary(const PartitionedAdjacency& base, CoefficientMode mode, uint64_t seed,
                              std::array<float, 3> coefficient_init) {
    AdjacencyTernary t;
    t.mode = mode;
    t.base = base.matrices.detach();
    t.inflected = base.matrices.detach().set_requires_grad(true);
    t.unique = Tensor::from(base.matrices.shape(), uniform_noise(static_cast<size_t>(base.matrices.numel()), 1e-2f, seed))
                   .set_requires_grad(true);
    t.coefficients = Tensor::from({3}, {coefficient_init[0], coefficient_init[1], coefficient_init[2]});
    t.coefficients.set_requires_grad(mode == CoefficientMode::Learnable);
    return t;
}

Tensor effective_adjacency(const AdjacencyTernary& ternary, int s) {
    if (s < 0 || s >= ternary.partitions()) {
        throw DimensionError("partition " + std::to_string(s) + " out of range for " +
                             std::to_string(ternary.partitions()) + " partitions");
    }
    Tensor a = scale_by(select(ternary.base, s), select(ternary.coefficients, 0));
    Tensor i = scale_by(select(ternary.inflected, s), select(ternary.coefficients, 1));
    Tensor u = scale_by(select(ternary.unique, s), select(ternary.coefficients, 2));
    return add(add(a, i), u);
}

Tensor mix_ternary(const Tensor& base, const Tensor& inflected, const Tensor& unique, const Tensor& coefficients) {
    Tensor a = scale_by(base, select(coefficients, 0));
    Tensor i = scale_by(inflected, select(coefficients, 1));
    Tensor u = scale_by(unique, select(coefficients, 2));
    return add(add(a, i), u);
}

Tensor mix_shared(const Tensor& base, const Tensor& inflected, float alpha, float beta) {
    return add(scale(base, alpha), scale(inflected, beta));
}

}  // namespace fedskel
