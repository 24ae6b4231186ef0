#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "fedskel/tensor.hpp"

namespace fedskel {

using Edge = std::pair<int, int>;

/// Undirected single-person skeleton.
struct SkeletonGraph {
    int joints = 0;
    std::vector<Edge> edges;
    int root = 0;

    /// 25-joint Kinect v2 layout used by NTU RGB+D, rooted at the spine middle.
    static SkeletonGraph ntu25();

    /// Throws TopologyError on out-of-range indices, self loops or a
    /// disconnected graph.
    void validate() const;
    /// Sorted, deduplicated, (min, max)-oriented edge list.
    std::vector<Edge> canonical_edges() const;
    /// Hop distance of every joint from `root`; -1 when unreachable.
    std::vector<int> hop_distance() const;
};

inline constexpr int kSpatialPartitions = 3;

/// Distance partitioning of the self-loop-augmented adjacency. Index
/// convention: matrices[s][src][dst] weights the message from joint src into
/// joint dst, so features propagate as f_out = f_in * A_s.
///   s = 0: self connections (and same-distance neighbours)
///   s = 1: centripetal edges (src farther from root than dst)
///   s = 2: centrifugal edges (src closer to root than dst)
struct PartitionedAdjacency {
    int joints = 0;
    Tensor matrices;  // [S, V, V]

    int partitions() const { return static_cast<int>(matrices.dim(0)); }
    Tensor partition(int s) const { return select(matrices, s); }
};

PartitionedAdjacency build_partitions(const SkeletonGraph& graph);

/// Lambda^{-1/2} (A + I) Lambda^{-1/2} for the whole graph.
Tensor normalized_adjacency(const SkeletonGraph& graph);

enum class CoefficientMode { Fixed, Learnable };

/// (A, I, U) with mixing coefficients (alpha, beta, gamma).
struct AdjacencyTernary {
    Tensor base;          // [S, V, V], constant
    Tensor inflected;     // [S, V, V], shared across clients
    Tensor unique;        // [S, V, V], private to one client
    Tensor coefficients;  // [3] = alpha, beta, gamma
    CoefficientMode mode = CoefficientMode::Learnable;

    int partitions() const { return static_cast<int>(base.dim(0)); }
};

/// I starts as a copy of A, U as uniform noise in [-1e-2, 1e-2] drawn from
/// `seed`, coefficients as `coefficient_init`.
AdjacencyTernary init_ternary(const PartitionedAdjacency& base, CoefficientMode mode, uint64_t seed,
                              std::array<float, 3> coefficient_init = {1.0f, 1.0f, 1.0f});

/// alpha*A_s + beta*I_s + gamma*U_s, differentiable in I, U and the coefficients.
Tensor effective_adjacency(const AdjacencyTernary& ternary, int s);

/// All partitions at once: [S, V, V].
Tensor mix_ternary(const Tensor& base, const Tensor& inflected, const Tensor& unique, const Tensor& coefficients);

/// Variant without a unique term, with constant coefficients.
Tensor mix_shared(const Tensor& base, const Tensor& inflected, float alpha, float beta);

/// U entries drawn uniformly from [-bound, bound].
std::vector<float> uniform_noise(size_t count, float bound, uint64_t seed);

}  // namespace fedskel
