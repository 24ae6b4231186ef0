#pragma once

#include <random>

#include "fedskel/model.hpp"
#include "reference/reference_ops.hpp"

namespace testutil {

inline fedskel::SkeletonGraph chain5() { return {5, {{0, 1}, {1, 2}, {2, 3}, {3, 4}}, 2}; }

/// Two-block model small enough for exhaustive finite differences.
inline fedskel::Architecture tiny_arch(fedskel::ConvMode mode, int blocks = 2) {
    fedskel::ModelConfig c;
    c.joints = 5;
    c.frames = 4;
    c.in_channels = 3;
    c.channels = blocks == 2 ? std::vector<int>{4, 8} : std::vector<int>{4, 6, 8};
    c.strides = blocks == 2 ? std::vector<int>{1, 2} : std::vector<int>{1, 2, 2};
    c.temporal_kernel = 3;
    c.feature_dim = 6;
    c.num_classes = 3;
    c.conv_mode = mode;
    return {c, fedskel::build_partitions(chain5())};
}

inline fedskel::ParamStore full_params(const fedskel::Architecture& arch, uint64_t seed) {
    fedskel::ParamStore p = fedskel::init_backbone(arch, seed);
    fedskel::init_private(p, arch, seed + 7);
    return p;
}

inline fedskel::Tensor random_input(const fedskel::ModelConfig& c, int64_t n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto count = static_cast<size_t>(n * c.in_channels * c.frames * c.joints);
    return fedskel::Tensor::from({n, c.in_channels, c.frames, c.joints}, ref::random_values(count, rng));
}

}  // namespace testutil
