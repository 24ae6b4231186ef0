#pragma once

// Double-precision forward pass of the whole network built from the loop
// kernels in reference_ops.hpp. Parameters are looked up by key so the finite
// difference driver can perturb any one of them.

#include <map>
#include <string>

#include "fedskel/model.hpp"
#include "reference/reference_ops.hpp"

namespace ref {

using ParamMap = std::map<std::string, Vec>;

inline ParamMap to_map(const fedskel::ParamStore& store) {
    ParamMap m;
    for (const auto& e : store.entries()) m[e.name] = to_double(e.tensor.data());
    return m;
}

inline Vec model_logits(const fedskel::Architecture& arch, const ParamMap& p, const Vec& x, int64_t n) {
    const auto& cfg = arch.config;
    const int64_t v = cfg.joints, s_count = arch.adjacency.partitions();
    const Vec base = to_double(arch.adjacency.matrices.data());
    Vec f = x;
    int64_t cin = cfg.in_channels, t = cfg.frames;
    for (int b = 0; b < cfg.blocks(); ++b) {
        const std::string k = fedskel::block_key(b, "");
        const int64_t cout = cfg.channels[b];
        Vec adj(base.size());
        if (cfg.conv_mode == fedskel::ConvMode::Vanilla) {
            const Vec& mask = p.at("backbone." + k + ".edge_importance");
            for (size_t i = 0; i < adj.size(); ++i) adj[i] = base[i] * mask[i];
        } else {
            const Vec& im = p.at("im." + k);
            const Vec& um = p.at("um." + k);
            const Vec& c = p.at("coef." + k);
            for (size_t i = 0; i < adj.size(); ++i) adj[i] = c[0] * base[i] + c[1] * im[i] + c[2] * um[i];
        }
        Vec y = graph_conv(f, adj, p.at("backbone." + k + ".spatial_weight"), n, cin, t, v, s_count, cout);
        y = batchnorm_train(y, p.at("bn." + k + ".scale"), p.at("bn." + k + ".shift"), n, cout, t * v);
        y = relu(y);
        int64_t tout = 0;
        f = temporal_conv(y, p.at("backbone." + k + ".temporal_weight"), n, cout, t, v, cout, cfg.temporal_kernel,
                          cfg.strides[b], &tout);
        cin = cout;
        t = tout;
    }
    Vec pooled = avg_pool(f, n, cin, t * v);
    Vec h = linear(pooled, p.at("backbone.head.weight"), p.at("backbone.head.bias"), n, cin, cfg.feature_dim);
    return linear(h, p.at("classifier.weight"), p.at("classifier.bias"), n, cfg.feature_dim, cfg.num_classes);
}

}  // namespace ref
