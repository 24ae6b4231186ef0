#include "fedskel/model.hpp"

#include <cmath>
#include <random>

#include "fedskel/errors.hpp"

namespace fedskel {

void ModelConfig::validate() const {
    if (joints <= 0 || frames <= 0 || in_channels <= 0) throw ConfigError("model dimensions must be positive");
    if (channels.size() < 2) throw ConfigError("the backbone needs at least two blocks");
    if (strides.size() != channels.size()) {
        throw ConfigError("strides has " + std::to_string(strides.size()) + " entries but channels has " +
                          std::to_string(channels.size()));
    }
    for (int c : channels) {
        if (c <= 0) throw ConfigError("block channel counts must be positive");
    }
    for (int s : strides) {
        if (s < 1) throw ConfigError("temporal strides must be >= 1");
    }
    if (temporal_kernel < 1 || temporal_kernel % 2 == 0) {
        throw ConfigError("temporal kernel must be a positive odd number, got " + std::to_string(temporal_kernel));
    }
    if (feature_dim <= 0) throw ConfigError("feature_dim must be positive");
    if (num_classes <= 0) throw ConfigError("num_classes must be positive");
}

std::string block_key(int b, const char* leaf) {
    std::string k = "block" + std::to_string(b);
    if (leaf && *leaf) {
        k += '.';
        k += leaf;
    }
    return k;
}

ParamGroup group_of_key(std::string_view key) {
    auto starts = [&](std::string_view p) { return key.substr(0, p.size()) == p; };
    auto ends = [&](std::string_view s) { return key.size() >= s.size() && key.substr(key.size() - s.size()) == s; };
    if (starts("im.")) return ParamGroup::Inflected;
    if (starts("um.")) return ParamGroup::Unique;
    if (starts("coef.")) return ParamGroup::Coefficient;
    if (starts("classifier.")) return ParamGroup::Classifier;
    if (starts("bn.")) {
        return ends(".running_mean") || ends(".running_var") ? ParamGroup::BatchNormStat : ParamGroup::BatchNorm;
    }
    if (starts("backbone.")) return ParamGroup::Backbone;
    throw ProtocolError("parameter key '" + std::string(key) + "' is outside every known namespace");
}

const char* group_name(ParamGroup group) {
    switch (group) {
        case ParamGroup::Backbone: return "backbone";
        case ParamGroup::Inflected: return "im";
        case ParamGroup::Unique: return "um";
        case ParamGroup::Coefficient: return "coef";
        case ParamGroup::BatchNorm: return "bn";
        case ParamGroup::BatchNormStat: return "bn-stat";
        case ParamGroup::Classifier: return "classifier";
    }
    return "?";
}

// ---- ParamStore -----------------------------------------------------------

void ParamStore::add(std::string name, Tensor tensor) {
    if (index_.count(name)) throw UsageError("duplicate parameter key '" + name + "'");
    const ParamGroup g = group_of_key(name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(tensor), g});
}

bool ParamStore::contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

const Tensor& ParamStore::at(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw UsageError("missing parameter '" + std::string(name) + "'");
    return entries_[it->second].tensor;
}

std::vector<std::string> ParamStore::keys() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
}

ParamStore ParamStore::clone() const {
    ParamStore out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.clone());
    return out;
}

ParamStore ParamStore::subset(const std::function<bool(const Entry&)>& keep) const {
    ParamStore out;
    for (const auto& e : entries_) {
        if (keep(e)) out.add(e.name, e.tensor);
    }
    return out;
}

std::vector<Tensor> ParamStore::trainable() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_) {
        if (e.tensor.requires_grad()) out.push_back(e.tensor);
    }
    return out;
}

// ---- initialisation -------------------------------------------------------

namespace {

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                      static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)};
    uint32_t words[2];
    seq.generate(words, words + 2);
    return (static_cast<uint64_t>(words[0]) << 32) | words[1];
}

Tensor uniform_param(Shape shape, float bound, uint64_t seed) {
    const auto n = static_cast<size_t>(shape_numel(shape));
    return Tensor::from(std::move(shape), uniform_noise(n, bound, seed)).set_requires_grad(true);
}

}  // namespace

ParamStore init_backbone(const Architecture& arch, uint64_t seed) {
    const ModelConfig& cfg = arch.config;
    cfg.validate();
    if (arch.adjacency.joints != cfg.joints) {
        throw ConfigError("graph has " + std::to_string(arch.adjacency.joints) + " joints, model expects " +
                          std::to_string(cfg.joints));
    }
    const int64_t s = arch.adjacency.partitions(), v = cfg.joints, kt = cfg.temporal_kernel;
    ParamStore p;
    uint64_t stream = 0;
    int64_t cin = cfg.in_channels;
    for (int b = 0; b < cfg.blocks(); ++b) {
        const int64_t cout = cfg.channels[b];
        const float spatial_bound = std::sqrt(6.0f / static_cast<float>(s * cin));
        p.add("backbone." + block_key(b, "spatial_weight"),
              uniform_param({cout, s, cin}, spatial_bound, derive_seed(seed, stream++)));
        if (cfg.conv_mode == ConvMode::Vanilla) {
            p.add("backbone." + block_key(b, "edge_importance"),
                  Tensor::full({s, v, v}, 1.0f).set_requires_grad(true));
        } else {
            p.add("im." + block_key(b, ""), arch.adjacency.matrices.detach().set_requires_grad(true));
        }
        BatchNormState bn = BatchNormState::create(cout);
        p.add("bn." + block_key(b, "scale"), bn.scale);
        p.add("bn." + block_key(b, "shift"), bn.shift);
        p.add("bn." + block_key(b, "running_mean"), bn.running_mean);
        p.add("bn." + block_key(b, "running_var"), bn.running_var);
        const float temporal_bound = std::sqrt(6.0f / static_cast<float>(cout * kt));
        p.add("backbone." + block_key(b, "temporal_weight"),
              uniform_param({cout, cout, kt}, temporal_bound, derive_seed(seed, stream++)));
        cin = cout;
    }
    const float head_bound = 1.0f / std::sqrt(static_cast<float>(cin));
    p.add("backbone.head.weight", uniform_param({cfg.feature_dim, cin}, head_bound, derive_seed(seed, stream++)));
    p.add("backbone.head.bias", Tensor::zeros({cfg.feature_dim}).set_requires_grad(true));
    return p;
}

void init_private(ParamStore& store, const Architecture& arch, uint64_t seed) {
    const ModelConfig& cfg = arch.config;
    uint64_t stream = 1000;
    if (cfg.conv_mode == ConvMode::Ats) {
        for (int b = 0; b < cfg.blocks(); ++b) {
            AdjacencyTernary t =
                init_ternary(arch.adjacency, cfg.coefficient_mode, derive_seed(seed, stream++), cfg.coefficient_init);
            store.add("um." + block_key(b, ""), t.unique);
            store.add("coef." + block_key(b, ""), t.coefficients);
        }
    }
    const float bound = 1.0f / std::sqrt(static_cast<float>(cfg.feature_dim));
    store.add("classifier.weight",
              uniform_param({cfg.num_classes, cfg.feature_dim}, bound, derive_seed(seed, stream++)));
    store.add("classifier.bias", Tensor::zeros({cfg.num_classes}).set_requires_grad(true));
}

// ---- forward --------------------------------------------------------------

std::vector<Shape> block_output_shapes(const ModelConfig& config) {
    std::vector<Shape> out;
    int64_t t = config.frames;
    for (int b = 0; b < config.blocks(); ++b) {
        t = (t + config.strides[b] - 1) / config.strides[b];
        out.push_back({config.channels[b], t, config.joints});
    }
    return out;
}

Tensor block_adjacency(const Architecture& arch, const ParamStore& params, int b, AdjacencySource source) {
    const Tensor& base = arch.adjacency.matrices;
    if (arch.config.conv_mode == ConvMode::Vanilla) {
        return hadamard(base, params.at("backbone." + block_key(b, "edge_importance")));
    }
    const Tensor& inflected = params.at("im." + block_key(b, ""));
    if (source == AdjacencySource::Server) {
        const auto& c = arch.config.coefficient_init;
        return mix_shared(base, inflected, c[0], c[1]);
    }
    return mix_ternary(base, inflected, params.at("um." + block_key(b, "")), params.at("coef." + block_key(b, "")));
}

Tensor run_block(const Architecture& arch, const ParamStore& params, int b, const Tensor& in,
                 const ForwardOptions& options) {
    const ModelConfig& cfg = arch.config;
    const int64_t cin = b == 0 ? cfg.in_channels : cfg.channels[b - 1];
    const int64_t tin = b == 0 ? cfg.frames : block_output_shapes(cfg)[b - 1][1];
    if (in.rank() != 4 || in.dim(1) != cin || in.dim(2) != tin || in.dim(3) != cfg.joints) {
        throw DimensionError("block " + std::to_string(b) + " expects [N x " + std::to_string(cin) + " x " +
                             std::to_string(tin) + " x " + std::to_string(cfg.joints) + "], got " +
                             shape_str(in.shape()));
    }
    BatchNormState bn{params.at("bn." + block_key(b, "scale")), params.at("bn." + block_key(b, "shift")),
                      params.at("bn." + block_key(b, "running_mean")), params.at("bn." + block_key(b, "running_var"))};
    Tensor adj = block_adjacency(arch, params, b, options.source);
    Tensor z = adjacency_apply(in, adj);
    Tensor y = channel_mix(z, params.at("backbone." + block_key(b, "spatial_weight")));
    y = batchnorm(y, bn, options.training, options.update_running_stats);
    y = relu(y);
    return temporal_conv1d(y, params.at("backbone." + block_key(b, "temporal_weight")), cfg.strides[b]);
}

Tensor classify(const ParamStore& params, const Tensor& h) {
    return linear(h, params.at("classifier.weight"), params.at("classifier.bias"));
}

ForwardTrace run_head(const ParamStore& params, const Tensor& last_block) {
    ForwardTrace trace;
    trace.h = linear(global_avg_pool(last_block), params.at("backbone.head.weight"), params.at("backbone.head.bias"));
    if (params.contains("classifier.weight")) trace.logits = classify(params, trace.h);
    return trace;
}

ForwardTrace forward_from_block(const Architecture& arch, const ParamStore& params, const Tensor& mid_feature,
                                int start_block, const ForwardOptions& options) {
    const int m = arch.config.blocks();
    if (start_block < 0 || start_block > m) {
        throw DimensionError("start block " + std::to_string(start_block) + " outside [0, " + std::to_string(m) +
                             "]");
    }
    if (start_block == m) {
        const Shape expect = block_output_shapes(arch.config).back();
        if (mid_feature.rank() != 4 || Shape(mid_feature.shape().begin() + 1, mid_feature.shape().end()) != expect) {
            throw DimensionError("head expects block output " + shape_str(expect) + ", got " +
                                 shape_str(mid_feature.shape()));
        }
    }
    std::vector<Tensor> outs;
    Tensor f = mid_feature;
    for (int b = start_block; b < m; ++b) {
        f = run_block(arch, params, b, f, options);
        outs.push_back(f);
    }
    ForwardTrace trace = run_head(params, f);
    trace.blocks = std::move(outs);
    return trace;
}

ForwardTrace forward(const Architecture& arch, const ParamStore& params, const Tensor& x,
                     const ForwardOptions& options) {
    return forward_from_block(arch, params, x, 0, options);
}

}  // namespace fedskel
