#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fedskel/graph.hpp"
#include "fedskel/tensor.hpp"

namespace fedskel {

enum class ConvMode { Vanilla, Ats };

struct ModelConfig {
    int joints = 25;
    int frames = 50;
    int in_channels = 3;
    std::vector<int> channels{16, 32, 64};
    int temporal_kernel = 9;
    std::vector<int> strides{1, 2, 2};
    int feature_dim = 128;
    int num_classes = 10;
    ConvMode conv_mode = ConvMode::Ats;
    CoefficientMode coefficient_mode = CoefficientMode::Learnable;
    std::array<float, 3> coefficient_init{1.0f, 1.0f, 1.0f};

    int blocks() const { return static_cast<int>(channels.size()); }
    void validate() const;
};

/// Which part of the federation a tensor belongs to. The key prefix encodes
/// the group: backbone.*, im.*, um.*, coef.*, bn.*, classifier.*.
enum class ParamGroup {
    Backbone,       // spatial/temporal weights, edge importance, feature head
    Inflected,      // shared learnable adjacency (im.*)
    Unique,         // private learnable adjacency (um.*)
    Coefficient,    // private ternary coefficients (coef.*)
    BatchNorm,      // learnable BN scale/shift (bn.*.scale, bn.*.shift)
    BatchNormStat,  // BN running statistics, not trained
    Classifier,     // private classifier (classifier.*)
};

ParamGroup group_of_key(std::string_view key);
const char* group_name(ParamGroup group);

/// Ordered name -> tensor map. Enumeration order is insertion order and is the
/// order used for aggregation and checkpoints.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
        ParamGroup group;
    };

    void add(std::string name, Tensor tensor);
    bool contains(std::string_view name) const;
    const Tensor& at(std::string_view name) const;
    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }
    std::vector<std::string> keys() const;

    /// Deep copy (fresh storage, gradients dropped).
    ParamStore clone() const;
    /// Shallow view over the entries accepted by `keep` (shares storage).
    ParamStore subset(const std::function<bool(const Entry&)>& keep) const;
    /// Trainable tensors in enumeration order.
    std::vector<Tensor> trainable() const;

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

/// Graph-derived constants plus the model hyper-parameters.
struct Architecture {
    ModelConfig config;
    PartitionedAdjacency adjacency;
};

/// Shared backbone tensors: everything a server holds.
ParamStore init_backbone(const Architecture& arch, uint64_t seed);
/// Client-private tensors (UM, coefficients, classifier), appended to `store`.
void init_private(ParamStore& store, const Architecture& arch, uint64_t seed);

/// Client: the full ternary with its own UM and coefficients.
/// Server: the shared part only (no UM), with the configured initial
/// coefficients held constant.
enum class AdjacencySource { Client, Server };

struct ForwardOptions {
    bool training = true;
    bool update_running_stats = true;
    AdjacencySource source = AdjacencySource::Client;
};

struct ForwardTrace {
    std::vector<Tensor> blocks;  // outputs of the blocks that ran, in order
    Tensor h;                    // [N, feature_dim]
    Tensor logits;               // [N, num_classes], undefined without a classifier
};

/// Output shape (C, T, V) of every block for a single sample.
std::vector<Shape> block_output_shapes(const ModelConfig& config);

/// Effective [S, V, V] adjacency of block `b`.
Tensor block_adjacency(const Architecture& arch, const ParamStore& params, int b, AdjacencySource source);

/// Runs block `b` on [N, C, T, V] features.
Tensor run_block(const Architecture& arch, const ParamStore& params, int b, const Tensor& in,
                 const ForwardOptions& options);

/// Pool + feature projection + (optional) classifier.
ForwardTrace run_head(const ParamStore& params, const Tensor& last_block);
Tensor classify(const ParamStore& params, const Tensor& h);

ForwardTrace forward(const Architecture& arch, const ParamStore& params, const Tensor& x,
                     const ForwardOptions& options = {});

/// Runs blocks [start_block, M) on `mid_feature`, which must have the output
/// shape of block start_block-1 (the input shape when start_block == 0).
ForwardTrace forward_from_block(const Architecture& arch, const ParamStore& params, const Tensor& mid_feature,
                                int start_block, const ForwardOptions& options = {});

std::string block_key(int b, const char* leaf);

}  // namespace fedskel
