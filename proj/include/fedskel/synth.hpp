#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedskel/graph.hpp"
#include "fedskel/tensor.hpp"

namespace fedskel {

enum class ScaleProfile { Balanced, Skewed };

ScaleProfile parse_scale_profile(const std::string& name);
const char* scale_profile_name(ScaleProfile profile);

struct SuiteOptions {
    SkeletonGraph skeleton = SkeletonGraph::ntu25();
    int frames = 50;
    int channels = 3;
    int classes_per_client = 10;
    int base_samples = 400;   // sample count of the smallest client
    double train_fraction = 0.8;
    int rewire = 3;           // edges of the canonical tree moved per client
    float sigma = 0.05f;
};

struct ClientDatasetSpec {
    int client = 0;
    std::vector<int> labels;  // global class ids, disjoint across clients
    int samples_per_class = 40;
    double train_fraction = 0.8;
    int rewire = 3;
    float sigma = 0.05f;
    int frames = 50;
    int channels = 3;
    SkeletonGraph skeleton;
    uint64_t seed = 0;

    int train_per_class() const;
    int test_per_class() const;
    /// FNV-1a over every field that influences generated bytes.
    uint64_t hash() const;
};

struct Dataset {
    Tensor x;                 // [N, C, T, V]
    std::vector<int> labels;  // local labels in [0, classes)

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    /// Gathers the given rows into a new [k, C, T, V] tensor.
    Tensor gather(const std::vector<int64_t>& rows) const;
    std::vector<int> gather_labels(const std::vector<int64_t>& rows) const;
};

struct ClientData {
    ClientDatasetSpec spec;
    Dataset train;
    Dataset test;
    std::vector<int> parents;  // the client's private kinematic tree, -1 at the root
};

/// Client-private kinematic tree: the canonical tree rooted at the skeleton
/// root with `rewire` joints re-attached to a random joint outside their subtree.
std::vector<int> client_tree(const SkeletonGraph& skeleton, int rewire, uint64_t seed);

/// Pure function of the spec.
ClientData generate(const ClientDatasetSpec& spec);

/// Specs for n_clients federated clients plus, when `with_unseen`, one extra
/// held-out client appended at the end.
std::vector<ClientDatasetSpec> make_federation_suite(int n_clients, ScaleProfile profile, uint64_t seed,
                                                     const SuiteOptions& options, bool with_unseen = false);

// ---- on-disk cache --------------------------------------------------------

std::filesystem::path cache_file(const std::filesystem::path& dir, int client);
void save_client(const std::filesystem::path& file, const ClientData& data);
/// Returns false when the file is missing or its hash differs from the spec.
bool load_client(const std::filesystem::path& file, const ClientDatasetSpec& spec, ClientData& out);
/// Loads every spec from `dir`, regenerating (and rewriting) stale entries,
/// then writes manifest.json.
std::vector<ClientData> load_or_generate(const std::filesystem::path& dir, const std::vector<ClientDatasetSpec>& specs);
void write_manifest(const std::filesystem::path& dir, const std::vector<ClientData>& clients);

}  // namespace fedskel
