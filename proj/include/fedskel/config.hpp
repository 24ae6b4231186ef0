#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedskel/graph.hpp"
#include "fedskel/mkd.hpp"
#include "fedskel/model.hpp"
#include "fedskel/synth.hpp"

namespace fedskel {

enum class Strategy { FedAvg, FedProx, FedBn, Fsar };

Strategy parse_strategy(const std::string& name);
const char* strategy_name(Strategy s);

/// auto picks the ternary convolution for fsar and the masked vanilla
/// convolution for every baseline.
enum class ConvChoice { Auto, Vanilla, Ats };

struct ModelSection {
    std::vector<int> channels{16, 32, 64};
    std::vector<int> strides{1, 2, 2};
    int temporal_kernel = 9;
    int feature_dim = 128;
    ConvChoice conv = ConvChoice::Auto;
    CoefficientMode coefficients = CoefficientMode::Learnable;
    std::array<float, 3> coefficient_init{1.0f, 1.0f, 1.0f};
};

struct FederationSection {
    int clients = 3;
    int rounds = 300;
    int local_epochs = 1;
    Strategy strategy = Strategy::Fsar;
    float server_momentum = 0.9f;
    float prox_mu = 0.01f;
    float learning_rate = 0.02f;
    float momentum = 0.9f;
    float weight_decay = 1e-4f;
    int batch_size = 128;
    int jobs = 1;
};

struct LossSection {
    float lambda_ce = 1.0f;
    float lambda_kd = 1.0f;
    float lambda_reg = 0.1f;
    int grains = 2;
    float kd_temperature = 1.0f;
};

struct DataSection {
    ScaleProfile profile = ScaleProfile::Skewed;
    SkeletonGraph skeleton = SkeletonGraph::ntu25();
    std::string skeleton_name = "ntu25";
    int frames = 50;
    int classes_per_client = 10;
    int base_samples = 400;
    double train_fraction = 0.8;
    int rewire = 3;
    float sigma = 0.05f;
};

struct EvalSection {
    int interval = 10;
    int knn_k = 1;
    bool unseen_client = true;
    int probe_per_client = 16;
    int batch_size = 64;
    int cka_interval = 0;  // 0: final round only
};

struct ExperimentConfig {
    uint64_t seed = 0;
    ModelSection model;
    FederationSection federation;
    LossSection loss;
    DataSection data;
    EvalSection eval;
    std::filesystem::path output_dir = "runs";
    std::filesystem::path data_dir;  // empty: <output_dir>/data

    /// Range and consistency checks; throws ConfigError.
    void validate() const;
};

/// Strict YAML loading: unknown keys, wrong types and out-of-range values
/// raise ConfigError carrying the line and column.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& yaml_text, const std::string& origin = "<string>");
/// Canonical YAML text with every field spelled out.
std::string dump_config(const ExperimentConfig& config);

/// Concrete switches a strategy implies.
struct Protocol {
    Strategy strategy = Strategy::Fsar;
    ConvMode conv = ConvMode::Ats;
    int grains = 0;
    float lambda_ce = 1.0f;
    float lambda_kd = 0.0f;
    float reg_coef = 0.0f;        // lambda_reg (fsar) or prox mu (fedprox)
    float server_momentum = 0.0f;
    bool share_batchnorm = true;  // false under fedbn
};

Protocol resolve_protocol(const ExperimentConfig& config);

/// Model config for one client of this experiment.
ModelConfig model_config(const ExperimentConfig& config, const Protocol& protocol);
SuiteOptions suite_options(const ExperimentConfig& config);

}  // namespace fedskel
