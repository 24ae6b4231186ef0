#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "fedskel/config.hpp"
#include "fedskel/metrics.hpp"
#include "fedskel/model.hpp"
#include "fedskel/optim.hpp"
#include "fedskel/synth.hpp"

namespace fedskel {

/// Whether a key travels between client and server.
bool is_aggregatable(ParamGroup group, bool share_batchnorm);

struct ClientState {
    int id = 0;
    std::shared_ptr<const ClientData> data;
    int64_t samples = 0;  // n_i, the size of the train split
    ParamStore params;    // full client model
    std::unique_ptr<SgdMomentum> optimizer;

    /// Shallow view of the keys that are uploaded and broadcast.
    ParamStore upload(bool share_batchnorm) const;
};

struct ServerState {
    ParamStore params;                         // detached, never on a tape
    std::vector<std::vector<float>> velocity;  // per entry, empty when unused
    int round = 0;
};

struct AggregationSettings {
    float server_momentum = 0.0f;
};

struct Upload {
    const ParamStore* params = nullptr;
    int64_t samples = 0;
};

/// Weighted mean in ascending upload order (accumulated in double, rounded
/// once), then the server momentum step on trainable keys (running statistics
/// take the mean directly). Throws ProtocolError on key-set mismatch or any
/// UM key.
void aggregate(ServerState& server, const std::vector<Upload>& uploads, const AggregationSettings& settings);

/// Overwrites the aggregatable tensors of `client` with copies of the server's.
void broadcast(const ServerState& server, ClientState& client);

struct LossBreakdown {
    double ce = 0.0;     // dual CE (plain CE without teacher streams)
    double kd = 0.0;
    double reg = 0.0;    // 0.5 * ||W_g - W_i||^2, unweighted
    double total = 0.0;  // weighted objective
    int batches = 0;
};

struct LocalHyper {
    float lambda_ce = 1.0f;
    float lambda_kd = 0.0f;
    float reg_coef = 0.0f;
    int grains = 0;
    float kd_temperature = 1.0f;
    int epochs = 1;
    int batch_size = 16;
};

/// Server tensors completed with fresh BN when the server holds none, for
/// feature extraction with batch statistics.
ParamStore server_feature_params(const ParamStore& server, const Architecture& arch, bool share_batchnorm);

/// Half squared distance between a client's trainable aggregatable tensors and
/// the server's, as a tape tensor.
Tensor proximal_term(const ParamStore& client, const ParamStore& server);

class Federation {
public:
    Federation(const ExperimentConfig& config, std::vector<ClientData> clients);

    const ExperimentConfig& config() const { return config_; }
    const Protocol& protocol() const { return protocol_; }
    const Architecture& architecture() const { return arch_; }
    const ServerState& server() const { return server_; }
    const std::vector<ClientState>& clients() const { return clients_; }
    std::vector<ClientState>& clients() { return clients_; }
    LocalHyper hyper() const;

    /// K local epochs for one client against the current server snapshot.
    LossBreakdown local_train(ClientState& client, int round);
    /// All clients, concurrently up to `jobs`.
    std::vector<LossBreakdown> local_train_all(int round, int jobs);
    void aggregate_round();
    void broadcast_all();

    /// Eval-mode linear accuracy of every client's post-broadcast model.
    std::vector<double> linear_accuracies() const;
    /// Server backbone features on the unseen client's splits.
    double knn_accuracy_on(const ClientData& unseen) const;
    /// Parameters used for server-side feature extraction.
    ParamStore server_eval_params() const;

private:
    ExperimentConfig config_;
    Protocol protocol_;
    Architecture arch_;
    ServerState server_;
    std::vector<ClientState> clients_;
};

struct RoundReport {
    int round = 0;
    std::vector<LossBreakdown> losses;
    std::vector<EvalResult> evals;
    std::vector<std::vector<std::array<float, 3>>> coefficients;  // [client][block] on eval rounds, ATS only
    std::vector<CkaMatrix> cka;  // filled on CKA rounds
    double wall_seconds = 0.0;
};

struct RunHooks {
    std::function<void(const RoundReport&)> on_round;
    /// After local training, before upload. Clients hold their trained state.
    std::function<void(int round, const Federation&)> after_local_train;
    /// After broadcast.
    std::function<void(int round, const Federation&)> after_broadcast;
};

struct RunResult {
    std::vector<RoundReport> reports;
    ParamStore server;                // final aggregated state
    std::vector<ParamStore> clients;  // after the final local training
    std::vector<CkaMatrix> final_cka;
};

bool is_eval_round(const ExperimentConfig& config, int round);

/// R rounds of train -> upload -> aggregate -> broadcast with evaluation every
/// eval.interval rounds and on the last round. Deterministic given the config.
RunResult run_experiment(const ExperimentConfig& config, std::vector<ClientData> clients,
                         const std::optional<ClientData>& unseen, const RunHooks& hooks = {});

/// Shared CKA probe pool: per_client test rows drawn uniformly from every client.
Tensor probe_batch(const std::vector<ClientData>& clients, int per_client, uint64_t seed);

}  // namespace fedskel
