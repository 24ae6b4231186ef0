#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fedskel/config.hpp"
#include "fedskel/federation.hpp"

namespace fedskel {

struct Overrides {
    std::optional<uint64_t> seed;
    std::optional<Strategy> strategy;
    std::optional<int> rounds;
    std::optional<int> jobs;
    std::optional<std::filesystem::path> out;
};

/// Applies command-line overrides; the output root resolves as --out, then
/// $FEDSKEL_OUT, then the config's output_dir.
ExperimentConfig apply_overrides(ExperimentConfig config, const Overrides& overrides);
std::filesystem::path data_directory(const ExperimentConfig& config);

struct SuiteData {
    std::vector<ClientData> clients;
    std::optional<ClientData> unseen;
};

/// Loads the suite from the cache directory, generating missing or stale files.
SuiteData prepare_data(const ExperimentConfig& config);

// ---- metric series helpers ------------------------------------------------

struct MetricRow {
    int round = 0;
    std::string client;
    std::string protocol;
    std::string metric;
    double value = 0.0;
};

std::vector<MetricRow> read_metrics(const std::filesystem::path& csv);
/// Eval-round linear accuracy per client: series[client] = [(round, acc)].
std::vector<std::vector<std::pair<int, double>>> accuracy_series(const std::vector<MetricRow>& rows);
/// Mean over the last `points` eval points of each client, averaged over clients.
double final_mean_accuracy(const std::vector<std::vector<std::pair<int, double>>>& series, int points = 1);
/// Standard deviation in sliding windows of `window` eval points over the
/// trailing `fraction` of the series, averaged over windows and clients.
double rolling_std(const std::vector<std::vector<std::pair<int, double>>>& series, double fraction, int window);

inline constexpr int kStabilityWindow = 5;

// ---- subcommands ----------------------------------------------------------

struct TrainSummary {
    std::filesystem::path run_dir;
    std::vector<double> final_accuracy;  // per client
    double mean_final_accuracy = 0.0;
};

void cmd_generate(const ExperimentConfig& config, std::ostream& log);
TrainSummary cmd_train(const ExperimentConfig& config, std::ostream& log, const RunHooks& hooks = {});

struct CompareColumn {
    std::string name;
    std::filesystem::path run_dir;
    std::vector<double> final_accuracy;
    double mean_final_accuracy = 0.0;
    double stability = 0.0;
};

std::vector<CompareColumn> cmd_compare(const ExperimentConfig& config, const std::vector<Strategy>& strategies,
                                       std::ostream& log);
void cmd_analyze(const std::filesystem::path& run_dir, std::ostream& log);

struct EvalSummary {
    std::vector<double> linear;  // per client
    std::optional<double> knn;
};

/// Re-evaluates the checkpoints of the run directory selected by the config.
EvalSummary cmd_eval(const ExperimentConfig& config, std::ostream& log);

}  // namespace fedskel
