#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "fedskel/fedskel.h"

namespace {

struct Options {
    std::string config;
    long long seed = -1;
    std::string strategy;
    int rounds = 0;
    int jobs = 0;
    std::string out;
    std::vector<std::string> strategies;
    std::string run_dir;
    bool quiet = false;
};

int report(fsk_status s) {
    if (s != FSK_OK) std::fprintf(stderr, "fedskel: %s\n", fsk_last_error());
    return static_cast<int>(s);
}

int with_experiment(const Options& o, fsk_status (*action)(fsk_experiment*, const Options&)) {
    fsk_experiment* exp = nullptr;
    fsk_status s = fsk_experiment_open(o.config.c_str(), &exp);
    if (s == FSK_OK && o.seed >= 0) s = fsk_experiment_set_seed(exp, static_cast<uint64_t>(o.seed));
    if (s == FSK_OK && !o.strategy.empty()) s = fsk_experiment_set_strategy(exp, o.strategy.c_str());
    if (s == FSK_OK && o.rounds > 0) s = fsk_experiment_set_rounds(exp, o.rounds);
    if (s == FSK_OK && o.jobs > 0) s = fsk_experiment_set_jobs(exp, o.jobs);
    if (s == FSK_OK && !o.out.empty()) s = fsk_experiment_set_output_dir(exp, o.out.c_str());
    if (s == FSK_OK) s = fsk_experiment_set_quiet(exp, o.quiet ? 1 : 0);
    if (s == FSK_OK) s = action(exp, o);
    const int code = report(s);
    fsk_experiment_close(exp);
    return code;
}

void common_flags(CLI::App* cmd, Options& o) {
    cmd->add_option("--config", o.config, "experiment config (YAML)")->required();
    cmd->add_option("--seed", o.seed, "override the config seed")->check(CLI::NonNegativeNumber);
    cmd->add_option("--rounds", o.rounds, "override federation.rounds")->check(CLI::PositiveNumber);
    cmd->add_option("--jobs", o.jobs, "concurrent client training tasks")->check(CLI::PositiveNumber);
    cmd->add_option("--out", o.out, "output directory (default $FEDSKEL_OUT, then output_dir)");
    cmd->add_flag("--quiet", o.quiet, "suppress progress output");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated skeleton action recognition simulator"};
    app.require_subcommand(1);
    Options o;

    auto* gen = app.add_subcommand("generate", "write the synthetic client datasets");
    common_flags(gen, o);

    auto* train = app.add_subcommand("train", "run one federated experiment");
    common_flags(train, o);
    train->add_option("--strategy", o.strategy, "fedavg, fedprox, fedbn or fsar");

    auto* compare = app.add_subcommand("compare", "run several strategies on the same data and seed");
    common_flags(compare, o);
    compare->add_option("--strategy", o.strategies, "strategies to compare (repeatable, default fedavg fsar)");

    auto* eval = app.add_subcommand("eval", "re-evaluate the checkpoints of a run");
    common_flags(eval, o);
    eval->add_option("--strategy", o.strategy, "strategy the run used, if overridden at train time");

    auto* analyze = app.add_subcommand("analyze", "CKA, coefficient drift and plot series for a run");
    analyze->add_option("--config", o.config, "config of the run; its resolved output directory is analysed");
    analyze->add_option("--out", o.out, "run directory (default $FEDSKEL_OUT, then output_dir)");
    analyze->add_flag("--quiet", o.quiet, "suppress progress output");
    analyze->add_option("run_dir", o.run_dir, "run directory, instead of --config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(FSK_ERR_CONFIG);
    }

    if (*gen) return with_experiment(o, [](fsk_experiment* e, const Options&) { return fsk_generate(e); });
    if (*train) return with_experiment(o, [](fsk_experiment* e, const Options&) { return fsk_train(e); });
    if (*eval) return with_experiment(o, [](fsk_experiment* e, const Options&) { return fsk_evaluate(e); });
    if (*compare) {
        return with_experiment(o, [](fsk_experiment* e, const Options& opt) {
            std::vector<const char*> names;
            for (const auto& s : opt.strategies) names.push_back(s.c_str());
            return fsk_compare(e, names.data(), names.size());
        });
    }
    if (*analyze) {
        if (!o.run_dir.empty()) return report(fsk_analyze(o.run_dir.c_str()));
        if (o.config.empty()) {
            std::fprintf(stderr, "fedskel: analyze needs --config or a run directory\n");
            return static_cast<int>(FSK_ERR_CONFIG);
        }
        return with_experiment(o, [](fsk_experiment* e, const Options&) { return fsk_experiment_analyze(e); });
    }
    return static_cast<int>(FSK_ERR_CONFIG);
}
