#include "fedskel/fedskel.h"

#include <iostream>
#include <sstream>
#include <string>

#include "fedskel/errors.hpp"
#include "fedskel/harness.hpp"

using namespace fedskel;

struct fsk_experiment {
    ExperimentConfig base;
    Overrides overrides;
    bool quiet = false;
    double last_accuracy = -1.0;
    std::string resolved_out;
};

namespace {

thread_local std::string g_error;

template <typename F>
fsk_status guarded(F&& body) {
    try {
        body();
        g_error.clear();
        return FSK_OK;
    } catch (const Error& e) {
        g_error = e.what();
        switch (e.kind()) {
            case ErrorKind::Config:
            case ErrorKind::Usage: return FSK_ERR_CONFIG;
            case ErrorKind::Io: return FSK_ERR_IO;
            default: return FSK_ERR_RUNTIME;
        }
    } catch (const std::bad_alloc&) {
        g_error = "out of memory";
        return FSK_ERR_RUNTIME;
    } catch (const std::exception& e) {
        g_error = e.what();
        return FSK_ERR_RUNTIME;
    }
}

void need(const void* p, const char* what) {
    if (!p) throw UsageError(std::string(what) + " must not be NULL");
}

class NullBuf : public std::streambuf {
    int overflow(int c) override { return c; }
};

template <typename F>
void with_log(const fsk_experiment* exp, F&& body) {
    if (!exp->quiet) {
        body(std::cout);
        return;
    }
    NullBuf nb;
    std::ostream sink(&nb);
    body(sink);
}

}  // namespace

extern "C" {

const char* fsk_last_error(void) { return g_error.c_str(); }

fsk_status fsk_experiment_open(const char* config_path, fsk_experiment** out) {
    if (out) *out = nullptr;
    return guarded([&] {
        need(config_path, "config path");
        need(out, "out handle");
        auto exp = std::make_unique<fsk_experiment>();
        exp->base = load_config(config_path);
        *out = exp.release();
    });
}

void fsk_experiment_close(fsk_experiment* exp) { delete exp; }

fsk_status fsk_experiment_set_seed(fsk_experiment* exp, uint64_t seed) {
    return guarded([&] {
        need(exp, "experiment");
        exp->overrides.seed = seed;
    });
}

fsk_status fsk_experiment_set_strategy(fsk_experiment* exp, const char* strategy) {
    return guarded([&] {
        need(exp, "experiment");
        need(strategy, "strategy");
        exp->overrides.strategy = parse_strategy(strategy);
    });
}

fsk_status fsk_experiment_set_rounds(fsk_experiment* exp, int rounds) {
    return guarded([&] {
        need(exp, "experiment");
        if (rounds < 1) throw ConfigError("rounds must be at least 1, got " + std::to_string(rounds));
        exp->overrides.rounds = rounds;
    });
}

fsk_status fsk_experiment_set_jobs(fsk_experiment* exp, int jobs) {
    return guarded([&] {
        need(exp, "experiment");
        if (jobs < 1) throw ConfigError("jobs must be at least 1, got " + std::to_string(jobs));
        exp->overrides.jobs = jobs;
    });
}

fsk_status fsk_experiment_set_output_dir(fsk_experiment* exp, const char* dir) {
    return guarded([&] {
        need(exp, "experiment");
        need(dir, "output dir");
        exp->overrides.out = dir;
    });
}

fsk_status fsk_experiment_set_quiet(fsk_experiment* exp, int quiet) {
    return guarded([&] {
        need(exp, "experiment");
        exp->quiet = quiet != 0;
    });
}

fsk_status fsk_generate(fsk_experiment* exp) {
    return guarded([&] {
        need(exp, "experiment");
        const ExperimentConfig c = apply_overrides(exp->base, exp->overrides);
        with_log(exp, [&](std::ostream& log) { cmd_generate(c, log); });
    });
}

fsk_status fsk_train(fsk_experiment* exp) {
    return guarded([&] {
        need(exp, "experiment");
        const ExperimentConfig c = apply_overrides(exp->base, exp->overrides);
        with_log(exp, [&](std::ostream& log) { exp->last_accuracy = cmd_train(c, log).mean_final_accuracy; });
    });
}

fsk_status fsk_compare(fsk_experiment* exp, const char* const* strategies, size_t count) {
    return guarded([&] {
        need(exp, "experiment");
        if (count > 0) need(strategies, "strategies");
        std::vector<Strategy> list;
        for (size_t i = 0; i < count; ++i) {
            need(strategies[i], "strategy name");
            list.push_back(parse_strategy(strategies[i]));
        }
        if (list.empty()) list = {Strategy::FedAvg, Strategy::Fsar};
        const ExperimentConfig c = apply_overrides(exp->base, exp->overrides);
        with_log(exp, [&](std::ostream& log) { cmd_compare(c, list, log); });
    });
}

fsk_status fsk_evaluate(fsk_experiment* exp) {
    return guarded([&] {
        need(exp, "experiment");
        const ExperimentConfig c = apply_overrides(exp->base, exp->overrides);
        with_log(exp, [&](std::ostream& log) { cmd_eval(c, log); });
    });
}

fsk_status fsk_analyze(const char* run_dir) {
    return guarded([&] {
        need(run_dir, "run dir");
        cmd_analyze(run_dir, std::cout);
    });
}

fsk_status fsk_experiment_analyze(fsk_experiment* exp) {
    return guarded([&] {
        need(exp, "experiment");
        const ExperimentConfig c = apply_overrides(exp->base, exp->overrides);
        with_log(exp, [&](std::ostream& log) { cmd_analyze(c.output_dir, log); });
    });
}

const char* fsk_experiment_output_dir(fsk_experiment* exp) {
    const fsk_status s = guarded([&] {
        need(exp, "experiment");
        exp->resolved_out = apply_overrides(exp->base, exp->overrides).output_dir.string();
    });
    return s == FSK_OK ? exp->resolved_out.c_str() : nullptr;
}

double fsk_last_mean_accuracy(const fsk_experiment* exp) { return exp ? exp->last_accuracy : -1.0; }

}  // extern "C"
