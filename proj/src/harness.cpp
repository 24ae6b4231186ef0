#include "fedskel/harness.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "fedskel/checkpoint.hpp"
#include "fedskel/errors.hpp"

namespace fs = std::filesystem;

namespace fedskel {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw IoError("cannot write " + p.string());
    return f;
}

const char* coef_name(int k) { return k == 0 ? "alpha" : k == 1 ? "beta" : "gamma"; }

void write_cka(const fs::path& dir, const std::vector<CkaMatrix>& report) {
    for (const auto& m : report) {
        auto f = open_out(dir / ("cka_block" + std::to_string(m.block) + ".csv"));
        f << "block,client_i,client_j,cka\n";
        for (int i = 0; i < m.clients; ++i)
            for (int j = 0; j < m.clients; ++j) f << m.block << ',' << i << ',' << j << ',' << fmt(m.at(i, j)) << '\n';
    }
}

class MetricsWriter {
public:
    explicit MetricsWriter(const fs::path& file) : out_(open_out(file)) {
        out_ << "round,client,protocol,metric,value\n";
        out_.flush();
    }

    void round(const RoundReport& rep) {
        for (size_t i = 0; i < rep.losses.size(); ++i) {
            const auto& l = rep.losses[i];
            row(rep.round, std::to_string(i), "train", "ce", l.ce);
            row(rep.round, std::to_string(i), "train", "kd", l.kd);
            row(rep.round, std::to_string(i), "train", "reg", l.reg);
            row(rep.round, std::to_string(i), "train", "total", l.total);
        }
        for (const auto& e : rep.evals) {
            row(rep.round, e.client, e.protocol == EvalProtocol::Linear ? "linear" : "knn", "accuracy", e.accuracy);
        }
        for (size_t i = 0; i < rep.coefficients.size(); ++i)
            for (size_t b = 0; b < rep.coefficients[i].size(); ++b)
                for (int k = 0; k < 3; ++k) {
                    row(rep.round, std::to_string(i), "ats", std::string(coef_name(k)) + ".block" + std::to_string(b),
                        rep.coefficients[i][b][k]);
                }
        out_.flush();
        if (!out_) throw IoError("failed appending to metrics.csv");
    }

private:
    void row(int r, const std::string& client, const char* protocol, const std::string& metric, double v) {
        out_ << r << ',' << client << ',' << protocol << ',' << metric << ',' << fmt(v) << '\n';
    }
    std::ofstream out_;
};

ParamStore combine_for_eval(const ParamStore& server, const ParamStore& client) {
    ParamStore p;
    for (const auto& e : client.entries()) p.add(e.name, server.contains(e.name) ? server.at(e.name) : e.tensor);
    return p;
}

Architecture architecture_for(const ExperimentConfig& config) {
    const Protocol p = resolve_protocol(config);
    return {model_config(config, p), build_partitions(config.data.skeleton)};
}

}  // namespace

ExperimentConfig apply_overrides(ExperimentConfig c, const Overrides& o) {
    if (o.seed) c.seed = *o.seed;
    if (o.strategy) c.federation.strategy = *o.strategy;
    if (o.rounds) c.federation.rounds = *o.rounds;
    if (o.jobs) c.federation.jobs = *o.jobs;
    if (o.out) {
        c.output_dir = *o.out;
    } else if (const char* env = std::getenv("FEDSKEL_OUT"); env && *env) {
        c.output_dir = env;
    }
    c.validate();
    return c;
}

fs::path data_directory(const ExperimentConfig& config) {
    return config.data_dir.empty() ? config.output_dir / "data" : config.data_dir;
}

SuiteData prepare_data(const ExperimentConfig& config) {
    const auto specs = make_federation_suite(config.federation.clients, config.data.profile, config.seed,
                                             suite_options(config), config.eval.unseen_client);
    auto all = load_or_generate(data_directory(config), specs);
    SuiteData s;
    if (config.eval.unseen_client) {
        s.unseen = std::move(all.back());
        all.pop_back();
    }
    s.clients = std::move(all);
    return s;
}

// ---- series ---------------------------------------------------------------

std::vector<MetricRow> read_metrics(const fs::path& csv) {
    std::ifstream in(csv);
    if (!in) throw IoError("cannot read " + csv.string());
    std::string line;
    std::getline(in, line);
    if (line != "round,client,protocol,metric,value") throw IoError(csv.string() + ": unexpected header");
    std::vector<MetricRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        MetricRow r;
        std::string round, value;
        if (!std::getline(ss, round, ',') || !std::getline(ss, r.client, ',') || !std::getline(ss, r.protocol, ',') ||
            !std::getline(ss, r.metric, ',') || !std::getline(ss, value)) {
            throw IoError(csv.string() + ": malformed row '" + line + "'");
        }
        r.round = std::stoi(round);
        r.value = std::stod(value);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<std::vector<std::pair<int, double>>> accuracy_series(const std::vector<MetricRow>& rows) {
    std::map<int, std::vector<std::pair<int, double>>> by_client;
    for (const auto& r : rows) {
        if (r.protocol == "linear" && r.metric == "accuracy") by_client[std::stoi(r.client)].emplace_back(r.round, r.value);
    }
    std::vector<std::vector<std::pair<int, double>>> out;
    for (auto& [c, s] : by_client) out.push_back(std::move(s));
    return out;
}

double final_mean_accuracy(const std::vector<std::vector<std::pair<int, double>>>& series, int points) {
    if (series.empty()) return 0.0;
    double total = 0.0;
    for (const auto& s : series) {
        const size_t k = std::min<size_t>(s.size(), static_cast<size_t>(std::max(points, 1)));
        double m = 0.0;
        for (size_t i = s.size() - k; i < s.size(); ++i) m += s[i].second;
        total += k ? m / static_cast<double>(k) : 0.0;
    }
    return total / static_cast<double>(series.size());
}

double rolling_std(const std::vector<std::vector<std::pair<int, double>>>& series, double fraction, int window) {
    double total = 0.0;
    int clients = 0;
    for (const auto& s : series) {
        const size_t n = s.size();
        const size_t start = n - static_cast<size_t>(std::ceil(fraction * static_cast<double>(n)));
        const size_t w = static_cast<size_t>(std::max(window, 2));
        if (n - start < w) continue;
        double acc = 0.0;
        int windows = 0;
        for (size_t a = start; a + w <= n; ++a) {
            double m = 0.0;
            for (size_t i = a; i < a + w; ++i) m += s[i].second;
            m /= static_cast<double>(w);
            double v = 0.0;
            for (size_t i = a; i < a + w; ++i) v += (s[i].second - m) * (s[i].second - m);
            acc += std::sqrt(v / static_cast<double>(w - 1));
            ++windows;
        }
        total += acc / windows;
        ++clients;
    }
    return clients ? total / clients : 0.0;
}

// ---- subcommands ----------------------------------------------------------

void cmd_generate(const ExperimentConfig& config, std::ostream& log) {
    const SuiteData s = prepare_data(config);
    const fs::path dir = data_directory(config);
    for (const auto& c : s.clients) {
        log << "client " << c.spec.client << ": " << c.train.size() << " train / " << c.test.size() << " test -> "
            << cache_file(dir, c.spec.client).string() << '\n';
    }
    if (s.unseen) {
        log << "unseen client " << s.unseen->spec.client << ": " << s.unseen->train.size() << " train / "
            << s.unseen->test.size() << " test\n";
    }
    log << "manifest " << (dir / "manifest.json").string() << '\n';
}

TrainSummary cmd_train(const ExperimentConfig& config, std::ostream& log, const RunHooks& hooks) {
    const fs::path run = config.output_dir;
    ensure_dir(run);
    ensure_dir(run / "checkpoints");
    {
        auto f = open_out(run / "config.effective.yaml");
        f << dump_config(config);
    }
    SuiteData data = prepare_data(config);
    MetricsWriter metrics(run / "metrics.csv");

    RunHooks h = hooks;
    h.on_round = [&](const RoundReport& rep) {
        metrics.round(rep);
        double loss = 0.0;
        for (const auto& l : rep.losses) loss += l.total;
        log << "round " << rep.round + 1 << '/' << config.federation.rounds << " loss " << std::fixed
            << std::setprecision(4) << loss / static_cast<double>(rep.losses.size());
        for (const auto& e : rep.evals) {
            log << ' ' << (e.protocol == EvalProtocol::Linear ? "acc" : "knn") << '[' << e.client << "]=" << e.accuracy;
        }
        log << " (" << std::setprecision(2) << rep.wall_seconds << "s)\n" << std::defaultfloat;
        log.flush();
        if (hooks.on_round) hooks.on_round(rep);
    };
    RunResult res = run_experiment(config, std::move(data.clients), data.unseen, h);

    const int rounds = config.federation.rounds;
    save_checkpoint(run / "checkpoints" / "server.ckpt", res.server, rounds);
    for (size_t i = 0; i < res.clients.size(); ++i) {
        save_checkpoint(run / "checkpoints" / ("client_" + std::to_string(i) + ".ckpt"), res.clients[i], rounds);
    }
    write_cka(run, res.final_cka);

    TrainSummary s;
    s.run_dir = run;
    for (const auto& e : res.reports.back().evals) {
        if (e.protocol == EvalProtocol::Linear) s.final_accuracy.push_back(e.accuracy);
    }
    double m = 0.0;
    for (double a : s.final_accuracy) m += a;
    s.mean_final_accuracy = s.final_accuracy.empty() ? 0.0 : m / static_cast<double>(s.final_accuracy.size());
    log << "final mean linear accuracy " << fmt(s.mean_final_accuracy) << " -> " << run.string() << '\n';
    return s;
}

std::vector<CompareColumn> cmd_compare(const ExperimentConfig& config, const std::vector<Strategy>& strategies,
                                       std::ostream& log) {
    if (strategies.empty()) throw ConfigError("compare needs at least one strategy");
    const fs::path root = config.output_dir;
    ensure_dir(root);
    std::vector<CompareColumn> cols;
    std::map<std::string, int> seen;
    for (Strategy s : strategies) {
        ExperimentConfig c = config;
        c.data_dir = data_directory(config);
        c.federation.strategy = s;
        std::string name = strategy_name(s);
        if (const int k = ++seen[name]; k > 1) name += "_" + std::to_string(k);
        c.output_dir = root / name;
        c.validate();
        log << "== " << name << " ==\n";
        cmd_train(c, log);
        const auto series = accuracy_series(read_metrics(c.output_dir / "metrics.csv"));
        CompareColumn col;
        col.name = name;
        col.run_dir = c.output_dir;
        for (const auto& ser : series) col.final_accuracy.push_back(ser.empty() ? 0.0 : ser.back().second);
        col.mean_final_accuracy = final_mean_accuracy(series, 1);
        col.stability = rolling_std(series, 0.25, kStabilityWindow);
        cols.push_back(std::move(col));
    }

    auto csv = open_out(root / "compare.csv");
    csv << "strategy,client,final_accuracy,rolling_std,delta_vs_" << cols.front().name << '\n';
    for (const auto& col : cols) {
        for (size_t i = 0; i < col.final_accuracy.size(); ++i) {
            const double d = col.final_accuracy[i] - cols.front().final_accuracy[i];
            csv << col.name << ',' << i << ',' << fmt(col.final_accuracy[i]) << ",," << fmt(d) << '\n';
        }
        csv << col.name << ",mean," << fmt(col.mean_final_accuracy) << ',' << fmt(col.stability) << ','
            << fmt(col.mean_final_accuracy - cols.front().mean_final_accuracy) << '\n';
    }

    std::ostringstream table;
    table << std::left << std::setw(12) << "strategy" << std::setw(8) << "client" << std::right << std::setw(10)
          << "accuracy" << std::setw(12) << "roll.std" << std::setw(10) << "delta" << '\n';
    for (const auto& col : cols) {
        auto line = [&](const std::string& client, double acc, const std::string& stab, double d) {
            char delta[32];
            std::snprintf(delta, sizeof delta, "%+.4f", d);
            table << std::left << std::setw(12) << col.name << std::setw(8) << client << std::right << std::setw(10)
                  << std::fixed << std::setprecision(4) << acc << std::setw(12) << stab << std::setw(10) << delta
                  << '\n';
        };
        for (size_t i = 0; i < col.final_accuracy.size(); ++i) {
            line(std::to_string(i), col.final_accuracy[i], "", col.final_accuracy[i] - cols.front().final_accuracy[i]);
        }
        char stab[32];
        std::snprintf(stab, sizeof stab, "%.4f", col.stability);
        line("mean", col.mean_final_accuracy, stab, col.mean_final_accuracy - cols.front().mean_final_accuracy);
    }
    auto txt = open_out(root / "compare.txt");
    txt << table.str();
    log << table.str();
    return cols;
}

void cmd_analyze(const fs::path& run_dir, std::ostream& log) {
    if (!fs::exists(run_dir / "checkpoints" / "server.ckpt")) {
        throw IoError("no checkpoints in " + run_dir.string() + " (expected checkpoints/server.ckpt)");
    }
    const ExperimentConfig config = load_config(run_dir / "config.effective.yaml");
    const auto rows = read_metrics(run_dir / "metrics.csv");
    const fs::path out = run_dir / "analysis";
    ensure_dir(out);

    // coefficient trajectories and drift
    std::map<std::pair<int, int>, std::map<int, std::array<double, 3>>> traj;  // (client, block) -> round -> coefs
    for (const auto& r : rows) {
        if (r.protocol != "ats") continue;
        const auto dot = r.metric.find(".block");
        const std::string name = r.metric.substr(0, dot);
        const int block = std::stoi(r.metric.substr(dot + 6));
        const int k = name == "alpha" ? 0 : name == "beta" ? 1 : 2;
        traj[{std::stoi(r.client), block}][r.round][k] = r.value;
    }
    {
        auto f = open_out(out / "coefficients.csv");
        f << "round,client,block,alpha,beta,gamma\n";
        for (const auto& [key, series] : traj)
            for (const auto& [round, c] : series) {
                f << round << ',' << key.first << ',' << key.second << ',' << fmt(c[0]) << ',' << fmt(c[1]) << ','
                  << fmt(c[2]) << '\n';
            }
        auto d = open_out(out / "coefficient_drift.csv");
        d << "client,block,delta_alpha,delta_beta,delta_gamma\n";
        const auto& init = config.model.coefficient_init;
        // drift is read from the client checkpoints so it reflects the exact final values
        for (int i = 0; i < config.federation.clients; ++i) {
            const fs::path ck = run_dir / "checkpoints" / ("client_" + std::to_string(i) + ".ckpt");
            if (!fs::exists(ck)) throw IoError("missing checkpoint " + ck.string());
            const Checkpoint c = load_checkpoint(ck);
            for (int b = 0; b < static_cast<int>(config.model.channels.size()); ++b) {
                const std::string key = "coef." + block_key(b, "");
                if (!c.params.contains(key)) continue;
                const auto v = c.params.at(key).data();
                d << i << ',' << b << ',' << fmt(static_cast<double>(v[0]) - init[0]) << ','
                  << fmt(static_cast<double>(v[1]) - init[1]) << ',' << fmt(static_cast<double>(v[2]) - init[2])
                  << '\n';
            }
        }
    }

    // accuracy curves
    const auto series = accuracy_series(rows);
    for (size_t i = 0; i < series.size(); ++i) {
        auto f = open_out(out / ("accuracy_client" + std::to_string(i) + ".csv"));
        f << "x,y\n";
        for (const auto& [r, a] : series[i]) f << r << ',' << fmt(a) << '\n';
    }
    {
        auto f = open_out(out / "knn_unseen.csv");
        f << "x,y\n";
        for (const auto& r : rows)
            if (r.protocol == "knn") f << r.round << ',' << fmt(r.value) << '\n';
    }

    // CKA recomputed from the client checkpoints on the shared probe pool
    const SuiteData data = prepare_data(config);
    const Tensor probe = probe_batch(data.clients, config.eval.probe_per_client, config.seed);
    const Architecture arch = architecture_for(config);
    std::vector<ParamStore> stores;
    for (int i = 0; i < config.federation.clients; ++i) {
        stores.push_back(load_checkpoint(run_dir / "checkpoints" / ("client_" + std::to_string(i) + ".ckpt")).params);
    }
    std::vector<const ParamStore*> ptrs;
    for (const auto& s : stores) ptrs.push_back(&s);
    const auto report = block_cka_report(arch, ptrs, probe, config.eval.batch_size);
    write_cka(out, report);
    for (const auto& m : report) {
        log << "block " << m.block << " mean off-diagonal CKA " << fmt(m.mean_off_diagonal()) << '\n';
    }
    log << "analysis written to " << out.string() << '\n';
}

EvalSummary cmd_eval(const ExperimentConfig& config, std::ostream& log) {
    const fs::path run = config.output_dir;
    const fs::path ckdir = run / "checkpoints";
    if (!fs::exists(ckdir / "server.ckpt")) throw IoError("no checkpoints in " + ckdir.string());
    const Architecture arch = architecture_for(config);
    const Protocol protocol = resolve_protocol(config);
    const SuiteData data = prepare_data(config);
    const Checkpoint server = load_checkpoint(ckdir / "server.ckpt");

    EvalSummary s;
    auto f = open_out(run / "eval.csv");
    f << "client,protocol,accuracy\n";
    for (int i = 0; i < config.federation.clients; ++i) {
        const Checkpoint c = load_checkpoint(ckdir / ("client_" + std::to_string(i) + ".ckpt"));
        const ParamStore p = combine_for_eval(server.params, c.params);
        const double acc = linear_accuracy(arch, p, data.clients[i].test, config.eval.batch_size);
        s.linear.push_back(acc);
        f << i << ",linear," << fmt(acc) << '\n';
        log << "client " << i << " linear accuracy " << fmt(acc) << '\n';
    }
    if (data.unseen) {
        const ParamStore p = server_feature_params(server.params, arch, protocol.share_batchnorm);
        const bool batch_stats = !protocol.share_batchnorm;
        const Tensor tr = extract_features(arch, p, data.unseen->train.x, AdjacencySource::Server, batch_stats,
                                           config.eval.batch_size);
        const Tensor te = extract_features(arch, p, data.unseen->test.x, AdjacencySource::Server, batch_stats,
                                           config.eval.batch_size);
        s.knn = knn_accuracy(tr, data.unseen->train.labels, te, data.unseen->test.labels, config.eval.knn_k);
        f << "unseen,knn," << fmt(*s.knn) << '\n';
        log << "unseen knn accuracy " << fmt(*s.knn) << '\n';
    }
    return s;
}

}  // namespace fedskel
