#include "fedskel/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "fedskel/errors.hpp"

namespace fedskel {

Strategy parse_strategy(const std::string& name) {
    if (name == "fedavg") return Strategy::FedAvg;
    if (name == "fedprox") return Strategy::FedProx;
    if (name == "fedbn") return Strategy::FedBn;
    if (name == "fsar") return Strategy::Fsar;
    throw ConfigError("unknown strategy '" + name + "' (expected fedavg, fedprox, fedbn or fsar)");
}

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::FedAvg: return "fedavg";
        case Strategy::FedProx: return "fedprox";
        case Strategy::FedBn: return "fedbn";
        case Strategy::Fsar: return "fsar";
    }
    return "?";
}

namespace {

struct Reader {
    std::string origin;

    [[noreturn]] void fail(const YAML::Node& at, const std::string& what) const {
        const YAML::Mark m = at.Mark();
        std::string where = origin;
        if (m.line >= 0) where += ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
        throw ConfigError(where + ": " + what);
    }

    void only(const YAML::Node& map, const std::string& section, const std::set<std::string>& allowed) const {
        if (!map.IsMap()) fail(map, "section '" + section + "' must be a mapping");
        for (const auto& kv : map) {
            const auto key = kv.first.as<std::string>();
            if (!allowed.count(key)) {
                std::string list;
                for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
                fail(kv.first, "unknown key '" + key + "' in " + section + " (allowed: " + list + ")");
            }
        }
    }

    template <typename T>
    void get(const YAML::Node& map, const char* key, T& out) const {
        const YAML::Node n = map[key];
        if (!n) return;
        try {
            out = n.as<T>();
        } catch (const YAML::Exception&) {
            fail(n, std::string("bad value for '") + key + "'");
        }
    }

    template <typename E, typename F>
    void get_enum(const YAML::Node& map, const char* key, E& out, F parse) const {
        const YAML::Node n = map[key];
        if (!n) return;
        try {
            out = parse(n.as<std::string>());
        } catch (const ConfigError& e) {
            fail(n, e.what());
        } catch (const YAML::Exception&) {
            fail(n, std::string("bad value for '") + key + "'");
        }
    }

    YAML::Node section(const YAML::Node& root, const char* name) const {
        const YAML::Node n = root[name];
        if (!n) fail(root, std::string("missing section '") + name + "'");
        if (n.IsNull()) return YAML::Node(YAML::NodeType::Map);
        return n;
    }
};

ConvChoice parse_conv(const std::string& s) {
    if (s == "auto") return ConvChoice::Auto;
    if (s == "vanilla") return ConvChoice::Vanilla;
    if (s == "ats") return ConvChoice::Ats;
    throw ConfigError("unknown conv '" + s + "' (expected auto, vanilla or ats)");
}

const char* conv_name(ConvChoice c) {
    switch (c) {
        case ConvChoice::Auto: return "auto";
        case ConvChoice::Vanilla: return "vanilla";
        case ConvChoice::Ats: return "ats";
    }
    return "?";
}

CoefficientMode parse_coefficients(const std::string& s) {
    if (s == "learnable") return CoefficientMode::Learnable;
    if (s == "fixed") return CoefficientMode::Fixed;
    throw ConfigError("unknown coefficients mode '" + s + "' (expected learnable or fixed)");
}

void read_skeleton(const Reader& r, const YAML::Node& n, DataSection& d) {
    if (n.IsScalar()) {
        const auto name = n.as<std::string>();
        if (name != "ntu25") r.fail(n, "unknown skeleton '" + name + "' (expected ntu25 or a mapping)");
        d.skeleton = SkeletonGraph::ntu25();
        d.skeleton_name = name;
        return;
    }
    r.only(n, "data.skeleton", {"joints", "root", "edges"});
    SkeletonGraph g;
    r.get(n, "joints", g.joints);
    r.get(n, "root", g.root);
    const YAML::Node edges = n["edges"];
    if (!edges || !edges.IsSequence()) r.fail(n, "data.skeleton needs an edges list");
    for (const auto& e : edges) {
        if (!e.IsSequence() || e.size() != 2) r.fail(e, "each edge must be a pair [a, b]");
        g.edges.emplace_back(e[0].as<int>(), e[1].as<int>());
    }
    try {
        g.validate();
    } catch (const TopologyError& ex) {
        r.fail(n, ex.what());
    }
    d.skeleton = g;
    d.skeleton_name = "custom";
}

}  // namespace

ExperimentConfig parse_config(const std::string& yaml_text, const std::string& origin) {
    Reader r{origin};
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::ParserException& e) {
        throw ConfigError(origin + ":" + std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1) +
                          ": " + e.msg);
    }
    if (!root.IsMap()) throw ConfigError(origin + ": top level must be a mapping");
    r.only(root, "top level", {"seed", "output_dir", "data_dir", "model", "federation", "loss", "data", "eval"});

    ExperimentConfig c;
    r.get(root, "seed", c.seed);
    std::string out = c.output_dir.string(), data_dir;
    r.get(root, "output_dir", out);
    r.get(root, "data_dir", data_dir);
    c.output_dir = out;
    c.data_dir = data_dir;

    const YAML::Node m = r.section(root, "model");
    r.only(m, "model",
           {"channels", "strides", "temporal_kernel", "feature_dim", "conv", "coefficients", "coefficient_init"});
    r.get(m, "channels", c.model.channels);
    r.get(m, "strides", c.model.strides);
    r.get(m, "temporal_kernel", c.model.temporal_kernel);
    r.get(m, "feature_dim", c.model.feature_dim);
    r.get_enum(m, "conv", c.model.conv, parse_conv);
    r.get_enum(m, "coefficients", c.model.coefficients, parse_coefficients);
    if (m["coefficient_init"]) {
        std::vector<float> init;
        r.get(m, "coefficient_init", init);
        if (init.size() != 3) r.fail(m["coefficient_init"], "coefficient_init needs exactly 3 values");
        c.model.coefficient_init = {init[0], init[1], init[2]};
    }

    const YAML::Node f = r.section(root, "federation");
    r.only(f, "federation",
           {"clients", "rounds", "local_epochs", "strategy", "server_momentum", "prox_mu", "learning_rate", "momentum",
            "weight_decay", "batch_size", "jobs"});
    r.get(f, "clients", c.federation.clients);
    r.get(f, "rounds", c.federation.rounds);
    r.get(f, "local_epochs", c.federation.local_epochs);
    r.get_enum(f, "strategy", c.federation.strategy, parse_strategy);
    r.get(f, "server_momentum", c.federation.server_momentum);
    r.get(f, "prox_mu", c.federation.prox_mu);
    r.get(f, "learning_rate", c.federation.learning_rate);
    r.get(f, "momentum", c.federation.momentum);
    r.get(f, "weight_decay", c.federation.weight_decay);
    r.get(f, "batch_size", c.federation.batch_size);
    r.get(f, "jobs", c.federation.jobs);

    const YAML::Node l = r.section(root, "loss");
    r.only(l, "loss", {"lambda_ce", "lambda_kd", "lambda_reg", "grains", "kd_temperature"});
    r.get(l, "lambda_ce", c.loss.lambda_ce);
    r.get(l, "lambda_kd", c.loss.lambda_kd);
    r.get(l, "lambda_reg", c.loss.lambda_reg);
    r.get(l, "grains", c.loss.grains);
    r.get(l, "kd_temperature", c.loss.kd_temperature);

    const YAML::Node d = r.section(root, "data");
    r.only(d, "data",
           {"profile", "skeleton", "frames", "classes_per_client", "base_samples", "train_fraction", "rewire", "sigma"});
    r.get_enum(d, "profile", c.data.profile, parse_scale_profile);
    if (d["skeleton"]) read_skeleton(r, d["skeleton"], c.data);
    r.get(d, "frames", c.data.frames);
    r.get(d, "classes_per_client", c.data.classes_per_client);
    r.get(d, "base_samples", c.data.base_samples);
    r.get(d, "train_fraction", c.data.train_fraction);
    r.get(d, "rewire", c.data.rewire);
    r.get(d, "sigma", c.data.sigma);

    const YAML::Node e = r.section(root, "eval");
    r.only(e, "eval", {"interval", "knn_k", "unseen_client", "probe_per_client", "batch_size", "cka_interval"});
    r.get(e, "interval", c.eval.interval);
    r.get(e, "knn_k", c.eval.knn_k);
    r.get(e, "unseen_client", c.eval.unseen_client);
    r.get(e, "probe_per_client", c.eval.probe_per_client);
    r.get(e, "batch_size", c.eval.batch_size);
    r.get(e, "cka_interval", c.eval.cka_interval);

    try {
        c.validate();
    } catch (const ConfigError& ex) {
        throw ConfigError(origin + ": " + ex.what());
    }
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

void ExperimentConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError(what);
    };
    const auto& fe = federation;
    need(fe.clients >= 2, "federation.clients must be at least 2");
    need(fe.rounds >= 1, "federation.rounds must be at least 1");
    need(fe.local_epochs >= 1, "federation.local_epochs must be at least 1");
    need(fe.server_momentum >= 0.0f && fe.server_momentum < 1.0f, "federation.server_momentum must lie in [0, 1)");
    need(fe.prox_mu >= 0.0f, "federation.prox_mu must be nonnegative");
    need(fe.learning_rate >= 0.0f, "federation.learning_rate must be nonnegative");
    need(fe.momentum >= 0.0f && fe.momentum < 1.0f, "federation.momentum must lie in [0, 1)");
    need(fe.weight_decay >= 0.0f, "federation.weight_decay must be nonnegative");
    need(fe.batch_size >= 1, "federation.batch_size must be at least 1");
    need(fe.jobs >= 1, "federation.jobs must be at least 1");
    need(loss.lambda_ce >= 0.0f && loss.lambda_kd >= 0.0f && loss.lambda_reg >= 0.0f, "loss weights must be nonnegative");
    need(eval.interval >= 1, "eval.interval must be at least 1");
    need(eval.knn_k >= 1, "eval.knn_k must be at least 1");
    need(eval.probe_per_client >= 1, "eval.probe_per_client must be at least 1");
    need(eval.batch_size >= 1, "eval.batch_size must be at least 1");
    need(eval.cka_interval >= 0, "eval.cka_interval must be nonnegative");
    need(data.frames >= 1, "data.frames must be at least 1");
    need(data.classes_per_client >= 2, "data.classes_per_client must be at least 2");
    need(data.base_samples >= 2 * data.classes_per_client, "data.base_samples must give at least 2 samples per class");
    need(data.train_fraction > 0.0 && data.train_fraction < 1.0, "data.train_fraction must lie in (0, 1)");
    need(data.rewire >= 0, "data.rewire must be nonnegative");
    need(data.sigma >= 0.0f, "data.sigma must be nonnegative");
    const Protocol p = resolve_protocol(*this);
    model_config(*this, p).validate();
    MkdConfig{loss.grains, loss.kd_temperature}.validate(static_cast<int>(model.channels.size()));
}

Protocol resolve_protocol(const ExperimentConfig& config) {
    Protocol p;
    p.strategy = config.federation.strategy;
    const bool fsar = p.strategy == Strategy::Fsar;
    switch (config.model.conv) {
        case ConvChoice::Auto: p.conv = fsar ? ConvMode::Ats : ConvMode::Vanilla; break;
        case ConvChoice::Vanilla: p.conv = ConvMode::Vanilla; break;
        case ConvChoice::Ats: p.conv = ConvMode::Ats; break;
    }
    p.lambda_ce = config.loss.lambda_ce;
    if (fsar) {
        p.grains = config.loss.grains;
        p.lambda_kd = config.loss.lambda_kd;
        p.reg_coef = config.loss.lambda_reg;
        p.server_momentum = config.federation.server_momentum;
    }
    if (p.strategy == Strategy::FedProx) p.reg_coef = config.federation.prox_mu;
    p.share_batchnorm = p.strategy != Strategy::FedBn;
    return p;
}

ModelConfig model_config(const ExperimentConfig& config, const Protocol& protocol) {
    ModelConfig m;
    m.joints = config.data.skeleton.joints;
    m.frames = config.data.frames;
    m.in_channels = 3;
    m.channels = config.model.channels;
    m.strides = config.model.strides;
    m.temporal_kernel = config.model.temporal_kernel;
    m.feature_dim = config.model.feature_dim;
    m.num_classes = config.data.classes_per_client;
    m.conv_mode = protocol.conv;
    m.coefficient_mode = config.model.coefficients;
    m.coefficient_init = config.model.coefficient_init;
    return m;
}

SuiteOptions suite_options(const ExperimentConfig& config) {
    SuiteOptions o;
    o.skeleton = config.data.skeleton;
    o.frames = config.data.frames;
    o.channels = 3;
    o.classes_per_client = config.data.classes_per_client;
    o.base_samples = config.data.base_samples;
    o.train_fraction = config.data.train_fraction;
    o.rewire = config.data.rewire;
    o.sigma = config.data.sigma;
    return o;
}

std::string dump_config(const ExperimentConfig& c) {
    YAML::Emitter y;
    y.SetFloatPrecision(9);
    y << YAML::BeginMap;
    y << YAML::Key << "seed" << YAML::Value << c.seed;
    y << YAML::Key << "output_dir" << YAML::Value << c.output_dir.string();
    y << YAML::Key << "data_dir" << YAML::Value << c.data_dir.string();

    y << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
    y << YAML::Key << "channels" << YAML::Value << YAML::Flow << c.model.channels;
    y << YAML::Key << "strides" << YAML::Value << YAML::Flow << c.model.strides;
    y << YAML::Key << "temporal_kernel" << YAML::Value << c.model.temporal_kernel;
    y << YAML::Key << "feature_dim" << YAML::Value << c.model.feature_dim;
    y << YAML::Key << "conv" << YAML::Value << conv_name(c.model.conv);
    y << YAML::Key << "coefficients" << YAML::Value
      << (c.model.coefficients == CoefficientMode::Learnable ? "learnable" : "fixed");
    y << YAML::Key << "coefficient_init" << YAML::Value << YAML::Flow
      << std::vector<float>(c.model.coefficient_init.begin(), c.model.coefficient_init.end());
    y << YAML::EndMap;

    const auto& f = c.federation;
    y << YAML::Key << "federation" << YAML::Value << YAML::BeginMap;
    y << YAML::Key << "clients" << YAML::Value << f.clients;
    y << YAML::Key << "rounds" << YAML::Value << f.rounds;
    y << YAML::Key << "local_epochs" << YAML::Value << f.local_epochs;
    y << YAML::Key << "strategy" << YAML::Value << strategy_name(f.strategy);
    y << YAML::Key << "server_momentum" << YAML::Value << f.server_momentum;
    y << YAML::Key << "prox_mu" << YAML::Value << f.prox_mu;
    y << YAML::Key << "learning_rate" << YAML::Value << f.learning_rate;
    y << YAML::Key << "momentum" << YAML::Value << f.momentum;
    y << YAML::Key << "weight_decay" << YAML::Value << f.weight_decay;
    y << YAML::Key << "batch_size" << YAML::Value << f.batch_size;
    y << YAML::Key << "jobs" << YAML::Value << f.jobs;
    y << YAML::EndMap;

    y << YAML::Key << "loss" << YAML::Value << YAML::BeginMap;
    y << YAML::Key << "lambda_ce" << YAML::Value << c.loss.lambda_ce;
    y << YAML::Key << "lambda_kd" << YAML::Value << c.loss.lambda_kd;
    y << YAML::Key << "lambda_reg" << YAML::Value << c.loss.lambda_reg;
    y << YAML::Key << "grains" << YAML::Value << c.loss.grains;
    y << YAML::Key << "kd_temperature" << YAML::Value << c.loss.kd_temperature;
    y << YAML::EndMap;

    y << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
    y << YAML::Key << "profile" << YAML::Value << scale_profile_name(c.data.profile);
    if (c.data.skeleton_name == "ntu25") {
        y << YAML::Key << "skeleton" << YAML::Value << "ntu25";
    } else {
        y << YAML::Key << "skeleton" << YAML::Value << YAML::BeginMap;
        y << YAML::Key << "joints" << YAML::Value << c.data.skeleton.joints;
        y << YAML::Key << "root" << YAML::Value << c.data.skeleton.root;
        y << YAML::Key << "edges" << YAML::Value << YAML::Flow << YAML::BeginSeq;
        for (auto [a, b] : c.data.skeleton.edges) y << YAML::Flow << std::vector<int>{a, b};
        y << YAML::EndSeq << YAML::EndMap;
    }
    y << YAML::Key << "frames" << YAML::Value << c.data.frames;
    y << YAML::Key << "classes_per_client" << YAML::Value << c.data.classes_per_client;
    y << YAML::Key << "base_samples" << YAML::Value << c.data.base_samples;
    y << YAML::Key << "train_fraction" << YAML::Value << c.data.train_fraction;
    y << YAML::Key << "rewire" << YAML::Value << c.data.rewire;
    y << YAML::Key << "sigma" << YAML::Value << c.data.sigma;
    y << YAML::EndMap;

    y << YAML::Key << "eval" << YAML::Value << YAML::BeginMap;
    y << YAML::Key << "interval" << YAML::Value << c.eval.interval;
    y << YAML::Key << "knn_k" << YAML::Value << c.eval.knn_k;
    y << YAML::Key << "unseen_client" << YAML::Value << c.eval.unseen_client;
    y << YAML::Key << "probe_per_client" << YAML::Value << c.eval.probe_per_client;
    y << YAML::Key << "batch_size" << YAML::Value << c.eval.batch_size;
    y << YAML::Key << "cka_interval" << YAML::Value << c.eval.cka_interval;
    y << YAML::EndMap;

    y << YAML::EndMap;
    return std::string(y.c_str()) + "\n";
}

}  // namespace fedskel
