#include "fedskel/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <random>
#include <set>
#include <thread>

#include "fedskel/errors.hpp"
#include "fedskel/mkd.hpp"

namespace fedskel {

namespace {

std::mt19937_64 rng_for(std::initializer_list<uint64_t> words) {
    std::vector<uint32_t> seq;
    for (uint64_t w : words) {
        seq.push_back(static_cast<uint32_t>(w));
        seq.push_back(static_cast<uint32_t>(w >> 32));
    }
    std::seed_seq ss(seq.begin(), seq.end());
    return std::mt19937_64(ss);
}

uint64_t seed_for(std::initializer_list<uint64_t> words) { return rng_for(words)(); }

enum : uint64_t { kServerInit = 1, kClientInit = 2, kShuffle = 3, kProbe = 4 };

bool finite(double v) { return std::isfinite(v); }

}  // namespace

bool is_aggregatable(ParamGroup group, bool share_batchnorm) {
    switch (group) {
        case ParamGroup::Backbone:
        case ParamGroup::Inflected: return true;
        case ParamGroup::BatchNorm:
        case ParamGroup::BatchNormStat: return share_batchnorm;
        case ParamGroup::Unique:
        case ParamGroup::Coefficient:
        case ParamGroup::Classifier: return false;
    }
    return false;
}

ParamStore ClientState::upload(bool share_batchnorm) const {
    return params.subset([&](const ParamStore::Entry& e) { return is_aggregatable(e.group, share_batchnorm); });
}

void aggregate(ServerState& server, const std::vector<Upload>& uploads, const AggregationSettings& settings) {
    if (uploads.empty()) throw ProtocolError("aggregation needs at least one upload");
    int64_t n = 0;
    for (size_t u = 0; u < uploads.size(); ++u) {
        if (uploads[u].samples <= 0) {
            throw ProtocolError("upload " + std::to_string(u) + " reports " + std::to_string(uploads[u].samples) +
                                " samples");
        }
        n += uploads[u].samples;
        std::vector<std::string> missing, extra;
        for (const auto& e : uploads[u].params->entries()) {
            if (e.group == ParamGroup::Unique) {
                throw ProtocolError("isolation violation: upload " + std::to_string(u) + " carries unique matrix '" +
                                    e.name + "'");
            }
            if (!server.params.contains(e.name)) extra.push_back(e.name);
        }
        for (const auto& e : server.params.entries())
            if (!uploads[u].params->contains(e.name)) missing.push_back(e.name);
        if (!missing.empty() || !extra.empty()) {
            std::string msg = "upload " + std::to_string(u) + " key set differs from the server:";
            for (const auto& k : missing) msg += " missing " + k;
            for (const auto& k : extra) msg += " extra " + k;
            throw ProtocolError(msg);
        }
    }
    // double accumulation, one rounding: identical uploads aggregate to themselves
    std::vector<double> weights;
    for (const auto& u : uploads) weights.push_back(static_cast<double>(u.samples) / static_cast<double>(n));

    const float beta = settings.server_momentum;
    server.velocity.resize(server.params.size());
    const auto& entries = server.params.entries();
    for (size_t e = 0; e < entries.size(); ++e) {
        const Tensor& g = entries[e].tensor;
        std::vector<double> acc(static_cast<size_t>(g.numel()), 0.0);
        for (size_t u = 0; u < uploads.size(); ++u) {
            const auto src = uploads[u].params->at(entries[e].name).data();
            const double w = weights[u];
            for (size_t k = 0; k < acc.size(); ++k) acc[k] += w * static_cast<double>(src[k]);
        }
        std::vector<float> agg(acc.begin(), acc.end());
        auto dst = g.mutable_data();
        if (beta > 0.0f && entries[e].group != ParamGroup::BatchNormStat) {
            auto& v = server.velocity[e];
            if (v.empty()) v.assign(agg.size(), 0.0f);
            for (size_t k = 0; k < agg.size(); ++k) {
                const float delta = dst[k] - agg[k];
                v[k] = beta * v[k] + delta;
                dst[k] = dst[k] - v[k];
            }
        } else {
            std::copy(agg.begin(), agg.end(), dst.begin());
        }
    }
    ++server.round;
}

void broadcast(const ServerState& server, ClientState& client) {
    for (const auto& e : server.params.entries()) client.params.at(e.name).copy_from(e.tensor);
}

Tensor proximal_term(const ParamStore& client, const ParamStore& server) {
    Tensor acc;
    for (const auto& e : client.entries()) {
        if (!e.tensor.requires_grad() || !server.contains(e.name)) continue;
        Tensor d = sub(e.tensor, server.at(e.name));
        Tensor s = sum(mul(d, d));
        acc = acc.defined() ? add(acc, s) : s;
    }
    return acc.defined() ? scale(acc, 0.5f) : Tensor::scalar(0.0f);
}

ParamStore server_feature_params(const ParamStore& server, const Architecture& arch, bool share_batchnorm) {
    ParamStore p = server.subset([](const ParamStore::Entry&) { return true; });
    if (!share_batchnorm) {
        for (int b = 0; b < arch.config.blocks(); ++b) {
            BatchNormState bn = BatchNormState::create(arch.config.channels[b]);
            p.add("bn." + block_key(b, "scale"), bn.scale.detach());
            p.add("bn." + block_key(b, "shift"), bn.shift.detach());
            p.add("bn." + block_key(b, "running_mean"), bn.running_mean);
            p.add("bn." + block_key(b, "running_var"), bn.running_var);
        }
    }
    return p;
}

// ---- Federation -----------------------------------------------------------

Federation::Federation(const ExperimentConfig& config, std::vector<ClientData> clients)
    : config_(config), protocol_(resolve_protocol(config)) {
    config_.validate();
    if (static_cast<int>(clients.size()) != config_.federation.clients) {
        throw ConfigError("federation.clients is " + std::to_string(config_.federation.clients) + " but " +
                          std::to_string(clients.size()) + " datasets were supplied");
    }
    arch_ = {model_config(config_, protocol_), build_partitions(config_.data.skeleton)};
    const ParamStore init = init_backbone(arch_, seed_for({config_.seed, kServerInit}));

    const SgdOptions sgd{config_.federation.learning_rate, config_.federation.momentum,
                         config_.federation.weight_decay};
    for (size_t i = 0; i < clients.size(); ++i) {
        ClientState c;
        c.id = static_cast<int>(i);
        c.data = std::make_shared<const ClientData>(std::move(clients[i]));
        c.samples = c.data->train.size();
        if (c.samples <= 0) throw DataError("client " + std::to_string(i) + " has an empty train split");
        if (c.data->train.x.dim(2) != arch_.config.frames || c.data->train.x.dim(3) != arch_.config.joints) {
            throw DataError("client " + std::to_string(i) + " data shape " + shape_str(c.data->train.x.shape()) +
                            " does not match the model");
        }
        c.params = init.clone();
        init_private(c.params, arch_, seed_for({config_.seed, kClientInit, i}));
        c.optimizer = std::make_unique<SgdMomentum>(sgd);
        for (const auto& t : c.params.trainable()) c.optimizer->add_param(t);
        clients_.push_back(std::move(c));
    }
    const ParamStore first = clients_.front().upload(protocol_.share_batchnorm);
    for (const auto& e : first.entries()) {
        server_.params.add(e.name, e.tensor.detach());
    }
}

LocalHyper Federation::hyper() const {
    LocalHyper h;
    h.lambda_ce = protocol_.lambda_ce;
    h.lambda_kd = protocol_.lambda_kd;
    h.reg_coef = protocol_.reg_coef;
    h.grains = protocol_.grains;
    h.kd_temperature = config_.loss.kd_temperature;
    h.epochs = config_.federation.local_epochs;
    h.batch_size = config_.federation.batch_size;
    return h;
}

LossBreakdown Federation::local_train(ClientState& client, int round) {
    const LocalHyper h = hyper();
    const Dataset& train = client.data->train;

    // Teacher view: the frozen server snapshot, completed with the client's
    // own BN tensors when the server does not carry them.
    ParamStore teacher;
    if (h.grains > 0) {
        teacher = server_.params.subset([](const ParamStore::Entry&) { return true; });
        for (const auto& e : client.params.entries()) {
            if ((e.group == ParamGroup::BatchNorm || e.group == ParamGroup::BatchNormStat) &&
                !teacher.contains(e.name)) {
                teacher.add(e.name, e.tensor.detach());
            }
        }
    }
    const MkdConfig mkd{h.grains, h.kd_temperature};

    LossBreakdown out;
    for (int epoch = 0; epoch < h.epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(train.size()));
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
        auto rng = rng_for({config_.seed, kShuffle, static_cast<uint64_t>(client.id), static_cast<uint64_t>(round),
                            static_cast<uint64_t>(epoch)});
        std::shuffle(order.begin(), order.end(), rng);

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(h.batch_size)) {
            const std::vector<int64_t> rows(order.begin() + static_cast<int64_t>(start),
                                            order.begin() + static_cast<int64_t>(
                                                                std::min(order.size(), start + h.batch_size)));
            const Tensor x = train.gather(rows);
            const std::vector<int> labels = train.gather_labels(rows);

            ForwardTrace student = forward(arch_, client.params, x, {true, true, AdjacencySource::Client});
            std::vector<TeacherStream> streams;
            if (h.grains > 0) streams = build_teacher_streams(arch_, teacher, arch_, client.params, x, mkd);

            Tensor ce = dual_ce_loss(streams, student.logits, labels);
            Tensor loss = scale(ce, h.lambda_ce);
            double kd_value = 0.0, reg_value = 0.0;
            if (h.lambda_kd > 0.0f && !streams.empty()) {
                Tensor kd = kd_loss(streams, student.logits, h.kd_temperature);
                kd_value = kd.item();
                loss = add(loss, scale(kd, h.lambda_kd));
            }
            if (h.reg_coef > 0.0f) {
                Tensor reg = proximal_term(client.params, server_.params);
                reg_value = reg.item();
                loss = add(loss, scale(reg, h.reg_coef));
            }
            const double ce_value = ce.item(), total = loss.item();
            const char* bad = !finite(ce_value) ? "CE" : !finite(kd_value) ? "KD" : !finite(reg_value) ? "Reg"
                                                         : !finite(total)    ? "total"
                                                                             : nullptr;
            if (bad) {
                GradTape::current().clear();
                throw NonFiniteError(std::string(bad) + " loss is not finite for client " + std::to_string(client.id) +
                                     " in round " + std::to_string(round));
            }
            backward(loss);
            client.optimizer->step();

            out.ce += ce_value;
            out.kd += kd_value;
            out.reg += reg_value;
            out.total += total;
            ++out.batches;
        }
    }
    if (out.batches) {
        out.ce /= out.batches;
        out.kd /= out.batches;
        out.reg /= out.batches;
        out.total /= out.batches;
    }
    return out;
}

std::vector<LossBreakdown> Federation::local_train_all(int round, int jobs) {
    const size_t n = clients_.size();
    std::vector<LossBreakdown> out(n);
    std::vector<std::exception_ptr> errors(n);
    auto work = [&](size_t i) {
        try {
            out[i] = local_train(clients_[i], round);
        } catch (...) {
            errors[i] = std::current_exception();
            GradTape::current().clear();
        }
    };
    const size_t workers = std::min<size_t>(n, static_cast<size_t>(std::max(1, jobs)));
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) work(i);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::jthread> pool;
        for (size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (size_t i = next++; i < n; i = next++) work(i);
            });
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

void Federation::aggregate_round() {
    std::vector<ParamStore> views;
    views.reserve(clients_.size());
    for (const auto& c : clients_) views.push_back(c.upload(protocol_.share_batchnorm));
    std::vector<Upload> uploads;
    for (size_t i = 0; i < clients_.size(); ++i) uploads.push_back({&views[i], clients_[i].samples});
    aggregate(server_, uploads, {protocol_.server_momentum});
}

void Federation::broadcast_all() {
    for (auto& c : clients_) broadcast(server_, c);
}

std::vector<double> Federation::linear_accuracies() const {
    std::vector<double> out;
    for (const auto& c : clients_) {
        out.push_back(linear_accuracy(arch_, c.params, c.data->test, config_.eval.batch_size));
    }
    return out;
}

ParamStore Federation::server_eval_params() const {
    return server_feature_params(server_.params, arch_, protocol_.share_batchnorm);
}

double Federation::knn_accuracy_on(const ClientData& unseen) const {
    const ParamStore p = server_eval_params();
    const bool batch_stats = !protocol_.share_batchnorm;
    const int bs = config_.eval.batch_size;
    const Tensor ftr = extract_features(arch_, p, unseen.train.x, AdjacencySource::Server, batch_stats, bs);
    const Tensor fte = extract_features(arch_, p, unseen.test.x, AdjacencySource::Server, batch_stats, bs);
    return knn_accuracy(ftr, unseen.train.labels, fte, unseen.test.labels, config_.eval.knn_k);
}

// ---- driver ---------------------------------------------------------------

bool is_eval_round(const ExperimentConfig& config, int round) {
    return (round + 1) % config.eval.interval == 0 || round == config.federation.rounds - 1;
}

Tensor probe_batch(const std::vector<ClientData>& clients, int per_client, uint64_t seed) {
    std::vector<float> values;
    Shape shape;
    int64_t rows = 0;
    for (const auto& c : clients) {
        std::vector<int64_t> idx(static_cast<size_t>(c.test.size()));
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
        auto rng = rng_for({seed, kProbe, static_cast<uint64_t>(c.spec.client)});
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(std::min<size_t>(idx.size(), static_cast<size_t>(per_client)));
        const Tensor part = c.test.gather(idx);
        shape = part.shape();
        rows += part.dim(0);
        values.insert(values.end(), part.data().begin(), part.data().end());
    }
    shape[0] = rows;
    return Tensor::from(std::move(shape), std::move(values));
}

RunResult run_experiment(const ExperimentConfig& config, std::vector<ClientData> clients,
                         const std::optional<ClientData>& unseen, const RunHooks& hooks) {
    const Tensor probe = probe_batch(clients, config.eval.probe_per_client, config.seed);
    Federation fed(config, std::move(clients));
    const int rounds = config.federation.rounds;
    const bool ats = fed.architecture().config.conv_mode == ConvMode::Ats;
    RunResult result;

    for (int r = 0; r < rounds; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        RoundReport rep;
        rep.round = r;
        rep.losses = fed.local_train_all(r, config.federation.jobs);
        if (hooks.after_local_train) hooks.after_local_train(r, fed);

        const bool last = r == rounds - 1;
        if (last || (config.eval.cka_interval > 0 && (r + 1) % config.eval.cka_interval == 0)) {
            std::vector<const ParamStore*> ptrs;
            for (const auto& c : fed.clients()) ptrs.push_back(&c.params);
            rep.cka = block_cka_report(fed.architecture(), ptrs, probe, config.eval.batch_size);
        }
        if (last) {
            for (const auto& c : fed.clients()) result.clients.push_back(c.params.clone());
            result.final_cka = rep.cka;
        }

        fed.aggregate_round();
        fed.broadcast_all();
        if (hooks.after_broadcast) hooks.after_broadcast(r, fed);

        if (is_eval_round(config, r)) {
            const auto acc = fed.linear_accuracies();
            for (size_t i = 0; i < acc.size(); ++i) {
                rep.evals.push_back({EvalProtocol::Linear, std::to_string(i), acc[i], r});
            }
            if (unseen) rep.evals.push_back({EvalProtocol::Knn, "unseen", fed.knn_accuracy_on(*unseen), r});
            if (ats) {
                for (const auto& c : fed.clients()) {
                    std::vector<std::array<float, 3>> per_block;
                    for (int b = 0; b < fed.architecture().config.blocks(); ++b) {
                        const auto v = c.params.at("coef." + block_key(b, "")).data();
                        per_block.push_back({v[0], v[1], v[2]});
                    }
                    rep.coefficients.push_back(std::move(per_block));
                }
            }
        }
        rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (hooks.on_round) hooks.on_round(rep);
        result.reports.push_back(std::move(rep));
    }
    result.server = fed.server().params.clone();
    return result;
}

}  // namespace fedskel
