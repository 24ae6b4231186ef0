#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "experiment_fixtures.hpp"
#include "fedskel/errors.hpp"
#include "fedskel/federation.hpp"

using namespace fedskel;

namespace {

ParamStore scalars(std::initializer_list<std::pair<const char*, float>> values) {
    ParamStore p;
    for (const auto& [k, v] : values) p.add(k, Tensor::from({1}, {v}));
    return p;
}

ServerState server_like(const ParamStore& p) {
    ServerState s;
    for (const auto& e : p.entries()) s.params.add(e.name, e.tensor.detach());
    return s;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

bool bitwise_equal(const ParamStore& a, const ParamStore& b) {
    if (a.keys() != b.keys()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (!bitwise_equal(a.entries()[i].tensor, b.entries()[i].tensor)) return false;
    return true;
}

}  // namespace

TEST(Aggregate, WeightedMeanOfTwoClients) {
    const ParamStore a = scalars({{"backbone.w", 1.0f}}), b = scalars({{"backbone.w", 5.0f}});
    ServerState s = server_like(a);
    aggregate(s, {{&a, 1}, {&b, 3}}, {0.0f});
    EXPECT_EQ(s.params.at("backbone.w").item(), 4.0f);
}

TEST(Aggregate, SingleClientIsCopiedExactly) {
    const ParamStore a = scalars({{"backbone.w", 0.1234567f}, {"im.block0", -3.5e-7f}});
    ServerState s = server_like(scalars({{"backbone.w", 9.0f}, {"im.block0", 9.0f}}));
    aggregate(s, {{&a, 17}}, {0.0f});
    EXPECT_TRUE(bitwise_equal(s.params, a));
}

// Weighted-mean oracle on random scalar federations, same summation order.
TEST(Aggregate, RandomScalarFederationsMatchOracleExactly) {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> clients(1, 7), count(1, 5000);
    std::uniform_real_distribution<float> value(-10.0f, 10.0f);
    for (int trial = 0; trial < 100; ++trial) {
        const int k = clients(rng);
        std::vector<ParamStore> ups;
        std::vector<int64_t> n;
        for (int i = 0; i < k; ++i) {
            ups.push_back(scalars({{"backbone.a", value(rng)}, {"backbone.b", value(rng)}}));
            n.push_back(count(rng));
        }
        ServerState s = server_like(scalars({{"backbone.a", 0.0f}, {"backbone.b", 0.0f}}));
        std::vector<Upload> uploads;
        for (int i = 0; i < k; ++i) uploads.push_back({&ups[size_t(i)], n[size_t(i)]});
        aggregate(s, uploads, {0.0f});

        int64_t total = 0;
        for (auto v : n) total += v;
        for (const char* key : {"backbone.a", "backbone.b"}) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i)
                acc += (double(n[size_t(i)]) / double(total)) * double(ups[size_t(i)].at(key).item());
            ASSERT_EQ(s.params.at(key).item(), static_cast<float>(acc)) << "trial " << trial << " key " << key;
        }
    }
}

TEST(Aggregate, IdenticalUploadsReturnThatUpload) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<float> value(-100.0f, 100.0f);
    std::uniform_int_distribution<int> count(1, 999);
    for (int trial = 0; trial < 200; ++trial) {
        const ParamStore u = scalars({{"backbone.w", value(rng)}});
        ServerState s = server_like(scalars({{"backbone.w", 0.0f}}));
        std::vector<Upload> uploads;
        for (int i = 0; i < 2 + trial % 5; ++i) uploads.push_back({&u, count(rng)});
        aggregate(s, uploads, {0.0f});
        ASSERT_EQ(s.params.at("backbone.w").item(), u.at("backbone.w").item());
    }
}

// Two rounds of constant uploads, hand-unrolled:
//   r1: d1 = w0 - u, v1 = d1, w1 = w0 - v1 = u
//   r2: d2 = w1 - u = 0, v2 = b*v1, w2 = w1 - v2
TEST(Aggregate, ServerMomentumMatchesHandUnrolledRecursion) {
    const float w0 = 2.0f, u = 0.5f, b = 0.9f;
    const ParamStore up = scalars({{"backbone.w", u}});
    ServerState s = server_like(scalars({{"backbone.w", w0}}));
    aggregate(s, {{&up, 4}}, {b});
    const float v1 = w0 - u;
    const float w1 = w0 - v1;
    EXPECT_EQ(s.params.at("backbone.w").item(), w1);
    aggregate(s, {{&up, 4}}, {b});
    const float v2 = b * v1 + (w1 - u);
    EXPECT_EQ(s.params.at("backbone.w").item(), w1 - v2);
    EXPECT_NEAR(s.params.at("backbone.w").item(), 0.5f - 0.9f * 1.5f, 1e-6f);
}

TEST(Aggregate, RunningStatisticsSkipMomentum) {
    const ParamStore up = scalars({{"bn.block0.running_mean", 1.0f}, {"bn.block0.scale", 1.0f}});
    ServerState s = server_like(scalars({{"bn.block0.running_mean", 3.0f}, {"bn.block0.scale", 3.0f}}));
    aggregate(s, {{&up, 1}}, {0.9f});
    aggregate(s, {{&up, 1}}, {0.9f});
    EXPECT_EQ(s.params.at("bn.block0.running_mean").item(), 1.0f);
    EXPECT_NE(s.params.at("bn.block0.scale").item(), 1.0f);
}

TEST(Aggregate, KeySetMismatchIsProtocolError) {
    const ParamStore server = scalars({{"backbone.a", 0.0f}, {"backbone.b", 0.0f}});
    const ParamStore missing = scalars({{"backbone.a", 1.0f}});
    const ParamStore extra = scalars({{"backbone.a", 1.0f}, {"backbone.b", 1.0f}, {"backbone.c", 1.0f}});
    ServerState s = server_like(server);
    try {
        aggregate(s, {{&missing, 1}}, {0.0f});
        FAIL();
    } catch (const ProtocolError& e) {
        EXPECT_NE(std::string(e.what()).find("missing backbone.b"), std::string::npos);
    }
    try {
        aggregate(s, {{&extra, 1}}, {0.0f});
        FAIL();
    } catch (const ProtocolError& e) {
        EXPECT_NE(std::string(e.what()).find("extra backbone.c"), std::string::npos);
    }
}

TEST(Aggregate, UniqueMatrixInUploadIsIsolationViolation) {
    const ParamStore bad = scalars({{"backbone.a", 1.0f}, {"um.block0", 1.0f}});
    ServerState s = server_like(scalars({{"backbone.a", 0.0f}}));
    EXPECT_THROW(aggregate(s, {{&bad, 1}}, {0.0f}), ProtocolError);
}

TEST(Aggregate, NonPositiveSampleCountIsProtocolError) {
    const ParamStore a = scalars({{"backbone.a", 1.0f}});
    ServerState s = server_like(a);
    EXPECT_THROW(aggregate(s, {{&a, 0}}, {0.0f}), ProtocolError);
}

TEST(Aggregatable, GroupsThatTravel) {
    EXPECT_TRUE(is_aggregatable(ParamGroup::Backbone, true));
    EXPECT_TRUE(is_aggregatable(ParamGroup::Inflected, false));
    EXPECT_TRUE(is_aggregatable(ParamGroup::BatchNorm, true));
    EXPECT_TRUE(is_aggregatable(ParamGroup::BatchNormStat, true));
    EXPECT_FALSE(is_aggregatable(ParamGroup::BatchNorm, false));
    EXPECT_FALSE(is_aggregatable(ParamGroup::BatchNormStat, false));
    for (bool bn : {true, false}) {
        EXPECT_FALSE(is_aggregatable(ParamGroup::Unique, bn));
        EXPECT_FALSE(is_aggregatable(ParamGroup::Coefficient, bn));
        EXPECT_FALSE(is_aggregatable(ParamGroup::Classifier, bn));
    }
}

TEST(ProximalTerm, HalfSquaredDistance) {
    ParamStore client;
    client.add("backbone.w", Tensor::from({1}, {1.0f}).set_requires_grad(true));
    const ParamStore server = scalars({{"backbone.w", 3.0f}});
    EXPECT_EQ(proximal_term(client, server).item(), 2.0f);
    ParamStore same;
    same.add("backbone.w", Tensor::from({1}, {3.0f}).set_requires_grad(true));
    EXPECT_EQ(proximal_term(same, server).item(), 0.0f);
}

TEST(ProximalTerm, IgnoresPrivateAndFrozenTensors) {
    ParamStore client;
    client.add("backbone.w", Tensor::from({2}, {1.0f, 2.0f}).set_requires_grad(true));
    client.add("classifier.weight", Tensor::from({1}, {100.0f}).set_requires_grad(true));
    client.add("bn.block0.running_mean", Tensor::from({1}, {50.0f}));
    ParamStore server;
    server.add("backbone.w", Tensor::from({2}, {1.0f, 4.0f}));
    server.add("bn.block0.running_mean", Tensor::from({1}, {0.0f}));
    EXPECT_EQ(proximal_term(client, server).item(), 2.0f);
}

// ---- whole federations -----------------------------------------------------

TEST(Federation, ServerStartsFromClientZeroUpload) {
    const ExperimentConfig c = testutil::tiny_experiment(Strategy::Fsar);
    Federation fed(c, testutil::tiny_clients(c));
    const ParamStore up = fed.clients()[0].upload(true);
    EXPECT_TRUE(bitwise_equal(fed.server().params, up));
    for (const auto& e : fed.server().params.entries()) EXPECT_FALSE(e.tensor.requires_grad()) << e.name;
    // every client starts from the same backbone
    for (const auto& cl : fed.clients()) EXPECT_TRUE(bitwise_equal(cl.upload(true), up));
}

TEST(Federation, ZeroLearningRateLeavesServerAtInit) {
    ExperimentConfig c = testutil::tiny_experiment(Strategy::FedAvg, 1);
    c.federation.clients = 2;
    c.federation.learning_rate = 0.0f;
    Federation fed(c, testutil::tiny_clients(c));
    const ParamStore init = fed.server().params.clone();
    fed.local_train_all(0, 1);
    fed.aggregate_round();
    for (size_t i = 0; i < init.size(); ++i) {
        const auto& e = init.entries()[i];
        if (e.group == ParamGroup::BatchNormStat) continue;  // running stats still track the data
        EXPECT_TRUE(bitwise_equal(e.tensor, fed.server().params.at(e.name))) << e.name;
    }
}

TEST(Federation, IsolationEveryRound) {
    const ExperimentConfig c = testutil::tiny_experiment(Strategy::Fsar, 4);
    std::vector<ParamStore> u_after_train;
    RunHooks hooks;
    int checked = 0;
    hooks.after_local_train = [&](int, const Federation& fed) {
        u_after_train.clear();
        for (const auto& cl : fed.clients())
            u_after_train.push_back(cl.params.subset([](const ParamStore::Entry& e) {
                return e.group == ParamGroup::Unique;
            }).clone());
    };
    hooks.after_broadcast = [&](int, const Federation& fed) {
        for (const auto& e : fed.server().params.entries()) {
            ASSERT_NE(e.group, ParamGroup::Unique) << e.name;
            ASSERT_NE(e.name.rfind("um.", 0), 0u) << e.name;
        }
        const auto& cls = fed.clients();
        for (size_t i = 0; i < cls.size(); ++i) {
            for (const auto& e : cls[i].params.entries()) {
                if (e.group == ParamGroup::Inflected) {
                    ASSERT_TRUE(bitwise_equal(e.tensor, cls[0].params.at(e.name))) << e.name;
                    ASSERT_TRUE(bitwise_equal(e.tensor, fed.server().params.at(e.name))) << e.name;
                }
                if (e.group == ParamGroup::Unique) {
                    ASSERT_TRUE(bitwise_equal(e.tensor, u_after_train[i].at(e.name))) << e.name;
                    for (size_t j = 0; j < i; ++j) ASSERT_FALSE(bitwise_equal(e.tensor, cls[j].params.at(e.name)));
                }
            }
        }
        ++checked;
    };
    run_experiment(c, testutil::tiny_clients(c), std::nullopt, hooks);
    EXPECT_EQ(checked, 4);
}

TEST(Federation, ServerKeySetIsConstant) {
    const ExperimentConfig c = testutil::tiny_experiment(Strategy::Fsar, 3);
    std::vector<std::string> keys;
    RunHooks hooks;
    hooks.after_broadcast = [&](int r, const Federation& fed) {
        if (r == 0) keys = fed.server().params.keys();
        EXPECT_EQ(fed.server().params.keys(), keys);
    };
    run_experiment(c, testutil::tiny_clients(c), std::nullopt, hooks);
    EXPECT_FALSE(keys.empty());
}

TEST(Federation, FedProxWithZeroMuIsBitwiseFedAvg) {
    ExperimentConfig avg = testutil::tiny_experiment(Strategy::FedAvg, 10);
    ExperimentConfig prox = avg;
    prox.federation.strategy = Strategy::FedProx;
    prox.federation.prox_mu = 0.0f;
    const RunResult a = run_experiment(avg, testutil::tiny_clients(avg), std::nullopt);
    const RunResult b = run_experiment(prox, testutil::tiny_clients(prox), std::nullopt);
    EXPECT_TRUE(bitwise_equal(a.server, b.server));
    ASSERT_EQ(a.reports.size(), b.reports.size());
    for (size_t r = 0; r < a.reports.size(); ++r) {
        for (size_t i = 0; i < a.reports[r].losses.size(); ++i)
            ASSERT_EQ(a.reports[r].losses[i].total, b.reports[r].losses[i].total);
        for (size_t i = 0; i < a.reports[r].evals.size(); ++i)
            ASSERT_EQ(a.reports[r].evals[i].accuracy, b.reports[r].evals[i].accuracy);
    }
    // a positive mu does change the trajectory
    prox.federation.prox_mu = 0.5f;
    const RunResult c = run_experiment(prox, testutil::tiny_clients(prox), std::nullopt);
    EXPECT_FALSE(bitwise_equal(a.server, c.server));
}

TEST(Federation, FedBnKeepsClientStatistics) {
    const ExperimentConfig c = testutil::tiny_experiment(Strategy::FedBn, 2);
    RunHooks hooks;
    bool seen = false;
    hooks.after_broadcast = [&](int, const Federation& fed) {
        for (const auto& e : fed.server().params.entries()) {
            EXPECT_NE(e.group, ParamGroup::BatchNorm);
            EXPECT_NE(e.group, ParamGroup::BatchNormStat);
        }
        const auto& a = fed.clients()[0].params.at("bn.block0.running_mean");
        const auto& b = fed.clients()[1].params.at("bn.block0.running_mean");
        EXPECT_FALSE(bitwise_equal(a, b));
        seen = true;
    };
    run_experiment(c, testutil::tiny_clients(c), std::nullopt, hooks);
    EXPECT_TRUE(seen);
}

TEST(Federation, SharedBatchNormIsBroadcast) {
    const ExperimentConfig c = testutil::tiny_experiment(Strategy::FedAvg, 1);
    RunHooks hooks;
    hooks.after_broadcast = [&](int, const Federation& fed) {
        EXPECT_TRUE(bitwise_equal(fed.clients()[0].params.at("bn.block1.running_var"),
                                  fed.clients()[2].params.at("bn.block1.running_var")));
    };
    run_experiment(c, testutil::tiny_clients(c), std::nullopt, hooks);
}

TEST(Federation, ConcurrentClientsMatchSequential) {
    ExperimentConfig c = testutil::tiny_experiment(Strategy::Fsar, 3);
    const RunResult seq = run_experiment(c, testutil::tiny_clients(c), std::nullopt);
    c.federation.jobs = 3;
    const RunResult par = run_experiment(c, testutil::tiny_clients(c), std::nullopt);
    EXPECT_TRUE(bitwise_equal(seq.server, par.server));
    for (size_t i = 0; i < seq.clients.size(); ++i) EXPECT_TRUE(bitwise_equal(seq.clients[i], par.clients[i]));
}

TEST(Federation, RunsAreDeterministic) {
    const ExperimentConfig c = testutil::tiny_experiment(Strategy::Fsar, 3);
    auto with_unseen = [&] {
        auto all = testutil::tiny_clients(c, true);
        ClientData unseen = std::move(all.back());
        all.pop_back();
        return run_experiment(c, std::move(all), unseen);
    };
    const RunResult a = with_unseen();
    const RunResult b = with_unseen();
    EXPECT_TRUE(bitwise_equal(a.server, b.server));
}

TEST(Federation, LossComponentsFollowTheStrategy) {
    for (Strategy s : {Strategy::FedAvg, Strategy::FedProx, Strategy::FedBn, Strategy::Fsar}) {
        const ExperimentConfig c = testutil::tiny_experiment(s, 2);
        const RunResult r = run_experiment(c, testutil::tiny_clients(c), std::nullopt);
        for (const auto& rep : r.reports) {
            for (const auto& l : rep.losses) {
                EXPECT_GT(l.batches, 0);
                EXPECT_TRUE(std::isfinite(l.total));
                if (s == Strategy::Fsar) {
                    EXPECT_GT(l.kd, 0.0) << strategy_name(s);
                } else {
                    EXPECT_EQ(l.kd, 0.0) << strategy_name(s);
                }
                if (s == Strategy::FedAvg || s == Strategy::FedBn) EXPECT_EQ(l.reg, 0.0);
            }
        }
        // the first round starts from the broadcast server state: reg is zero
        // only after the first step, so it is positive once training moves
        if (s == Strategy::Fsar || s == Strategy::FedProx) EXPECT_GT(r.reports.back().losses[0].reg, 0.0);
    }
}

TEST(Federation, DefaultHyperReducesTrainLoss) {
    ExperimentConfig c = testutil::tiny_experiment(Strategy::Fsar, 20);
    c.federation.server_momentum = 0.0f;
    c.eval.interval = 20;
    const RunResult r = run_experiment(c, testutil::tiny_clients(c), std::nullopt);
    double first = 0.0, last = 0.0;
    for (const auto& l : r.reports.front().losses) first += l.total;
    for (const auto& l : r.reports.back().losses) last += l.total;
    EXPECT_LT(last, first);
}

TEST(Federation, MismatchedClientCountIsConfigError) {
    ExperimentConfig c = testutil::tiny_experiment(Strategy::FedAvg);
    auto clients = testutil::tiny_clients(c);
    clients.pop_back();
    EXPECT_THROW(Federation(c, clients), ConfigError);
}

TEST(Federation, EvalRoundsFollowTheInterval) {
    ExperimentConfig c = testutil::tiny_experiment(Strategy::FedAvg, 7);
    c.eval.interval = 3;
    std::vector<int> rounds;
    for (int r = 0; r < 7; ++r)
        if (is_eval_round(c, r)) rounds.push_back(r);
    EXPECT_EQ(rounds, (std::vector<int>{2, 5, 6}));
}

TEST(Federation, FinalRoundReportsCkaAndUnseenKnn) {
    const ExperimentConfig c = testutil::tiny_experiment(Strategy::FedAvg, 2);
    auto all = testutil::tiny_clients(c, true);
    ClientData unseen = all.back();
    all.pop_back();
    const RunResult r = run_experiment(c, all, unseen);
    ASSERT_EQ(r.final_cka.size(), 3u);
    for (const auto& m : r.final_cka) {
        EXPECT_EQ(m.clients, 3);
        for (int i = 0; i < 3; ++i) EXPECT_EQ(m.at(i, i), 1.0);
    }
    bool knn = false;
    for (const auto& e : r.reports.back().evals)
        if (e.protocol == EvalProtocol::Knn) {
            knn = true;
            EXPECT_EQ(e.client, "unseen");
            EXPECT_GE(e.accuracy, 0.0);
            EXPECT_LE(e.accuracy, 1.0);
        }
    EXPECT_TRUE(knn);
}

TEST(Federation, FsarWithoutItsExtrasIsFedavgOnTernaryConv) {
    ExperimentConfig f = testutil::tiny_experiment(Strategy::Fsar, 3);
    f.loss.grains = 0;
    f.loss.lambda_kd = 0.0f;
    f.loss.lambda_reg = 0.0f;
    f.federation.server_momentum = 0.0f;
    ExperimentConfig a = testutil::tiny_experiment(Strategy::FedAvg, 3);
    a.model.conv = ConvChoice::Ats;
    const RunResult rf = run_experiment(f, testutil::tiny_clients(f), std::nullopt);
    const RunResult ra = run_experiment(a, testutil::tiny_clients(a), std::nullopt);
    EXPECT_TRUE(bitwise_equal(rf.server, ra.server));
    for (size_t i = 0; i < rf.clients.size(); ++i) EXPECT_TRUE(bitwise_equal(rf.clients[i], ra.clients[i]));
}
