#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedskel/errors.hpp"
#include "fedskel/mkd.hpp"
#include "fedskel/optim.hpp"
#include "fixtures.hpp"
#include "reference/reference_ops.hpp"

using namespace fedskel;

namespace {

// server view: shared tensors only, detached, as the federation keeps it
ParamStore server_view(const ParamStore& p) {
    ParamStore out;
    for (const auto& e : p.entries()) {
        if (e.group == ParamGroup::Unique || e.group == ParamGroup::Coefficient || e.group == ParamGroup::Classifier)
            continue;
        out.add(e.name, e.tensor.detach());
    }
    return out;
}

void zero_unique(ParamStore& p) {
    for (const auto& e : p.entries())
        if (e.group == ParamGroup::Unique)
            for (float& v : e.tensor.mutable_data()) v = 0.0f;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::fabs(double(a.data()[i]) - b.data()[i]));
    return m;
}

}  // namespace

TEST(MkdConfig, GrainsMustStayBelowBlockCount) {
    EXPECT_NO_THROW((MkdConfig{0, 1.0f}.validate(3)));
    EXPECT_NO_THROW((MkdConfig{2, 1.0f}.validate(3)));
    EXPECT_THROW((MkdConfig{3, 1.0f}.validate(3)), ConfigError);
    EXPECT_THROW((MkdConfig{-1, 1.0f}.validate(3)), ConfigError);
    EXPECT_THROW((MkdConfig{1, 0.0f}.validate(3)), ConfigError);
}

TEST(TeacherStreams, TwoGrainsGiveStreamsOneAndTwo) {
    const Architecture arch = testutil::tiny_arch(ConvMode::Ats, 3);
    ParamStore client = testutil::full_params(arch, 3);
    const ParamStore server = server_view(client);
    const Tensor x = testutil::random_input(arch.config, 2, 9);
    const auto streams = build_teacher_streams(arch, server, arch, client, x, {2, 1.0f});
    ASSERT_EQ(streams.size(), 2u);
    EXPECT_EQ(streams[0].grain, 1);
    EXPECT_EQ(streams[1].grain, 2);
    const auto shapes = block_output_shapes(arch.config);
    EXPECT_EQ(streams[0].server_feature.shape(), (Shape{2, shapes[0][0], shapes[0][1], shapes[0][2]}));
    EXPECT_EQ(streams[1].server_feature.shape(), (Shape{2, shapes[1][0], shapes[1][1], shapes[1][2]}));
    for (const auto& s : streams) {
        EXPECT_FALSE(s.server_feature.requires_grad());
        EXPECT_EQ(s.logits.shape(), (Shape{2, arch.config.num_classes}));
    }
}

TEST(TeacherStreams, ZeroGrainIsEmptyAndLossesDegenerate) {
    const Architecture arch = testutil::tiny_arch(ConvMode::Vanilla, 3);
    ParamStore client = testutil::full_params(arch, 4);
    const Tensor x = testutil::random_input(arch.config, 3, 2);
    const auto streams = build_teacher_streams(arch, server_view(client), arch, client, x, {0, 1.0f});
    EXPECT_TRUE(streams.empty());
    const auto student = forward(arch, client, x, {true, false, AdjacencySource::Client});
    const std::vector<int> labels{0, 2, 1};
    EXPECT_EQ(kd_loss(streams, student.logits).item(), 0.0f);
    EXPECT_EQ(dual_ce_loss(streams, student.logits, labels).item(), cross_entropy(student.logits, labels).item());
}

TEST(TeacherStreams, ShapeMismatchIsGraftingError) {
    const Architecture client_arch = testutil::tiny_arch(ConvMode::Vanilla, 3);
    Architecture server_arch = client_arch;
    server_arch.config.channels = {4, 5, 8};
    const ParamStore client = testutil::full_params(client_arch, 1);
    const ParamStore server = server_view(testutil::full_params(server_arch, 1));
    const Tensor x = testutil::random_input(client_arch.config, 1, 1);
    EXPECT_THROW(build_teacher_streams(server_arch, server, client_arch, client, x, {2, 1.0f}), GraftingError);
}

// Self-teacher: with the server holding the client's own shared tensors the
// teacher path is the student path. Vanilla mode and ATS with U=0 both have
// no private adjacency term the server could lack.
TEST(TeacherStreams, SelfTeacherIdentity) {
    for (ConvMode mode : {ConvMode::Vanilla, ConvMode::Ats}) {
        for (uint64_t seed = 0; seed < 5; ++seed) {
            const Architecture arch = testutil::tiny_arch(mode, 3);
            ParamStore client = testutil::full_params(arch, seed);
            if (mode == ConvMode::Ats) zero_unique(client);
            const Tensor x = testutil::random_input(arch.config, 4, seed + 10);
            const auto streams = build_teacher_streams(arch, server_view(client), arch, client, x, {2, 1.0f});
            const auto student = forward(arch, client, x, {true, false, AdjacencySource::Client});
            for (const auto& s : streams) EXPECT_LT(max_abs_diff(s.logits, student.logits), 1e-5);
            EXPECT_LT(kd_loss(streams, student.logits).item(), 1e-6f);
            const std::vector<int> labels{0, 1, 2, 0};
            const float ce = cross_entropy(student.logits, labels).item();
            EXPECT_NEAR(dual_ce_loss(streams, student.logits, labels).item(), 3.0f * ce, 1e-5f);
        }
    }
}

TEST(KdLoss, ClosedFormTwoClasses) {
    const float ln2 = std::log(2.0f);
    TeacherStream s;
    s.logits = Tensor::from({1, 2}, {ln2, 0.0f});
    const Tensor student = Tensor::from({1, 2}, {0.0f, ln2});
    EXPECT_NEAR(kd_loss({s}, student).item(), 0.2310, 1e-4);
    EXPECT_NEAR(kd_loss({s}, student).item(), std::log(2.0) / 3.0, 1e-6);
}

TEST(KdLoss, IdenticalLogitsGiveZero) {
    TeacherStream s;
    s.logits = Tensor::from({2, 3}, {0.3f, -1.0f, 2.0f, 4.0f, 4.0f, -2.0f});
    EXPECT_NEAR(kd_loss({s}, s.logits.detach()).item(), 0.0f, 1e-7f);
}

TEST(KdLoss, NonNegativeAndMatchesReference) {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + trial % 4, c = 2 + trial % 5;
        const auto t = ref::random_values(size_t(n * c), rng, -4.0, 4.0);
        const auto u = ref::random_values(size_t(n * c), rng, -4.0, 4.0);
        TeacherStream s;
        s.logits = Tensor::from({n, c}, std::vector<float>(t.begin(), t.end()));
        const Tensor student = Tensor::from({n, c}, std::vector<float>(u.begin(), u.end()));
        const float temp = trial % 2 ? 2.0f : 1.0f;
        const float kd = kd_loss({s}, student, temp).item();
        EXPECT_GE(kd, 0.0f);
        EXPECT_NEAR(kd, ref::kl(ref::to_double(s.logits.data()), ref::to_double(student.data()), n, c, temp), 1e-5);
    }
}

TEST(KdLoss, InvariantUnderClassRelabelling) {
    std::mt19937_64 rng(5);
    const int n = 3, c = 5;
    const auto t = ref::random_values(n * c, rng, -3.0, 3.0);
    const auto u = ref::random_values(n * c, rng, -3.0, 3.0);
    const std::vector<int> perm{3, 0, 4, 1, 2};
    std::vector<float> tp(n * c), up(n * c);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < c; ++k) {
            tp[i * c + perm[k]] = float(t[i * c + k]);
            up[i * c + perm[k]] = float(u[i * c + k]);
        }
    TeacherStream a, b;
    a.logits = Tensor::from({n, c}, std::vector<float>(t.begin(), t.end()));
    b.logits = Tensor::from({n, c}, tp);
    const float ka = kd_loss({a}, Tensor::from({n, c}, std::vector<float>(u.begin(), u.end()))).item();
    const float kb = kd_loss({b}, Tensor::from({n, c}, up)).item();
    EXPECT_NEAR(ka, kb, 1e-6f);
}

TEST(DualCe, SaturatedCorrectLogitsGiveTinyLoss) {
    TeacherStream s;
    s.logits = Tensor::from({2, 3}, {30.0f, 0.0f, 0.0f, 0.0f, 0.0f, 30.0f});
    const Tensor student = s.logits.detach();
    const std::vector<int> labels{0, 2};
    EXPECT_LT(dual_ce_loss({s}, student, labels).item(), 1e-3f);
}

TEST(DualCe, LabelOutOfRangeIsDataError) {
    const Tensor logits = Tensor::from({1, 3}, {0.0f, 1.0f, 2.0f});
    const std::vector<int> labels{3};
    EXPECT_THROW(dual_ce_loss({}, logits, labels), DataError);
}

// Gradient probe: teacher terms reach the client's deep blocks and classifier,
// never the server snapshot, and never the client's shallow blocks through the
// teacher path.
TEST(DualCe, GradientReachesClientDeepBlocksOnly) {
    const Architecture arch = testutil::tiny_arch(ConvMode::Ats, 3);
    ParamStore client = testutil::full_params(arch, 8);
    ParamStore server;
    const ParamStore shared = server_view(client);
    for (const auto& e : shared.entries()) server.add(e.name, e.tensor.clone().set_requires_grad(true));
    const Tensor x = testutil::random_input(arch.config, 3, 4);
    const std::vector<int> labels{0, 1, 2};
    const auto streams = build_teacher_streams(arch, server, arch, client, x, {2, 1.0f});

    // teacher-only objective
    Tensor loss = cross_entropy(streams[0].logits, labels);
    loss = add(loss, cross_entropy(streams[1].logits, labels));
    backward(loss);

    for (const auto& e : server.entries()) {
        if (!e.tensor.has_grad()) continue;
        for (float g : e.tensor.grad()) ASSERT_EQ(g, 0.0f) << e.name;
    }
    auto grad_norm = [&](const std::string& key) {
        const Tensor& t = client.at(key);
        double s = 0.0;
        if (t.has_grad())
            for (float g : t.grad()) s += std::fabs(g);
        return s;
    };
    EXPECT_GT(grad_norm("backbone.block2.spatial_weight"), 0.0);
    EXPECT_GT(grad_norm("backbone.block1.spatial_weight"), 0.0);
    EXPECT_GT(grad_norm("classifier.weight"), 0.0);
    EXPECT_GT(grad_norm("um.block2"), 0.0);
    EXPECT_EQ(grad_norm("backbone.block0.spatial_weight"), 0.0);
    EXPECT_EQ(grad_norm("um.block0"), 0.0);
    for (const auto& t : client.trainable()) t.drop_grad();
}

TEST(TeacherStreams, ServerSnapshotUnchangedByTraining) {
    const Architecture arch = testutil::tiny_arch(ConvMode::Ats, 3);
    ParamStore client = testutil::full_params(arch, 2);
    const ParamStore server = server_view(client).clone();
    const ParamStore before = server.clone();
    SgdMomentum opt({0.05f, 0.9f, 1e-4f});
    for (const auto& t : client.trainable()) opt.add_param(t);
    const std::vector<int> labels{0, 1};
    for (int step = 0; step < 5; ++step) {
        const Tensor x = testutil::random_input(arch.config, 2, 100 + step);
        const auto student = forward(arch, client, x, {true, true, AdjacencySource::Client});
        const auto streams = build_teacher_streams(arch, server, arch, client, x, {2, 1.0f});
        backward(add(dual_ce_loss(streams, student.logits, labels), kd_loss(streams, student.logits)));
        opt.step();
    }
    for (size_t i = 0; i < server.size(); ++i) {
        const auto a = server.entries()[i].tensor.data(), b = before.entries()[i].tensor.data();
        ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << server.entries()[i].name;
    }
}
