#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "snndt/harness.hpp"
#include "snndt/plasticity.hpp"

using namespace snndt;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::initializer_list<double> v) {
    Tensor t = Tensor::matrix(r, c);
    std::size_t i = 0;
    for (double x : v) t[i++] = x;
    return t;
}

void expect_same_except_head(const ParameterStore& a, const ParameterStore& b) {
    for (const Parameter& p : a.all()) {
        if (p.name == "head.w_act") continue;
        const Tensor& other = b.get(p.name);
        ASSERT_EQ(p.value.size(), other.size()) << p.name;
        for (std::size_t i = 0; i < other.size(); ++i) ASSERT_EQ(p.value[i], other[i]) << p.name << "[" << i << "]";
    }
}

}  // namespace

TEST(Trace, SingleStepExample) {
    const Tensor e = mat(1, 2, {1.0, 2.0});
    const std::vector<double> x{1.0, 0.0}, y{1.0};
    const Tensor out = trace_update(e, x, y, 0.9);
    EXPECT_DOUBLE_EQ(out(0, 0), 1.9);
    EXPECT_DOUBLE_EQ(out(0, 1), 1.8);
}

TEST(Trace, ZeroInputOnlyDecays) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> z;
    Tensor e = Tensor::matrix(3, 4);
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = z(rng);
    const std::vector<double> x(4, 0.0), y{0.3, -1.0, 2.0};
    const Tensor out = trace_update(e, x, y, 0.7);
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(out[i], 0.7 * e[i]);
}

TEST(Trace, ZeroDecayIsMemoryless) {
    const Tensor e = mat(2, 2, {5, 6, 7, 8});
    const std::vector<double> x{2.0, -1.0}, y{0.5, 3.0};
    const Tensor out = trace_update(e, x, y, 0.0);
    EXPECT_EQ(out(0, 0), 1.0);
    EXPECT_EQ(out(0, 1), -0.5);
    EXPECT_EQ(out(1, 0), 6.0);
    EXPECT_EQ(out(1, 1), -3.0);
}

TEST(Trace, TenStepClosedForm) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> z;
    const double lambda = 0.9;
    const std::size_t steps = 10, out_dim = 2, in_dim = 3;
    std::vector<std::vector<double>> xs(steps, std::vector<double>(in_dim)), ys(steps, std::vector<double>(out_dim));
    Tensor e = Tensor::matrix(out_dim, in_dim);
    for (std::size_t t = 0; t < steps; ++t) {
        for (double& v : xs[t]) v = z(rng);
        for (double& v : ys[t]) v = z(rng);
        e = trace_update(e, xs[t], ys[t], lambda);
    }
    for (std::size_t i = 0; i < out_dim; ++i)
        for (std::size_t j = 0; j < in_dim; ++j) {
            double expect = 0.0;
            for (std::size_t k = 0; k < steps; ++k) expect += std::pow(lambda, double(steps - 1 - k)) * ys[k][i] * xs[k][j];
            EXPECT_NEAR(e(i, j), expect, 1e-12);
        }
}

TEST(Trace, RejectsBadArguments) {
    const Tensor e = Tensor::matrix(1, 2);
    const std::vector<double> x{1.0, 0.0}, y{1.0}, wrong{1.0};
    EXPECT_THROW(trace_update(e, wrong, y, 0.5), UsageError);
    EXPECT_THROW(trace_update(e, x, y, 1.5), UsageError);
    EXPECT_THROW(trace_update(e, x, y, -0.1), UsageError);
}

TEST(Modulator, StandardizedAndClipped) {
    const double mu = 120.0, sd = 40.0;
    EXPECT_EQ(modulator(mu, mu, sd), 0.0);
    EXPECT_EQ(modulator(mu + 10 * sd, mu, sd), 1.0);
    EXPECT_EQ(modulator(mu - 10 * sd, mu, sd), -1.0);
    EXPECT_EQ(modulator(mu - 0.5 * sd, mu, sd), -0.5);
    EXPECT_EQ(modulator(mu + sd, mu, sd), 1.0);
}

TEST(Modulator, DegenerateSpreadSilencesUpdate) {
    bool flag = false;
    EXPECT_EQ(modulator(5.0, 1.0, 0.0, &flag), 0.0);
    EXPECT_TRUE(flag);
    flag = false;
    EXPECT_EQ(modulator(5.0, 1.0, NAN, &flag), 0.0);
    EXPECT_TRUE(flag);
}

TEST(Rule, SingleStepUpdate) {
    PlasticityState s(1, 2, ReturnStats{0.0, 1.0, 10}, PlasticityConfig{0.0, 0.05, 0.5});
    const std::vector<double> x{1.0, 0.0}, y{1.0};
    s.observe(x, y, 1.0);
    Tensor w = mat(1, 2, {0.2, -0.3});
    const Tensor applied = s.apply(w);
    EXPECT_DOUBLE_EQ(applied(0, 0), 0.05);
    EXPECT_EQ(applied(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(w(0, 0), 0.25);
    EXPECT_EQ(w(0, 1), -0.3);
    EXPECT_EQ(s.update(0, 0), 0.0);
}

TEST(Rule, NeutralReturnLeavesWeightsUnchanged) {
    PlasticityState s(2, 3, ReturnStats{10.0, 2.0, 10});
    std::mt19937_64 rng(3);
    std::normal_distribution<double> z;
    for (int t = 0; t < 20; ++t) {
        std::vector<double> x(3), y(2);
        for (double& v : x) v = z(rng);
        for (double& v : y) v = z(rng);
        s.observe(x, y, 10.0);
    }
    Tensor w = mat(2, 3, {1, 2, 3, 4, 5, 6});
    const Tensor before = w;
    s.apply(w);
    EXPECT_TRUE(w == before);
    EXPECT_FALSE(s.degenerate);
}

TEST(Rule, UpdatesAccumulateAdditively) {
    const PlasticityConfig cfg{0.0, 0.05, 100.0};
    const std::vector<double> x1{1.0, 2.0}, y1{0.5}, x2{-1.0, 0.5}, y2{2.0};
    PlasticityState both(1, 2, ReturnStats{0.0, 1.0, 1}, cfg), a(1, 2, ReturnStats{0.0, 1.0, 1}, cfg),
        b(1, 2, ReturnStats{0.0, 1.0, 1}, cfg);
    both.observe(x1, y1, 0.5);
    both.observe(x2, y2, -0.25);
    a.observe(x1, y1, 0.5);
    b.observe(x2, y2, -0.25);
    Tensor w = Tensor::matrix(1, 2), wa = Tensor::matrix(1, 2);
    both.apply(w);
    a.apply(wa);
    b.apply(wa);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(w[i], wa[i], 1e-15);
}

TEST(Rule, UpdateIsClampedElementwise) {
    PlasticityState s(1, 2, ReturnStats{0.0, 1.0, 1}, PlasticityConfig{0.0, 0.05, 0.5});
    const std::vector<double> x{100.0, -100.0}, y{1.0}, small{0.1, -0.1};
    s.observe(x, y, 1.0);
    Tensor w = Tensor::matrix(1, 2);
    const Tensor applied = s.apply(w);
    EXPECT_EQ(applied(0, 0), 0.5);
    EXPECT_EQ(applied(0, 1), -0.5);

    PlasticityState t(1, 2, ReturnStats{0.0, 1.0, 1}, PlasticityConfig{0.0, 0.05, 0.5});
    t.observe(small, y, 1.0);
    Tensor w2 = Tensor::matrix(1, 2);
    const Tensor inside = t.apply(w2);
    EXPECT_DOUBLE_EQ(inside(0, 0), 0.005);
    EXPECT_DOUBLE_EQ(inside(0, 1), -0.005);
}

TEST(Rule, DegenerateStatsFlagged) {
    PlasticityState s(1, 1, ReturnStats{3.0, 0.0, 5});
    const std::vector<double> x{1.0}, y{1.0};
    s.observe(x, y, 100.0);
    EXPECT_TRUE(s.degenerate);
    Tensor w = Tensor::matrix(1, 1);
    s.apply(w);
    EXPECT_EQ(w[0], 0.0);
}

TEST(ClipUpdate, TouchesOnlyTheActionHead) {
    DecisionTransformer m(fixtures::tiny(AblationMode::kFull));
    const ParameterStore before = m.params();
    std::mt19937_64 rng(4);
    const Clip c = fixtures::random_clip(m.config(), 6, 2, rng);
    PlasticityState s(m.config().action_dim, m.config().embed_dim, ReturnStats{0.0, 100.0, 10});
    const Tensor applied = plasticity_clip_update(m, s, c);
    expect_same_except_head(before, m.params());
    const Tensor& w0 = before.get("head.w_act");
    const Tensor& w1 = m.params().get("head.w_act");
    bool moved = false;
    for (std::size_t i = 0; i < w0.size(); ++i) {
        EXPECT_EQ(w1[i], w0[i] + applied[i]);
        EXPECT_LE(std::abs(applied[i]), 0.5);
        moved = moved || applied[i] != 0.0;
    }
    EXPECT_TRUE(moved);
    const std::vector<double> wrong(3, 1.0);
    EXPECT_THROW(plasticity_clip_update(m, s, c, wrong), UsageError);
}

TEST(ClipUpdate, PaddedStepsAreSkipped) {
    DecisionTransformer m(fixtures::tiny(AblationMode::kBaseline));
    std::mt19937_64 rng(5);
    Clip c = fixtures::random_clip(m.config(), 6, 6, rng);
    PlasticityState s(m.config().action_dim, m.config().embed_dim, ReturnStats{0.0, 1.0, 10});
    const Tensor applied = plasticity_clip_update(m, s, c, std::vector<double>(6, 50.0));
    for (std::size_t i = 0; i < applied.size(); ++i) EXPECT_EQ(applied[i], 0.0);
}

TEST(OnlineFinetune, FreezesEverythingButTheHead) {
    DecisionTransformer m(fixtures::tiny(AblationMode::kFull));
    const ParameterStore before = m.params();
    auto env = make_env("CartPole");
    online_finetune(m, *env, 10, 7, ReturnStats{20.0, 10.0, 100});
    expect_same_except_head(before, m.params());
    EXPECT_FALSE(m.params().get("head.w_act") == before.get("head.w_act"));
}

TEST(OnlineFinetune, ZeroEpisodesIsIdentity) {
    DecisionTransformer m(fixtures::tiny(AblationMode::kRouteOnly));
    const ParameterStore before = m.params();
    auto env = make_env("CartPole");
    online_finetune(m, *env, 0, 7, ReturnStats{20.0, 10.0, 100});
    EXPECT_TRUE(m.params() == before);
}

TEST(OnlineFinetune, ContinuousTaskRuns) {
    DecisionTransformer m(fixtures::tiny(AblationMode::kFull, "Pendulum"));
    const ParameterStore before = m.params();
    auto env = make_env("Pendulum");
    online_finetune(m, *env, 2, 1, ReturnStats{-800.0, 300.0, 100});
    expect_same_except_head(before, m.params());
}

TEST(Training, PlasticityOffOrZeroRateEqualsPureGradientDescent) {
    const Dataset ds = build_dataset("CartPole", collect("CartPole", 600, 2), 6);
    RunConfig rc = RunConfig::make("desk");
    rc.model = fixtures::tiny(AblationMode::kFull);
    rc.train.epochs = 2;
    rc.train.batch_size = 8;
    const TrainResult plain = train(rc, ds);
    rc.train.plasticity = true;
    rc.train.plasticity_config.eta_local = 0.0;
    const TrainResult zero = train(rc, ds);
    EXPECT_TRUE(plain.model.params() == zero.model.params());
    ASSERT_EQ(plain.history.size(), zero.history.size());
    for (std::size_t k = 0; k < plain.history.size(); ++k) {
        EXPECT_EQ(std::isnan(plain.history[k].val_loss), std::isnan(zero.history[k].val_loss));
        if (!std::isnan(plain.history[k].val_loss)) {
            EXPECT_EQ(plain.history[k].val_loss, zero.history[k].val_loss);
        }
    }
    rc.train.plasticity_config.eta_local = 0.05;
    const TrainResult live = train(rc, ds);
    EXPECT_FALSE(live.model.params() == plain.model.params());
}

TEST(OnlineFinetune, DoesNotDegradeATrainedPolicyByMoreThanTenPercent) {
    const auto trajs = collect("CartPole", 4000, 11);
    RunConfig rc = RunConfig::make("desk");
    rc.model.embed_dim = 16;
    rc.model.router_hidden = 8;
    rc.model.window = 4;
    rc.train.epochs = 8;
    const Dataset ds = build_dataset("CartPole", trajs, rc.model.context);
    TrainResult tr = train(rc, ds);
    const EvalResult before = evaluate(tr.model, "CartPole", 20, 99);
    auto env = make_env("CartPole");
    online_finetune(tr.model, *env, 10, 500, return_stats(ds));
    const EvalResult after = evaluate(tr.model, "CartPole", 20, 99);
    EXPECT_GE(after.mean, 0.9 * before.mean) << "before " << before.mean << " after " << after.mean;
}
