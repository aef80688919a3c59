#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "snndt/harness.hpp"

using namespace snndt;

namespace {

const std::vector<Trajectory>& trajs() {
    static const std::vector<Trajectory> t = collect("CartPole", 1500, 21);
    return t;
}

const Dataset& tiny_ds() {
    static const Dataset ds = build_dataset("CartPole", trajs(), 6);
    return ds;
}

RunConfig tiny_run(AblationMode mode = AblationMode::kFull) {
    RunConfig rc = RunConfig::make("desk");
    rc.model = fixtures::tiny(mode);
    rc.train.epochs = 1;
    rc.train.batch_size = 8;
    rc.train.learning_rate = 3e-3;
    rc.train.seed = 3;
    return rc;
}

std::vector<Clip> first_clips(std::size_t n) {
    return std::vector<Clip>(tiny_ds().clips.begin(), tiny_ds().clips.begin() + static_cast<std::ptrdiff_t>(n));
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Energy, FivePicojoulesPerSpike) {
    EXPECT_EQ(energy_nj(8000), 40.0);
    EXPECT_EQ(energy_nj(0), 0.0);
    EXPECT_EQ(energy_nj(1e6), 5000.0);
    EXPECT_EQ(energy_nj(1000, 2.0), 2.0);
    EXPECT_THROW(energy_nj(-1), UsageError);
}

TEST(Deltas, RelativeImprovement) {
    EXPECT_NEAR(delta_val_pct(0.4, 0.35), 12.5, 1e-12);
    EXPECT_NEAR(delta_val_pct(0.4, 0.5), -25.0, 1e-12);
    EXPECT_EQ(delta_val_pct(0.4, 0.4), 0.0);
    EXPECT_NEAR(delta_return_pct(200.0, 250.0), 25.0, 1e-12);
    EXPECT_NEAR(delta_return_pct(-200.0, -150.0), 25.0, 1e-12);
}

TEST(Returns, PopulationStandardDeviation) {
    const EvalResult r = summarize_returns({1.0, 2.0, 3.0, 4.0});
    EXPECT_EQ(r.mean, 2.5);
    EXPECT_NEAR(r.stddev, std::sqrt(1.25), 1e-15);
    EXPECT_EQ(summarize_returns({7.0}).stddev, 0.0);
    EXPECT_EQ(summarize_returns({}).mean, 0.0);
}

TEST(Split, DisjointCoveringAndSeeded) {
    const auto [tr, val] = split_clips(100, 0.1, 4);
    EXPECT_EQ(val.size(), 10u);
    EXPECT_EQ(tr.size(), 90u);
    std::set<std::size_t> all(tr.begin(), tr.end());
    all.insert(val.begin(), val.end());
    EXPECT_EQ(all.size(), 100u);
    EXPECT_EQ(*all.rbegin(), 99u);
    EXPECT_EQ(split_clips(100, 0.1, 4), split_clips(100, 0.1, 4));
    EXPECT_NE(split_clips(100, 0.1, 4).second, split_clips(100, 0.1, 5).second);
    EXPECT_EQ(split_clips(3, 0.1, 0).second.size(), 1u);
    EXPECT_TRUE(split_clips(1, 0.1, 0).second.empty());
}

TEST(Spikes, SilentNetworkEmitsNothing) {
    ModelConfig mc = fixtures::tiny(AblationMode::kFull);
    mc.lif.v_rest = -1000.0;
    DecisionTransformer m(mc);
    const SpikeReport r = spikes_per_inference(m, first_clips(4), 1);
    EXPECT_EQ(r.total, 0.0);
    EXPECT_EQ(r.per_inference, 0.0);
    EXPECT_GT(r.sites_per_inference, 0u);
}

TEST(Spikes, SaturatedNetworkFiresEveryStep) {
    ModelConfig mc = fixtures::tiny(AblationMode::kPosOnly);
    mc.lif.v_rest = 1000.0;
    DecisionTransformer m(mc);
    const SpikeReport r = spikes_per_inference(m, first_clips(4), 1);
    EXPECT_EQ(r.per_inference, static_cast<double>(r.sites_per_inference * mc.window));
    // Three LIF populations (Q, K, V) of d neurons per token per layer.
    EXPECT_EQ(r.sites_per_inference, mc.layers * 3 * mc.embed_dim * 3 * mc.context);
    EXPECT_EQ(r.batch, 4u);
    EXPECT_EQ(r.per_token_step, r.total / (4.0 * static_cast<double>(mc.context * mc.window)));
}

TEST(Spikes, BoundedAndSeeded) {
    DecisionTransformer m(fixtures::tiny(AblationMode::kFull));
    const SpikeReport a = spikes_per_inference(m, first_clips(3), 9);
    const SpikeReport b = spikes_per_inference(m, first_clips(3), 9);
    EXPECT_EQ(a.total, b.total);
    EXPECT_GE(a.per_inference, 0.0);
    EXPECT_LE(a.per_inference, static_cast<double>(a.sites_per_inference * m.config().window));
    EXPECT_THROW(spikes_per_inference(m, {}, 0), UsageError);
}

TEST(Evaluate, UntrainedModelIsNoBetterThanChance) {
    DecisionTransformer m(fixtures::tiny(AblationMode::kFull));
    m.fit_state_normalization(tiny_ds());
    const EvalResult r = evaluate(m, "CartPole", 10, 0);
    EXPECT_EQ(r.returns.size(), 10u);
    EXPECT_LE(r.mean, 60.0);
    EXPECT_THROW(evaluate(m, "Pendulum", 1, 0), UsageError);
    const EvalResult again = evaluate(m, "CartPole", 10, 0);
    EXPECT_EQ(r.returns, again.returns);
}

TEST(Evaluate, PolicyBaselines) {
    const EvalResult expert = evaluate_policy(expert_policy("CartPole"), "CartPole", 10, 0);
    const EvalResult random = evaluate_policy(random_policy(make_env("CartPole")->spec()), "CartPole", 50, 0);
    EXPECT_GE(expert.mean, 450.0);
    EXPECT_LE(random.mean, 40.0);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
    RunConfig rc = tiny_run();
    rc.train.epochs = 0;
    const TrainResult tr = train(rc, tiny_ds());
    ModelConfig mc = rc.model;
    mc.seed = rc.train.seed;
    DecisionTransformer fresh(mc);
    fresh.fit_state_normalization(tiny_ds());
    EXPECT_TRUE(tr.model.params() == fresh.params());
    ASSERT_EQ(tr.history.size(), 1u);
    EXPECT_EQ(tr.final_val_loss(), validation_loss(fresh, tiny_ds(), tr.val_clips));
}

TEST(Train, OneEpochLowersValidationLoss) {
    const TrainResult tr = train(tiny_run(), tiny_ds());
    ASSERT_EQ(tr.history.size(), 2u);
    EXPECT_LT(tr.history[1].val_loss, tr.history[0].val_loss);
    EXPECT_TRUE(std::isfinite(tr.history[1].train_loss));
}

TEST(Train, SameSeedIsReproducible) {
    const TrainResult a = train(tiny_run(AblationMode::kRouteOnly), tiny_ds());
    const TrainResult b = train(tiny_run(AblationMode::kRouteOnly), tiny_ds());
    EXPECT_TRUE(a.model.params() == b.model.params());
    EXPECT_EQ(a.final_val_loss(), b.final_val_loss());
}

TEST(Train, ValidationIntervalLeavesGaps) {
    RunConfig rc = tiny_run();
    rc.train.epochs = 3;
    rc.train.validation_interval = 2;
    const TrainResult tr = train(rc, tiny_ds());
    ASSERT_EQ(tr.history.size(), 4u);
    EXPECT_TRUE(std::isnan(tr.history[1].val_loss));
    EXPECT_FALSE(std::isnan(tr.history[2].val_loss));
    EXPECT_FALSE(std::isnan(tr.history[3].val_loss));
    std::ostringstream os;
    write_history_csv(os, tr.history);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "epoch,train_loss,val_loss");
}

TEST(Train, HugeLearningRateDiverges) {
    RunConfig rc = tiny_run();
    rc.train.learning_rate = 1e300;
    rc.train.grad_clip = 1e300;
    rc.train.epochs = 5;
    EXPECT_THROW(train(rc, tiny_ds()), TrainingDiverged);
}

TEST(Train, RejectsMismatchedInputs) {
    RunConfig rc = tiny_run();
    rc.model.context = 7;
    EXPECT_THROW(train(rc, tiny_ds()), UsageError);
    RunConfig pend = tiny_run();
    pend.model = fixtures::tiny(AblationMode::kFull, "Pendulum");
    EXPECT_THROW(train(pend, tiny_ds()), UsageError);
    RunConfig bad = tiny_run();
    bad.train.validation_fraction = 1.0;
    EXPECT_THROW(train(bad, tiny_ds()), UsageError);
    EXPECT_THROW(train(tiny_run(), Dataset{}), UsageError);
}

TEST(Latency, PositiveAndGuarded) {
    DecisionTransformer m(fixtures::tiny(AblationMode::kFull));
    EXPECT_GT(latency_probe(m, first_clips(1)), 0.0);
    EXPECT_THROW(latency_probe(m, first_clips(1), 2, 10), UsageError);
    EXPECT_THROW(latency_probe(m, first_clips(1), 3, 9), UsageError);
    EXPECT_THROW(latency_probe(m, {}), UsageError);
}

TEST(Sweep, SingleValuePerAxis) {
    RunConfig rc = tiny_run();
    const auto rows = sweep(SweepAxis::kWindow, {7}, rc, trajs(), 2, true);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].value, 7u);
    EXPECT_EQ(rows[0].spikes.window, 7u);
    EXPECT_EQ(rows[0].spikes.batch, 2u);
    EXPECT_GT(rows[0].latency_ms, 0.0);
    EXPECT_EQ(rows[0].energy_nj, energy_nj(rows[0].spikes.per_inference));
    const auto ctx = sweep(SweepAxis::kContext, {4}, rc, trajs(), 2, false);
    EXPECT_EQ(ctx[0].spikes.context, 4u);
    EXPECT_EQ(ctx[0].latency_ms, 0.0);
    EXPECT_THROW(sweep(SweepAxis::kWindow, {0}, rc, trajs(), 2), UsageError);
    EXPECT_EQ(parse_axis("T"), SweepAxis::kWindow);
    EXPECT_EQ(parse_axis("N"), SweepAxis::kContext);
    EXPECT_THROW(parse_axis("X"), UsageError);
    std::ostringstream os;
    write_sweep_csv(os, rows);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
              "axis,value,spikes_per_token_step,spikes_per_inference,energy_nj,latency_ms");
}

TEST(Ablation, FourRowsAndOutputs) {
    AblationOptions opt;
    opt.eval_episodes = 2;
    opt.spike_batch = 2;
    opt.measure_latency = false;
    const AblationReport rep = ablate(tiny_ds(), tiny_run(), opt);
    ASSERT_EQ(rep.rows.size(), 4u);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_EQ(rep.rows[k].mode, kAllModes[k]);
        EXPECT_EQ(rep.curves[k].size(), 2u);
        EXPECT_EQ(rep.gates[k].cols(), 4u);
        EXPECT_EQ(rep.rows[k].energy_nj, energy_nj(rep.rows[k].spikes_per_inference));
    }
    EXPECT_EQ(rep.rows[0].delta_val, 0.0);
    EXPECT_EQ(rep.rows[0].delta_return, 0.0);
    EXPECT_EQ(rep.phases[0].heads(), 0u);
    EXPECT_EQ(rep.phases[1].heads(), 4u);
    EXPECT_EQ(rep.phases[2].heads(), 0u);
    EXPECT_EQ(rep.phases[3].heads(), 4u);
    for (std::size_t k = 0; k < 4; ++k)
        EXPECT_NEAR(rep.rows[k].delta_val, delta_val_pct(rep.rows[0].final_val_loss, rep.rows[k].final_val_loss), 1e-12);

    const auto dir = std::filesystem::temp_directory_path() / "snndt_ablation_test";
    std::filesystem::remove_all(dir);
    write_ablation_outputs(dir, rep);
    const std::string csv = slurp(dir / "ablation.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "mode,final_val_loss,delta_val_pct,return_mean,return_std,delta_return_pct,spikes_per_token_step,"
              "spikes_per_inference,energy_nj,latency_ms");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
    EXPECT_TRUE(std::filesystem::exists(dir / "val_curves.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "phases_pos-only.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "phases_full.csv"));
    EXPECT_FALSE(std::filesystem::exists(dir / "phases_baseline.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "gates_route-only.csv"));
    EXPECT_EQ(slurp(dir / "phases_full.csv").substr(0, 16), "head,omega,phi\n0");
    std::filesystem::remove_all(dir);
}
