#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "gradcheck.hpp"
#include "snndt/attention.hpp"
#include "snndt/positional.hpp"

using namespace snndt;

namespace {

struct Block {
    Tape tape;
    AttentionWeights w;
    RouterWeights r;
    Block(std::size_t d, std::size_t heads, std::size_t hidden, std::uint64_t seed, bool positional = false) {
        std::mt19937_64 rng(seed);
        w.w_qkv = tape.parameter(gradcheck::uniform({d, 3 * d}, rng, -0.6, 0.8));
        if (positional) w.w_pos = tape.parameter(gradcheck::uniform({heads, 3 * d}, rng, -0.5, 0.5));
        w.w_out = tape.parameter(gradcheck::uniform({d / heads, d}, rng));
        w.b_out = tape.parameter(Tensor::matrix(1, d));
        r.w1 = tape.parameter(gradcheck::uniform({d, hidden}, rng, -1, 1));
        r.b1 = tape.parameter(gradcheck::uniform({1, hidden}, rng, -1, 1));
        r.w2 = tape.parameter(gradcheck::uniform({hidden, heads}, rng, -1, 1));
        r.b2 = tape.parameter(gradcheck::uniform({1, heads}, rng, -1, 1));
    }
};

SpikingOptions low_threshold() {
    SpikingOptions o;
    o.lif.v_th = 0.3;
    o.window = 10;
    return o;
}

}  // namespace

TEST(Attend, SingletonSequenceWeightsOne) {
    Block b(8, 2, 4, 1);
    Var x = b.tape.constant(Tensor::matrix(1, 8, 0.4));
    auto out = attend(b.w, x, std::nullopt, 2, low_threshold());
    for (const Var& a : out.weights) EXPECT_EQ(b.tape.value(a), Tensor::scalar(1.0));
}

TEST(Attend, FutureColumnsHaveZeroWeight) {
    Block b(8, 4, 4, 2);
    std::mt19937_64 rng(3);
    Var x = b.tape.constant(gradcheck::uniform({9, 8}, rng));
    auto out = attend(b.w, x, std::nullopt, 4, low_threshold());
    ASSERT_EQ(out.heads.size(), 4u);
    for (const Var& a : out.weights) {
        const Tensor& m = b.tape.value(a);
        for (std::size_t i = 0; i < 9; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < 9; ++j) {
                if (j > i) {
                    EXPECT_EQ(m(i, j), 0.0);
                }
                row += m(i, j);
            }
            EXPECT_NEAR(row, 1.0, 1e-12);
        }
    }
    EXPECT_EQ(b.tape.value(out.heads[0]).shape(), (Shape{9, 2}));
    EXPECT_EQ(b.tape.value(out.rates).shape(), (Shape{9, 24}));
}

TEST(Attend, FutureTokensDoNotAffectEarlierOutputsBitwise) {
    std::mt19937_64 rng(4);
    for (bool positional : {false, true}) {
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t len = 12, d = 8, heads = 4;
            const Tensor x0 = gradcheck::uniform({len, d}, rng);
            const std::size_t cut = rng() % len;
            Tensor x1 = x0;
            for (std::size_t i = cut + 1; i < len; ++i)
                for (std::size_t c = 0; c < d; ++c) x1.vec()[i * d + c] += 3.0 * (static_cast<double>(rng() % 7) - 3.0);
            auto run = [&](const Tensor& x) {
                Block b(d, heads, 5, 11, positional);
                std::optional<Var> pos;
                if (positional) {
                    SpikeTrain s = generate(init_phase_bank(heads, 1), 10);
                    Tensor p({heads, 10});
                    for (std::size_t k = 0; k < heads; ++k)
                        for (std::size_t t = 0; t < 10; ++t) p.vec()[k * 10 + t] = s.at(k, t);
                    pos = b.tape.constant(p);
                }
                auto out = attend(b.w, b.tape.constant(x), pos, heads, low_threshold());
                auto routed = route(out.heads, &b.r);
                return std::make_pair(b.tape.value(routed.output), b.tape.value(routed.gates));
            };
            auto [y0, g0] = run(x0);
            auto [y1, g1] = run(x1);
            for (std::size_t i = 0; i <= cut; ++i) {
                for (std::size_t c = 0; c < y0.cols(); ++c) ASSERT_EQ(y0(i, c), y1(i, c));
                for (std::size_t h = 0; h < heads; ++h) ASSERT_EQ(g0(i, h), g1(i, h));
            }
        }
    }
}

TEST(Attend, SampledModeMetersSpikes) {
    Block b(8, 2, 4, 5);
    std::mt19937_64 rng(6), draw(7);
    SpikeMeter meter;
    SpikingOptions o = low_threshold();
    o.sampled = true;
    o.rng = &draw;
    o.meter = &meter;
    attend(b.w, b.tape.constant(gradcheck::uniform({5, 8}, rng)), std::nullopt, 2, o);
    EXPECT_EQ(meter.sites, 5u * 24u);
    EXPECT_EQ(meter.steps, 10u);
    EXPECT_GT(meter.spikes, 0.0);
    EXPECT_LE(meter.spikes, 5.0 * 24.0 * 10.0);
    o.rng = nullptr;
    EXPECT_THROW(attend(b.w, b.tape.constant(Tensor::matrix(2, 8)), std::nullopt, 2, o), UsageError);
}

TEST(Attend, RejectsInconsistentShapes) {
    Block b(8, 2, 4, 5);
    EXPECT_THROW(attend(b.w, b.tape.constant(Tensor::matrix(3, 6)), std::nullopt, 2, low_threshold()), UsageError);
    EXPECT_THROW(attend(b.w, b.tape.constant(Tensor::matrix(3, 8)), std::nullopt, 3, low_threshold()), UsageError);
    EXPECT_THROW(attend(b.w, b.tape.constant(Tensor::matrix(3, 8)), b.tape.constant(Tensor::matrix(2, 10)), 2,
                        low_threshold()),
                 UsageError);
}

TEST(Route, ZeroRouterEqualsUniformMeanBitwise) {
    Block b(8, 4, 6, 8);
    std::mt19937_64 rng(9);
    auto out = attend(b.w, b.tape.constant(gradcheck::uniform({7, 8}, rng)), std::nullopt, 4, low_threshold());
    RouterWeights zero{b.tape.constant(Tensor::matrix(8, 6)), b.tape.constant(Tensor::matrix(1, 6)),
                       b.tape.constant(Tensor::matrix(6, 4)), b.tape.constant(Tensor::matrix(1, 4))};
    auto routed = route(out.heads, &zero);
    auto mean = route(out.heads, nullptr);
    EXPECT_EQ(b.tape.value(routed.output), b.tape.value(mean.output));
    EXPECT_EQ(b.tape.value(routed.gates), Tensor::matrix(7, 4, 0.25));
}

TEST(Route, SoftmaxClosedForm) {
    Tape tape;
    std::vector<Var> heads{tape.constant(Tensor::row({1.0, 2.0})), tape.constant(Tensor::row({5.0, -3.0}))};
    RouterWeights r{tape.constant(Tensor::matrix(4, 3)), tape.constant(Tensor::matrix(1, 3)),
                    tape.constant(Tensor::matrix(3, 2)), tape.constant(Tensor::row({std::log(3.0), 0.0}))};
    auto out = route(heads, &r);
    EXPECT_NEAR(tape.value(out.gates)(0, 0), 0.75, 1e-15);
    EXPECT_NEAR(tape.value(out.gates)(0, 1), 0.25, 1e-15);
    EXPECT_NEAR(tape.value(out.output)(0, 0), 0.75 * 1.0 + 0.25 * 5.0, 1e-14);
    EXPECT_NEAR(tape.value(out.output)(0, 1), 0.75 * 2.0 - 0.25 * 3.0, 1e-14);
}

TEST(Route, MatchesBruteForceLoop) {
    const std::size_t heads = 4, dh = 3, len = 6, m = 5;
    std::mt19937_64 rng(10);
    Tape tape;
    std::vector<Tensor> hv;
    std::vector<Var> hs;
    for (std::size_t h = 0; h < heads; ++h) {
        hv.push_back(gradcheck::uniform({len, dh}, rng));
        hs.push_back(tape.constant(hv.back()));
    }
    const Tensor w1 = gradcheck::uniform({heads * dh, m}, rng), b1 = gradcheck::uniform({1, m}, rng);
    const Tensor w2 = gradcheck::uniform({m, heads}, rng), b2 = gradcheck::uniform({1, heads}, rng);
    RouterWeights r{tape.constant(w1), tape.constant(b1), tape.constant(w2), tape.constant(b2)};
    auto out = route(hs, &r);
    const Tensor& y = tape.value(out.output);
    const Tensor& g = tape.value(out.gates);
    for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> u;
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t c = 0; c < dh; ++c) u.push_back(hv[h](i, c));
        std::vector<double> hidden(m);
        for (std::size_t j = 0; j < m; ++j) {
            double z = b1(0, j);
            for (std::size_t a = 0; a < u.size(); ++a) z += u[a] * w1(a, j);
            hidden[j] = std::max(0.0, z);
        }
        std::vector<double> score(heads);
        double mx = -1e300;
        for (std::size_t h = 0; h < heads; ++h) {
            score[h] = b2(0, h);
            for (std::size_t j = 0; j < m; ++j) score[h] += hidden[j] * w2(j, h);
            mx = std::max(mx, score[h]);
        }
        double z = 0.0;
        for (double& s : score) z += (s = std::exp(s - mx));
        double gate_sum = 0.0;
        for (std::size_t h = 0; h < heads; ++h) {
            EXPECT_NEAR(g(i, h), score[h] / z, 1e-12);
            gate_sum += g(i, h);
        }
        EXPECT_NEAR(gate_sum, 1.0, 1e-12);
        for (std::size_t c = 0; c < dh; ++c) {
            double expect = 0.0;
            for (std::size_t h = 0; h < heads; ++h) expect += score[h] / z * hv[h](i, c);
            EXPECT_NEAR(y(i, c), expect, 1e-12);
        }
    }
}

TEST(Route, GateRowsSumToOne) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        Tape tape;
        std::vector<Var> hs;
        for (int h = 0; h < 4; ++h) hs.push_back(tape.constant(gradcheck::uniform({5, 2}, rng, -20, 20)));
        RouterWeights r{tape.constant(gradcheck::uniform({8, 16}, rng, -5, 5)),
                        tape.constant(gradcheck::uniform({1, 16}, rng)), tape.constant(gradcheck::uniform({16, 4}, rng, -5, 5)),
                        tape.constant(gradcheck::uniform({1, 4}, rng))};
        const Tensor& g = tape.value(route(hs, &r).gates);
        for (std::size_t i = 0; i < 5; ++i) {
            double s = 0.0;
            for (std::size_t h = 0; h < 4; ++h) {
                EXPECT_GE(g(i, h), 0.0);
                s += g(i, h);
            }
            ASSERT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Route, GateCsvIsDeterministic) {
    Tensor g = Tensor::matrix(2, 2, 0.5);
    std::ostringstream a, b;
    write_gates_csv(a, g);
    write_gates_csv(b, g);
    EXPECT_EQ(a.str(), b.str());
    EXPECT_EQ(a.str(), "token,head0,head1\n0,0.5,0.5\n1,0.5,0.5\n");
}

TEST(AttentionGradient, BlockMatchesFiniteDifferences) {
    std::mt19937_64 rng(13);
    const std::size_t d = 4, heads = 2, len = 3;
    SpikingOptions o = low_threshold();
    o.surrogate = SurrogateSpec{SurrogateKind::kSigmoid, 2.0};
    o.window = 4;
    std::vector<Tensor> in{gradcheck::uniform({len, d}, rng), gradcheck::uniform({d, 3 * d}, rng, -0.5, 0.8),
                           gradcheck::uniform({heads, 3 * d}, rng, -0.5, 0.5), gradcheck::uniform({d / heads, d}, rng),
                           gradcheck::uniform({d, 3}, rng), gradcheck::uniform({3, heads}, rng)};
    const Tensor pos = Tensor({heads, 4}, std::vector<double>{1, 0, 1, 1, 0, 0, 1, 0});
    auto f = [&](Tape& t, const std::vector<Var>& v) {
        AttentionWeights w{v[1], v[2], v[3], t.constant(Tensor::matrix(1, d))};
        RouterWeights r{v[4], t.constant(Tensor::row({0.1, -0.2, 0.3})), v[5], t.constant(Tensor::matrix(1, heads))};
        auto a = attend(w, v[0], t.constant(pos), heads, o);
        auto routed = route(a.heads, &r);
        Var y = add_row(matmul(routed.output, w.w_out), w.b_out);
        return sum(mul(y, y));
    };
    auto rep = gradcheck::check(f, in);
    EXPECT_LT(rep.max_rel, 1e-4) << rep.max_abs;
}
