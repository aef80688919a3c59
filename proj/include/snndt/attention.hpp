#pragma once

// Causal multi-head self-attention over LIF spike rates, with the dendritic
// routing MLP that mixes head outputs through per-token softmax gates.

#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <vector>

#include "snndt/snn.hpp"
#include "snndt/tape.hpp"

namespace snndt {

/// Spike bookkeeping for one forward pass.
struct SpikeMeter {
    double spikes = 0.0;     // LIF output spikes (Q/K/V neurons, all layers)
    std::size_t sites = 0;   // number of LIF neurons
    std::size_t steps = 0;   // window length T used
};

struct SpikingOptions {
    LIFParams lif;
    SurrogateSpec surrogate;
    std::size_t window = 10;
    // Sampled mode draws Bernoulli input spikes (inference metering); otherwise
    // the LIF layers integrate the expected rates, which is what training uses.
    bool sampled = false;
    std::mt19937_64* rng = nullptr;
    SpikeMeter* meter = nullptr;
};

struct AttentionWeights {
    Var w_qkv;                 // d x 3d, content channels -> Q|K|V currents
    std::optional<Var> w_pos;  // H_pos x 3d, positional channels -> currents
    Var w_out;                 // d_head x d
    Var b_out;                 // 1 x d
};

struct RouterWeights {
    Var w1;  // (H * d_head) x m
    Var b1;  // 1 x m
    Var w2;  // m x H
    Var b2;  // 1 x H
};

struct AttendResult {
    std::vector<Var> heads;    // H outputs, each L x d_head
    std::vector<Var> weights;  // H attention matrices, each L x L
    Var rates;                 // L x 3d spike rates of the Q|K|V neurons
};

/// Runs the Q/K/V LIF populations over the spike window and applies causal
/// softmax attention per head on the resulting rates. `positional` is the
/// H_pos x T spike train appended to every token's input channels.
inline AttendResult attend(const AttentionWeights& w, Var x, std::optional<Var> positional, std::size_t heads,
                           const SpikingOptions& opt) {
    Tape& tape = detail::tape_of(x);
    const std::size_t len = tape.value(x).rows();
    const std::size_t d = tape.value(x).cols();
    const std::size_t width = tape.value(w.w_qkv).cols();
    if (width != 3 * d || d % heads != 0) throw UsageError("attend: inconsistent attention dimensions");
    if (positional.has_value() != w.w_pos.has_value()) {
        throw UsageError("attend: positional spikes and positional weights must be supplied together");
    }
    if (opt.window < 1) throw UsageError("attend: window must be >= 1");
    const std::size_t d_head = d / heads;

    Var rates_in = sigmoid(x);
    std::optional<Var> pos_current;  // T x 3d, row t = p(t) * W_pos
    if (positional) pos_current = matmul(transpose(*positional), *w.w_pos);

    std::optional<Var> content;  // time-invariant content current
    if (!opt.sampled) content = matmul(rates_in, w.w_qkv);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    Var v = tape.constant(Tensor::matrix(len, width, opt.lif.v_rest));
    std::vector<Var> spikes;
    spikes.reserve(opt.window);
    for (std::size_t t = 0; t < opt.window; ++t) {
        Var current;
        if (opt.sampled) {
            if (opt.rng == nullptr) throw UsageError("attend: sampled mode needs an rng");
            const Tensor& p = tape.value(rates_in);
            Tensor draw(p.shape());
            for (std::size_t i = 0; i < p.size(); ++i) draw[i] = unif(*opt.rng) < p[i] ? 1.0 : 0.0;
            current = matmul(tape.constant(std::move(draw)), w.w_qkv);
        } else {
            current = *content;
        }
        if (pos_current) current = add_row(current, gather_rows(*pos_current, {t}));
        LIFVars step = lif_step(v, current, opt.lif, opt.surrogate);
        v = step.v;
        spikes.push_back(step.spikes);
    }
    Var rates = scale(add_n(spikes), 1.0 / static_cast<double>(opt.window));
    if (opt.meter != nullptr) {
        for (const Var& s : spikes) opt.meter->spikes += kernels::sum(tape.value(s));
        opt.meter->sites += len * width;
        opt.meter->steps = opt.window;
    }

    AttendResult out;
    out.rates = rates;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
    const auto mask = causal_mask(len);
    for (std::size_t h = 0; h < heads; ++h) {
        Var q = slice_cols(rates, h * d_head, d_head);
        Var k = slice_cols(rates, d + h * d_head, d_head);
        Var val = slice_cols(rates, 2 * d + h * d_head, d_head);
        Var scores = scale(matmul(q, transpose(k)), inv_sqrt);
        Var weights = softmax_rows(masked_fill(scores, mask, -std::numeric_limits<double>::infinity()));
        out.weights.push_back(weights);
        out.heads.push_back(matmul(weights, val));
    }
    return out;
}

struct RouteResult {
    Var output;  // L x d_head
    Var gates;   // L x H, rows sum to 1
};

/// Gated aggregation of head outputs. Without a router every gate is 1/H,
/// i.e. the uniform head mean.
inline RouteResult route(const std::vector<Var>& heads, const RouterWeights* router) {
    Tape& tape = detail::tape_of(heads);
    const std::size_t n_heads = heads.size();
    const std::size_t len = tape.value(heads.front()).rows();
    Var gates;
    if (router != nullptr) {
        Var u = concat_cols(heads);
        Var hidden = relu(add_row(matmul(u, router->w1), router->b1));
        Var scores = add_row(matmul(hidden, router->w2), router->b2);
        gates = softmax_rows(scores);
    } else {
        gates = tape.constant(Tensor::matrix(len, n_heads, 1.0 / static_cast<double>(n_heads)));
    }
    std::vector<Var> terms;
    terms.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) terms.push_back(mul_col(heads[h], slice_cols(gates, h, 1)));
    return RouteResult{add_n(terms), gates};
}

/// Gate heatmap: rows = tokens, columns = heads.
inline void write_gates_csv(std::ostream& os, const Tensor& gates) {
    os << "token";
    for (std::size_t h = 0; h < gates.cols(); ++h) os << ",head" << h;
    os << '\n';
    os.precision(17);
    for (std::size_t i = 0; i < gates.rows(); ++i) {
        os << i;
        for (std::size_t h = 0; h < gates.cols(); ++h) os << ',' << gates(i, h);
        os << '\n';
    }
}

}  // namespace snndt
