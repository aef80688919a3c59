#pragma once

// Three-factor local learning for the action head: decaying pre/post
// eligibility traces gated by a clipped, standardized return signal.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "snndt/dataset.hpp"
#include "snndt/envs.hpp"
#include "snndt/model.hpp"
#include "snndt/tensor.hpp"

namespace snndt {

struct PlasticityConfig {
    double lambda = 0.9;      // trace decay per step
    double eta_local = 0.05;  // local learning rate
    double clamp = 0.5;       // elementwise bound on the per-clip update
};

/// E' = lambda * E + y x^T, with E shaped (|y| x |x|).
inline Tensor trace_update(const Tensor& e, std::span<const double> x, std::span<const double> y, double lambda) {
    if (e.rows() != y.size() || e.cols() != x.size()) throw UsageError("trace_update: shape mismatch");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("trace_update: lambda must lie in [0, 1]");
    Tensor out(e.shape());
    for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t j = 0; j < x.size(); ++j) out(i, j) = lambda * e(i, j) + y[i] * x[j];
    return out;
}

/// clip((g - mean) / stddev, [-1, 1]); a zero spread yields 0 and sets `degenerate`.
inline double modulator(double g, double mean, double stddev, bool* degenerate = nullptr) {
    if (!(stddev > 0.0)) {
        if (degenerate != nullptr) *degenerate = true;
        return 0.0;
    }
    return std::clamp((g - mean) / stddev, -1.0, 1.0);
}

struct PlasticityState {
    Tensor trace;   // d_a x d
    Tensor update;  // accumulated, not yet applied
    ReturnStats returns;
    PlasticityConfig config;
    bool degenerate = false;

    PlasticityState(std::size_t out_dim, std::size_t in_dim, ReturnStats stats, PlasticityConfig cfg = {})
        : trace(Tensor::matrix(out_dim, in_dim)), update(Tensor::matrix(out_dim, in_dim)), returns(stats), config(cfg) {}

    void reset_trace() { trace.fill(0.0); }

    /// One step: trace update, then update += eta * delta * E.
    void observe(std::span<const double> x, std::span<const double> y, double g) {
        trace = trace_update(trace, x, y, config.lambda);
        const double delta = modulator(g, returns.mean, returns.stddev, &degenerate);
        if (delta == 0.0) return;
        kernels::axpy(config.eta_local * delta, trace, update);
    }

    /// Clamps the accumulated update, adds it to `w` and clears it. Returns
    /// the applied update.
    Tensor apply(Tensor& w) {
        kernels::require_same_shape(w, update, "plasticity apply");
        Tensor applied = kernels::map(update, [c = config.clamp](double v) { return std::clamp(v, -c, c); });
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += applied[i];
        update.fill(0.0);
        return applied;
    }
};

/// Runs one clip through the rule with a fresh trace and applies the
/// accumulated update to the action head. Padded steps are skipped. The
/// modulating return defaults to the clip's own return-to-go.
inline Tensor plasticity_clip_update(DecisionTransformer& model, PlasticityState& state, const Clip& clip,
                                     std::span<const double> returns = {}) {
    if (!returns.empty() && returns.size() != clip.length()) throw UsageError("plasticity: one return per step");
    Tape tape;
    BoundParams p(tape, model.params(), false);
    ForwardResult f = model.forward(p, clip);
    const Tensor& x = tape.value(f.head_input);
    const Tensor& y = tape.value(f.decoded);
    state.reset_trace();
    for (std::size_t t = 0; t < clip.length(); ++t) {
        if (clip.pad[t]) continue;
        state.observe(x.row_span(t), y.row_span(t), returns.empty() ? clip.rtg[t] : returns[t]);
    }
    return state.apply(model.params().get("head.w_act"));
}

/// Greedy online episodes; after each one the episode is cut into aligned
/// clips and the three-factor rule adapts the action-head weight matrix only.
inline void online_finetune(DecisionTransformer& model, Environment& env, std::size_t episodes, std::uint64_t seed,
                            const ReturnStats& stats, PlasticityConfig cfg = {}) {
    const ModelConfig& mc = model.config();
    PlasticityState state(mc.action_dim, mc.embed_dim, stats, cfg);
    const double target = target_return(mc.env);
    for (std::size_t ep = 0; ep < episodes; ++ep) {
        Trajectory tr = greedy_episode(model, env, seed + ep, target);
        // Inputs replay the conditioning the policy saw; the modulator uses
        // the realized return-to-go. Windows align to the episode start.
        const std::vector<double> g = rtg(tr.rewards);
        std::vector<double> cond(tr.size());
        double left = target;
        for (std::size_t k = 0; k < tr.size(); ++k) {
            cond[k] = left;
            left -= tr.rewards[k];
        }
        const std::size_t width = mc.discrete ? 1 : mc.action_dim;
        for (std::size_t start = 0; start < tr.size(); start += mc.context) {
            const std::size_t n = std::min(mc.context, tr.size() - start);
            Clip c{Tensor::matrix(n, mc.state_dim), Tensor::matrix(n, width), std::vector<double>(n),
                   std::vector<double>(n), std::vector<std::uint8_t>(n, 0)};
            for (std::size_t k = 0; k < n; ++k) {
                for (std::size_t j = 0; j < mc.state_dim; ++j) c.states(k, j) = tr.states[start + k][j];
                for (std::size_t j = 0; j < width; ++j) c.actions(k, j) = tr.actions[start + k][j];
                c.rtg[k] = cond[start + k];
                c.timesteps[k] = static_cast<double>(start + k);
            }
            plasticity_clip_update(model, state, c, std::span<const double>(g).subspan(start, n));
        }
    }
}

}  // namespace snndt
