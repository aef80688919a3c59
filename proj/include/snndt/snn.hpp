#pragma once

// Discrete-time leaky integrate-and-fire dynamics, surrogate derivatives for
// the spike threshold, and Bernoulli rate coding.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "snndt/tape.hpp"
#include "snndt/tensor.hpp"

namespace snndt {

struct LIFParams {
    double tau_m = 20.0;   // ms
    double v_rest = 0.0;
    double v_th = 1.0;
    double v_reset = 0.0;
    double dt = 1.0;       // ms
    double c_m = 1.0;      // multiplier on the input current

    void validate() const {
        if (!(tau_m > 0.0)) throw UsageError("LIFParams: tau_m must be > 0");
        if (!(dt > 0.0)) throw UsageError("LIFParams: dt must be > 0");
        if (!(v_th > v_reset)) throw UsageError("LIFParams: v_th must exceed v_reset");
    }
};

struct LIFState {
    Tensor v;
    Tensor last_spikes;

    static LIFState at_rest(const Shape& shape, const LIFParams& p) {
        return LIFState{Tensor(shape, p.v_rest), Tensor(shape, 0.0)};
    }
};

enum class SurrogateKind : std::uint8_t { kSigmoid, kFastSigmoid, kPiecewiseLinear };

struct SurrogateSpec {
    SurrogateKind kind = SurrogateKind::kSigmoid;
    double slope = 10.0;

    void validate() const {
        if (!(slope > 0.0)) throw UsageError("SurrogateSpec: slope must be > 0");
    }
};

inline std::string_view to_string(SurrogateKind k) {
    switch (k) {
        case SurrogateKind::kSigmoid: return "sigmoid";
        case SurrogateKind::kFastSigmoid: return "fast-sigmoid";
        case SurrogateKind::kPiecewiseLinear: return "piecewise-linear";
    }
    return "?";
}

inline SurrogateKind parse_surrogate_kind(std::string_view s) {
    if (s == "sigmoid") return SurrogateKind::kSigmoid;
    if (s == "fast-sigmoid" || s == "fast_sigmoid") return SurrogateKind::kFastSigmoid;
    if (s == "piecewise-linear" || s == "piecewise_linear") return SurrogateKind::kPiecewiseLinear;
    throw UsageError("unknown surrogate kind '" + std::string(s) + "'");
}

/// Surrogate derivative of the Heaviside step at offset u = V - V_th.
inline double surrogate_derivative(double u, const SurrogateSpec& spec) {
    const double ku = spec.slope * u;
    switch (spec.kind) {
        case SurrogateKind::kSigmoid: {
            const double e = std::exp(-std::abs(ku));
            const double d = 1.0 + e;
            return e / (d * d);
        }
        case SurrogateKind::kFastSigmoid: {
            const double d = 1.0 + std::abs(ku);
            return 1.0 / (d * d);
        }
        case SurrogateKind::kPiecewiseLinear: return std::max(0.0, 1.0 - std::abs(ku));
    }
    return 0.0;
}

/// Antiderivative of surrogate_derivative (zero-centred where convenient);
/// used as the smooth stand-in forward for gradient checks.
inline double surrogate_relaxation(double u, const SurrogateSpec& spec) {
    const double k = spec.slope;
    switch (spec.kind) {
        case SurrogateKind::kSigmoid: return sigmoid_value(k * u) / k;
        case SurrogateKind::kFastSigmoid: return u / (1.0 + k * std::abs(u));
        case SurrogateKind::kPiecewiseLinear: {
            const double edge = 1.0 / k;
            if (u >= edge) return 0.5 / k;
            if (u <= -edge) return -0.5 / k;
            return u - 0.5 * k * u * std::abs(u);
        }
    }
    return 0.0;
}

inline Tensor surrogate_backward(const Tensor& u, const SurrogateSpec& spec) {
    spec.validate();
    return kernels::map(u, [&spec](double x) { return surrogate_derivative(x, spec); });
}

/// Heaviside(x - offset) with the surrogate derivative evaluated at x - offset.
/// Fires when x >= offset.
inline CustomGradSpec threshold_spec(const SurrogateSpec& spec, double offset = 0.0) {
    spec.validate();
    return CustomGradSpec{
        [offset](double x) { return x - offset >= 0.0 ? 1.0 : 0.0; },
        [spec, offset](double x) { return surrogate_derivative(x - offset, spec); },
        [spec, offset](double x) { return surrogate_relaxation(x - offset, spec); },
        [spec, offset](const Tensor& x, const Tensor& g, Tensor& gx) {
            const std::size_t n = x.size();
            const double* xs = x.data().data();
            const double* gs = g.data().data();
            double* out = gx.data().data();
            for (std::size_t i = 0; i < n; ++i) out[i] = gs[i] * surrogate_derivative(xs[i] - offset, spec);
        },
    };
}

/// Euler update of the membrane potential before thresholding.
inline double lif_integrate_value(double v, double current, const LIFParams& p) {
    return v + (p.dt / p.tau_m) * (p.v_rest - v) + p.dt * p.c_m * current;
}

struct LIFStepResult {
    LIFState state;
    Tensor spikes;
};

/// One forward-Euler step on plain tensors. Spiking neurons are reset to v_reset.
inline LIFStepResult lif_step(const LIFState& state, const Tensor& input_current, const LIFParams& params) {
    params.validate();
    kernels::require_same_shape(state.v, input_current, "lif_step");
    for (double c : input_current.data()) {
        if (!std::isfinite(c)) throw NonFiniteError("lif_step: non-finite input current");
    }
    LIFStepResult r{LIFState{Tensor(state.v.shape()), Tensor(state.v.shape())}, Tensor(state.v.shape())};
    for (std::size_t i = 0; i < state.v.size(); ++i) {
        const double v = lif_integrate_value(state.v[i], input_current[i], params);
        const bool fire = v >= params.v_th;
        r.spikes[i] = fire ? 1.0 : 0.0;
        r.state.v[i] = fire ? params.v_reset : v;
    }
    r.state.last_spikes = r.spikes;
    return r;
}

struct LIFVars {
    Var v;
    Var spikes;
};

/// Differentiable LIF step. The threshold uses the surrogate in the backward
/// pass; the reset v_next = v'(1 - s) + v_reset * s is differentiated as written.
inline LIFVars lif_step(Var v, Var current, const LIFParams& params, const SurrogateSpec& surrogate) {
    Tape& tape = detail::same_tape(v, current);
    const Tensor& vv = tape.value(v);
    const Tensor& iv = tape.value(current);
    kernels::require_same_shape(vv, iv, "lif_step");
    Tensor integrated(vv.shape());
    for (std::size_t i = 0; i < vv.size(); ++i) {
        if (!std::isfinite(iv[i])) throw NonFiniteError("lif_step: non-finite input current");
        integrated[i] = lif_integrate_value(vv[i], iv[i], params);
    }
    const double leak_keep = 1.0 - params.dt / params.tau_m;
    const double gain = params.dt * params.c_m;
    Var vprime = tape.record(OpKind::kLifIntegrate, {v, current}, std::move(integrated),
                             [v, current, leak_keep, gain](Tape& tp, const Tensor& g) {
                                 if (tp.requires_grad(v)) {
                                     tp.accumulate(v, kernels::map(g, [leak_keep](double x) { return leak_keep * x; }));
                                 }
                                 if (tp.requires_grad(current)) {
                                     tp.accumulate(current, kernels::map(g, [gain](double x) { return gain * x; }));
                                 }
                             });
    Var spikes = custom_grad(vprime, threshold_spec(surrogate, params.v_th));

    const Tensor& vp = tape.value(vprime);
    const Tensor& sp = tape.value(spikes);
    Tensor next(vp.shape());
    for (std::size_t i = 0; i < vp.size(); ++i) next[i] = vp[i] * (1.0 - sp[i]) + params.v_reset * sp[i];
    const double v_reset = params.v_reset;
    Var vnext = tape.record(OpKind::kLifReset, {vprime, spikes}, std::move(next),
                            [vprime, spikes, v_reset](Tape& tp, const Tensor& g) {
                                const Tensor& a = tp.value(vprime);
                                const Tensor& s = tp.value(spikes);
                                if (tp.requires_grad(vprime)) {
                                    Tensor ga(g.shape());
                                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (1.0 - s[i]);
                                    tp.accumulate(vprime, ga);
                                }
                                if (tp.requires_grad(spikes)) {
                                    Tensor gs(g.shape());
                                    for (std::size_t i = 0; i < g.size(); ++i) gs[i] = g[i] * (v_reset - a[i]);
                                    tp.accumulate(spikes, gs);
                                }
                            });
    return LIFVars{vnext, spikes};
}

/// Binary tensor in (rows x channels x steps) layout, or (channels x steps)
/// for per-head generators.
class SpikeTrain {
public:
    SpikeTrain() = default;
    SpikeTrain(Shape shape) : shape_(std::move(shape)), bits_(shape_numel(shape_), 0) {
        if (shape_.size() != 2 && shape_.size() != 3) throw UsageError("SpikeTrain: rank must be 2 or 3");
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t steps() const noexcept { return shape_.back(); }
    std::size_t size() const noexcept { return bits_.size(); }

    std::uint8_t& at(std::size_t c, std::size_t t) { return bits_[c * shape_.back() + t]; }
    std::uint8_t at(std::size_t c, std::size_t t) const { return bits_[c * shape_.back() + t]; }
    std::uint8_t& at(std::size_t i, std::size_t c, std::size_t t) {
        return bits_[(i * shape_[1] + c) * shape_[2] + t];
    }
    std::uint8_t at(std::size_t i, std::size_t c, std::size_t t) const {
        return bits_[(i * shape_[1] + c) * shape_[2] + t];
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto b : bits_) n += b;
        return n;
    }
    const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

    friend bool operator==(const SpikeTrain&, const SpikeTrain&) = default;

private:
    Shape shape_;
    std::vector<std::uint8_t> bits_;
};

/// Squashes each embedding value with a sigmoid and draws `window` independent
/// Bernoulli spikes with that probability.
inline SpikeTrain rate_code(const Tensor& embeddings, std::size_t window, std::uint64_t seed) {
    if (window < 1) throw UsageError("rate_code: window must be >= 1");
    const std::size_t rows = embeddings.rows(), cols = embeddings.cols();
    SpikeTrain out({rows, cols, window});
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t c = 0; c < cols; ++c) {
            const double p = sigmoid_value(embeddings(i, c));
            for (std::size_t t = 0; t < window; ++t) out.at(i, c, t) = unif(rng) < p ? 1 : 0;
        }
    }
    return out;
}

}  // namespace snndt
