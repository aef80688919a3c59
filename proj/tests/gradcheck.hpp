#pragma once

// Central finite-difference checker. The function is rebuilt on a fresh
// relaxed-mode tape for each evaluation so spike thresholds use their smooth
// stand-ins.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "snndt/tape.hpp"

namespace gradcheck {

using Builder = std::function<snndt::Var(snndt::Tape&, const std::vector<snndt::Var>&)>;

struct Report {
    double max_rel = 0.0;
    double max_abs = 0.0;
    std::size_t checked = 0;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor), maximized over
/// every input element.
inline Report check(const Builder& f, std::vector<snndt::Tensor> inputs, double h = 1e-6, double floor = 1e-4,
                    snndt::Tape::ThresholdMode mode = snndt::Tape::ThresholdMode::kRelaxed) {
    auto eval = [&](const std::vector<snndt::Tensor>& xs) {
        snndt::Tape tape(mode);
        std::vector<snndt::Var> vars;
        for (const auto& x : xs) vars.push_back(tape.constant(x));
        return tape.value(f(tape, vars)).item();
    };
    snndt::Tape tape(mode);
    std::vector<snndt::Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.parameter(x));
    snndt::Var loss = f(tape, vars);
    snndt::GradientMap g = tape.backward(loss);

    Report r;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const snndt::Tensor analytic = g[vars[k]];
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double keep = inputs[k][i];
            inputs[k][i] = keep + h;
            const double up = eval(inputs);
            inputs[k][i] = keep - h;
            const double down = eval(inputs);
            inputs[k][i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double diff = std::abs(analytic[i] - numeric);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            r.max_rel = std::max(r.max_rel, diff / denom);
            r.max_abs = std::max(r.max_abs, diff);
            ++r.checked;
        }
    }
    return r;
}

inline snndt::Tensor uniform(snndt::Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
    snndt::Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (double& v : t.vec()) v = d(rng);
    return t;
}

}  // namespace gradcheck
