#pragma once

// Phase-shifted sine-threshold spike generators: head k fires at step t
// (t = 1..T) iff sin(omega_k * t + phi_k) >= 0.

#include <cmath>
#include <numbers>
#include <ostream>
#include <random>
#include <vector>

#include "snndt/snn.hpp"
#include "snndt/tape.hpp"

namespace snndt {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kOmegaInitMin = 0.1;
inline constexpr double kOmegaInitMax = 10.0;
// Lower clamp keeping frequencies strictly positive after optimizer steps.
inline constexpr double kOmegaFloor = 1e-3;

struct PhaseBank {
    std::vector<double> omega;
    std::vector<double> phi;

    std::size_t heads() const noexcept { return omega.size(); }

    /// Re-imposes the invariants: omega > 0 and phi in [0, 2*pi).
    void normalize() {
        for (double& w : omega) w = std::max(w, kOmegaFloor);
        for (double& p : phi) {
            p = std::fmod(p, kTwoPi);
            if (p < 0.0) p += kTwoPi;
            if (p >= kTwoPi) p = 0.0;
        }
    }
};

inline PhaseBank init_phase_bank(std::size_t heads, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> omega(kOmegaInitMin, kOmegaInitMax);
    std::uniform_real_distribution<double> phase(0.0, kTwoPi);
    PhaseBank bank;
    for (std::size_t k = 0; k < heads; ++k) {
        bank.omega.push_back(omega(rng));
        bank.phi.push_back(phase(rng));
    }
    return bank;
}

inline SpikeTrain generate(const PhaseBank& bank, std::size_t window) {
    if (window < 1) throw UsageError("generate: window must be >= 1");
    SpikeTrain out({bank.heads(), window});
    for (std::size_t k = 0; k < bank.heads(); ++k) {
        for (std::size_t t = 0; t < window; ++t) {
            const double angle = bank.omega[k] * static_cast<double>(t + 1) + bank.phi[k];
            out.at(k, t) = std::sin(angle) >= 0.0 ? 1 : 0;
        }
    }
    return out;
}

/// Concatenates the positional train onto every token's channels:
/// (L x d x T) + (H x T) -> (L x (d + H) x T).
inline SpikeTrain augment(const SpikeTrain& content, const SpikeTrain& positional) {
    if (content.shape().size() != 3 || positional.shape().size() != 2) {
        throw UsageError("augment: expected content L x d x T and positional H x T");
    }
    const std::size_t rows = content.shape()[0], d = content.shape()[1], window = content.shape()[2];
    const std::size_t heads = positional.shape()[0];
    if (positional.shape()[1] != window) throw UsageError("augment: window lengths differ");
    SpikeTrain out({rows, d + heads, window});
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t c = 0; c < d; ++c)
            for (std::size_t t = 0; t < window; ++t) out.at(i, c, t) = content.at(i, c, t);
        for (std::size_t k = 0; k < heads; ++k)
            for (std::size_t t = 0; t < window; ++t) out.at(i, d + k, t) = positional.at(k, t);
    }
    return out;
}

/// Differentiable generator: omega and phi are H x 1 columns; returns H x T.
inline Var positional_spikes(Var omega, Var phi, std::size_t window, const SurrogateSpec& surrogate) {
    Tape& tape = detail::same_tape(omega, phi);
    std::vector<double> steps(window);
    for (std::size_t t = 0; t < window; ++t) steps[t] = static_cast<double>(t + 1);
    Var trow = tape.constant(Tensor::row(std::move(steps)));
    Var angle = add_col(matmul(omega, trow), phi);
    return custom_grad(sin(angle), threshold_spec(surrogate, 0.0));
}

inline void write_phase_csv(std::ostream& os, const PhaseBank& bank) {
    os << "head,omega,phi\n";
    os.precision(17);
    for (std::size_t k = 0; k < bank.heads(); ++k) os << k << ',' << bank.omega[k] << ',' << bank.phi[k] << '\n';
}

}  // namespace snndt
