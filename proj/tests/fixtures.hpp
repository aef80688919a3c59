#pragma once

// Small models and synthetic clips shared by the model-level tests.

#include <random>

#include "snndt/model.hpp"

namespace fixtures {

inline snndt::ModelConfig tiny(snndt::AblationMode mode, const std::string& env = "CartPole") {
    snndt::ModelConfig c = snndt::ModelConfig::for_env(env);
    c.embed_dim = 8;
    c.heads = 4;
    c.layers = 2;
    c.window = 4;
    c.context = 6;
    c.router_hidden = 5;
    c.mode = mode;
    c.lif.v_th = 0.3;
    c.seed = 3;
    return c;
}

/// Clip of `len` steps whose first `pad` steps are front padding.
inline snndt::Clip random_clip(const snndt::ModelConfig& c, std::size_t len, std::size_t pad, std::mt19937_64& rng) {
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, c.action_dim - 1);
    const std::size_t aw = c.discrete ? 1 : c.action_dim;
    snndt::Clip clip{snndt::Tensor::matrix(len, c.state_dim), snndt::Tensor::matrix(len, aw), std::vector<double>(len),
                     std::vector<double>(len), std::vector<std::uint8_t>(len, 0)};
    for (std::size_t t = 0; t < len; ++t) {
        if (t < pad) {
            clip.pad[t] = 1;
            continue;
        }
        for (std::size_t j = 0; j < c.state_dim; ++j) clip.states(t, j) = z(rng);
        if (c.discrete) {
            clip.actions(t, 0) = static_cast<double>(pick(rng));
        } else {
            for (std::size_t j = 0; j < aw; ++j) clip.actions(t, j) = std::tanh(z(rng)) * c.action_bound;
        }
        clip.rtg[t] = c.rtg_scale * 0.5 * (1.0 + z(rng) * 0.3);
        clip.timesteps[t] = static_cast<double>(t - pad);
    }
    return clip;
}

}  // namespace fixtures
