#pragma once

// Return-conditioned spiking sequence model over interleaved
// (return-to-go, state, action) tokens.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "snndt/attention.hpp"
#include "snndt/config.hpp"
#include "snndt/dataset.hpp"
#include "snndt/envs.hpp"
#include "snndt/params.hpp"
#include "snndt/positional.hpp"
#include "snndt/snn.hpp"
#include "snndt/tape.hpp"

namespace snndt {

enum class AblationMode : std::uint8_t { kBaseline, kPosOnly, kRouteOnly, kFull };

inline constexpr AblationMode kAllModes[] = {AblationMode::kBaseline, AblationMode::kPosOnly,
                                             AblationMode::kRouteOnly, AblationMode::kFull};

inline std::string to_string(AblationMode m) {
    switch (m) {
        case AblationMode::kBaseline: return "baseline";
        case AblationMode::kPosOnly: return "pos-only";
        case AblationMode::kRouteOnly: return "route-only";
        case AblationMode::kFull: return "full";
    }
    return "?";
}

inline AblationMode parse_mode(const std::string& s) {
    for (AblationMode m : kAllModes)
        if (to_string(m) == s) return m;
    if (s == "pos_only") return AblationMode::kPosOnly;
    if (s == "route_only") return AblationMode::kRouteOnly;
    throw UsageError("unknown mode '" + s + "' (expected baseline, pos-only, route-only or full)");
}

inline bool uses_phase(AblationMode m) { return m == AblationMode::kPosOnly || m == AblationMode::kFull; }
inline bool uses_router(AblationMode m) { return m == AblationMode::kRouteOnly || m == AblationMode::kFull; }

struct ModelConfig {
    std::string env = "CartPole";
    std::size_t state_dim = 4;
    std::size_t action_dim = 2;  // discrete: number of actions; continuous: vector width
    bool discrete = true;
    double action_bound = 1.0;
    double rtg_scale = 500.0;  // returns-to-go are divided by this before embedding

    std::size_t embed_dim = 128;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t window = 10;
    std::size_t context = 20;
    std::size_t router_hidden = 16;
    AblationMode mode = AblationMode::kFull;
    LIFParams lif;
    SurrogateSpec surrogate;
    std::uint64_t seed = 0;

    std::size_t head_dim() const { return embed_dim / heads; }

    void validate() const {
        if (state_dim == 0 || action_dim == 0) throw UsageError("model: empty state or action space");
        if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
            throw UsageError("model: embedding_dim must be a positive multiple of num_heads");
        }
        if (layers == 0 || window == 0 || context == 0 || router_hidden == 0) {
            throw UsageError("model: layers, window, context and router size must be >= 1");
        }
        if (!(rtg_scale > 0.0) || !(action_bound > 0.0)) throw UsageError("model: scales must be > 0");
        lif.validate();
        surrogate.validate();
    }

    /// Fills the task-dependent fields for a named environment.
    static ModelConfig for_env(const std::string& name) {
        auto env = make_env(name);
        const EnvSpec& s = env->spec();
        ModelConfig c;
        c.env = s.name;
        c.state_dim = s.state_dim;
        c.action_dim = s.action_dim;
        c.discrete = s.discrete();
        c.action_bound = s.action_bound;
        if (s.name == "CartPole") c.rtg_scale = 500.0;
        if (s.name == "MountainCar") c.rtg_scale = 200.0;
        if (s.name == "Acrobot") c.rtg_scale = 500.0;
        if (s.name == "Pendulum") c.rtg_scale = 1000.0;
        return c;
    }

    KeyValues to_kv() const {
        KeyValues kv;
        kv.set("env", env);
        kv.set_number("state_dim", state_dim);
        kv.set_number("action_dim", action_dim);
        kv.set("discrete", discrete ? "true" : "false");
        kv.set_number("action_bound", action_bound);
        kv.set_number("rtg_scale", rtg_scale);
        kv.set_number("embedding_dim", embed_dim);
        kv.set_number("num_heads", heads);
        kv.set_number("num_layers", layers);
        kv.set_number("window", window);
        kv.set_number("context_length", context);
        kv.set_number("router_hidden", router_hidden);
        kv.set("mode", to_string(mode));
        kv.set_number("tau_m", lif.tau_m);
        kv.set_number("v_rest", lif.v_rest);
        kv.set_number("v_th", lif.v_th);
        kv.set_number("v_reset", lif.v_reset);
        kv.set_number("dt", lif.dt);
        kv.set_number("c_m", lif.c_m);
        kv.set("surrogate", std::string(to_string(surrogate.kind)));
        kv.set_number("surrogate_slope", surrogate.slope);
        kv.set_number("seed", seed);
        return kv;
    }

    /// Overrides fields present in `kv`; the rest keep their current values.
    void apply(const KeyValues& kv) {
        if (kv.contains("env")) {
            const std::size_t keep_context = context;
            ModelConfig base = for_env(kv.get("env", env));
            env = base.env;
            state_dim = base.state_dim;
            action_dim = base.action_dim;
            discrete = base.discrete;
            action_bound = base.action_bound;
            rtg_scale = base.rtg_scale;
            context = keep_context;
        }
        state_dim = kv.get_size("state_dim", state_dim);
        action_dim = kv.get_size("action_dim", action_dim);
        discrete = kv.get_bool("discrete", discrete);
        action_bound = kv.get_double("action_bound", action_bound);
        rtg_scale = kv.get_double("rtg_scale", rtg_scale);
        embed_dim = kv.get_size("embedding_dim", embed_dim);
        heads = kv.get_size("num_heads", heads);
        layers = kv.get_size("num_layers", layers);
        window = kv.get_size("window", window);
        context = kv.get_size("context_length", context);
        router_hidden = kv.get_size("router_hidden", router_hidden);
        if (kv.contains("mode")) mode = parse_mode(kv.get("mode", ""));
        lif.tau_m = kv.get_double("tau_m", lif.tau_m);
        lif.v_rest = kv.get_double("v_rest", lif.v_rest);
        lif.v_th = kv.get_double("v_th", lif.v_th);
        lif.v_reset = kv.get_double("v_reset", lif.v_reset);
        lif.dt = kv.get_double("dt", lif.dt);
        lif.c_m = kv.get_double("c_m", lif.c_m);
        if (kv.contains("surrogate")) surrogate.kind = parse_surrogate_kind(kv.get("surrogate", ""));
        surrogate.slope = kv.get_double("surrogate_slope", surrogate.slope);
        seed = kv.get_size("seed", seed);
    }
};

struct ForwardOptions {
    bool sampled = false;             // Bernoulli input spikes instead of expected rates
    std::mt19937_64* rng = nullptr;   // required when sampled
    SpikeMeter* meter = nullptr;
};

struct ForwardResult {
    Var logits;                  // rows x d_a, action-head pre-activation
    Var decoded;                 // softmax (discrete) or tanh (continuous) of the logits
    Var head_input;              // rows x d, state-token features fed to the action head
    std::vector<Var> gates;      // per layer, 3*rows x H
    std::optional<Var> positional;  // H x T positional spikes (phase modes)
};

class DecisionTransformer {
public:
    explicit DecisionTransformer(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        init();
    }

    /// Wraps existing weights (checkpoint loading).
    DecisionTransformer(ModelConfig cfg, ParameterStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
        cfg_.validate();
        DecisionTransformer fresh(cfg_);
        for (const auto& p : fresh.params_.all()) {
            if (!params_.contains(p.name) || params_.get(p.name).shape() != p.value.shape()) {
                throw UsageError("checkpoint parameter '" + p.name + "' missing or mis-shaped");
            }
        }
        if (params_.all().size() != fresh.params_.all().size()) throw UsageError("checkpoint has unexpected parameters");
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    ParameterStore& params() noexcept { return params_; }
    const ParameterStore& params() const noexcept { return params_; }

    /// State standardization statistics (stored with the weights, never trained).
    void set_state_normalization(const std::vector<double>& mean, const std::vector<double>& stddev) {
        if (mean.size() != cfg_.state_dim || stddev.size() != cfg_.state_dim) {
            throw UsageError("state normalization width mismatch");
        }
        Tensor& m = params_.get("norm.state_mean");
        Tensor& s = params_.get("norm.state_std");
        for (std::size_t j = 0; j < cfg_.state_dim; ++j) {
            m[j] = mean[j];
            s[j] = stddev[j] > 1e-6 ? stddev[j] : 1.0;
        }
    }

    void fit_state_normalization(const Dataset& ds) {
        std::vector<double> mean(cfg_.state_dim, 0.0), sq(cfg_.state_dim, 0.0);
        std::size_t n = 0;
        for (const auto& c : ds.clips)
            for (std::size_t i = 0; i < c.length(); ++i) {
                if (c.pad[i]) continue;
                ++n;
                for (std::size_t j = 0; j < cfg_.state_dim; ++j) mean[j] += c.states(i, j);
            }
        if (n == 0) return;
        for (double& m : mean) m /= static_cast<double>(n);
        for (const auto& c : ds.clips)
            for (std::size_t i = 0; i < c.length(); ++i) {
                if (c.pad[i]) continue;
                for (std::size_t j = 0; j < cfg_.state_dim; ++j) {
                    const double d = c.states(i, j) - mean[j];
                    sq[j] += d * d;
                }
            }
        for (double& s : sq) s = std::sqrt(s / static_cast<double>(n));
        set_state_normalization(mean, sq);
    }

    PhaseBank phase_bank() const {
        PhaseBank bank;
        if (!params_.contains("pos.omega")) return bank;
        bank.omega = params_.get("pos.omega").vec();
        bank.phi = params_.get("pos.phi").vec();
        return bank;
    }

    /// Clamps omega and wraps phi after an optimizer step.
    void normalize_phase_bank() {
        if (!params_.contains("pos.omega")) return;
        PhaseBank bank = phase_bank();
        bank.normalize();
        params_.get("pos.omega") = Tensor::column(bank.omega);
        params_.get("pos.phi") = Tensor::column(bank.phi);
    }

    /// Forward pass over a clip of up to `context` steps. Row t of the result
    /// is read from the state token of step t.
    ForwardResult forward(const BoundParams& p, const Clip& clip, const ForwardOptions& opt = {}) const {
        const std::size_t n = clip.length();
        if (n == 0 || n > cfg_.context) throw UsageError("forward: clip length must be in [1, context]");
        if (clip.states.rows() != n || clip.states.cols() != cfg_.state_dim || clip.actions.rows() != n ||
            clip.pad.size() != n) {
            throw UsageError("forward: misaligned clip");
        }
        Var anchor = p("head.b_act");
        Tape& tape = detail::tape_of(anchor);

        Var e_rtg = add_row(matmul(tape.constant(rtg_input(clip)), p("embed.w_rtg")), p("embed.b_rtg"));
        Var e_state = add_row(matmul(tape.constant(state_input(clip)), p("embed.w_state")), p("embed.b_state"));
        Var e_action = add_row(matmul(tape.constant(action_input(clip)), p("embed.w_action")), p("embed.b_action"));
        if (!uses_phase(cfg_.mode)) {
            std::vector<std::size_t> rows(n);
            for (std::size_t t = 0; t < n; ++t) rows[t] = t;
            Var te = gather_rows(p("embed.timestep"), rows);
            e_rtg = add(e_rtg, te);
            e_state = add(e_state, te);
            e_action = add(e_action, te);
        }
        std::vector<std::size_t> order(3 * n);
        for (std::size_t t = 0; t < n; ++t) {
            order[3 * t] = t;
            order[3 * t + 1] = n + t;
            order[3 * t + 2] = 2 * n + t;
        }
        Var x = gather_rows(concat_rows({e_rtg, e_state, e_action}), order);
        x = affine_norm(x, p("embed.ln_gain"), p("embed.ln_bias"));

        ForwardResult out;
        if (uses_phase(cfg_.mode)) {
            out.positional = positional_spikes(p("pos.omega"), p("pos.phi"), cfg_.window, cfg_.surrogate);
        }
        SpikingOptions sopt{cfg_.lif, cfg_.surrogate, cfg_.window, opt.sampled, opt.rng, opt.meter};
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            AttentionWeights aw{p(pre + "attn.w_qkv"), std::nullopt, p(pre + "attn.w_out"), p(pre + "attn.b_out")};
            if (out.positional) aw.w_pos = p(pre + "attn.w_pos");
            AttendResult att = attend(aw, x, out.positional, cfg_.heads, sopt);
            RouteResult routed;
            if (uses_router(cfg_.mode)) {
                RouterWeights rw{p(pre + "router.w1"), p(pre + "router.b1"), p(pre + "router.w2"), p(pre + "router.b2")};
                routed = route(att.heads, &rw);
            } else {
                routed = route(att.heads, nullptr);
            }
            out.gates.push_back(routed.gates);
            Var attn_out = add_row(matmul(routed.output, aw.w_out), aw.b_out);
            x = affine_norm(add(x, attn_out), p(pre + "ln1_gain"), p(pre + "ln1_bias"));
            Var hidden = relu(add_row(matmul(x, p(pre + "ffn.w1")), p(pre + "ffn.b1")));
            Var ffn = add_row(matmul(hidden, p(pre + "ffn.w2")), p(pre + "ffn.b2"));
            x = affine_norm(add(x, ffn), p(pre + "ln2_gain"), p(pre + "ln2_bias"));
        }
        std::vector<std::size_t> state_rows(n);
        for (std::size_t t = 0; t < n; ++t) state_rows[t] = 3 * t + 1;
        out.head_input = gather_rows(x, state_rows);
        out.logits = add_row(matmul(out.head_input, transpose(p("head.w_act"))), p("head.b_act"));
        out.decoded = cfg_.discrete ? softmax_rows(out.logits) : tanh(out.logits);
        return out;
    }

    /// Training objective: cross-entropy (discrete) or squared error on the
    /// tanh output (continuous), averaged over unpadded steps.
    Var loss(const ForwardResult& f, const Clip& clip) const {
        const std::vector<double> w = step_weights(clip);
        if (cfg_.discrete) return cross_entropy_logits(f.logits, action_indices(clip), w);
        return mse(f.decoded, action_targets(clip), w);
    }

    /// Mean squared distance between decoded prediction and target action
    /// (one-hot for discrete tasks), averaged over unpadded steps.
    Var validation_loss(const ForwardResult& f, const Clip& clip) const {
        return mse(f.decoded, action_targets(clip), step_weights(clip));
    }

    /// Target in decoded space: one-hot (discrete) or action / bound (continuous).
    Tensor action_targets(const Clip& clip) const {
        const std::size_t n = clip.length();
        Tensor out = Tensor::matrix(n, cfg_.action_dim);
        for (std::size_t t = 0; t < n; ++t) {
            if (clip.pad[t]) continue;
            if (cfg_.discrete) {
                out(t, action_index(clip, t)) = 1.0;
            } else {
                for (std::size_t j = 0; j < cfg_.action_dim; ++j) out(t, j) = clip.actions(t, j) / cfg_.action_bound;
            }
        }
        return out;
    }

    /// Environment action from a decoded output row.
    Action decode_action(const Tensor& decoded, std::size_t row) const {
        if (cfg_.discrete) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < cfg_.action_dim; ++j)
                if (decoded(row, j) > decoded(row, best)) best = j;
            return Action{static_cast<double>(best)};
        }
        Action a(cfg_.action_dim);
        for (std::size_t j = 0; j < cfg_.action_dim; ++j) a[j] = decoded(row, j) * cfg_.action_bound;
        return a;
    }

private:
    void init() {
        std::mt19937_64 rng(cfg_.seed);
        const std::size_t d = cfg_.embed_dim, h = cfg_.heads, dh = cfg_.head_dim();
        auto weight = [&](const std::string& name, std::size_t rows, std::size_t cols) {
            params_.add(name, randn({rows, cols}, 1.0 / std::sqrt(static_cast<double>(rows)), rng));
        };
        auto bias = [&](const std::string& name, std::size_t cols, double fill = 0.0) {
            params_.add(name, Tensor::matrix(1, cols, fill), false);
        };
        weight("embed.w_rtg", 1, d);
        bias("embed.b_rtg", d);
        weight("embed.w_state", cfg_.state_dim, d);
        bias("embed.b_state", d);
        weight("embed.w_action", cfg_.action_dim, d);
        bias("embed.b_action", d);
        if (!uses_phase(cfg_.mode)) params_.add("embed.timestep", randn({cfg_.context, d}, 0.02, rng));
        bias("embed.ln_gain", d, 1.0);
        bias("embed.ln_bias", d);
        if (uses_phase(cfg_.mode)) {
            PhaseBank bank = init_phase_bank(h, rng());
            params_.add("pos.omega", Tensor::column(bank.omega), false);
            params_.add("pos.phi", Tensor::column(bank.phi), false);
        }
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            weight(pre + "attn.w_qkv", d, 3 * d);
            if (uses_phase(cfg_.mode)) weight(pre + "attn.w_pos", h, 3 * d);
            weight(pre + "attn.w_out", dh, d);
            bias(pre + "attn.b_out", d);
            if (uses_router(cfg_.mode)) {
                weight(pre + "router.w1", h * dh, cfg_.router_hidden);
                bias(pre + "router.b1", cfg_.router_hidden);
                params_.add(pre + "router.w2", Tensor::matrix(cfg_.router_hidden, h));
                bias(pre + "router.b2", h);
            }
            bias(pre + "ln1_gain", d, 1.0);
            bias(pre + "ln1_bias", d);
            weight(pre + "ffn.w1", d, 4 * d);
            bias(pre + "ffn.b1", 4 * d);
            weight(pre + "ffn.w2", 4 * d, d);
            bias(pre + "ffn.b2", d);
            bias(pre + "ln2_gain", d, 1.0);
            bias(pre + "ln2_bias", d);
        }
        params_.add("head.w_act", randn({cfg_.action_dim, d}, 0.02, rng));
        bias("head.b_act", cfg_.action_dim);
        params_.add("norm.state_mean", Tensor::matrix(1, cfg_.state_dim, 0.0), false, false);
        params_.add("norm.state_std", Tensor::matrix(1, cfg_.state_dim, 1.0), false, false);
    }

    static Var affine_norm(Var x, Var gain, Var bias) { return add_row(mul_row(layer_norm(x), gain), bias); }

    Tensor rtg_input(const Clip& clip) const {
        Tensor out = Tensor::matrix(clip.length(), 1);
        for (std::size_t t = 0; t < clip.length(); ++t) out(t, 0) = clip.pad[t] ? 0.0 : clip.rtg[t] / cfg_.rtg_scale;
        return out;
    }

    Tensor state_input(const Clip& clip) const {
        const Tensor& mean = params_.get("norm.state_mean");
        const Tensor& sd = params_.get("norm.state_std");
        Tensor out = Tensor::matrix(clip.length(), cfg_.state_dim);
        for (std::size_t t = 0; t < clip.length(); ++t) {
            if (clip.pad[t]) continue;
            for (std::size_t j = 0; j < cfg_.state_dim; ++j) out(t, j) = (clip.states(t, j) - mean[j]) / sd[j];
        }
        return out;
    }

    Tensor action_input(const Clip& clip) const { return action_targets(clip); }

    std::size_t action_index(const Clip& clip, std::size_t t) const {
        const double a = clip.actions(t, 0);
        if (!(a >= 0.0) || a != std::floor(a) || a >= static_cast<double>(cfg_.action_dim)) {
            throw UsageError("clip holds an invalid discrete action");
        }
        return static_cast<std::size_t>(a);
    }

    std::vector<std::size_t> action_indices(const Clip& clip) const {
        std::vector<std::size_t> out(clip.length(), 0);
        for (std::size_t t = 0; t < clip.length(); ++t)
            if (!clip.pad[t]) out[t] = action_index(clip, t);
        return out;
    }

    static std::vector<double> step_weights(const Clip& clip) {
        std::vector<double> w(clip.length());
        for (std::size_t t = 0; t < clip.length(); ++t) w[t] = clip.pad[t] ? 0.0 : 1.0;
        return w;
    }

    ModelConfig cfg_;
    ParameterStore params_;
};

/// Forward pass on a fresh tape with detached weights.
inline Tensor predict(const DecisionTransformer& model, const Clip& clip, const ForwardOptions& opt = {}) {
    Tape tape;
    BoundParams p(tape, model.params(), false);
    return tape.value(model.forward(p, clip, opt).decoded);
}

/// Online context for greedy rollouts. Steps are grouped into consecutive
/// windows of `context` steps aligned to the episode start, so step k sits at
/// window position k mod context as it does in the training clips.
class RolloutContext {
public:
    RolloutContext(const ModelConfig& cfg, double target_return) : cfg_(cfg), rtg_(target_return) {}

    double return_to_go() const noexcept { return rtg_; }

    /// Clip ending at the current (not yet acted) state.
    Clip clip_for(const State& s) {
        if (pos_ == cfg_.context) {
            pos_ = 0;
            states_.clear();
            actions_.clear();
            rtgs_.clear();
        }
        const std::size_t n = pos_ + 1;
        Clip c{Tensor::matrix(n, cfg_.state_dim), Tensor::matrix(n, cfg_.discrete ? 1 : cfg_.action_dim),
               std::vector<double>(n), std::vector<double>(n), std::vector<std::uint8_t>(n, 0)};
        for (std::size_t t = 0; t < n; ++t) {
            const State& st = t < pos_ ? states_[t] : s;
            for (std::size_t j = 0; j < cfg_.state_dim; ++j) c.states(t, j) = st[j];
            if (t < pos_)
                for (std::size_t j = 0; j < actions_[t].size(); ++j) c.actions(t, j) = actions_[t][j];
            c.rtg[t] = t < pos_ ? rtgs_[t] : rtg_;
            c.timesteps[t] = static_cast<double>(step_ - pos_ + t);
        }
        return c;
    }

    void record(const State& s, const Action& a, double reward) {
        states_.push_back(s);
        actions_.push_back(a);
        rtgs_.push_back(rtg_);
        rtg_ -= reward;
        ++pos_;
        ++step_;
    }

private:
    ModelConfig cfg_;
    double rtg_;
    std::size_t pos_ = 0;
    std::size_t step_ = 0;
    std::vector<State> states_;
    std::vector<Action> actions_;
    std::vector<double> rtgs_;
};

/// Greedy action for the current state: argmax (lowest index on ties) or the
/// scaled tanh output.
inline Action act_greedy(const DecisionTransformer& model, RolloutContext& ctx, const State& s) {
    Clip c = ctx.clip_for(s);
    Tensor decoded = predict(model, c);
    return model.decode_action(decoded, c.length() - 1);
}

/// One greedy episode conditioned on `target`; returns the visited
/// states, chosen actions and rewards.
inline Trajectory greedy_episode(const DecisionTransformer& model, Environment& env, std::uint64_t seed,
                                 double target) {
    Trajectory tr;
    RolloutContext ctx(model.config(), target);
    State s = env.reset(seed);
    while (!env.done()) {
        Action a = act_greedy(model, ctx, s);
        Transition t = env.step(a);
        ctx.record(s, a, t.reward);
        tr.states.push_back(std::move(s));
        tr.actions.push_back(std::move(a));
        tr.rewards.push_back(t.reward);
        tr.terminated = t.terminated;
        s = std::move(t.next_state);
    }
    return tr;
}

/// Per-environment return-to-go used to condition online rollouts.
inline double target_return(const std::string& env) {
    const std::string name = make_env(env)->spec().name;
    if (name == "CartPole") return 500.0;
    if (name == "MountainCar") return -100.0;
    if (name == "Acrobot") return -70.0;
    return -130.0;
}

inline constexpr char kCheckpointMagic[8] = {'S', 'N', 'D', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string serialize(const DecisionTransformer& model) {
    std::ostringstream os(std::ios::binary);
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    os.put(static_cast<char>(kCheckpointVersion));
    const std::string cfg = model.config().to_kv().to_text();
    io::put_u64(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    const auto& all = model.params().all();
    io::put_u64(os, all.size());
    for (const auto& p : all) {
        io::put_u64(os, p.name.size());
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        os.put(static_cast<char>((p.decay ? 1 : 0) | (p.trainable ? 2 : 0)));
        io::put_u64(os, p.value.shape().size());
        for (auto dim : p.value.shape()) io::put_u64(os, dim);
        io::put_f64s(os, p.value.data());
    }
    return std::move(os).str();
}

inline DecisionTransformer deserialize_model(std::string_view bytes) {
    try {
        io::Reader r(bytes);
        char magic[sizeof kCheckpointMagic];
        r.raw(magic, sizeof magic);
        if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw CheckpointError("not a checkpoint file");
        const auto version = r.u8();
        if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
        auto read_string = [&r]() {
            const auto len = r.u64();
            if (len > r.remaining()) throw DatasetCorruptError("truncated file");
            std::string s(len, '\0');
            r.raw(s.data(), len);
            return s;
        };
        ModelConfig cfg;
        cfg.apply(KeyValues::parse(read_string()));
        ParameterStore store;
        const auto count = r.u64();
        for (std::uint64_t k = 0; k < count; ++k) {
            std::string name = read_string();
            const auto flags = r.u8();
            const auto rank = r.u64();
            if (rank == 0 || rank > 8) throw CheckpointError("bad tensor rank in checkpoint");
            Shape shape(rank);
            for (auto& dim : shape) dim = r.u64();
            Tensor t(shape);
            if (t.size() * 8 > r.remaining()) throw DatasetCorruptError("truncated file");
            r.f64s(t.data());
            store.add(std::move(name), std::move(t), (flags & 1) != 0, (flags & 2) != 0);
        }
        if (r.remaining() != 0) throw CheckpointError("trailing bytes in checkpoint");
        return DecisionTransformer(std::move(cfg), std::move(store));
    } catch (const DatasetCorruptError&) {
        throw CheckpointError("truncated checkpoint");
    }
}

inline void save_checkpoint(const DecisionTransformer& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    const std::string bytes = serialize(model);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write to '" + path + "' failed");
}

inline DecisionTransformer load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_model(bytes);
}

}  // namespace snndt
