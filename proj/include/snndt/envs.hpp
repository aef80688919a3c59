#pragma once

// Classic-control tasks (cart-pole, mountain car, acrobot, pendulum) with the
// canonical physics constants, plus scripted expert and uniform random policies.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "snndt/tensor.hpp"

namespace snndt {

using State = std::vector<double>;
using Action = std::vector<double>;

enum class ActionKind : std::uint8_t { kDiscrete, kContinuous };

struct EnvSpec {
    std::string name;
    std::size_t state_dim = 0;
    ActionKind action_kind = ActionKind::kDiscrete;
    std::size_t action_dim = 1;  // discrete: number of actions; continuous: vector width
    double action_bound = 1.0;   // continuous actions live in [-bound, bound]
    std::size_t max_steps = 0;
    double reward_min = 0.0;
    double reward_max = 0.0;
    std::vector<double> obs_low;
    std::vector<double> obs_high;

    bool discrete() const noexcept { return action_kind == ActionKind::kDiscrete; }
    /// Width of the action vector fed to the model (one-hot for discrete).
    std::size_t action_width() const noexcept { return action_dim; }
};

struct Transition {
    State state;
    Action action;
    double reward = 0.0;
    State next_state;
    bool done = false;
    bool terminated = false;  // reached a terminal state (not just the step limit)
};

class EpisodeDone : public std::logic_error {
public:
    EpisodeDone() : std::logic_error("step called on a finished episode; call reset first") {}
};

class Environment {
public:
    virtual ~Environment() = default;

    virtual const EnvSpec& spec() const = 0;

    State reset(std::uint64_t seed) {
        rng_.seed(seed);
        elapsed_ = 0;
        done_ = false;
        started_ = true;
        randomize(rng_);
        return observe();
    }

    Transition step(const Action& action) {
        if (!started_) throw UsageError(spec().name + ": step before reset");
        if (done_) throw EpisodeDone();
        check_action(action);
        Transition tr;
        tr.state = observe();
        tr.action = action;
        const auto [reward, terminal] = advance(action);
        ++elapsed_;
        tr.reward = reward;
        tr.next_state = observe();
        tr.terminated = terminal;
        done_ = terminal || elapsed_ >= spec().max_steps;
        tr.done = done_;
        return tr;
    }

    bool done() const noexcept { return done_; }
    std::size_t elapsed() const noexcept { return elapsed_; }

    /// Overwrites the physical state (test hook); clears the done flag.
    virtual void set_state(const std::vector<double>& s) = 0;
    virtual State observe() const = 0;

protected:
    virtual void randomize(std::mt19937_64& rng) = 0;
    virtual std::pair<double, bool> advance(const Action& action) = 0;

    void mark_running() {
        started_ = true;
        done_ = false;
    }

private:
    void check_action(const Action& a) const {
        const EnvSpec& s = spec();
        if (s.discrete()) {
            if (a.size() != 1) throw UsageError(s.name + ": discrete action must have one element");
            const double v = a[0];
            if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(s.action_dim)) {
                throw UsageError(s.name + ": invalid discrete action");
            }
        } else {
            if (a.size() != s.action_dim) throw UsageError(s.name + ": wrong action width");
            for (double v : a)
                if (!std::isfinite(v)) throw UsageError(s.name + ": non-finite action");
        }
    }

    std::mt19937_64 rng_;
    std::size_t elapsed_ = 0;
    bool done_ = false;
    bool started_ = false;
};

namespace detail {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double wrap_angle(double x) {
    constexpr double pi = std::numbers::pi;
    double y = std::fmod(x + pi, 2.0 * pi);
    if (y < 0.0) y += 2.0 * pi;
    return y - pi;
}

}  // namespace detail

class CartPole final : public Environment {
public:
    static constexpr double kGravity = 9.8;
    static constexpr double kCartMass = 1.0;
    static constexpr double kPoleMass = 0.1;
    static constexpr double kHalfLength = 0.5;
    static constexpr double kForce = 10.0;
    static constexpr double kTau = 0.02;
    static constexpr double kXLimit = 2.4;
    static constexpr double kThetaLimit = 12.0 * 2.0 * std::numbers::pi / 360.0;

    const EnvSpec& spec() const override {
        static const EnvSpec s{"CartPole", 4, ActionKind::kDiscrete, 2, 1.0, 500, 1.0, 1.0,
                               {-4.8, -1e300, -2 * kThetaLimit, -1e300}, {4.8, 1e300, 2 * kThetaLimit, 1e300}};
        return s;
    }
    void set_state(const std::vector<double>& s) override {
        if (s.size() != 4) throw UsageError("CartPole: state has 4 components");
        s_ = {s[0], s[1], s[2], s[3]};
        mark_running();
    }
    State observe() const override { return {s_[0], s_[1], s_[2], s_[3]}; }

protected:
    void randomize(std::mt19937_64& rng) override {
        for (double& x : s_) x = detail::uniform(rng, -0.05, 0.05);
    }
    std::pair<double, bool> advance(const Action& a) override {
        const double total = kCartMass + kPoleMass;
        const double pml = kPoleMass * kHalfLength;
        auto& [x, xd, th, thd] = s_;
        const double force = a[0] == 1.0 ? kForce : -kForce;
        const double c = std::cos(th), sn = std::sin(th);
        const double temp = (force + pml * thd * thd * sn) / total;
        const double thacc = (kGravity * sn - c * temp) / (kHalfLength * (4.0 / 3.0 - kPoleMass * c * c / total));
        const double xacc = temp - pml * thacc * c / total;
        x += kTau * xd;
        xd += kTau * xacc;
        th += kTau * thd;
        thd += kTau * thacc;
        const bool fail = x < -kXLimit || x > kXLimit || th < -kThetaLimit || th > kThetaLimit;
        return {1.0, fail};
    }

private:
    std::array<double, 4> s_{};
};

class MountainCar final : public Environment {
public:
    static constexpr double kMinPos = -1.2;
    static constexpr double kMaxPos = 0.6;
    static constexpr double kMaxSpeed = 0.07;
    static constexpr double kGoal = 0.5;
    static constexpr double kForce = 0.001;
    static constexpr double kGravity = 0.0025;

    const EnvSpec& spec() const override {
        static const EnvSpec s{"MountainCar", 2, ActionKind::kDiscrete, 3, 1.0, 200, -1.0, -1.0,
                               {kMinPos, -kMaxSpeed}, {kMaxPos, kMaxSpeed}};
        return s;
    }
    void set_state(const std::vector<double>& s) override {
        if (s.size() != 2) throw UsageError("MountainCar: state has 2 components");
        pos_ = s[0];
        vel_ = s[1];
        mark_running();
    }
    State observe() const override { return {pos_, vel_}; }

protected:
    void randomize(std::mt19937_64& rng) override {
        pos_ = detail::uniform(rng, -0.6, -0.4);
        vel_ = 0.0;
    }
    std::pair<double, bool> advance(const Action& a) override {
        vel_ += (a[0] - 1.0) * kForce - std::cos(3.0 * pos_) * kGravity;
        vel_ = std::clamp(vel_, -kMaxSpeed, kMaxSpeed);
        pos_ = std::clamp(pos_ + vel_, kMinPos, kMaxPos);
        if (pos_ == kMinPos && vel_ < 0.0) vel_ = 0.0;
        return {-1.0, pos_ >= kGoal && vel_ >= 0.0};
    }

private:
    double pos_ = 0.0;
    double vel_ = 0.0;
};

class Acrobot final : public Environment {
public:
    static constexpr double kDt = 0.2;
    static constexpr double kLength1 = 1.0;
    static constexpr double kMass1 = 1.0;
    static constexpr double kMass2 = 1.0;
    static constexpr double kCom1 = 0.5;
    static constexpr double kCom2 = 0.5;
    static constexpr double kInertia = 1.0;
    static constexpr double kGravity = 9.8;
    static constexpr double kMaxVel1 = 4.0 * std::numbers::pi;
    static constexpr double kMaxVel2 = 9.0 * std::numbers::pi;

    const EnvSpec& spec() const override {
        static const EnvSpec s{"Acrobot", 6, ActionKind::kDiscrete, 3, 1.0, 500, -1.0, 0.0,
                               {-1, -1, -1, -1, -kMaxVel1, -kMaxVel2}, {1, 1, 1, 1, kMaxVel1, kMaxVel2}};
        return s;
    }
    /// Raw joint state: theta1, theta2, dtheta1, dtheta2.
    void set_state(const std::vector<double>& s) override {
        if (s.size() != 4) throw UsageError("Acrobot: state has 4 joint components");
        s_ = {s[0], s[1], s[2], s[3]};
        mark_running();
    }
    State observe() const override {
        return {std::cos(s_[0]), std::sin(s_[0]), std::cos(s_[1]), std::sin(s_[1]), s_[2], s_[3]};
    }

protected:
    void randomize(std::mt19937_64& rng) override {
        for (double& x : s_) x = detail::uniform(rng, -0.1, 0.1);
    }
    std::pair<double, bool> advance(const Action& a) override {
        const double torque = a[0] - 1.0;
        using V = std::array<double, 4>;
        auto shifted = [](const V& s, const V& k, double h) {
            return V{s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2], s[3] + h * k[3]};
        };
        const V k1 = derivs(s_, torque);
        const V k2 = derivs(shifted(s_, k1, kDt / 2), torque);
        const V k3 = derivs(shifted(s_, k2, kDt / 2), torque);
        const V k4 = derivs(shifted(s_, k3, kDt), torque);
        for (std::size_t i = 0; i < 4; ++i) s_[i] += kDt / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
        s_[0] = detail::wrap_angle(s_[0]);
        s_[1] = detail::wrap_angle(s_[1]);
        s_[2] = std::clamp(s_[2], -kMaxVel1, kMaxVel1);
        s_[3] = std::clamp(s_[3], -kMaxVel2, kMaxVel2);
        const bool goal = -std::cos(s_[0]) - std::cos(s_[1] + s_[0]) > 1.0;
        return {goal ? 0.0 : -1.0, goal};
    }

private:
    static std::array<double, 4> derivs(const std::array<double, 4>& s, double a) {
        constexpr double pi = std::numbers::pi;
        const double m1 = kMass1, m2 = kMass2, l1 = kLength1, lc1 = kCom1, lc2 = kCom2, i1 = kInertia, i2 = kInertia;
        const double g = kGravity;
        const auto [t1, t2, w1, w2] = s;
        const double d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2 * l1 * lc2 * std::cos(t2)) + i1 + i2;
        const double d2 = m2 * (lc2 * lc2 + l1 * lc2 * std::cos(t2)) + i2;
        const double phi2 = m2 * lc2 * g * std::cos(t1 + t2 - pi / 2);
        const double phi1 = -m2 * l1 * lc2 * w2 * w2 * std::sin(t2) - 2 * m2 * l1 * lc2 * w2 * w1 * std::sin(t2) +
                            (m1 * lc1 + m2 * l1) * g * std::cos(t1 - pi / 2) + phi2;
        const double dd2 = (a + d2 / d1 * phi1 - m2 * l1 * lc2 * w1 * w1 * std::sin(t2) - phi2) /
                           (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
        const double dd1 = -(d2 * dd2 + phi1) / d1;
        return {w1, w2, dd1, dd2};
    }

    std::array<double, 4> s_{};
};

class Pendulum final : public Environment {
public:
    static constexpr double kMaxSpeed = 8.0;
    static constexpr double kMaxTorque = 2.0;
    static constexpr double kDt = 0.05;
    static constexpr double kGravity = 10.0;
    static constexpr double kMass = 1.0;
    static constexpr double kLength = 1.0;

    const EnvSpec& spec() const override {
        constexpr double worst = std::numbers::pi * std::numbers::pi + 0.1 * kMaxSpeed * kMaxSpeed +
                                 0.001 * kMaxTorque * kMaxTorque;
        static const EnvSpec s{"Pendulum", 3, ActionKind::kContinuous, 1, kMaxTorque, 200, -worst, 0.0,
                               {-1, -1, -kMaxSpeed}, {1, 1, kMaxSpeed}};
        return s;
    }
    /// Raw state: theta (0 = upright), dtheta.
    void set_state(const std::vector<double>& s) override {
        if (s.size() != 2) throw UsageError("Pendulum: state has 2 components");
        th_ = s[0];
        thd_ = s[1];
        mark_running();
    }
    State observe() const override { return {std::cos(th_), std::sin(th_), thd_}; }

protected:
    void randomize(std::mt19937_64& rng) override {
        th_ = detail::uniform(rng, -std::numbers::pi, std::numbers::pi);
        thd_ = detail::uniform(rng, -1.0, 1.0);
    }
    std::pair<double, bool> advance(const Action& a) override {
        const double u = std::clamp(a[0], -kMaxTorque, kMaxTorque);
        const double ang = detail::wrap_angle(th_);
        const double cost = ang * ang + 0.1 * thd_ * thd_ + 0.001 * u * u;
        double thd = thd_ + (3.0 * kGravity / (2.0 * kLength) * std::sin(th_) + 3.0 / (kMass * kLength * kLength) * u) * kDt;
        thd = std::clamp(thd, -kMaxSpeed, kMaxSpeed);
        th_ += thd * kDt;
        thd_ = thd;
        return {-cost, false};
    }

private:
    double th_ = 0.0;
    double thd_ = 0.0;
};

inline const std::vector<std::string>& env_names() {
    static const std::vector<std::string> names{"CartPole", "MountainCar", "Acrobot", "Pendulum"};
    return names;
}

/// Accepts the bare names above and the versioned ids (e.g. "CartPole-v1").
inline std::unique_ptr<Environment> make_env(const std::string& name) {
    const std::string base = name.substr(0, name.find("-v"));
    if (base == "CartPole") return std::make_unique<CartPole>();
    if (base == "MountainCar") return std::make_unique<MountainCar>();
    if (base == "Acrobot") return std::make_unique<Acrobot>();
    if (base == "Pendulum") return std::make_unique<Pendulum>();
    throw UsageError("unknown environment '" + name + "'");
}

using Policy = std::function<Action(const State&, std::mt19937_64&)>;

inline Policy random_policy(const EnvSpec& spec) {
    if (spec.discrete()) {
        const std::size_t n = spec.action_dim;
        return [n](const State&, std::mt19937_64& rng) {
            std::uniform_int_distribution<std::size_t> pick(0, n - 1);
            return Action{static_cast<double>(pick(rng))};
        };
    }
    const double bound = spec.action_bound;
    const std::size_t dim = spec.action_dim;
    return [bound, dim](const State&, std::mt19937_64& rng) {
        Action a(dim);
        for (double& x : a) x = detail::uniform(rng, -bound, bound);
        return a;
    };
}

inline Policy expert_policy(const std::string& env_name) {
    const std::string base = make_env(env_name)->spec().name;
    if (base == "CartPole") {
        return [](const State& s, std::mt19937_64&) { return Action{s[2] + 0.5 * s[3] > 0.0 ? 1.0 : 0.0}; };
    }
    if (base == "MountainCar") {
        return [](const State& s, std::mt19937_64&) { return Action{s[1] >= 0.0 ? 2.0 : 0.0}; };
    }
    if (base == "Acrobot") {
        // Torque against the first link's swing pumps energy into the chain.
        return [](const State& s, std::mt19937_64&) { return Action{s[4] > 0.0 ? 0.0 : 2.0}; };
    }
    // Pendulum: bang-bang energy shaping far from upright, PD capture near it.
    return [](const State& s, std::mt19937_64&) {
        const double th = std::atan2(s[1], s[0]);
        const double thd = s[2];
        if (s[0] > 0.85) return Action{std::clamp(-(10.0 * th + 2.0 * thd), -2.0, 2.0)};
        const double energy = 0.5 * thd * thd + 15.0 * (std::cos(th) - 1.0);
        return Action{thd * -energy > 0.0 ? 2.0 : -2.0};
    };
}

}  // namespace snndt
