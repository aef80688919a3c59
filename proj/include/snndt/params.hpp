#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "snndt/tape.hpp"
#include "snndt/tensor.hpp"

namespace snndt {

struct Parameter {
    std::string name;
    Tensor value;
    bool decay = true;      // subject to decoupled weight decay
    bool trainable = true;  // false for fixed statistics stored alongside weights
};

/// Named parameter tensors in insertion order. Names are stable and used as
/// checkpoint keys.
class ParameterStore {
public:
    Tensor& add(std::string name, Tensor value, bool decay = true, bool trainable = true) {
        if (index_.contains(name)) throw UsageError("duplicate parameter '" + name + "'");
        index_[name] = params_.size();
        params_.push_back(Parameter{std::move(name), std::move(value), decay, trainable});
        return params_.back().value;
    }

    bool contains(const std::string& name) const { return index_.contains(name); }

    Tensor& get(const std::string& name) { return params_.at(lookup(name)).value; }
    const Tensor& get(const std::string& name) const { return params_.at(lookup(name)).value; }
    Parameter& entry(const std::string& name) { return params_.at(lookup(name)); }

    std::vector<Parameter>& all() noexcept { return params_; }
    const std::vector<Parameter>& all() const noexcept { return params_; }

    /// Number of trainable scalars.
    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& p : params_)
            if (p.trainable) n += p.value.size();
        return n;
    }

    friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
        if (a.params_.size() != b.params_.size()) return false;
        for (std::size_t i = 0; i < a.params_.size(); ++i) {
            const auto& x = a.params_[i];
            const auto& y = b.params_[i];
            if (x.name != y.name || !(x.value == y.value) || x.decay != y.decay || x.trainable != y.trainable) {
                return false;
            }
        }
        return true;
    }

private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("unknown parameter '" + name + "'");
        return it->second;
    }

    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

/// Parameters placed on a tape for one forward pass.
class BoundParams {
public:
    BoundParams(Tape& tape, const ParameterStore& store, bool trainable) {
        for (const auto& p : store.all()) {
            const bool grad = trainable && p.trainable;
            vars_.emplace(p.name, grad ? tape.parameter(p.value) : tape.constant(p.value));
        }
    }

    Var operator()(const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end()) throw UsageError("parameter '" + name + "' not bound");
        return it->second;
    }
    bool contains(const std::string& name) const { return vars_.contains(name); }

    /// Gradients by parameter name (trainable entries only).
    std::map<std::string, Tensor> gradients(const GradientMap& grads, const ParameterStore& store) const {
        std::map<std::string, Tensor> out;
        for (const auto& p : store.all()) {
            if (!p.trainable) continue;
            out.emplace(p.name, grads[vars_.at(p.name)]);
        }
        return out;
    }

private:
    std::map<std::string, Var> vars_;
};

inline Tensor randn(Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.vec()) v = dist(rng);
    return t;
}

struct AdamWConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 1e-2;
    double clip_norm = 0.5;  // global gradient-norm clip; <= 0 disables
};

/// AdamW with decoupled weight decay.
class AdamW {
public:
    AdamW(const ParameterStore& store, AdamWConfig config) : config_(config) {
        for (const auto& p : store.all()) {
            if (!p.trainable) continue;
            m_.emplace(p.name, Tensor(p.value.shape()));
            v_.emplace(p.name, Tensor(p.value.shape()));
        }
    }

    const AdamWConfig& config() const noexcept { return config_; }
    std::size_t steps() const noexcept { return step_; }

    /// Returns the pre-clip global gradient norm.
    double step(ParameterStore& store, std::map<std::string, Tensor> grads) {
        double sq = 0.0;
        for (const auto& [name, g] : grads)
            for (double x : g.data()) sq += x * x;
        const double norm = std::sqrt(sq);
        const double clip = (config_.clip_norm > 0.0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;

        ++step_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
        for (auto& p : store.all()) {
            if (!p.trainable) continue;
            auto git = grads.find(p.name);
            if (git == grads.end()) continue;
            Tensor& m = m_.at(p.name);
            Tensor& v = v_.at(p.name);
            const Tensor& g = git->second;
            auto w = p.value.data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g[i] * clip;
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                if (p.decay) w[i] -= config_.learning_rate * config_.weight_decay * w[i];
                w[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
            }
        }
        return norm;
    }

private:
    AdamWConfig config_;
    std::map<std::string, Tensor> m_;
    std::map<std::string, Tensor> v_;
    std::size_t step_ = 0;
};

}  // namespace snndt
