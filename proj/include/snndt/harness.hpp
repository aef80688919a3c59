#pragma once

// Offline training with AdamW, spike and energy metering, greedy evaluation,
// the four-mode ablation runner and window/context sweeps.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "snndt/config.hpp"
#include "snndt/dataset.hpp"
#include "snndt/envs.hpp"
#include "snndt/model.hpp"
#include "snndt/params.hpp"
#include "snndt/plasticity.hpp"
#include "snndt/positional.hpp"

namespace snndt {

inline constexpr double kSpikeEnergyPicojoules = 5.0;

struct TrainConfig {
    double learning_rate = 1e-4;
    double weight_decay = 1e-2;
    std::size_t batch_size = 16;
    std::size_t epochs = 100;
    std::size_t validation_interval = 5;
    std::uint64_t seed = 0;
    bool plasticity = false;
    PlasticityConfig plasticity_config;
    double grad_clip = 0.5;
    double validation_fraction = 0.1;
    std::size_t eval_episodes = 50;
    double gamma = 0.99;  // accepted for completeness; returns-to-go are undiscounted

    void validate() const {
        if (!(learning_rate > 0.0) || !(weight_decay >= 0.0)) throw UsageError("train: bad learning rate or decay");
        if (batch_size == 0 || validation_interval == 0) throw UsageError("train: batch and interval must be >= 1");
        if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
            throw UsageError("train: validation fraction must lie in (0, 1)");
        }
    }
};

struct RunConfig {
    std::string preset = "table6";
    ModelConfig model;
    TrainConfig train;

    /// Named presets: "table6" (default), "table1", "eval-protocol" and
    /// "desk", a reduced model for single-core runs.
    static RunConfig make(const std::string& preset, const std::string& env = "CartPole") {
        RunConfig rc;
        rc.preset = preset;
        rc.model = ModelConfig::for_env(env);
        if (preset == "table6") {
        } else if (preset == "table1") {
            rc.train.learning_rate = 3e-4;
            rc.train.batch_size = 64;
            rc.train.epochs = 50;
        } else if (preset == "eval-protocol") {
            rc.train.batch_size = 16;
            rc.model.context = 50;
        } else if (preset == "desk") {
            rc.model.embed_dim = 32;
            rc.model.heads = 4;
            rc.model.layers = 2;
            rc.model.window = 10;
            rc.model.router_hidden = 16;
            rc.train.learning_rate = 1e-3;
            rc.train.batch_size = 16;
            rc.train.epochs = 30;
            rc.train.validation_interval = 1;
        } else {
            throw UsageError("unknown preset '" + preset + "' (expected table6, table1, eval-protocol or desk)");
        }
        return rc;
    }

    /// Preset first (key "preset"), then individual overrides.
    static RunConfig from_kv(const KeyValues& kv, const std::string& env_fallback = "CartPole") {
        RunConfig rc = make(kv.get("preset", "table6"), kv.get("env", env_fallback));
        rc.apply(kv);
        return rc;
    }

    void apply(const KeyValues& kv) {
        model.apply(kv);
        TrainConfig& t = train;
        t.learning_rate = kv.get_double("learning_rate", t.learning_rate);
        t.weight_decay = kv.get_double("weight_decay", t.weight_decay);
        t.batch_size = kv.get_size("batch_size", t.batch_size);
        t.epochs = kv.get_size("epochs", t.epochs);
        t.validation_interval = kv.get_size("validation_interval", t.validation_interval);
        t.seed = kv.get_size("seed", t.seed);
        t.plasticity = kv.get_bool("plasticity", t.plasticity);
        t.plasticity_config.eta_local = kv.get_double("eta_local", t.plasticity_config.eta_local);
        t.plasticity_config.lambda = kv.get_double("trace_decay", t.plasticity_config.lambda);
        t.grad_clip = kv.get_double("grad_clip", t.grad_clip);
        t.validation_fraction = kv.get_double("validation_fraction", t.validation_fraction);
        t.eval_episodes = kv.get_size("episodes", t.eval_episodes);
        t.gamma = kv.get_double("gamma", t.gamma);
        model.seed = t.seed;
    }

    KeyValues to_kv() const {
        KeyValues kv = model.to_kv();
        kv.set("preset", preset);
        kv.set_number("learning_rate", train.learning_rate);
        kv.set_number("weight_decay", train.weight_decay);
        kv.set_number("batch_size", train.batch_size);
        kv.set_number("epochs", train.epochs);
        kv.set_number("validation_interval", train.validation_interval);
        kv.set_number("seed", train.seed);
        kv.set("plasticity", train.plasticity ? "true" : "false");
        kv.set_number("eta_local", train.plasticity_config.eta_local);
        kv.set_number("trace_decay", train.plasticity_config.lambda);
        kv.set_number("grad_clip", train.grad_clip);
        kv.set_number("validation_fraction", train.validation_fraction);
        kv.set_number("episodes", train.eval_episodes);
        kv.set_number("gamma", train.gamma);
        return kv;
    }
};

class TrainingDiverged : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = std::numeric_limits<double>::quiet_NaN();  // NaN at epoch 0
    double val_loss = std::numeric_limits<double>::quiet_NaN();    // NaN when not validated
};

struct TrainResult {
    DecisionTransformer model;
    std::vector<EpochMetrics> history;  // entry 0 is the untrained model
    std::vector<std::size_t> train_clips;
    std::vector<std::size_t> val_clips;

    double final_val_loss() const {
        for (auto it = history.rbegin(); it != history.rend(); ++it)
            if (!std::isnan(it->val_loss)) return it->val_loss;
        return std::numeric_limits<double>::quiet_NaN();
    }
};

/// Seeded 90/10 split of clip indices (at least one clip on each side when
/// the dataset has two or more clips).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_clips(std::size_t count, double val_fraction,
                                                                                 std::uint64_t seed) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(count)));
    if (count >= 2) n_val = std::clamp<std::size_t>(n_val, 1, count - 1);
    else n_val = 0;
    std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> tr(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::sort(val.begin(), val.end());
    return {tr, val};
}

/// Validation loss over the given clips, weighted by real steps.
inline double validation_loss(const DecisionTransformer& model, const Dataset& ds, const std::vector<std::size_t>& clips) {
    double num = 0.0, den = 0.0;
    for (std::size_t i : clips) {
        const Clip& c = ds.clips[i];
        Tape tape;
        BoundParams p(tape, model.params(), false);
        ForwardResult f = model.forward(p, c);
        const double w = static_cast<double>(c.real_steps());
        num += w * tape.value(model.validation_loss(f, c)).item();
        den += w;
    }
    return den > 0.0 ? num / den : std::numeric_limits<double>::quiet_NaN();
}

inline TrainResult train(const RunConfig& rc, const Dataset& ds,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    rc.train.validate();
    if (ds.clips.empty()) throw UsageError("train: dataset is empty");
    ModelConfig mc = rc.model;
    mc.seed = rc.train.seed;
    if (mc.context != ds.context) throw UsageError("train: model context differs from dataset clip length");
    {
        ModelConfig probe = ModelConfig::for_env(ds.env);
        if (probe.state_dim != mc.state_dim || probe.discrete != mc.discrete) {
            throw UsageError("train: dataset environment does not match the model configuration");
        }
    }
    TrainResult res{DecisionTransformer(mc), {}, {}, {}};
    DecisionTransformer& model = res.model;
    model.fit_state_normalization(ds);
    std::tie(res.train_clips, res.val_clips) = split_clips(ds.clips.size(), rc.train.validation_fraction, rc.train.seed);
    const ReturnStats stats = return_stats(ds);

    AdamWConfig ac;
    ac.learning_rate = rc.train.learning_rate;
    ac.weight_decay = rc.train.weight_decay;
    ac.clip_norm = rc.train.grad_clip;
    AdamW opt(model.params(), ac);
    PlasticityState plastic(mc.action_dim, mc.embed_dim, stats, rc.train.plasticity_config);

    auto validate_now = [&]() {
        return res.val_clips.empty() ? std::numeric_limits<double>::quiet_NaN()
                                     : validation_loss(model, ds, res.val_clips);
    };
    EpochMetrics e0;
    e0.val_loss = validate_now();
    res.history.push_back(e0);
    if (on_epoch) on_epoch(e0);

    std::mt19937_64 rng(rc.train.seed ^ 0x2545f4914f6cdd1dULL);
    std::vector<std::size_t> order = res.train_clips;
    try {
        for (std::size_t epoch = 1; epoch <= rc.train.epochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), rng);
            double loss_sum = 0.0;
            std::size_t loss_count = 0;
            for (std::size_t start = 0; start < order.size(); start += rc.train.batch_size) {
                const std::size_t end = std::min(order.size(), start + rc.train.batch_size);
                const double inv = 1.0 / static_cast<double>(end - start);
                std::map<std::string, Tensor> total;
                for (std::size_t b = start; b < end; ++b) {
                    const Clip& c = ds.clips[order[b]];
                    Tape tape;
                    BoundParams p(tape, model.params(), true);
                    ForwardResult f = model.forward(p, c);
                    Var loss = model.loss(f, c);
                    const double lv = tape.value(loss).item();
                    if (!std::isfinite(lv)) {
                        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) +
                                               ": non-finite loss on clip " + std::to_string(order[b]));
                    }
                    loss_sum += lv;
                    ++loss_count;
                    auto grads = p.gradients(tape.backward(loss), model.params());
                    for (auto& [name, g] : grads) {
                        auto it = total.find(name);
                        if (it == total.end()) {
                            total.emplace(name, kernels::map(g, [inv](double x) { return x * inv; }));
                        } else {
                            kernels::axpy(inv, g, it->second);
                        }
                    }
                }
                const double norm = opt.step(model.params(), std::move(total));
                if (!std::isfinite(norm)) throw TrainingDiverged("training diverged: non-finite gradient norm");
                for (const Parameter& prm : model.params().all()) {
                    for (std::size_t i = 0; i < prm.value.size(); ++i) {
                        if (!std::isfinite(prm.value[i])) {
                            throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) +
                                                   ": parameter '" + prm.name + "' is no longer finite");
                        }
                    }
                }
                model.normalize_phase_bank();
                if (rc.train.plasticity) {
                    for (std::size_t b = start; b < end; ++b) plasticity_clip_update(model, plastic, ds.clips[order[b]]);
                }
            }
            EpochMetrics m;
            m.epoch = epoch;
            m.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
            if (epoch % rc.train.validation_interval == 0 || epoch == rc.train.epochs) m.val_loss = validate_now();
            res.history.push_back(m);
            if (on_epoch) on_epoch(m);
        }
    } catch (const NonFiniteError& e) {
        throw TrainingDiverged(std::string("training diverged: ") + e.what());
    }
    return res;
}

inline void write_history_csv(std::ostream& os, const std::vector<EpochMetrics>& history) {
    os << "epoch,train_loss,val_loss\n";
    os.precision(17);
    for (const auto& m : history) os << m.epoch << ',' << m.train_loss << ',' << m.val_loss << '\n';
}

struct SpikeReport {
    double total = 0.0;          // spikes over the whole batch
    double per_inference = 0.0;  // total / batch
    double per_token_step = 0.0; // total / (batch * context * window)
    std::size_t batch = 0;
    std::size_t context = 0;
    std::size_t window = 0;
    std::size_t sites_per_inference = 0;
};

/// Sampled-spike forward passes over `clips`, counting every Q/K/V LIF spike.
inline SpikeReport spikes_per_inference(const DecisionTransformer& model, const std::vector<Clip>& clips,
                                        std::uint64_t seed) {
    if (clips.empty()) throw UsageError("spikes_per_inference: empty batch");
    SpikeReport r;
    r.batch = clips.size();
    r.context = clips.front().length();
    r.window = model.config().window;
    std::mt19937_64 rng(seed);
    SpikeMeter meter;
    for (const Clip& c : clips) {
        if (c.length() != r.context) throw UsageError("spikes_per_inference: clips differ in length");
        ForwardOptions opt{true, &rng, &meter};
        predict(model, c, opt);
    }
    r.total = meter.spikes;
    r.per_inference = r.total / static_cast<double>(r.batch);
    r.per_token_step = r.total / static_cast<double>(r.batch * r.context * r.window);
    r.sites_per_inference = meter.sites / r.batch;
    return r;
}

/// Energy in nanojoules at `pj_per_spike` picojoules per spike.
inline double energy_nj(double spikes, double pj_per_spike = kSpikeEnergyPicojoules) {
    if (spikes < 0.0) throw UsageError("energy_nj: negative spike count");
    return spikes * pj_per_spike / 1000.0;
}

struct EvalResult {
    std::vector<double> returns;
    double mean = 0.0;
    double stddev = 0.0;  // population
};

inline EvalResult summarize_returns(std::vector<double> returns) {
    EvalResult r;
    r.returns = std::move(returns);
    if (r.returns.empty()) return r;
    const double n = static_cast<double>(r.returns.size());
    for (double x : r.returns) r.mean += x;
    r.mean /= n;
    double sq = 0.0;
    for (double x : r.returns) sq += (x - r.mean) * (x - r.mean);
    r.stddev = std::sqrt(sq / n);
    return r;
}

inline std::uint64_t episode_seed(std::uint64_t seed, std::size_t episode) {
    return seed * 1000003ULL + 7919ULL * episode + 17ULL;
}

/// Greedy rollouts on `episodes` seeded episodes.
inline EvalResult evaluate(const DecisionTransformer& model, const std::string& env_name, std::size_t episodes,
                           std::uint64_t seed) {
    auto env = make_env(env_name);
    if (env->spec().name != model.config().env) throw UsageError("evaluate: environment does not match checkpoint");
    const double target = target_return(env_name);
    std::vector<double> returns;
    for (std::size_t ep = 0; ep < episodes; ++ep) {
        returns.push_back(greedy_episode(model, *env, episode_seed(seed, ep), target).total_return());
    }
    return summarize_returns(std::move(returns));
}

inline EvalResult evaluate_policy(const Policy& policy, const std::string& env_name, std::size_t episodes,
                                  std::uint64_t seed) {
    auto env = make_env(env_name);
    std::vector<double> returns;
    for (std::size_t ep = 0; ep < episodes; ++ep) {
        returns.push_back(run_episode(*env, policy, episode_seed(seed, ep), Source::kExpert).total_return());
    }
    return summarize_returns(std::move(returns));
}

/// Median wall-clock milliseconds of a forward+backward pass over the batch,
/// after `warmup` untimed passes.
inline double latency_probe(const DecisionTransformer& model, const std::vector<Clip>& clips, std::size_t warmup = 3,
                            std::size_t reps = 10) {
    if (clips.empty()) throw UsageError("latency_probe: empty batch");
    if (warmup < 3 || reps < 10) throw UsageError("latency_probe: needs >= 3 warm-up and >= 10 timed passes");
    auto pass = [&]() {
        for (const Clip& c : clips) {
            Tape tape;
            BoundParams p(tape, model.params(), true);
            ForwardResult f = model.forward(p, c);
            tape.backward(model.loss(f, c));
        }
    };
    for (std::size_t i = 0; i < warmup; ++i) pass();
    std::vector<double> ms;
    for (std::size_t i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        pass();
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    const std::size_t mid = ms.size() / 2;
    return ms.size() % 2 ? ms[mid] : 0.5 * (ms[mid - 1] + ms[mid]);
}

/// Relative improvements over the baseline, in percent.
inline double delta_val_pct(double base, double mode) { return (base - mode) / base * 100.0; }
inline double delta_return_pct(double base, double mode) { return (mode - base) / std::abs(base) * 100.0; }

struct AblationRow {
    AblationMode mode = AblationMode::kBaseline;
    double final_val_loss = 0.0;
    double delta_val = 0.0;
    double return_mean = 0.0;
    double return_std = 0.0;
    double delta_return = 0.0;
    double spikes_per_token_step = 0.0;
    double spikes_per_inference = 0.0;
    double energy_nj = 0.0;
    double latency_ms = 0.0;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    std::vector<std::vector<EpochMetrics>> curves;  // one per row
    std::vector<PhaseBank> phases;                  // empty banks for modes without phases
    std::vector<Tensor> gates;                      // last-layer gates on the first validation clip
};

struct AblationOptions {
    std::size_t eval_episodes = 50;
    std::size_t spike_batch = 16;
    bool measure_latency = true;
};

inline Tensor gate_snapshot(const DecisionTransformer& model, const Clip& clip) {
    Tape tape;
    BoundParams p(tape, model.params(), false);
    ForwardResult f = model.forward(p, clip);
    return tape.value(f.gates.back());
}

inline std::vector<Clip> pick_clips(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t n) {
    std::vector<Clip> out;
    for (std::size_t i = 0; i < idx.size() && out.size() < n; ++i) out.push_back(ds.clips[idx[i]]);
    return out;
}

inline AblationReport ablate(const Dataset& ds, const RunConfig& base, const AblationOptions& opt = {},
                             const std::function<void(AblationMode, const EpochMetrics&)>& progress = {}) {
    AblationReport rep;
    for (AblationMode mode : kAllModes) {
        RunConfig rc = base;
        rc.model.mode = mode;
        TrainResult tr = train(rc, ds, [&](const EpochMetrics& m) {
            if (progress) progress(mode, m);
        });
        AblationRow row;
        row.mode = mode;
        row.final_val_loss = tr.final_val_loss();
        if (opt.eval_episodes > 0) {
            EvalResult ev = evaluate(tr.model, ds.env, opt.eval_episodes, rc.train.seed);
            row.return_mean = ev.mean;
            row.return_std = ev.stddev;
        }
        const std::vector<std::size_t>& src = tr.val_clips.empty() ? tr.train_clips : tr.val_clips;
        std::vector<Clip> batch = pick_clips(ds, src, opt.spike_batch);
        SpikeReport sr = spikes_per_inference(tr.model, batch, rc.train.seed);
        row.spikes_per_token_step = sr.per_token_step;
        row.spikes_per_inference = sr.per_inference;
        row.energy_nj = energy_nj(sr.per_inference);
        if (opt.measure_latency) row.latency_ms = latency_probe(tr.model, std::vector<Clip>{batch.front()});
        rep.rows.push_back(row);
        rep.curves.push_back(tr.history);
        rep.phases.push_back(tr.model.phase_bank());
        rep.gates.push_back(gate_snapshot(tr.model, batch.front()));
    }
    const AblationRow& b = rep.rows.front();
    for (AblationRow& r : rep.rows) {
        r.delta_val = delta_val_pct(b.final_val_loss, r.final_val_loss);
        r.delta_return = delta_return_pct(b.return_mean, r.return_mean);
    }
    return rep;
}

inline void write_ablation_csv(std::ostream& os, const AblationReport& rep) {
    os << "mode,final_val_loss,delta_val_pct,return_mean,return_std,delta_return_pct,spikes_per_token_step,"
          "spikes_per_inference,energy_nj,latency_ms\n";
    os.precision(17);
    for (const auto& r : rep.rows) {
        os << to_string(r.mode) << ',' << r.final_val_loss << ',' << r.delta_val << ',' << r.return_mean << ','
           << r.return_std << ',' << r.delta_return << ',' << r.spikes_per_token_step << ',' << r.spikes_per_inference
           << ',' << r.energy_nj << ',' << r.latency_ms << '\n';
    }
}

inline void write_curves_csv(std::ostream& os, const AblationReport& rep) {
    os << "mode,epoch,train_loss,val_loss\n";
    os.precision(17);
    for (std::size_t k = 0; k < rep.rows.size(); ++k)
        for (const auto& m : rep.curves[k])
            os << to_string(rep.rows[k].mode) << ',' << m.epoch << ',' << m.train_loss << ',' << m.val_loss << '\n';
}

/// ablation.csv, val_curves.csv, phases_<mode>.csv (phase modes) and gates_<mode>.csv.
inline void write_ablation_outputs(const std::filesystem::path& dir, const AblationReport& rep) {
    std::filesystem::create_directories(dir);
    auto open = [&dir](const std::string& name) {
        std::ofstream f(dir / name);
        if (!f) throw std::runtime_error("cannot write '" + (dir / name).string() + "'");
        return f;
    };
    {
        auto f = open("ablation.csv");
        write_ablation_csv(f, rep);
    }
    {
        auto f = open("val_curves.csv");
        write_curves_csv(f, rep);
    }
    for (std::size_t k = 0; k < rep.rows.size(); ++k) {
        const std::string mode = to_string(rep.rows[k].mode);
        if (rep.phases[k].heads() > 0) {
            auto f = open("phases_" + mode + ".csv");
            write_phase_csv(f, rep.phases[k]);
        }
        auto g = open("gates_" + mode + ".csv");
        write_gates_csv(g, rep.gates[k]);
    }
}

enum class SweepAxis : std::uint8_t { kWindow, kContext };

inline SweepAxis parse_axis(const std::string& s) {
    if (s == "T") return SweepAxis::kWindow;
    if (s == "N") return SweepAxis::kContext;
    throw UsageError("unknown sweep axis '" + s + "' (expected T or N)");
}

struct SweepRow {
    SweepAxis axis = SweepAxis::kWindow;
    std::size_t value = 0;
    SpikeReport spikes;
    double energy_nj = 0.0;
    double latency_ms = 0.0;
};

/// For each value of the window T or context N: an untrained model of the
/// base configuration, spikes per inference on `batch` clips cut from
/// `trajectories`, and forward+backward latency.
inline std::vector<SweepRow> sweep(SweepAxis axis, const std::vector<std::size_t>& values, const RunConfig& base,
                                   const std::vector<Trajectory>& trajectories, std::size_t batch,
                                   bool measure_latency = true) {
    std::vector<SweepRow> rows;
    for (std::size_t v : values) {
        if (v == 0) throw UsageError("sweep: values must be positive");
        ModelConfig mc = base.model;
        if (axis == SweepAxis::kWindow) mc.window = v;
        else mc.context = v;
        mc.seed = base.train.seed;
        DecisionTransformer model(mc);
        Dataset ds = build_dataset(mc.env, trajectories, mc.context);
        model.fit_state_normalization(ds);
        std::vector<Clip> clips;
        for (const Clip& c : ds.clips) {
            if (clips.size() == batch) break;
            if (c.real_steps() == c.length()) clips.push_back(c);
        }
        if (clips.empty()) throw UsageError("sweep: no unpadded clips of length " + std::to_string(mc.context));
        SweepRow row;
        row.axis = axis;
        row.value = v;
        row.spikes = spikes_per_inference(model, clips, base.train.seed);
        row.energy_nj = energy_nj(row.spikes.per_inference);
        if (measure_latency) row.latency_ms = latency_probe(model, clips);
        rows.push_back(row);
    }
    return rows;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
    os << "axis,value,spikes_per_token_step,spikes_per_inference,energy_nj,latency_ms\n";
    os.precision(17);
    for (const auto& r : rows) {
        os << (r.axis == SweepAxis::kWindow ? "T" : "N") << ',' << r.value << ',' << r.spikes.per_token_step << ','
           << r.spikes.per_inference << ',' << r.energy_nj << ',' << r.latency_ms << '\n';
    }
}

}  // namespace snndt
