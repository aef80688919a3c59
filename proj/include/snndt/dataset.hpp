#pragma once

// Offline trajectories: expert/random collection, return-to-go, fixed-length
// front-padded clips, a portable binary clip file and a JSON-lines sidecar.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "snndt/envs.hpp"
#include "snndt/tensor.hpp"

namespace snndt {

enum class Source : std::uint8_t { kExpert, kRandom };

inline const char* to_string(Source s) { return s == Source::kExpert ? "expert" : "random"; }

struct Trajectory {
    std::vector<State> states;
    std::vector<Action> actions;
    std::vector<double> rewards;
    Source source = Source::kExpert;
    bool terminated = false;  // false means the step limit ended the episode

    std::size_t size() const noexcept { return rewards.size(); }
    double total_return() const {
        double r = 0.0;
        for (double x : rewards) r += x;
        return r;
    }
};

/// Rows are timesteps. Actions are stored raw: discrete tasks keep the action
/// index in a single column.
struct Clip {
    Tensor states;                // N x d_s
    Tensor actions;               // N x d_a
    std::vector<double> rtg;      // N
    std::vector<double> timesteps;  // N, episode step index
    std::vector<std::uint8_t> pad;  // N, 1 on front padding

    std::size_t length() const noexcept { return rtg.size(); }
    std::size_t real_steps() const {
        std::size_t n = 0;
        for (auto p : pad) n += p == 0;
        return n;
    }
    friend bool operator==(const Clip&, const Clip&) = default;
};

struct Dataset {
    std::string env;
    std::size_t context = 20;
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;
    std::vector<Clip> clips;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

class DatasetFormatError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};
class DatasetCorruptError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Undiscounted reward-to-go: G_t = sum_{k >= t} r_k.
inline std::vector<double> rtg(const std::vector<double>& rewards) {
    std::vector<double> out(rewards.size());
    double acc = 0.0;
    for (std::size_t i = rewards.size(); i-- > 0;) {
        acc += rewards[i];
        out[i] = acc;
    }
    return out;
}

inline Trajectory run_episode(Environment& env, const Policy& policy, std::uint64_t seed, Source source) {
    Trajectory tr;
    tr.source = source;
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    State s = env.reset(seed);
    while (!env.done()) {
        Action a = policy(s, rng);
        Transition t = env.step(a);
        tr.states.push_back(std::move(s));
        tr.actions.push_back(std::move(a));
        tr.rewards.push_back(t.reward);
        tr.terminated = t.terminated;
        s = std::move(t.next_state);
    }
    return tr;
}

/// Expert episodes until they cover half the budget, then random episodes for
/// the rest. Episodes are never cut short.
inline std::vector<Trajectory> collect(const std::string& env_name, std::size_t total_steps, std::uint64_t seed) {
    if (total_steps == 0) throw UsageError("collect: total steps must be > 0");
    auto env = make_env(env_name);
    const Policy expert = expert_policy(env_name);
    const Policy random = random_policy(env->spec());
    std::mt19937_64 seeds(seed);
    std::vector<Trajectory> out;
    std::size_t steps = 0;
    const std::size_t expert_budget = total_steps / 2;
    while (steps < expert_budget) {
        out.push_back(run_episode(*env, expert, seeds(), Source::kExpert));
        steps += out.back().size();
    }
    while (steps < total_steps) {
        out.push_back(run_episode(*env, random, seeds(), Source::kRandom));
        steps += out.back().size();
    }
    return out;
}

/// Non-overlapping windows from the episode start; the trailing short window is
/// front-padded with zero states/actions, zero rtg and pad = 1.
inline std::vector<Clip> clip_segments(const Trajectory& traj, std::size_t n, std::size_t state_dim,
                                       std::size_t action_dim) {
    if (n < 1) throw UsageError("clip_segments: clip length must be >= 1");
    if (traj.states.size() != traj.size() || traj.actions.size() != traj.size()) {
        throw UsageError("clip_segments: misaligned trajectory");
    }
    const std::vector<double> g = rtg(traj.rewards);
    std::vector<Clip> out;
    for (std::size_t start = 0; start < traj.size(); start += n) {
        const std::size_t real = std::min(n, traj.size() - start);
        const std::size_t offset = n - real;
        Clip c{Tensor::matrix(n, state_dim), Tensor::matrix(n, action_dim), std::vector<double>(n, 0.0),
               std::vector<double>(n, 0.0), std::vector<std::uint8_t>(n, 1)};
        for (std::size_t k = 0; k < real; ++k) {
            const std::size_t src = start + k, dst = offset + k;
            const State& s = traj.states[src];
            const Action& a = traj.actions[src];
            if (s.size() != state_dim || a.size() != action_dim) throw UsageError("clip_segments: width mismatch");
            for (std::size_t j = 0; j < state_dim; ++j) c.states(dst, j) = s[j];
            for (std::size_t j = 0; j < action_dim; ++j) c.actions(dst, j) = a[j];
            c.rtg[dst] = g[src];
            c.timesteps[dst] = static_cast<double>(src);
            c.pad[dst] = 0;
        }
        out.push_back(std::move(c));
    }
    return out;
}

inline Dataset build_dataset(const std::string& env_name, const std::vector<Trajectory>& trajs, std::size_t n = 20) {
    auto env = make_env(env_name);
    Dataset ds;
    ds.env = env->spec().name;
    ds.context = n;
    ds.state_dim = env->spec().state_dim;
    ds.action_dim = env->spec().discrete() ? 1 : env->spec().action_dim;
    for (const auto& t : trajs) {
        auto clips = clip_segments(t, n, ds.state_dim, ds.action_dim);
        for (auto& c : clips) ds.clips.push_back(std::move(c));
    }
    return ds;
}

struct ReturnStats {
    double mean = 0.0;
    double stddev = 0.0;  // population
    std::size_t count = 0;
};

/// Statistics of the return-to-go over every real (unpadded) step.
inline ReturnStats return_stats(const Dataset& ds) {
    ReturnStats s;
    double sum = 0.0;
    for (const auto& c : ds.clips)
        for (std::size_t i = 0; i < c.length(); ++i)
            if (!c.pad[i]) {
                sum += c.rtg[i];
                ++s.count;
            }
    if (s.count == 0) return s;
    s.mean = sum / static_cast<double>(s.count);
    double sq = 0.0;
    for (const auto& c : ds.clips)
        for (std::size_t i = 0; i < c.length(); ++i)
            if (!c.pad[i]) sq += (c.rtg[i] - s.mean) * (c.rtg[i] - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(s.count));
    return s;
}

inline constexpr char kDatasetMagic[8] = {'S', 'N', 'D', 'T', 'D', 'A', 'T', 'A'};
inline constexpr std::uint8_t kDatasetVersion = 1;

namespace io {

static_assert(std::endian::native == std::endian::little, "binary IO assumes a little-endian host");

inline void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_f64s(std::ostream& os, std::span<const double> v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    void raw(void* dst, std::size_t n) {
        if (bytes_.size() - pos_ < n) throw DatasetCorruptError("truncated file");
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        raw(&v, 1);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, 8);
        return v;
    }
    double f64() {
        double v;
        raw(&v, 8);
        return v;
    }
    void f64s(std::span<double> out) { raw(out.data(), out.size() * 8); }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace io

inline std::string serialize(const Dataset& ds) {
    std::ostringstream os(std::ios::binary);
    os.write(kDatasetMagic, sizeof kDatasetMagic);
    os.put(static_cast<char>(kDatasetVersion));
    io::put_u64(os, ds.env.size());
    os.write(ds.env.data(), static_cast<std::streamsize>(ds.env.size()));
    io::put_u64(os, ds.context);
    io::put_u64(os, ds.state_dim);
    io::put_u64(os, ds.action_dim);
    io::put_u64(os, ds.clips.size());
    for (const auto& c : ds.clips) {
        if (c.length() != ds.context || c.states.cols() != ds.state_dim || c.actions.cols() != ds.action_dim) {
            throw UsageError("serialize: clip shape disagrees with dataset header");
        }
        io::put_f64s(os, c.states.data());
        io::put_f64s(os, c.actions.data());
        io::put_f64s(os, c.rtg);
        io::put_f64s(os, c.timesteps);
        for (auto p : c.pad) io::put_f64(os, p ? 1.0 : 0.0);
    }
    return std::move(os).str();
}

inline Dataset deserialize(std::string_view bytes) {
    Dataset ds;
    if (bytes.empty()) return ds;
    io::Reader r(bytes);
    char magic[sizeof kDatasetMagic];
    if (bytes.size() < sizeof magic) throw DatasetFormatError("not a dataset file (bad magic)");
    r.raw(magic, sizeof magic);
    if (std::memcmp(magic, kDatasetMagic, sizeof magic) != 0) throw DatasetFormatError("not a dataset file (bad magic)");
    const auto version = r.u8();
    if (version != kDatasetVersion) {
        throw DatasetFormatError("unsupported dataset version " + std::to_string(version));
    }
    const auto name_len = r.u64();
    if (name_len > r.remaining()) throw DatasetCorruptError("truncated file");
    ds.env.resize(name_len);
    r.raw(ds.env.data(), name_len);
    ds.context = r.u64();
    ds.state_dim = r.u64();
    ds.action_dim = r.u64();
    const auto count = r.u64();
    const std::size_t per_clip = ds.context * (ds.state_dim + ds.action_dim + 3) * 8;
    if (ds.context == 0 || ds.state_dim == 0 || ds.action_dim == 0) {
        if (count != 0) throw DatasetCorruptError("zero-sized clip dimensions");
        return ds;
    }
    if (count > r.remaining() / per_clip) throw DatasetCorruptError("truncated file");
    ds.clips.reserve(count);
    for (std::uint64_t k = 0; k < count; ++k) {
        Clip c{Tensor::matrix(ds.context, ds.state_dim), Tensor::matrix(ds.context, ds.action_dim),
               std::vector<double>(ds.context), std::vector<double>(ds.context),
               std::vector<std::uint8_t>(ds.context)};
        r.f64s(c.states.data());
        r.f64s(c.actions.data());
        r.f64s(c.rtg);
        r.f64s(c.timesteps);
        for (auto& p : c.pad) {
            const double v = r.f64();
            if (v != 0.0 && v != 1.0) throw DatasetCorruptError("pad mask entry is not 0 or 1");
            p = v != 0.0;
        }
        ds.clips.push_back(std::move(c));
    }
    if (r.remaining() != 0) throw DatasetCorruptError("trailing bytes after last clip");
    return ds;
}

inline void save(const Dataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    const std::string bytes = serialize(ds);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write to '" + path + "' failed");
}

inline Dataset load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

/// FNV-1a over the serialized bytes.
inline std::uint64_t dataset_hash(const Dataset& ds) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : serialize(ds)) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// One JSON object per episode: {"episode", "source", "return", "length", "terminated"}.
inline void write_sidecar(std::ostream& os, const std::vector<Trajectory>& trajs) {
    for (std::size_t i = 0; i < trajs.size(); ++i) {
        nlohmann::json j;
        j["episode"] = i;
        j["source"] = to_string(trajs[i].source);
        j["return"] = trajs[i].total_return();
        j["length"] = trajs[i].size();
        j["terminated"] = trajs[i].terminated;
        os << j.dump() << '\n';
    }
}

}  // namespace snndt
