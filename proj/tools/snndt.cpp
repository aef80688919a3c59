// Command-line front end: dataset generation, training, evaluation,
// ablation, sweeps and diagnostics.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "snndt/snndt.hpp"

namespace fs = std::filesystem;
using namespace snndt;

namespace {

RunConfig load_run_config(const std::string& path, const std::string& env) {
    if (path.empty()) return RunConfig::make("table6", env);
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config '" + path + "'");
    KeyValues kv = KeyValues::parse(f);
    if (!env.empty() && !kv.contains("env")) kv.set("env", env);
    return RunConfig::from_kv(kv, env.empty() ? "CartPole" : env);
}

std::ofstream open_out(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
    return f;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spiking decision transformer toolkit"};
    app.require_subcommand(1);


    std::string env = "CartPole", out, data, config, mode = "full", ckpt, outdir = ".", axis;
    std::size_t steps = 10000, context = 20, episodes = 50, batch = 4;
    std::uint64_t seed = 0;
    std::vector<std::size_t> values;
    bool no_latency = false, quiet = false;

    auto* gen = app.add_subcommand("gen-data", "Collect a mixed expert/random offline dataset");
    gen->add_option("--env", env, "Environment")->required();
    gen->add_option("--steps", steps, "Total environment steps")->required();
    gen->add_option("--seed", seed, "Seed")->required();
    gen->add_option("--out", out, "Dataset file")->required();
    gen->add_option("--context", context, "Clip length N");

    auto* tr = app.add_subcommand("train", "Train a model on an offline dataset");
    tr->add_option("--config", config, "key=value config file");
    tr->add_option("--data", data, "Dataset file")->required();
    tr->add_option("--mode", mode, "baseline | pos-only | route-only | full");
    tr->add_option("--out", out, "Checkpoint file")->required();
    tr->add_flag("--quiet", quiet, "No per-epoch output");

    auto* ev = app.add_subcommand("eval", "Greedy evaluation of a checkpoint");
    ev->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    ev->add_option("--env", env, "Environment")->required();
    ev->add_option("--episodes", episodes, "Episodes");
    ev->add_option("--seed", seed, "Seed");
    ev->add_option("--out", out, "Optional CSV file (default stdout)");

    auto* ab = app.add_subcommand("ablate", "Train and compare the four ablation modes");
    ab->add_option("--data", data, "Dataset file")->required();
    ab->add_option("--env", env, "Environment")->required();
    ab->add_option("--outdir", outdir, "Report directory")->required();
    ab->add_option("--config", config, "key=value config file");
    ab->add_option("--episodes", episodes, "Evaluation episodes per mode");
    ab->add_flag("--no-latency", no_latency, "Skip the latency probe");
    ab->add_flag("--quiet", quiet, "No per-epoch output");

    auto* sw = app.add_subcommand("sweep", "Spikes and latency across window T or context N");
    sw->add_option("--axis", axis, "T or N")->required()->check(CLI::IsMember({"T", "N"}));
    sw->add_option("--values", values, "Comma-separated positive values")->required()->delimiter(',');
    sw->add_option("--config", config, "key=value config file");
    sw->add_option("--env", env, "Environment for the probe clips");
    sw->add_option("--batch", batch, "Clips per measurement");
    sw->add_option("--seed", seed, "Seed");
    sw->add_option("--out", out, "Optional CSV file (default stdout)");

    auto* dg = app.add_subcommand("diag", "Phase scatter and gate heatmap CSVs from a checkpoint");
    dg->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    dg->add_option("--data", data, "Dataset supplying the probe clip (default: freshly collected)");
    dg->add_option("--outdir", outdir, "Output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            auto trajs = collect(env, steps, seed);
            Dataset ds = build_dataset(env, trajs, context);
            save(ds, out);
            auto side = open_out(out + ".jsonl");
            write_sidecar(side, trajs);
            std::size_t expert = 0, total = 0;
            for (const auto& t : trajs) {
                total += t.size();
                if (t.source == Source::kExpert) expert += t.size();
            }
            std::cout << "episodes,steps,expert_steps,clips\n"
                      << trajs.size() << ',' << total << ',' << expert << ',' << ds.clips.size() << '\n';
        } else if (*tr) {
            Dataset ds = load(data);
            RunConfig rc = load_run_config(config, ds.env);
            if (tr->count("--mode")) rc.model.mode = parse_mode(mode);
            rc.model.context = ds.context;
            TrainResult res = train(rc, ds, [&](const EpochMetrics& m) {
                if (!quiet) std::cerr << "epoch " << m.epoch << " train " << m.train_loss << " val " << m.val_loss << '\n';
            });
            save_checkpoint(res.model, out);
            auto f = open_out(out + ".history.csv");
            write_history_csv(f, res.history);
            std::cout << "mode,epochs,final_val_loss\n"
                      << to_string(rc.model.mode) << ',' << rc.train.epochs << ',' << res.final_val_loss() << '\n';
        } else if (*ev) {
            DecisionTransformer model = load_checkpoint(ckpt);
            EvalResult r = evaluate(model, env, episodes, seed);
            std::ofstream file;
            std::ostream& os = out.empty() ? std::cout : (file = open_out(out), file);
            os.precision(17);
            os << "env,episodes,return_mean,return_std\n"
               << model.config().env << ',' << episodes << ',' << r.mean << ',' << r.stddev << '\n';
        } else if (*ab) {
            Dataset ds = load(data);
            if (make_env(env)->spec().name != ds.env) throw UsageError("dataset was collected on " + ds.env);
            RunConfig rc = load_run_config(config, ds.env);
            rc.model.context = ds.context;
            AblationOptions opt;
            opt.eval_episodes = episodes;
            opt.measure_latency = !no_latency;
            AblationReport rep = ablate(ds, rc, opt, [&](AblationMode m, const EpochMetrics& e) {
                if (!quiet) std::cerr << to_string(m) << " epoch " << e.epoch << " val " << e.val_loss << '\n';
            });
            write_ablation_outputs(outdir, rep);
            write_ablation_csv(std::cout, rep);
        } else if (*sw) {
            RunConfig rc = load_run_config(config, env);
            rc.train.seed = seed;
            const std::size_t longest = axis == "N" ? *std::max_element(values.begin(), values.end()) : rc.model.context;
            // Long expert episodes so every probe clip is unpadded.
            auto probe_env = make_env(env);
            std::vector<Trajectory> trajs;
            const Policy expert = expert_policy(env);
            for (std::size_t k = 0; trajs.size() < batch * 4 && k < batch * 64; ++k) {
                Trajectory t = run_episode(*probe_env, expert, seed + k, Source::kExpert);
                if (t.size() >= longest) trajs.push_back(std::move(t));
            }
            auto rows = sweep(parse_axis(axis), values, rc, trajs, batch);
            std::ofstream file;
            std::ostream& os = out.empty() ? std::cout : (file = open_out(out), file);
            write_sweep_csv(os, rows);
        } else if (*dg) {
            DecisionTransformer model = load_checkpoint(ckpt);
            const ModelConfig& mc = model.config();
            Dataset ds = data.empty() ? build_dataset(mc.env, collect(mc.env, mc.context * 10, 0), mc.context) : load(data);
            if (ds.clips.empty()) throw UsageError("diag: no clips available");
            if (ds.context != mc.context) throw UsageError("diag: dataset clip length differs from checkpoint");
            fs::create_directories(outdir);
            {
                auto f = open_out(fs::path(outdir) / "phases.csv");
                write_phase_csv(f, model.phase_bank());
            }
            auto g = open_out(fs::path(outdir) / "gates.csv");
            write_gates_csv(g, gate_snapshot(model, ds.clips.front()));
            std::cout << "wrote " << (fs::path(outdir) / "phases.csv").string() << " and "
                      << (fs::path(outdir) / "gates.csv").string() << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
