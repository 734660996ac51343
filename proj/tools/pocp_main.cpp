/*
 Copyright 2026 The pocp authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/
#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>

#include "pocp/eval.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace pocp;

namespace {

// Exit-code ranges per failure class.
constexpr int kExitConfig = 10, kExitData = 20, kExitSolver = 30, kExitTrain = 40, kExitEval = 50;

/// Applies a JSON config document to CLI11 options. Flags given on the
/// command line win; any key that is not an option of the subcommand is a
/// config error naming the key.
void apply_config_file(CLI::App* cmd, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    json doc;
    try {
        doc = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config file: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config file must be a JSON object");
    for (const auto& [key, val] : doc.items()) {
        CLI::Option* opt = nullptr;
        try {
            opt = cmd->get_option("--" + key);
        } catch (const CLI::OptionNotFound&) {
            throw ConfigError("unknown config key: " + key);
        }
        if (opt->count() > 0) continue;  // flag overrides file
        std::string text;
        if (val.is_string())
            text = val.get<std::string>();
        else if (val.is_boolean())
            text = val.get<bool>() ? "1" : "0";
        else if (val.is_number() || val.is_array())
            text = val.dump();
        else
            throw ConfigError("unsupported value type for config key: " + key);
        if (val.is_array()) {
            for (const auto& item : val.get<json::array_t>()) opt->add_result(item.dump());
        } else if (!opt->add_result(text)) {
            throw ConfigError("type mismatch for config key: " + key);
        }
        try {
            opt->run_callback();
        } catch (const CLI::ConversionError&) {
            throw ConfigError("type mismatch for config key: " + key);
        }
    }
}

/// Every run directory gets a manifest echoing the resolved options, so a
/// run is reconstructible from the directory alone.
void write_manifest(const std::string& out_dir, const std::string& command,
                    const std::map<std::string, std::string>& resolved, double wall_s) {
    json doc;
    doc["command"] = command;
    doc["schema"] = {{"dataset", Dataset::kSchemaVersion}, {"checkpoint", 1}};
    doc["wall_time_s"] = wall_s;
    for (const auto& [k, v] : resolved) doc["config"][k] = v;
    std::ofstream os(fs::path(out_dir) / "manifest.json");
    if (!os) throw DataError("cannot write manifest in " + out_dir);
    os << doc.dump(2) << "\n";
}

std::string out_file(const std::string& out_dir, const std::string& name) {
    fs::create_directories(out_dir);
    return (fs::path(out_dir) / name).string();
}

AdaptStrategy parse_strategy(const std::string& s) {
    if (s == "full") return AdaptStrategy::Full;
    if (s == "branch") return AdaptStrategy::Branch;
    if (s == "last_branch") return AdaptStrategy::LastBranch;
    if (s == "last_trunk") return AdaptStrategy::LastTrunk;
    if (s == "last_both") return AdaptStrategy::LastBoth;
    throw ConfigError("unknown adaptation strategy: " + s);
}

struct Profile {
    int tasks, traj;           // dataset size
    int train_steps;           // behavioral cloning steps
    int width, p;              // network size
    int batch_tasks, queries;  // minibatch shape
    std::vector<int> context_sizes;
};

/// "full" mirrors the reference experiment scale; "desk" is a CPU-sized
/// profile (<=100 tasks, <=20k steps) preserving the same trends.
Profile profile_for(const std::string& name, EnvId id) {
    if (name == "full") {
        Profile p{500, 100, 100000, 128, 64, 16, 64, {8, 16, 32, 64, 128}};
        if (id == EnvId::P2pDyn) p.tasks = 100;
        if (id == EnvId::Quadrotor) {
            p.tasks = 100;
            p.traj = 20;
        }
        if (id == EnvId::Obstacle) p.traj = 60;
        return p;
    }
    if (name == "desk") {
        Profile p{100, 20, 20000, 64, 32, 8, 32, {4, 8, 16, 32}};
        if (id == EnvId::P2pDyn || id == EnvId::Quadrotor || id == EnvId::Obstacle) {
            p.tasks = 60;
            p.traj = 10;
        }
        return p;
    }
    throw ConfigError("unknown profile: " + name);
}

OperatorModel model_from_checkpoint(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.kind != "operator")
        throw DataError("checkpoint " + path + " holds a '" + ck.kind + "' model, not an operator");
    OperatorModel m;
    m.cfg = parse_operator_config_line(ck.config_line);
    m.params = ck.params;
    return m;
}

OperatorConfig operator_config_for(const EnvSpec& env, const Profile& prof) {
    OperatorConfig cfg;
    cfg.ctx_width = env.ctx_width;
    cfg.query_width = env.d_x + 1;
    cfg.d_u = env.d_u;
    cfg.p = prof.p;
    cfg.phi_width = cfg.rho_width = cfg.trunk_width = prof.width;
    return cfg;
}

int run(int argc, char** argv) {
    CLI::App app{"Operator-learning pipeline for parametric optimal control"};
    app.require_subcommand(1);

    std::string config_path, env_name = "p2p_cost", profile = "desk", out_dir = "run";
    std::uint64_t seed = 0;
    int threads = 1;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file; flags override file values");
        cmd->add_option("--seed", seed, "random seed");
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--threads", threads, "thread cap (modules are single-threaded)");
    };

    // ---- gen ----
    auto* gen = app.add_subcommand("gen", "generate an expert dataset");
    int gen_tasks = -1, gen_traj = -1;
    add_common(gen);
    gen->add_option("--env", env_name, "environment id");
    gen->add_option("--profile", profile, "full or desk");
    gen->add_option("--tasks", gen_tasks, "task count (overrides profile)");
    gen->add_option("--traj", gen_traj, "trajectories per task (overrides profile)");

    // ---- train ----
    auto* train = app.add_subcommand("train", "behavioral cloning on a dataset");
    std::string dataset_path;
    int train_steps = -1;
    add_common(train);
    train->add_option("--dataset", dataset_path, "dataset file")->required();
    train->add_option("--profile", profile, "full or desk");
    train->add_option("--steps", train_steps, "training steps (overrides profile)");

    // ---- meta-train ----
    auto* meta = app.add_subcommand("meta-train", "bi-level meta-training");
    std::string variant_name = "meta_branch";
    int meta_steps = 1000;
    bool first_order = false;
    add_common(meta);
    meta->add_option("--dataset", dataset_path, "dataset file")->required();
    meta->add_option("--profile", profile, "full or desk");
    meta->add_option("--variant", variant_name, "meta_branch, meta_full, or maml");
    meta->add_option("--steps", meta_steps, "outer-loop steps");
    meta->add_flag("--first-order", first_order, "drop second-order terms");
    int support_points = 64, query_points = 64;
    meta->add_option("--support", support_points, "inner-loop points per task");
    meta->add_option("--query", query_points, "outer-loss points per task");
    double inner_lr = 1e-2, outer_lr = 1e-3;
    meta->add_option("--inner-lr", inner_lr, "inner-loop step size");
    meta->add_option("--outer-lr", outer_lr, "outer-loop Adam rate");

    // ---- adapt ----
    auto* adapt = app.add_subcommand("adapt", "per-task adaptation of a checkpoint");
    std::string checkpoint_path, strategy_name = "last_branch", mode = "demos";
    int adapt_steps = 25, adapt_context = 32;
    double adapt_lr = 1e-3;
    add_common(adapt);
    adapt->add_option("--dataset", dataset_path, "dataset file")->required();
    adapt->add_option("--checkpoint", checkpoint_path, "operator checkpoint")->required();
    adapt->add_option("--strategy", strategy_name, "full, branch, last_branch, last_trunk, last_both");
    adapt->add_option("--mode", mode, "demos (supervised) or cost (rollout feedback)");
    adapt->add_option("--steps", adapt_steps, "adaptation steps per task");
    adapt->add_option("--lr", adapt_lr, "adaptation learning rate");
    adapt->add_option("--context", adapt_context, "evaluation context size");

    // ---- eval ----
    auto* eval = app.add_subcommand("eval", "held-out expert-states evaluation");
    std::string method_label = "pretrained";
    int eval_ctx_size = 32;
    bool eval_rollout = false;
    add_common(eval);
    eval->add_option("--dataset", dataset_path, "dataset file")->required();
    eval->add_option("--checkpoint", checkpoint_path, "operator checkpoint")->required();
    eval->add_option("--context", eval_ctx_size, "context size");
    eval->add_option("--method", method_label, "method label for the report");
    eval->add_flag("--rollout", eval_rollout, "also record closed-loop rollout metrics");

    // ---- sweep ----
    auto* sweep = app.add_subcommand("sweep", "context-resolution sweep");
    std::vector<int> sweep_sizes = {1, 2, 4, 8, 16, 32, 64, 128};
    add_common(sweep);
    sweep->add_option("--dataset", dataset_path, "dataset file")->required();
    sweep->add_option("--checkpoint", checkpoint_path, "operator checkpoint")->required();
    sweep->add_option("--sizes", sweep_sizes, "context sizes to evaluate");

    // ---- report ----
    auto* report = app.add_subcommand("report", "aggregate saved evaluation records");
    std::vector<std::string> record_files;
    add_common(report);
    report->add_option("--records", record_files, "record files to aggregate")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }
    CLI::App* cmd = app.get_subcommands().front();
    if (!config_path.empty()) apply_config_file(cmd, config_path);

    auto t0 = std::chrono::steady_clock::now();
    std::map<std::string, std::string> resolved;
    for (const auto* opt : cmd->get_options())
        if (opt->get_name().rfind("--", 0) == 0 && opt->get_name() != "--config" &&
            opt->get_name() != "--help")
            resolved[opt->get_name().substr(2)] = opt->count() ? opt->results()[0] : std::string();
    resolved["seed"] = std::to_string(seed);
    resolved["out"] = out_dir;
    if (threads != 1) std::cerr << "note: modules run single-threaded; --threads capped at 1\n";

    if (cmd == gen) {
        EnvId id = parse_env_id(env_name);
        Profile prof = profile_for(profile, id);
        int tasks = gen_tasks > 0 ? gen_tasks : prof.tasks;
        int traj = gen_traj > 0 ? gen_traj : prof.traj;
        resolved["tasks"] = std::to_string(tasks);
        resolved["traj"] = std::to_string(traj);
        Dataset ds = generate(id, tasks, traj, seed);
        ds.norm = fit_normalizer(ds);
        save_dataset(ds, out_file(out_dir, "dataset.txt"));
        std::cout << "wrote " << out_dir << "/dataset.txt (" << tasks << " tasks, " << traj
                  << " traj/task, " << ds.expert_failures << " expert failures)\n";
    } else if (cmd == train) {
        Dataset ds = load_dataset(dataset_path);
        Profile prof = profile_for(profile, ds.env.id);
        OperatorModel model;
        {
            Rng rng(seed);
            model = OperatorModel::init(operator_config_for(ds.env, prof), rng);
        }
        TrainConfig cfg;
        cfg.steps = train_steps > 0 ? train_steps : prof.train_steps;
        cfg.batch_tasks = prof.batch_tasks;
        cfg.queries_per_task = prof.queries;
        cfg.context_sizes = prof.context_sizes;
        cfg.seed = seed;
        cfg.checkpoint_path = out_file(out_dir, "model.ckpt");
        resolved["steps"] = std::to_string(cfg.steps);
        LossLog log = bc_train(model, ds, cfg);
        write_loss_log(log, out_file(out_dir, "loss.tsv"));
        std::cout << "wrote " << out_dir << "/model.ckpt after " << cfg.steps << " steps; final loss "
                  << fmt_g17(log.entries.empty() ? 0.0 : log.entries.back().second) << "\n";
    } else if (cmd == meta) {
        Dataset ds = load_dataset(dataset_path);
        Profile prof = profile_for(profile, ds.env.id);
        MetaConfig cfg;
        cfg.variant = parse_meta_variant(variant_name);
        cfg.steps = meta_steps;
        cfg.context_sizes = prof.context_sizes;
        cfg.second_order = !first_order;
        cfg.support_points = support_points;
        cfg.query_points = query_points;
        cfg.inner_lr = inner_lr;
        cfg.outer_lr = outer_lr;
        cfg.seed = seed;
        LossLog log;
        std::string ckpt = out_file(out_dir, variant_name + ".ckpt");
        if (cfg.variant == MetaVariant::Maml) {
            Rng rng(seed);
            MlpModel m = MlpModel::init(ds.env.d_x + 1, ds.env.d_u, prof.width, 3, rng);
            log = meta_train(m, ds, cfg);
            save_checkpoint(ckpt, "mlp", variant_name, mlp_config_line(m.cfg), m.params);
        } else {
            Rng rng(seed);
            OperatorModel m = OperatorModel::init(operator_config_for(ds.env, prof), rng);
            log = meta_train(m, ds, cfg);
            save_checkpoint(ckpt, "operator", variant_name, operator_config_line(m.cfg), m.params);
        }
        write_loss_log(log, out_file(out_dir, "loss.tsv"));
        std::cout << "wrote " << ckpt << " after " << meta_steps << " outer steps\n";
    } else if (cmd == adapt) {
        Dataset ds = load_dataset(dataset_path);
        OperatorModel model = model_from_checkpoint(checkpoint_path);
        AdaptConfig cfg;
        cfg.strategy = parse_strategy(strategy_name);
        cfg.steps = adapt_steps;
        cfg.lr = adapt_lr;
        cfg.seed = seed;
        std::vector<EvalRecord> records;
        for (int tid : ds.test_ids) {
            const TaskRecord& rec = ds.records[tid];
            Tensor ctx = eval_context(ds, rec, adapt_context, seed);
            OperatorModel adapted;
            if (mode == "demos") {
                Tensor q, u;
                demos_from_trajectory(ds.env, ds.norm, rec.trajectories.front(), q, u);
                adapted = finetune(model, ctx, q, u, cfg);
            } else if (mode == "cost") {
                std::vector<std::vector<double>> x0s;
                for (const auto& tr : rec.trajectories) x0s.push_back(tr.x.front());
                adapted = cost_adapt(model, ds.norm, ds.env, rec.task, ctx, x0s, cfg);
            } else {
                throw ConfigError("unknown adapt mode: " + mode);
            }
            Dataset one = ds;  // evaluate the per-task model on its own task only
            std::vector<int> only = {tid};
            PolicyFactory f = operator_policy_factory(adapted, ds.norm, ds.env);
            auto rs = expert_states_eval(one, f, adapt_context, seed,
                                         strategy_name + "_" + mode, 32, &only);
            for (auto& r : rs) {
                r.steps = adapt_steps;
                records.push_back(r);
            }
        }
        write_records(records, out_file(out_dir, "records.tsv"));
        emit_report(records, out_file(out_dir, "report.tsv"));
        std::cout << "adapted " << records.size() << " held-out tasks; report in " << out_dir
                  << "/report.tsv\n";
    } else if (cmd == eval) {
        Dataset ds = load_dataset(dataset_path);
        Checkpoint ck = load_checkpoint(checkpoint_path);
        std::vector<EvalRecord> records;
        OperatorModel op;
        MlpModel mlp;
        PolicyFactory factory;
        if (ck.kind == "operator") {
            op.cfg = parse_operator_config_line(ck.config_line);
            op.params = ck.params;
            factory = operator_policy_factory(op, ds.norm, ds.env);
        } else if (ck.kind == "mlp") {
            mlp.cfg = parse_mlp_config_line(ck.config_line);
            mlp.params = ck.params;
            factory = mlp_policy_factory(mlp, ds.norm, ds.env);
        } else {
            throw DataError("unknown checkpoint kind: " + ck.kind);
        }
        records = expert_states_eval(ds, factory, eval_ctx_size, seed, method_label);
        if (eval_rollout) {
            for (auto& r : records) {
                const TaskRecord& rec = ds.records[r.task_id];
                PolicyFn pol = factory(rec, eval_context(ds, rec, eval_ctx_size, seed));
                RolloutMetrics rm =
                    model_rollout(ds.env, rec.task, pol, rec.trajectories.front().x.front());
                r.terminal_distance = rm.terminal_distance;
                r.collision_timesteps = rm.collision_timesteps;
                if (rm.diverged) {
                    r.diverged = true;
                    r.rel_l2 = std::numeric_limits<double>::infinity();
                }
            }
        }
        write_records(records, out_file(out_dir, "records.tsv"));
        emit_report(records, out_file(out_dir, "report.tsv"));
        Aggregate a = aggregate(records);
        std::cout << "evaluated " << records.size() << " tasks; mean rel L2 " << fmt3(a.mean)
                  << ", median " << fmt3(a.median) << "\n";
    } else if (cmd == sweep) {
        Dataset ds = load_dataset(dataset_path);
        OperatorModel model = model_from_checkpoint(checkpoint_path);
        PolicyFactory f = operator_policy_factory(model, ds.norm, ds.env);
        auto rows = resolution_sweep(ds, f, sweep_sizes, seed, "pretrained");
        std::ofstream os(out_file(out_dir, "sweep.tsv"));
        os << "context\tmedian\tiqr\tmean\ttasks\tdiverged\n";
        for (const auto& row : rows)
            os << row.context_size << '\t' << fmt3(row.agg.median) << '\t' << fmt3(row.agg.iqr)
               << '\t' << fmt3(row.agg.mean) << '\t' << row.agg.count << '\t' << row.agg.diverged
               << '\n';
        if (!os) throw EvalError("sweep: write failure");
        std::cout << "wrote " << out_dir << "/sweep.tsv (" << rows.size() << " sizes)\n";
    } else if (cmd == report) {
        std::vector<EvalRecord> records;
        for (const auto& f : record_files)
            for (auto& r : read_records(f)) records.push_back(std::move(r));
        emit_report(records, out_file(out_dir, "report.tsv"));
        std::cout << "aggregated " << records.size() << " records into " << out_dir
                  << "/report.tsv\n";
    }

    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(out_dir, cmd->get_name(), resolved, wall);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const SolverError& e) {
        std::cerr << "solver error: " << e.what() << "\n";
        return kExitSolver;
    } catch (const TrainError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return kExitTrain;
    } catch (const EvalError& e) {
        std::cerr << "evaluation error: " << e.what() << "\n";
        return kExitEval;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
