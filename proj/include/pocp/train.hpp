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
#pragma once

#include "pocp/dataset.hpp"
#include "pocp/nets.hpp"

namespace pocp {

struct TrainConfig {
    int steps = 20000;
    int batch_tasks = 16;
    int queries_per_task = 64;
    std::vector<int> context_sizes = {8, 16, 32, 64, 128};
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::uint64_t seed = 0;
    int checkpoint_every = 5000;
    std::string checkpoint_path;  // empty disables checkpointing
    int log_every = 100;
};

struct AdamState {
    std::map<std::string, Tensor> m, v;
    long step = 0;
};

/// Standard bias-corrected Adam update, applied in place. Non-finite
/// gradients abort with the offending parameter and step index.
inline void adam_step(ParamSet& params, const ParamSet& grads, AdamState& st, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    ++st.step;
    for (auto& [name, p] : params.entries) {
        const Tensor& g = grads.at(name);
        if (g.rows() != p.rows() || g.cols() != p.cols())
            throw TrainError("adam_step: gradient shape mismatch for " + name);
        for (double v : g.data())
            if (!std::isfinite(v))
                throw TrainError("adam_step: non-finite gradient in " + name + " at step " +
                                 std::to_string(st.step));
        if (!st.m.count(name)) {
            st.m.emplace(name, Tensor(p.rows(), p.cols()));
            st.v.emplace(name, Tensor(p.rows(), p.cols()));
        }
        Tensor& m = st.m.at(name);
        Tensor& v = st.v.at(name);
        double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
        double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
        for (size_t i = 0; i < p.data().size(); ++i) {
            double gi = g.data()[i];
            m.data()[i] = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            v.data()[i] = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            double mhat = m.data()[i] / c1, vhat = v.data()[i] / c2;
            p.data()[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

/// One training batch: per-task normalized contexts, query rows, and
/// normalized expert controls. The context size m is shared by the batch.
struct Minibatch {
    int m = 0;
    std::vector<int> task_ids;
    std::vector<Tensor> contexts;
    std::vector<Tensor> queries;
    std::vector<Tensor> targets;
};

/// Subsample m pool rows without replacement (obstacle contexts are the
/// whole list); queries are uniform (trajectory, t) draws per task.
inline Minibatch sample_minibatch(const Dataset& ds, const TrainConfig& cfg, Rng& rng) {
    if (ds.train_ids.empty()) throw TrainError("sample_minibatch: empty train split");
    if (!ds.norm.fitted) throw TrainError("sample_minibatch: normalizer not fitted");
    Minibatch b;
    b.m = cfg.context_sizes[rng.uniform_index(cfg.context_sizes.size())];
    for (int k = 0; k < cfg.batch_tasks; ++k) {
        int tid = ds.train_ids[rng.uniform_index(ds.train_ids.size())];
        const TaskRecord& rec = ds.records[tid];
        b.task_ids.push_back(tid);

        Tensor ctx;
        if (ds.env.id == EnvId::Obstacle) {
            ctx = rec.context;
        } else {
            if (b.m > rec.context.rows())
                throw TrainError("sample_minibatch: context size exceeds pool");
            std::vector<int> idx(rec.context.rows());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
            for (int i = 0; i < b.m; ++i)  // partial Fisher-Yates
                std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);
            ctx = Tensor(b.m, rec.context.cols());
            for (int i = 0; i < b.m; ++i)
                for (int j = 0; j < rec.context.cols(); ++j) ctx(i, j) = rec.context(idx[i], j);
        }
        b.contexts.push_back(ds.norm.norm_context(std::move(ctx)));

        Tensor q(cfg.queries_per_task, ds.env.d_x + 1);
        Tensor y(cfg.queries_per_task, ds.env.d_u);
        for (int i = 0; i < cfg.queries_per_task; ++i) {
            const Trajectory& tr = rec.trajectories[rng.uniform_index(rec.trajectories.size())];
            int t = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(ds.env.T)));
            std::vector<double> row = query_row(ds.env, ds.norm, tr.x[t], t);
            for (int j = 0; j <= ds.env.d_x; ++j) q(i, j) = row[j];
            std::vector<double> u = ds.norm.norm_control(tr.u[t]);
            for (int j = 0; j < ds.env.d_u; ++j) y(i, j) = u[j];
        }
        b.queries.push_back(std::move(q));
        b.targets.push_back(std::move(y));
    }
    return b;
}

/// Mean squared error of batch predictions in normalized control space,
/// as a graph node over the given parameter leaves.
inline Node batch_loss(const OperatorModel& model, const ParamNodes& leaves, const Minibatch& b) {
    std::vector<Node> per_task;
    for (size_t k = 0; k < b.contexts.size(); ++k) {
        Node pred = operator_forward(model, leaves, Node::constant(b.contexts[k]),
                                     Node::constant(b.queries[k]));
        Node err = sub(pred, Node::constant(b.targets[k]));
        per_task.push_back(mean(square(err)));
    }
    Node acc = per_task[0];
    for (size_t k = 1; k < per_task.size(); ++k) acc = add(acc, per_task[k]);
    return scalar_mul(acc, 1.0 / static_cast<double>(per_task.size()));
}

struct LossLog {
    std::vector<std::pair<int, double>> entries;  // (step, loss)
};

/// Behavioral cloning: Adam on the batched normalized-control MSE.
/// Bit-reproducible from (seed, dataset, config).
inline LossLog bc_train(OperatorModel& model, const Dataset& ds, const TrainConfig& cfg) {
    if (!ds.norm.fitted) throw TrainError("bc_train: normalizer not fitted");
    Rng rng(cfg.seed);
    AdamState st;
    LossLog log;
    for (int step = 0; step < cfg.steps; ++step) {
        Minibatch b = sample_minibatch(ds, cfg, rng);
        ParamNodes leaves = ParamNodes::leaves(model.params);
        Node loss = batch_loss(model, leaves, b);
        double lv = loss.value()(0, 0);
        if (!std::isfinite(lv))
            throw TrainError("bc_train: non-finite loss at step " + std::to_string(step));
        if (step % cfg.log_every == 0 || step == cfg.steps - 1) log.entries.emplace_back(step, lv);
        ParamSet grads = grad(loss, leaves);
        adam_step(model.params, grads, st, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
            (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps)
            save_checkpoint(cfg.checkpoint_path + ".step" + std::to_string(step + 1), "operator",
                            "pretrained", operator_config_line(model.cfg), model.params);
    }
    if (!cfg.checkpoint_path.empty())
        save_checkpoint(cfg.checkpoint_path, "operator", "pretrained",
                        operator_config_line(model.cfg), model.params);
    return log;
}

inline void write_loss_log(const LossLog& log, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw TrainError("write_loss_log: cannot open " + path);
    os << "step\tloss\n";
    for (const auto& [s, l] : log.entries) os << s << '\t' << fmt_g17(l) << '\n';
}

}  // namespace pocp
