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

#include <functional>

#include "pocp/train.hpp"

namespace pocp {

enum class MetaVariant { MetaBranch, MetaFull, Maml };

inline MetaVariant parse_meta_variant(const std::string& s) {
    if (s == "meta_branch") return MetaVariant::MetaBranch;
    if (s == "meta_full") return MetaVariant::MetaFull;
    if (s == "maml") return MetaVariant::Maml;
    throw ConfigError("unknown meta variant: " + s);
}

inline std::string meta_variant_name(MetaVariant v) {
    switch (v) {
        case MetaVariant::MetaBranch: return "meta_branch";
        case MetaVariant::MetaFull: return "meta_full";
        case MetaVariant::Maml: return "maml";
    }
    throw ConfigError("bad meta variant enum");
}

struct MetaConfig {
    MetaVariant variant = MetaVariant::MetaBranch;
    double inner_lr = 1e-2;
    double outer_lr = 1e-3;
    int batch_tasks = 8;
    int inner_steps = 1;
    int support_points = 64;
    int query_points = 64;
    bool second_order = true;
    int steps = 1000;
    std::vector<int> context_sizes = {8, 16, 32, 64, 128};
    std::uint64_t seed = 0;
    int log_every = 100;
};

/// Support/query target points of one task episode; the point sets are
/// disjoint draws from the task's (trajectory, t) pool.
struct EpisodeSplit {
    int task_id = 0;
    Tensor context;              // normalized
    Tensor support_q, support_u;  // inner-loop data
    Tensor query_q, query_u;      // outer-loss data
};

/// B task episodes per meta-step; same seed yields identical episodes.
inline std::vector<EpisodeSplit> episode_sample(const Dataset& ds, const MetaConfig& cfg,
                                                Rng& rng) {
    if (static_cast<int>(ds.train_ids.size()) < 1)
        throw TrainError("episode_sample: empty train split");
    if (!ds.norm.fitted) throw TrainError("episode_sample: normalizer not fitted");
    int m = cfg.context_sizes[rng.uniform_index(cfg.context_sizes.size())];
    std::vector<EpisodeSplit> out;
    for (int b = 0; b < cfg.batch_tasks; ++b) {
        int tid = ds.train_ids[rng.uniform_index(ds.train_ids.size())];
        const TaskRecord& rec = ds.records[tid];
        EpisodeSplit ep;
        ep.task_id = tid;

        Tensor ctx;
        if (ds.env.id == EnvId::Obstacle) {
            ctx = rec.context;
        } else {
            if (m > rec.context.rows()) throw TrainError("episode_sample: context pool too small");
            std::vector<int> idx(rec.context.rows());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
            for (int i = 0; i < m; ++i)
                std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);
            ctx = Tensor(m, rec.context.cols());
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < rec.context.cols(); ++j) ctx(i, j) = rec.context(idx[i], j);
        }
        ep.context = ds.norm.norm_context(std::move(ctx));

        // Disjoint support/query draws from the flat (trajectory, t) pool.
        const int pool = static_cast<int>(rec.trajectories.size()) * ds.env.T;
        const int need = cfg.support_points + cfg.query_points;
        if (need > pool) throw TrainError("episode_sample: target pool smaller than episode");
        std::vector<int> flat(pool);
        for (int i = 0; i < pool; ++i) flat[i] = i;
        for (int i = 0; i < need; ++i)
            std::swap(flat[i], flat[i + rng.uniform_index(flat.size() - i)]);
        auto fill = [&](int offset, int count, Tensor& q, Tensor& y) {
            q = Tensor(count, ds.env.d_x + 1);
            y = Tensor(count, ds.env.d_u);
            for (int i = 0; i < count; ++i) {
                int t = flat[offset + i] % ds.env.T;
                const Trajectory& tr = rec.trajectories[flat[offset + i] / ds.env.T];
                std::vector<double> row = query_row(ds.env, ds.norm, tr.x[t], t);
                for (int j = 0; j <= ds.env.d_x; ++j) q(i, j) = row[j];
                std::vector<double> u = ds.norm.norm_control(tr.u[t]);
                for (int j = 0; j < ds.env.d_u; ++j) y(i, j) = u[j];
            }
        };
        fill(0, cfg.support_points, ep.support_q, ep.support_u);
        fill(cfg.support_points, cfg.query_points, ep.query_q, ep.query_u);
        out.push_back(std::move(ep));
    }
    return out;
}

/// Builds the episode loss from a set of parameter nodes; shared by the
/// operator variants and the MAML baseline.
using EpisodeLossFn =
    std::function<Node(const ParamNodes&, const Tensor& ctx, const Tensor& q, const Tensor& y)>;

/// theta' = theta - alpha * grad L_support over the masked names, as graph
/// nodes so outer gradients can flow through (unless first-order).
inline ParamNodes inner_step_nodes(const ParamNodes& theta, const Node& support_loss,
                                   const std::set<std::string>& mask, double alpha,
                                   bool second_order) {
    std::vector<std::string> names;
    std::vector<Node> wrt;
    for (const auto& n : mask) {
        names.push_back(n);
        wrt.push_back(theta.at(n));
    }
    std::vector<Node> gs = grad_nodes(support_loss, wrt);
    ParamNodes adapted = theta;  // untouched entries stay reference-identical
    for (size_t i = 0; i < names.size(); ++i) {
        Node g = second_order ? gs[i] : detach(gs[i]);
        adapted.entries.at(names[i]) = sub(theta.at(names[i]), scalar_mul(g, alpha));
    }
    return adapted;
}

/// inner_step with the variant's partition rule applied to the model params.
inline ParamNodes inner_step(const ParamSet& params, const ParamNodes& theta,
                             const Node& support_loss, MetaVariant variant, double alpha,
                             bool second_order) {
    std::set<std::string> mask =
        variant == MetaVariant::MetaBranch ? partition_mask(params, AdaptStrategy::Branch)
                                           : partition_mask(params, AdaptStrategy::Full);
    return inner_step_nodes(theta, support_loss, mask, alpha, second_order);
}

/// Shared bi-level driver: outer Adam on the mean post-adaptation query loss.
/// The MAML baseline and the operator variants differ only in loss_fn and in
/// the inner mask; this function is the single code path for all of them.
inline LossLog meta_train_driver(ParamSet& params, const Dataset& ds, const MetaConfig& cfg,
                                 const EpisodeLossFn& loss_fn) {
    Rng rng(cfg.seed);
    AdamState st;
    LossLog log;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<EpisodeSplit> episodes = episode_sample(ds, cfg, rng);
        ParamNodes theta = ParamNodes::leaves(params);
        std::vector<Node> query_losses;
        for (const EpisodeSplit& ep : episodes) {
            ParamNodes adapted = theta;
            for (int k = 0; k < cfg.inner_steps; ++k) {
                Node support_loss = loss_fn(adapted, ep.context, ep.support_q, ep.support_u);
                adapted = inner_step(params, adapted, support_loss, cfg.variant, cfg.inner_lr,
                                     cfg.second_order);
            }
            query_losses.push_back(loss_fn(adapted, ep.context, ep.query_q, ep.query_u));
        }
        Node acc = query_losses[0];
        for (size_t i = 1; i < query_losses.size(); ++i) acc = add(acc, query_losses[i]);
        Node meta_loss = scalar_mul(acc, 1.0 / static_cast<double>(query_losses.size()));
        double lv = meta_loss.value()(0, 0);
        if (!std::isfinite(lv))
            throw TrainError("meta_train: non-finite meta-loss at step " + std::to_string(step));
        if (step % cfg.log_every == 0 || step == cfg.steps - 1) log.entries.emplace_back(step, lv);
        ParamSet grads = grad(meta_loss, theta);
        adam_step(params, grads, st, cfg.outer_lr);
    }
    return log;
}

inline EpisodeLossFn operator_episode_loss(const OperatorModel& model) {
    return [&model](const ParamNodes& theta, const Tensor& ctx, const Tensor& q, const Tensor& y) {
        Node pred = operator_forward(model, theta, Node::constant(ctx), Node::constant(q));
        return mean(square(sub(pred, Node::constant(y))));
    };
}

inline EpisodeLossFn maml_episode_loss(const MlpModel& model) {
    return [&model](const ParamNodes& theta, const Tensor&, const Tensor& q, const Tensor& y) {
        Node pred = model.forward(theta, Node::constant(q));
        return mean(square(sub(pred, Node::constant(y))));
    };
}

/// Meta-train an operator (variant meta_branch or meta_full).
inline LossLog meta_train(OperatorModel& model, const Dataset& ds, const MetaConfig& cfg) {
    if (cfg.variant == MetaVariant::Maml)
        throw ConfigError("meta_train: maml variant requires the MLP baseline model");
    return meta_train_driver(model.params, ds, cfg, operator_episode_loss(model));
}

/// Meta-train the context-free MAML MLP baseline.
inline LossLog meta_train(MlpModel& model, const Dataset& ds, const MetaConfig& cfg) {
    if (cfg.variant != MetaVariant::Maml)
        throw ConfigError("meta_train: operator variants require the operator model");
    return meta_train_driver(model.params, ds, cfg, maml_episode_loss(model));
}

}  // namespace pocp
