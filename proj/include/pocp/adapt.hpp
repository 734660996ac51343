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

#include "pocp/train.hpp"

namespace pocp {

struct AdaptConfig {
    AdaptStrategy strategy = AdaptStrategy::LastBranch;
    int steps = 25;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    bool use_adam = false;
};

struct SurrogateCostSpec {
    double w_coll = 10.0;
    double w_ctrl = 0.1;  // the obstacle environment's dt
    double alpha = 15.0;
    double margin = 0.2;
    double w_term = 50.0;
};

/// All (x_t, t, u_t) pairs of one trajectory as normalized demo matrices.
inline void demos_from_trajectory(const EnvSpec& env, const Normalizer& norm,
                                  const Trajectory& tr, Tensor& queries, Tensor& targets) {
    queries = Tensor(tr.horizon(), env.d_x + 1);
    targets = Tensor(tr.horizon(), env.d_u);
    for (int t = 0; t < tr.horizon(); ++t) {
        std::vector<double> q = query_row(env, norm, tr.x[t], t);
        for (int j = 0; j <= env.d_x; ++j) queries(t, j) = q[j];
        std::vector<double> u = norm.norm_control(tr.u[t]);
        for (int j = 0; j < env.d_u; ++j) targets(t, j) = u[j];
    }
}

namespace detail_adapt {

/// One masked gradient step (plain GD or Adam) on the given scalar loss.
inline void masked_step(OperatorModel& model, const Node& loss, const ParamNodes& leaves,
                        const std::set<std::string>& mask, const AdaptConfig& cfg,
                        AdamState& st) {
    ParamSet grads = grad(loss, leaves);
    if (cfg.use_adam) {
        ParamSet sub, subg;
        for (const auto& name : mask) {
            sub.entries.emplace(name, model.params.at(name));
            subg.entries.emplace(name, grads.at(name));
        }
        adam_step(sub, subg, st, cfg.lr);
        for (const auto& name : mask) model.params.at(name) = sub.at(name);
        return;
    }
    for (const auto& name : mask) {
        Tensor& p = model.params.at(name);
        const Tensor& g = grads.at(name);
        for (size_t i = 0; i < p.data().size(); ++i) {
            if (!std::isfinite(g.data()[i]))
                throw TrainError("finetune: non-finite gradient in " + name);
            p.data()[i] -= cfg.lr * g.data()[i];
        }
    }
}

}  // namespace detail_adapt

/// Supervised fine-tuning on demo pairs, updating only the strategy's
/// parameter partition; everything else stays bit-identical.
inline OperatorModel finetune(const OperatorModel& model, const Tensor& ctx,
                              const Tensor& demo_queries, const Tensor& demo_targets,
                              const AdaptConfig& cfg) {
    if (cfg.steps > 0 && demo_queries.rows() == 0)
        throw ConfigError("finetune: empty demo set with steps > 0");
    OperatorModel out = model;
    std::set<std::string> mask = partition_mask(out.params, cfg.strategy);
    AdamState st;
    for (int step = 0; step < cfg.steps; ++step) {
        ParamNodes leaves = ParamNodes::leaves(out.params);
        Node pred = operator_forward(out, leaves, Node::constant(ctx),
                                     Node::constant(demo_queries));
        Node loss = mean(square(sub(pred, Node::constant(demo_targets))));
        detail_adapt::masked_step(out, loss, leaves, mask, cfg, st);
    }
    return out;
}

/// Full-parameter supervised fine-tuning of a plain MLP policy on demo
/// pairs; the context-free counterpart of finetune.
inline MlpModel finetune_mlp(const MlpModel& model, const Tensor& demo_queries,
                             const Tensor& demo_targets, const AdaptConfig& cfg) {
    if (cfg.steps > 0 && demo_queries.rows() == 0)
        throw ConfigError("finetune_mlp: empty demo set with steps > 0");
    MlpModel out = model;
    AdamState st;
    for (int step = 0; step < cfg.steps; ++step) {
        ParamNodes leaves = ParamNodes::leaves(out.params);
        Node pred = out.forward(leaves, Node::constant(demo_queries));
        Node loss = mean(square(sub(pred, Node::constant(demo_targets))));
        ParamSet grads = grad(loss, leaves);
        if (cfg.use_adam) {
            adam_step(out.params, grads, st, cfg.lr);
            continue;
        }
        for (auto& [name, p] : out.params.entries) {
            const Tensor& g = grads.at(name);
            for (size_t i = 0; i < p.data().size(); ++i) {
                if (!std::isfinite(g.data()[i]))
                    throw TrainError("finetune_mlp: non-finite gradient in " + name);
                p.data()[i] -= cfg.lr * g.data()[i];
            }
        }
    }
    return out;
}

/// Mean squared demo error of a model (normalized control space).
inline double demo_loss(const OperatorModel& model, const Tensor& ctx, const Tensor& demo_queries,
                        const Tensor& demo_targets) {
    ParamNodes leaves = ParamNodes::leaves(model.params);
    Node pred = operator_forward(model, leaves, Node::constant(ctx),
                                 Node::constant(demo_queries));
    return mean(square(sub(pred, Node::constant(demo_targets)))).value()(0, 0);
}

// ---- differentiable closed-loop rollouts ------------------------------------------

struct RolloutGraph {
    std::vector<Node> states;    // T+1, each 1 x d_x
    std::vector<Node> controls;  // T, each 1 x d_u
    Node total_cost;             // scalar (env costs; obstacle: control effort only)
};

/// Unroll x_{t+1} = g(x_t, policy(x_t, t)) as one graph. The policy builder
/// maps (state node, t) to a physical-units control node.
template <class PolicyNodeFn>
RolloutGraph rollout_graph_policy(const EnvSpec& env, const TaskSpec& task,
                                  const std::vector<double>& x0, int T, PolicyNodeFn&& policy) {
    RolloutGraph rg;
    Node x = Node::constant(Tensor::row(std::vector<double>(x0)));
    rg.states.push_back(x);
    Node cost = Node::constant(Tensor::scalar(0.0));
    for (int t = 0; t < T; ++t) {
        for (double v : x.value().data())
            if (!std::isfinite(v))
                throw SolverError("rollout_graph: non-finite state at step " + std::to_string(t));
        Node u = policy(x, t);
        cost = add(cost, stage_cost_node(env, task, x, u));
        x = step_node(env, task, x, u);
        rg.controls.push_back(u);
        rg.states.push_back(x);
    }
    for (double v : x.value().data())
        if (!std::isfinite(v))
            throw SolverError("rollout_graph: non-finite state at step " + std::to_string(T));
    rg.total_cost = add(cost, terminal_cost_node(env, task, x));
    return rg;
}

/// Policy node for the operator model: normalize the state, append t/T,
/// evaluate the trunk against fixed coefficients, un-normalize the output.
inline Node policy_node(const OperatorModel& model, const ParamNodes& leaves,
                        const Normalizer& norm, const EnvSpec& env, const Node& coeffs_t,
                        const Node& x, int t) {
    Node q = x;
    if (norm.fitted) {
        std::vector<double> inv(norm.x_std.size());
        for (size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 / norm.x_std[i];
        q = mul(sub(x, Node::constant(Tensor::row(std::vector<double>(norm.x_mean)))),
                Node::constant(Tensor::row(std::move(inv))));
    }
    q = concat({q, Node::constant(Tensor::scalar(static_cast<double>(t) / env.T))}, 1);
    Node basis = trunk_eval(model, leaves, q);  // 1 x p*d_u
    std::vector<Node> comps;
    for (int j = 0; j < model.cfg.d_u; ++j)
        comps.push_back(matmul(slice(basis, 0, 1, j * model.cfg.p, (j + 1) * model.cfg.p),
                               coeffs_t));
    Node u = concat(comps, 1);
    if (model.cfg.use_bias) u = add(u, leaves.at("bias"));
    if (norm.fitted)
        u = add(mul(u, Node::constant(Tensor::row(std::vector<double>(norm.u_std)))),
                Node::constant(Tensor::row(std::vector<double>(norm.u_mean))));
    return u;
}

/// Closed-loop rollout of the operator policy; ctx must already be normalized.
inline RolloutGraph rollout_graph(const OperatorModel& model, const ParamNodes& leaves,
                                  const Normalizer& norm, const EnvSpec& env, const TaskSpec& task,
                                  const Tensor& ctx, const std::vector<double>& x0, int T) {
    Node coeffs_t = transpose_node(branch_encode(model, leaves, Node::constant(ctx)));  // p x 1
    return rollout_graph_policy(env, task, x0, T, [&](const Node& x, int t) {
        return policy_node(model, leaves, norm, env, coeffs_t, x, t);
    });
}

/// Soft collision surrogate for the obstacle environment:
/// sum_t [ w_coll sum_i exp(-alpha (d_i,t - r_i - m)) + w_ctrl ||u_t||^2 ]
/// plus a terminal goal-reaching penalty w_term ||p_T - goal||^2.
inline Node obstacle_surrogate(const RolloutGraph& rg, const EnvSpec& env, const TaskSpec& task,
                               const SurrogateCostSpec& spec) {
    Node total = Node::constant(Tensor::scalar(0.0));
    const int T = static_cast<int>(rg.controls.size());
    for (int t = 0; t < T; ++t) {
        Node pos = slice(rg.states[t], 0, 1, 0, 2);
        for (const auto& o : task.obstacles) {
            Node d = sqrt_node(sum(square(sub(pos, Node::constant(Tensor::row({o.cx, o.cy}))))));
            Node exponent = add(scalar_mul(d, -spec.alpha),
                                Node::constant(Tensor::scalar(spec.alpha * (o.r + spec.margin))));
            total = add(total, scalar_mul(exp_node(exponent), spec.w_coll));
        }
        total = add(total, scalar_mul(sum(square(rg.controls[t])), spec.w_ctrl));
    }
    Node pT = slice(rg.states[T], 0, 1, 0, 2);
    Node goal = Node::constant(Tensor::row({env.obs_goal_x, env.obs_goal_y}));
    return add(total, scalar_mul(sum(square(sub(pT, goal))), spec.w_term));
}

/// Mean rollout cost over the given initial states as a graph node.
/// Obstacle tasks use the soft surrogate; other environments their true cost.
inline Node mean_rollout_cost(const OperatorModel& model, const ParamNodes& leaves,
                              const Normalizer& norm, const EnvSpec& env, const TaskSpec& task,
                              const Tensor& ctx, const std::vector<std::vector<double>>& x0s,
                              const SurrogateCostSpec& surrogate = {}) {
    if (x0s.empty()) throw ConfigError("mean_rollout_cost: no initial states");
    Node coeffs_t = transpose_node(branch_encode(model, leaves, Node::constant(ctx)));
    Node acc = Node::constant(Tensor::scalar(0.0));
    for (const auto& x0 : x0s) {
        RolloutGraph rg = rollout_graph_policy(env, task, x0, env.T, [&](const Node& x, int t) {
            return policy_node(model, leaves, norm, env, coeffs_t, x, t);
        });
        acc = add(acc, env.id == EnvId::Obstacle ? obstacle_surrogate(rg, env, task, surrogate)
                                                 : rg.total_cost);
    }
    return scalar_mul(acc, 1.0 / static_cast<double>(x0s.size()));
}

/// Cost-feedback adaptation: gradient descent on the mean rollout cost over
/// fixed initial states. No expert data is consumed.
inline OperatorModel cost_adapt(const OperatorModel& model, const Normalizer& norm,
                                const EnvSpec& env, const TaskSpec& task, const Tensor& ctx,
                                const std::vector<std::vector<double>>& x0s,
                                const AdaptConfig& cfg, const SurrogateCostSpec& surrogate = {}) {
    OperatorModel out = model;
    std::set<std::string> mask = partition_mask(out.params, cfg.strategy);
    AdamState st;
    for (int step = 0; step < cfg.steps; ++step) {
        ParamNodes leaves = ParamNodes::leaves(out.params);
        Node loss = mean_rollout_cost(out, leaves, norm, env, task, ctx, x0s, surrogate);
        detail_adapt::masked_step(out, loss, leaves, mask, cfg, st);
    }
    return out;
}

/// cost_adapt variant that also returns intermediate snapshots taken every
/// `every` steps (plus the final model). Callers can select the best snapshot
/// by rollout metrics, which uses only cost feedback from the dynamics model.
inline std::vector<OperatorModel> cost_adapt_snapshots(
    const OperatorModel& model, const Normalizer& norm, const EnvSpec& env, const TaskSpec& task,
    const Tensor& ctx, const std::vector<std::vector<double>>& x0s, const AdaptConfig& cfg,
    int every, const SurrogateCostSpec& surrogate = {}) {
    if (every <= 0) throw ConfigError("cost_adapt_snapshots: every must be positive");
    OperatorModel out = model;
    std::set<std::string> mask = partition_mask(out.params, cfg.strategy);
    AdamState st;
    std::vector<OperatorModel> snaps;
    for (int step = 0; step < cfg.steps; ++step) {
        ParamNodes leaves = ParamNodes::leaves(out.params);
        Node loss = mean_rollout_cost(out, leaves, norm, env, task, ctx, x0s, surrogate);
        detail_adapt::masked_step(out, loss, leaves, mask, cfg, st);
        if ((step + 1) % every == 0 || step == cfg.steps - 1) snaps.push_back(out);
    }
    return snaps;
}

/// Initial states outside the training box: positions uniform in
/// [-15,15]^2 rejected inside [-10,10]^2, velocities zero.
inline std::vector<double> sample_ood_initial_state(Rng& rng) {
    while (true) {
        double px = rng.uniform(-15.0, 15.0), py = rng.uniform(-15.0, 15.0);
        if (std::fabs(px) <= 10.0 && std::fabs(py) <= 10.0) continue;
        return {px, py, 0.0, 0.0};
    }
}

}  // namespace pocp
