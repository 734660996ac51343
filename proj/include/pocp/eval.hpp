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

#include <iomanip>
#include <limits>

#include "pocp/adapt.hpp"
#include "pocp/meta.hpp"

namespace pocp {

struct EvalRecord {
    std::string env, method;
    int task_id = 0;
    int steps = 0;         // adaptation steps behind this record
    int context_size = 0;
    std::uint64_t seed = 0;
    double rel_l2 = 0.0;   // infinity marks a diverged rollout
    double terminal_distance = 0.0;
    int collision_timesteps = 0;
    bool diverged = false;
};

/// ||pred - expert||_2 / ||expert||_2 over concatenated control vectors.
inline double relative_l2(const std::vector<std::vector<double>>& pred,
                          const std::vector<std::vector<double>>& expert) {
    if (pred.size() != expert.size()) throw EvalError("relative_l2: length mismatch");
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].size() != expert[i].size()) throw EvalError("relative_l2: width mismatch");
        for (size_t j = 0; j < pred[i].size(); ++j) {
            double d = pred[i][j] - expert[i][j];
            num += d * d;
            den += expert[i][j] * expert[i][j];
        }
    }
    if (den == 0.0) throw EvalError("relative_l2: zero expert norm");
    return std::sqrt(num / den);
}

// ---- policies ---------------------------------------------------------------------

using PolicyFn = std::function<std::vector<double>(const std::vector<double>&, int)>;
/// Builds a task-conditioned policy from a record and its normalized context.
using PolicyFactory = std::function<PolicyFn(const TaskRecord&, const Tensor&)>;

/// Operator policy with the branch coefficients computed once per task.
inline PolicyFactory operator_policy_factory(const OperatorModel& model, const Normalizer& norm,
                                             const EnvSpec& env) {
    return [&model, &norm, &env](const TaskRecord&, const Tensor& ctx_norm) -> PolicyFn {
        ParamNodes leaves = ParamNodes::leaves(model.params);
        Tensor coeffs = branch_encode(model, leaves, Node::constant(ctx_norm)).value();  // 1 x p
        double bias0 = 0.0, bias1 = 0.0;
        if (model.cfg.use_bias) {
            bias0 = model.params.at("bias")(0, 0);
            if (model.cfg.d_u > 1) bias1 = model.params.at("bias")(0, 1);
        }
        return [&model, &norm, &env, leaves, coeffs, bias0, bias1](const std::vector<double>& x,
                                                                   int t) {
            Tensor q(1, env.d_x + 1);
            std::vector<double> row = query_row(env, norm, x, t);
            for (int j = 0; j <= env.d_x; ++j) q(0, j) = row[j];
            Tensor basis = trunk_basis(model, leaves, q);  // p x d_u
            std::vector<double> u(env.d_u, 0.0);
            for (int j = 0; j < env.d_u; ++j)
                for (int k = 0; k < model.cfg.p; ++k) u[j] += coeffs(0, k) * basis(k, j);
            if (model.cfg.use_bias) {
                u[0] += bias0;
                if (env.d_u > 1) u[1] += bias1;
            }
            return norm.fitted ? norm.unnorm_control(u) : u;
        };
    };
}

/// Context-free MLP baseline policy.
inline PolicyFactory mlp_policy_factory(const MlpModel& model, const Normalizer& norm,
                                        const EnvSpec& env) {
    return [&model, &norm, &env](const TaskRecord&, const Tensor&) -> PolicyFn {
        return [&model, &norm, &env](const std::vector<double>& x, int t) {
            Tensor q(1, env.d_x + 1);
            std::vector<double> row = query_row(env, norm, x, t);
            for (int j = 0; j <= env.d_x; ++j) q(0, j) = row[j];
            ParamNodes leaves = ParamNodes::leaves(model.params);
            Tensor out = model.forward(leaves, Node::constant(q)).value();
            std::vector<double> u(out.data());
            return norm.fitted ? norm.unnorm_control(u) : u;
        };
    };
}

/// Deterministic per-task context subsample used for evaluation.
inline Tensor eval_context(const Dataset& ds, const TaskRecord& rec, int m, std::uint64_t seed) {
    auto finish = [&](Tensor c) { return ds.norm.fitted ? ds.norm.norm_context(std::move(c)) : c; };
    if (ds.env.id == EnvId::Obstacle) return finish(rec.context);
    if (m < 1 || m > rec.context.rows()) throw EvalError("eval_context: bad context size");
    Rng rng = stream_rng(seed, rec.id, 3);
    std::vector<int> idx(rec.context.rows());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (int i = 0; i < m; ++i) std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);
    Tensor ctx(m, rec.context.cols());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < rec.context.cols(); ++j) ctx(i, j) = rec.context(idx[i], j);
    return finish(std::move(ctx));
}

/// Per-task relative L2 of model controls at the states the expert visited,
/// concatenated over (at most 32) evaluation trajectories.
inline std::vector<EvalRecord> expert_states_eval(const Dataset& ds, const PolicyFactory& factory,
                                                  int context_size, std::uint64_t seed,
                                                  const std::string& method,
                                                  int max_eval_traj = 32,
                                                  const std::vector<int>* task_ids = nullptr) {
    const std::vector<int>& ids = task_ids ? *task_ids : ds.test_ids;
    std::vector<EvalRecord> out;
    for (int tid : ids) {
        const TaskRecord& rec = ds.records[tid];
        PolicyFn policy = factory(rec, eval_context(ds, rec, context_size, seed));
        std::vector<std::vector<double>> pred, expert;
        int n_traj = std::min<int>(max_eval_traj, static_cast<int>(rec.trajectories.size()));
        for (int k = 0; k < n_traj; ++k) {
            const Trajectory& tr = rec.trajectories[k];
            for (int t = 0; t < tr.horizon(); ++t) {
                pred.push_back(policy(tr.x[t], t));
                expert.push_back(tr.u[t]);
            }
        }
        EvalRecord r;
        r.env = env_id_name(ds.env.id);
        r.method = method;
        r.task_id = tid;
        r.context_size = context_size;
        r.seed = seed;
        r.rel_l2 = relative_l2(pred, expert);
        out.push_back(std::move(r));
    }
    return out;
}

// ---- closed-loop rollout metrics -----------------------------------------------------

struct RolloutMetrics {
    Trajectory traj;
    double terminal_distance = 0.0;
    int collision_timesteps = 0;
    bool diverged = false;  // state norm exceeded 1e6; trajectory truncated
};

inline RolloutMetrics model_rollout(const EnvSpec& env, const TaskSpec& task,
                                    const PolicyFn& policy, const std::vector<double>& x0) {
    RolloutMetrics rm;
    rm.traj.x.push_back(x0);
    rm.traj.times.push_back(0.0);
    std::vector<double> x = x0;
    for (int t = 0; t < env.T; ++t) {
        double inf_norm = 0.0;
        for (double v : x) inf_norm = std::max(inf_norm, std::fabs(v));
        if (inf_norm > 1e6) {
            rm.diverged = true;
            break;
        }
        try {
            std::vector<double> u = policy(x, t);
            rm.traj.total_cost += stage_cost(env, task, x, u, t);
            x = step(env, task, x, u, t);
            rm.traj.u.push_back(std::move(u));
            rm.traj.x.push_back(x);
            rm.traj.times.push_back((t + 1) * env.dt);
        } catch (const SolverError&) {
            rm.diverged = true;
            break;
        }
    }
    if (!rm.diverged) rm.traj.total_cost += terminal_cost(env, task, x);
    const auto& xT = rm.traj.x.back();
    std::vector<double> g = goal_state(env, task);
    rm.terminal_distance = std::hypot(xT[0] - g[0], xT[1] - g[1]);
    if (env.id == EnvId::Obstacle)
        for (const auto& xs : rm.traj.x)
            for (const auto& o : task.obstacles)
                if (std::hypot(xs[0] - o.cx, xs[1] - o.cy) < o.r) {
                    ++rm.collision_timesteps;
                    break;
                }
    return rm;
}

// ---- aggregation ---------------------------------------------------------------------

struct Aggregate {
    double mean = 0.0, median = 0.0, iqr = 0.0;
    int count = 0, diverged = 0;
};

/// Divergent (infinite) errors are counted separately and excluded from the
/// mean/median/IQR, which the error distribution's right skew motivates.
inline Aggregate aggregate(const std::vector<EvalRecord>& records) {
    Aggregate a;
    std::vector<double> vals;
    for (const auto& r : records) {
        ++a.count;
        if (r.diverged || !std::isfinite(r.rel_l2))
            ++a.diverged;
        else
            vals.push_back(r.rel_l2);
    }
    if (vals.empty()) return a;
    std::sort(vals.begin(), vals.end());
    auto quantile = [&](double q) {
        double pos = q * (vals.size() - 1);
        size_t lo = static_cast<size_t>(pos);
        size_t hi = std::min(lo + 1, vals.size() - 1);
        double w = pos - lo;
        return (1 - w) * vals[lo] + w * vals[hi];
    };
    for (double v : vals) a.mean += v;
    a.mean /= vals.size();
    a.median = quantile(0.5);
    a.iqr = quantile(0.75) - quantile(0.25);
    return a;
}

struct SweepRow {
    int context_size = 0;
    Aggregate agg;
};

/// expert_states_eval at each context size, trained or not.
inline std::vector<SweepRow> resolution_sweep(const Dataset& ds, const PolicyFactory& factory,
                                              const std::vector<int>& sizes, std::uint64_t seed,
                                              const std::string& method) {
    if (sizes.empty()) throw EvalError("resolution_sweep: no sizes");
    std::vector<SweepRow> rows;
    for (int m : sizes) {
        SweepRow row;
        row.context_size = m;
        row.agg = aggregate(expert_states_eval(ds, factory, m, seed, method));
        rows.push_back(row);
    }
    return rows;
}

// ---- comparisons and reports ----------------------------------------------------------

struct CompareResult {
    std::vector<std::tuple<int, double, double>> pairs;  // (task id, error A, error B)
    double fraction_a_above = 0.0;  // fraction with error A > error B; ties count 0.5
};

inline CompareResult per_task_compare(const std::vector<EvalRecord>& a,
                                      const std::vector<EvalRecord>& b) {
    std::map<int, double> by_id;
    for (const auto& r : b) by_id[r.task_id] = r.rel_l2;
    if (a.size() != b.size()) throw EvalError("per_task_compare: record count mismatch");
    CompareResult res;
    double above = 0.0;
    for (const auto& r : a) {
        auto it = by_id.find(r.task_id);
        if (it == by_id.end())
            throw EvalError("per_task_compare: task " + std::to_string(r.task_id) +
                            " missing from second record set");
        res.pairs.emplace_back(r.task_id, r.rel_l2, it->second);
        if (r.rel_l2 > it->second)
            above += 1.0;
        else if (r.rel_l2 == it->second)
            above += 0.5;
    }
    res.fraction_a_above = above / static_cast<double>(res.pairs.size());
    return res;
}

inline std::string fmt3(double v) {
    if (!std::isfinite(v)) return "inf";
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << v;
    return os.str();
}

/// Tab-delimited summary grouped by environment, method, and adaptation
/// steps; deterministic bytes for fixed records.
inline void emit_report(const std::vector<EvalRecord>& records, const std::string& path) {
    if (records.empty()) throw EvalError("emit_report: no records");
    std::map<std::tuple<std::string, std::string, int>, std::vector<EvalRecord>> groups;
    for (const auto& r : records) groups[{r.env, r.method, r.steps}].push_back(r);
    std::ofstream os(path);
    if (!os) throw EvalError("emit_report: cannot open " + path);
    os << "env\tmethod\tsteps\tmean\tmedian\tiqr\ttasks\tdiverged\n";
    for (const auto& [key, rs] : groups) {
        Aggregate a = aggregate(rs);
        os << std::get<0>(key) << '\t' << std::get<1>(key) << '\t' << std::get<2>(key) << '\t'
           << fmt3(a.mean) << '\t' << fmt3(a.median) << '\t' << fmt3(a.iqr) << '\t' << a.count
           << '\t' << a.diverged << '\n';
    }
    if (!os) throw EvalError("emit_report: write failure on " + path);
}

/// Raw records as delimited text for external plotting.
inline void write_records(const std::vector<EvalRecord>& records, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw EvalError("write_records: cannot open " + path);
    os << "env\tmethod\ttask\tsteps\tcontext\tseed\trel_l2\tterminal_distance\tcollisions\t"
          "diverged\n";
    for (const auto& r : records)
        os << r.env << '\t' << r.method << '\t' << r.task_id << '\t' << r.steps << '\t'
           << r.context_size << '\t' << r.seed << '\t' << fmt_g17(r.rel_l2) << '\t'
           << fmt_g17(r.terminal_distance) << '\t' << r.collision_timesteps << '\t'
           << (r.diverged ? 1 : 0) << '\n';
}

inline std::vector<EvalRecord> read_records(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw EvalError("read_records: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line.rfind("env\tmethod\ttask", 0) != 0)
        throw EvalError("read_records: bad header in " + path);
    std::vector<EvalRecord> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        EvalRecord r;
        std::string rel, term;
        int div = 0;
        if (!(std::getline(ls, r.env, '\t') && std::getline(ls, r.method, '\t') &&
              (ls >> r.task_id >> r.steps >> r.context_size >> r.seed >> rel >> term >>
               r.collision_timesteps >> div)))
            throw EvalError("read_records: corrupt row in " + path);
        r.rel_l2 = rel == "inf" ? std::numeric_limits<double>::infinity() : std::stod(rel);
        r.terminal_distance = term == "inf" ? std::numeric_limits<double>::infinity()
                                            : std::stod(term);
        r.diverged = div != 0;
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace pocp
