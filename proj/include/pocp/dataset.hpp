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

#include <fstream>
#include <sstream>

#include "pocp/experts.hpp"

namespace pocp {

/// Deterministic per-(task, purpose) stream independent of draw order.
inline Rng stream_rng(std::uint64_t seed, std::uint64_t task, std::uint64_t purpose) {
    Rng r(seed);
    std::uint64_t s = r.next_u64();
    return Rng(s ^ (0x9e3779b97f4a7c15ULL * (task * 131071ULL + purpose + 1ULL)));
}

struct TaskRecord {
    int id = 0;
    TaskSpec task;
    Tensor context;  // pool, subsampled at train time
    std::vector<Trajectory> trajectories;
};

/// Per-feature statistics for states, controls, and context columns.
/// Zero-variance features keep std = 1 so apply/unapply stay bijective.
struct Normalizer {
    bool fitted = false;
    std::vector<double> x_mean, x_std;
    std::vector<double> u_mean, u_std;
    std::vector<double> c_mean, c_std;

    static void apply_vec(const std::vector<double>& mean, const std::vector<double>& stdv,
                          std::vector<double>& v) {
        for (size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - mean[i]) / stdv[i];
    }
    static void unapply_vec(const std::vector<double>& mean, const std::vector<double>& stdv,
                            std::vector<double>& v) {
        for (size_t i = 0; i < v.size(); ++i) v[i] = v[i] * stdv[i] + mean[i];
    }

    std::vector<double> norm_state(std::vector<double> x) const {
        if (!fitted) return x;
        apply_vec(x_mean, x_std, x);
        return x;
    }
    std::vector<double> norm_control(std::vector<double> u) const {
        if (!fitted) return u;
        apply_vec(u_mean, u_std, u);
        return u;
    }
    std::vector<double> unnorm_control(std::vector<double> u) const {
        if (!fitted) return u;
        unapply_vec(u_mean, u_std, u);
        return u;
    }
    Tensor norm_context(Tensor c) const {
        if (!fitted) return c;
        for (int i = 0; i < c.rows(); ++i)
            for (int j = 0; j < c.cols(); ++j) c(i, j) = (c(i, j) - c_mean[j]) / c_std[j];
        return c;
    }
};

/// Query row fed to the trunk: normalized state plus time scaled to [0,1].
inline std::vector<double> query_row(const EnvSpec& env, const Normalizer& norm,
                                     const std::vector<double>& x, int t) {
    std::vector<double> q = norm.fitted ? norm.norm_state(x) : x;
    q.push_back(static_cast<double>(t) / env.T);
    return q;
}

struct Dataset {
    static constexpr int kSchemaVersion = 1;
    static constexpr int kContextPool = 512;

    EnvSpec env;
    std::uint64_t seed = 0;
    int n_tasks = 0, n_traj = 0;
    std::vector<TaskRecord> records;
    std::vector<int> train_ids, test_ids;
    Normalizer norm;
    int expert_failures = 0;
};

namespace detail_dataset {

inline Trajectory expert_trajectory(const EnvSpec& env, const TaskSpec& task,
                                    const std::vector<double>& x0) {
    switch (env.id) {
        case EnvId::P2pCost: {
            AffinePolicy pol = lqr_solve(env, task);
            return rollout(env, task,
                           [&](const std::vector<double>& x, int t) { return pol.control(x, t); },
                           x0);
        }
        case EnvId::P2pDyn:
        case EnvId::Quadrotor:
            return ilqr_solve(env, task, x0).traj;
        case EnvId::Obstacle:
            return obstacle_solve(env, task, x0);
    }
    throw ConfigError("bad env enum");
}

}  // namespace detail_dataset

/// Sample n_tasks tasks, run the expert for n_traj initial states each, and
/// attach a fresh context pool per task. Failed experts resample the task;
/// more than 5% failures aborts. Deterministic in the seed.
inline Dataset generate(EnvId id, int n_tasks, int n_traj, std::uint64_t seed) {
    if (n_tasks < 1 || n_traj < 1) throw ConfigError("generate: counts must be positive");
    Dataset ds;
    ds.env = make_env(id);
    ds.seed = seed;
    ds.n_tasks = n_tasks;
    ds.n_traj = n_traj;
    const int max_failures = static_cast<int>(0.05 * n_tasks) + 1;

    for (int i = 0; i < n_tasks; ++i) {
        TaskRecord rec;
        rec.id = i;
        bool done = false;
        for (std::uint64_t attempt = 0; !done; ++attempt) {
            Rng task_rng = stream_rng(seed, i, 16 + attempt);
            TaskSpec task = sample_task(ds.env, task_rng);
            try {
                std::vector<Trajectory> trajs;
                if (id == EnvId::Obstacle) {
                    // Fixed start and deterministic expert: one solve serves
                    // every trajectory slot.
                    Trajectory tr = detail_dataset::expert_trajectory(
                        ds.env, task, sample_initial_state(ds.env, task, task_rng));
                    trajs.assign(n_traj, tr);
                } else {
                    for (int k = 0; k < n_traj; ++k)
                        trajs.push_back(detail_dataset::expert_trajectory(
                            ds.env, task, sample_initial_state(ds.env, task, task_rng)));
                }
                rec.task = task;
                rec.trajectories = std::move(trajs);
                done = true;
            } catch (const SolverError&) {
                if (++ds.expert_failures > max_failures)
                    throw DataError("generate: expert failure rate above 5%");
            }
        }
        Rng ctx_rng = stream_rng(seed, rec.id, 1);
        rec.context = build_context(ds.env, rec.task, ctx_rng, Dataset::kContextPool);
        ds.records.push_back(std::move(rec));
    }

    // 80/20 split by task count (rounded), disjoint by construction.
    std::vector<int> ids(n_tasks);
    for (int i = 0; i < n_tasks; ++i) ids[i] = i;
    Rng split_rng = stream_rng(seed, 0, 2);
    for (int i = n_tasks - 1; i > 0; --i)
        std::swap(ids[i], ids[split_rng.uniform_index(static_cast<std::uint64_t>(i) + 1)]);
    int n_train = static_cast<int>(std::llround(0.8 * n_tasks));
    n_train = std::min(std::max(n_train, 1), n_tasks - (n_tasks > 1 ? 1 : 0));
    ds.train_ids.assign(ids.begin(), ids.begin() + n_train);
    ds.test_ids.assign(ids.begin() + n_train, ids.end());
    std::sort(ds.train_ids.begin(), ds.train_ids.end());
    std::sort(ds.test_ids.begin(), ds.test_ids.end());
    return ds;
}

/// Mean/std over every train-split state, control, and context column.
inline Normalizer fit_normalizer(const Dataset& ds) {
    if (ds.train_ids.empty()) throw DataError("fit_normalizer: empty train split");
    Normalizer n;
    auto accumulate = [](std::vector<double>& mean, std::vector<double>& m2, std::uint64_t& count,
                         const std::vector<double>& v) {
        if (mean.empty()) {
            mean.assign(v.size(), 0.0);
            m2.assign(v.size(), 0.0);
        }
        ++count;
        for (size_t i = 0; i < v.size(); ++i) {  // Welford
            double d = v[i] - mean[i];
            mean[i] += d / static_cast<double>(count);
            m2[i] += d * (v[i] - mean[i]);
        }
    };
    auto finish = [](const std::vector<double>& m2, std::uint64_t count, std::vector<double>& out) {
        out.resize(m2.size());
        for (size_t i = 0; i < m2.size(); ++i) {
            double var = count > 1 ? m2[i] / static_cast<double>(count) : 0.0;
            out[i] = var > 1e-24 ? std::sqrt(var) : 1.0;
        }
    };
    std::vector<double> xm2, um2, cm2;
    std::uint64_t xc = 0, uc = 0, cc = 0;
    for (int tid : ds.train_ids) {
        const TaskRecord& rec = ds.records[tid];
        for (const auto& tr : rec.trajectories) {
            for (const auto& x : tr.x) accumulate(n.x_mean, xm2, xc, x);
            for (const auto& u : tr.u) accumulate(n.u_mean, um2, uc, u);
        }
        for (int i = 0; i < rec.context.rows(); ++i) {
            std::vector<double> row(rec.context.cols());
            for (int j = 0; j < rec.context.cols(); ++j) row[j] = rec.context(i, j);
            accumulate(n.c_mean, cm2, cc, row);
        }
    }
    finish(xm2, xc, n.x_std);
    finish(um2, uc, n.u_std);
    finish(cm2, cc, n.c_std);
    n.fitted = true;
    return n;
}

// ---- persistence -----------------------------------------------------------------
// One manifest block followed by one line per task record; all numbers as
// 17-significant-digit decimal text, so save -> load -> save is byte-identical.

namespace detail_dataset {

inline void put_vec(std::ostream& os, const std::vector<double>& v) {
    os << v.size();
    for (double d : v) os << ' ' << fmt_g17(d);
    os << '\n';
}

inline std::vector<double> get_vec(std::istream& is, const char* what) {
    size_t n;
    if (!(is >> n)) throw DataError(std::string("dataset load: bad vector header for ") + what);
    std::vector<double> v(n);
    for (size_t i = 0; i < n; ++i)
        if (!(is >> v[i])) throw DataError(std::string("dataset load: truncated vector ") + what);
    return v;
}

inline void expect_tag(std::istream& is, const std::string& tag) {
    std::string got;
    if (!(is >> got) || got != tag)
        throw DataError("dataset load: expected '" + tag + "', got '" + got + "'");
}

}  // namespace detail_dataset

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("save_dataset: cannot open " + path);
    os << "pocp-dataset v" << Dataset::kSchemaVersion << '\n';
    os << "env " << env_id_name(ds.env.id) << '\n';
    os << "seed " << ds.seed << '\n';
    os << "tasks " << ds.n_tasks << " traj " << ds.n_traj << " failures " << ds.expert_failures
       << '\n';
    os << "train";
    for (int i : ds.train_ids) os << ' ' << i;
    os << "\ntest";
    for (int i : ds.test_ids) os << ' ' << i;
    os << '\n';
    os << "normalizer " << (ds.norm.fitted ? 1 : 0) << '\n';
    if (ds.norm.fitted) {
        for (const auto* v : {&ds.norm.x_mean, &ds.norm.x_std, &ds.norm.u_mean, &ds.norm.u_std,
                              &ds.norm.c_mean, &ds.norm.c_std}) {
            os << "stat ";
            detail_dataset::put_vec(os, *v);
        }
    }
    for (const auto& rec : ds.records) {
        os << "task " << rec.id << '\n';
        const TaskSpec& t = rec.task;
        switch (ds.env.id) {
            case EnvId::P2pCost:
                os << "spec 2 " << fmt_g17(t.goal_x) << ' ' << fmt_g17(t.goal_y) << '\n';
                break;
            case EnvId::P2pDyn:
                os << "spec 3 " << fmt_g17(t.mu) << ' ' << fmt_g17(t.a_max) << ' '
                   << fmt_g17(t.v_max) << '\n';
                break;
            case EnvId::Quadrotor:
                os << "spec 3 " << fmt_g17(t.mass) << ' ' << fmt_g17(t.arm) << ' '
                   << fmt_g17(t.inertia_scale) << '\n';
                break;
            case EnvId::Obstacle: {
                os << "spec " << 3 * t.obstacles.size();
                for (const auto& o : t.obstacles)
                    os << ' ' << fmt_g17(o.cx) << ' ' << fmt_g17(o.cy) << ' ' << fmt_g17(o.r);
                os << '\n';
                break;
            }
        }
        os << "context " << rec.context.rows() << ' ' << rec.context.cols();
        for (int i = 0; i < rec.context.rows(); ++i)
            for (int j = 0; j < rec.context.cols(); ++j) os << ' ' << fmt_g17(rec.context(i, j));
        os << '\n';
        os << "trajectories " << rec.trajectories.size() << '\n';
        for (const auto& tr : rec.trajectories) {
            os << "traj " << fmt_g17(tr.total_cost);
            for (const auto& x : tr.x)
                for (double d : x) os << ' ' << fmt_g17(d);
            for (const auto& u : tr.u)
                for (double d : u) os << ' ' << fmt_g17(d);
            os << '\n';
        }
    }
    os << "end\n";
    if (!os) throw DataError("save_dataset: write failure on " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("load_dataset: cannot open " + path);
    std::string tag;
    is >> tag;
    if (tag != "pocp-dataset") throw DataError("load_dataset: not a dataset file: " + path);
    is >> tag;
    if (tag != "v1") throw DataError("load_dataset: unsupported schema version " + tag);
    Dataset ds;
    detail_dataset::expect_tag(is, "env");
    is >> tag;
    ds.env = make_env(tag);
    detail_dataset::expect_tag(is, "seed");
    is >> ds.seed;
    detail_dataset::expect_tag(is, "tasks");
    is >> ds.n_tasks;
    detail_dataset::expect_tag(is, "traj");
    is >> ds.n_traj;
    detail_dataset::expect_tag(is, "failures");
    is >> ds.expert_failures;
    if (!is) throw DataError("load_dataset: corrupt manifest header");

    std::string line;
    std::getline(is, line);  // rest of counts line
    auto read_id_line = [&](const char* label, std::vector<int>& out) {
        if (!std::getline(is, line)) throw DataError("load_dataset: missing split line");
        std::istringstream ls(line);
        std::string got;
        ls >> got;
        if (got != label) throw DataError(std::string("load_dataset: expected split line ") + label);
        int v;
        while (ls >> v) out.push_back(v);
    };
    read_id_line("train", ds.train_ids);
    read_id_line("test", ds.test_ids);
    detail_dataset::expect_tag(is, "normalizer");
    int fitted;
    is >> fitted;
    if (fitted) {
        ds.norm.fitted = true;
        for (auto* v : {&ds.norm.x_mean, &ds.norm.x_std, &ds.norm.u_mean, &ds.norm.u_std,
                        &ds.norm.c_mean, &ds.norm.c_std}) {
            detail_dataset::expect_tag(is, "stat");
            *v = detail_dataset::get_vec(is, "normalizer");
        }
    }

    for (int i = 0; i < ds.n_tasks; ++i) {
        TaskRecord rec;
        detail_dataset::expect_tag(is, "task");
        is >> rec.id;
        rec.task.env = ds.env.id;
        detail_dataset::expect_tag(is, "spec");
        std::vector<double> sp = detail_dataset::get_vec(is, "task spec");
        switch (ds.env.id) {
            case EnvId::P2pCost:
                if (sp.size() != 2) throw DataError("load_dataset: bad p2p_cost spec");
                rec.task.goal_x = sp[0];
                rec.task.goal_y = sp[1];
                break;
            case EnvId::P2pDyn:
                if (sp.size() != 3) throw DataError("load_dataset: bad p2p_dyn spec");
                rec.task.mu = sp[0];
                rec.task.a_max = sp[1];
                rec.task.v_max = sp[2];
                break;
            case EnvId::Quadrotor:
                if (sp.size() != 3) throw DataError("load_dataset: bad quadrotor spec");
                rec.task.mass = sp[0];
                rec.task.arm = sp[1];
                rec.task.inertia_scale = sp[2];
                break;
            case EnvId::Obstacle:
                if (sp.size() % 3 != 0) throw DataError("load_dataset: bad obstacle spec");
                for (size_t k = 0; k < sp.size(); k += 3)
                    rec.task.obstacles.push_back({sp[k], sp[k + 1], sp[k + 2]});
                break;
        }
        detail_dataset::expect_tag(is, "context");
        int rows, cols;
        if (!(is >> rows >> cols)) throw DataError("load_dataset: bad context header");
        rec.context = Tensor(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                if (!(is >> rec.context(r, c))) throw DataError("load_dataset: truncated context");
        detail_dataset::expect_tag(is, "trajectories");
        size_t n_traj;
        is >> n_traj;
        for (size_t k = 0; k < n_traj; ++k) {
            detail_dataset::expect_tag(is, "traj");
            Trajectory tr;
            if (!(is >> tr.total_cost)) throw DataError("load_dataset: truncated trajectory");
            tr.x.assign(ds.env.T + 1, std::vector<double>(ds.env.d_x));
            tr.u.assign(ds.env.T, std::vector<double>(ds.env.d_u));
            for (auto& x : tr.x)
                for (double& d : x)
                    if (!(is >> d)) throw DataError("load_dataset: truncated trajectory states");
            for (auto& u : tr.u)
                for (double& d : u)
                    if (!(is >> d)) throw DataError("load_dataset: truncated trajectory controls");
            for (int t = 0; t <= ds.env.T; ++t) tr.times.push_back(t * ds.env.dt);
            if (replay_error(ds.env, rec.task, tr) > 1e-9)
                throw DataError("load_dataset: trajectory fails replay check in task " +
                                std::to_string(rec.id));
            rec.trajectories.push_back(std::move(tr));
        }
        ds.records.push_back(std::move(rec));
    }
    detail_dataset::expect_tag(is, "end");
    if (static_cast<int>(ds.records.size()) != ds.n_tasks)
        throw DataError("load_dataset: manifest task count mismatch");
    return ds;
}

}  // namespace pocp
