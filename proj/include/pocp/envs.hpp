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

#include <algorithm>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "pocp/autodiff.hpp"

namespace pocp {

enum class EnvId { P2pCost, P2pDyn, Quadrotor, Obstacle };

inline EnvId parse_env_id(const std::string& s) {
    if (s == "p2p_cost") return EnvId::P2pCost;
    if (s == "p2p_dyn") return EnvId::P2pDyn;
    if (s == "quadrotor") return EnvId::Quadrotor;
    if (s == "obstacle") return EnvId::Obstacle;
    throw ConfigError("unknown environment: " + s);
}

inline std::string env_id_name(EnvId id) {
    switch (id) {
        case EnvId::P2pCost: return "p2p_cost";
        case EnvId::P2pDyn: return "p2p_dyn";
        case EnvId::Quadrotor: return "quadrotor";
        case EnvId::Obstacle: return "obstacle";
    }
    throw ConfigError("bad env enum");
}

struct EnvSpec {
    EnvId id;
    int d_x, d_u, T;
    double dt;
    Tensor A, B;       // discrete linear dynamics (double-integrator envs)
    Tensor Q, R, Q_T;  // quadratic cost weights
    double gravity = 9.81;
    int ctx_width;

    // Obstacle environment fixed endpoints.
    double obs_start_x = -8.0, obs_start_y = 0.0;
    double obs_goal_x = 8.0, obs_goal_y = 0.0;
};

inline Tensor diag(std::vector<double> d) {
    int n = static_cast<int>(d.size());
    Tensor t(n, n);
    for (int i = 0; i < n; ++i) t(i, i) = d[i];
    return t;
}

inline EnvSpec make_env(EnvId id) {
    EnvSpec e;
    e.id = id;
    switch (id) {
        case EnvId::P2pCost:
        case EnvId::Obstacle:
        case EnvId::P2pDyn: {
            e.d_x = 4;
            e.d_u = 2;
            e.T = 50;
            e.dt = 0.1;
            e.A = Tensor::identity(4);
            e.A(0, 2) = e.A(1, 3) = e.dt;
            e.B = Tensor(4, 2);
            e.B(2, 0) = e.B(3, 1) = e.dt;
            e.Q = diag({1.0, 1.0, 0.1, 0.1});
            e.R = diag({0.1, 0.1});
            e.Q_T = diag({10.0, 10.0, 1.0, 1.0});
            e.ctx_width = id == EnvId::P2pCost ? 8 : (id == EnvId::P2pDyn ? 10 : 3);
            break;
        }
        case EnvId::Quadrotor: {
            e.d_x = 6;
            e.d_u = 2;
            e.T = 60;
            e.dt = 0.05;
            e.Q = diag({1.0, 1.0, 0.5, 0.1, 0.1, 0.1});
            e.R = diag({0.1, 0.1});
            e.Q_T = diag({10.0, 10.0, 5.0, 1.0, 1.0, 1.0});
            e.ctx_width = 14;
            break;
        }
    }
    return e;
}

inline EnvSpec make_env(const std::string& name) { return make_env(parse_env_id(name)); }

struct Obstacle {
    double cx, cy, r;
};

/// One sampled task: cost parameters (goal, obstacles) or dynamics
/// parameters (gain/limits, quadrotor physical constants).
struct TaskSpec {
    EnvId env;
    double goal_x = 0.0, goal_y = 0.0;                    // p2p_cost
    std::vector<Obstacle> obstacles;                      // obstacle
    double mu = 1.0, v_max = 0.0, a_max = 0.0;            // p2p_dyn
    double mass = 0.0, arm = 0.0, inertia_scale = 0.0;    // quadrotor
};

/// Goal/equilibrium state the quadratic costs are centered on.
inline std::vector<double> goal_state(const EnvSpec& env, const TaskSpec& task) {
    switch (env.id) {
        case EnvId::P2pCost: return {task.goal_x, task.goal_y, 0.0, 0.0};
        case EnvId::P2pDyn: return {0.0, 0.0, 0.0, 0.0};
        case EnvId::Quadrotor: return {0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
        case EnvId::Obstacle: return {env.obs_goal_x, env.obs_goal_y, 0.0, 0.0};
    }
    throw ConfigError("bad env enum");
}

/// Control at which the goal state is a fixed point (hover thrust for the
/// quadrotor, zero elsewhere).
inline std::vector<double> equilibrium_control(const EnvSpec& env, const TaskSpec& task) {
    if (env.id == EnvId::Quadrotor) return {task.mass * env.gravity, 0.0};
    return std::vector<double>(env.d_u, 0.0);
}

// ---- dynamics ----------------------------------------------------------------

inline double clip_value(double v, double lo, double hi) {
    return v < lo ? lo : (v > hi ? hi : v);
}

inline std::vector<double> step(const EnvSpec& env, const TaskSpec& task,
                                const std::vector<double>& x, const std::vector<double>& u,
                                int /*t*/ = 0) {
    if (static_cast<int>(x.size()) != env.d_x || static_cast<int>(u.size()) != env.d_u)
        throw DimensionError("step: state/control dimension mismatch");
    for (double v : x)
        if (!std::isfinite(v)) throw SolverError("step: non-finite state");
    for (double v : u)
        if (!std::isfinite(v)) throw SolverError("step: non-finite control");

    switch (env.id) {
        case EnvId::P2pCost:
        case EnvId::Obstacle: {
            std::vector<double> xn(4);
            for (int i = 0; i < 4; ++i) {
                double acc = 0.0;
                for (int j = 0; j < 4; ++j) acc += env.A(i, j) * x[j];
                for (int j = 0; j < 2; ++j) acc += env.B(i, j) * u[j];
                xn[i] = acc;
            }
            return xn;
        }
        case EnvId::P2pDyn: {
            double ax = clip_value(task.mu * u[0], -task.a_max, task.a_max);
            double ay = clip_value(task.mu * u[1], -task.a_max, task.a_max);
            std::vector<double> xn(4);
            xn[0] = x[0] + env.dt * x[2];
            xn[1] = x[1] + env.dt * x[3];
            xn[2] = clip_value(x[2] + env.dt * ax, -task.v_max, task.v_max);
            xn[3] = clip_value(x[3] + env.dt * ay, -task.v_max, task.v_max);
            return xn;
        }
        case EnvId::Quadrotor: {
            double m = task.mass, inertia = task.inertia_scale * task.mass * task.arm * task.arm;
            double s = std::sin(x[2]), c = std::cos(x[2]);
            std::vector<double> xn(6);
            xn[0] = x[0] + env.dt * x[3];
            xn[1] = x[1] + env.dt * x[4];
            xn[2] = x[2] + env.dt * x[5];
            xn[3] = x[3] + env.dt * (-u[0] * s / m);
            xn[4] = x[4] + env.dt * (u[0] * c / m - env.gravity);
            xn[5] = x[5] + env.dt * (u[1] / inertia);
            return xn;
        }
    }
    throw ConfigError("bad env enum");
}

/// Analytic Jacobians of step wrt state and control, using the clip
/// subgradient convention (derivative 1 on the closed interval).
inline void step_jacobians(const EnvSpec& env, const TaskSpec& task, const std::vector<double>& x,
                           const std::vector<double>& u, Tensor& fx, Tensor& fu) {
    fx = Tensor(env.d_x, env.d_x);
    fu = Tensor(env.d_x, env.d_u);
    switch (env.id) {
        case EnvId::P2pCost:
        case EnvId::Obstacle:
            fx = env.A;
            fu = env.B;
            return;
        case EnvId::P2pDyn: {
            auto inside = [](double v, double lim) { return v >= -lim && v <= lim; };
            double ax = task.mu * u[0], ay = task.mu * u[1];
            double ma_x = inside(ax, task.a_max) ? 1.0 : 0.0;
            double ma_y = inside(ay, task.a_max) ? 1.0 : 0.0;
            double vt_x = x[2] + env.dt * clip_value(ax, -task.a_max, task.a_max);
            double vt_y = x[3] + env.dt * clip_value(ay, -task.a_max, task.a_max);
            double mv_x = inside(vt_x, task.v_max) ? 1.0 : 0.0;
            double mv_y = inside(vt_y, task.v_max) ? 1.0 : 0.0;
            fx(0, 0) = fx(1, 1) = 1.0;
            fx(0, 2) = fx(1, 3) = env.dt;
            fx(2, 2) = mv_x;
            fx(3, 3) = mv_y;
            fu(2, 0) = mv_x * env.dt * task.mu * ma_x;
            fu(3, 1) = mv_y * env.dt * task.mu * ma_y;
            return;
        }
        case EnvId::Quadrotor: {
            double m = task.mass, inertia = task.inertia_scale * task.mass * task.arm * task.arm;
            double s = std::sin(x[2]), c = std::cos(x[2]);
            for (int i = 0; i < 6; ++i) fx(i, i) = 1.0;
            fx(0, 3) = fx(1, 4) = fx(2, 5) = env.dt;
            fx(3, 2) = env.dt * (-u[0] * c / m);
            fx(4, 2) = env.dt * (-u[0] * s / m);
            fu(3, 0) = env.dt * (-s / m);
            fu(4, 0) = env.dt * (c / m);
            fu(5, 1) = env.dt / inertia;
            return;
        }
    }
    throw ConfigError("bad env enum");
}

/// Graph-node dynamics step for differentiable rollouts; x is 1 x d_x,
/// u is 1 x d_u, returns 1 x d_x.
inline Node step_node(const EnvSpec& env, const TaskSpec& task, const Node& x, const Node& u) {
    switch (env.id) {
        case EnvId::P2pCost:
        case EnvId::Obstacle:
            return add(matmul(x, Node::constant(transpose(env.A))),
                       matmul(u, Node::constant(transpose(env.B))));
        case EnvId::P2pDyn: {
            Node pos = slice(x, 0, 1, 0, 2);
            Node vel = slice(x, 0, 1, 2, 4);
            Node accel = clip(scalar_mul(u, task.mu), -task.a_max, task.a_max);
            Node pos_n = add(pos, scalar_mul(vel, env.dt));
            Node vel_n = clip(add(vel, scalar_mul(accel, env.dt)), -task.v_max, task.v_max);
            return concat({pos_n, vel_n}, 1);
        }
        case EnvId::Quadrotor: {
            double m = task.mass, inertia = task.inertia_scale * task.mass * task.arm * task.arm;
            Node pos = slice(x, 0, 1, 0, 2);
            Node ang = slice(x, 0, 1, 2, 3);
            Node lin_vel = slice(x, 0, 1, 3, 5);
            Node ang_vel = slice(x, 0, 1, 5, 6);
            Node thrust = slice(u, 0, 1, 0, 1);
            Node torque = slice(u, 0, 1, 1, 2);
            Node acc_y = scalar_mul(mul(thrust, sin_node(ang)), -1.0 / m);
            Node acc_z = add(scalar_mul(mul(thrust, cos_node(ang)), 1.0 / m),
                             Node::constant(Tensor::scalar(-env.gravity)));
            Node pos_n = add(pos, scalar_mul(lin_vel, env.dt));
            Node ang_n = add(ang, scalar_mul(ang_vel, env.dt));
            Node vel_n = add(lin_vel, scalar_mul(concat({acc_y, acc_z}, 1), env.dt));
            Node ang_vel_n = add(ang_vel, scalar_mul(torque, env.dt / inertia));
            return concat({pos_n, ang_n, vel_n, ang_vel_n}, 1);
        }
    }
    throw ConfigError("bad env enum");
}

// ---- costs --------------------------------------------------------------------

inline double quad_form(const Tensor& W, const std::vector<double>& v) {
    double acc = 0.0;
    int n = W.rows();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) acc += v[i] * W(i, j) * v[j];
    return acc;
}

inline double stage_cost(const EnvSpec& env, const TaskSpec& task, const std::vector<double>& x,
                         const std::vector<double>& u, int /*t*/ = 0) {
    std::vector<double> du = u;
    if (env.id == EnvId::Obstacle) return quad_form(env.R, du);
    std::vector<double> dx = x;
    std::vector<double> g = goal_state(env, task);
    for (int i = 0; i < env.d_x; ++i) dx[i] -= g[i];
    std::vector<double> ueq = equilibrium_control(env, task);
    for (int i = 0; i < env.d_u; ++i) du[i] -= ueq[i];
    return quad_form(env.Q, dx) + quad_form(env.R, du);
}

inline double terminal_cost(const EnvSpec& env, const TaskSpec& task,
                            const std::vector<double>& x) {
    if (env.id == EnvId::Obstacle) return 0.0;
    std::vector<double> dx = x;
    std::vector<double> g = goal_state(env, task);
    for (int i = 0; i < env.d_x; ++i) dx[i] -= g[i];
    return quad_form(env.Q_T, dx);
}

/// Graph-node stage cost (quadratic envs); x 1 x d_x, u 1 x d_u -> scalar.
inline Node stage_cost_node(const EnvSpec& env, const TaskSpec& task, const Node& x,
                            const Node& u) {
    Node du = u;
    std::vector<double> ueq = equilibrium_control(env, task);
    bool has_ueq = false;
    for (double v : ueq) has_ueq |= v != 0.0;
    if (has_ueq) du = sub(u, Node::constant(Tensor::row(ueq)));
    Node cu = sum(matmul(matmul(du, Node::constant(env.R)), transpose_node(du)));
    if (env.id == EnvId::Obstacle) return cu;
    Node dx = sub(x, Node::constant(Tensor::row(goal_state(env, task))));
    Node cx = sum(matmul(matmul(dx, Node::constant(env.Q)), transpose_node(dx)));
    return add(cx, cu);
}

inline Node terminal_cost_node(const EnvSpec& env, const TaskSpec& task, const Node& x) {
    if (env.id == EnvId::Obstacle) return Node::constant(Tensor::scalar(0.0));
    Node dx = sub(x, Node::constant(Tensor::row(goal_state(env, task))));
    return sum(matmul(matmul(dx, Node::constant(env.Q_T)), transpose_node(dx)));
}

// ---- task sampling --------------------------------------------------------------

namespace detail_envs {

/// Coarse occupancy-grid breadth-first search between the fixed start and
/// goal. Returns the cell-center waypoints of a shortest free path, or an
/// empty vector when no corridor exists.
inline std::vector<std::pair<double, double>> corridor_path(const EnvSpec& env,
                                                            const std::vector<Obstacle>& obs) {
    const double x0 = -10.0, x1 = 10.0, y0 = -6.0, y1 = 6.0, res = 0.25;
    const int nx = static_cast<int>((x1 - x0) / res) + 1;
    const int ny = static_cast<int>((y1 - y0) / res) + 1;
    auto blocked = [&](int ix, int iy) {
        double px = x0 + ix * res, py = y0 + iy * res;
        for (const auto& o : obs) {
            double dx = px - o.cx, dy = py - o.cy;
            if (dx * dx + dy * dy < (o.r + 0.1) * (o.r + 0.1)) return true;
        }
        return false;
    };
    auto cell = [&](double px, double py) {
        return std::pair<int, int>{static_cast<int>(std::lround((px - x0) / res)),
                                   static_cast<int>(std::lround((py - y0) / res))};
    };
    auto [sx, sy] = cell(env.obs_start_x, env.obs_start_y);
    auto [gx, gy] = cell(env.obs_goal_x, env.obs_goal_y);
    if (blocked(sx, sy) || blocked(gx, gy)) return {};
    std::vector<int> parent(static_cast<size_t>(nx) * ny, -1);
    auto key = [&](int ix, int iy) { return ix * ny + iy; };
    std::queue<std::pair<int, int>> q;
    q.emplace(sx, sy);
    parent[key(sx, sy)] = key(sx, sy);
    const int dxs[4] = {1, -1, 0, 0}, dys[4] = {0, 0, 1, -1};
    bool found = false;
    while (!q.empty() && !found) {
        auto [cx, cy] = q.front();
        q.pop();
        if (cx == gx && cy == gy) {
            found = true;
            break;
        }
        for (int k = 0; k < 4; ++k) {
            int tx = cx + dxs[k], ty = cy + dys[k];
            if (tx < 0 || ty < 0 || tx >= nx || ty >= ny) continue;
            if (parent[key(tx, ty)] >= 0 || blocked(tx, ty)) continue;
            parent[key(tx, ty)] = key(cx, cy);
            q.emplace(tx, ty);
        }
    }
    if (!found) return {};
    std::vector<std::pair<double, double>> path;
    int cur = key(gx, gy);
    while (true) {
        path.emplace_back(x0 + (cur / ny) * res, y0 + (cur % ny) * res);
        if (parent[cur] == cur) break;
        cur = parent[cur];
    }
    std::reverse(path.begin(), path.end());
    path.front() = {env.obs_start_x, env.obs_start_y};
    path.back() = {env.obs_goal_x, env.obs_goal_y};
    return path;
}

inline bool corridor_exists(const EnvSpec& env, const std::vector<Obstacle>& obs) {
    return !corridor_path(env, obs).empty();
}

}  // namespace detail_envs

inline TaskSpec sample_task(const EnvSpec& env, Rng& rng) {
    TaskSpec t;
    t.env = env.id;
    switch (env.id) {
        case EnvId::P2pCost:
            t.goal_x = rng.uniform(-10.0, 10.0);
            t.goal_y = rng.uniform(-10.0, 10.0);
            return t;
        case EnvId::P2pDyn:
            t.mu = rng.uniform(0.5, 1.0);
            t.a_max = rng.uniform(1.0, 5.0);
            t.v_max = rng.uniform(1.0, 5.0);
            return t;
        case EnvId::Quadrotor:
            t.mass = rng.uniform(0.5, 2.0);
            t.arm = rng.uniform(0.1, 0.5);
            t.inertia_scale = rng.uniform(1.0 / 24.0, 1.0 / 6.0);
            return t;
        case EnvId::Obstacle: {
            for (int attempt = 0; attempt < 1000; ++attempt) {
                int n = 2 + static_cast<int>(rng.uniform_index(5));
                std::vector<Obstacle> obs;
                bool clear = true;
                bool blocks_line = false;  // straight start-goal path must be obstructed
                for (int i = 0; i < n; ++i) {
                    Obstacle o;
                    o.cx = rng.uniform(-6.0, 6.0);
                    o.cy = rng.uniform(-4.0, 4.0);
                    o.r = rng.uniform(0.5, 1.5);
                    double ds = std::hypot(o.cx - env.obs_start_x, o.cy - env.obs_start_y);
                    double dg = std::hypot(o.cx - env.obs_goal_x, o.cy - env.obs_goal_y);
                    if (ds < o.r + 0.5 || dg < o.r + 0.5) clear = false;
                    if (std::fabs(o.cy) < o.r) blocks_line = true;
                    obs.push_back(o);
                }
                if (clear && blocks_line && detail_envs::corridor_exists(env, obs)) {
                    t.obstacles = std::move(obs);
                    return t;
                }
            }
            throw DataError("obstacle task sampling: no feasible configuration in 1000 attempts");
        }
    }
    throw ConfigError("bad env enum");
}

inline std::vector<double> sample_initial_state(const EnvSpec& env, const TaskSpec& task,
                                                Rng& rng) {
    switch (env.id) {
        case EnvId::P2pCost:
        case EnvId::P2pDyn:
            return {rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0), 0.0, 0.0};
        case EnvId::Quadrotor:
            return {rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-0.2, 0.2),
                    0.0, 0.0, 0.0};
        case EnvId::Obstacle: {
            (void)task;
            return {env.obs_start_x, env.obs_start_y, 0.0, 0.0};
        }
    }
    throw ConfigError("bad env enum");
}

// ---- context sets ----------------------------------------------------------------

/// Sensor-tuple sampling boxes for context construction.
inline void context_sample_boxes(const EnvSpec& env, std::vector<double>& xlo,
                                 std::vector<double>& xhi, std::vector<double>& ulo,
                                 std::vector<double>& uhi) {
    switch (env.id) {
        case EnvId::P2pCost:
        case EnvId::P2pDyn:
            xlo = {-10, -10, -5, -5};
            xhi = {10, 10, 5, 5};
            ulo = {-20, -20};
            uhi = {20, 20};
            return;
        case EnvId::Quadrotor:
            xlo = {-2, -2, -0.5, -2, -2, -2};
            xhi = {2, 2, 0.5, 2, 2, 2};
            ulo = {0, -5};
            uhi = {40, 5};
            return;
        case EnvId::Obstacle:
            return;  // context is the obstacle list, no sampling boxes
    }
}

/// Context set as an m x ctx_width matrix, one sensor tuple per row.
/// p2p_cost rows: (x, u, t, stage cost); dynamics envs: (x, u, next state);
/// obstacle: (cx, cy, r) with m fixed to the obstacle count.
inline Tensor build_context(const EnvSpec& env, const TaskSpec& task, Rng& rng, int m) {
    if (env.id == EnvId::Obstacle) {
        int n = static_cast<int>(task.obstacles.size());
        Tensor ctx(n, 3);
        for (int i = 0; i < n; ++i) {
            ctx(i, 0) = task.obstacles[i].cx;
            ctx(i, 1) = task.obstacles[i].cy;
            ctx(i, 2) = task.obstacles[i].r;
        }
        return ctx;
    }
    if (m < 1) throw DimensionError("build_context: m must be >= 1");
    std::vector<double> xlo, xhi, ulo, uhi;
    context_sample_boxes(env, xlo, xhi, ulo, uhi);
    Tensor ctx(m, env.ctx_width);
    for (int i = 0; i < m; ++i) {
        std::vector<double> x(env.d_x), u(env.d_u);
        for (int j = 0; j < env.d_x; ++j) x[j] = rng.uniform(xlo[j], xhi[j]);
        for (int j = 0; j < env.d_u; ++j) u[j] = rng.uniform(ulo[j], uhi[j]);
        int col = 0;
        for (int j = 0; j < env.d_x; ++j) ctx(i, col++) = x[j];
        for (int j = 0; j < env.d_u; ++j) ctx(i, col++) = u[j];
        if (env.id == EnvId::P2pCost) {
            int t = static_cast<int>(rng.uniform_index(env.T + 1));
            ctx(i, col++) = static_cast<double>(t);
            ctx(i, col++) = stage_cost(env, task, x, u, t);
        } else {
            std::vector<double> xn = step(env, task, x, u);
            for (int j = 0; j < env.d_x; ++j) ctx(i, col++) = xn[j];
        }
    }
    return ctx;
}

}  // namespace pocp
