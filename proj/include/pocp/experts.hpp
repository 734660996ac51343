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

#include <array>
#include <functional>

#include "pocp/envs.hpp"

namespace pocp {

/// Time-varying affine feedback around a nominal trajectory:
/// u(x, t) = u_nom[t] + k[t] + K[t] (x - x_nom[t]).
struct AffinePolicy {
    std::vector<Tensor> K;                    // T gains, d_u x d_x
    std::vector<std::vector<double>> k;       // T offsets (zero at convergence)
    std::vector<std::vector<double>> x_nom;   // T+1 states
    std::vector<std::vector<double>> u_nom;   // T controls

    int horizon() const { return static_cast<int>(u_nom.size()); }

    std::vector<double> control(const std::vector<double>& x, int t) const {
        const Tensor& Kt = K[t];
        std::vector<double> u = u_nom[t];
        for (int i = 0; i < Kt.rows(); ++i) {
            u[i] += k[t][i];
            for (int j = 0; j < Kt.cols(); ++j) u[i] += Kt(i, j) * (x[j] - x_nom[t][j]);
        }
        return u;
    }
};

struct Trajectory {
    std::vector<std::vector<double>> x;  // T+1 states
    std::vector<std::vector<double>> u;  // T controls
    std::vector<double> times;           // T+1 physical times
    double total_cost = 0.0;

    int horizon() const { return static_cast<int>(u.size()); }
};

/// Roll a feedback law through the dynamics and record states, controls,
/// and accumulated cost.
template <class PolicyFn>
Trajectory rollout(const EnvSpec& env, const TaskSpec& task, PolicyFn&& policy,
                   const std::vector<double>& x0) {
    Trajectory traj;
    traj.x.push_back(x0);
    traj.times.push_back(0.0);
    std::vector<double> x = x0;
    for (int t = 0; t < env.T; ++t) {
        std::vector<double> u = policy(x, t);
        traj.total_cost += stage_cost(env, task, x, u, t);
        x = step(env, task, x, u, t);
        traj.u.push_back(std::move(u));
        traj.x.push_back(x);
        traj.times.push_back((t + 1) * env.dt);
    }
    traj.total_cost += terminal_cost(env, task, x);
    return traj;
}

/// Max state replay error when re-applying a trajectory's controls.
inline double replay_error(const EnvSpec& env, const TaskSpec& task, const Trajectory& traj) {
    double worst = 0.0;
    std::vector<double> x = traj.x[0];
    for (int t = 0; t < traj.horizon(); ++t) {
        x = step(env, task, x, traj.u[t], t);
        for (int i = 0; i < env.d_x; ++i) worst = std::max(worst, std::fabs(x[i] - traj.x[t + 1][i]));
    }
    return worst;
}

// ---- finite-horizon LQR --------------------------------------------------------

/// Backward Riccati recursion in goal-shifted coordinates. Policy is
/// u_t = -K_t (x_t - goal).
inline AffinePolicy lqr_solve(const EnvSpec& env, const TaskSpec& task) {
    if (env.id != EnvId::P2pCost && env.id != EnvId::Obstacle)
        throw SolverError("lqr_solve: linear-quadratic environment required");
    using Mat = Eigen::MatrixXd;
    Mat A = env.A.map(), B = env.B.map(), Q = env.Q.map(), R = env.R.map(), QT = env.Q_T.map();
    Eigen::LLT<Mat> rchol(R);
    if (rchol.info() != Eigen::Success) throw SolverError("lqr_solve: R not positive definite");

    std::vector<double> goal = goal_state(env, task);
    AffinePolicy pol;
    pol.K.resize(env.T);
    pol.k.assign(env.T, std::vector<double>(env.d_u, 0.0));
    pol.u_nom.assign(env.T, std::vector<double>(env.d_u, 0.0));
    pol.x_nom.assign(env.T + 1, goal);

    Mat P = QT;
    std::vector<Mat> gains(env.T);
    for (int t = env.T - 1; t >= 0; --t) {
        Mat H = R + B.transpose() * P * B;
        Mat K = H.llt().solve(B.transpose() * P * A);
        P = Q + A.transpose() * P * (A - B * K);
        P = 0.5 * (P + P.transpose());
        gains[t] = K;
    }
    for (int t = 0; t < env.T; ++t) {
        Tensor Kt(env.d_u, env.d_x);
        Kt.map() = -gains[t];
        pol.K[t] = std::move(Kt);
    }
    return pol;
}

// ---- iLQR ------------------------------------------------------------------------

/// Stage/terminal cost with first and second derivatives, row/col layout:
/// lx d_x, lu d_u, lxx d_x x d_x, luu d_u x d_u, lux d_u x d_x.
struct CostModel {
    std::function<double(const std::vector<double>&, const std::vector<double>&, int)> stage;
    std::function<double(const std::vector<double>&)> terminal;
    std::function<void(const std::vector<double>&, const std::vector<double>&, int,
                       Eigen::VectorXd&, Eigen::VectorXd&, Eigen::MatrixXd&, Eigen::MatrixXd&,
                       Eigen::MatrixXd&)>
        stage_derivs;
    std::function<void(const std::vector<double>&, Eigen::VectorXd&, Eigen::MatrixXd&)>
        terminal_derivs;
};

/// The environment's own quadratic cost as a CostModel.
inline CostModel env_cost_model(const EnvSpec& env, const TaskSpec& task) {
    CostModel cm;
    cm.stage = [&env, task](const std::vector<double>& x, const std::vector<double>& u, int t) {
        return stage_cost(env, task, x, u, t);
    };
    cm.terminal = [&env, task](const std::vector<double>& x) { return terminal_cost(env, task, x); };
    cm.stage_derivs = [&env, task](const std::vector<double>& x, const std::vector<double>& u,
                                   int, Eigen::VectorXd& lx, Eigen::VectorXd& lu,
                                   Eigen::MatrixXd& lxx, Eigen::MatrixXd& luu,
                                   Eigen::MatrixXd& lux) {
        std::vector<double> goal = goal_state(env, task);
        std::vector<double> ueq = equilibrium_control(env, task);
        Eigen::Map<const Eigen::VectorXd> xe(x.data(), env.d_x);
        Eigen::Map<const Eigen::VectorXd> ue(u.data(), env.d_u);
        Eigen::Map<const Eigen::VectorXd> ge(goal.data(), env.d_x);
        Eigen::Map<const Eigen::VectorXd> ueqe(ueq.data(), env.d_u);
        Eigen::MatrixXd Q = env.Q.map(), R = env.R.map();
        if (env.id == EnvId::Obstacle) Q.setZero();
        lx = 2.0 * Q * (xe - ge);
        lu = 2.0 * R * (ue - ueqe);
        lxx = 2.0 * Q;
        luu = 2.0 * R;
        lux = Eigen::MatrixXd::Zero(env.d_u, env.d_x);
    };
    cm.terminal_derivs = [&env, task](const std::vector<double>& x, Eigen::VectorXd& lx,
                                      Eigen::MatrixXd& lxx) {
        std::vector<double> goal = goal_state(env, task);
        Eigen::Map<const Eigen::VectorXd> xe(x.data(), env.d_x);
        Eigen::Map<const Eigen::VectorXd> ge(goal.data(), env.d_x);
        Eigen::MatrixXd QT = env.Q_T.map();
        if (env.id == EnvId::Obstacle) QT.setZero();
        lx = 2.0 * QT * (xe - ge);
        lxx = 2.0 * QT;
    };
    return cm;
}

struct IlqrResult {
    Trajectory traj;
    AffinePolicy policy;
    std::vector<double> cost_per_iteration;  // accepted iterations only
    int iterations = 0;
};

struct IlqrOptions {
    int max_iterations = 200;
    double tol = 1e-8;
    double lambda_init = 1e-6;
    double lambda_min = 1e-6, lambda_max = 1e6;
    int line_search_steps = 11;  // alpha = 2^0 .. 2^-10
};

/// Iterative LQR: linearize, regularized backward pass, backtracking
/// forward pass. Accepted iterations never increase the cost.
inline IlqrResult ilqr_solve(const EnvSpec& env, const TaskSpec& task,
                             const std::vector<double>& x0, const CostModel& cost,
                             const std::vector<std::vector<double>>& u_init = {},
                             const IlqrOptions& opt = {}) {
    using Mat = Eigen::MatrixXd;
    using Vec = Eigen::VectorXd;
    const int T = env.T, dx = env.d_x, du = env.d_u;

    auto traj_cost = [&](const std::vector<std::vector<double>>& xs,
                         const std::vector<std::vector<double>>& us) {
        double c = 0.0;
        for (int t = 0; t < T; ++t) c += cost.stage(xs[t], us[t], t);
        return c + cost.terminal(xs[T]);
    };

    // Initial nominal: supplied controls or the equilibrium control.
    std::vector<std::vector<double>> us =
        u_init.empty() ? std::vector<std::vector<double>>(T, equilibrium_control(env, task))
                       : u_init;
    std::vector<std::vector<double>> xs(T + 1);
    xs[0] = x0;
    for (int t = 0; t < T; ++t) xs[t + 1] = step(env, task, xs[t], us[t], t);
    double current_cost = traj_cost(xs, us);

    std::vector<Mat> Ks(T, Mat::Zero(du, dx));
    std::vector<Vec> ks(T, Vec::Zero(du));
    double lambda = opt.lambda_init;
    IlqrResult res;
    res.cost_per_iteration.push_back(current_cost);

    for (int iter = 0; iter < opt.max_iterations; ++iter) {
        res.iterations = iter + 1;
        // Backward pass with Levenberg regularization on Quu.
        bool backward_ok = false;
        while (!backward_ok) {
            backward_ok = true;
            Vec Vx;
            Mat Vxx;
            cost.terminal_derivs(xs[T], Vx, Vxx);
            for (int t = T - 1; t >= 0; --t) {
                Tensor fxT, fuT;
                step_jacobians(env, task, xs[t], us[t], fxT, fuT);
                Mat fx = fxT.map(), fu = fuT.map();
                Vec lx, lu;
                Mat lxx, luu, lux;
                cost.stage_derivs(xs[t], us[t], t, lx, lu, lxx, luu, lux);
                Vec Qx = lx + fx.transpose() * Vx;
                Vec Qu = lu + fu.transpose() * Vx;
                Mat Qxx = lxx + fx.transpose() * Vxx * fx;
                Mat Quu = luu + fu.transpose() * Vxx * fu;
                Mat Qux = lux + fu.transpose() * Vxx * fx;
                Mat Quu_reg = Quu + lambda * Mat::Identity(du, du);
                Eigen::LLT<Mat> chol(Quu_reg);
                if (chol.info() != Eigen::Success) {
                    lambda *= 10.0;
                    if (lambda > opt.lambda_max)
                        throw SolverError("ilqr: backward pass not positive definite");
                    backward_ok = false;
                    break;
                }
                ks[t] = -chol.solve(Qu);
                Ks[t] = -chol.solve(Qux);
                Vx = Qx + Ks[t].transpose() * Quu * ks[t] + Ks[t].transpose() * Qu +
                     Qux.transpose() * ks[t];
                Vxx = Qxx + Ks[t].transpose() * Quu * Ks[t] + Ks[t].transpose() * Qux +
                      Qux.transpose() * Ks[t];
                Vxx = 0.5 * (Vxx + Vxx.transpose());
            }
        }

        // Forward pass: backtrack over step scales, accept any decrease.
        bool accepted = false;
        double alpha = 1.0;
        for (int ls = 0; ls < opt.line_search_steps; ++ls, alpha *= 0.5) {
            std::vector<std::vector<double>> xn(T + 1), un(T);
            xn[0] = x0;
            bool finite = true;
            for (int t = 0; t < T; ++t) {
                Eigen::Map<const Vec> xmap(xn[t].data(), dx);
                Eigen::Map<const Vec> xnom(xs[t].data(), dx);
                Eigen::Map<const Vec> unom(us[t].data(), du);
                Vec u = unom + alpha * ks[t] + Ks[t] * (xmap - xnom);
                un[t].assign(u.data(), u.data() + du);
                try {
                    xn[t + 1] = step(env, task, xn[t], un[t], t);
                } catch (const SolverError&) {
                    finite = false;
                    break;
                }
            }
            if (!finite) continue;
            double new_cost = traj_cost(xn, un);
            if (std::isfinite(new_cost) && new_cost < current_cost) {
                double improvement = current_cost - new_cost;
                xs = std::move(xn);
                us = std::move(un);
                current_cost = new_cost;
                res.cost_per_iteration.push_back(current_cost);
                lambda = std::max(opt.lambda_min, lambda * 0.5);
                accepted = true;
                if (improvement < opt.tol) iter = opt.max_iterations;  // converged
                break;
            }
        }
        if (!accepted) {
            lambda *= 10.0;
            if (lambda > opt.lambda_max) break;  // no further progress possible
        }
    }

    res.traj.x = xs;
    res.traj.u = us;
    res.traj.total_cost = current_cost;
    for (int t = 0; t <= T; ++t) res.traj.times.push_back(t * env.dt);
    res.policy.x_nom = xs;
    res.policy.u_nom = us;
    res.policy.K.resize(T);
    res.policy.k.assign(T, std::vector<double>(du, 0.0));
    for (int t = 0; t < T; ++t) {
        Tensor Kt(du, dx);
        Kt.map() = Ks[t];
        res.policy.K[t] = std::move(Kt);
    }
    return res;
}

inline IlqrResult ilqr_solve(const EnvSpec& env, const TaskSpec& task,
                             const std::vector<double>& x0) {
    if (env.id != EnvId::P2pDyn && env.id != EnvId::Quadrotor && env.id != EnvId::P2pCost)
        throw SolverError("ilqr_solve: unsupported environment");
    CostModel cm = env_cost_model(env, task);
    return ilqr_solve(env, task, x0, cm);
}

// ---- obstacle expert ----------------------------------------------------------------

struct ObstacleSolveOptions {
    double terminal_tolerance = 0.3;
    double margin = 0.05;             // extra clearance targeted by the penalty
    double terminal_weight = 30.0;    // scaled with the penalty weight stage
    std::vector<double> penalty_weights = {10.0, 1e2, 1e3, 1e4, 1e5};
};

/// Worst constraint violation (positive means collision) and terminal miss.
/// Segment midpoints are checked along with the knot states so a fast hop
/// across an obstacle between samples still counts as a collision.
inline std::pair<double, double> obstacle_violation(const EnvSpec& env, const TaskSpec& task,
                                                    const Trajectory& traj) {
    double worst = -1e300;
    auto check = [&](double px, double py) {
        for (const auto& o : task.obstacles)
            worst = std::max(worst, o.r - std::hypot(px - o.cx, py - o.cy));
    };
    for (size_t t = 0; t < traj.x.size(); ++t) {
        check(traj.x[t][0], traj.x[t][1]);
        if (t + 1 < traj.x.size())
            check(0.5 * (traj.x[t][0] + traj.x[t + 1][0]), 0.5 * (traj.x[t][1] + traj.x[t + 1][1]));
    }
    const auto& xT = traj.x.back();
    double miss = std::hypot(xT[0] - env.obs_goal_x, xT[1] - env.obs_goal_y);
    return {worst, miss};
}

/// Exact warm start tracking the occupancy-grid corridor: waypoints are
/// resampled uniformly by arclength and converted to double-integrator
/// controls that reproduce them at the knots.
inline std::vector<std::vector<double>> corridor_warm_start(const EnvSpec& env,
                                                            const TaskSpec& task) {
    auto path = detail_envs::corridor_path(env, task.obstacles);
    if (path.empty()) throw SolverError("obstacle_solve: no free corridor between start and goal");
    std::vector<double> arc(path.size(), 0.0);
    for (size_t i = 1; i < path.size(); ++i)
        arc[i] = arc[i - 1] + std::hypot(path[i].first - path[i - 1].first,
                                         path[i].second - path[i - 1].second);
    const int T = env.T;
    double total = arc.back();
    std::vector<std::array<double, 2>> p(T + 1);
    size_t seg = 0;
    for (int t = 0; t <= T; ++t) {
        double s = total * t / T;
        while (seg + 2 < arc.size() && arc[seg + 1] < s) ++seg;
        double len = std::max(arc[seg + 1] - arc[seg], 1e-12);
        double w = std::clamp((s - arc[seg]) / len, 0.0, 1.0);
        p[t] = {path[seg].first + w * (path[seg + 1].first - path[seg].first),
                path[seg].second + w * (path[seg + 1].second - path[seg].second)};
    }
    std::vector<std::array<double, 2>> v(T + 1, {0.0, 0.0});
    for (int t = 0; t < T; ++t)
        v[t] = {(p[t + 1][0] - p[t][0]) / env.dt, (p[t + 1][1] - p[t][1]) / env.dt};
    std::vector<std::vector<double>> u(T);
    for (int t = 0; t < T; ++t)
        u[t] = {(v[t + 1][0] - v[t][0]) / env.dt, (v[t + 1][1] - v[t][1]) / env.dt};
    return u;
}

/// Minimum-effort trajectory through the obstacle field: iLQR on a
/// quadratic-hinge penalty with a geometrically increasing weight, then a
/// hard feasibility check. Only verified trajectories are returned.
inline Trajectory obstacle_solve(const EnvSpec& env, const TaskSpec& task,
                                 const std::vector<double>& x0,
                                 const ObstacleSolveOptions& opt = {}) {
    if (env.id != EnvId::Obstacle) throw SolverError("obstacle_solve: wrong environment");
    using Mat = Eigen::MatrixXd;
    using Vec = Eigen::VectorXd;

    // The penalty is evaluated at the knot position and at the half-step
    // position p + dt/2 v (exact for these dynamics), closing the gap an
    // obstacle could otherwise be skipped through between samples.
    const double half = 0.5 * env.dt;
    auto hinge_sum = [&task, &opt](double px, double py) {
        double c = 0.0;
        for (const auto& o : task.obstacles) {
            double h = o.r + opt.margin - std::hypot(px - o.cx, py - o.cy);
            if (h > 0.0) c += h * h;
        }
        return c;
    };

    std::vector<std::vector<double>> warm = corridor_warm_start(env, task);
    Trajectory best;
    for (double w : opt.penalty_weights) {
        CostModel cm;
        double wterm = opt.terminal_weight * w / opt.penalty_weights.front();
        cm.stage = [&env, hinge_sum, half, w](const std::vector<double>& x,
                                              const std::vector<double>& u, int) {
            return quad_form(env.R, u) + w * hinge_sum(x[0], x[1]) +
                   w * hinge_sum(x[0] + half * x[2], x[1] + half * x[3]);
        };
        cm.terminal = [&env, wterm](const std::vector<double>& x) {
            double dx = x[0] - env.obs_goal_x, dy = x[1] - env.obs_goal_y;
            return wterm * (dx * dx + dy * dy + x[2] * x[2] + x[3] * x[3]);
        };
        cm.stage_derivs = [&env, &task, &opt, half, w](const std::vector<double>& x,
                                                       const std::vector<double>& u, int, Vec& lx,
                                                       Vec& lu, Mat& lxx, Mat& luu, Mat& lux) {
            Eigen::Map<const Vec> ue(u.data(), env.d_u);
            Mat R = env.R.map();
            lu = 2.0 * R * ue;
            luu = 2.0 * R;
            lux = Mat::Zero(env.d_u, env.d_x);
            lx = Vec::Zero(env.d_x);
            lxx = Mat::Zero(env.d_x, env.d_x);
            // J maps the state to the evaluated position: identity block for
            // the knot, plus half-step velocity coupling for the midpoint.
            auto add_point = [&](double px0, double py0, double vel_coupling) {
                Eigen::Matrix<double, 2, 4> J = Eigen::Matrix<double, 2, 4>::Zero();
                J(0, 0) = J(1, 1) = 1.0;
                J(0, 2) = J(1, 3) = vel_coupling;
                for (const auto& o : task.obstacles) {
                    double px = px0 - o.cx, py = py0 - o.cy;
                    double d = std::hypot(px, py);
                    double h = o.r + opt.margin - d;
                    if (h <= 0.0 || d < 1e-9) continue;
                    // c = w h^2 with dh/dp = -p/d; Gauss-Newton curvature.
                    Eigen::Vector2d g(-px / d, -py / d);
                    lx += J.transpose() * (2.0 * w * h * g);
                    lxx += J.transpose() * (2.0 * w * g * g.transpose()) * J;
                }
            };
            add_point(x[0], x[1], 0.0);
            add_point(x[0] + half * x[2], x[1] + half * x[3], half);
        };
        cm.terminal_derivs = [&env, wterm](const std::vector<double>& x, Vec& lx, Mat& lxx) {
            lx = Vec::Zero(env.d_x);
            lxx = Mat::Zero(env.d_x, env.d_x);
            lx(0) = 2.0 * wterm * (x[0] - env.obs_goal_x);
            lx(1) = 2.0 * wterm * (x[1] - env.obs_goal_y);
            lx(2) = 2.0 * wterm * x[2];
            lx(3) = 2.0 * wterm * x[3];
            lxx.diagonal().setConstant(2.0 * wterm);
        };

        IlqrResult r = ilqr_solve(env, task, x0, cm, warm);
        warm = r.traj.u;
        best = r.traj;
        auto [violation, miss] = obstacle_violation(env, task, best);
        if (violation <= 0.0 && miss <= opt.terminal_tolerance) {
            // Recompute the recorded cost under the true control-effort objective.
            best.total_cost = 0.0;
            for (int t = 0; t < best.horizon(); ++t)
                best.total_cost += stage_cost(env, task, best.x[t], best.u[t], t);
            return best;
        }
    }
    throw SolverError("obstacle_solve: penalty schedule exhausted without a feasible trajectory");
}

}  // namespace pocp
