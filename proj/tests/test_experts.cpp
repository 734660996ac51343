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
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pocp/experts.hpp"

using namespace pocp;

namespace {

// Direct minimization of the finite-horizon LQ cost over the stacked
// control vector: x depends linearly on U, so the optimum solves a dense
// normal-equations system. Independent of the Riccati recursion.
double direct_lq_optimal_cost(const EnvSpec& env, const TaskSpec& task,
                              const std::vector<double>& x0) {
    using Mat = Eigen::MatrixXd;
    using Vec = Eigen::VectorXd;
    const int T = env.T, dx = env.d_x, du = env.d_u, n = T * du;
    Mat A = env.A.map(), B = env.B.map(), Q = env.Q.map(), R = env.R.map(), QT = env.Q_T.map();
    std::vector<double> g = goal_state(env, task);
    Eigen::Map<const Vec> x0e(x0.data(), dx);
    Eigen::Map<const Vec> ge(g.data(), dx);

    // x_t = F_t x0 + G_t U with F_t = A^t, G_t built column-block-wise.
    std::vector<Mat> F(T + 1), G(T + 1);
    F[0] = Mat::Identity(dx, dx);
    G[0] = Mat::Zero(dx, n);
    for (int t = 0; t < T; ++t) {
        F[t + 1] = A * F[t];
        G[t + 1] = A * G[t];
        G[t + 1].middleCols(t * du, du) += B;
    }
    Mat H = Mat::Zero(n, n);
    Vec b = Vec::Zero(n);
    double c0 = 0.0;
    auto add_state_term = [&](const Mat& W, int t) {
        Vec e = F[t] * x0e - ge;
        H += G[t].transpose() * W * G[t];
        b += G[t].transpose() * W * e;
        c0 += e.dot(W * e);
    };
    for (int t = 0; t < T; ++t) {
        add_state_term(Q, t);
        H.block(t * du, t * du, du, du) += R;
    }
    add_state_term(QT, T);
    Vec U = -H.llt().solve(b);
    return U.dot(H * U) + 2.0 * b.dot(U) + c0;
}

Trajectory lqr_rollout(const EnvSpec& env, const TaskSpec& task, const std::vector<double>& x0) {
    AffinePolicy pol = lqr_solve(env, task);
    return rollout(env, task, [&](const std::vector<double>& x, int t) { return pol.control(x, t); },
                   x0);
}

}  // namespace

TEST_CASE("lqr matches direct quadratic minimization at short horizon") {
    EnvSpec env = make_env(EnvId::P2pCost);
    env.T = 3;
    TaskSpec task{EnvId::P2pCost};
    task.goal_x = 2.0;
    task.goal_y = -1.0;
    std::vector<double> x0 = {-3.0, 4.0, 0.5, -0.25};
    double direct = direct_lq_optimal_cost(env, task, x0);
    Trajectory traj = lqr_rollout(env, task, x0);
    CHECK(std::fabs(traj.total_cost - direct) < 1e-8 * std::max(1.0, direct));
}

TEST_CASE("lqr is first-order optimal under single-control perturbations") {
    EnvSpec env = make_env(EnvId::P2pCost);
    TaskSpec task{EnvId::P2pCost};
    task.goal_x = -5.0;
    task.goal_y = 7.0;
    std::vector<double> x0 = {1.0, -2.0, 0.0, 0.0};
    Trajectory traj = lqr_rollout(env, task, x0);
    CHECK(replay_error(env, task, traj) <= 1e-9);

    auto perturbed_cost = [&](int t_star, int j, double eps) {
        double c = 0.0;
        std::vector<double> x = x0;
        for (int t = 0; t < env.T; ++t) {
            std::vector<double> u = traj.u[t];
            if (t == t_star) u[j] += eps;
            c += stage_cost(env, task, x, u, t);
            x = step(env, task, x, u, t);
        }
        return c + terminal_cost(env, task, x);
    };
    for (int t_star : {0, 12, 49})
        for (int j = 0; j < env.d_u; ++j)
            for (double eps : {1e-4, -1e-4})
                CHECK(perturbed_cost(t_star, j, eps) >= traj.total_cost);
}

TEST_CASE("ilqr reproduces the lqr optimum on the linear-quadratic problem") {
    EnvSpec env = make_env(EnvId::P2pCost);
    TaskSpec task{EnvId::P2pCost};
    task.goal_x = 6.0;
    task.goal_y = -4.0;
    std::vector<double> x0 = {-1.0, 2.0, 0.0, 0.0};
    Trajectory ref = lqr_rollout(env, task, x0);
    IlqrResult r = ilqr_solve(env, task, x0);
    CHECK(std::fabs(r.traj.total_cost - ref.total_cost) <= 1e-6 * std::max(1.0, ref.total_cost));
    CHECK(replay_error(env, task, r.traj) <= 1e-9);
}

TEST_CASE("ilqr accepted iterations never increase the cost") {
    EnvSpec env = make_env(EnvId::Quadrotor);
    TaskSpec task{EnvId::Quadrotor};
    task.mass = 1.2;
    task.arm = 0.3;
    task.inertia_scale = 1.0 / 12.0;
    std::vector<double> x0 = {2.0, -1.5, 0.2, 0.0, 0.0, 0.0};
    IlqrResult r = ilqr_solve(env, task, x0);
    REQUIRE(r.cost_per_iteration.size() >= 2);
    for (size_t i = 1; i < r.cost_per_iteration.size(); ++i)
        CHECK(r.cost_per_iteration[i] < r.cost_per_iteration[i - 1]);
    // The solver should actually steer toward the origin.
    const auto& xT = r.traj.x.back();
    CHECK(std::hypot(xT[0], xT[1]) < 0.3);
    CHECK(replay_error(env, task, r.traj) <= 1e-9);
}

TEST_CASE("ilqr policy replays its own nominal trajectory") {
    EnvSpec env = make_env(EnvId::P2pDyn);
    TaskSpec task{EnvId::P2pDyn};
    task.mu = 0.7;
    task.a_max = 3.0;
    task.v_max = 2.0;
    std::vector<double> x0 = {4.0, -3.0, 0.0, 0.0};
    IlqrResult r = ilqr_solve(env, task, x0);
    Trajectory re = rollout(
        env, task, [&](const std::vector<double>& x, int t) { return r.policy.control(x, t); }, x0);
    CHECK(std::fabs(re.total_cost - r.traj.total_cost) <= 1e-9 * std::max(1.0, r.traj.total_cost));
    for (int t = 0; t <= env.T; ++t)
        for (int i = 0; i < env.d_x; ++i) CHECK(re.x[t][i] == doctest::Approx(r.traj.x[t][i]).epsilon(1e-12));
}

TEST_CASE("unsaturated gain-one dynamics reduce to the linear-quadratic optimum") {
    EnvSpec dyn = make_env(EnvId::P2pDyn);
    TaskSpec dtask{EnvId::P2pDyn};
    dtask.mu = 1.0;
    dtask.a_max = 1e9;  // never saturates
    dtask.v_max = 1e9;
    std::vector<double> x0 = {3.0, 2.5, 0.0, 0.0};
    IlqrResult r = ilqr_solve(dyn, dtask, x0);

    EnvSpec lin = make_env(EnvId::P2pCost);
    TaskSpec ltask{EnvId::P2pCost};  // goal at the origin, same cost matrices
    Trajectory ref = lqr_rollout(lin, ltask, x0);
    CHECK(std::fabs(r.traj.total_cost - ref.total_cost) <= 1e-6 * std::max(1.0, ref.total_cost));
}

TEST_CASE("saturated dynamics cost strictly exceeds the unconstrained optimum") {
    EnvSpec dyn = make_env(EnvId::P2pDyn);
    TaskSpec tight{EnvId::P2pDyn};
    tight.mu = 0.5;
    tight.a_max = 1.0;
    tight.v_max = 1.0;
    std::vector<double> x0 = {8.0, -8.0, 0.0, 0.0};
    IlqrResult r = ilqr_solve(dyn, tight, x0);

    EnvSpec lin = make_env(EnvId::P2pCost);
    TaskSpec ltask{EnvId::P2pCost};
    Trajectory ref = lqr_rollout(lin, ltask, x0);
    CHECK(r.traj.total_cost > ref.total_cost);
}

TEST_CASE("obstacle expert returns collision-free trajectories that reach the goal") {
    EnvSpec env = make_env(EnvId::Obstacle);
    Rng rng(20260826);
    for (int trial = 0; trial < 3; ++trial) {
        TaskSpec task = sample_task(env, rng);
        std::vector<double> x0 = {env.obs_start_x, env.obs_start_y, 0.0, 0.0};
        Trajectory traj = obstacle_solve(env, task, x0);
        auto [violation, miss] = obstacle_violation(env, task, traj);
        CHECK(violation <= 0.0);
        CHECK(miss <= 0.3);
        CHECK(replay_error(env, task, traj) <= 1e-9);
        // Recorded cost is the pure control-effort objective.
        double effort = 0.0;
        for (int t = 0; t < traj.horizon(); ++t) effort += quad_form(env.R, traj.u[t]);
        CHECK(traj.total_cost == doctest::Approx(effort).epsilon(1e-12));
    }
}

TEST_CASE("obstacle expert detours around a blocking obstacle") {
    EnvSpec env = make_env(EnvId::Obstacle);
    TaskSpec task{EnvId::Obstacle};
    task.obstacles = {{0.0, 0.0, 1.2}, {0.0, 2.8, 1.0}};  // straight line blocked
    std::vector<double> x0 = {env.obs_start_x, env.obs_start_y, 0.0, 0.0};
    Trajectory traj = obstacle_solve(env, task, x0);
    auto [violation, miss] = obstacle_violation(env, task, traj);
    CHECK(violation <= 0.0);
    CHECK(miss <= 0.3);
    // Must leave the y = 0 line to pass the centered disc.
    double max_abs_y = 0.0;
    for (const auto& x : traj.x) max_abs_y = std::max(max_abs_y, std::fabs(x[1]));
    CHECK(max_abs_y > 1.0);
}

TEST_CASE("lqr rejects environments without linear dynamics") {
    EnvSpec env = make_env(EnvId::Quadrotor);
    TaskSpec task{EnvId::Quadrotor};
    task.mass = 1.0;
    task.arm = 0.2;
    task.inertia_scale = 1.0 / 12.0;
    CHECK_THROWS_AS(lqr_solve(env, task), SolverError);
}
