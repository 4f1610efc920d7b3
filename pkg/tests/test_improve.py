"""Improvement NLP tests: transcription algebra, derivatives, SQP behavior.

Oracles: central finite differences for every Jacobian, a 1D scan resolving
the slack sign convention, and rollout-based warm starts whose feasibility is
exact by construction.
"""

import numpy as np
import pytest

from fairway import kernels, vessel
from fairway.colregs import CaRegionSet, ColregsSituation
from fairway.errors import TranscriptionError, ValidationError
from fairway.geometry import ConvexPolytope, CorridorParams, Polygon, build_corridor, footprint
from fairway.improve import (
    ImprovementProblem,
    ImproveParams,
    ObstacleWindow,
    improve_step,
    solve,
    transcribe,
)

BOX_A = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


def cruise_warm(ship, n_intervals, dt=2.0, surge=1.545, u_fn=None):
    """Roll out a dynamically exact warm segment from a trim cruise state."""
    alpha, n = ship.trim_setting(surge)
    x0 = np.zeros(ship.nx)
    x0[3] = surge
    x0[6 : 6 + ship.n_thrusters] = alpha
    x0[6 + ship.n_thrusters :] = n
    if u_fn is None:
        U = np.zeros((n_intervals, ship.nu_dim))
    else:
        U = np.array([u_fn(j) for j in range(n_intervals)])
    X = kernels.rollout(x0, U, dt, *ship._rhs_args())
    return X, U


def open_water_problem(ship, n_intervals, dt=2.0, u_fn=None, params=None, surge=1.545):
    params = params or ImproveParams(horizon=n_intervals * dt, dt=dt)
    X, U = cruise_warm(ship, n_intervals, dt, surge=surge, u_fn=u_fn)
    corridors = build_corridor(
        X[:n_intervals, :3], [], [], [dt * j for j in range(n_intervals)], params.corridor
    )
    return transcribe(X, U, corridors, [], ship, params), X, U, params


class TestTranscription:
    def test_warm_start_initially_feasible(self, supply80):
        prob, X, U, params = open_water_problem(supply80, 10)
        c_eq, c_in = prob.constraint_values(prob.initial_guess())
        assert np.abs(c_eq).max() < 1e-6
        assert c_in.max() < 1e-6

    def test_full_slack_reduces_to_containment(self, supply80):
        prob, X, U, params = open_water_problem(supply80, 4)
        z = prob.pack(X, U, np.full(4, params.d_safe))
        _, c_in = prob.constraint_values(z)
        n_corr = sum(len(b) * len(supply80.hull) for _, b in prob.corridors)
        corr_rows = c_in[:n_corr]
        # A c - b + d_safe - eps == A c - b when eps = d_safe
        j = 0
        for A, b in prob.corridors:
            fp = footprint(X[j, :3], supply80.hull)
            direct = (fp @ A.T - b[None, :]).T.ravel()
            k = len(direct)
            assert np.allclose(corr_rows[:k], direct, atol=1e-12)
            corr_rows = corr_rows[k:]
            j += 1

    def test_slack_optimum_by_1d_scan(self, supply80):
        """The penalty drives the slack to the smallest containment-feasible
        value: eps* = max(0, d_safe - clearance)."""
        prob, X, U, params = open_water_problem(supply80, 4)
        # tighten one corridor so the node sits closer than d_safe to a wall
        A, b = prob.corridors[2]
        fp = footprint(X[2, :3], supply80.hull)
        clearance = 12.0
        b = b.copy()
        b[0] = float((fp @ A[0]).max()) + clearance
        prob.corridors[2] = (A, b)
        eps_grid = np.linspace(0.0, params.d_safe, 2001)
        feasible, penalty = [], []
        for eps in eps_grid:
            E = np.full(4, params.d_safe)
            E[2] = eps
            z = prob.pack(X, U, E)
            _, c_in = prob.constraint_values(z)
            feasible.append(c_in.max() <= 1e-9)
            penalty.append(params.k_d * eps**2)
        feasible = np.array(feasible)
        penalty = np.array(penalty)
        best = eps_grid[feasible][np.argmin(penalty[feasible])]
        assert best == pytest.approx(params.d_safe - clearance, abs=0.02)
        assert prob._min_slack(X[2], 2) == pytest.approx(best, abs=0.02)

    def test_warm_corridor_violation_raises(self, supply80):
        params = ImproveParams(horizon=8.0, dt=2.0)
        X, U = cruise_warm(supply80, 4)
        box = ConvexPolytope(BOX_A, np.array([50.0, 50.0, 50.0, 50.0]))
        far = ConvexPolytope(BOX_A, np.array([-500.0, 1000.0, 400.0, 400.0]))
        with pytest.raises(TranscriptionError) as ei:
            transcribe(X, U, [box, box, far, box], [], supply80, params)
        assert ei.value.node_index == 2

    def test_em_schedule_rejected(self, supply80):
        params = ImproveParams(horizon=8.0, dt=2.0)
        X, U = cruise_warm(supply80, 4)
        corridors = build_corridor(X[:4, :3], [], [], [0, 2, 4, 6], params.corridor)
        ob = ObstacleWindow(
            poses=np.tile([1000.0, 1000.0, 0.0], (5, 1)),
            situations=np.full(5, int(ColregsSituation.EM)),
            hull=np.array([[5, 0], [0, 3], [-5, 0], [0, -3.0]]),
            regions=CaRegionSet.for_obstacle_length(12.0),
        )
        with pytest.raises(ValidationError):
            transcribe(X, U, corridors, [ob], supply80, params)

    def test_warm_inside_rule_region_raises(self, supply80):
        params = ImproveParams(horizon=8.0, dt=2.0)
        X, U = cruise_warm(supply80, 4)
        corridors = build_corridor(X[:4, :3], [], [], [0, 2, 4, 6], params.corridor)
        # obstacle sitting right on the warm path: its GW region swallows node 2
        ob = ObstacleWindow(
            poses=np.tile([X[2, 0], X[2, 1], 0.0], (5, 1)),
            situations=np.full(5, int(ColregsSituation.GW)),
            hull=np.array([[5, 0], [0, 3], [-5, 0], [0, -3.0]]),
            regions=CaRegionSet.for_obstacle_length(76.0),
        )
        with pytest.raises(TranscriptionError):
            transcribe(X, U, corridors, [ob], supply80, params)


class TestDerivatives:
    def rand_z(self, prob, rng, scale=0.3):
        z = prob.initial_guess()
        dz = rng.standard_normal(prob.nz)
        dz[prob.off_u :] *= 0.01
        return z + scale * dz

    def test_objective_gradient_fd(self, supply80, rng):
        prob, *_ = open_water_problem(supply80, 6)
        for _ in range(5):
            z = self.rand_z(prob, rng)
            g = prob.objective_grad(z)
            for k in rng.choice(prob.nz, 40, replace=False):
                zp, zm = z.copy(), z.copy()
                zp[k] += 1e-6
                zm[k] -= 1e-6
                fd = (prob.objective(zp) - prob.objective(zm)) / 2e-6
                assert g[k] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_constraint_jacobians_fd(self, supply80, rng):
        prob, *_ = open_water_problem(supply80, 5)
        z = self.rand_z(prob, rng, scale=0.05)
        J_eq, J_in = prob.constraint_jacobians(z)
        J_eq, J_in = J_eq.toarray(), J_in.toarray()
        for k in rng.choice(prob.nz, 60, replace=False):
            zp, zm = z.copy(), z.copy()
            zp[k] += 1e-6
            zm[k] -= 1e-6
            ep, ip_ = prob.constraint_values(zp)
            em, im = prob.constraint_values(zm)
            fd_eq = (ep - em) / 2e-6
            fd_in = (ip_ - im) / 2e-6
            scale_eq = max(1.0, np.abs(fd_eq).max())
            assert np.abs(J_eq[:, k] - fd_eq).max() / scale_eq < 1e-4
            assert np.abs(J_in[:, k] - fd_in).max() < 1e-4

    def test_colregs_row_jacobian_fd(self, supply80, rng):
        params = ImproveParams(horizon=12.0, dt=2.0)
        X, U = cruise_warm(supply80, 6)
        corridors = build_corridor(X[:6, :3], [], [], [2.0 * j for j in range(6)], params.corridor)
        ob = ObstacleWindow(
            poses=np.tile([X[3, 0], X[3, 1] + 260.0, 0.0], (7, 1)),
            situations=np.full(7, int(ColregsSituation.GW)),
            hull=np.array([[5, 0], [0, 3], [-5, 0], [0, -3.0]]),
            regions=CaRegionSet.for_obstacle_length(76.0),
        )
        prob = transcribe(X, U, corridors, [ob], supply80, params)
        assert any(len(r) for r in prob.colregs_rows)
        z = self.rand_z(prob, rng, scale=0.05)
        _, J_in = prob.constraint_jacobians(z)
        J_in = J_in.toarray()
        for k in rng.choice(prob.nz, 40, replace=False):
            zp, zm = z.copy(), z.copy()
            zp[k] += 1e-6
            zm[k] -= 1e-6
            _, ip_ = prob.constraint_values(zp)
            _, im = prob.constraint_values(zm)
            fd = (ip_ - im) / 2e-6
            assert np.abs(J_in[:, k] - fd).max() < 1e-4


class TestSolve:
    def test_stationary_warm_start(self, supply80):
        prob, X, U, params = open_water_problem(supply80, 20)
        warm_obj = prob.objective(prob.initial_guess())
        sol = solve(prob)
        assert sol.status == "converged"
        assert sol.iterations <= 3
        assert sol.objective == pytest.approx(warm_obj, abs=1e-9)
        assert np.allclose(sol.states, X, atol=1e-6)

    def test_oscillatory_warm_start_improves(self, supply80):
        rate = supply80.alpha_rate_max

        def wiggle(j):
            u = np.zeros(4)
            u[0] = u[1] = rate * (0.55 if (j // 2) % 2 == 0 else -0.55)
            return u

        prob, X, U, params = open_water_problem(supply80, 24, u_fn=wiggle)
        warm_obj = prob.objective(prob.initial_guess())
        sol = solve(prob)
        assert sol.status == "converged"
        assert sol.objective < warm_obj - 1e-3
        # the sawtooth rudder schedule must come out much smoother; the peak
        # yaw rate itself is untouchable (it sits at the pinned terminal node)
        tv = lambda a: float(np.abs(np.diff(a)).sum())
        assert tv(sol.states[:, 6]) < 0.5 * tv(X[:, 6])
        assert np.abs(sol.states[:, 5]).max() <= np.abs(X[:, 5]).max() + 1e-9
        # converged physics: defects within tolerance interval by interval
        F = vessel.rk4_step_batch(sol.states[:-1], sol.controls, params.dt, supply80)
        defect = sol.states[1:] - F
        defect[:, 2] = vessel.wrap_angle(defect[:, 2])
        assert np.abs(defect).max() < 1e-6
        # corridor satisfaction at every node and vertex
        for j, (A, b) in enumerate(prob.corridors):
            fp = footprint(sol.states[j, :3], supply80.hull)
            assert (fp @ A.T - b[None, :]).max() <= 1e-8

    def test_infeasible_corridor_fails_cleanly(self, supply80):
        params = ImproveParams(horizon=12.0, dt=2.0, max_iter=25)
        X, U = cruise_warm(supply80, 6)
        boxes = []
        for j in range(6):
            c = X[j, :2]
            b = np.array([c[0] + 100, -(c[0] - 100), c[1] + 100, -(c[1] - 100)])
            boxes.append(ConvexPolytope(BOX_A, b))
        # shift the last corridor so the pinned terminal state cannot connect
        c = X[5, :2] + np.array([0.0, 5000.0])
        boxes[5] = ConvexPolytope(
            BOX_A, np.array([c[0] + 100, -(c[0] - 100), c[1] + 100, -(c[1] - 100)])
        )
        prob = ImprovementProblem(
            supply80, params, X[0], X[6], [(p.A, p.b) for p in boxes],
            [[] for _ in range(7)], 0.0, X, U,
        )
        sol = solve(prob)
        assert sol.status == "failed"
        # fallback output is the warm segment
        assert np.allclose(sol.states, X, atol=1e-9)

    def test_unknown_backend_rejected(self, supply80):
        prob, *_ = open_water_problem(supply80, 4)
        with pytest.raises(ValidationError):
            solve(prob, backend="ipopt")

    def test_rule_region_halfspace_respected(self, supply80):
        """An active give-way region bends the improved path around it."""
        params = ImproveParams(horizon=60.0, dt=2.0)
        n = 30

        def nudge(j):
            u = np.zeros(4)
            u[0] = u[1] = supply80.alpha_rate_max * (0.3 if j < 8 else -0.3 if j < 16 else 0.0)
            return u

        X, U = cruise_warm(supply80, n, u_fn=nudge)
        corridors = build_corridor(
            X[:n, :3], [], [], [2.0 * j for j in range(n)], params.corridor
        )
        # obstacle abeam of the mid path; region reaches toward the path
        mid = X[15]
        ob = ObstacleWindow(
            poses=np.tile([mid[0], mid[1] - 150.0, np.pi / 2], (n + 1, 1)),
            situations=np.full(n + 1, int(ColregsSituation.SO)),
            hull=np.array([[6, 0], [0, 4], [-6, 0], [0, -4.0]]),
            regions=CaRegionSet.for_obstacle_length(76.0),
        )
        prob = transcribe(X, U, corridors, [ob], supply80, params)
        sol = solve(prob)
        assert sol.status == "converged"
        region = ob.regions.region_world(ColregsSituation.SO, ob.poses[0])
        for j in range(1, n):
            fp = footprint(sol.states[j, :3], supply80.hull)
            assert not kernels.poly_intersects(fp, region)

    def test_entry_cost_constant_in_objective(self, supply80):
        params = ImproveParams(horizon=8.0, dt=2.0)
        X, U = cruise_warm(supply80, 4)
        corridors = build_corridor(X[:4, :3], [], [], [0, 2, 4, 6], params.corridor)
        ob = ObstacleWindow(
            poses=np.tile([X[2, 0], X[2, 1] + 400.0, 0.0], (5, 1)),
            situations=np.full(5, int(ColregsSituation.GW)),
            hull=np.array([[5, 0], [0, 3], [-5, 0], [0, -3.0]]),
            regions=CaRegionSet.for_obstacle_length(12.0),
        )
        plain = transcribe(X, U, corridors, [], supply80, params)
        priced = transcribe(X, U, corridors, [ob], supply80, params)
        z = plain.initial_guess()
        k_gw = 0.2
        assert priced.objective(z) - plain.objective(z) == pytest.approx(
            params.dt * k_gw * 4, abs=1e-12
        )


class TestImproveStep:
    def test_open_water_returns_warm(self, supply80):
        params = ImproveParams(horizon=40.0, dt=2.0)
        X, U = cruise_warm(supply80, 20)
        Xi, Ui, sol, replan = improve_step(X[0], 0.0, X, U, [], [], supply80, params)
        assert not replan
        assert sol.status == "converged"
        assert np.abs(Xi - X).max() < 1e-6
        assert np.abs(Xi[0] - X[0]).max() == 0.0  # exact splice at t_cur
        assert np.abs(Xi[-1] - X[-1]).max() == 0.0  # exact splice at t_cur + T

    def test_reference_horizon_length(self):
        assert ImproveParams().n_intervals == 75

    def test_segment_must_start_at_x_cur(self, supply80):
        params = ImproveParams(horizon=8.0, dt=2.0)
        X, U = cruise_warm(supply80, 4)
        with pytest.raises(ValidationError):
            improve_step(X[1], 0.0, X, U, [], [], supply80, params)

    def test_static_obstacle_shapes_corridor(self, supply80):
        params = ImproveParams(horizon=40.0, dt=2.0)
        X, U = cruise_warm(supply80, 20)
        # wall parallel to the track, 40 m to port
        wall = Polygon(
            np.array([[-50.0, 40.0], [1000.0, 40.0], [1000.0, 60.0], [-50.0, 60.0]])
        )
        Xi, Ui, sol, replan = improve_step(X[0], 0.0, X, U, [wall], [], supply80, params)
        assert sol.status == "converged"
        assert not replan
        assert Xi[:, 1].max() < 40.0 - params.corridor.min_margin + 1e-6
