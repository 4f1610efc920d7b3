"""Receding-horizon trajectory improvement as a sparse SQP solve.

The improvement window spans N shooting intervals of dt seconds.  Decision
variables are the interior states x_1..x_{N-1}, all controls u_0..u_{N-1}
and corridor slacks eps_0..eps_{N-1}; the first and last states are pinned
(the last to the warm-start trajectory so the new segment reconnects).

Constraints: RK4 shooting defects, per-node corridor half-spaces applied to
every hull vertex and relaxed by the slack up to d_safe, one separating
half-space per active traffic-rule region (side chosen from the warm start),
the planar speed cone, shaft-speed bounds, control-rate bounds and slack
bounds.  The objective integrates a constant time cost, shaft-speed energy,
control smoothness and the quadratic slack penalty.

The solver is a Gauss-Newton SQP with an l1 merit line search.  Each QP is
condensed: the shooting defects are eliminated through the linearized
dynamics, leaving a strictly convex problem in the controls and slacks that
OSQP handles well (the sparse full-space QP is hopeless for first-order
methods because the objective has no curvature along the state directions).
Far-from-active inequality rows are screened out and every candidate step is
re-verified against the full row set.  A failed solve never replaces the
warm start: callers get the warm segment back with a replan flag.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import osqp
import scipy.sparse as sp

from . import vessel
from .colregs import CaRegionSet, ColregsSituation
from .errors import (
    CorridorInfeasibleError,
    NumericBlowupError,
    TranscriptionError,
    ValidationError,
)
from .geometry import CorridorParams, build_corridor, footprint, inflate_convex

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImproveParams:
    """Weights and tolerances of the improvement step."""

    horizon: float = 150.0          # T, seconds
    dt: float = 2.0                 # shooting interval, seconds
    d_safe: float = 20.0            # clearance shaping distance, meters
    k_d: float = 1.5e-3             # slack penalty weight
    w_const: float = 1.0            # time cost
    w_n: float = 0.1                # shaft-speed energy weight
    w_u: float = 100.0              # control smoothness weight
    penalize_clearance: bool = False  # alternate slack-term sign convention
    corridor: CorridorParams = field(default_factory=CorridorParams)
    max_iter: int = 60
    tol_feas: float = 1e-6
    tol_stat: float = 1e-6

    @property
    def n_intervals(self) -> int:
        n = self.horizon / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValidationError("horizon must be a multiple of dt")
        return int(round(n))


@dataclass(frozen=True)
class NlpSolution:
    """Solver output: trajectories, slacks and convergence diagnostics."""

    states: np.ndarray      # (N+1, nx), heading wrapped
    controls: np.ndarray    # (N, nu)
    slacks: np.ndarray      # (N,)
    objective: float
    kkt_residual: float
    iterations: int
    status: str             # "converged" or "failed"


class ImprovementProblem:
    """One transcribed improvement window with frozen situation schedule.

    Holds the pinned boundary states (heading unwrapped onto the warm-start
    branch), per-node corridor half-spaces, per-node separating rows for
    active traffic-rule regions, and the constant part of the objective.
    Evaluation methods take and return flat variable vectors.
    """

    def __init__(self, ship, params: ImproveParams, x0, xN, corridors, colregs_rows,
                 const_cost: float, warm_X, warm_U, boundary_out=None):
        self.ship = ship
        self.params = params
        self.N = len(warm_U)
        self.nx = ship.nx
        self.nu = ship.nu_dim
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.xN = np.asarray(xN, dtype=np.float64)
        # boundary states to emit verbatim (pre-unwrap headings)
        if boundary_out is None:
            boundary_out = (self.x0.copy(), self.xN.copy())
        self.boundary_out = (
            np.asarray(boundary_out[0], float).copy(),
            np.asarray(boundary_out[1], float).copy(),
        )
        self.corridors = [(np.asarray(A, float), np.asarray(b, float)) for A, b in corridors]
        if len(self.corridors) != self.N:
            raise ValidationError("need one corridor per shooting interval")
        self.colregs_rows = colregs_rows  # list over nodes 0..N of [(normal, offset)]
        self.const_cost = float(const_cost)
        self.warm_X = np.asarray(warm_X, dtype=np.float64)
        self.warm_U = np.asarray(warm_U, dtype=np.float64)
        self.hull = ship.hull
        nt = ship.n_thrusters
        self._n_slice = slice(6 + nt, 6 + 2 * nt)
        self._ubound = np.concatenate(
            [np.full(nt, ship.alpha_rate_max), np.full(nt, ship.n_rate_max)]
        )
        self._layout()

    # -- variable layout ----------------------------------------------------

    def _layout(self):
        N, nx, nu = self.N, self.nx, self.nu
        self.off_x = 0                       # x_1..x_{N-1}
        self.off_u = (N - 1) * nx            # u_0..u_{N-1}
        self.off_e = self.off_u + N * nu     # eps_0..eps_{N-1}
        self.nz = self.off_e + N

    def x_index(self, j: int) -> int:
        if not 1 <= j <= self.N - 1:
            raise IndexError("interior state index out of range")
        return self.off_x + (j - 1) * self.nx

    def pack(self, X, U, E) -> np.ndarray:
        z = np.empty(self.nz)
        z[self.off_x : self.off_u] = np.asarray(X)[1 : self.N].ravel()
        z[self.off_u : self.off_e] = np.asarray(U).ravel()
        z[self.off_e :] = np.asarray(E)
        return z

    def unpack(self, z):
        N, nx, nu = self.N, self.nx, self.nu
        X = np.empty((N + 1, nx))
        X[0] = self.x0
        X[N] = self.xN
        X[1:N] = z[self.off_x : self.off_u].reshape(N - 1, nx)
        U = z[self.off_u : self.off_e].reshape(N, nu)
        E = z[self.off_e :]
        return X, U, E

    def initial_guess(self) -> np.ndarray:
        E = np.empty(self.N)
        for j in range(self.N):
            E[j] = self._min_slack(self.warm_X[j], j)
        return self.pack(self.warm_X, self.warm_U, E)

    def _min_slack(self, x, j) -> float:
        """Smallest feasible slack at node j: d_safe minus the corridor clearance."""
        A, b = self.corridors[j]
        fp = footprint(x[:3], self.hull)
        clearance = float(np.min(b[:, None] - A @ fp.T))
        return float(np.clip(self.params.d_safe - clearance, 0.0, self.params.d_safe))

    # -- objective -----------------------------------------------------------

    def objective(self, z) -> float:
        X, U, E = self.unpack(z)
        p = self.params
        n_sq = (X[: self.N, self._n_slice] ** 2).sum()
        u_sq = (U**2).sum()
        if p.penalize_clearance:
            e_term = ((p.d_safe - E) ** 2).sum()
        else:
            e_term = (E**2).sum()
        return p.dt * (
            p.w_const * self.N + p.w_n * n_sq + p.w_u * u_sq + p.k_d * e_term
        ) + self.const_cost

    def objective_grad(self, z) -> np.ndarray:
        X, U, E = self.unpack(z)
        p = self.params
        g = np.zeros(self.nz)
        gx = np.zeros((self.N - 1, self.nx))
        gx[:, self._n_slice] = 2.0 * p.dt * p.w_n * X[1 : self.N, self._n_slice]
        g[self.off_x : self.off_u] = gx.ravel()
        g[self.off_u : self.off_e] = (2.0 * p.dt * p.w_u * U).ravel()
        if p.penalize_clearance:
            g[self.off_e :] = -2.0 * p.dt * p.k_d * (p.d_safe - E)
        else:
            g[self.off_e :] = 2.0 * p.dt * p.k_d * E
        return g

    def objective_hess_diag(self) -> np.ndarray:
        p = self.params
        h = np.zeros(self.nz)
        hx = np.zeros((self.N - 1, self.nx))
        hx[:, self._n_slice] = 2.0 * p.dt * p.w_n
        h[self.off_x : self.off_u] = hx.ravel()
        h[self.off_u : self.off_e] = 2.0 * p.dt * p.w_u
        h[self.off_e :] = 2.0 * p.dt * p.k_d
        return h

    # -- constraints ----------------------------------------------------------

    def constraint_values(self, z, strict: bool = False):
        """(c_eq, c_in) stacked; equality rows are shooting defects."""
        X, U, E = self.unpack(z)
        F = vessel.rk4_step_batch(X[: self.N], U, self.params.dt, self.ship)
        if strict and not np.all(np.isfinite(F)):
            bad = int(np.nonzero(~np.isfinite(F).all(axis=1))[0][0])
            raise NumericBlowupError(f"model evaluation produced non-finite values at node {bad}")
        c_eq = (X[1:] - F).ravel()
        return c_eq, self._ineq_values(X, U, E)

    def _node_trig(self, X):
        psi = X[:, 2]
        return np.cos(psi), np.sin(psi)

    def _ineq_values(self, X, U, E):
        p = self.params
        V = self.hull
        c, s = self._node_trig(X)
        rows = []
        # corridor rows: A (R(psi) v + pos) - b + d_safe - eps <= 0
        for j in range(self.N):
            A, b = self.corridors[j]
            cj, sj = c[j], s[j]
            vx = cj * V[:, 0] - sj * V[:, 1] + X[j, 0]
            vy = sj * V[:, 0] + cj * V[:, 1] + X[j, 1]
            vals = A[:, 0:1] * vx[None, :] + A[:, 1:2] * vy[None, :] - b[:, None]
            rows.append((vals + p.d_safe - E[j]).ravel())
        # traffic-rule separating rows: offset - nu . c_rot <= 0
        for j in range(1, self.N):
            for nu_row, off in self.colregs_rows[j]:
                vx = c[j] * V[:, 0] - s[j] * V[:, 1] + X[j, 0]
                vy = s[j] * V[:, 0] + c[j] * V[:, 1] + X[j, 1]
                rows.append(off - (nu_row[0] * vx + nu_row[1] * vy))
        # speed cone on interior nodes
        sp_uv = np.hypot(X[1 : self.N, 3], X[1 : self.N, 4])
        rows.append(sp_uv - self.ship.v_max)
        # shaft-speed bounds on interior nodes
        n_vals = X[1 : self.N, self._n_slice]
        rows.append((n_vals - self.ship.n_max).ravel())
        rows.append((-n_vals - self.ship.n_max).ravel())
        # control-rate bounds
        rows.append((U - self._ubound).ravel())
        rows.append((-U - self._ubound).ravel())
        # slack bounds
        rows.append(E - p.d_safe)
        rows.append(-E)
        return np.concatenate(rows)

    def constraint_jacobians(self, z):
        """Sparse Jacobians (J_eq, J_in) at z, matching constraint_values order."""
        X, U, E = self.unpack(z)
        _, Fx, Fu = vessel.rk4_jacobians(X[: self.N], U, self.params.dt, self.ship)
        return self._assemble_jacobians(X, Fx, Fu)

    def linearize(self, z):
        """Objective, constraint values and derivatives at z in one pass.

        The dynamics Jacobians are evaluated once and shared between the
        equality rows and the condensing map used by the solver.
        """
        X, U, E = self.unpack(z)
        F, Fx, Fu = vessel.rk4_jacobians(X[: self.N], U, self.params.dt, self.ship)
        c_eq = (X[1:] - F).ravel()
        c_in = self._ineq_values(X, U, E)
        _, J_in = self._assemble_jacobians(X, Fx, Fu)
        return {
            "f": self.objective(z), "g": self.objective_grad(z),
            "c_eq": c_eq, "c_in": c_in, "J_in": J_in, "Fx": Fx, "Fu": Fu,
        }

    @property
    def n_position_rows(self) -> int:
        """Leading inequality rows tied to node positions (corridor + rule)."""
        nv = len(self.hull)
        n_corr = sum(len(b) * nv for _, b in self.corridors)
        n_colr = sum(len(self.colregs_rows[j]) for j in range(1, self.N)) * nv
        return n_corr + n_colr

    def _assemble_jacobians(self, X, Fx, Fu):
        N, nx, nu = self.N, self.nx, self.nu

        r_list, c_list, v_list = [], [], []

        def add(rows, cols, vals):
            r_list.append(np.asarray(rows, dtype=np.int64).ravel())
            c_list.append(np.asarray(cols, dtype=np.int64).ravel())
            v_list.append(np.asarray(vals, dtype=np.float64).ravel())

        # equality: d_j = x_{j+1} - F(x_j, u_j)
        ar = np.arange(nx)
        for j in range(N):
            base = j * nx
            if j + 1 <= N - 1:
                add(base + ar, self.x_index(j + 1) + ar, np.ones(nx))
            if j >= 1:
                rr, cc = np.meshgrid(base + ar, self.x_index(j) + ar, indexing="ij")
                add(rr, cc, -Fx[j])
            rr, cc = np.meshgrid(base + ar, self.off_u + j * nu + np.arange(nu), indexing="ij")
            add(rr, cc, -Fu[j])
        n_eq = N * nx
        J_eq = sp.csc_matrix(
            (np.concatenate(v_list), (np.concatenate(r_list), np.concatenate(c_list))),
            shape=(n_eq, self.nz),
        )

        r_list, c_list, v_list = [], [], []
        V = self.hull
        nv = len(V)
        c, s = self._node_trig(X)
        row0 = 0
        # corridor rows
        for j in range(N):
            A, b = self.corridors[j]
            K = len(b)
            nrows = K * nv
            rr = row0 + np.arange(nrows)
            # d/deps = -1
            add(rr, np.full(nrows, self.off_e + j), -np.ones(nrows))
            if j >= 1:
                xi = self.x_index(j)
                # d/dx = a_k1, d/dy = a_k2 (repeated per vertex)
                a1 = np.repeat(A[:, 0], nv)
                a2 = np.repeat(A[:, 1], nv)
                add(rr, np.full(nrows, xi + 0), a1)
                add(rr, np.full(nrows, xi + 1), a2)
                # d/dpsi = a . dR/dpsi v
                dvx = -s[j] * V[:, 0] - c[j] * V[:, 1]
                dvy = c[j] * V[:, 0] - s[j] * V[:, 1]
                dpsi = (A[:, 0:1] * dvx[None, :] + A[:, 1:2] * dvy[None, :]).ravel()
                add(rr, np.full(nrows, xi + 2), dpsi)
            row0 += nrows
        # traffic-rule rows
        for j in range(1, N):
            xi = self.x_index(j)
            dvx = -s[j] * V[:, 0] - c[j] * V[:, 1]
            dvy = c[j] * V[:, 0] - s[j] * V[:, 1]
            for nu_row, off in self.colregs_rows[j]:
                rr = row0 + np.arange(nv)
                add(rr, np.full(nv, xi + 0), np.full(nv, -nu_row[0]))
                add(rr, np.full(nv, xi + 1), np.full(nv, -nu_row[1]))
                add(rr, np.full(nv, xi + 2), -(nu_row[0] * dvx + nu_row[1] * dvy))
                row0 += nv
        # speed cone
        for j in range(1, N):
            u_b, v_b = X[j, 3], X[j, 4]
            sp_uv = np.hypot(u_b, v_b)
            xi = self.x_index(j)
            if sp_uv > 1e-9:
                add([row0, row0], [xi + 3, xi + 4], [u_b / sp_uv, v_b / sp_uv])
            row0 += 1
        # shaft-speed bounds
        nt = self.ship.n_thrusters
        for sign in (1.0, -1.0):
            for j in range(1, N):
                xi = self.x_index(j)
                rr = row0 + np.arange(nt)
                add(rr, xi + 6 + nt + np.arange(nt), np.full(nt, sign))
                row0 += nt
        # control-rate bounds
        for sign in (1.0, -1.0):
            rr = row0 + np.arange(N * nu)
            add(rr, self.off_u + np.arange(N * nu), np.full(N * nu, sign))
            row0 += N * nu
        # slack bounds
        for sign in (1.0, -1.0):
            rr = row0 + np.arange(N)
            add(rr, self.off_e + np.arange(N), np.full(N, sign))
            row0 += N
        J_in = sp.csc_matrix(
            (np.concatenate(v_list), (np.concatenate(r_list), np.concatenate(c_list))),
            shape=(row0, self.nz),
        )
        return J_eq, J_in

    def violation(self, z):
        """(max violation, l1 violation) over all constraints."""
        c_eq, c_in = self.constraint_values(z)
        if not (np.all(np.isfinite(c_eq)) and np.all(np.isfinite(c_in))):
            return np.inf, np.inf
        viol_in = np.maximum(c_in, 0.0)
        linf = max(np.abs(c_eq).max(initial=0.0), viol_in.max(initial=0.0))
        return float(linf), float(np.abs(c_eq).sum() + viol_in.sum())


# ---------------------------------------------------------------------------
# transcription


def _region_halfspace(region_verts, warm_fp, node: int):
    """Separating edge of a convex region that the warm footprint lies beyond.

    Returns (outward_normal, offset) with nu . x >= offset outside the region
    through the chosen edge.
    """
    v = np.asarray(region_verts, dtype=np.float64)
    e = np.roll(v, -1, axis=0) - v
    lengths = np.linalg.norm(e, axis=1)
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    if np.any(cross < -1e-9):
        raise ValidationError("traffic-rule regions must be convex")
    normals = np.column_stack([e[:, 1], -e[:, 0]]) / lengths[:, None]
    offsets = (normals * v).sum(axis=1)
    sep = (warm_fp @ normals.T - offsets).min(axis=0)
    best = int(np.argmax(sep))
    if sep[best] <= 0.0:
        raise TranscriptionError(
            node, f"warm start intrudes an active traffic-rule region at node {node}"
        )
    return normals[best], float(offsets[best])


def transcribe(warm_X, warm_U, corridors, obstacles, ship, params: ImproveParams):
    """Build an ImprovementProblem from a warm segment and its constraints.

    warm_X : (N+1, nx) warm states on the dt grid; warm_U : (N, nu) controls.
    corridors : list of N ConvexPolytope (nodes 0..N-1).
    obstacles : list of ObstacleWindow (may be empty).

    Validates that every warm node satisfies its corridor outright (slack at
    its upper bound) and selects, per node and active obstacle, the separating
    half-space of the rule region on the warm-start side.
    """
    warm_X = np.asarray(warm_X, dtype=np.float64)
    warm_U = np.asarray(warm_U, dtype=np.float64)
    N = len(warm_U)
    if warm_X.shape != (N + 1, ship.nx):
        raise ValidationError("warm segment shape mismatch")

    # unwrap headings onto a continuous branch
    X = warm_X.copy()
    X[:, 2] = np.unwrap(warm_X[:, 2])

    corr = [(np.asarray(p.A, float), np.asarray(p.b, float)) for p in corridors]
    for j in range(N):
        A, b = corr[j]
        fp = footprint(X[j, :3], ship.hull)
        worst = float((fp @ A.T - b[None, :]).max())
        if worst > 1e-7:
            raise TranscriptionError(j, f"warm start violates its corridor at node {j}")

    const_cost = 0.0
    colregs_rows = [[] for _ in range(N + 1)]
    for ob in obstacles:
        situations = np.asarray(ob.situations, dtype=np.int64)
        if len(situations) < N + 1 or len(ob.poses) < N + 1:
            raise ValidationError("obstacle window shorter than the horizon")
        if np.any(situations[: N + 1] == int(ColregsSituation.EM)):
            raise ValidationError("emergency situations are handled by the caller")
        for j in range(N + 1):
            q = ColregsSituation(int(situations[j]))
            if j < N:
                const_cost += params.dt * float(ob.regions.entry_cost.get(q, 0.0))
            if q == ColregsSituation.SF or not ob.regions.hard:
                continue
            region = ob.regions.region_world(q, ob.poses[j])
            if region is None:
                continue
            if 1 <= j <= N - 1:
                warm_fp = footprint(X[j, :3], ship.hull)
                colregs_rows[j].append(_region_halfspace(region, warm_fp, j))

    return ImprovementProblem(
        ship, params, X[0], X[N], corr, colregs_rows, const_cost, X, warm_U,
        boundary_out=(warm_X[0], warm_X[N]),
    )


@dataclass(frozen=True)
class ObstacleWindow:
    """Predicted obstacle data over one improvement window.

    poses : (>=N+1, 3) world poses at the shooting nodes
    situations : (>=N+1,) frozen situation codes at the nodes
    hull : obstacle body polygon, used for corridor exclusion
    regions : rule-region set (shapes, entry costs, hard flag)
    """

    poses: np.ndarray
    situations: np.ndarray
    hull: np.ndarray
    regions: CaRegionSet


# ---------------------------------------------------------------------------
# SQP solver


# how far inside (meters) a corridor or rule row may sit before it is
# screened out of the QP; misses are caught by the post-solve verification
_SCREEN_MARGIN = 30.0


def _violation_from(lin):
    """(max violation, l1 violation) from already-evaluated constraints."""
    c_eq, c_in = lin["c_eq"], lin["c_in"]
    if not (np.all(np.isfinite(c_eq)) and np.all(np.isfinite(c_in))):
        return np.inf, np.inf
    viol_in = np.maximum(c_in, 0.0)
    linf = max(np.abs(c_eq).max(initial=0.0), viol_in.max(initial=0.0))
    return float(linf), float(np.abs(c_eq).sum() + viol_in.sum())


def _condense(problem: ImprovementProblem, lin, hobj):
    """Eliminate the shooting defects from the QP at the current iterate.

    Forward sensitivities give dx_j = M_j du + r_j along the linearized
    dynamics, so the QP lives in w = (du_0..du_{N-1}, deps) where the
    objective curvature is strictly positive.  Full-space steps are
    recovered as dz = T w + r_vec; the pinned terminal state becomes the
    equality M_N du = -r_N.  Returns the pieces the solver loop needs.
    """
    N, nx, nu, nz = problem.N, problem.nx, problem.nu, problem.nz
    Fx, Fu = lin["Fx"], lin["Fu"]
    defects = lin["c_eq"].reshape(N, nx)
    ncols = N * nu
    nw = ncols + N

    rows, cols, vals = [], [], []
    r_vec = np.zeros(nz)
    M = np.zeros((nx, ncols))
    r = np.zeros(nx)
    for j in range(N):
        M_next = Fx[j] @ M
        M_next[:, j * nu : (j + 1) * nu] += Fu[j]
        r = Fx[j] @ r - defects[j]
        M = M_next
        if j + 1 <= N - 1:
            base = problem.x_index(j + 1)
            width = (j + 1) * nu  # later controls cannot reach x_{j+1}
            rr, cc = np.meshgrid(
                base + np.arange(nx), np.arange(width), indexing="ij"
            )
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(M[:, :width].ravel())
            r_vec[base : base + nx] = r
    rows.append(problem.off_u + np.arange(ncols))
    cols.append(np.arange(ncols))
    vals.append(np.ones(ncols))
    rows.append(problem.off_e + np.arange(N))
    cols.append(ncols + np.arange(N))
    vals.append(np.ones(N))
    T = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nz, nw),
    )

    q = T.T @ (hobj * r_vec + lin["g"])
    P = (T.T @ T.multiply(hobj[:, None])).tocsc()
    A_eq = sp.hstack([sp.csc_matrix(M), sp.csc_matrix((nx, N))], format="csc")
    return {
        "T": T, "r_vec": r_vec, "P_triu": sp.triu(P, format="csc"), "q": q,
        "A_eq": A_eq, "b_eq": -r, "nw": nw,
    }


def _solve_qp(P_triu, q, A, l, u):
    prob = osqp.OSQP()
    settings = dict(verbose=False, eps_abs=1e-8, eps_rel=1e-8, max_iter=50000)
    try:
        prob.setup(P=P_triu, q=q, A=A, l=l, u=u, polishing=True, **settings)
    except TypeError:  # older versions call the setting "polish"
        prob.setup(P=P_triu, q=q, A=A, l=l, u=u, polish=True, **settings)
    try:
        res = prob.solve(raise_error=False)
    except TypeError:
        res = prob.solve()
    status = getattr(res.info, "status", "")
    if "solved" not in status or res.x is None:
        return None, None, status
    return np.asarray(res.x), np.asarray(res.y), status


def _assemble_condensed(qp, A_sel, rhs, elastic: bool, mu_eq: float):
    """Stack the condensed QP pieces, optionally with an elastic terminal.

    The elastic form splits the terminal equality residual into nonnegative
    slack variables priced at mu_eq in the objective, which keeps the QP
    feasible from warm starts whose linearization cannot reach the pinned
    terminal state within the input bounds.
    """
    n_eq = qp["A_eq"].shape[0]
    n_sel = A_sel.shape[0]
    if not elastic:
        A = sp.vstack([qp["A_eq"], A_sel], format="csc")
        l = np.concatenate([qp["b_eq"], np.full(n_sel, -np.inf)])
        u = np.concatenate([qp["b_eq"], rhs])
        return qp["P_triu"], qp["q"], A, l, u
    nw = qp["nw"]
    eye = sp.identity(n_eq, format="csc")
    A = sp.vstack([
        sp.hstack([qp["A_eq"], -eye, eye], format="csc"),
        sp.hstack([A_sel, sp.csc_matrix((n_sel, 2 * n_eq))], format="csc"),
        sp.hstack([sp.csc_matrix((2 * n_eq, nw)),
                   sp.identity(2 * n_eq, format="csc")], format="csc"),
    ], format="csc")
    l = np.concatenate([qp["b_eq"], np.full(n_sel, -np.inf), np.zeros(2 * n_eq)])
    u = np.concatenate([qp["b_eq"], rhs, np.full(2 * n_eq, np.inf)])
    P = sp.block_diag(
        [qp["P_triu"], 1e-10 * sp.identity(2 * n_eq, format="csc")], format="csc"
    )
    q = np.concatenate([qp["q"], np.full(2 * n_eq, mu_eq)])
    return P, q, A, l, u


def _solve_screened(problem: ImprovementProblem, lin, qp, mu_eq: float):
    """Solve the condensed QP on the near-active rows, verify on all rows.

    Rows deep inside their bound are left out of the QP; the candidate step
    is then checked against every linearized row and the QP re-solved with
    the offenders added until none remain.  A hard QP that comes back
    infeasible (the linearization cannot reach the terminal state within the
    input bounds, typical of cold boundary-value starts) is retried with the
    terminal rows made elastic.  Returns (dz, y_in, y_eq, stat, s_l1, status)
    with y_in scattered over the full row set and s_l1 the l1 norm of the
    elastic terminal slack; stat is inf while that slack is active.
    """
    c_in, J_in = lin["c_in"], lin["J_in"]
    T, r_vec = qp["T"], qp["r_vec"]
    nw = qp["nw"]
    n_pos = problem.n_position_rows
    sel = c_in >= -_SCREEN_MARGIN
    sel[n_pos:] = True  # speed, shaft, control and slack rows are cheap
    J_csr = J_in.tocsr()
    shift = c_in + J_in @ r_vec
    n_eq = qp["A_eq"].shape[0]

    elastic = False
    for _ in range(6):
        idx = np.nonzero(sel)[0]
        A_sel = (J_csr[idx] @ T).tocsc()
        rhs = -shift[idx]
        w = None
        if not elastic:
            P_s, q_s, A, l, u = _assemble_condensed(qp, A_sel, rhs, False, mu_eq)
            w, y, status = _solve_qp(P_s, q_s, A, l, u)
            if w is None:
                elastic = True
                log.debug("hard QP %s; retrying with elastic terminal", status)
        if elastic and w is None:
            P_s, q_s, A, l, u = _assemble_condensed(qp, A_sel, rhs, True, mu_eq)
            w, y, status = _solve_qp(P_s, q_s, A, l, u)
        if w is None:
            return None, None, None, np.inf, 0.0, status
        s_l1 = float(w[nw:].sum()) if elastic else 0.0
        dz = T @ w[:nw] + r_vec
        missed = (c_in + J_in @ dz > 1e-7) & ~sel
        if not missed.any():
            y_in = np.zeros(len(c_in))
            y_sel = y[n_eq : n_eq + len(idx)]
            y_in[idx] = y_sel
            y_eq = y[:n_eq]
            if s_l1 > 1e-9:
                return dz, y_in, y_eq, np.inf, s_l1, status
            resid = qp["q"] + qp["A_eq"].T @ y_eq + A_sel.T @ y_sel
            stat = float(np.abs(resid).max()) / (1.0 + float(np.abs(y).max(initial=0.0)))
            return dz, y_in, y_eq, stat, s_l1, status
        sel |= missed
    return None, None, None, np.inf, 0.0, "screening did not settle"


def _defect_multipliers(problem: ImprovementProblem, lin, hobj, dz, y_in, y_eq):
    """Adjoint recovery of the shooting-defect multipliers.

    Condensing eliminates the defect rows, but the l1 merit weight must still
    dominate their multipliers or steps that trade a little objective for a
    lot of feasibility get rejected.  The backward recursion reconstructs
    them from the QP optimality conditions; the terminal-pinning dual seeds
    it.
    """
    N, nx = problem.N, problem.nx
    grad = hobj * dz + lin["g"] + lin["J_in"].T @ y_in
    Fx = lin["Fx"]
    lam = np.empty((N, nx))
    lam[N - 1] = -y_eq
    for j in range(N - 1, 0, -1):
        xi = problem.x_index(j)
        lam[j - 1] = Fx[j].T @ lam[j] - grad[xi : xi + nx]
    return lam


def solve(problem: ImprovementProblem, init_z=None, backend: str = "sqp") -> NlpSolution:
    """Solve the transcribed window; never returns worse than a feasible init.

    `backend` is an interface seam; only the built-in "sqp" solver ships.
    """
    if backend != "sqp":
        raise ValidationError(f"unknown NLP backend {backend!r}")
    p = problem.params
    z = problem.initial_guess() if init_z is None else np.asarray(init_z, float).copy()
    problem.constraint_values(z, strict=True)  # NaN in inputs -> hard error

    hobj = problem.objective_hess_diag() + 1e-8

    lin = problem.linearize(z)
    f = lin["f"]
    viol_inf, viol_l1 = _violation_from(lin)

    init_feasible = viol_inf <= p.tol_feas
    best = (f, z.copy()) if init_feasible else None
    init_f = f

    mu = 10.0
    status = "failed"
    kkt = np.inf
    it = 0
    for it in range(1, p.max_iter + 1):
        qp = _condense(problem, lin, hobj)
        mu_eq = max(mu, 1e3)
        d, y_in, y_eq, stat, s_l1, qp_status = _solve_screened(problem, lin, qp, mu_eq)
        if d is None:
            log.debug("qp failed at iteration %d: %s", it, qp_status)
            break

        # convergence at the current iterate
        kkt = max(viol_inf, stat)
        if viol_inf <= p.tol_feas and stat <= p.tol_stat:
            status = "converged"
            break
        if np.abs(d).max() <= 1e-10 and viol_inf <= p.tol_feas:
            status = "converged"
            kkt = viol_inf
            break

        # l1 merit line search; the weight must dominate every multiplier,
        # including the eliminated defect ones
        if s_l1 <= 1e-9:
            lam = _defect_multipliers(problem, lin, hobj, d, y_in, y_eq)
            y_inf = max(
                float(np.abs(y_in).max(initial=0.0)),
                float(np.abs(lam).max(initial=0.0)),
            )
            mu = max(mu, 1.2 * y_inf + 1e-6)
        else:
            # restoration step: the merit must price feasibility exactly as
            # the elastic QP did, or trades that raise the objective to gain
            # feasibility come out computed-then-rejected
            mu = mu_eq
        # the step leaves s_l1 of linearized terminal defect behind, so the
        # model reduction of the merit function is smaller by mu * s_l1
        D = float(lin["g"] @ d) - mu * max(viol_l1 - s_l1, 0.0)
        phi0 = f + mu * viol_l1
        alpha = 1.0
        accepted = False
        while alpha >= 1e-12:
            z_t = z + alpha * d
            f_t = problem.objective(z_t)
            _, l1_t = problem.violation(z_t)
            if np.isfinite(f_t) and f_t + mu * l1_t <= phi0 + 1e-4 * alpha * min(D, 0.0) + 1e-12:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            log.debug("line search failed at iteration %d", it)
            break

        z = z_t
        lin = problem.linearize(z)
        f = lin["f"]
        viol_inf, viol_l1 = _violation_from(lin)
        if viol_inf <= p.tol_feas and (best is None or f < best[0]):
            best = (f, z.copy())

    if status == "converged":
        z_out = z
        # a feasible init must never be beaten by a worse "improvement"
        if init_feasible and f > init_f + 1e-9:
            if best is not None and best[0] <= init_f + 1e-9:
                z_out = best[1]
            else:
                log.debug("converged iterate worse than init; falling back")
                z_out = None
                status = "failed"
    else:
        z_out = best[1] if best is not None else None

    if z_out is None:
        X, U, E = problem.unpack(problem.initial_guess())
        obj = problem.objective(problem.initial_guess())
    else:
        X, U, E = problem.unpack(z_out)
        obj = problem.objective(z_out)
    X = X.copy()
    X[:, 2] = vessel.wrap_angle(X[:, 2])
    X[0], X[-1] = problem.boundary_out
    log.debug(
        "solve: status=%s iters=%d obj=%.6f kkt=%.2e", status, it, obj, kkt
    )
    return NlpSolution(
        states=X, controls=U, slacks=E, objective=float(obj),
        kkt_residual=float(kkt), iterations=it, status=status,
    )


# ---------------------------------------------------------------------------
# one improvement step


def improve_step(x_cur, t_cur, warm_X, warm_U, static_obstacles, obstacles,
                 ship, params: ImproveParams):
    """Corridors + transcription + solve for one window starting at x_cur.

    warm_X/warm_U span [t_cur, t_cur + N dt] on the dt grid with
    warm_X[0] = x_cur.  Returns (X, U, solution, replan): the improved segment
    on success, the warm segment with replan=True when the solver fails.
    Corridor and transcription failures propagate to the caller.
    """
    warm_X = np.asarray(warm_X, dtype=np.float64)
    warm_U = np.asarray(warm_U, dtype=np.float64)
    x_cur = np.asarray(x_cur, dtype=np.float64)
    if not np.allclose(warm_X[0], x_cur, atol=1e-9):
        raise ValidationError("warm segment must start at the current state")
    N = len(warm_U)
    times = [t_cur + j * params.dt for j in range(N)]
    dyn_regions = []
    for ob in obstacles:
        grown = inflate_convex(ob.hull, params.corridor.min_margin)
        dyn_regions.append([footprint(ob.poses[j], grown) for j in range(N)])
    corridors = build_corridor(
        warm_X[:N, :3], static_obstacles, dyn_regions, times, params.corridor
    )
    problem = transcribe(warm_X, warm_U, corridors, obstacles, ship, params)
    sol = solve(problem)
    if sol.status == "converged":
        return sol.states, sol.controls, sol, False
    log.info("improvement solve failed at t=%.1f; keeping warm segment", t_cur)
    return warm_X.copy(), warm_U.copy(), sol, True
