"""Offline motion-primitive library for the lattice planner.

Primitives are short, dynamically feasible state/control trajectories that
connect two lattice nodes.  Each one is generated by solving a boundary-value
optimal control problem with the same SQP backend the online improvement step
uses, stored for one canonical heading per 90-degree symmetry class, and
translated/rotated on application.  The module also builds the free-space
heuristic lookup table (windowed Dijkstra over the primitive graph) and
serializes everything to a versioned binary file stamped with the ship-config
hash so a library can never be paired with the wrong model.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels, vessel
from .errors import (
    LibraryMismatchError,
    LibraryNotFoundError,
    ValidationError,
)
from .improve import ImprovementProblem, ImproveParams, solve

log = logging.getLogger(__name__)

_MAGIC = b"FWPL0001"

# exact 90-degree rotation matrices, index = number of quarter turns
_ROT90 = [
    np.array([[1.0, 0.0], [0.0, 1.0]]),
    np.array([[0.0, -1.0], [1.0, 0.0]]),
    np.array([[-1.0, 0.0], [0.0, -1.0]]),
    np.array([[0.0, 1.0], [-1.0, 0.0]]),
]


@dataclass(frozen=True)
class LatticeSpec:
    """Discretization of the search space: grid, headings, node speeds."""

    r_p: float = 5.0
    n_headings: int = 16
    speeds: tuple = (0.0, 1.54, 3.09)
    dtm: float = 2.0

    def __post_init__(self):
        if self.r_p <= 0:
            raise ValidationError("position resolution must be positive")
        if self.n_headings < 4 or self.n_headings % 4 != 0:
            raise ValidationError(
                "heading set must be closed under 90-degree rotation"
            )
        if self.dtm <= 0:
            raise ValidationError("sample period must be positive")
        sp = tuple(float(s) for s in self.speeds)
        if len(sp) == 0 or any(s < 0 for s in sp) or sorted(set(sp)) != list(sp):
            raise ValidationError("speeds must be sorted, unique and non-negative")
        object.__setattr__(self, "speeds", sp)

    @property
    def n_canonical(self) -> int:
        """Headings per 90-degree sector; index h maps to (h % n, h // n)."""
        return self.n_headings // 4

    @property
    def n_speeds(self) -> int:
        return len(self.speeds)

    def heading(self, idx: int) -> float:
        return vessel.wrap_angle(2.0 * np.pi * (idx % self.n_headings) / self.n_headings)

    def heading_index(self, psi: float, tol: float = 1e-9) -> int:
        steps = psi * self.n_headings / (2.0 * np.pi)
        idx = int(np.rint(steps))
        if abs(steps - idx) > tol:
            raise ValidationError(f"heading {psi!r} is not on the lattice")
        return idx % self.n_headings

    def speed_index(self, u: float, tol: float = 1e-9) -> int:
        for i, s in enumerate(self.speeds):
            if abs(u - s) <= tol:
                return i
        raise ValidationError(f"speed {u!r} is not a lattice node speed")

    def node_state(self, ship, cell_x: int, cell_y: int, heading_idx: int,
                   speed_idx: int) -> np.ndarray:
        """Full vessel state of a lattice node (trim thruster setting)."""
        s = self.speeds[speed_idx]
        alpha, n = ship.trim_setting(s)
        x = np.zeros(ship.nx)
        x[0] = cell_x * self.r_p
        x[1] = cell_y * self.r_p
        x[2] = self.heading(heading_idx)
        x[3] = s
        x[6 : 6 + ship.n_thrusters] = alpha
        x[6 + ship.n_thrusters :] = n
        return x


@dataclass(frozen=True)
class MotionPrimitive:
    """One lattice edge: sampled trajectory plus its class bookkeeping.

    states are stored relative to the start position at a canonical heading
    (index < n_headings/4); dcell is the terminal grid displacement in that
    frame.  cost is the position-invariant stage cost over the samples.
    """

    name: str
    heading_idx: int
    speed_idx: int
    end_heading_idx: int
    end_speed_idx: int
    dcell: tuple
    dtm: float
    states: np.ndarray
    controls: np.ndarray
    cost: float

    @property
    def n_steps(self) -> int:
        return len(self.controls)

    @property
    def duration(self) -> float:
        return self.n_steps * self.dtm


@dataclass(frozen=True)
class PrimitiveTemplate:
    """Menu entry: the maneuver a BVP should realize, not its solution."""

    name: str
    speed_from: int
    speed_to: int
    dpsi_steps: int     # heading-index change (signed)
    n_steps: int        # duration in dtm samples


def stage_cost(states, controls, dt: float, n_thrusters: int) -> float:
    """Position-invariant running cost: time, shaft energy, rate smoothness."""
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    n = states[:-1, 6 + n_thrusters : 6 + 2 * n_thrusters]
    return float(dt * (
        len(controls) + 0.1 * (n**2).sum() + 100.0 * (controls**2).sum()
    ))


# ---------------------------------------------------------------------------
# generation


_BOX_A = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


def _bvp_params(n_steps: int, dtm: float) -> ImproveParams:
    # generation is offline: buy defect headroom under the 1e-6 storage
    # invariant with a tighter feasibility tolerance
    return ImproveParams(horizon=n_steps * dtm, dt=dtm, max_iter=100,
                         tol_feas=1e-8)


def _rate_limited(demand, start: float, end: float, step: float):
    """Track `demand` under a per-step rate bound, pinning both endpoints.

    Forward clipping alone lags the demand and can miss the terminal value
    entirely; the backward pass pulls the tail onto the endpoint as early
    as the rate bound requires, leaving the rest of the schedule untouched.
    """
    n = len(demand)
    out = np.empty(n)
    out[0] = start
    for j in range(1, n):
        out[j] = out[j - 1] + np.clip(demand[j] - out[j - 1], -step, step)
    out[n - 1] = end
    for j in range(n - 2, -1, -1):
        out[j] = out[j + 1] + np.clip(out[j] - out[j + 1], -step, step)
    return out


def _reference_guess(spec: LatticeSpec, ship, x_from, x_to, n_steps: int):
    """Near-feasible multiple-shooting initializer between lattice states.

    Heading and surge follow quintic ramps whose rates and accelerations
    vanish at both ends, matching the trimmed zero-rate boundary nodes; the
    surge profile carries a squared-bump dip sized so the integrated path
    length matches the arc through the displacement.  Inverse dynamics then
    produce the supporting actuator schedules: the yaw-moment profile gives
    the lateral thrust force (stern azimuth pair: M = lx * Fy), the sway ODE
    is integrated under that force, and thruster angle/shaft analyzes follow
    from the force balance.  Controls are exact finite differences of the
    actuator states, clipped to their rate bounds and re-integrated, so the
    actuator rows carry no defects at all; what the clipped reference cannot
    deliver shows up as small velocity-row defects spread over the window,
    which is the shape of infeasibility multiple shooting absorbs best.
    """
    nt = ship.n_thrusters
    dtm = spec.dtm
    horizon = n_steps * dtm
    tau = np.arange(n_steps + 1) / n_steps
    sig = tau**3 * (10.0 - 15.0 * tau + 6.0 * tau**2)
    dsig = 30.0 * tau**2 * (1.0 - tau) ** 2 / horizon
    ddsig = (60.0 * tau - 180.0 * tau**2 + 120.0 * tau**3) / horizon**2

    dpsi = float(x_to[2] - x_from[2])
    psi = float(x_from[2]) + dpsi * sig
    r = dpsi * dsig
    rdot = dpsi * ddsig

    s0, s1 = float(x_from[3]), float(x_to[3])
    chord = float(np.linalg.norm(x_to[:2] - x_from[:2]))
    if abs(dpsi) > 1e-9:
        arc = chord / (2.0 * np.sin(0.5 * abs(dpsi))) * abs(dpsi)
    else:
        arc = chord
    bump = 16.0 * tau**2 * (1.0 - tau) ** 2  # zero value/slope at both ends
    dip = (arc - 0.5 * (s0 + s1) * horizon) / (horizon * 8.0 / 15.0)
    u = np.clip(s0 + (s1 - s0) * sig + dip * bump, 0.0, 0.999 * ship.v_max)
    udot = np.gradient(u, dtm)

    # inverse dynamics: moment profile -> lateral force -> sway -> actuators
    m_u, m_v, i_z = ship.mass[0, 0], ship.mass[1, 1], ship.mass[2, 2]
    d_u, d_v, d_r = ship.dlin[0, 0], ship.dlin[1, 1], ship.dlin[2, 2]
    q_u, q_v, q_r = ship.dquad
    lx = float(ship.thrusters[0, 0])
    v = np.zeros(n_steps + 1)
    fy = np.zeros(n_steps + 1)
    for j in range(n_steps + 1):
        mz = (i_z * rdot[j] + (m_v - m_u) * u[j] * v[j]
              + d_r * r[j] + q_r * abs(r[j]) * r[j])
        fy[j] = mz / lx
        if j < n_steps:
            vdot = (fy[j] - m_u * u[j] * r[j]
                    - d_v * v[j] - q_v * abs(v[j]) * v[j]) / m_v
            v[j + 1] = v[j] + dtm * vdot
    fx = m_u * udot - m_v * v * r + d_u * u + q_u * np.abs(u) * u
    # symmetric azimuth pair: common deflection, signed shaft speeds.
    # Reverse thrust only serves pure braking; when lateral force is in
    # play the surge demand is floored instead, so the angle schedule
    # stays continuous when fx hovers near zero mid-maneuver.
    flip = (fx < 0.0) & (np.abs(fy) < 1.0)
    fx_eff = np.where(flip, fx, np.maximum(fx, 1e3))
    alpha = np.arctan2(np.where(flip, -fy, fy), np.abs(fx_eff))
    f_each = np.hypot(fx_eff, fy) / nt
    n_sched = np.where(flip, -1.0, 1.0) * np.sqrt(f_each / ship.kt)

    # actuator schedules: rate-limited tracking of the demanded profiles
    # with a backward pass so both endpoints land exactly on the trimmed
    # boundary values; the exact finite differences then serve as controls,
    # leaving the actuator rows free of defects
    a_state = _rate_limited(alpha, float(x_from[6]), float(x_to[6]),
                            0.999 * ship.alpha_rate_max * dtm)
    n_state = _rate_limited(n_sched, float(x_from[6 + nt]),
                            float(x_to[6 + nt]), 0.999 * ship.n_rate_max * dtm)
    n_state = np.clip(n_state, -ship.n_max, ship.n_max)
    U = np.zeros((n_steps, ship.nu_dim))
    for k in range(nt):
        U[:, k] = np.diff(a_state) / dtm
        U[:, nt + k] = np.diff(n_state) / dtm

    X = np.zeros((n_steps + 1, ship.nx))
    X[:, 2] = psi
    X[:, 3] = u
    X[:, 4] = v
    X[:, 5] = r
    for k in range(nt):
        X[:, 6 + k] = a_state
        X[:, 6 + nt + k] = n_state
    # planar kinematics with sway, then a smooth shift onto the terminal
    cx, sx = np.cos(psi), np.sin(psi)
    vel = np.column_stack([u * cx - v * sx, u * sx + v * cx])
    steps = 0.5 * (vel[:-1] + vel[1:]) * dtm
    q = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])
    gap = (x_to[:2] - x_from[:2]) - q[-1]
    X[:, :2] = x_from[:2] + q + sig[:, None] * gap
    X[0] = x_from
    X[n_steps] = x_to
    return X, U


def generate_primitive(spec: LatticeSpec, ship, x_from, x_to, n_steps: int,
                       name: str = "bvp") -> MotionPrimitive:
    """Connect two lattice states with a locally optimal trajectory.

    Solves the boundary-value problem by multiple shooting with the same SQP
    backend as the online improvement step, inside one large free-space
    corridor.  Off-lattice endpoints raise ValidationError; non-convergence
    raises RuntimeError so the set builder can omit the pair.
    """
    x_from = np.asarray(x_from, dtype=np.float64)
    x_to = np.asarray(x_to, dtype=np.float64)
    h_from = spec.heading_index(x_from[2])
    if h_from >= spec.n_canonical:
        raise ValidationError("primitives are generated at canonical headings")
    s_from = spec.speed_index(x_from[3])
    s_to = spec.speed_index(x_to[3])
    dpos = (x_to[:2] - x_from[:2]) / spec.r_p
    dcell = np.rint(dpos).astype(np.int64)
    if np.abs(dpos - dcell).max() > 1e-6:
        raise ValidationError("terminal displacement is not on the grid")
    # heading may sit on a continuous branch; class index wraps
    h_to = spec.heading_index(vessel.wrap_angle(x_to[2]))

    warm_X, warm_U = _reference_guess(spec, ship, x_from, x_to, n_steps)

    span = float(np.linalg.norm(x_to[:2] - x_from[:2]))
    half = span + ship.v_max * n_steps * spec.dtm + 100.0
    center = 0.5 * (x_from[:2] + x_to[:2])
    b = np.array([center[0] + half, -(center[0] - half),
                  center[1] + half, -(center[1] - half)])
    corridors = [(_BOX_A, b)] * n_steps

    problem = ImprovementProblem(
        ship, _bvp_params(n_steps, spec.dtm), x_from, x_to, corridors,
        [[] for _ in range(n_steps + 1)], 0.0, warm_X, warm_U,
    )
    sol = solve(problem)
    if sol.status != "converged":
        raise RuntimeError(
            f"primitive BVP did not converge ({name}, {n_steps} steps)"
        )
    for j in range(n_steps + 1):
        u_j = sol.controls[min(j, n_steps - 1)]
        state_ok, input_ok = vessel.feasible(sol.states[j], u_j, ship, tol=1e-5)
        if not (state_ok and input_ok):
            raise RuntimeError(f"primitive BVP left the feasible set ({name})")

    states = sol.states.copy()
    states[:, :2] -= x_from[:2]
    cost = stage_cost(states, sol.controls, spec.dtm, ship.n_thrusters)
    return MotionPrimitive(
        name=name, heading_idx=h_from, speed_idx=s_from,
        end_heading_idx=h_to, end_speed_idx=s_to,
        dcell=(int(dcell[0]), int(dcell[1])), dtm=spec.dtm,
        states=states, controls=sol.controls.copy(), cost=cost,
    )


def default_templates(ship, spec: LatticeSpec):
    """Stand-in maneuver menu; durations scale with ship length.

    Per positive node speed: a straight, gentle turns (one heading step) and
    wider turns (two steps); plus straight transitions between adjacent node
    speeds, which include the stop and start primitives needed for docking.
    """
    tau = float(np.clip(ship.length / 76.0, 0.3, 2.0))

    def steps(base_s: float) -> int:
        return max(3, int(np.rint(base_s * tau / spec.dtm)))

    out = []
    for s in range(1, spec.n_speeds):
        out.append(PrimitiveTemplate(f"straight-s{s}", s, s, 0, steps(16.0)))
        for sgn in (1, -1):
            out.append(PrimitiveTemplate(
                f"turn{22.5 * sgn:+.1f}-s{s}", s, s, sgn, steps(36.0)))
            out.append(PrimitiveTemplate(
                f"turn{45.0 * sgn:+.1f}-s{s}", s, s, 2 * sgn, steps(52.0)))
    for s in range(spec.n_speeds - 1):
        out.append(PrimitiveTemplate(f"accel-s{s}{s + 1}", s, s + 1, 0, steps(40.0)))
        out.append(PrimitiveTemplate(f"decel-s{s + 1}{s}", s + 1, s, 0, steps(40.0)))
    return out


def _template_goal(spec: LatticeSpec, tpl: PrimitiveTemplate, heading: float,
                   n_steps: int = None):
    """Grid-snapped terminal displacement and heading for one template.

    The displacement scales with the duration, so stretched retries sweep
    a wider arc near the node speeds instead of crawling to a fixed goal.
    """
    s0, s1 = spec.speeds[tpl.speed_from], spec.speeds[tpl.speed_to]
    mean = 0.5 * (s0 + s1)
    horizon = (tpl.n_steps if n_steps is None else n_steps) * spec.dtm
    dpsi = 2.0 * np.pi * tpl.dpsi_steps / spec.n_headings
    if tpl.dpsi_steps == 0:
        local = np.array([mean * horizon, 0.0])
    else:
        # arc shaved slightly: sway and the speed cone eat into path length
        radius = 0.95 * mean * horizon / abs(dpsi)
        local = np.array([
            radius * np.sin(abs(dpsi)),
            np.sign(dpsi) * radius * (1.0 - np.cos(dpsi)),
        ])
    c, s = np.cos(heading), np.sin(heading)
    world = np.array([c * local[0] - s * local[1], s * local[0] + c * local[1]])
    cells = np.rint(world / spec.r_p).astype(np.int64)
    if tpl.dpsi_steps == 0 and tpl.speed_to == spec.n_speeds - 1:
        # straight templates ending at the speed cap cannot make distance
        # back up, so their goal must snap inward, never outward
        cells = _snap_inward(world, spec.r_p)
    return cells, heading + dpsi


def _snap_inward(world, r_p: float):
    """Nearest grid cell whose displacement does not exceed the target's."""
    limit = float(np.hypot(*world))
    base = np.floor(world / r_p)
    best, best_d = base, np.inf
    for off in ((0, 0), (0, 1), (1, 0), (1, 1)):
        cand = base + off
        v = cand * r_p
        if np.hypot(*v) <= limit + 1e-9:
            d = float(np.hypot(*(v - world)))
            if d < best_d:
                best, best_d = cand, d
    return best.astype(np.int64)


def _shed_budget(ship, speed: float, horizon: float) -> float:
    """Distance a straight run at `speed` can give up within `horizon`.

    Integrates the linearized surge response around trim to an antisymmetric
    brake and re-accelerate shaft profile at 80 percent of the rate bound
    (down, up through trim, back down), which returns both the shaft and the
    surge speed to their boundary values.  Used to keep straight goals at
    the speed cap inside the reachable set, where the cone forbids making
    distance back up and the shaft rate bounds how fast it can be given away.
    """
    m = float(ship.mass[0, 0])
    d_lin = float(ship.dlin[0, 0]) + 2.0 * float(ship.dquad[0]) * speed
    n_trim = float(ship.trim_setting(speed)[1][0])
    dfdn = 2.0 * ship.kt * n_trim * ship.n_thrusters
    g = 0.8 * ship.n_rate_max
    t, dt = np.linspace(0.0, horizon, 513, retstep=True)
    q = horizon / 4.0
    ndot = np.where((t >= q) & (t < 3.0 * q), g, -g)
    dn = np.cumsum(ndot) * float(dt)
    du = np.zeros_like(t)
    for i in range(1, len(t)):
        du[i] = du[i - 1] + float(dt) * (dfdn * dn[i - 1] - d_lin * du[i - 1]) / m
    return max(float(-np.sum(du) * dt), 0.0)


def _straight_pairs(spec: LatticeSpec, ship, heading: float, speed_idx: int,
                    count: int):
    """(n_steps, cells) choices for a straight at one node speed.

    Straight goals cannot be snapped independently of duration: at the top
    speed the cone forbids making distance back up and the reachable window
    below v_max * T is well under a meter wide, while off-axis heading rays
    (tan 22.5 deg is irrational) only pass near grid points at particular
    ranges.  Scan durations for a grid point close to the heading ray whose
    distance mismatch fits the linearized shaft-authority budget.
    """
    s = spec.speeds[speed_idx]
    at_cap = speed_idx == spec.n_speeds - 1
    dirv = np.array([np.cos(heading), np.sin(heading)])
    scored = []
    for n in range(5, 80):
        horizon = n * spec.dtm
        natural = s * horizon
        budget = 0.7 * _shed_budget(ship, s, horizon)
        lat_budget = max(0.02 * natural, 0.05)
        base = np.floor(natural * dirv / spec.r_p)
        best = None
        for off in ((0, 0), (0, 1), (1, 0), (1, 1)):
            cand = base + off
            dist = float(np.hypot(*cand)) * spec.r_p
            if dist < spec.r_p - 1e-9 or (at_cap and dist > natural):
                continue
            skew = vessel.wrap_angle(np.arctan2(cand[1], cand[0]) - heading)
            lateral = dist * abs(np.sin(skew))
            gap = abs(natural - dist)
            if gap > budget or lateral > lat_budget:
                continue
            # mild length penalty: prefer the cleanest goal, not the first
            score = gap / budget + lateral / lat_budget + 0.02 * n
            if best is None or score < best[0]:
                best = (score, cand)
        if best is not None:
            scored.append((best[0], n, best[1].astype(np.int64)))
    scored.sort(key=lambda t: t[0])
    return [(n, cells) for _, n, cells in scored[:count]]


class PrimitiveLibrary:
    """Immutable set of canonical primitives plus optional heuristic table.

    v_max is the ship's speed cap (not the fastest node speed): primitive
    samples may exceed node speeds mid-edge, and the heuristic's distance
    bound divides by the true cap to stay admissible.
    """

    def __init__(self, spec: LatticeSpec, model_hash: str, primitives,
                 hlut=None, v_max: float = None):
        self.spec = spec
        self.model_hash = model_hash
        self.primitives = list(primitives)
        self.hlut = hlut
        self.v_max = float(v_max) if v_max is not None else max(spec.speeds)
        self.by_class = {}
        for prim in self.primitives:
            self.by_class.setdefault(
                (prim.heading_idx, prim.speed_idx), []
            ).append(prim)

    def lookup(self, heading_idx: int, speed_idx: int):
        """Primitives applicable at a node class: (primitive, quarter turns)."""
        n = self.spec.n_canonical
        c = heading_idx % n
        k = (heading_idx // n) % 4
        return [(p, k) for p in self.by_class.get((c, speed_idx), [])]

    def expanded_moves(self):
        """Per global (heading, speed) class: rotated edge table.

        Returns {(h, s): [(prim, k, dcell, end_h, end_s)]} with dcell rotated
        into the world heading.  Shared by the A* successor generation and
        the heuristic-table Dijkstra so both walk the same graph.
        """
        n = self.spec.n_canonical
        moves = {}
        for h in range(self.spec.n_headings):
            for s in range(self.spec.n_speeds):
                entries = []
                for prim, k in self.lookup(h, s):
                    rot = _ROT90[k]
                    d = rot @ np.asarray(prim.dcell, dtype=np.float64)
                    end_h = (prim.end_heading_idx + k * n) % self.spec.n_headings
                    entries.append((
                        prim, k,
                        (int(np.rint(d[0])), int(np.rint(d[1]))),
                        end_h, prim.end_speed_idx,
                    ))
                moves[(h, s)] = entries
        return moves


def build_primitive_set(ship, spec: LatticeSpec, templates=None,
                        max_retries: int = 2) -> PrimitiveLibrary:
    """Generate the canonical primitive set from a template menu.

    A template whose BVP fails gets retried with a 1.5x longer duration; a
    pair that still fails is omitted.  Classes left without an outgoing or
    incoming primitive make the build fail loudly.
    """
    for s in spec.speeds:
        if s > ship.v_max + 1e-9:
            raise ValidationError(
                f"node speed {s} exceeds the ship speed limit {ship.v_max}"
            )
    if templates is None:
        templates = default_templates(ship, spec)

    prims = []
    for c in range(spec.n_canonical):
        heading = spec.heading(c)
        for tpl in templates:
            straight = (tpl.dpsi_steps == 0 and tpl.speed_from == tpl.speed_to)
            if straight:
                # duration and displacement are coupled along the ray; the
                # plain template goal backstops a fruitless scan
                attempts = [
                    (n, cells, heading)
                    for n, cells in _straight_pairs(
                        spec, ship, heading, tpl.speed_from, max_retries)
                ]
                cells, psi_to = _template_goal(spec, tpl, heading)
                attempts.append((tpl.n_steps, cells, psi_to))
            else:
                attempts = []
                for k in range(max_retries + 1):
                    n_k = int(np.ceil(tpl.n_steps * 1.5 ** k))
                    cells, psi_to = _template_goal(spec, tpl, heading, n_k)
                    attempts.append((n_k, cells, psi_to))
            x_from = spec.node_state(ship, 0, 0, c, tpl.speed_from)
            prim = None
            for n_steps, cells, psi_to in attempts:
                x_to = spec.node_state(ship, int(cells[0]), int(cells[1]),
                                       spec.heading_index(vessel.wrap_angle(psi_to)),
                                       tpl.speed_to)
                x_to[2] = psi_to  # keep the continuous heading branch
                try:
                    prim = generate_primitive(
                        spec, ship, x_from, x_to, n_steps, name=tpl.name
                    )
                    break
                except RuntimeError as exc:
                    log.info("retrying %s at heading %d: %s", tpl.name, c, exc)
            if prim is None:
                log.warning("omitting primitive %s at heading %d", tpl.name, c)
                continue
            prims.append(prim)

    lib = PrimitiveLibrary(spec, ship.config_hash, prims, v_max=ship.v_max)
    missing = []
    incoming = {(p.end_heading_idx % spec.n_canonical, p.end_speed_idx)
                for p in prims}
    for c in range(spec.n_canonical):
        for s in range(spec.n_speeds):
            if not lib.by_class.get((c, s)):
                missing.append(f"no outgoing primitives for class ({c}, {s})")
            if (c, s) not in incoming:
                missing.append(f"no incoming primitives for class ({c}, {s})")
    if missing:
        raise ValidationError("; ".join(missing))
    return lib


# ---------------------------------------------------------------------------
# application


def apply_primitive(base, prim: MotionPrimitive, t_j: float, spec: LatticeSpec):
    """State after t_j seconds of running a primitive from a base node.

    The stored canonical sample is rotated by the quarter-turn implied by the
    base heading (exactly: rotation entries are 0/±1) and translated to the
    base position.
    """
    base = np.asarray(base, dtype=np.float64)
    steps = t_j / prim.dtm
    j = int(np.rint(steps))
    if abs(steps - j) > 1e-9 or not 0 <= j <= prim.n_steps:
        raise ValidationError(f"off-grid sample time {t_j!r}")
    base_h = spec.heading_index(base[2])
    n = spec.n_canonical
    if base_h % n != prim.heading_idx:
        raise ValidationError("base heading does not match the primitive class")
    k = (base_h // n) % 4
    rot = _ROT90[k]
    out = prim.states[j].copy()
    out[:2] = base[:2] + rot @ out[:2]
    out[2] = vessel.wrap_angle(out[2] + k * 0.5 * np.pi)
    return out


# ---------------------------------------------------------------------------
# heuristic lookup table


@dataclass(frozen=True)
class Hlut:
    """Free-space minimal-cost table around the origin, plus a far bound.

    table[c, s_from, iy, ix, h_to * n_speeds + s_to] holds the minimal
    lattice cost from the origin at canonical heading c, node speed s_from to
    the cell (ix - W, iy - W) in that class.  Values are clamped to the
    window escape bound, which keeps them admissible despite windowing, and
    rounded toward zero when narrowed to float32.  Queries outside `radius`
    fall back to straight-line time at maximum speed.
    """

    r_p: float
    radius: float
    half_width: int
    n_headings: int
    n_speeds: int
    v_max: float
    table: np.ndarray = field(repr=False)

    def query(self, dx: float, dy: float, h_from: int, s_from: int,
              h_to: int, s_to: int) -> float:
        n = self.n_headings // 4
        k = (int(h_from) // n) % 4
        c = int(h_from) % n
        rot = _ROT90[(-k) % 4]
        d = rot @ np.array([dx, dy], dtype=np.float64)
        euclid = float(np.hypot(dx, dy)) / self.v_max
        if max(abs(d[0]), abs(d[1])) > self.radius + 1e-9:
            return euclid
        ix = int(np.rint(d[0] / self.r_p)) + self.half_width
        iy = int(np.rint(d[1] / self.r_p)) + self.half_width
        side = 2 * self.half_width + 1
        if not (0 <= ix < side and 0 <= iy < side):
            return euclid
        h_rel = (int(h_to) - k * n) % self.n_headings
        val = float(self.table[c, int(s_from), iy, ix,
                               h_rel * self.n_speeds + int(s_to)])
        return max(val, euclid)


def build_hlut(lib: PrimitiveLibrary, radius: float, pad: float = None) -> Hlut:
    """Windowed Dijkstra per canonical start class over the primitive graph.

    The stored value for any in-window target is min(windowed cost, B) with
    B = (2 * window extent - radius) / v_max: any true optimal path that
    leaves the window is at least that long in time, so the clamp keeps every
    entry at or below the true free-space optimum.
    """
    spec = lib.spec
    if pad is None:
        pad = max(0.6 * radius, 50.0)
    W = int(np.ceil((radius + pad) / spec.r_p))
    side = 2 * W + 1
    n_classes = spec.n_headings * spec.n_speeds

    moves = lib.expanded_moves()
    offsets = np.zeros(n_classes + 1, dtype=np.int64)
    dxdy, to_cls, costs = [], [], []
    for h in range(spec.n_headings):
        for s in range(spec.n_speeds):
            cls = h * spec.n_speeds + s
            entries = moves[(h, s)]
            offsets[cls + 1] = offsets[cls] + len(entries)
            for prim, _, dcell, end_h, end_s in entries:
                dxdy.append(dcell)
                to_cls.append(end_h * spec.n_speeds + end_s)
                costs.append(prim.cost)
    dxdy = np.asarray(dxdy, dtype=np.int64).reshape(-1, 2)
    to_cls = np.asarray(to_cls, dtype=np.int64)
    costs = np.asarray(costs, dtype=np.float64)

    v_max = lib.v_max
    bound = (2.0 * W * spec.r_p - radius) / v_max
    table = np.empty(
        (spec.n_canonical, spec.n_speeds, side, side, n_classes),
        dtype=np.float32,
    )
    for c in range(spec.n_canonical):
        for s in range(spec.n_speeds):
            full = kernels.lattice_dijkstra(
                n_classes, offsets, dxdy, to_cls, costs, W,
                c * spec.n_speeds + s,
            )
            clamped = np.minimum(full, bound)
            t32 = clamped.astype(np.float32)
            high = t32.astype(np.float64) > clamped
            t32[high] = np.nextafter(t32[high], np.float32(-np.inf))
            table[c, s] = t32
    return Hlut(
        r_p=spec.r_p, radius=float(radius), half_width=W,
        n_headings=spec.n_headings, n_speeds=spec.n_speeds,
        v_max=v_max, table=table,
    )


# ---------------------------------------------------------------------------
# serialization


def _header_dict(lib: PrimitiveLibrary) -> dict:
    spec = lib.spec
    head = {
        "format": "fairway-primitive-library",
        "version": 1,
        "model_hash": lib.model_hash,
        "v_max": lib.v_max,
        "lattice": {
            "r_p": spec.r_p,
            "n_headings": spec.n_headings,
            "speeds": list(spec.speeds),
            "dtm": spec.dtm,
        },
        "primitives": [
            {
                "name": p.name,
                "heading_idx": p.heading_idx,
                "speed_idx": p.speed_idx,
                "end_heading_idx": p.end_heading_idx,
                "end_speed_idx": p.end_speed_idx,
                "dcell": list(p.dcell),
                "n_steps": p.n_steps,
                "nx": p.states.shape[1],
                "nu": p.controls.shape[1],
                "cost": p.cost,
            }
            for p in lib.primitives
        ],
        "hlut": None,
    }
    if lib.hlut is not None:
        head["hlut"] = {
            "radius": lib.hlut.radius,
            "half_width": lib.hlut.half_width,
            "v_max": lib.hlut.v_max,
            "shape": list(lib.hlut.table.shape),
        }
    return head


def save_library(lib: PrimitiveLibrary, path: str) -> None:
    """Write magic + JSON header + raw little-endian array payloads."""
    header = json.dumps(
        _header_dict(lib), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for p in lib.primitives:
            fh.write(np.ascontiguousarray(p.states, dtype=np.float64).tobytes())
            fh.write(np.ascontiguousarray(p.controls, dtype=np.float64).tobytes())
        if lib.hlut is not None:
            fh.write(np.ascontiguousarray(lib.hlut.table, dtype=np.float32).tobytes())


def load_library(path: str, ship=None) -> PrimitiveLibrary:
    """Read a library file; refuses one stamped for a different ship."""
    if not os.path.exists(path):
        raise LibraryNotFoundError(f"primitive library not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValidationError(f"not a primitive library file: {path}")
    off = len(_MAGIC)
    if len(blob) < off + 8:
        raise ValidationError(f"truncated library file: {path}")
    (hlen,) = struct.unpack("<Q", blob[off : off + 8])
    off += 8
    try:
        head = json.loads(blob[off : off + int(hlen)].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"corrupt library header: {exc}") from exc
    off += int(hlen)
    if head.get("format") != "fairway-primitive-library" or head.get("version") != 1:
        raise ValidationError("unsupported library format or version")
    if ship is not None and head["model_hash"] != ship.config_hash:
        raise LibraryMismatchError(
            "library was generated for a different ship configuration"
        )
    lat = head["lattice"]
    spec = LatticeSpec(
        r_p=lat["r_p"], n_headings=lat["n_headings"],
        speeds=tuple(lat["speeds"]), dtm=lat["dtm"],
    )
    prims = []
    for meta in head["primitives"]:
        n_st = (meta["n_steps"] + 1) * meta["nx"]
        n_ct = meta["n_steps"] * meta["nu"]
        need = (n_st + n_ct) * 8
        if off + need > len(blob):
            raise ValidationError("library payload truncated")
        states = np.frombuffer(blob, dtype=np.float64, count=n_st, offset=off)
        states = states.reshape(meta["n_steps"] + 1, meta["nx"]).copy()
        off += n_st * 8
        controls = np.frombuffer(blob, dtype=np.float64, count=n_ct, offset=off)
        controls = controls.reshape(meta["n_steps"], meta["nu"]).copy()
        off += n_ct * 8
        prims.append(MotionPrimitive(
            name=meta["name"], heading_idx=meta["heading_idx"],
            speed_idx=meta["speed_idx"],
            end_heading_idx=meta["end_heading_idx"],
            end_speed_idx=meta["end_speed_idx"],
            dcell=tuple(meta["dcell"]), dtm=spec.dtm,
            states=states, controls=controls, cost=meta["cost"],
        ))
    hlut = None
    if head["hlut"] is not None:
        hmeta = head["hlut"]
        shape = tuple(hmeta["shape"])
        count = int(np.prod(shape))
        if off + count * 4 > len(blob):
            raise ValidationError("library payload truncated")
        table = np.frombuffer(blob, dtype=np.float32, count=count, offset=off)
        off += count * 4
        hlut = Hlut(
            r_p=spec.r_p, radius=hmeta["radius"],
            half_width=hmeta["half_width"], n_headings=spec.n_headings,
            n_speeds=spec.n_speeds, v_max=hmeta["v_max"],
            table=table.reshape(shape).copy(),
        )
    return PrimitiveLibrary(
        spec, head["model_hash"], prims, hlut, v_max=head.get("v_max")
    )
