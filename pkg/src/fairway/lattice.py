"""Traffic-rule-augmented A* search over the motion-primitive graph.

The searched vertex is not just a lattice state: it carries the arrival time
(costs against moving obstacles depend on the clock) and the per-obstacle
situation vector (the rule machine is path dependent).  Edge costs combine
the primitive's precomputed position-invariant cost, a static clearance band
read from a precomputed cost map, and per-sample rule costs against each
predicted obstacle; in hard mode an intrusion into an active rule region
makes the edge infeasible outright.

The heuristic is the free-space lookup table built with the library, floored
by straight-line distance times the cheapest cost-per-meter any primitive
achieves.  Both bounds are admissible but their max is not consistent (the
table's windowed seam already is not), so the search reopens closed vertices;
with an admissible heuristic that restores optimality at the first goal pop.
"""

import heapq
import itertools
import logging
from dataclasses import dataclass

import numpy as np

from . import kernels, vessel
from .colregs import (
    INFEASIBLE,
    CaRegionSet,
    ColregsSituation,
    KinState,
    SituationTimeline,
    SwitchThresholds,
    ca_cost,
    colregs_trajectory,
    fsm_step,
)
from .errors import (
    OffLatticeError,
    PlanInfeasibleError,
    PredictionHorizonError,
    ValidationError,
)
from .geometry import as_vertices, inflate_convex, validate_hull
from .primitives import MotionPrimitive, _ROT90

log = logging.getLogger(__name__)

_SF = int(ColregsSituation.SF)
_EM = int(ColregsSituation.EM)


# ---------------------------------------------------------------------------
# static cost map


class StaticCostMap:
    """Clearance-shaped cost field on a fixed grid, plus the source polygons.

    Each cell holds k_d * max(0, d_safe - dist)^2 with dist the distance to
    the nearest obstacle polygon (zero inside one), mirroring the clearance
    shaping of the improvement objective so both planning steps price
    proximity the same way.  The grid covers every polygon's band, so reads
    outside it are legitimately free (0); exact collision tests always use
    the polygons themselves, never the grid.
    """

    def __init__(self, polygons, k_d: float = 1.5e-3, d_safe: float = 20.0,
                 resolution: float = 1.0, bounds=None):
        if k_d < 0 or d_safe <= 0 or resolution <= 0:
            raise ValidationError("need k_d >= 0, d_safe > 0, resolution > 0")
        self.polygons = tuple(as_vertices(p) for p in polygons)
        self.k_d = float(k_d)
        self.d_safe = float(d_safe)
        self.resolution = float(resolution)

        pad = self.d_safe + self.resolution
        if bounds is None:
            if self.polygons:
                allv = np.vstack(self.polygons)
                bounds = (allv[:, 0].min() - pad, allv[:, 1].min() - pad,
                          allv[:, 0].max() + pad, allv[:, 1].max() + pad)
            else:
                bounds = (0.0, 0.0, resolution, resolution)
        x0, y0, x1, y1 = (float(v) for v in bounds)
        if not (x1 > x0 and y1 > y0):
            raise ValidationError("bounds must span a positive area")
        self.origin = (x0, y0)
        w = int(np.ceil((x1 - x0) / self.resolution))
        h = int(np.ceil((y1 - y0) / self.resolution))
        grid = np.zeros((h, w))
        for verts in self.polygons:
            self._paint(grid, verts)
        grid.setflags(write=False)
        self.grid = grid

    def _paint(self, grid, verts):
        """Max-combine one polygon's band into the grid, windowed and chunked."""
        res = self.resolution
        ox, oy = self.origin
        pad = self.d_safe + res
        ix0 = max(0, int(np.floor((verts[:, 0].min() - pad - ox) / res)))
        iy0 = max(0, int(np.floor((verts[:, 1].min() - pad - oy) / res)))
        ix1 = min(grid.shape[1], int(np.ceil((verts[:, 0].max() + pad - ox) / res)))
        iy1 = min(grid.shape[0], int(np.ceil((verts[:, 1].max() + pad - oy) / res)))
        if ix1 <= ix0 or iy1 <= iy0:
            return
        xs = ox + (np.arange(ix0, ix1) + 0.5) * res
        rows_per = max(1, int(2e6 // (len(verts) * max(1, ix1 - ix0))))
        for ry in range(iy0, iy1, rows_per):
            ry1 = min(iy1, ry + rows_per)
            ys = oy + (np.arange(ry, ry1) + 0.5) * res
            gx, gy = np.meshgrid(xs, ys)
            pts = np.column_stack([gx.ravel(), gy.ravel()])
            d, _, _ = kernels.poly_point_info(verts, pts)
            band = self.k_d * np.clip(self.d_safe - d, 0.0, None) ** 2
            block = band.reshape(ry1 - ry, ix1 - ix0)
            np.maximum(grid[ry:ry1, ix0:ix1], block, out=grid[ry:ry1, ix0:ix1])

    def cost_at(self, pts) -> np.ndarray:
        """Per-point cost rate; points beyond the grid read 0 (free water)."""
        pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=np.float64)
        return kernels.grid_lookup(self.grid, self.origin[0], self.origin[1],
                                   self.resolution, pts)


# ---------------------------------------------------------------------------
# obstacle predictions


@dataclass(frozen=True, eq=False)
class ObstaclePrediction:
    """Predicted track of one dynamic obstacle on a time grid.

    kin rows are [x, y, psi, vx, vy] in the world frame.  Pose queries
    interpolate linearly (heading along the unwrapped branch) and hold the
    velocity of the earlier sample; queries beyond the last sample raise,
    because pretending to know an obstacle's future is how planners collide.
    """

    times: np.ndarray
    kin: np.ndarray
    hull: np.ndarray
    regions: CaRegionSet
    name: str = ""

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).copy()
        k = np.asarray(self.kin, dtype=np.float64).copy()
        if t.ndim != 1 or len(t) < 1:
            raise ValidationError("prediction needs at least one sample")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("prediction timestamps must strictly increase")
        if k.shape != (len(t), 5):
            raise ValidationError("prediction kin must be (n, 5) [x, y, psi, vx, vy]")
        hull = validate_hull(self.hull).copy()
        for arr in (t, k, hull):
            arr.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "kin", k)
        object.__setattr__(self, "hull", hull)
        object.__setattr__(self, "_psi_branch", np.unwrap(k[:, 2]))

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def kin_grid(self, times) -> np.ndarray:
        """(n, 5) kinematic rows at the query times."""
        t = np.asarray(times, dtype=np.float64)
        if np.any(t > self.times[-1] + 1e-9):
            raise PredictionHorizonError(
                f"prediction for {self.name or 'obstacle'} ends at "
                f"{self.horizon:.1f} s, before {float(t.max()):.1f} s"
            )
        tc = np.clip(t, self.times[0], self.times[-1])
        out = np.empty((len(t), 5))
        out[:, 0] = np.interp(tc, self.times, self.kin[:, 0])
        out[:, 1] = np.interp(tc, self.times, self.kin[:, 1])
        out[:, 2] = vessel.wrap_angle(np.interp(tc, self.times, self._psi_branch))
        idx = np.clip(np.searchsorted(self.times, tc + 1e-9) - 1, 0, len(self.times) - 1)
        out[:, 3] = self.kin[idx, 3]
        out[:, 4] = self.kin[idx, 4]
        return out

    def kin_at(self, t: float) -> KinState:
        return KinState(*self.kin_grid([float(t)])[0])

    @classmethod
    def constant_velocity(cls, hull, regions, pose, vel, t_start: float,
                          t_end: float, dt: float = 2.0, name: str = ""):
        """Straight track at fixed heading and velocity over [t_start, t_end]."""
        if t_end <= t_start:
            raise ValidationError("need t_end > t_start")
        n = int(np.ceil((t_end - t_start) / dt))
        t = t_start + dt * np.arange(n + 1)
        t[-1] = t_end
        kin = np.empty((n + 1, 5))
        kin[:, 0] = pose[0] + (t - t_start) * vel[0]
        kin[:, 1] = pose[1] + (t - t_start) * vel[1]
        kin[:, 2] = pose[2]
        kin[:, 3] = vel[0]
        kin[:, 4] = vel[1]
        return cls(times=t, kin=kin, hull=hull, regions=regions, name=name)


# ---------------------------------------------------------------------------
# edge sampling and situation folding


def _state_vector(x) -> np.ndarray:
    if hasattr(x, "as_vector"):
        return np.asarray(x.as_vector(), dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _edge_turns(spec, base, prim: MotionPrimitive) -> int:
    """Quarter turns taking the stored canonical primitive to the base heading."""
    base_h = spec.heading_index(base[2])
    n = spec.n_canonical
    if base_h % n != prim.heading_idx:
        raise ValidationError("base heading does not match the primitive class")
    return (base_h // n) % 4


def edge_states(spec, base, prim: MotionPrimitive) -> np.ndarray:
    """All world-frame samples of a primitive applied from a base state.

    Batched version of apply_primitive over the whole sample grid: positions
    are rotated by the exact quarter-turn matrix and translated to the base,
    headings shifted and wrapped, body-frame velocities and actuator states
    taken verbatim.
    """
    base = np.asarray(base, dtype=np.float64)
    k = _edge_turns(spec, base, prim)
    rot = _ROT90[k]
    out = prim.states.copy()
    out[:, :2] = out[:, :2] @ rot.T + base[:2]
    out[:, 2] = vessel.wrap_angle(out[:, 2] + k * 0.5 * np.pi)
    return out


def _kin_rows(states) -> np.ndarray:
    """(n, 5) planar kinematics [x, y, psi, vx, vy] from full state samples."""
    psi = states[:, 2]
    c, s = np.cos(psi), np.sin(psi)
    u, v = states[:, 3], states[:, 4]
    out = np.empty((states.shape[0], 5))
    out[:, 0] = states[:, 0]
    out[:, 1] = states[:, 1]
    out[:, 2] = psi
    out[:, 3] = c * u - s * v
    out[:, 4] = s * u + c * v
    return out


def _stays_safe(ship_kin, obs_kin, th: SwitchThresholds) -> bool:
    """Conservative vectorized screen: no sample can leave SF.

    Replicates the machine's entry and emergency predicates with a small
    tolerance band, so True is only returned when the exact fold would keep
    every sample in SF (SF in, no trigger, SF out is the machine's own rule);
    near-threshold samples fall through to the exact fold.
    """
    band = 1e-6
    dpx = obs_kin[:, 0] - ship_kin[:, 0]
    dpy = obs_kin[:, 1] - ship_kin[:, 1]
    dvx = ship_kin[:, 3] - obs_kin[:, 3]
    dvy = ship_kin[:, 4] - obs_kin[:, 4]
    dv2 = dvx * dvx + dvy * dvy
    dot = dpx * dvx + dpy * dvy
    t_cpa = np.where(dv2 <= th.eps_v**2, 0.0, dot / np.maximum(dv2, 1e-300))
    d_cpa = np.hypot(dpx - t_cpa * dvx, dpy - t_cpa * dvy)
    enter = ((d_cpa <= th.d_enter + band)
             & (t_cpa >= th.t_enter_low - band)
             & (t_cpa <= th.t_enter_high + band))
    if enter.any():
        return False
    # emergency is reachable iff the distance dips to d_crit inside the
    # lookahead window; the quadratic distance is minimal at the clamped CPA
    t_w = np.clip(t_cpa, 0.0, th.t_crit_max)
    d_w = np.hypot(dpx - t_w * dvx, dpy - t_w * dvy)
    return not bool((d_w <= th.d_crit + band).any())


def _fold(times, ship_kin, obs_kins, q_from, th: SwitchThresholds):
    """Fold the situation machine once per sample after the first.

    The first sample's situations are q_from, already produced at that
    absolute time by the caller (parent edge or the start-node step), so
    chained edges replicate exactly one continuous fold over the
    concatenated grid.  Returns (seq, q_next) with seq[i, j] the situation
    code of obstacle i at sample j.
    """
    n = len(times)
    seq = np.empty((len(obs_kins), n), dtype=np.int8)
    q_next = []
    for i, okin in enumerate(obs_kins):
        q0 = int(q_from[i])
        seq[i, 0] = q0
        if n == 1:
            q_next.append(q0)
            continue
        if q0 == _SF and _stays_safe(ship_kin[1:], okin[1:], th):
            seq[i, 1:] = _SF
            q_next.append(_SF)
            continue
        tl = colregs_trajectory(times[1:], ship_kin[1:, :], times[1:],
                                okin[1:, :], ColregsSituation(q0), th)
        seq[i, 1:] = tl.states
        q_next.append(int(tl.states[-1]))
    return seq, tuple(q_next)


def fold_situations(times, ship_kin, predictions, q_from,
                    thresholds: SwitchThresholds):
    """Per-obstacle situation sequences along one edge's sample grid.

    ship_kin: (n, 5) rows [x, y, psi, vx, vy] at `times`.  q_from is the
    situation vector in force at the first sample.  Returns (seq, q_next).
    """
    times = np.asarray(times, dtype=np.float64)
    ship_kin = np.asarray(ship_kin, dtype=np.float64)
    obs = [pred.kin_grid(times) for pred in predictions]
    return _fold(times, ship_kin, obs, q_from, thresholds)


def _rule_cost(hull, dtm, ship_kin, obs_kins, regions, seq) -> float:
    """Summed per-sample rule cost over samples 0..N_m-1, or INFEASIBLE.

    An EM sample makes the edge infeasible: the search never plans through
    an emergency, it routes so the machine stays clear of one.
    """
    n_m = ship_kin.shape[0] - 1
    total = 0.0
    for i in range(len(obs_kins)):
        row = seq[i]
        okin = obs_kins[i]
        for j in range(n_m):
            q = int(row[j])
            if q == _SF:
                continue
            if q == _EM:
                return INFEASIBLE
            c = ca_cost(KinState(*ship_kin[j]), KinState(*okin[j]),
                        ColregsSituation(q), regions[i], hull)
            if c == INFEASIBLE:
                return INFEASIBLE
            total += c
    return dtm * total


# ---------------------------------------------------------------------------
# stage cost and collision check


def stage_cost(ship, spec, base, prim: MotionPrimitive, t0: float, static_map,
               predictions, situations_along) -> float:
    """Total cost of applying one primitive from `base` at absolute time t0.

    Position-invariant primitive cost, plus the static clearance band
    integrated over the samples, plus per-obstacle rule costs evaluated at
    the matching absolute times.  situations_along holds one code sequence
    per obstacle covering at least samples 0..N_m-1 (produce it with
    fold_situations).  Returns INFEASIBLE when a hard-mode region is hit or
    an emergency sample occurs.
    """
    base = _state_vector(base)
    states = edge_states(spec, base, prim)
    n_m = prim.n_steps
    times = t0 + prim.dtm * np.arange(n_m + 1)
    for pred in predictions:
        if times[-1] > pred.horizon + 1e-9:
            raise PredictionHorizonError(
                f"prediction for {pred.name or 'obstacle'} ends at "
                f"{pred.horizon:.1f} s, before the edge end {times[-1]:.1f} s"
            )
    if len(situations_along) != len(predictions):
        raise ValidationError("need one situation sequence per obstacle")
    seq = []
    for row in situations_along:
        row = np.asarray(row, dtype=np.int8)
        if len(row) < n_m:
            raise ValidationError("situation sequence shorter than the edge")
        seq.append(row)
    l_s = prim.dtm * float(static_map.cost_at(states[:-1, :2]).sum())
    kin = _kin_rows(states)
    obs = [pred.kin_grid(times) for pred in predictions]
    l_ca = _rule_cost(ship.hull, prim.dtm, kin, obs,
                      [pred.regions for pred in predictions], seq)
    if l_ca == INFEASIBLE:
        return INFEASIBLE
    return prim.cost + l_s + l_ca


def collision_check(ship, spec, base, prim: MotionPrimitive, t0: float,
                    static_map, predictions) -> bool:
    """True iff every sampled footprint clears all obstacles.

    Static polygons are tested exactly; predicted obstacle footprints are
    inflated by d_safe/2 and tested at the matching absolute times.  An
    obstacle whose prediction ends mid-edge is checked on the samples it
    covers (the cost side, not this check, polices horizons).
    """
    base = _state_vector(base)
    states = edge_states(spec, base, prim)
    poses = np.ascontiguousarray(states[:, :3])
    hull = ship.hull
    for verts in static_map.polygons:
        if kernels.sweep_collision(hull, poses, verts).any():
            return False
    times = t0 + prim.dtm * np.arange(prim.n_steps + 1)
    for pred in predictions:
        m = int(np.searchsorted(times, pred.horizon + 1e-9))
        if m == 0:
            continue
        okin = pred.kin_grid(times[:m])
        infl = inflate_convex(pred.hull, 0.5 * static_map.d_safe)
        if kernels.pair_sweep_collision(hull, poses[:m], infl,
                                        np.ascontiguousarray(okin[:, :3])).any():
            return False
    return True


# ---------------------------------------------------------------------------
# snapping


def snap_start(ship, spec, x, tol: float = None):
    """Nearest lattice node to a full state, with the discarded offset.

    Position snaps to the nearest cell, heading to the nearest bin, surge to
    the nearest node speed; sway, yaw rate and actuators are replaced by the
    node trim.  A planar snap distance beyond `tol` (default r_p/2) raises
    OffLatticeError.  Returns (cell, heading_idx, speed_idx, node_state,
    offset) where offset is the full-state difference input minus node.
    """
    x = _state_vector(x)
    if tol is None:
        tol = 0.5 * spec.r_p
    cell = np.rint(x[:2] / spec.r_p).astype(np.int64)
    off = x[:2] - cell * spec.r_p
    dist = float(np.hypot(*off))
    if dist > tol + 1e-12:
        raise OffLatticeError(
            f"start position is {dist:.2f} m from the nearest lattice node "
            f"(tolerance {tol:.2f} m)"
        )
    h = int(np.rint(x[2] * spec.n_headings / (2.0 * np.pi))) % spec.n_headings
    s = int(np.argmin([abs(x[3] - sp) for sp in spec.speeds]))
    node = spec.node_state(ship, int(cell[0]), int(cell[1]), h, s)
    return (int(cell[0]), int(cell[1])), h, s, node, x - node


def _require_node(ship, spec, x, what: str = "goal"):
    """Exact lattice-node match (docking precision); raises OffLatticeError."""
    x = _state_vector(x)
    dpos = x[:2] / spec.r_p
    cell = np.rint(dpos).astype(np.int64)
    if np.abs(dpos - cell).max() > 1e-6:
        raise OffLatticeError(f"{what} position is not on the lattice grid")
    try:
        h = spec.heading_index(x[2])
        s = spec.speed_index(x[3])
    except ValidationError as exc:
        raise OffLatticeError(f"{what} {exc}") from exc
    node = spec.node_state(ship, int(cell[0]), int(cell[1]), h, s)
    err = np.abs(x - node)
    err[2] = abs(float(vessel.wrap_angle(x[2] - node[2])))
    if err.max() > 1e-6:
        raise OffLatticeError(
            f"{what} state is not a lattice node (sway, yaw rate and "
            f"actuators must sit at the node trim); worst component "
            f"deviation {err.max():.2e}"
        )
    return (int(cell[0]), int(cell[1])), h, s, node


# ---------------------------------------------------------------------------
# search node and plan


@dataclass(frozen=True, eq=False)
class SearchNode:
    """One A* vertex: lattice state, clock, rule context and parent edge."""

    cell: tuple
    heading_idx: int
    speed_idx: int
    time: float
    situations: tuple
    g: float
    parent: object = None
    prim: MotionPrimitive = None
    seq: np.ndarray = None  # situations along the incoming edge (N_o, N_m+1)

    def key(self, dtm: float):
        """Closed-set identity: cell, classes, time bucket, situation vector."""
        return (self.cell[0], self.cell[1], self.heading_idx, self.speed_idx,
                int(round(self.time / dtm)), self.situations)


@dataclass(frozen=True, eq=False)
class LatticePlan:
    """Search output: primitive chain, sampled trajectory, rule intervals.

    states/controls sit on the dtm grid with joint samples shared, so the
    trajectory is continuous by construction; situations holds one
    SituationTimeline per obstacle on the same grid.  start_offset is the
    full-state difference between the requested start and the snapped node.
    """

    primitives: tuple
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    situations: tuple
    cost: float
    start_offset: np.ndarray
    diagnostics: dict

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


def _min_cost_rate(lib) -> float:
    """Cheapest cost per meter of displacement any primitive achieves.

    Any path covering Euclidean distance D pays at least rate * D: each edge
    costs at least rate times its chord and the chords of a chain sum to at
    least the straight-line distance.
    """
    best = np.inf
    for p in lib.primitives:
        chord = float(np.hypot(*p.dcell)) * lib.spec.r_p
        if chord > 0:
            best = min(best, p.cost / chord)
    return 0.0 if not np.isfinite(best) else best


def plan(ship, lib, start, goal, q0, static_map, predictions, hlut=None,
         thresholds: SwitchThresholds = None, t0: float = None,
         snap_tol: float = None, search_pad: float = 250.0,
         max_expansions: int = 200000) -> LatticePlan:
    """Cost-minimal primitive chain from start to goal under the rule machine.

    The start snaps to the nearest lattice node (offset reported on the
    plan); the goal must already be a lattice node, docking style.  q0 is
    the per-obstacle situation vector in force just before t0.  Expansion
    applies every library primitive rotated into the node heading, rejects
    edges whose swept footprint hits a static polygon or an inflated
    predicted obstacle footprint, folds the situation machine along the
    samples, and prices the edge with stage_cost's terms.  Equal-cost fronts
    break ties toward larger g then lexicographic keys, so reruns are
    reproducible bit for bit.

    Successor cells are confined to the bounding box of start, goal and the
    static polygons padded by `search_pad` meters, which keeps an unreachable
    goal from pulling the frontier into open water forever; max_expansions
    is the hard stop behind that.  Edges that outrun an obstacle's prediction
    horizon are treated as infeasible (their cost is unknowable), so
    predictions should comfortably cover the expected plan duration.
    """
    spec = lib.spec
    dtm = spec.dtm
    if thresholds is None:
        thresholds = SwitchThresholds()
    if hlut is None:
        hlut = lib.hlut
    predictions = list(predictions)
    q0 = [int(q) for q in q0]
    if len(q0) != len(predictions):
        raise ValidationError("need one initial situation per obstacle")
    if t0 is None:
        t0 = max((float(p.times[0]) for p in predictions), default=0.0)
    for pred in predictions:
        if float(pred.times[0]) > t0 + 1e-9:
            raise ValidationError(
                f"prediction for {pred.name or 'obstacle'} starts after t0"
            )

    s_cell, s_h, s_s, s_node, start_offset = snap_start(ship, spec, start, snap_tol)
    g_cell, g_h, g_s, g_node = _require_node(ship, spec, goal)

    # obstacle kinematics resampled once onto the search clock
    n_ticks = []
    obs_grid = []
    for pred in predictions:
        n_t = int(np.floor((pred.horizon - t0) / dtm + 1e-9))
        if n_t < 0:
            raise PredictionHorizonError(
                f"prediction for {pred.name or 'obstacle'} ends before t0"
            )
        obs_grid.append(pred.kin_grid(t0 + dtm * np.arange(n_t + 1)))
        n_ticks.append(n_t)
    tgrid = t0 + dtm * np.arange((max(n_ticks) if n_ticks else 0) + 1)
    infl = [inflate_convex(p.hull, 0.5 * static_map.d_safe) for p in predictions]
    regions = [p.regions for p in predictions]
    hull = ship.hull

    def _pose_blocked(node_state, tick):
        pose = np.ascontiguousarray(node_state[None, :3])
        for verts in static_map.polygons:
            if kernels.sweep_collision(hull, pose, verts).any():
                return True
        for i in range(len(predictions)):
            if tick is None or tick > n_ticks[i]:
                continue
            opose = np.ascontiguousarray(obs_grid[i][tick:tick + 1, :3])
            if kernels.pair_sweep_collision(hull, pose, infl[i], opose).any():
                return True
        return False

    if _pose_blocked(s_node, 0):
        raise PlanInfeasibleError("start pose is in collision")
    if _pose_blocked(g_node, None):
        raise PlanInfeasibleError("goal pose is blocked by a static obstacle")

    # start situations: one machine step at t0
    kin0 = _kin_rows(s_node[None])[0]
    q_start = tuple(
        int(fsm_step(ColregsSituation(q0[i]), KinState(*kin0),
                     KinState(*obs_grid[i][0]), thresholds))
        for i in range(len(predictions))
    )

    diag = {"nodes_expanded": 0, "nodes_generated": 0, "stale_pops": 0}
    root = SearchNode(s_cell, s_h, s_s, float(t0), q_start, 0.0)

    def _assemble(goal_node):
        edges = []
        cur = goal_node
        while cur.parent is not None:
            edges.append(cur)
            cur = cur.parent
        edges.reverse()
        n_total = sum(e.prim.n_steps for e in edges)
        times = t0 + dtm * np.arange(n_total + 1)
        states = np.empty((n_total + 1, ship.nx))
        controls = np.empty((n_total, ship.nu_dim))
        full_seq = np.empty((len(predictions), n_total + 1), dtype=np.int8)
        for i in range(len(predictions)):
            full_seq[i, 0] = q_start[i]
        if not edges:
            states[0] = s_node
        off = 0
        node = root
        for e in edges:
            base = spec.node_state(ship, node.cell[0], node.cell[1],
                                   node.heading_idx, node.speed_idx)
            n_m = e.prim.n_steps
            states[off:off + n_m + 1] = edge_states(spec, base, e.prim)
            controls[off:off + n_m] = e.prim.controls
            if len(predictions):
                full_seq[:, off + 1:off + n_m + 1] = e.seq[:, 1:]
            off += n_m
            node = e
        timelines = tuple(
            SituationTimeline(times=times, states=full_seq[i].copy())
            for i in range(len(predictions))
        )
        diag["heuristic_at_start"] = h_root
        log.debug("lattice plan: %d edges, cost %.3f, %d expansions",
                  len(edges), goal_node.g, diag["nodes_expanded"])
        return LatticePlan(
            primitives=tuple(e.prim for e in edges), times=times,
            states=states, controls=controls, situations=timelines,
            cost=float(goal_node.g), start_offset=start_offset,
            diagnostics=dict(diag),
        )

    moves = lib.expanded_moves()

    # per-(primitive, rotation) kinematic templates at the zero cell, so an
    # expansion is a translate-and-add; a base at cell (0, 0) adds exactly
    # 0.0, keeping these samples bit-identical to edge_states from any base
    cache = {}
    for (h, s), entries in moves.items():
        for prim, k, dcl, eh, es in entries:
            ck = (id(prim), k)
            if ck not in cache:
                zero = spec.node_state(ship, 0, 0, h, s)
                cache[ck] = _kin_rows(edge_states(spec, zero, prim))

    rate = _min_cost_rate(lib)

    def heuristic(cell, h, s):
        dx = (g_cell[0] - cell[0]) * spec.r_p
        dy = (g_cell[1] - cell[1]) * spec.r_p
        val = float(np.hypot(dx, dy)) * rate
        if hlut is not None:
            val = max(val, hlut.query(dx, dy, h, s, g_h, g_s))
        return val

    pts = [np.asarray(s_node[:2]), np.asarray(g_node[:2])]
    for verts in static_map.polygons:
        pts.append(verts.min(axis=0))
        pts.append(verts.max(axis=0))
    pts = np.vstack(pts)
    lo_b = pts.min(axis=0) - search_pad
    hi_b = pts.max(axis=0) + search_pad

    h_root = heuristic(s_cell, s_h, s_s)
    if (s_cell, s_h, s_s) == (g_cell, g_h, g_s):
        return _assemble(root)
    if _EM in q_start:
        raise PlanInfeasibleError(
            "start is in an emergency situation; resolve it before planning"
        )

    counter = itertools.count()
    best = {root.key(dtm): 0.0}
    heap = [(h_root, 0.0, root.key(dtm), next(counter), root)]
    while heap:
        f, neg_g, key, _, node = heapq.heappop(heap)
        if node.g > best.get(key, np.inf) + 1e-12:
            diag["stale_pops"] += 1
            continue
        if (node.cell, node.heading_idx, node.speed_idx) == (g_cell, g_h, g_s):
            return _assemble(node)
        diag["nodes_expanded"] += 1
        if diag["nodes_expanded"] > max_expansions:
            raise PlanInfeasibleError(
                f"search budget exhausted after {max_expansions} expansions "
                f"({diag['nodes_generated']} edges generated)"
            )
        tick0 = int(round((node.time - t0) / dtm))
        base_pos = np.array([node.cell[0] * spec.r_p, node.cell[1] * spec.r_p])
        for prim, k, dcl, end_h, end_s in moves[(node.heading_idx, node.speed_idx)]:
            ncell = (node.cell[0] + dcl[0], node.cell[1] + dcl[1])
            nx_, ny_ = ncell[0] * spec.r_p, ncell[1] * spec.r_p
            if not (lo_b[0] <= nx_ <= hi_b[0] and lo_b[1] <= ny_ <= hi_b[1]):
                continue
            n_m = prim.n_steps
            tick1 = tick0 + n_m
            # an edge that outruns any obstacle's prediction has unknowable
            # cost; treat it as infeasible rather than abort the search
            if any(tick1 > n_ticks[i] for i in range(len(predictions))):
                diag["horizon_pruned"] = diag.get("horizon_pruned", 0) + 1
                continue
            kin = cache[(id(prim), k)].copy()
            kin[:, 0] += base_pos[0]
            kin[:, 1] += base_pos[1]
            poses = np.ascontiguousarray(kin[:, :3])
            blocked = False
            for verts in static_map.polygons:
                if kernels.sweep_collision(hull, poses, verts).any():
                    blocked = True
                    break
            if blocked:
                continue
            for i in range(len(predictions)):
                oslice = np.ascontiguousarray(obs_grid[i][tick0:tick1 + 1, :3])
                if kernels.pair_sweep_collision(hull, poses, infl[i], oslice).any():
                    blocked = True
                    break
            if blocked:
                continue
            if predictions:
                obs_sl = [obs_grid[i][tick0:tick1 + 1]
                          for i in range(len(predictions))]
                seq, q_next = _fold(tgrid[tick0:tick1 + 1], kin, obs_sl,
                                    node.situations, thresholds)
                l_ca = _rule_cost(hull, dtm, kin, obs_sl, regions, seq)
                if l_ca == INFEASIBLE:
                    continue
            else:
                seq, q_next, l_ca = None, (), 0.0
            l_s = dtm * float(static_map.cost_at(poses[:-1, :2]).sum())
            g2 = node.g + prim.cost + l_s + l_ca
            child = SearchNode(ncell, end_h, end_s, t0 + tick1 * dtm, q_next,
                               g2, parent=node, prim=prim, seq=seq)
            ckey = child.key(dtm)
            if g2 >= best.get(ckey, np.inf) - 1e-12:
                continue
            best[ckey] = g2
            diag["nodes_generated"] += 1
            f2 = g2 + heuristic(ncell, end_h, end_s)
            heapq.heappush(heap, (f2, -g2, ckey, next(counter), child))

    raise PlanInfeasibleError(
        f"open set exhausted after {diag['nodes_expanded']} expansions "
        "without reaching the goal"
    )
