"""Traffic-rule situation machinery: CPA, classification, FSM, cost regions.

Each dynamic obstacle carries one discrete situation state.  SF (safe) is the
neutral state; HO (head-on), GW (give-way), SO (stand-on) and OT (overtaking)
are the active encounter states entered from SF through a hysteresis band on
the closest point of approach; EM (emergency) is reachable from every state
when a critical distance will be breached soon, and exits back to SF.

Angles are radians internally; scenario files carry degrees.  Bearings are
measured positive to starboard of the ship's bow.
"""

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .errors import ValidationError
from .geometry import Polygon, as_vertices, footprint, polygon_contains, rel_pos

INFEASIBLE = float("inf")


class ColregsSituation(IntEnum):
    SF = 0
    HO = 1
    GW = 2
    SO = 3
    OT = 4
    EM = 5


_ACTIVE = (
    ColregsSituation.HO,
    ColregsSituation.GW,
    ColregsSituation.SO,
    ColregsSituation.OT,
)

# legal (q_prev, q_next) pairs, excluding self-loops
LEGAL_TRANSITIONS = frozenset(
    [(ColregsSituation.SF, q) for q in _ACTIVE]
    + [(q, ColregsSituation.SF) for q in _ACTIVE]
    + [(q, ColregsSituation.EM) for q in ColregsSituation]
    + [(ColregsSituation.EM, ColregsSituation.SF)]
    + [(q, q) for q in ColregsSituation]
)


class KinState(NamedTuple):
    """Planar kinematic snapshot: pose plus world-frame velocity."""

    x: float
    y: float
    psi: float
    vx: float
    vy: float

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


def kin_from_state(x, params=None) -> KinState:
    """KinState from a full vessel state vector (world velocity from body)."""
    psi = float(x[2])
    c, s = math.cos(psi), math.sin(psi)
    u, v = float(x[3]), float(x[4])
    return KinState(float(x[0]), float(x[1]), psi, c * u - s * v, s * u + c * v)


@dataclass(frozen=True)
class SwitchThresholds:
    """Hysteresis and emergency thresholds for situation switching.

    Defaults: entry/exit bands from the reference simulation setup; the
    critical-distance pair (d_crit, t_crit_max) is a documented default of
    this implementation.  `literal_exit` swaps in the uncorrected exit
    disjunction (exit while still close) for comparison runs.
    """

    d_enter: float = 200.0
    t_enter_low: float = -10.0
    t_enter_high: float = 150.0
    d_exit: float = 240.0
    t_exit_low: float = -25.0
    t_exit_high: float = 200.0
    d_crit: float = 50.0
    t_crit_max: float = 30.0
    eps_v: float = 1e-3
    literal_exit: bool = False

    def __post_init__(self):
        if not (self.d_enter < self.d_exit):
            raise ValidationError("need d_enter < d_exit")
        if not (self.t_exit_low < self.t_enter_low):
            raise ValidationError("need t_exit_low < t_enter_low")
        if not (self.t_enter_high < self.t_exit_high):
            raise ValidationError("need t_enter_high < t_exit_high")
        if not (0.0 < self.d_crit < self.d_enter):
            raise ValidationError("need 0 < d_crit < d_enter")


def cpa(p, v, p_o, v_o, eps_v: float = 1e-3):
    """Time and distance at the closest point of approach.

    Straight-line extrapolation of both tracks; t_cpa clamps to 0 when the
    relative speed is below eps_v and may be negative for diverging tracks.
    """
    dvx = v[0] - v_o[0]
    dvy = v[1] - v_o[1]
    dv2 = dvx * dvx + dvy * dvy
    dpx = p_o[0] - p[0]
    dpy = p_o[1] - p[1]
    if dv2 <= eps_v * eps_v:
        t = 0.0
    else:
        t = (dpx * dvx + dpy * dvy) / dv2
    dx = dpx - t * dvx
    dy = dpy - t * dvy
    return t, math.hypot(dx, dy)


def time_to_critical(p, v, p_o, v_o, d_crit: float) -> Optional[float]:
    """Earliest t >= 0 at which the straight-line distance reaches d_crit.

    None when the relative distance never shrinks to d_crit; 0 when already
    inside.
    """
    if d_crit <= 0:
        raise ValidationError("d_crit must be positive")
    dpx = p[0] - p_o[0]
    dpy = p[1] - p_o[1]
    dvx = v[0] - v_o[0]
    dvy = v[1] - v_o[1]
    c0 = dpx * dpx + dpy * dpy - d_crit * d_crit
    if c0 <= 0.0:
        return 0.0
    a = dvx * dvx + dvy * dvy
    b = 2.0 * (dpx * dvx + dpy * dvy)
    if a < 1e-300:
        return None
    disc = b * b - 4.0 * a * c0
    if disc < 0.0:
        return None
    root = (-b - math.sqrt(disc)) / (2.0 * a)
    return root if root >= 0.0 else None


def classify(ship: KinState, obstacle: KinState) -> ColregsSituation:
    """Encounter label from relative bearing and heading difference.

    beta is the bearing of the obstacle from the ship, positive to starboard;
    dpsi is the obstacle heading minus ship heading, wrapped.  Overtaking
    requires a near-shared course with the ship faster; head-on a reciprocal
    course nearly dead ahead; give-way a starboard-sector contact; stand-on
    covers the rest (including being overtaken from astern).
    """
    dx = obstacle.x - ship.x
    dy = obstacle.y - ship.y
    # body frame: +x forward, +y port; starboard-positive bearing flips y
    c, s = math.cos(ship.psi), math.sin(ship.psi)
    bx = c * dx + s * dy
    by = -s * dx + c * dy
    beta = math.degrees(math.atan2(-by, bx))
    if beta <= -180.0:
        beta += 360.0
    dpsi = math.degrees(_wrap(obstacle.psi - ship.psi))

    if abs(beta) <= 45.0 and abs(dpsi) <= 45.0 and ship.speed > obstacle.speed:
        return ColregsSituation.OT
    if abs(beta) <= 22.5 and abs(dpsi) > 157.5:
        return ColregsSituation.HO
    if 0.0 < beta <= 112.5:
        return ColregsSituation.GW
    return ColregsSituation.SO


def _wrap(a: float) -> float:
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w < 0.0:
        w += 2.0 * math.pi
    w -= math.pi
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


def _critical(ship: KinState, obstacle: KinState, th: SwitchThresholds) -> bool:
    t_crit = time_to_critical(
        (ship.x, ship.y), (ship.vx, ship.vy), (obstacle.x, obstacle.y), (obstacle.vx, obstacle.vy), th.d_crit
    )
    return t_crit is not None and t_crit < th.t_crit_max


def fsm_step(
    q_prev: ColregsSituation, ship: KinState, obstacle: KinState, th: SwitchThresholds
) -> ColregsSituation:
    """One situation-machine update for a single obstacle."""
    if _critical(ship, obstacle, th):
        return ColregsSituation.EM
    if q_prev == ColregsSituation.EM:
        return ColregsSituation.SF

    t_cpa, d_cpa = cpa(
        (ship.x, ship.y), (ship.vx, ship.vy), (obstacle.x, obstacle.y), (obstacle.vx, obstacle.vy), th.eps_v
    )
    if q_prev == ColregsSituation.SF:
        if d_cpa <= th.d_enter and th.t_enter_low <= t_cpa <= th.t_enter_high:
            return classify(ship, obstacle)
        return ColregsSituation.SF

    # active encounter state: hysteresis exit
    in_band = th.t_exit_low <= t_cpa <= th.t_exit_high
    if th.literal_exit:
        exit_now = (d_cpa <= th.d_exit) or not in_band
    else:
        exit_now = (d_cpa > th.d_exit) or not in_band
    return ColregsSituation.SF if exit_now else q_prev


@dataclass(frozen=True)
class SituationTimeline:
    """Piecewise-constant situation trajectory on a sample grid."""

    times: np.ndarray
    states: np.ndarray  # int codes, one per sample

    @property
    def intervals(self):
        """List of (t_start, t_end, situation); half-open, contiguous."""
        t = self.times
        q = self.states
        if len(t) == 0:
            return []
        dt = float(t[-1] - t[-2]) if len(t) >= 2 else 0.0
        out = []
        start = 0
        for i in range(1, len(q) + 1):
            if i == len(q) or q[i] != q[start]:
                t_end = t[i] if i < len(q) else t[-1] + dt
                out.append((float(t[start]), float(t_end), ColregsSituation(int(q[start]))))
                start = i
        return out

    def at(self, t: float) -> ColregsSituation:
        i = int(np.searchsorted(self.times, t + 1e-12) - 1)
        i = max(0, min(i, len(self.states) - 1))
        return ColregsSituation(int(self.states[i]))


def colregs_trajectory(
    ship_times, ship_kin, obstacle_times, obstacle_kin, q0: ColregsSituation, th: SwitchThresholds
) -> SituationTimeline:
    """Fold the FSM over matched sample grids of ship and obstacle states.

    ship_kin / obstacle_kin: (n, 5) arrays of [x, y, psi, vx, vy].
    """
    ship_times = np.asarray(ship_times, dtype=np.float64)
    obstacle_times = np.asarray(obstacle_times, dtype=np.float64)
    if ship_times.shape != obstacle_times.shape or not np.allclose(
        ship_times, obstacle_times, atol=1e-9
    ):
        raise ValidationError("ship and obstacle trajectories must share the sampling grid")
    ship_kin = np.asarray(ship_kin, dtype=np.float64)
    obstacle_kin = np.asarray(obstacle_kin, dtype=np.float64)
    if ship_kin.shape != (len(ship_times), 5) or obstacle_kin.shape != ship_kin.shape:
        raise ValidationError("kinematic arrays must be (n, 5) on the shared grid")
    q = q0
    states = np.empty(len(ship_times), dtype=np.int8)
    for i in range(len(ship_times)):
        q = fsm_step(q, KinState(*ship_kin[i]), KinState(*obstacle_kin[i]), th)
        states[i] = int(q)
    return SituationTimeline(times=ship_times, states=states)


# ---------------------------------------------------------------------------
# cost regions


def _octagon(radius: float) -> np.ndarray:
    ang = np.arange(8) * (np.pi / 4.0)
    return np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])


def _rect(x_lo, x_hi, y_lo, y_hi) -> np.ndarray:
    return np.array([[x_lo, y_lo], [x_hi, y_lo], [x_hi, y_hi], [x_lo, y_hi]], dtype=np.float64)


@dataclass(frozen=True)
class CaRegionSet:
    """Keep-out polygons (obstacle body frame) and state costs per situation.

    Body frame: +x along the obstacle heading, +y to its port side.  Every
    polygon contains the obstacle origin.  `hard` turns region intrusion into
    infeasibility instead of an interior cost.
    """

    regions: dict
    entry_cost: dict
    interior_cost: float = 1.0
    hard: bool = True

    def __post_init__(self):
        for q, poly in self.regions.items():
            if q not in _ACTIVE:
                raise ValidationError("regions only defined for HO/GW/SO/OT")
            if not polygon_contains(poly, (0.0, 0.0)):
                raise ValidationError(f"region for {q.name} must contain the obstacle origin")

    @classmethod
    def for_obstacle_length(cls, length: float, entry_cost=None, interior_cost: float = 1.0,
                            hard: bool = True, scale: float = 1.0):
        """Default region shapes scaled by the obstacle length.

        Head-on: 4Lx2L rectangle ahead and to port; give-way: 5Lx3L rectangle
        ahead and to port (forces passing astern); overtaking: octagon of
        radius 2L; stand-on: octagon of radius 1.5L.
        """
        L = float(length) * scale
        regions = {
            ColregsSituation.HO: Polygon(_rect(-0.5 * L, 3.5 * L, -0.5 * L, 1.5 * L)),
            ColregsSituation.GW: Polygon(_rect(-0.5 * L, 4.5 * L, -0.5 * L, 2.5 * L)),
            ColregsSituation.OT: Polygon(_octagon(2.0 * L)),
            ColregsSituation.SO: Polygon(_octagon(1.5 * L)),
        }
        if entry_cost is None:
            entry_cost = DEFAULT_ENTRY_COST
        return cls(regions=regions, entry_cost=dict(entry_cost), interior_cost=interior_cost, hard=hard)

    def region_world(self, q: ColregsSituation, obstacle_pose) -> Optional[np.ndarray]:
        """Region polygon placed at the obstacle pose; None for SF/EM."""
        poly = self.regions.get(q)
        if poly is None:
            return None
        return footprint(obstacle_pose, poly.vertices)


DEFAULT_ENTRY_COST = {
    ColregsSituation.SF: 0.0,
    ColregsSituation.HO: 0.2,
    ColregsSituation.GW: 0.2,
    ColregsSituation.SO: 0.05,
    ColregsSituation.OT: 0.2,
}


def ca_cost(ship: KinState, obstacle: KinState, q: ColregsSituation,
            regions: CaRegionSet, hull) -> float:
    """Per-second rule cost of the current situation; inf when infeasible.

    SF is free.  Active states pay their entry rate k_q; intruding into the
    situation's keep-out region either adds the interior rate (soft mode) or
    is infeasible (hard mode).  Hard mode tests full footprint overlap with
    the region; soft mode tests the footprint point nearest the obstacle,
    matching the relative-position activation rule.
    """
    if q == ColregsSituation.EM:
        raise ValidationError("emergency state is handled by the caller")
    if q == ColregsSituation.SF:
        return 0.0
    k_q = float(regions.entry_cost.get(q, 0.0))
    region = regions.region_world(q, (obstacle.x, obstacle.y, obstacle.psi))
    if region is None:
        return k_q
    fp = footprint((ship.x, ship.y, ship.psi), as_vertices(hull))
    if regions.hard:
        if kernels.poly_intersects(fp, region):
            return INFEASIBLE
        return k_q
    nearest = np.array([obstacle.x, obstacle.y]) + rel_pos(fp, (obstacle.x, obstacle.y))
    if polygon_contains(region, nearest):
        return k_q + float(regions.interior_cost)
    return k_q
