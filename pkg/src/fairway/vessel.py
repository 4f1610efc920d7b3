"""3-DOF ship maneuvering model with azimuth thrusters.

State layout (nx = 6 + 2*nt for nt thrusters):

    [x, y, psi, u, v, r, alpha_1..alpha_nt, n_1..n_nt]

pose in a local metric frame (psi in (-pi, pi]), body velocities
(surge, sway, yaw rate), thruster azimuth angles and shaft speeds.
Controls are the thruster rates [alpha_dot..., n_dot...].

The rigid-body equations are eta_dot = R(psi) nu and
M nu_dot + C(nu) nu + D(nu) nu = tau(alpha, n), where C is built from M so
that nu' C(nu) nu vanishes identically and D adds quadratic modulus damping
to a linear core.  Each thruster produces a planar force
kt * |n| * n * (cos alpha, sin alpha) at its lever arm.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import NumericBlowupError, ValidationError
from .kernels import _purepy

# state vector indices
IX, IY, IPSI, IU, IV, IR = 0, 1, 2, 3, 4, 5


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    return _purepy.wrap_angle(a)


def rotation(psi: float) -> np.ndarray:
    """Planar rotation of body velocities into the world frame (3x3)."""
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class VesselState:
    """Full vessel state split into pose, velocity and thruster settings."""

    eta: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    n: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.eta, self.nu, self.alpha, self.n]).astype(np.float64)

    @classmethod
    def from_vector(cls, x, n_thrusters: int):
        x = np.asarray(x, dtype=np.float64)
        nt = n_thrusters
        return cls(
            eta=x[0:3].copy(),
            nu=x[3:6].copy(),
            alpha=x[6 : 6 + nt].copy(),
            n=x[6 + nt : 6 + 2 * nt].copy(),
        )

    @property
    def speed(self) -> float:
        return float(np.hypot(self.nu[0], self.nu[1]))


@dataclass(frozen=True)
class ShipModelParams:
    """Model coefficients, actuator limits and hull shape for one vessel."""

    name: str
    length: float
    beam: float
    mass: np.ndarray          # (3, 3) inertia incl. added mass
    dlin: np.ndarray          # (3, 3) linear damping
    dquad: np.ndarray         # (3,) quadratic damping diagonal
    kt: float                 # thrust coefficient  N / (rev/s)^2
    thrusters: np.ndarray     # (nt, 2) lever arms in the body frame
    v_max: float              # planar speed bound, m/s
    n_max: float              # shaft speed bound, rev/s
    alpha_rate_max: float     # rad/s
    n_rate_max: float         # rev/s^2
    hull: np.ndarray          # (V, 2) convex CCW footprint polygon
    config_hash: str = ""
    minv: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=np.float64)
        if mass.shape != (3, 3) or not np.allclose(mass, mass.T):
            raise ValidationError("inertia matrix must be symmetric 3x3")
        if np.linalg.eigvalsh(mass).min() <= 0:
            raise ValidationError("inertia matrix must be positive definite")
        if self.thrusters.ndim != 2 or self.thrusters.shape[1] != 2 or self.thrusters.shape[0] < 1:
            raise ValidationError("need at least one thruster lever arm")
        for bound in (self.v_max, self.n_max, self.alpha_rate_max, self.n_rate_max, self.kt):
            if bound <= 0:
                raise ValidationError("model bounds and kt must be positive")
        from .geometry import validate_hull

        object.__setattr__(self, "hull", validate_hull(self.hull))
        object.__setattr__(self, "minv", np.linalg.inv(mass))

    @property
    def hull_radius(self) -> float:
        return float(np.sqrt((self.hull**2).sum(axis=1)).max())

    @property
    def n_thrusters(self) -> int:
        return self.thrusters.shape[0]

    @property
    def nx(self) -> int:
        return 6 + 2 * self.n_thrusters

    @property
    def nu_dim(self) -> int:
        return 2 * self.n_thrusters

    def _rhs_args(self):
        return (self.mass, self.minv, self.dlin, self.dquad, self.kt, self.thrusters)

    def trim_setting(self, surge: float):
        """Thruster settings holding a straight course at the given surge speed.

        Returns (alpha, n) arrays.  Exact equilibrium for laterally symmetric
        thruster layouts: angles zero, shaft speeds balancing surge drag.
        """
        drag = self.dlin[0, 0] * surge + self.dquad[0] * abs(surge) * surge
        if drag < 0:
            raise ValidationError("trim only defined for non-negative surge")
        n = np.sqrt(drag / (self.n_thrusters * self.kt))
        return np.zeros(self.n_thrusters), np.full(self.n_thrusters, n)


# ---------------------------------------------------------------------------
# forces and derivatives


def coriolis(nu, mass) -> np.ndarray:
    """Velocity-dependent Coriolis/centripetal matrix derived from M."""
    u, v, r = nu
    a1 = mass[0, 0] * u + mass[0, 1] * v + mass[0, 2] * r
    a2 = mass[1, 0] * u + mass[1, 1] * v + mass[1, 2] * r
    return np.array([[0.0, 0.0, -a2], [0.0, 0.0, a1], [a2, -a1, 0.0]])


def damping(nu, params: ShipModelParams) -> np.ndarray:
    """Total damping matrix D(nu) = D_L + diag(dquad * |nu|)."""
    return params.dlin + np.diag(params.dquad * np.abs(np.asarray(nu)))


def thruster_force(alpha_j: float, n_j: float, nu, params: ShipModelParams, j: int) -> np.ndarray:
    """Generalized force [Fx, Fy, Mz] of thruster j at setting (alpha_j, n_j).

    The body velocity `nu` is accepted for interface stability (advance-ratio
    corrections would live here) but the default thrust law ignores it.
    """
    f = params.kt * abs(n_j) * n_j
    fx, fy = f * np.cos(alpha_j), f * np.sin(alpha_j)
    lx, ly = params.thrusters[j]
    return np.array([fx, fy, lx * fy - ly * fx])


def total_force(alpha, n, nu, params: ShipModelParams) -> np.ndarray:
    """Sum of all thruster forces."""
    out = np.zeros(3)
    for j in range(params.n_thrusters):
        out += thruster_force(alpha[j], n[j], nu, params, j)
    return out


def dynamics(x, u, params: ShipModelParams) -> np.ndarray:
    """State derivative f(x, u); accepts (nx,) or batched (B, nx) arrays."""
    return _purepy.dynamics_rhs(x, u, *params._rhs_args())


def dynamics_jacobians(X, U, params: ShipModelParams):
    """Analytic Jacobians (A, B) of the state derivative, batched.

    X : (B, nx), U : (B, nu_dim); returns A (B, nx, nx) and B (B, nx, nu_dim).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    nb = X.shape[0]
    nt = params.n_thrusters
    nx = params.nx
    mass, minv = params.mass, params.minv
    dlin, dquad, kt = params.dlin, params.dquad, params.kt
    thr = params.thrusters

    psi = X[:, IPSI]
    u, v, r = X[:, IU], X[:, IV], X[:, IR]
    alpha = X[:, 6 : 6 + nt]
    n = X[:, 6 + nt : 6 + 2 * nt]
    c, s = np.cos(psi), np.sin(psi)

    A = np.zeros((nb, nx, nx))
    # kinematics rows
    A[:, 0, IPSI] = -s * u - c * v
    A[:, 0, IU] = c
    A[:, 0, IV] = -s
    A[:, 1, IPSI] = c * u - s * v
    A[:, 1, IU] = s
    A[:, 1, IV] = c
    A[:, 2, IR] = 1.0

    # d(C nu + D nu)/dnu
    a1 = mass[0, 0] * u + mass[0, 1] * v + mass[0, 2] * r
    a2 = mass[1, 0] * u + mass[1, 1] * v + mass[1, 2] * r
    J = np.zeros((nb, 3, 3))
    J[:, 0, 0] = -mass[1, 0] * r
    J[:, 0, 1] = -mass[1, 1] * r
    J[:, 0, 2] = -(a2 + mass[1, 2] * r)
    J[:, 1, 0] = mass[0, 0] * r
    J[:, 1, 1] = mass[0, 1] * r
    J[:, 1, 2] = a1 + mass[0, 2] * r
    J[:, 2, 0] = mass[1, 0] * u + a2 - mass[0, 0] * v
    J[:, 2, 1] = mass[1, 1] * u - mass[0, 1] * v - a1
    J[:, 2, 2] = mass[1, 2] * u - mass[0, 2] * v
    J[:, 0, 0] += dlin[0, 0] + 2.0 * dquad[0] * np.abs(u)
    J[:, 0, 1] += dlin[0, 1]
    J[:, 0, 2] += dlin[0, 2]
    J[:, 1, 0] += dlin[1, 0]
    J[:, 1, 1] += dlin[1, 1] + 2.0 * dquad[1] * np.abs(v)
    J[:, 1, 2] += dlin[1, 2]
    J[:, 2, 0] += dlin[2, 0]
    J[:, 2, 1] += dlin[2, 1]
    J[:, 2, 2] += dlin[2, 2] + 2.0 * dquad[2] * np.abs(r)
    A[:, 3:6, 3:6] = -np.einsum("ij,bjk->bik", minv, J)

    # thrust derivatives
    f = kt * np.abs(n) * n
    dfdn = 2.0 * kt * np.abs(n)
    ca, sa = np.cos(alpha), np.sin(alpha)
    for j in range(nt):
        lx, ly = thr[j]
        # d tau / d alpha_j
        dtau = np.stack(
            [-f[:, j] * sa[:, j], f[:, j] * ca[:, j], lx * f[:, j] * ca[:, j] + ly * f[:, j] * sa[:, j]],
            axis=1,
        )
        A[:, 3:6, 6 + j] = np.einsum("ij,bj->bi", minv, dtau)
        # d tau / d n_j
        dtau = np.stack(
            [dfdn[:, j] * ca[:, j], dfdn[:, j] * sa[:, j], dfdn[:, j] * (lx * sa[:, j] - ly * ca[:, j])],
            axis=1,
        )
        A[:, 3:6, 6 + nt + j] = np.einsum("ij,bj->bi", minv, dtau)

    B = np.zeros((nb, nx, 2 * nt))
    B[:, 6 : 6 + 2 * nt, :] = np.eye(2 * nt)
    return A, B


def rk4_step_batch(X, U, dt: float, params: ShipModelParams):
    """One RK4 step without angle wrapping; accepts (nx,) or (B, nx)."""
    return _purepy.rk4_step(X, U, dt, *params._rhs_args())


def rk4_jacobians(X, U, dt: float, params: ShipModelParams):
    """Discrete transition x+ = F(x, u) with exact chain-rule Jacobians.

    Returns (X1, Fx, Fu) batched: X1 (B, nx), Fx (B, nx, nx), Fu (B, nx, nu).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    args = params._rhs_args()
    nx = X.shape[1]
    eye = np.eye(nx)[None]

    k1 = _purepy.dynamics_rhs(X, U, *args)
    A1, B1 = dynamics_jacobians(X, U, params)
    x2 = X + 0.5 * dt * k1
    k2 = _purepy.dynamics_rhs(x2, U, *args)
    A2, B2 = dynamics_jacobians(x2, U, params)
    x3 = X + 0.5 * dt * k2
    k3 = _purepy.dynamics_rhs(x3, U, *args)
    A3, B3 = dynamics_jacobians(x3, U, params)
    x4 = X + dt * k3
    k4 = _purepy.dynamics_rhs(x4, U, *args)
    A4, B4 = dynamics_jacobians(x4, U, params)

    K1x = A1
    K2x = A2 @ (eye + 0.5 * dt * K1x)
    K3x = A3 @ (eye + 0.5 * dt * K2x)
    K4x = A4 @ (eye + dt * K3x)
    Fx = eye + (dt / 6.0) * (K1x + 2.0 * K2x + 2.0 * K3x + K4x)

    K1u = B1
    K2u = A2 @ (0.5 * dt * K1u) + B2
    K3u = A3 @ (0.5 * dt * K2u) + B3
    K4u = A4 @ (dt * K3u) + B4
    Fu = (dt / 6.0) * (K1u + 2.0 * K2u + 2.0 * K3u + K4u)

    X1 = X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return X1, Fx, Fu


def integrate(x, u, dt: float, params: ShipModelParams) -> np.ndarray:
    """One RK4 step with the heading wrapped back into (-pi, pi]."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    out = kernels.rollout(x, u[None, :], dt, *params._rhs_args())[1]
    if not np.all(np.isfinite(out)):
        raise NumericBlowupError("integration produced non-finite state")
    return out


def feasible(x, u, params: ShipModelParams, tol: float = 1e-9):
    """Check state and input constraint membership; returns (state_ok, input_ok)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    nt = params.n_thrusters
    speed = np.hypot(x[IU], x[IV])
    state_ok = bool(speed <= params.v_max + tol and np.all(np.abs(x[6 + nt :]) <= params.n_max + tol))
    input_ok = bool(
        np.all(np.abs(u[:nt]) <= params.alpha_rate_max + tol)
        and np.all(np.abs(u[nt:]) <= params.n_rate_max + tol)
    )
    return state_ok, input_ok


# ---------------------------------------------------------------------------
# configuration files

SHIP_SCHEMA_VERSION = 1


def _canonical_dump(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(payload: dict) -> str:
    """Stable content hash of a ship configuration dictionary."""
    return hashlib.sha256(_canonical_dump(payload).encode()).hexdigest()


def params_from_dict(cfg: dict) -> ShipModelParams:
    if cfg.get("schema_version") != SHIP_SCHEMA_VERSION:
        raise ValidationError(f"unsupported ship schema_version {cfg.get('schema_version')!r}")
    required = [
        "name", "length", "beam", "mass_matrix", "linear_damping", "quadratic_damping",
        "thrust_coefficient", "thrusters", "v_max", "n_max", "alpha_rate_max_deg",
        "n_rate_max", "hull",
    ]
    missing = [k for k in required if k not in cfg]
    if missing:
        raise ValidationError(f"ship config missing fields: {missing}")
    try:
        return ShipModelParams(
            name=str(cfg["name"]),
            length=float(cfg["length"]),
            beam=float(cfg["beam"]),
            mass=np.asarray(cfg["mass_matrix"], dtype=np.float64),
            dlin=np.asarray(cfg["linear_damping"], dtype=np.float64),
            dquad=np.asarray(cfg["quadratic_damping"], dtype=np.float64),
            kt=float(cfg["thrust_coefficient"]),
            thrusters=np.asarray([[t["x"], t["y"]] for t in cfg["thrusters"]], dtype=np.float64),
            v_max=float(cfg["v_max"]),
            n_max=float(cfg["n_max"]),
            alpha_rate_max=float(np.deg2rad(cfg["alpha_rate_max_deg"])),
            n_rate_max=float(cfg["n_rate_max"]),
            hull=np.asarray(cfg["hull"], dtype=np.float64),
            config_hash=config_hash(cfg),
        )
    except (TypeError, KeyError, np.exceptions.AxisError) as exc:
        raise ValidationError(f"malformed ship config: {exc}") from exc


def load_ship_config(path) -> ShipModelParams:
    """Load and validate a ship configuration JSON file."""
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"ship config is not valid JSON: {exc}") from exc
    return params_from_dict(cfg)
