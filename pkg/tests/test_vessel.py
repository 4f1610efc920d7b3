"""Ship model tests: forces, dynamics, Jacobians, integration, config IO.

Derived expectations come from independent oracles: hand-evaluated cross
products, symbolic diagonal-matrix reductions, central finite differences and
Richardson extrapolation ratios.
"""

import json

import numpy as np
import pytest

from fairway.assets import data_path
from fairway.errors import NumericBlowupError, ValidationError
from fairway.vessel import (
    ShipModelParams,
    VesselState,
    config_hash,
    coriolis,
    damping,
    dynamics,
    dynamics_jacobians,
    feasible,
    integrate,
    load_ship_config,
    params_from_dict,
    rk4_jacobians,
    rotation,
    thruster_force,
    total_force,
    wrap_angle,
)

TRI_HULL = np.array([[2.0, 0.0], [-2.0, 1.0], [-2.0, -1.0]])


def toy_params(kt=1.0, thrusters=((-3.0, 0.0),)):
    return ShipModelParams(
        name="toy",
        length=4.0,
        beam=2.0,
        mass=np.diag([10.0, 15.0, 40.0]),
        dlin=np.diag([1.0, 2.0, 5.0]),
        dquad=np.array([0.5, 1.0, 2.0]),
        kt=kt,
        thrusters=np.array(thrusters, dtype=float),
        v_max=3.0,
        n_max=2.0,
        alpha_rate_max=0.5,
        n_rate_max=0.2,
        hull=TRI_HULL,
    )


def random_state(params, rng, speed_scale=1.0):
    nt = params.n_thrusters
    x = np.zeros(params.nx)
    x[0:2] = rng.uniform(-100, 100, 2)
    x[2] = rng.uniform(-np.pi, np.pi)
    x[3:5] = rng.uniform(-1, 1, 2) * params.v_max * 0.6 * speed_scale
    x[5] = rng.uniform(-0.05, 0.05)
    x[6 : 6 + nt] = rng.uniform(-np.pi, np.pi, nt)
    x[6 + nt :] = rng.uniform(-params.n_max, params.n_max, nt)
    return x


def random_input(params, rng):
    nt = params.n_thrusters
    u = np.zeros(2 * nt)
    u[:nt] = rng.uniform(-1, 1, nt) * params.alpha_rate_max
    u[nt:] = rng.uniform(-1, 1, nt) * params.n_rate_max
    return u


class TestRotation:
    def test_identity(self):
        assert np.allclose(rotation(0.0), np.eye(3))

    def test_quarter_turn(self):
        assert np.allclose(rotation(np.pi / 2) @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_half_turn(self):
        assert np.allclose(rotation(np.pi) @ [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], atol=1e-12)

    def test_orthonormal_property(self, rng):
        for psi in rng.uniform(-10, 10, 100):
            R = rotation(psi)
            assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)


class TestThrusterForce:
    def test_zero_speed_zero_force(self):
        p = toy_params()
        assert np.allclose(thruster_force(0.7, 0.0, np.zeros(3), p, 0), 0.0)

    def test_centerline_thrust(self):
        p = toy_params(kt=1.0, thrusters=((-3.0, 0.0),))
        f = thruster_force(0.0, 1.0, np.zeros(3), p, 0)
        assert np.allclose(f, [1.0, 0.0, 0.0], atol=1e-12)

    def test_athwart_thrust_moment(self):
        # oracle: r x F with r=(-L, 0), F=(0, 1) -> moment = -L  (hand cross product)
        L = 3.0
        p = toy_params(kt=1.0, thrusters=((-L, 0.0),))
        f = thruster_force(np.pi / 2, 1.0, np.zeros(3), p, 0)
        assert np.allclose(f, [0.0, 1.0, -L], atol=1e-12)

    def test_reverse_is_signed(self):
        p = toy_params(kt=2.0, thrusters=((-3.0, 0.0),))
        f = thruster_force(0.0, -1.5, np.zeros(3), p, 0)
        assert f[0] == pytest.approx(-2.0 * 1.5 * 1.5)

    def test_total_force_sums(self, rng):
        p = toy_params(thrusters=((-3.0, 1.0), (-3.0, -1.0)))
        alpha = rng.uniform(-np.pi, np.pi, 2)
        n = rng.uniform(-2, 2, 2)
        acc = sum(thruster_force(alpha[j], n[j], np.zeros(3), p, j) for j in range(2))
        assert np.allclose(total_force(alpha, n, np.zeros(3), p), acc)


class TestDynamics:
    def test_rest_is_equilibrium(self):
        p = toy_params()
        x = np.zeros(p.nx)
        u = np.zeros(p.nu_dim)
        assert np.allclose(dynamics(x, u, p), 0.0)

    def test_surge_decay_matches_symbolic_reduction(self):
        # oracle: diagonal M, D -> u_dot = -(DL11*u + dq_u*|u|u)/M11, all else 0
        p = toy_params()
        u_s = 1.7
        x = np.zeros(p.nx)
        x[3] = u_s
        xdot = dynamics(x, np.zeros(p.nu_dim), p)
        expected = -(p.dlin[0, 0] * u_s + p.dquad[0] * abs(u_s) * u_s) / p.mass[0, 0]
        assert xdot[3] == pytest.approx(expected, rel=1e-12)
        assert xdot[0] == pytest.approx(u_s)  # psi = 0: x_dot = u
        assert np.allclose(xdot[[1, 2, 4, 5]], 0.0)

    def test_coriolis_power_free(self, rng):
        p = toy_params()
        for _ in range(1000):
            nu = rng.uniform(-3, 3, 3)
            C = coriolis(nu, p.mass)
            assert abs(nu @ C @ nu) < 1e-9
            assert np.allclose(C, -C.T, atol=1e-12)

    def test_damping_passive(self, rng):
        p = toy_params()
        for _ in range(200):
            nu = rng.uniform(-3, 3, 3)
            assert nu @ damping(nu, p) @ nu >= 0.0

    def test_world_velocity_rotates(self):
        p = toy_params()
        x = np.zeros(p.nx)
        x[2] = np.pi / 2
        x[3] = 1.0
        xdot = dynamics(x, np.zeros(p.nu_dim), p)
        assert np.allclose(xdot[0:2], [0.0, 1.0], atol=1e-12)


class TestJacobians:
    @staticmethod
    def fd_jacobian(f, z, h=1e-6):
        n = len(z)
        f0 = f(z)
        J = np.zeros((len(f0), n))
        for i in range(n):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            J[:, i] = (f(zp) - f(zm)) / (2 * h)
        return J

    @pytest.mark.parametrize("ship", ["toy", "supply80"])
    def test_dynamics_jacobians_match_fd(self, ship, rng, supply80):
        p = toy_params(thrusters=((-3.0, 1.0), (-3.0, -1.0))) if ship == "toy" else supply80
        for _ in range(100):
            x = random_state(p, rng)
            u = random_input(p, rng)
            A, B = dynamics_jacobians(x[None], u[None], p)
            A_fd = self.fd_jacobian(lambda z: dynamics(z, u, p), x)
            B_fd = self.fd_jacobian(lambda z: dynamics(x, z, p), u)
            scale = max(1.0, np.abs(A_fd).max())
            assert np.abs(A[0] - A_fd).max() / scale < 1e-4
            assert np.abs(B[0] - B_fd).max() < 1e-6

    def test_rk4_jacobians_match_fd(self, rng, supply80):
        p = supply80
        dt = 2.0
        for _ in range(20):
            x = random_state(p, rng)
            u = random_input(p, rng)
            X1, Fx, Fu = rk4_jacobians(x[None], u[None], dt, p)
            from fairway.vessel import rk4_step_batch

            Fx_fd = self.fd_jacobian(lambda z: rk4_step_batch(z, u, dt, p), x, h=1e-5)
            Fu_fd = self.fd_jacobian(lambda z: rk4_step_batch(x, z, dt, p), u, h=1e-5)
            scale = max(1.0, np.abs(Fx_fd).max())
            assert np.abs(Fx[0] - Fx_fd).max() / scale < 1e-4
            assert np.abs(Fu[0] - Fu_fd).max() / max(1.0, np.abs(Fu_fd).max()) < 1e-4


class TestIntegrate:
    def test_zero_fixed_point(self):
        p = toy_params()
        out = integrate(np.zeros(p.nx), np.zeros(p.nu_dim), 2.0, p)
        assert np.allclose(out, 0.0)

    def test_richardson_ratio(self, rng, supply80):
        """Halving dt cuts the local error by ~2^4 (RK4 order check)."""
        p = supply80
        ratios = []
        for _ in range(20):
            x = random_state(p, rng)
            u = random_input(p, rng)
            dt = 4.0

            def fine(x0, steps, h):
                z = x0
                for _ in range(steps):
                    z = integrate(z, u, h, p)
                return z

            ref = fine(x, 16, dt / 16)
            e1 = np.linalg.norm(fine(x, 1, dt) - ref)
            e2 = np.linalg.norm(fine(x, 2, dt / 2) - ref)
            if e2 > 1e-12:
                ratios.append(e1 / e2)
        assert np.median(ratios) > 8.0  # asymptotic 16, allow slack

    def test_heading_wraps(self, supply80):
        p = supply80
        x = np.zeros(p.nx)
        x[2] = np.pi - 1e-3
        x[5] = 0.05  # strong yaw rate carries psi past pi
        out = integrate(x, np.zeros(p.nu_dim), 2.0, p)
        assert -np.pi < out[2] <= np.pi
        assert out[2] < 0  # wrapped onto the negative side

    def test_blowup_detected(self):
        p = toy_params()
        x = np.zeros(p.nx)
        x[3] = 1e300
        with pytest.raises(NumericBlowupError):
            integrate(x, np.zeros(p.nu_dim), 1e3, p)


class TestFeasible:
    def test_speed_within_bound(self, supply80):
        x = np.zeros(supply80.nx)
        x[3] = 3.0  # v_max = 3.09 m/s (6 kn)
        ok, _ = feasible(x, np.zeros(supply80.nu_dim), supply80)
        assert ok

    def test_shaft_speed_bound(self, supply80):
        x = np.zeros(supply80.nx)
        x[8] = 2.1  # n_max = 2 rev/s
        ok, _ = feasible(x, np.zeros(supply80.nu_dim), supply80)
        assert not ok

    def test_rate_bound_closed(self, supply80):
        u = np.zeros(supply80.nu_dim)
        u[0] = np.deg2rad(7.2)  # exactly at the azimuth rate bound
        _, ok = feasible(np.zeros(supply80.nx), u, supply80)
        assert ok

    def test_rate_bound_exceeded(self, supply80):
        u = np.zeros(supply80.nu_dim)
        u[2] = 0.09  # n_rate_max = 0.08 rev/s^2
        _, ok = feasible(np.zeros(supply80.nx), u, supply80)
        assert not ok


class TestWrap:
    def test_pi_maps_to_pi(self):
        assert wrap_angle(np.pi) == pytest.approx(np.pi)
        assert wrap_angle(-np.pi) == pytest.approx(np.pi)

    def test_many(self, rng):
        a = rng.uniform(-30, 30, 1000)
        w = np.array([wrap_angle(v) for v in a])
        assert np.all((w > -np.pi) & (w <= np.pi))
        assert np.allclose(np.cos(w), np.cos(a), atol=1e-12)
        assert np.allclose(np.sin(w), np.sin(a), atol=1e-12)


class TestConfig:
    def test_bundled_ships_load(self, supply80, launch12):
        assert supply80.n_thrusters == 2
        assert supply80.v_max == pytest.approx(3.09)
        assert launch12.length == pytest.approx(12.0)
        assert supply80.config_hash and launch12.config_hash
        assert supply80.config_hash != launch12.config_hash

    def test_hash_stable_under_key_order(self):
        cfg = json.loads(data_path("supply80.json").read_text())
        shuffled = dict(reversed(list(cfg.items())))
        assert config_hash(cfg) == config_hash(shuffled)

    def test_missing_field_rejected(self):
        cfg = json.loads(data_path("supply80.json").read_text())
        del cfg["thrusters"]
        with pytest.raises(ValidationError):
            params_from_dict(cfg)

    def test_bad_schema_version(self):
        cfg = json.loads(data_path("supply80.json").read_text())
        cfg["schema_version"] = 99
        with pytest.raises(ValidationError):
            params_from_dict(cfg)

    def test_asymmetric_mass_rejected(self):
        cfg = json.loads(data_path("supply80.json").read_text())
        cfg["mass_matrix"][0][1] = 5.0
        with pytest.raises(ValidationError):
            params_from_dict(cfg)

    def test_alpha_rate_converted_to_radians(self, supply80):
        assert supply80.alpha_rate_max == pytest.approx(np.deg2rad(7.2))

    def test_trim_holds_speed(self, supply80):
        """Trim settings keep a straight line at constant surge over 200 s."""
        alpha, n = supply80.trim_setting(1.545)
        x = np.zeros(supply80.nx)
        x[3] = 1.545
        x[6:8] = alpha
        x[8:10] = n
        z = x
        for _ in range(100):
            z = integrate(z, np.zeros(supply80.nu_dim), 2.0, supply80)
        assert z[3] == pytest.approx(1.545, abs=1e-9)
        assert abs(z[1]) < 1e-9 and abs(z[2]) < 1e-12

    def test_state_roundtrip(self, supply80):
        st = VesselState(
            eta=np.array([1.0, 2.0, 0.3]),
            nu=np.array([1.0, 0.1, 0.01]),
            alpha=np.array([0.1, -0.1]),
            n=np.array([1.0, 1.0]),
        )
        vec = st.as_vector()
        back = VesselState.from_vector(vec, 2)
        assert np.allclose(back.as_vector(), vec)
        assert st.speed == pytest.approx(np.hypot(1.0, 0.1))
