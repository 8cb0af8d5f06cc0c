import numpy as np
import pytest

from hamsplat import autodiff as ad
from hamsplat import gauss, physics


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


class TestConfig:
    def test_valid(self):
        physics.IntegratorConfig(dt=0.01, phi_max=0.35)

    @pytest.mark.parametrize("kwargs", [dict(dt=0.0), dict(phi_max=0.0), dict(phi_max=4.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            physics.IntegratorConfig(**kwargs)


class TestVerlet:
    def test_pure_velocity(self):
        mu = np.array([1.0, 2.0, 3.0])
        v = np.array([0.5, -0.5, 1.0])
        out = physics.verlet_position(mu, v, np.zeros(3), dt=1.0)
        assert np.allclose(out.data, mu + v)

    def test_pure_force(self):
        mu = np.zeros(3)
        f = np.array([0.0, 0.0, -2.0])
        out = physics.verlet_position(mu, np.zeros(3), f, dt=1.0)
        assert np.allclose(out.data, [0.0, 0.0, -1.0])

    def test_affine_superposition(self):
        rng = np.random.default_rng(0)
        mu = rng.normal(size=3)
        v1, v2 = rng.normal(size=3), rng.normal(size=3)
        f1, f2 = rng.normal(size=3), rng.normal(size=3)
        dt = 0.3
        lhs = physics.verlet_position(mu, v1 + v2, f1 + f2, dt).data
        rhs = (physics.verlet_position(mu, v1, f1, dt).data
               + physics.verlet_position(np.zeros(3), v2, f2, dt).data)
        assert np.allclose(lhs, rhs, atol=1e-15)

    def test_energy_drift_verlet_vs_euler(self):
        # unit harmonic oscillator, F = -x; velocity refreshed by the standard
        # velocity-Verlet rule in this harness
        dt, steps = 0.01, 2000
        x, v = 1.0, 0.0
        for _ in range(steps):
            x_new = physics.verlet_position(np.array([x]), np.array([v]),
                                            np.array([-x]), dt).data[0]
            v = v + 0.5 * dt * (-x - x_new)
            x = x_new
        drift_verlet = abs(0.5 * (x * x + v * v) - 0.5) / 0.5

        x, v = 1.0, 0.0
        for _ in range(steps):
            x, v = x + dt * v, v - dt * x
        drift_euler = abs(0.5 * (x * x + v * v) - 0.5) / 0.5
        assert drift_verlet < 1e-3
        assert drift_euler > 10 * drift_verlet


class TestClampRotation:
    def test_identity_passthrough(self):
        out = physics.clamp_rotation(physics.IDENTITY_QUAT, 0.35)
        assert np.allclose(out, physics.IDENTITY_QUAT)

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            physics.clamp_rotation(np.zeros(4), 0.35)

    def test_small_angle_preserved(self):
        phi_max = 0.35
        phi = 0.01 * phi_max
        dr = np.array([np.cos(phi / 2), np.sin(phi / 2), 0.0, 0.0])
        out = physics.clamp_rotation(dr, phi_max)
        assert physics.rotation_angle(out) == pytest.approx(phi, rel=1e-4)

    def test_idempotent_small_angles(self):
        phi_max = 0.35
        rng = np.random.default_rng(1)
        for _ in range(20):
            phi = rng.uniform(0, 1e-3 * phi_max)
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            dr = np.concatenate([[np.cos(phi / 2)], np.sin(phi / 2) * axis])
            once = physics.clamp_rotation(dr, phi_max)
            twice = physics.clamp_rotation(once, phi_max)
            assert np.allclose(once, twice, atol=1e-6)

    def test_angle_strictly_below_max(self):
        rng = np.random.default_rng(2)
        phi_max = 0.35
        for _ in range(1000):
            dr = rng.normal(size=4)
            while np.linalg.norm(dr[1:]) < 1e-6:
                dr = rng.normal(size=4)
            out = physics.clamp_rotation(dr, phi_max)
            assert physics.rotation_angle(out) < phi_max
            assert abs(np.linalg.norm(out) - 1.0) < 1e-12

    def test_axis_preserved(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            dr = rng.normal(size=4)
            if np.linalg.norm(dr[1:]) < 1e-6:
                continue
            out = physics.clamp_rotation(dr, 0.35)
            axis_in = dr[1:] / np.linalg.norm(dr[1:])
            axis_out = out[1:] / np.linalg.norm(out[1:])
            assert np.linalg.norm(np.cross(axis_in, axis_out)) < 1e-10

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(4)
        drs = rng.normal(size=(50, 4))
        out = physics.clamp_rotation_batch(ad.constant(drs), 0.35).data
        for i in range(50):
            want = physics.clamp_rotation(drs[i], 0.35)
            assert np.allclose(out[i], want, atol=1e-10)

    def test_batch_zero_rows_are_identity(self):
        drs = np.zeros((3, 4))
        out = physics.clamp_rotation_batch(ad.constant(drs), 0.35).data
        assert np.allclose(out, np.tile(physics.IDENTITY_QUAT, (3, 1)))

    def test_batch_zero_rows_pass_no_gradient(self):
        dr = ad.leaf(np.zeros((2, 4)))
        out = physics.clamp_rotation_batch(dr, 0.35)
        g = ad.grad(ad.tsum(out), [dr])[dr]
        assert np.all(g.data == 0.0)


class TestApplyRotation:
    def test_identity_increment(self):
        rng = np.random.default_rng(5)
        r = random_unit_quat(rng)
        assert np.allclose(physics.apply_rotation(r, physics.IDENTITY_QUAT), r)

    def test_identity_base(self):
        rng = np.random.default_rng(6)
        dr = random_unit_quat(rng)
        assert np.allclose(physics.apply_rotation(physics.IDENTITY_QUAT, dr), dr)

    def test_matches_rotation_matrix_product(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            r, dr = random_unit_quat(rng), random_unit_quat(rng)
            out = physics.apply_rotation(r, dr)
            want = gauss.quat_to_rotmat(r) @ gauss.quat_to_rotmat(dr)
            assert np.allclose(gauss.quat_to_rotmat(out), want, atol=1e-10)

    def test_output_unit(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            out = physics.apply_rotation(random_unit_quat(rng), random_unit_quat(rng))
            assert abs(np.linalg.norm(out) - 1.0) < 1e-6

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            physics.apply_rotation(np.array([0.5, 0, 0, 0]), physics.IDENTITY_QUAT)
