import numpy as np
import pytest

from hamsplat import autodiff as ad
from hamsplat import bed


CFG = bed.BedConfig(sigma_s=0.1, sigma_t=0.2, coupling_lambda=0.1, beta=1.0, gamma=0.05)


class TestConfig:
    def test_defaults_valid(self):
        bed.BedConfig()

    @pytest.mark.parametrize("kwargs", [
        dict(sigma_s=0.0), dict(sigma_t=-1.0), dict(beta=0.0),
        dict(gamma=1.0), dict(gamma=-0.1), dict(coupling_lambda=1.0),
        dict(coupling_lambda=-1.5),
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            bed.BedConfig(**kwargs)


class TestDeviations:
    def test_at_equilibrium(self):
        dd, dtau = bed.deviations([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 0.4, 0.4, CFG)
        assert dd.item() == pytest.approx(0.0, abs=1e-9)
        assert dtau.item() == pytest.approx(0.0, abs=1e-12)

    def test_one_sigma(self):
        cfg = bed.BedConfig(sigma_s=0.5, sigma_t=0.25)
        dd, dtau = bed.deviations([0.5, 0.0, 0.0], [0.0, 0.0, 0.0], 0.75, 0.5, cfg)
        assert dd.item() == pytest.approx(1.0, rel=1e-12)
        assert dtau.item() == pytest.approx(1.0, rel=1e-12)

    def test_three_four_five(self):
        cfg = bed.BedConfig(sigma_s=5.0, sigma_t=1.0)
        dd, _ = bed.deviations([3.0, 4.0, 0.0], [0.0, 0.0, 0.0], 0.0, 0.0, cfg)
        assert dd.item() == pytest.approx(1.0, rel=1e-12)

    def test_batched(self):
        mu = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
        mu_eq = np.zeros((2, 3))
        cfg = bed.BedConfig(sigma_s=1.0, sigma_t=1.0)
        dd, _ = bed.deviations(mu, mu_eq, 0.0, np.zeros(2), cfg)
        assert np.allclose(dd.data, [1.0, 2.0])


class TestEnergies:
    def test_zero(self):
        assert bed.spatial_temporal_energy(0.0, 0.0, CFG).item() == pytest.approx(0.0)

    def test_unit_no_coupling(self):
        cfg = bed.BedConfig(coupling_lambda=0.0)
        assert bed.spatial_temporal_energy(1.0, 1.0, cfg).item() == pytest.approx(1.0)

    def test_coupled_value(self):
        cfg = bed.BedConfig(coupling_lambda=0.5)
        got = bed.spatial_temporal_energy(1.0, 2.0, cfg).item()
        assert got == pytest.approx(0.5 * (1 + 4) + 0.5 * 2)

    def test_temporal(self):
        cfg = bed.BedConfig(sigma_t=0.2)
        assert bed.temporal_energy(0.5, 0.5, cfg).item() == pytest.approx(0.0)
        assert bed.temporal_energy(0.7, 0.5, cfg).item() == pytest.approx(0.5)
        assert bed.temporal_energy(0.9, 0.5, cfg).item() == pytest.approx(2.0)

    def test_positive_on_grid_with_bounded_coupling(self):
        for lam in (-0.9, -0.3, 0.0, 0.5, 0.95):
            cfg = bed.BedConfig(coupling_lambda=lam)
            dd, dtau = np.meshgrid(np.linspace(0, 5, 100), np.linspace(-5, 5, 100))
            e = bed.spatial_temporal_energy(ad.constant(dd), ad.constant(dtau), cfg)
            assert np.min(e.data) >= -1e-12


class TestMask:
    def test_zero_energy(self):
        assert bed.boltzmann_mask(0.0, CFG).item() == pytest.approx(1.0)

    def test_limit_is_gamma(self):
        cfg = bed.BedConfig(gamma=0.07)
        assert bed.boltzmann_mask(1e6, cfg).item() == pytest.approx(0.07, abs=1e-12)

    def test_ln2_value(self):
        cfg = bed.BedConfig(beta=1.0, gamma=0.1)
        assert bed.boltzmann_mask(np.log(2.0), cfg).item() == pytest.approx(0.55)

    def test_strictly_monotone(self):
        rng = np.random.default_rng(0)
        e = np.sort(rng.uniform(0, 20, size=200))
        m = bed.boltzmann_mask(ad.constant(e), CFG).data
        assert np.all(np.diff(m) < 0.0)

    def test_range(self):
        rng = np.random.default_rng(1)
        # beyond E ~ 34 the exp term falls below one ulp of gamma and the
        # strictly-greater bound saturates to equality in float64
        e = rng.uniform(0, 30, size=500)
        m = bed.boltzmann_mask(ad.constant(e), CFG).data
        assert np.all(m > CFG.gamma) and np.all(m <= 1.0)
        far = bed.boltzmann_mask(1e6, CFG).item()
        assert far == pytest.approx(CFG.gamma, abs=1e-12)


class TestBlend:
    def test_position_identities(self):
        mu = np.array([1.0, 2.0, 3.0])
        mu_t = np.array([4.0, 5.0, 6.0])
        assert np.allclose(bed.blend_position(mu, mu_t, 1.0).data, mu)
        assert np.allclose(bed.blend_position(mu, mu_t, 0.0).data, mu_t)
        mid = bed.blend_position(np.zeros(3), np.full(3, 2.0), 0.5)
        assert np.allclose(mid.data, np.ones(3))

    def test_position_on_segment(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            mu, mu_t = rng.normal(size=3), rng.normal(size=3)
            m = rng.uniform()
            out = bed.blend_position(mu, mu_t, m).data
            lo = np.minimum(mu, mu_t) - 1e-12
            hi = np.maximum(mu, mu_t) + 1e-12
            assert np.all(out >= lo) and np.all(out <= hi)

    def test_position_rejects_bad_mask(self):
        with pytest.raises(ValueError):
            bed.blend_position(np.zeros(3), np.ones(3), 1.5)

    def test_scale_identities(self):
        s = np.array([1.0, 2.0, 3.0])
        ds = np.array([4.0, 0.0, 0.0])
        assert np.allclose(bed.blend_scale(s, ds, 1.0).data, s)
        assert np.allclose(bed.blend_scale(s, ds, 0.0).data, s + ds)
        assert np.allclose(bed.blend_scale(s, ds, 0.75).data, s + np.array([1.0, 0, 0]))


class TestGradientFlow:
    def test_gradients_reach_equilibria_and_sigma(self):
        rng = np.random.default_rng(3)
        mu_v = rng.normal(size=3)
        mu_eq_v = mu_v + rng.normal(size=3) * 0.3
        t, t_eq_v, sig_v = 0.7, 0.4, 0.35

        def mask_value(mu_eq, t_eq, sigma_s):
            cfg = bed.BedConfig(sigma_s=sigma_s, sigma_t=0.2,
                                coupling_lambda=0.1, beta=1.0, gamma=0.05)
            dd, dtau = bed.deviations(ad.constant(mu_v), mu_eq, t, t_eq, cfg)
            return bed.boltzmann_mask(bed.spatial_temporal_energy(dd, dtau, cfg), cfg)

        mu_eq = ad.leaf(mu_eq_v)
        t_eq = ad.leaf(t_eq_v)
        sigma = ad.leaf(sig_v)
        out = mask_value(mu_eq, t_eq, sigma)
        grads = ad.grad(out, [mu_eq, t_eq, sigma])

        h = 1e-6
        for tensor, build in [
            (mu_eq, lambda d: mask_value(ad.constant(mu_eq_v + d), t_eq_v, sig_v)),
        ]:
            g = grads[tensor].data
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                fd = (build(e).item() - build(-e).item()) / (2 * h)
                assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)

        fd_t = (mask_value(mu_eq_v, t_eq_v + h, sig_v).item()
                - mask_value(mu_eq_v, t_eq_v - h, sig_v).item()) / (2 * h)
        assert grads[t_eq].item() == pytest.approx(fd_t, rel=1e-4)

        fd_s = (mask_value(mu_eq_v, t_eq_v, sig_v + h).item()
                - mask_value(mu_eq_v, t_eq_v, sig_v - h).item()) / (2 * h)
        assert grads[sigma].item() == pytest.approx(fd_s, rel=1e-4)
        assert abs(grads[sigma].item()) > 0
