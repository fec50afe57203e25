import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridadapt.policy import (
    MonotoneUnitParams,
    PolicyParams,
    control,
    droop_init,
    jacobians,
    policy_control,
    setpoint,
)


def random_params(rng, M=3, K=4, N=6, scale=1.0):
    buses = tuple(sorted(rng.choice(np.arange(1, N + 1), M, replace=False).tolist()))
    return PolicyParams(scale * rng.normal(size=M * (4 * K + 1)), buses, K)


def kink_distance(v, params):
    """Distance of each unit's local z from its nearest breakpoint."""
    a, c, al, cl, th2 = params._blocks()
    z = v[np.asarray(params.buses) - 1] - setpoint(th2, params.v_nom)
    return min(np.min(np.abs(z[:, None] - c**2)), np.min(np.abs(-z[:, None] - cl**2)))


class TestSetpoint:
    def test_zero(self):
        assert setpoint(0.0, 1.0) == 1.0

    def test_saturation(self):
        assert setpoint(50.0, 1.0) == pytest.approx(1.05)
        assert setpoint(-50.0, 1.0) == pytest.approx(0.95)

    def test_value(self):
        assert setpoint(1.0, 1.0) == pytest.approx(1 + 0.05 * np.tanh(1.0), abs=1e-15)

    @given(st.floats(-1e6, 1e6), st.floats(0.5, 1.5))
    def test_bound(self, th, vn):
        b = setpoint(th, vn)
        assert 0.95 * vn - 1e-12 <= b <= 1.05 * vn + 1e-12


class TestControl:
    def unit(self, K=2):
        return MonotoneUnitParams(np.ones(K), np.sqrt([0.01, 0.02]), np.ones(K), np.sqrt([0.01, 0.03]), 0.0)

    def test_zero_at_setpoint(self):
        assert control(1.0, self.unit()) == 0.0

    def test_upper_branch(self):
        v = 1.1
        assert control(v, self.unit()) == pytest.approx(-((v - 1 - 0.01) + (v - 1 - 0.02)))

    def test_lower_branch(self):
        v = 0.9
        assert control(v, self.unit()) == pytest.approx((1 - v - 0.01) + (1 - v - 0.03))

    def test_dead_zone(self):
        lo, hi = self.unit().dead_zone()
        assert (lo, hi) == pytest.approx((0.99, 1.01))
        for v in np.linspace(lo, hi, 7)[1:-1]:
            assert control(v, self.unit()) == 0.0

    def test_vector_matches_scalar(self):
        rng = np.random.default_rng(0)
        p = random_params(rng)
        v = 1 + 0.1 * rng.normal(size=6)
        u = policy_control(v, p)
        for i, b in enumerate(p.buses):
            assert u[i] == pytest.approx(control(v[b - 1], p.unit(i)), abs=1e-15)

    def test_monotone_random_draws(self):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            unit = MonotoneUnitParams(*(rng.normal(size=4) for _ in range(4)), float(rng.normal()))
            v1, v2 = np.sort(1 + 0.2 * rng.normal(size=2))
            assert control(v1, unit) >= control(v2, unit)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            MonotoneUnitParams(np.ones(2), np.ones(3), np.ones(2), np.ones(2))
        with pytest.raises(ValueError):
            PolicyParams(np.zeros(5), (1, 2), 2)


class TestJacobians:
    def test_structure(self):
        rng = np.random.default_rng(2)
        p = random_params(rng)
        v = 1 + 0.1 * rng.normal(size=6)
        du_dv, du_dth = jacobians(v, p)
        assert du_dv.shape == (3, 6) and du_dth.shape == (3, p.P_total)
        assert np.all(du_dv <= 0)
        for i in range(3):
            nz = np.flatnonzero(du_dv[i])
            assert set(nz) <= {p.buses[i] - 1}
            outside = np.ones(p.P_total, bool)
            outside[i * p.unit_size:(i + 1) * p.unit_size] = False
            assert not np.any(du_dth[i, outside])

    def test_dead_zone_zero(self):
        K = 3
        unit = np.concatenate([np.ones(K), np.sqrt([0.01, 0.02, 0.03])] * 2 + [[0.0]])
        p = PolicyParams(np.concatenate([unit, unit]), (1, 2), K)
        du_dv, du_dth = jacobians(np.array([1.0, 1.005, 0.97]), p)
        assert not np.any(du_dv)
        assert not np.any(du_dth[:, :K]) and not np.any(du_dth[:, 2 * K:3 * K])

    def test_droop_has_no_dead_zone(self):
        # droop starts its first segment at the setpoint: right derivative is the first slope
        p = droop_init((1, 2), np.array([0.1, 0.2]), K=8)
        du_dv, _ = jacobians(np.ones(3), p)
        np.testing.assert_allclose(np.diag(du_dv[:, :2]), [-0.5 / 0.1 / 8, -0.5 / 0.2 / 8])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, scale=0.5)
        v = 1 + 0.15 * rng.normal(size=6)
        if kink_distance(v, p) < 1e-4:
            return
        du_dv, du_dth = jacobians(v, p)
        h = 1e-6
        fd_v = np.column_stack([(policy_control(v + h * e, p) - policy_control(v - h * e, p)) / (2 * h) for e in np.eye(6)])
        fd_th = np.zeros_like(du_dth)
        for k in range(p.P_total):
            pp, pm = p.copy(), p.copy()
            pp.theta[k] += h
            pm.theta[k] -= h
            fd_th[:, k] = (policy_control(v, pp) - policy_control(v, pm)) / (2 * h)
        scale = max(1.0, np.abs(du_dth).max(), np.abs(du_dv).max())
        assert np.max(np.abs(fd_v - du_dv)) <= 1e-5 * scale
        assert np.max(np.abs(fd_th - du_dth)) <= 1e-5 * scale


class TestInitAndIO:
    def test_droop_gain(self):
        xii = np.array([0.2, 0.5])
        p = droop_init((2, 5), xii, K=8)
        for i, u in enumerate(p.units):
            w_up, w_low = u.slopes
            assert w_up.sum() == pytest.approx(0.5 / xii[i])
            assert w_low.sum() == pytest.approx(0.5 / xii[i])
            d_up, _ = u.breakpoints
            np.testing.assert_allclose(d_up, np.linspace(0, 0.03, 8), atol=1e-15)
            assert u.theta2 == 0.0

    def test_droop_validation(self):
        with pytest.raises(ValueError):
            droop_init((1, 2), np.array([0.1, -0.1]))

    def test_save_load(self, tmp_path):
        p = random_params(np.random.default_rng(3))
        p.save(tmp_path / "p.json")
        q = PolicyParams.load(tmp_path / "p.json")
        assert q.buses == p.buses and q.K == p.K
        np.testing.assert_array_equal(q.theta, p.theta)

    def test_unit_roundtrip(self):
        rng = np.random.default_rng(4)
        vec = rng.normal(size=4 * 3 + 1)
        np.testing.assert_array_equal(MonotoneUnitParams.from_vector(vec, 3).to_vector(), vec)
