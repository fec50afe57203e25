import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridadapt.adaptation import (
    AuxState,
    CostConfig,
    EstimatorMode,
    EstimatorState,
    MGapsState,
    RLSState,
    gradient,
    mgaps_step,
    ols_estimate,
    rls_update,
    stage_cost,
    update_aux,
)
from gridadapt.grid_model import build_sensitivity, random_tree, restrict_columns
from gridadapt.harness import ScenarioConfig, run_trajectory
from gridadapt.policy import droop_init, jacobians, policy_control
from oracles import rollout_q


class TestCost:
    def test_nominal_zero(self):
        assert stage_cost(np.ones(3), np.zeros(2), CostConfig.default(3, 2)) == 0.0

    def test_hand_example(self):
        cfg = CostConfig(np.eye(2), np.eye(1))
        assert stage_cost([1.1, 1.0], [0.2], cfg) == pytest.approx(0.05, abs=1e-15)

    @given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.floats(-1, 1))
    def test_nonnegative(self, dv, q):
        assert stage_cost(1 + np.array(dv), [q], CostConfig.default(3, 1)) >= 0

    def test_dims(self):
        with pytest.raises(ValueError):
            stage_cost(np.ones(2), np.zeros(2), CostConfig.default(3, 2))

    def test_validation(self):
        with pytest.raises(ValueError):
            CostConfig(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(1))
        with pytest.raises(ValueError):
            CostConfig(np.eye(2), -np.eye(1))


class TestGradient:
    def test_zero_aux(self):
        g = gradient(1.1 * np.ones(3), np.ones(2), np.ones((3, 2)), AuxState.zeros(2, 5), CostConfig.default(3, 2))
        np.testing.assert_array_equal(g, np.zeros(5))

    def test_nominal(self):
        rng = np.random.default_rng(0)
        g = gradient(np.ones(3), np.zeros(2), rng.normal(size=(3, 2)), rng.normal(size=(2, 5)), CostConfig.default(3, 2))
        np.testing.assert_array_equal(g, np.zeros(5))

    def test_dims(self):
        with pytest.raises(ValueError):
            gradient(np.ones(3), np.zeros(2), np.ones((3, 3)), np.zeros((2, 4)), CostConfig.default(3, 2))


class TestAux:
    def test_zero(self):
        y = update_aux(np.zeros((2, 4)), np.ones((2, 3)), np.zeros((2, 4)), np.ones((3, 2)))
        np.testing.assert_array_equal(y, 0)

    def test_pure_accumulation(self):
        rng = np.random.default_rng(1)
        y, d = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        np.testing.assert_array_equal(update_aux(y, np.zeros((2, 3)), d, rng.normal(size=(3, 2))), y + d)

    def test_two_step_unroll(self):
        # 2-bus chain, one unit; theta_0 drives step 0 and theta_1 drives step 1
        net = random_tree(3, np.random.default_rng(2))
        X = build_sensitivity(net).X
        XP = restrict_columns(X, [2])
        p = droop_init((2,), np.diag(XP[[1]]), K=2)
        p.theta = p.theta + 0.05
        v_base = np.array([1.03, 1.08])

        def q2(th0, th1):
            a, b = p.copy(), p.copy()
            a.theta, b.theta = th0, th1
            q1 = policy_control(v_base, a)
            return q1 + policy_control(v_base + XP @ q1, b)

        th = p.theta
        # recursion with the jacobians of each step gives d q2 / d theta when theta0 = theta1
        du_dv0, du_dth0 = jacobians(v_base, p)
        y1 = update_aux(np.zeros((1, p.P_total)), du_dv0, du_dth0, XP)
        v1 = v_base + XP @ policy_control(v_base, p)
        du_dv1, du_dth1 = jacobians(v1, p)
        y2 = update_aux(y1, du_dv1, du_dth1, XP)
        h = 1e-6
        fd = np.zeros_like(y2)
        for k in range(p.P_total):
            e = h * np.eye(p.P_total)[k]
            fd[:, k] = (q2(th + e, th + e) - q2(th - e, th - e)) / (2 * h)
        np.testing.assert_allclose(y2, fd, atol=1e-7)
        # the split into the two separate parameter copies
        fd1 = np.array([(q2(th, th + h * e) - q2(th, th - h * e)) / (2 * h) for e in np.eye(p.P_total)]).T
        np.testing.assert_allclose(du_dth1, fd1, atol=1e-7)


def small_instance(rng, N=3, M=2, K=3):
    net = random_tree(N + 1, rng)
    X = build_sensitivity(net).X
    buses = tuple(sorted(rng.choice(np.arange(1, N + 1), M, replace=False).tolist()))
    p = droop_init(buses, np.diag(X)[np.asarray(buses) - 1], K=K)
    p.theta = p.theta + 0.1 * rng.normal(size=p.P_total)
    v_base = 1 + 0.08 * rng.uniform(-1, 1, N)
    return X, p, v_base


def check_gradient_fd(seed, steps=5):
    """G from the accumulated sensitivity against FD of the frozen-theta rollout cost."""
    rng = np.random.default_rng(seed)
    X, p, v_base = small_instance(rng)
    XP = X[:, np.asarray(p.buses) - 1]
    cost = CostConfig.default(X.shape[0], p.M)
    state = MGapsState.start(p.copy())
    v = v_base.copy()
    for _ in range(steps):
        state, _, v = mgaps_step(state, v, lambda q: v_base + XP @ q, XP, cost, eta=0.0)
    G = gradient(v, state.q, XP, state.aux, cost)

    def J(th):
        vv, qq = rollout_q(th, p, X, v_base, np.zeros(p.M), steps)
        return stage_cost(vv, qq, cost)

    h = 1e-6
    fd = np.array([(J(p.theta + h * e) - J(p.theta - h * e)) / (2 * h) for e in np.eye(p.P_total)])
    return G, fd


class TestMGaps:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_gradient_matches_fd(self, seed):
        G, fd = check_gradient_fd(seed)
        assert np.max(np.abs(G - fd)) <= 1e-4 * max(1.0, np.max(np.abs(fd)))

    def test_eta_zero_constant(self):
        X, p, v_base = small_instance(np.random.default_rng(5))
        XP = X[:, np.asarray(p.buses) - 1]
        th0 = p.theta.copy()
        state, v = MGapsState.start(p), v_base
        for _ in range(20):
            state, _, v = mgaps_step(state, v, lambda q: v_base + XP @ q, XP, CostConfig.default(3, 2), eta=0.0)
        assert state.params.theta.tobytes() == th0.tobytes()

    def test_suspension_freezes_theta_and_aux(self):
        X, p, v_base = small_instance(np.random.default_rng(6))
        XP = X[:, np.asarray(p.buses) - 1]
        cost = CostConfig.default(3, 2)
        state, v = MGapsState.start(p), v_base
        for _ in range(3):
            state, _, v = mgaps_step(state, v, lambda q: v_base + XP @ q, XP, cost)
        state.suspended = True
        th, y, q = state.params.theta.copy(), state.aux.y_q.copy(), state.q.copy()
        state, u, v = mgaps_step(state, v, lambda q: v_base + XP @ q, XP, cost)
        assert state.params.theta.tobytes() == th.tobytes()
        assert state.aux.y_q.tobytes() == y.tobytes()
        np.testing.assert_array_equal(state.q, q + u)  # control still applied

    def test_adaptive_not_worse_than_fixed_without_event(self):
        for seed in range(3):
            base = dict(feeder="ieee13", topology_event_step=None, trajectory_length=1000, load_step_every=0)
            ad, _ = run_trajectory(ScenarioConfig(**base), seed, keep_trace=False)
            fx, _ = run_trajectory(ScenarioConfig(estimator_mode="Fixed", **base), seed, keep_trace=False)
            assert ad.cumulative_cost <= fx.cumulative_cost


class TestOLS:
    def test_exact_recovery(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(6, 3))
        U = rng.normal(size=(3, 10))
        np.testing.assert_allclose(ols_estimate(U, X @ U), X, atol=1e-9)

    def test_single_sample_ridge(self):
        u, v = np.array([[1.0], [2.0]]), np.array([[3.0], [1.0], [0.0]])
        Xh = ols_estimate(u, v, ridge=1e-3)
        assert np.all(np.isfinite(Xh)) and np.linalg.matrix_rank(Xh) == 1

    def test_zero_inputs(self):
        np.testing.assert_array_equal(ols_estimate(np.zeros((2, 5)), np.ones((3, 5)), ridge=1e-6), 0)

    def test_empty(self):
        with pytest.raises(ValueError):
            ols_estimate(np.zeros((2, 0)), np.zeros((3, 0)))


class TestRLS:
    def test_zero_input_scales_covariance(self):
        s = RLSState.start(np.ones((3, 2)), alpha=10.0, lam_f=0.5)
        rls_update(s, np.zeros(2), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(s.omega, np.ones((3, 2)))
        np.testing.assert_allclose(s.P, 20 * np.eye(2))

    def test_converges_lambda_one(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(5, 3))
        s = RLSState.start(np.zeros((5, 3)), alpha=1e8, lam_f=1.0)
        for _ in range(12):
            u = rng.normal(size=3)
            rls_update(s, u, X @ u)
        np.testing.assert_allclose(s.omega, X, atol=1e-6)

    def test_matches_ols(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(4, 3))
        U = rng.normal(size=(3, 8))
        V = X @ U + 1e-3 * rng.normal(size=(4, 8))
        s = RLSState.start(np.zeros((4, 3)), alpha=1e8, lam_f=1.0)
        for k in range(8):
            rls_update(s, U[:, k], V[:, k])
        np.testing.assert_allclose(s.omega, ols_estimate(U, V), atol=1e-6)

    def test_one_direction(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(4, 2))
        X0 = np.zeros((4, 2))
        s = RLSState.start(X0, alpha=1e4, lam_f=0.98)
        d = np.array([1.0, 0.0])
        for _ in range(100):
            rls_update(s, d, X @ d)
        np.testing.assert_allclose(s.omega @ d, X @ d, atol=1e-6)
        np.testing.assert_array_equal(s.omega[:, 1], X0[:, 1])

    def test_covariance_symmetric_pd(self):
        rng = np.random.default_rng(11)
        s = RLSState.start(np.zeros((3, 3)))
        for _ in range(30):
            rls_update(s, rng.normal(size=3), rng.normal(size=3))
        np.testing.assert_array_equal(s.P, s.P.T)
        assert np.linalg.eigvalsh(s.P).min() > 0

    def test_validation(self):
        with pytest.raises(ValueError):
            RLSState.start(np.zeros((2, 2)), lam_f=1.5)


class TestEstimatorState:
    def test_inactive_until_event(self):
        est = EstimatorState(EstimatorMode.OLS, np.ones((3, 2)))
        est.observe(np.ones(2), np.zeros(3))
        np.testing.assert_array_equal(est.X_hat, 1)

    def test_ols_after_event(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(3, 2))
        est = EstimatorState(EstimatorMode.OLS, np.zeros((3, 2)), ridge=0.0)
        est.on_topology_change()
        for _ in range(4):
            u = rng.normal(size=2)
            est.observe(u, X @ u)
        np.testing.assert_allclose(est.X_hat, X, atol=1e-9)

    def test_fixed_never_moves(self):
        est = EstimatorState(EstimatorMode.FIXED, np.ones((3, 2)))
        est.on_topology_change()
        est.observe(np.ones(2), np.zeros(3))
        np.testing.assert_array_equal(est.X_hat, 1)
