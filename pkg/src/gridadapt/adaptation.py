"""Online policy adaptation (M-GAPS) and baseline sensitivity estimators.

The policy gradient uses the accumulated state sensitivity ``y = d q / d theta``:

    y'  = (I + du/dv X_hat) y + du/dtheta
    G   = [2 (v - v_nom)^T Qx X_hat + 2 q^T Qu] y
    theta <- theta - eta G

OLS (ridge) and RLS (shared covariance, forgetting) are the regression baselines
for re-estimating the N x M sensitivity after a topology change.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .policy import PolicyParams, jacobians, policy_control


@dataclass(frozen=True)
class CostConfig:
    Qx: np.ndarray
    Qu: np.ndarray
    v_nom: float = 1.0

    def __post_init__(self):
        for name in ("Qx", "Qu"):
            Q = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T):
                raise ValueError(f"{name} must be a symmetric square matrix")
            if np.linalg.eigvalsh(Q).min() <= 0:
                raise ValueError(f"{name} must be positive definite")
            object.__setattr__(self, name, Q)

    @classmethod
    def default(cls, N: int, M: int, qu: float = 0.1, v_nom: float = 1.0) -> "CostConfig":
        return cls(np.eye(N), qu * np.eye(M), v_nom)


def stage_cost(v, q_P, cfg: CostConfig) -> float:
    dv = np.asarray(v, dtype=float) - cfg.v_nom
    q_P = np.asarray(q_P, dtype=float)
    if dv.shape[0] != cfg.Qx.shape[0] or q_P.shape[0] != cfg.Qu.shape[0]:
        raise ValueError("cost dimensions do not match CostConfig")
    return float(dv @ cfg.Qx @ dv + q_P @ cfg.Qu @ q_P)


@dataclass
class AuxState:
    y_q: np.ndarray

    @classmethod
    def zeros(cls, M: int, P_total: int) -> "AuxState":
        return cls(np.zeros((M, P_total)))

    def reset(self) -> None:
        self.y_q[:] = 0.0


def gradient(v_next, q_next, X_hat_P, y_q, cfg: CostConfig) -> np.ndarray:
    y = y_q.y_q if isinstance(y_q, AuxState) else np.asarray(y_q, dtype=float)
    X_hat_P = np.asarray(X_hat_P, dtype=float)
    dv = np.asarray(v_next, dtype=float) - cfg.v_nom
    q_next = np.asarray(q_next, dtype=float)
    if X_hat_P.shape != (dv.size, q_next.size) or y.shape[0] != q_next.size:
        raise ValueError(f"dimension mismatch: X_hat {X_hat_P.shape}, v {dv.size}, q {q_next.size}, y {y.shape}")
    dh_dq = 2.0 * (dv @ cfg.Qx @ X_hat_P) + 2.0 * (q_next @ cfg.Qu)
    return dh_dq @ y


def update_aux(y_q, du_dv, du_dtheta, X_hat_P) -> np.ndarray:
    y = y_q.y_q if isinstance(y_q, AuxState) else np.asarray(y_q, dtype=float)
    J = np.eye(du_dv.shape[0]) + du_dv @ X_hat_P
    return J @ y + du_dtheta


@dataclass
class MGapsState:
    params: PolicyParams
    aux: AuxState
    q: np.ndarray
    suspended: bool = False

    @classmethod
    def start(cls, params: PolicyParams, q0=None) -> "MGapsState":
        q = np.zeros(params.M) if q0 is None else np.array(q0, dtype=float)
        return cls(params, AuxState.zeros(params.M, params.P_total), q)


def mgaps_step(
    state: MGapsState,
    v_t: np.ndarray,
    measure: Callable[[np.ndarray], np.ndarray],
    X_hat_P: np.ndarray,
    cost: CostConfig,
    eta: float = 0.1,
) -> tuple[MGapsState, np.ndarray, np.ndarray]:
    """One closed-loop step: act on v_t, apply q, measure v_{t+1}, adapt theta.

    ``measure`` maps the new reactive setpoint q_{t+1} to the observed v_{t+1}.
    Returns (state, u_t, v_{t+1}); ``state`` is mutated in place.
    """
    u = policy_control(v_t, state.params)
    q_next = state.q + u
    v_next = np.asarray(measure(q_next), dtype=float)
    if not state.suspended:
        du_dv, du_dth = jacobians(v_t, state.params)
        state.aux.y_q = update_aux(state.aux, du_dv, du_dth, X_hat_P)
        if eta != 0.0:
            G = gradient(v_next, q_next, X_hat_P, state.aux, cost)
            state.params.theta = state.params.theta - eta * G
    state.q = q_next
    return state, u, v_next


# --- regression baselines -------------------------------------------------

def ols_estimate(U, V_tilde, ridge: float = 0.0) -> np.ndarray:
    """Ridge least squares X_hat = V U^T (U U^T + ridge I)^-1; columns are samples."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    V_tilde = np.atleast_2d(np.asarray(V_tilde, dtype=float))
    if U.shape[1] != V_tilde.shape[1] or U.shape[1] == 0:
        raise ValueError("need a matching, non-empty set of (u, v) samples")
    G = U @ U.T + ridge * np.eye(U.shape[0])
    B = V_tilde @ U.T
    if ridge > 0:
        return np.linalg.solve(G, B.T).T
    return B @ np.linalg.pinv(G)


@dataclass
class RLSState:
    omega: np.ndarray  # N x M estimate
    P: np.ndarray      # shared M x M covariance
    lam_f: float = 0.98
    alpha: float = 1e4

    @classmethod
    def start(cls, X_init: np.ndarray, alpha: float = 1e4, lam_f: float = 0.98) -> "RLSState":
        if not 0 < lam_f <= 1 or alpha <= 0:
            raise ValueError("need 0 < lam_f <= 1 and alpha > 0")
        X_init = np.array(X_init, dtype=float)
        return cls(X_init, alpha * np.eye(X_init.shape[1]), lam_f, alpha)

    def restart(self) -> None:
        self.P = self.alpha * np.eye(self.P.shape[0])


def rls_update(state: RLSState, u_prev, v_delta) -> RLSState:
    """N scalar-output RLS filters sharing one covariance (same regressor u)."""
    u = np.asarray(u_prev, dtype=float)
    Pu = state.P @ u
    K = Pu / (state.lam_f + u @ Pu)
    err = np.asarray(v_delta, dtype=float) - state.omega @ u
    state.omega = state.omega + np.outer(err, K)
    P = (state.P - np.outer(K, Pu)) / state.lam_f
    state.P = 0.5 * (P + P.T)
    return state


class EstimatorMode(enum.Enum):
    TOPOLOGY_AWARE = "TopologyAware"
    OLS = "OLS"
    RLS = "RLS"
    FIXED = "Fixed"


@dataclass
class EstimatorState:
    """Current sensitivity estimate plus the per-mode regression state.

    Regression modes only start learning once a topology change has been
    detected; before that every mode uses the known pre-event sensitivity.
    """

    mode: EstimatorMode
    X_hat: np.ndarray
    ridge: float = 1e-9
    ols_window: int = 200
    rls_alpha: float = 1e4
    rls_lam_f: float = 0.98
    active: bool = False
    ols_U: list = field(default_factory=list)
    ols_V: list = field(default_factory=list)
    rls: RLSState | None = None

    def on_topology_change(self) -> None:
        if self.mode is EstimatorMode.OLS:
            self.active = True
            self.ols_U.clear()
            self.ols_V.clear()
        elif self.mode is EstimatorMode.RLS:
            self.active = True
            # warm start from the last known sensitivity, fresh covariance
            self.rls = RLSState.start(self.X_hat, self.rls_alpha, self.rls_lam_f)

    def observe(self, u_prev, v_delta) -> None:
        if not self.active:
            return
        if self.mode is EstimatorMode.OLS:
            self.ols_U.append(np.asarray(u_prev, dtype=float))
            self.ols_V.append(np.asarray(v_delta, dtype=float))
            if len(self.ols_U) > self.ols_window:
                del self.ols_U[0], self.ols_V[0]
            # wait for M samples so the regression is not trivially rank deficient
            if len(self.ols_U) >= self.X_hat.shape[1]:
                self.X_hat = ols_estimate(np.stack(self.ols_U, 1), np.stack(self.ols_V, 1), self.ridge)
        elif self.mode is EstimatorMode.RLS:
            rls_update(self.rls, u_prev, v_delta)
            self.X_hat = self.rls.omega.copy()
