"""Decentralized monotone volt-var controllers with analytic derivatives.

Each controlled bus runs a piecewise-linear law of its own voltage:

    z = v - b,   b = v_nom * (1 + 0.05 tanh(theta2))
    u = -sum_k w_k relu(z - d_k) + sum_k w'_k relu(-z - d'_k)

Slopes and breakpoints are squares of free parameters (w = a^2, d = c^2), so the
law is nonincreasing in v for every parameter value. Derivatives at kinks use
the right-derivative convention.

Per unit the parameter vector is laid out as ``[a (K), c (K), a' (K), c' (K), theta2]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SETPOINT_SPAN = 0.05


@dataclass(frozen=True)
class MonotoneUnitParams:
    a_up: np.ndarray
    c_up: np.ndarray
    a_low: np.ndarray
    c_low: np.ndarray
    theta2: float = 0.0

    def __post_init__(self):
        arrs = [np.asarray(x, dtype=float).ravel() for x in (self.a_up, self.c_up, self.a_low, self.c_low)]
        if len({a.size for a in arrs}) != 1:
            raise ValueError("all four branch parameter vectors must have length K")
        for name, a in zip(("a_up", "c_up", "a_low", "c_low"), arrs):
            object.__setattr__(self, name, a)
        object.__setattr__(self, "theta2", float(self.theta2))

    @property
    def K(self) -> int:
        return self.a_up.size

    @property
    def slopes(self) -> tuple[np.ndarray, np.ndarray]:
        return self.a_up**2, self.a_low**2

    @property
    def breakpoints(self) -> tuple[np.ndarray, np.ndarray]:
        return self.c_up**2, self.c_low**2

    def dead_zone(self, v_nom: float = 1.0) -> tuple[float, float]:
        """Interval of v on which the unit outputs zero (ignoring zero-slope segments)."""
        b = setpoint(self.theta2, v_nom)
        (w, wl), (d, dl) = self.slopes, self.breakpoints
        up = d[w > 0].min() if np.any(w > 0) else np.inf
        low = dl[wl > 0].min() if np.any(wl > 0) else np.inf
        return b - low, b + up

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.a_up, self.c_up, self.a_low, self.c_low, [self.theta2]])

    @classmethod
    def from_vector(cls, vec, K: int) -> "MonotoneUnitParams":
        vec = np.asarray(vec, dtype=float)
        if vec.size != 4 * K + 1:
            raise ValueError(f"expected {4 * K + 1} parameters, got {vec.size}")
        return cls(vec[:K], vec[K:2 * K], vec[2 * K:3 * K], vec[3 * K:4 * K], vec[4 * K])


def setpoint(theta2: float, v_nom: float = 1.0):
    return v_nom * (1.0 + SETPOINT_SPAN * np.tanh(theta2))


def control(v_i: float, unit: MonotoneUnitParams, v_nom: float = 1.0) -> float:
    z = v_i - setpoint(unit.theta2, v_nom)
    (w, wl), (d, dl) = unit.slopes, unit.breakpoints
    return float(-np.sum(w * np.maximum(z - d, 0.0)) + np.sum(wl * np.maximum(-z - dl, 0.0)))


@dataclass
class PolicyParams:
    """Stacked parameters of M independent units; ``theta`` is the flat M*(4K+1) vector."""

    theta: np.ndarray
    buses: tuple[int, ...]
    K: int = 8
    v_nom: float = 1.0

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float).ravel()
        self.buses = tuple(int(b) for b in self.buses)
        if self.theta.size != self.M * self.unit_size:
            raise ValueError(f"theta has {self.theta.size} entries, expected {self.M * self.unit_size}")

    @property
    def M(self) -> int:
        return len(self.buses)

    @property
    def unit_size(self) -> int:
        return 4 * self.K + 1

    @property
    def P_total(self) -> int:
        return self.theta.size

    def _blocks(self):
        T = self.theta.reshape(self.M, self.unit_size)
        K = self.K
        return T[:, :K], T[:, K:2 * K], T[:, 2 * K:3 * K], T[:, 3 * K:4 * K], T[:, 4 * K]

    def unit(self, i: int) -> MonotoneUnitParams:
        return MonotoneUnitParams.from_vector(self.theta.reshape(self.M, self.unit_size)[i], self.K)

    @property
    def units(self) -> list[MonotoneUnitParams]:
        return [self.unit(i) for i in range(self.M)]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta.copy(), self.buses, self.K, self.v_nom)

    def to_dict(self) -> dict:
        return {"K": self.K, "v_nom": self.v_nom, "buses": list(self.buses), "theta": self.theta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        return cls(np.asarray(d["theta"], dtype=float), tuple(d["buses"]), int(d["K"]), float(d["v_nom"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _local(v, params: PolicyParams) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v[np.asarray(params.buses) - 1]


def policy_control(v, params: PolicyParams) -> np.ndarray:
    """Vectorized control for all units given the full N-vector of voltages."""
    a, c, al, cl, th2 = params._blocks()
    z = (_local(v, params) - setpoint(th2, params.v_nom))[:, None]
    return -np.sum(a**2 * np.maximum(z - c**2, 0.0), axis=1) + np.sum(al**2 * np.maximum(-z - cl**2, 0.0), axis=1)


def jacobians(v, params: PolicyParams) -> tuple[np.ndarray, np.ndarray]:
    """Return (du/dv: M x N, du/dtheta: M x P_total)."""
    v = np.asarray(v, dtype=float)
    a, c, al, cl, th2 = params._blocks()
    M, K = params.M, params.K
    b = setpoint(th2, params.v_nom)
    z = (_local(v, params) - b)[:, None]
    on_up = (z >= c**2).astype(float)    # right derivative of relu(z - d)
    on_low = (z < -cl**2).astype(float)  # right derivative of relu(-z - d') is -1 here
    du_dz = -np.sum(a**2 * on_up, axis=1) - np.sum(al**2 * on_low, axis=1)

    du_dv = np.zeros((M, v.size))
    du_dv[np.arange(M), np.asarray(params.buses) - 1] = du_dz

    blocks = np.zeros((M, params.unit_size))
    blocks[:, :K] = -2.0 * a * np.maximum(z - c**2, 0.0)
    blocks[:, K:2 * K] = 2.0 * c * a**2 * on_up
    blocks[:, 2 * K:3 * K] = 2.0 * al * np.maximum(-z - cl**2, 0.0)
    blocks[:, 3 * K:4 * K] = -2.0 * cl * al**2 * on_low
    db = params.v_nom * SETPOINT_SPAN * (1.0 - np.tanh(th2) ** 2)
    blocks[:, 4 * K] = -du_dz * db

    du_dtheta = np.zeros((M, params.P_total))
    for i in range(M):
        du_dtheta[i, i * params.unit_size:(i + 1) * params.unit_size] = blocks[i]
    return du_dv, du_dtheta


def droop_init(buses, X_PP_diag, K: int = 8, v_nom: float = 1.0, gain: float = 0.5, spread: float = 0.03) -> PolicyParams:
    """Conservative droop-like start: total slope gain/X_ii per branch, breakpoints over [0, spread]."""
    X_PP_diag = np.asarray(X_PP_diag, dtype=float)
    if X_PP_diag.shape != (len(buses),) or np.any(X_PP_diag <= 0):
        raise ValueError("need one positive self-sensitivity per controlled bus")
    d = np.linspace(0.0, spread, K)
    units = []
    for xii in X_PP_diag:
        a = np.full(K, np.sqrt(gain / xii / K))
        units.append(MonotoneUnitParams(a, np.sqrt(d), a.copy(), np.sqrt(d), 0.0).to_vector())
    return PolicyParams(np.concatenate(units), tuple(buses), K, v_nom)
