"""Voltage solutions under LinDistFlow and the nonlinear DistFlow branch model.

The voltage variable ``v`` is the squared voltage magnitude (p.u.^2), which is
the native variable of the branch-flow recursion and the one in which
``v = R p + X q + v0`` holds to first order. ``VoltageProfile.magnitude``
gives the plain magnitudes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_model import RadialNetwork, SensitivityPair, validate_radial, RadialityViolation


class NonConvergence(RuntimeError):
    pass


class VoltageCollapse(RuntimeError):
    pass


@dataclass(frozen=True)
class InjectionState:
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if p.shape != q.shape or p.ndim != 1:
            raise ValueError(f"p and q must be equal-length vectors, got {p.shape} and {q.shape}")
        if not (np.isfinite(p).all() and np.isfinite(q).all()):
            raise ValueError("injections must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def N(self) -> int:
        return self.p.shape[0]


@dataclass(frozen=True)
class VoltageProfile:
    v: np.ndarray
    iterations: int = 0

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.v)


def solve_linear(sens: SensitivityPair, inj: InjectionState, v0: float = 1.0) -> VoltageProfile:
    if inj.N != sens.N:
        raise ValueError(f"injection dimension {inj.N} does not match network size {sens.N}")
    return VoltageProfile(sens.R @ inj.p + sens.X @ inj.q + v0)


def solve_nonlinear(
    net: RadialNetwork,
    inj: InjectionState,
    tol: float = 1e-8,
    max_iter: int = 100,
    v_init: np.ndarray | None = None,
) -> VoltageProfile:
    """Backward/forward sweep on the DistFlow equations with line losses.

    Backward: P_l = sum of downstream loads plus downstream losses r*l.
    Forward:  v_child = v_parent - 2(r P + x Q) + (r^2 + x^2) l,
    with l = (P^2 + Q^2) / v_parent.
    """
    if not validate_radial(net):
        raise RadialityViolation("nonlinear solve requires a radial network")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if inj.N != net.N:
        raise ValueError(f"injection dimension {inj.N} does not match network size {net.N}")
    S = net.subtree_matrix
    r, x = net.line_params
    z2 = r * r + x * x
    par = net.parent[1:]
    v0 = net.v0
    load_p = S @ (-inj.p)
    load_q = S @ (-inj.q)
    v = np.full(net.N, v0) if v_init is None else np.array(v_init, dtype=float)
    P, Q = load_p, load_q
    for it in range(1, max_iter + 1):
        v_par = np.where(par == 0, v0, v[np.maximum(par - 1, 0)])
        ell = (P * P + Q * Q) / v_par
        P = load_p + S @ (r * ell)
        Q = load_q + S @ (x * ell)
        v_new = v0 - S.T @ (2.0 * (r * P + x * Q) - z2 * ell)
        if not np.all(v_new > 0):
            raise VoltageCollapse(f"non-positive squared voltage at iteration {it}")
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta < tol:
            return VoltageProfile(v, it)
    raise NonConvergence(f"sweep did not converge in {max_iter} iterations (last update {delta:.3e})")


def branch_flow_residual(net: RadialNetwork, inj: InjectionState, v: np.ndarray) -> float:
    """Max change in squared voltage from re-evaluating the recursions at ``v``."""
    S = net.subtree_matrix
    r, x = net.line_params
    par = net.parent[1:]
    v_par = np.where(par == 0, net.v0, v[np.maximum(par - 1, 0)])
    load_p, load_q = S @ (-inj.p), S @ (-inj.q)
    P, Q = load_p, load_q
    for _ in range(50):
        ell = (P * P + Q * Q) / v_par
        P_new = load_p + S @ (r * ell)
        Q_new = load_q + S @ (x * ell)
        if max(np.abs(P_new - P).max(), np.abs(Q_new - Q).max()) < 1e-15:
            P, Q = P_new, Q_new
            break
        P, Q = P_new, Q_new
    ell = (P * P + Q * Q) / v_par
    v_new = net.v0 - S.T @ (2.0 * (r * P + x * Q) - (r * r + x * x) * ell)
    return float(np.max(np.abs(v_new - v)))
