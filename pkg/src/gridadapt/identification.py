"""Localize changed lines after a topology event and recover their reactances.

Under LinDistFlow the post-event residual ``X0_inv (v_pred - v)`` equals
``E diag(gamma) E^T v`` where ``E`` stacks incidence vectors of the changed
lines and ``gamma_l = +1/(2 x_l)`` for added and ``-1/(2 x_l)`` for deleted
lines. The pipeline is: persistent-activity node screening, a sign-constrained
LASSO over all node pairs, thresholding, a radiality check and finally an
unpenalized least-squares refit on the selected lines.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .grid_model import (
    Line,
    RadialNetwork,
    RadialityViolation,
    TopologyDelta,
    apply_delta,
)


class NonConvergence(RuntimeError):
    pass


class RejectReason(enum.Enum):
    TOO_FEW_NODES = "TooFewNodes"
    NON_RADIAL = "NonRadial"
    SIGN_VIOLATION = "SignViolation"
    EMPTY_SUPPORT = "EmptySupport"
    RANK_DEFICIENT = "RankDeficient"
    INCONSISTENT_DELETION = "InconsistentDeletion"
    SOLVER_FAILURE = "SolverFailure"


class SignViolation(ValueError):
    pass


class RankDeficient(ValueError):
    pass


@dataclass
class ResidualWindow:
    """Residual and voltage-difference columns collected after an event."""

    N: int
    d: int
    start_time: int = 0
    _r: list = field(default_factory=list, repr=False)
    _v: list = field(default_factory=list, repr=False)

    @classmethod
    def from_arrays(cls, R_res: np.ndarray, V: np.ndarray, start_time: int = 0) -> "ResidualWindow":
        R_res, V = np.atleast_2d(R_res), np.atleast_2d(V)
        if R_res.shape != V.shape:
            raise ValueError("residual and voltage stacks must have the same shape")
        w = cls(R_res.shape[0], R_res.shape[1], start_time)
        for k in range(R_res.shape[1]):
            w.append(R_res[:, k], V[:, k])
        return w

    def append(self, r: np.ndarray, v_delta: np.ndarray) -> None:
        if self.full:
            raise ValueError("window already holds d columns")
        self._r.append(np.asarray(r, dtype=float))
        self._v.append(np.asarray(v_delta, dtype=float))

    @property
    def full(self) -> bool:
        return len(self._r) >= self.d

    def __len__(self) -> int:
        return len(self._r)

    @property
    def R_res(self) -> np.ndarray:
        return np.column_stack(self._r) if self._r else np.zeros((self.N, 0))

    @property
    def V(self) -> np.ndarray:
        return np.column_stack(self._v) if self._v else np.zeros((self.N, 0))


@dataclass(frozen=True)
class CandidateSet:
    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    sign: np.ndarray
    E_sub: np.ndarray


@dataclass(frozen=True)
class IdentifyConfig:
    tau: float = 1e-2
    beta: float = 0.8
    eps_gamma: float = 1.0
    lambda_frac: float = 0.01
    lambda_value: float | None = None
    # "fixed": one LASSO solve at lambda_frac; "path": screen lines along lambda_frac * path_factors
    lambda_mode: str = "path"
    path_factors: tuple[float, ...] = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    tol_update: float = 1e-9
    tol_kkt: float = 1e-8
    max_sweeps: int = 50
    rank_rtol: float = 1e-9
    # a deleted line's coefficient is known (-1/2x); refits straying further than this are rejected
    deletion_rel_tol: float = 0.5
    max_screened: int = 12
    parsimony_ratio: float = 0.8
    parsimony_floor: float = 1e-6  # a smaller model fitting this well is never grown
    # radial swap search: first swaps kept for extension, and fully validated finalists per size
    swap_beam: int = 8
    swap_finalists: int = 10

    def __post_init__(self):
        if self.lambda_mode not in ("fixed", "path"):
            raise ValueError(f"unknown lambda_mode {self.lambda_mode!r}")
        if not 0 < self.beta <= 1 or self.tau <= 0 or self.eps_gamma < 0:
            raise ValueError("invalid identification thresholds")


@dataclass
class IdentificationResult:
    accepted: bool
    delta: TopologyDelta | None = None
    gamma: dict = field(default_factory=dict)
    reject_reason: RejectReason | None = None
    nodes: tuple[int, ...] = ()
    support: tuple[tuple[int, int], ...] = ()
    candidates: CandidateSet | None = field(default=None, repr=False)
    gamma_lasso: np.ndarray | None = field(default=None, repr=False)
    lam: float = float("nan")
    fit_residual: float = float("nan")

    @property
    def reactances(self) -> dict:
        return {e: 1.0 / (2.0 * abs(g)) for e, g in self.gamma.items()}


def residual(X0_inv, v_pred_delta: np.ndarray, v_delta: np.ndarray) -> np.ndarray:
    v_pred_delta = np.asarray(v_pred_delta, dtype=float)
    v_delta = np.asarray(v_delta, dtype=float)
    if v_pred_delta.shape != v_delta.shape or X0_inv.shape[1] != v_delta.shape[0]:
        raise ValueError("dimension mismatch in residual")
    return np.asarray(X0_inv @ (v_pred_delta - v_delta)).ravel()


def active_nodes(window: ResidualWindow | np.ndarray, tau: float = 1e-2, beta: float = 0.8) -> tuple[int, ...]:
    """Buses (1-based labels) active in at least a beta fraction of columns."""
    R = window.R_res if isinstance(window, ResidualWindow) else np.atleast_2d(window)
    N, d = R.shape
    if d == 0:
        return ()
    A = np.abs(R)
    scale = A.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(scale > 0, A / np.where(scale > 0, scale, 1.0), 0.0)
    counts = (ratio > tau).sum(axis=1)
    keep = counts >= beta * d - 1e-12
    return tuple(int(i) + 1 for i in np.flatnonzero(keep))


def build_candidates(nodes, net0: RadialNetwork) -> CandidateSet:
    nodes = tuple(sorted(int(n) for n in nodes))
    edges = tuple(combinations(nodes, 2))
    existing = net0.line_keys()
    sign = np.array([-1.0 if e in existing else 1.0 for e in edges])
    E = np.zeros((net0.N, len(edges)))
    for k, (i, j) in enumerate(edges):
        E[i - 1, k] = 1.0
        E[j - 1, k] = -1.0
    return CandidateSet(nodes, edges, sign, E)


def _normal_equations(R_res: np.ndarray, V: np.ndarray, E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gram matrix and correlations of the features vec(E_l E_l^T V)."""
    D = E.T @ V                      # per-candidate voltage difference rows
    G = (E.T @ E) * (D @ D.T)
    c = np.einsum("kt,kt->k", E.T @ R_res, D)
    return G, c


def lasso_objective(R_res, V, E, gamma, lam) -> float:
    fit = R_res - E @ (gamma[:, None] * (E.T @ V))
    return 0.5 * float(np.sum(fit * fit)) + lam * float(np.sum(np.abs(gamma)))


def default_lambda(R_res, V, cand: CandidateSet, frac: float = 0.01) -> float:
    _, c = _normal_equations(R_res, V, cand.E_sub)
    return frac * float(np.max(np.abs(c))) if c.size else 0.0


def solve_sign_lasso(window, cand: CandidateSet, lam: float, cfg: IdentifyConfig | None = None,
                     gamma0: np.ndarray | None = None) -> np.ndarray:
    """Cyclic coordinate descent with sign projection and an active-set outer loop.

    ``gamma0`` warm-starts the solve (e.g. from the previous point of a lambda path);
    entries with the wrong sign are clipped to zero.
    """
    cfg = cfg or IdentifyConfig()
    if lam <= 0:
        raise ValueError("lambda must be positive")
    R_res = window.R_res if isinstance(window, ResidualWindow) else window[0]
    V = window.V if isinstance(window, ResidualWindow) else window[1]
    G, c = _normal_equations(R_res, V, cand.E_sub)
    n = c.size
    gamma = np.zeros(n)
    if n == 0:
        return gamma
    sign = cand.sign
    if gamma0 is not None:
        gamma = np.where(np.asarray(gamma0, dtype=float) * sign > 0, gamma0, 0.0).astype(float)
    diag = np.diag(G).copy()
    grad = G @ gamma - c             # gradient of the smooth part
    c_scale = max(float(np.max(np.abs(c))), 1e-300)
    kkt_tol = cfg.tol_kkt * c_scale

    def sweep(idx) -> float:
        biggest = 0.0
        for j in idx:
            gjj = diag[j]
            if gjj <= 0.0:
                continue
            old = gamma[j]
            rho = old * gjj - grad[j]
            if sign[j] > 0:
                new = max(0.0, (rho - lam) / gjj)
            else:
                new = min(0.0, (rho + lam) / gjj)
            step = new - old
            if step != 0.0:
                gamma[j] = new
                grad[:] += G[:, j] * step
                biggest = max(biggest, abs(step))
        return biggest

    def kkt_violation() -> np.ndarray:
        v = np.where(sign > 0, np.maximum(0.0, -grad - lam), np.maximum(0.0, grad - lam))
        nz = gamma != 0.0
        v[nz] = np.abs(grad[nz] + lam * sign[nz])
        v[diag <= 0.0] = 0.0
        return v

    sweeps = 0
    sweep(range(n))
    sweeps += 1
    while sweeps < cfg.max_sweeps:
        active = np.flatnonzero(gamma != 0.0)
        while sweeps < cfg.max_sweeps:
            upd = sweep(active)
            sweeps += 1
            scale = max(1.0, float(np.max(np.abs(gamma))))
            if upd < cfg.tol_update * scale:
                break
            if float(np.max(kkt_violation()[active], initial=0.0)) < kkt_tol:
                break
        viol = kkt_violation()
        if float(viol.max()) < kkt_tol:
            return gamma
        outside = np.flatnonzero((viol >= kkt_tol) & (gamma == 0.0))
        if outside.size == 0:
            # converged on active set by update size; accept if remaining coordinates satisfy KKT
            upd = sweep(range(n))
            sweeps += 1
            if upd < cfg.tol_update * max(1.0, float(np.max(np.abs(gamma)))):
                return gamma
            continue
        sweep(outside)
        sweeps += 1
    # CD stalls on near-singular windows; finish with an exact active-set solve
    h = _nonneg_qp(G * np.outer(sign, sign), sign * c - lam, sign * gamma)
    gamma = sign * h
    grad = G @ gamma - c
    if float(kkt_violation().max()) < kkt_tol:
        return gamma
    raise NonConvergence(f"sign-constrained LASSO did not converge in {cfg.max_sweeps} sweeps")


def _nonneg_qp(Q: np.ndarray, b: np.ndarray, h0: np.ndarray, max_iter: int = 500) -> np.ndarray:
    """Lawson-Hanson active set for min 1/2 h'Qh - b'h subject to h >= 0 (Q PSD)."""
    n = b.size
    # a whisper of ridge keeps every face strictly convex, which rules out cycling
    Q = Q + 1e-12 * max(float(np.diag(Q).max()), 1e-300) * np.eye(n)
    h = np.maximum(h0, 0.0)
    passive = h > 0
    tol = 1e-12 * max(1.0, float(np.abs(b).max()))
    for _ in range(max_iter):
        w = b - Q @ h
        if passive.any():
            # re-solve on the passive set, stepping back to the boundary when a sign breaks
            while True:
                idx = np.flatnonzero(passive)
                z = np.zeros(n)
                z[idx] = np.linalg.solve(Q[np.ix_(idx, idx)], b[idx])
                if np.all(z[idx] > 0):
                    h = z
                    break
                bad = idx[z[idx] <= 0]
                alpha = np.min(h[bad] / (h[bad] - z[bad]))
                h = h + alpha * (z - h)
                passive &= h > tol
                h[~passive] = 0.0
                if not passive.any():
                    break
            w = b - Q @ h
        cand = np.flatnonzero(~passive & (w > tol))
        if cand.size == 0:
            return h
        passive[cand[np.argmax(w[cand])]] = True
    return h


def support(gamma: np.ndarray, eps_gamma: float = 1.0) -> np.ndarray:
    return np.flatnonzero(np.abs(np.asarray(gamma)) > eps_gamma)


def _design(V: np.ndarray, E_S: np.ndarray) -> np.ndarray:
    D = E_S.T @ V
    return np.stack([np.outer(E_S[:, k], D[k]).ravel() for k in range(E_S.shape[1])], axis=1)


def refine_parameters(window, E_S: np.ndarray, sign_S: np.ndarray | None = None, rank_rtol: float = 1e-9) -> np.ndarray:
    """Unpenalized least squares for gamma on the selected lines.

    Returns the refitted gamma; reactances are ``1 / (2 |gamma|)``.
    """
    R_res = window.R_res if isinstance(window, ResidualWindow) else window[0]
    V = window.V if isinstance(window, ResidualWindow) else window[1]
    E_S = np.atleast_2d(E_S)
    if E_S.shape[1] == 0:
        raise ValueError("empty support")
    Phi = _design(V, E_S)
    s = np.linalg.svd(Phi, compute_uv=False)
    if s[0] == 0.0 or s[-1] <= rank_rtol * s[0]:
        raise RankDeficient(f"support design is rank deficient (cond ~ {s[0] / max(s[-1], 1e-300):.2e})")
    gamma, *_ = np.linalg.lstsq(Phi, R_res.ravel(), rcond=None)
    if sign_S is not None and np.any(gamma * np.asarray(sign_S) <= 0):
        raise SignViolation("refined coefficient contradicts its add/delete sign")
    return gamma


def identify(window: ResidualWindow, net0: RadialNetwork, cfg: IdentifyConfig | None = None) -> IdentificationResult:
    """Active nodes -> candidates -> sign-constrained LASSO -> support -> radial refit.

    In ``path`` mode the LASSO is solved along a decreasing lambda path and used as a
    screen: every balanced add/delete subset of the screened lines is refitted, and a
    larger reconfiguration is only preferred when it clearly lowers the refit residual.
    """
    cfg = cfg or IdentifyConfig()
    nodes = active_nodes(window, cfg.tau, cfg.beta)
    if len(nodes) < 2:
        return IdentificationResult(False, reject_reason=RejectReason.TOO_FEW_NODES, nodes=nodes)
    cand = build_candidates(nodes, net0)
    if cfg.lambda_value is not None:
        lams = [cfg.lambda_value]
    else:
        lam0 = default_lambda(window.R_res, window.V, cand, cfg.lambda_frac)
        factors = cfg.path_factors if cfg.lambda_mode == "path" else (1.0,)
        lams = [lam0 * f for f in factors]
    base = dict(nodes=nodes, candidates=cand)
    if not lams[0] > 0:
        return IdentificationResult(False, reject_reason=RejectReason.EMPTY_SUPPORT, lam=lams[0], **base)

    supports, first_lasso, warm = [], None, None
    for lam in lams:
        try:
            gamma = warm = solve_sign_lasso(window, cand, lam, cfg, warm)
        except NonConvergence:
            continue  # numerically degenerate point on the path
        if first_lasso is None:
            first_lasso = (lam, gamma)
        S = tuple(support(gamma, cfg.eps_gamma))
        if S not in supports:
            supports.append(S)
    if first_lasso is None:
        return IdentificationResult(False, reject_reason=RejectReason.SOLVER_FAILURE, **base)
    base.update(lam=first_lasso[0], gamma_lasso=first_lasso[1])

    if cfg.lambda_mode == "fixed" or cfg.lambda_value is not None:
        return _evaluate_support(window, net0, cand, supports[0], cfg, base)

    union = sorted(set().union(*supports))
    if len(union) <= cfg.max_screened:
        adds = [k for k in union if cand.sign[k] > 0]
        dels = [k for k in union if cand.sign[k] < 0]
        trials = [tuple(sorted(a + d)) for n in range(1, min(len(adds), len(dels)) + 1)
                  for d in combinations(dels, n) for a in combinations(adds, n)]
    else:
        trials = supports
    trials = list(trials) + [S for S in _swap_search(window, net0, cand, cfg) if S not in trials]
    first_reject, best_by_size = None, {}
    for S in trials:
        res = _evaluate_support(window, net0, cand, S, cfg, base)
        if not res.accepted:
            first_reject = first_reject or res
            continue
        n = len(res.delta.added)
        if n not in best_by_size or res.fit_residual < best_by_size[n].fit_residual:
            best_by_size[n] = res
    if not best_by_size:
        # report the rejection of the first (largest-lambda) LASSO support
        return _evaluate_support(window, net0, cand, supports[0], cfg, base) if supports[0] else (
            first_reject or IdentificationResult(False, reject_reason=RejectReason.EMPTY_SUPPORT, **base))
    chosen = None
    for n in sorted(best_by_size):
        if chosen is None or (chosen.fit_residual > cfg.parsimony_floor
                              and best_by_size[n].fit_residual < cfg.parsimony_ratio * chosen.fit_residual):
            chosen = best_by_size[n]
    return chosen


def _tree_path(net: RadialNetwork, i: int, j: int) -> list[tuple[int, int]]:
    parent = net.parent
    up_i, n = [i], i
    while n != 0:
        n = int(parent[n])
        up_i.append(n)
    on_i = {b: k for k, b in enumerate(up_i)}
    path, n = [], j
    while n not in on_i:
        p = int(parent[n])
        path.append((min(n, p), max(n, p)))
        n = p
    for a, b in zip(up_i[:on_i[n]], up_i[1:on_i[n] + 1]):
        path.append((min(a, b), max(a, b)))
    return path


def _score_supports(G, c, sign, supports) -> tuple[np.ndarray, np.ndarray]:
    """Batched least-squares fit gain c_S' G_SS^-1 c_S; infeasible signs or singular systems score -inf."""
    S = np.asarray(supports, dtype=int)
    Gs = G[S[:, :, None], S[:, None, :]]
    cs = c[S]
    gain = np.full(len(S), -np.inf)
    det_ok = np.abs(np.linalg.det(Gs)) > 1e-300
    if det_ok.any():
        g = np.linalg.solve(Gs[det_ok], cs[det_ok][..., None])[..., 0]
        feasible = np.all(g * sign[S[det_ok]] > 0, axis=1)
        gain[np.flatnonzero(det_ok)[feasible]] = np.einsum("ij,ij->i", g, cs[det_ok])[feasible]
    return S, gain


def _swap_search(window, net0, cand, cfg) -> list[tuple[int, ...]]:
    """Rank radial one- and two-line swaps among the candidates by refit quality.

    Adding a line closes exactly one cycle, so the only radial single swaps delete
    a line on the tree path between the new line's ends. Two-line swaps extend the
    best single swaps the same way on the reconfigured tree.
    """
    G, c = _normal_equations(window.R_res, window.V, cand.E_sub)
    index = {e: k for k, e in enumerate(cand.edges)}
    adds = [k for k in range(len(cand.edges)) if cand.sign[k] > 0]

    def swaps(net, used):
        out = []
        for a in adds:
            if a in used:
                continue
            for e in _tree_path(net, *cand.edges[a]):
                d = index.get(e)
                if d is not None and cand.sign[d] < 0 and d not in used:
                    out.append((a, d))
        return out

    def best(supports, n):
        if not supports:
            return []
        S, gain = _score_supports(G, c, cand.sign, supports)
        order = [k for k in np.argsort(-gain)[:n] if np.isfinite(gain[k])]
        return [tuple(int(v) for v in S[k]) for k in order]

    singles = best(swaps(net0, ()), max(cfg.swap_beam, cfg.swap_finalists))
    doubles = []
    for a, d in singles[:cfg.swap_beam]:
        a_edge = cand.edges[a]
        net1 = apply_delta(net0, TopologyDelta(added=(Line(*a_edge, 1.0, 1.0),), deleted=(cand.edges[d],)))
        doubles += [tuple(sorted((a, d, a2, d2))) for a2, d2 in swaps(net1, (a, d))]
    doubles = list(dict.fromkeys(doubles))
    return [tuple(sorted(S)) for S in singles[:cfg.swap_finalists] + best(doubles, cfg.swap_finalists)]


def _evaluate_support(window, net0, cand, S, cfg, base) -> IdentificationResult:
    S = np.asarray(S, dtype=int)
    if S.size == 0:
        return IdentificationResult(False, reject_reason=RejectReason.EMPTY_SUPPORT, **base)
    edges = tuple(cand.edges[k] for k in S)
    base = dict(base, support=edges)
    added = [e for k, e in zip(S, edges) if cand.sign[k] > 0]
    deleted = [e for k, e in zip(S, edges) if cand.sign[k] < 0]
    if len(added) != len(deleted):
        return IdentificationResult(False, reject_reason=RejectReason.NON_RADIAL, **base)
    probe = TopologyDelta(added=tuple(Line(i, j, 1.0, 1.0) for i, j in added), deleted=tuple(deleted))
    try:
        apply_delta(net0, probe)
    except (RadialityViolation, KeyError, ValueError):
        return IdentificationResult(False, reject_reason=RejectReason.NON_RADIAL, **base)
    E_S = cand.E_sub[:, S]
    try:
        g = refine_parameters(window, E_S, cand.sign[S], cfg.rank_rtol)
    except RankDeficient:
        return IdentificationResult(False, reject_reason=RejectReason.RANK_DEFICIENT, **base)
    except SignViolation:
        return IdentificationResult(False, reject_reason=RejectReason.SIGN_VIOLATION, **base)
    gdict = {e: float(v) for e, v in zip(edges, g)}
    known = {l.key: -1.0 / (2.0 * l.x) for l in net0.lines}
    if any(abs(gdict[e] - known[e]) > cfg.deletion_rel_tol * abs(known[e]) for e in deleted):
        return IdentificationResult(False, reject_reason=RejectReason.INCONSISTENT_DELETION, **base)
    R = window.R_res
    fit = float(np.linalg.norm(_design(window.V, E_S) @ g - R.ravel()) / max(np.linalg.norm(R), 1e-300))
    rx = _typical_rx_ratio(net0)
    new_lines = []
    for e in added:
        x = 1.0 / (2.0 * gdict[e])
        new_lines.append(Line(e[0], e[1], rx * x, x))
    delta = TopologyDelta(added=tuple(new_lines), deleted=tuple(deleted))
    return IdentificationResult(True, delta=delta, gamma=gdict, fit_residual=fit, **base)


def _typical_rx_ratio(net: RadialNetwork) -> float:
    # resistance is not identifiable from reactive-power data; borrow the feeder's typical ratio
    return float(np.median([l.r / l.x for l in net.lines]))


def dump_diagnostics(path: str | Path, window: ResidualWindow, result: IdentificationResult) -> None:
    """Write R_res, V and the LASSO coefficients as CSV blocks for postmortem."""
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["# block", "R_res"])
        for row in window.R_res:
            w.writerow([f"{v:.17g}" for v in row])
        w.writerow(["# block", "V"])
        for row in window.V:
            w.writerow([f"{v:.17g}" for v in row])
        w.writerow(["# block", "gamma", "from", "to", "sign", "gamma_lasso", "in_support"])
        if result.candidates is not None and result.gamma_lasso is not None:
            sup = set(result.support)
            for (i, j), s, g in zip(result.candidates.edges, result.candidates.sign, result.gamma_lasso):
                w.writerow(["", "", i, j, int(s), f"{g:.17g}", int((i, j) in sup)])
        w.writerow(["# accepted", int(result.accepted), result.reject_reason.value if result.reject_reason else ""])
