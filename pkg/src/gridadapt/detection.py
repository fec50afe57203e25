"""Change-event detection from one-step voltage prediction errors.

A step whose error norm exceeds the robust baseline (median + k * MAD of the
recent error history) is flagged. The next step decides the class: an error
that persists above the frozen baseline means the sensitivity itself changed
(topology), otherwise it was a one-off load step.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DetectionConfig:
    H: int = 5
    mad_multiplier: float = 3.5
    mad_floor: float = 1e-8
    mad_floor_rel: float = 0.0
    # flagging also requires err > min_jump_ratio * median; classification ignores it
    min_jump_ratio: float = 1.0

    def __post_init__(self):
        if self.H < 3:
            raise ValueError("buffer length H must be at least 3")
        if not 2.0 <= self.mad_multiplier <= 4.0:
            raise ValueError("mad_multiplier should lie in [2, 4]")
        if self.mad_floor < 0 or self.mad_floor_rel < 0:
            raise ValueError("MAD floors must be non-negative")
        if self.min_jump_ratio < 1.0:
            raise ValueError("min_jump_ratio must be at least 1")


class EventKind(enum.Enum):
    LOAD_CHANGE = "load_change"
    TOPOLOGY_CHANGE = "topology_change"


@dataclass(frozen=True)
class Outcome:
    kind: EventKind
    t: int


@dataclass
class DetectionState:
    buffer: deque = field(default_factory=deque)
    pending_flag: int | None = None
    pending_kappa: float = float("nan")
    last_outcome: Outcome | None = None

    def reset(self) -> None:
        self.buffer.clear()
        self.pending_flag = None
        self.pending_kappa = float("nan")


def prediction_error(v_obs_delta: np.ndarray, X_hat: np.ndarray, u_prev: np.ndarray) -> np.ndarray:
    v_obs_delta = np.asarray(v_obs_delta, dtype=float)
    X_hat = np.atleast_2d(X_hat)
    u_prev = np.asarray(u_prev, dtype=float)
    if X_hat.shape != (v_obs_delta.shape[0], u_prev.shape[0]):
        raise ValueError(f"X_hat shape {X_hat.shape} incompatible with ({v_obs_delta.shape[0]}, {u_prev.shape[0]})")
    return v_obs_delta - X_hat @ u_prev


def robust_baseline(buffer, cfg: DetectionConfig) -> float:
    b = np.asarray(list(buffer), dtype=float)
    if b.size == 0:
        raise ValueError("baseline needs a non-empty buffer")
    med = float(np.median(b))
    mad = float(np.median(np.abs(b - med)))
    floor = cfg.mad_floor + cfg.mad_floor_rel * abs(med)
    return med + cfg.mad_multiplier * max(mad, floor)


def step(state: DetectionState, e_t: np.ndarray, t: int, cfg: DetectionConfig) -> tuple[DetectionState, Outcome | None]:
    """Advance the detector by one control step (mutates and returns ``state``)."""
    err = float(np.linalg.norm(e_t))
    outcome = None
    if state.pending_flag is not None:
        # classify against the baseline frozen at flag time
        kind = EventKind.TOPOLOGY_CHANGE if err > state.pending_kappa else EventKind.LOAD_CHANGE
        outcome = Outcome(kind, state.pending_flag)
        state.last_outcome = outcome
        state.pending_flag = None
        state.pending_kappa = float("nan")
        if kind is EventKind.LOAD_CHANGE:
            _push(state, err, cfg)
        return state, outcome

    if len(state.buffer) >= cfg.H:
        kappa = robust_baseline(state.buffer, cfg)
        if err > kappa and err > cfg.min_jump_ratio * float(np.median(state.buffer)):
            state.pending_flag = t
            state.pending_kappa = kappa
            return state, None
    _push(state, err, cfg)
    return state, None


def _push(state: DetectionState, err: float, cfg: DetectionConfig) -> None:
    state.buffer.append(err)
    while len(state.buffer) > cfg.H:
        state.buffer.popleft()
