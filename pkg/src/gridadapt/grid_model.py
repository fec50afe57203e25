"""Radial network representation and LinDistFlow sensitivity matrices.

Buses are indexed ``0..N`` with bus 0 the substation. Matrices returned by
this module are indexed by the non-substation buses ``1..N`` (row/column
``k`` corresponds to bus ``k + 1``).

Convention: ``X = 2 * (A^T D_x^-1 A)^-1`` and ``X_inv = 0.5 * A^T D_x^-1 A``,
so that ``X @ X_inv == I`` and the single-line coefficient is ``1 / (2 x)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class RadialityViolation(ValueError):
    """Raised when a network (or the result of a delta) is not a tree."""


class UnknownDeletedLine(KeyError):
    pass


class DuplicateAddedLine(ValueError):
    pass


def _key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise ValueError(f"self-loop at bus {self.from_bus}")
        if self.from_bus < 0 or self.to_bus < 0:
            raise ValueError("bus indices must be non-negative")
        if not (self.r > 0 and self.x > 0):
            raise ValueError(f"line ({self.from_bus},{self.to_bus}) needs r > 0 and x > 0")

    @property
    def key(self) -> tuple[int, int]:
        return _key(self.from_bus, self.to_bus)


@dataclass(frozen=True)
class TopologyDelta:
    added: tuple[Line, ...] = ()
    deleted: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "added", tuple(self.added))
        object.__setattr__(self, "deleted", tuple(_key(*e) for e in self.deleted))
        if len(self.added) != len(self.deleted):
            raise ValueError("a reconfiguration must add and delete the same number of lines")

    @property
    def added_keys(self) -> frozenset:
        return frozenset(l.key for l in self.added)

    @property
    def deleted_keys(self) -> frozenset:
        return frozenset(self.deleted)

    def same_lines(self, other: "TopologyDelta") -> bool:
        return self.added_keys == other.added_keys and self.deleted_keys == other.deleted_keys


@dataclass(frozen=True)
class RadialNetwork:
    n_buses: int
    lines: tuple[Line, ...]
    v0: float = 1.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        for l in self.lines:
            if max(l.from_bus, l.to_bus) >= self.n_buses:
                raise ValueError(f"line {l.key} references a bus outside 0..{self.n_buses - 1}")
        keys = [l.key for l in self.lines]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate line in network")

    @property
    def N(self) -> int:
        return self.n_buses - 1

    def line_keys(self) -> frozenset:
        return frozenset(l.key for l in self.lines)

    def get_line(self, i: int, j: int) -> Line:
        k = _key(i, j)
        for l in self.lines:
            if l.key == k:
                return l
        raise UnknownDeletedLine(k)

    def has_line(self, i: int, j: int) -> bool:
        return _key(i, j) in self.line_keys()

    @cached_property
    def _tree(self):
        """(parent array, line index per child bus, BFS order) or None if not radial."""
        if len(self.lines) != self.N:
            return None
        adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n_buses)]
        for idx, l in enumerate(self.lines):
            adj[l.from_bus].append((l.to_bus, idx))
            adj[l.to_bus].append((l.from_bus, idx))
        parent = np.full(self.n_buses, -1)
        line_of = np.full(self.n_buses, -1)
        seen = np.zeros(self.n_buses, dtype=bool)
        seen[0] = True
        order = [0]
        for u in order:
            for v, idx in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    parent[v] = u
                    line_of[v] = idx
                    order.append(v)
        if not seen.all():
            return None
        return parent, line_of, order

    def _require_tree(self):
        t = self._tree
        if t is None:
            raise RadialityViolation(f"network {self.name or ''} is not radial".replace("  ", " "))
        return t

    @property
    def parent(self) -> np.ndarray:
        return self._require_tree()[0]

    @property
    def bfs_order(self) -> list[int]:
        return self._require_tree()[2]

    @cached_property
    def subtree_matrix(self) -> np.ndarray:
        """S[k, n] = 1 if bus n+1 lies in the subtree hanging below bus k+1.

        Row k is the line feeding bus k+1 from its parent, so ``S @ s`` sums
        downstream injections per line and ``S.T @ w`` sums line quantities
        along each root path.
        """
        parent, _, order = self._require_tree()
        N = self.N
        S = np.zeros((N, N))
        for b in reversed(order[1:]):
            S[b - 1, b - 1] = 1.0
            p = parent[b]
            if p != 0:
                S[p - 1] += S[b - 1]
        S.setflags(write=False)
        return S

    @cached_property
    def line_params(self) -> tuple[np.ndarray, np.ndarray]:
        """(r, x) of the line feeding each bus 1..N."""
        _, line_of, _ = self._require_tree()
        r = np.array([self.lines[line_of[b]].r for b in range(1, self.n_buses)])
        x = np.array([self.lines[line_of[b]].x for b in range(1, self.n_buses)])
        r.setflags(write=False)
        x.setflags(write=False)
        return r, x

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_buses": self.n_buses,
            "v0": self.v0,
            "lines": [{"from": l.from_bus, "to": l.to_bus, "r": l.r, "x": l.x} for l in self.lines],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RadialNetwork":
        lines = [Line(int(l["from"]), int(l["to"]), float(l["r"]), float(l["x"])) for l in d["lines"]]
        return cls(int(d["n_buses"]), tuple(lines), float(d.get("v0", 1.0)), d.get("name", ""))


@dataclass(frozen=True)
class SensitivityPair:
    R: np.ndarray
    X: np.ndarray
    X_inv: sp.csr_matrix = field(repr=False)

    @property
    def N(self) -> int:
        return self.X.shape[0]


def validate_radial(net: RadialNetwork) -> bool:
    return net._tree is not None


def reduced_incidence(net: RadialNetwork) -> np.ndarray:
    """Line-by-bus incidence with the substation column dropped.

    Row ``l`` is ``e_from - e_to`` for ``net.lines[l]``.
    """
    if not validate_radial(net):
        raise RadialityViolation("reduced incidence requires a radial network")
    N = net.N
    A = np.zeros((N, N))
    for row, l in enumerate(net.lines):
        if l.from_bus:
            A[row, l.from_bus - 1] += 1.0
        if l.to_bus:
            A[row, l.to_bus - 1] -= 1.0
    return A


def inverse_sensitivity(net: RadialNetwork, param: str = "x") -> sp.csr_matrix:
    """0.5 * A^T diag(1/param) A as a sparse matrix."""
    if not validate_radial(net):
        raise RadialityViolation("inverse sensitivity requires a radial network")
    N = net.N
    rows, cols, vals = [], [], []
    for l in net.lines:
        g = 0.5 / getattr(l, param)
        i, j = l.from_bus - 1, l.to_bus - 1
        for a in (i, j):
            if a >= 0:
                rows.append(a); cols.append(a); vals.append(g)
        if i >= 0 and j >= 0:
            rows += [i, j]; cols += [j, i]; vals += [-g, -g]
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


def build_sensitivity(net: RadialNetwork) -> SensitivityPair:
    S = net.subtree_matrix
    r, x = net.line_params
    R = 2.0 * S.T @ (r[:, None] * S)
    X = 2.0 * S.T @ (x[:, None] * S)
    R.setflags(write=False)
    X.setflags(write=False)
    return SensitivityPair(R=R, X=X, X_inv=inverse_sensitivity(net))


def restrict_columns(X: np.ndarray, controlled: Sequence[int]) -> np.ndarray:
    """Columns of X for the given buses (bus labels, 1-based)."""
    idx = np.asarray(list(controlled), dtype=int)
    N = X.shape[1]
    if idx.size and (idx.min() < 1 or idx.max() > N):
        raise IndexError(f"controlled buses must lie in 1..{N}")
    return X[:, idx - 1]


def apply_delta(net: RadialNetwork, delta: TopologyDelta) -> RadialNetwork:
    keys = net.line_keys()
    for k in delta.deleted:
        if k not in keys:
            raise UnknownDeletedLine(k)
    remaining = [l for l in net.lines if l.key not in delta.deleted_keys]
    remaining_keys = {l.key for l in remaining}
    for l in delta.added:
        if l.key in remaining_keys:
            raise DuplicateAddedLine(l.key)
        remaining_keys.add(l.key)
    out = RadialNetwork(net.n_buses, tuple(remaining) + tuple(delta.added), net.v0, net.name)
    if not validate_radial(out):
        raise RadialityViolation(f"delta {sorted(delta.deleted)} -> {sorted(delta.added_keys)} breaks radiality")
    return out


def inverse_delta(net: RadialNetwork, delta: TopologyDelta) -> TopologyDelta:
    """Delta that undoes ``delta`` when applied to ``apply_delta(net, delta)``."""
    restored = tuple(net.get_line(*k) for k in delta.deleted)
    return TopologyDelta(added=restored, deleted=tuple(l.key for l in delta.added))


def random_tree(n_buses: int, rng: np.random.Generator, r_range=(0.01, 0.05), x_range=(0.01, 0.08)) -> RadialNetwork:
    """Random recursive tree: bus k attaches to a uniformly chosen earlier bus."""
    lines = []
    for k in range(1, n_buses):
        p = int(rng.integers(0, k))
        lines.append(Line(p, k, float(rng.uniform(*r_range)), float(rng.uniform(*x_range))))
    return RadialNetwork(n_buses, tuple(lines))


# ---------------------------------------------------------------- files

FEEDER_DIR = Path(__file__).parent / "feeders"


def _delta_from_json(entry: dict) -> TopologyDelta:
    added = tuple(Line(int(a["from"]), int(a["to"]), float(a["r"]), float(a["x"])) for a in entry["add"])
    deleted = tuple((int(i), int(j)) for i, j in entry["delete"])
    return TopologyDelta(added=added, deleted=deleted)


@dataclass(frozen=True)
class Feeder:
    network: RadialNetwork
    controlled: tuple[int, ...] = ()
    loads: np.ndarray | None = None
    pv: np.ndarray | None = None
    reconfig_menu: tuple[TopologyDelta, ...] = ()
    defaults: dict = field(default_factory=dict)


def load_network(path: str | Path) -> RadialNetwork:
    return load_feeder(path).network


def load_feeder(name_or_path: str | Path) -> Feeder:
    """Read a feeder JSON file; bare names resolve against the shipped feeders."""
    p = Path(name_or_path)
    if not p.exists():
        cand = FEEDER_DIR / f"{name_or_path}.json"
        if not cand.exists():
            raise FileNotFoundError(name_or_path)
        p = cand
    d = json.loads(p.read_text())
    net = RadialNetwork.from_dict(d)
    N = net.N

    def _vec(key):
        if key not in d:
            return None
        v = np.zeros(N)
        for bus, val in d[key].items():
            v[int(bus) - 1] = float(val)
        return v

    menu = tuple(_delta_from_json(e) for e in d.get("reconfig_menu", []))
    return Feeder(
        network=net,
        controlled=tuple(int(b) for b in d.get("controlled", [])),
        loads=_vec("loads"),
        pv=_vec("pv"),
        reconfig_menu=menu,
        defaults=d.get("defaults", {}),
    )


def save_network(net: RadialNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=2))


def adjacency_pattern(net: RadialNetwork) -> np.ndarray:
    """Boolean N x N pattern: tree adjacency among buses 1..N plus diagonal."""
    N = net.N
    P = np.eye(N, dtype=bool)
    for l in net.lines:
        i, j = l.from_bus - 1, l.to_bus - 1
        if i >= 0 and j >= 0:
            P[i, j] = P[j, i] = True
    return P


def lines_from_pairs(pairs: Iterable[tuple[int, int, float, float]]) -> tuple[Line, ...]:
    return tuple(Line(i, j, r, x) for i, j, r, x in pairs)
