"""Closed-loop simulation: scenarios, trajectories, suites and metrics."""
from __future__ import annotations

import csv
import enum
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import detection as det
from .adaptation import CostConfig, EstimatorMode, EstimatorState, MGapsState, mgaps_step, stage_cost
from .grid_model import (
    Feeder,
    RadialityViolation,
    TopologyDelta,
    apply_delta,
    build_sensitivity,
    load_feeder,
    restrict_columns,
)
from .identification import IdentifyConfig, ResidualWindow, identify
from .policy import PolicyParams, droop_init
from .powerflow import InjectionState, NonConvergence, VoltageCollapse, solve_nonlinear

ESTIMATION_THRESHOLD = 1e-4
U_REF = 1e-2  # reference control step for the prediction-error estimation-time metric
PROFILE_REPEAT = 6


class Regime(enum.Enum):
    HIGH = "HighVoltage"
    LOW = "LowVoltage"
    RANDOM = "random"


class ConfigError(ValueError):
    pass


class TrajectoryAborted(RuntimeError):
    def __init__(self, seed: int, step: int, cause: Exception):
        super().__init__(f"trajectory seed={seed} aborted at step {step}: {cause}")
        self.seed, self.step, self.cause = seed, step, cause


@dataclass
class ScenarioConfig:
    feeder: str = "ieee13"
    controlled_buses: list[int] | None = None
    estimator_mode: str = "TopologyAware"
    policy_init: str = "droop"  # or a path to a saved PolicyParams JSON
    trajectory_length: int = 1000
    topology_event_step: int = 50
    load_step_every: int = 200
    load_step_size: float = 0.05
    scenario: int | None = None  # index into the reconfiguration menu; None draws one per seed
    voltage_regime: str = "random"
    deviation_target: tuple[float, float] = (0.05, 0.15)
    model: str = "linear"
    seed: int = 0
    n_trajectories: int = 200
    window: int | None = None
    eta: float = 0.1
    qu: float = 0.1
    K: int = 8
    ridge: float = 1e-9
    ols_after_failure: bool = False
    identify: dict = field(default_factory=dict)
    # nonlinear prediction errors drift smoothly; a bare MAD test flags the drift
    detect: dict = field(default_factory=lambda: {"min_jump_ratio": 5.0})

    def __post_init__(self):
        self.deviation_target = tuple(self.deviation_target)
        try:
            EstimatorMode(self.estimator_mode)
            Regime(self.voltage_regime)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.model not in ("linear", "nonlinear"):
            raise ConfigError(f"model must be 'linear' or 'nonlinear', got {self.model!r}")
        T = self.trajectory_length
        if T < 2:
            raise ConfigError("trajectory_length must be at least 2")
        if self.topology_event_step is not None and not 0 < self.topology_event_step < T:
            raise ConfigError("topology event must fall inside the trajectory")
        lo, hi = self.deviation_target
        if not 0 < lo <= hi < 0.5:
            raise ConfigError("deviation_target must be an increasing pair inside (0, 0.5)")

    @classmethod
    def from_json(cls, path: str | Path) -> "ScenarioConfig":
        d = json.loads(Path(path).read_text())
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))


@dataclass
class RunMetrics:
    seed: int
    mode: str
    scenario: int | None
    regime: str
    cumulative_cost: float
    estimation_time: int
    sensitivity_error: float
    detection_success: bool
    node_inclusion: bool
    line_inclusion: bool
    final_identification: bool
    max_reactance_rel_error: float = float("nan")
    aborted: bool = False


@dataclass
class Trace:
    v: np.ndarray       # (T, N) squared voltages
    q: np.ndarray       # (T, M) reactive setpoints applied at each step
    u: np.ndarray       # (T, M) control computed at each step
    cost: np.ndarray    # (T,)
    xerr: np.ndarray    # (T,) spectral error of the sensitivity estimate
    flags: list         # per step: event / detection annotations
    suspended: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        T, N = self.v.shape
        M = self.u.shape[1]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step"] + [f"v{i + 1}" for i in range(N)] + [f"q{i}" for i in range(M)]
                       + [f"u{i}" for i in range(M)] + ["cost", "xhat_err", "suspended", "flags"])
            for t in range(T):
                w.writerow([t] + [repr(float(x)) for x in self.v[t]] + [repr(float(x)) for x in self.q[t]]
                           + [repr(float(x)) for x in self.u[t]]
                           + [repr(float(self.cost[t])), repr(float(self.xerr[t])), int(self.suspended[t]),
                              ";".join(self.flags[t])])


def read_trace(path: str | Path) -> dict:
    """Load a trace CSV into arrays keyed by column group."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    head, body = rows[0], rows[1:]
    cols = {name: i for i, name in enumerate(head)}
    num = lambda pre: [i for n, i in cols.items() if n[0] == pre and n[1:].isdigit()]
    arr = lambda idx: np.array([[float(r[i]) for i in idx] for r in body])
    return {
        "step": np.array([int(r[0]) for r in body]),
        "v": arr(num("v")),
        "q": arr(num("q")),
        "u": arr(num("u")),
        "cost": np.array([float(r[cols["cost"]]) for r in body]),
        "flags": [r[cols["flags"]] for r in body],
    }


# --- environment --------------------------------------------------------

def synth_profiles(kind: str, steps: int, loads: np.ndarray, pv: np.ndarray, rng=None, repeat: int = PROFILE_REPEAT):
    """Diurnal load and PV injections, each sample held for ``repeat`` control steps.

    Returns (p, q) arrays of shape (steps, N); positive values are injections.
    """
    if kind != "diurnal":
        raise ValueError(f"unknown profile kind {kind!r}")
    if steps <= 0:
        raise ValueError("steps must be positive")
    rng = np.random.default_rng(rng)
    n_samples = -(-steps // repeat)
    hours = (np.arange(n_samples) * 24.0 / n_samples)
    # morning and evening peaks on a night-time base
    load_shape = 0.55 + 0.25 * np.exp(-((hours - 8.0) ** 2) / 4.0) + 0.4 * np.exp(-((hours - 19.0) ** 2) / 6.0)
    pv_shape = np.clip(np.cos((hours - 12.5) * np.pi / 12.0), 0.0, None) ** 1.5
    pv_shape[(hours < 6.0) | (hours > 19.0)] = 0.0
    jitter = 1.0 + 0.03 * rng.standard_normal((n_samples, loads.size))
    p = -np.outer(load_shape, loads) * jitter + np.outer(pv_shape, pv)
    q = -0.3 * np.outer(load_shape, loads) * jitter
    p = np.repeat(p, repeat, axis=0)[:steps]
    q = np.repeat(q, repeat, axis=0)[:steps]
    return p, q


def _base_injection(feeder: Feeder, regime: Regime, rng):
    """Background (p, q) plus the regime's driver (p, q); only the driver is scaled by calibration."""
    N = feeder.network.N
    loads = feeder.loads if feeder.loads is not None else np.zeros(N)
    pv = feeder.pv if feeder.pv is not None else np.zeros(N)
    jit = 1.0 + 0.1 * rng.uniform(-1, 1, N)
    zero = np.zeros(N)
    if regime is Regime.LOW:
        return (zero, zero), (-loads * jit, -0.3 * loads * jit)
    light = -0.2 * loads * jit
    # PV at a fixed leading power factor; pure active injection needs implausible power on low r/x lines
    return (light, 0.3 * light), (pv * jit, 0.4 * pv * jit)


def _voltages(model: str, net, sens, p, q, v_init=None) -> np.ndarray:
    if model == "linear":
        return sens.R @ p + sens.X @ q + net.v0
    return solve_nonlinear(net, InjectionState(p, q), tol=1e-11, max_iter=200, v_init=v_init).v


def _deviation(model, net, sens, p, q) -> float:
    try:
        v = _voltages(model, net, sens, p, q)
    except Exception:
        return np.inf
    if np.any(v <= 0):
        return np.inf
    return float(np.max(np.abs(np.sqrt(v) - 1.0)))


def calibrate_scale(model: str, net, drive, target: float, base=None, tol: float = 1e-4) -> float:
    """Scale s so the uncontrolled max |magnitude - 1| under base + s * drive equals ``target``."""
    sens = build_sensitivity(net)
    p_b, q_b = base if base is not None else (np.zeros(net.N), np.zeros(net.N))
    p_d, q_d = drive
    dev = lambda s: _deviation(model, net, sens, p_b + s * p_d, q_b + s * q_d)
    if dev(0.0) >= target:
        raise ConfigError("background injections already exceed the deviation target")
    lo, hi = 0.0, 1.0
    while dev(hi) < target:
        lo, hi = hi, 2.0 * hi
        if hi > 1e6:
            raise ConfigError("injection pattern cannot reach the deviation target")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if dev(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * hi:
            break
    return 0.5 * (lo + hi)


# --- single trajectory ----------------------------------------------------

@dataclass
class _Setup:
    feeder: Feeder
    P: tuple
    scenario: int | None
    delta: TopologyDelta | None
    regime: Regime
    env: list  # (start_step, p, q) segments


def _prepare(cfg: ScenarioConfig, seed: int) -> _Setup:
    feeder = load_feeder(cfg.feeder)
    P = tuple(cfg.controlled_buses or feeder.controlled)
    rng = np.random.default_rng(seed)
    # every random draw happens here, independent of estimator mode, so seeds pair across modes
    scen = cfg.scenario
    if cfg.topology_event_step is not None and feeder.reconfig_menu:
        if scen is None:
            scen = int(rng.integers(len(feeder.reconfig_menu)))
        delta = feeder.reconfig_menu[scen]
    else:
        scen, delta = None, None
    regime = Regime(cfg.voltage_regime)
    r = rng.random()
    if regime is Regime.RANDOM:
        regime = Regime.HIGH if r < 0.5 else Regime.LOW
    target = rng.uniform(*cfg.deviation_target)
    base, drive = _base_injection(feeder, regime, rng)
    s = calibrate_scale(cfg.model, feeder.network, drive, target, base)
    p, q = base[0] + s * drive[0], base[1] + s * drive[1]
    env = [(0, p, q)]
    if cfg.load_step_every:
        for t0 in range(cfg.load_step_every, cfg.trajectory_length, cfg.load_step_every):
            f = 1.0 + rng.uniform(-cfg.load_step_size, cfg.load_step_size, p.size)
            p, q = p * f, q * f
            env.append((t0, p, q))
    return _Setup(feeder, P, scen, delta, regime, env)


def _initial_policy(cfg: ScenarioConfig, P, X0P) -> PolicyParams:
    if cfg.policy_init == "droop":
        return droop_init(P, np.diag(X0P[np.asarray(P) - 1]), K=cfg.K)
    params = PolicyParams.load(cfg.policy_init)
    if params.buses != tuple(P):
        raise ConfigError("saved policy buses do not match controlled buses")
    return params


def run_trajectory(cfg: ScenarioConfig, seed: int, keep_trace: bool = True) -> tuple[RunMetrics, Trace | None]:
    setup = _prepare(cfg, seed)
    mode = EstimatorMode(cfg.estimator_mode)
    net_true = setup.feeder.network
    N = net_true.N
    P = setup.P
    M = len(P)
    T = cfg.trajectory_length
    d = cfg.window or setup.feeder.defaults.get("window", 10)
    t_ev = cfg.topology_event_step if setup.delta is not None else None
    id_cfg = IdentifyConfig(**cfg.identify)
    det_cfg = det.DetectionConfig(**cfg.detect)
    cost_cfg = CostConfig.default(N, M, cfg.qu)

    sens_true = build_sensitivity(net_true)
    net_after = apply_delta(net_true, setup.delta) if setup.delta is not None else None
    sens_after = build_sensitivity(net_after) if net_after is not None else None
    XP_true = restrict_columns(sens_true.X, P)

    # believed network (topology-aware mode) and its sensitivity
    net_hat = net_true
    sens_hat = sens_true
    est = EstimatorState(mode, XP_true.copy(), ridge=cfg.ridge)
    policy = _initial_policy(cfg, P, XP_true)
    mg = MGapsState.start(policy)
    eta = 0.0 if mode is EstimatorMode.FIXED else cfg.eta

    env_i = 0
    p, q_env = setup.env[0][1], setup.env[0][2]
    Pidx = np.asarray(P) - 1

    def inject(qP):
        qq = q_env.copy()
        qq[Pidx] += qP
        return qq

    v = _voltages(cfg.model, net_true, sens_true, p, inject(mg.q))
    dstate = det.DetectionState()
    window: ResidualWindow | None = None
    window_for_event = False
    detected = False
    id_result = None

    V_tr = np.empty((T, N))
    Q_tr = np.empty((T, M))
    U_tr = np.zeros((T, M))
    C_tr = np.empty(T)
    E_tr = np.empty(T)
    S_tr = np.zeros(T, dtype=bool)
    flags = [[] for _ in range(T)]
    net_cur, sens_cur = net_true, sens_true
    XP_cur = XP_true

    for t in range(T):
        V_tr[t] = v
        Q_tr[t] = mg.q
        C_tr[t] = stage_cost(v, mg.q, cost_cfg)
        E_tr[t] = np.linalg.norm(XP_cur - est.X_hat, 2)
        S_tr[t] = mg.suspended
        if t == T - 1:
            break
        # environment for step t+1
        if t + 1 == t_ev:
            net_cur, sens_cur = net_after, sens_after
            XP_cur = restrict_columns(sens_cur.X, P)
            flags[t + 1].append("topology_event")
        if env_i + 1 < len(setup.env) and setup.env[env_i + 1][0] == t + 1:
            env_i += 1
            p, q_env = setup.env[env_i][1], setup.env[env_i][2]
            flags[t + 1].append("load_step")

        v_prev = v
        try:
            _, u, v = mgaps_step(mg, v_prev, lambda qn: _voltages(cfg.model, net_cur, sens_cur, p, inject(qn), v_prev),
                                 est.X_hat, cost_cfg, eta)
        except (NonConvergence, VoltageCollapse) as exc:
            raise TrajectoryAborted(seed, t + 1, exc) from exc
        U_tr[t] = u
        v_delta = v - v_prev

        if mode is EstimatorMode.FIXED:
            continue

        if window is not None:
            # identification data collection (detector paused)
            window.append(_embed(u, Pidx, N) - sens_hat.X_inv @ v_delta, v_delta)
            if window.full:
                result = identify(window, net_hat, id_cfg)
                if window_for_event:
                    id_result = result  # metrics score the response to the scheduled event only
                if result.accepted:
                    net_hat = apply_delta(net_hat, result.delta)
                    sens_hat = build_sensitivity(net_hat)
                    est.X_hat = restrict_columns(sens_hat.X, P)
                    mg.aux.reset()
                    flags[t + 1].append("identified")
                else:
                    flags[t + 1].append(f"rejected:{result.reject_reason.value}")
                    if cfg.ols_after_failure:
                        est.mode = EstimatorMode.OLS
                        est.on_topology_change()
                window = None
                dstate.reset()
                mg.suspended = False
            continue

        est.observe(u, v_delta)
        if est.active:
            continue  # regression estimators track continuously once triggered
        e = det.prediction_error(v_delta, est.X_hat, u)
        dstate, outcome = det.step(dstate, e, t + 1, det_cfg)
        if dstate.pending_flag is not None:
            flags[t + 1].append("flag")
            mg.suspended = mode is EstimatorMode.TOPOLOGY_AWARE
        if outcome is not None:
            flags[t + 1].append(f"{outcome.kind.value}@{outcome.t}")
            mg.suspended = False
            if outcome.kind is det.EventKind.TOPOLOGY_CHANGE:
                window_for_event = t_ev is not None and outcome.t == t_ev
                detected = detected or window_for_event
                if mode is EstimatorMode.TOPOLOGY_AWARE:
                    mg.suspended = True
                    window = ResidualWindow(N, d, start_time=t + 1)
                    window.append(_embed(u, Pidx, N) - sens_hat.X_inv @ v_delta, v_delta)
                else:
                    est.on_topology_change()
                    est.observe(u, v_delta)

    metrics = _metrics(cfg, seed, setup, mode, C_tr, E_tr, detected, id_result, t_ev, P, net_after)
    trace = Trace(V_tr, Q_tr, U_tr, C_tr, E_tr, flags, S_tr) if keep_trace else None
    return metrics, trace


def _embed(u, Pidx, N):
    z = np.zeros(N)
    z[Pidx] = u
    return z


def _metrics(cfg, seed, setup, mode, C, E, detected, id_result, t_ev, P, net_after) -> RunMetrics:
    T = C.size
    if t_ev is not None:
        post = E[t_ev:]
        below = np.flatnonzero(post * U_REF < ESTIMATION_THRESHOLD)
        est_time = int(below[0]) if below.size else T
        sens_err = float(post.mean())
    else:
        est_time, sens_err = 0, float(E.mean())
    node_inc = line_inc = final = False
    rel_err = float("nan")
    if detected and id_result is not None and setup.delta is not None:
        true_lines = setup.delta.added_keys | setup.delta.deleted_keys
        ends = {b for e in true_lines for b in e if b != 0}
        node_inc = ends <= set(id_result.nodes)
        line_inc = node_inc and true_lines <= set(id_result.candidates.edges if id_result.candidates else ())
        final = line_inc and id_result.accepted and id_result.delta.same_lines(setup.delta)
        if final:
            x_hat = id_result.reactances
            rel_err = max(abs(x_hat[l.key] - l.x) / l.x for l in setup.delta.added)
    return RunMetrics(
        seed=seed,
        mode=mode.value,
        scenario=setup.scenario,
        regime=setup.regime.value,
        cumulative_cost=float(C.sum()),
        estimation_time=est_time,
        sensitivity_error=sens_err,
        detection_success=bool(detected),
        node_inclusion=bool(node_inc),
        line_inclusion=bool(line_inc),
        final_identification=bool(final),
        max_reactance_rel_error=rel_err,
    )


# --- suites ----------------------------------------------------------------

def _worker(args):
    cfg, seed = args
    try:
        return run_trajectory(cfg, seed, keep_trace=False)[0]
    except TrajectoryAborted:
        nan = float("nan")
        return RunMetrics(seed, cfg.estimator_mode, cfg.scenario, cfg.voltage_regime, nan, cfg.trajectory_length,
                          nan, False, False, False, False, aborted=True)


def n_workers() -> int:
    env = os.environ.get("GRIDADAPT_THREADS")
    n = int(env) if env else (os.cpu_count() or 1)
    return max(1, n)


def run_many(cfg: ScenarioConfig, seeds) -> list[RunMetrics]:
    seeds = list(seeds)
    jobs = [(cfg, s) for s in seeds]
    workers = min(n_workers(), len(jobs))
    if workers <= 1:
        return [_worker(j) for j in jobs]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(_worker, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


RATE_FIELDS = ("detection_success", "node_inclusion", "line_inclusion", "final_identification")


def summarize(runs: list[RunMetrics]) -> dict:
    runs = sorted(runs, key=lambda r: r.seed)
    out = {"n": len(runs), "aborted": sum(r.aborted for r in runs)}
    for f in RATE_FIELDS:
        out[f] = float(np.mean([getattr(r, f) for r in runs])) if runs else float("nan")
    ok = [r for r in runs if not r.aborted]  # aborted runs count as failures above, but carry no cost
    for f in ("cumulative_cost", "estimation_time", "sensitivity_error"):
        out[f] = float(np.mean([getattr(r, f) for r in ok])) if ok else float("nan")
    return out


def run_suite(cfg: ScenarioConfig, n: int | None = None, out_dir: str | Path | None = None,
              modes=None) -> dict:
    """Run ``n`` seeds for each estimator mode and write per-run and summary tables."""
    n = cfg.n_trajectories if n is None else n
    if n < 1:
        raise ValueError("n must be at least 1")
    modes = list(modes or [cfg.estimator_mode])
    seeds = range(cfg.seed, cfg.seed + n)
    report = {}
    all_runs = []
    for m in modes:
        runs = run_many(replace(cfg, estimator_mode=m), seeds)
        all_runs += runs
        report[m] = summarize(runs)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "runs.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(asdict(all_runs[0]).keys()))
            w.writeheader()
            for r in all_runs:
                w.writerow(asdict(r))
        keys = ["n", "aborted", *RATE_FIELDS, "cumulative_cost", "estimation_time", "sensitivity_error"]
        with open(out / "summary.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["mode", *keys])
            for m, s in report.items():
                w.writerow([m, *[s[k] for k in keys]])
        (out / "summary.txt").write_text(format_report(report, cfg))
    return report


def format_report(report: dict, cfg: ScenarioConfig | None = None) -> str:
    lines = []
    if cfg is not None:
        lines.append(f"feeder={cfg.feeder} model={cfg.model} steps={cfg.trajectory_length}")
    lines.append(f"{'mode':<14}{'n':>5}{'detect':>8}{'nodes':>8}{'lines':>8}{'final':>8}"
                 f"{'cost':>12}{'est.time':>10}{'err':>10}")
    for m, s in report.items():
        lines.append(f"{m:<14}{s['n']:>5}{s['detection_success']:>8.2f}{s['node_inclusion']:>8.2f}"
                     f"{s['line_inclusion']:>8.2f}{s['final_identification']:>8.2f}"
                     f"{s['cumulative_cost']:>12.4f}{s['estimation_time']:>10.1f}{s['sensitivity_error']:>10.4f}")
    return "\n".join(lines) + "\n"
