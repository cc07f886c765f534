"""Closed-loop simulation harness and Monte-Carlo suites."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from rmpc.errors import InitializationError, InvariantViolation
from rmpc.model import TrueRealization, UncertainSystem, random_hull_point
from rmpc.mpc import OfflineData, RobustMPC, horizon_length
from rmpc.polytope import bounding_box, normalize, vertices

log = logging.getLogger(__name__)

VIOLATION_TOL = 1e-7


# --- samplers ------------------------------------------------------------------

class UniformW:
    """Uniform samples from W by rejection from its bounding box."""

    name = "uniform"

    def __init__(self, system: UncertainSystem):
        self.W = system.W
        self.lb, self.ub = bounding_box(system.W)

    def __call__(self, rng, **_):
        while True:
            w = rng.uniform(self.lb, self.ub)
            if np.all(self.W.H @ w <= self.W.h):
                return w


class VertexW:
    name = "vertex"

    def __init__(self, system: UncertainSystem):
        self.V = vertices(system.W)

    def __call__(self, rng, **_):
        return self.V[rng.integers(len(self.V))].copy()


class ConstantW:
    name = "constant"

    def __init__(self, w):
        self.w = np.asarray(w, dtype=float)

    def __call__(self, rng, **_):
        return self.w.copy()


class AdversarialW:
    """Greedy: the vertex of W that minimises the smallest normalised margin
    of the successor state over the rows of X and X_N."""

    name = "adversarial"

    def __init__(self, system: UncertainSystem):
        self.V = vertices(system.W)
        rows = [normalize(system.X)]
        if system.XN is not None:
            rows.append(normalize(system.XN))
        self.H = np.vstack([r.H for r in rows])
        self.h = np.concatenate([r.h for r in rows])

    def __call__(self, rng, x_next_nominal=None, **_):
        margins = self.h[None, :] - (x_next_nominal[None, :] + self.V) @ self.H.T
        return self.V[int(np.argmin(margins.min(axis=1)))].copy()


def fixed_vertex_realization(system: UncertainSystem, rng) -> TrueRealization:
    return TrueRealization(system.deltaA_vertices[rng.integers(system.n_a)],
                           system.deltaB_vertices[rng.integers(system.n_b)])


def fixed_hull_realization(system: UncertainSystem, rng) -> TrueRealization:
    return TrueRealization(random_hull_point(system.deltaA_vertices, rng),
                           random_hull_point(system.deltaB_vertices, rng))


def varying_hull_realization(system: UncertainSystem, rng, T: int) -> TrueRealization:
    return TrueRealization(np.array([random_hull_point(system.deltaA_vertices, rng) for _ in range(T)]),
                           np.array([random_hull_point(system.deltaB_vertices, rng) for _ in range(T)]))


REALIZATIONS = ("vertex", "hull", "varying")
DISTURBANCES = ("uniform", "vertex", "adversarial")


def make_realization(kind: str, system: UncertainSystem, rng, T: int) -> TrueRealization:
    if kind == "vertex":
        return fixed_vertex_realization(system, rng)
    if kind == "hull":
        return fixed_hull_realization(system, rng)
    if kind == "varying":
        return varying_hull_realization(system, rng, T)
    if kind == "nominal":
        return TrueRealization.nominal(system)
    raise ValueError(f"unknown realization sampler {kind!r}")


def make_sampler(kind: str, system: UncertainSystem):
    if kind == "uniform":
        return UniformW(system)
    if kind == "vertex":
        return VertexW(system)
    if kind == "adversarial":
        return AdversarialW(system)
    if kind == "zero":
        return ConstantW(np.zeros(system.d))
    raise ValueError(f"unknown disturbance sampler {kind!r}")


# --- traces ---------------------------------------------------------------------

@dataclass(eq=False)
class SimTrace:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    w_tilde: np.ndarray
    realization: str
    feasible: np.ndarray
    backup: np.ndarray
    objectives: np.ndarray
    Nt: np.ndarray
    in_XN: np.ndarray
    state_margin: np.ndarray
    input_margin: np.ndarray
    solve_times: np.ndarray
    N: int

    @property
    def min_margin(self) -> float:
        return float(min(self.state_margin.min(), self.input_margin.min()))

    def entry_time(self) -> int | None:
        """First t from which the state stays in X_N until the end."""
        out = np.flatnonzero(~self.in_XN)
        if out.size == 0:
            return 0
        t = int(out[-1]) + 1
        return t if t < len(self.in_XN) else None

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def _margins(poly, x) -> float:
    return float(np.min(poly.h - poly.H @ x))


def _check(trace_margin: float, what: str, t: int):
    if trace_margin < -VIOLATION_TOL:
        raise InvariantViolation(f"{what} constraint violated at t = {t} by {-trace_margin:.3e}")


def _rollout(system: UncertainSystem, policy, realization: TrueRealization, w_sampler, x0, T: int,
             rng, kind: str, raise_on_violation: bool) -> SimTrace:
    d, m = system.d, system.m
    xs = np.zeros((T + 1, d))
    us = np.zeros((T, m))
    ws = np.zeros((T, d))
    wt = np.zeros((T, d))
    feas = np.zeros(T, dtype=bool)
    back = np.zeros(T, dtype=bool)
    obj = np.full(T, np.nan)
    nts = np.zeros(T, dtype=int)
    stimes = np.zeros(T)
    smarg = np.zeros(T + 1)
    imarg = np.zeros(T)
    xs[0] = x0
    XN = system.XN
    for t in range(T):
        x = xs[t]
        smarg[t] = _margins(system.X, x)
        if raise_on_violation:
            _check(smarg[t], "state", t)
        u, info = policy(x, t)
        us[t] = u
        feas[t], back[t], obj[t], nts[t], stimes[t] = info
        imarg[t] = _margins(system.U, u)
        if raise_on_violation:
            _check(imarg[t], "input", t)
        dA, dB = realization.at(t)
        A, B = system.A_bar + dA, system.B_bar + dB
        x_nom = A @ x + B @ u
        w = w_sampler(rng, x_next_nominal=x_nom)
        ws[t] = w
        xs[t + 1] = x_nom + w
        wt[t] = dA @ x + dB @ u + w
    smarg[T] = _margins(system.X, xs[T])
    if raise_on_violation:
        _check(smarg[T], "state", T)
    in_xn = np.array([bool(np.all(XN.H @ x <= XN.h + VIOLATION_TOL)) for x in xs])
    return SimTrace(np.arange(T + 1), xs, us, ws, wt, kind, feas, back, obj, nts, in_xn, smarg, imarg,
                    stimes, system.N)


def simulate(offline: OfflineData, realization: TrueRealization, w_sampler, x0, T: int = 50,
             seed: int = 0, kind: str = "", raise_on_violation: bool = True) -> SimTrace:
    """Closed loop under the shrinking-horizon controller with backup."""
    rng = np.random.default_rng(seed)
    ctrl = RobustMPC(offline)

    def policy(x, t):
        st = ctrl.step(x, t)
        return st.applied_u, (st.feasible, not st.feasible, np.nan if st.objective is None else st.objective,
                              st.Nt_used, st.solve_time)

    return _rollout(offline.system, policy, realization, w_sampler, np.asarray(x0, dtype=float), T, rng,
                    kind, raise_on_violation)


def open_loop_safe_run(offline: OfflineData, realization: TrueRealization, w_sampler, x0, T: int = 50,
                       seed: int = 0, raise_on_violation: bool = True) -> SimTrace:
    """Stored t = 0 policy for t < N, then u = Kx; never re-solves."""
    system = offline.system
    x0 = np.asarray(x0, dtype=float)
    res, pol, dt = offline.solve(x0, system.N, 0)
    if not res.optimal:
        raise InitializationError(f"the problem is not feasible at t = 0 ({res.status.value})")
    K = np.atleast_2d(offline.terminal.K)
    hist_x: list[np.ndarray] = []
    hist_u: list[np.ndarray] = []

    def policy(x, t):
        hist_x.append(x)
        if t < pol.Nt:
            w_hist = [hist_x[l + 1] - system.A_bar @ hist_x[l] - system.B_bar @ hist_u[l] for l in range(t)]
            u = pol.input_at(t, w_hist)
        else:
            u = K @ x
        hist_u.append(u)
        return u, (t == 0, False, res.objective if t == 0 else np.nan, pol.Nt, dt if t == 0 else 0.0)

    rng = np.random.default_rng(seed)
    return _rollout(system, policy, realization, w_sampler, x0, T, rng, "open_loop", raise_on_violation)


# --- Lyapunov diagnostics ------------------------------------------------------

@dataclass
class LyapunovReport:
    dV: np.ndarray
    stage: np.ndarray
    w_norm: np.ndarray
    decreasing: bool
    sigma_estimate: float
    checked_steps: int


def lyapunov_report(trace: SimTrace, P: np.ndarray, x_tol: float = 1e-6) -> LyapunovReport:
    """Differences of the Nt = 1 objective from t = N on.

    With a vanishing w~ the objective must strictly decrease while
    ||x_t|| > x_tol; otherwise only the envelope constant
    max (dV + x^T P x) / ||w~|| is estimated.
    """
    N = trace.N
    V = trace.objectives
    ts = [t for t in range(N, len(V) - 1) if np.isfinite(V[t]) and np.isfinite(V[t + 1])]
    dV = np.array([V[t + 1] - V[t] for t in ts])
    stage = np.array([trace.states[t] @ P @ trace.states[t] for t in ts])
    wn = np.array([np.abs(trace.w_tilde[t]).max() for t in ts])
    zero_w = np.abs(trace.w_tilde).max(initial=0.0) <= 1e-12
    decreasing = True
    checked = 0
    if zero_w:
        for k, t in enumerate(ts):
            if np.abs(trace.states[t]).max() > x_tol:
                checked += 1
                if not dV[k] < 0:
                    decreasing = False
    ratio = [(dV[k] + stage[k]) / wn[k] for k in range(len(ts)) if wn[k] > 1e-12]
    sigma = float(max(ratio)) if ratio else 0.0
    return LyapunovReport(dV, stage, wn, decreasing, sigma, checked)


# --- Monte-Carlo suites -----------------------------------------------------------

@dataclass
class RunSpec:
    x0: tuple
    realization: str
    disturbance: str
    seed: int


@dataclass
class SuiteSummary:
    runs: int = 0
    violations: int = 0
    min_margin: float = np.inf
    late_entries: int = 0
    backup_uses: int = 0
    infeasible_init: int = 0
    lyapunov_failures: int = 0
    solve_times: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.late_entries == 0 and self.infeasible_init == 0 \
            and self.lyapunov_failures == 0

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["min_margin"] = float(self.min_margin)
        out["ok"] = self.ok
        return out


def plan_runs(x0s, n_runs: int, seed: int = 0, realizations=REALIZATIONS,
              disturbances=DISTURBANCES) -> list[RunSpec]:
    """Round-robin over initial states and sampler combinations."""
    combos = [(r, w) for r in realizations for w in disturbances]
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 31 - 1, size=n_runs)
    return [RunSpec(tuple(map(float, x0s[i % len(x0s)])), *combos[i % len(combos)], int(seeds[i]))
            for i in range(n_runs)]


def run_one(offline: OfflineData, spec: RunSpec, T: int) -> dict:
    system = offline.system
    rng = np.random.default_rng(spec.seed)
    real = make_realization(spec.realization, system, rng, T)
    sampler = make_sampler(spec.disturbance, system)
    try:
        tr = simulate(offline, real, sampler, spec.x0, T, seed=spec.seed + 1, kind=spec.realization,
                      raise_on_violation=False)
    except InitializationError:
        return {"init_failed": True}
    late = bool(np.any(~tr.in_XN[system.N:]))
    lyap_ok = True
    if spec.realization == "nominal" and spec.disturbance == "zero":
        lyap_ok = lyapunov_report(tr, system.P).decreasing
    return {
        "init_failed": False,
        "min_margin": tr.min_margin,
        "violated": tr.min_margin < -VIOLATION_TOL,
        "late": late,
        "backups": int(tr.backup.sum()),
        "lyap_ok": lyap_ok,
        "times": {int(nt): tr.solve_times[tr.Nt == nt].tolist() for nt in np.unique(tr.Nt)},
    }


_WORKER_DATA: OfflineData | None = None


def _init_worker(data):
    global _WORKER_DATA
    _WORKER_DATA = data


def _run_in_worker(args):
    spec, T = args
    return run_one(_WORKER_DATA, spec, T)


def run_suite(offline: OfflineData, specs: list[RunSpec], T: int = 50, workers: int = 1) -> SuiteSummary:
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(offline,)) as ex:
            results = list(ex.map(_run_in_worker, [(s, T) for s in specs], chunksize=8))
    else:
        results = [run_one(offline, s, T) for s in specs]
    summ = SuiteSummary(runs=len(specs))
    times: dict[int, list] = {}
    for r in results:
        if r["init_failed"]:
            summ.infeasible_init += 1
            continue
        summ.violations += int(r["violated"])
        summ.min_margin = min(summ.min_margin, r["min_margin"])
        summ.late_entries += int(r["late"])
        summ.backup_uses += r["backups"]
        summ.lyapunov_failures += int(not r["lyap_ok"])
        for nt, v in r["times"].items():
            times.setdefault(nt, []).extend(v)
    summ.solve_times = {nt: {"median": float(np.median(v)), "p95": float(np.percentile(v, 95)), "n": len(v)}
                        for nt, v in sorted(times.items())}
    summ.wall_time = time.perf_counter() - t0
    return summ


def feasible_initial_states(offline: OfflineData, n: int, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Random states of X at which the t = 0 problem is feasible."""
    rng = np.random.default_rng(seed)
    lb, ub = bounding_box(offline.system.X)
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 200 * n:
            raise InitializationError("could not find enough feasible initial states")
        x = scale * rng.uniform(lb, ub)
        if not np.all(offline.system.X.H @ x <= offline.system.X.h):
            continue
        res, _, _ = offline.solve(x, horizon_length(0, offline.system.N), 0)
        if res.optimal:
            out.append(x)
    return np.array(out)


def write_summary(summary: SuiteSummary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
