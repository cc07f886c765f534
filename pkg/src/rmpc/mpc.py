"""Tractable robust MPC: QP assembly and the shrinking-horizon controller.

Decision vector layout for horizons Nt >= 2 (names registered on the QP):

    xbar   nominal states x_0 .. x_Nt (x_0 pinned to the measured state)
    ubar   nominal inputs u_0 .. u_{Nt-1}
    Mp/Mm  positive and negative parts of the free entries of the strictly
           block-lower-triangular feedback gain M
    sx, su, sM   epigraph scalars for ||xbar||, ||ubar|| and the induced norm of M
    rob    variables of the robust counterparts (dual multipliers or
           vertex epigraphs, see ``robust_form``)

For every robust row the worst case over disturbance sequences of an
affine function g(M)^T w is replaced either by LP dual multipliers over the
facets of W ("dual") or by an epigraph over the vertices of W ("vertex").
Both are exact; the vertex form is smaller when W has few vertices.
"""
from __future__ import annotations

import csv
import json
import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from rmpc.bounds import TighteningBounds, compute_bounds
from rmpc.errors import ConfigError, InitializationError, InvariantViolation, RangeError
from rmpc.model import UncertainSystem
from rmpc.polytope import HPolytope, remove_redundant, support_rows, vertices
from rmpc.prediction import HorizonStacks, build_stacks
from rmpc.qp import QPInstance, QPResult, Status, solve
from rmpc.terminal import TerminalIngredients, compute_terminal

log = logging.getLogger(__name__)


def horizon_length(t: int, N: int) -> int:
    if t < 0 or N < 1:
        raise RangeError("need t >= 0 and N >= 1")
    return N - t if t <= N - 2 else 1


@dataclass
class MPCOptions:
    exact_vertex_terms: bool | None = None  # None: on unless the truth is time varying
    time_varying_truth: bool = False
    robust_form: str = "auto"  # "dual", "vertex" or "auto"
    reduce_case2: bool = True
    tol: float = 1e-8
    max_iter: int = 60
    backend: str = "ipm"
    memoize: bool = True

    def vertex_terms(self) -> bool:
        if self.exact_vertex_terms is None:
            return not self.time_varying_truth
        return bool(self.exact_vertex_terms)


@dataclass(eq=False)
class AffinePolicy:
    Nt: int
    M: np.ndarray
    ubar: np.ndarray
    xbar: np.ndarray
    issued_at: int

    def input_at(self, k: int, w_hist) -> np.ndarray:
        """u_k = ubar_k + sum_{l<k} M_{k,l} w_l for the disturbance proxies ``w_hist``."""
        m = self.ubar.size // self.Nt
        d = self.M.shape[1] // self.Nt
        u = self.ubar[k * m:(k + 1) * m].copy()
        for l in range(k):
            u += self.M[k * m:(k + 1) * m, l * d:(l + 1) * d] @ w_hist[l]
        return u


@dataclass(frozen=True)
class BackupRef:
    t_f: int


@dataclass(eq=False)
class StepResult:
    t: int
    x: np.ndarray
    applied_u: np.ndarray
    policy: AffinePolicy | BackupRef | None
    feasible: bool
    objective: float | None
    Nt_used: int
    solve_time: float
    diagnostics: dict = field(default_factory=dict)


# --- assembly helpers -------------------------------------------------------

class _Rows:
    """Accumulates linear rows over a growing variable vector."""

    def __init__(self):
        self.n = 0
        self.names: dict[str, slice] = {}
        self.eq: list[tuple[dict, float]] = []
        self.ineq: list[tuple[dict, float]] = []

    def var(self, name: str, size: int) -> slice:
        s = slice(self.n, self.n + size)
        self.names[name] = s
        self.n += size
        return s

    def fresh(self, size: int) -> slice:
        s = slice(self.n, self.n + size)
        self.n += size
        return s

    @staticmethod
    def dense(rows, n):
        A = np.zeros((len(rows), n))
        b = np.zeros(len(rows))
        for k, (terms, rhs) in enumerate(rows):
            for idx, coef in terms.items():
                A[k, idx] += coef
            b[k] = rhs
        return A, b


def _lin(*parts):
    """Merge (index_array, coef_array) pairs into a sparse row dict."""
    row: dict[int, float] = {}
    for idx, coef in parts:
        idx = np.atleast_1d(np.asarray(idx))
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
        for i, a in zip(idx.tolist(), coef.tolist()):
            if a != 0.0:
                row[i] = row.get(i, 0.0) + a
    return row


def _idx(s: slice) -> np.ndarray:
    return np.arange(s.start, s.stop)


@dataclass(eq=False)
class _WData:
    H: np.ndarray
    h: np.ndarray
    V: np.ndarray

    @classmethod
    def of(cls, W: HPolytope) -> "_WData":
        return cls(W.H, W.h, vertices(W))


def _resolve_form(form: str, w: _WData) -> str:
    if form == "auto":
        return "vertex" if len(w.V) <= len(w.h) else "dual"
    if form not in ("dual", "vertex"):
        raise ConfigError(f"unknown robust_form {form!r}")
    return form


def _support_term(rows: _Rows, w: _WData, form: str, J: np.ndarray, g0: np.ndarray,
                  mp: np.ndarray, mm: np.ndarray):
    """Upper bound expression for max_{w in W} (g0 + J m)^T w with m = Mp - Mm.

    Returns (row dict, constant); exact at optimality in both forms.
    """
    if not J.any() and form == "vertex":
        return {}, float(np.max(w.V @ g0))
    if form == "vertex":
        e = rows.fresh(1).start
        VJ = w.V @ J
        Vg = w.V @ g0
        for a in range(len(w.V)):
            rows.ineq.append((_lin((mp, VJ[a]), (mm, -VJ[a]), (e, -1.0)), -Vg[a]))
        return {e: 1.0}, 0.0
    lam = _idx(rows.fresh(len(w.h)))
    for j in lam:
        rows.ineq.append(({int(j): -1.0}, 0.0))
    for b in range(J.shape[0]):
        rows.eq.append((_lin((lam, w.H[:, b]), (mp, -J[b]), (mm, J[b])), g0[b]))
    return _lin((lam, w.h)), 0.0


def _add(row: dict, other: dict) -> dict:
    out = dict(row)
    for k, v in other.items():
        out[k] = out.get(k, 0.0) + v
    return out


@dataclass(eq=False)
class Case1Skeleton:
    """x_t independent part of the Nt >= 2 problem; x_t enters only ``beq``."""

    Nt: int
    Q: np.ndarray
    c: np.ndarray
    Aeq: np.ndarray
    beq: np.ndarray
    Ain: np.ndarray
    bin: np.ndarray
    names: dict
    m_rows: np.ndarray
    m_cols: np.ndarray
    n_x0_rows: int

    def instance(self, x_t) -> QPInstance:
        beq = self.beq.copy()
        beq[:self.n_x0_rows] = np.asarray(x_t, dtype=float).reshape(-1)
        return QPInstance(self.Q, self.c, self.Aeq, beq, self.Ain, self.bin, dict(self.names))

    def policy(self, z, d, m, t) -> AffinePolicy:
        Nt = self.Nt
        M = np.zeros((m * Nt, d * Nt))
        Mv = z[self.names["Mp"]] - z[self.names["Mm"]]
        M[self.m_rows, self.m_cols] = Mv
        return AffinePolicy(Nt, M, z[self.names["ubar"]].copy(), z[self.names["xbar"]].copy(), t)


def _m_entries(Nt, d, m):
    r, c = [], []
    for kr in range(Nt):
        for kc in range(kr):
            for a in range(m):
                for b in range(d):
                    r.append(kr * m + a)
                    c.append(kc * d + b)
    return np.array(r, dtype=int), np.array(c, dtype=int)


def _state_supports(rows: _Rows, w: _WData, form: str, stacks: HorizonStacks, m_r, m_c, mp, mm):
    """Per stacked state row, the worst case of F_i (I + A1 B M) w over W^Nt as (row, constant)."""
    F, d = stacks.Fx, stacks.d
    T = F @ stacks.A1_bar @ stacks.Bbar_stack
    out = []
    for i in range(stacks.n_rows):
        k = stacks.row_block(i)
        sup_row, sup_const = {}, 0.0
        for l in range(k + 1):
            cols = np.arange(l * d, (l + 1) * d)
            J = np.zeros((d, m_r.size))
            for b, col in enumerate(cols):
                sel = m_c == col
                J[b, sel] = T[i, m_r[sel]]
            r_, c_ = _support_term(rows, w, form, J, F[i, cols], mp, mm)
            sup_row = _add(sup_row, r_)
            sup_const += c_
        out.append((sup_row, sup_const))
    return out


def worst_case_disturbance(system: UncertainSystem, stacks: HorizonStacks, M, form: str = "dual",
                           tol: float = 1e-10) -> np.ndarray:
    """Worst-case disturbance contribution to each stacked state row for a fixed gain M.

    Evaluates the robust counterpart used inside the QP (dual multipliers or
    vertex epigraphs) by minimising over its auxiliary variables.
    """
    Nt, d, m = stacks.Nt, stacks.d, stacks.m
    w = _WData.of(system.W)
    form = _resolve_form(form, w)
    M = np.asarray(M, dtype=float)
    m_r, m_c = _m_entries(Nt, d, m)
    rows = _Rows()
    mp = _idx(rows.var("Mp", m_r.size))
    mm = _idx(rows.var("Mm", m_r.size))
    vals = M[m_r, m_c]
    for j in range(m_r.size):
        rows.eq.append(({int(mp[j]): 1.0}, max(vals[j], 0.0)))
        rows.eq.append(({int(mm[j]): 1.0}, max(-vals[j], 0.0)))
    supports = _state_supports(rows, w, form, stacks, m_r, m_c, mp, mm)
    n = rows.n
    c = np.zeros(n)
    for r_, _ in supports:
        for j, a in r_.items():
            c[j] += a
    Aeq, beq = _Rows.dense(rows.eq, n)
    Ain, bin_ = _Rows.dense(rows.ineq, n)
    res = solve(QPInstance(np.zeros((n, n)), c, Aeq, beq, Ain, bin_), tol=tol, max_iter=100)
    if not res.optimal:
        raise RuntimeError(f"support evaluation failed ({res.status.value})")
    return np.array([sum(a * res.z[j] for j, a in r_.items()) + c_ for r_, c_ in supports])


def build_case1(system: UncertainSystem, stacks: HorizonStacks, bounds: TighteningBounds,
                P_N: np.ndarray, options: MPCOptions | None = None) -> Case1Skeleton:
    """Assemble the x_t independent structure of the Nt >= 2 problem."""
    options = options or MPCOptions()
    Nt, d, m = stacks.Nt, stacks.d, stacks.m
    if Nt < 2:
        raise RangeError("case 1 needs Nt >= 2")
    if bounds is None or bounds.Nt != Nt:
        raise ConfigError(f"tightening bounds for Nt = {Nt} are missing")
    w = _WData.of(system.W)
    form = _resolve_form(options.robust_form, w)
    rows = _Rows()
    xs = rows.var("xbar", d * (Nt + 1))
    us = rows.var("ubar", m * Nt)
    m_r, m_c = _m_entries(Nt, d, m)
    nM = m_r.size
    mp = _idx(rows.var("Mp", nM))
    mm = _idx(rows.var("Mm", nM))
    sx = rows.var("sx", 1).start
    su = rows.var("su", 1).start
    sM = rows.var("sM", 1).start
    xi = _idx(xs)
    ui = _idx(us)
    x_pred = xi[: d * Nt]  # x_0 .. x_{Nt-1}

    # equalities: x_0 = x_t, then nominal dynamics
    for a in range(d):
        rows.eq.append(({int(xi[a]): 1.0}, 0.0))
    for k in range(Nt):
        for a in range(d):
            row = _lin((xi[(k + 1) * d + a], 1.0), (xi[k * d:(k + 1) * d], -system.A_bar[a]),
                       (ui[k * m:(k + 1) * m], -system.B_bar[a]))
            rows.eq.append((row, 0.0))

    # epigraphs of the infinity norms
    for j in x_pred:
        rows.ineq.append(({int(j): 1.0, sx: -1.0}, 0.0))
        rows.ineq.append(({int(j): -1.0, sx: -1.0}, 0.0))
    for j in ui:
        rows.ineq.append(({int(j): 1.0, su: -1.0}, 0.0))
        rows.ineq.append(({int(j): -1.0, su: -1.0}, 0.0))
    for r in range(m * Nt):
        sel = np.flatnonzero(m_r == r)
        if sel.size:
            rows.ineq.append((_lin((mp[sel], 1.0), (mm[sel], 1.0), (sM, -1.0)), 0.0))
    for j in np.concatenate([mp, mm]):
        rows.ineq.append(({int(j): -1.0}, 0.0))

    # robust state rows
    F = stacks.Fx
    Fa = F @ stacks.Abar_stack
    Fb = F @ stacks.Bbar_stack
    wmax = bounds.w_max
    vertex_terms = options.vertex_terms()
    if vertex_terms:
        I = np.eye(Nt)
        FA1 = F @ stacks.A1_bar
        extra = [(FA1 @ np.kron(I, DA), FA1 @ np.kron(I, DB))
                 for DA in system.deltaA_vertices for DB in system.deltaB_vertices]
        cx, cu = bounds.t1, bounds.t2
    else:
        extra = [(np.zeros_like(Fa), np.zeros_like(Fb))]
        cx, cu = bounds.td1, bounds.td2
    rhs = stacks.fx - bounds.tw * wmax
    supports = _state_supports(rows, w, form, stacks, m_r, m_c, mp, mm)
    for i in range(stacks.n_rows):
        sup_row, sup_const = supports[i]
        base = _add(sup_row, {sx: cx[i], su: cu[i], sM: bounds.td3[i] * wmax})
        for ex_x, ex_u in extra:
            row = _add(base, _lin((x_pred, Fa[i] + ex_x[i]), (ui, Fb[i] + ex_u[i])))
            rows.ineq.append((row, rhs[i] - sup_const))

    # robust input rows
    Hu, hu = system.U.H, system.U.h
    for k in range(Nt):
        for q in range(Hu.shape[0]):
            sup_row, sup_const = {}, 0.0
            for l in range(k):
                J = np.zeros((d, nM))
                for b in range(d):
                    sel = (m_c == l * d + b) & (m_r >= k * m) & (m_r < (k + 1) * m)
                    J[b, sel] = Hu[q, m_r[sel] - k * m]
                r_, c_ = _support_term(rows, w, form, J, np.zeros(d), mp, mm)
                sup_row = _add(sup_row, r_)
                sup_const += c_
            row = _add(sup_row, _lin((ui[k * m:(k + 1) * m], Hu[q])))
            rows.ineq.append((row, hu[q] - sup_const))

    n = rows.n
    Aeq, beq = _Rows.dense(rows.eq, n)
    Ain, bin_ = _Rows.dense(rows.ineq, n)
    Q = np.zeros((n, n))
    for k in range(Nt):
        s = slice(xs.start + k * d, xs.start + (k + 1) * d)
        Q[s, s] = 2.0 * system.P
        s = slice(us.start + k * m, us.start + (k + 1) * m)
        Q[s, s] = 2.0 * system.R
    s = slice(xs.start + Nt * d, xs.stop)
    Q[s, s] = 2.0 * P_N
    names = dict(rows.names)
    return Case1Skeleton(Nt, Q, np.zeros(n), Aeq, beq, Ain, bin_, names, m_r, m_c, d)


def assemble_case1(x_t, system: UncertainSystem, stacks: HorizonStacks, bounds: TighteningBounds,
                   P_N: np.ndarray, options: MPCOptions | None = None) -> QPInstance:
    return build_case1(system, stacks, bounds, P_N, options).instance(x_t)


def assemble_case2(x_t, system: UncertainSystem, P_N: np.ndarray) -> QPInstance:
    """Nt = 1 problem with one shared dual block over the facets of W.

    Variables: xbar (x_0, x_1), ubar, Lam (r_N x q, row major).
    """
    if system.XN is None:
        raise ConfigError("the terminal set is missing")
    d, m = system.d, system.m
    HN, hN = system.XN.H, system.XN.h
    Hw, hw = system.W.H, system.W.h
    rN, q = HN.shape[0], Hw.shape[0]
    rows = _Rows()
    xi = _idx(rows.var("xbar", 2 * d))
    ui = _idx(rows.var("ubar", m))
    li = _idx(rows.var("Lam", rN * q)).reshape(rN, q)
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    for a in range(d):
        rows.eq.append(({int(xi[a]): 1.0}, x_t[a]))
    for a in range(d):
        rows.eq.append((_lin((xi[d + a], 1.0), (xi[:d], -system.A_bar[a]), (ui, -system.B_bar[a])), 0.0))
    for i in range(rN):
        for b in range(d):
            rows.eq.append((_lin((li[i], Hw[:, b])), HN[i, b]))
    for j in li.reshape(-1):
        rows.ineq.append(({int(j): -1.0}, 0.0))
    for A, B in system.vertex_pairs():
        HA, HB = HN @ A, HN @ B
        for i in range(rN):
            rows.ineq.append((_lin((xi[:d], HA[i]), (ui, HB[i]), (li[i], hw)), hN[i]))
    for qq in range(system.U.n_rows):
        rows.ineq.append((_lin((ui, system.U.H[qq])), system.U.h[qq]))
    n = rows.n
    Aeq, beq = _Rows.dense(rows.eq, n)
    Ain, bin_ = _Rows.dense(rows.ineq, n)
    Q = np.zeros((n, n))
    Q[:d, :d] = 2.0 * system.P
    Q[d:2 * d, d:2 * d] = 2.0 * P_N
    Q[2 * d:2 * d + m, 2 * d:2 * d + m] = 2.0 * system.R
    return QPInstance(Q, np.zeros(n), Aeq, beq, Ain, bin_, dict(rows.names))


@dataclass(eq=False)
class Case2Reduced:
    """Nt = 1 problem in the input alone.

    The shared dual block only enters through the per-row minimum of
    Lam_i h^w subject to Lam_i H^w = H_N,i, which is the support of W in
    direction H_N,i; the constant offsets are computed once. Rows that are
    redundant in the joint (x, u) space are dropped offline.
    """

    Gx: np.ndarray
    Gu: np.ndarray
    g: np.ndarray
    H2: np.ndarray
    A_bar: np.ndarray
    B_bar: np.ndarray
    P: np.ndarray
    P_N: np.ndarray

    @classmethod
    def build(cls, system: UncertainSystem, P_N: np.ndarray) -> "Case2Reduced":
        d = system.d
        HN, hN = system.XN.H, system.XN.h
        off = support_rows(system.W, HN)
        blocks = [np.hstack([HN @ A, HN @ B]) for A, B in system.vertex_pairs()]
        blocks.append(np.hstack([np.zeros((system.U.n_rows, d)), system.U.H]))
        H = np.vstack(blocks)
        h = np.concatenate([hN - off] * (system.n_a * system.n_b) + [system.U.h])
        joint = remove_redundant(HPolytope(H, h))
        Gx, Gu = joint.H[:, :d], joint.H[:, d:]
        H2 = 2.0 * (system.B_bar.T @ P_N @ system.B_bar + system.R)
        return cls(Gx, Gu, joint.h, 0.5 * (H2 + H2.T), system.A_bar, system.B_bar, system.P, P_N)

    def instance(self, x_t) -> QPInstance:
        x_t = np.asarray(x_t, dtype=float).reshape(-1)
        ax = self.A_bar @ x_t
        c = 2.0 * self.B_bar.T @ self.P_N @ ax
        const = float(x_t @ self.P @ x_t + ax @ self.P_N @ ax)
        m = self.Gu.shape[1]
        return QPInstance(self.H2, c, None, None, self.Gu, self.g - self.Gx @ x_t,
                          {"ubar": slice(0, m)}, const)


# --- controller ------------------------------------------------------------

@dataclass(eq=False)
class OfflineData:
    """Everything computed before the first online solve; shared read-only."""

    system: UncertainSystem
    terminal: TerminalIngredients
    bounds: dict
    stacks: dict
    case1: dict
    case2: Case2Reduced | None
    options: MPCOptions
    _memo: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def build(cls, system: UncertainSystem, K=None, terminal: TerminalIngredients | None = None,
              bounds: dict | None = None, options: MPCOptions | None = None,
              bounds_method: str = "exact", N_cut: int | None = None) -> "OfflineData":
        options = options or MPCOptions()
        if terminal is None:
            if K is None:
                raise ConfigError("need either a gain K or precomputed terminal ingredients")
            terminal = compute_terminal(system, K)
        sysN = system.with_terminal_set(terminal.XN)
        stacks = {Nt: build_stacks(sysN, Nt) for Nt in range(1, system.N + 1)}
        if bounds is None:
            bounds = {Nt: compute_bounds(sysN, stacks[Nt], bounds_method, N_cut if N_cut else Nt)
                      for Nt in range(2, system.N + 1)}
        missing = [Nt for Nt in range(2, system.N + 1) if Nt not in bounds]
        if missing:
            raise ConfigError(f"tightening bounds missing for Nt = {missing}")
        case1 = {Nt: build_case1(sysN, stacks[Nt], bounds[Nt], terminal.P_N, options)
                 for Nt in range(2, system.N + 1)}
        case2 = Case2Reduced.build(sysN, terminal.P_N) if options.reduce_case2 else None
        return cls(sysN, terminal, bounds, stacks, case1, case2, options)

    def instance(self, x_t, Nt: int) -> QPInstance:
        if Nt >= 2:
            return self.case1[Nt].instance(x_t)
        if self.case2 is not None:
            return self.case2.instance(x_t)
        return assemble_case2(x_t, self.system, self.terminal.P_N)

    def solve(self, x_t, Nt: int, t: int = 0) -> tuple[QPResult, AffinePolicy | None, float]:
        x_t = np.asarray(x_t, dtype=float).reshape(-1)
        key = (Nt, x_t.tobytes())
        if self.options.memoize:
            with self._lock:
                hit = self._memo.get(key)
            if hit is not None:
                res, pol, dt = hit
                return res, _reissue(pol, t), dt
        t0 = time.perf_counter()
        qp = self.instance(x_t, Nt)
        res = solve(qp, tol=self.options.tol, backend=self.options.backend, validate=False,
                    max_iter=self.options.max_iter)
        dt = time.perf_counter() - t0
        pol = None
        if res.optimal:
            pol = self._policy(res, qp, x_t, Nt, t)
        if self.options.memoize:
            with self._lock:
                self._memo[key] = (res, pol, dt)
        return res, pol, dt

    def _policy(self, res: QPResult, qp: QPInstance, x_t, Nt: int, t: int) -> AffinePolicy:
        d, m = self.system.d, self.system.m
        if Nt >= 2:
            return self.case1[Nt].policy(res.z, d, m, t)
        u = qp.var(res.z, "ubar").copy()
        xbar = np.concatenate([x_t, self.system.A_bar @ x_t + self.system.B_bar @ u])
        return AffinePolicy(1, np.zeros((m, d)), u, xbar, t)


def _reissue(pol: AffinePolicy | None, t: int) -> AffinePolicy | None:
    if pol is None:
        return None
    return AffinePolicy(pol.Nt, pol.M, pol.ubar, pol.xbar, t)


class RobustMPC:
    """Shrinking-horizon controller with the time-shifted backup policy.

    One instance per trajectory; the offline data may be shared.
    """

    def __init__(self, offline: OfflineData):
        self.offline = offline
        self.system = offline.system
        self.K = np.atleast_2d(offline.terminal.K)
        self.reset()

    @classmethod
    def build(cls, system: UncertainSystem, K, options: MPCOptions | None = None, **kw) -> "RobustMPC":
        return cls(OfflineData.build(system, K, options=options, **kw))

    def reset(self) -> None:
        self.history_x: list[np.ndarray] = []
        self.history_u: list[np.ndarray] = []
        self.last_policy: AffinePolicy | None = None
        self.t_f: int | None = None
        self.backup_uses = 0

    def _proxy(self, l: int) -> np.ndarray:
        """w~_l = x_{l+1} - A_bar x_l - B_bar u_l from measured data."""
        s = self.system
        return self.history_x[l + 1] - s.A_bar @ self.history_x[l] - s.B_bar @ self.history_u[l]

    def _backup_input(self, t: int, x_t) -> np.ndarray:
        pol = self.last_policy
        k = t - pol.issued_at
        if k >= pol.Nt:
            return self.K @ x_t
        w_hist = [self._proxy(pol.issued_at + l) for l in range(k)]
        return pol.input_at(k, w_hist)

    def step(self, x_t, t: int) -> StepResult:
        x_t = np.asarray(x_t, dtype=float).reshape(-1)
        if t != len(self.history_x):
            raise RangeError(f"expected step {len(self.history_x)}, got {t}")
        Nt = horizon_length(t, self.system.N)
        res, pol, dt = self.offline.solve(x_t, Nt, t)
        self.history_x.append(x_t)
        diag = {"status": res.status.value, "iterations": res.iterations, **res.residuals}
        if res.optimal:
            self.last_policy, self.t_f = pol, t
            u = pol.ubar[: self.system.m].copy()
            step = StepResult(t, x_t, u, pol, True, res.objective, Nt, dt, diag)
        else:
            if t == 0:
                raise InitializationError(f"the problem is not feasible at t = 0 ({res.status.value})")
            if self.last_policy is None:
                raise InvariantViolation("no stored feasible policy for the backup")
            if res.status is Status.MAX_ITER:
                log.warning("step %d: solver hit the iteration cap, using the backup policy", t)
            u = self._backup_input(t, x_t)
            self.backup_uses += 1
            step = StepResult(t, x_t, u, BackupRef(self.t_f), False, None, Nt, dt, diag)
        self.history_u.append(step.applied_u)
        return step


# --- output ------------------------------------------------------------------

def steps_to_rows(steps: list[StepResult]) -> list[dict]:
    return [
        {
            "t": s.t,
            "x": s.x.tolist(),
            "u": s.applied_u.tolist(),
            "feasible": s.feasible,
            "Nt": s.Nt_used,
            "objective": s.objective,
            "solve_time_ns": int(round(s.solve_time * 1e9)),
            "backup_from": s.policy.t_f if isinstance(s.policy, BackupRef) else None,
        }
        for s in steps
    ]


def write_steps_csv(steps: list[StepResult], path) -> None:
    rows = steps_to_rows(steps)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x", "u", "feasible", "Nt", "objective", "solve_time_ns"])
        for r in rows:
            wr.writerow([r["t"], " ".join(map(repr, r["x"])), " ".join(map(repr, r["u"])),
                         int(r["feasible"]), r["Nt"], "" if r["objective"] is None else repr(r["objective"]),
                         r["solve_time_ns"]])


def write_steps_json(steps: list[StepResult], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(steps_to_rows(steps), fh, indent=2)
