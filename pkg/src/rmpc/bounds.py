"""Offline per-row tightening bounds.

Norm convention: infinity norm for vectors and induced matrix norms, so the
dual norm of a row vector is its 1-norm. Each bound is a per-row maximum of
a convex function over a product of vertex sets and is therefore evaluated
by enumerating vertices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb

import numpy as np

from rmpc.errors import RangeError
from rmpc.model import TrueRealization, UncertainSystem, closed_vertex_products
from rmpc.polytope import sample_uniform, support, vertices
from rmpc.prediction import HorizonStacks, nominal_rollout, uncertain_rollout

BOUND_FIELDS = ("t0", "t1", "t2", "t3", "tw", "tdA", "tdB")


def induced_inf_norm(M: np.ndarray) -> float:
    return float(np.max(np.sum(np.abs(np.atleast_2d(M)), axis=1)))


def w_max(system: UncertainSystem) -> float:
    """Infinity-norm radius of the disturbance set."""
    eye = np.eye(system.d)
    return max(max(support(system.W, e), support(system.W, -e)) for e in eye)


@dataclass(eq=False)
class TighteningBounds:
    Nt: int
    t0: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray
    tw: np.ndarray
    tdA: np.ndarray
    tdB: np.ndarray
    w_max: float
    method: str = "exact"
    N_cut: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def td1(self) -> np.ndarray:
        return self.tdA + self.t1

    @property
    def td2(self) -> np.ndarray:
        return self.tdB + self.t2

    @property
    def td3(self) -> np.ndarray:
        return self.tdB + self.t2 + self.t3

    def scaled(self, factor: float) -> "TighteningBounds":
        """Copy with every bound multiplied by ``factor`` (checker self-tests)."""
        return TighteningBounds(
            self.Nt, *(factor * getattr(self, f) for f in BOUND_FIELDS),
            w_max=self.w_max, method=self.method, N_cut=self.N_cut,
        )

    def to_dict(self) -> dict:
        out = {"Nt": self.Nt, "method": self.method, "N_cut": self.N_cut, "w_max": self.w_max}
        for f in BOUND_FIELDS:
            out[f] = getattr(self, f).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TighteningBounds":
        return cls(
            Nt=int(data["Nt"]),
            **{f: np.asarray(data[f], dtype=float) for f in BOUND_FIELDS},
            w_max=float(data["w_max"]),
            method=data["method"],
            N_cut=data.get("N_cut"),
        )


def _max_l1_over_combos(groups: list[np.ndarray], chunk: int = 4096) -> np.ndarray:
    """Per row, max over one choice per group of the 1-norm of the summed rows.

    Each group has shape (n_choices, n_rows, width). Rows are independent, so
    the result does not depend on the order of the reduction.
    """

    def rec(acc, k):
        if k == len(groups):
            return np.max(np.sum(np.abs(acc), axis=2), axis=0)
        g = groups[k]
        if acc.shape[0] * g.shape[0] <= chunk:
            return rec((acc[:, None] + g[None]).reshape(-1, *acc.shape[1:]), k + 1)
        return np.max([rec(a[None] + g, k + 1) for a in acc], axis=0)

    return rec(groups[0], 1)


def _power_groups(system: UncertainSystem, stacks: HorizonStacks, ns, subtract_nominal: bool):
    I = np.eye(stacks.Nt)
    groups = []
    for n in ns:
        FAv = stacks.Fx @ stacks.Av_blocks[n - 1]
        shift = np.linalg.matrix_power(system.A_bar, n) if subtract_nominal else 0.0
        groups.append(np.stack([FAv @ np.kron(I, V - shift) for V in closed_vertex_products(system, n)]))
    return groups


def _scale_bounds(system, stacks, t0, tw, tdA, tdB, method, N_cut):
    a_norm = max(induced_inf_norm(D) for D in system.deltaA_vertices)
    b_norm = max(induced_inf_norm(D) for D in system.deltaB_vertices)
    return TighteningBounds(
        Nt=stacks.Nt,
        t0=t0,
        t1=t0 * a_norm,
        t2=t0 * b_norm,
        t3=t0 * induced_inf_norm(system.B_bar),
        tw=tw,
        tdA=tdA,
        tdB=tdB,
        w_max=w_max(system),
        method=method,
        N_cut=N_cut,
    )


def bounds_delta(system: UncertainSystem, stacks: HorizonStacks) -> tuple[np.ndarray, np.ndarray]:
    """Per-row worst case of the first-order mismatch terms over the vertex sets."""
    I = np.eye(stacks.Nt)
    FA1 = stacks.Fx @ stacks.A1_bar
    tdA = np.max([np.sum(np.abs(FA1 @ np.kron(I, D)), axis=1) for D in system.deltaA_vertices], axis=0)
    tdB = np.max([np.sum(np.abs(FA1 @ np.kron(I, D)), axis=1) for D in system.deltaB_vertices], axis=0)
    return tdA, tdB


def bounds_exact(system: UncertainSystem, stacks: HorizonStacks) -> TighteningBounds:
    """Full vertex enumeration over every power 1 .. Nt-1."""
    if stacks.Nt < 2:
        raise RangeError("bounds are only defined for Nt >= 2")
    ns = range(1, stacks.Nt)
    t0 = _max_l1_over_combos(_power_groups(system, stacks, ns, True))
    tw = _max_l1_over_combos(_power_groups(system, stacks, ns, False))
    tdA, tdB = bounds_delta(system, stacks)
    return _scale_bounds(system, stacks, t0, tw, tdA, tdB, "exact", None)


def bounds_efficient(system: UncertainSystem, stacks: HorizonStacks, N_cut: int) -> TighteningBounds:
    """Vertex enumeration for powers below ``N_cut``, binomial norm bounds above."""
    Nt = stacks.Nt
    if Nt < 2:
        raise RangeError("bounds are only defined for Nt >= 2")
    if not 2 <= N_cut <= Nt:
        raise RangeError(f"N_cut must lie in [2, {Nt}], got {N_cut}")
    head = range(1, N_cut)
    t0 = _max_l1_over_combos(_power_groups(system, stacks, head, True))
    tw = _max_l1_over_combos(_power_groups(system, stacks, head, False))
    a_bar = induced_inf_norm(system.A_bar)
    delta = max(induced_inf_norm(D) for D in system.deltaA_vertices)
    for n in range(N_cut, Nt):
        row_norm = np.sum(np.abs(stacks.Fx @ stacks.Av_blocks[n - 1]), axis=1)
        binom = sum(comb(n, k) * a_bar ** (n - k) * delta ** k for k in range(1, n + 1))
        t0 = t0 + row_norm * binom
        tw = tw + row_norm * (induced_inf_norm(np.linalg.matrix_power(system.A_bar, n)) + binom)
    tdA, tdB = bounds_delta(system, stacks)
    return _scale_bounds(system, stacks, t0, tw, tdA, tdB, "efficient", N_cut)


def compute_bounds(system: UncertainSystem, stacks: HorizonStacks, method: str = "exact",
                   N_cut: int | None = None) -> TighteningBounds:
    if method == "exact":
        return bounds_exact(system, stacks)
    if method == "efficient":
        return bounds_efficient(system, stacks, N_cut if N_cut is not None else 2)
    raise ValueError(f"unknown bounds method {method!r}")


def save_bounds(table: dict[int, TighteningBounds], path) -> None:
    payload = {"norm": "inf", "bounds": {str(k): v.to_dict() for k, v in sorted(table.items())}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_bounds(path) -> dict[int, TighteningBounds]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return {int(k): TighteningBounds.from_dict(v) for k, v in payload["bounds"].items()}


@dataclass
class SoundnessReport:
    samples: int
    violations: int
    violations_tightened: int
    max_excess: float
    max_excess_tightened: float
    min_slack: float

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.violations_tightened == 0


def soundness_check(bounds: TighteningBounds, system: UncertainSystem, stacks: HorizonStacks,
                    samples: int = 1000, seed: int = 0, tol: float = 1e-9,
                    state_scale: float = 1.0) -> SoundnessReport:
    """Monte-Carlo check that the bound surrogate dominates the true row values.

    For random vertex (or hull) realizations, nominal trajectories, feedback
    perturbations and disturbance sequences, the true predicted constraint row
    must not exceed (a) the surrogate that keeps the realization-dependent
    first-order terms and (b) the fully tightened surrogate that replaces them
    by their per-row worst case.
    """
    rng = np.random.default_rng(seed)
    Nt, d, m = stacks.Nt, stacks.d, stacks.m
    F = stacks.Fx
    Abar, Bbar = stacks.Abar_stack, stacks.Bbar_stack
    A1 = stacks.A1_bar
    I = np.eye(Nt)
    Id = np.eye(d * Nt)
    lo_x = -np.array([support(system.X, -e) for e in np.eye(d)])
    hi_x = np.array([support(system.X, e) for e in np.eye(d)])
    lo_u = -np.array([support(system.U, -e) for e in np.eye(m)])
    hi_u = np.array([support(system.U, e) for e in np.eye(m)])
    w_verts = vertices(system.W) if d <= 6 else None
    n_viol = n_viol_t = 0
    max_ex = max_ex_t = -np.inf
    min_slack = np.inf
    for s in range(samples):
        if s % 4 == 3:
            lam_a = rng.dirichlet(np.ones(system.n_a))
            lam_b = rng.dirichlet(np.ones(system.n_b))
            dA = sum(l * D for l, D in zip(lam_a, system.deltaA_vertices))
            dB = sum(l * D for l, D in zip(lam_b, system.deltaB_vertices))
        else:
            dA = system.deltaA_vertices[rng.integers(system.n_a)]
            dB = system.deltaB_vertices[rng.integers(system.n_b)]
        x0 = state_scale * rng.uniform(lo_x, hi_x)
        ubar = rng.uniform(lo_u, hi_u, size=(Nt, m))
        xbar = nominal_rollout(system, x0, ubar)[:-1].reshape(-1)
        du = 0.5 * rng.uniform(lo_u, hi_u, size=(Nt, m)).reshape(-1)
        if w_verts is not None and s % 2 == 0:
            w = w_verts[rng.integers(len(w_verts), size=Nt)].reshape(-1)
        else:
            w = sample_uniform(system.W, Nt, rng).reshape(-1)
        u = ubar.reshape(-1) + du
        x = uncertain_rollout(stacks, system, TrueRealization(dA, dB), xbar, u, du, w)
        lhs = F @ x
        base = F @ (Abar @ xbar + Bbar @ u + (A1 - Id) @ Bbar @ du + w)
        nx, nu = np.max(np.abs(xbar)), np.max(np.abs(u))
        ndu, nw = np.max(np.abs(du)), np.max(np.abs(w))
        common = bounds.t1 * nx + bounds.t2 * nu + bounds.t3 * ndu + bounds.tw * nw
        first_order = F @ A1 @ (np.kron(I, dA) @ xbar + np.kron(I, dB) @ u)
        surrogate = base + first_order + common
        tightened = base + bounds.tdA * nx + bounds.tdB * nu + common
        ex = lhs - surrogate
        ex_t = lhs - tightened
        n_viol += int(np.any(ex > tol))
        n_viol_t += int(np.any(ex_t > tol))
        max_ex = max(max_ex, float(ex.max()))
        max_ex_t = max(max_ex_t, float(ex_t.max()))
        min_slack = min(min_slack, float((-ex).min()))
    return SoundnessReport(samples, n_viol, n_viol_t, max_ex, max_ex_t, min_slack)
