"""Uncertain linear system description and vertex bookkeeping."""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from rmpc.errors import ConfigError, DimensionError, RangeError
from rmpc.polytope import HPolytope, chebyshev


def _mat(a, name, shape=None) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if shape is not None and a.shape != shape:
        raise DimensionError(f"{name} has shape {a.shape}, expected {shape}")
    return a


def _is_pd(M: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass(eq=False)
class UncertainSystem:
    """x+ = (A_bar + dA) x + (B_bar + dB) u + w with dA, dB in vertex hulls, w in W."""

    A_bar: np.ndarray
    B_bar: np.ndarray
    deltaA_vertices: list
    deltaB_vertices: list
    W: HPolytope
    X: HPolytope
    U: HPolytope
    P: np.ndarray
    R: np.ndarray
    N: int
    XN: HPolytope | None = None
    _products: dict = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self):
        self.A_bar = _mat(self.A_bar, "A_bar")
        d = self.A_bar.shape[0]
        if self.A_bar.shape != (d, d):
            raise DimensionError("A_bar must be square")
        self.B_bar = _mat(self.B_bar, "B_bar")
        if self.B_bar.shape[0] != d:
            raise DimensionError("B_bar must have as many rows as A_bar")
        m = self.B_bar.shape[1]
        if len(self.deltaA_vertices) < 1 or len(self.deltaB_vertices) < 1:
            raise ConfigError("need at least one vertex for each uncertainty set")
        self.deltaA_vertices = [_mat(v, "deltaA vertex", (d, d)) for v in self.deltaA_vertices]
        self.deltaB_vertices = [_mat(v, "deltaB vertex", (d, m)) for v in self.deltaB_vertices]
        self.P = _mat(self.P, "P", (d, d))
        self.R = _mat(self.R, "R", (m, m))
        if not (_is_pd(self.P) and _is_pd(self.R)):
            raise ConfigError("stage cost weights P and R must be positive definite")
        for name, poly, dim in (("W", self.W, d), ("X", self.X, d), ("U", self.U, m)):
            if poly.dim != dim:
                raise DimensionError(f"{name} has dimension {poly.dim}, expected {dim}")
            if not np.all(poly.h > 0):
                raise ConfigError(f"{name} must contain the origin in its interior")
            if chebyshev(poly)[1] <= 0:
                raise ConfigError(f"{name} has an empty interior")
        if self.XN is not None and self.XN.dim != d:
            raise DimensionError("terminal set has the wrong dimension")
        if int(self.N) < 1:
            raise ConfigError("horizon N must be at least 1")
        self.N = int(self.N)

    @property
    def d(self) -> int:
        return self.A_bar.shape[0]

    @property
    def m(self) -> int:
        return self.B_bar.shape[1]

    @property
    def n_a(self) -> int:
        return len(self.deltaA_vertices)

    @property
    def n_b(self) -> int:
        return len(self.deltaB_vertices)

    def A_vertices(self) -> list[np.ndarray]:
        return [self.A_bar + D for D in self.deltaA_vertices]

    def B_vertices(self) -> list[np.ndarray]:
        return [self.B_bar + D for D in self.deltaB_vertices]

    def vertex_pairs(self):
        """All (A_m, B_m) vertex combinations, deltaA index varying slowest."""
        return [(A, B) for A in self.A_vertices() for B in self.B_vertices()]

    def with_terminal_set(self, XN: HPolytope) -> "UncertainSystem":
        return UncertainSystem(
            self.A_bar, self.B_bar, self.deltaA_vertices, self.deltaB_vertices,
            self.W, self.X, self.U, self.P, self.R, self.N, XN,
        )


@dataclass(eq=False)
class TrueRealization:
    """The actual model mismatch: constant matrices or one pair per time step."""

    deltaA_true: np.ndarray | list
    deltaB_true: np.ndarray | list

    def __post_init__(self):
        self.deltaA_true = np.asarray(self.deltaA_true, dtype=float)
        self.deltaB_true = np.asarray(self.deltaB_true, dtype=float)
        if (self.deltaA_true.ndim == 3) != (self.deltaB_true.ndim == 3):
            raise DimensionError("both deltas must be constant or both sequences")
        if self.time_varying and len(self.deltaA_true) != len(self.deltaB_true):
            raise DimensionError("deltaA and deltaB sequences differ in length")

    @property
    def time_varying(self) -> bool:
        return self.deltaA_true.ndim == 3

    def at(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        if not self.time_varying:
            return self.deltaA_true, self.deltaB_true
        k = min(t, len(self.deltaA_true) - 1)
        return self.deltaA_true[k], self.deltaB_true[k]

    def validate(self, system: UncertainSystem, tol: float = 1e-9) -> bool:
        """Every member lies in the vertex hulls."""
        As = self.deltaA_true if self.time_varying else [self.deltaA_true]
        Bs = self.deltaB_true if self.time_varying else [self.deltaB_true]
        return all(hull_membership(system.deltaA_vertices, a, tol) for a in As) and all(
            hull_membership(system.deltaB_vertices, b, tol) for b in Bs
        )

    @classmethod
    def nominal(cls, system: UncertainSystem) -> "TrueRealization":
        return cls(np.zeros((system.d, system.d)), np.zeros((system.d, system.m)))


def closed_vertex_products(system: UncertainSystem, n: int) -> list[np.ndarray]:
    """Ordered n-fold products of the vertices of {A_bar + dA}.

    These are the extreme points of the set of n-th powers of uncertain
    state matrices. Numerically identical products (1e-12) are merged.
    Results are memoised per system.
    """
    if n < 1 or n > max(system.N - 1, 1):
        raise RangeError(f"n must lie in [1, {max(system.N - 1, 1)}], got {n}")
    with system._lock:
        if n in system._products:
            return system._products[n]
    verts = system.A_vertices()
    if n == 1:
        prods = [v.copy() for v in verts]
    else:
        prev = closed_vertex_products(system, n - 1)
        prods = [p @ v for p in prev for v in verts]
    out: list[np.ndarray] = []
    for p in prods:
        if not any(np.max(np.abs(p - q)) <= 1e-12 for q in out):
            out.append(p)
    with system._lock:
        system._products[n] = out
    return out


def vertex_products_unbounded(A_vertices: list[np.ndarray], n: int) -> list[np.ndarray]:
    """Same as ``closed_vertex_products`` without the horizon range check."""
    out = [np.eye(A_vertices[0].shape[0])]
    for _ in range(n):
        new = []
        for p in out:
            for v in A_vertices:
                q = p @ v
                if not any(np.max(np.abs(q - r)) <= 1e-12 for r in new):
                    new.append(q)
        out = new
    return out


def hull_membership(vertices: list[np.ndarray], Q, tol: float = 1e-9) -> bool:
    """LP feasibility of lambda >= 0, sum(lambda) = 1, sum(lambda_i V_i) = Q (within tol)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    V = [np.atleast_2d(np.asarray(v, dtype=float)) for v in vertices]
    if any(v.shape != Q.shape for v in V):
        raise DimensionError("vertex matrices and Q must share a shape")
    k = len(V)
    Vmat = np.column_stack([v.reshape(-1) for v in V])
    q = Q.reshape(-1)
    # minimise the slack e with |V lambda - q| <= e
    nq = q.size
    c = np.zeros(k + 1)
    c[-1] = 1.0
    A_ub = np.vstack([
        np.hstack([Vmat, -np.ones((nq, 1))]),
        np.hstack([-Vmat, -np.ones((nq, 1))]),
    ])
    b_ub = np.concatenate([q, -q])
    A_eq = np.hstack([np.ones((1, k)), np.zeros((1, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0],
                  bounds=[(0, None)] * (k + 1), method="highs")
    return bool(res.status == 0 and res.fun <= tol)


def random_hull_point(vertices: list[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    lam = rng.dirichlet(np.ones(len(vertices)))
    return sum(l * v for l, v in zip(lam, vertices))


def example_system(N: int = 3) -> UncertainSystem:
    """Second-order example with off-diagonal model uncertainty and box constraints."""
    A_bar = np.array([[1.0, 0.15], [0.1, 1.0]])
    B_bar = np.array([[0.1], [1.1]])
    dA = [np.array([[0.0, a], [b, 0.0]]) for a, b in itertools.product((0.1, -0.1), repeat=2)]
    dB = [np.array([[0.0], [0.1]]), np.array([[0.0], [-0.1]]),
          np.array([[0.1], [0.0]]), np.array([[-0.1], [0.0]])]
    return UncertainSystem(
        A_bar=A_bar,
        B_bar=B_bar,
        deltaA_vertices=dA,
        deltaB_vertices=dB,
        W=HPolytope.inf_ball(0.1, 2),
        X=HPolytope.inf_ball(8.0, 2),
        U=HPolytope.inf_ball(4.0, 1),
        P=10.0 * np.eye(2),
        R=2.0 * np.eye(1),
        N=N,
    )


EXAMPLE_K = np.array([[-0.2978, -0.3366]])
EXAMPLE_TRUE_A = np.array([[1.0, 0.1], [0.0, 1.0]])
EXAMPLE_TRUE_B = np.array([[0.0], [1.0]])
