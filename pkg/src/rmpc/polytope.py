"""Halfspace-representation polytopes {x : Hx <= h}.

Everything here is LP based (scipy's HiGHS). Vertex enumeration through qhull
is only used as a fast path inside ``remove_redundant`` and by the samplers
and the 2-D plotting helpers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError

from rmpc.errors import DimensionError, EmptySetError, UnboundedError

DEFAULT_TOL = 1e-9


def _linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=(None, None)):
    return linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")


@dataclass(frozen=True, eq=False)
class HPolytope:
    """Convex polyhedron ``{x : H x <= h}``.

    Parameters
    ----------
    H : array_like, shape (r, d)
        Facet normals, one per row. Rows must be nonzero.
    h : array_like, shape (r,)
        Facet offsets.
    """

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if H.ndim != 2:
            raise DimensionError("H must be a matrix")
        if H.shape[0] != h.shape[0]:
            raise DimensionError(f"H has {H.shape[0]} rows but h has {h.shape[0]} entries")
        if H.shape[0] and np.any(np.all(H == 0.0, axis=1)):
            raise DimensionError("every row of H must be nonzero")
        H.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_rows(self) -> int:
        return self.H.shape[0]

    # constructors ---------------------------------------------------------
    @classmethod
    def box(cls, lb, ub) -> "HPolytope":
        lb = np.asarray(lb, dtype=float).reshape(-1)
        ub = np.asarray(ub, dtype=float).reshape(-1)
        if lb.shape != ub.shape:
            raise DimensionError("lb and ub must have the same length")
        eye = np.eye(lb.size)
        return cls(np.vstack([eye, -eye]), np.concatenate([ub, -lb]))

    @classmethod
    def inf_ball(cls, radius: float, dim: int) -> "HPolytope":
        return cls.box(-radius * np.ones(dim), radius * np.ones(dim))

    # convenience wrappers ---------------------------------------------------
    def contains(self, x, tol: float = 0.0) -> bool:
        return contains(self, x, tol)

    def support(self, d) -> float:
        return support(self, d)

    def __and__(self, other: "HPolytope") -> "HPolytope":
        return intersect(self, other)

    def to_dict(self) -> dict:
        return {"H": self.H.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "HPolytope":
        return cls(np.asarray(data["H"], dtype=float), np.asarray(data["h"], dtype=float))

    def __repr__(self) -> str:
        return f"HPolytope(dim={self.dim}, rows={self.n_rows})"


def contains(poly: HPolytope, x, tol: float = 0.0) -> bool:
    """True iff ``H x <= h + tol`` elementwise."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != poly.dim:
        raise DimensionError(f"point has dimension {x.shape[0]}, polytope has {poly.dim}")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return bool(np.all(poly.H @ x <= poly.h + tol))


def contains_many(poly: HPolytope, X, tol: float = 0.0) -> np.ndarray:
    """Vectorised membership for the rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != poly.dim:
        raise DimensionError("points have the wrong dimension")
    return np.all(X @ poly.H.T <= poly.h + tol, axis=1)


def support(poly: HPolytope, d) -> float:
    """max d^T x over the polytope, by LP."""
    d = np.asarray(d, dtype=float).reshape(-1)
    if d.shape[0] != poly.dim:
        raise DimensionError("direction has the wrong dimension")
    res = _linprog(-d, A_ub=poly.H, b_ub=poly.h)
    if res.status == 2:
        raise EmptySetError("support of an empty polytope")
    if res.status == 3:
        raise UnboundedError(f"polytope is unbounded in direction {d}")
    if res.status != 0:
        raise RuntimeError(f"LP failed: {res.message}")
    return float(-res.fun)


def support_rows(poly: HPolytope, D) -> np.ndarray:
    """Support values for every row of ``D``."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    return np.array([support(poly, d) for d in D])


def normalize(poly: HPolytope) -> HPolytope:
    """Scale rows to unit 2-norm (same set)."""
    norms = np.linalg.norm(poly.H, axis=1)
    return HPolytope(poly.H / norms[:, None], poly.h / norms)


def chebyshev(poly: HPolytope) -> tuple[np.ndarray, float]:
    """Chebyshev centre and radius (radius capped at 1e6; negative if empty)."""
    P = normalize(poly)
    d = poly.dim
    c = np.zeros(d + 1)
    c[-1] = -1.0
    A = np.hstack([P.H, np.ones((P.n_rows, 1))])
    res = _linprog(c, A_ub=A, b_ub=P.h, bounds=[(None, None)] * d + [(None, 1e6)])
    if res.status != 0:
        raise RuntimeError(f"Chebyshev LP failed: {res.message}")
    return res.x[:d], float(res.x[-1])


def is_empty(poly: HPolytope, tol: float = DEFAULT_TOL) -> bool:
    """Empty iff no point satisfies every (unit-normalised) row within ``tol``."""
    _, radius = chebyshev(poly)
    return radius < -tol


def _dedupe(P: HPolytope, decimals: int = 12) -> HPolytope:
    """Merge rows with identical normals (normalised input), keeping the tightest."""
    keys = np.round(P.H, decimals)
    order = np.lexsort(np.vstack([P.h, keys.T[::-1]]))
    keep = []
    last = None
    for i in order:
        k = keys[i].tobytes()
        if k != last:
            keep.append(i)
            last = k
    keep = np.sort(np.array(keep, dtype=int))
    return HPolytope(P.H[keep], P.h[keep])


def _irredundant_lp(H, h, tol, candidates=None) -> np.ndarray:
    """Sequential LP elimination; returns a boolean keep-mask."""
    keep = np.ones(len(h), dtype=bool)
    idx = range(len(h)) if candidates is None else candidates
    for i in idx:
        keep[i] = False
        res = _linprog(-H[i], A_ub=H[keep], b_ub=h[keep])
        if res.status == 3 or (res.status == 0 and -res.fun > h[i] + tol):
            keep[i] = True
        elif res.status not in (0, 3):
            keep[i] = True
    return keep


def _qhull_candidates(P: HPolytope, center: np.ndarray) -> np.ndarray | None:
    """Rows whose dual points are hull vertices, or None if qhull is not usable."""
    slack = P.h - P.H @ center
    if np.any(slack <= 0):
        return None
    dual = P.H / slack[:, None]
    try:
        hull = ConvexHull(dual)
    except (QhullError, ValueError):
        return None
    # bounded iff the origin is strictly inside the dual hull
    if np.any(hull.equations[:, -1] >= -1e-12):
        return None
    return np.unique(hull.vertices)


def remove_redundant(poly: HPolytope, tol: float = DEFAULT_TOL) -> HPolytope:
    """Drop rows that do not shape the set.

    A row i is kept iff max H_i x subject to the other kept rows exceeds
    h_i + tol. Rows are returned scaled to unit 2-norm.
    """
    P = _dedupe(normalize(poly))
    if P.n_rows == 0:
        return P
    center, radius = chebyshev(P)
    if radius < -tol:
        raise EmptySetError("cannot remove redundancy from an empty polytope")
    H, h = P.H, P.h
    cand = None
    if radius > 1e-7 and P.dim >= 2 and P.n_rows > P.dim + 1:
        cand = _qhull_candidates(P, center)
    if cand is not None:
        mask = np.zeros(len(h), dtype=bool)
        mask[cand] = True
        # every dropped row must hold at the vertices of the candidate set
        for _ in range(len(h)):
            try:
                verts = HalfspaceIntersection(
                    np.hstack([H[mask], -h[mask][:, None]]), center
                ).intersections
            except (QhullError, ValueError):
                mask[:] = True
                break
            viol = np.any(verts @ H.T > h + tol, axis=0) & ~mask
            if not viol.any():
                break
            mask |= viol
        sub = np.flatnonzero(mask)
        keep_sub = _irredundant_lp(H[sub], h[sub], tol)
        keep = sub[keep_sub]
    else:
        keep = np.flatnonzero(_irredundant_lp(H, h, tol))
    return HPolytope(H[keep], h[keep])


def intersect(a: HPolytope, b: HPolytope, tol: float = DEFAULT_TOL) -> HPolytope:
    if a.dim != b.dim:
        raise DimensionError(f"cannot intersect dimensions {a.dim} and {b.dim}")
    return remove_redundant(HPolytope(np.vstack([a.H, b.H]), np.concatenate([a.h, b.h])), tol)


def contains_set(outer: HPolytope, inner: HPolytope, tol: float = DEFAULT_TOL) -> bool:
    """True iff inner is a subset of outer (support test on outer's rows)."""
    for Hi, hi in zip(outer.H, outer.h):
        try:
            if support(inner, Hi) > hi + tol * max(1.0, np.linalg.norm(Hi)):
                return False
        except UnboundedError:
            return False
    return True


def vertices(poly: HPolytope) -> np.ndarray:
    """Vertices of a bounded full-dimensional polytope (qhull)."""
    center, radius = chebyshev(poly)
    if radius <= 0:
        raise EmptySetError("vertex enumeration needs a nonempty interior")
    P = normalize(poly)
    hs = HalfspaceIntersection(np.hstack([P.H, -P.h[:, None]]), center)
    pts = hs.intersections
    # qhull reports one point per simplicial facet; merge repeats
    out = []
    for p in pts:
        if not any(np.allclose(p, q, atol=1e-9) for q in out):
            out.append(p)
    out = np.array(out)
    if poly.dim == 2:
        out = order_2d(out)
    return out


def order_2d(points: np.ndarray) -> np.ndarray:
    """Sort 2-D points counter-clockwise about their centroid."""
    c = points.mean(axis=0)
    ang = np.arctan2(points[:, 1] - c[1], points[:, 0] - c[0])
    return points[np.argsort(ang)]


def bounding_box(poly: HPolytope) -> tuple[np.ndarray, np.ndarray]:
    eye = np.eye(poly.dim)
    ub = np.array([support(poly, e) for e in eye])
    lb = -np.array([support(poly, -e) for e in eye])
    return lb, ub


def sample_uniform(poly: HPolytope, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampling from the bounding box."""
    lb, ub = bounding_box(poly)
    out = []
    while sum(len(o) for o in out) < n:
        X = rng.uniform(lb, ub, size=(max(2 * n, 16), poly.dim))
        out.append(X[contains_many(poly, X)])
    return np.vstack(out)[:n]
