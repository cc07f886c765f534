"""Inner approximation of the region of attraction.

Along each unit direction v the initial state is restricted to the line
spanned by v and pushed as far as possible in direction -v while the full
horizon problem stays feasible. The convex hull of the extreme points is an
inner approximation because the feasible set of initial states is convex.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space

from rmpc.errors import DegenerateHullError, DimensionError
from rmpc.mpc import OfflineData, assemble_case2
from rmpc.polytope import HPolytope, vertices
from rmpc.qp import QPInstance, solve

log = logging.getLogger(__name__)


def _directional_lp(offline: OfflineData, v: np.ndarray) -> tuple[QPInstance, slice]:
    system = offline.system
    d, N = system.d, system.N
    if N >= 2:
        base = offline.case1[N].instance(np.zeros(d))
        # the first d equality rows pin x_0; replace them by the line constraint
        Aeq, beq = base.Aeq[d:], base.beq[d:]
    else:
        base = assemble_case2(np.zeros(d), system, offline.terminal.P_N)
        Aeq, beq = base.Aeq[d:], base.beq[d:]
    x0 = slice(base.names["xbar"].start, base.names["xbar"].start + d)
    n = base.n
    Bp = null_space(v.reshape(1, -1))
    line = np.zeros((Bp.shape[1], n))
    line[:, x0] = Bp.T
    box = np.zeros((system.X.n_rows, n))
    box[:, x0] = system.X.H
    c = np.zeros(n)
    c[x0] = v
    qp = QPInstance(np.zeros((n, n)), c, np.vstack([Aeq, line]), np.concatenate([beq, np.zeros(len(line))]),
                    np.vstack([base.Ain, box]), np.concatenate([base.bin, system.X.h]), base.names)
    return qp, x0


def roa_point(offline: OfflineData, v, tol: float = 1e-8) -> np.ndarray | None:
    """Minimiser of v^T x_0 over feasible initial states on the line through v."""
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != offline.system.d:
        raise DimensionError("direction has the wrong dimension")
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValueError("direction must have unit 2-norm")
    qp, x0 = _directional_lp(offline, v)
    res = solve(qp, tol=tol, validate=False, max_iter=100)
    if not res.optimal:
        if res.status.value == "max_iter":
            log.warning("direction %s: solver hit the iteration cap", v)
        return None
    return res.z[x0].copy()


def hull_2d(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise, no repeated end point."""
    pts = sorted(set(map(tuple, np.round(np.asarray(points, dtype=float), 12))))
    if len(pts) < 3:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def shoelace(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def in_hull_2d(hull: np.ndarray, p, tol: float = 1e-9) -> bool:
    """Point membership for a counter-clockwise 2-D hull."""
    p = np.asarray(p, dtype=float)
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) < -tol:
            return False
    return True


@dataclass(eq=False)
class ROAResult:
    directions: np.ndarray
    points: list
    hull: np.ndarray
    volume: float | None = None
    extra: dict = field(default_factory=dict)

    def feasible_points(self) -> np.ndarray:
        return np.array([p for p in self.points if p is not None])

    def to_dict(self) -> dict:
        return {
            "directions": self.directions.tolist(),
            "points": [None if p is None else p.tolist() for p in self.points],
            "hull": self.hull.tolist(),
            "volume": self.volume,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ROAResult":
        return cls(
            np.asarray(data["directions"], dtype=float),
            [None if p is None else np.asarray(p, dtype=float) for p in data["points"]],
            np.asarray(data["hull"], dtype=float),
            data.get("volume"),
        )


def directions_2d(n_dirs: int) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(n_dirs) / n_dirs
    return np.column_stack([np.cos(ang), np.sin(ang)])


def approximate_roa(offline: OfflineData, n_dirs: int = 36, directions=None) -> ROAResult:
    d = offline.system.d
    if directions is None:
        if d != 2:
            raise DimensionError("pass explicit directions when the state is not 2-D")
        if n_dirs < 3:
            raise ValueError("need at least 3 directions in 2-D")
        directions = directions_2d(n_dirs)
    directions = np.asarray(directions, dtype=float)
    points = [roa_point(offline, v) for v in directions]
    feas = np.array([p for p in points if p is not None])
    if d == 2:
        if len(feas) < 3:
            raise DegenerateHullError("fewer than 3 feasible extreme points")
        hull = hull_2d(feas)
        if len(hull) < 3:
            raise DegenerateHullError("extreme points are collinear")
        return ROAResult(directions, points, hull, shoelace(hull))
    return ROAResult(directions, points, feas, None)


def write_csv(result: ROAResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"x{i}" for i in range(result.hull.shape[1])])
        for p in result.hull:
            wr.writerow([repr(float(a)) for a in p])


def write_json(result: ROAResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)


def write_svg(result: ROAResult, path, X: HPolytope, XN: HPolytope, size: int = 480) -> None:
    """Plain SVG 1.1: X (grey), X_N (blue) and the approximate ROA (red)."""
    polys = [("#999999", vertices(X)), ("#1f5fbf", vertices(XN)), ("#c0392b", result.hull)]
    allpts = np.vstack([p for _, p in polys])
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    pad = 20.0
    scale = (size - 2 * pad) / span

    def fmt(p):
        x = pad + (p[0] - lo[0]) * scale
        y = size - pad - (p[1] - lo[1]) * scale
        return f"{x:.3f},{y:.3f}"

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}">',
    ]
    for color, pts in polys:
        pts_s = " ".join(fmt(p) for p in pts)
        parts.append(f'<polygon points="{pts_s}" fill="none" stroke="{color}" stroke-width="2"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
