"""Dense convex QP solver.

Problem form::

    minimize    1/2 z^T Q z + c^T z
    subject to  Aeq z = beq,  Ain z <= bin

The reference backend is a primal-dual interior point method with Mehrotra
predictor-corrector steps on the reduced KKT system. Infeasibility is only
reported together with a Farkas certificate (y, lam >= 0) satisfying
Aeq^T y + Ain^T lam = 0 and beq^T y + bin^T lam < 0.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, lu_factor, lu_solve
from scipy.optimize import linprog

from rmpc.errors import BadProblemError, DimensionError

log = logging.getLogger(__name__)


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass(eq=False)
class QPInstance:
    Q: np.ndarray
    c: np.ndarray
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    Ain: np.ndarray | None = None
    bin: np.ndarray | None = None
    names: dict = field(default_factory=dict)
    const: float = 0.0

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        if self.Q.shape != (n, n):
            raise DimensionError(f"Q has shape {self.Q.shape}, expected ({n}, {n})")
        self.Aeq, self.beq = self._block(self.Aeq, self.beq, n, "equality")
        self.Ain, self.bin = self._block(self.Ain, self.bin, n, "inequality")

    @staticmethod
    def _block(M, v, n, what):
        if M is None:
            return np.zeros((0, n)), np.zeros(0)
        M = np.asarray(M, dtype=float).reshape(-1, n)
        v = np.asarray(v, dtype=float).reshape(-1)
        if M.shape[0] != v.size:
            raise DimensionError(f"{what} block has {M.shape[0]} rows but {v.size} offsets")
        return M, v

    @property
    def n(self) -> int:
        return self.c.size

    def validate(self, sym_tol: float = 1e-12, psd_tol: float = 1e-10) -> None:
        if np.max(np.abs(self.Q - self.Q.T), initial=0.0) > sym_tol * max(1.0, np.abs(self.Q).max(initial=0.0)):
            raise BadProblemError("Q is not symmetric")
        if self.n and np.linalg.eigvalsh(self.Q).min() < -psd_tol * max(1.0, np.abs(self.Q).max()):
            raise BadProblemError("Q is not positive semidefinite")
        for arr in (self.Q, self.c, self.Aeq, self.beq, self.Ain, self.bin):
            if not np.all(np.isfinite(arr)):
                raise BadProblemError("problem data contains non-finite entries")

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.Q @ z + self.c @ z + self.const)

    def var(self, z, name):
        """Slice of ``z`` registered under ``name``."""
        return np.asarray(z)[self.names[name]]


@dataclass(eq=False)
class QPResult:
    status: Status
    z: np.ndarray | None
    objective: float | None
    y: np.ndarray | None = None
    lam: np.ndarray | None = None
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    certificate: tuple | None = None

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


@dataclass(frozen=True)
class IPMSettings:
    tol: float = 1e-8
    max_iter: int = 60
    reg: float = 1e-11
    step_frac: float = 0.99


def _normalised_ray(qp: QPInstance, y, lam, tol):
    """(y, lam) scaled to unit max-norm if it is a Farkas certificate, else None."""
    scale = max(np.abs(y).max(initial=0.0), np.abs(lam).max(initial=0.0))
    if scale <= 0 or np.any(lam < 0):
        return None
    y, lam = y / scale, lam / scale
    gap = qp.beq @ y + qp.bin @ lam
    ray = qp.Aeq.T @ y + qp.Ain.T @ lam
    if gap < -tol and np.abs(ray).max(initial=0.0) <= 1e-3 * -gap:
        return y, lam
    return None


def farkas_certificate(qp: QPInstance, tol: float = 1e-8):
    """Search a normalised infeasibility certificate by LP; returns (y, lam) or None."""
    ne, ni = qp.Aeq.shape[0], qp.Ain.shape[0]
    if ni == 0 and ne == 0:
        return None
    cost = np.concatenate([qp.beq, qp.bin])
    A = np.hstack([qp.Aeq.T, qp.Ain.T])
    res = linprog(cost, A_eq=A, b_eq=np.zeros(qp.n),
                  bounds=[(-1, 1)] * ne + [(0, 1)] * ni, method="highs")
    if res.status != 0 or res.fun >= -tol:
        return None
    y, lam = res.x[:ne], np.maximum(res.x[ne:], 0.0)
    if np.abs(A @ np.concatenate([y, lam])).max(initial=0.0) > 1e-9:
        return None
    return y, lam


def solve_ipm(qp: QPInstance, settings: IPMSettings = IPMSettings()) -> QPResult:
    """Mehrotra predictor-corrector on the reduced KKT system."""
    Q, c, A, b, G, h = qp.Q, qp.c, qp.Aeq, qp.beq, qp.Ain, qp.bin
    n, ne, ni = qp.n, A.shape[0], G.shape[0]
    tol = settings.tol
    reg = settings.reg
    kkt = np.zeros((n + ne, n + ne))
    kkt[:n, n:] = A.T
    kkt[n:, :n] = A
    kkt[n:, n:] = -reg * np.eye(ne)
    eye_n = reg * np.eye(n)

    def factor(D):
        kkt[:n, :n] = Q + (G.T * D) @ G + eye_n
        return lu_factor(kkt, check_finite=False)

    # initial point: least-squares fit with unit scaling of the inequalities
    try:
        F = factor(np.ones(ni))
    except (LinAlgError, ValueError):
        return QPResult(Status.MAX_ITER, None, None)
    sol = lu_solve(F, np.concatenate([-c + G.T @ h, b]), check_finite=False)
    z = sol[:n]
    y = sol[n:]
    s = h - G @ z
    if ni:
        shift = max(0.0, -s.min()) + 1.0
        s = s + shift
        lam = np.ones(ni)
    else:
        lam = np.zeros(0)
    nb, nh, nc = 1.0 + np.abs(b).max(initial=0.0), 1.0 + np.abs(h).max(initial=0.0), 1.0 + np.abs(c).max(initial=0.0)

    def residuals(z, y, lam, s):
        rd = Q @ z + c + A.T @ y + G.T @ lam
        rp = A @ z - b
        rg = G @ z + s - h
        return rd, rp, rg

    it = 0
    res_info = {}
    for it in range(1, settings.max_iter + 1):
        rd, rp, rg = residuals(z, y, lam, s)
        mu = float(lam @ s) / ni if ni else 0.0
        res_info = {
            "dual": float(np.abs(rd).max(initial=0.0)) / nc,
            "primal": max(float(np.abs(rp).max(initial=0.0)) / nb, float(np.abs(rg).max(initial=0.0)) / nh),
            "gap": float(lam @ s),
        }
        # total complementarity, so the objective is accurate to about tol
        if res_info["dual"] <= tol and res_info["primal"] <= tol and res_info["gap"] <= tol:
            return QPResult(Status.OPTIMAL, z, qp.objective(z), y, lam, it, res_info)
        if ni and it > 5 and lam.max() > 1e6 * max(1.0, np.abs(z).max(initial=0.0)):
            cert = _normalised_ray(qp, y, lam, tol) or farkas_certificate(qp, tol)
            if cert is not None:
                return QPResult(Status.INFEASIBLE, None, None, iterations=it, residuals=res_info,
                                certificate=cert)
        D = lam / s
        try:
            F = factor(D)
        except (LinAlgError, ValueError):
            break

        def direction(rc):
            rhs = np.concatenate([-rd - G.T @ ((-rc + lam * rg) / s), -rp])
            d = lu_solve(F, rhs, check_finite=False)
            dz, dy = d[:n], d[n:]
            ds = -rg - G @ dz
            dl = (-rc - lam * ds) / s
            return dz, dy, dl, ds

        def max_step(v, dv):
            neg = dv < 0
            if not neg.any():
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        # predictor
        dz, dy, dl, ds = direction(lam * s)
        if ni:
            a_aff = min(max_step(lam, dl), max_step(s, ds))
            mu_aff = float((lam + a_aff * dl) @ (s + a_aff * ds)) / ni
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # corrector
            dz, dy, dl, ds = direction(lam * s + dl * ds - sigma * mu)
            alpha = settings.step_frac * min(max_step(lam, dl), max_step(s, ds))
            alpha = min(alpha, 1.0)
        else:
            alpha = 1.0
        z = z + alpha * dz
        y = y + alpha * dy
        lam = lam + alpha * dl
        s = s + alpha * ds
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(lam))):
            break
    cert = farkas_certificate(qp, tol)
    if cert is not None:
        return QPResult(Status.INFEASIBLE, None, None, iterations=it, residuals=res_info, certificate=cert)
    log.warning("QP solver stopped after %d iterations without a certificate", it)
    ok = np.all(np.isfinite(z))
    return QPResult(Status.MAX_ITER, z if ok else None, qp.objective(z) if ok else None,
                    y, lam, it, res_info)


def _solve_cvxopt(qp: QPInstance, settings: IPMSettings = IPMSettings()) -> QPResult:
    import cvxopt
    from cvxopt import solvers

    opts = {"show_progress": False, "abstol": settings.tol, "reltol": settings.tol,
            "feastol": settings.tol, "maxiters": settings.max_iter}
    args = [cvxopt.matrix(qp.Q), cvxopt.matrix(qp.c)]
    if qp.Ain.shape[0]:
        args += [cvxopt.matrix(qp.Ain), cvxopt.matrix(qp.bin)]
    else:
        args += [None, None]
    if qp.Aeq.shape[0]:
        args += [cvxopt.matrix(qp.Aeq), cvxopt.matrix(qp.beq)]
    sol = solvers.qp(*args, options=opts)
    if sol["status"] == "optimal":
        z = np.array(sol["x"]).reshape(-1)
        y = np.array(sol["y"]).reshape(-1) if sol["y"] is not None else None
        lam = np.array(sol["z"]).reshape(-1) if sol["z"] is not None else None
        return QPResult(Status.OPTIMAL, z, qp.objective(z), y, lam, int(sol["iterations"]))
    if sol["status"] == "primal infeasible":
        cert = farkas_certificate(qp, settings.tol)
        if cert is not None:
            return QPResult(Status.INFEASIBLE, None, None, certificate=cert)
    return QPResult(Status.MAX_ITER, None, None, iterations=int(sol["iterations"]))


_BACKENDS: dict[str, Callable[..., QPResult]] = {"ipm": solve_ipm, "cvxopt": _solve_cvxopt}


def register_backend(name: str, fn: Callable[..., QPResult]) -> None:
    _BACKENDS[name] = fn


def backends() -> list[str]:
    return sorted(_BACKENDS)


def solve(qp: QPInstance, tol: float = 1e-8, backend: str = "ipm", validate: bool = True,
          max_iter: int = 60) -> QPResult:
    if validate:
        qp.validate()
    try:
        fn = _BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown QP backend {backend!r}; have {backends()}") from None
    return fn(qp, IPMSettings(tol=tol, max_iter=max_iter))


def _lp_terms(coefs, names, eps=0.0):
    parts = []
    for a, v in zip(coefs, names):
        if abs(a) > eps:
            parts.append(f"{'+' if a >= 0 else '-'} {abs(a):.17g} {v}")
    return " ".join(parts) if parts else "0 " + names[0]


def write_lp(qp: QPInstance, path) -> None:
    """Dump the instance in CPLEX LP format (free variables, quadratic objective)."""
    names = [f"z{i}" for i in range(qp.n)]
    lines = ["\\ dense QP instance", "Minimize", " obj: " + _lp_terms(qp.c, names)]
    quad = []
    for i in range(qp.n):
        for j in range(i, qp.n):
            q = qp.Q[i, j] if i == j else qp.Q[i, j] + qp.Q[j, i]
            if q != 0.0:
                term = f"{names[i]} ^ 2" if i == j else f"{names[i]} * {names[j]}"
                quad.append(f"{'+' if q >= 0 else '-'} {abs(q):.17g} {term}")
    if quad:
        lines.append("  + [ " + " ".join(quad) + " ] / 2")
    lines.append("Subject To")
    for k, (row, rhs) in enumerate(zip(qp.Aeq, qp.beq)):
        lines.append(f" e{k}: {_lp_terms(row, names)} = {rhs:.17g}")
    for k, (row, rhs) in enumerate(zip(qp.Ain, qp.bin)):
        lines.append(f" i{k}: {_lp_terms(row, names)} <= {rhs:.17g}")
    lines.append("Bounds")
    lines += [f" {v} free" for v in names]
    lines.append("End")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
