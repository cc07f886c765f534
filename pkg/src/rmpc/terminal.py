"""Terminal ingredients: robust stability check of K, maximal robust positive
invariant set under u = Kx, and the terminal cost matrix."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from rmpc.errors import EmptySetError, NonConvergenceError, StabilityError
from rmpc.model import UncertainSystem
from rmpc.polytope import HPolytope, contains_set, remove_redundant, support_rows

log = logging.getLogger(__name__)


@dataclass(eq=False)
class TerminalIngredients:
    K: np.ndarray
    XN: HPolytope
    P_N: np.ndarray
    lyap_P: np.ndarray | None
    iterations: int

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "XN": self.XN.to_dict(),
            "P_N": self.P_N.tolist(),
            "lyap_P": None if self.lyap_P is None else self.lyap_P.tolist(),
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TerminalIngredients":
        return cls(
            K=np.asarray(data["K"], dtype=float),
            XN=HPolytope.from_dict(data["XN"]),
            P_N=np.asarray(data["P_N"], dtype=float),
            lyap_P=None if data.get("lyap_P") is None else np.asarray(data["lyap_P"], dtype=float),
            iterations=int(data["iterations"]),
        )


def closed_loop_vertices(system: UncertainSystem, K: np.ndarray) -> list[np.ndarray]:
    K = np.atleast_2d(K)
    return [A + B @ K for A, B in system.vertex_pairs()]


def _lyap_margin(P: np.ndarray, mats: list[np.ndarray]) -> float:
    """Largest eigenvalue of A^T P A - P over the vertex matrices."""
    return max(np.linalg.eigvalsh(A.T @ P @ A - P).max() for A in mats)


def _candidates(mats, Acl, Q, sweeps):
    yield solve_discrete_lyapunov(Acl.T, Q)
    for A in mats:
        yield solve_discrete_lyapunov(A.T, Q)
    # averaged vertex update, renormalised to keep the scale fixed
    P = solve_discrete_lyapunov(Acl.T, Q)
    for _ in range(sweeps):
        P_next = sum(A.T @ P @ A for A in mats) / len(mats) + Q
        P = P_next / np.linalg.norm(P_next) * np.linalg.norm(P)
        yield P


def check_robust_stability(system: UncertainSystem, K, sweeps: int = 100):
    """Search a common quadratic Lyapunov certificate for all closed-loop vertices.

    Candidates are the nominal discrete Lyapunov solution, the Lyapunov
    solution of each vertex, and up to ``sweeps`` averaged vertex updates.
    Returns (certified, P).
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    mats = closed_loop_vertices(system, K)
    Acl = system.A_bar + system.B_bar @ K
    if any(np.max(np.abs(np.linalg.eigvals(A))) >= 1.0 for A in mats + [Acl]):
        return False, None
    Q = np.eye(system.d)
    for P in _candidates(mats, Acl, Q, sweeps):
        P = 0.5 * (P + P.T)
        if np.linalg.eigvalsh(P).min() > 0 and _lyap_margin(P, mats) < 0:
            return True, P
    return False, None


def _nontrivial(H: np.ndarray, h: np.ndarray) -> HPolytope:
    """Polytope from (H, h) after dropping all-zero rows, which hold trivially or never."""
    zero = np.abs(H).max(axis=1) <= 1e-14
    if np.any(h[zero] < 0):
        raise EmptySetError("a constant constraint 0 <= h has h < 0")
    return HPolytope(H[~zero], h[~zero])


def robust_pre(target: HPolytope, mats: list[np.ndarray], W: HPolytope) -> HPolytope:
    """States mapped into ``target`` by every vertex matrix for every w in W."""
    shrink = target.h - support_rows(W, target.H)
    H = np.vstack([target.H @ A for A in mats])
    h = np.tile(shrink, len(mats))
    return _nontrivial(H, h)


def max_rpi(system: UncertainSystem, K, max_iter: int = 100, tol: float = 1e-8):
    """Fixed-point iteration for the maximal robust positive invariant set.

    Omega_0 is the state constraint set intersected with {x : K x in U}; each
    step intersects with the robust one-step pre-image under every vertex of
    the closed-loop matrix set. Returns (set, iterations), where iterations
    counts every pre-image step including the one that confirms the fixed
    point, so an already invariant Omega_0 reports 1.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    mats = closed_loop_vertices(system, K)
    omega = remove_redundant(_nontrivial(np.vstack([system.X.H, system.U.H @ K]),
                                         np.concatenate([system.X.h, system.U.h])))
    for it in range(max_iter):
        pre = robust_pre(omega, mats, system.W)
        nxt = remove_redundant(
            HPolytope(np.vstack([omega.H, pre.H]), np.concatenate([omega.h, pre.h])),
        )
        # nxt is a subset of omega by construction, so one inclusion suffices
        if contains_set(nxt, omega, tol):
            log.info("maximal RPI set converged after %d iterations", it + 1)
            return nxt, it + 1
        omega = nxt
    raise NonConvergenceError(f"no fixed point after {max_iter} iterations")


def terminal_cost(system: UncertainSystem, K) -> np.ndarray:
    """Solve A_cl^T P_N A_cl - P_N = -(P + K^T R K) for the nominal closed loop."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Acl = system.A_bar + system.B_bar @ K
    if np.max(np.abs(np.linalg.eigvals(Acl))) >= 1.0:
        raise StabilityError("nominal closed loop A_bar + B_bar K is not Schur stable")
    Q = system.P + K.T @ system.R @ K
    PN = solve_discrete_lyapunov(Acl.T, Q)
    return 0.5 * (PN + PN.T)


def compute_terminal(system: UncertainSystem, K, max_iter: int = 100) -> TerminalIngredients:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    ok, lyapP = check_robust_stability(system, K)
    if not ok:
        raise StabilityError("K does not robustly stabilise the vertex closed loops")
    XN, iters = max_rpi(system, K, max_iter=max_iter)
    return TerminalIngredients(K=K, XN=XN, P_N=terminal_cost(system, K), lyap_P=lyapP, iterations=iters)
