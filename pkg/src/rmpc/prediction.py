"""Stacked prediction and constraint matrices for a horizon of length Nt.

Stacked vectors follow the usual ordering: the nominal state stack holds
x_{t|t} .. x_{t+Nt-1|t}, the predicted state stack x_{t+1|t} .. x_{t+Nt|t}, and
input/disturbance stacks hold steps t .. t+Nt-1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from rmpc.errors import ConfigError, DimensionError, RangeError
from rmpc.model import TrueRealization, UncertainSystem


def shift_matrix(Nt: int, n: int, d: int) -> np.ndarray:
    """Block shift: (S y)_k = y_{k-n}, zero for k < n."""
    return np.kron(np.eye(Nt, k=-n), np.eye(d))


def toeplitz_powers(A: np.ndarray, Nt: int) -> np.ndarray:
    """Lower block-triangular matrix with block (i, j) = A^(i-j) for i >= j."""
    d = A.shape[0]
    out = np.zeros((d * Nt, d * Nt))
    powers = [np.eye(d)]
    for _ in range(1, Nt):
        powers.append(powers[-1] @ A)
    for i in range(Nt):
        for j in range(i + 1):
            out[i * d:(i + 1) * d, j * d:(j + 1) * d] = powers[i - j]
    return out


@dataclass(frozen=True, eq=False)
class HorizonStacks:
    Nt: int
    d: int
    m: int
    Abar_stack: np.ndarray
    Bbar_stack: np.ndarray
    A1_bar: np.ndarray
    Av_blocks: list
    Fx: np.ndarray
    fx: np.ndarray
    Hu_stack: np.ndarray
    hu_stack: np.ndarray
    Hw_stack: np.ndarray
    hw_stack: np.ndarray
    r: int
    r_N: int

    @property
    def n_rows(self) -> int:
        return self.Fx.shape[0]

    def row_block(self, i: int) -> int:
        """Prediction step (0-based block of the predicted state stack) of row i."""
        return min(i // self.r, self.Nt - 1) if self.Nt > 1 else 0


def build_stacks(system: UncertainSystem, Nt: int) -> HorizonStacks:
    if system.XN is None:
        raise ConfigError("the terminal set must be computed before building stacks")
    if Nt < 1 or Nt > system.N:
        raise RangeError(f"Nt must lie in [1, {system.N}], got {Nt}")
    d, m = system.d, system.m
    Hx, hx = system.X.H, system.X.h
    HN, hN = system.XN.H, system.XN.h
    I = np.eye(Nt)
    Fx = block_diag(*([Hx] * (Nt - 1) + [HN]))
    fx = np.concatenate([hx] * (Nt - 1) + [hN])
    return HorizonStacks(
        Nt=Nt,
        d=d,
        m=m,
        Abar_stack=np.kron(I, system.A_bar),
        Bbar_stack=np.kron(I, system.B_bar),
        A1_bar=toeplitz_powers(system.A_bar, Nt),
        Av_blocks=[shift_matrix(Nt, n, d) for n in range(1, Nt)],
        Fx=Fx,
        fx=fx,
        Hu_stack=np.kron(I, system.U.H),
        hu_stack=np.tile(system.U.h, Nt),
        Hw_stack=np.kron(I, system.W.H),
        hw_stack=np.tile(system.W.h, Nt),
        r=Hx.shape[0],
        r_N=HN.shape[0],
    )


def prediction_matrices(stacks: HorizonStacks, A_bar, B_bar, dA, dB):
    """A^x, A^u, A^du, A^w for a constant realization (dA, dB)."""
    Nt, d, m = stacks.Nt, stacks.d, stacks.m
    AD = A_bar + dA
    BD = B_bar + dB
    pw = [np.eye(d)]
    for _ in range(Nt):
        pw.append(pw[-1] @ AD)
    Ax = np.zeros((d * Nt, d * Nt))
    Au = np.zeros((d * Nt, m * Nt))
    Adu = np.zeros((d * Nt, m * Nt))
    Aw = np.zeros((d * Nt, d * Nt))
    for i in range(Nt):
        ri = slice(i * d, (i + 1) * d)
        Ax[ri, i * d:(i + 1) * d] = AD
        Au[ri, i * m:(i + 1) * m] = BD
        Aw[ri, i * d:(i + 1) * d] = np.eye(d)
        for j in range(i):
            Ax[ri, j * d:(j + 1) * d] = pw[i - j] @ dA
            Au[ri, j * m:(j + 1) * m] = pw[i - j] @ dB
            Adu[ri, j * m:(j + 1) * m] = pw[i - j] @ B_bar
            Aw[ri, j * d:(j + 1) * d] = pw[i - j]
    return Ax, Au, Adu, Aw


def stacked_powers(stacks: HorizonStacks, mats: list[np.ndarray]) -> np.ndarray:
    """Vertical stack of I_Nt kron mats[n-1] for n = 1 .. Nt-1."""
    I = np.eye(stacks.Nt)
    return np.vstack([np.kron(I, M) for M in mats])


def A_delta(stacks: HorizonStacks, A_bar, dA) -> np.ndarray:
    """Uncertainty-dependent part of the disturbance propagation matrix."""
    if stacks.Nt == 1:
        return np.zeros((stacks.d, stacks.d))
    AD = A_bar + dA
    diffs = [np.linalg.matrix_power(AD, n) - np.linalg.matrix_power(A_bar, n)
             for n in range(1, stacks.Nt)]
    return np.hstack(stacks.Av_blocks) @ stacked_powers(stacks, diffs)


def uncertain_rollout(stacks: HorizonStacks, system: UncertainSystem,
                      realization: TrueRealization, xbar, u_seq, du_seq, w_seq,
                      t0: int = 0) -> np.ndarray:
    """Predicted state stack x_{t+1} .. x_{t+Nt} from the stacked model.

    ``u_seq`` is the total input sequence (nominal plus feedback part ``du_seq``)
    and ``xbar`` the nominal state stack consistent with the nominal inputs.
    A time-varying realization is frozen at step ``t0`` over the horizon.
    """
    Nt, d, m = stacks.Nt, stacks.d, stacks.m
    xbar = np.asarray(xbar, dtype=float).reshape(-1)
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1)
    du_seq = np.asarray(du_seq, dtype=float).reshape(-1)
    w_seq = np.asarray(w_seq, dtype=float).reshape(-1)
    if xbar.size != d * Nt or w_seq.size != d * Nt or u_seq.size != m * Nt or du_seq.size != m * Nt:
        raise DimensionError("sequence lengths must match the horizon")
    dA, dB = realization.at(t0)
    Ax, Au, Adu, Aw = prediction_matrices(stacks, system.A_bar, system.B_bar, dA, dB)
    return Ax @ xbar + Au @ u_seq + Adu @ du_seq + Aw @ w_seq


def nominal_rollout(system: UncertainSystem, x0, ubar) -> np.ndarray:
    """x_bar_0 .. x_bar_Nt for the nominal model, shape (Nt+1, d)."""
    ubar = np.asarray(ubar, dtype=float).reshape(-1, system.m)
    xs = [np.asarray(x0, dtype=float).reshape(-1)]
    for u in ubar:
        xs.append(system.A_bar @ xs[-1] + system.B_bar @ u)
    return np.array(xs)
