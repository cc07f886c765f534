import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmpc.errors import ConfigError, RangeError
from rmpc.model import TrueRealization, random_hull_point
from rmpc.prediction import (A_delta, build_stacks, nominal_rollout, prediction_matrices, shift_matrix,
                             toeplitz_powers, uncertain_rollout)


def test_shift_and_toeplitz():
    S = shift_matrix(3, 1, 2)
    y = np.arange(6.0)
    assert np.array_equal(S @ y, [0, 0, 0, 1, 2, 3])
    A = np.array([[1.0, 0.15], [0.1, 1.0]])
    T = toeplitz_powers(A, 3)
    assert np.allclose(T[4:6, 0:2], A @ A) and np.allclose(T[0:2, 2:4], 0)


def test_stack_shapes(exN):
    st3 = build_stacks(exN, 3)
    r, rN = exN.X.n_rows, exN.XN.n_rows
    assert st3.Fx.shape == (2 * r + rN, 6)
    assert st3.row_block(0) == 0 and st3.row_block(2 * r) == 2
    assert len(st3.Av_blocks) == 2


def test_stack_errors(ex, exN):
    with pytest.raises(ConfigError):
        build_stacks(ex, 2)
    with pytest.raises(RangeError):
        build_stacks(exN, 4)


@given(seed=st.integers(0, 2**31 - 1), Nt=st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_stacked_prediction_matches_recursion(exN, seed, Nt):
    rng = np.random.default_rng(seed)
    s = exN
    stacks = build_stacks(s, Nt)
    dA = random_hull_point(s.deltaA_vertices, rng)
    dB = random_hull_point(s.deltaB_vertices, rng)
    x0 = rng.uniform(-8, 8, 2)
    ubar = rng.uniform(-4, 4, (Nt, 1))
    du = rng.uniform(-1, 1, (Nt, 1))
    w = rng.uniform(-0.1, 0.1, (Nt, 2))
    xbar = nominal_rollout(s, x0, ubar)[:-1].reshape(-1)
    u = (ubar + du).reshape(-1)
    pred = uncertain_rollout(stacks, s, TrueRealization(dA, dB), xbar, u, du.reshape(-1), w.reshape(-1))
    x = x0.copy()
    ref = []
    for k in range(Nt):
        x = (s.A_bar + dA) @ x + (s.B_bar + dB) @ u[k:k + 1] + w[k]
        ref.append(x)
    assert np.allclose(pred, np.concatenate(ref), atol=1e-10)


def test_A_delta_is_disturbance_gap(exN):
    stacks = build_stacks(exN, 3)
    dA = exN.deltaA_vertices[1]
    _, _, _, Aw = prediction_matrices(stacks, exN.A_bar, exN.B_bar, dA, np.zeros((2, 1)))
    assert np.allclose(A_delta(stacks, exN.A_bar, dA), Aw - stacks.A1_bar)
