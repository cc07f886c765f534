import itertools

import numpy as np
import pytest

from rmpc.model import EXAMPLE_K, UncertainSystem, example_system
from rmpc.mpc import MPCOptions, OfflineData
from rmpc.polytope import HPolytope
from rmpc.terminal import compute_terminal


def nominal_system(N=3, w=1e-9, A=None, B=None, X=8.0, U=4.0):
    """Certain double-integrator-like system with a negligible disturbance."""
    A = np.array([[1.0, 0.15], [0.1, 1.0]]) if A is None else A
    B = np.array([[0.1], [1.1]]) if B is None else B
    return UncertainSystem(
        A_bar=A, B_bar=B,
        deltaA_vertices=[np.zeros((2, 2))], deltaB_vertices=[np.zeros((2, 1))],
        W=HPolytope.inf_ball(w, 2), X=HPolytope.inf_ball(X, 2), U=HPolytope.inf_ball(U, 1),
        P=10 * np.eye(2), R=2 * np.eye(1), N=N,
    )


@pytest.fixture(scope="session")
def ex():
    return example_system()


@pytest.fixture(scope="session")
def terminal(ex):
    return compute_terminal(ex, EXAMPLE_K)


@pytest.fixture(scope="session")
def exN(ex, terminal):
    return ex.with_terminal_set(terminal.XN)


@pytest.fixture(scope="session")
def offline(ex, terminal):
    return OfflineData.build(ex, terminal=terminal)


@pytest.fixture(scope="session")
def offline_bound_terms(ex, terminal):
    return OfflineData.build(ex, terminal=terminal, options=MPCOptions(exact_vertex_terms=False))


def w_box_vertex_sequences(Nt, d, r):
    """All 2^(d Nt) extreme disturbance sequences of an infinity ball of radius r."""
    return np.array(list(itertools.product((-r, r), repeat=d * Nt)))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
