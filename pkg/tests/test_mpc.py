import numpy as np
import pytest
from scipy.optimize import linprog

from conftest import nominal_system, w_box_vertex_sequences
from rmpc.errors import InitializationError, RangeError
from rmpc.model import EXAMPLE_K, TrueRealization
from rmpc.mpc import (AffinePolicy, BackupRef, MPCOptions, OfflineData, RobustMPC, assemble_case2,
                      horizon_length, worst_case_disturbance, write_steps_csv, write_steps_json)
from rmpc.polytope import contains_many, sample_uniform, vertices
from rmpc.prediction import uncertain_rollout
from rmpc.qp import QPInstance, QPResult, Status, solve
from rmpc.terminal import compute_terminal


def test_horizon_length():
    assert [horizon_length(t, 3) for t in (0, 1, 2, 7)] == [3, 2, 1, 1]
    with pytest.raises(RangeError):
        horizon_length(-1, 3)


@pytest.fixture(scope="module")
def nominal_offline():
    s = nominal_system()
    return OfflineData.build(s, K=EXAMPLE_K)


def nominal_mpc_oracle(system, P_N, x_t, Nt):
    """Plain nominal MPC in the inputs alone, built from the prediction matrices."""
    d, m = system.d, system.m
    Phi = np.vstack([np.linalg.matrix_power(system.A_bar, k) for k in range(Nt + 1)])
    Gam = np.zeros(((Nt + 1) * d, Nt * m))
    for k in range(1, Nt + 1):
        for j in range(k):
            Gam[k * d:(k + 1) * d, j * m:(j + 1) * m] = np.linalg.matrix_power(system.A_bar, k - 1 - j) @ system.B_bar
    Wx = np.kron(np.eye(Nt + 1), system.P)
    Wx[-d:, -d:] = P_N
    Wu = np.kron(np.eye(Nt), system.R)
    Q = 2 * (Gam.T @ Wx @ Gam + Wu)
    c = 2 * Gam.T @ Wx @ Phi @ x_t
    const = x_t @ Phi.T @ Wx @ Phi @ x_t
    G, g = [], []
    for k in range(1, Nt + 1):
        poly = system.XN if k == Nt else system.X
        G.append(poly.H @ Gam[k * d:(k + 1) * d])
        g.append(poly.h - poly.H @ Phi[k * d:(k + 1) * d] @ x_t)
    G.append(np.kron(np.eye(Nt), system.U.H))
    g.append(np.tile(system.U.h, Nt))
    res = solve(QPInstance(0.5 * (Q + Q.T), c, Ain=np.vstack(G), bin=np.concatenate(g), const=float(const)))
    return res


@pytest.mark.parametrize("x", [(2.0, -1.0), (-4.0, 3.0), (6.0, -6.0)])
def test_matches_nominal_mpc(nominal_offline, x):
    x = np.array(x)
    ref = nominal_mpc_oracle(nominal_offline.system, nominal_offline.terminal.P_N, x, 3)
    res, pol, _ = nominal_offline.solve(x, 3)
    assert ref.optimal and res.optimal
    assert res.objective == pytest.approx(ref.objective, abs=1e-8, rel=1e-9)
    assert np.allclose(pol.ubar, ref.z, atol=1e-5)


def test_origin_case1(offline):
    res, pol, _ = offline.solve(np.zeros(2), 2)
    assert res.optimal and abs(res.objective) <= 1e-8
    assert np.abs(pol.ubar).max() <= 1e-6


def test_policy_structure(offline):
    x = np.array([3.0, -3.0])
    res, pol, _ = offline.solve(x, 3)
    assert res.optimal
    d, m = 2, 1
    for k in range(3):
        for l in range(k, 3):
            assert not pol.M[k * m:(k + 1) * m, l * d:(l + 1) * d].any()
    xb = pol.xbar.reshape(4, 2)
    for k in range(3):
        assert np.allclose(xb[k + 1], offline.system.A_bar @ xb[k] + offline.system.B_bar @ pol.ubar[k:k + 1],
                           atol=1e-8)
    assert np.allclose(xb[0], x, atol=1e-8)


def enumerated_disturbance_terms(system, stacks, M):
    """max over extreme disturbance sequences of F (I + A1 B M) w, matrices built here."""
    Nt, d = stacks.Nt, stacks.d
    A1 = np.zeros((d * Nt, d * Nt))
    for k in range(Nt):
        for l in range(k + 1):
            A1[k * d:(k + 1) * d, l * d:(l + 1) * d] = np.linalg.matrix_power(system.A_bar, k - l)
    G = stacks.Fx @ (np.eye(d * Nt) + A1 @ np.kron(np.eye(Nt), system.B_bar) @ M)
    return (G @ w_box_vertex_sequences(Nt, d, 0.1).T).max(axis=1)


def rollout_disturbance_terms(system, stacks, M):
    """max over extreme disturbance sequences of F (x(w) - x(0)) from an explicit rollout."""
    Nt, d = stacks.Nt, stacks.d
    zero = TrueRealization.nominal(system)
    best = np.full(stacks.n_rows, -np.inf)
    for w in w_box_vertex_sequences(Nt, d, 0.1):
        du = M @ w
        x = uncertain_rollout(stacks, system, zero, np.zeros(d * Nt), du, du, w)
        best = np.maximum(best, stacks.Fx @ x)
    return best


@pytest.mark.parametrize("form", ["dual", "vertex"])
def test_dualisation_oracle_fixed_M(offline, form):
    st = offline.stacks[2]
    b = offline.bounds[2]
    rng = np.random.default_rng(5)
    for _ in range(20):
        M = np.zeros((2, 4))
        M[1, :2] = rng.uniform(-1, 1, 2)
        got = worst_case_disturbance(offline.system, st, M, form)
        ref = enumerated_disturbance_terms(offline.system, st, M)
        assert np.abs(got - ref).max() <= 1e-8
        # with the propagation bound the rows cover the true rollout
        assert np.all(got + b.tw * b.w_max >= rollout_disturbance_terms(offline.system, st, M) - 1e-9)


def enumeration_feasible(system, x):
    """Nt = 1 feasibility by enumerating every vertex pair and disturbance vertex."""
    HN, hN = system.XN.H, system.XN.h
    Wv = vertices(system.W)
    A_ub, b_ub = [], []
    for A, B in system.vertex_pairs():
        for w in Wv:
            A_ub.append(HN @ B)
            b_ub.append(hN - HN @ (A @ x + w))
    A_ub.append(system.U.H)
    b_ub.append(system.U.h)
    res = linprog(np.zeros(system.m), A_ub=np.vstack(A_ub), b_ub=np.concatenate(b_ub),
                  bounds=[(None, None)] * system.m, method="highs")
    return res.status == 0


def test_case2_exactness(offline):
    rng = np.random.default_rng(0)
    xs = np.vstack([rng.uniform(-8, 8, (100, 2)), rng.uniform(-3, 3, (100, 2))])
    agree = 0
    n_feas = 0
    for x in xs:
        ref = enumeration_feasible(offline.system, x)
        red = offline.solve(x, 1)[0].optimal
        full = solve(assemble_case2(x, offline.system, offline.terminal.P_N)).optimal
        agree += (ref == red == full)
        n_feas += ref
    assert agree == len(xs)
    assert 0 < n_feas < len(xs)


def test_case2_reduced_matches_dual(offline):
    rng = np.random.default_rng(1)
    for x in sample_uniform(offline.system.XN, 20, rng):
        a = offline.solve(x, 1)[0]
        b = solve(assemble_case2(x, offline.system, offline.terminal.P_N))
        assert a.optimal and b.optimal
        assert a.objective == pytest.approx(b.objective, abs=1e-7)


def _successors_ok(system, x, u):
    W = vertices(system.W)
    nxt = np.array([A @ x + B @ u + w for A, B in system.vertex_pairs() for w in W])
    return contains_many(system.XN, nxt, tol=1e-7).all()


def test_case2_vertex_successors(offline):
    for x in vertices(offline.system.XN):
        res, pol, _ = offline.solve(x, 1)
        assert res.optimal
        assert _successors_ok(offline.system, x, pol.ubar)


def test_successors_inside_terminal_set(offline):
    rng = np.random.default_rng(2)
    for x in sample_uniform(offline.system.XN, 50, rng):
        res, pol, _ = offline.solve(x, 1)
        assert res.optimal and _successors_ok(offline.system, x, pol.ubar)


def test_far_state_infeasible(offline):
    x = np.array([8.0, 8.0])
    assert not enumeration_feasible(offline.system, x)
    res, _, _ = offline.solve(x, 1)
    assert res.status is Status.INFEASIBLE


def test_case2_candidate_Kx(nominal_offline):
    off = nominal_offline
    K = np.atleast_2d(off.terminal.K)
    for x in [np.array([0.5, -0.5]), np.array([-1.0, 0.2])]:
        res, pol, _ = off.solve(x, 1)
        u = K @ x
        xn = off.system.A_bar @ x + off.system.B_bar @ u
        forced = x @ off.system.P @ x + u @ off.system.R @ u + xn @ off.terminal.P_N @ xn
        assert res.optimal and res.objective <= forced + 1e-9


def test_vertex_terms_superset(offline, offline_bound_terms):
    """Every point feasible with bound terms is feasible with explicit vertex terms."""
    rng = np.random.default_rng(4)
    sk_b, sk_v = offline_bound_terms.case1[3], offline.case1[3]
    assert sk_b.Ain.shape[1] == sk_v.Ain.shape[1]
    sols = []
    for x in rng.uniform(-4, 4, (200, 2)):
        res, _, _ = offline_bound_terms.solve(x, 3)
        if res.optimal:
            sols.append(res.z)
    assert len(sols) >= 50
    cands = sols + [0.5 * (a + b) for a, b in zip(sols[::2], sols[1::2])]
    for z in cands:
        assert np.all(sk_b.Ain @ z <= sk_b.bin + 1e-7)
        assert np.all(sk_v.Ain @ z <= sk_v.bin + 1e-7)


def test_vertex_terms_no_effect_without_uncertainty(nominal_offline):
    s = nominal_offline.system
    other = OfflineData.build(s, terminal=nominal_offline.terminal,
                              options=MPCOptions(exact_vertex_terms=False))
    for x in ([3.0, -2.0], [-5.0, 5.0]):
        a, b = nominal_offline.solve(np.array(x), 3)[0], other.solve(np.array(x), 3)[0]
        assert a.optimal == b.optimal
        if a.optimal:
            assert a.objective == pytest.approx(b.objective, abs=1e-7)


def test_single_vertex_equals_substitution():
    """With one vertex pair the explicit vertex rows carry exactly F A1 (I kron D) on the states."""
    D = np.array([[0.05, 0.0], [0.0, -0.05]])
    s0, s1 = nominal_system(), nominal_system()
    s1.deltaA_vertices[0] = D
    term = compute_terminal(s0, EXAMPLE_K)
    sk0 = OfflineData.build(s0, terminal=term).case1[3]
    sk1 = OfflineData.build(s1, terminal=term).case1[3]
    assert sk0.Ain.shape == sk1.Ain.shape
    xs = sk1.names["xbar"]
    cols = np.arange(xs.start, xs.start + 6)
    diff = sk1.Ain[:, cols] - sk0.Ain[:, cols]
    changed = diff[np.abs(diff).max(axis=1) > 0]
    st = OfflineData.build(s1, terminal=term).stacks[3]
    expected = st.Fx @ st.A1_bar @ np.kron(np.eye(3), D)
    expected = expected[np.abs(expected).max(axis=1) > 0]
    assert changed.shape == expected.shape
    assert np.allclose(np.sort(changed, axis=0), np.sort(expected, axis=0), atol=1e-14)


@pytest.mark.parametrize("Nt", [2, 3])
def test_dual_and_vertex_forms_agree(ex, terminal, offline, Nt):
    dual = OfflineData.build(ex, terminal=terminal, bounds=offline.bounds, options=MPCOptions(robust_form="dual"))
    for x in ([3.0, -3.0], [-2.0, 5.0], [0.5, 0.5]):
        a, b = dual.solve(np.array(x), Nt)[0], offline.solve(np.array(x), Nt)[0]
        assert a.optimal == b.optimal
        if a.optimal:
            assert a.objective == pytest.approx(b.objective, abs=1e-6, rel=1e-8)


def test_origin_step(offline):
    ctl = RobustMPC(offline)
    st = ctl.step(np.zeros(2), 0)
    assert st.feasible and np.abs(st.applied_u).max() <= 1e-8 and st.Nt_used == 3


def test_infeasible_start(offline):
    with pytest.raises(InitializationError):
        RobustMPC(offline).step(np.array([8.0, 8.0]), 0)


def test_step_order(offline):
    ctl = RobustMPC(offline)
    with pytest.raises(RangeError):
        ctl.step(np.zeros(2), 1)


def test_forced_infeasible_backup(ex, terminal, offline, monkeypatch):
    off = OfflineData.build(ex, terminal=terminal, bounds=offline.bounds)
    ctl = RobustMPC(off)
    x0 = np.array([3.0, -3.0])
    s0 = ctl.step(x0, 0)
    pol = s0.policy
    assert isinstance(pol, AffinePolicy)
    w = np.array([0.1, -0.1])
    x1 = (ex.A_bar + ex.deltaA_vertices[0]) @ x0 + (ex.B_bar + ex.deltaB_vertices[2]) @ s0.applied_u + w
    real = off.solve

    def fake(x, Nt, t=0):
        if t >= 1:
            return QPResult(Status.INFEASIBLE, None, None), None, 0.0
        return real(x, Nt, t)

    monkeypatch.setattr(off, "solve", fake)
    s1 = ctl.step(x1, 1)
    assert not s1.feasible and s1.policy == BackupRef(0)
    wt = x1 - ex.A_bar @ x0 - ex.B_bar @ s0.applied_u
    expected = pol.ubar[1:2] + pol.M[1:2, 0:2] @ wt
    assert np.allclose(s1.applied_u, expected, atol=1e-12)
    assert ctl.backup_uses == 1
    # past the stored horizon the backup falls back to the terminal gain
    x2 = ex.A_bar @ x1 + ex.B_bar @ s1.applied_u
    s2 = ctl.step(x2, 2)
    x3 = ex.A_bar @ x2 + ex.B_bar @ s2.applied_u
    s3 = ctl.step(x3, 3)
    assert s2.policy == BackupRef(0) and s3.policy == BackupRef(0)
    assert np.allclose(s3.applied_u, terminal.K @ x3)


def test_step_writers(offline, tmp_path):
    ctl = RobustMPC(offline)
    x = np.array([3.0, -3.0])
    steps = []
    for t in range(4):
        st = ctl.step(x, t)
        steps.append(st)
        x = offline.system.A_bar @ x + offline.system.B_bar @ st.applied_u
    write_steps_csv(steps, tmp_path / "s.csv")
    write_steps_json(steps, tmp_path / "s.json")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,x,u,feasible,Nt,objective,solve_time_ns" and len(lines) == 5
    assert [r["Nt"] for r in __import__("json").loads((tmp_path / "s.json").read_text())] == [3, 2, 1, 1]
