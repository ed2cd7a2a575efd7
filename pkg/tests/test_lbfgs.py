import numpy as np
import pytest
from hypothesis import given, strategies as st

from deskla.comm import spawn_world
from deskla.core_la import DistVector, Layout, local_dot
from deskla.lbfgs import (
    BaseOperator,
    DiagonalOperator,
    Formulation,
    LbfgsState,
    ScaledIdentity,
    effective_bandwidth,
    effective_bandwidth_bytes,
    lbfgs_apply,
    lbfgs_apply_varmetric,
    lbfgs_update,
)

F = list(Formulation)


def spd(rng, n):
    Q = rng.standard_normal((n, n))
    return Q @ Q.T / n + 0.5 * np.eye(n)


def dense_bfgs(pairs, H0):
    """Explicit inverse-BFGS recursion on dense matrices."""
    H = H0.copy()
    n = H.shape[0]
    for s, y in pairs:
        rho = 1.0 / (s @ y)
        V = np.eye(n) - rho * np.outer(y, s)
        H = V.T @ H @ V + rho * np.outer(s, s)
    return H


def filled_state(rng, n, m, npairs, H0=None, cache_w=True):
    A = spd(rng, n)
    st_ = LbfgsState(n, m, H0, cache_w=cache_w)
    pairs = []
    for _ in range(npairs):
        s = rng.standard_normal(n)
        y = A @ s
        assert lbfgs_update(st_, s, y)
        pairs.append((s, y))
    return st_, pairs, A


@given(st.integers(2, 30), st.integers(1, 8), st.integers(0, 12), st.integers(0, 2**32 - 1))
def test_formulations_match_dense_bfgs(n, m, npairs, seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.5, 2.0, n)
    st_, pairs, _ = filled_state(rng, n, m, npairs, DiagonalOperator(d))
    H = dense_bfgs(pairs[-m:] if npairs else [], np.diag(d))
    g = rng.standard_normal(n)
    want = H @ g
    for f in F:
        p = lbfgs_apply(st_, g, f)
        assert np.linalg.norm(p - want) <= 1e-8 * np.linalg.norm(want)


@pytest.mark.parametrize("f", F)
def test_secant_condition(rng, f):
    st_, pairs, _ = filled_state(rng, 20, 5, 9)
    s, y = pairs[-1]
    assert np.allclose(lbfgs_apply(st_, y, f), s, rtol=1e-10, atol=1e-12)


def test_reduction_counts(rng):
    m = 6
    st_, _, _ = filled_state(rng, 30, m, 10)
    g = rng.standard_normal(30)
    for f, want in zip(F, (2 * m, 1, 2)):
        before = st_.counters.apply_reductions
        lbfgs_apply(st_, g, f)
        assert st_.counters.apply_reductions - before == want


def test_update_is_one_fused_reduction(rng):
    st_ = LbfgsState(10, 3, cache_w=False)
    for k in range(5):
        s = rng.standard_normal(10)
        lbfgs_update(st_, s, 2 * s)
        assert st_.counters.update_reductions == k + 1


def test_eviction_keeps_r_exact(rng):
    st_ = LbfgsState(8, 2)
    A = spd(rng, 8)
    kept = []
    for _ in range(3):
        s = rng.standard_normal(8)
        lbfgs_update(st_, s, A @ s)
        kept = (kept + [s])[-2:]
    assert st_.k_used == 2
    assert np.array_equal(st_.S, np.stack(kept, axis=1))
    oracle = np.array([[local_dot(st_.S[:, i], st_.Y[:, j]) for j in range(2)] for i in range(2)])
    # off-diagonal entries come from BLAS products, so equality is to rounding
    assert np.allclose(st_.R, np.triu(oracle), rtol=1e-14, atol=0)
    assert np.allclose(st_.R, np.triu(st_.recompute_sty()), rtol=1e-14, atol=0)


def test_curvature_gate(rng):
    st_ = LbfgsState(5, 3)
    s = rng.standard_normal(5)
    assert not lbfgs_update(st_, s, -s)
    assert not lbfgs_update(st_, s, np.zeros(5))
    assert st_.k_used == 0 and st_.counters.rejected == 2
    g = rng.standard_normal(5)
    assert np.array_equal(lbfgs_apply(st_, g), g)


def test_empty_history_applies_base():
    st_ = LbfgsState(4, 2, ScaledIdentity(3.0))
    for f in F:
        assert np.array_equal(lbfgs_apply(st_, np.ones(4), f), 3 * np.ones(4))


def test_varmetric_single_base_application(rng):
    st_, pairs, _ = filled_state(rng, 15, 4, 6)
    g = rng.standard_normal(15)
    for c in (0.5, 2.0, 3.0):
        H = ScaledIdentity(c)
        pi = lbfgs_apply_varmetric(st_, g, H, Formulation.INTERMEDIATE_DENSE)
        assert H.calls == 1
        pr = lbfgs_apply_varmetric(st_, g, ScaledIdentity(c), Formulation.RECURSIVE)
        assert np.linalg.norm(pi - pr) <= 1e-10 * np.linalg.norm(pr)
        Hc = ScaledIdentity(c)
        pc = lbfgs_apply_varmetric(st_, g, Hc, Formulation.COMPACT_DENSE)
        assert Hc.calls == st_.k_used + 1
        assert np.linalg.norm(pc - pr) <= 1e-10 * np.linalg.norm(pr)


def test_compact_without_cache_rebuilds_once(rng):
    st_, _, _ = filled_state(rng, 12, 4, 6, cache_w=False)
    g = rng.standard_normal(12)
    want = lbfgs_apply(st_, g, Formulation.RECURSIVE)
    p = lbfgs_apply(st_, g, Formulation.COMPACT_DENSE)
    assert st_.counters.w_rebuilds == 1
    lbfgs_apply(st_, g, Formulation.COMPACT_DENSE)
    assert st_.counters.w_rebuilds == 1
    assert np.allclose(p, want, rtol=1e-10)


def test_finite_termination(rng):
    n = 20
    A = spd(rng, n) + np.eye(n)
    st_ = LbfgsState(n, n)
    x = rng.standard_normal(n)
    g = A @ x
    for _ in range(n):
        p = -lbfgs_apply(st_, g, Formulation.RECURSIVE)
        a = -(g @ p) / (p @ A @ p)
        s = a * p
        y = A @ s
        g = g + y
        assert lbfgs_update(st_, s, y)
    assert st_.k_used == n
    v = rng.standard_normal(n)
    want = np.linalg.solve(A, v)
    for f in F:
        assert np.linalg.norm(lbfgs_apply(st_, v, f) - want) <= 1e-8 * np.linalg.norm(want)


@pytest.mark.parametrize("R", [2, 3])
def test_distributed_matches_single_rank(rng, R):
    N = 23
    diag = np.linspace(1.0, 2.0, N)
    steps = [rng.standard_normal(N) for _ in range(6)]
    g = rng.standard_normal(N)

    def prog(c):
        lay = Layout.uniform(N, c.size)
        lo, hi = lay.range(c.rank)
        st_ = LbfgsState(lay, 4, comm=c)
        for s in steps:
            lbfgs_update(st_, s[lo:hi], (diag * s)[lo:hi])
        gv = DistVector(c, lay, g[lo:hi])
        return [lbfgs_apply(st_, gv, f).gather() for f in F]

    ref = spawn_world(1, prog)[0]
    for a, b in zip(spawn_world(R, prog, timeout=30)[0], ref):
        assert np.allclose(a, b, rtol=1e-13, atol=1e-15)


def test_input_validation():
    with pytest.raises(ValueError):
        LbfgsState(5, 0)
    with pytest.raises(ValueError):
        lbfgs_update(LbfgsState(5, 2), np.ones(4), np.ones(4))
    with pytest.raises(ValueError):
        ScaledIdentity(0.0)
    with pytest.raises(ValueError):
        DiagonalOperator([1.0, -1.0])


def test_base_operator_counts():
    H = BaseOperator(lambda v: 2 * v)
    H(np.ones(2))
    H(np.ones(2))
    assert H.calls == 2


def test_effective_bandwidth_by_hand():
    assert effective_bandwidth(1000, 5, 1e-3) == 1000 * 12 / 1e-3
    assert effective_bandwidth(10**5, 50, 6e-3, 4e-3) == 10**5 * 102 / 1e-2
    assert effective_bandwidth(10, 0, 1.0) == 20.0
    assert effective_bandwidth_bytes(10, 0, 1.0) == 160.0
    for bad in ((10, 1, 0.0), (10, 1, -1.0, 2.0), (-1, 1, 1.0)):
        with pytest.raises(ValueError):
            effective_bandwidth(*bad)
