import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deskla.comm import WorldError, comm_self, spawn_world
from deskla.core_la import (
    DistVector,
    InsertMode,
    Layout,
    LayoutMismatch,
    vec_axpy,
    vec_axpy_async,
    vec_aypx,
    vec_copy,
    vec_dot,
    vec_dot_async,
    vec_norm,
    vec_norm_async,
    vec_pointwise_mult,
    vec_scale,
    vec_scale_async,
    vec_set_preallocation_coo,
    vec_set_values_coo,
    vec_waxpy,
)
from deskla.stream import ManagedScalar, ctx_get_current, scalar_eval


def part(v, lay, rank):
    lo, hi = lay.range(rank)
    return v[lo:hi]


@given(st.integers(0, 40), st.integers(1, 6))
def test_uniform_layout_covers(N, R):
    lay = Layout.uniform(N, R)
    assert lay.N == N and lay.nranks == R
    sizes = [lay.local_size(r) for r in range(R)]
    assert sum(sizes) == N and max(sizes) - min(sizes) <= 1
    if N:
        idx = np.arange(N)
        own = lay.owner_of(idx)
        for r in range(R):
            lo, hi = lay.range(r)
            assert np.all(own[lo:hi] == r)


def test_invalid_layout():
    with pytest.raises(ValueError):
        Layout((0, 3, 2))
    with pytest.raises(LayoutMismatch):
        DistVector(comm_self(), Layout.uniform(4, 2))


@pytest.mark.parametrize("R", [1, 2, 4])
def test_dot_norm_match_single_rank(rng, R):
    x, y = rng.standard_normal(37), rng.standard_normal(37)

    def prog(c):
        lay = Layout.uniform(37, c.size)
        a, b = DistVector(c, lay, part(x, lay, c.rank)), DistVector(c, lay, part(y, lay, c.rank))
        return vec_dot(a, b), vec_norm(a)

    for d, n in spawn_world(R, prog):
        assert math.isclose(d, float(x @ y), rel_tol=1e-14)
        assert math.isclose(n, float(np.linalg.norm(x)), rel_tol=1e-14)


def test_dot_bit_repeatable(rng):
    x = rng.standard_normal(101)

    def prog(c):
        lay = Layout.uniform(101, c.size)
        a = DistVector(c, lay, part(x, lay, c.rank))
        return vec_dot(a, a)

    assert len({spawn_world(3, prog)[0] for _ in range(4)}) == 1


def test_blocking_updates(rng):
    x, y = rng.standard_normal(9), rng.standard_normal(9)
    c = comm_self()
    lay = Layout.uniform(9, 1)
    X, Y, W = DistVector(c, lay, x), DistVector(c, lay, y), DistVector(c, lay)
    vec_axpy(Y, 2.0, X)
    assert np.allclose(Y.local, y + 2 * x)
    vec_aypx(Y, 0.5, X)
    assert np.allclose(Y.local, x + 0.5 * (y + 2 * x))
    vec_waxpy(W, -1.0, X, X)
    assert np.all(W.local == 0)
    vec_copy(X, W)
    vec_scale(W, 3.0)
    assert np.allclose(W.local, 3 * x)
    vec_pointwise_mult(W, X, X)
    assert np.allclose(W.local, x * x)
    with pytest.raises(LayoutMismatch):
        vec_dot(X, DistVector(c, Layout.uniform(8, 1)))
    with pytest.raises(ValueError):
        X.local[0] = 1.0


def test_async_ops_replay_sync(rng):
    x, y = rng.standard_normal(25), rng.standard_normal(25)

    def prog(c):
        lay = Layout.uniform(25, c.size)
        ctx = ctx_get_current()
        X, Y = DistVector(c, lay, part(x, lay, c.rank)), DistVector(c, lay, part(y, lay, c.rank))
        d, nrm = ManagedScalar(), ManagedScalar()
        vec_dot_async(ctx, X, Y, d)
        a = scalar_eval(d * 0.5, ctx)
        vec_axpy_async(ctx, Y, a, X)
        vec_scale_async(ctx, Y, 2.0)
        vec_norm_async(ctx, Y, nrm)
        # sync replay
        X2, Y2 = X.duplicate(), DistVector(c, lay, part(y, lay, c.rank))
        dd = vec_dot(X2, Y2)
        vec_axpy(Y2, dd * 0.5, X2)
        vec_scale(Y2, 2.0)
        return d.value, dd, nrm.value, vec_norm(Y2), np.array_equal(Y.local, Y2.local)

    for dv, dd, n1, n2, same in spawn_world(2, prog):
        assert math.isclose(dv, dd, rel_tol=1e-14)
        assert math.isclose(n1, n2, rel_tol=1e-14)
        assert same


def test_domain_copies_counted():
    c = comm_self()
    ctx = ctx_get_current()
    X = DistVector(c, Layout.uniform(4, 1), np.ones(4))
    vec_scale_async(ctx, X, 2.0)
    assert list(X.local) == [2.0] * 4
    assert X.h2d_copies == 1 and X.d2h_copies == 1
    X.local
    assert X.d2h_copies == 1  # both copies valid now


def test_coo_routes_remote_entries():
    def prog(c):
        lay = Layout.uniform(4, 2)
        X = DistVector(c, lay)
        i = [3] if c.rank == 0 else [-1, 2, 2]
        v = [7.0] if c.rank == 0 else [100.0, 1.0, 2.0]
        vec_set_preallocation_coo(X, len(i), i)
        vec_set_values_coo(X, v, InsertMode.ADD)
        return X.gather()

    assert list(spawn_world(2, prog)[0]) == [0.0, 0.0, 3.0, 7.0]


@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_coo_insert_and_add(R, seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 30))
    per = []
    for _ in range(R):
        n = int(rng.integers(0, 40))
        i = rng.integers(0, N, n)
        i[rng.random(n) < 0.2] = -1
        per.append((i, rng.standard_normal(n)))
    base = rng.standard_normal(N)

    def expected(mode):
        out = base.copy()
        lay = Layout.uniform(N, R)
        touched = np.zeros(N, bool)
        for owner in range(R):
            for r in [owner] + [q for q in range(R) if q != owner]:
                for a, x in zip(*per[r]):
                    if a < 0 or lay.owner_of(a) != owner:
                        continue
                    if mode is InsertMode.INSERT and not touched[a]:
                        out[a] = 0.0
                    touched[a] = True
                    out[a] += x
        return out

    def prog(c):
        lay = Layout.uniform(N, c.size)
        X = DistVector(c, lay, part(base, lay, c.rank))
        i, v = per[c.rank]
        vec_set_preallocation_coo(X, len(i), i)
        res = []
        for mode in (InsertMode.INSERT, InsertMode.ADD):
            X.set_local(part(base, lay, c.rank))
            vec_set_values_coo(X, v, mode)
            res.append(X.gather())
        return res

    ins, add = spawn_world(R, prog, timeout=30)[0]
    assert ins.tobytes() == expected(InsertMode.INSERT).tobytes()
    assert add.tobytes() == expected(InsertMode.ADD).tobytes()


def test_coo_out_of_range_is_collective():
    def prog(c):
        X = DistVector(c, Layout.uniform(4, 2))
        vec_set_preallocation_coo(X, 1, [9] if c.rank == 1 else [0])

    with pytest.raises(WorldError) as info:
        spawn_world(2, prog, timeout=5)
    assert isinstance(info.value.original, IndexError)
