import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from deskla.comm import WorldError, spawn_world
from deskla.core_la import DistVector, InsertMode, Layout
from deskla.mat import (
    DistCsrMatrix,
    mat_assemble_baseline,
    mat_from_global,
    mat_get_diagonal,
    mat_mult,
    mat_mult_async,
    mat_set_preallocation_coo,
    mat_set_values_coo,
    read_triplets,
    write_triplets,
)
from deskla.stream import ctx_get_current
from oracles import triplet_accumulate


def random_triplets(rng, R, N, nmax, dup=0.5, neg=0.2):
    per = []
    for _ in range(R):
        n = int(rng.integers(0, nmax + 1))
        i, j = rng.integers(0, N, n), rng.integers(0, N, n)
        d = rng.random(n) < dup * rng.random()
        if n and d.any():
            src = rng.integers(0, n, int(d.sum()))
            i[d], j[d] = i[src], j[src]
        g = rng.random(n) < neg * rng.random()
        i[g & (rng.random(n) < 0.5)] = -1
        j[g] = np.where(i[g] >= 0, -1, j[g])
        per.append((i, j, rng.standard_normal(n) * 10.0 ** rng.integers(-6, 6, n)))
    return per


def assemble(R, N, per, values_twice=False):
    def prog(c):
        lay = Layout.uniform(N, c.size)
        A = DistCsrMatrix(c, lay)
        i, j, v = per[c.rank]
        mat_set_preallocation_coo(A, len(i), i, j)
        mat_set_values_coo(A, v, InsertMode.INSERT)
        if values_twice:
            mat_set_values_coo(A, v * 2, InsertMode.INSERT)
            mat_set_values_coo(A, v, InsertMode.INSERT)
        A.check_invariants()
        return A.to_dense(), A.to_scipy_local(), A.plan_builds

    return spawn_world(R, prog, timeout=60)


@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_coo_matches_triplet_oracle(R, seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 40))
    per = random_triplets(rng, R, N, 80)
    want, touched = triplet_accumulate(per, Layout.uniform(N, R).starts)
    out = assemble(R, N, per, values_twice=True)
    dense = out[0][0]
    assert dense.tobytes() == want.tobytes()
    # the stored pattern is exactly the touched set, explicit zeros included
    pattern = np.zeros_like(touched)
    lay = Layout.uniform(N, R)
    for r, (_, loc, builds) in enumerate(out):
        assert builds == 1
        lo, _ = lay.range(r)
        coo = loc.tocoo()
        pattern[coo.row + lo, coo.col] = True
    assert np.array_equal(pattern, touched)


def test_remote_triplet_goes_to_owner():
    def prog(c):
        A = DistCsrMatrix(c, Layout.uniform(2, 2))
        i, j = ([0, 1], [0, 0]) if c.rank == 0 else ([1], [1])
        mat_set_preallocation_coo(A, len(i), i, j)
        mat_set_values_coo(A, np.arange(1.0, len(i) + 1))
        return A.diag.toarray(), A.colmap.tolist()

    (d0, cm0), (d1, cm1) = spawn_world(2, prog)
    assert d0.tolist() == [[1.0]] and cm0 == []
    assert d1.tolist() == [[1.0]] and cm1 == [0]


def test_insert_then_add():
    def prog(c):
        A = DistCsrMatrix(c, Layout.uniform(2, 1))
        mat_set_preallocation_coo(A, 3, [0, 0, 1], [0, 0, 1])
        mat_set_values_coo(A, [1.0, 2.0, 5.0], InsertMode.INSERT)
        mat_set_values_coo(A, [1.0, 1.0, 1.0], InsertMode.ADD)
        return A.to_dense()

    assert spawn_world(1, prog)[0].tolist() == [[5.0, 0.0], [0.0, 6.0]]


def test_values_before_preallocation():
    def prog(c):
        mat_set_values_coo(DistCsrMatrix(c, Layout.uniform(2, 1)), [1.0])

    with pytest.raises(WorldError):
        spawn_world(1, prog)


def test_index_out_of_range():
    def prog(c):
        A = DistCsrMatrix(c, Layout.uniform(4, 2))
        mat_set_preallocation_coo(A, 1, [0], [4 if c.rank else 0])

    with pytest.raises(WorldError) as info:
        spawn_world(2, prog, timeout=5)
    assert isinstance(info.value.original, IndexError)


def test_baseline_agrees_with_coo(rng):
    per = random_triplets(rng, 3, 25, 200)

    def prog(c):
        lay = Layout.uniform(25, 3)
        i, j, v = per[c.rank]
        B = mat_assemble_baseline(c, lay, lay, i, j, v)
        A = DistCsrMatrix(c, lay)
        mat_set_preallocation_coo(A, len(i), i, j)
        mat_set_values_coo(A, v)
        return A.to_dense().tobytes() == B.to_dense().tobytes()

    assert all(spawn_world(3, prog))


def laplacian(n):
    T = sp.diags([-1, 2, -1], [-1, 0, 1], (n, n))
    I = sp.identity(n)
    return (sp.kron(I, T) + sp.kron(T, I)).tocsr()


@pytest.mark.parametrize("R", [1, 2, 4])
def test_spmv_matches_dense(rng, R):
    G = laplacian(9)
    x = rng.standard_normal(G.shape[0])
    want = G.toarray() @ x

    def prog(c):
        A = mat_from_global(c, G)
        X = DistVector(c, A.col_layout, x[slice(*A.col_layout.range(c.rank))])
        y = mat_mult(A, X).gather()
        Y2 = DistVector(c, A.row_layout)
        ctx = ctx_get_current()
        mat_mult_async(ctx, A, X, Y2)
        return y, Y2.gather(), mat_get_diagonal(A).gather()

    for y, ya, d in spawn_world(R, prog):
        assert np.allclose(y, want, rtol=1e-14, atol=1e-14)
        assert np.array_equal(y, ya)
        assert np.all(d == 4.0)


def test_spmv_ones_interior_zero():
    G = laplacian(3)

    def prog(c):
        A = mat_from_global(c, G)
        X = DistVector(c, A.col_layout, np.ones(A.col_layout.local_size(c.rank)))
        return mat_mult(A, X).gather()

    y = spawn_world(2, prog)[0]
    assert y[4] == 0.0  # centre row of the 3x3 grid
    assert np.array_equal(y, G @ np.ones(9))


def test_triplet_file_roundtrip(tmp_path, rng):
    i, j, v = rng.integers(0, 5, 8), rng.integers(0, 6, 8), rng.standard_normal(8)
    path = tmp_path / "m.txt"
    write_triplets(path, 5, 6, i, j, v)
    rows, cols, i2, j2, v2 = read_triplets(path)
    assert (rows, cols) == (5, 6)
    assert np.array_equal(i, i2) and np.array_equal(j, j2) and np.array_equal(v, v2)
    path.write_text("2 2 3\n0 0 1.0\n")
    with pytest.raises(ValueError):
        read_triplets(path)
