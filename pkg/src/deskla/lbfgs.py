"""Limited-memory BFGS inverse-Hessian application.

Three formulations of the same operator ``H_k``:

``RECURSIVE``
    the classical two-loop recursion, one global reduction per dot product.
``COMPACT_DENSE``
    the rank-2m compact representation built on cached ``W = H0 Y``; one
    fused reduction per apply, but ``W`` must be rebuilt when ``H0`` changes.
``INTERMEDIATE_DENSE``
    a factored form that applies ``H0`` once per call and needs two fused
    reductions, whatever ``H0`` is.

History vectors are stored as rows of rank-local blocks in a ring buffer.
Small ``m x m`` quantities (``S^T Y``, its triangle and diagonal) are
replicated on every rank.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .comm import Communicator, comm_self
from .core_la import DistVector, Layout, local_dot

__all__ = [
    "Formulation",
    "BaseOperator",
    "ScaledIdentity",
    "DiagonalOperator",
    "LbfgsState",
    "HistoryDegenerate",
    "lbfgs_update",
    "lbfgs_apply",
    "lbfgs_apply_varmetric",
    "effective_bandwidth",
    "effective_bandwidth_bytes",
]

CURVATURE_EPS = 1e-12


class Formulation(enum.Enum):
    RECURSIVE = "recursive"
    COMPACT_DENSE = "compact"
    INTERMEDIATE_DENSE = "intermediate"


class HistoryDegenerate(ArithmeticError):
    pass


class BaseOperator:
    """SPD base operator ``H0`` acting on rank-local slices, with a call counter.

    ``fn`` maps a local array to a new local array.  It may communicate as
    long as every rank calls it collectively.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], name: str = "H0"):
        self.fn = fn
        self.name = name
        self.calls = 0

    def __call__(self, v: np.ndarray) -> np.ndarray:
        self.calls += 1
        return np.asarray(self.fn(v), dtype=np.float64)

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class ScaledIdentity(BaseOperator):
    def __init__(self, c: float = 1.0):
        if not c > 0:
            raise ValueError("scale must be positive")
        self.c = float(c)
        super().__init__(lambda v: self.c * v, f"{c:g}*I")


class DiagonalOperator(BaseOperator):
    def __init__(self, diag_local):
        self.d = np.asarray(diag_local, dtype=np.float64)
        if np.any(self.d <= 0):
            raise ValueError("diagonal base operator must be positive")
        super().__init__(lambda v: self.d * v, "diag")


@dataclass
class _Counters:
    apply_reductions: int = 0
    update_reductions: int = 0
    rebuild_reductions: int = 0
    w_rebuilds: int = 0
    rejected: int = 0


class LbfgsState:
    """History of ``m`` most recent (s, y) pairs distributed by ``layout``.

    Parameters
    ----------
    n : int or Layout
        Global dimension (uniform layout over ``comm``) or an explicit layout.
    m : int
        History capacity, at least 1.
    H0 : BaseOperator, optional
        Base inverse Hessian; identity when omitted.
    comm : Communicator, optional
        Defaults to a single-rank communicator.
    cache_w : bool
        Maintain ``W = H0 Y`` and ``W^T Y`` during updates (needed by the
        compact form; otherwise rebuilt on first compact apply).

    Notes
    -----
    History vectors are rows of ``(m, n_local)`` arrays filled as a ring:
    physical rows ``0..k_used-1`` are in use and ``_slots`` lists them
    oldest to newest.  Tall-skinny products run on the physical rows and
    only the length-``k`` results are permuted into logical order.
    """

    def __init__(self, n, m: int, H0: BaseOperator | None = None, comm: Communicator | None = None,
                 cache_w: bool = True):
        if m < 1:
            raise ValueError("history size m must be >= 1")
        self.comm = comm if comm is not None else comm_self()
        self.layout = n if isinstance(n, Layout) else Layout.uniform(int(n), self.comm.size)
        self.n = self.layout.N
        self.m = int(m)
        self.nloc = self.layout.local_size(self.comm.rank)
        self._S = np.zeros((m, self.nloc))
        self._Y = np.zeros((m, self.nloc))
        self._W = np.zeros((m, self.nloc))
        self._slots: list[int] = []
        self._perm = np.zeros(0, np.int64)
        self.STY = np.zeros((0, 0))
        self.WTY = np.zeros((0, 0))
        self.H0 = H0 if H0 is not None else ScaledIdentity(1.0)
        self._w_for = self.H0  # operator W was built with
        self._w_valid = True
        self.cache_w = cache_w
        self.counters = _Counters()

    # -- views ---------------------------------------------------------------------

    @property
    def k_used(self) -> int:
        return len(self._slots)

    @property
    def d(self) -> np.ndarray:
        return np.diag(self.STY).copy()

    @property
    def R(self) -> np.ndarray:
        return np.triu(self.STY)

    @property
    def D(self) -> np.ndarray:
        return np.diag(np.diag(self.STY))

    @property
    def S(self) -> np.ndarray:
        """Local rows of ``S`` (``n_local x k``, logical column order, a copy)."""
        return self._S[self._perm].T

    @property
    def Y(self) -> np.ndarray:
        return self._Y[self._perm].T

    def _phys(self, A: np.ndarray) -> np.ndarray:
        return A[:self.k_used]

    def _logical(self, v: np.ndarray) -> np.ndarray:
        return v[self._perm]

    def _physical(self, c: np.ndarray) -> np.ndarray:
        out = np.empty_like(c)
        out[self._perm] = c
        return out

    def recompute_sty(self) -> np.ndarray:
        """Collective: ``S^T Y`` from scratch (a test oracle, not used internally)."""
        S, Y = self.S, self.Y
        k = self.k_used
        loc = np.array([[local_dot(S[:, i], Y[:, j]) for j in range(k)] for i in range(k)])
        return self.comm.allreduce(loc.reshape(-1)).reshape(k, k)

    def set_base(self, H0: BaseOperator) -> None:
        """Swap the base operator; the compact form's ``W`` cache goes stale."""
        if H0 is not self.H0:
            self.H0 = H0
            self._w_valid = H0 is self._w_for

    def _reduce(self, loc, counter: str) -> np.ndarray:
        setattr(self.counters, counter, getattr(self.counters, counter) + 1)
        return self.comm.allreduce(loc)

    def _local(self, v) -> np.ndarray:
        if isinstance(v, DistVector):
            if v.layout != self.layout:
                raise ValueError("vector layout does not match the history layout")
            return v.host_view()
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != self.nloc:
            raise ValueError(f"expected a local slice of length {self.nloc}, got {v.size}")
        return v

    # -- W cache (compact form only) -------------------------------------------

    def _rebuild_w(self) -> None:
        k = self.k_used
        for slot in range(k):
            self._W[slot] = self.H0(self._Y[slot])
        W, Y = self._phys(self._W), self._phys(self._Y)
        wty = self._reduce((W @ Y.T).reshape(-1), "rebuild_reductions").reshape(k, k)
        self.WTY = wty[np.ix_(self._perm, self._perm)]
        self._w_for = self.H0
        self._w_valid = True
        self.counters.w_rebuilds += 1


def lbfgs_update(state: LbfgsState, s, y) -> bool:
    """Append the pair ``(s, y)`` unless it fails the curvature gate.

    A single fused reduction returns ``s.y``, ``|s|``, ``|y|`` and the new
    row and column of ``S^T Y``.  With ``state.cache_w`` the compact form's
    cache gets one ``H0`` application and one extra reduction for ``W^T Y``.
    """
    sl, yl = state._local(s), state._local(y)
    k = state.k_used
    loc = np.concatenate([
        [local_dot(sl, yl), local_dot(sl, sl), local_dot(yl, yl)],
        state._phys(state._S) @ yl,
        state._phys(state._Y) @ sl,
    ])
    red = state._reduce(loc, "update_reductions")
    sty, ss, yy = red[:3]
    col = state._logical(red[3:3 + k])  # s_i . y_new
    row = state._logical(red[3 + k:3 + 2 * k])  # s_new . y_j
    if not sty > CURVATURE_EPS * math.sqrt(ss) * math.sqrt(yy):
        state.counters.rejected += 1
        return False

    old = state._slots
    if k == state.m:
        slot, keep, slots = old[0], slice(1, None), old[1:] + [old[0]]
    else:
        slot, keep, slots = k, slice(None), old + [k]
    kk = len(slots)
    M = np.empty((kk, kk))
    M[:-1, :-1] = state.STY[keep, keep]
    M[:-1, -1] = col[keep]
    M[-1, :-1] = row[keep]
    M[-1, -1] = sty
    state._S[slot] = sl
    state._Y[slot] = yl
    state._slots = slots
    state._perm = np.array(slots, dtype=np.int64)
    state.STY = M

    if state.cache_w:
        if not state._w_valid:
            state._rebuild_w()
        else:
            w = state.H0(yl)
            state._W[slot] = w
            # W^T y_new equals Y^T w by symmetry of H0
            wty = state._logical(state._reduce(state._phys(state._Y) @ w, "update_reductions"))
            T = np.empty((kk, kk))
            T[:-1, :-1] = state.WTY[keep, keep]
            T[:-1, -1] = wty[:-1]
            T[-1, :-1] = wty[:-1]
            T[-1, -1] = wty[-1]
            state.WTY = T
    else:
        state._w_valid = False
    return True


def _check_r(state: LbfgsState) -> None:
    if state.k_used and np.any(np.diag(state.STY) == 0.0):
        raise HistoryDegenerate("history degenerate: zero diagonal in R")


def _apply_recursive(state: LbfgsState, g: np.ndarray) -> np.ndarray:
    d = np.diag(state.STY)
    k = state.k_used
    q = g.copy()
    alpha = np.empty(k)
    for j in range(k - 1, -1, -1):
        slot = state._slots[j]
        alpha[j] = state._reduce(local_dot(state._S[slot], q), "apply_reductions")[0] / d[j]
        q -= alpha[j] * state._Y[slot]
    r = state.H0(q)
    for j in range(k):
        slot = state._slots[j]
        beta = state._reduce(local_dot(state._Y[slot], r), "apply_reductions")[0] / d[j]
        r += (alpha[j] - beta) * state._S[slot]
    return r


def _apply_compact(state: LbfgsState, g: np.ndarray) -> np.ndarray:
    if not state._w_valid:
        state._rebuild_w()
    k = state.k_used
    S, W = state._phys(state._S), state._phys(state._W)
    h0g = state.H0(g)
    red = state._reduce(np.concatenate([S @ g, W @ g]), "apply_reductions")
    stg, wtg = state._logical(red[:k]), state._logical(red[k:])
    R = state.STY  # the triangular solves read only the upper triangle
    a = -solve_triangular(R, stg, lower=False, check_finite=False)
    c = solve_triangular(R, np.diag(R) * a + state.WTY @ a + wtg, trans="T", lower=False, check_finite=False)
    return h0g - state._physical(c) @ S + state._physical(a) @ W


def _apply_intermediate(state: LbfgsState, g: np.ndarray) -> np.ndarray:
    S, Y = state._phys(state._S), state._phys(state._Y)
    stg = state._logical(state._reduce(S @ g, "apply_reductions"))
    R = state.STY
    a = -solve_triangular(R, stg, lower=False, check_finite=False)
    u = state.H0(g + state._physical(a) @ Y)
    ytu = state._logical(state._reduce(Y @ u, "apply_reductions"))
    c = solve_triangular(R, ytu + np.diag(R) * a, trans="T", lower=False, check_finite=False)
    return u - state._physical(c) @ S


_APPLY = {
    Formulation.RECURSIVE: _apply_recursive,
    Formulation.COMPACT_DENSE: _apply_compact,
    Formulation.INTERMEDIATE_DENSE: _apply_intermediate,
}


def lbfgs_apply(state: LbfgsState, g, formulation: Formulation = Formulation.INTERMEDIATE_DENSE):
    """Return ``p = H_k g``.

    A :class:`DistVector` argument gives a :class:`DistVector` result; a
    local array gives a local array.  With an empty history ``p = H0 g``.
    """
    formulation = Formulation(formulation)
    gl = state._local(g)
    if state.k_used == 0:
        p = state.H0(gl)
    else:
        _check_r(state)
        p = _APPLY[formulation](state, gl)
    if isinstance(g, DistVector):
        return DistVector.like(g, p)
    return p


def lbfgs_apply_varmetric(state: LbfgsState, g, H0: BaseOperator,
                          formulation: Formulation = Formulation.INTERMEDIATE_DENSE):
    """Apply ``H_k`` built on the base operator ``H0`` for this iteration.

    The recursive and intermediate forms pay one ``H0`` application whatever
    ``H0`` is.  The compact form has to rebuild ``W = H0 Y`` whenever ``H0``
    differs from the one it was built with (``k_used`` extra applications).
    """
    state.set_base(H0)
    return lbfgs_apply(state, g, formulation)


def effective_bandwidth(n: int, m: int, t_update: float, t_solve: float = 0.0) -> float:
    """``n (2m + 2) / (t_update + t_solve)`` in vector elements per second."""
    if t_update < 0 or t_solve < 0 or not t_update + t_solve > 0:
        raise ValueError("times must be nonnegative with a positive total")
    if n < 0 or m < 0:
        raise ValueError("n and m must be nonnegative")
    return n * (2 * m + 2) / (t_update + t_solve)


def effective_bandwidth_bytes(n: int, m: int, t_update: float, t_solve: float = 0.0,
                              itemsize: int = 8) -> float:
    return itemsize * effective_bandwidth(n, m, t_update, t_solve)
