"""Row-distributed vectors with simulated host/device residency.

Every :class:`DistVector` owns a contiguous slice of a global vector and keeps
two copies of it, a host buffer and a device buffer, with a validity mask.
Blocking operations (``vec_dot`` and friends) work on the host copy; the
``*_async`` variants enqueue tasks on a :class:`~deskla.stream.DeviceContext`
and work on the device copy.  Switching domains costs one copy, counted in
``h2d_copies``/``d2h_copies``.
"""
from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass

import numpy as np

from ._coo import RemoteRouting, SegmentedSum, collective_index_check
from .comm import Communicator, decode_array, encode_array
from .stream import (
    AccessMode,
    DeviceContext,
    ManagedScalar,
    StreamUsageError,
    check_binding,
    new_object_id,
)

__all__ = [
    "Layout",
    "DistVector",
    "InsertMode",
    "LayoutMismatch",
    "vec_dot",
    "vec_norm",
    "vec_axpy",
    "vec_aypx",
    "vec_waxpy",
    "vec_scale",
    "vec_copy",
    "vec_pointwise_mult",
    "vec_dot_async",
    "vec_norm_async",
    "vec_axpy_async",
    "vec_aypx_async",
    "vec_waxpy_async",
    "vec_scale_async",
    "vec_copy_async",
    "vec_pointwise_mult_async",
    "vec_set_preallocation_coo",
    "vec_set_values_coo",
    "local_dot",
]

HOST = 1
DEVICE = 2


class InsertMode(enum.Enum):
    INSERT = "insert"
    ADD = "add"


class LayoutMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    """Contiguous ownership ranges ``[starts[r], starts[r+1])`` covering ``[0, N)``."""

    starts: tuple

    def __post_init__(self):
        s = self.starts
        if len(s) < 2 or s[0] != 0 or any(b < a for a, b in zip(s, s[1:])):
            raise ValueError(f"invalid ownership ranges {s}")

    @classmethod
    def uniform(cls, N: int, R: int) -> "Layout":
        base, extra = divmod(N, R)
        sizes = [base + (1 if r < extra else 0) for r in range(R)]
        return cls(tuple(int(v) for v in np.concatenate([[0], np.cumsum(sizes)])))

    @classmethod
    def from_local_sizes(cls, comm: Communicator, n_local: int) -> "Layout":
        sizes = [int(decode_array(p)[0]) for p in comm.allgather(encode_array(np.array([n_local])))]
        return cls(tuple(int(v) for v in np.concatenate([[0], np.cumsum(sizes)])))

    @property
    def N(self) -> int:
        return self.starts[-1]

    @property
    def nranks(self) -> int:
        return len(self.starts) - 1

    def range(self, rank: int) -> tuple[int, int]:
        return self.starts[rank], self.starts[rank + 1]

    def local_size(self, rank: int) -> int:
        return self.starts[rank + 1] - self.starts[rank]

    def owner_of(self, idx) -> np.ndarray:
        return np.searchsorted(np.asarray(self.starts), np.asarray(idx), side="right") - 1


class DistVector:
    """The locally owned slice of a distributed vector."""

    def __init__(self, comm: Communicator, layout: Layout, values=None):
        if layout.nranks != comm.size:
            raise LayoutMismatch(f"layout has {layout.nranks} ranks, world has {comm.size}")
        self.comm = comm
        self.layout = layout
        self.rank = comm.rank
        self.start, self.end = layout.range(comm.rank)
        n = self.end - self.start
        self._host = np.zeros(n) if values is None else np.array(values, dtype=np.float64)
        if self._host.shape != (n,):
            raise ValueError(f"local values have shape {self._host.shape}, expected ({n},)")
        self._dev: np.ndarray | None = None
        self._mask = HOST
        self._lock = threading.Lock()
        self.device = None
        self.id = new_object_id()
        self.h2d_copies = 0
        self.d2h_copies = 0
        self._coo = None

    def __repr__(self):
        return f"DistVector(rank={self.rank}, range=[{self.start},{self.end}), N={self.layout.N})"

    @classmethod
    def like(cls, other: "DistVector", values=None) -> "DistVector":
        return cls(other.comm, other.layout, values)

    @property
    def local_size(self) -> int:
        return self.end - self.start

    @property
    def mask(self) -> int:
        return self._mask

    def _attach(self, ctx: DeviceContext):
        if self.device is None:
            self.device = ctx.device
        elif self.device is not ctx.device:
            raise StreamUsageError(f"{self!r} is already used with another device")

    # -- domain access -------------------------------------------------------

    def host_view(self, write: bool = False) -> np.ndarray:
        """Host copy of the local values, synchronized with pending device work."""
        if self.device is not None:
            mode = AccessMode.READ_WRITE if write else AccessMode.READ
            err = self.device.wait_object(self.id, mode, "host access")
            if err is not None:
                self.device.clear_surfaced(err)
                raise err
        with self._lock:
            if not self._mask & HOST:
                np.copyto(self._host, self._dev)
                self._mask |= HOST
                self.d2h_copies += 1
            if write:
                self._mask = HOST
        return self._host

    def device_view(self, write: bool = False) -> np.ndarray:
        """Device copy; only meant to be called from task bodies."""
        with self._lock:
            if self._dev is None:
                self._dev = np.empty_like(self._host)
            if not self._mask & DEVICE:
                np.copyto(self._dev, self._host)
                self._mask |= DEVICE
                self.h2d_copies += 1
            if write:
                self._mask = DEVICE
        return self._dev

    @property
    def local(self) -> np.ndarray:
        """Read-only host view of the owned entries."""
        v = self.host_view().view()
        v.flags.writeable = False
        return v

    def set_local(self, values) -> None:
        self.host_view(write=True)[:] = values

    def set(self, value: float) -> None:
        self.host_view(write=True).fill(value)

    def duplicate(self) -> "DistVector":
        return DistVector(self.comm, self.layout, self.host_view())

    def gather(self) -> np.ndarray:
        """Collective: the whole vector on every rank (for tests and small output)."""
        parts = self.comm.allgather(encode_array(self.host_view()))
        return np.concatenate([decode_array(p) for p in parts])


def _check(*vecs: DistVector):
    lay = vecs[0].layout
    for v in vecs[1:]:
        if v.layout != lay:
            raise LayoutMismatch(f"layouts differ: {lay.starts} vs {v.layout.starts}")


def local_dot(a: np.ndarray, b: np.ndarray) -> float:
    # numpy pairwise summation: same order on every run, independent of BLAS
    return float(np.add.reduce(a * b)) if a.size else 0.0


# -- blocking operations -------------------------------------------------------

def vec_dot(x: DistVector, y: DistVector) -> float:
    _check(x, y)
    return float(x.comm.allreduce([local_dot(x.host_view(), y.host_view())])[0])


def vec_norm(x: DistVector) -> float:
    xl = x.host_view()
    return math.sqrt(x.comm.allreduce([local_dot(xl, xl)])[0])


def vec_axpy(y: DistVector, a: float, x: DistVector) -> None:
    """y += a*x"""
    _check(x, y)
    xl = x.host_view()
    y.host_view(write=True)[:] += a * xl


def vec_aypx(y: DistVector, a: float, x: DistVector) -> None:
    """y = x + a*y"""
    _check(x, y)
    xl = x.host_view()
    yl = y.host_view(write=True)
    yl *= a
    yl += xl


def vec_waxpy(w: DistVector, a: float, x: DistVector, y: DistVector) -> None:
    """w = a*x + y"""
    _check(w, x, y)
    xl, yl = x.host_view(), y.host_view()
    np.add(a * xl, yl, out=w.host_view(write=True))


def vec_scale(x: DistVector, a: float) -> None:
    x.host_view(write=True)[:] *= a


def vec_copy(src: DistVector, dst: DistVector) -> None:
    _check(src, dst)
    s = src.host_view()
    dst.host_view(write=True)[:] = s


def vec_pointwise_mult(w: DistVector, x: DistVector, y: DistVector) -> None:
    """w_i = x_i * y_i"""
    _check(w, x, y)
    xl, yl = x.host_view(), y.host_view()
    np.multiply(xl, yl, out=w.host_view(write=True))


# -- stream-ordered operations --------------------------------------------------

def _scalar_value(a):
    return a._device_get() if isinstance(a, ManagedScalar) else a


def _scalar_ids(*scalars):
    return [s.id for s in scalars if isinstance(s, ManagedScalar)]


def _prepare(ctx: DeviceContext, vecs, scalars=()):
    check_binding(ctx, *[s for s in scalars if isinstance(s, ManagedScalar)])
    for v in vecs:
        v._attach(ctx)


def vec_dot_async(ctx: DeviceContext, x: DistVector, y: DistVector, out: ManagedScalar) -> None:
    """Enqueue ``out = x . y``; the global sum runs inside the task."""
    _check(x, y)
    _prepare(ctx, (x, y), (out,))
    comm = x.comm.stream_comm

    def body():
        out._device_set(comm.allreduce([local_dot(x.device_view(), y.device_view())])[0])

    ctx.device.submit(ctx, [x.id, y.id], [out.id], body, "vec-dot")


def vec_norm_async(ctx: DeviceContext, x: DistVector, out: ManagedScalar) -> None:
    _prepare(ctx, (x,), (out,))
    comm = x.comm.stream_comm

    def body():
        xd = x.device_view()
        out._device_set(math.sqrt(comm.allreduce([local_dot(xd, xd)])[0]))

    ctx.device.submit(ctx, [x.id], [out.id], body, "vec-norm")


def vec_axpy_async(ctx: DeviceContext, y: DistVector, a, x: DistVector) -> None:
    """Enqueue ``y += a*x`` with ``a`` a managed scalar or a number."""
    _check(x, y)
    _prepare(ctx, (x, y), (a,))

    def body():
        alpha = _scalar_value(a)
        xd = x.device_view()
        y.device_view(write=True)[:] += alpha * xd

    ctx.device.submit(ctx, [x.id, *_scalar_ids(a)], [y.id], body, "vec-axpy")


def vec_aypx_async(ctx: DeviceContext, y: DistVector, a, x: DistVector) -> None:
    """Enqueue ``y = x + a*y``."""
    _check(x, y)
    _prepare(ctx, (x, y), (a,))

    def body():
        alpha = _scalar_value(a)
        xd = x.device_view()
        yd = y.device_view(write=True)
        yd *= alpha
        yd += xd

    ctx.device.submit(ctx, [x.id, *_scalar_ids(a)], [y.id], body, "vec-aypx")


def vec_waxpy_async(ctx: DeviceContext, w: DistVector, a, x: DistVector, y: DistVector) -> None:
    """Enqueue ``w = a*x + y``."""
    _check(w, x, y)
    _prepare(ctx, (w, x, y), (a,))

    def body():
        alpha = _scalar_value(a)
        xd, yd = x.device_view(), y.device_view()
        np.add(alpha * xd, yd, out=w.device_view(write=True))

    ctx.device.submit(ctx, [x.id, y.id, *_scalar_ids(a)], [w.id], body, "vec-waxpy")


def vec_scale_async(ctx: DeviceContext, x: DistVector, a) -> None:
    _prepare(ctx, (x,), (a,))

    def body():
        alpha = _scalar_value(a)
        x.device_view(write=True)[:] *= alpha

    ctx.device.submit(ctx, _scalar_ids(a), [x.id], body, "vec-scale")


def vec_copy_async(ctx: DeviceContext, src: DistVector, dst: DistVector) -> None:
    _check(src, dst)
    _prepare(ctx, (src, dst))

    def body():
        s = src.device_view()
        dst.device_view(write=True)[:] = s

    ctx.device.submit(ctx, [src.id], [dst.id], body, "vec-copy")


def vec_pointwise_mult_async(ctx: DeviceContext, w: DistVector, x: DistVector, y: DistVector) -> None:
    _check(w, x, y)
    _prepare(ctx, (w, x, y))

    def body():
        xd, yd = x.device_view(), y.device_view()
        np.multiply(xd, yd, out=w.device_view(write=True))

    ctx.device.submit(ctx, [x.id, y.id], [w.id], body, "vec-pointwise-mult")


# -- COO assembly ------------------------------------------------------------------

class _VecCooPlan:
    def __init__(self, x: DistVector, i: np.ndarray):
        comm, lay = x.comm, x.layout
        self.n = i.size
        keep = i >= 0
        owners = np.where(keep, lay.owner_of(np.where(keep, i, 0)), -1)
        self.routing = RemoteRouting(comm, keep, owners, [i])
        local_rows = np.concatenate([i[self.routing.local_k], self.routing.received[0]]) - x.start
        self.accum = SegmentedSum(local_rows, x.local_size)


def vec_set_preallocation_coo(x: DistVector, n: int, i) -> None:
    """Collective.  Entries with ``i[k] < 0`` are ignored; remote ones are routed."""
    i = np.asarray(i, dtype=np.int64).reshape(-1)
    if i.size != n:
        raise ValueError(f"expected {n} indices, got {i.size}")
    collective_index_check(x.comm, [i], [x.layout.N], "vec_set_preallocation_coo")
    x._coo = _VecCooPlan(x, i)


def vec_set_values_coo(x: DistVector, v, mode: InsertMode = InsertMode.INSERT) -> None:
    """Collective.  Duplicates sum; under INSERT the touched entries are replaced
    by this call's sums and untouched entries keep their values."""
    plan = x._coo
    if plan is None:
        raise RuntimeError("vec_set_values_coo called before vec_set_preallocation_coo")
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != plan.n:
        raise ValueError(f"expected {plan.n} values, got {v.size}")
    contrib = plan.routing.exchange(v)
    plan.accum.apply(contrib, x.host_view(write=True), zero_touched=mode is InsertMode.INSERT)
