"""Asynchronous execution engine modelled on GPU streams.

A :class:`Device` owns a pool of worker threads and a dependency tracker.
:class:`DeviceContext` objects are ordered task queues on a device: tasks on
one context run in enqueue order, and tasks on different contexts are ordered
only when their declared object accesses conflict.  For every object id the
tracker keeps the last write event and the read events since that write; a
new task waits (on the worker side, never on the enqueueing thread) for the
events it conflicts with.

:class:`ManagedScalar` is a future-valued scalar with a host slot and a
device slot.  Arithmetic on managed scalars builds an expression that
:func:`scalar_eval` turns into a tiny task.
"""
from __future__ import annotations

import enum
import itertools
import math
import os
import queue
import threading
import time
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .comm import register_rank_cleanup

__all__ = [
    "AccessMode",
    "Device",
    "DeviceContext",
    "ManagedScalar",
    "Expr",
    "StreamUsageError",
    "StreamTaskError",
    "get_device",
    "set_default_stream_options",
    "new_object_id",
    "ctx_get_current",
    "ctx_fork",
    "ctx_join",
    "ctx_synchronize",
    "mark_intent_begin",
    "mark_intent_end",
    "task_submit",
    "scalar_eval",
    "sqrt",
    "measure_submit_latency",
]

MAX_EXPR_DEPTH = 64


class AccessMode(enum.Enum):
    READ = "read"
    WRITE = "write"
    READ_WRITE = "read_write"

    @property
    def writes(self) -> bool:
        return self is not AccessMode.READ


class StreamUsageError(RuntimeError):
    pass


class StreamTaskError(RuntimeError):
    """A task body raised; surfaced at the next synchronize/materialize."""

    def __init__(self, task_name: str, exc: BaseException):
        super().__init__(f"task {task_name!r} failed: {exc!r}")
        self.original = exc


_oids = itertools.count(1)


def new_object_id() -> int:
    """Unique id for dependency tracking (vectors, matrices, scalars, arrays)."""
    return next(_oids)


class _Task:
    __slots__ = ("seq", "ctx", "body", "name", "npending", "succ", "done", "error")

    def __init__(self, seq, ctx, body, name):
        self.seq = seq
        self.ctx = ctx
        self.body = body
        self.name = name
        self.npending = 0
        self.succ: list[_Task] = []
        self.done = False
        self.error: BaseException | None = None

    @property
    def event(self) -> tuple[int, int]:
        return (self.ctx.id, self.seq)


@dataclass
class DependencyRecord:
    last_write: _Task | None = None
    reads: list = field(default_factory=list)

    @property
    def last_write_event(self):
        return None if self.last_write is None else self.last_write.event

    @property
    def read_events(self):
        return [t.event for t in self.reads]


_tls = threading.local()


class Device:
    """Worker pool plus the shared dependency tracker for its contexts."""

    def __init__(self, workers: int | None = None, deterministic: bool = False):
        if deterministic:
            workers = 1
        elif workers is None:
            workers = os.cpu_count() or 1
        self.workers = max(1, int(workers))
        self.deterministic = deterministic
        self._cv = threading.Condition()
        self._ready: queue.SimpleQueue = queue.SimpleQueue()
        self._records: dict[int, DependencyRecord] = {}
        self._ticket = itertools.count()
        self._ctx_ids = itertools.count()
        self._contexts = weakref.WeakSet()
        self._surfaced: set[int] = set()
        self._surfaced_refs: list = []  # keeps ids in _surfaced valid
        self._nwaiters = 0
        self.host_syncs = 0  # explicit synchronize/materialize calls
        self.blocking_waits = 0  # waits that actually blocked, by reason
        self.wait_reasons: dict[str, int] = {}
        self.tasks_run = 0
        self._closed = False
        self._threads = [
            threading.Thread(target=self._worker, name=f"stream-worker-{i}", daemon=True)
            for i in range(self.workers)
        ]
        for t in self._threads:
            t.start()
        self.default_context = DeviceContext(self)

    # -- worker side ---------------------------------------------------------

    def _worker(self):
        _tls.worker_device = self
        while True:
            task = self._ready.get()
            if task is None:
                return
            while task is not None:
                task = self._run(task)

    def _run(self, task: _Task):
        if task.error is None:
            _tls.running_ctx = task.ctx
            try:
                task.body()
            except BaseException as exc:  # noqa: BLE001 - surfaced at sync
                task.error = exc if isinstance(exc, StreamTaskError) else StreamTaskError(task.name, exc)
            finally:
                _tls.running_ctx = None
        nxt = None
        with self._cv:
            task.done = True
            task.body = None
            self.tasks_run += 1
            if task.error is not None and task.ctx._error is None:
                task.ctx._error = task.error
            for s in task.succ:
                if task.error is not None and s.error is None:
                    s.error = task.error
                s.npending -= 1
                if s.npending == 0:
                    if nxt is None:
                        nxt = s
                    else:
                        self._ready.put(s)
            task.succ = []
            if self._nwaiters:
                self._cv.notify_all()
        return nxt

    # -- tracker -------------------------------------------------------------

    def record(self, oid: int) -> DependencyRecord:
        with self._cv:
            return self._records.setdefault(oid, DependencyRecord())

    def submit(self, ctx: "DeviceContext", reads: Iterable[int], writes: Iterable[int],
               body: Callable[[], None], name: str = "task") -> _Task:
        if self._closed:
            raise StreamUsageError("device is closed")
        if getattr(_tls, "running_ctx", None) is ctx:
            raise StreamUsageError("a task may not enqueue onto its own context")
        writes = set(writes)
        reads = set(reads) - writes
        for oid, mode, _ in ctx._intents:
            (writes if mode.writes else reads).add(oid)
        reads -= writes
        with self._cv:
            task = _Task(next(self._ticket), ctx, body, name)
            deps: dict[int, _Task] = {}
            inherited = None
            surfaced = self._surfaced

            def depend(t: _Task | None):
                nonlocal inherited
                if t is None:
                    return
                if t.done:
                    if t.error is not None and inherited is None and id(t.error) not in surfaced:
                        inherited = t.error
                else:
                    deps[id(t)] = t

            depend(ctx._last)
            for t in ctx._join_deps:
                depend(t)
            ctx._join_deps = []
            recs = self._records
            for oid in reads:
                rec = recs.get(oid)
                if rec is None:
                    rec = recs[oid] = DependencyRecord()
                depend(rec.last_write)
                rec.reads = [t for t in rec.reads if not t.done]
                rec.reads.append(task)
            for oid in writes:
                rec = recs.get(oid)
                if rec is None:
                    rec = recs[oid] = DependencyRecord()
                depend(rec.last_write)
                for t in rec.reads:
                    depend(t)
                rec.last_write = task
                rec.reads = []
            task.error = inherited
            task.npending = len(deps)
            for t in deps.values():
                t.succ.append(task)
            ctx._last = task
            ready = task.npending == 0
        if ready:
            self._ready.put(task)
        return task

    # -- host side waits -----------------------------------------------------

    def wait_tasks(self, tasks: Iterable[_Task | None], reason: str,
                   timeout: float | None = None) -> None:
        pending = [t for t in tasks if t is not None]
        with self._cv:
            if all(t.done for t in pending):
                return
            self.blocking_waits += 1
            self.wait_reasons[reason] = self.wait_reasons.get(reason, 0) + 1
            self._nwaiters += 1
            try:
                deadline = None if timeout is None else time.monotonic() + timeout
                while not all(t.done for t in pending):
                    if deadline is None:
                        self._cv.wait()
                    else:
                        left = deadline - time.monotonic()
                        if left <= 0:
                            raise TimeoutError("stream synchronize timed out (possible deadlock)")
                        self._cv.wait(left)
            finally:
                self._nwaiters -= 1

    def pending_for(self, oid: int, mode: AccessMode) -> list:
        with self._cv:
            rec = self._records.get(oid)
            if rec is None:
                return []
            out = [rec.last_write] if rec.last_write is not None and not rec.last_write.done else []
            if mode.writes:
                out += [t for t in rec.reads if not t.done]
            return out

    def wait_object(self, oid: int, mode: AccessMode, reason: str = "host access") -> BaseException | None:
        """Block until device work conflicting with a host access is complete.

        Returns the error of the last writer, if it failed.
        """
        self.wait_tasks(self.pending_for(oid, mode), reason)
        with self._cv:
            rec = self._records.get(oid)
            return None if rec is None or rec.last_write is None else rec.last_write.error

    def clear_surfaced(self, err: BaseException) -> None:
        """Forget ``err`` on any context that still holds it (it has been reported)."""
        with self._cv:
            self._surfaced.add(id(err))
            self._surfaced_refs.append(err)
            for ctx in list(self._contexts):
                if ctx._error is err:
                    ctx._error = None

    def close(self):
        if self._closed:
            return
        self._closed = True
        for _ in self._threads:
            self._ready.put(None)


class DeviceContext:
    """An ordered task queue (a stream) on a :class:`Device`."""

    def __init__(self, device: Device, after: _Task | None = None):
        self.device = device
        self.id = next(device._ctx_ids)
        device._contexts.add(self)
        self._last: _Task | None = after
        self._join_deps: list[_Task] = []
        self._intents: list[tuple[int, AccessMode, str]] = []
        self._error: BaseException | None = None
        self._joined = False
        self._parent: DeviceContext | None = None

    def __repr__(self):
        return f"DeviceContext(id={self.id})"

    def submit(self, body, reads=(), writes=(), name="task"):
        return self.device.submit(self, reads, writes, body, name)

    def synchronize(self, timeout: float | None = None) -> None:
        dev = self.device
        dev.host_syncs += 1
        dev.wait_tasks([self._last, *self._join_deps], "synchronize", timeout)
        err = self._error
        if err is None:
            with dev._cv:
                for t in self._join_deps:
                    if t.error is not None and id(t.error) not in dev._surfaced:
                        err = t.error
                        break
        if err is not None:
            dev.clear_surfaced(err)
            raise err

    def fork(self, k: int) -> list["DeviceContext"]:
        children = [DeviceContext(self.device, after=self._last) for _ in range(k)]
        for c in children:
            c._parent = self
        return children

    def join(self, children: Iterable["DeviceContext"]) -> None:
        for c in children:
            if c._joined:
                raise StreamUsageError(f"context {c.id} joined twice")
            c._joined = True
            if c._last is not None:
                self._join_deps.append(c._last)

    def mark_intent_begin(self, oid: int, mode: AccessMode, description: str = "") -> None:
        self._intents.append((oid, mode, description))

    def mark_intent_end(self, oid: int, mode: AccessMode, description: str = "") -> None:
        for k in range(len(self._intents) - 1, -1, -1):
            if self._intents[k][0] == oid and self._intents[k][1] is mode:
                del self._intents[k]
                return
        raise StreamUsageError(f"mark_intent_end for object {oid} ({mode.name}) without a begin")


# -- process / rank defaults -------------------------------------------------

_defaults = {
    "workers": int(os.environ["DESKLA_STREAM_WORKERS"]) if os.environ.get("DESKLA_STREAM_WORKERS") else None,
    "deterministic": os.environ.get("DESKLA_STREAM_DETERMINISTIC", "") not in ("", "0"),
}


def set_default_stream_options(workers: int | None = None, deterministic: bool | None = None):
    """Defaults for devices created afterwards (``--stream-workers`` and friends)."""
    if workers is not None:
        _defaults["workers"] = workers
    if deterministic is not None:
        _defaults["deterministic"] = deterministic


def get_device() -> Device:
    """The calling thread's device, created on first use.

    Inside a world every rank gets its own device (ranks model separate GPUs),
    closed when the rank program exits.
    """
    dev = getattr(_tls, "device", None)
    if dev is None:
        dev = getattr(_tls, "worker_device", None)
    if dev is None or dev._closed:
        dev = Device(_defaults["workers"], _defaults["deterministic"])
        _tls.device = dev
        register_rank_cleanup(dev.close)
    return dev


def ctx_get_current() -> DeviceContext:
    return get_device().default_context


def ctx_fork(ctx: DeviceContext, k: int) -> list[DeviceContext]:
    return ctx.fork(k)


def ctx_join(ctx: DeviceContext, children) -> None:
    ctx.join(children)


def ctx_synchronize(ctx: DeviceContext, timeout: float | None = None) -> None:
    ctx.synchronize(timeout)


def mark_intent_begin(ctx: DeviceContext, oid: int, mode: AccessMode, description: str = ""):
    ctx.mark_intent_begin(oid, mode, description)


def mark_intent_end(ctx: DeviceContext, oid: int, mode: AccessMode, description: str = ""):
    ctx.mark_intent_end(oid, mode, description)


def task_submit(ctx: DeviceContext, reads=(), writes=(), body: Callable[[], None] = None,
                name: str = "task"):
    """Enqueue ``body`` on ``ctx`` with the given read/write object ids."""
    return ctx.device.submit(ctx, reads, writes, body if body is not None else _noop, name)


def _noop():
    pass


# -- managed scalars ---------------------------------------------------------

HOST = 1
DEVICE = 2


class Expr:
    """Symbolic scalar expression over managed scalars and literals."""

    __slots__ = ("op", "args", "depth")

    def __init__(self, op: str, *args):
        self.op = op
        self.args = args
        self.depth = 1 + max((a.depth for a in args if isinstance(a, Expr)), default=0)
        if self.depth > MAX_EXPR_DEPTH:
            raise ValueError(f"expression depth exceeds {MAX_EXPR_DEPTH}")

    def leaves(self) -> list["ManagedScalar"]:
        out, stack = {}, [self]
        while stack:
            e = stack.pop()
            if e.op == "ref":
                out[e.args[0].id] = e.args[0]
            else:
                stack.extend(a for a in e.args if isinstance(a, Expr))
        return list(out.values())

    def evaluate(self) -> float:
        """Evaluate in the device domain (called from a task body)."""
        op, a = self.op, self.args
        if op == "lit":
            return a[0]
        if op == "ref":
            return a[0]._device_get()
        if op == "neg":
            return -a[0].evaluate()
        if op == "sqrt":
            return math.sqrt(a[0].evaluate())
        x, y = a[0].evaluate(), a[1].evaluate()
        if op == "add":
            return x + y
        if op == "sub":
            return x - y
        if op == "mul":
            return x * y
        if y == 0.0:
            raise ZeroDivisionError("managed scalar division by zero")
        return x / y

    # arithmetic builds larger expressions
    def __add__(self, o): return Expr("add", self, _wrap(o))
    def __radd__(self, o): return Expr("add", _wrap(o), self)
    def __sub__(self, o): return Expr("sub", self, _wrap(o))
    def __rsub__(self, o): return Expr("sub", _wrap(o), self)
    def __mul__(self, o): return Expr("mul", self, _wrap(o))
    def __rmul__(self, o): return Expr("mul", _wrap(o), self)
    def __truediv__(self, o): return Expr("div", self, _wrap(o))
    def __rtruediv__(self, o): return Expr("div", _wrap(o), self)
    def __neg__(self): return Expr("neg", self)


def _wrap(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, ManagedScalar):
        return Expr("ref", v)
    return Expr("lit", float(v))


def sqrt(v) -> Expr:
    return Expr("sqrt", _wrap(v))


class ManagedScalar:
    """A scalar mirrored between host and device, materialized on demand."""

    def __init__(self, value: float | None = None, device: Device | None = None):
        self.device = device if device is not None else get_device()
        self.id = new_object_id()
        self._host = 0.0
        self._dev = 0.0
        self._mask = 0
        self.d2h_copies = 0
        self.h2d_copies = 0
        if value is not None:
            self._host = float(value)
            self._mask = HOST

    def __repr__(self):
        state = {HOST: "host", DEVICE: "device", HOST | DEVICE: "both", 0: "unset"}[self._mask]
        return f"ManagedScalar(id={self.id}, valid={state})"

    @property
    def mask(self) -> int:
        return self._mask

    # device-domain access, only from task bodies
    def _device_get(self) -> float:
        if not self._mask & DEVICE:
            if not self._mask & HOST:
                raise StreamUsageError("managed scalar read before it was written")
            self._dev = self._host
            self._mask |= DEVICE
            self.h2d_copies += 1
        return self._dev

    def _device_set(self, value: float) -> None:
        self._dev = float(value)
        self._mask = DEVICE

    # host-domain access
    def materialize(self) -> float:
        """Drain the work producing this value, then copy it to the host once."""
        dev = self.device
        if dev.pending_for(self.id, AccessMode.READ) or not self._mask & HOST:
            if dev.pending_for(self.id, AccessMode.READ):
                dev.host_syncs += 1
            err = dev.wait_object(self.id, AccessMode.READ, "materialize")
            if err is not None:
                dev.clear_surfaced(err)
                raise err
        if not self._mask & HOST:
            if not self._mask & DEVICE:
                raise StreamUsageError("managed scalar materialized before it was written")
            self._host = self._dev
            self._mask |= HOST
            self.d2h_copies += 1
        return self._host

    @property
    def value(self) -> float:
        return self.materialize()

    def __float__(self):
        return self.materialize()

    def set(self, value: float) -> None:
        """Host-side write; waits for device readers/writers of this scalar."""
        self.device.wait_object(self.id, AccessMode.WRITE, "host write")
        self._host = float(value)
        self._mask = HOST

    def __add__(self, o): return Expr("add", Expr("ref", self), _wrap(o))
    def __radd__(self, o): return Expr("add", _wrap(o), Expr("ref", self))
    def __sub__(self, o): return Expr("sub", Expr("ref", self), _wrap(o))
    def __rsub__(self, o): return Expr("sub", _wrap(o), Expr("ref", self))
    def __mul__(self, o): return Expr("mul", Expr("ref", self), _wrap(o))
    def __rmul__(self, o): return Expr("mul", _wrap(o), Expr("ref", self))
    def __truediv__(self, o): return Expr("div", Expr("ref", self), _wrap(o))
    def __rtruediv__(self, o): return Expr("div", _wrap(o), Expr("ref", self))
    def __neg__(self): return Expr("neg", Expr("ref", self))


def check_binding(ctx: DeviceContext, *scalars: ManagedScalar) -> None:
    for s in scalars:
        if isinstance(s, ManagedScalar) and s.device is not ctx.device:
            raise StreamUsageError(f"{s!r} is bound to a different device than {ctx!r}")


def scalar_eval(expr, ctx: DeviceContext, out: ManagedScalar | None = None) -> ManagedScalar:
    """Enqueue evaluation of ``expr`` on ``ctx``; the result is device-only.

    Division by a value that turns out to be exactly zero fails the task, and
    the error surfaces at the next synchronize or materialize.
    """
    expr = _wrap(expr)
    leaves = expr.leaves()
    check_binding(ctx, *leaves)
    if out is None:
        out = ManagedScalar(device=ctx.device)
    check_binding(ctx, out)

    def body():
        out._device_set(expr.evaluate())

    ctx.device.submit(ctx, [s.id for s in leaves], [out.id], body, "scalar-eval")
    return out


# -- launch latency ----------------------------------------------------------

def measure_submit_latency(mode: str, count: int, ctx: DeviceContext | None = None) -> float:
    """Mean wall time per submission of an empty task.

    ``mode="async"`` enqueues ``count`` tasks and drains once; ``"sync-each"``
    synchronizes after every submission.
    """
    if mode not in ("async", "sync-each"):
        raise ValueError(f"unknown mode {mode!r}")
    if ctx is None:
        ctx = ctx_get_current()
    ctx.synchronize()
    submit = ctx.device.submit
    t0 = time.perf_counter()
    if mode == "async":
        for _ in range(count):
            submit(ctx, (), (), _noop, "empty")
        ctx.synchronize()
    else:
        for _ in range(count):
            submit(ctx, (), (), _noop, "empty")
            ctx.synchronize()
    return (time.perf_counter() - t0) / count
