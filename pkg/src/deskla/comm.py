"""In-process message passing among ranks that run as threads.

A *world* of ``R`` ranks is started with :func:`spawn_world`; each rank
receives a :class:`Communicator` handle and runs the user program on its own
thread.  Point-to-point messages are opaque byte strings delivered FIFO per
``(sender, receiver, tag)`` channel.  Collectives are built on top of the
point-to-point layer with reserved negative tags, so user tags must be
non-negative.
"""
from __future__ import annotations

import enum
import struct
import threading
import time
from collections import Counter, deque
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "ReduceOp",
    "Communicator",
    "WorldError",
    "WorldAborted",
    "WorldShutdown",
    "UndeliveredMessages",
    "spawn_world",
    "comm_self",
    "encode_array",
    "decode_array",
    "register_rank_cleanup",
]


class ReduceOp(enum.Enum):
    REPLACE = "replace"
    SUM = "sum"


class WorldError(RuntimeError):
    """A rank program raised; ``rank`` names the first failing rank."""

    def __init__(self, rank: int, exc: BaseException):
        super().__init__(f"rank {rank} failed: {exc!r}")
        self.rank = rank
        self.original = exc


class WorldAborted(RuntimeError):
    pass


class WorldShutdown(RuntimeError):
    pass


class UndeliveredMessages(RuntimeError):
    def __init__(self, leftovers: dict):
        desc = ", ".join(
            f"{src}->{dst} tag={tag} x{n}" for (dst, src, tag), n in sorted(leftovers.items())
        )
        super().__init__(f"undelivered messages at world teardown: {desc}")
        self.leftovers = leftovers


# reserved tags for collectives
_TAG_REDUCE = -1
_TAG_RESULT = -2
_TAG_GATHER = -3
_TAG_ALLTOALL = -4
_TAG_BARRIER = -5


def encode_array(arr: np.ndarray) -> bytes:
    """Serialize a numeric array (dtype + shape header, raw little-endian data)."""
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.str.encode()
    header = struct.pack("<B", len(dt)) + dt + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}q", *arr.shape)
    return header + arr.tobytes()


def decode_array(payload: bytes) -> np.ndarray:
    """Inverse of :func:`encode_array`.  The result is a read-only view."""
    ndt = payload[0]
    dt = np.dtype(payload[1 : 1 + ndt].decode())
    pos = 1 + ndt
    ndim = payload[pos]
    pos += 1
    shape = struct.unpack_from(f"<{ndim}q", payload, pos)
    pos += 8 * ndim
    return np.frombuffer(payload, dtype=dt, offset=pos).reshape(shape)


class _Mailbox:
    __slots__ = ("cv", "queues")

    def __init__(self):
        self.cv = threading.Condition()
        self.queues: dict[tuple, deque] = {}


class _World:
    def __init__(self, size: int, timeout: float | None):
        self.size = size
        self.timeout = timeout
        self.mailboxes = [_Mailbox() for _ in range(size)]
        self.finished = [False] * size
        self.aborted: BaseException | None = None
        self.stats = [Counter() for _ in range(size)]
        self.stats_locks = [threading.Lock() for _ in range(size)]

    def wake_all(self):
        for box in self.mailboxes:
            with box.cv:
                box.cv.notify_all()

    def leftovers(self) -> dict:
        out = {}
        for dst, box in enumerate(self.mailboxes):
            for (ctx, src, tag), q in box.queues.items():
                if q:
                    out[(dst, src, tag)] = out.get((dst, src, tag), 0) + len(q)
        return out


_local = threading.local()


def register_rank_cleanup(fn: Callable[[], None]) -> None:
    """Run ``fn`` when the calling rank's program exits (no-op outside a world)."""
    hooks = getattr(_local, "cleanups", None)
    if hooks is not None:
        hooks.append(fn)


class Communicator:
    """Handle owned by one rank.  Handles are not shared between threads."""

    def __init__(self, world: _World, rank: int, context: tuple = ()):
        self._world = world
        self.rank = rank
        self.size = world.size
        self._context = context
        self._ndup = 0
        self._stream_comm: Communicator | None = None

    def __repr__(self):
        return f"Communicator(rank={self.rank}, size={self.size}, context={self._context})"

    @property
    def stats(self) -> Counter:
        """Per-rank counters (shared by every duplicate of this handle)."""
        return self._world.stats[self.rank]

    def _count(self, key: str, n: int = 1):
        with self._world.stats_locks[self.rank]:
            self._world.stats[self.rank][key] += n

    def dup(self) -> "Communicator":
        """Collective: a handle with a private tag space on the same ranks."""
        self._ndup += 1
        return Communicator(self._world, self.rank, context=self._context + (self._ndup,))

    @property
    def stream_comm(self) -> "Communicator":
        """Duplicate reserved for collectives issued from stream tasks."""
        if self._stream_comm is None:
            self._stream_comm = Communicator(self._world, self.rank, context=self._context + ("stream",))
        return self._stream_comm

    # -- point to point ------------------------------------------------------

    def _check_peer(self, peer: int):
        if not 0 <= peer < self.size:
            raise ValueError(f"rank {peer} out of range [0, {self.size})")

    def send(self, dest: int, tag: int, payload: bytes) -> None:
        if tag < 0:
            raise ValueError("user tags must be non-negative")
        self._send(dest, tag, payload)

    def recv(self, src: int, tag: int, timeout: float | None = None) -> bytes:
        if tag < 0:
            raise ValueError("user tags must be non-negative")
        return self._recv(src, tag, timeout)

    def _send(self, dest: int, tag: int, payload) -> None:
        self._check_peer(dest)
        data = bytes(payload)
        box = self._world.mailboxes[dest]
        key = (self._context, self.rank, tag)
        with box.cv:
            q = box.queues.get(key)
            if q is None:
                q = box.queues[key] = deque()
            q.append(data)
            box.cv.notify_all()
        self._count("sends")
        self._count("bytes_sent", len(data))

    def _recv(self, src: int, tag: int, timeout: float | None = None) -> bytes:
        self._check_peer(src)
        world = self._world
        box = world.mailboxes[self.rank]
        key = (self._context, src, tag)
        if timeout is None:
            timeout = world.timeout
        deadline = None if timeout is None else time.monotonic() + timeout
        with box.cv:
            while True:
                q = box.queues.get(key)
                if q:
                    data = q.popleft()
                    break
                if world.aborted is not None:
                    raise WorldAborted(f"rank {self.rank}: world aborted while receiving")
                if world.finished[src] and src != self.rank:
                    raise WorldShutdown(
                        f"world shut down: rank {src} exited with no message for "
                        f"rank {self.rank} (tag {tag})"
                    )
                if deadline is None:
                    box.cv.wait()
                else:
                    left = deadline - time.monotonic()
                    if left <= 0:
                        raise TimeoutError(
                            f"rank {self.rank}: recv from {src} tag {tag} timed out"
                        )
                    box.cv.wait(left)
        self._count("recvs")
        return data

    # -- collectives ---------------------------------------------------------

    def allreduce(self, values, op: ReduceOp = ReduceOp.SUM) -> np.ndarray:
        """Element-wise sum over ranks, accumulated in ascending rank order.

        Implemented as gather-to-0 followed by a broadcast, which makes the
        result bit-identical on every rank and across repeated runs.
        """
        if op is not ReduceOp.SUM:
            raise ValueError("allreduce supports SUM only")
        vals = np.atleast_1d(np.asarray(values, dtype=np.float64))
        self._count("allreduce")
        if self.size == 1:
            return vals.copy()
        if self.rank != 0:
            self._send(0, _TAG_REDUCE, encode_array(vals))
            reply = self._recv(0, _TAG_RESULT)
            if reply[:1] == b"E":
                raise ValueError(reply[1:].decode())
            return decode_array(reply[1:]).copy()
        acc = vals.copy()
        err = None
        for r in range(1, self.size):
            contrib = decode_array(self._recv(r, _TAG_REDUCE))
            if err is None and contrib.shape != acc.shape:
                err = (
                    f"allreduce length mismatch: rank 0 has {acc.shape[0]}, "
                    f"rank {r} has {contrib.shape[0]}"
                )
            if err is None:
                acc = acc + contrib
        reply = b"E" + err.encode() if err else b"K" + encode_array(acc)
        for r in range(1, self.size):
            self._send(r, _TAG_RESULT, reply)
        if err:
            raise ValueError(err)
        return acc

    def allgather(self, payload: bytes) -> list[bytes]:
        """Every rank receives the list of all ranks' payloads (rank order)."""
        self._count("allgather")
        if self.size == 1:
            return [bytes(payload)]
        for r in range(self.size):
            if r != self.rank:
                self._send(r, _TAG_GATHER, payload)
        out = []
        for r in range(self.size):
            out.append(bytes(payload) if r == self.rank else self._recv(r, _TAG_GATHER))
        return out

    def alltoall(self, payloads: Sequence[bytes]) -> list[bytes]:
        """``payloads[r]`` goes to rank ``r``; returns what each rank sent here."""
        if len(payloads) != self.size:
            raise ValueError("alltoall needs one payload per rank")
        self._count("alltoall")
        for r in range(self.size):
            if r != self.rank:
                self._send(r, _TAG_ALLTOALL, payloads[r])
        return [
            bytes(payloads[r]) if r == self.rank else self._recv(r, _TAG_ALLTOALL)
            for r in range(self.size)
        ]

    def barrier(self) -> None:
        self.allgather(b"")

    def allreduce_max(self, value: float) -> float:
        vals = [decode_array(p)[0] for p in self.allgather(encode_array(np.array([value], float)))]
        return float(max(vals))


def spawn_world(
    R: int,
    program: Callable[[Communicator], Any],
    *,
    timeout: float | None = None,
    check_undelivered: bool = True,
) -> list:
    """Run ``program(comm)`` on ``R`` concurrent rank threads.

    Returns the per-rank results in rank order.  If any rank raises, the world
    is aborted (blocked receives on other ranks fail) and :class:`WorldError`
    naming the first failing rank is raised.  ``timeout`` bounds every blocking
    receive and acts as a deadlock watchdog.
    """
    if R < 1:
        raise ValueError("world size must be >= 1")
    world = _World(R, timeout)
    results: list = [None] * R
    failures: list[tuple[float, int, BaseException]] = []
    flock = threading.Lock()

    def runner(rank: int):
        _local.cleanups = []
        comm = Communicator(world, rank)
        try:
            results[rank] = program(comm)
        except BaseException as exc:  # noqa: BLE001 - re-raised by the spawner
            with flock:
                failures.append((time.monotonic(), rank, exc))
                if world.aborted is None:
                    world.aborted = exc
            world.wake_all()
        finally:
            for fn in reversed(_local.cleanups):
                try:
                    fn()
                except Exception:  # noqa: BLE001
                    pass
            _local.cleanups = None
            world.finished[rank] = True
            world.wake_all()

    if R == 1:
        runner(0)
    else:
        threads = [
            threading.Thread(target=runner, args=(r,), name=f"rank-{r}", daemon=True)
            for r in range(R)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    if failures:
        # primary failure: the first one that is not a consequence of the abort
        failures.sort(key=lambda f: f[0])
        primary = next(
            (f for f in failures if not isinstance(f[2], (WorldAborted, WorldShutdown))),
            failures[0],
        )
        raise WorldError(primary[1], primary[2]) from primary[2]
    if check_undelivered:
        left = world.leftovers()
        if left:
            raise UndeliveredMessages(left)
    return results


def comm_self() -> Communicator:
    """A single-rank communicator usable from the calling thread."""
    return Communicator(_World(1, None), 0)
