import threading
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deskla.stream import (
    AccessMode,
    Device,
    ManagedScalar,
    StreamTaskError,
    StreamUsageError,
    ctx_get_current,
    mark_intent_begin,
    mark_intent_end,
    measure_submit_latency,
    new_object_id,
    scalar_eval,
    sqrt,
    task_submit,
)
from oracles import random_stream_program, replay_sequential
from stream_runner import run_on_device


@pytest.fixture(scope="module")
def dev():
    d = Device(workers=4)
    yield d
    d.close()


def test_single_context_runs_in_order(dev):
    ctx = dev.default_context
    seen = []
    for k in range(200):
        ctx.submit(lambda k=k: seen.append(k))
    ctx.synchronize(timeout=10)
    assert seen == list(range(200))


def test_fork_child_sees_parent_write(dev):
    ctx = dev.default_context
    box = [0]
    oid = new_object_id()
    ctx.submit(lambda: (time.sleep(0.01), box.__setitem__(0, 42)), writes=[oid])
    (child,) = ctx.fork(1)
    got = []
    child.submit(lambda: got.append(box[0]), reads=[oid])
    ctx.join([child])
    ctx.synchronize(timeout=10)
    assert got == [42]


def test_write_then_read_across_contexts(dev):
    a, b = dev.default_context.fork(2)
    oid = new_object_id()
    box = [0]
    a.submit(lambda: (time.sleep(0.005), box.__setitem__(0, 1)), writes=[oid])
    got = []
    b.submit(lambda: got.append(box[0]), reads=[oid])
    dev.default_context.join([a, b])
    dev.default_context.synchronize(timeout=10)
    assert got == [1]


def test_independent_contexts_may_overlap():
    d = Device(workers=2)
    try:
        a, b = d.default_context.fork(2)
        gate = threading.Event()
        a.submit(lambda: gate.wait(5))
        b.submit(gate.set)  # would deadlock if the two were serialized
        d.default_context.join([a, b])
        d.default_context.synchronize(timeout=10)
    finally:
        d.close()


def test_intents_order_writes(dev):
    ctx = dev.default_context
    a, b = ctx.fork(2)
    oid = new_object_id()
    log = []
    for c, tag in ((a, "a"), (b, "b"), (a, "a2")):
        mark_intent_begin(c, oid, AccessMode.WRITE)
        c.submit(lambda tag=tag: log.append(tag))
        mark_intent_end(c, oid, AccessMode.WRITE)
    ctx.join([a, b])
    ctx.synchronize(timeout=10)
    assert log == ["a", "b", "a2"]
    with pytest.raises(StreamUsageError):
        mark_intent_end(a, oid, AccessMode.WRITE)


def test_join_twice_rejected(dev):
    ctx = dev.default_context
    (c,) = ctx.fork(1)
    ctx.join([c])
    with pytest.raises(StreamUsageError):
        ctx.join([c])


def test_task_cannot_enqueue_on_own_context(dev):
    ctx = dev.default_context
    ctx.submit(lambda: ctx.submit(lambda: None))
    with pytest.raises(StreamTaskError) as info:
        ctx.synchronize(timeout=10)
    assert isinstance(info.value.original, StreamUsageError)
    ctx.synchronize(timeout=10)  # reported once


def test_scalar_expression_chain(dev):
    ctx = dev.default_context
    a, b, c = ManagedScalar(2.0, dev), ManagedScalar(3.0, dev), ManagedScalar(4.0, dev)
    r = scalar_eval(sqrt((a + b) * c - 4.0) / 2.0, ctx)
    assert r.value == 2.0
    assert r.d2h_copies == 1
    r.value
    assert r.d2h_copies == 1


def test_materialize_counts_only_pending_work():
    d = Device(workers=1)
    try:
        ctx = d.default_context
        a = ManagedScalar(1.0, d)
        before = d.host_syncs
        a.value
        assert d.host_syncs == before
        gate = threading.Event()
        ctx.submit(lambda: gate.wait(5))
        r = scalar_eval(a + 1.0, ctx)
        gate.set()
        assert r.value == 2.0
        assert d.host_syncs == before + 1
    finally:
        d.close()


def test_division_by_zero_surfaces_once(dev):
    ctx = dev.default_context
    z = ManagedScalar(0.0, dev)
    r = scalar_eval(1.0 / z, ctx)
    with pytest.raises(StreamTaskError) as info:
        r.value
    assert isinstance(info.value.original, ZeroDivisionError)
    ctx.synchronize(timeout=10)


def test_error_poisons_dependents(dev):
    ctx = dev.default_context
    a, b = ctx.fork(2)
    oid = new_object_id()
    ran = []

    def fail():
        raise RuntimeError("bad")

    a.submit(fail, writes=[oid])
    b.submit(lambda: ran.append(1), reads=[oid])
    ctx.join([a, b])
    with pytest.raises(StreamTaskError):
        ctx.synchronize(timeout=10)
    assert ran == []


def test_scalar_from_other_device_rejected(dev):
    other = Device(workers=1)
    try:
        s = ManagedScalar(1.0, other)
        with pytest.raises(StreamUsageError):
            scalar_eval(s + 1.0, dev.default_context)
    finally:
        other.close()


def test_watchdog_timeout():
    d = Device(workers=1)
    try:
        gate = threading.Event()
        d.default_context.submit(lambda: gate.wait(5))
        with pytest.raises(TimeoutError):
            d.default_context.synchronize(timeout=0.05)
        gate.set()
        d.default_context.synchronize(timeout=5)
    finally:
        d.close()


def test_submit_latency_modes():
    for mode in ("async", "sync-each"):
        assert measure_submit_latency(mode, 50) > 0
    with pytest.raises(ValueError):
        measure_submit_latency("eager", 1)


def test_current_context_per_thread():
    ctxs = []
    t = threading.Thread(target=lambda: ctxs.append(ctx_get_current()))
    t.start()
    t.join()
    assert ctxs[0].device is not ctx_get_current().device


def test_task_submit_defaults(dev):
    task_submit(dev.default_context)
    dev.default_context.synchronize(timeout=5)


@given(st.integers(0, 2**32 - 1))
def test_random_programs_serialize(dev, seed):
    rng = np.random.default_rng(seed)
    k, nobj, tasks = random_stream_program(rng)
    state, log = run_on_device(dev, k, nobj, tasks, jitter=0.2, seed=seed)
    assert (state, log) == replay_sequential(nobj, tasks)


def test_deterministic_device_uses_one_worker():
    d = Device(workers=8, deterministic=True)
    try:
        assert d.workers == 1
        rng = np.random.default_rng(3)
        k, nobj, tasks = random_stream_program(rng)
        assert run_on_device(d, k, nobj, tasks) == replay_sequential(nobj, tasks)
    finally:
        d.close()
