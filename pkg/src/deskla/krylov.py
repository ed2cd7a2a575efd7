"""Krylov solvers: CG and TFQMR in blocking and stream-ordered form, Jacobi
preconditioning, and batched TFQMR/BiCG over many small systems.

The blocking solvers synchronize the host on every global reduction.  The
``*_async`` solvers enqueue all vector work, reductions and scalar
arithmetic on a device context and only wait for the device every
``check_stride`` iterations, when the true residual is checked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .comm import comm_self
from .core_la import (
    DistVector,
    local_dot,
    vec_aypx,
    vec_aypx_async,
    vec_axpy,
    vec_axpy_async,
    vec_copy,
    vec_copy_async,
    vec_dot,
    vec_dot_async,
    vec_norm,
    vec_norm_async,
    vec_pointwise_mult,
    vec_pointwise_mult_async,
    vec_scale,
    vec_scale_async,
    vec_waxpy,
    vec_waxpy_async,
)
from .mat import DistCsrMatrix, mat_from_global, mat_get_diagonal, mat_mult, mat_mult_async
from .stream import (
    DeviceContext,
    ManagedScalar,
    StreamTaskError,
    ctx_get_current,
    scalar_eval,
    sqrt,
    task_submit,
)

__all__ = [
    "SolverConfig",
    "SolveReport",
    "NotSPDError",
    "BreakdownError",
    "JacobiPC",
    "pc_jacobi_setup",
    "pc_apply",
    "solve_cg",
    "solve_cg_async",
    "solve_tfqmr",
    "solve_tfqmr_async",
    "solve",
    "BatchedSystem",
    "solve_batched",
    "solve_ensemble",
    "bicg_solo",
]

METHODS = ("cg", "cg_async", "tfqmr", "tfqmr_async", "bicg_batched", "tfqmr_batched")
BREAKDOWN_TOL = 1e-300
# TFQMR stops as stagnated once tau*sqrt(m) <= QUASI_FLOOR * rtol * |Mb|
QUASI_FLOOR = float(np.finfo(np.float64).eps)


class NotSPDError(ArithmeticError):
    pass


class BreakdownError(ArithmeticError):
    pass


@dataclass
class SolverConfig:
    method: str = "cg"
    rtol: float = 1e-8
    max_it: int = 10_000
    check_stride: int = 20
    pc: str = "none"
    domain: str = "host"  # where blocking CG runs: host arrays or device tasks

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not self.rtol > 0:
            raise ValueError("rtol must be positive")
        if self.max_it < 1:
            raise ValueError("max_it must be >= 1")
        if self.check_stride < 1:
            raise ValueError("check_stride must be >= 1")
        if self.pc not in ("none", "jacobi"):
            raise ValueError(f"unknown preconditioner {self.pc!r}")
        if self.domain not in ("host", "device"):
            raise ValueError(f"unknown domain {self.domain!r}")


@dataclass
class SolveReport:
    iterations: int
    residual: float  # true relative residual, recomputed from scratch
    converged: bool
    sync_points: int = 0
    reductions: int = 0
    reason: str = ""

    def __post_init__(self):
        if self.converged and not self.residual <= self._rtol_hint:
            raise AssertionError("converged report with residual above tolerance")

    _rtol_hint: float = field(default=math.inf, repr=False)


# -- Jacobi ----------------------------------------------------------------------

class JacobiPC:
    """Inverse of the matrix diagonal, applied pointwise."""

    def __init__(self, inv_diag: DistVector):
        self.inv_diag = inv_diag

    def apply(self, r: DistVector, z: DistVector) -> None:
        vec_pointwise_mult(z, self.inv_diag, r)

    def apply_async(self, ctx: DeviceContext, r: DistVector, z: DistVector) -> None:
        vec_pointwise_mult_async(ctx, z, self.inv_diag, r)


def pc_jacobi_setup(A: DistCsrMatrix) -> JacobiPC:
    """Collective; raises ``ZeroDivisionError`` naming the first zero-diagonal row."""
    d = mat_get_diagonal(A)
    dl = d.host_view()
    zero = np.flatnonzero(dl == 0.0)
    msg = f"zero diagonal in row {d.start + int(zero[0])}" if zero.size else None
    if A.comm.allreduce([float(zero.size)])[0]:
        raise ZeroDivisionError(msg or "zero diagonal on another rank")
    return JacobiPC(DistVector.like(d, 1.0 / dl))


def pc_apply(pc: JacobiPC | None, r: DistVector, z: DistVector | None = None) -> DistVector:
    z = DistVector.like(r) if z is None else z
    if pc is None:
        vec_copy(r, z)
    else:
        pc.apply(r, z)
    return z


def _true_residual(A, b, x, work) -> float:
    mat_mult(A, x, work)
    vec_aypx(work, -1.0, b)
    return vec_norm(work)


def _relative(num: float, den: float) -> float:
    return num / den if den > 0 else num


class _Ledger:
    """Counts blocking reductions (sync points) and all global reductions."""

    def __init__(self, comm):
        self.comm = comm
        self.start = comm.stats["allreduce"]
        self.syncs = 0

    @property
    def reductions(self) -> int:
        return self.comm.stats["allreduce"] - self.start


# -- CG ------------------------------------------------------------------------------

def solve_cg(A: DistCsrMatrix, b: DistVector, x0: DistVector | None = None,
             config: SolverConfig | None = None):
    """Preconditioned conjugate gradients with two reductions per iteration.

    Returns ``(x, SolveReport)``.  Raises :class:`NotSPDError` when
    ``p.Ap <= 0``; hitting ``max_it`` returns ``converged=False``.  With
    ``config.domain == "device"`` the vector work runs as device tasks and
    the host waits for every reduction result.
    """
    cfg = config or SolverConfig("cg")
    if cfg.domain == "device":
        return solve_cg_async(A, b, x0, cfg, blocking=True)
    pc = pc_jacobi_setup(A) if cfg.pc == "jacobi" else None
    led = _Ledger(A.comm)
    x = x0.duplicate() if x0 is not None else DistVector.like(b)
    r, q, work = DistVector.like(b), DistVector.like(b), DistVector.like(b)

    bnorm = vec_norm(b)
    led.syncs += 1
    mat_mult(A, x, r)
    vec_aypx(r, -1.0, b)
    z = pc_apply(pc, r) if pc else r
    p = z.duplicate()
    rz = vec_dot(r, z)
    led.syncs += 1
    rnorm = math.sqrt(max(rz, 0.0)) if pc is None else vec_norm(r)
    led.syncs += pc is not None

    it, converged, true_res = 0, False, _relative(rnorm, bnorm)
    if bnorm == 0.0 or true_res <= cfg.rtol:
        converged = True
    while not converged and it < cfg.max_it:
        it += 1
        mat_mult(A, p, q)
        pq = vec_dot(p, q)
        led.syncs += 1
        if not pq > 0.0:
            raise NotSPDError(f"matrix not SPD (p.Ap = {pq:g} at iteration {it})")
        alpha = rz / pq
        vec_axpy(x, alpha, p)
        vec_axpy(r, -alpha, q)
        if pc is not None:
            pc.apply(r, z)
        rz_new = vec_dot(r, z)
        led.syncs += 1
        if pc is None:
            rnorm = math.sqrt(max(rz_new, 0.0))
        else:
            rnorm = vec_norm(r)
            led.syncs += 1
        if rnorm <= cfg.rtol * bnorm:
            true_res = _relative(_true_residual(A, b, x, work), bnorm)
            led.syncs += 1
            if true_res <= cfg.rtol:
                converged = True
                break
        beta = rz_new / rz
        rz = rz_new
        vec_aypx(p, beta, z)
    if not converged:
        true_res = _relative(_true_residual(A, b, x, work), bnorm)
        led.syncs += 1
    return x, SolveReport(it, true_res, converged, led.syncs, led.reductions,
                          "converged" if converged else "max_it", _rtol_hint=cfg.rtol)


def _guard_den(ctx, num: ManagedScalar, den: ManagedScalar, check, name: str, extra=(),
               solved_at: tuple[ManagedScalar, int] | None = None, live: ManagedScalar | None = None):
    """Enqueue a check on ``den`` before ``num / den`` is evaluated.

    ``0 / 0`` only happens after the iteration has already solved the system
    exactly; the denominator is then replaced by 1 so the step is a no-op,
    and ``solved_at`` (scalar, iteration) records when that first happened.
    Once ``live`` is 0 the iteration is frozen and a zero denominator is
    replaced by 1 without checking.  Otherwise ``check(num, den, *extra)``
    may raise.
    """
    flag = [solved_at[0].id] if solved_at else []
    halt = [live.id] if live is not None else []

    def body():
        a, d = num._device_get(), den._device_get()
        if live is not None and live._device_get() == 0.0:
            if d == 0.0:
                den._device_set(1.0)
            return
        if a == 0.0 and d == 0.0:
            den._device_set(1.0)
            if solved_at and solved_at[0]._device_get() < 0:
                solved_at[0]._device_set(float(solved_at[1]))
            return
        check(a, d, *(e._device_get() for e in extra))

    task_submit(ctx, reads=[num.id, *(e.id for e in extra), *halt], writes=[den.id, *flag],
                body=body, name=name)


def _guard_tau(ctx, wn: ManagedScalar, tau: ManagedScalar, floor: ManagedScalar, solved: ManagedScalar,
               live: ManagedScalar, stalled: ManagedScalar, it: int):
    """:func:`_guard_den` for ``wn / tau`` plus the TFQMR stagnation test.

    After ``it`` steps, ``tau*sqrt(it) <= floor`` freezes the iteration
    (``live`` becomes 0) and ``stalled`` records ``it``.
    """

    def body():
        a, d = wn._device_get(), tau._device_get()
        if live._device_get() == 0.0:
            if d == 0.0:
                tau._device_set(1.0)
            return
        if a == 0.0 and d == 0.0:
            tau._device_set(1.0)
            if solved._device_get() < 0:
                solved._device_set(float(it))
        elif it > 0 and d * math.sqrt(it) <= floor._device_get():
            live._device_set(0.0)
            stalled._device_set(float(it))
            if d == 0.0:
                tau._device_set(1.0)

    task_submit(ctx, reads=[wn.id, floor.id], writes=[tau.id, solved.id, live.id, stalled.id],
                body=body, name="tau-guard")


def _check_spd(rz, pq):
    if not pq > 0.0:
        raise NotSPDError(f"matrix not SPD (p.Ap = {pq:g})")


def _check_nonzero(what):
    def check(num, den, *_):
        if abs(den) < BREAKDOWN_TOL:
            raise BreakdownError(f"TFQMR breakdown ({what} vanished)")
    return check


def _check_rho(rho_new, rho, wn):
    if abs(rho_new) < BREAKDOWN_TOL and wn != 0.0:
        raise BreakdownError("TFQMR breakdown (rho vanished)")


def _unwrap(exc: StreamTaskError):
    if isinstance(exc.original, (NotSPDError, BreakdownError)):
        return exc.original
    return exc


def _sync(ctx: DeviceContext):
    try:
        ctx.synchronize()
    except StreamTaskError as exc:
        raise _unwrap(exc) from exc


def _value(s: ManagedScalar) -> float:
    try:
        return s.value
    except StreamTaskError as exc:
        raise _unwrap(exc) from exc


def solve_cg_async(A: DistCsrMatrix, b: DistVector, x0: DistVector | None = None,
                   config: SolverConfig | None = None, ctx: DeviceContext | None = None,
                   blocking: bool = False):
    """CG with every operation enqueued on ``ctx``.

    The host waits only at convergence checks, every ``check_stride``
    iterations and at ``max_it``; each check enqueues a true-residual
    computation so one synchronization answers it.  ``blocking=True`` gives
    the device-resident blocking baseline instead: the host reads every
    reduction result as soon as it is produced.
    """
    cfg = config or SolverConfig("cg_async")
    ctx = ctx or ctx_get_current()
    dev = ctx.device
    pc = pc_jacobi_setup(A) if cfg.pc == "jacobi" else None
    led = _Ledger(A.comm)
    syncs0 = dev.host_syncs
    x = x0.duplicate() if x0 is not None else DistVector.like(b)
    r, q, t = DistVector.like(b), DistVector.like(b), DistVector.like(b)
    z = DistVector.like(b) if pc else r
    p = DistVector.like(b)
    S = lambda v=None: ManagedScalar(v, device=dev)  # noqa: E731
    bn, tn, pq, alpha, nalpha, beta = S(), S(), S(), S(), S(), S()
    rz, rz_new = S(), S()
    solved = S(-1.0)

    vec_norm_async(ctx, b, bn)
    mat_mult_async(ctx, A, x, r)
    vec_aypx_async(ctx, r, -1.0, b)
    if pc:
        pc.apply_async(ctx, r, z)
    vec_copy_async(ctx, z, p)
    vec_dot_async(ctx, r, z, rz)
    rn = S()
    if blocking:
        bnorm = _value(bn)

    it, converged, true_res = 0, False, math.inf
    while it < cfg.max_it:
        it += 1
        mat_mult_async(ctx, A, p, q)
        vec_dot_async(ctx, p, q, pq)
        if blocking:
            _value(pq)
        _guard_den(ctx, rz, pq, _check_spd, "spd-guard", solved_at=(solved, it - 1))
        scalar_eval(rz / pq, ctx, out=alpha)
        scalar_eval(-alpha, ctx, out=nalpha)
        vec_axpy_async(ctx, x, alpha, p)
        vec_axpy_async(ctx, r, nalpha, q)
        if pc:
            pc.apply_async(ctx, r, z)
        vec_dot_async(ctx, r, z, rz_new)
        if blocking:
            if pc:
                vec_norm_async(ctx, r, rn)
                check = _value(rn) <= cfg.rtol * bnorm
            else:
                check = math.sqrt(max(_value(rz_new), 0.0)) <= cfg.rtol * bnorm
        else:
            check = it % cfg.check_stride == 0
        _guard_den(ctx, rz_new, rz, lambda a, d: None, "rz-guard")
        scalar_eval(rz_new / rz, ctx, out=beta)
        vec_aypx_async(ctx, p, beta, z)
        rz, rz_new = rz_new, rz
        if check or it == cfg.max_it:
            mat_mult_async(ctx, A, x, t)
            vec_aypx_async(ctx, t, -1.0, b)
            vec_norm_async(ctx, t, tn)
            _sync(ctx)
            true_res = _relative(tn.value, bn.value)
            if bn.value == 0.0 or true_res <= cfg.rtol:
                converged = True
                break
    x.host_view()
    if solved.value >= 0:
        it = int(solved.value)
    return x, SolveReport(it, true_res, converged, dev.host_syncs - syncs0, led.reductions,
                          "converged" if converged else "max_it", _rtol_hint=cfg.rtol)


# -- TFQMR -----------------------------------------------------------------------------

def solve_tfqmr(A: DistCsrMatrix, b: DistVector, x0: DistVector | None = None,
                config: SolverConfig | None = None):
    """Transpose-free QMR with optional left Jacobi preconditioning.

    Convergence is first detected with the quasi-residual bound
    ``tau*sqrt(m+1)`` and then confirmed with the true residual.
    """
    cfg = config or SolverConfig("tfqmr")
    pc = pc_jacobi_setup(A) if cfg.pc == "jacobi" else None
    led = _Ledger(A.comm)
    x = x0.duplicate() if x0 is not None else DistVector.like(b)
    work = DistVector.like(b)

    def op(src, dst):
        mat_mult(A, src, dst)
        if pc is not None:
            pc.apply(dst, dst)

    bnorm = vec_norm(b)
    led.syncs += 1
    r = DistVector.like(b)
    mat_mult(A, x, r)
    vec_aypx(r, -1.0, b)
    if pc is not None:
        pc.apply(r, r)
        mb = DistVector.like(b)
        pc.apply(b, mb)
        bnorm_pc = vec_norm(mb)
        led.syncs += 1
    else:
        bnorm_pc = bnorm
    u, w, rstar = r.duplicate(), r.duplicate(), r.duplicate()
    u_next = DistVector.like(b)
    v = DistVector.like(b)
    op(u, v)
    uhat = v.duplicate()
    d = DistVector.like(b)
    theta = eta = 0.0
    rho = vec_dot(rstar, r)
    led.syncs += 1
    tau = math.sqrt(max(rho, 0.0))
    alpha = 0.0

    it, converged, stalled = 0, False, False
    true_res = _relative(_true_residual(A, b, x, work), bnorm)
    led.syncs += 1
    if bnorm == 0.0 or true_res <= cfg.rtol:
        converged = True
    while not converged and it < cfg.max_it:
        even = it % 2 == 0
        if even:
            vtr = vec_dot(rstar, v)
            led.syncs += 1
            if abs(vtr) < BREAKDOWN_TOL:
                raise BreakdownError("TFQMR breakdown (rstar.v vanished)")
            alpha = rho / vtr
            vec_waxpy(u_next, -alpha, v, u)
        vec_axpy(w, -alpha, uhat)
        coef = theta * theta / alpha * eta
        vec_aypx(d, coef, u)
        wnorm = vec_norm(w)
        led.syncs += 1
        theta = wnorm / tau
        c = 1.0 / math.sqrt(1.0 + theta * theta)
        tau = tau * theta * c
        eta = c * c * alpha
        vec_axpy(x, eta, d)
        it += 1
        if tau * math.sqrt(it) <= cfg.rtol * bnorm_pc:
            true_res = _relative(_true_residual(A, b, x, work), bnorm)
            led.syncs += 1
            if true_res <= cfg.rtol:
                converged = True
                break
        if tau * math.sqrt(it) <= QUASI_FLOOR * cfg.rtol * bnorm_pc:
            # the quasi-residual is far below target but the true residual is not
            stalled = True
            break
        if not even:
            rho_new = vec_dot(rstar, w)
            led.syncs += 1
            if abs(rho_new) < BREAKDOWN_TOL:
                raise BreakdownError("TFQMR breakdown (rho vanished)")
            beta = rho_new / rho
            vec_aypx(u, beta, w)
            vec_aypx(v, beta, uhat)
            vec_scale(v, beta)
            op(u, uhat)
            vec_axpy(v, 1.0, uhat)
            rho = rho_new
        else:
            op(u_next, uhat)
            u, u_next = u_next, u
    if not converged:
        true_res = _relative(_true_residual(A, b, x, work), bnorm)
        led.syncs += 1
    reason = "converged" if converged else "stagnation" if stalled else "max_it"
    return x, SolveReport(it, true_res, converged, led.syncs, led.reductions, reason,
                          _rtol_hint=cfg.rtol)


def solve_tfqmr_async(A: DistCsrMatrix, b: DistVector, x0: DistVector | None = None,
                      config: SolverConfig | None = None, ctx: DeviceContext | None = None):
    """Stream-ordered TFQMR; scalar recurrences run as managed-scalar kernels."""
    cfg = config or SolverConfig("tfqmr_async")
    ctx = ctx or ctx_get_current()
    dev = ctx.device
    pc = pc_jacobi_setup(A) if cfg.pc == "jacobi" else None
    led = _Ledger(A.comm)
    syncs0 = dev.host_syncs
    x = x0.duplicate() if x0 is not None else DistVector.like(b)
    V = lambda: DistVector.like(b)  # noqa: E731
    S = lambda v=None: ManagedScalar(v, device=dev)  # noqa: E731
    r, u, w, rstar, u_next, v, uhat, d, t = (V() for _ in range(9))

    def op(src, dst):
        mat_mult_async(ctx, A, src, dst)
        if pc is not None:
            pc.apply_async(ctx, dst, dst)

    bn, tn, rho, rho_new, vtr, alpha, nalpha, wn, beta = (S() for _ in range(9))
    theta, eta, c, coef, tau, tte, aden = S(0.0), S(0.0), S(), S(), S(), S(), S()
    solved, stalled, live, floor = S(-1.0), S(-1.0), S(1.0), S()

    vec_norm_async(ctx, b, bn)
    if pc is not None:
        pc.apply_async(ctx, b, t)
        vec_norm_async(ctx, t, tn)
        scalar_eval(tn * (QUASI_FLOOR * cfg.rtol), ctx, out=floor)
    else:
        scalar_eval(bn * (QUASI_FLOOR * cfg.rtol), ctx, out=floor)
    mat_mult_async(ctx, A, x, r)
    vec_aypx_async(ctx, r, -1.0, b)
    if pc is not None:
        pc.apply_async(ctx, r, r)
    for dst in (u, w, rstar):
        vec_copy_async(ctx, r, dst)
    op(u, v)
    vec_copy_async(ctx, v, uhat)
    vec_dot_async(ctx, rstar, r, rho)
    scalar_eval(sqrt(rho), ctx, out=tau)

    it, converged, true_res = 0, False, math.inf
    while it < cfg.max_it:
        even = it % 2 == 0
        if even:
            vec_dot_async(ctx, rstar, v, vtr)
            _guard_den(ctx, rho, vtr, _check_nonzero("rstar.v"), "vtr-guard", live=live)
            scalar_eval(rho / vtr, ctx, out=alpha)
            scalar_eval(-alpha, ctx, out=nalpha)
            vec_waxpy_async(ctx, u_next, nalpha, v, u)
        vec_axpy_async(ctx, w, nalpha, uhat)
        scalar_eval(theta * theta * eta, ctx, out=tte)
        scalar_eval(alpha * 1.0, ctx, out=aden)
        _guard_den(ctx, tte, aden, lambda a, d: None, "alpha-guard", live=live)
        scalar_eval(tte / aden, ctx, out=coef)
        vec_aypx_async(ctx, d, coef, u)
        vec_norm_async(ctx, w, wn)
        _guard_tau(ctx, wn, tau, floor, solved, live, stalled, it)
        scalar_eval(wn / tau, ctx, out=theta)
        scalar_eval(1.0 / sqrt(1.0 + theta * theta), ctx, out=c)
        scalar_eval(tau * theta * c, ctx, out=tau)
        scalar_eval(c * c * alpha * live, ctx, out=eta)  # live is 1.0 until stagnation
        vec_axpy_async(ctx, x, eta, d)
        it += 1
        if not even:
            vec_dot_async(ctx, rstar, w, rho_new)
            _guard_den(ctx, rho_new, rho, _check_rho, "rho-guard", extra=(wn,), live=live)
            scalar_eval(rho_new / rho, ctx, out=beta)
            vec_aypx_async(ctx, u, beta, w)
            vec_aypx_async(ctx, v, beta, uhat)
            vec_scale_async(ctx, v, beta)
            op(u, uhat)
            vec_axpy_async(ctx, v, 1.0, uhat)
            rho, rho_new = rho_new, rho
        else:
            op(u_next, uhat)
            u, u_next = u_next, u
        if it % cfg.check_stride == 0 or it == cfg.max_it:
            mat_mult_async(ctx, A, x, t)
            vec_aypx_async(ctx, t, -1.0, b)
            vec_norm_async(ctx, t, tn)
            _sync(ctx)
            true_res = _relative(tn.value, bn.value)
            if bn.value == 0.0 or true_res <= cfg.rtol:
                converged = True
                break
            if live.value == 0.0:
                break
    x.host_view()
    if solved.value >= 0:
        it = int(solved.value)
    elif stalled.value >= 0:
        it = min(it, int(stalled.value))  # later steps were no-ops
    reason = "converged" if converged else "stagnation" if live.value == 0.0 else "max_it"
    return x, SolveReport(it, true_res, converged, dev.host_syncs - syncs0, led.reductions,
                          reason, _rtol_hint=cfg.rtol)


def solve(A, b, x0=None, config: SolverConfig | None = None, ctx=None):
    """Dispatch on ``config.method`` for the distributed solvers."""
    cfg = config or SolverConfig()
    if cfg.method == "cg":
        return solve_cg(A, b, x0, cfg)
    if cfg.method == "cg_async":
        return solve_cg_async(A, b, x0, cfg, ctx)
    if cfg.method == "tfqmr":
        return solve_tfqmr(A, b, x0, cfg)
    if cfg.method == "tfqmr_async":
        return solve_tfqmr_async(A, b, x0, cfg, ctx)
    raise ValueError(f"{cfg.method!r} is a batched method; use solve_batched")


# -- batched solvers ---------------------------------------------------------------------

@dataclass
class BatchedSystem:
    """``B`` small systems sharing one CSR sparsity pattern (structure of arrays)."""

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray  # (B, nnz)
    rhs: np.ndarray  # (B, n)
    x0: np.ndarray | None = None  # (B, n)

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.rhs = np.atleast_2d(np.asarray(self.rhs, dtype=np.float64))
        n, nnz = self.indptr.size - 1, self.indices.size
        if self.values.shape[1] != nnz or self.rhs.shape != (self.values.shape[0], n):
            raise ValueError("batched arrays do not match the shared sparsity")
        if self.values.shape[0] < 1:
            raise ValueError("batch size must be >= 1")
        rows = np.repeat(np.arange(n), np.diff(self.indptr))
        ones = np.ones(nnz)
        self._row_sum = sp.csr_matrix((ones, (rows, np.arange(nnz))), shape=(n, nnz))
        self._col_sum = sp.csr_matrix((ones, (self.indices, np.arange(nnz))), shape=(n, nnz))
        self._rows = rows
        # block-diagonal view sharing ``values``: one kernel call while every lane is active
        B = self.values.shape[0]
        self.values = np.ascontiguousarray(self.values)
        big_idx = (self.indices[None, :] + n * np.arange(B)[:, None]).reshape(-1)
        big_ptr = np.concatenate([(self.indptr[:-1][None, :] + nnz * np.arange(B)[:, None]).reshape(-1),
                                  [B * nnz]])
        self._big = sp.csr_matrix((self.values.reshape(-1), big_idx, big_ptr), shape=(B * n, B * n),
                                  copy=False)
        self._big_t = None

    @property
    def B(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.indptr.size - 1

    def lane_matrix(self, b: int) -> sp.csr_matrix:
        return sp.csr_matrix((self.values[b].copy(), self.indices.copy(), self.indptr.copy()),
                             shape=(self.n, self.n))

    def matvec(self, x: np.ndarray, lanes=slice(None)) -> np.ndarray:
        if isinstance(lanes, slice) and x.shape[0] == self.B:
            return (self._big @ x.reshape(-1)).reshape(x.shape)
        prod = self.values[lanes] * x[:, self.indices]
        return (self._row_sum @ prod.T).T

    def rmatvec(self, x: np.ndarray, lanes=slice(None)) -> np.ndarray:
        if isinstance(lanes, slice) and x.shape[0] == self.B:
            if self._big_t is None:
                self._big_t = self._big.T.tocsr()
            return (self._big_t @ x.reshape(-1)).reshape(x.shape)
        prod = self.values[lanes] * x[:, self._rows]
        return (self._col_sum @ prod.T).T

    def diagonals(self) -> np.ndarray:
        out = np.zeros((self.B, self.n))
        hit = self._rows == self.indices
        out[:, self._rows[hit]] = self.values[:, hit]
        return out

    @classmethod
    def from_matrices(cls, mats, rhs, x0=None) -> "BatchedSystem":
        """Build from same-pattern scipy matrices (the pattern of the first is used)."""
        first = sp.csr_matrix(mats[0])
        first.sort_indices()
        vals = []
        for m in mats:
            m = sp.csr_matrix(m)
            m.sort_indices()
            if m.nnz != first.nnz or not (np.array_equal(m.indices, first.indices)
                                          and np.array_equal(m.indptr, first.indptr)):
                raise ValueError("matrices do not share one sparsity pattern")
            vals.append(m.data)
        return cls(first.indptr, first.indices, np.array(vals), rhs, x0)


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # same per-row summation as local_dot, so a lane reproduces its solo solve
    return np.add.reduce(a * b, axis=1)


def _lanes(act: np.ndarray, B: int):
    # a plain slice keeps every update in-place while all lanes are active
    return slice(None) if act.size == B else act


def _drop(act, keep, *arrays):
    return (act[keep],) + tuple(a[keep] for a in arrays)


def _batched_tfqmr(sys: BatchedSystem, cfg: SolverConfig, dinv):
    B, rtol = sys.B, cfg.rtol
    x = np.zeros((B, sys.n)) if sys.x0 is None else np.array(sys.x0, dtype=float)
    b = sys.rhs

    def op(v, L):
        out = sys.matvec(v, L)
        return out if dinv is None else out * dinv[L]

    bnorm = np.sqrt(_rowdot(b, b))
    safe_b = np.where(bnorm > 0, bnorm, 1.0)
    mb = b if dinv is None else b * dinv
    bnorm_pc = np.sqrt(_rowdot(mb, mb))
    r0 = b - sys.matvec(x)
    tres = np.sqrt(_rowdot(r0, r0)) / safe_b
    r = r0 if dinv is None else r0 * dinv
    u, w, rstar = r.copy(), r.copy(), r.copy()
    v = op(u, slice(None))
    uhat = v.copy()
    u_next = np.zeros_like(u)
    d = np.zeros_like(u)
    theta, eta, alpha = np.zeros(B), np.zeros(B), np.zeros(B)
    rho = _rowdot(rstar, r)
    tau = np.sqrt(np.maximum(rho, 0.0))

    iters = np.zeros(B, dtype=int)
    conv = (bnorm == 0) | (tres <= rtol)
    failed = np.zeros(B, dtype=bool)
    reason = np.array(["converged" if c else "" for c in conv], dtype=object)
    for m in range(cfg.max_it):
        act = np.flatnonzero(~conv & ~failed)
        if act.size == 0:
            break
        L = _lanes(act, B)
        even = m % 2 == 0
        if even:
            vtr = _rowdot(rstar[L], v[L])
            bad = np.abs(vtr) < BREAKDOWN_TOL
            if bad.any():
                failed[act[bad]] = True
                reason[act[bad]] = "breakdown"
                act, vtr = _drop(act, ~bad, vtr)
                L = _lanes(act, B)
            alpha[L] = rho[L] / vtr
            u_next[L] = -alpha[L, None] * v[L] + u[L]
        w[L] += -alpha[L, None] * uhat[L]
        coef = theta[L] * theta[L] / alpha[L] * eta[L]
        d[L] = u[L] + coef[:, None] * d[L]
        wnorm = np.sqrt(_rowdot(w[L], w[L]))
        theta[L] = wnorm / tau[L]
        c = 1.0 / np.sqrt(1.0 + theta[L] * theta[L])
        tau[L] = tau[L] * theta[L] * c
        eta[L] = c * c * alpha[L]
        x[L] += eta[L, None] * d[L]
        iters[L] = m + 1
        hit = act[tau[L] * math.sqrt(m + 1) <= rtol * bnorm_pc[L]]
        if hit.size:
            res = b[hit] - sys.matvec(x[hit], hit)
            tr = np.sqrt(_rowdot(res, res)) / safe_b[hit]
            tres[hit] = tr
            done = hit[tr <= rtol]
            if done.size:
                conv[done] = True
                reason[done] = "converged"
                act = act[~np.isin(act, done)]
                L = _lanes(act, B)
        stall = act[tau[L] * math.sqrt(m + 1) <= QUASI_FLOOR * rtol * bnorm_pc[L]]
        if stall.size:
            failed[stall] = True
            reason[stall] = "stagnation"
            act = act[~np.isin(act, stall)]
            L = _lanes(act, B)
        if not even:
            rho_new = _rowdot(rstar[L], w[L])
            bad = np.abs(rho_new) < BREAKDOWN_TOL
            if bad.any():
                failed[act[bad]] = True
                reason[act[bad]] = "breakdown"
                act, rho_new = _drop(act, ~bad, rho_new)
                L = _lanes(act, B)
            beta = rho_new / rho[L]
            u[L] = w[L] + beta[:, None] * u[L]
            v[L] = uhat[L] + beta[:, None] * v[L]
            v[L] *= beta[:, None]
            uhat[L] = op(u[L], L)
            v[L] += 1.0 * uhat[L]
            rho[L] = rho_new
        else:
            uhat[L] = op(u_next[L], L)
            if isinstance(L, slice):
                u, u_next = u_next, u
            else:
                u[L], u_next[L] = u_next[L], u[L]
    still = ~conv
    if still.any():
        res = b[still] - sys.matvec(x[still], still)
        tres[still] = np.sqrt(_rowdot(res, res)) / safe_b[still]
    return x, iters, conv, tres, reason


def _batched_bicg(sys: BatchedSystem, cfg: SolverConfig, dinv):
    B, rtol = sys.B, cfg.rtol
    x = np.zeros((B, sys.n)) if sys.x0 is None else np.array(sys.x0, dtype=float)
    b = sys.rhs
    minv = np.ones((B, sys.n)) if dinv is None else dinv
    bnorm = np.sqrt(_rowdot(b, b))
    safe_b = np.where(bnorm > 0, bnorm, 1.0)
    r = b - sys.matvec(x)
    rt = r.copy()
    p, pt = np.zeros_like(r), np.zeros_like(r)
    rho_old = np.ones(B)
    tres = np.sqrt(_rowdot(r, r)) / safe_b
    conv = (bnorm == 0) | (tres <= rtol)
    failed = np.zeros(B, dtype=bool)
    reason = np.array(["converged" if c else "" for c in conv], dtype=object)
    iters = np.zeros(B, dtype=int)
    for m in range(cfg.max_it):
        act = np.flatnonzero(~conv & ~failed)
        if act.size == 0:
            break
        L = _lanes(act, B)
        z = minv[L] * r[L]
        zt = minv[L] * rt[L]
        rho = _rowdot(z, rt[L])
        bad = np.abs(rho) < BREAKDOWN_TOL
        if bad.any():
            failed[act[bad]] = True
            reason[act[bad]] = "breakdown"
            act, z, zt, rho = _drop(act, ~bad, z, zt, rho)
            L = _lanes(act, B)
        if m == 0:
            p[L], pt[L] = z, zt
        else:
            beta = rho / rho_old[L]
            p[L] = z + beta[:, None] * p[L]
            pt[L] = zt + beta[:, None] * pt[L]
        q = sys.matvec(p[L], L)
        qt = sys.rmatvec(pt[L], L)
        ptq = _rowdot(pt[L], q)
        bad = np.abs(ptq) < BREAKDOWN_TOL
        if bad.any():
            failed[act[bad]] = True
            reason[act[bad]] = "breakdown"
            act, q, qt, ptq, rho = _drop(act, ~bad, q, qt, ptq, rho)
            L = _lanes(act, B)
        alpha = rho / ptq
        x[L] += alpha[:, None] * p[L]
        r[L] -= alpha[:, None] * q
        rt[L] -= alpha[:, None] * qt
        rho_old[L] = rho
        iters[L] = m + 1
        rn = np.sqrt(_rowdot(r[L], r[L])) / safe_b[L]
        hit = act[rn <= rtol]
        if hit.size:
            res = b[hit] - sys.matvec(x[hit], hit)
            tr = np.sqrt(_rowdot(res, res)) / safe_b[hit]
            tres[hit] = tr
            done = hit[tr <= rtol]
            conv[done] = True
            reason[done] = "converged"
    still = ~conv
    if still.any():
        res = b[still] - sys.matvec(x[still], still)
        tres[still] = np.sqrt(_rowdot(res, res)) / safe_b[still]
    return x, iters, conv, tres, reason


def solve_batched(systems: BatchedSystem, method: str = "tfqmr", config: SolverConfig | None = None):
    """Advance one Krylov iteration loop across all lanes at once.

    Lanes converge independently and are frozen once they do.  A lane that
    breaks down is reported with ``reason="breakdown"`` while the others
    continue.  Returns ``(solutions (B, n), [SolveReport per lane])``.
    """
    cfg = config or SolverConfig(f"{method}_batched")
    dinv = None
    if cfg.pc == "jacobi":
        diag = systems.diagonals()
        zero = np.argwhere(diag == 0.0)
        if zero.size:
            lane, row = (int(t) for t in zero[0])
            raise ZeroDivisionError(f"zero diagonal in lane {lane}, row {row}")
        dinv = 1.0 / diag
    if method == "tfqmr":
        x, iters, conv, tres, reason = _batched_tfqmr(systems, cfg, dinv)
    elif method == "bicg":
        x, iters, conv, tres, reason = _batched_bicg(systems, cfg, dinv)
    else:
        raise ValueError(f"batched method must be 'tfqmr' or 'bicg', not {method!r}")
    reports = []
    for k in range(systems.B):
        reports.append(SolveReport(int(iters[k]), float(tres[k]), bool(conv[k]), 0, 0,
                                   reason[k] or "max_it", _rtol_hint=cfg.rtol))
    return x, reports


def bicg_solo(A: sp.spmatrix, b: np.ndarray, config: SolverConfig | None = None,
              x0: np.ndarray | None = None):
    """Single-system preconditioned BiCG on a rank-local scipy matrix."""
    cfg = config or SolverConfig("bicg_batched")
    A = sp.csr_matrix(A)
    At = A.T.tocsr()
    n = A.shape[0]
    minv = np.ones(n) if cfg.pc == "none" else 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = math.sqrt(local_dot(b, b))
    safe_b = bnorm if bnorm > 0 else 1.0
    r = b - A @ x
    rt = r.copy()
    p = pt = None
    rho_old = 1.0
    tres = math.sqrt(local_dot(r, r)) / safe_b
    if bnorm == 0 or tres <= cfg.rtol:
        return x, SolveReport(0, tres, True, _rtol_hint=cfg.rtol, reason="converged")
    it = 0
    for it in range(1, cfg.max_it + 1):
        z, zt = minv * r, minv * rt
        rho = local_dot(z, rt)
        if abs(rho) < BREAKDOWN_TOL:
            raise BreakdownError("BiCG breakdown (rho vanished)")
        if p is None:
            p, pt = z.copy(), zt.copy()
        else:
            beta = rho / rho_old
            p = z + beta * p
            pt = zt + beta * pt
        q, qt = A @ p, At @ pt
        ptq = local_dot(pt, q)
        if abs(ptq) < BREAKDOWN_TOL:
            raise BreakdownError("BiCG breakdown (pt.q vanished)")
        alpha = rho / ptq
        x += alpha * p
        r -= alpha * q
        rt -= alpha * qt
        rho_old = rho
        if math.sqrt(local_dot(r, r)) / safe_b <= cfg.rtol:
            res = b - A @ x
            tres = math.sqrt(local_dot(res, res)) / safe_b
            if tres <= cfg.rtol:
                return x, SolveReport(it, tres, True, _rtol_hint=cfg.rtol, reason="converged")
    res = b - A @ x
    return x, SolveReport(it, math.sqrt(local_dot(res, res)) / safe_b, False,
                          _rtol_hint=cfg.rtol, reason="max_it")


def solve_ensemble(systems: BatchedSystem, method: str = "tfqmr", config: SolverConfig | None = None):
    """Stack the lanes into one block-diagonal system and solve it monolithically."""
    B, n = systems.B, systems.n
    base = SolverConfig("tfqmr" if method == "tfqmr" else "bicg_batched",
                        rtol=(config or SolverConfig()).rtol,
                        max_it=(config or SolverConfig()).max_it,
                        pc=(config or SolverConfig()).pc)
    big = sp.block_diag([systems.lane_matrix(k) for k in range(B)], format="csr")
    rhs = systems.rhs.reshape(-1)
    x0 = None if systems.x0 is None else np.asarray(systems.x0, float).reshape(-1)
    if method == "tfqmr":
        comm = comm_self()
        A = mat_from_global(comm, big)
        b = DistVector(comm, A.row_layout, rhs)
        xv = None if x0 is None else DistVector(comm, A.row_layout, x0)
        x, rep = solve_tfqmr(A, b, xv, base)
        return x.host_view().reshape(B, n).copy(), rep
    if method == "bicg":
        x, rep = bicg_solo(big, rhs, base, x0)
        return x.reshape(B, n), rep
    raise ValueError(f"ensemble method must be 'tfqmr' or 'bicg', not {method!r}")
