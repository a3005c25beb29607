"""Newton-Raphson AC power flow over :class:`PerUnitNetwork`.

The inner iteration lives in a kernel selected at import time: the compiled
extension ``cellgrid._newton`` when it built, otherwise the pure numpy twin
``cellgrid._newton_py``.  Set ``CELLGRID_PURE=1`` to force the fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import NotConvergedError, SingularJacobianError
from .netmodel import (PerUnitNetwork, admittance_matrix, apply_setpoints,  # noqa: F401
                       scale_injections)
from . import _newton_py

if os.environ.get("CELLGRID_PURE"):
    _kernel = _newton_py
else:
    try:
        from . import _newton as _kernel  # type: ignore[no-redef]
    except ImportError:
        _kernel = _newton_py

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 30


def kernel_backend() -> str:
    """'compiled' or 'pure', whichever newton_solve dispatches to."""
    return "compiled" if getattr(_kernel, "COMPILED", False) else "pure"


def available_kernels() -> dict[str, object]:
    kernels = {"pure": _newton_py}
    try:
        from . import _newton
        kernels["compiled"] = _newton
    except ImportError:
        pass
    return kernels


@dataclass(frozen=True)
class Jacobian:
    """Power-flow Jacobian blocks of the calculated injections.

    j1 = dP/ddelta and j3 = dQ/ddelta over non-slack buses (columns likewise),
    j2 = dP/dv with columns over pq buses, j4 = dQ/dv over pq buses only.
    """

    j1: np.ndarray
    j2: np.ndarray
    j3: np.ndarray
    j4: np.ndarray
    non_slack_ids: tuple[str, ...]
    pq_ids: tuple[str, ...]


@dataclass(frozen=True)
class PowerFlowSolution:
    bus_ids: tuple[str, ...]
    v: np.ndarray
    delta: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    branch_ids: tuple[str, ...]
    s_from: np.ndarray
    s_to: np.ndarray
    total_losses_mw: float
    losses_i2r_mw: float
    iterations: int
    converged: bool
    max_mismatch: float
    base_mva: float

    def v_at(self, bus_id: str) -> float:
        return float(self.v[self.bus_ids.index(bus_id)])


def _start_point(pun: PerUnitNetwork, warm_start) -> tuple[np.ndarray, np.ndarray]:
    n = pun.n_bus
    if warm_start is not None:
        v = np.array(warm_start[0], dtype=float)
        delta = np.array(warm_start[1], dtype=float)
    else:
        v = np.ones(n)
        delta = np.zeros(n)
    for i, kind in enumerate(pun.bus_kinds):
        if kind in ("slack", "pv"):
            v[i] = pun.v_set[i]
    delta[pun.slack_index] = 0.0
    return v, delta


def solve_power_flow(pun: PerUnitNetwork, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER,
                     warm_start: tuple[np.ndarray, np.ndarray] | None = None,
                     y: np.ndarray | None = None) -> PowerFlowSolution:
    """Solve from a flat start (or ``warm_start=(v, delta)``).

    Non-convergence is reported on the returned solution; a singular Jacobian
    raises :class:`SingularJacobianError` with the iteration number.
    """
    if y is None:
        y = admittance_matrix(pun)
    g, b = np.ascontiguousarray(y.real), np.ascontiguousarray(y.imag)
    p_sched, q_sched = pun.scheduled_injections()
    v0, d0 = _start_point(pun, warm_start)
    v, delta, p_calc, q_calc, iters, converged, singular = _kernel.newton_solve(
        g, b, p_sched, q_sched, v0, d0, pun.kind_codes(), tol, max_iter)
    if singular >= 0:
        raise SingularJacobianError(singular)

    non_slack = pun.non_slack_indices()
    pq = pun.pq_indices()
    fp = np.abs(p_sched[non_slack] - p_calc[non_slack])
    fq = np.abs(q_sched[pq] - q_calc[pq])
    mism = float(max(fp.max(initial=0.0), fq.max(initial=0.0)))

    vc = v * np.exp(1j * delta)
    s_from = np.empty(len(pun.branches), dtype=complex)
    s_to = np.empty(len(pun.branches), dtype=complex)
    for k, br in enumerate(pun.branches):
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        t = br.tap
        vf, vt = vc[br.from_i], vc[br.to_i]
        i_f = (ys + ysh) / (t * t) * vf - ys / t * vt
        i_t = -ys / t * vf + (ys + ysh) * vt
        s_from[k] = vf * np.conj(i_f)
        s_to[k] = vt * np.conj(i_t)

    losses_balance = float(np.sum(p_calc)) * pun.base_mva
    losses_i2r = float(np.sum((s_from + s_to).real)) * pun.base_mva

    return PowerFlowSolution(
        bus_ids=pun.bus_ids, v=v, delta=delta, p_inj=p_calc, q_inj=q_calc,
        branch_ids=tuple(br.id for br in pun.branches),
        s_from=s_from, s_to=s_to,
        total_losses_mw=losses_balance, losses_i2r_mw=losses_i2r,
        iterations=iters, converged=bool(converged), max_mismatch=mism,
        base_mva=pun.base_mva)


def solve_raw(g, b, p_sched, q_sched, v0, d0, kinds, tol=DEFAULT_TOL,
              max_iter=DEFAULT_MAX_ITER):
    """Kernel passthrough for hot loops that manage their own arrays."""
    return _kernel.newton_solve(g, b, p_sched, q_sched, v0, d0, kinds, tol, max_iter)


def jacobian(pun: PerUnitNetwork, v: np.ndarray, delta: np.ndarray,
             y: np.ndarray | None = None) -> Jacobian:
    """Analytic Jacobian blocks at the operating point (v, delta)."""
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("operating point needs finite v > 0")
    if y is None:
        y = admittance_matrix(pun)
    dpa, dpv, dqa, dqv = _newton_py.jacobian_full(
        np.ascontiguousarray(y.real), np.ascontiguousarray(y.imag),
        np.asarray(v, dtype=float), np.asarray(delta, dtype=float))
    ns = pun.non_slack_indices()
    pq = pun.pq_indices()
    return Jacobian(
        j1=dpa[np.ix_(ns, ns)],
        j2=dpv[np.ix_(ns, pq)],
        j3=dqa[np.ix_(pq, ns)],
        j4=dqv[np.ix_(pq, pq)],
        non_slack_ids=tuple(pun.bus_ids[i] for i in ns),
        pq_ids=tuple(pun.bus_ids[i] for i in pq),
    )


def total_losses(sol: PowerFlowSolution) -> float:
    """Network losses in MW (generation minus load balance).

    Only meaningful at convergence; raises on an unconverged solution.
    """
    if not sol.converged:
        raise NotConvergedError(
            f"losses requested on unconverged solution (mismatch {sol.max_mismatch:.3e})")
    return sol.total_losses_mw
