"""Pure numpy Newton power-flow kernel.

This is the fallback for the compiled extension (``cellgrid._newton``); both
expose the same ``newton_solve`` signature and converge to the same solution.
Bus kind codes: 0 slack, 1 pv, 2 pq.
"""

from __future__ import annotations

import numpy as np

COMPILED = False


def calc_injections(g: np.ndarray, b: np.ndarray, v: np.ndarray,
                    delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """P_i, Q_i from the polar power-flow equations."""
    vc = v * np.exp(1j * delta)
    s = vc * np.conj((g + 1j * b) @ vc)
    return s.real, s.imag


def jacobian_full(g: np.ndarray, b: np.ndarray, v: np.ndarray,
                  delta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """All four Jacobian blocks of the injections, over every bus.

    Returns (dP/ddelta, dP/dv, dQ/ddelta, dQ/dv) as dense n-by-n arrays; the
    caller slices out the rows/columns for its bus classification.
    """
    y = g + 1j * b
    vc = v * np.exp(1j * delta)
    ibus = y @ vc
    diag_v = np.diag(vc)
    diag_i = np.diag(ibus)
    diag_vnorm = np.diag(vc / np.abs(vc))
    ds_dvm = diag_v @ np.conj(y @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
    ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
    return ds_dva.real, ds_dvm.real, ds_dva.imag, ds_dvm.imag


def newton_solve(g, b, p_sched, q_sched, v0, delta0, kinds, tol, max_iter):
    """Full Newton iteration with dense partial-pivoting linear solves.

    Returns ``(v, delta, p_calc, q_calc, iterations, converged, singular_iter)``
    where ``singular_iter`` is -1 unless the Jacobian became singular at that
    iteration.  Mismatch convention: scheduled minus calculated injection,
    infinity norm over the non-slack (P) and pq (Q) equations.
    """
    v = np.array(v0, dtype=float)
    delta = np.array(delta0, dtype=float)
    non_slack = np.flatnonzero(kinds != 0)
    pq = np.flatnonzero(kinds == 2)
    n_ns, n_pq = len(non_slack), len(pq)

    p_calc, q_calc = calc_injections(g, b, v, delta)
    for it in range(1, max_iter + 1):
        fp = p_sched[non_slack] - p_calc[non_slack]
        fq = q_sched[pq] - q_calc[pq]
        if max(np.max(np.abs(fp), initial=0.0), np.max(np.abs(fq), initial=0.0)) <= tol:
            return v, delta, p_calc, q_calc, it, True, -1

        dpa, dpv, dqa, dqv = jacobian_full(g, b, v, delta)
        jac = np.empty((n_ns + n_pq, n_ns + n_pq))
        jac[:n_ns, :n_ns] = dpa[np.ix_(non_slack, non_slack)]
        jac[:n_ns, n_ns:] = dpv[np.ix_(non_slack, pq)]
        jac[n_ns:, :n_ns] = dqa[np.ix_(pq, non_slack)]
        jac[n_ns:, n_ns:] = dqv[np.ix_(pq, pq)]
        try:
            dx = np.linalg.solve(jac, np.concatenate([fp, fq]))
        except np.linalg.LinAlgError:
            return v, delta, p_calc, q_calc, it, False, it
        if not np.all(np.isfinite(dx)):
            return v, delta, p_calc, q_calc, it, False, it
        delta[non_slack] += dx[:n_ns]
        v[pq] += dx[n_ns:]
        p_calc, q_calc = calc_injections(g, b, v, delta)

    return v, delta, p_calc, q_calc, max_iter, False, -1
