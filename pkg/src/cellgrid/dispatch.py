"""Per-cell voltage dispatch: loss minimization with a voltage-band penalty.

The optimizer is a self-contained DE/rand/1/bin differential evolution over
the reactive setpoints of one cell's controllable devices.  Every cell is
optimized independently against the frozen setpoints of the others, one full
power flow per candidate, which is why the solve goes through the raw kernel
interface instead of rebuilding network objects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .clustering import CellPartition
from .errors import CellgridError
from .netmodel import PerUnitNetwork, admittance_matrix
from .powerflow import solve_raw
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)

FAILED_FLOW_OBJECTIVE = 1e9
DEFAULT_BAND = (0.95, 1.05)
DEFAULT_PENALTY_WEIGHT = 1e4  # MW per pu^2 of band violation


@dataclass(frozen=True)
class DeParams:
    population: int = 20
    mutation: float = 0.7    # F
    crossover: float = 0.9   # CR
    max_generations: int = 40
    tolerance: float = 1e-7  # population objective spread that counts as converged
    seed: int = 1

    def validate(self) -> None:
        if self.population < 4:
            raise CellgridError("DE population must be >= 4")
        if not (0.0 < self.mutation <= 2.0):
            raise CellgridError("DE mutation factor F must be in (0, 2]")
        if not (0.0 <= self.crossover <= 1.0):
            raise CellgridError("DE crossover rate CR must be in [0, 1]")
        if self.max_generations < 1:
            raise CellgridError("DE needs at least one generation")


@dataclass(frozen=True)
class DispatchResult:
    best: tuple[float, ...]
    objective: float
    generations: int
    converged: bool
    evaluations: int
    trajectory: tuple[float, ...]  # best-so-far objective after each generation


def differential_evolution(objective, bounds, params: DeParams) -> DispatchResult:
    """DE/rand/1/bin with greedy selection on a box.

    Initialization is uniform in the box from the seed; each mutant
    ``x_r1 + F (x_r2 - x_r3)`` is clipped to the box before binomial
    crossover with one forced index.  Fully deterministic given the seed.
    """
    params.validate()
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    if not bounds:
        raise CellgridError("empty bounds")
    for lo, hi in bounds:
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise CellgridError(f"invalid bound ({lo}, {hi})")

    dim = len(bounds)
    npop = params.population
    rng = SplitMix64(params.seed)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    pop = np.empty((npop, dim))
    for i in range(npop):
        for j in range(dim):
            pop[i, j] = lo[j] + rng.uniform() * (hi[j] - lo[j])
    fitness = np.array([objective(pop[i].copy()) for i in range(npop)])
    evaluations = npop

    trajectory: list[float] = []
    generations = 0
    converged = False
    trial = np.empty(dim)
    for _ in range(params.max_generations):
        generations += 1
        for i in range(npop):
            r1 = rng.below(npop)
            while r1 == i:
                r1 = rng.below(npop)
            r2 = rng.below(npop)
            while r2 == i or r2 == r1:
                r2 = rng.below(npop)
            r3 = rng.below(npop)
            while r3 == i or r3 == r1 or r3 == r2:
                r3 = rng.below(npop)
            j_forced = rng.below(dim)
            for j in range(dim):
                m = pop[r1, j] + params.mutation * (pop[r2, j] - pop[r3, j])
                if m < lo[j]:
                    m = lo[j]
                elif m > hi[j]:
                    m = hi[j]
                if j == j_forced or rng.uniform() < params.crossover:
                    trial[j] = m
                else:
                    trial[j] = pop[i, j]
            f_trial = objective(trial.copy())
            evaluations += 1
            if f_trial <= fitness[i]:
                pop[i] = trial
                fitness[i] = f_trial
        trajectory.append(float(fitness.min()))
        if float(fitness.max() - fitness.min()) < params.tolerance:
            converged = True
            break

    best_i = int(np.argmin(fitness))
    return DispatchResult(
        best=tuple(pop[best_i]),
        objective=float(fitness[best_i]),
        generations=generations,
        converged=converged,
        evaluations=evaluations,
        trajectory=tuple(trajectory),
    )


def band_penalty(v: np.ndarray, v_lo: float, v_hi: float, weight: float) -> float:
    over = np.maximum(0.0, v - v_hi)
    under = np.maximum(0.0, v_lo - v)
    return float(weight * np.sum(over ** 2 + under ** 2))


class CellObjective:
    """Loss-plus-penalty objective for one cell, prepared once per dispatch.

    Evaluation replaces the cell devices' reactive injections in the
    scheduled-injection vectors, runs a warm-started power flow, and scores
    total losses plus the squared band violation over the cell's buses.
    A failed or singular flow returns a large sentinel so the optimizer
    stays total.
    """

    def __init__(self, pun: PerUnitNetwork, partition: CellPartition, cell_id: int,
                 band: tuple[float, float] = DEFAULT_BAND,
                 penalty_weight: float = DEFAULT_PENALTY_WEIGHT,
                 tol: float = 1e-8, max_iter: int = 30):
        if cell_id not in partition.device_roster:
            raise CellgridError(f"unknown cell {cell_id}")
        self.device_ids = partition.device_roster[cell_id]
        if not self.device_ids:
            raise CellgridError(f"cell {cell_id} has no controllable device")
        v_lo, v_hi = band
        if not v_lo < v_hi:
            raise CellgridError(f"voltage band [{v_lo}, {v_hi}] is empty")
        self.pun = pun
        self.band = (v_lo, v_hi)
        self.weight = penalty_weight
        self.tol = tol
        self.max_iter = max_iter

        y = admittance_matrix(pun)
        self.g = np.ascontiguousarray(y.real)
        self.b = np.ascontiguousarray(y.imag)
        self.kinds = pun.kind_codes()
        self.p_base, self.q_base = pun.scheduled_injections()
        gens = {g.id: g for g in pun.generators}
        self.dev_bus = np.array([gens[d].bus_i for d in self.device_ids])
        self.dev_q0 = np.array([gens[d].q for d in self.device_ids])
        self.bounds_mvar = [(gens[d].q_min * pun.base_mva, gens[d].q_max * pun.base_mva)
                            for d in self.device_ids]
        cell_buses = [bus for bus, c in partition.assignment.items() if c == cell_id]
        self.cell_idx = np.array(sorted(pun.bus_index(b) for b in cell_buses
                                        if b in pun.bus_ids and pun.bus_kinds[pun.bus_index(b)] == "pq"),
                                 dtype=np.int64)

        v0 = np.ones(pun.n_bus)
        d0 = np.zeros(pun.n_bus)
        for i, kind in enumerate(pun.bus_kinds):
            if kind in ("slack", "pv"):
                v0[i] = pun.v_set[i]
        res = solve_raw(self.g, self.b, self.p_base, self.q_base, v0, d0,
                        self.kinds, tol, max_iter)
        self.warm = (res[0], res[1]) if res[5] else (v0, d0)

    def __call__(self, q_mvar) -> float:
        q = self.q_base.copy()
        dq = np.asarray(q_mvar) / self.pun.base_mva - self.dev_q0
        np.add.at(q, self.dev_bus, dq)
        try:
            v, delta, p_calc, _qc, _it, ok, singular = solve_raw(
                self.g, self.b, self.p_base, q, self.warm[0], self.warm[1],
                self.kinds, self.tol, self.max_iter)
        except Exception:
            return FAILED_FLOW_OBJECTIVE
        if not ok or singular >= 0:
            return FAILED_FLOW_OBJECTIVE
        losses_mw = float(np.sum(p_calc)) * self.pun.base_mva
        v_lo, v_hi = self.band
        return losses_mw + band_penalty(v[self.cell_idx], v_lo, v_hi, self.weight)

    def incumbent_mvar(self) -> tuple[float, ...]:
        return tuple(self.dev_q0 * self.pun.base_mva)


def ppvc_objective(pun: PerUnitNetwork, partition: CellPartition, cell_id: int,
                   candidate_q_mvar, band: tuple[float, float] = DEFAULT_BAND,
                   penalty_weight: float = DEFAULT_PENALTY_WEIGHT) -> float:
    """One-shot evaluation of a candidate reactive dispatch for a cell."""
    return CellObjective(pun, partition, cell_id, band, penalty_weight)(candidate_q_mvar)


def run_ppvc_cycle(pun: PerUnitNetwork, partition: CellPartition, params: DeParams,
                   band: tuple[float, float] = DEFAULT_BAND,
                   penalty_weight: float = DEFAULT_PENALTY_WEIGHT,
                   reference_setpoints: dict[str, float] | None = None,
                   ) -> tuple[dict[str, tuple[float, float]], dict[int, DispatchResult]]:
    """Dispatch every cell once and return merged setpoints (MW, MVAr).

    Each cell's optimization sees the other cells frozen at the state carried
    by ``pun``.  Per-cell seeds derive from ``params.seed``.  The published
    setpoint is the best of the DE result, the incumbent, and (when given)
    ``reference_setpoints`` under the same objective, so a dispatch never
    regresses behind either.  Active power stays at the current profile value.
    """
    partition.validate_for_ppvc()
    gens = {g.id: g for g in pun.generators}
    setpoints: dict[str, tuple[float, float]] = {}
    results: dict[int, DispatchResult] = {}
    for cell in range(1, partition.k + 1):
        objective = CellObjective(pun, partition, cell, band, penalty_weight)
        cell_params = DeParams(
            population=params.population, mutation=params.mutation,
            crossover=params.crossover, max_generations=params.max_generations,
            tolerance=params.tolerance, seed=derive_seed(params.seed, cell))
        result = differential_evolution(objective, objective.bounds_mvar, cell_params)
        candidates = [(result.objective, result.best)]
        incumbent = objective.incumbent_mvar()
        candidates.append((objective(incumbent), incumbent))
        if reference_setpoints is not None:
            ref = tuple(reference_setpoints[d] for d in objective.device_ids)
            candidates.append((objective(ref), ref))
        candidates.sort(key=lambda c: c[0])
        best_obj, best_q = candidates[0]
        results[cell] = DispatchResult(
            best=tuple(best_q), objective=best_obj, generations=result.generations,
            converged=result.converged, evaluations=result.evaluations + len(candidates) - 1,
            trajectory=result.trajectory)
        for dev, q in zip(objective.device_ids, best_q):
            setpoints[dev] = (gens[dev].p * pun.base_mva, float(q))
    return setpoints, results
