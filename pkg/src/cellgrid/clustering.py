"""Voltage-sensitivity clustering of a feeder into control cells.

Pipeline: J4 block of the power-flow Jacobian -> sensitivity B = J4^-1 ->
attenuation a_ij = b_ij / b_jj -> electrical distance D_ij = -log(a_ij a_ji)
-> row normalization -> average-linkage hierarchical clustering.  Everything
is deterministic: ties in the merge order break toward the lowest bus index.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CellgridError
from .netmodel import PQ, SLACK, Network, to_per_unit
from .powerflow import Jacobian

log = logging.getLogger(__name__)

DISTANCE_CAP = 1e6
COND_LIMIT = 1e12


@dataclass(frozen=True)
class SensitivityMatrix:
    """b[i, j]: voltage response at bus i per unit reactive injection at bus j."""

    b: np.ndarray
    bus_ids: tuple[str, ...]
    condition: float


@dataclass(frozen=True)
class AttenuationMatrix:
    a: np.ndarray
    bus_ids: tuple[str, ...]
    # (i, j) pairs with a_ij outside the expected (0, 1] range; reported, not fatal
    out_of_range: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class DistanceMatrix:
    d: np.ndarray
    bus_ids: tuple[str, ...]
    normalized: bool
    capped_pairs: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class CellPartition:
    """Cell index (1-based) per bus, plus the controllable devices per cell."""

    assignment: dict[str, int]
    k: int
    device_roster: dict[int, tuple[str, ...]] = field(default_factory=dict)

    def cells(self) -> dict[int, tuple[str, ...]]:
        out: dict[int, list[str]] = {c: [] for c in range(1, self.k + 1)}
        for bus, cell in self.assignment.items():
            out[cell].append(bus)
        return {c: tuple(sorted(buses)) for c, buses in out.items()}

    def validate_for_ppvc(self) -> None:
        for cell in range(1, self.k + 1):
            if not self.device_roster.get(cell):
                raise CellgridError(
                    f"cell {cell} has no controllable device; cannot run voltage dispatch")


def sensitivity_matrix(jac: Jacobian) -> SensitivityMatrix:
    j4 = jac.j4
    if j4.shape[0] != j4.shape[1]:
        raise CellgridError(f"j4 is not square: {j4.shape}")
    cond = float(np.linalg.cond(j4))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise CellgridError(f"j4 singular or ill-conditioned (condition estimate {cond:.3e})")
    b = np.linalg.inv(j4)
    residual = float(np.max(np.abs(j4 @ b - np.eye(j4.shape[0]))))
    if residual > 1e-8:
        raise CellgridError(f"j4 inverse residual {residual:.3e} exceeds 1e-8 "
                            f"(condition estimate {cond:.3e})")
    return SensitivityMatrix(b=b, bus_ids=jac.pq_ids, condition=cond)


def attenuation_matrix(s: SensitivityMatrix) -> AttenuationMatrix:
    diag = np.diag(s.b)
    zero = np.flatnonzero(diag == 0.0)
    if zero.size:
        raise CellgridError(f"zero diagonal sensitivity at bus {s.bus_ids[zero[0]]!r}")
    a = s.b / diag[np.newaxis, :]
    np.fill_diagonal(a, 1.0)
    bad = []
    n = a.shape[0]
    for i in range(n):
        for j in range(n):
            if i != j and not (0.0 < a[i, j] <= 1.0):
                bad.append((s.bus_ids[i], s.bus_ids[j]))
    if bad:
        log.warning("%d attenuation entries outside (0, 1], e.g. %s", len(bad), bad[0])
    return AttenuationMatrix(a=a, bus_ids=s.bus_ids, out_of_range=tuple(bad))


def electrical_distance(att: AttenuationMatrix, cap: float = DISTANCE_CAP) -> DistanceMatrix:
    """Raw distance -log(a_ij * a_ji); symmetric with a zero diagonal.

    Non-positive attenuation products cannot be logged; those entries are set
    to ``cap`` and reported.
    """
    a = att.a
    prod = a * a.T  # commutative products, so exactly symmetric
    capped = []
    n = a.shape[0]
    d = np.full((n, n), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        valid = prod > 0.0
        d[valid] = -np.log(prod[valid])
    for i in range(n):
        for j in range(i + 1, n):
            if not valid[i, j]:
                d[i, j] = d[j, i] = cap
                capped.append((att.bus_ids[i], att.bus_ids[j]))
    np.fill_diagonal(d, 0.0)
    if capped:
        log.warning("%d distance entries capped at %g (non-positive attenuation product)",
                    len(capped), cap)
    return DistanceMatrix(d=d, bus_ids=att.bus_ids, normalized=False,
                          capped_pairs=tuple(capped))


def normalize_distance(dist: DistanceMatrix) -> DistanceMatrix:
    row_max = dist.d.max(axis=1)
    if np.any(row_max <= 0.0):
        i = int(np.argmin(row_max))
        raise CellgridError(f"row for bus {dist.bus_ids[i]!r} has no positive distance; "
                            "cannot normalize")
    d_norm = dist.d / row_max[:, np.newaxis]
    return DistanceMatrix(d=d_norm, bus_ids=dist.bus_ids, normalized=True,
                          capped_pairs=dist.capped_pairs)


# --------------------------------------------------------------------------
# agglomerative clustering (average linkage, deterministic tie-break)
# --------------------------------------------------------------------------

def _average_linkage(sym: np.ndarray, k: int) -> list[list[int]]:
    n = sym.shape[0]
    clusters: dict[int, list[int]] = {i: [i] for i in range(n)}  # leader -> members
    dist: dict[tuple[int, int], float] = {}
    for i in range(n):
        for j in range(i + 1, n):
            dist[(i, j)] = float(sym[i, j])

    while len(clusters) > k:
        # lowest distance wins; ties resolved toward the smallest leader pair
        best = min(dist.items(), key=lambda kv: (kv[1], kv[0][0], kv[0][1]))
        (li, lj), _ = best
        ni, nj = len(clusters[li]), len(clusters[lj])
        merged = sorted(clusters[li] + clusters[lj])
        del clusters[lj]
        for lk in clusters:
            if lk == li:
                continue
            a, b = (li, lk) if li < lk else (lk, li)
            c, d = (lj, lk) if lj < lk else (lk, lj)
            dist[(a, b)] = (ni * dist[(a, b)] + nj * dist[(c, d)]) / (ni + nj)
            del dist[(c, d)]
        del dist[(li, lj)]
        clusters[li] = merged
    return [clusters[leader] for leader in sorted(clusters)]


def cluster_cells(d_norm: DistanceMatrix, k: int, net: Network) -> CellPartition:
    """Cut the average-linkage dendrogram at k cells.

    Row normalization breaks symmetry, so clustering runs on the elementwise
    max of d and d^T.  Buses without a distance row (the slack, PV buses) are
    attached to the cell of their lowest-impedance neighbor for reporting.
    """
    ids = d_norm.bus_ids
    n = len(ids)
    if k < 1:
        raise CellgridError("k must be >= 1")
    if k > n:
        raise CellgridError(f"k={k} exceeds the {n} clustered buses")
    sym = np.maximum(d_norm.d, d_norm.d.T)
    groups = _average_linkage(sym, k)
    # stable cell numbering: order groups by their smallest member index
    groups.sort(key=lambda g: g[0])
    assignment: dict[str, int] = {}
    for cell, members in enumerate(groups, start=1):
        for m in members:
            assignment[ids[m]] = cell

    pun = to_per_unit(net)
    unassigned = [b for b, kind in zip(pun.bus_ids, pun.bus_kinds)
                  if b not in assignment]
    for bus in unassigned:
        i = pun.bus_index(bus)
        best = None
        for br in pun.branches:
            other = None
            if br.from_i == i:
                other = pun.bus_ids[br.to_i]
            elif br.to_i == i:
                other = pun.bus_ids[br.from_i]
            if other is not None and other in assignment:
                zmag = abs(complex(br.r, br.x))
                if best is None or zmag < best[0]:
                    best = (zmag, other)
        if best is None:
            raise CellgridError(f"bus {bus!r} is not electrically connected to any clustered bus")
        assignment[bus] = assignment[best[1]]

    roster: dict[int, list[str]] = {c: [] for c in range(1, k + 1)}
    for g in net.generators:
        if g.controllable and not g.external:
            roster[assignment[g.bus]].append(g.id)
    return CellPartition(assignment=assignment, k=k,
                         device_roster={c: tuple(sorted(r)) for c, r in roster.items()})


def partition_is_contiguous(partition: CellPartition, net: Network) -> bool:
    """Every cell forms a connected subgraph of the branch graph."""
    adj: dict[str, set[str]] = {b.id: set() for b in net.buses}
    for br in net.branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    for cell, buses in partition.cells().items():
        todo = set(buses)
        if not todo:
            return False
        stack = [next(iter(sorted(todo)))]
        seen = set()
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            for nxt in adj[cur]:
                if nxt in todo and nxt not in seen:
                    stack.append(nxt)
        if seen != todo:
            return False
    return True


# --------------------------------------------------------------------------
# pipeline + export
# --------------------------------------------------------------------------

def cell_pipeline(net: Network, k: int, tol: float = 1e-8):
    """Flat-start power flow -> Jacobian -> B -> a -> D -> D_norm -> cells.

    Returns (d_norm, partition, solution).
    """
    from .powerflow import jacobian, solve_power_flow

    pun = to_per_unit(net)
    sol = solve_power_flow(pun, tol=tol)
    if not sol.converged:
        raise CellgridError("power flow for the clustering operating point did not converge")
    jac = jacobian(pun, sol.v, sol.delta)
    sens = sensitivity_matrix(jac)
    att = attenuation_matrix(sens)
    d_norm = normalize_distance(electrical_distance(att))
    partition = cluster_cells(d_norm, k, net)
    return d_norm, partition, sol


def export_heatmap(dist: DistanceMatrix, path_base: str | os.PathLike) -> tuple[str, str | None]:
    """Write the matrix as CSV (the contract) and render a color plot (best effort).

    Returns (csv_path, image_path or None).
    """
    path_base = str(path_base)
    directory = os.path.dirname(path_base)
    if directory:
        os.makedirs(directory, exist_ok=True)
    csv_path = path_base + ".csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + list(dist.bus_ids))
        for i, bus in enumerate(dist.bus_ids):
            writer.writerow([bus] + [f"{v:.9g}" for v in dist.d[i]])

    image_path = path_base + ".png"
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 6))
        im = ax.imshow(dist.d, cmap="viridis", interpolation="nearest")
        ax.set_xticks(range(len(dist.bus_ids)))
        ax.set_yticks(range(len(dist.bus_ids)))
        ax.set_xticklabels(dist.bus_ids, rotation=90, fontsize=7)
        ax.set_yticklabels(dist.bus_ids, fontsize=7)
        label = "normalized electrical distance" if dist.normalized else "electrical distance"
        fig.colorbar(im, ax=ax, label=label)
        fig.tight_layout()
        fig.savefig(image_path, dpi=130)
        plt.close(fig)
    except Exception as exc:  # image is best effort only
        log.warning("heatmap image rendering failed: %s", exc)
        image_path = None
    return csv_path, image_path


def read_heatmap_csv(path: str | os.PathLike) -> DistanceMatrix:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    ids = tuple(rows[0][1:])
    d = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return DistanceMatrix(d=d, bus_ids=ids, normalized=True)
