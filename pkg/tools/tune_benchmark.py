#!/usr/bin/env python3
"""Property dashboard for the bundled benchmark.

Run after editing make_benchmark.py: checks every network-dependent property
the test suite will assert, so data tuning happens here instead of inside the
tests.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from cellgrid.clustering import (attenuation_matrix, cell_pipeline, cluster_cells,
                                 electrical_distance, normalize_distance,
                                 partition_is_contiguous, sensitivity_matrix)
from cellgrid.netmodel import modify_line_length, to_per_unit
from cellgrid.netfile import parse_network
from cellgrid.powerflow import jacobian, solve_power_flow

HERE = os.path.dirname(__file__)
NET = os.path.join(HERE, "..", "src", "cellgrid", "data", "cigre_mv_14.net")

MODS = (("line1", 0.8), ("line2", 1.4), ("line12", 6.3))


def main():
    net = parse_network(NET)
    pun = to_per_unit(net)
    sol = solve_power_flow(pun)
    print(f"base flow: converged={sol.converged} iters={sol.iterations} "
          f"losses={sol.total_losses_mw*1000:.2f} kW "
          f"vmin={sol.v.min():.4f} vmax={sol.v.max():.4f}")

    jac = jacobian(pun, sol.v, sol.delta)
    sens = sensitivity_matrix(jac)
    print(f"j4 condition: {sens.condition:.1f}")

    # inverse-J4 sensitivity vs perturbation re-solve
    pq = pun.pq_indices()
    p_sched, q_sched = pun.scheduled_injections()
    eps = 1e-4
    worst = 0.0
    from cellgrid.netmodel import admittance_matrix
    from cellgrid.powerflow import solve_raw
    y = admittance_matrix(pun)
    g, b = np.ascontiguousarray(y.real), np.ascontiguousarray(y.imag)
    kinds = pun.kind_codes()
    for cj, j in enumerate(pq):
        q2 = q_sched.copy()
        q2[j] += eps
        r = solve_raw(g, b, p_sched, q2, sol.v.copy(), sol.delta.copy(), kinds, 1e-10, 40)
        du = (r[0][pq] - sol.v[pq]) / eps
        rel = np.abs(du - sens.b[:, cj]) / np.abs(du)
        worst = max(worst, float(rel.max()))
    print(f"b vs perturbation worst rel err: {worst*100:.2f}% (target < 2%)")

    att = attenuation_matrix(sens)
    print(f"attenuation out-of-range entries: {len(att.out_of_range)}")
    d_norm = normalize_distance(electrical_distance(att))
    n_over_orig = int(np.sum(d_norm.d > 0.5))

    net_mod = net
    for lid, km in MODS:
        net_mod = modify_line_length(net_mod, lid, km)
    pun_m = to_per_unit(net_mod)
    sol_m = solve_power_flow(pun_m)
    jac_m = jacobian(pun_m, sol_m.v, sol_m.delta)
    d_norm_m = normalize_distance(electrical_distance(attenuation_matrix(sensitivity_matrix(jac_m))))
    n_over_mod = int(np.sum(d_norm_m.d > 0.5))
    print(f"D_norm entries > 0.5: original={n_over_orig} modified={n_over_mod} "
          f"(must strictly increase)")

    for label, nn, dd in (("original", net, d_norm), ("modified", net_mod, d_norm_m)):
        part = cluster_cells(dd, 3, nn)
        ok_dev = all(part.device_roster.get(c) for c in range(1, 4))
        contig = partition_is_contiguous(part, nn)
        print(f"K=3 {label}: cells={part.cells()} devices_ok={ok_dev} contiguous={contig}")

    # stress: loads x100 should not converge
    from cellgrid.netmodel import scale_injections
    stressed = scale_injections(pun, load_factor=100.0)
    sol_s = solve_power_flow(stressed)
    print(f"loads x100: converged={sol_s.converged} (want False)")

    # day sweep, base case: band + losses profile
    day = day_profile()
    irr = irradiance_profile()
    from cellgrid.netmodel import apply_setpoints
    vmin, vmax = 2.0, 0.0
    worst_drop = None
    losses = []
    warm = None
    for s in range(0, 1440, 20):
        p = scale_injections(pun, load_factor=day[s], gen_factor=irr[s])
        p = apply_setpoints(p, {"pv09": (0.0, 0.0)})
        so = solve_power_flow(p, warm_start=warm)
        warm = (so.v, so.delta)
        assert so.converged, s
        losses.append(so.total_losses_mw)
        if so.v.min() < vmin:
            vmin = so.v.min()
            worst_drop = s
        vmax = max(vmax, so.v.max())
    print(f"day sweep: vmin={vmin:.4f}@{worst_drop} vmax={vmax:.4f} "
          f"losses kW min={min(losses)*1000:.1f} max={max(losses)*1000:.1f}")


def day_profile():
    steps = np.arange(1441)
    t = steps / 60.0
    base = 0.55 + 0.25 * np.exp(-((t - 19.0) / 2.4) ** 2) + 0.18 * np.exp(-((t - 8.0) / 2.0) ** 2)
    return base


def irradiance_profile():
    steps = np.arange(1441)
    t = steps / 60.0
    irr = np.exp(-((t - 12.5) / 3.0) ** 2)
    irr[np.abs(t - 12.5) > 6.5] = 0.0
    return irr


if __name__ == "__main__":
    main()
