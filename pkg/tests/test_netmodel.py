import dataclasses
import math

import numpy as np
import pytest

from cellgrid.errors import NetworkValidationError, SetpointError
from cellgrid.netmodel import (Branch, Bus, Generator, Load, Network,
                               admittance_matrix, apply_setpoints,
                               modify_line_length, per_unit_to_network,
                               scale_injections, to_per_unit, validate_network)

from conftest import make_two_bus


def test_validate_accepts_benchmark(benchmark):
    validate_network(benchmark)
    assert len(benchmark.buses) == 14
    assert benchmark.slack_bus.id == "node0"


def _net(buses=None, branches=None, **kw):
    base = make_two_bus()
    return dataclasses.replace(base, buses=buses or base.buses,
                               branches=branches or base.branches, **kw)


def test_validate_rejects_duplicate_bus():
    net = _net(buses=(Bus("s", "slack", 20, 1.0), Bus("s", "pq", 20)))
    with pytest.raises(NetworkValidationError, match="duplicate bus"):
        validate_network(net)


def test_validate_requires_exactly_one_slack():
    no_slack = _net(buses=(Bus("s", "pq", 20), Bus("b", "pq", 20)))
    with pytest.raises(NetworkValidationError, match="no slack"):
        validate_network(no_slack)
    two = _net(buses=(Bus("s", "slack", 20, 1.0), Bus("b", "slack", 20, 1.0)))
    with pytest.raises(NetworkValidationError, match="multiple slack"):
        validate_network(two)


def test_validate_rejects_bad_lengths_and_zero_impedance():
    bad_len = _net(branches=(Branch("l1", "s", "b", 0.4, 4.0, 0.0, 0.0),))
    with pytest.raises(NetworkValidationError, match="length"):
        validate_network(bad_len)
    zero_z = _net(branches=(Branch("l1", "s", "b", 0.0, 0.0, 0.0, 1.0),))
    with pytest.raises(NetworkValidationError, match="both zero"):
        validate_network(zero_z)


def test_validate_rejects_vset_out_of_band():
    net = _net(buses=(Bus("s", "slack", 20, 1.5), Bus("b", "pq", 20)))
    with pytest.raises(NetworkValidationError, match="v_set"):
        validate_network(net)


def test_validate_rejects_dangling_reference():
    net = _net(branches=(Branch("l1", "s", "n99", 0.4, 4.0, 0.0, 1.0),))
    with pytest.raises(NetworkValidationError, match="n99"):
        validate_network(net)


# -- modify_line_length ------------------------------------------------------

def test_modify_line_length_published_values(benchmark):
    m1 = modify_line_length(benchmark, "line1", 0.8)
    assert m1.branch("line1").length_km == 0.8
    m12 = modify_line_length(benchmark, "line12", 6.3)
    assert m12.branch("line12").length_km == 6.3


def test_modify_line_length_changes_exactly_one_field(benchmark):
    mod = modify_line_length(benchmark, "line1", 0.8)
    for br, br_mod in zip(benchmark.branches, mod.branches):
        if br.id == "line1":
            assert br_mod.length_km == 0.8
            assert (br.r_per_km, br.x_per_km, br.b_per_km) == \
                   (br_mod.r_per_km, br_mod.x_per_km, br_mod.b_per_km)
        else:
            assert br == br_mod
    assert mod.buses == benchmark.buses
    assert mod.loads == benchmark.loads


def test_modify_identity_is_noop(benchmark):
    same = modify_line_length(benchmark, "line1", benchmark.branch("line1").length_km)
    assert same == benchmark


def test_modify_preserves_other_branch_admittances(benchmark):
    """Per-branch admittance stamps stay bit-identical except the target."""
    pun = to_per_unit(benchmark)
    pun_mod = to_per_unit(modify_line_length(benchmark, "line12", 6.3))
    for br, br_mod in zip(pun.branches, pun_mod.branches):
        if br.id == "line12":
            assert br_mod.x != br.x
        else:
            assert (br.r, br.x, br.b_shunt) == (br_mod.r, br_mod.x, br_mod.b_shunt)


def test_modify_unknown_or_nonpositive():
    net = make_two_bus()
    with pytest.raises(NetworkValidationError, match="unknown line"):
        modify_line_length(net, "nope", 1.0)
    with pytest.raises(NetworkValidationError, match="> 0"):
        modify_line_length(net, "l1", 0.0)


# -- per-unit ---------------------------------------------------------------

def test_per_unit_branch_arithmetic():
    """1 km of 1 ohm/km on 20 kV, 100 MVA -> r_pu = 1/(20^2/100) = 0.25."""
    net = Network(
        buses=(Bus("s", "slack", 20, 1.0), Bus("b", "pq", 20)),
        branches=(Branch("l1", "s", "b", 1.0, 1.0, 0.0, 1.0),),
        loads=(Load("ld", "b", 0.5, 0.0),),
        generators=(), base_mva=100.0)
    pun = to_per_unit(net)
    assert pun.branches[0].r == pytest.approx(0.25, abs=1e-15)
    assert pun.loads[0].p == pytest.approx(0.005, abs=1e-18)


def test_per_unit_round_trip(benchmark):
    pun = to_per_unit(benchmark)
    back = per_unit_to_network(pun)
    for orig, rt in zip(benchmark.branches, back.branches):
        assert rt.r_per_km == pytest.approx(orig.r_per_km, rel=1e-12)
        assert rt.x_per_km == pytest.approx(orig.x_per_km, rel=1e-12)
        assert rt.b_per_km == pytest.approx(orig.b_per_km, rel=1e-12)
        assert rt.length_km == orig.length_km
    for orig, rt in zip(benchmark.loads, back.loads):
        assert rt.p_mw == pytest.approx(orig.p_mw, rel=1e-12)
    for orig, rt in zip(benchmark.generators, back.generators):
        assert rt.q_max_mvar == pytest.approx(orig.q_max_mvar, rel=1e-12)


def test_per_unit_arrays_read_only(benchmark_pun):
    with pytest.raises(ValueError):
        benchmark_pun.v_set[0] = 2.0


# -- admittance ---------------------------------------------------------------

def test_admittance_single_branch():
    net = Network(
        buses=(Bus("s", "slack", 20, 1.0), Bus("b", "pq", 20)),
        branches=(Branch("l1", "s", "b", 10.0, 20.0, 0.0, 1.0),),
        loads=(), generators=(), base_mva=10.0)
    pun = to_per_unit(net)
    y = admittance_matrix(pun)
    y_series = 1.0 / complex(pun.branches[0].r, pun.branches[0].x)
    assert y[0, 0] == pytest.approx(y_series)
    assert y[0, 1] == pytest.approx(-y_series)
    assert y[1, 0] == pytest.approx(-y_series)
    # no shunt: row sums are zero
    assert abs(y.sum(axis=1)).max() < 1e-15


def test_admittance_parallel_branches_superpose():
    net = Network(
        buses=(Bus("s", "slack", 20, 1.0), Bus("b", "pq", 20)),
        branches=(Branch("l1", "s", "b", 4.0, 40.0, 0.0, 1.0),
                  Branch("l2", "s", "b", 8.0, 20.0, 0.0, 1.0)),
        loads=(), generators=(), base_mva=10.0)
    pun = to_per_unit(net)
    y = admittance_matrix(pun)
    y1 = 1.0 / complex(pun.branches[0].r, pun.branches[0].x)
    y2 = 1.0 / complex(pun.branches[1].r, pun.branches[1].x)
    assert y[0, 1] == pytest.approx(-(y1 + y2))


def test_admittance_sparsity_matches_adjacency(benchmark_pun):
    """Zero entries exactly where no branch exists."""
    y = admittance_matrix(benchmark_pun)
    n = benchmark_pun.n_bus
    adjacent = np.zeros((n, n), dtype=bool)
    for br in benchmark_pun.branches:
        adjacent[br.from_i, br.to_i] = adjacent[br.to_i, br.from_i] = True
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            assert (y[i, j] != 0) == adjacent[i, j]


def test_admittance_symmetric_at_unit_taps(benchmark_pun):
    y = admittance_matrix(benchmark_pun)
    assert np.max(np.abs(y - y.T)) <= 1e-14


def test_admittance_tap_breaks_diagonal_symmetry_only():
    net = Network(
        buses=(Bus("s", "slack", 110, 1.0), Bus("b", "pq", 20)),
        branches=(Branch("t1", "s", "b", 0.1, 1.0, 0.0, 1.0, tap_ratio=1.05),),
        loads=(), generators=(), base_mva=10.0)
    y = admittance_matrix(to_per_unit(net))
    assert y[0, 1] == pytest.approx(y[1, 0])
    assert y[0, 0] != pytest.approx(y[1, 1])


# -- setpoints / scaling ------------------------------------------------------

def test_apply_setpoints_roundtrip_and_idempotence(benchmark_pun):
    sp = {"pv03": (0.2, 0.1), "pv05": (0.3, -0.2)}
    once = apply_setpoints(benchmark_pun, sp)
    twice = apply_setpoints(once, sp)
    assert once.generator_by_id("pv03").p == pytest.approx(0.02)
    assert once.generator_by_id("pv03").q == pytest.approx(0.01)
    assert [g.q for g in once.generators] == [g.q for g in twice.generators]


def test_apply_setpoints_unknown_generator(benchmark_pun):
    with pytest.raises(SetpointError, match="unknown generator"):
        apply_setpoints(benchmark_pun, {"nope": (0.0, 0.0)})


def test_apply_setpoints_q_limit_violation_names_generator(benchmark_pun):
    with pytest.raises(SetpointError, match="pv03"):
        apply_setpoints(benchmark_pun, {"pv03": (0.4, 99.0)})


def test_scale_injections_leaves_external_devices_alone(benchmark_pun):
    scaled = scale_injections(benchmark_pun, load_factor=0.5, gen_factor=0.0)
    pv09 = scaled.generator_by_id("pv09")
    assert pv09.p == benchmark_pun.generator_by_id("pv09").p
    assert scaled.generator_by_id("pv03").p == 0.0
    assert scaled.loads[0].p == pytest.approx(benchmark_pun.loads[0].p * 0.5)


def test_scheduled_injections_sum(benchmark_pun):
    p, q = benchmark_pun.scheduled_injections()
    gen_p = sum(g.p for g in benchmark_pun.generators)
    load_p = sum(ld.p for ld in benchmark_pun.loads)
    assert p.sum() == pytest.approx(gen_p - load_p, rel=1e-12)
    assert math.isfinite(q.sum())
