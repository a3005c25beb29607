import numpy as np
import pytest

from cellgrid.errors import NotConvergedError, SetpointError, SingularJacobianError
from cellgrid.netmodel import (Branch, Bus, Generator, Load, Network,
                               admittance_matrix, apply_setpoints,
                               scale_injections, to_per_unit)
from cellgrid.powerflow import (available_kernels, jacobian, solve_power_flow,
                                total_losses)

from conftest import make_two_bus, make_two_island
from oracles import fd_jacobian, gauss_seidel

# frozen from the Gauss-Seidel oracle (z = 0.01 + j0.1 pu, load 0.5 + j0.1 pu)
TWO_BUS_V2 = 0.9835065761557571
TWO_BUS_LOSSES_MW = 0.0268793530532749

KERNELS = sorted(available_kernels())


@pytest.fixture(params=KERNELS)
def kernel(request, monkeypatch):
    """Run solver-level tests against every kernel that built."""
    import cellgrid.powerflow as pf
    monkeypatch.setattr(pf, "_kernel", available_kernels()[request.param])
    return request.param


def test_flat_no_load_single_iteration(kernel):
    net = make_two_bus(p_mw=0.0, q_mvar=0.0)
    sol = solve_power_flow(to_per_unit(net))
    assert sol.converged
    assert sol.iterations == 1
    assert np.allclose(sol.v, 1.0)
    assert np.allclose(sol.delta, 0.0)
    assert total_losses(sol) == pytest.approx(0.0, abs=1e-12)


def test_two_bus_matches_gauss_seidel_oracle(kernel, two_bus):
    pun = to_per_unit(two_bus)
    sol = solve_power_flow(pun, tol=1e-10)
    assert sol.converged

    y = admittance_matrix(pun)
    p, q = pun.scheduled_injections()
    v_gs, ok = gauss_seidel(y, p, q, pun.kind_codes(), pun.v_set, tol=1e-10)
    assert ok
    assert abs(sol.v[1] - abs(v_gs[1])) <= 1e-8
    assert sol.v[1] == pytest.approx(TWO_BUS_V2, abs=1e-9)
    assert total_losses(sol) == pytest.approx(TWO_BUS_LOSSES_MW, abs=1e-8)


def test_benchmark_converges_from_flat_start(kernel, benchmark_pun):
    sol = solve_power_flow(benchmark_pun, tol=1e-8)
    assert sol.converged
    assert sol.iterations <= 10
    assert sol.max_mismatch <= 1e-8


def test_benchmark_overload_diverges_like_the_oracle(kernel, benchmark_pun):
    stressed = scale_injections(benchmark_pun, load_factor=100.0)
    sol = solve_power_flow(stressed, max_iter=30)
    assert not sol.converged

    y = admittance_matrix(stressed)
    p, q = stressed.scheduled_injections()
    _v, ok = gauss_seidel(y, p, q, stressed.kind_codes(), stressed.v_set,
                          tol=1e-10, max_iter=3000)
    assert not ok


def test_warm_start_on_solution_takes_one_iteration(kernel, benchmark_pun):
    sol = solve_power_flow(benchmark_pun)
    again = solve_power_flow(benchmark_pun, warm_start=(sol.v, sol.delta))
    assert again.converged
    assert again.iterations == 1


def test_loss_formulas_agree(kernel, benchmark_pun):
    sol = solve_power_flow(benchmark_pun)
    assert sol.total_losses_mw == pytest.approx(sol.losses_i2r_mw,
                                                abs=1e-8 * benchmark_pun.base_mva)
    assert sol.total_losses_mw >= 0


def test_power_balance_at_convergence(kernel, benchmark_pun):
    tol = 1e-8
    sol = solve_power_flow(benchmark_pun, tol=tol)
    p_sched, _ = benchmark_pun.scheduled_injections()
    gen_minus_load = p_sched.sum() * benchmark_pun.base_mva
    slack_p = sol.p_inj[benchmark_pun.slack_index] * benchmark_pun.base_mva
    sched_slack = p_sched[benchmark_pun.slack_index] * benchmark_pun.base_mva
    balance = gen_minus_load - sched_slack + slack_p - sol.total_losses_mw
    assert abs(balance) <= 10 * tol * benchmark_pun.base_mva


def test_lossless_network_zero_losses(kernel):
    net = Network(
        buses=(Bus("s", "slack", 20, 1.0), Bus("b", "pq", 20)),
        branches=(Branch("l1", "s", "b", 0.0, 4.0, 0.0, 1.0),),
        loads=(Load("ld", "b", 5.0, 1.0),),
        generators=(), base_mva=10.0)
    sol = solve_power_flow(to_per_unit(net))
    assert sol.converged
    assert abs(sol.total_losses_mw) <= 1e-10


def test_total_losses_requires_convergence(kernel, benchmark_pun):
    sol = solve_power_flow(scale_injections(benchmark_pun, load_factor=100.0))
    with pytest.raises(NotConvergedError):
        total_losses(sol)


def test_pv_bus_holds_voltage(kernel):
    net = Network(
        buses=(Bus("s", "slack", 20, 1.0), Bus("m", "pq", 20),
               Bus("g", "pv", 20, 1.02)),
        branches=(Branch("l1", "s", "m", 0.4, 4.0, 0.0, 1.0),
                  Branch("l2", "m", "g", 0.4, 4.0, 0.0, 1.0),),
        loads=(Load("ld", "m", 3.0, 1.0),),
        generators=(Generator("gen", "g", 2.0, 0.0, -5.0, 5.0),),
        base_mva=10.0)
    sol = solve_power_flow(to_per_unit(net))
    assert sol.converged
    assert sol.v[2] == pytest.approx(1.02, abs=1e-12)
    assert sol.v[1] != pytest.approx(1.0)


def test_singular_network_raises_with_iteration():
    net = make_two_island()
    pun = to_per_unit(net)
    with pytest.raises(SingularJacobianError) as err:
        solve_power_flow(pun)
    assert err.value.iteration >= 1


# -- Jacobian ---------------------------------------------------------------

def _operating_points(pun):
    sol = solve_power_flow(pun)
    heavy = scale_injections(pun, load_factor=1.3)
    sol_heavy = solve_power_flow(heavy)
    n = pun.n_bus
    return [
        (np.ones(n), np.zeros(n)),
        (sol.v, sol.delta),
        (sol_heavy.v, sol_heavy.delta),
    ]


def test_jacobian_matches_finite_differences(benchmark_pun):
    """Every block entry vs central differences at three operating points."""
    y = admittance_matrix(benchmark_pun)
    g, b = np.ascontiguousarray(y.real), np.ascontiguousarray(y.imag)
    ns = benchmark_pun.non_slack_indices()
    pq = benchmark_pun.pq_indices()
    for v, delta in _operating_points(benchmark_pun):
        jac = jacobian(benchmark_pun, v, delta)
        dpa, dpv, dqa, dqv = fd_jacobian(g, b, np.array(v), np.array(delta), h=1e-6)
        assert np.max(np.abs(jac.j1 - dpa[np.ix_(ns, ns)])) <= 1e-5
        assert np.max(np.abs(jac.j2 - dpv[np.ix_(ns, pq)])) <= 1e-5
        assert np.max(np.abs(jac.j3 - dqa[np.ix_(pq, ns)])) <= 1e-5
        assert np.max(np.abs(jac.j4 - dqv[np.ix_(pq, pq)])) <= 1e-5


def test_jacobian_flat_start_dc_approximation(two_bus):
    """Lossless x = 0.1 pu line: j1 diagonal is 1/0.1 = 10 at flat start."""
    net = Network(
        buses=two_bus.buses,
        branches=(Branch("l1", "s", "b", 0.0, 4.0, 0.0, 1.0),),
        loads=two_bus.loads, generators=(), base_mva=10.0)
    pun = to_per_unit(net)
    jac = jacobian(pun, np.ones(2), np.zeros(2))
    assert jac.j1[0, 0] == pytest.approx(10.0, rel=1e-12)


def test_jacobian_disconnected_pair_is_zero():
    pun = to_per_unit(make_two_island())
    jac = jacobian(pun, np.ones(4), np.zeros(4))
    # bus 'a' (index 1) has no path to 'b'/'c' (indices 2, 3)
    assert jac.non_slack_ids == ("a", "b", "c")
    assert jac.j1[0, 1] == 0.0
    assert jac.j1[0, 2] == 0.0
    assert jac.j4[0, 1] == 0.0
    assert jac.j4[1, 0] == 0.0


def test_jacobian_rejects_bad_operating_point(benchmark_pun):
    with pytest.raises(ValueError):
        jacobian(benchmark_pun, np.zeros(benchmark_pun.n_bus),
                 np.zeros(benchmark_pun.n_bus))


# -- setpoints through the solver ------------------------------------------

def test_external_zero_equals_no_generator(benchmark_pun):
    zeroed = apply_setpoints(benchmark_pun, {"pv09": (0.0, 0.0)})
    gens = tuple(g for g in benchmark_pun.generators if g.id != "pv09")
    import dataclasses
    removed = dataclasses.replace(benchmark_pun, generators=gens, _index={})
    l1 = solve_power_flow(zeroed).total_losses_mw
    l2 = solve_power_flow(removed).total_losses_mw
    assert l1 == pytest.approx(l2, abs=1e-12)


def test_setpoint_changes_bus_injection(benchmark_pun):
    sol0 = solve_power_flow(benchmark_pun)
    moved = apply_setpoints(benchmark_pun, {"pv03": (0.4, 0.25)})
    sol1 = solve_power_flow(moved)
    i = benchmark_pun.bus_index("node3")
    dq = (sol1.q_inj[i] - sol0.q_inj[i]) * benchmark_pun.base_mva
    assert dq == pytest.approx(0.25, abs=1e-6)
    assert sol1.total_losses_mw != pytest.approx(sol0.total_losses_mw, abs=1e-9)


def test_kernel_parity_on_benchmark(benchmark_pun):
    """Compiled and pure kernels converge to the same solution."""
    kernels = available_kernels()
    if len(kernels) < 2:
        pytest.skip("compiled kernel not built")
    import cellgrid.powerflow as pf
    sols = {}
    orig = pf._kernel
    try:
        for name, mod in kernels.items():
            pf._kernel = mod
            sols[name] = solve_power_flow(benchmark_pun, tol=1e-10)
    finally:
        pf._kernel = orig
    a, b = sols["pure"], sols["compiled"]
    assert np.max(np.abs(a.v - b.v)) <= 1e-9
    assert np.max(np.abs(a.delta - b.delta)) <= 1e-9
    assert a.total_losses_mw == pytest.approx(b.total_losses_mw, abs=1e-9)
