import dataclasses
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oapd.network import Branch, Bus, BusKind, Generator, NetworkCase
from oapd.powerflow import (
    NewtonSystem,
    SolverConfig,
    branch_table,
    build_ybus,
    bus_table,
    compute_branch_flows,
    solve,
)

from .conftest import random_case, two_bus

TIGHT = SolverConfig(tolerance=1e-9)

# 2-bus line x = 0.1 pu feeding 1 pu of load at unity power factor:
# V2 sin(-th) = 0.1 and V2 = cos(th), hence sin(-2 th) = 0.2
THETA_2BUS = -0.5 * math.asin(0.2)
VM_2BUS = math.cos(THETA_2BUS)


def test_two_bus_ybus():
    Y = build_ybus(two_bus())
    np.testing.assert_allclose(Y, [[-10j, 10j], [10j, -10j]], atol=1e-12)


def test_ybus_out_of_service_leaves_shunts():
    case = two_bus()
    buses = (case.buses[0], dataclasses.replace(case.buses[1], gs=3.0, bs=-2.0))
    branches = tuple(dataclasses.replace(br, in_service=False) for br in case.branches)
    Y = build_ybus(dataclasses.replace(case, buses=buses, branches=branches))
    np.testing.assert_allclose(Y, np.diag([0.0, 0.03 - 0.02j]), atol=1e-15)


def test_ybus_rejects_zero_impedance():
    case = two_bus()
    bad = dataclasses.replace(case, branches=(Branch(1, 2, 0.0, 0.0),))
    with pytest.raises(ValueError):
        build_ybus(bad)


def test_ybus_symmetric_away_from_transformers(case14):
    Y = build_ybus(case14)
    idx = case14.bus_index
    xf = {idx[br.from_bus] for br in case14.branches if br.tap != 1 or br.shift != 0}
    xf |= {idx[br.to_bus] for br in case14.branches if br.tap != 1 or br.shift != 0}
    plain = [i for i in range(case14.n_bus) if i not in xf]
    sub = Y[np.ix_(plain, plain)]
    np.testing.assert_array_equal(sub, sub.T)
    # transformer blocks stay symmetric as well when there is no phase shift
    np.testing.assert_allclose(Y, Y.T, atol=1e-15)


def test_two_bus_closed_form():
    sol = solve(two_bus(), TIGHT)
    assert sol.converged
    assert sol.va[1] == pytest.approx(THETA_2BUS, abs=1e-9)
    assert sol.vm[1] == pytest.approx(VM_2BUS, abs=1e-9)
    # the small-angle, unit-voltage estimate asin(0.1) lands within 1e-3 rad
    assert abs(sol.va[1] + math.asin(0.1)) < 1e-3
    assert sol.pg[0] == pytest.approx(100.0, abs=1e-6)


def test_two_bus_flows():
    sol = solve(two_bus(), TIGHT)
    flows = sol.branch_flows[0]
    assert flows[0] == pytest.approx(100.0, abs=1e-6)  # lossless line, p_from = load
    assert flows[2] == pytest.approx(-100.0, abs=1e-6)
    assert flows[0] == -flows[2]


def test_two_bus_lossy_flow_exceeds_load():
    sol = solve(two_bus(r=0.02), TIGHT)
    p_from, _, p_to, _ = sol.branch_flows[0]
    assert p_to == pytest.approx(-100.0, abs=1e-6)
    assert p_from > 100.0


def test_single_slack_bus():
    case = NetworkCase(
        100.0,
        [Bus(1, BusKind.SLACK, 1.02, 0.0, 0.0, 0.0, 0.0, 0.0, 100.0)],
        [],
        [Generator(1, 0.0, 0.0, 0.0, 10.0, -10.0, 10.0, 1.02, 0.0, 0.0)],
    )
    sol = solve(case)
    assert sol.converged and sol.iterations == 0
    assert sol.vm[0] == 1.02 and sol.pg[0] == 0.0 and sol.qg[0] == 0.0


def test_flat_profile_has_no_flow(case14):
    no_shunt = [dataclasses.replace(br, b_charging=0.0, tap=1.0) for br in case14.branches]
    case = dataclasses.replace(case14, branches=tuple(no_shunt))
    flows = compute_branch_flows(case, np.ones(14), np.zeros(14))
    np.testing.assert_allclose(flows, 0.0, atol=1e-12)


def test_branch_flows_dimension_check(case14):
    with pytest.raises(ValueError):
        compute_branch_flows(case14, np.ones(3), np.zeros(3))


def test_bundled_case_converges_fast(case14):
    solve(case14, dataclasses.replace(TIGHT, flat_start=True))
    t0 = time.perf_counter()
    sol = solve(case14, dataclasses.replace(TIGHT, flat_start=True))
    elapsed = time.perf_counter() - t0
    assert sol.converged and sol.iterations <= 10 and sol.max_mismatch <= 1e-9
    assert elapsed < 0.05


def test_mismatch_recomputed_from_voltages(case14):
    sol = solve(case14, TIGHT)
    sys_ = NewtonSystem.from_case(case14.with_dispatch(sol.pg), sol.vm, sol.va)
    assert np.max(np.abs(sys_.F(sys_.x0))) <= 1e-9


def test_conservation(case14):
    sol = solve(case14, TIGHT)
    vm = sol.vm
    gs = np.array([b.gs for b in case14.buses])
    shunt = float(np.sum(gs * vm**2))
    losses = float(np.sum(sol.branch_flows[:, 0] + sol.branch_flows[:, 2]))
    assert losses >= 0
    balance = sol.pg.sum() - case14.total_pd
    assert balance == pytest.approx(losses + shunt, abs=1e-9 * case14.base_mva * case14.n_bus)


def test_warm_start_matches_flat_start(case14):
    flat = solve(case14, dataclasses.replace(TIGHT, flat_start=True))
    pg = case14.gen_array("pg")
    pg[1] += 5.0
    moved = solve(case14, TIGHT, pg=pg)
    warm = solve(case14, TIGHT, init=(moved.vm, moved.va))
    np.testing.assert_allclose(warm.vm, flat.vm, atol=1e-8)
    np.testing.assert_allclose(warm.va, flat.va, atol=1e-8)


def test_q_limits_pin_and_switch(case14):
    gens = list(case14.generators)
    gens[2] = dataclasses.replace(gens[2], q_max=5.0)  # bus 3 needs more than this
    case = dataclasses.replace(case14, generators=tuple(gens))
    sol = solve(case, TIGHT)
    assert sol.converged
    assert 3 in sol.pv_to_pq_switches
    assert sol.qg[2] == pytest.approx(5.0, abs=1e-9)
    for k, g in enumerate(case.generators):
        if k != case.slack_gen:
            assert g.q_min - 1e-6 <= sol.qg[k] <= g.q_max + 1e-6
    loose = solve(case, dataclasses.replace(TIGHT, enforce_q_limits=False))
    assert loose.qg[2] > 5.0 and not loose.pv_to_pq_switches


def test_heavy_load_reports_non_convergence(case14):
    from oapd.network import scale_load

    sol = solve(scale_load(case14, 10.0))
    assert not sol.converged and sol.diagnostic


def test_reports_have_headers(case14):
    sol = solve(case14)
    assert bus_table(case14, sol).splitlines()[0] == "id,vm,va_deg,pg,qg,pd,qd"
    assert branch_table(case14, sol).splitlines()[0] == "from,to,p_from,q_from,p_to,q_to"
    assert len(branch_table(case14, sol).splitlines()) == 21


def _fd_jacobian(sys_, x, h=1e-6):
    J = np.empty((len(sys_.F(x)), len(x)))
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (sys_.F(x + e) - sys_.F(x - e)) / (2 * h)
    return J


def _check_jacobian(sys_, x):
    J = sys_.J(x)
    Jfd = _fd_jacobian(sys_, x)
    scale = np.maximum(np.abs(J), 1.0)
    assert np.max(np.abs(J - Jfd) / scale) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=3, max_value=7))
def test_jacobian_matches_finite_differences(seed, n_bus):
    rng = np.random.default_rng(seed)
    case = random_case(rng, n_bus)
    vm = rng.uniform(0.9, 1.1, n_bus)
    va = rng.uniform(-0.3, 0.3, n_bus)
    sys_ = NewtonSystem.from_case(case, vm, va)
    _check_jacobian(sys_, sys_.x0)


def test_jacobian_bundled_case(case14):
    rng = np.random.default_rng(3)
    sys_ = NewtonSystem.from_case(case14, rng.uniform(0.95, 1.05, 14), rng.uniform(-0.2, 0.2, 14))
    _check_jacobian(sys_, sys_.x0)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_random_cases_conserve_power(seed):
    rng = np.random.default_rng(seed)
    case = random_case(rng, 5)
    sol = solve(case, TIGHT)
    if not sol.converged:
        return
    gs = np.array([b.gs for b in case.buses])
    losses = float(np.sum(sol.branch_flows[:, 0] + sol.branch_flows[:, 2]))
    assert losses >= -1e-9
    assert sol.pg.sum() - case.total_pd == pytest.approx(
        losses + float(np.sum(gs * sol.vm**2)), abs=1e-6)
