from __future__ import annotations

import numpy as np
import pytest

from app.adal import AdalConfig
from app.errors import InputError
from app.llc import (
    CO2_BUFFER,
    CO2_SCALE,
    AgentVector,
    LlcBounds,
    build_agent_subproblem,
    co2_coeffs,
    needs_llc,
    recover_feasibility,
    solve_llc,
    solve_llc_centralized,
    update_supply_estimate,
)
from app.model import PlantState
from app.qp import solve_qp

from tests.conftest import make_building, make_scenario


def _bounds(building, H: int, flows_u: np.ndarray, capacity_rhs: float = 0.899) -> LlcBounds:
    count = building.zone_count
    return LlcBounds(
        flow_lo=flows_u.copy(),
        flow_max=building.column("flow_max"),
        co2_min=np.full(count, 390.0),
        co2_cap=np.full(count, 795.0),
        co2_now=np.full(count, 400.0),
        capacity_rhs=capacity_rhs,
    )


def _zone_vector(index: int, H: int, flows: float, co2: float) -> np.ndarray:
    return AgentVector(index, co2=np.full(H, co2), flows=np.full(H, flows), products=np.full(H, flows * co2)).stacked()


@pytest.fixture
def crowded():
    """One zone, ten people, already at 700 ppm: the thermal flow of 0.05 kg/s is not enough."""

    building = make_building(zones=1, total_flow_max=1.0)
    scen = make_scenario(building, occupancy=10, initial_co2=700.0)
    return building, scen, PlantState.initial(scen)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def test_co2_coefficients(building, empty_scenario):
    coeffs = co2_coeffs(np.full(3, 450.0), empty_scenario, building.zones, range(0, 3), 1800.0)

    assert np.allclose(coeffs.e_supply, 810.0)
    assert np.allclose(coeffs.f_self, -1.8)
    assert np.allclose(coeffs.g_occ, 0.0)


def test_co2_coefficients_reject_non_finite_estimate(building, empty_scenario):
    with pytest.raises(InputError):
        co2_coeffs(np.array([400.0, np.nan, 400.0]), empty_scenario, building.zones, range(0, 3), 1800.0)


def test_empty_building_never_needs_the_llc(building, empty_scenario):
    needed, predicted = needs_llc(
        PlantState.initial(empty_scenario), np.full((3, 2), 0.1), np.full(3, 0.9), empty_scenario, building
    )

    assert not needed
    assert np.allclose(predicted, 400.0)


def test_zone_above_its_cap_needs_the_llc(building):
    scen = make_scenario(building, initial_co2=[900.0, 400.0])
    needed, _ = needs_llc(PlantState.initial(scen), np.full((3, 2), 0.1), np.full(3, 0.9), scen, building)

    assert needed


def test_supply_estimate_without_recirculation_is_outdoor_air():
    H = 3
    vectors = [AgentVector(0, slack=np.zeros(H))] + [
        AgentVector.from_stacked(i, _zone_vector(i, H, 0.2, 650.0), H) for i in (1, 2)
    ]
    estimate = update_supply_estimate(vectors, np.zeros(H), np.array([410.0, 420.0, 430.0]), np.array([700.0, 600.0]))

    assert np.allclose(estimate.c_z, [410.0, 420.0, 430.0])


def test_supply_estimate_for_identical_zones():
    H = 3
    vectors = [AgentVector(0, slack=np.zeros(H))] + [
        AgentVector.from_stacked(i, _zone_vector(i, H, 0.2, 600.0), H) for i in (1, 2)
    ]
    estimate = update_supply_estimate(vectors, np.full(H, 0.5), np.full(H, 400.0), np.array([500.0, 500.0]), 4)

    assert np.allclose(estimate.c_z, [450.0, 500.0, 500.0])
    assert estimate.iteration == 4


def test_agent_vector_scaling():
    vector = AgentVector.from_stacked(1, _zone_vector(1, 2, 0.3, 500.0), 2)

    assert np.allclose(vector.co2, 500.0)
    assert np.allclose(vector.products, 150.0)
    assert np.allclose(vector.stacked()[:2], 500.0 / CO2_SCALE)


def test_recovery_keeps_the_flows(building):
    scen = make_scenario(building, occupancy=[4, 0])
    flows = np.array([[0.1, 0.2], [0.15, 0.05], [0.3, 0.0]])
    traj = recover_feasibility(flows, np.full(3, 0.5), PlantState.initial(scen), scen, building)

    assert traj.co2.shape == (4, 2)
    assert np.allclose(traj.products, flows * traj.co2[:-1])
    assert traj.co2[1, 0] > 400.0


# ---------------------------------------------------------------------------
# Agent subproblems
# ---------------------------------------------------------------------------


def test_subproblem_rejects_flows_above_zone_limit(building, empty_scenario):
    H = 3
    flows_u = np.full((H, 2), 0.6)
    coeffs = co2_coeffs(np.full(H, 400.0), empty_scenario, building.zones, range(0, H), 1800.0)
    current = [np.zeros(H)] + [_zone_vector(i, H, 0.1, 400.0) for i in (1, 2)]
    with pytest.raises(InputError):
        build_agent_subproblem(1, current, np.zeros(H), 1.0, coeffs, _bounds(building, H, np.full((H, 2), 0.1)), flows_u)


def test_slack_agent_takes_the_remaining_capacity(building, empty_scenario):
    H = 3
    flows_u = np.full((H, 2), 0.1)
    coeffs = co2_coeffs(np.full(H, 400.0), empty_scenario, building.zones, range(0, H), 1800.0)
    current = [np.zeros(H)] + [_zone_vector(i, H, 0.2, 400.0) for i in (1, 2)]
    problem = build_agent_subproblem(0, current, np.zeros(H), 1.0, coeffs, _bounds(building, H, flows_u, 1.0), flows_u)

    assert np.allclose(solve_qp(problem).x, 0.6, atol=1e-6)


def test_zone_agent_without_binding_co2_keeps_the_thermal_flows(building, empty_scenario):
    H = 3
    flows_u = np.array([[0.1, 0.2], [0.15, 0.2], [0.3, 0.2]])
    coeffs = co2_coeffs(np.full(H, 400.0), empty_scenario, building.zones, range(0, H), 1800.0)
    current = [np.zeros(H)] + [_zone_vector(i, H, 0.2, 400.0) for i in (1, 2)]
    problem = build_agent_subproblem(1, current, np.zeros(H), 0.0, coeffs, _bounds(building, H, flows_u), flows_u)
    x = solve_qp(problem).x

    assert np.allclose(x[H : 2 * H], flows_u[:, 0], atol=1e-5)


# ---------------------------------------------------------------------------
# Full solves
# ---------------------------------------------------------------------------


def test_slack_co2_returns_the_thermal_plan(building, empty_scenario):
    flows_u = np.full((3, 2), 0.1)
    result = solve_llc(flows_u, np.full(3, 0.9), PlantState.initial(empty_scenario), empty_scenario, building, AdalConfig())

    assert np.array_equal(result.flows_hat, flows_u)
    assert result.outer_iterations == 1
    assert result.inner_iterations == 0
    assert result.converged


def test_thermal_flows_above_zone_limit_are_rejected(building, empty_scenario):
    with pytest.raises(InputError):
        solve_llc(np.full((3, 2), 0.6), np.full(3, 0.9), PlantState.initial(empty_scenario), empty_scenario, building, AdalConfig())


def test_binding_cap_raises_flow(crowded):
    building, scen, state = crowded
    flows_u = np.full((3, 1), 0.05)
    result = solve_llc(flows_u, np.full(3, 0.2), state, scen, building, AdalConfig(max_inner=2000))

    assert np.all(result.flows_hat >= flows_u)
    assert result.flows_hat[0, 0] > 0.2
    assert result.co2_hat[1, 0] <= 800.0 + 1e-6
    assert result.outer_iterations >= 2
    assert len(result.estimates) == result.outer_iterations + 1
    assert result.diagnostics


def test_distributed_matches_centralized(crowded):
    building, scen, state = crowded
    flows_u = np.full((3, 1), 0.05)
    cfg = AdalConfig(max_inner=2000)
    distributed = solve_llc(flows_u, np.full(3, 0.2), state, scen, building, cfg)
    central = solve_llc_centralized(flows_u, np.full(3, 0.2), state, scen, building, cfg)

    assert np.allclose(distributed.flows_hat, central.flows_hat, atol=0.02)
    assert central.inner_iterations == 0


def _exact_flow_increase(flows_u, c_z, state, scen, building, cap, levels=401) -> float:
    """Smallest Σ(m − m_U)² over a fine grid of single-zone two-step plans meeting the cap exactly."""

    coeffs = co2_coeffs(c_z, scen, building.zones, range(0, 2), building.horizon.step_seconds)
    zone = building.zones[0]
    m0, m1 = np.meshgrid(
        np.linspace(flows_u[0, 0], zone.flow_max, levels), np.linspace(flows_u[1, 0], zone.flow_max, levels), indexing="ij"
    )
    c0 = state.co2[0]
    f = coeffs.f_self[0]
    c1 = c0 + coeffs.e_supply[0, 0] * m0 + f * m0 * c0 + coeffs.g_occ[0, 0]
    c2 = c1 + coeffs.e_supply[1, 0] * m1 + f * m1 * c1 + coeffs.g_occ[1, 0]
    ok = (c1 <= cap) & (c2 <= cap)
    spent = (m0 - flows_u[0, 0]) ** 2 + (m1 - flows_u[1, 0]) ** 2
    return float(spent[ok].min())


def test_relaxed_objective_never_exceeds_the_exact_minimum():
    building = make_building(zones=1, horizon_steps=2, total_flow_max=1.0)
    scen = make_scenario(building, occupancy=10, initial_co2=700.0)
    state = PlantState.initial(scen)
    flows_u = np.full((2, 1), 0.05)
    cfg = AdalConfig(eps_in=1e-6, max_inner=2000)
    # all-fresh supply keeps the supply CO2 independent of the flows
    dr = np.zeros(2)
    result = solve_llc(flows_u, dr, state, scen, building, cfg)
    cap = 800.0 - building.horizon.step_seconds / 1000.0 * 0.5 * cfg.eps_out - CO2_BUFFER
    exact = _exact_flow_increase(flows_u, np.full(2, 400.0), state, scen, building, cap)
    relaxed = result.diagnostics[-1]["objective"]

    assert result.converged
    assert result.outer_iterations == 1
    assert relaxed <= exact + 1e-6
    assert float(np.sum((result.flows_hat - flows_u) ** 2)) >= relaxed - 1e-6
    assert np.all(result.co2_hat[1:] <= 800.0 + 1e-6)
