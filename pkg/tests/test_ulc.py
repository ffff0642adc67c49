from __future__ import annotations

import numpy as np
import pytest

from app.adal import AdalConfig
from app.errors import InputError, ParameterError
from app.model import PlantState, thermal_rollout
from app.baselines import brute_force_oracle
from app.ulc import McCormickBox, build_ulc, fastest_flows, mccormick_constraints, solve_ulc

from tests.conftest import make_building, make_scenario


# ---------------------------------------------------------------------------
# McCormick envelopes
# ---------------------------------------------------------------------------


def test_envelope_is_tight_at_the_corner():
    box = McCormickBox(0.1, 0.5, 400.0, 800.0)

    assert box.contains(np.array([0.1]), np.array([400.0]), np.array([40.0]))[0]
    assert not box.contains(np.array([0.1]), np.array([400.0]), np.array([40.5]))[0]
    assert not box.contains(np.array([0.1]), np.array([400.0]), np.array([39.5]))[0]


def test_zero_width_factor_pins_the_product():
    box = McCormickBox(0.3, 0.3, 400.0, 800.0)
    y = np.linspace(400.0, 800.0, 9)

    assert np.all(box.contains(np.full(9, 0.3), y, 0.3 * y))
    assert not np.any(box.contains(np.full(9, 0.3), y, 0.3 * y + 1.0))


def test_inverted_box_is_rejected():
    with pytest.raises(InputError):
        McCormickBox(0.5, 0.1, 400.0, 800.0)


def test_envelope_contains_random_bilinear_points():
    rng = np.random.default_rng(2024)
    box = McCormickBox(0.0, 0.5, 390.0, 799.0)
    m = rng.uniform(box.x_lo, box.x_hi, size=10_000)
    c = rng.uniform(box.y_lo, box.y_hi, size=10_000)

    assert np.all(box.contains(m, c, m * c, tol=1e-7))


def test_constraint_rows_have_expected_form():
    rows = mccormick_constraints(McCormickBox(1.0, 2.0, 3.0, 4.0))

    assert rows.shape == (4, 4)
    assert np.all(rows[:2, 2] == -1.0)
    assert np.all(rows[2:, 2] == 1.0)


# ---------------------------------------------------------------------------
# Problem construction
# ---------------------------------------------------------------------------


def test_fixed_dr_shape_and_range_are_checked(building, empty_scenario):
    state = PlantState.initial(empty_scenario)
    with pytest.raises(InputError):
        build_ulc(building, empty_scenario, state, np.full(2, 0.9))
    with pytest.raises(ParameterError):
        build_ulc(building, empty_scenario, state, np.full(3, 0.95))


def test_hot_start_relaxes_the_upper_bound():
    building = make_building(zones=1, flow_max=0.1)
    scen = make_scenario(building, initial_temps=30.0)
    problem = build_ulc(building, scen, PlantState.initial(scen), np.full(3, 0.9))

    assert problem.transient[0, 0]
    assert problem.temp_hi[0, 0] > 26.0
    assert problem.temp_hi[0, 0] == pytest.approx(
        thermal_rollout(problem.init_temps, np.full((3, 1), 0.1), problem.coeffs)[1, 0] + 0.01
    )


def test_steady_steps_use_the_comfort_band(building, empty_scenario):
    problem = build_ulc(building, empty_scenario, PlantState.initial(empty_scenario), np.full(3, 0.9))

    assert not problem.transient.any()
    assert np.all(problem.temp_hi == 26.0)
    assert np.all(problem.temp_lo == 24.0)


def test_agent_layout_covers_neighbor_copies():
    building = make_building(zones=3)
    scen = make_scenario(building)
    problem = build_ulc(building, scen, PlantState.initial(scen), np.full(3, 0.9))
    agents, coupling = problem.agents()

    assert [a.name for a in agents] == ["slack", "zone-0", "zone-1", "zone-2"]
    # capacity rows plus one consensus row per (zone, neighbor, step 1..H-1)
    assert coupling.row_count == 3 + 4 * 2
    assert np.allclose(coupling.residual([a.x0 for a in agents])[3:], 0.0)


def test_fastest_flows_respect_capacity():
    building = make_building(zones=4, total_flow_max=1.0)
    flows = fastest_flows(building)

    assert flows.sum() == pytest.approx(1.0)
    assert np.all(flows <= building.column("flow_max"))


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------


def test_no_load_means_no_flow():
    building = make_building(zones=1)
    scen = make_scenario(building, outdoor_temp=25.0, gain=0.0, initial_temps=25.0)
    problem = build_ulc(building, scen, PlantState.initial(scen), np.full(3, 0.9))
    result = solve_ulc(problem, AdalConfig(max_inner=2000))

    assert np.all(result.flows_u <= 1e-2)
    assert np.allclose(result.recovered_temps, 25.0, atol=0.2)


def test_flows_stay_within_bounds_and_capacity():
    building = make_building(zones=2, total_flow_max=0.3)
    scen = make_scenario(building, outdoor_temp=32.0, gain=0.5, initial_temps=[27.0, 28.0])
    problem = build_ulc(building, scen, PlantState.initial(scen), np.full(3, 0.9))
    result = solve_ulc(problem, AdalConfig(max_inner=300))

    assert np.all(result.flows_u >= -1e-12)
    assert np.all(result.flows_u <= building.column("flow_max") + 1e-12)
    assert np.all(result.flows_u.sum(axis=1) <= 0.3 + 1e-12)


def test_recovered_temperatures_are_an_exact_rollout(building):
    scen = make_scenario(building, outdoor_temp=31.0, gain=0.4, initial_temps=[26.0, 25.5])
    problem = build_ulc(building, scen, PlantState.initial(scen), np.full(3, 0.9))
    result = solve_ulc(problem, AdalConfig())

    assert np.allclose(result.recovered_temps, thermal_rollout(problem.init_temps, result.flows_u, problem.coeffs))
    assert result.recovered_temps.shape == (4, 2)


def test_identical_decoupled_zones_get_identical_flows():
    building = make_building(zones=2, adjacent=False, total_flow_max=2.0)
    scen = make_scenario(building, outdoor_temp=31.0, gain=0.4, initial_temps=26.0)
    problem = build_ulc(building, scen, PlantState.initial(scen), np.full(3, 0.9))
    result = solve_ulc(problem, AdalConfig())

    assert np.allclose(result.flows_u[:, 0], result.flows_u[:, 1], atol=1e-8)


def test_warm_start_from_a_different_layout_is_ignored(building):
    scen = make_scenario(building, outdoor_temp=31.0, gain=0.4, initial_temps=[26.0, 25.5])
    previous = solve_ulc(build_ulc(building, scen, PlantState.initial(scen), np.full(3, 0.9)), AdalConfig())

    wider = make_building(zones=3)
    wider_scen = make_scenario(wider, outdoor_temp=31.0, gain=0.4, initial_temps=26.0)
    problem = build_ulc(wider, wider_scen, PlantState.initial(wider_scen), np.full(3, 0.9))
    result = solve_ulc(problem, AdalConfig(), warm=previous)

    assert result.flows_u.shape == (3, 3)
    assert len(result.adal.x) == 4


# ---------------------------------------------------------------------------
# Optimality
# ---------------------------------------------------------------------------


def _exact_grid_optimum(problem, building, levels=(201, 2001)) -> float:
    """Cheapest comfort-feasible two-step plan of a single zone on a fine flow grid."""

    c = problem.coeffs
    ahu = building.ahu
    zone = building.zones[0]
    t_c = c.supply_temp
    m0, m1 = np.meshgrid(
        np.linspace(zone.flow_min, zone.flow_max, levels[0]), np.linspace(zone.flow_min, zone.flow_max, levels[1]), indexing="ij"
    )
    a = c.a_self[0] + c.a_neighbor[0, 0]
    t0 = problem.init_temps[0]
    t1 = a * t0 + c.c_flow[0] * m0 * (t0 - t_c) + c.d_drive[0, 0]
    t2 = a * t1 + c.c_flow[0] * m1 * (t1 - t_c) + c.d_drive[1, 0]
    gain = ahu.specific_heat * ahu.cop_inverse
    spent = np.zeros_like(m0)
    for k, (m, t) in enumerate([(m0, t0), (m1, t1)]):
        dr = problem.fixed_dr[k]
        cooling = gain * ((1.0 - dr) * m * (problem.t_out[k] - t_c) + dr * m * (t - t_c))
        spent += problem.price[k] * (np.maximum(cooling, 0.0) + ahu.fan_coeff * m**2) * problem.step_hours
    ok = (t1 >= zone.temp_min) & (t1 <= zone.temp_max) & (t2 >= zone.temp_min) & (t2 <= zone.temp_max)
    return float(spent[ok].min())


@pytest.fixture
def warm_zone():
    """One zone drifting towards its upper bound within two steps; no transient relaxation."""

    building = make_building(zones=1, horizon_steps=2, total_flow_max=1.0)
    scen = make_scenario(building, outdoor_temp=30.0, gain=0.2, initial_temps=25.5)
    problem = build_ulc(building, scen, PlantState.initial(scen), np.full(2, 0.9))
    return building, scen, problem


def test_relaxed_cost_is_a_tight_lower_bound(warm_zone):
    building, scen, problem = warm_zone
    result = solve_ulc(problem, AdalConfig(eps_in=1e-6, max_inner=2000))
    exact = _exact_grid_optimum(problem, building)

    assert not problem.transient.any()
    assert result.converged
    assert result.objective <= exact + 1e-6
    assert result.objective >= 0.95 * exact


def test_relaxed_cost_is_below_the_grid_oracle(warm_zone):
    building, scen, problem = warm_zone
    result = solve_ulc(problem, AdalConfig(eps_in=1e-6, max_inner=2000))
    oracle = brute_force_oracle(scen, building, flow_levels=21, dr_levels=1)

    assert oracle.feasible
    assert np.allclose(oracle.plan.vent_fraction, 0.9)
    assert result.objective <= oracle.cost
    assert result.exact_cost <= 1.10 * oracle.cost
    assert np.all(result.recovered_temps[1:] <= 26.0 + 0.05)


def test_cost_grows_as_recirculation_drops():
    building = make_building(zones=1, horizon_steps=3, total_flow_max=1.0)
    scen = make_scenario(building, outdoor_temp=31.0, gain=0.4, initial_temps=25.5)
    state = PlantState.initial(scen)
    costs = []
    for dr in (0.9, 0.6, 0.3, 0.0):
        result = solve_ulc(build_ulc(building, scen, state, np.full(3, dr)), AdalConfig(eps_in=1e-6, max_inner=2000))
        assert result.converged
        costs.append(result.objective)

    assert all(before < after for before, after in zip(costs, costs[1:]))


# ---------------------------------------------------------------------------
# Warm starts
# ---------------------------------------------------------------------------


def test_shifted_multipliers_move_one_step_forward(building, empty_scenario):
    problem = build_ulc(building, empty_scenario, PlantState.initial(empty_scenario), np.full(3, 0.9))
    alpha = np.arange(7, dtype=float)

    assert problem.coupling().row_count == 7
    assert problem.shift_rows(alpha).tolist() == [1.0, 2.0, 2.0, 4.0, 4.0, 6.0, 6.0]


def test_seeded_multipliers_of_the_wrong_length_are_ignored(building, empty_scenario):
    problem = build_ulc(building, empty_scenario, PlantState.initial(empty_scenario), np.full(3, 0.9))
    plain = solve_ulc(problem, AdalConfig())
    seeded = solve_ulc(problem, AdalConfig(), alpha0=np.zeros(2))

    assert np.array_equal(plain.flows_u, seeded.flows_u)
    assert plain.iterations == seeded.iterations
