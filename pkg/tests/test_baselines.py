from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError

from app.baselines import (
    DcvConfig,
    brute_force_oracle,
    dcv_fresh_air,
    dcv_ventilation_rate,
    published_dcv_rates,
    run_dcv,
    run_fixed_vent,
)
from app.controller import TldmConfig
from app.errors import InputError, OracleBoundError
from app.schemas import AhuParams, ZoneParams

from tests.conftest import make_building, make_scenario


AHU = AhuParams()


# ---------------------------------------------------------------------------
# DCV rule
# ---------------------------------------------------------------------------


def test_fresh_air_per_person():
    fresh = dcv_fresh_air(np.array([10.0]), [ZoneParams()], DcvConfig(per_person_rate=21.0))
    assert fresh[0] == pytest.approx(0.252)


def test_fresh_air_per_area_for_an_empty_zone():
    cfg = DcvConfig(per_person_rate=15.0, per_area_rate=0.03, variant="II")
    fresh = dcv_fresh_air(np.array([0.0]), [ZoneParams(area=100.0)], cfg)
    assert fresh[0] == pytest.approx(0.0036)


def test_no_people_no_fresh_air():
    fresh = dcv_fresh_air(np.zeros((3, 2)), [ZoneParams(), ZoneParams()], DcvConfig())
    assert fresh.shape == (3, 2)
    assert np.all(fresh == 0.0)


def test_critical_zone_sets_the_outdoor_fraction():
    rule = dcv_ventilation_rate(np.array([0.1, 0.05]), np.array([0.2, 0.3]), AHU)

    assert rule.z_max_ratio == pytest.approx(0.5)
    assert rule.x_ratio == pytest.approx(0.3)
    assert rule.y_corrected == pytest.approx(0.375)
    assert rule.dr == pytest.approx(0.625)
    assert not rule.over_demand


def test_homogeneous_demand_needs_no_correction():
    rule = dcv_ventilation_rate(np.array([0.05, 0.1]), np.array([0.2, 0.4]), AHU)

    assert rule.y_corrected == pytest.approx(0.25)
    assert rule.dr == pytest.approx(0.75)


def test_demand_above_supply_is_clamped():
    rule = dcv_ventilation_rate(np.array([0.3]), np.array([0.2]), AHU)

    assert rule.over_demand
    assert rule.z_max_ratio == 1.0
    assert rule.dr == pytest.approx(AHU.dr_min)


def test_occupied_zone_without_flow_is_flagged():
    rule = dcv_ventilation_rate(np.array([0.1, 0.05]), np.array([0.0, 0.3]), AHU)

    assert rule.under_ventilated
    assert rule.dr == pytest.approx(1.0 - 1.0 / 6.0)


def test_no_demand_keeps_full_recirculation():
    rule = dcv_ventilation_rate(np.zeros(2), np.array([0.2, 0.3]), AHU)
    assert rule.dr == pytest.approx(AHU.dr_max)


def test_rule_inputs_must_align():
    with pytest.raises(InputError):
        dcv_ventilation_rate(np.zeros(2), np.zeros(3), AHU)


def test_variant_one_has_no_area_term():
    with pytest.raises(ValidationError):
        DcvConfig(per_area_rate=0.03, variant="I")


def test_published_rates_by_nearest_zone_count():
    assert published_dcv_rates(5, "I").per_person_rate == 21.0
    assert published_dcv_rates(7, "I").per_person_rate == 21.0
    tuned = published_dcv_rates(12, "II")
    assert (tuned.per_person_rate, tuned.per_area_rate) == (15.0, 0.03)


# ---------------------------------------------------------------------------
# Baseline runs
# ---------------------------------------------------------------------------


def test_fixed_ventilation_pins_the_fraction(building, empty_scenario):
    report = run_fixed_vent(empty_scenario, building, TldmConfig(), steps=2)

    assert np.allclose(report.dr_traj, building.ahu.dr_max)
    assert report.method == "fixed"


def test_dcv_without_occupants_matches_fixed(building, empty_scenario):
    dcv = run_dcv(empty_scenario, building, DcvConfig(), TldmConfig(), steps=2)
    fixed = run_fixed_vent(empty_scenario, building, TldmConfig(), steps=2)

    assert dcv.total_cost == fixed.total_cost
    assert dcv.method == "dcv1"
    assert not any(s["resolved"] for s in dcv.solver_stats)


def test_dcv_with_occupants_opens_the_damper(building):
    scen = make_scenario(building, occupancy=[8, 2], outdoor_temp=31.0, gain=0.5, initial_temps=25.5)
    report = run_dcv(scen, building, published_dcv_rates(2, "II"), TldmConfig(), steps=1)

    assert report.method == "dcv2"
    assert report.dr_traj[0] < building.ahu.dr_max


# ---------------------------------------------------------------------------
# Grid oracle
# ---------------------------------------------------------------------------


def test_oracle_size_guards():
    with pytest.raises(OracleBoundError):
        brute_force_oracle(make_scenario(make_building(zones=3)), make_building(zones=3))
    long = make_building(zones=1, horizon_steps=4)
    with pytest.raises(OracleBoundError):
        brute_force_oracle(make_scenario(long), long)
    small = make_building(zones=1, horizon_steps=1)
    with pytest.raises(OracleBoundError):
        brute_force_oracle(make_scenario(small), small, flow_levels=22)
    with pytest.raises(OracleBoundError):
        brute_force_oracle(make_scenario(small), small, max_combinations=10)


def test_oracle_in_equilibrium_spends_nothing():
    building = make_building(zones=1, horizon_steps=1)
    scen = make_scenario(building, outdoor_temp=25.0, gain=0.0, initial_temps=25.0)
    result = brute_force_oracle(scen, building)

    assert result.feasible
    assert result.cost == 0.0
    assert result.plan.flows[0, 0] == 0.0
    assert result.plan.vent_fraction[0] == pytest.approx(building.ahu.dr_max)
    assert result.evaluated == 21 * 11


def test_finer_grid_is_never_worse():
    building = make_building(zones=1, horizon_steps=2)
    scen = make_scenario(building, outdoor_temp=32.0, gain=0.5, initial_temps=26.0)
    coarse = brute_force_oracle(scen, building, flow_levels=11)
    fine = brute_force_oracle(scen, building, flow_levels=21)

    assert coarse.feasible and fine.feasible
    assert fine.cost <= coarse.cost + 1e-9
    assert np.all(fine.plan.flows <= building.column("flow_max"))


def test_oracle_reports_infeasible_grids():
    building = make_building(zones=1, horizon_steps=1)
    scen = make_scenario(building, occupancy=100)
    result = brute_force_oracle(scen, building)

    assert not result.feasible
    assert result.cost == float("inf")
    assert result.feasible_count == 0
