from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .controller import EpochResult, TldmConfig, UlcRunner, carrying, shifted_flows, run_mpc
from .errors import InputError, OracleBoundError
from .model import ControlPlan, PPM_PER_G_PER_KG, PlantState, RunReport, building_thermal_coeffs
from .schemas import AhuParams, Building, Scenario, ZoneParams
from .ulc import UlcResult
from .utils import logger


DcvVariant = Literal["I", "II"]

# L/s per person, L/s per m^2 tuned offline for zone counts of the published cases
_PUBLISHED_RATES: Dict[int, Dict[str, Tuple[float, float]]] = {
    5: {"I": (21.0, 0.0), "II": (16.0, 0.04)},
    10: {"I": (19.0, 0.0), "II": (15.0, 0.03)},
    20: {"I": (20.0, 0.0), "II": (19.0, 0.03)},
    50: {"I": (21.0, 0.0), "II": (19.0, 0.03)},
    100: {"I": (23.0, 0.0), "II": (21.0, 0.03)},
}


class DcvConfig(BaseModel):
    """Demand-controlled ventilation rule: fresh air from head count (and floor area for variant II)."""

    model_config = ConfigDict(frozen=True)

    per_person_rate: float = Field(default=21.0, ge=0, description="R_p, L/s per person")
    per_area_rate: float = Field(default=0.0, ge=0, description="R_a, L/s per m^2")
    variant: DcvVariant = Field(default="I")
    resolve: bool = Field(default=True, description="Re-solve the thermal level at the amended fraction")

    @model_validator(mode="after")
    def _variant_rates(self) -> "DcvConfig":
        if self.variant == "I" and self.per_area_rate != 0:
            raise ValueError("variant I ventilates by occupancy only (per_area_rate must be 0)")
        return self


def published_dcv_rates(zones: int, variant: DcvVariant) -> DcvConfig:
    """Preset rates for the zone count closest to ``zones``."""

    nearest = min(_PUBLISHED_RATES, key=lambda size: (abs(size - zones), size))
    per_person, per_area = _PUBLISHED_RATES[nearest][variant]
    return DcvConfig(per_person_rate=per_person, per_area_rate=per_area, variant=variant)


@dataclass(frozen=True, eq=False)
class DcvVentilation:
    fresh_flows: np.ndarray
    total_fresh: float
    z_max_ratio: float
    x_ratio: float
    y_corrected: float
    dr: float
    over_demand: bool
    under_ventilated: bool


def dcv_fresh_air(
    occupancy: np.ndarray, zones: Sequence[ZoneParams], cfg: DcvConfig, air_density: float = 1.2
) -> np.ndarray:
    """Required fresh air in kg/s, same shape as ``occupancy`` (zones on the last axis)."""

    area = np.array([z.area for z in zones], dtype=float)
    litres = np.asarray(occupancy, dtype=float) * cfg.per_person_rate + area * cfg.per_area_rate
    return litres * 1e-3 * air_density


def dcv_ventilation_rate(fresh: np.ndarray, flows: np.ndarray, ahu: AhuParams) -> DcvVentilation:
    """Return-air fraction of one step from the multi-zone fresh-air correction.

    Zones without supply flow are left out of the critical-zone ratio; one of them asking
    for fresh air marks the step as under-ventilated.
    """

    fresh = np.asarray(fresh, dtype=float)
    flows = np.asarray(flows, dtype=float)
    if fresh.shape != flows.shape:
        raise InputError("fresh air and flows must cover the same zones")
    active = flows > 0
    under_ventilated = bool(np.any(fresh[~active] > 0))
    total_fresh = float(fresh.sum())
    total_flow = float(flows.sum())

    z_ratio = float(np.max(fresh[active] / flows[active])) if active.any() else 0.0
    over_demand = z_ratio > 1.0
    z_ratio = min(z_ratio, 1.0)
    x_ratio = min(total_fresh / total_flow, z_ratio) if total_flow > 0 else 0.0
    denominator = 1.0 + x_ratio - z_ratio
    y_ratio = min(x_ratio / denominator, 1.0) if x_ratio > 0 else 0.0
    dr = float(np.clip(1.0 - y_ratio, ahu.dr_min, ahu.dr_max))
    if over_demand:
        logger.debug(f"dcv: fresh-air demand exceeds the zone flow (ratio {z_ratio:.3f} after clamping)")
    return DcvVentilation(fresh, total_fresh, z_ratio, x_ratio, y_ratio, dr, over_demand, under_ventilated)


def _fixed_epoch(
    state: PlantState,
    previous: Optional[ControlPlan],
    scen: Scenario,
    building: Building,
    cfg: TldmConfig,
    carry: Optional[UlcResult] = None,
) -> EpochResult:
    H = building.horizon.horizon_steps
    dr = np.full(H, building.ahu.dr_max)
    ulc = UlcRunner(building, scen, cfg, state, carry).solve(dr, shifted_flows(previous, building))
    return EpochResult(ControlPlan(ulc.flows_u, dr), 0, False, False, 0.0, ulc)


def run_fixed_vent(
    scen: Scenario, building: Building, cfg: Optional[TldmConfig] = None, steps: Optional[int] = None
) -> RunReport:
    """Thermal level only, return-air fraction pinned at its maximum."""

    cfg = cfg or TldmConfig()
    policy = carrying(lambda state, prev, carry: _fixed_epoch(state, prev, scen, building, cfg, carry))
    return run_mpc(scen, building, policy, "fixed", steps)


def dcv_epoch(
    state: PlantState,
    previous: Optional[ControlPlan],
    scen: Scenario,
    building: Building,
    cfg: TldmConfig,
    dcv: DcvConfig,
    carry: Optional[UlcResult] = None,
) -> EpochResult:
    H = building.horizon.horizon_steps
    ahu = building.ahu
    runner = UlcRunner(building, scen, cfg, state, carry)
    initial = shifted_flows(previous, building)
    dr_max = np.full(H, ahu.dr_max)
    ulc = runner.solve(dr_max, initial)

    window = slice(state.time_index, state.time_index + H)
    fresh = dcv_fresh_air(scen.arrays().occupancy[window], building.zones, dcv, ahu.air_density)
    rules = [dcv_ventilation_rate(fresh[k], ulc.flows_u[k], ahu) for k in range(H)]
    dr = np.array([r.dr for r in rules])
    resolved = False
    if dcv.resolve and not np.allclose(dr, dr_max):
        ulc = runner.solve(dr, initial)
        resolved = True
    under_ventilated = any(r.under_ventilated for r in rules)
    if under_ventilated:
        logger.warning(f"dcv: step {state.time_index} leaves an occupied zone without supply air")
    flags = {
        "over_demand": any(r.over_demand for r in rules),
        "under_ventilated": under_ventilated,
        "resolved": resolved,
    }
    return EpochResult(ControlPlan(ulc.flows_u, dr), int(resolved), False, False, 0.0, ulc, extra=flags)


def run_dcv(
    scen: Scenario,
    building: Building,
    dcv: DcvConfig,
    cfg: Optional[TldmConfig] = None,
    steps: Optional[int] = None,
) -> RunReport:
    """Thermal level at full recirculation, fraction amended by the DCV rule, thermal level once more."""

    cfg = cfg or TldmConfig()
    method = "dcv1" if dcv.variant == "I" else "dcv2"
    return run_mpc(
        scen,
        building,
        carrying(lambda state, prev, carry: dcv_epoch(state, prev, scen, building, cfg, dcv, carry)),
        method,
        steps,
    )


@dataclass(frozen=True, eq=False)
class OracleResult:
    plan: Optional[ControlPlan]
    cost: float
    feasible_count: int
    evaluated: int

    @property
    def feasible(self) -> bool:
        return self.plan is not None


def brute_force_oracle(
    scen: Scenario,
    building: Building,
    flow_levels: int = 21,
    dr_levels: int = 11,
    state: Optional[PlantState] = None,
    max_combinations: int = 50_000_000,
    chunk: int = 200_000,
) -> OracleResult:
    """Cheapest plan on a uniform control grid, found by enumerating every grid plan.

    Every candidate is rolled through the exact dynamics and kept only when all
    comfort, flow, capacity and fraction constraints hold at every step.
    """

    zones = building.zone_count
    H = building.horizon.horizon_steps
    if zones > 2 or H > 3:
        raise OracleBoundError(f"oracle handles at most 2 zones and 3 steps (got {zones} zones, {H} steps)")
    if not (1 <= flow_levels <= 21 and 1 <= dr_levels <= 21):
        raise OracleBoundError("grid levels must lie in [1, 21]")
    per_step = flow_levels**zones * dr_levels
    total = per_step**H
    if total > max_combinations:
        raise OracleBoundError(f"{total} grid plans exceed the cap of {max_combinations}")

    state = state or PlantState.initial(scen)
    if scen.length < state.time_index + H:
        raise InputError("scenario too short for the oracle window")
    ahu = building.ahu
    flow_grid = [np.linspace(z.flow_min, z.flow_max, flow_levels) for z in building.zones]
    # fractions descend so that cost ties resolve towards more recirculation
    mesh = np.meshgrid(*flow_grid, np.linspace(ahu.dr_max, ahu.dr_min, dr_levels), indexing="ij")
    choice_flows = np.column_stack([m.ravel() for m in mesh[:-1]])
    choice_dr = mesh[-1].ravel()

    window = range(state.time_index, state.time_index + H)
    coeffs = building_thermal_coeffs(building, scen, window)
    arrays = scen.arrays()
    sl = slice(window.start, window.stop)
    t_out, c_out, price = arrays.outdoor_temp[sl], arrays.outdoor_co2[sl], arrays.price[sl]
    occupancy = arrays.occupancy[sl]
    step = building.horizon.step_seconds
    mass = building.column("air_mass")
    t_min, t_max, c_max = building.column("temp_min"), building.column("temp_max"), building.column("co2_max")
    gain = ahu.specific_heat * ahu.cop_inverse
    t_c = ahu.supply_temp

    best_cost, best_index, feasible_count = np.inf, -1, 0
    for start in range(0, total, chunk):
        index = np.arange(start, min(start + chunk, total))
        digits = np.unravel_index(index, (per_step,) * H)
        temps = np.tile(state.temps, (index.size, 1))
        co2 = np.tile(state.co2, (index.size, 1))
        spent = np.zeros(index.size)
        ok = np.ones(index.size, dtype=bool)
        for k in range(H):
            flows = choice_flows[digits[k]]
            dr = choice_dr[digits[k]]
            total_flow = flows.sum(axis=1)
            ok &= total_flow <= ahu.total_flow_max + 1e-12
            ok &= np.all(flows * step <= mass * (1 + 1e-12), axis=1)
            safe = np.where(total_flow > 0, total_flow, 1.0)
            recirculated = np.where(total_flow > 0, (flows * co2).sum(axis=1) / safe, co2.mean(axis=1))
            supply = (1.0 - dr) * c_out[k] + dr * recirculated
            cooling = gain * (1.0 - dr) * total_flow * (t_out[k] - t_c) + gain * dr * (flows * (temps - t_c)).sum(axis=1)
            spent += price[k] * (np.maximum(cooling, 0.0) + ahu.fan_coeff * total_flow**2) * building.horizon.step_hours
            temps = (
                coeffs.a_self * temps
                + temps @ coeffs.a_neighbor.T
                + coeffs.c_flow * flows * (temps - t_c)
                + coeffs.d_drive[k]
            )
            grams = occupancy[k] * scen.co2_gen_rate / 3600.0 * step
            co2 = co2 + grams * PPM_PER_G_PER_KG / mass + flows * (supply[:, None] - co2) * step / mass
            ok &= np.all((temps >= t_min - 1e-9) & (temps <= t_max + 1e-9) & (co2 <= c_max + 1e-9), axis=1)
        feasible_count += int(ok.sum())
        if ok.any():
            candidates = np.where(ok, spent, np.inf)
            local = int(np.argmin(candidates))
            if candidates[local] < best_cost:
                best_cost, best_index = float(candidates[local]), int(index[local])

    if best_index < 0:
        logger.warning(f"oracle: none of {total} grid plans is feasible")
        return OracleResult(None, float("inf"), 0, total)
    digits = np.unravel_index(best_index, (per_step,) * H)
    plan = ControlPlan(
        np.vstack([choice_flows[d] for d in digits]), np.array([choice_dr[d] for d in digits])
    )
    return OracleResult(plan, best_cost, feasible_count, total)


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    config: DcvConfig
    max_co2: float
    iterations: int
    within_band: bool
    report: RunReport


def calibrate_dcv(
    scen: Scenario,
    building: Building,
    variant: DcvVariant,
    cfg: Optional[TldmConfig] = None,
    steps: Optional[int] = None,
    band: float = 25.0,
    rate_bounds: Tuple[float, float] = (0.0, 60.0),
    max_iter: int = 20,
) -> CalibrationResult:
    """Bisect the per-person rate until the run's peak CO2 sits within ``band`` ppm below the cap.

    Variant II keeps the published per-area rate fixed.
    """

    cap = float(building.column("co2_max").min())
    per_area = published_dcv_rates(building.zone_count, variant).per_area_rate
    lo, hi = rate_bounds
    best: Optional[CalibrationResult] = None
    for iteration in range(1, max_iter + 1):
        rate = 0.5 * (lo + hi)
        dcv = DcvConfig(per_person_rate=rate, per_area_rate=per_area, variant=variant)
        report = run_dcv(scen, building, dcv, cfg, steps)
        peak = report.max_co2
        logger.info(f"calibrate-dcv: R_p={rate:.3f} L/s per person -> peak CO2 {peak:.1f} ppm")
        within = cap - band <= peak <= cap
        if peak <= cap and (best is None or peak > best.max_co2):
            best = CalibrationResult(dcv, peak, iteration, within, report)
        if within:
            return best
        if peak > cap:
            lo = rate
        else:
            hi = rate
    if best is None:
        dcv = DcvConfig(per_person_rate=rate_bounds[1], per_area_rate=per_area, variant=variant)
        report = run_dcv(scen, building, dcv, cfg, steps)
        best = CalibrationResult(dcv, report.max_co2, max_iter, False, report)
    logger.warning(f"calibrate-dcv: no rate within {band} ppm of the cap after {max_iter} bisections")
    return best
