from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Sequence

import numpy as np

from .errors import InputError, ParameterError, StabilityError
from .schemas import AhuParams, Building, BuildingTopology, Scenario, ZoneParams


# grams of CO2 per kg of air -> ppm (mass ratio)
PPM_PER_G_PER_KG = 1e3


# ---------------------------------------------------------------------------
# Numeric types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PlantState:
    """Measured zone temperatures (degC) and CO2 (ppm) at step ``time_index``."""

    temps: np.ndarray
    co2: np.ndarray
    time_index: int = 0

    def __post_init__(self) -> None:
        temps = np.asarray(self.temps, dtype=float)
        co2 = np.asarray(self.co2, dtype=float)
        if temps.shape != co2.shape or temps.ndim != 1:
            raise InputError("temps and co2 must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(temps)) and np.all(np.isfinite(co2))):
            raise InputError("plant state must be finite")
        if np.any(co2 < 0):
            raise InputError("zone CO2 must be >= 0")
        object.__setattr__(self, "temps", temps)
        object.__setattr__(self, "co2", co2)

    @classmethod
    def initial(cls, scen: Scenario) -> "PlantState":
        return cls(np.array(scen.initial_temps), np.array(scen.initial_co2), 0)


@dataclass(frozen=True, eq=False)
class ControlPlan:
    """Zone flows ``(H, I)`` in kg/s and return-air fraction ``(H,)`` per step."""

    flows: np.ndarray
    vent_fraction: np.ndarray

    def __post_init__(self) -> None:
        flows = np.atleast_2d(np.asarray(self.flows, dtype=float))
        dr = np.atleast_1d(np.asarray(self.vent_fraction, dtype=float))
        if flows.shape[0] != dr.shape[0]:
            raise InputError("flows and vent_fraction must cover the same steps")
        if not (np.all(np.isfinite(flows)) and np.all(np.isfinite(dr))):
            raise InputError("control plan must be finite")
        object.__setattr__(self, "flows", flows)
        object.__setattr__(self, "vent_fraction", dr)

    @property
    def steps(self) -> int:
        return int(self.flows.shape[0])

    def first_step(self) -> "ControlPlan":
        return ControlPlan(self.flows[:1].copy(), self.vent_fraction[:1].copy())

    def shifted(self) -> "ControlPlan":
        """Drop the executed step and repeat the last entry."""

        flows = np.vstack([self.flows[1:], self.flows[-1:]])
        dr = np.concatenate([self.vent_fraction[1:], self.vent_fraction[-1:]])
        return ControlPlan(flows, dr)

    def clamped(self, building: Building) -> "ControlPlan":
        ahu = building.ahu
        flows = np.clip(self.flows, building.column("flow_min"), building.column("flow_max"))
        flows = enforce_capacity(flows, building.column("flow_min"), ahu.total_flow_max)
        dr = np.clip(self.vent_fraction, ahu.dr_min, ahu.dr_max)
        return ControlPlan(flows, dr)

    def violations(self, building: Building, tol: float = 1e-9) -> List[str]:
        problems = []
        if np.any(self.flows < building.column("flow_min") - tol):
            problems.append("flow below flow_min")
        if np.any(self.flows > building.column("flow_max") + tol):
            problems.append("flow above flow_max")
        if np.any(self.flows.sum(axis=1) > building.ahu.total_flow_max + tol):
            problems.append("total flow above AHU capacity")
        if np.any(self.vent_fraction < building.ahu.dr_min - tol) or np.any(
            self.vent_fraction > building.ahu.dr_max + tol
        ):
            problems.append("vent_fraction outside [dr_min, dr_max]")
        return problems


@dataclass(frozen=True, eq=False)
class ThermalCoeffs:
    a_self: np.ndarray  # (I,)
    a_neighbor: np.ndarray  # (I, I), zero where not adjacent
    c_flow: np.ndarray  # (I,)
    d_drive: np.ndarray  # (W, I)
    supply_temp: float


@dataclass(frozen=True, eq=False)
class Co2Coeffs:
    e_supply: np.ndarray  # (W, I)
    f_self: np.ndarray  # (I,)
    g_occ: np.ndarray  # (W, I)


class SupplyMix(NamedTuple):
    concentration: float
    degenerate: bool


class PowerDraw(NamedTuple):
    cooling: float
    fan: float
    clamped: bool


@dataclass(frozen=True, eq=False)
class ComfortSummary:
    temp_max_violation: np.ndarray  # per zone, degC
    temp_integrated: np.ndarray  # per zone, degC*h
    co2_max_violation: np.ndarray  # per zone, ppm
    co2_integrated: np.ndarray  # per zone, ppm*h
    temp_mean_violation: float
    co2_mean_violation: float
    tolerance: float

    @property
    def max_temp_violation(self) -> float:
        return float(self.temp_max_violation.max(initial=0.0))

    @property
    def max_co2_violation(self) -> float:
        return float(self.co2_max_violation.max(initial=0.0))

    @property
    def temp_satisfied(self) -> bool:
        return self.max_temp_violation <= self.tolerance

    @property
    def co2_satisfied(self) -> bool:
        return self.max_co2_violation <= self.tolerance

    @property
    def satisfied(self) -> bool:
        return self.temp_satisfied and self.co2_satisfied


@dataclass(frozen=True, eq=False)
class RunReport:
    """Executed trajectories of one simulated run.

    ``temp_traj``/``co2_traj`` have one more row than the control series: row 0 is
    the initial state.
    """

    method: str
    start_index: int
    step_hours: float
    temp_traj: np.ndarray
    co2_traj: np.ndarray
    flow_traj: np.ndarray
    dr_traj: np.ndarray
    cooling_power: np.ndarray
    fan_power: np.ndarray
    price: np.ndarray
    step_cost: np.ndarray
    total_cost: float
    degenerate_mixing: np.ndarray
    cooling_clamped: np.ndarray
    solver_stats: List[Dict[str, Any]] = field(default_factory=list)
    diagnostics: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return int(self.flow_traj.shape[0])

    def final_state(self) -> PlantState:
        return PlantState(self.temp_traj[-1].copy(), self.co2_traj[-1].copy(), self.start_index + self.steps)

    @property
    def max_co2(self) -> float:
        return float(self.co2_traj[1:].max(initial=0.0))

    @property
    def mean_epoch_ms(self) -> float:
        times = [s["wall_ms"] for s in self.solver_stats if "wall_ms" in s]
        return float(np.mean(times)) if times else 0.0

    @property
    def nonconverged_epochs(self) -> int:
        return sum(1 for s in self.solver_stats if not s.get("converged", True))

    @property
    def infeasible_epochs(self) -> int:
        return sum(1 for s in self.solver_stats if s.get("dr_floor_hit") or s.get("fallback"))


class TrajectoryRecorder:
    """Accumulates executed steps into a RunReport."""

    def __init__(self, init: PlantState, step_hours: float, method: str = "simulate") -> None:
        self.method = method
        self.start_index = init.time_index
        self.step_hours = step_hours
        self.temps: List[np.ndarray] = [init.temps.copy()]
        self.co2: List[np.ndarray] = [init.co2.copy()]
        self.flows: List[np.ndarray] = []
        self.dr: List[float] = []
        self.cooling: List[float] = []
        self.fan: List[float] = []
        self.price: List[float] = []
        self.degenerate: List[bool] = []
        self.clamped: List[bool] = []
        self.stats: List[Dict[str, Any]] = []
        self.diagnostics: List[Dict[str, Any]] = []

    def append(
        self,
        temps: np.ndarray,
        co2: np.ndarray,
        flows: np.ndarray,
        dr: float,
        draw: PowerDraw,
        price: float,
        degenerate: bool,
    ) -> None:
        self.temps.append(temps)
        self.co2.append(co2)
        self.flows.append(np.asarray(flows, dtype=float))
        self.dr.append(float(dr))
        self.cooling.append(draw.cooling)
        self.fan.append(draw.fan)
        self.price.append(float(price))
        self.degenerate.append(degenerate)
        self.clamped.append(draw.clamped)

    def extend(self, report: RunReport) -> None:
        for k in range(report.steps):
            self.append(
                report.temp_traj[k + 1],
                report.co2_traj[k + 1],
                report.flow_traj[k],
                report.dr_traj[k],
                PowerDraw(report.cooling_power[k], report.fan_power[k], bool(report.cooling_clamped[k])),
                report.price[k],
                bool(report.degenerate_mixing[k]),
            )

    def build(self) -> RunReport:
        zones = self.temps[0].shape[0]
        cooling = np.asarray(self.cooling, dtype=float)
        fan = np.asarray(self.fan, dtype=float)
        price = np.asarray(self.price, dtype=float)
        return RunReport(
            method=self.method,
            start_index=self.start_index,
            step_hours=self.step_hours,
            temp_traj=np.vstack(self.temps),
            co2_traj=np.vstack(self.co2),
            flow_traj=np.vstack(self.flows) if self.flows else np.zeros((0, zones)),
            dr_traj=np.asarray(self.dr, dtype=float),
            cooling_power=cooling,
            fan_power=fan,
            price=price,
            step_cost=price * (cooling + fan) * self.step_hours,
            total_cost=cost(cooling, fan, price, self.step_hours),
            degenerate_mixing=np.asarray(self.degenerate, dtype=bool),
            cooling_clamped=np.asarray(self.clamped, dtype=bool),
            solver_stats=list(self.stats),
            diagnostics=list(self.diagnostics),
        )


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def _window_slice(scen: Scenario, window: range) -> slice:
    if window.step != 1 or window.start < 0 or window.stop > scen.length or window.stop < window.start:
        raise InputError(f"window [{window.start}, {window.stop}) outside scenario of length {scen.length}")
    return slice(window.start, window.stop)


def estimate_internal_gain(occupancy: np.ndarray, per_person_kw: float = 0.1, baseline_kw: float = 0.2) -> np.ndarray:
    """Zone heat gain (kW) from head count."""

    return np.asarray(occupancy, dtype=float) * per_person_kw + baseline_kw


def thermal_coeffs(
    zones: Sequence[ZoneParams],
    topo: BuildingTopology,
    ahu: AhuParams,
    scen: Scenario,
    window: range,
    step_seconds: float,
) -> ThermalCoeffs:
    sl = _window_slice(scen, window)
    capacity = np.array([z.heat_capacity for z in zones], dtype=float)
    r_out = np.array([z.resistance_to_outside for z in zones], dtype=float)
    if np.any(capacity <= 0) or np.any(r_out <= 0):
        raise ParameterError("heat capacity and outside resistance must be > 0")
    count = len(zones)
    a_neighbor = np.zeros((count, count))
    for edge in topo.adjacency:
        if edge.resistance <= 0:
            raise ParameterError(f"coupling resistance between zones {edge.i} and {edge.j} must be > 0")
        a_neighbor[edge.i, edge.j] = step_seconds / (capacity[edge.i] * edge.resistance)
        a_neighbor[edge.j, edge.i] = step_seconds / (capacity[edge.j] * edge.resistance)

    a_self = 1.0 - (a_neighbor.sum(axis=1) + step_seconds / (capacity * r_out))
    c_flow = -step_seconds * ahu.specific_heat / capacity
    arrays = scen.arrays()
    t_out = arrays.outdoor_temp[sl]
    gains = arrays.internal_gain[sl]
    d_drive = step_seconds * t_out[:, None] / (capacity * r_out) + step_seconds * gains / capacity
    return ThermalCoeffs(a_self, a_neighbor, c_flow, d_drive, float(ahu.supply_temp))


def building_thermal_coeffs(building: Building, scen: Scenario, window: range) -> ThermalCoeffs:
    return thermal_coeffs(
        building.zones, building.topology, building.ahu, scen, window, building.horizon.step_seconds
    )


def thermal_step(temps: np.ndarray, flows: np.ndarray, coeffs: ThermalCoeffs, k: int) -> np.ndarray:
    temps = np.asarray(temps, dtype=float)
    return (
        coeffs.a_self * temps
        + coeffs.a_neighbor @ temps
        + coeffs.c_flow * np.asarray(flows, dtype=float) * (temps - coeffs.supply_temp)
        + coeffs.d_drive[k]
    )


def thermal_rollout(init_temps: np.ndarray, flows: np.ndarray, coeffs: ThermalCoeffs) -> np.ndarray:
    """Exact temperature trajectory ``(H+1, I)`` under ``flows`` ``(H, I)``."""

    traj = [np.asarray(init_temps, dtype=float)]
    for k in range(flows.shape[0]):
        traj.append(thermal_step(traj[-1], flows[k], coeffs, k))
    return np.vstack(traj)


def supply_co2(co2: np.ndarray, flows: np.ndarray, dr: float, c_out: float) -> SupplyMix:
    co2 = np.asarray(co2, dtype=float)
    flows = np.asarray(flows, dtype=float)
    total = flows.sum()
    if total > 0:
        return SupplyMix(float((1.0 - dr) * c_out + dr * (flows @ co2) / total), False)
    return SupplyMix(float((1.0 - dr) * c_out + dr * co2.mean()), True)


def check_euler_guard(zones: Sequence[ZoneParams], flows: np.ndarray, step_seconds: float) -> None:
    mass = np.array([z.air_mass for z in zones], dtype=float)
    bad = np.nonzero(np.asarray(flows, dtype=float) * step_seconds > mass * (1 + 1e-12))[0]
    if bad.size:
        raise StabilityError(int(bad[0]))


def co2_step(
    co2: np.ndarray,
    flows: np.ndarray,
    c_supply: float,
    occupancy: np.ndarray,
    zones: Sequence[ZoneParams],
    step_seconds: float,
    co2_gen_rate: float = 40.0,
) -> np.ndarray:
    check_euler_guard(zones, flows, step_seconds)
    co2 = np.asarray(co2, dtype=float)
    mass = np.array([z.air_mass for z in zones], dtype=float)
    grams = np.asarray(occupancy, dtype=float) * co2_gen_rate / 3600.0 * step_seconds
    exchange = np.asarray(flows, dtype=float) * (c_supply - co2) * step_seconds
    return co2 + grams * PPM_PER_G_PER_KG / mass + exchange / mass


def power(flows: np.ndarray, temps: np.ndarray, dr: float, t_out: float, ahu: AhuParams) -> PowerDraw:
    flows = np.asarray(flows, dtype=float)
    temps = np.asarray(temps, dtype=float)
    total = float(flows.sum())
    gain = ahu.specific_heat * ahu.cop_inverse
    cooling = gain * (1.0 - dr) * total * (t_out - ahu.supply_temp) + gain * dr * float(
        flows @ (temps - ahu.supply_temp)
    )
    fan = ahu.fan_coeff * total**2
    if cooling < 0:
        return PowerDraw(0.0, fan, True)
    return PowerDraw(float(cooling), float(fan), False)


def cost(cooling: np.ndarray, fan: np.ndarray, price: np.ndarray, step_hours: float) -> float:
    """Energy bill of a power series (price per kWh, step length in hours)."""

    cooling = np.asarray(cooling, dtype=float)
    fan = np.asarray(fan, dtype=float)
    price = np.asarray(price, dtype=float)
    if not (cooling.shape == fan.shape == price.shape):
        raise InputError(f"length mismatch: cooling {cooling.shape}, fan {fan.shape}, price {price.shape}")
    return float(np.sum(price * (cooling + fan) * step_hours))


def enforce_capacity(flows: np.ndarray, flow_min: np.ndarray, total_flow_max: float) -> np.ndarray:
    """Scale the part above the floor down so each step's total fits the AHU capacity.

    ``flow_min`` is either one floor per zone or a per-step floor of the same shape as ``flows``.
    """

    flows = np.array(flows, dtype=float, copy=True)
    floor = np.broadcast_to(np.asarray(flow_min, dtype=float), flows.shape)
    cap = total_flow_max
    for k in range(flows.shape[0]):
        total = flows[k].sum()
        if total > cap:
            excess = np.maximum(flows[k] - floor[k], 0.0)
            headroom = max(cap - floor[k].sum(), 0.0)
            flows[k] = floor[k] + excess * (headroom / excess.sum() if excess.sum() > 0 else 0.0)
    return flows


def simulate(plan: ControlPlan, scen: Scenario, init: PlantState, building: Building, method: str = "simulate") -> RunReport:
    """Roll the exact coupled dynamics forward under ``plan`` from ``init``."""

    horizon = building.horizon
    recorder = TrajectoryRecorder(init, horizon.step_hours, method)
    steps = plan.steps
    if steps == 0:
        return recorder.build()
    if plan.flows.shape[1] != building.zone_count or init.temps.shape[0] != building.zone_count:
        raise InputError("plan and state must match the building's zone count")
    window = range(init.time_index, init.time_index + steps)
    coeffs = building_thermal_coeffs(building, scen, window)
    arrays = scen.arrays()

    temps, co2 = init.temps, init.co2
    for k in range(steps):
        t = init.time_index + k
        flows, dr = plan.flows[k], float(plan.vent_fraction[k])
        mix = supply_co2(co2, flows, dr, arrays.outdoor_co2[t])
        draw = power(flows, temps, dr, arrays.outdoor_temp[t], building.ahu)
        next_temps = thermal_step(temps, flows, coeffs, k)
        next_co2 = co2_step(
            co2, flows, mix.concentration, arrays.occupancy[t], building.zones, horizon.step_seconds, scen.co2_gen_rate
        )
        recorder.append(next_temps, next_co2, flows, dr, draw, arrays.price[t], mix.degenerate)
        temps, co2 = next_temps, next_co2
    return recorder.build()


def exact_rollout(
    flows: np.ndarray, dr: np.ndarray, state: PlantState, scen: Scenario, building: Building
) -> RunReport:
    """Exact trajectories for a horizon plan without validating actuator bounds."""

    return simulate(ControlPlan(flows, dr), scen, state, building, method="rollout")


def check_comfort(
    report: RunReport, zones: Sequence[ZoneParams], tolerance: float = 0.0, exempt_steps: int = 0
) -> ComfortSummary:
    """Exceedance of the closed comfort intervals over the post-control samples.

    Row 0 of the trajectories is the given initial state and is never scored; the next
    ``exempt_steps`` samples are skipped as well.
    """

    t_min = np.array([z.temp_min for z in zones])
    t_max = np.array([z.temp_max for z in zones])
    c_max = np.array([z.co2_max for z in zones])
    temps = report.temp_traj[1 + exempt_steps :]
    co2 = report.co2_traj[1 + exempt_steps :]
    temp_exceed = np.maximum(np.maximum(temps - t_max, t_min - temps), 0.0)
    co2_exceed = np.maximum(co2 - c_max, 0.0)
    count = len(zones)
    return ComfortSummary(
        temp_max_violation=temp_exceed.max(axis=0) if temps.size else np.zeros(count),
        temp_integrated=temp_exceed.sum(axis=0) * report.step_hours if temps.size else np.zeros(count),
        co2_max_violation=co2_exceed.max(axis=0) if co2.size else np.zeros(count),
        co2_integrated=co2_exceed.sum(axis=0) * report.step_hours if co2.size else np.zeros(count),
        temp_mean_violation=float(temp_exceed.mean()) if temps.size else 0.0,
        co2_mean_violation=float(co2_exceed.mean()) if co2.size else 0.0,
        tolerance=tolerance,
    )


def plan_cost(
    flows: np.ndarray,
    temps: np.ndarray,
    dr: np.ndarray,
    t_out: np.ndarray,
    price: np.ndarray,
    ahu: AhuParams,
    step_hours: float,
) -> float:
    """Energy cost of a horizon plan given the temperatures it produces (rows 0..H-1 used)."""

    draws = [power(flows[k], temps[k], float(dr[k]), float(t_out[k]), ahu) for k in range(flows.shape[0])]
    return cost(
        np.array([d.cooling for d in draws]), np.array([d.fan for d in draws]), np.asarray(price)[: len(draws)], step_hours
    )
