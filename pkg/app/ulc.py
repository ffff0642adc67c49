from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .adal import AdalAgent, AdalConfig, AdalResult, CouplingConstraint, SolverPool, solve_adal, solve_stacked
from .errors import InputError, ParameterError
from .model import (
    PlantState,
    ThermalCoeffs,
    building_thermal_coeffs,
    enforce_capacity,
    plan_cost,
    thermal_rollout,
)
from .qp import QpProblem, QpStatus, solve_qp
from .schemas import AhuParams, Building, Scenario
from .utils import logger


# temperatures enter the agent problems as (T - T_c) / TEMP_SCALE
TEMP_SCALE = 10.0
# margin added to the fastest-descent trajectory on transient steps, degC
TRANSIENT_MARGIN = 0.01


@dataclass(frozen=True)
class McCormickBox:
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    def __post_init__(self) -> None:
        if self.x_lo > self.x_hi or self.y_lo > self.y_hi:
            raise InputError(f"inverted McCormick box {self}")

    def contains(self, x: np.ndarray, y: np.ndarray, z: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Elementwise check that (x, y, z) satisfies all four envelope inequalities."""

        rows = mccormick_constraints(self)
        points = np.vstack([np.ravel(x), np.ravel(y), np.ravel(z)])
        return np.all(rows[:, :3] @ points <= rows[:, 3:4] + tol, axis=0)


def mccormick_constraints(box: McCormickBox) -> np.ndarray:
    """Envelope of ``z = x·y`` as rows ``[a_x, a_y, a_z, b]`` meaning ``a_x x + a_y y + a_z z ≤ b``."""

    return np.array(
        [
            [box.y_lo, box.x_lo, -1.0, box.x_lo * box.y_lo],
            [box.y_hi, box.x_hi, -1.0, box.x_hi * box.y_hi],
            [-box.y_hi, -box.x_lo, 1.0, -box.x_lo * box.y_hi],
            [-box.y_lo, -box.x_hi, 1.0, -box.x_hi * box.y_lo],
        ]
    )


def _product_bounds(box: McCormickBox) -> Tuple[float, float]:
    corners = [box.x_lo * box.y_lo, box.x_lo * box.y_hi, box.x_hi * box.y_lo, box.x_hi * box.y_hi]
    return min(corners), max(corners)


@dataclass(frozen=True)
class _ZoneLayout:
    horizon: int
    neighbors: Tuple[int, ...]

    def theta(self, k: int) -> int:
        """Column of the scaled temperature at step k (1..H)."""
        return k - 1

    def flow(self, k: int) -> int:
        return self.horizon + k

    def product(self, k: int) -> int:
        return 2 * self.horizon + k

    def copy(self, slot: int, k: int) -> int:
        """Column of the local copy of neighbor ``neighbors[slot]``'s temperature at step k (1..H-1)."""
        return 3 * self.horizon + slot * (self.horizon - 1) + (k - 1)

    @property
    def size(self) -> int:
        return 3 * self.horizon + len(self.neighbors) * (self.horizon - 1)


@dataclass(frozen=True, eq=False)
class UlcProblem:
    """Relaxed thermal problem for one epoch with the ventilation profile held fixed."""

    window: range
    fixed_dr: np.ndarray
    init_temps: np.ndarray
    coeffs: ThermalCoeffs
    temp_lo: np.ndarray  # (H, I) bounds on T(1..H)
    temp_hi: np.ndarray
    transient: np.ndarray  # (H, I) upper bound relaxed for the pre-cooling transient
    flow_min: np.ndarray
    flow_max: np.ndarray
    total_flow_max: float
    capacity_rhs: float
    price: np.ndarray
    t_out: np.ndarray
    neighbors: Tuple[Tuple[int, ...], ...]
    ahu: AhuParams
    step_hours: float
    box_slack: float
    tie_break: float
    initial_flows: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.window)

    @property
    def zone_count(self) -> int:
        return int(self.init_temps.shape[0])

    def layout(self, zone: int) -> _ZoneLayout:
        return _ZoneLayout(self.horizon, self.neighbors[zone])

    def box(self, zone: int, k: int) -> McCormickBox:
        """Flow x (T - T_c)/scale envelope box at step k (1..H-1)."""

        t_c = self.coeffs.supply_temp
        slack = self.box_slack if self.transient[k - 1, zone] else 0.0
        return McCormickBox(
            float(self.flow_min[zone]),
            float(self.flow_max[zone]),
            (self.temp_lo[k - 1, zone] - t_c) / TEMP_SCALE,
            (self.temp_hi[k - 1, zone] + slack - t_c) / TEMP_SCALE,
        )

    def _drive(self, zone: int) -> np.ndarray:
        """Affine term of the shifted dynamics, per step, in scaled units."""

        c = self.coeffs
        shift = c.supply_temp * (c.a_self[zone] + c.a_neighbor[zone].sum() - 1.0)
        return (c.d_drive[:, zone] + shift) / TEMP_SCALE

    def zone_problem(self, zone: int) -> QpProblem:
        """Local relaxed problem of one zone agent (dynamics, envelopes, bounds, energy cost)."""

        c = self.coeffs
        H = self.horizon
        lay = self.layout(zone)
        n = lay.size
        t_c = c.supply_temp
        theta0 = (self.init_temps - t_c) / TEMP_SCALE
        drive = self._drive(zone)

        eq_rows: List[np.ndarray] = []
        eq_rhs: List[float] = []

        row = np.zeros(n)
        row[lay.product(0)] = 1.0
        row[lay.flow(0)] = -theta0[zone]
        eq_rows.append(row)
        eq_rhs.append(0.0)

        row = np.zeros(n)
        row[lay.theta(1)] = 1.0
        row[lay.product(0)] = -c.c_flow[zone]
        eq_rows.append(row)
        eq_rhs.append(c.a_self[zone] * theta0[zone] + c.a_neighbor[zone] @ theta0 + drive[0])

        for k in range(1, H):
            row = np.zeros(n)
            row[lay.theta(k + 1)] = 1.0
            row[lay.theta(k)] = -c.a_self[zone]
            for slot, j in enumerate(lay.neighbors):
                row[lay.copy(slot, k)] = -c.a_neighbor[zone, j]
            row[lay.product(k)] = -c.c_flow[zone]
            eq_rows.append(row)
            eq_rhs.append(drive[k])

        ineq_rows: List[np.ndarray] = []
        ineq_rhs: List[float] = []
        lower = np.full(n, -np.inf)
        upper = np.full(n, np.inf)

        for k in range(1, H + 1):
            lower[lay.theta(k)] = (self.temp_lo[k - 1, zone] - t_c) / TEMP_SCALE
            upper[lay.theta(k)] = (self.temp_hi[k - 1, zone] - t_c) / TEMP_SCALE
        for k in range(H):
            lower[lay.flow(k)] = self.flow_min[zone]
            upper[lay.flow(k)] = self.flow_max[zone]

        w0 = sorted([self.flow_min[zone] * theta0[zone], self.flow_max[zone] * theta0[zone]])
        lower[lay.product(0)], upper[lay.product(0)] = w0
        for k in range(1, H):
            box = self.box(zone, k)
            lower[lay.product(k)], upper[lay.product(k)] = _product_bounds(box)
            for a_x, a_y, a_z, b in mccormick_constraints(box):
                row = np.zeros(n)
                row[lay.flow(k)] = a_x
                row[lay.theta(k)] = a_y
                row[lay.product(k)] = a_z
                ineq_rows.append(row)
                ineq_rhs.append(b)
            for slot, j in enumerate(lay.neighbors):
                lower[lay.copy(slot, k)] = (self.temp_lo[k - 1, j] - t_c) / TEMP_SCALE
                upper[lay.copy(slot, k)] = (self.temp_hi[k - 1, j] - t_c) / TEMP_SCALE

        weight = self.price * self.step_hours * self.ahu.specific_heat * self.ahu.cop_inverse
        linear = np.zeros(n)
        quadratic = np.zeros((n, n))
        for k in range(H):
            linear[lay.flow(k)] = weight[k] * (1.0 - self.fixed_dr[k]) * (self.t_out[k] - t_c)
            linear[lay.product(k)] = weight[k] * self.fixed_dr[k] * TEMP_SCALE
            quadratic[lay.flow(k), lay.flow(k)] = 2.0 * self.tie_break

        return QpProblem.build(
            quadratic,
            linear,
            np.vstack(eq_rows),
            np.array(eq_rhs),
            np.vstack(ineq_rows) if ineq_rows else None,
            np.array(ineq_rhs) if ineq_rhs else None,
            lower,
            upper,
        )

    def slack_problem(self) -> QpProblem:
        """Capacity slack agent carrying the fan term κ_f (b − x_0)²."""

        H = self.horizon
        g = self.price * self.step_hours * self.ahu.fan_coeff
        b = self.capacity_rhs
        return QpProblem.build(
            np.diag(2.0 * g),
            -2.0 * g * b,
            lower=np.zeros(H),
            upper=np.full(H, b),
            constant=float(np.sum(g) * b * b),
        )

    def coupling(self) -> CouplingConstraint:
        H = self.horizon
        sizes = [H] + [self.layout(i).size for i in range(self.zone_count)]
        entries = []
        for k in range(H):
            entries.append((0, k, k, 1.0))
            for i in range(self.zone_count):
                entries.append((i + 1, k, self.layout(i).flow(k), 1.0))
        row = H
        for i in range(self.zone_count):
            lay = self.layout(i)
            for slot, j in enumerate(lay.neighbors):
                for k in range(1, H):
                    entries.append((i + 1, row, lay.copy(slot, k), 1.0))
                    entries.append((j + 1, row, self.layout(j).theta(k), -1.0))
                    row += 1
        rhs = np.zeros(row)
        rhs[:H] = self.capacity_rhs
        return CouplingConstraint.from_entries(rhs, sizes, entries)

    def initial_point(self) -> List[np.ndarray]:
        """Agent iterates consistent with an exact rollout of ``initial_flows``."""

        t_c = self.coeffs.supply_temp
        flows = self.initial_flows
        theta = (thermal_rollout(self.init_temps, flows, self.coeffs) - t_c) / TEMP_SCALE
        slack = np.clip(self.capacity_rhs - flows.sum(axis=1), 0.0, self.capacity_rhs)
        points = [slack]
        for i in range(self.zone_count):
            lay = self.layout(i)
            x = np.zeros(lay.size)
            for k in range(self.horizon):
                x[lay.flow(k)] = flows[k, i]
                x[lay.product(k)] = flows[k, i] * theta[k, i]
                x[lay.theta(k + 1)] = theta[k + 1, i]
            for slot, j in enumerate(lay.neighbors):
                for k in range(1, self.horizon):
                    x[lay.copy(slot, k)] = theta[k, j]
            points.append(x)
        return points

    def shift_rows(self, alpha: np.ndarray) -> np.ndarray:
        """Multipliers of a solve one step earlier, moved forward one step (last step repeated).

        Rows are ordered as in ``coupling``: H capacity rows, then H-1 consensus rows per
        (zone, neighbor) pair.
        """

        H = self.horizon
        alpha = np.asarray(alpha, dtype=float)
        shifted = alpha.copy()
        shifted[: H - 1] = alpha[1:H]
        if H > 1:
            for start in range(H, alpha.shape[0], H - 1):
                block = alpha[start : start + H - 1]
                shifted[start : start + H - 2] = block[1:]
        return shifted

    def agents(self) -> Tuple[List[AdalAgent], CouplingConstraint]:
        x0 = self.initial_point()
        agents = [AdalAgent("slack", self.slack_problem(), x0[0])]
        agents += [AdalAgent(f"zone-{i}", self.zone_problem(i), x0[i + 1]) for i in range(self.zone_count)]
        return agents, self.coupling()


@dataclass(frozen=True, eq=False)
class UlcResult:
    flows_u: np.ndarray  # (H, I)
    predicted_temps: np.ndarray  # (H+1, I), relaxed
    recovered_temps: np.ndarray  # (H+1, I), exact rollout of flows_u
    objective: float
    exact_cost: float
    converged: bool
    iterations: int
    residual: float
    repaired: bool
    adal: AdalResult
    problem: UlcProblem


def fastest_flows(building: Building) -> np.ndarray:
    flow_max = building.column("flow_max")
    share = building.ahu.total_flow_max * flow_max / flow_max.sum()
    return np.maximum(np.minimum(flow_max, share), building.column("flow_min"))


def build_ulc(
    building: Building,
    scen: Scenario,
    state: PlantState,
    fixed_dr: np.ndarray,
    eps_in: float = 1e-3,
    box_slack: float = 3.0,
    tie_break: float = 1e-6,
    initial_flows: Optional[np.ndarray] = None,
) -> UlcProblem:
    H = building.horizon.horizon_steps
    window = range(state.time_index, state.time_index + H)
    fixed_dr = np.asarray(fixed_dr, dtype=float)
    if fixed_dr.shape != (H,):
        raise InputError(f"fixed_dr must have {H} entries")
    ahu = building.ahu
    if np.any(fixed_dr < ahu.dr_min - 1e-12) or np.any(fixed_dr > ahu.dr_max + 1e-12):
        raise ParameterError("fixed_dr outside [dr_min, dr_max]")
    capacity_rhs = ahu.total_flow_max - eps_in
    if capacity_rhs <= building.column("flow_min").sum():
        raise ParameterError("AHU capacity cannot cover the zones' minimum flows")

    coeffs = building_thermal_coeffs(building, scen, window)
    count = building.zone_count
    flow_min = building.column("flow_min")
    t_min = building.column("temp_min")
    t_max = building.column("temp_max")

    fast = fastest_flows(building)
    t_fast = thermal_rollout(state.temps, np.tile(fast, (H, 1)), coeffs)[1:]
    t_slow = thermal_rollout(state.temps, np.tile(flow_min, (H, 1)), coeffs)[1:]
    transient = t_fast > t_max - 1e-9
    temp_hi = np.where(transient, t_fast + TRANSIENT_MARGIN, t_max)
    temp_lo = np.where(t_slow < t_min + 1e-9, t_slow - TRANSIENT_MARGIN, t_min)

    if initial_flows is None:
        initial_flows = np.tile(fast, (H, 1))
    arrays = scen.arrays()
    neighbors = tuple(tuple(j for j, _ in building.topology.neighbors(i)) for i in range(count))
    return UlcProblem(
        window=window,
        fixed_dr=fixed_dr,
        init_temps=state.temps.copy(),
        coeffs=coeffs,
        temp_lo=temp_lo,
        temp_hi=temp_hi,
        transient=transient,
        flow_min=flow_min,
        flow_max=building.column("flow_max"),
        total_flow_max=ahu.total_flow_max,
        capacity_rhs=capacity_rhs,
        price=arrays.price[window.start : window.stop].copy(),
        t_out=arrays.outdoor_temp[window.start : window.stop].copy(),
        neighbors=neighbors,
        ahu=ahu,
        step_hours=building.horizon.step_hours,
        box_slack=box_slack,
        tie_break=tie_break,
        initial_flows=np.asarray(initial_flows, dtype=float),
    )


def _clamp_flows(problem: UlcProblem, flows: np.ndarray) -> np.ndarray:
    flows = np.clip(flows, problem.flow_min, problem.flow_max)
    return enforce_capacity(flows, problem.flow_min, problem.total_flow_max)


def _repair_zone(problem: UlcProblem, zone: int, flows: np.ndarray, exact: np.ndarray) -> Optional[np.ndarray]:
    """Nearest flows for one zone against the exact trajectory linearized at (flows, exact)."""

    c = problem.coeffs
    H = problem.horizon
    t_c = c.supply_temp
    theta_hat = (exact - t_c) / TEMP_SCALE
    m_hat = flows[:, zone]
    drive = problem._drive(zone)
    n = 2 * H  # flows m(0..H-1), then theta(1..H)

    eq = np.zeros((H, n))
    rhs = np.zeros(H)
    eq[0, H] = 1.0
    eq[0, 0] = -c.c_flow[zone] * theta_hat[0, zone]
    rhs[0] = c.a_self[zone] * theta_hat[0, zone] + c.a_neighbor[zone] @ theta_hat[0] + drive[0]
    for k in range(1, H):
        eq[k, H + k] = 1.0
        eq[k, H + k - 1] = -(c.a_self[zone] + c.c_flow[zone] * m_hat[k])
        eq[k, k] = -c.c_flow[zone] * theta_hat[k, zone]
        others = c.a_neighbor[zone] @ theta_hat[k]
        rhs[k] = others - c.c_flow[zone] * m_hat[k] * theta_hat[k, zone] + drive[k]

    lower = np.concatenate([np.full(H, problem.flow_min[zone]), (problem.temp_lo[:, zone] - t_c) / TEMP_SCALE])
    upper = np.concatenate([np.full(H, problem.flow_max[zone]), (problem.temp_hi[:, zone] - t_c) / TEMP_SCALE])
    quadratic = np.zeros((n, n))
    quadratic[:H, :H] = 2.0 * np.eye(H)
    linear = np.concatenate([-2.0 * m_hat, np.zeros(H)])
    solution = solve_qp(QpProblem.build(quadratic, linear, eq, rhs, lower=lower, upper=upper))
    if solution.status != QpStatus.OPTIMAL:
        return None
    return solution.x[:H]


def solve_ulc(
    problem: UlcProblem,
    adal: AdalConfig,
    warm: Optional[UlcResult] = None,
    temp_tolerance: float = 0.05,
    alpha0: Optional[np.ndarray] = None,
    pool: Optional[SolverPool] = None,
    centralized: bool = False,
) -> UlcResult:
    """Coordinate the zone and slack agents, then recover exact temperatures and repair overshoots.

    ``warm`` (a result on the same layout) seeds both iterates and multipliers; otherwise
    ``alpha0`` seeds the multipliers alone when its length matches the coupling rows.
    With ``centralized`` the agents are solved as one stacked QP instead.
    """

    agents, coupling = problem.agents()
    x_init = None
    if warm is not None and [a.x0.shape for a in agents] == [x.shape for x in warm.adal.x]:
        x_init, alpha0 = warm.adal.x, warm.adal.alpha
    elif alpha0 is not None and np.shape(alpha0) != (coupling.row_count,):
        alpha0 = None
    if centralized:
        result = solve_stacked(agents, coupling, adal, label="ulc", constraint="thermal comfort")
    else:
        result = solve_adal(agents, coupling, adal, alpha0=alpha0, x_init=x_init, label="ulc", pool=pool)

    H, count = problem.horizon, problem.zone_count
    t_c = problem.coeffs.supply_temp
    flows = np.zeros((H, count))
    predicted = np.zeros((H + 1, count))
    predicted[0] = problem.init_temps
    for i in range(count):
        lay = problem.layout(i)
        x = result.x[i + 1]
        flows[:, i] = [x[lay.flow(k)] for k in range(H)]
        predicted[1:, i] = [x[lay.theta(k)] * TEMP_SCALE + t_c for k in range(1, H + 1)]
    flows = _clamp_flows(problem, flows)
    recovered = thermal_rollout(problem.init_temps, flows, problem.coeffs)

    repaired = False
    excess = recovered[1:] - problem.temp_hi
    if np.any(excess > temp_tolerance):
        for zone in np.unique(np.nonzero(excess > temp_tolerance)[1]):
            update = _repair_zone(problem, int(zone), flows, recovered)
            if update is None:
                logger.warning(f"ulc: repair of zone {zone} at step {problem.window.start} found no feasible flows")
                continue
            flows[:, zone] = update
            repaired = True
        flows = _clamp_flows(problem, flows)
        recovered = thermal_rollout(problem.init_temps, flows, problem.coeffs)

    objective = sum(a.problem.objective(x) for a, x in zip(agents, result.x))
    exact = plan_cost(
        flows, recovered, problem.fixed_dr, problem.t_out, problem.price, problem.ahu, problem.step_hours
    )
    return UlcResult(
        flows_u=flows,
        predicted_temps=predicted,
        recovered_temps=recovered,
        objective=float(objective),
        exact_cost=exact,
        converged=result.converged,
        iterations=result.iterations,
        residual=result.residual,
        repaired=repaired,
        adal=result,
        problem=problem,
    )
