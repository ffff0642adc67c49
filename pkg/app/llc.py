from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adal import AdalAgent, AdalConfig, CouplingConstraint, augment, solve_adal, solve_stacked
from .errors import InputError
from .model import Co2Coeffs, PPM_PER_G_PER_KG, PlantState, enforce_capacity, exact_rollout, supply_co2
from .qp import QpProblem
from .schemas import Building, Scenario, ZoneParams
from .ulc import McCormickBox, mccormick_constraints
from .utils import logger


# CO2 enters the agent problems in units of CO2_SCALE ppm
CO2_SCALE = 100.0
# clearance below the CO2 cap that absorbs solver round-off, ppm
CO2_BUFFER = 0.01


@dataclass(frozen=True, eq=False)
class AgentVector:
    """One agent's decision block in physical units.

    Zone agents carry ``co2`` = C(1..H), ``flows`` = m(0..H-1) and ``products`` =
    Z(0..H-1) = m·C; the slack agent (index 0) carries only ``slack``.
    """

    index: int
    co2: Optional[np.ndarray] = None
    flows: Optional[np.ndarray] = None
    products: Optional[np.ndarray] = None
    slack: Optional[np.ndarray] = None

    @classmethod
    def from_stacked(cls, index: int, x: np.ndarray, horizon: int) -> "AgentVector":
        if index == 0:
            return cls(0, slack=np.array(x, dtype=float))
        H = horizon
        return cls(index, co2=x[:H] * CO2_SCALE, flows=x[H : 2 * H].copy(), products=x[2 * H :] * CO2_SCALE)

    def stacked(self) -> np.ndarray:
        if self.index == 0:
            return np.array(self.slack, dtype=float)
        return np.concatenate([self.co2 / CO2_SCALE, self.flows, self.products / CO2_SCALE])


@dataclass(frozen=True)
class SupplyCo2Estimate:
    c_z: np.ndarray
    iteration: int


@dataclass(frozen=True, eq=False)
class LlcBounds:
    flow_lo: np.ndarray  # (H, I), max(flow_min, flows_u)
    flow_max: np.ndarray  # (I,)
    co2_min: np.ndarray  # (I,)
    co2_cap: np.ndarray  # (I,), C^max minus the fixed-point margin
    co2_now: np.ndarray  # (I,)
    capacity_rhs: float


@dataclass(frozen=True, eq=False)
class LlcResult:
    flows_hat: np.ndarray  # (H, I)
    co2_hat: np.ndarray  # (H+1, I)
    temps_hat: np.ndarray  # (H+1, I)
    z_hat: np.ndarray  # (H, I)
    inner_iterations: int
    outer_iterations: int
    converged: bool
    residual: float
    estimates: List[SupplyCo2Estimate] = field(default_factory=list)
    diagnostics: List[Dict[str, Any]] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Trajectories:
    co2: np.ndarray
    temps: np.ndarray
    products: np.ndarray


def needs_llc(
    state: PlantState,
    flows_u: np.ndarray,
    dr: np.ndarray,
    scen: Scenario,
    building: Building,
    guard: float = 5.0,
) -> Tuple[bool, np.ndarray]:
    """Exact CO2 rollout under the thermal plan; true when any zone comes within ``guard`` of its cap."""

    co2_max = building.column("co2_max")
    predicted = exact_rollout(flows_u, dr, state, scen, building).co2_traj
    if np.any(state.co2 > co2_max):
        return True, predicted
    return bool(np.any(predicted[1:] > co2_max - guard)), predicted


def co2_coeffs(
    c_z: np.ndarray, scen: Scenario, zones: Sequence[ZoneParams], window: range, step_seconds: float
) -> Co2Coeffs:
    c_z = np.asarray(c_z, dtype=float)
    if not np.all(np.isfinite(c_z)):
        raise InputError("supply CO2 estimate must be finite")
    mass = np.array([z.air_mass for z in zones], dtype=float)
    occupancy = scen.arrays().occupancy[window.start : window.stop]
    ratio = step_seconds / mass
    return Co2Coeffs(
        e_supply=c_z[:, None] * ratio[None, :],
        f_self=-ratio,
        g_occ=occupancy * scen.co2_gen_rate / 3600.0 * step_seconds * PPM_PER_G_PER_KG / mass,
    )


def capacity_coupling(horizon: int, zone_count: int, rhs: float) -> CouplingConstraint:
    """Σ_i m_i(k) + x_0(k) = b for every step; the slack agent is agent 0."""

    H = horizon
    sizes = [H] + [3 * H] * zone_count
    entries = []
    for k in range(H):
        entries.append((0, k, k, 1.0))
        for i in range(zone_count):
            entries.append((i + 1, k, H + k, 1.0))
    return CouplingConstraint.from_entries(np.full(H, rhs), sizes, entries)


def slack_problem(horizon: int, capacity_rhs: float) -> QpProblem:
    return QpProblem.build(
        np.zeros((horizon, horizon)),
        np.zeros(horizon),
        lower=np.zeros(horizon),
        upper=np.full(horizon, capacity_rhs),
    )


def zone_problem(zone: int, coeffs: Co2Coeffs, bounds: LlcBounds, flows_u: np.ndarray) -> QpProblem:
    """Local problem of zone ``zone``: Σ_k (m(k) − m_U(k))² over the relaxed CO2 set."""

    H = flows_u.shape[0]
    n = 3 * H
    s = CO2_SCALE
    c_idx = lambda k: k  # noqa: E731  C(k+1)
    m_idx = lambda k: H + k  # noqa: E731
    z_idx = lambda k: 2 * H + k  # noqa: E731

    e = coeffs.e_supply[:, zone]
    f = coeffs.f_self[zone]
    g = coeffs.g_occ[:, zone]
    c0 = bounds.co2_now[zone]

    eq = np.zeros((H + 1, n))
    rhs = np.zeros(H + 1)
    eq[0, z_idx(0)] = 1.0
    eq[0, m_idx(0)] = -c0 / s
    eq[1, c_idx(0)] = 1.0
    eq[1, m_idx(0)] = -e[0] / s
    eq[1, z_idx(0)] = -f
    rhs[1] = (c0 + g[0]) / s
    for k in range(1, H):
        eq[k + 1, c_idx(k)] = 1.0
        eq[k + 1, c_idx(k - 1)] = -1.0
        eq[k + 1, m_idx(k)] = -e[k] / s
        eq[k + 1, z_idx(k)] = -f
        rhs[k + 1] = g[k] / s

    lower = np.zeros(n)
    upper = np.zeros(n)
    co2_lo, co2_hi = bounds.co2_min[zone] / s, bounds.co2_cap[zone] / s
    lower[:H], upper[:H] = co2_lo, co2_hi
    lower[H : 2 * H] = bounds.flow_lo[:, zone]
    upper[H : 2 * H] = bounds.flow_max[zone]
    lower[z_idx(0)] = bounds.flow_lo[0, zone] * c0 / s
    upper[z_idx(0)] = bounds.flow_max[zone] * c0 / s

    ineq, ineq_rhs = [], []
    for k in range(1, H):
        box = McCormickBox(float(bounds.flow_lo[k, zone]), float(bounds.flow_max[zone]), co2_lo, co2_hi)
        lower[z_idx(k)] = box.x_lo * box.y_lo
        upper[z_idx(k)] = box.x_hi * box.y_hi
        for a_x, a_y, a_z, b in mccormick_constraints(box):
            row = np.zeros(n)
            row[m_idx(k)] = a_x
            row[c_idx(k - 1)] = a_y
            row[z_idx(k)] = a_z
            ineq.append(row)
            ineq_rhs.append(b)

    quadratic = np.zeros((n, n))
    quadratic[H : 2 * H, H : 2 * H] = 2.0 * np.eye(H)
    linear = np.zeros(n)
    linear[H : 2 * H] = -2.0 * flows_u[:, zone]
    return QpProblem.build(
        quadratic,
        linear,
        eq,
        rhs,
        np.vstack(ineq) if ineq else None,
        np.array(ineq_rhs) if ineq_rhs else None,
        lower,
        upper,
        constant=float(flows_u[:, zone] @ flows_u[:, zone]),
    )


def build_agent_subproblem(
    i: int,
    current: Sequence[np.ndarray],
    multipliers: np.ndarray,
    rho: float,
    coeffs: Co2Coeffs,
    bounds: LlcBounds,
    flows_u: np.ndarray,
) -> QpProblem:
    """Agent i's augmented Lagrangian with every other agent frozen at ``current``.

    ``current`` holds the stacked iterates of all agents (slack first); entry ``i`` is ignored.
    """

    H, count = flows_u.shape
    if np.any(flows_u > bounds.flow_max + 1e-9):
        raise InputError("thermal flows exceed the zone flow_max")
    coupling = capacity_coupling(H, count, bounds.capacity_rhs)
    others = [np.zeros_like(x) if j == i else x for j, x in enumerate(current)]
    others_rows = coupling.residual(others)[coupling.rows[i]]
    local = slack_problem(H, bounds.capacity_rhs) if i == 0 else zone_problem(i - 1, coeffs, bounds, flows_u)
    return augment(local, coupling.blocks[i], np.asarray(multipliers)[coupling.rows[i]], rho, others_rows)


def update_supply_estimate(
    vectors: Sequence[AgentVector], dr: np.ndarray, c_out: np.ndarray, co2_now: np.ndarray, iteration: int = 0
) -> SupplyCo2Estimate:
    """Supply CO2 per step from the zone agents' flows and CO2 (measured CO2 at k = 0)."""

    zones = [v for v in vectors if v.index != 0]
    H = zones[0].flows.shape[0]
    flows = np.column_stack([v.flows for v in zones])
    co2 = np.vstack([np.asarray(co2_now, dtype=float), np.column_stack([v.co2 for v in zones])[:-1]])
    c_z = np.array([supply_co2(co2[k], flows[k], float(dr[k]), float(c_out[k])).concentration for k in range(H)])
    return SupplyCo2Estimate(c_z, iteration)


def recover_feasibility(
    flows_star: np.ndarray, dr: np.ndarray, state: PlantState, scen: Scenario, building: Building
) -> Trajectories:
    """Keep the flows and roll the exact coupled dynamics (mixing, CO2, temperature)."""

    rollout = exact_rollout(flows_star, dr, state, scen, building)
    return Trajectories(rollout.co2_traj, rollout.temp_traj, flows_star * rollout.co2_traj[:-1])


class _LlcInstance:
    """Per-epoch data shared by the distributed and centralized solves."""

    def __init__(
        self,
        flows_u: np.ndarray,
        dr: np.ndarray,
        state: PlantState,
        scen: Scenario,
        building: Building,
        adal: AdalConfig,
    ) -> None:
        H = building.horizon.horizon_steps
        count = building.zone_count
        flows_u = np.asarray(flows_u, dtype=float)
        if flows_u.shape != (H, count):
            raise InputError(f"thermal flows must have shape {(H, count)}")
        flow_max = building.column("flow_max")
        if np.any(flows_u > flow_max + 1e-9):
            raise InputError("thermal flows exceed the zone flow_max")
        self.building = building
        self.scen = scen
        self.state = state
        self.adal = adal
        self.dr = np.asarray(dr, dtype=float)
        self.window = range(state.time_index, state.time_index + H)
        self.flows_u = np.clip(flows_u, building.column("flow_min"), flow_max)
        self.c_out = scen.arrays().outdoor_co2[self.window.start : self.window.stop]
        step = building.horizon.step_seconds
        mass = building.column("air_mass")
        margin = step / mass * flow_max * adal.eps_out + CO2_BUFFER
        co2_min = np.maximum(0.0, np.minimum(self.c_out.min(), state.co2) - 10.0)
        self.bounds = LlcBounds(
            flow_lo=self.flows_u.copy(),
            flow_max=flow_max,
            co2_min=co2_min,
            co2_cap=building.column("co2_max") - margin,
            co2_now=state.co2.copy(),
            capacity_rhs=building.ahu.total_flow_max - adal.eps_in,
        )

    @property
    def horizon(self) -> int:
        return len(self.window)

    def coeffs(self, c_z: np.ndarray) -> Co2Coeffs:
        return co2_coeffs(c_z, self.scen, self.building.zones, self.window, self.building.horizon.step_seconds)

    def initial_point(self) -> List[np.ndarray]:
        traj = recover_feasibility(self.flows_u, self.dr, self.state, self.scen, self.building)
        b = self.bounds.capacity_rhs
        points = [np.clip(b - self.flows_u.sum(axis=1), 0.0, b)]
        for i in range(self.building.zone_count):
            points.append(
                AgentVector(i + 1, co2=traj.co2[1:, i], flows=self.flows_u[:, i], products=traj.products[:, i]).stacked()
            )
        return points

    def agents(self, c_z: np.ndarray, x_init: Optional[List[np.ndarray]]) -> List[AdalAgent]:
        coeffs = self.coeffs(c_z)
        x0 = x_init if x_init is not None else self.initial_point()
        agents = [AdalAgent("slack", slack_problem(self.horizon, self.bounds.capacity_rhs), x0[0])]
        for i in range(self.building.zone_count):
            agents.append(AdalAgent(f"zone-{i}", zone_problem(i, coeffs, self.bounds, self.flows_u), x0[i + 1]))
        return agents

    def coupling(self) -> CouplingConstraint:
        return capacity_coupling(self.horizon, self.building.zone_count, self.bounds.capacity_rhs)

    def vectors(self, xs: Sequence[np.ndarray]) -> List[AgentVector]:
        return [AgentVector.from_stacked(i, x, self.horizon) for i, x in enumerate(xs)]

    def estimate(self, xs: Sequence[np.ndarray], iteration: int) -> SupplyCo2Estimate:
        return update_supply_estimate(self.vectors(xs), self.dr, self.c_out, self.state.co2, iteration)

    def finish(
        self,
        xs: Sequence[np.ndarray],
        inner: int,
        outer: int,
        converged: bool,
        residual: float,
        estimates: List[SupplyCo2Estimate],
        diagnostics: List[Dict[str, Any]],
    ) -> LlcResult:
        zones = [v for v in self.vectors(xs) if v.index != 0]
        flows = np.column_stack([v.flows for v in zones])
        flows = np.clip(np.maximum(flows, self.flows_u), None, self.bounds.flow_max)
        flows = enforce_capacity(flows, self.flows_u, self.building.ahu.total_flow_max)
        traj = recover_feasibility(flows, self.dr, self.state, self.scen, self.building)
        return LlcResult(
            flows_hat=flows,
            co2_hat=traj.co2,
            temps_hat=traj.temps,
            z_hat=traj.products,
            inner_iterations=inner,
            outer_iterations=outer,
            converged=converged,
            residual=residual,
            estimates=estimates,
            diagnostics=diagnostics,
        )

    def already_feasible(self) -> Optional[LlcResult]:
        traj = recover_feasibility(self.flows_u, self.dr, self.state, self.scen, self.building)
        if np.all(traj.co2[1:] <= self.bounds.co2_cap):
            return LlcResult(self.flows_u.copy(), traj.co2, traj.temps, traj.products, 0, 1, True, 0.0)
        return None


def solve_llc(
    flows_u: np.ndarray,
    dr: np.ndarray,
    state: PlantState,
    scen: Scenario,
    building: Building,
    adal: AdalConfig,
) -> LlcResult:
    """Minimal flow increase that keeps CO2 under the caps for a fixed ventilation profile.

    Alternates distributed solves of the relaxed problem with fixed-point updates of
    the supply CO2 estimate (starting from the outdoor series), then rolls the exact
    dynamics under the resulting flows. Raises InfeasibleError when some zone cannot
    meet its cap at this ventilation profile.
    """

    instance = _LlcInstance(flows_u, dr, state, scen, building, adal)
    trivial = instance.already_feasible()
    if trivial is not None:
        return trivial

    c_z = instance.c_out.copy()
    estimates = [SupplyCo2Estimate(c_z, 0)]
    diagnostics: List[Dict[str, Any]] = []
    x_prev: Optional[List[np.ndarray]] = None
    alpha_prev: Optional[np.ndarray] = None
    inner = 0
    converged_outer = False
    result = None
    coupling = instance.coupling()
    for p in range(1, adal.max_outer + 1):
        agents = instance.agents(c_z, x_prev)
        result = solve_adal(agents, coupling, adal, alpha0=alpha_prev, x_init=x_prev, label="llc")
        inner += result.iterations
        for q, (res, obj) in enumerate(zip(result.residual_history, result.objective_history), start=1):
            diagnostics.append({"outer": p, "inner": q, "residual": res, "objective": obj})
        update = instance.estimate(result.x, p)
        estimates.append(update)
        change = float(np.max(np.abs(update.c_z - c_z)))
        x_prev, alpha_prev = result.x, result.alpha
        if change <= adal.eps_out:
            converged_outer = True
            break
        c_z = update.c_z

    if not converged_outer:
        logger.warning(f"llc: supply CO2 estimate still moving after {adal.max_outer} outer iterations")
    return instance.finish(
        result.x,
        inner,
        len(estimates) - 1,
        converged_outer and result.converged,
        result.residual,
        estimates,
        diagnostics,
    )


def solve_llc_centralized(
    flows_u: np.ndarray,
    dr: np.ndarray,
    state: PlantState,
    scen: Scenario,
    building: Building,
    adal: AdalConfig,
) -> LlcResult:
    """Same fixed-point loop with all agents stacked into one QP per supply estimate."""

    instance = _LlcInstance(flows_u, dr, state, scen, building, adal)
    trivial = instance.already_feasible()
    if trivial is not None:
        return trivial

    coupling = instance.coupling()
    c_z = instance.c_out.copy()
    estimates = [SupplyCo2Estimate(c_z, 0)]
    xs: List[np.ndarray] = []
    converged = False
    for p in range(1, adal.max_outer + 1):
        xs = solve_stacked(instance.agents(c_z, None), coupling, adal, label="llc", constraint="co2_cap").x
        update = instance.estimate(xs, p)
        estimates.append(update)
        if float(np.max(np.abs(update.c_z - c_z))) <= adal.eps_out:
            converged = True
            break
        c_z = update.c_z
    return instance.finish(xs, 0, len(estimates) - 1, converged, 0.0, estimates, [])
