from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .adal import AdalConfig, SolverPool
from .errors import EpochError, InfeasibleError, InputError, ParameterError, StabilityError
from .llc import LlcResult, needs_llc, solve_llc, solve_llc_centralized
from .model import ControlPlan, PlantState, RunReport, TrajectoryRecorder, simulate
from .schemas import Building, Scenario
from .ulc import UlcResult, fastest_flows, build_ulc, solve_ulc
from .utils import log_epoch, logger


class TldmConfig(BaseModel):
    """Parameters of the two-level epoch loop."""

    model_config = ConfigDict(frozen=True)

    ulc: AdalConfig = Field(default_factory=AdalConfig)
    llc: AdalConfig = Field(default_factory=AdalConfig)
    dr_init: Optional[List[float]] = Field(default=None, description="Initial fraction per step; AHU dr_max when unset")
    dr_step: Optional[float] = Field(default=None, gt=0, description="Decrement; AHU dr_step when unset")
    max_dr_iters: int = Field(default=20, ge=0)
    temp_tolerance: float = Field(default=0.05, ge=0)
    co2_guard: float = Field(default=5.0, ge=0)
    ulc_warm_start: bool = Field(default=True)
    temp_box_slack: float = Field(default=3.0, ge=0)
    tie_break_weight: float = Field(default=1e-6, ge=0)
    centralized: bool = Field(default=False, description="Solve both levels as stacked QPs instead of coordinating agents")

    @field_validator("dr_init")
    @classmethod
    def _fractions(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None and any(not 0.0 <= v <= 1.0 for v in value):
            raise ValueError("dr_init entries must lie in [0, 1]")
        return value

    def initial_dr(self, building: Building) -> np.ndarray:
        ahu = building.ahu
        H = building.horizon.horizon_steps
        if self.dr_init is None:
            return np.full(H, ahu.dr_max)
        dr = np.asarray(self.dr_init, dtype=float)
        if dr.shape != (H,):
            raise InputError(f"dr_init must have {H} entries")
        if np.any(dr < ahu.dr_min) or np.any(dr > ahu.dr_max):
            raise ParameterError("dr_init outside [dr_min, dr_max]")
        return dr

    def step_size(self, building: Building) -> float:
        return self.dr_step if self.dr_step is not None else building.ahu.dr_step


@dataclass(frozen=True, eq=False)
class EpochResult:
    plan: ControlPlan
    l_iterations: int
    llc_invoked: bool
    dr_floor_hit: bool
    residual_violation: float
    ulc: UlcResult
    llc: Optional[LlcResult] = None
    dr_history: List[np.ndarray] = field(default_factory=list)
    co2_unreachable: bool = False
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def executed(self) -> ControlPlan:
        return self.plan.first_step()

    @property
    def converged(self) -> bool:
        return self.ulc.converged and (self.llc is None or self.llc.converged)

    def stats(self) -> Dict[str, Any]:
        return {
            "l_iterations": self.l_iterations,
            "ulc_iterations": self.ulc.iterations,
            "llc_invoked": self.llc_invoked,
            "dr": [round(float(v), 6) for v in self.plan.vent_fraction],
            "ulc_residual": float(self.ulc.residual),
            "llc_residual": float(self.llc.residual) if self.llc is not None else None,
            "llc_outer": self.llc.outer_iterations if self.llc is not None else 0,
            "dr_floor_hit": self.dr_floor_hit,
            "residual_violation": self.residual_violation,
            "co2_unreachable": self.co2_unreachable,
            "repaired": self.ulc.repaired,
            "converged": self.converged,
            "fallback": False,
            **self.extra,
        }


class UlcRunner:
    """Builds and solves the thermal problem of one epoch, warm-starting repeated solves.

    Every solve of one epoch shares the agents' factorized solvers (only the cost moves
    with the ventilation profile). ``carry`` is the last thermal result of the previous
    epoch; its multipliers, shifted one step, seed the first solve.
    """

    def __init__(
        self,
        building: Building,
        scen: Scenario,
        cfg: TldmConfig,
        state: PlantState,
        carry: Optional[UlcResult] = None,
    ) -> None:
        self.building = building
        self.scen = scen
        self.cfg = cfg
        self.state = state
        self.carry = carry if cfg.ulc_warm_start else None
        self.pool = SolverPool()
        self.last: Optional[UlcResult] = None

    def solve(self, dr: np.ndarray, initial_flows: Optional[np.ndarray] = None) -> UlcResult:
        cfg = self.cfg
        problem = build_ulc(
            self.building,
            self.scen,
            self.state,
            dr,
            eps_in=cfg.ulc.eps_in,
            box_slack=cfg.temp_box_slack,
            tie_break=cfg.tie_break_weight,
            initial_flows=initial_flows,
        )
        warm = self.last if cfg.ulc_warm_start else None
        alpha0 = None
        if warm is None and self.carry is not None and self.carry.problem.neighbors == problem.neighbors:
            alpha0 = problem.shift_rows(self.carry.adal.alpha)
        try:
            result = solve_ulc(
                problem,
                cfg.ulc,
                warm=warm,
                temp_tolerance=cfg.temp_tolerance,
                alpha0=alpha0,
                pool=self.pool,
                centralized=cfg.centralized,
            )
        except InfeasibleError as exc:
            where = exc.constraint or exc.agent or "thermal comfort"
            raise EpochError(f"step {self.state.time_index}: thermal problem infeasible at {where}") from exc
        self.last = result
        return result


def shifted_flows(previous: Optional[ControlPlan], building: Building) -> Optional[np.ndarray]:
    if previous is None:
        return None
    return previous.shifted().clamped(building).flows


def tldm_epoch(
    state: PlantState,
    scen: Scenario,
    building: Building,
    cfg: TldmConfig,
    previous: Optional[ControlPlan] = None,
    carry: Optional[UlcResult] = None,
) -> EpochResult:
    """One two-level epoch.

    The thermal level plans flows for the current ventilation profile. When the exact
    CO2 rollout of that plan nears a cap, the CO2 level raises flows; if the raised
    flows over-cool some zone at step k+1, the return-air fraction of step k is lowered
    and both levels run again. The loop ends when no zone is over-cooled or when no
    fraction can be lowered any further.
    """

    ahu = building.ahu
    dr = cfg.initial_dr(building)
    step = cfg.step_size(building)
    tol = cfg.temp_tolerance
    runner = UlcRunner(building, scen, cfg, state, carry)
    initial = shifted_flows(previous, building)
    history = [dr.copy()]
    llc_invoked = False
    last_llc: Optional[LlcResult] = None

    for l in range(cfg.max_dr_iters + 1):
        ulc = runner.solve(dr, initial)
        trigger, _ = needs_llc(state, ulc.flows_u, dr, scen, building, cfg.co2_guard)
        if not trigger:
            return EpochResult(ControlPlan(ulc.flows_u, dr), l, llc_invoked, False, 0.0, ulc, last_llc, history)

        llc_invoked = True
        try:
            llc = (solve_llc_centralized if cfg.centralized else solve_llc)(ulc.flows_u, dr, state, scen, building, cfg.llc)
        except InfeasibleError as exc:
            logger.info(f"step {state.time_index}: CO2 caps unreachable at l={l} ({exc}); lowering every fraction")
            over_cooled = np.ones(dr.shape[0], dtype=bool)
            candidate = ControlPlan(ulc.flows_u, dr)
            violation = 0.0
            co2_unreachable = True
        else:
            last_llc = llc
            co2_unreachable = False
            shortfall = ulc.problem.temp_lo - tol - llc.temps_hat[1:]
            over_cooled = np.any(shortfall > 0, axis=1)
            candidate = ControlPlan(llc.flows_hat, dr)
            violation = float(max(shortfall.max(), 0.0))
            if not over_cooled.any():
                return EpochResult(candidate, l, True, False, 0.0, ulc, llc, history)

        lowered = np.where(over_cooled, np.maximum(dr - step, ahu.dr_min), dr)
        if np.array_equal(lowered, dr):
            logger.warning(f"step {state.time_index}: return-air fraction at its floor, comfort gap {violation:.3f}")
            return EpochResult(candidate, l, True, True, violation, ulc, last_llc, history, co2_unreachable)
        dr = lowered
        history.append(dr.copy())

    logger.warning(f"step {state.time_index}: ventilation loop stopped after {cfg.max_dr_iters} decrements")
    return EpochResult(candidate, cfg.max_dr_iters, True, True, violation, ulc, last_llc, history, co2_unreachable)


EpochPolicy = Callable[[PlantState, Optional[ControlPlan]], EpochResult]
EpochFunction = Callable[[PlantState, Optional[ControlPlan], Optional[UlcResult]], EpochResult]


def carrying(epoch: EpochFunction) -> EpochPolicy:
    """Policy handing each epoch the final thermal result of the epoch before (dropped after a failure)."""

    last: List[UlcResult] = []

    def policy(state: PlantState, previous: Optional[ControlPlan]) -> EpochResult:
        carry = last.pop() if last else None
        result = epoch(state, previous, carry)
        last.append(result.ulc)
        return result

    return policy


def emergency_plan(building: Building) -> ControlPlan:
    """Fastest feasible cooling at full recirculation, used when no plan exists yet."""

    H = building.horizon.horizon_steps
    return ControlPlan(np.tile(fastest_flows(building), (H, 1)), np.full(H, building.ahu.dr_max)).clamped(building)


def run_mpc(
    scen: Scenario,
    building: Building,
    policy: EpochPolicy,
    method: str,
    steps: Optional[int] = None,
) -> RunReport:
    """Receding-horizon loop: plan over the look-ahead window, execute the first step, repeat."""

    horizon = building.horizon
    steps = horizon.day_steps if steps is None else steps
    if steps < 1:
        raise InputError("steps must be >= 1")
    if scen.zone_count != building.zone_count:
        raise InputError("scenario and building disagree on the zone count")
    if scen.length < steps + horizon.horizon_steps:
        raise InputError(f"scenario covers {scen.length} steps, {steps + horizon.horizon_steps} required")

    state = PlantState.initial(scen)
    recorder = TrajectoryRecorder(state, horizon.step_hours, method)
    previous: Optional[ControlPlan] = None
    for t in range(steps):
        started = time.perf_counter()
        try:
            epoch = policy(state, previous)
            plan = epoch.plan
            stats = epoch.stats()
            if epoch.llc is not None:
                recorder.diagnostics.extend({"step": t, **row} for row in epoch.llc.diagnostics)
        except (EpochError, InfeasibleError, StabilityError) as exc:
            logger.error(f"{method}: epoch {t} failed: {exc}")
            plan = previous.shifted().clamped(building) if previous is not None else emergency_plan(building)
            stats = {"fallback": True, "converged": False, "dr_floor_hit": False, "error": str(exc)}

        executed = simulate(plan.first_step(), scen, state, building, method)
        recorder.extend(executed)
        stats.update(step=t, wall_ms=round((time.perf_counter() - started) * 1e3, 3))
        recorder.stats.append(stats)
        log_epoch({"method": method, **stats})
        logger.info(
            f"{method}: step {t}, l={stats.get('l_iterations', 0)}, llc={stats.get('llc_invoked', False)}, "
            f"dr={plan.vent_fraction[0]:.2f}, {stats['wall_ms']:.0f} ms"
        )
        state = executed.final_state()
        previous = plan
    return recorder.build()


def mpc_run(scen: Scenario, building: Building, cfg: TldmConfig, steps: Optional[int] = None) -> RunReport:
    """Full TLDM day on the exact plant (labelled ``centralized`` when both levels are stacked)."""

    return run_mpc(
        scen,
        building,
        carrying(lambda state, previous, carry: tldm_epoch(state, scen, building, cfg, previous, carry)),
        "centralized" if cfg.centralized else "tldm",
        steps,
    )
