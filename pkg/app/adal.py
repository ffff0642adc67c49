from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import InfeasibleError, InputError
from .qp import QpProblem, QpSolution, QpSolver, QpStatus, solve_qp
from .utils import logger


# added to each row's sharing count in the per-row proximal weights; the weights must
# exceed the count under a full multiplier step
ROW_WEIGHT_MARGIN = 0.5


class AdalConfig(BaseModel):
    """Penalty, stopping thresholds and iteration caps of one coordination level.

    ``aggregation`` selects how simultaneous best responses are reconciled:

    * ``"rows"``: no primal averaging; each agent's penalty on a coupling row is weighted
      by the number of agents sharing that row, anchored at its previous contribution,
      so every agent absorbs its share of the row's residual.
    * ``"auto"``: primal averaging with τ = 1 / (largest number of agents on one row).
    * a float τ in (0, 1]: primal averaging with that weight (1 is the undamped step).

    ``multiplier_step`` is ``"damped"`` (ρτ) or ``"full"`` (ρ whatever τ is).
    """

    model_config = ConfigDict(frozen=True)

    rho: float = Field(default=1.0, gt=0)
    eps_in: float = Field(default=1e-3, gt=0)
    eps_out: float = Field(default=1.0, gt=0)
    max_inner: int = Field(default=500, gt=0)
    max_outer: int = Field(default=20, gt=0)
    aggregation: Union[Literal["rows", "auto"], float] = Field(default="rows")
    multiplier_step: Literal["damped", "full"] = Field(default="damped")
    residual_balancing: bool = Field(default=False)
    workers: int = Field(default=1, ge=1)
    qp_tol: float = Field(default=1e-8, gt=0)
    qp_max_iter: int = Field(default=5000, gt=0)

    @field_validator("aggregation")
    @classmethod
    def _aggregation_range(cls, value: Union[str, float]) -> Union[str, float]:
        if value not in ("rows", "auto") and not 0 < float(value) <= 1:
            raise ValueError("aggregation must be 'rows', 'auto' or a weight in (0, 1]")
        return value

    def tau(self, sharing: int) -> float:
        """Primal aggregation weight; ``auto`` is 1/(max agents per coupling row)."""

        if self.aggregation == "rows":
            return 1.0
        if self.aggregation == "auto":
            return 1.0 / max(sharing, 1)
        return float(self.aggregation)

    def dual_step(self, rho: float, tau: float) -> float:
        return rho if self.multiplier_step == "full" else rho * tau

    def row_weights(self, coupling: "CouplingConstraint") -> np.ndarray:
        """Proximal weight of every coupling row (all ones without per-row weighting)."""

        if self.aggregation == "rows":
            return coupling.counts() + ROW_WEIGHT_MARGIN
        return np.ones(coupling.row_count)


@dataclass(frozen=True, eq=False)
class CouplingConstraint:
    """``Σ_i A_i x_i = b`` with each agent's ``A_i`` stored on the rows it touches."""

    rhs: np.ndarray
    rows: List[np.ndarray]
    blocks: List[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.rows) != len(self.blocks):
            raise InputError("coupling needs one row selector per agent block")
        for rows, block in zip(self.rows, self.blocks):
            if block.shape[0] != rows.shape[0]:
                raise InputError("coupling block height must match its row selector")

    @classmethod
    def from_entries(cls, rhs: np.ndarray, sizes: Sequence[int], entries: Sequence[tuple[int, int, int, float]]) -> "CouplingConstraint":
        """Assemble from ``(agent, row, column, coefficient)`` entries."""

        per_agent: List[dict[int, dict[int, float]]] = [dict() for _ in sizes]
        for agent, row, col, coeff in entries:
            per_agent[agent].setdefault(row, {})
            per_agent[agent][row][col] = per_agent[agent][row].get(col, 0.0) + coeff
        rows_list, blocks = [], []
        for agent, size in enumerate(sizes):
            rows = np.array(sorted(per_agent[agent]), dtype=int)
            block = np.zeros((rows.shape[0], size))
            for local, row in enumerate(rows):
                for col, coeff in per_agent[agent][row].items():
                    block[local, col] = coeff
            rows_list.append(rows)
            blocks.append(block)
        return cls(np.asarray(rhs, dtype=float), rows_list, blocks)

    @property
    def row_count(self) -> int:
        return int(self.rhs.shape[0])

    def counts(self) -> np.ndarray:
        """Number of agents on each row."""

        counts = np.zeros(self.row_count, dtype=int)
        for rows in self.rows:
            counts[rows] += 1
        return counts

    def sharing(self) -> int:
        return int(self.counts().max(initial=1))

    def residual(self, xs: Sequence[np.ndarray]) -> np.ndarray:
        r = -self.rhs.copy()
        for rows, block, x in zip(self.rows, self.blocks, xs):
            r[rows] += block @ x
        return r


@dataclass(frozen=True, eq=False)
class AdalAgent:
    name: str
    problem: QpProblem
    x0: np.ndarray


@dataclass(frozen=True, eq=False)
class AdalResult:
    x: List[np.ndarray]
    alpha: np.ndarray
    residual: float
    iterations: int
    converged: bool
    rho: float
    residual_history: List[float] = field(default_factory=list)
    objective_history: List[float] = field(default_factory=list)


def augmented_linear(
    linear: np.ndarray, block: np.ndarray, alpha_rows: np.ndarray, rho: float, others_rows: np.ndarray
) -> np.ndarray:
    """Linear term of agent i's augmented Lagrangian.

    ``others_rows`` is ``Σ_{j≠i} A_j x_j − b`` restricted to the agent's coupling rows.
    """

    return linear + block.T @ (alpha_rows + rho * others_rows)


def augment(
    problem: QpProblem, block: np.ndarray, alpha_rows: np.ndarray, rho: float, others_rows: np.ndarray
) -> QpProblem:
    """Agent i's local problem plus ``αᵀA_i x_i + ρ/2‖A_i x_i + others‖²``."""

    return QpProblem.build(
        problem.quadratic + rho * block.T @ block,
        augmented_linear(problem.linear, block, alpha_rows, rho, others_rows),
        problem.eq_matrix,
        problem.eq_rhs,
        problem.ineq_matrix,
        problem.ineq_rhs,
        problem.lower,
        problem.upper,
        problem.constant + float(alpha_rows @ others_rows) + 0.5 * rho * float(others_rows @ others_rows),
    )


def _make_solver(agent: AdalAgent, block: np.ndarray, weights: np.ndarray, rho: float, cfg: AdalConfig) -> QpSolver:
    p = agent.problem
    augmented = QpProblem(
        p.quadratic + rho * block.T @ (weights[:, None] * block),
        p.linear,
        p.eq_matrix,
        p.eq_rhs,
        p.ineq_matrix,
        p.ineq_rhs,
        p.lower,
        p.upper,
        p.constant,
    )
    return QpSolver(augmented, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)


def _same_local_problem(a: QpProblem, b: QpProblem) -> bool:
    """True when two problems differ at most in their linear term and constant."""

    if a is b:
        return True
    names = ("quadratic", "eq_matrix", "eq_rhs", "ineq_matrix", "ineq_rhs", "lower", "upper")
    return all(np.array_equal(getattr(a, name), getattr(b, name)) for name in names)


class SolverPool:
    """Factorized agent solvers reused by coordination runs whose local problems differ only in cost.

    The thermal level re-solves the same agents for several ventilation profiles; keeping
    the solvers keeps their factorizations, warm starts and active sets.
    """

    def __init__(self) -> None:
        self._entries: Dict[Tuple[int, float], Tuple[QpProblem, np.ndarray, np.ndarray, QpSolver]] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def solver(self, index: int, agent: AdalAgent, block: np.ndarray, weights: np.ndarray, rho: float, cfg: AdalConfig) -> QpSolver:
        key = (index, float(rho))
        hit = self._entries.get(key)
        if (
            hit is not None
            and _same_local_problem(hit[0], agent.problem)
            and np.array_equal(hit[1], block)
            and np.array_equal(hit[2], weights)
        ):
            return hit[3]
        solver = _make_solver(agent, block, weights, rho, cfg)
        self._entries[key] = (agent.problem, block, weights, solver)
        return solver


def solve_adal(
    agents: Sequence[AdalAgent],
    coupling: CouplingConstraint,
    cfg: AdalConfig,
    alpha0: Optional[np.ndarray] = None,
    x_init: Optional[Sequence[np.ndarray]] = None,
    label: str = "adal",
    pool: Optional[SolverPool] = None,
) -> AdalResult:
    """Jacobi augmented-Lagrangian coordination.

    Each iteration every agent minimizes its augmented Lagrangian with the others
    frozen at the current iterate; the iterate moves a fraction τ towards the best
    responses and the multipliers step along the coupling residual. With per-row
    weights (``aggregation="rows"``) agent i's penalty on row r is
    ``ρ w_r/2 (A_ir x_i − A_ir x_i^q + r_r/w_r)²``, which equals the plain augmented
    term plus a proximal term ``ρ (w_r − 1)/2 (A_ir (x_i − x_i^q))²``.
    Stops once ``‖Σ A_i x_i − b‖₂ ≤ eps_in``.
    """

    if len(agents) != len(coupling.rows):
        raise InputError("one coupling block is required per agent")
    pool = pool if pool is not None else SolverPool()
    rho = cfg.rho
    tau = cfg.tau(coupling.sharing())
    weights = cfg.row_weights(coupling)
    agent_weights = [weights[rows] for rows in coupling.rows]
    x = [np.array(a.x0 if x_init is None else x_init[i], dtype=float) for i, a in enumerate(agents)]
    alpha = np.zeros(coupling.row_count) if alpha0 is None else np.array(alpha0, dtype=float)
    if alpha.shape != (coupling.row_count,):
        raise InputError("initial multipliers do not match the coupling rows")

    def build_solvers(rho: float) -> List[QpSolver]:
        return [
            pool.solver(i, a, coupling.blocks[i], agent_weights[i], rho, cfg) for i, a in enumerate(agents)
        ]

    solvers = build_solvers(rho)
    residual_vec = coupling.residual(x)
    best = (float(np.linalg.norm(residual_vec)), [xi.copy() for xi in x], alpha.copy())
    residual_history: List[float] = []
    objective_history: List[float] = []
    nonoptimal = 0

    def respond(index: int) -> QpSolution:
        rows, block, w = coupling.rows[index], coupling.blocks[index], agent_weights[index]
        own = block @ x[index]
        others = residual_vec[rows] - w * own
        linear = augmented_linear(agents[index].problem.linear, block, alpha[rows], rho, others)
        return solvers[index].solve(linear)

    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    converged = False
    iterations = 0
    try:
        for iterations in range(1, cfg.max_inner + 1):
            if executor is not None:
                solutions = list(executor.map(respond, range(len(agents))))
            else:
                solutions = [respond(i) for i in range(len(agents))]
            for index, solution in enumerate(solutions):
                if solution.status == QpStatus.INFEASIBLE:
                    raise InfeasibleError(
                        f"{label}: local problem of agent '{agents[index].name}' is infeasible",
                        agent=agents[index].name,
                    )
                if solution.status != QpStatus.OPTIMAL:
                    nonoptimal += 1
            previous = x
            x = [(1.0 - tau) * xi + tau * s.x for xi, s in zip(x, solutions)]
            residual_vec = coupling.residual(x)
            alpha = alpha + cfg.dual_step(rho, tau) * residual_vec
            residual = float(np.linalg.norm(residual_vec))
            residual_history.append(residual)
            objective_history.append(sum(a.problem.objective(xi) for a, xi in zip(agents, x)))
            if residual < best[0]:
                best = (residual, [xi.copy() for xi in x], alpha.copy())
            if iterations % 50 == 0:
                logger.debug(f"{label}: iteration {iterations}, residual {residual:.3e}, rho {rho:g}")
            if residual <= cfg.eps_in:
                converged = True
                break
            if cfg.residual_balancing:
                change = residual_vec - coupling.residual(previous)
                dual = rho * float(np.linalg.norm(change))
                if residual > 10.0 * dual or dual > 10.0 * residual:
                    rho = rho * 2.0 if residual > 10.0 * dual else rho / 2.0
                    solvers = build_solvers(rho)
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    if nonoptimal:
        logger.debug(f"{label}: {nonoptimal} local solves stopped at the iteration cap")
    if converged:
        return AdalResult(x, alpha, residual_history[-1], iterations, True, rho, residual_history, objective_history)
    logger.warning(f"{label}: coupling residual {best[0]:.3e} above {cfg.eps_in:g} after {iterations} iterations")
    return AdalResult(best[1], best[2], best[0], iterations, False, rho, residual_history, objective_history)


def _block_diag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r, c = r + b.shape[0], c + b.shape[1]
    return out


def stack_agents(locals_: Sequence[QpProblem], coupling: CouplingConstraint) -> QpProblem:
    """One QP over all agents: block-diagonal local problems plus the coupling as equality rows."""

    sizes = [p.dimension for p in locals_]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    coupling_matrix = np.zeros((coupling.row_count, offsets[-1]))
    for i, (rows, block) in enumerate(zip(coupling.rows, coupling.blocks)):
        coupling_matrix[np.ix_(rows, np.arange(offsets[i], offsets[i + 1]))] = block
    return QpProblem.build(
        _block_diag([p.quadratic for p in locals_]),
        np.concatenate([p.linear for p in locals_]),
        np.vstack([_block_diag([p.eq_matrix for p in locals_]), coupling_matrix]),
        np.concatenate([p.eq_rhs for p in locals_] + [coupling.rhs]),
        _block_diag([p.ineq_matrix for p in locals_]),
        np.concatenate([p.ineq_rhs for p in locals_]),
        np.concatenate([p.lower for p in locals_]),
        np.concatenate([p.upper for p in locals_]),
        constant=sum(p.constant for p in locals_),
    )



def solve_stacked(
    agents: Sequence[AdalAgent],
    coupling: CouplingConstraint,
    cfg: AdalConfig,
    label: str = "stacked",
    constraint: Optional[str] = None,
) -> AdalResult:
    """Solve the agents' problems jointly as one QP; the result mimics a converged coordination run."""

    locals_ = [a.problem for a in agents]
    solution = solve_qp(stack_agents(locals_, coupling), tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)
    if solution.status == QpStatus.INFEASIBLE:
        raise InfeasibleError(f"{label}: stacked problem is infeasible", constraint=constraint)
    offsets = np.concatenate([[0], np.cumsum([p.dimension for p in locals_])]).astype(int)
    xs = [solution.x[offsets[i] : offsets[i + 1]].copy() for i in range(len(locals_))]
    residual = float(np.linalg.norm(coupling.residual(xs)))
    converged = solution.status == QpStatus.OPTIMAL and residual <= cfg.eps_in
    if not converged:
        logger.warning(f"{label}: stacked solve ended {solution.status.value}, coupling residual {residual:.3e}")
    objective = sum(p.objective(x) for p, x in zip(locals_, xs))
    return AdalResult(xs, np.zeros(coupling.row_count), residual, 0, converged, cfg.rho, [residual], [objective])
