from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import InputError
from .utils import logger


# factorized KKT systems kept per solver, keyed by active set
KKT_CACHE_SIZE = 16


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass(frozen=True, eq=False)
class QpProblem:
    """min ½xᵀPx + qᵀx + c  s.t.  A_e x = b_e,  A_n x ≤ b_n,  lower ≤ x ≤ upper."""

    quadratic: np.ndarray
    linear: np.ndarray
    eq_matrix: np.ndarray
    eq_rhs: np.ndarray
    ineq_matrix: np.ndarray
    ineq_rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    constant: float = 0.0

    @classmethod
    def build(
        cls,
        quadratic: np.ndarray,
        linear: np.ndarray,
        eq_matrix: Optional[np.ndarray] = None,
        eq_rhs: Optional[np.ndarray] = None,
        ineq_matrix: Optional[np.ndarray] = None,
        ineq_rhs: Optional[np.ndarray] = None,
        lower: Optional[np.ndarray] = None,
        upper: Optional[np.ndarray] = None,
        constant: float = 0.0,
    ) -> "QpProblem":
        linear = np.asarray(linear, dtype=float).ravel()
        n = linear.shape[0]
        quadratic = np.asarray(quadratic, dtype=float).reshape(n, n)
        eq_matrix = np.zeros((0, n)) if eq_matrix is None else np.asarray(eq_matrix, dtype=float).reshape(-1, n)
        eq_rhs = np.zeros(0) if eq_rhs is None else np.asarray(eq_rhs, dtype=float).ravel()
        ineq_matrix = (
            np.zeros((0, n)) if ineq_matrix is None else np.asarray(ineq_matrix, dtype=float).reshape(-1, n)
        )
        ineq_rhs = np.zeros(0) if ineq_rhs is None else np.asarray(ineq_rhs, dtype=float).ravel()
        lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float).ravel()
        upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float).ravel()
        problem = cls(quadratic, linear, eq_matrix, eq_rhs, ineq_matrix, ineq_rhs, lower, upper, float(constant))
        problem.validate()
        return problem

    @property
    def dimension(self) -> int:
        return int(self.linear.shape[0])

    def validate(self) -> None:
        n = self.dimension
        for name in ("quadratic", "linear", "eq_matrix", "eq_rhs", "ineq_matrix", "ineq_rhs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InputError(f"QP {name} contains NaN or Inf")
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise InputError("QP bounds contain NaN")
        if not np.isfinite(self.constant):
            raise InputError("QP constant is not finite")
        if self.eq_matrix.shape != (self.eq_rhs.shape[0], n) or self.ineq_matrix.shape != (self.ineq_rhs.shape[0], n):
            raise InputError("QP constraint dimensions are inconsistent")
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise InputError("QP bound dimensions are inconsistent")
        if np.any(self.lower > self.upper):
            raise InputError("QP lower bound exceeds upper bound")
        scale = max(1.0, float(np.abs(self.quadratic).max(initial=0.0)))
        if np.abs(self.quadratic - self.quadratic.T).max(initial=0.0) > 1e-9 * scale:
            raise InputError("QP quadratic term is not symmetric")
        if n and np.linalg.eigvalsh(self.quadratic).min() < -1e-8 * scale:
            raise InputError("QP quadratic term is not positive semidefinite")

    def objective(self, x: np.ndarray, linear: Optional[np.ndarray] = None) -> float:
        q = self.linear if linear is None else linear
        return float(0.5 * x @ self.quadratic @ x + q @ x + self.constant)

    def with_linear(self, linear: np.ndarray, constant: Optional[float] = None) -> "QpProblem":
        linear = np.asarray(linear, dtype=float)
        if linear.shape != self.linear.shape or not np.all(np.isfinite(linear)):
            raise InputError("replacement linear term must be finite and of matching dimension")
        return replace(self, linear=linear, constant=self.constant if constant is None else float(constant))


@dataclass(frozen=True, eq=False)
class QpSolution:
    x: np.ndarray
    objective: float
    status: QpStatus
    kkt_residual: float
    iterations: int
    duals: Optional[np.ndarray] = None

    @property
    def optimal(self) -> bool:
        return self.status == QpStatus.OPTIMAL


def project_box(x: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(lower > upper):
        raise InputError("box lower bound exceeds upper bound")
    return np.clip(np.asarray(x, dtype=float), lower, upper)


def _norm(v: np.ndarray) -> float:
    return float(np.abs(v).max(initial=0.0))


class QpSolver:
    """Dense operator-splitting QP solver with solution polishing.

    All constraints are stacked as ``lo ≤ A x ≤ hi`` (equalities, inequalities, finite
    box rows) and row-normalized. The KKT-regularized matrix is factorized once and
    reused across ``solve`` calls that only change the linear term, which is what the
    coordination loops need.
    """

    def __init__(
        self,
        problem: QpProblem,
        tol: float = 1e-8,
        max_iter: int = 5000,
        rho: float = 0.1,
        sigma: float = 1e-6,
        alpha: float = 1.6,
        check_every: int = 10,
    ) -> None:
        self.problem = problem
        self.tol = tol
        self.max_iter = max_iter
        self.sigma = sigma
        self.alpha = alpha
        self.check_every = check_every

        n = problem.dimension
        box_rows = np.isfinite(problem.lower) | np.isfinite(problem.upper)
        matrix = np.vstack([problem.eq_matrix, problem.ineq_matrix, np.eye(n)[box_rows]])
        lo = np.concatenate([problem.eq_rhs, np.full(problem.ineq_rhs.shape[0], -np.inf), problem.lower[box_rows]])
        hi = np.concatenate([problem.eq_rhs, problem.ineq_rhs, problem.upper[box_rows]])
        scale = np.abs(matrix).max(axis=1) if matrix.size else np.zeros(0)
        scale[scale == 0] = 1.0

        self._matrix = matrix
        self._lo_raw, self._hi_raw = lo, hi
        self._scale = scale
        self._a = matrix / scale[:, None]
        self._lo = lo / scale
        self._hi = hi / scale
        self._lo_finite = np.isfinite(self._lo)
        self._hi_finite = np.isfinite(self._hi)
        self._eq_rows = self._lo_finite & self._hi_finite & (self._lo == self._hi)
        self._last_x: Optional[np.ndarray] = None
        self._last_y: Optional[np.ndarray] = None
        self._active: Optional[tuple[np.ndarray, np.ndarray]] = None
        self._kkt_inverses: "OrderedDict[bytes, np.ndarray]" = OrderedDict()
        self._set_rho(rho)

    @property
    def rows(self) -> int:
        return int(self._a.shape[0])

    def _set_rho(self, rho: float) -> None:
        self._rho_base = rho
        self._rho = np.where(self._eq_rows, 1e3 * rho, rho)
        n = self.problem.dimension
        system = self.problem.quadratic + self.sigma * np.eye(n) + self._a.T @ (self._rho[:, None] * self._a)
        self._factor = scipy.linalg.cho_factor(system)

    # -- residuals -----------------------------------------------------------------

    def _kkt(self, x: np.ndarray, y_scaled: np.ndarray, q: np.ndarray) -> float:
        """Max of primal violation, stationarity, complementarity and dual sign errors."""

        y = y_scaled / self._scale
        ax = self._matrix @ x
        lo, hi = self._lo_raw, self._hi_raw
        primal = max(0.0, float(np.max(lo - ax, initial=0.0)), float(np.max(ax - hi, initial=0.0)))
        dual = _norm(self.problem.quadratic @ x + q + self._matrix.T @ y)
        y_pos, y_neg = np.maximum(y, 0.0), np.minimum(y, 0.0)
        comp_hi = np.where(self._hi_finite, y_pos * np.abs(np.where(self._hi_finite, hi - ax, 0.0)), y_pos)
        comp_lo = np.where(self._lo_finite, -y_neg * np.abs(np.where(self._lo_finite, ax - lo, 0.0)), -y_neg)
        return max(primal, dual, _norm(comp_hi), _norm(comp_lo))

    def _certifies_infeasible(self, dy: np.ndarray) -> bool:
        size = _norm(dy)
        if size <= 1e-10:
            return False
        if _norm(self._a.T @ dy) > 1e-7 * size:
            return False
        pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
        if np.any(pos[~self._hi_finite] > 1e-7 * size) or np.any(neg[~self._lo_finite] < -1e-7 * size):
            return False
        support = float(
            np.where(self._hi_finite, self._hi, 0.0) @ pos + np.where(self._lo_finite, self._lo, 0.0) @ neg
        )
        return support < -1e-4 * size

    def _active_solve(
        self, lower_active: np.ndarray, upper_active: np.ndarray, q: np.ndarray
    ) -> Optional[tuple[np.ndarray, np.ndarray, float]]:
        """Solve the equality-constrained KKT system of one active set; None unless KKT holds."""

        n = self.problem.dimension
        upper_active = upper_active | self._eq_rows
        lower_active = lower_active & ~upper_active
        active = lower_active | upper_active
        key = np.packbits(np.concatenate([lower_active, upper_active])).tobytes()
        inverse = self._kkt_inverses.get(key)
        if inverse is None:
            a_act = self._a[active]
            k = a_act.shape[0]
            system = np.block([[self.problem.quadratic, a_act.T], [a_act, np.zeros((k, k))]])
            try:
                inverse = scipy.linalg.pinv(system)
            except (np.linalg.LinAlgError, ValueError):
                return None
            self._kkt_inverses[key] = inverse
            if len(self._kkt_inverses) > KKT_CACHE_SIZE:
                self._kkt_inverses.popitem(last=False)
        else:
            self._kkt_inverses.move_to_end(key)
        target = np.where(upper_active, self._hi, self._lo)[active]
        sol = inverse @ np.concatenate([-q, target])
        x_p = sol[:n]
        y_p = np.zeros(self.rows)
        y_p[active] = sol[n:]
        residual = self._kkt(x_p, y_p, q)
        if residual > self.tol:
            return None
        self._active = (lower_active, upper_active)
        return x_p, y_p, residual

    def _polish(self, z: np.ndarray, y: np.ndarray, q: np.ndarray) -> Optional[tuple[np.ndarray, np.ndarray, float]]:
        threshold = 1e-9 * max(1.0, _norm(y))
        candidates = [
            (z - self._lo < -y, self._hi - z < y),
            ((y < -threshold) & self._lo_finite, (y > threshold) & self._hi_finite),
        ]
        for lower_active, upper_active in candidates:
            polished = self._active_solve(lower_active, upper_active, q)
            if polished is not None:
                return polished
        return None

    # -- main loop -----------------------------------------------------------------

    def solve(
        self,
        linear: Optional[np.ndarray] = None,
        x0: Optional[np.ndarray] = None,
        warm_start: bool = True,
    ) -> QpSolution:
        q = self.problem.linear if linear is None else np.asarray(linear, dtype=float)
        if not np.all(np.isfinite(q)):
            raise InputError("QP linear term contains NaN or Inf")
        n = self.problem.dimension
        a, lo, hi = self._a, self._lo, self._hi

        # consecutive coordination solves mostly keep the previous active set
        if warm_start and x0 is None and self._active is not None:
            fast = self._active_solve(*self._active, q)
            if fast is not None:
                return self._finish(fast[0], fast[1], q, QpStatus.OPTIMAL, fast[2], 0)

        if x0 is not None:
            x = np.asarray(x0, dtype=float).copy()
            y = np.zeros(self.rows)
        elif warm_start and self._last_x is not None:
            x, y = self._last_x.copy(), self._last_y.copy()
        else:
            x, y = np.zeros(n), np.zeros(self.rows)
        z = np.clip(a @ x, lo, hi)

        next_polish = 0
        for it in range(1, self.max_iter + 1):
            rhs = self.sigma * x - q + a.T @ (self._rho * z - y)
            x_tilde = scipy.linalg.cho_solve(self._factor, rhs)
            z_tilde = a @ x_tilde
            x = self.alpha * x_tilde + (1.0 - self.alpha) * x
            z_relaxed = self.alpha * z_tilde + (1.0 - self.alpha) * z
            z_next = np.clip(z_relaxed + y / self._rho, lo, hi)
            y_next = y + self._rho * (z_relaxed - z_next)
            dy = y_next - y
            z, y = z_next, y_next

            if it % self.check_every and it != self.max_iter:
                continue

            ax = a @ x
            px = self.problem.quadratic @ x
            aty = a.T @ y
            r_prim = _norm(ax - z)
            r_dual = _norm(px + q + aty)
            eps_prim = 1e-4 * (1.0 + max(_norm(ax), _norm(z)))
            eps_dual = 1e-4 * (1.0 + max(_norm(px), _norm(aty), _norm(q)))

            if r_prim > eps_prim and self._certifies_infeasible(dy):
                logger.debug(f"QP infeasibility certificate after {it} iterations")
                self._last_x, self._last_y, self._active = None, None, None
                return QpSolution(x, self.problem.objective(x, q), QpStatus.INFEASIBLE, float("inf"), it)

            if r_prim <= eps_prim and r_dual <= eps_dual and it >= next_polish:
                polished = self._polish(z, y, q)
                if polished is not None:
                    x_p, y_p, residual = polished
                    return self._finish(x_p, y_p, q, QpStatus.OPTIMAL, residual, it)
                next_polish = it + 50
                residual = self._kkt(x, y, q)
                if residual <= self.tol:
                    return self._finish(x, y, q, QpStatus.OPTIMAL, residual, it)

            if it % 100 == 0 and r_prim > 0 and r_dual > 0:
                ratio = np.sqrt(
                    (r_prim / max(_norm(ax), _norm(z), 1e-10)) / (r_dual / max(_norm(px), _norm(aty), _norm(q), 1e-10))
                )
                candidate = float(np.clip(self._rho_base * ratio, 1e-6, 1e6))
                if candidate > 5 * self._rho_base or candidate < self._rho_base / 5:
                    self._set_rho(candidate)

        x = project_box(x, self.problem.lower, self.problem.upper)
        residual = self._kkt(x, y, q)
        status = QpStatus.OPTIMAL if residual <= self.tol else QpStatus.MAX_ITER
        return self._finish(x, y, q, status, residual, self.max_iter)

    def _finish(
        self, x: np.ndarray, y: np.ndarray, q: np.ndarray, status: QpStatus, residual: float, iterations: int
    ) -> QpSolution:
        self._last_x, self._last_y = x.copy(), y.copy()
        return QpSolution(x, self.problem.objective(x, q), status, float(residual), iterations, y / self._scale)


def solve_qp(problem: QpProblem, tol: float = 1e-8, max_iter: int = 5000, x0: Optional[np.ndarray] = None) -> QpSolution:
    return QpSolver(problem, tol=tol, max_iter=max_iter).solve(x0=x0)
