"""
Sequential linear programming with trust-region move limits.

Solves  min f(x)  s.t.  c(x) <= 0,  h(x) = 0,  A x <= b,  lower <= x <= upper.
The linear rows A x <= b hold at every iterate; nonlinear constraints enter each LP
through their linearisation with penalised slacks, so the subproblem stays feasible.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.optimize import linprog

from biot_design.geometry.spline_box import LinearConstraintSet
from biot_design.resources.basics import (InfeasibleStartException,
                                          MeshException, SolverException)
from biot_design.resources.constants import (MAX_MOVE_LIMIT, MERIT_PENALTY,
                                             MIN_MOVE_LIMIT, MOVE_LIMIT,
                                             SLP_ACCEPT_RATIO,
                                             SLP_EXPAND_RATIO, SLP_MAX_ITER,
                                             SLP_SHRINK_RATIO, SLP_TOLERANCE)

logger = logging.getLogger("slp")


@dataclass(frozen=True)
class Evaluation:
    """
    Function values and first derivatives at one point. report holds the unscaled
    quantities written to the convergence log.
    """

    objective: float
    gradient: np.ndarray
    ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ineq_jacobian: Optional[np.ndarray] = None
    eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eq_jacobian: Optional[np.ndarray] = None
    report: Dict[str, float] = field(default_factory=dict)

    @property
    def violation(self) -> float:
        """L1 constraint violation sum max(0, c) + sum |h|."""
        return float(np.maximum(self.ineq, 0.0).sum() + np.abs(self.eq).sum())

    @property
    def max_violation(self) -> float:
        values = np.concatenate([np.maximum(self.ineq, 0.0), np.abs(self.eq), [0.0]])
        return float(values.max())


@dataclass
class NLP:
    evaluate: Callable[[np.ndarray], Evaluation]
    n: int
    linear: Optional[LinearConstraintSet] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    ineq_labels: List[str] = field(default_factory=list)
    eq_labels: List[str] = field(default_factory=list)
    on_accept: Optional[Callable[[int, np.ndarray, Evaluation], None]] = None

    def bounds(self):
        lower = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower)
        upper = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper)
        return lower, upper


@dataclass(frozen=True)
class SLPOptions:
    move_limit: float = MOVE_LIMIT
    min_move_limit: float = MIN_MOVE_LIMIT
    max_move_limit: float = MAX_MOVE_LIMIT
    penalty: float = MERIT_PENALTY
    max_iter: int = SLP_MAX_ITER
    tolerance: float = SLP_TOLERANCE
    accept_ratio: float = SLP_ACCEPT_RATIO
    expand_ratio: float = SLP_EXPAND_RATIO
    shrink_ratio: float = SLP_SHRINK_RATIO
    feasibility_tolerance: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.min_move_limit <= self.move_limit <= self.max_move_limit:
            raise ValueError(
                f"Need 0 < min_move_limit <= move_limit <= max_move_limit, got "
                f"{self.min_move_limit}, {self.move_limit}, {self.max_move_limit}"
            )
        if self.penalty <= 0 or self.max_iter < 1:
            raise ValueError("penalty must be > 0 and max_iter >= 1")
        if not 0.0 < self.accept_ratio <= self.shrink_ratio < self.expand_ratio < 1.0:
            raise ValueError("Need 0 < accept_ratio <= shrink_ratio < expand_ratio < 1")


@dataclass
class OptimizationRecord:
    x: np.ndarray
    evaluation: Evaluation
    history: pd.DataFrame
    converged: bool
    status: str
    iterations: int
    initial: Evaluation
    design: Any = None
    coefficients: Any = None
    # maps the solver objective back to the problem's own units and sign
    objective_scale: float = 1.0

    @property
    def feasible(self) -> bool:
        return self.evaluation.max_violation <= 1e-8

    def summary(self) -> Dict[str, Any]:
        return {
            "objective": self.objective_scale * self.evaluation.objective,
            "initial_objective": self.objective_scale * self.initial.objective,
            "max_violation": self.evaluation.max_violation,
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "report": dict(self.evaluation.report),
        }


def merit(ev: Evaluation, penalty: float) -> float:
    return ev.objective + penalty * ev.violation


def _jacobian(matrix: Optional[np.ndarray], rows: int, n: int) -> sp.csr_matrix:
    if matrix is None or rows == 0:
        return sp.csr_matrix((rows, n))
    return sp.csr_matrix(np.asarray(matrix).reshape(rows, n))


def _solve_subproblem(nlp: NLP, x: np.ndarray, ev: Evaluation, radius: float, penalty: float):
    """
    Elastic LP over z = (d, s, t+, t-):
    min g.d + penalty (sum s + sum t+ + sum t-)
    s.t. c + Jc d <= s, h + Jh d = t+ - t-, A d <= b - A x, move limits and bounds on d.
    """
    n = nlp.n
    m_c, m_h = len(ev.ineq), len(ev.eq)
    lower, upper = nlp.bounds()
    cost = np.concatenate([ev.gradient, np.full(m_c + 2 * m_h, penalty)])

    ub_blocks, ub_rhs = [], []
    if m_c:
        jc = _jacobian(ev.ineq_jacobian, m_c, n)
        ub_blocks.append(sp.hstack([jc, -sp.eye(m_c), sp.csr_matrix((m_c, 2 * m_h))]))
        ub_rhs.append(-ev.ineq)
    if nlp.linear is not None and nlp.linear.matrix.shape[0]:
        a = nlp.linear.matrix
        ub_blocks.append(sp.hstack([a, sp.csr_matrix((a.shape[0], m_c + 2 * m_h))]))
        ub_rhs.append(nlp.linear.residual(x))
    a_ub = sp.vstack(ub_blocks).tocsr() if ub_blocks else None
    b_ub = np.concatenate(ub_rhs) if ub_rhs else None

    a_eq = b_eq = None
    if m_h:
        jh = _jacobian(ev.eq_jacobian, m_h, n)
        a_eq = sp.hstack(
            [jh, sp.csr_matrix((m_h, m_c)), -sp.eye(m_h), sp.eye(m_h)]
        ).tocsr()
        b_eq = -ev.eq

    d_lower = np.maximum(-radius, lower - x)
    d_upper = np.minimum(radius, upper - x)
    bounds = np.concatenate(
        [np.stack([d_lower, d_upper], axis=1), np.tile([0.0, np.inf], (m_c + 2 * m_h, 1))]
    )
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise SolverException(f"slp: LP subproblem failed ({res.message})")
    step = res.x[:n]
    predicted = penalty * ev.violation - float(res.fun)
    return step, predicted


def _scale_back(linear: Optional[LinearConstraintSet], x: np.ndarray, step: np.ndarray) -> float:
    """Largest t in [0, 1] with A (x + t step) <= b."""
    if linear is None or linear.matrix.shape[0] == 0:
        return 1.0
    slack = np.maximum(linear.residual(x), 0.0)
    growth = linear.matrix @ step
    moving = growth > slack + 1e-12
    if not moving.any():
        return 1.0
    return float(min(1.0, (slack[moving] / growth[moving]).min()))


def solve_nlp(nlp: NLP, x0: np.ndarray, options: Optional[SLPOptions] = None) -> OptimizationRecord:
    """
    Trust-region SLP

    :param nlp: Problem description
    :param x0: Initial point, must satisfy the linear rows and bounds
    :param options: Solver options
    :return: OptimizationRecord of the best feasible (or last accepted) iterate
    """
    options = SLPOptions() if options is None else options
    x = np.asarray(x0, dtype=float).copy()
    lower, upper = nlp.bounds()
    if nlp.linear is not None and not nlp.linear.is_satisfied(x, tol=1e-12):
        worst = float(-nlp.linear.residual(x).min())
        raise InfeasibleStartException(f"slp: initial point violates linear rows by {worst:.3e}")
    if np.any(x < lower - 1e-12) or np.any(x > upper + 1e-12):
        raise InfeasibleStartException("slp: initial point violates the bounds")

    start = time.time()
    ev = nlp.evaluate(x)
    initial = ev
    value = merit(ev, options.penalty)
    radius = options.move_limit
    best = (x.copy(), ev) if ev.max_violation <= options.feasibility_tolerance else None

    def row(iteration, step_norm, ratio, accepted):
        return {
            "iteration": iteration,
            "objective": ev.objective,
            "merit": value,
            "max_violation": ev.max_violation,
            "step_norm": step_norm,
            "trust_radius": radius,
            "ratio": ratio,
            "accepted": accepted,
            **ev.report,
        }

    history = [row(0, 0.0, np.nan, True)]
    status, converged = "max_iter", False
    iteration = 0
    for iteration in range(1, options.max_iter + 1):
        step, predicted = _solve_subproblem(nlp, x, ev, radius, options.penalty)
        if predicted <= options.tolerance * max(1.0, abs(value)):
            status, converged = "converged", True
            history.append(row(iteration, 0.0, np.nan, False))
            break

        t = _scale_back(nlp.linear, x, step)
        if t <= 0.0:
            radius *= 0.5
            history.append(row(iteration, 0.0, np.nan, False))
            if radius < options.min_move_limit:
                status, converged = "small_radius", True
                break
            continue
        step = t * step
        candidate = np.clip(x + step, lower, upper)
        step_norm = float(np.abs(candidate - x).max())
        try:
            trial = nlp.evaluate(candidate)
            ratio = (value - merit(trial, options.penalty)) / (t * predicted)
        except (MeshException, SolverException) as e:
            logger.warning(f"Iteration {iteration}: trial point rejected ({e})")
            trial, ratio = None, -np.inf

        accepted = ratio >= options.accept_ratio
        if accepted:
            x, ev = candidate, trial
            value = merit(ev, options.penalty)
            if ev.max_violation <= options.feasibility_tolerance:
                best = (x.copy(), ev)
            if nlp.on_accept is not None:
                nlp.on_accept(iteration, x, ev)
        if ratio >= options.expand_ratio and step_norm >= 0.99 * radius:
            radius = min(2.0 * radius, options.max_move_limit)
        elif ratio < options.shrink_ratio:
            radius *= 0.5
        history.append(row(iteration, step_norm, ratio, accepted))
        logger.info(
            f"Iteration {iteration}: objective {ev.objective:.8g}, merit {value:.8g}, "
            f"violation {ev.max_violation:.2e}, ratio {ratio:.3f}, radius {radius:.3e}"
        )
        if radius < options.min_move_limit:
            status, converged = "small_radius", True
            break

    if status == "max_iter":
        logger.warning(f"SLP stopped at the iteration limit {options.max_iter}")
        if best is not None:
            x, ev = best
    logger.info(
        f"SLP {status} after {iteration} iterations, objective {ev.objective:.8g} "
        f"(initial {initial.objective:.8g}), {time.time() - start:.1f}s"
    )
    return OptimizationRecord(
        x=x,
        evaluation=ev,
        history=pd.DataFrame(history),
        converged=converged,
        status=status,
        iterations=iteration,
        initial=initial,
    )


def write_history(record: OptimizationRecord, path: str) -> None:
    record.history.to_csv(path, index=False, float_format="%.12e")
