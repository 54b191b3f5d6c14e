"""Entropic optimal transport between samples and classes.

The E-step searches for a pseudo-label matrix ``A`` that stays close to the
classifier predictions ``P`` (cost ``M = -log P``) while its rows carry the
sample masses ``w`` and its columns the class prior ``r``.  The entropic
solution has the form ``A = diag(alpha) K diag(beta)`` with ``K = P ** lam``,
which is the same kernel as ``exp(-M * lam)``; ``lam`` therefore plays the
role of an inverse regularization strength.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionMismatch, NonFiniteScaling

EPS_FLOOR = 1e-12
# switch to log-domain updates past these sizes; P**lam underflows otherwise
LOG_DOMAIN_LAMBDA = 100.0
LOG_DOMAIN_ROWS = 4096


@dataclass
class TransportProblem:
    """One E-step transport instance.

    Attributes:
        predictions: (m, C) nonnegative classifier outputs.  Rows are expected
            to be probability vectors, but any positive row scaling yields
            the same plan, so this is not enforced.
        row_marginal: (m,) sample masses ``w``, summing to one.
        col_marginal: (C,) class prior ``r``, summing to one.
        smoothing: exponent ``lam`` of the kernel ``K = P ** lam``.
        max_iters: iteration budget ``T``.
        tolerance: stop once both L1 marginal residuals fall below this.
    """

    predictions: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    smoothing: float = 1.0
    max_iters: int = 100
    tolerance: float = 1e-6

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.float64)
        self.row_marginal = np.asarray(self.row_marginal, dtype=np.float64)
        self.col_marginal = np.asarray(self.col_marginal, dtype=np.float64)
        if self.predictions.ndim != 2:
            raise DimensionMismatch(
                f"predictions must be 2-D, got shape {self.predictions.shape}")
        m, c = self.predictions.shape
        if self.row_marginal.shape != (m,):
            raise DimensionMismatch(
                f"row_marginal has shape {self.row_marginal.shape}, expected ({m},)")
        if self.col_marginal.shape != (c,):
            raise DimensionMismatch(
                f"col_marginal has shape {self.col_marginal.shape}, expected ({c},)")
        if not np.all(np.isfinite(self.predictions)) or np.any(self.predictions < 0):
            raise ValueError("predictions must be finite and nonnegative")
        if np.any(self.row_marginal <= 0) or abs(self.row_marginal.sum() - 1) > 1e-9:
            raise ValueError("row_marginal must be positive and sum to 1")
        if np.any(self.col_marginal < 0) or abs(self.col_marginal.sum() - 1) > 1e-9:
            raise ValueError("col_marginal must be nonnegative and sum to 1")
        if not self.smoothing > 0:
            raise ValueError("smoothing must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.predictions.shape

    def clamped(self) -> np.ndarray:
        return np.maximum(self.predictions, EPS_FLOOR)

    def uses_log_domain(self) -> bool:
        return self.smoothing >= LOG_DOMAIN_LAMBDA or self.shape[0] >= LOG_DOMAIN_ROWS


@dataclass
class TransportPlan:
    """Solution of a :class:`TransportProblem`.

    ``plan`` equals ``diag(alpha) @ K @ diag(beta)``.  In the log-domain
    regime ``alpha``/``beta`` may overflow, so their logarithms are kept too.
    """

    plan: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    iterations_used: int
    row_residual: float
    col_residual: float
    log_alpha: np.ndarray = field(repr=False, default=None)
    log_beta: np.ndarray = field(repr=False, default=None)

    @property
    def converged_within(self) -> float:
        return max(self.row_residual, self.col_residual)

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.tolist(),
            "alpha": _finite_or_none(self.alpha),
            "beta": _finite_or_none(self.beta),
            "log_alpha": _finite_or_none(self.log_alpha),
            "log_beta": _finite_or_none(self.log_beta),
            "iterations_used": int(self.iterations_used),
            "row_residual": float(self.row_residual),
            "col_residual": float(self.col_residual),
        }


def _finite_or_none(a):
    # JSON has no infinities; overflowed scalings are kept in the log fields
    return None if a is None else [float(x) if np.isfinite(x) else None for x in a]


def kernel(problem: TransportProblem) -> np.ndarray:
    """Return ``K = clamp(P) ** lam``."""
    return problem.clamped() ** problem.smoothing


def _residuals(plan, w, r):
    return (float(np.abs(plan.sum(axis=1) - w).sum()),
            float(np.abs(plan.sum(axis=0) - r).sum()))


def _solve_linear(problem, trace):
    K = kernel(problem)
    w, r = problem.row_marginal, problem.col_marginal
    beta = np.ones(K.shape[1])
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for it in range(1, problem.max_iters + 1):
            alpha = w / (K @ beta)
            beta = r / (K.T @ alpha)
            if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
                raise NonFiniteScaling(
                    f"scaling vector became non-finite at iteration {it}; "
                    "a kernel row or column underflowed")
            plan = alpha[:, None] * K * beta[None, :]
            row_res, col_res = _residuals(plan, w, r)
            if trace is not None:
                trace.append(max(row_res, col_res))
            if max(row_res, col_res) <= problem.tolerance:
                break
    with np.errstate(divide="ignore"):
        log_alpha, log_beta = np.log(alpha), np.log(beta)
    return TransportPlan(plan, alpha, beta, it, row_res, col_res, log_alpha, log_beta)


def _solve_log(problem, trace):
    log_k = problem.smoothing * np.log(problem.clamped())
    with np.errstate(divide="ignore"):
        log_w = np.log(problem.row_marginal)
        log_r = np.log(problem.col_marginal)
    w, r = problem.row_marginal, problem.col_marginal
    g = np.zeros(log_k.shape[1])
    for it in range(1, problem.max_iters + 1):
        f = log_w - logsumexp(log_k + g[None, :], axis=1)
        g = log_r - logsumexp(log_k + f[:, None], axis=0)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g) | np.isneginf(g))):
            raise NonFiniteScaling(f"log-scaling became non-finite at iteration {it}")
        plan = np.exp(f[:, None] + log_k + g[None, :])
        row_res, col_res = _residuals(plan, w, r)
        if trace is not None:
            trace.append(max(row_res, col_res))
        if max(row_res, col_res) <= problem.tolerance:
            break
    with np.errstate(over="ignore"):
        alpha, beta = np.exp(f), np.exp(g)
    return TransportPlan(plan, alpha, beta, it, row_res, col_res, f, g)


def sinkhorn_plan(problem: TransportProblem, trace: list | None = None) -> TransportPlan:
    """Solve the entropic transport problem by alternating scaling.

    Starting from ``beta = 1``, iterates ``alpha <- w / (K beta)`` then
    ``beta <- r / (K^T alpha)`` until the larger of the two L1 marginal
    residuals is at most ``problem.tolerance`` or ``max_iters`` is spent.
    Large ``smoothing`` or many rows switch to log-domain updates.

    If ``trace`` is a list, the per-iteration max residual is appended to it.

    Raises:
        NonFiniteScaling: a scaling entry overflowed or became NaN.
    """
    if problem.uses_log_domain():
        return _solve_log(problem, trace)
    return _solve_linear(problem, trace)


def marginal_residual(plan: TransportPlan | np.ndarray,
                      problem: TransportProblem) -> tuple[float, float]:
    """L1 violation of the row and column marginals."""
    a = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    if a.shape != problem.shape:
        raise DimensionMismatch(f"plan shape {a.shape} != problem shape {problem.shape}")
    return _residuals(a, problem.row_marginal, problem.col_marginal)


def dual_sinkhorn_divergence(problem: TransportProblem, plan: TransportPlan) -> float:
    """Transport cost ``<A, -log P>`` at the entropic plan."""
    cost = -np.log(problem.clamped())
    return float(np.sum(plan.plan * cost))


def pseudo_labels(plan: TransportPlan | np.ndarray) -> np.ndarray:
    """Hard labels as the row-wise argmax; ties go to the lowest class index."""
    a = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan)
    return np.argmax(a, axis=1)
