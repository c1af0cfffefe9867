"""
Entropic and exact optimal-transport primitives shared by both ADMM layers.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.special import xlogy

from pywadmm.schema import (
    ConvergenceError,
    CostMatrix,
    GibbsKernel,
    ProbabilityVector,
    TransportPlan,
    WassersteinADMMError,
)

logger = logging.getLogger(__name__)


def _plan_from_scalings(kernel: GibbsKernel, log_y: np.ndarray, log_z: np.ndarray) -> np.ndarray:
    return np.exp(log_y[:, None] + kernel.log_gamma + log_z[None, :])


def plan_objective(plan: np.ndarray, kernel: GibbsKernel) -> float:
    """
    Evaluates <C/2 + eps log M, M> with the convention 0 log 0 = 0.

    The cost is recovered from the kernel as C/2 = -eps log Gamma, so entries outside
    the kernel support must carry no mass.
    """
    eps = kernel.epsilon
    support = plan > 0
    transport = -eps * np.sum(plan[support] * kernel.log_gamma[support])
    return float(transport + eps * np.sum(xlogy(plan, plan)))


def sinkhorn_divergence(
    mu: ProbabilityVector,
    zeta: ProbabilityVector,
    kernel: GibbsKernel,
    max_sweeps: int = 10000,
    tol: float = 1e-9,
) -> tuple[float, TransportPlan]:
    """
    Entropic transport between mu (rows) and zeta (columns) by log-domain Sinkhorn
    scaling. Each sweep updates the row scaling first, then the column scaling.

    Args:
        mu (ProbabilityVector): Row marginal, strictly positive.
        zeta (ProbabilityVector): Column marginal, strictly positive.
        kernel (GibbsKernel): Gibbs kernel of the squared distances.
        max_sweeps (int): Sweep budget.
        tol (float): L1 tolerance on the row marginal.

    Returns:
        tuple[float, TransportPlan]: The objective <C/2 + eps log M, M> and the plan.

    Raises:
        ConvergenceError: If the row marginal error exceeds tol after max_sweeps.
    """
    if np.any(mu.values <= 0) or np.any(zeta.values <= 0):
        raise ValueError('Sinkhorn marginals must be strictly positive')
    log_mu = np.log(mu.values)
    log_zeta = np.log(zeta.values)

    log_z = np.zeros(kernel.size)
    error = np.inf
    for sweep in range(1, max_sweeps + 1):
        log_y = log_mu - kernel.log_apply(log_z)
        log_z = log_zeta - kernel.log_apply(log_y)
        # columns are exact after the z-update; rows carry the residual
        error = float(np.sum(np.abs(np.exp(log_y + kernel.log_apply(log_z)) - mu.values)))
        if error <= tol:
            break
    else:
        raise ConvergenceError('Sinkhorn scaling did not converge', error, max_sweeps)

    logger.debug('Sinkhorn converged in %s sweeps (row error %.2e)', sweep, error)
    plan = _plan_from_scalings(kernel, log_y, log_z)
    return plan_objective(plan, kernel), TransportPlan(
        matrix=plan, row_marginal=mu, col_marginal=zeta, tolerance=max(tol, 1e-8)
    )


def exact_wasserstein(
    mu: ProbabilityVector, zeta: ProbabilityVector, cost: CostMatrix
) -> float:
    """
    Optimal value of the Kantorovich linear program min <C, M> over plans with
    marginals mu and zeta, solved with HiGHS on the marginal supports.

    Args:
        mu (ProbabilityVector): First marginal.
        zeta (ProbabilityVector): Second marginal.
        cost (CostMatrix): Ground cost.

    Returns:
        float: The optimal transport cost.

    Raises:
        WassersteinADMMError: If the solver does not report an optimal solution.
    """
    rows = np.flatnonzero(mu.values > 0)
    cols = np.flatnonzero(zeta.values > 0)
    a = mu.values[rows] / mu.values[rows].sum()
    b = zeta.values[cols] / zeta.values[cols].sum()
    m, n = len(rows), len(cols)
    if m == 1 or n == 1:
        # a single source or target admits only the product plan
        return float(np.sum(np.outer(a, b) * cost.entries[np.ix_(rows, cols)]))

    c = cost.entries[np.ix_(rows, cols)].ravel()
    a_eq = sp.vstack(
        [
            sp.kron(sp.eye(m), np.ones((1, n))),
            sp.kron(np.ones((1, m)), sp.eye(n)),
        ],
        format='csr',
    )
    b_eq = np.concatenate([a, b])
    result = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method='highs')
    if result.status != 0:
        raise WassersteinADMMError(f'Kantorovich LP failed: {result.message}')
    return float(result.fun)


def sinkhorn_barycenter(
    mus: list[ProbabilityVector],
    kernel: GibbsKernel,
    max_sweeps: int = 100000,
    tol: float = 1e-13,
) -> ProbabilityVector:
    """
    Equal-weight entropic barycenter argmin_zeta sum_i <C/2 + eps log M_i, M_i> by
    iterative Bregman projections in the log domain.

    Args:
        mus (list[ProbabilityVector]): Strictly positive input measures.
        kernel (GibbsKernel): Gibbs kernel of the squared distances.
        max_sweeps (int): Sweep budget.
        tol (float): L1 tolerance on the input marginals.

    Returns:
        ProbabilityVector: The barycenter.

    Raises:
        ConvergenceError: If the marginal error exceeds tol after max_sweeps.
    """
    log_mus = [np.log(mu.values) for mu in mus]
    log_vs = [np.zeros(kernel.size) for _ in mus]
    error = np.inf
    for sweep in range(1, max_sweeps + 1):
        log_us = [log_mu - kernel.log_apply(lv) for log_mu, lv in zip(log_mus, log_vs)]
        log_kus = [kernel.log_apply(lu) for lu in log_us]
        log_bary = sum(log_kus) / len(log_kus)
        log_vs = [log_bary - lku for lku in log_kus]
        error = max(
            float(np.sum(np.abs(np.exp(lu + kernel.log_apply(lv)) - mu.values)))
            for lu, lv, mu in zip(log_us, log_vs, mus)
        )
        if error <= tol:
            break
    else:
        raise ConvergenceError('Bregman barycenter did not converge', error, max_sweeps)
    logger.debug('Bregman barycenter converged in %s sweeps', sweep)
    return ProbabilityVector.from_unnormalized(np.exp(log_bary))
