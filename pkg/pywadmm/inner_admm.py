"""
The zeta-update: the barycentric proximal solved through its dual by a distributed
ADMM whose u-updates are Newton solves.

Each worker i owns the dual summand f_i(u) = <mu_i, log(Gamma exp(u / eps))> and the
workers' duals are coupled by sum_i u_i = (2 / alpha) nu_sum.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import Executor
from typing import Callable, Iterable, TypeVar

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from pywadmm.schema import (
    BarycentricInputs,
    ConvergenceError,
    GibbsKernel,
    InnerDualState,
    LineSearchError,
    NewtonParams,
    NewtonResult,
    ProbabilityVector,
    WassersteinADMMError,
    WorkerError,
)

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')

MAX_BACKTRACKS = 60


class TauBoundWarning(UserWarning):
    """
    Warning issued when tau is below the sufficient bound for inner ADMM convergence.
    """

    pass


def map_workers(
    fn: Callable[[T], R], items: Iterable[T], executor: Executor | None = None
) -> list[R]:
    """
    Applies fn to every worker's item, concurrently when an executor is given.
    Results keep the worker order; failures are re-raised as WorkerError.
    """

    def run(indexed: tuple[int, T]) -> R:
        index, item = indexed
        try:
            return fn(item)
        except WorkerError:
            raise
        except (WassersteinADMMError, ValueError, FloatingPointError) as e:
            raise WorkerError(index, e) from e

    indexed_items = list(enumerate(items))
    if executor is None:
        return [run(x) for x in indexed_items]
    return list(executor.map(run, indexed_items))


def ordered_sum(vectors: list[np.ndarray]) -> np.ndarray:
    """Elementwise sum folded left in index order."""
    total = np.zeros_like(vectors[0])
    for v in vectors:
        total = total + v
    return total


######################
# Dual summand
######################


def dual_objective_f(u: np.ndarray, mu: ProbabilityVector, kernel: GibbsKernel) -> float:
    return float(mu.values @ kernel.log_apply(u / kernel.epsilon))


def transition_matrix(u: np.ndarray, kernel: GibbsKernel) -> np.ndarray:
    """
    Row-stochastic P = diag(1 / Gamma e) Gamma diag(e) with e = exp(u / eps).
    """
    log_e = u / kernel.epsilon
    log_p = kernel.log_gamma + log_e[None, :] - kernel.log_apply(log_e)[:, None]
    return np.exp(log_p)


def recover_zeta(u: np.ndarray, mu: ProbabilityVector, kernel: GibbsKernel) -> np.ndarray:
    """
    Primal measure of a dual iterate: e * Gamma(mu / Gamma e) = P^T mu.
    """
    log_e = u / kernel.epsilon
    log_ratio = np.log(mu.values) - kernel.log_apply(log_e)
    return np.exp(log_e + kernel.log_apply(log_ratio))


def grad_f(u: np.ndarray, mu: ProbabilityVector, kernel: GibbsKernel) -> np.ndarray:
    """
    Gradient (1 / eps) e * Gamma(mu / Gamma e); its components sum to 1 / eps.
    """
    return recover_zeta(u, mu, kernel) / kernel.epsilon


def hess_f(u: np.ndarray, mu: ProbabilityVector, kernel: GibbsKernel) -> np.ndarray:
    """
    Hessian (1 / eps^2) [diag(P^T mu) - P^T diag(mu) P]. It is positive semidefinite
    and annihilates the ones vector.
    """
    p = transition_matrix(u, kernel)
    # q.T @ q is a symmetric rank-k product
    q = np.sqrt(mu.values)[:, None] * p
    h = np.diag(p.T @ mu.values) - q.T @ q
    return (h + h.T) / (2.0 * kernel.epsilon**2)


######################
# Proximal sub-solvers
######################


def _prox_objective(
    u: np.ndarray, v: np.ndarray, mu: ProbabilityVector, kernel: GibbsKernel, tau: float
) -> float:
    d = u - v
    return 0.5 * tau * float(d @ d) + dual_objective_f(u, mu, kernel)


def _backtrack(
    objective: Callable[[np.ndarray], float],
    u: np.ndarray,
    value: float,
    step: np.ndarray,
    slope: float,
    params: NewtonParams,
) -> float | None:
    t = 1.0
    for _ in range(MAX_BACKTRACKS):
        if objective(u + t * step) <= value + params.backtrack_alpha * t * slope:
            return t
        t *= params.backtrack_beta
    return None


def _factorize(hessian: np.ndarray):
    try:
        return cho_factor(hessian)
    except LinAlgError:
        shift = 1e-10 * np.trace(hessian) / hessian.shape[0]
        logger.debug('Cholesky failed, regularizing the Newton system by %.2e', shift)
        return cho_factor(hessian + shift * np.eye(hessian.shape[0]))


def newton_prox(
    v: np.ndarray,
    mu: ProbabilityVector,
    kernel: GibbsKernel,
    tau: float,
    params: NewtonParams = NewtonParams(),
    u0: np.ndarray | None = None,
) -> NewtonResult:
    """
    Minimizes (tau / 2) |u - v|^2 + f(u) by Newton's method with backtracking.

    Stops when half the squared Newton decrement is at most params.tol.

    Args:
        v (np.ndarray): Proximal argument.
        mu (ProbabilityVector): The measure defining f.
        kernel (GibbsKernel): Gibbs kernel.
        tau (float): Proximal weight, positive.
        params (NewtonParams): Tolerance, iteration budget and line-search constants.
        u0 (np.ndarray | None): Starting point, v if omitted.

    Returns:
        NewtonResult: Minimizer, Newton steps taken, final half squared decrement and
            objective value.

    Raises:
        ConvergenceError: If the iteration budget is exhausted.
        LineSearchError: If backtracking finds no sufficient decrease.
    """
    if tau <= 0:
        raise ValueError(f'tau must be positive, got {tau}')

    def objective(x: np.ndarray) -> float:
        return _prox_objective(x, v, mu, kernel, tau)

    u = np.array(v if u0 is None else u0, dtype=float)
    eye = np.eye(u.shape[0])
    decrement = np.inf
    for iteration in range(params.max_newton + 1):
        value = objective(u)
        gradient = tau * (u - v) + grad_f(u, mu, kernel)
        factor = _factorize(tau * eye + hess_f(u, mu, kernel))
        step = -cho_solve(factor, gradient)
        decrement = 0.5 * float(-gradient @ step)
        if decrement <= params.tol:
            return NewtonResult(u=u, iterations=iteration, residual=decrement, objective=value)
        if iteration == params.max_newton:
            break
        t = _backtrack(objective, u, value, step, float(gradient @ step), params)
        if t is None:
            if decrement <= math.sqrt(np.finfo(float).eps) * max(1.0, abs(value)):
                # the decrease is below the resolution of the objective
                return NewtonResult(u=u, iterations=iteration, residual=decrement, objective=value)
            raise LineSearchError(f'Newton line search failed at decrement {decrement:.3e}')
        u = u + t * step
    raise ConvergenceError('Newton proximal solve did not converge', decrement, params.max_newton)


def prox_f_newton(
    v: np.ndarray,
    mu: ProbabilityVector,
    kernel: GibbsKernel,
    tau: float,
    newton_tol: float = 1e-4,
    max_newton: int = 50,
) -> np.ndarray:
    params = NewtonParams(tol=newton_tol, max_newton=max_newton)
    return newton_prox(v, mu, kernel, tau, params).u


def prox_f_gradient_descent(
    v: np.ndarray,
    mu: ProbabilityVector,
    kernel: GibbsKernel,
    tau: float,
    grad_tol: float = 1e-4,
    max_iters: int = 2000,
    params: NewtonParams = NewtonParams(),
    u0: np.ndarray | None = None,
) -> NewtonResult:
    """
    Backtracking gradient descent on the same proximal objective; stops when the
    gradient norm is at most grad_tol or after max_iters steps.
    """

    def objective(x: np.ndarray) -> float:
        return _prox_objective(x, v, mu, kernel, tau)

    u = np.array(v if u0 is None else u0, dtype=float)
    norm = np.inf
    for iteration in range(max_iters + 1):
        value = objective(u)
        gradient = tau * (u - v) + grad_f(u, mu, kernel)
        norm = float(np.linalg.norm(gradient))
        if norm <= grad_tol or iteration == max_iters:
            break
        t = _backtrack(objective, u, value, -gradient, -norm**2, params)
        if t is None:
            break
        u = u - t * gradient
    return NewtonResult(u=u, iterations=iteration, residual=norm, objective=objective(u))


######################
# Consensus ADMM
######################


def project_consensus(vs: list[np.ndarray], target: np.ndarray) -> list[np.ndarray]:
    """
    Euclidean projection onto {(x_1, ..., x_n): sum_i x_i = target}: v_i - mean(v) + target / n.
    """
    n = len(vs)
    shift = target / n - ordered_sum(vs) / n
    return [v + shift for v in vs]


def _parallel_z_update(
    us: list[np.ndarray], nutildes: list[np.ndarray], target: np.ndarray
) -> list[np.ndarray]:
    # each worker needs only the broadcast means of u and nu-tilde
    n = len(us)
    u_mean = ordered_sum(us) / n
    nutilde_mean = ordered_sum(nutildes) / n
    return [u + w - u_mean - nutilde_mean + target / n for u, w in zip(us, nutildes)]


def cold_start(inputs: BarycentricInputs, tau: float) -> InnerDualState:
    n = len(inputs.mus)
    zeros = [np.zeros(inputs.kernel.size) for _ in range(n)]
    return InnerDualState(
        us=zeros,
        zs=project_consensus(zeros, inputs.target),
        nutildes=zeros,
        tau=tau,
        target=inputs.target,
    )


def warm_start(state: InnerDualState, inputs: BarycentricInputs, tau: float) -> InnerDualState:
    """Carries (u, nu-tilde) over and re-projects z onto the current target."""
    return InnerDualState(
        us=state.us,
        zs=project_consensus(list(state.zs), inputs.target),
        nutildes=state.nutildes,
        tau=tau,
        target=inputs.target,
        ell=0,
    )


def inner_step(
    state: InnerDualState,
    inputs: BarycentricInputs,
    newton: NewtonParams = NewtonParams(),
    executor: Executor | None = None,
) -> InnerDualState:
    """
    One barrier round: Newton u-updates per worker, the consensus z-update from the
    broadcast means, then the scaled dual ascent.
    """
    kernel = inputs.kernel

    def u_update(i: int) -> np.ndarray:
        v = state.zs[i] - state.nutildes[i]
        return newton_prox(v, inputs.mus[i], kernel, state.tau, newton, u0=state.us[i]).u

    us = map_workers(u_update, range(state.n), executor)
    zs = _parallel_z_update(us, list(state.nutildes), state.target)
    nutildes = [w + u - z for w, u, z in zip(state.nutildes, us, zs)]
    return InnerDualState(
        us=us, zs=zs, nutildes=nutildes, tau=state.tau, target=state.target, ell=state.ell + 1
    )


def tau_lower_bound(inputs: BarycentricInputs) -> float:
    """
    Sufficient penalty for inner ADMM convergence: (sqrt 2 / eps^2) max_i |Gamma mu_i|_inf.
    """
    kernel = inputs.kernel
    peak = max(float(np.max(kernel.apply(mu.values))) for mu in inputs.mus)
    return math.sqrt(2.0) / kernel.epsilon**2 * peak


def check_tau(inputs: BarycentricInputs, tau: float) -> bool:
    """Warns when tau is below the sufficient bound; returns whether it is."""
    bound = tau_lower_bound(inputs)
    if tau < bound:
        message = f'tau = {tau:g} is below the inner ADMM bound {bound:.4g}'
        logger.warning(message)
        warnings.warn(message, TauBoundWarning, stacklevel=2)
        return False
    return True


def run_inner(
    inputs: BarycentricInputs,
    warm: InnerDualState | None = None,
    iters: int = 3,
    tau: float = 150.0,
    newton: NewtonParams = NewtonParams(),
    executor: Executor | None = None,
) -> tuple[ProbabilityVector, InnerDualState, float]:
    """
    Runs iters inner ADMM rounds and recovers zeta.

    Each worker's final u yields a candidate e * Gamma(mu / Gamma e); the candidates are
    renormalized and averaged in index order.

    Args:
        inputs (BarycentricInputs): Measures, kernel, multiplier sum and alpha.
        warm (InnerDualState | None): State of the previous call, cold start if omitted.
        iters (int): Number of inner rounds, at least 1.
        tau (float): Inner ADMM penalty.
        newton (NewtonParams): Newton sub-solver settings.
        executor (Executor | None): Worker pool.

    Returns:
        tuple[ProbabilityVector, InnerDualState, float]: zeta, the final state and the
            largest L-infinity distance between two workers' candidates.
    """
    if iters < 1:
        raise ValueError(f'inner iterations must be at least 1, got {iters}')
    state = cold_start(inputs, tau) if warm is None else warm_start(warm, inputs, tau)
    for _ in range(iters):
        state = inner_step(state, inputs, newton, executor)

    candidates = map_workers(
        lambda i: ProbabilityVector.from_unnormalized(
            recover_zeta(state.us[i], inputs.mus[i], inputs.kernel)
        ).values,
        range(state.n),
        executor,
    )
    deviation = max(
        (float(np.max(np.abs(a - b))) for a in candidates for b in candidates), default=0.0
    )
    zeta = ProbabilityVector.from_unnormalized(ordered_sum(candidates) / len(candidates))
    logger.debug('Inner ADMM: %s rounds, candidate deviation %.3e', iters, deviation)
    return zeta, state, deviation
