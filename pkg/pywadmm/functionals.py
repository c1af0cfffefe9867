"""
Free-energy functionals and their Sinkhorn-regularized Wasserstein proximal operators.

Every proximal operator minimizes

    <C/2 + eps log M, M> + (1/alpha) G(M 1)   over plans M >= 0 with M^T 1 = zeta,

and returns the row marginal mu = M 1. The minimizing plan factors as
M = diag(z) Gamma diag(y), so mu = z * (Gamma y) and y = zeta / (Gamma z). All
recursions run on log y and log z.
"""

from __future__ import annotations

import itertools
import logging
from typing import Callable

import numpy as np
from scipy.special import wrightomega, xlogy

from pywadmm.schema import (
    INTERNAL_ENERGY,
    DualFactors,
    FreeEnergyFunctional,
    GibbsKernel,
    PositiveConeError,
    ProbabilityVector,
    ProxDiagnostics,
    ProxParams,
    SampleSet,
)

logger = logging.getLogger(__name__)

STENCIL_POINTS = 5


def effective_drift(
    f: FreeEnergyFunctional, nu: np.ndarray, mu_prev: ProbabilityVector
) -> np.ndarray:
    """
    Linear coefficient of the proximal objective: drift + U mu_prev + nu.
    The interaction is linearized at the worker's own previous iterate.
    """
    if nu.shape != f.drift.shape or mu_prev.size != f.size:
        raise ValueError('drift, multiplier and previous iterate sizes differ')
    a = f.drift + nu
    if f.interaction is not None:
        a = a + f.interaction @ mu_prev.values
    return a


def prox_linear(
    a: np.ndarray, zeta: ProbabilityVector, kernel: GibbsKernel, alpha: float
) -> ProbabilityVector:
    """
    Closed-form proximal of the linear functional <a, mu>:
    mu = z * Gamma(zeta / (Gamma z)) with z = exp(-a / alpha eps).

    Raises:
        KernelRangeError: If Gamma z underflows in direct mode.
    """
    log_z = -np.asarray(a, dtype=float) / (alpha * kernel.epsilon)
    log_z = log_z - log_z.max()
    log_y = np.log(zeta.values) - kernel.log_apply(log_z)
    return ProbabilityVector.from_unnormalized(np.exp(log_z + kernel.log_apply(log_y)))


def linear_duals(
    a: np.ndarray, zeta: ProbabilityVector, kernel: GibbsKernel, alpha: float
) -> DualFactors:
    log_z = -np.asarray(a, dtype=float) / (alpha * kernel.epsilon)
    log_y = np.log(zeta.values) - kernel.log_apply(log_z)
    return DualFactors(log_y=log_y, log_z=log_z)


def _log_entropy_z_update(
    log_gamma_y: np.ndarray, a: np.ndarray, beta: float, alpha_eps: float
) -> np.ndarray:
    # stationarity: -alpha eps log z = a + (log(z * Gamma y) + 1) / beta
    r = 1.0 / (1.0 + beta * alpha_eps)
    return -r * (beta * a + 1.0) - r * log_gamma_y


def _power_law_z_update(
    log_gamma_y: np.ndarray, a: np.ndarray, beta: float, alpha_eps: float
) -> np.ndarray:
    # stationarity: -alpha eps log z = a + 2 z (Gamma y) / beta, solved per coordinate
    # with w = 2 z (Gamma y) / (beta alpha eps), which satisfies w + log w = x
    log_c = np.log(2.0 / (beta * alpha_eps)) + log_gamma_y
    x = log_c - a / alpha_eps
    omega = np.real(wrightomega(x))
    bad = np.flatnonzero(~np.isfinite(omega) | (omega < 0))
    if bad.size:
        raise PositiveConeError('power-law fixed point left the positive cone', bad.tolist())
    return (x - omega) - log_c


def _fixed_point(
    z_update: Callable[[np.ndarray], np.ndarray],
    zeta: ProbabilityVector,
    kernel: GibbsKernel,
    params: ProxParams,
    name: str,
) -> tuple[DualFactors, np.ndarray, ProxDiagnostics]:
    """
    Block-coordinate recursion y <- zeta / (Gamma z), z <- z_update(log Gamma y),
    started from z = 1. Stops when the max relative change of z is at most delta or
    after max_sweeps sweeps, returning the last iterate in either case.

    Returns:
        tuple: The duals, the unnormalized log mu = log z + log Gamma y for the final
            pair and the sweep diagnostics.
    """
    log_zeta = np.log(zeta.values)
    log_z = np.zeros(kernel.size)
    changes = []
    converged = False
    for _ in range(params.max_sweeps):
        log_y = log_zeta - kernel.log_apply(log_z)
        log_gamma_y = kernel.log_apply(log_y)
        new_log_z = z_update(log_gamma_y)
        change = float(np.max(np.abs(np.expm1(new_log_z - log_z))))
        log_z = new_log_z
        changes.append(change)
        if change <= params.delta:
            converged = True
            break

    diagnostics = ProxDiagnostics(sweeps=len(changes), converged=converged, changes=changes)
    if not converged:
        logger.warning(
            '%s fixed point not converged after %s sweeps (relative change %.2e)',
            name,
            params.max_sweeps,
            changes[-1],
        )
    else:
        logger.debug('%s fixed point converged in %s sweeps', name, len(changes))
    return DualFactors(log_y=log_y, log_z=log_z), log_z + log_gamma_y, diagnostics


def log_entropy_duals(
    beta: float,
    a: np.ndarray,
    zeta: ProbabilityVector,
    kernel: GibbsKernel,
    params: ProxParams,
) -> tuple[DualFactors, ProbabilityVector, ProxDiagnostics]:
    """
    Solves the dual system of the proximal of <a, mu> + (1/beta) <log mu, mu>.

    Returns:
        tuple[DualFactors, ProbabilityVector, ProxDiagnostics]: Duals, proximal output
            and sweep diagnostics.
    """
    alpha_eps = params.alpha * kernel.epsilon

    def z_update(log_gamma_y: np.ndarray) -> np.ndarray:
        return _log_entropy_z_update(log_gamma_y, a, beta, alpha_eps)

    duals, log_mu, diagnostics = _fixed_point(z_update, zeta, kernel, params, 'Log-entropy')
    return duals, ProbabilityVector.from_unnormalized(np.exp(log_mu)), diagnostics


def power_law_duals(
    beta: float,
    a: np.ndarray,
    zeta: ProbabilityVector,
    kernel: GibbsKernel,
    params: ProxParams,
) -> tuple[DualFactors, ProbabilityVector, ProxDiagnostics]:
    """
    Solves the dual system of the proximal of <a, mu> + (1/beta) <mu, mu>.

    Raises:
        PositiveConeError: If the closed-form z-update is not a positive number.
    """
    alpha_eps = params.alpha * kernel.epsilon

    def z_update(log_gamma_y: np.ndarray) -> np.ndarray:
        return _power_law_z_update(log_gamma_y, a, beta, alpha_eps)

    duals, log_mu, diagnostics = _fixed_point(z_update, zeta, kernel, params, 'Power-law')
    return duals, ProbabilityVector.from_unnormalized(np.exp(log_mu)), diagnostics


def prox_log_entropy(
    beta: float,
    a: np.ndarray,
    zeta: ProbabilityVector,
    kernel: GibbsKernel,
    params: ProxParams,
) -> ProbabilityVector:
    return log_entropy_duals(beta, a, zeta, kernel, params)[1]


def prox_power_law(
    beta: float,
    a: np.ndarray,
    zeta: ProbabilityVector,
    kernel: GibbsKernel,
    params: ProxParams,
) -> ProbabilityVector:
    return power_law_duals(beta, a, zeta, kernel, params)[1]


def prox(
    f: FreeEnergyFunctional,
    nu: np.ndarray,
    mu_prev: ProbabilityVector,
    zeta: ProbabilityVector,
    kernel: GibbsKernel,
    params: ProxParams,
) -> ProbabilityVector:
    """
    Proximal update of G(mu) = F(mu) + <nu, mu> anchored at zeta.

    Dispatches on the internal energy of F; the drift, interaction and multiplier
    always enter through effective_drift.

    Args:
        f (FreeEnergyFunctional): The summand F.
        nu (np.ndarray): The worker's multiplier.
        mu_prev (ProbabilityVector): The worker's previous iterate.
        zeta (ProbabilityVector): The consensus iterate, strictly positive.
        kernel (GibbsKernel): Gibbs kernel.
        params (ProxParams): alpha and the fixed-point controls.

    Returns:
        ProbabilityVector: The updated measure.
    """
    a = effective_drift(f, nu, mu_prev)
    if f.internal is None:
        return prox_linear(a, zeta, kernel, params.alpha)
    if f.internal.kind == INTERNAL_ENERGY.LOG_ENTROPY:
        return prox_log_entropy(f.internal.beta, a, zeta, kernel, params)
    return prox_power_law(f.internal.beta, a, zeta, kernel, params)


def free_energy(f: FreeEnergyFunctional, mu: ProbabilityVector) -> float:
    """
    Evaluates F at mu, with the interaction energy <U mu, mu> taken at mu itself.
    """
    value = float(f.drift @ mu.values)
    if f.interaction is not None:
        value += float(mu.values @ f.interaction @ mu.values)
    if f.internal is not None:
        if f.internal.kind == INTERNAL_ENERGY.LOG_ENTROPY:
            value += float(np.sum(xlogy(mu.values, mu.values))) / f.internal.beta
        else:
            value += float(mu.values @ mu.values) / f.internal.beta
    return value


def internal_energy_gradient(f: FreeEnergyFunctional, mu: np.ndarray) -> np.ndarray:
    """Gradient of the internal energy of F at mu (zero without one)."""
    if f.internal is None:
        return np.zeros_like(mu)
    if f.internal.kind == INTERNAL_ENERGY.LOG_ENTROPY:
        return (np.log(mu) + 1.0) / f.internal.beta
    return 2.0 * mu / f.internal.beta


######################
# Potentials
######################


def _stencil_average(func: Callable, center: np.ndarray, h: float) -> float:
    offsets = np.array(
        list(itertools.product(np.linspace(-h, h, STENCIL_POINTS), repeat=center.shape[0]))
    )
    offsets = offsets[np.any(offsets != 0, axis=1)]
    with np.errstate(divide='ignore', invalid='ignore'):
        values = func(center[None, :] + offsets)
    return float(np.mean(values))


def _evaluate_regularized(func: Callable, points: np.ndarray, h: float) -> np.ndarray:
    with np.errstate(divide='ignore', invalid='ignore'):
        values = np.asarray(func(points), dtype=float).copy()
    singular = np.flatnonzero(~np.isfinite(values))
    if singular.size:
        # singular values depend only on the evaluation point
        cache: dict[bytes, float] = {}
        for index in singular:
            key = points[index].tobytes()
            if key not in cache:
                cache[key] = _stencil_average(func, points[index], h)
            values[index] = cache[key]
        logger.debug('Replaced %s singular potential values by cell averages', singular.size)
    return values


def discretize_potentials(
    V: Callable[[np.ndarray], np.ndarray] | None,
    U: Callable[[np.ndarray], np.ndarray] | None,
    samples: SampleSet,
    h: float,
) -> tuple[np.ndarray, np.ndarray | None]:
    """
    Evaluates a drift potential V(theta_j) and an interaction kernel U(theta_i - theta_j)
    on the samples.

    Both callables are vectorized over an (M, d) array of points. Non-finite values are
    replaced by the mean of the potential over a 5-point-per-axis stencil of the cell of
    width 2h centered at the singular point, the center itself excluded.

    Args:
        V: Drift potential, or None for a zero drift.
        U: Interaction potential, or None for no interaction.
        samples (SampleSet): The sample set.
        h (float): Half width of the averaging cell.

    Returns:
        tuple[np.ndarray, np.ndarray | None]: Drift vector and interaction matrix.
    """
    if h <= 0:
        raise ValueError(f'cell half width must be positive, got {h}')
    points = samples.points
    n = samples.size
    drift = np.zeros(n) if V is None else _evaluate_regularized(V, points, h)

    interaction = None
    if U is not None:
        differences = (points[:, None, :] - points[None, :, :]).reshape(n * n, samples.dim)
        interaction = _evaluate_regularized(U, differences, h).reshape(n, n)
        # difference vectors are exactly antisymmetric, so only rounding can break symmetry
        interaction = 0.5 * (interaction + interaction.T)
    return drift, interaction
