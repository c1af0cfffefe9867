"""
Independent oracles for the numerical kernels.

Every check compares a solver component against a reference computed a different
way (brute-force minimization, dense linear algebra, combinatorial enumeration or a
second algorithm) and reports the measured residual against its threshold.
"""

from __future__ import annotations

import itertools
import logging
from typing import Callable

import numpy as np
from scipy.linalg import eigvalsh, pinv
from scipy.optimize import approx_fprime, minimize, root
from scipy.special import logsumexp

from pywadmm.functionals import (
    effective_drift,
    free_energy,
    internal_energy_gradient,
    prox,
    prox_linear,
)
from pywadmm.inner_admm import (
    cold_start,
    dual_objective_f,
    grad_f,
    hess_f,
    newton_prox,
    prox_f_gradient_descent,
    project_consensus,
    run_inner,
    tau_lower_bound,
)
from pywadmm.measures import cost_matrix, gaussian_mixture, gibbs_kernel, make_uniform_grid
from pywadmm.schema import (
    BarycentricInputs,
    CheckResult,
    ConvergenceError,
    FreeEnergyFunctional,
    GibbsKernel,
    InternalEnergy,
    NewtonParams,
    ProbabilityVector,
    ProxParams,
)
from pywadmm.transport import exact_wasserstein, sinkhorn_barycenter, sinkhorn_divergence

logger = logging.getLogger(__name__)

ORACLE_SIZE = 3
ORACLE_EPSILON = 0.2
ORACLE_ALPHA = 1.0
ORACLE_BETA = 1.0
TIGHT_PROX = ProxParams(alpha=ORACLE_ALPHA, delta=1e-13, max_sweeps=10000)


######################
# Reference solvers
######################


def brute_force_prox(
    energy: Callable[[np.ndarray], float],
    energy_grad: Callable[[np.ndarray], np.ndarray],
    zeta: ProbabilityVector,
    kernel: GibbsKernel,
    alpha: float,
    tol: float = 1e-10,
) -> ProbabilityVector:
    """
    Minimizes <C/2 + eps log M, M> + (1/alpha) G(M 1) over plans with column marginal
    zeta directly, without any dual structure.

    Column j of the plan is parametrized as zeta_j softmax(theta_j) with the first logit
    pinned to zero, which keeps the column constraint exact. L-BFGS-B gives a starting
    point from which the optimality conditions

        C_ij / 2 + eps (log M_ij + 1) + grad G(M 1)_i / alpha = psi_j,   sum_i M_ij = zeta_j

    are solved for (log M, psi) with a Powell hybrid root finder.

    Args:
        energy: G, evaluated at the row marginal.
        energy_grad: Gradient of G.
        zeta (ProbabilityVector): Column marginal, strictly positive.
        kernel (GibbsKernel): Kernel with finite entries; C/2 is read off as -eps log Gamma.
        alpha (float): Proximal weight.
        tol (float): Bound on the optimality residual of the returned plan.

    Returns:
        ProbabilityVector: The row marginal of the minimizing plan.

    Raises:
        ConvergenceError: If the optimality conditions are not met to tol.
    """
    n = kernel.size
    eps = kernel.epsilon
    half_cost = -eps * kernel.log_gamma
    log_zeta = np.log(zeta.values)[None, :]

    def unpack(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = np.vstack([np.zeros((1, n)), theta.reshape(n - 1, n)])
        log_s = t - logsumexp(t, axis=0, keepdims=True)
        return np.exp(log_s), log_s + log_zeta

    def stationarity(log_m: np.ndarray) -> np.ndarray:
        mu = np.exp(log_m).sum(axis=1)
        return half_cost + eps * (log_m + 1.0) + energy_grad(mu)[:, None] / alpha

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        s, log_m = unpack(theta)
        m = np.exp(log_m)
        value = np.sum(m * half_cost) + eps * np.sum(m * log_m) + energy(m.sum(axis=1)) / alpha
        d_m = stationarity(log_m)
        d_t = zeta.values[None, :] * (s * d_m - s * np.sum(s * d_m, axis=0, keepdims=True))
        return float(value), d_t[1:].ravel()

    start = (kernel.log_gamma[1:] - kernel.log_gamma[:1]).ravel()
    warm = minimize(
        objective, start, jac=True, method='L-BFGS-B', options={'maxiter': 20000, 'gtol': 1e-10}
    )
    log_m = unpack(warm.x)[1]
    psi = stationarity(log_m).mean(axis=0)

    def kkt(x: np.ndarray) -> np.ndarray:
        log_m, psi = x[: n * n].reshape(n, n), x[n * n :]
        return np.concatenate(
            [
                (stationarity(log_m) - psi[None, :]).ravel(),
                np.exp(log_m).sum(axis=0) - zeta.values,
            ]
        )

    solution = root(kkt, np.concatenate([log_m.ravel(), psi]), method='hybr', tol=1e-15)
    residual = float(np.max(np.abs(kkt(solution.x))))
    if not np.isfinite(residual) or residual > tol:
        raise ConvergenceError(
            f'Plan oracle did not converge: {solution.message}', residual, int(solution.nfev)
        )
    log_m = solution.x[: n * n].reshape(n, n)
    return ProbabilityVector.from_unnormalized(np.exp(log_m).sum(axis=1))


def sinkhorn_dual_value(
    mu: ProbabilityVector, zeta: ProbabilityVector, kernel: GibbsKernel
) -> float:
    """
    Maximizes the entropic dual <phi, mu> + <psi, zeta> - eps sum exp((phi_i + psi_j
    - C_ij / 2) / eps - 1) with BFGS; by strong duality its value equals the primal one.
    """
    n = kernel.size
    eps = kernel.epsilon

    def negative_dual(x: np.ndarray) -> tuple[float, np.ndarray]:
        phi, psi = x[:n], x[n:]
        m = np.exp(kernel.log_gamma + (phi[:, None] + psi[None, :]) / eps - 1.0)
        value = phi @ mu.values + psi @ zeta.values - eps * m.sum()
        grad = np.concatenate([mu.values - m.sum(axis=1), zeta.values - m.sum(axis=0)])
        return -float(value), -grad

    result = minimize(
        negative_dual, np.zeros(2 * n), jac=True, method='BFGS', options={'gtol': 1e-11}
    )
    return -float(result.fun)


def permutation_wasserstein(cost: np.ndarray) -> float:
    """Transport cost between two uniform measures as the best assignment."""
    n = cost.shape[0]
    return min(
        float(np.mean(cost[np.arange(n), list(perm)]))
        for perm in itertools.permutations(range(n))
    )


def monotone_wasserstein(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """
    Squared-distance transport cost on the line, by the north-west-corner rule on
    sorted support points.
    """
    order = np.argsort(x)
    x, a, b = x[order], a[order].copy(), b[order].copy()
    i = j = 0
    total = 0.0
    while i < len(x) and j < len(x):
        mass = min(a[i], b[j])
        total += mass * (x[i] - x[j]) ** 2
        a[i] -= mass
        b[j] -= mass
        if a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return total


######################
# Checks
######################


class OracleCheck:
    """
    Base class of the oracle checks. Subclasses implement measure(), which returns
    the residual and a short description of the instance.
    """

    name = 'oracle'
    threshold = 1e-8
    # number of random instances drawn from the seed
    repeats = 1

    def __init__(self, seed: int = 0, repeats: int | None = None):
        self.seed = seed
        if repeats is not None:
            self.repeats = repeats

    def measure(self, rng: np.random.Generator) -> tuple[float, str]:
        raise NotImplementedError('Subclasses should implement this method.')

    def evaluate(self) -> CheckResult:
        rng = np.random.default_rng(self.seed)
        residual, detail = 0.0, ''
        for _ in range(self.repeats):
            r, detail = self.measure(rng)
            if not np.isfinite(r):
                residual = np.inf
                break
            residual = max(residual, r)
        result = CheckResult(
            check=self.name,
            residual=residual,
            threshold=self.threshold,
            passed=bool(residual <= self.threshold),
            detail=detail,
        )
        logger.info(
            '%s: residual %.3e (threshold %.1e) %s',
            self.name,
            residual,
            self.threshold,
            'passed' if result.passed else 'FAILED',
        )
        return result


def _random_instance(rng: np.random.Generator, n: int = ORACLE_SIZE):
    points = rng.uniform(size=(n, 2))
    kernel = gibbs_kernel(cost_matrix(points), ORACLE_EPSILON)
    zeta = ProbabilityVector.from_unnormalized(rng.dirichlet(np.ones(n)))
    return kernel, zeta


class _ProxCheck(OracleCheck):
    threshold = 1e-5
    repeats = 10
    internal: Callable[[float], InternalEnergy] | None = None
    with_interaction = False

    def measure(self, rng: np.random.Generator) -> tuple[float, str]:
        kernel, zeta = _random_instance(rng)
        n = kernel.size
        interaction = None
        if self.with_interaction:
            u = rng.normal(size=(n, n))
            interaction = 0.5 * (u + u.T)
        f = FreeEnergyFunctional(
            drift=rng.normal(scale=0.5, size=n),
            interaction=interaction,
            internal=self.internal(ORACLE_BETA) if self.internal is not None else None,
        )
        nu = rng.normal(scale=0.1, size=n)
        mu_prev = ProbabilityVector.from_unnormalized(rng.dirichlet(np.ones(n)))

        # the interaction is linearized at mu_prev, so the reference energy is too
        linearized = FreeEnergyFunctional(
            drift=effective_drift(f, nu, mu_prev), internal=f.internal
        )

        def energy(mu: np.ndarray) -> float:
            return free_energy(linearized, ProbabilityVector.from_unnormalized(mu))

        def energy_grad(mu: np.ndarray) -> np.ndarray:
            return linearized.drift + internal_energy_gradient(linearized, mu)

        computed = prox(f, nu, mu_prev, zeta, kernel, TIGHT_PROX)
        try:
            reference = brute_force_prox(energy, energy_grad, zeta, kernel, ORACLE_ALPHA)
        except ConvergenceError as e:
            return np.inf, str(e)
        return float(np.max(np.abs(computed.values - reference.values))), f'N={n}'


class LinearProxCheck(_ProxCheck):
    name = 'prox linear vs brute force'


class LogEntropyProxCheck(_ProxCheck):
    name = 'prox log-entropy vs brute force'
    internal = staticmethod(InternalEnergy.log_entropy)


class PowerLawProxCheck(_ProxCheck):
    name = 'prox power-law vs brute force'
    internal = staticmethod(InternalEnergy.power_law)


class InteractionProxCheck(_ProxCheck):
    name = 'prox interaction vs brute force'
    with_interaction = True


class LinearFormulaCheck(OracleCheck):
    name = 'prox linear closed form'
    threshold = 1e-10
    repeats = 10

    def measure(self, rng: np.random.Generator) -> tuple[float, str]:
        kernel, zeta = _random_instance(rng)
        a = rng.normal(scale=0.5, size=kernel.size)
        z = np.exp(-a / (ORACLE_ALPHA * kernel.epsilon))
        y = zeta.values / (kernel.gamma @ z)
        expected = z * (kernel.gamma @ y)
        computed = prox_linear(a, zeta, kernel, ORACLE_ALPHA)
        return float(np.max(np.abs(computed.values - expected / expected.sum()))), ''


class SinkhornDualCheck(OracleCheck):
    name = 'sinkhorn primal vs dual'
    threshold = 1e-6
    repeats = 5

    def measure(self, rng: np.random.Generator) -> tuple[float, str]:
        kernel, zeta = _random_instance(rng, n=4)
        mu = ProbabilityVector.from_unnormalized(rng.dirichlet(np.ones(4)))
        primal, _ = sinkhorn_divergence(mu, zeta, kernel, tol=1e-12)
        dual = sinkhorn_dual_value(mu, zeta, kernel)
        return abs(primal - dual) / max(1.0, abs(primal)), f'primal {primal:.6f}'


class ExactTransportCheck(OracleCheck):
    name = 'exact transport vs enumeration'
    threshold = 1e-8
    repeats = 5

    def measure(self, rng: np.random.Generator) -> tuple[float, str]:
        # uniform marginals: the optimum is a permutation
        n = 4
        points = rng.uniform(size=(2 * n, 2))
        cost = cost_matrix(points)
        uniform = np.r_[np.full(n, 1.0 / n), np.zeros(n)]
        first = ProbabilityVector(values=uniform)
        second = ProbabilityVector(values=uniform[::-1].copy())
        assignment = permutation_wasserstein(cost.entries[:n, n:])
        assignment_error = abs(exact_wasserstein(first, second, cost) - assignment)

        # on the line the optimum is the monotone coupling
        x = rng.uniform(size=6)
        a, b = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        line_cost = cost_matrix(x[:, None])
        line_error = abs(
            exact_wasserstein(
                ProbabilityVector.from_unnormalized(a),
                ProbabilityVector.from_unnormalized(b),
                line_cost,
            )
            - monotone_wasserstein(x, a / a.sum(), b / b.sum())
        )
        return max(assignment_error, line_error), ''


def _dual_instance(rng: np.random.Generator, n: int = 20, epsilon: float = 0.5):
    points = rng.uniform(size=(n, 2))
    kernel = gibbs_kernel(cost_matrix(points), epsilon)
    mu = ProbabilityVector.from_unnormalized(rng.dirichlet(np.ones(n)))
    return rng.normal(size=n), mu, kernel


class GradientCheck(OracleCheck):
    name = 'dual gradient'
    threshold = 1e-5
    repeats = 20

    def measure(self, rng: np.random.Generator) -> tuple[float, str]:
        u, mu, kernel = _dual_instance(rng)
        g = grad_f(u, mu, kernel)
        mass_error = abs(g.sum() - 1.0 / kernel.epsilon) * kernel.epsilon
        if mass_error > 1e-10:
            return np.inf, f'gradient mass off by {mass_error:.2e}'
        fd = approx_fprime(u, lambda x: dual_objective_f(x, mu, kernel), 1e-7)
        return float(np.linalg.norm(fd - g) / np.linalg.norm(g)), 'relative finite-difference error'


class HessianCheck(OracleCheck):
    name = 'dual Hessian'
    threshold = 1e-5
    repeats = 20

    def measure(self, rng: np.random.Generator) -> tuple[float, str]:
        u, mu, kernel = _dual_instance(rng)
        h = hess_f(u, mu, kernel)
        scale = float(np.linalg.norm(h))
        if np.max(np.abs(h @ np.ones(len(u)))) > 1e-10 * max(1.0, scale):
            return np.inf, 'Hessian does not annihilate the ones vector'
        if eigvalsh(h)[0] < -1e-10 * max(1.0, scale):
            return np.inf, 'Hessian is not positive semidefinite'
        fd = approx_fprime(u, lambda x: grad_f(x, mu, kernel), 1e-7)
        return float(np.linalg.norm(fd - h) / scale), 'relative finite-difference error'


class ProjectionCheck(OracleCheck):
    name = 'consensus projection'
    threshold = 1e-12

    def measure(self, rng: np.random.Generator) -> tuple[float, str]:
        residual = 0.0
        for n, size in itertools.product((2, 3, 5), (4, 16)):
            vs = [rng.normal(size=size) for _ in range(n)]
            target = rng.normal(size=size)
            projected = project_consensus(vs, target)
            feasibility = np.max(np.abs(sum(projected) - target))
            idempotence = max(
                np.max(np.abs(a - b))
                for a, b in zip(project_consensus(projected, target), projected)
            )
            a = np.hstack([np.eye(size)] * n)
            x = np.concatenate(vs)
            dense = x - pinv(a) @ (a @ x - target)
            formula = np.max(np.abs(np.concatenate(projected) - dense))
            residual = max(residual, feasibility, idempotence, formula)
        return float(residual), 'n in (2, 3, 5), N in (4, 16)'


class BarycenterCheck(OracleCheck):
    """
    With a vanishing multiplier sum the zeta-update is the entropic barycenter, so the
    converged inner ADMM must agree with iterative Bregman projections. The inner ADMM
    runs at the sufficient penalty unless tau is given; a tau below it fails the check.
    """

    name = 'inner ADMM vs Bregman barycenter'
    threshold = 1e-5

    def __init__(
        self,
        seed: int = 0,
        repeats: int | None = None,
        tau: float | None = None,
        rounds: int = 50,
        max_chunks: int = 600,
    ):
        super().__init__(seed, repeats)
        self.tau = tau
        self.rounds = rounds
        self.max_chunks = max_chunks

    def measure(self, rng: np.random.Generator) -> tuple[float, str]:
        samples = make_uniform_grid([(0.0, 4.0)], [50])
        kernel = gibbs_kernel(cost_matrix(samples), 0.1)
        centers = rng.uniform(0.8, 3.2, size=2)
        mus = [gaussian_mixture(samples, [[c]], [[0.3]]) for c in centers]
        inputs = BarycentricInputs(mus=mus, kernel=kernel, nu_sum=np.zeros(50), alpha=1.0)
        newton = NewtonParams(tol=1e-14)

        bound = tau_lower_bound(inputs)
        tau = bound if self.tau is None else self.tau
        if tau < bound:
            return np.inf, f'tau {tau:g} is below the sufficient bound {bound:.4g}'

        state = cold_start(inputs, tau)
        deviation = np.inf
        for _ in range(self.max_chunks):
            zeta, state, deviation = run_inner(inputs, state, self.rounds, tau, newton)
            if deviation <= 1e-9:
                break
        reference = sinkhorn_barycenter(mus, kernel)
        return (
            float(np.max(np.abs(zeta.values - reference.values))),
            f'tau {tau:.4g} (sufficient bound {bound:.4g}), deviation {deviation:.1e}',
        )


class NewtonVsGradientDescentCheck(OracleCheck):
    """
    Newton and gradient descent on the inner proximal objective over a 21 x 21 grid of
    [-1, 1]^2 with eps = tau = 0.1: on every instance Newton must stop within 10 steps
    at an objective matching the gradient-descent one.
    """

    name = 'Newton vs gradient descent'
    threshold = 2e-4
    repeats = 5
    max_newton_steps = 10

    def measure(self, rng: np.random.Generator) -> tuple[float, str]:
        samples = make_uniform_grid([(-1.0, 1.0), (-1.0, 1.0)], [21, 21])
        kernel = gibbs_kernel(cost_matrix(samples), 0.1)
        tau = 0.1
        v = rng.uniform(size=samples.size)
        mu = ProbabilityVector.from_unnormalized(rng.dirichlet(np.ones(samples.size)))
        newton = newton_prox(v, mu, kernel, tau)
        descent = prox_f_gradient_descent(v, mu, kernel, tau, grad_tol=1e-4, max_iters=5000)
        gap = abs(newton.objective - descent.objective)
        if newton.iterations > self.max_newton_steps:
            return np.inf, f'Newton took {newton.iterations} steps'
        return gap, (
            f'Newton {newton.iterations} steps, objective {newton.objective:.6f}; '
            f'gradient descent {descent.iterations} steps, objective {descent.objective:.6f}'
        )


CHECKS: list[type[OracleCheck]] = [
    LinearFormulaCheck,
    LinearProxCheck,
    LogEntropyProxCheck,
    PowerLawProxCheck,
    InteractionProxCheck,
    SinkhornDualCheck,
    ExactTransportCheck,
    GradientCheck,
    HessianCheck,
    ProjectionCheck,
    BarycenterCheck,
    NewtonVsGradientDescentCheck,
]


def run_oracle_suite(seed: int = 0) -> list[CheckResult]:
    """
    Runs every oracle check.

    Args:
        seed (int): Seed of the random instances.

    Returns:
        list[CheckResult]: One result per check, in a fixed order.
    """
    return [check(seed=seed).evaluate() for check in CHECKS]
