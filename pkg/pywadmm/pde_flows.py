"""
Experiment drivers for the Fokker-Planck and aggregation-drift-diffusion gradient
flows: operator splittings, stationary references, the centralized proximal baseline
and the enumeration of operator groupings.
"""

from __future__ import annotations

import logging
import math
import time
from typing import Iterator, Sequence

import numpy as np
from scipy import optimize
from scipy.special import stirling2

from pywadmm.functionals import discretize_potentials, free_energy, prox
from pywadmm.inner_admm import transition_matrix
from pywadmm.measures import cost_matrix, gaussian_mixture, gibbs_kernel, make_uniform_grid
from pywadmm.schema import (
    DIFFUSION_OPERATORS,
    INTERNAL_ENERGY,
    OPERATOR,
    PDE,
    PRESET,
    REFERENCE_KIND,
    ConsensusReport,
    ConvergenceError,
    CostMatrix,
    Experiment,
    FreeEnergyFunctional,
    GibbsKernel,
    GridSpec,
    InternalEnergy,
    ProbabilityVector,
    SampleSet,
    Snapshot,
    SolveConfig,
    SplittingSpec,
    StationaryReference,
)
from pywadmm.transport import exact_wasserstein

logger = logging.getLogger(__name__)

MAX_ENUMERATED_SUMMANDS = 8

# inverse diffusivity of the centralized aggregation comparison
AGGREGATION_BETA = 1.0 / 0.0520

ANNULUS_INNER_RADIUS = 0.5
ANNULUS_OUTER_RADIUS = math.sqrt(5.0) / 2.0

INITIAL_MEANS = [(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (0.0, 0.0)]
INITIAL_COV = 0.1 * np.eye(2)

ADV = OPERATOR.ADVECTION
INT = OPERATOR.INTERACTION
LOG_D = OPERATOR.LOG_DIFFUSION
QUAD_D = OPERATOR.QUADRATIC_DIFFUSION

PRESET_SPLITTINGS: dict[PRESET, tuple[PDE, tuple[tuple[OPERATOR, ...], ...]]] = {
    PRESET.FPK: (PDE.FPK, ((ADV,), (LOG_D,))),
    PRESET.AGGREGATION_CASE1: (PDE.AGGREGATION, ((ADV, QUAD_D), (INT,))),
    PRESET.AGGREGATION_CASE2: (PDE.AGGREGATION, ((INT, QUAD_D), (ADV,))),
    PRESET.AGGREGATION_CASE3: (PDE.AGGREGATION, ((INT, ADV), (QUAD_D,))),
    PRESET.AGGREGATION_CASE4: (PDE.AGGREGATION, ((ADV,), (INT,), (QUAD_D,))),
    PRESET.AGGREGATION_ENTROPY: (PDE.AGGREGATION, ((ADV, LOG_D), (INT,))),
}


######################
# Potentials
######################


def fpk_potential(theta: np.ndarray) -> np.ndarray:
    """Quartic double well V = (1 + x^4) / 4 + (y^2 - x^2) / 2."""
    x, y = theta[:, 0], theta[:, 1]
    return 0.25 * (1.0 + x**4) + 0.5 * (y**2 - x**2)


def aggregation_interaction(theta: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(theta, axis=1)
    return 0.5 * r**2 - np.log(r)


def aggregation_drift(theta: np.ndarray) -> np.ndarray:
    return -0.25 * np.log(np.linalg.norm(theta, axis=1))


######################
# Splittings
######################


def pde_operators(pde: PDE, groups: Sequence[Sequence[OPERATOR]]) -> tuple[OPERATOR, ...]:
    """
    Operators of the PDE; the aggregation diffusion is whichever diffusion the
    splitting uses.
    """
    if pde == PDE.FPK:
        return (ADV, LOG_D)
    used = {op for group in groups for op in group}
    diffusions = [op for op in DIFFUSION_OPERATORS if op in used] or [QUAD_D]
    return (ADV, INT, diffusions[0])


def make_splitting(pde: PDE, groups: Sequence[Sequence[OPERATOR]]) -> SplittingSpec:
    return SplittingSpec(
        operators=pde_operators(pde, groups),
        groups=tuple(tuple(OPERATOR(op) for op in group) for group in groups),
    )


def resolve_splitting(config: SolveConfig) -> tuple[PDE, SplittingSpec]:
    if config.preset is not None:
        pde, groups = PRESET_SPLITTINGS[config.preset]
    else:
        pde, groups = config.pde, config.splitting
    splitting = make_splitting(pde, groups)
    if config.centralized:
        splitting = SplittingSpec(operators=splitting.operators, groups=(splitting.operators,))
    return pde, splitting


def compile_functional(
    group: Sequence[OPERATOR],
    drift: np.ndarray,
    interaction: np.ndarray | None,
    beta: float,
) -> FreeEnergyFunctional:
    internal = None
    if LOG_D in group:
        internal = InternalEnergy.log_entropy(beta)
    elif QUAD_D in group:
        internal = InternalEnergy.power_law(beta)
    if INT in group and interaction is None:
        raise ValueError('interaction operator requested for a PDE without interaction')
    return FreeEnergyFunctional(
        drift=drift if ADV in group else np.zeros_like(drift),
        interaction=interaction if INT in group else None,
        internal=internal,
        label='+'.join(group),
    )


def preset_defaults(preset: PRESET | str) -> dict:
    """Parameters a preset changes relative to the SolveConfig defaults."""
    if PRESET(preset) == PRESET.FPK:
        return {}
    return {'beta': AGGREGATION_BETA}


def build_fpk_experiment(
    bounds: Sequence[tuple[float, float]] = ((-2.0, 2.0), (-2.0, 2.0)),
    counts: Sequence[int] = (41, 41),
    alpha: float = 12.0,
    tau: float = 150.0,
    beta: float = 1.0,
    epsilon: float = 0.05,
    **overrides,
) -> SolveConfig:
    """
    Two-worker Fokker-Planck splitting: a linear drift worker and a log-entropy
    diffusion worker with fixed-point controls delta = 1e-4, 20 sweeps.
    """
    return SolveConfig(
        preset=PRESET.FPK,
        grid=GridSpec(bounds=list(bounds), counts=list(counts)),
        alpha=alpha,
        tau=tau,
        beta=beta,
        epsilon=epsilon,
        prox_delta=overrides.pop('prox_delta', 1e-4),
        prox_max_sweeps=overrides.pop('prox_max_sweeps', 20),
        **overrides,
    )


def build_aggregation_experiment(
    bounds: Sequence[tuple[float, float]] = ((-2.0, 2.0), (-2.0, 2.0)),
    counts: Sequence[int] = (41, 41),
    case: int = 4,
    alpha: float = 12.0,
    tau: float = 150.0,
    beta: float = AGGREGATION_BETA,
    epsilon: float = 0.05,
    h: float = 5e-3,
    **overrides,
) -> SolveConfig:
    """
    Aggregation-drift-diffusion splitting case 1 to 4. Cases 1 to 3 use two workers,
    case 4 one worker per operator.

    Raises:
        ValueError: If the case is not 1, 2, 3 or 4.
    """
    if case not in (1, 2, 3, 4):
        raise ValueError(f'aggregation splitting case must be 1, 2, 3 or 4, got {case}')
    return SolveConfig(
        preset=PRESET(f'aggregation-case{case}'),
        grid=GridSpec(bounds=list(bounds), counts=list(counts)),
        alpha=alpha,
        tau=tau,
        beta=beta,
        epsilon=epsilon,
        h=h,
        **overrides,
    )


######################
# Stationary references
######################


def gibbs_reference(drift: np.ndarray, beta: float) -> StationaryReference:
    """Stationary Fokker-Planck measure proportional to exp(-beta V)."""
    weights = np.exp(-beta * (drift - drift.min()))
    return StationaryReference(
        kind=REFERENCE_KIND.GIBBS,
        density=ProbabilityVector.from_unnormalized(weights),
        beta=beta,
    )


def annulus_reference(
    samples: SampleSet,
    inner_radius: float = ANNULUS_INNER_RADIUS,
    outer_radius: float = ANNULUS_OUTER_RADIUS,
) -> StationaryReference:
    """
    Uniform measure on the samples whose norm lies in [inner_radius, outer_radius].
    """
    radius = np.linalg.norm(samples.points, axis=1)
    inside = (radius >= inner_radius) & (radius <= outer_radius)
    if not inside.any():
        raise ValueError('no sample lies inside the annulus')
    return StationaryReference(
        kind=REFERENCE_KIND.ANNULUS,
        density=ProbabilityVector(values=inside / inside.sum()),
        inner_radius=inner_radius,
        outer_radius=outer_radius,
    )


def distance_to_reference(
    mu: ProbabilityVector, ref: StationaryReference, cost: CostMatrix
) -> float:
    return exact_wasserstein(mu, ref.density, cost)


def consensus_stationary_measure(
    functionals: Sequence[FreeEnergyFunctional], kernel: GibbsKernel, alpha: float
) -> ProbabilityVector:
    """
    Stationary measure of the consensus ADMM for splittings of drift and log-entropy
    summands.

    At a joint fixed point of the outer and inner iterations every worker holds
    zeta = z * Gamma z, and the prox and barycenter optimality conditions combine into
    sum_i grad F_i(zeta) + (3 n / 2) alpha eps log z = const. The entropic terms act as
    extra diffusion, so the limit approaches the Gibbs measure only as alpha eps -> 0.

    Args:
        functionals (Sequence[FreeEnergyFunctional]): One summand per worker.
        kernel (GibbsKernel): Gibbs kernel of the experiment.
        alpha (float): Outer ADMM barrier parameter.

    Returns:
        ProbabilityVector: The stationary consensus measure.

    Raises:
        ValueError: If a summand has an interaction or a power-law internal energy.
        ConvergenceError: If the stationarity system is not solved.
    """
    if any(
        f.interaction is not None
        or (f.internal is not None and f.internal.kind != INTERNAL_ENERGY.LOG_ENTROPY)
        for f in functionals
    ):
        raise ValueError('stationary measure needs drift and log-entropy summands only')
    drift = np.sum([f.drift for f in functionals], axis=0)
    temperature = sum(1.0 / f.internal.beta for f in functionals if f.internal is not None)
    weight = 1.5 * len(functionals) * alpha * kernel.epsilon
    eye = np.eye(kernel.size)

    # unknown x = log z; log zeta = x + log(Gamma e^x)
    def system(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        residual = (temperature + weight) * x + temperature * kernel.log_apply(x) + drift
        jacobian = (temperature + weight) * eye + temperature * transition_matrix(
            kernel.epsilon * x, kernel
        )
        return residual, jacobian

    start = -drift / (2.0 * temperature + weight)
    solution = optimize.root(system, start, jac=True, method='hybr', tol=1e-14)
    residual = float(np.max(np.abs(system(solution.x)[0])))
    if residual > 1e-9 * max(1.0, float(np.max(np.abs(drift)))):
        raise ConvergenceError(
            f'Stationary measure did not converge: {solution.message}', residual, solution.nfev
        )
    log_zeta = solution.x + kernel.log_apply(solution.x)
    return ProbabilityVector.from_unnormalized(np.exp(log_zeta - log_zeta.max()))


######################
# Experiments
######################


def initial_density(samples: SampleSet) -> ProbabilityVector:
    """Five-component Gaussian mixture with covariance 0.1 I at (+-1, +-1) and 0."""
    if samples.dim != 2:
        raise ValueError('the gradient-flow experiments are posed in two dimensions')
    return gaussian_mixture(samples, INITIAL_MEANS, INITIAL_COV)


def compile_experiment(config: SolveConfig) -> Experiment:
    """
    Discretizes the configured PDE on its grid and compiles one functional per group.
    """
    pde, splitting = resolve_splitting(config)
    samples = make_uniform_grid(config.grid.bounds, config.grid.counts)
    cost = cost_matrix(samples)
    kernel = gibbs_kernel(cost, config.epsilon, config.kernel_mode)

    if pde == PDE.FPK:
        drift, interaction = discretize_potentials(fpk_potential, None, samples, config.h)
        reference = gibbs_reference(drift, config.beta)
    else:
        drift, interaction = discretize_potentials(
            aggregation_drift, aggregation_interaction, samples, config.h
        )
        reference = annulus_reference(samples)

    functionals = [
        compile_functional(group, drift, interaction, config.beta) for group in splitting.groups
    ]
    logger.info(
        'Compiled %s experiment on %s samples with groups %s',
        pde,
        samples.size,
        [f.label for f in functionals],
    )
    return Experiment(
        samples=samples,
        cost=cost,
        kernel=kernel,
        splitting=splitting,
        functionals=functionals,
        mu0=initial_density(samples),
        reference=reference,
    )


def run_centralized(
    config: SolveConfig, experiment: Experiment | None = None
) -> Iterator[Snapshot]:
    """
    Centralized proximal recursion mu^{k+1} = prox(F)(mu^k) with every operator in one
    functional. Emits snapshots at the configured cadence and after the last iteration.
    """
    if experiment is None:
        experiment = compile_experiment(config.model_copy(update={'centralized': True}))
    if len(experiment.functionals) != 1:
        raise ValueError('the centralized recursion needs a single functional')
    f = experiment.functionals[0]
    params = config.prox_params
    zero = np.zeros(experiment.kernel.size)

    def snapshot(k: int, mu: ProbabilityVector) -> Snapshot:
        report = ConsensusReport(
            pairwise=np.zeros((1, 1)), max_pairwise=0.0, objective=free_energy(f, mu)
        )
        return Snapshot(k=k, mus=[mu], zeta=mu, nus=[zero], report=report)

    mu = experiment.mu0
    start = time.perf_counter()
    yield snapshot(0, mu)
    for k in range(1, config.max_outer_iters + 1):
        mu = prox(f, zero, mu, mu, experiment.kernel, params)
        if k % config.snapshot_every == 0 or k == config.max_outer_iters:
            yield snapshot(k, mu)
    logger.info(
        'Centralized recursion finished %s iterations in %.1f s',
        config.max_outer_iters,
        time.perf_counter() - start,
    )


######################
# Groupings
######################


def count_groupings(n_summands: int, r_computers: int, exclude_centralized: bool = False) -> int:
    """
    Number of ways to split n summands over at most r computers: sum_k S(n, k) over
    k = 1..r, minus the single-block grouping when exclude_centralized is set.
    """
    if not 1 <= r_computers <= n_summands:
        raise ValueError(f'need 1 <= r <= n, got n={n_summands}, r={r_computers}')
    total = sum(int(stirling2(n_summands, k, exact=True)) for k in range(1, r_computers + 1))
    return total - 1 if exclude_centralized else total


def _restricted_growth_strings(n: int, r: int) -> Iterator[list[int]]:
    def extend(prefix: list[int], blocks: int) -> Iterator[list[int]]:
        if len(prefix) == n:
            yield prefix
            return
        for label in range(min(blocks + 1, r)):
            yield from extend(prefix + [label], max(blocks, label + 1))

    yield from extend([0], 1)


def enumerate_groupings(
    n_summands: int, r_computers: int, exclude_centralized: bool = False
) -> list[tuple[tuple[int, ...], ...]]:
    """
    All set partitions of {1, ..., n} into at most r blocks, in lexicographic order
    of their restricted growth strings.

    Raises:
        ValueError: If n exceeds the enumeration limit or r is out of range.
    """
    if n_summands > MAX_ENUMERATED_SUMMANDS:
        raise ValueError(
            f'enumeration is limited to {MAX_ENUMERATED_SUMMANDS} summands, got {n_summands}'
        )
    if not 1 <= r_computers <= n_summands:
        raise ValueError(f'need 1 <= r <= n, got n={n_summands}, r={r_computers}')
    groupings = []
    for labels in _restricted_growth_strings(n_summands, r_computers):
        blocks = max(labels) + 1
        if exclude_centralized and blocks == 1:
            continue
        groupings.append(
            tuple(
                tuple(i + 1 for i, label in enumerate(labels) if label == b) for b in range(blocks)
            )
        )
    return groupings


def splittings_from_groupings(
    pde: PDE, operators: Sequence[OPERATOR], r_computers: int | None = None
) -> list[SplittingSpec]:
    """Every non-centralized splitting of the given operators over at most r workers."""
    operators = tuple(OPERATOR(op) for op in operators)
    r = len(operators) if r_computers is None else r_computers
    return [
        make_splitting(pde, [[operators[i - 1] for i in block] for block in grouping])
        for grouping in enumerate_groupings(len(operators), r, exclude_centralized=True)
    ]
