from __future__ import annotations

from enum import StrEnum, auto
from typing import Annotated, Literal, Self

import numpy as np
from scipy.special import logsumexp
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    field_validator,
    model_validator,
)

# strictly positive stand-in for zero mass, applied before every renormalization
POSITIVITY_FLOOR = 1e-300
SIMPLEX_TOL = 1e-9


def _frozen_array(value) -> np.ndarray:
    array = np.array(value, dtype=float)
    array.setflags(write=False)
    return array


FloatArray = Annotated[np.ndarray, BeforeValidator(_frozen_array)]


class KERNEL_MODE(StrEnum):
    DIRECT = auto()
    LOG_DOMAIN = auto()


class INTERNAL_ENERGY(StrEnum):
    LOG_ENTROPY = auto()
    POWER_LAW = auto()


class CONSENSUS_POINT(StrEnum):
    """
    Measure at which the consensus objective is reported.
    """

    MEAN = auto()
    ZETA = auto()


class OPERATOR(StrEnum):
    """
    Spatial operators of the supported gradient-flow PDEs.
    """

    ADVECTION = auto()
    INTERACTION = auto()
    LOG_DIFFUSION = auto()
    QUADRATIC_DIFFUSION = auto()


DIFFUSION_OPERATORS = (OPERATOR.LOG_DIFFUSION, OPERATOR.QUADRATIC_DIFFUSION)


class PDE(StrEnum):
    FPK = auto()
    AGGREGATION = auto()


class PRESET(StrEnum):
    FPK = 'fpk'
    AGGREGATION_CASE1 = 'aggregation-case1'
    AGGREGATION_CASE2 = 'aggregation-case2'
    AGGREGATION_CASE3 = 'aggregation-case3'
    AGGREGATION_CASE4 = 'aggregation-case4'
    AGGREGATION_ENTROPY = 'aggregation-entropy'


class REFERENCE_KIND(StrEnum):
    GIBBS = auto()
    ANNULUS = auto()


class _Frozen(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


######################
# Errors
######################


class WassersteinADMMError(Exception):
    """
    Base class for errors raised by the solver.
    """

    pass


class KernelRangeError(WassersteinADMMError):
    """
    Exception raised when a Gibbs kernel leaves the range representable in direct mode.
    Switching the kernel to log-domain mode resolves it.
    """

    pass


class ConvergenceError(WassersteinADMMError):
    """
    Exception raised when an iterative solver exhausts its iteration budget.
    """

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f'{message} (residual {residual:.3e} after {iterations} iterations)')
        self.residual = residual
        self.iterations = iterations


class PositiveConeError(WassersteinADMMError):
    """
    Exception raised when a fixed-point iterate leaves the positive cone.
    """

    def __init__(self, message: str, indices: list[int]):
        super().__init__(f'{message}: offending coordinates {indices[:10]}')
        self.indices = indices


class LineSearchError(WassersteinADMMError):
    """
    Exception raised when backtracking cannot find a step with sufficient decrease.
    """

    pass


class WorkerError(WassersteinADMMError):
    """
    Exception raised when the update of a single worker fails.
    """

    def __init__(self, worker: int, cause: Exception):
        super().__init__(f'Worker {worker} failed: {str(cause)}')
        self.worker = worker
        self.cause = cause


class ConfigError(WassersteinADMMError):
    """
    Exception raised for invalid solver configuration files.
    """

    def __init__(
        self,
        message: str,
        section: str | None = None,
        key: str | None = None,
        line: int | None = None,
    ):
        location = ''
        if section is not None:
            location += f'[{section}]'
        if key is not None:
            location += f' {key}'
        if line is not None:
            location += f' (line {line})'
        super().__init__(f'{location.strip()}: {message}' if location else message)
        self.section = section
        self.key = key
        self.line = line


class StorageError(WassersteinADMMError):
    """
    Exception raised for errors while persisting a run.
    """

    pass


######################
# Measures
######################


class SampleSet(_Frozen):
    points: FloatArray
    bounds: list[tuple[float, float]]
    counts: list[PositiveInt]

    @model_validator(mode='after')
    def validate_grid(self) -> Self:
        if self.points.ndim != 2 or self.points.shape[1] != len(self.bounds):
            raise ValueError('points must be an (N, d) array with one bound per axis')
        if len(self.counts) != len(self.bounds):
            raise ValueError('counts and bounds must have the same length')
        if self.points.shape[0] != int(np.prod(self.counts)):
            raise ValueError(f'expected {int(np.prod(self.counts))} points, got {len(self.points)}')
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        if np.any(self.points < lo - 1e-12) or np.any(self.points > hi + 1e-12):
            raise ValueError('points must lie within the axis bounds')
        return self

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def spacing(self) -> list[float]:
        return [(hi - lo) / (n - 1) for (lo, hi), n in zip(self.bounds, self.counts)]


class ProbabilityVector(_Frozen):
    values: FloatArray

    @model_validator(mode='after')
    def validate_simplex(self) -> Self:
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError('a probability vector must be a non-empty 1-D array')
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError('probability vector entries must be finite and nonnegative')
        total = float(self.values.sum())
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ValueError(f'probability vector sums to {total!r}, expected 1')
        return self

    @classmethod
    def from_unnormalized(cls, values: np.ndarray, floor: float = POSITIVITY_FLOOR) -> Self:
        """
        Floors the given nonnegative masses and renormalizes them to the simplex.

        Args:
            values (np.ndarray): Nonnegative, not necessarily normalized masses.
            floor (float): Lower bound applied before renormalization.

        Returns:
            ProbabilityVector: The normalized vector.
        """
        values = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise ValueError('cannot normalize a vector with non-finite entries')
        floored = np.maximum(values, floor)
        return cls(values=floored / floored.sum())

    @classmethod
    def uniform(cls, n: int) -> Self:
        return cls(values=np.full(n, 1.0 / n))

    @property
    def size(self) -> int:
        return self.values.size


class CostMatrix(_Frozen):
    entries: FloatArray

    @model_validator(mode='after')
    def validate_cost(self) -> Self:
        c = self.entries
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError('cost matrix must be square')
        if np.any(c < 0) or np.any(np.diag(c) != 0):
            raise ValueError('cost matrix must be nonnegative with zero diagonal')
        if not np.allclose(c, c.T, rtol=0, atol=1e-12 * max(1.0, float(c.max(initial=0.0)))):
            raise ValueError('cost matrix must be symmetric')
        return self

    @property
    def size(self) -> int:
        return self.entries.shape[0]


class GibbsKernel(_Frozen):
    """
    The Gibbs kernel exp(-C / 2 epsilon).

    The logarithm of the kernel is always stored. In direct mode the kernel itself is
    stored as well and applied by matrix products; in log-domain mode all applications
    are stabilized log-sum-exp reductions.
    """

    epsilon: PositiveFloat
    mode: KERNEL_MODE = KERNEL_MODE.DIRECT
    log_gamma: FloatArray
    gamma: FloatArray | None = None

    @model_validator(mode='after')
    def validate_kernel(self) -> Self:
        lg = self.log_gamma
        if lg.ndim != 2 or lg.shape[0] != lg.shape[1]:
            raise ValueError('kernel must be square')
        if np.any(lg > 0) or np.any(np.diag(lg) != 0) or np.any(np.isnan(lg)):
            raise ValueError('kernel entries must lie in [0, 1] with unit diagonal')
        if not np.array_equal(lg, lg.T):
            raise ValueError('kernel must be symmetric')
        if self.mode == KERNEL_MODE.DIRECT and self.gamma is None:
            raise ValueError('direct mode requires the kernel matrix')
        return self

    @property
    def size(self) -> int:
        return self.log_gamma.shape[0]

    def log_apply(self, log_v: np.ndarray) -> np.ndarray:
        """
        Computes log(Gamma @ exp(log_v)) without forming exp(log_v) unshifted.

        Args:
            log_v (np.ndarray): Logarithm of the vector the kernel is applied to.

        Returns:
            np.ndarray: Logarithm of the kernel application.

        Raises:
            KernelRangeError: If a direct-mode application underflows to zero.
        """
        if self.mode == KERNEL_MODE.LOG_DOMAIN:
            return logsumexp(self.log_gamma + log_v[None, :], axis=1)

        shift = np.max(log_v)
        if not np.isfinite(shift):
            raise KernelRangeError('kernel applied to a vector without finite entries')
        product = self.gamma @ np.exp(log_v - shift)
        if np.any(product <= 0):
            raise KernelRangeError(
                'kernel application underflowed in direct mode; use log_domain mode'
            )
        return np.log(product) + shift

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Computes Gamma @ v for a nonnegative vector v."""
        if self.mode == KERNEL_MODE.DIRECT:
            return self.gamma @ v
        with np.errstate(divide='ignore'):
            return np.exp(self.log_apply(np.log(v)))

    @classmethod
    def identity(cls, n: int, epsilon: float = 1.0) -> GibbsKernel:
        """
        Builds the identity kernel, the vanishing-regularization limit of Gamma.
        """
        log_gamma = np.full((n, n), -np.inf)
        np.fill_diagonal(log_gamma, 0.0)
        return cls(epsilon=epsilon, log_gamma=log_gamma, gamma=np.eye(n))


######################
# Transport
######################


class TransportPlan(_Frozen):
    matrix: FloatArray
    row_marginal: ProbabilityVector
    col_marginal: ProbabilityVector
    tolerance: PositiveFloat = 1e-8

    @model_validator(mode='after')
    def validate_marginals(self) -> Self:
        if np.any(self.matrix < 0):
            raise ValueError('transport plan entries must be nonnegative')
        row_error = np.max(np.abs(self.matrix.sum(axis=1) - self.row_marginal.values))
        col_error = np.max(np.abs(self.matrix.sum(axis=0) - self.col_marginal.values))
        if max(row_error, col_error) > self.tolerance:
            raise ValueError(
                f'plan marginals off by {max(row_error, col_error):.3e} (> {self.tolerance:.1e})'
            )
        return self


class DualFactors(_Frozen):
    """
    Exponentiated scaled duals y = exp(lambda_0 / alpha eps), z = exp(lambda_1 / alpha eps),
    stored by their logarithms.
    """

    log_y: FloatArray
    log_z: FloatArray

    @model_validator(mode='after')
    def validate_finite(self) -> Self:
        if not (np.all(np.isfinite(self.log_y)) and np.all(np.isfinite(self.log_z))):
            raise ValueError('dual factors must be strictly positive and finite')
        return self

    @property
    def y(self) -> np.ndarray:
        return np.exp(self.log_y)

    @property
    def z(self) -> np.ndarray:
        return np.exp(self.log_z)


class ProxDiagnostics(BaseModel):
    sweeps: int
    converged: bool
    # max relative change of z, one entry per sweep
    changes: list[float] = []


######################
# Functionals
######################


class InternalEnergy(_Frozen):
    kind: INTERNAL_ENERGY
    beta: PositiveFloat
    m: Literal[2] = 2

    @classmethod
    def log_entropy(cls, beta: float) -> InternalEnergy:
        return cls(kind=INTERNAL_ENERGY.LOG_ENTROPY, beta=beta)

    @classmethod
    def power_law(cls, beta: float) -> InternalEnergy:
        return cls(kind=INTERNAL_ENERGY.POWER_LAW, beta=beta)


class FreeEnergyFunctional(_Frozen):
    """
    One summand F_i: a drift potential, an optional interaction matrix handled
    semi-implicitly and an optional internal energy.
    """

    drift: FloatArray
    interaction: FloatArray | None = None
    internal: InternalEnergy | None = None
    label: str = ''

    @model_validator(mode='after')
    def validate_shapes(self) -> Self:
        n = self.drift.shape[0]
        if self.drift.ndim != 1 or not np.all(np.isfinite(self.drift)):
            raise ValueError('drift must be a finite 1-D array')
        if self.interaction is not None:
            u = self.interaction
            if u.shape != (n, n):
                raise ValueError(f'interaction must be {n}x{n}, got {u.shape}')
            if not np.allclose(u, u.T, rtol=1e-12, atol=1e-12):
                raise ValueError('interaction matrix must be symmetric')
        return self

    @property
    def size(self) -> int:
        return self.drift.shape[0]


class ProxParams(_Frozen):
    alpha: PositiveFloat
    delta: PositiveFloat = 1e-4
    # maximal number of fixed-point sweeps (L)
    max_sweeps: PositiveInt = 20


class NewtonParams(_Frozen):
    tol: PositiveFloat = 1e-4
    max_newton: PositiveInt = 50
    backtrack_alpha: float = Field(0.3, gt=0, lt=0.5)
    backtrack_beta: float = Field(0.7, gt=0, lt=1)


class NewtonResult(_Frozen):
    u: FloatArray
    iterations: int
    # half squared Newton decrement, or gradient norm for gradient descent
    residual: float
    objective: float


######################
# Outer and inner ADMM
######################


class OuterState(_Frozen):
    mus: list[ProbabilityVector]
    zeta: ProbabilityVector
    nus: list[FloatArray]
    k: NonNegativeInt = 0
    alpha: PositiveFloat
    functionals: list[FreeEnergyFunctional]

    @model_validator(mode='after')
    def validate_state(self) -> Self:
        n = len(self.mus)
        if n < 2:
            raise ValueError('the consensus ADMM needs at least two workers')
        if len(self.nus) != n or len(self.functionals) != n:
            raise ValueError('mus, nus and functionals must have one entry per worker')
        size = self.zeta.size
        if any(mu.size != size for mu in self.mus) or any(nu.shape != (size,) for nu in self.nus):
            raise ValueError('all measures and multipliers must share the sample set')
        if not all(np.all(np.isfinite(nu)) for nu in self.nus):
            raise ValueError('multipliers must be finite')
        return self

    @property
    def n(self) -> int:
        return len(self.mus)


class ConsensusReport(_Frozen):
    pairwise: FloatArray
    max_pairwise: float
    objective: float

    @model_validator(mode='after')
    def validate_pairwise(self) -> Self:
        if not np.array_equal(self.pairwise, self.pairwise.T) or np.any(np.diag(self.pairwise)):
            raise ValueError('pairwise distances must be symmetric with zero diagonal')
        return self


class IterationRecord(BaseModel):
    k: int
    primal_residual: float
    inner_deviation: float | None = None
    wall_clock: float
    max_pairwise: float | None = None
    objective: float | None = None


class Snapshot(_Frozen):
    k: int
    mus: list[ProbabilityVector]
    zeta: ProbabilityVector
    nus: list[FloatArray]
    report: ConsensusReport


class InnerDualState(_Frozen):
    us: list[FloatArray]
    zs: list[FloatArray]
    nutildes: list[FloatArray]
    tau: PositiveFloat
    target: FloatArray
    ell: NonNegativeInt = 0

    @model_validator(mode='after')
    def validate_consensus(self) -> Self:
        if not (len(self.us) == len(self.zs) == len(self.nutildes)) or not self.us:
            raise ValueError('inner state needs one u, z and nu-tilde per worker')
        total = np.zeros_like(self.target)
        for z in self.zs:
            total = total + z
        scale = max(1.0, max(float(np.max(np.abs(z))) for z in self.zs)) * len(self.zs)
        if np.max(np.abs(total - self.target)) > 1e-12 * scale:
            raise ValueError('z-iterates must sum to the consensus target')
        return self

    @property
    def n(self) -> int:
        return len(self.us)


class BarycentricInputs(_Frozen):
    mus: list[ProbabilityVector]
    kernel: GibbsKernel
    nu_sum: FloatArray
    alpha: PositiveFloat

    @model_validator(mode='after')
    def validate_inputs(self) -> Self:
        if not self.mus:
            raise ValueError('at least one measure is required')
        if any(np.any(mu.values <= 0) for mu in self.mus):
            raise ValueError('barycentric inputs must be strictly positive')
        if any(mu.size != self.kernel.size for mu in self.mus) or self.nu_sum.shape != (
            self.kernel.size,
        ):
            raise ValueError('measures, multiplier sum and kernel sizes differ')
        return self

    @property
    def target(self) -> np.ndarray:
        return (2.0 / self.alpha) * self.nu_sum


######################
# Experiments
######################


class SplittingSpec(_Frozen):
    operators: tuple[OPERATOR, ...]
    groups: tuple[tuple[OPERATOR, ...], ...]

    @model_validator(mode='after')
    def validate_partition(self) -> Self:
        flat = [op for group in self.groups for op in group]
        if any(len(group) == 0 for group in self.groups):
            raise ValueError('operator groups must be nonempty')
        if len(flat) != len(set(flat)):
            raise ValueError('operator groups must be disjoint')
        if set(flat) != set(self.operators):
            raise ValueError(
                f'groups cover {sorted(set(flat))}, PDE operators are {sorted(self.operators)}'
            )
        for group in self.groups:
            if sum(op in DIFFUSION_OPERATORS for op in group) > 1:
                raise ValueError('a group can hold at most one diffusion operator')
        return self

    @property
    def n(self) -> int:
        return len(self.groups)


class StationaryReference(_Frozen):
    kind: REFERENCE_KIND
    density: ProbabilityVector
    beta: PositiveFloat | None = None
    inner_radius: float | None = None
    outer_radius: float | None = None


class Experiment(_Frozen):
    """
    A compiled solve: everything the outer loop needs besides the ADMM parameters.
    """

    samples: SampleSet
    cost: CostMatrix
    kernel: GibbsKernel
    splitting: SplittingSpec
    functionals: list[FreeEnergyFunctional]
    mu0: ProbabilityVector
    reference: StationaryReference | None = None


class GridSpec(BaseModel):
    model_config = ConfigDict(extra='forbid')

    bounds: list[tuple[float, float]] = [(-2.0, 2.0), (-2.0, 2.0)]
    counts: list[PositiveInt] = [41, 41]

    @field_validator('bounds')
    @classmethod
    def validate_bounds(cls, bounds: list[tuple[float, float]]) -> list[tuple[float, float]]:
        for lo, hi in bounds:
            if not lo < hi:
                raise ValueError(f'degenerate interval [{lo}, {hi}]; expected lo < hi')
        return bounds

    @field_validator('counts')
    @classmethod
    def validate_counts(cls, counts: list[int]) -> list[int]:
        if any(count < 2 for count in counts):
            raise ValueError(f'need at least 2 points per axis, got {counts}')
        return counts

    @model_validator(mode='after')
    def validate_grid(self) -> Self:
        if len(self.bounds) != len(self.counts):
            raise ValueError('grid bounds and counts must have one entry per axis')
        return self


class SolveConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    preset: PRESET | None = None
    pde: PDE | None = None
    splitting: list[list[OPERATOR]] | None = None
    centralized: bool = False

    grid: GridSpec = GridSpec()

    alpha: PositiveFloat = 12.0
    tau: PositiveFloat = 150.0
    epsilon: PositiveFloat = 0.05
    beta: PositiveFloat = 1.0
    h: PositiveFloat = 5e-3

    inner_iters: PositiveInt = 3
    warm_start: bool = True
    newton_tol: PositiveFloat = 1e-4
    max_newton: PositiveInt = 50
    backtrack_alpha: float = Field(0.3, gt=0, lt=0.5)
    backtrack_beta: float = Field(0.7, gt=0, lt=1)

    prox_delta: PositiveFloat = 1e-4
    prox_max_sweeps: PositiveInt = 20

    max_outer_iters: NonNegativeInt = 5000
    # None or inf disables early stopping
    consensus_tol: PositiveFloat | None = None
    snapshot_every: PositiveInt = 100
    threads: PositiveInt = 1
    kernel_mode: KERNEL_MODE = KERNEL_MODE.DIRECT
    consensus_point: CONSENSUS_POINT = CONSENSUS_POINT.MEAN

    output_dir: str = 'wadmm_output'

    @model_validator(mode='after')
    def validate_experiment(self) -> Self:
        if self.preset is None and self.pde is None:
            raise ValueError('either a preset or a pde with an explicit splitting is required')
        if self.preset is not None and (self.pde is not None or self.splitting is not None):
            raise ValueError('preset and explicit pde/splitting are mutually exclusive')
        if self.pde is not None and not self.splitting:
            raise ValueError('an explicit pde requires a splitting')
        return self

    @property
    def prox_params(self) -> ProxParams:
        return ProxParams(alpha=self.alpha, delta=self.prox_delta, max_sweeps=self.prox_max_sweeps)

    @property
    def newton_params(self) -> NewtonParams:
        return NewtonParams(
            tol=self.newton_tol,
            max_newton=self.max_newton,
            backtrack_alpha=self.backtrack_alpha,
            backtrack_beta=self.backtrack_beta,
        )


######################
# Validation
######################


class CheckResult(BaseModel):
    check: str
    residual: float
    threshold: float
    passed: bool
    detail: str = ''
