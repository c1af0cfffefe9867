import numpy as np
import pytest

from pywadmm.measures import cost_matrix, gaussian_mixture, gibbs_kernel, make_uniform_grid
from pywadmm.schema import (
    KERNEL_MODE,
    FreeEnergyFunctional,
    InternalEnergy,
    ProbabilityVector,
    ProxParams,
    SolveConfig,
)

# Small instances shared by the solver tests
SMALL_EPSILON = 0.2
TIGHT_PROX = ProxParams(alpha=1.0, delta=1e-13, max_sweeps=10000)


def random_measure(rng: np.random.Generator, n: int) -> ProbabilityVector:
    """Strictly positive random probability vector."""
    return ProbabilityVector.from_unnormalized(rng.dirichlet(np.ones(n)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_kernel(rng):
    """Direct-mode kernel on 6 random points of the unit square."""
    points = rng.uniform(size=(6, 2))
    return gibbs_kernel(cost_matrix(points), SMALL_EPSILON)


@pytest.fixture
def small_kernel_log(small_kernel):
    """The same kernel in log-domain mode."""
    return small_kernel.model_copy(update={'mode': KERNEL_MODE.LOG_DOMAIN, 'gamma': None})


@pytest.fixture
def line_grid():
    """50 samples on [0, 4]."""
    return make_uniform_grid([(0.0, 4.0)], [50])


@pytest.fixture
def square_grid():
    """11 x 11 samples on [-2, 2]^2."""
    return make_uniform_grid([(-2.0, 2.0), (-2.0, 2.0)], [11, 11])


@pytest.fixture
def bump_measures(line_grid):
    """Two well separated Gaussian bumps on the line grid."""
    return [
        gaussian_mixture(line_grid, [[1.2]], [[0.1]]),
        gaussian_mixture(line_grid, [[2.8]], [[0.1]]),
    ]


@pytest.fixture
def functionals_by_kind(rng):
    """One summand per prox variant on 6 samples."""
    drift = rng.normal(scale=0.5, size=6)
    u = rng.normal(size=(6, 6))
    return {
        'linear': FreeEnergyFunctional(drift=drift),
        'log_entropy': FreeEnergyFunctional(drift=drift, internal=InternalEnergy.log_entropy(1.0)),
        'power_law': FreeEnergyFunctional(drift=drift, internal=InternalEnergy.power_law(1.0)),
        'interaction': FreeEnergyFunctional(drift=drift, interaction=0.5 * (u + u.T)),
    }


@pytest.fixture
def small_fpk_config(tmp_path):
    """FPK preset on a coarse grid that runs in seconds."""
    return SolveConfig(
        preset='fpk',
        grid={'bounds': [(-2.0, 2.0), (-2.0, 2.0)], 'counts': [9, 9]},
        max_outer_iters=4,
        snapshot_every=2,
        output_dir=str(tmp_path / 'run'),
    )
