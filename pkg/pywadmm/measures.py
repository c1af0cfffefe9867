"""
Sample grids, discrete probability vectors, cost matrices and Gibbs kernels.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from scipy.stats import multivariate_normal

from pywadmm.schema import (
    KERNEL_MODE,
    CostMatrix,
    GibbsKernel,
    KernelRangeError,
    ProbabilityVector,
    SampleSet,
)

logger = logging.getLogger(__name__)

# exp(-x) stays a normal double for x below this exponent
DIRECT_MODE_MAX_EXPONENT = 700.0

CSV_FLOAT_FORMAT = '%.17g'


def make_uniform_grid(bounds: Sequence[tuple[float, float]], counts: Sequence[int]) -> SampleSet:
    """
    Builds a uniform tensor grid, ordered lexicographically by axis index
    (the first axis varies slowest).

    Args:
        bounds (Sequence[tuple[float, float]]): Interval [lo, hi] per axis.
        counts (Sequence[int]): Number of points per axis, at least 2.

    Returns:
        SampleSet: The grid.

    Raises:
        ValueError: If an interval is degenerate or a count is below 2.
    """
    if len(bounds) != len(counts) or len(bounds) == 0:
        raise ValueError('bounds and counts must have one entry per axis')
    axes = []
    for (lo, hi), count in zip(bounds, counts):
        if not lo < hi:
            raise ValueError(f'degenerate interval [{lo}, {hi}]')
        if count < 2:
            raise ValueError(f'need at least 2 points per axis, got {count}')
        axes.append(np.linspace(lo, hi, int(count)))
    mesh = np.meshgrid(*axes, indexing='ij')
    points = np.stack([m.ravel() for m in mesh], axis=1)
    return SampleSet(
        points=points,
        bounds=[(float(lo), float(hi)) for lo, hi in bounds],
        counts=[int(c) for c in counts],
    )


def normalize_density(values: np.ndarray) -> ProbabilityVector:
    """Floors a nonnegative density evaluated on samples and renormalizes it."""
    return ProbabilityVector.from_unnormalized(values)


def gaussian_mixture(
    samples: SampleSet,
    means: Sequence[Sequence[float]],
    cov: np.ndarray,
    weights: Sequence[float] | None = None,
) -> ProbabilityVector:
    """
    Evaluates a Gaussian mixture pointwise on the samples.

    Args:
        samples (SampleSet): Where to evaluate the density.
        means (Sequence[Sequence[float]]): One mean per component.
        cov (np.ndarray): Shared covariance, symmetric positive definite.
        weights (Sequence[float] | None): Mixture weights on the simplex, equal if omitted.

    Returns:
        ProbabilityVector: The floored and renormalized density.

    Raises:
        ValueError: If the covariance is not SPD or the weights are not on the simplex.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.allclose(cov, cov.T):
        raise ValueError('covariance matrix must be symmetric positive definite')
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError('covariance matrix must be symmetric positive definite')

    means = np.atleast_2d(np.asarray(means, dtype=float))
    if weights is None:
        weights = np.full(len(means), 1.0 / len(means))
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(means) or np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9:
        raise ValueError('mixture weights must lie on the simplex, one per component')

    density = np.zeros(samples.size)
    for mean, weight in zip(means, weights):
        density += weight * multivariate_normal(mean=mean, cov=cov).pdf(samples.points)
    return normalize_density(np.atleast_1d(density))


def cost_matrix(samples: SampleSet | np.ndarray) -> CostMatrix:
    """Squared Euclidean distance matrix C(i, j) = |theta_i - theta_j|^2."""
    points = samples.points if isinstance(samples, SampleSet) else np.atleast_2d(samples)
    entries = cdist(points, points, metric='sqeuclidean')
    np.fill_diagonal(entries, 0.0)
    return CostMatrix(entries=entries)


def gibbs_kernel(
    cost: CostMatrix, epsilon: float, mode: KERNEL_MODE | str = KERNEL_MODE.DIRECT
) -> GibbsKernel:
    """
    Builds Gamma = exp(-C / 2 epsilon).

    Args:
        cost (CostMatrix): Squared distances.
        epsilon (float): Entropic regularization, positive.
        mode (KERNEL_MODE | str): direct or log_domain.

    Returns:
        GibbsKernel: The kernel.

    Raises:
        KernelRangeError: In direct mode, if max(C) / 2 epsilon reaches the exponent guard.
    """
    if epsilon <= 0:
        raise ValueError(f'epsilon must be positive, got {epsilon}')
    mode = KERNEL_MODE(mode)
    log_gamma = -cost.entries / (2.0 * epsilon)
    max_exponent = float(-log_gamma.min(initial=0.0))
    if mode == KERNEL_MODE.DIRECT:
        if max_exponent >= DIRECT_MODE_MAX_EXPONENT:
            raise KernelRangeError(
                f'max(C)/(2 eps) = {max_exponent:.1f} exceeds {DIRECT_MODE_MAX_EXPONENT:.0f}; '
                'use log_domain kernel mode'
            )
        return GibbsKernel(epsilon=epsilon, mode=mode, log_gamma=log_gamma, gamma=np.exp(log_gamma))
    logger.debug('Log-domain kernel with max exponent %.1f', max_exponent)
    return GibbsKernel(epsilon=epsilon, mode=mode, log_gamma=log_gamma)


######################
# CSV export
######################


def measure_frame(samples: SampleSet, measure: ProbabilityVector) -> pd.DataFrame:
    """
    Tabulates a measure on its samples: columns x1..xd and prob, one row per sample.
    """
    if measure.size != samples.size:
        raise ValueError(f'measure has {measure.size} entries, sample set has {samples.size}')
    frame = pd.DataFrame(samples.points, columns=[f'x{i + 1}' for i in range(samples.dim)])
    frame['prob'] = measure.values
    return frame


def write_measure_csv(path: str | Path, samples: SampleSet, measure: ProbabilityVector) -> None:
    measure_frame(samples, measure).to_csv(
        path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator='\n'
    )


def read_measure_csv(path: str | Path) -> tuple[np.ndarray, ProbabilityVector]:
    """
    Reads a measure written by write_measure_csv.

    Returns:
        tuple[np.ndarray, ProbabilityVector]: Sample coordinates and the measure.
    """
    frame = pd.read_csv(path, float_precision='round_trip')
    coords = frame[[c for c in frame.columns if c != 'prob']].to_numpy()
    return coords, ProbabilityVector(values=frame['prob'].to_numpy())
