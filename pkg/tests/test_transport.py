import numpy as np
import pytest

from conftest import random_measure
from pywadmm.measures import cost_matrix, gibbs_kernel
from pywadmm.schema import ConvergenceError, ProbabilityVector
from pywadmm.transport import (
    exact_wasserstein,
    plan_objective,
    sinkhorn_barycenter,
    sinkhorn_divergence,
)
from pywadmm.validation import monotone_wasserstein, permutation_wasserstein, sinkhorn_dual_value


######################
# Sinkhorn
######################


@pytest.mark.parametrize('kernel_name', ['small_kernel', 'small_kernel_log'])
def test_sinkhorn_plan_marginals(request, rng, kernel_name):
    """Test that the Sinkhorn plan has the requested marginals in both kernel modes."""
    kernel = request.getfixturevalue(kernel_name)
    mu, zeta = random_measure(rng, kernel.size), random_measure(rng, kernel.size)

    value, plan = sinkhorn_divergence(mu, zeta, kernel, tol=1e-12)

    np.testing.assert_allclose(plan.matrix.sum(axis=1), mu.values, atol=1e-12)
    np.testing.assert_allclose(plan.matrix.sum(axis=0), zeta.values, atol=1e-12)
    assert value == pytest.approx(plan_objective(plan.matrix, kernel))


def test_sinkhorn_matches_entropic_dual(rng, small_kernel):
    """Test strong duality against an independent dual maximization."""
    mu, zeta = random_measure(rng, small_kernel.size), random_measure(rng, small_kernel.size)

    primal, _ = sinkhorn_divergence(mu, zeta, small_kernel, tol=1e-12)

    assert primal == pytest.approx(sinkhorn_dual_value(mu, zeta, small_kernel), abs=1e-6)


def test_sinkhorn_rejects_zero_marginal(small_kernel):
    """Test that Sinkhorn requires strictly positive marginals."""
    mu = ProbabilityVector(values=[1.0, 0, 0, 0, 0, 0])

    with pytest.raises(ValueError, match='strictly positive'):
        sinkhorn_divergence(mu, ProbabilityVector.uniform(6), small_kernel)


def test_sinkhorn_reports_nonconvergence(rng, small_kernel):
    """Test that an exhausted sweep budget raises with the residual."""
    mu, zeta = random_measure(rng, small_kernel.size), random_measure(rng, small_kernel.size)

    with pytest.raises(ConvergenceError, match='Sinkhorn') as error:
        sinkhorn_divergence(mu, zeta, small_kernel, max_sweeps=1, tol=1e-15)
    assert error.value.iterations == 1


######################
# Exact transport
######################


def test_exact_wasserstein_identity_and_symmetry(rng):
    """Test W(mu, mu) = 0 and W(mu, zeta) = W(zeta, mu)."""
    cost = cost_matrix(rng.uniform(size=(7, 2)))
    mu, zeta = random_measure(rng, 7), random_measure(rng, 7)

    assert exact_wasserstein(mu, mu, cost) == pytest.approx(0.0, abs=1e-9)
    assert exact_wasserstein(mu, zeta, cost) == pytest.approx(
        exact_wasserstein(zeta, mu, cost), rel=1e-9
    )


def test_exact_wasserstein_point_masses():
    """Test the cost between two Dirac measures."""
    cost = cost_matrix(np.array([[0.0, 0.0], [3.0, 4.0]]))

    value = exact_wasserstein(
        ProbabilityVector(values=[1.0, 0.0]), ProbabilityVector(values=[0.0, 1.0]), cost
    )

    assert value == pytest.approx(25.0)


@pytest.mark.parametrize('seed', range(5))
def test_exact_wasserstein_uniform_is_assignment(seed):
    """Test uniform marginals against enumeration of all assignments."""
    rng = np.random.default_rng(seed)
    cost = cost_matrix(rng.uniform(size=(8, 2)))
    first = ProbabilityVector(values=[0.25] * 4 + [0.0] * 4)
    second = ProbabilityVector(values=[0.0] * 4 + [0.25] * 4)

    assert exact_wasserstein(first, second, cost) == pytest.approx(
        permutation_wasserstein(cost.entries[:4, 4:]), abs=1e-9
    )


@pytest.mark.parametrize('seed', range(5))
def test_exact_wasserstein_on_the_line(seed):
    """Test general marginals on the line against the monotone coupling."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=9)
    mu, zeta = random_measure(rng, 9), random_measure(rng, 9)

    assert exact_wasserstein(mu, zeta, cost_matrix(x[:, None])) == pytest.approx(
        monotone_wasserstein(x, mu.values, zeta.values), abs=1e-9
    )


######################
# Barycenter
######################


def test_barycenter_of_identical_measures(line_grid, bump_measures):
    """Test that the barycenter of a measure with itself is Gamma (mu / Gamma 1), normalized."""
    kernel = gibbs_kernel(cost_matrix(line_grid), 0.1)
    mu = bump_measures[0]

    bary = sinkhorn_barycenter([mu, mu], kernel)

    blurred = kernel.gamma @ (mu.values / (kernel.gamma @ np.ones(kernel.size)))
    np.testing.assert_allclose(bary.values, blurred / blurred.sum(), rtol=0, atol=1e-13)
    assert abs(bary.values.sum() - 1.0) < 1e-12


def test_barycenter_sits_between_bumps(line_grid, bump_measures):
    """Test that the barycenter of two bumps is centered between them."""
    kernel = gibbs_kernel(cost_matrix(line_grid), 0.1)

    bary = sinkhorn_barycenter(bump_measures, kernel)

    assert float(bary.values @ line_grid.points[:, 0]) == pytest.approx(2.0, abs=1e-2)
