import logging

import numpy as np
import pytest

from conftest import TIGHT_PROX, random_measure
from pywadmm.functionals import (
    discretize_potentials,
    effective_drift,
    free_energy,
    log_entropy_duals,
    power_law_duals,
    prox,
    prox_linear,
    prox_log_entropy,
    prox_power_law,
)
from pywadmm.measures import cost_matrix, gibbs_kernel, make_uniform_grid
from pywadmm.pde_flows import aggregation_drift, aggregation_interaction, fpk_potential
from pywadmm.schema import (
    ConvergenceError,
    FreeEnergyFunctional,
    GibbsKernel,
    InternalEnergy,
    ProbabilityVector,
    ProxParams,
)
from pywadmm.transport import plan_objective, sinkhorn_divergence
from pywadmm.validation import (
    InteractionProxCheck,
    LinearProxCheck,
    LogEntropyProxCheck,
    PowerLawProxCheck,
    brute_force_prox,
)


def random_instance(seed: int, n: int = 3, epsilon: float = 0.1):
    rng = np.random.default_rng(seed)
    kernel = gibbs_kernel(cost_matrix(rng.uniform(size=(n, 2))), epsilon)
    return rng, kernel, random_measure(rng, n)


######################
# Effective drift
######################


def test_effective_drift_zero():
    """Test that a zero functional with zero multiplier has zero drift."""
    f = FreeEnergyFunctional(drift=np.zeros(4))

    np.testing.assert_array_equal(
        effective_drift(f, np.zeros(4), ProbabilityVector.uniform(4)), np.zeros(4)
    )


def test_effective_drift_uses_previous_iterate(functionals_by_kind, rng):
    """Test the semi-implicit interaction term drift + U mu_prev + nu."""
    f = functionals_by_kind['interaction']
    nu = rng.normal(size=6)
    mu_prev = random_measure(rng, 6)

    np.testing.assert_allclose(
        effective_drift(f, nu, mu_prev), f.drift + f.interaction @ mu_prev.values + nu
    )


def test_effective_drift_rejects_size_mismatch(functionals_by_kind):
    """Test that mismatched sizes are rejected."""
    with pytest.raises(ValueError, match='sizes differ'):
        effective_drift(functionals_by_kind['linear'], np.zeros(5), ProbabilityVector.uniform(6))


######################
# Linear prox
######################


def test_prox_linear_identity_kernel(rng):
    """Test that the identity kernel returns zeta."""
    zeta = random_measure(rng, 5)

    out = prox_linear(rng.normal(size=5), zeta, GibbsKernel.identity(5), alpha=1.0)

    np.testing.assert_allclose(out.values, zeta.values, rtol=1e-12)


def test_prox_linear_shift_invariance(rng, small_kernel):
    """Test that adding a constant to the drift does not change the output."""
    zeta = random_measure(rng, 6)
    a = rng.normal(size=6)

    np.testing.assert_allclose(
        prox_linear(a + 3.7, zeta, small_kernel, 1.0).values,
        prox_linear(a, zeta, small_kernel, 1.0).values,
        rtol=1e-12,
    )


def test_prox_linear_log_domain(rng, small_kernel, small_kernel_log):
    """Test that both kernel modes give the same linear prox."""
    zeta = random_measure(rng, 6)
    a = rng.normal(size=6)

    np.testing.assert_allclose(
        prox_linear(a, zeta, small_kernel_log, 2.0).values,
        prox_linear(a, zeta, small_kernel, 2.0).values,
        rtol=1e-10,
    )


def test_prox_dispatches_linear(functionals_by_kind, rng, small_kernel):
    """Test that a functional without internal energy uses the linear prox."""
    f = functionals_by_kind['linear']
    zeta = random_measure(rng, 6)

    out = prox(f, np.zeros(6), zeta, zeta, small_kernel, TIGHT_PROX)

    np.testing.assert_array_equal(out.values, prox_linear(f.drift, zeta, small_kernel, 1.0).values)


######################
# Brute-force oracles
######################


@pytest.mark.parametrize(
    'check',
    [LinearProxCheck, LogEntropyProxCheck, PowerLawProxCheck, InteractionProxCheck],
)
@pytest.mark.parametrize('seed', range(10))
def test_prox_matches_brute_force(check, seed):
    """Test every prox variant against direct minimization of the plan objective."""
    result = check(seed=seed).evaluate()

    assert result.passed, result


def test_log_entropy_matches_brute_force_large_alpha():
    """Test the entropy prox at alpha = 12 and eps = 0.1 against the plan oracle."""
    rng, kernel, zeta = random_instance(7)
    a = rng.normal(size=3)
    params = ProxParams(alpha=12.0, delta=1e-13, max_sweeps=10000)

    out = prox_log_entropy(1.0, a, zeta, kernel, params)
    reference = brute_force_prox(
        lambda mu: a @ mu + np.sum(mu * np.log(mu)),
        lambda mu: a + np.log(mu) + 1.0,
        zeta,
        kernel,
        12.0,
    )

    np.testing.assert_allclose(out.values, reference.values, atol=1e-6)


def test_brute_force_oracle_raises_when_unconverged():
    """Test that the plan oracle reports a KKT residual above its tolerance."""
    rng, kernel, zeta = random_instance(9)
    a = rng.normal(size=3)

    with pytest.raises(ConvergenceError, match='Plan oracle did not converge'):
        brute_force_prox(lambda mu: a @ mu, lambda mu: a, zeta, kernel, 1.0, tol=-1.0)


def test_log_entropy_small_beta_tends_to_uniform():
    """Test that a dominant entropy term pushes the prox toward the uniform measure."""
    _, kernel, zeta = random_instance(3)

    # the total mass contracts slowly at small beta; the normalized output does not
    params = ProxParams(alpha=1.0, delta=1e-8, max_sweeps=20000)

    out = prox_log_entropy(1e-3, np.zeros(3), zeta, kernel, params)

    np.testing.assert_allclose(out.values, 1.0 / 3.0, atol=1e-2)


######################
# Fixed-point residuals
######################


@pytest.mark.parametrize('seed', range(5))
def test_log_entropy_kkt(seed):
    """Test the stationarity -alpha eps log z = a + (log mu + 1) / beta at the fixed point."""
    rng, kernel, zeta = random_instance(seed)
    a, beta = rng.normal(size=3), 1.0

    duals, _, diagnostics = log_entropy_duals(beta, a, zeta, kernel, TIGHT_PROX)
    mu_raw = duals.z * kernel.apply(duals.y)

    assert diagnostics.converged
    residual = TIGHT_PROX.alpha * kernel.epsilon * duals.log_z + a + (np.log(mu_raw) + 1) / beta
    np.testing.assert_allclose(residual, 0.0, atol=1e-6)
    np.testing.assert_allclose(duals.y * kernel.apply(duals.z), zeta.values, atol=1e-6)
    assert abs(mu_raw.sum() - 1.0) < 1e-6


@pytest.mark.parametrize('seed', range(5))
def test_power_law_kkt(seed):
    """Test both residuals of the power-law dual system at the fixed point."""
    rng, kernel, zeta = random_instance(seed)
    a, beta = rng.normal(size=3), 1.0

    duals, _, diagnostics = power_law_duals(beta, a, zeta, kernel, TIGHT_PROX)
    mu_raw = duals.z * kernel.apply(duals.y)

    assert diagnostics.converged
    residual = TIGHT_PROX.alpha * kernel.epsilon * duals.log_z + a + 2.0 * mu_raw / beta
    np.testing.assert_allclose(residual, 0.0, atol=1e-6)
    np.testing.assert_allclose(duals.y * kernel.apply(duals.z), zeta.values, atol=1e-6)


def test_log_entropy_contraction_is_monotone():
    """Test that the relative change of z does not grow across sweeps."""
    rng, kernel, zeta = random_instance(11, n=6, epsilon=0.2)

    _, _, diagnostics = log_entropy_duals(1.0, rng.normal(size=6), zeta, kernel, TIGHT_PROX)
    changes = np.array(diagnostics.changes)
    changes = changes[changes > 1e-12]

    assert len(changes) > 5
    assert np.all(changes[1:] <= 1.1 * changes[:-1])


def test_fixed_point_nonconvergence_returns_last_iterate(caplog):
    """Test that an exhausted sweep budget logs a warning and still returns a measure."""
    rng, kernel, zeta = random_instance(2)
    params = ProxParams(alpha=1.0, delta=1e-15, max_sweeps=2)

    with caplog.at_level(logging.WARNING, logger='pywadmm.functionals'):
        duals, mu, diagnostics = log_entropy_duals(1.0, rng.normal(size=3), zeta, kernel, params)

    assert not diagnostics.converged
    assert diagnostics.sweeps == 2
    assert abs(mu.values.sum() - 1.0) < 1e-12
    assert 'not converged' in caplog.text


def test_power_law_symmetric_instance():
    """Test that a symmetric instance with zero drift yields a symmetric output."""
    points = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    kernel = gibbs_kernel(cost_matrix(points), 0.5)

    out = prox_power_law(1.0, np.zeros(3), ProbabilityVector.uniform(3), kernel, TIGHT_PROX)

    assert out.values[0] == pytest.approx(out.values[2], rel=1e-10)


######################
# Descent property
######################


@pytest.mark.parametrize('kind', ['linear', 'log_entropy', 'power_law', 'interaction'])
def test_prox_does_not_increase_plan_objective(kind, functionals_by_kind, rng, small_kernel):
    """Test that the prox output beats staying at zeta in the proximal objective."""
    f = functionals_by_kind[kind]
    zeta, mu_prev = random_measure(rng, 6), random_measure(rng, 6)
    nu = np.zeros(6)
    alpha = TIGHT_PROX.alpha
    linearized = FreeEnergyFunctional(drift=effective_drift(f, nu, mu_prev), internal=f.internal)

    def objective(plan: np.ndarray) -> float:
        mu = ProbabilityVector.from_unnormalized(plan.sum(axis=1))
        return plan_objective(plan, small_kernel) + free_energy(linearized, mu) / alpha

    out = prox(f, nu, mu_prev, zeta, small_kernel, TIGHT_PROX)
    # the optimal plans for fixed row marginals are the Sinkhorn plans
    _, plan_out = sinkhorn_divergence(out, zeta, small_kernel, tol=1e-12)
    _, plan_stay = sinkhorn_divergence(zeta, zeta, small_kernel, tol=1e-12)

    assert objective(plan_out.matrix) <= objective(plan_stay.matrix) + 1e-8


######################
# Free energy
######################


def test_free_energy_terms():
    """Test the drift, interaction and internal energy contributions."""
    mu = ProbabilityVector(values=[0.25, 0.75])
    drift = np.array([1.0, 2.0])
    interaction = np.array([[0.0, 1.0], [1.0, 0.0]])

    assert free_energy(FreeEnergyFunctional(drift=drift), mu) == pytest.approx(1.75)
    assert free_energy(
        FreeEnergyFunctional(drift=np.zeros(2), interaction=interaction), mu
    ) == pytest.approx(2 * 0.25 * 0.75)
    assert free_energy(
        FreeEnergyFunctional(drift=np.zeros(2), internal=InternalEnergy.power_law(2.0)), mu
    ) == pytest.approx((0.25**2 + 0.75**2) / 2.0)
    assert free_energy(
        FreeEnergyFunctional(drift=np.zeros(2), internal=InternalEnergy.log_entropy(1.0)), mu
    ) == pytest.approx(0.25 * np.log(0.25) + 0.75 * np.log(0.75))


def test_functional_rejects_asymmetric_interaction():
    """Test the symmetry check on interaction matrices."""
    with pytest.raises(ValueError, match='symmetric'):
        FreeEnergyFunctional(drift=np.zeros(2), interaction=np.array([[0.0, 1.0], [0.0, 0.0]]))


######################
# Potentials
######################


def test_fpk_potential_at_origin():
    """Test the direct evaluation of the double-well potential."""
    grid = make_uniform_grid([(-1.0, 1.0), (-1.0, 1.0)], [3, 3])

    drift, interaction = discretize_potentials(fpk_potential, None, grid, 5e-3)

    assert interaction is None
    assert drift[4] == pytest.approx(0.25)


def test_singular_potentials_are_regularized():
    """Test that logarithmic singularities are replaced by finite cell averages."""
    grid = make_uniform_grid([(-1.0, 1.0), (-1.0, 1.0)], [5, 5])

    drift, interaction = discretize_potentials(
        aggregation_drift, aggregation_interaction, grid, 5e-3
    )

    assert np.all(np.isfinite(drift))
    assert np.all(np.isfinite(interaction))
    np.testing.assert_array_equal(interaction, interaction.T)
    # the cell average of -log r / 4 near the origin exceeds its value at distance 0.5
    assert drift[12] > aggregation_drift(np.array([[0.5, 0.0]]))[0]
    np.testing.assert_allclose(np.diag(interaction), interaction[0, 0])


def test_discretize_potentials_rejects_nonpositive_h(square_grid):
    """Test the cell width check."""
    with pytest.raises(ValueError, match='half width'):
        discretize_potentials(fpk_potential, None, square_grid, 0.0)
