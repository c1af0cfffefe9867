"""
The Wasserstein consensus ADMM outer loop.

One coordinator and n workers run barrier-synchronized rounds: proximal mu-updates per
worker, the zeta-update through the inner ADMM, then dual ascent on the multipliers.
Every cross-worker reduction is folded in worker index order, so results do not
depend on thread scheduling.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from typing import Iterator

import numpy as np

from pywadmm.functionals import free_energy, prox
from pywadmm.inner_admm import check_tau, map_workers, ordered_sum, run_inner
from pywadmm.pde_flows import compile_experiment
from pywadmm.schema import (
    CONSENSUS_POINT,
    BarycentricInputs,
    ConsensusReport,
    CostMatrix,
    Experiment,
    GibbsKernel,
    InnerDualState,
    IterationRecord,
    OuterState,
    ProbabilityVector,
    ProxParams,
    Snapshot,
    SolveConfig,
)
from pywadmm.transport import exact_wasserstein

logger = logging.getLogger(__name__)


def nu_sum(state: OuterState) -> np.ndarray:
    return ordered_sum(list(state.nus))


def mu_update_all(
    state: OuterState,
    kernel: GibbsKernel,
    params: ProxParams,
    executor: Executor | None = None,
) -> list[ProbabilityVector]:
    """
    Proximal update of every worker, anchored at the current zeta. Worker i only reads
    its functional, multiplier and previous iterate.

    Raises:
        WorkerError: Wrapping the failing worker's prox error.
    """

    def update(i: int) -> ProbabilityVector:
        return prox(state.functionals[i], state.nus[i], state.mus[i], state.zeta, kernel, params)

    return map_workers(update, range(state.n), executor)


def nu_update_all(
    state: OuterState, new_mus: list[ProbabilityVector], new_zeta: ProbabilityVector
) -> list[np.ndarray]:
    """nu_i + alpha (mu_i - zeta) for every worker."""
    if len(new_mus) != state.n:
        raise ValueError(f'expected {state.n} measures, got {len(new_mus)}')
    return [
        nu + state.alpha * (mu.values - new_zeta.values) for nu, mu in zip(state.nus, new_mus)
    ]


def consensus_point(state: OuterState, point: CONSENSUS_POINT = CONSENSUS_POINT.MEAN):
    if point == CONSENSUS_POINT.ZETA:
        return state.zeta
    return ProbabilityVector.from_unnormalized(
        ordered_sum([mu.values for mu in state.mus]) / state.n
    )


def consensus_report(
    state: OuterState,
    C: CostMatrix,
    point: CONSENSUS_POINT = CONSENSUS_POINT.MEAN,
) -> ConsensusReport:
    """
    Exact pairwise transport costs between the workers' measures and the summed free
    energy at the consensus point.
    """
    n = state.n
    pairwise = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            pairwise[i, j] = pairwise[j, i] = exact_wasserstein(state.mus[i], state.mus[j], C)
    center = consensus_point(state, point)
    objective = sum(free_energy(f, center) for f in state.functionals)
    return ConsensusReport(
        pairwise=pairwise, max_pairwise=float(pairwise.max()), objective=float(objective)
    )


class WassersteinConsensusADMM:
    """
    Runs the outer loop of a compiled experiment.

    The state, the inner ADMM state and the per-iteration history stay available on
    the instance, so a failed run keeps its partial trajectory.
    """

    def __init__(self, config: SolveConfig, experiment: Experiment | None = None):
        self.config = config
        self.experiment = experiment if experiment is not None else compile_experiment(config)
        n = len(self.experiment.functionals)
        mu0 = self.experiment.mu0
        self.state = OuterState(
            mus=[mu0] * n,
            zeta=mu0,
            nus=[np.zeros(mu0.size) for _ in range(n)],
            k=0,
            alpha=config.alpha,
            functionals=self.experiment.functionals,
        )
        self.inner_state: InnerDualState | None = None
        self.history: list[IterationRecord] = []
        self.last_snapshot: Snapshot | None = None
        self._tau_checked = False
        self._start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self._start

    def step(self, executor: Executor | None = None) -> IterationRecord:
        """One barrier-synchronized outer round."""
        config = self.config
        experiment = self.experiment
        state = self.state

        new_mus = mu_update_all(state, experiment.kernel, config.prox_params, executor)
        inputs = BarycentricInputs(
            mus=new_mus, kernel=experiment.kernel, nu_sum=nu_sum(state), alpha=state.alpha
        )
        if not self._tau_checked:
            check_tau(inputs, config.tau)
            self._tau_checked = True
        warm = self.inner_state if config.warm_start else None
        zeta, self.inner_state, deviation = run_inner(
            inputs, warm, config.inner_iters, config.tau, config.newton_params, executor
        )
        nus = nu_update_all(state, new_mus, zeta)
        self.state = OuterState(
            mus=new_mus,
            zeta=zeta,
            nus=nus,
            k=state.k + 1,
            alpha=state.alpha,
            functionals=state.functionals,
        )
        record = IterationRecord(
            k=self.state.k,
            primal_residual=max(float(np.abs(mu.values - zeta.values).sum()) for mu in new_mus),
            inner_deviation=deviation,
            wall_clock=self.elapsed,
        )
        self.history.append(record)
        logger.debug(
            'Outer iteration %s: primal residual %.3e, inner deviation %.3e',
            record.k,
            record.primal_residual,
            deviation,
        )
        return record

    def snapshot(self) -> Snapshot:
        report = consensus_report(self.state, self.experiment.cost, self.config.consensus_point)
        if self.history and self.history[-1].k == self.state.k:
            self.history[-1].max_pairwise = report.max_pairwise
            self.history[-1].objective = report.objective
        self.last_snapshot = Snapshot(
            k=self.state.k,
            mus=self.state.mus,
            zeta=self.state.zeta,
            nus=self.state.nus,
            report=report,
        )
        return self.last_snapshot

    def _converged(self, snapshot: Snapshot) -> bool:
        tol = self.config.consensus_tol
        if tol is None or math.isinf(tol) or snapshot.k == 0:
            return False
        return snapshot.report.max_pairwise <= tol

    def run(self) -> Iterator[Snapshot]:
        """
        Iterates until max_outer_iters or until the pairwise distances at a snapshot
        fall below consensus_tol, emitting the initial snapshot, one every
        snapshot_every iterations and the final one.
        """
        config = self.config
        logger.info(
            'Starting consensus ADMM: %s workers, %s samples, up to %s iterations',
            self.state.n,
            self.state.zeta.size,
            config.max_outer_iters,
        )
        self._start = time.perf_counter()
        yield self.snapshot()
        with ThreadPoolExecutor(max_workers=config.threads) as executor:
            pool = executor if config.threads > 1 else None
            while self.state.k < config.max_outer_iters:
                self.step(pool)
                k = self.state.k
                if k % config.snapshot_every == 0 or k == config.max_outer_iters:
                    snapshot = self.snapshot()
                    yield snapshot
                    if self._converged(snapshot):
                        logger.info(
                            'Consensus reached at iteration %s (max pairwise %.3e)',
                            k,
                            snapshot.report.max_pairwise,
                        )
                        break
        logger.info('Finished %s iterations in %.1f s', self.state.k, self.elapsed)


def run_outer(config: SolveConfig, experiment: Experiment | None = None) -> Iterator[Snapshot]:
    """Runs the consensus ADMM for a configuration and yields its snapshots."""
    yield from WassersteinConsensusADMM(config, experiment).run()
