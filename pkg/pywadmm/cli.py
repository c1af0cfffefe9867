"""Command-line interface for the Wasserstein consensus ADMM solver.

This module exposes three commands through Python Fire: ``solve`` runs a configured
gradient-flow experiment and writes its run directory, ``validate`` runs the oracle
suite and ``enumerate-groupings`` lists the ways to split summands over computers.
Results are printed as tables by pretty_printer.
"""

import logging
import sys
import time
from typing import Any, Optional, Sequence, Union

import tabulate
from fire import Fire
from pydantic import BaseModel, ValidationError

from pywadmm.config import parse_config
from pywadmm.outer_admm import WassersteinConsensusADMM
from pywadmm.pde_flows import (
    compile_experiment,
    count_groupings,
    distance_to_reference,
    enumerate_groupings,
    run_centralized,
)
from pywadmm.schema import (
    CheckResult,
    ConfigError,
    IterationRecord,
    SolveConfig,
    WassersteinADMMError,
)
from pywadmm.storage import RunStorage
from pywadmm.validation import run_oracle_suite

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_VALIDATION = 3


def pretty_printer(result: Any) -> Optional[Union[str, Any]]:
    """Formats command results for display in the terminal.

    Lists of dicts or BaseModel instances are displayed as tables, dicts as key/value
    tables and strings are wrapped with newlines. Other types are passed through to
    Fire's default formatting.

    Args:
        result: The data to format.

    Returns:
        Optional[Union[str, Any]]: The formatted string representation of the result,
            or None if the input was None.
    """
    if result is None:
        return

    # display a list of dicts as a table
    if isinstance(result, (list, tuple)) and (
        all(isinstance(x, dict) for x in result) or all(isinstance(x, BaseModel) for x in result)
    ):
        return tabulate.tabulate(
            [
                {
                    col: cell_format(value)
                    for col, value in (
                        row.items() if isinstance(row, dict) else row.model_dump().items()
                    )
                }
                for row in result
            ],
            headers='keys',
        )

    if isinstance(result, dict):
        return tabulate.tabulate(
            [(key, cell_format(value)) for key, value in result.items()],
            headers=['', 'value'],
        )

    return (
        '\n' + result + '\n' if isinstance(result, str) else result
    )  # otherwise, let fire handle it


def cell_format(value: Any, decimals: int = 6, bool: tuple[str, str] = ('✅', '❌')) -> str:
    """Formats individual cell values for table display.

    Args:
        value: The value to format. Can be a boolean, float, or any other type.
        decimals (int, optional): Significant digits shown for float values. Defaults to 6.
        bool (tuple[str, str], optional): Characters used for True and False values.
            Defaults to ('✅', '❌').

    Returns:
        str: The formatted string representation of the value.
    """
    if value is True:
        return bool[0]
    if value is False:
        return bool[1]
    if isinstance(value, float):
        return '{:.{}g}'.format(value, decimals)
    if isinstance(value, (list, tuple)):
        return ', '.join(cell_format(v, decimals, bool) for v in value)
    return value


######################
# Commands
######################


def solve_experiment(config: SolveConfig) -> dict[str, Any]:
    """
    Runs a configured experiment and writes its manifest, snapshots and metrics.

    Args:
        config (SolveConfig): The resolved configuration.

    Returns:
        dict[str, Any]: The run summary.

    Raises:
        StorageError: If the run directory cannot be written.
        WassersteinADMMError: If the solver fails; the metrics of the iterations done
            so far are written before the error propagates.
    """
    experiment = compile_experiment(config)
    storage = RunStorage(config.output_dir)
    storage.write_manifest(config)

    start = time.perf_counter()
    solver = None
    centralized_records: list[IterationRecord] = []
    if config.centralized:
        snapshots = run_centralized(config, experiment)
    else:
        solver = WassersteinConsensusADMM(config, experiment)
        snapshots = solver.run()

    last = None
    try:
        for snapshot in snapshots:
            storage.write_snapshot(experiment.samples, snapshot)
            last = snapshot
            if solver is None:
                centralized_records.append(
                    IterationRecord(
                        k=snapshot.k,
                        primal_residual=0.0,
                        wall_clock=time.perf_counter() - start,
                        max_pairwise=0.0,
                        objective=snapshot.report.objective,
                    )
                )
    except WassersteinADMMError as e:
        records = solver.history if solver is not None else centralized_records
        storage.write_metrics(records, {'error': str(e), 'iterations': last.k if last else 0})
        raise

    wall_time = time.perf_counter() - start
    summary: dict[str, Any] = {
        'iterations': last.k,
        'wall_time': wall_time,
        'max_pairwise': last.report.max_pairwise,
        'objective': last.report.objective,
    }
    if experiment.reference is not None:
        summary['reference_distance'] = [
            distance_to_reference(mu, experiment.reference, experiment.cost) for mu in last.mus
        ]
    records = solver.history if solver is not None else centralized_records
    storage.write_metrics(records, {**summary, 'pairwise': last.report.pairwise})
    logger.info('Run written to %s', storage.output_dir)
    return {**summary, 'output_dir': str(storage.output_dir)}


def cmd_solve(config: SolveConfig) -> int:
    """
    Runs an experiment, prints its summary and returns the exit status: 0 on completion,
    2 on solver or storage errors.
    """
    try:
        summary = solve_experiment(config)
    except WassersteinADMMError as e:
        logger.error('Solver error: %s', e)
        return EXIT_SOLVER
    print(pretty_printer(summary))
    return EXIT_OK


def cmd_validate(seed: int = 0) -> int:
    """Runs the oracle suite, prints one row per check and returns the exit status."""
    results = run_oracle_suite(seed)
    print(pretty_printer(results))
    return exit_status(results)


def exit_status(result: Any) -> int:
    if isinstance(result, list) and any(
        isinstance(r, CheckResult) and not r.passed for r in result
    ):
        return EXIT_VALIDATION
    return EXIT_OK


class WassersteinADMMCLI:
    """
    Distributed Wasserstein gradient flows by consensus ADMM.
    """

    def __init__(self):
        # exit status of the last command
        self.status = EXIT_OK

    def solve(
        self,
        config: Optional[str] = None,
        preset: Optional[str] = None,
        threads: Optional[int] = None,
        output: Optional[str] = None,
        snapshot_every: Optional[int] = None,
        max_iters: Optional[int] = None,
        centralized: bool = False,
        verbose: bool = False,
    ) -> None:
        """
        Runs an experiment. Flags take precedence over values from the config file.

        Args:
            config: INI configuration file, e.g. the manifest of an earlier run.
            preset: fpk, aggregation-case1 ... aggregation-case4 or aggregation-entropy.
            threads: Worker threads.
            output: Output directory.
            snapshot_every: Snapshot cadence in outer iterations.
            max_iters: Number of outer iterations.
            centralized: Run the single-functional proximal recursion instead.
            verbose: Log per-iteration diagnostics.
        """
        if verbose:
            logging.getLogger('pywadmm').setLevel(logging.DEBUG)
        resolved = parse_config(
            config,
            preset=preset,
            threads=threads,
            output_dir=output,
            snapshot_every=snapshot_every,
            max_outer_iters=max_iters,
            centralized=True if centralized else None,
        )
        self.status = cmd_solve(resolved)

    def validate(self, seed: int = 0) -> None:
        """Runs the oracle checks and reports their residuals."""
        self.status = cmd_validate(seed)

    def enumerate_groupings(
        self, n: int, r: Optional[int] = None, exclude_centralized: bool = False
    ) -> list[dict[str, Any]]:
        """
        Lists the groupings of n summands over at most r computers (r = n by default).
        """
        r = n if r is None else r
        groupings = enumerate_groupings(n, r, exclude_centralized)
        if len(groupings) != count_groupings(n, r, exclude_centralized):
            raise WassersteinADMMError('grouping enumeration disagrees with its count')
        return [
            {'#': index, 'computers': len(grouping), 'grouping': str(list(map(set, grouping)))}
            for index, grouping in enumerate(groupings, start=1)
        ]


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Executes one command and maps its outcome to an exit status: 0 on success, 1 for
    configuration errors, 2 for solver or storage errors and 3 for failed oracle checks.
    """
    cli = WassersteinADMMCLI()
    try:
        Fire(
            cli,
            command=list(argv) if argv is not None else None,
            name='pywadmm',
            serialize=pretty_printer,
        )
    except (ConfigError, ValidationError) as e:
        logger.error('Configuration error: %s', e)
        return EXIT_CONFIG
    except WassersteinADMMError as e:
        logger.error('Solver error: %s', e)
        return EXIT_SOLVER
    return cli.status


def main() -> None:
    """Entry point for the pywadmm CLI."""
    logging.basicConfig(
        level=logging.INFO, format='%(asctime)s %(levelname)s %(name)s: %(message)s'
    )
    sys.exit(run())


if __name__ == '__main__':
    main()
