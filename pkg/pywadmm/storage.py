"""
Module for persisting solver runs.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from pywadmm.config import write_config
from pywadmm.measures import read_measure_csv, write_measure_csv
from pywadmm.schema import (
    IterationRecord,
    ProbabilityVector,
    SampleSet,
    Snapshot,
    SolveConfig,
    StorageError,
)

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.ini'
METRICS_FILE = 'metrics.json'
SNAPSHOT_DIR = 'snapshots'


class RunStorage:
    """
    Storage class for the files of one run: the manifest, measure snapshots and metrics.
    """

    def __init__(self, output_dir: str | Path = 'wadmm_output') -> RunStorage:
        """
        Initializes the RunStorage with the specified output directory.

        Args:
            output_dir (str | Path): The directory the run is written to.

        Raises:
            StorageError: If the directories cannot be created.
        """
        self.output_dir = Path(output_dir)
        self.snapshot_dir = self.output_dir / SNAPSHOT_DIR
        try:
            self.snapshot_dir.mkdir(exist_ok=True, parents=True)
        except Exception as e:
            raise StorageError(f'Failed to create output directory: {str(e)}')

    @property
    def manifest_path(self) -> Path:
        return self.output_dir / MANIFEST_FILE

    @property
    def metrics_path(self) -> Path:
        return self.output_dir / METRICS_FILE

    def mu_path(self, worker: int, k: int) -> Path:
        return self.snapshot_dir / f'mu_{worker}_{k}.csv'

    def zeta_path(self, k: int) -> Path:
        return self.snapshot_dir / f'zeta_{k}.csv'

    def write_manifest(self, config: SolveConfig) -> Path:
        """
        Writes the resolved configuration in the config file format.

        Raises:
            StorageError: If the manifest cannot be written.
        """
        try:
            self.manifest_path.write_text(write_config(config), encoding='UTF-8')
        except Exception as e:
            raise StorageError(f'Failed to write manifest: {str(e)}')
        return self.manifest_path

    def write_snapshot(self, samples: SampleSet, snapshot: Snapshot) -> list[Path]:
        """
        Writes one CSV per worker measure and one for zeta. Workers are numbered from 1.

        Args:
            samples (SampleSet): The sample locations written next to the masses.
            snapshot (Snapshot): The snapshot to persist.

        Returns:
            list[Path]: The written files.

        Raises:
            StorageError: If a file cannot be written.
        """
        paths = [self.mu_path(i, snapshot.k) for i in range(1, len(snapshot.mus) + 1)]
        paths.append(self.zeta_path(snapshot.k))
        try:
            for path, measure in zip(paths, [*snapshot.mus, snapshot.zeta]):
                write_measure_csv(path, samples, measure)
        except Exception as e:
            raise StorageError(f'Failed to write snapshot {snapshot.k}: {str(e)}')
        logger.info('Wrote snapshot %s to %s', snapshot.k, self.snapshot_dir)
        return paths

    def load_snapshot(self, k: int) -> tuple[list[ProbabilityVector], ProbabilityVector]:
        """
        Loads the worker measures and zeta of snapshot k.

        Raises:
            StorageError: If the snapshot does not exist or cannot be parsed.
        """
        zeta_path = self.zeta_path(k)
        if not zeta_path.exists():
            raise StorageError(f'No snapshot {k} in {self.snapshot_dir}')
        mus = []
        try:
            worker = 1
            while self.mu_path(worker, k).exists():
                mus.append(read_measure_csv(self.mu_path(worker, k))[1])
                worker += 1
            zeta = read_measure_csv(zeta_path)[1]
        except Exception as e:
            raise StorageError(f'Failed to load snapshot {k}: {str(e)}')
        return mus, zeta

    def list_snapshots(self) -> list[int]:
        return sorted(int(path.stem.split('_')[1]) for path in self.snapshot_dir.glob('zeta_*.csv'))

    def write_metrics(
        self, records: list[IterationRecord], summary: dict[str, Any]
    ) -> Path:
        """
        Writes the per-iteration records and the run summary as JSON.

        Raises:
            StorageError: If the metrics cannot be serialized or written.
        """
        try:
            payload = json.dumps(
                {
                    'records': [record.model_dump() for record in records],
                    'summary': _jsonable(summary),
                },
                indent=2,
            )
        except Exception as e:
            raise StorageError(f'Failed to serialize metrics: {str(e)}')
        try:
            self.metrics_path.write_text(payload, encoding='UTF-8')
        except Exception as e:
            raise StorageError(f'Failed to write metrics: {str(e)}')
        return self.metrics_path

    def load_metrics(self) -> dict[str, Any]:
        try:
            return json.loads(self.metrics_path.read_text(encoding='UTF-8'))
        except Exception as e:
            raise StorageError(f'Failed to load metrics: {str(e)}')


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value
