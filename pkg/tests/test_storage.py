import json

import numpy as np
import pytest

from conftest import random_measure
from pywadmm.config import parse_config
from pywadmm.measures import make_uniform_grid
from pywadmm.schema import (
    ConsensusReport,
    IterationRecord,
    Snapshot,
    SolveConfig,
    StorageError,
)
from pywadmm.storage import RunStorage


@pytest.fixture
def storage(tmp_path):
    return RunStorage(tmp_path / 'run')


@pytest.fixture
def samples():
    return make_uniform_grid([(0.0, 1.0), (0.0, 1.0)], [3, 2])


def make_snapshot(rng, k: int, n_workers: int = 2) -> Snapshot:
    mus = [random_measure(rng, 6) for _ in range(n_workers)]
    pairwise = np.zeros((n_workers, n_workers))
    return Snapshot(
        k=k,
        mus=mus,
        zeta=random_measure(rng, 6),
        nus=[np.zeros(6)] * n_workers,
        report=ConsensusReport(pairwise=pairwise, max_pairwise=0.0, objective=1.0),
    )


######################
# Layout
######################


def test_creates_directories(tmp_path):
    """Test that the run and snapshot directories are created."""
    storage = RunStorage(tmp_path / 'a' / 'b')

    assert storage.snapshot_dir.is_dir()
    assert storage.output_dir == tmp_path / 'a' / 'b'


def test_unwritable_location(tmp_path):
    """Test that a file in place of the directory raises a StorageError."""
    blocker = tmp_path / 'blocker'
    blocker.write_text('')

    with pytest.raises(StorageError, match='Failed to create output directory'):
        RunStorage(blocker / 'run')


def test_file_names(storage):
    """Test the snapshot file naming."""
    assert storage.mu_path(1, 200).name == 'mu_1_200.csv'
    assert storage.zeta_path(0).name == 'zeta_0.csv'
    assert storage.manifest_path.name == 'manifest.ini'
    assert storage.metrics_path.name == 'metrics.json'


######################
# Snapshots
######################


def test_snapshot_round_trip(storage, samples, rng):
    """Test that written measures load back bit for bit."""
    snapshot = make_snapshot(rng, 100, n_workers=3)

    paths = storage.write_snapshot(samples, snapshot)
    mus, zeta = storage.load_snapshot(100)

    assert [p.name for p in paths] == [
        'mu_1_100.csv',
        'mu_2_100.csv',
        'mu_3_100.csv',
        'zeta_100.csv',
    ]
    assert len(mus) == 3
    for loaded, original in zip(mus, snapshot.mus):
        np.testing.assert_array_equal(loaded.values, original.values)
    np.testing.assert_array_equal(zeta.values, snapshot.zeta.values)


def test_snapshot_csv_layout(storage, samples, rng):
    """Test the header and the sample coordinates of a snapshot file."""
    storage.write_snapshot(samples, make_snapshot(rng, 0))

    lines = storage.zeta_path(0).read_text().splitlines()

    assert lines[0] == 'x1,x2,prob'
    assert len(lines) == 7
    assert [float(v) for v in lines[1].split(',')[:2]] == list(samples.points[0])


def test_list_snapshots(storage, samples, rng):
    """Test that snapshot indices are listed in numeric order."""
    for k in (200, 0, 100, 1000):
        storage.write_snapshot(samples, make_snapshot(rng, k))

    assert storage.list_snapshots() == [0, 100, 200, 1000]


def test_missing_snapshot(storage):
    """Test that loading an absent snapshot raises a StorageError."""
    with pytest.raises(StorageError, match='No snapshot 5'):
        storage.load_snapshot(5)


def test_snapshot_size_mismatch(storage, rng):
    """Test that measures on another sample set are rejected."""
    samples = make_uniform_grid([(0.0, 1.0)], [4])

    with pytest.raises(StorageError, match='Failed to write snapshot 0'):
        storage.write_snapshot(samples, make_snapshot(rng, 0))


######################
# Manifest and metrics
######################


def test_manifest_replays(storage):
    """Test that the manifest parses back to the same configuration."""
    config = SolveConfig(preset='aggregation-case2', beta=19.2, max_outer_iters=7)

    path = storage.write_manifest(config)

    assert parse_config(path) == config


def test_metrics_round_trip(storage):
    """Test the metrics layout and the conversion of numpy values."""
    records = [
        IterationRecord(k=1, primal_residual=0.5, inner_deviation=1e-3, wall_clock=0.1),
        IterationRecord(
            k=2, primal_residual=0.25, wall_clock=0.2, max_pairwise=1e-2, objective=3.0
        ),
    ]
    summary = {
        'iterations': np.int64(2),
        'max_pairwise': np.float64(1e-2),
        'pairwise': np.array([[0.0, 1e-2], [1e-2, 0.0]]),
        'reference_distance': [np.float64(0.1), 0.2],
    }

    storage.write_metrics(records, summary)
    metrics = storage.load_metrics()

    assert metrics['summary'] == {
        'iterations': 2,
        'max_pairwise': 1e-2,
        'pairwise': [[0.0, 1e-2], [1e-2, 0.0]],
        'reference_distance': [0.1, 0.2],
    }
    assert [r['k'] for r in metrics['records']] == [1, 2]
    assert metrics['records'][0]['max_pairwise'] is None
    assert json.loads(storage.metrics_path.read_text()) == metrics


def test_unserializable_metrics(storage):
    """Test that values JSON cannot represent raise a StorageError."""
    with pytest.raises(StorageError, match='Failed to serialize metrics'):
        storage.write_metrics([], {'solver': object()})


def test_missing_metrics(storage):
    """Test that loading absent metrics raises a StorageError."""
    with pytest.raises(StorageError, match='Failed to load metrics'):
        storage.load_metrics()
