# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

from __future__ import annotations

import numpy as np
import pytest

from asgrad_lab.data import Dataset, SynConfig, generate_synthetic, load_libsvm
from asgrad_lab.engine import IterationRecord, Job, Trace, make_run_config, run
from asgrad_lab.objective import ObjectiveHandle
from asgrad_lab.rng import RandomStream
from asgrad_lab.schedulers import parse_strategy


@pytest.fixture
def small_dataset() -> Dataset:
    return generate_synthetic(SynConfig(alpha=1.0, beta=1.0, n=4, m=20, d=5, seed=3))


@pytest.fixture
def small_objective(small_dataset: Dataset) -> ObjectiveHandle:
    return ObjectiveHandle(small_dataset, lam=0.1)


@pytest.fixture
def two_worker_dataset() -> Dataset:
    return generate_synthetic(SynConfig(n=2, m=6, d=3, seed=0))


@pytest.fixture
def homogeneous_dataset() -> Dataset:
    """Every worker holds an identical shard, so local and global gradients agree."""
    base = generate_synthetic(SynConfig(n=1, m=12, d=4, seed=5))
    features = np.repeat(base.features, 3, axis=0)
    labels = np.repeat(base.labels, 3, axis=0)
    return Dataset(features, labels)


@pytest.fixture
def simulate():
    """Run a short simulation: ``simulate(dataset, "pure", gamma=0.01, T=30, **kwargs)``."""

    def _simulate(dataset: Dataset, strategy: str, gamma: float = 0.01, T: int = 30, **kwargs):
        return run(make_run_config(dataset, parse_strategy(strategy), gamma, T, **kwargs))

    return _simulate


@pytest.fixture
def libsvm_dataset(tmp_path) -> Dataset:
    """Three workers loaded from a sparse LibSVM file with 25 lines (one dropped)."""
    rng = RandomStream(21, "data")
    lines = []
    for row in range(25):
        label = "+1" if row % 2 else "-1"
        entries = [
            f"{idx}:{rng.normal(0.0, 1.5):.6f}" for idx in range(1, 7) if (row + idx) % 3 != 0
        ]
        lines.append(" ".join([label, *entries]))
    path = tmp_path / "toy.svm"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return load_libsvm(path, n=3, d=6)


@pytest.fixture
def hand_ledger() -> Trace:
    """T=4 with delays 0,1,0,2 and job (1, 3) still in flight: five jobs in ``A_5``."""
    jobs = [Job(0, 0, 0), Job(1, 0, 1), Job(0, 1, 2, 0), Job(1, 2, 3, 1), Job(1, 3, 4, 2)]
    received = [0, 1, 3, 2, -1]
    receipts = [(0, 0, 0), (1, 1, 0), (2, 1, 2), (3, 0, 1)]
    in_flight = [2, 2, 2, 2]
    trace = Trace(gamma=0.1, step_scale=1.0, n=2, d=1)
    trace.records = [
        IterationRecord(t=t, time=float(t + 1), worker=w, model_index=pi, in_flight=c)
        for (t, w, pi), c in zip(receipts, in_flight)
    ]
    trace.jobs = jobs
    trace.received_step = received
    trace.unfinished = [jobs[4]]
    trace.final_in_flight = 1
    trace.snapshots = {t: np.full(1, float(t)) for t in range(5)}
    return trace
