# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

from __future__ import annotations

import math

import numpy as np
import pytest

from asgrad_lab.diagnostics import delay_stats
from asgrad_lab.errors import IncompleteTraceError, ParseError
from asgrad_lab.trace_io import (
    TRACE_HEADER,
    load_trace,
    read_trace_csv,
    save_trace,
    snapshot_indices,
    tail_mean,
    trace_rows,
)


def test_trace_rows_follow_both_processes(two_worker_dataset, simulate):
    trace = simulate(two_worker_dataset, "pure", T=6)
    rows = trace_rows(trace)
    assert [row[4] for row in rows] == [0, 0, 2, 1, 0, 2]
    # k_t / alpha_t: the job of assigned index t + 1
    assert [row[5] for row in rows] == [0, 0, 1, 0, 0, 1]
    assert [row[6] for row in rows] == [1, 2, 3, 4, 5, 6]


def test_trace_rows_pad_missing_assignments(small_dataset, simulate):
    trace = simulate(small_dataset, "pure-wait:b=4", T=3)
    rows = trace_rows(trace)
    assert [(row[5], row[6]) for row in rows] == [(-1, -1)] * 3


def test_saved_trace_reloads(tmp_path, small_dataset, simulate):
    trace = simulate(small_dataset, "random", T=15, timing_kind="poisson")
    save_trace(tmp_path, trace)
    header = (tmp_path / "trace.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == ",".join(TRACE_HEADER)
    loaded = load_trace(tmp_path)
    assert loaded.records == trace.records
    assert loaded.jobs == trace.jobs
    assert loaded.received_step == trace.received_step
    assert loaded.unfinished == trace.unfinished
    assert loaded.gamma_eff == trace.gamma_eff
    for t, x in trace.snapshots.items():
        assert np.array_equal(loaded.snapshots[t], x)
    for jid, g in trace.job_gradients.items():
        assert np.array_equal(loaded.job_gradients[jid], g)


def test_sparse_snapshots_reload(tmp_path, small_dataset, simulate):
    trace = simulate(small_dataset, "pure", T=7, snapshot_every=3, keep_gradients=False)
    save_trace(tmp_path, trace)
    assert not (tmp_path / "gradients.bin").exists()
    loaded = load_trace(tmp_path)
    assert sorted(loaded.snapshots) == [0, 3, 6, 7]
    assert loaded.job_gradients == {}


def test_saving_is_byte_stable(tmp_path, small_dataset, simulate):
    for name in ("a", "b"):
        save_trace(tmp_path / name, simulate(small_dataset, "shuffled", T=10, seed=4))
    for artifact in ("trace.csv", "jobs.csv", "snapshots.bin", "gradients.bin", "trace_meta.yaml"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_load_errors(tmp_path, small_dataset, simulate):
    with pytest.raises(IncompleteTraceError):
        load_trace(tmp_path / "nowhere")
    save_trace(tmp_path, simulate(small_dataset, "pure", T=4))
    lines = (tmp_path / "trace.csv").read_text(encoding="utf-8").splitlines()
    (tmp_path / "trace.csv").write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
    with pytest.raises(IncompleteTraceError):
        load_trace(tmp_path)
    (tmp_path / "trace.csv").write_text("t,time\n0,1\n", encoding="utf-8")
    with pytest.raises(ParseError):
        read_trace_csv(tmp_path / "trace.csv")


def test_snapshot_indices():
    assert snapshot_indices(10, 3) == [0, 3, 6, 9, 10]
    assert snapshot_indices(9, 3) == [0, 3, 6, 9]
    assert snapshot_indices(0, 5) == [0]


def test_tail_mean():
    curve = np.arange(1.0, 21.0)
    assert tail_mean(curve) == pytest.approx(19.5)
    assert tail_mean(np.array([5.0])) == 5.0
    assert math.isinf(tail_mean(np.array([1.0, 2.0, np.inf])))
    assert tail_mean(np.array([1.0, 2.0, 4.0, np.nan]), fraction=0.5) == 4.0
    assert math.isinf(tail_mean(np.array([])))


def test_hand_ledger_survives_export(tmp_path, hand_ledger):
    save_trace(tmp_path, hand_ledger)
    loaded = load_trace(tmp_path)
    assert [job.job_id for job in loaded.unfinished] == [4]
    assert [r.in_flight for r in loaded.records] == [2, 2, 2, 2]
    rows = read_trace_csv(tmp_path / "trace.csv")
    assert [row["tau_t"] for row in rows] == [0, 1, 0, 2]
    assert [row["alpha_t"] for row in rows] == [1, 2, 3, -1]
    assert delay_stats(loaded).tau_avg == 0.8
