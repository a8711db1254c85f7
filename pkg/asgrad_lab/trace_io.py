# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Trace export and import.

A run directory holds::

    trace.csv        t,time,i_t,pi_t,tau_t,k_t,alpha_t,grad_norm_sq,loss
    jobs.csv         job_id,worker,model_index,assigned_step,received_step
    snapshots.bin    ASGD container, n=1, m=#snapshots, d
    gradients.bin    ASGD container, n=1, m=#jobs, d (optional)
    trace_meta.yaml  gamma, step scale, cadence, completion flag

Floats are written with 17 significant digits so every file re-parses to
the exact values. ``k_t``/``alpha_t`` hold the job of assigned index t + 1
(-1 when no job carries that index).
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import yaml

from .data import read_flat_binary, write_flat_binary
from .engine import IterationRecord, Job, Trace, in_flight_profile
from .errors import ConfigurationError, IncompleteTraceError, ParseError
from .files import write_file_atomic

TRACE_HEADER = ["t", "time", "i_t", "pi_t", "tau_t", "k_t", "alpha_t", "grad_norm_sq", "loss"]
JOBS_HEADER = ["job_id", "worker", "model_index", "assigned_step", "received_step"]

PathLike = Union[str, Path]


def format_float(value: float) -> str:
    return f"{float(value):.17g}"


def render_csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    return buffer.getvalue()


def read_csv(path: PathLike, header: Sequence[str]) -> List[Dict[str, str]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != list(header):
        raise ParseError(path, 1, f"expected header {','.join(header)}")
    return list(reader)


def trace_rows(trace: Trace) -> List[Tuple[object, ...]]:
    workers, models = trace.assigned_sequence()
    rows = []
    for record in trace.records:
        t = record.t
        k, alpha = int(workers[t]), int(models[t])
        rows.append(
            (
                t,
                float(record.time),
                record.worker,
                record.model_index,
                record.delay,
                k,
                alpha,
                float(record.grad_norm_sq),
                float(record.loss),
            )
        )
    return rows


def write_trace_csv(path: PathLike, trace: Trace) -> Path:
    return write_file_atomic(path, render_csv(TRACE_HEADER, trace_rows(trace)))


def read_trace_csv(path: PathLike) -> List[Dict[str, float]]:
    """Parse a trace CSV into typed rows."""
    rows = []
    for line_number, raw in enumerate(read_csv(path, TRACE_HEADER), start=2):
        try:
            rows.append(
                {
                    key: (float(value) if key in ("time", "grad_norm_sq", "loss") else int(value))
                    for key, value in raw.items()
                }
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(path, line_number, f"bad trace row: {exc}") from exc
    return rows


def snapshot_indices(T: int, every: int) -> List[int]:
    indices = list(range(0, T + 1, every))
    if indices[-1] != T:
        indices.append(T)
    return indices


def save_trace(run_dir: PathLike, trace: Trace) -> Path:
    """Write every trace artifact into ``run_dir``."""
    run_dir = Path(run_dir)
    write_trace_csv(run_dir / "trace.csv", trace)
    job_rows = [
        (job.job_id, job.worker, job.model_index, job.assigned_step, received)
        for job, received in zip(trace.jobs, trace.received_step)
    ]
    write_file_atomic(run_dir / "jobs.csv", render_csv(JOBS_HEADER, job_rows))
    indices = sorted(trace.snapshots)
    stacked = np.stack([trace.snapshots[t] for t in indices])
    write_flat_binary(run_dir / "snapshots.bin", stacked[None], np.ones((1, len(indices))))
    has_gradients = bool(trace.jobs) and all(j.job_id in trace.job_gradients for j in trace.jobs)
    if has_gradients:
        grads = np.stack([trace.job_gradients[j.job_id] for j in trace.jobs])
        write_flat_binary(run_dir / "gradients.bin", grads[None], np.ones((1, len(trace.jobs))))
    meta = {
        "gamma": format_float(trace.gamma),
        "step_scale": format_float(trace.step_scale),
        "n": trace.n,
        "d": trace.d,
        "T": trace.T,
        "snapshot_every": trace.snapshot_every,
        "snapshot_indices": "retained" if indices == snapshot_indices(trace.T, trace.snapshot_every) else indices,
        "complete": trace.unfinished is not None,
        "has_gradients": has_gradients,
    }
    write_file_atomic(run_dir / "trace_meta.yaml", yaml.safe_dump(meta, sort_keys=False))
    return run_dir


def load_trace(run_dir: PathLike) -> Trace:
    """Rebuild a :class:`Trace` from a directory written by :func:`save_trace`."""
    run_dir = Path(run_dir)
    meta_path = run_dir / "trace_meta.yaml"
    try:
        meta = yaml.safe_load(meta_path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise IncompleteTraceError(f"{run_dir} is not a run directory: {exc}") from exc
    trace = Trace(
        gamma=float(meta["gamma"]),
        step_scale=float(meta["step_scale"]),
        n=int(meta["n"]),
        d=int(meta["d"]),
        snapshot_every=int(meta["snapshot_every"]),
    )
    T = int(meta["T"])
    for line_number, raw in enumerate(read_csv(run_dir / "jobs.csv", JOBS_HEADER), start=2):
        try:
            values = {key: int(value) for key, value in raw.items()}
        except ValueError as exc:
            raise ParseError(run_dir / "jobs.csv", line_number, str(exc)) from exc
        trace.jobs.append(
            Job(values["worker"], values["model_index"], values["job_id"], values["assigned_step"])
        )
        trace.received_step.append(values["received_step"])

    made_at: Dict[int, List[Tuple[int, int]]] = defaultdict(list)
    for job in trace.jobs:
        made_at[job.assigned_step].append((job.worker, job.model_index))
    rows = read_trace_csv(run_dir / "trace.csv")
    if len(rows) != T:
        raise IncompleteTraceError(f"trace.csv holds {len(rows)} rows, expected {T}")
    for row in rows:
        trace.records.append(
            IterationRecord(
                t=row["t"],
                time=row["time"],
                worker=row["i_t"],
                model_index=row["pi_t"],
                in_flight=0,
                assignments=tuple(made_at.get(row["t"], [])),
                grad_norm_sq=row["grad_norm_sq"],
                loss=row["loss"],
            )
        )
    profile = in_flight_profile(trace)
    trace.records = [
        IterationRecord(r.t, r.time, r.worker, r.model_index, profile[r.t], r.assignments, r.grad_norm_sq, r.loss)
        for r in trace.records
    ]
    trace.final_in_flight = profile[T]

    features, _ = read_flat_binary(run_dir / "snapshots.bin")
    indices = meta["snapshot_indices"]
    if indices == "retained":
        indices = snapshot_indices(T, trace.snapshot_every)
    if features.shape[1] != len(indices):
        raise IncompleteTraceError(f"snapshots.bin holds {features.shape[1]} iterates, expected {len(indices)}")
    trace.snapshots = {int(t): features[0, pos] for pos, t in enumerate(indices)}
    if meta.get("has_gradients"):
        grads, _ = read_flat_binary(run_dir / "gradients.bin")
        trace.job_gradients = {job.job_id: grads[0, pos] for pos, job in enumerate(trace.jobs)}
    if meta.get("complete"):
        trace.unfinished = [
            job for job, received in zip(trace.jobs, trace.received_step) if received == -1
        ]
    return trace


def tail_mean(curve: np.ndarray, fraction: float = 0.1) -> float:
    """Mean of the last ``fraction`` of a curve (at least one point), NaNs ignored.

    Any ``inf`` in the window, which marks a diverged run, scores ``inf``.
    """
    if curve.size == 0:
        return math.inf
    width = max(1, int(math.ceil(fraction * curve.size)))
    window = curve[-width:]
    if np.any(np.isinf(window)):
        return math.inf
    finite = window[~np.isnan(window)]
    return float(finite.mean()) if finite.size else math.inf
