# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Discrete-event simulation of an asynchronous parameter server.

The server loop is::

    for t = 0 .. T-1:
        pop the earliest completion (i_t, pi_t)
        x_{t+1} = x_t - gamma_eff * g_{i_t}(x_{pi_t})
        ask the strategy for new jobs (k, alpha) with alpha <= t+1
        realize each new job's gradient at x_alpha and schedule its completion

Jobs are kept in a ledger (assigned set ``A``, received set ``R``); the
in-flight set ``A \\ R`` is exactly the event queue. Gradients are sampled
at assignment time, so every in-flight job has a well-defined gradient.

Completion times: a job given to worker ``i`` starts when the worker is
free (jobs queue FIFO per worker) and lasts a duration drawn from that
worker's own timing stream. Simultaneous completions pop in
``(worker, job_id)`` order.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .errors import (
    CadenceError,
    ConfigurationError,
    ContractViolation,
    DivergenceError,
    InvariantError,
    ParameterError,
    WorkerIndexError,
)
from .log import get_logger
from .objective import ObjectiveHandle, local_grad, loss_and_grad_norm_sq, stochastic_grad
from .rng import RandomStream
from .schedulers import AssignmentStrategy, StrategySpec, build_strategy

logger = get_logger("engine")

TIMING_KINDS = ("fixed", "poisson", "normal", "uniform")
MIN_DURATION = 1e-6
DIVERGENCE_NORM = 1e12


@dataclass(frozen=True)
class Job:
    """Worker ``worker`` computes a gradient at ``x_{model_index}``.

    ``assigned_step`` is the iteration during which the server made the
    assignment, ``-1`` for the initial set.
    """

    worker: int
    model_index: int
    job_id: int
    assigned_step: int = -1


class JobLedger:
    """Assigned and received jobs, keyed by ``job_id``."""

    def __init__(self) -> None:
        self.assigned: Dict[int, Job] = {}
        self.received: Dict[int, int] = {}

    def assign(self, job: Job) -> None:
        if job.job_id in self.assigned:
            raise InvariantError(f"job id {job.job_id} assigned twice")
        self.assigned[job.job_id] = job

    def receive(self, job: Job, step: int) -> None:
        if job.job_id not in self.assigned:
            raise InvariantError(f"received unassigned job {job}")
        if job.job_id in self.received:
            raise InvariantError(f"job {job} received twice")
        self.received[job.job_id] = step

    def in_flight(self) -> List[Job]:
        return [job for jid, job in self.assigned.items() if jid not in self.received]

    @property
    def in_flight_count(self) -> int:
        return len(self.assigned) - len(self.received)


@dataclass(frozen=True)
class TimingModel:
    kind: str = "fixed"
    s: Tuple[float, ...] = ()

    @classmethod
    def default(cls, kind: str, n: int) -> "TimingModel":
        """Per-worker means ``s_i = i + 1``."""
        return cls(kind=kind, s=tuple(float(i + 1) for i in range(n)))

    def validate(self, n: int) -> List[str]:
        errors: List[str] = []
        if self.kind not in TIMING_KINDS:
            errors.append(f"timing kind must be one of {', '.join(TIMING_KINDS)}, got {self.kind!r}")
        if len(self.s) != n:
            errors.append(f"timing needs one speed per worker: {len(self.s)} given for n={n}")
        if any(not (v > 0 and math.isfinite(v)) for v in self.s):
            errors.append("timing speeds must be positive and finite")
        return errors


def sample_compute_time(model: TimingModel, worker: int, rng: RandomStream) -> float:
    """Draw one job duration for ``worker``.

    ``fixed`` returns ``s_i``; ``poisson`` draws ``Po(s_i)``; ``normal``
    draws ``s ~ N(s_i, s_i)`` (variance ``s_i``) and returns ``|s| + 1``;
    ``uniform`` draws ``Uni(0, s_i)``. Results are clamped below at 1e-6.
    """
    if not 0 <= worker < len(model.s):
        raise WorkerIndexError(f"worker {worker} outside [0, {len(model.s)})")
    mean = model.s[worker]
    if model.kind == "fixed":
        value = mean
    elif model.kind == "poisson":
        value = rng.poisson(mean)
    elif model.kind == "normal":
        value = abs(rng.normal(mean, math.sqrt(mean))) + 1.0
    elif model.kind == "uniform":
        value = float(rng.uniform(0.0, mean))
    else:
        raise ParameterError(f"unknown timing kind {model.kind!r}")
    return max(float(value), MIN_DURATION)


@dataclass(frozen=True)
class CompletionEvent:
    time: float
    job: Job
    gradient: np.ndarray = field(repr=False, compare=False)

    @property
    def sort_key(self) -> Tuple[float, int, int]:
        return (self.time, self.job.worker, self.job.job_id)


@dataclass(frozen=True)
class IterationRecord:
    t: int
    time: float
    worker: int
    model_index: int
    in_flight: int
    assignments: Tuple[Tuple[int, int], ...] = ()
    grad_norm_sq: float = math.nan
    loss: float = math.nan

    @property
    def delay(self) -> int:
        return self.t - self.model_index


@dataclass
class RunConfig:
    dataset: Dataset
    strategy: StrategySpec
    gamma: float
    T: int
    batch_size: Optional[int] = None
    timing: Optional[TimingModel] = None
    seed: int = 0
    snapshot_every: int = 1
    lam: float = 0.1
    metrics_every: int = 1
    keep_gradients: bool = True

    def resolved_timing(self) -> TimingModel:
        return self.timing if self.timing is not None else TimingModel.default("fixed", self.dataset.n)

    def validate(self) -> List[str]:
        errors: List[str] = []
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            errors.append(f"gamma must be positive, got {self.gamma}")
        if self.T < 0:
            errors.append(f"T must be >= 0, got {self.T}")
        if self.batch_size is not None and not 1 <= self.batch_size <= self.dataset.m:
            errors.append(f"batch_size must lie in [1, m={self.dataset.m}], got {self.batch_size}")
        if self.snapshot_every < 1:
            errors.append("snapshot_every must be >= 1")
        if self.metrics_every < 1:
            errors.append("metrics_every must be >= 1")
        if self.lam < 0:
            errors.append(f"lambda must be >= 0, got {self.lam}")
        errors.extend(self.resolved_timing().validate(self.dataset.n))
        errors.extend(self.strategy.validate(self.dataset.n))
        return errors


@dataclass
class Trace:
    """Everything a run produced.

    ``snapshots`` maps iteration index to ``x_t`` (every ``snapshot_every``
    steps, always including 0). ``jobs`` lists every assigned job in
    ``job_id`` order; ``received_step[job_id]`` is the receipt iteration or
    ``-1``. ``unfinished`` is ``A_{T+1} \\ R_T`` once the run completes and
    ``None`` for a partial trace.
    """

    gamma: float
    step_scale: float
    n: int
    d: int
    snapshot_every: int = 1
    records: List[IterationRecord] = field(default_factory=list)
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)
    jobs: List[Job] = field(default_factory=list)
    received_step: List[int] = field(default_factory=list)
    job_gradients: Dict[int, np.ndarray] = field(default_factory=dict)
    unfinished: Optional[List[Job]] = None
    final_in_flight: int = 0

    @property
    def T(self) -> int:
        return len(self.records)

    @property
    def gamma_eff(self) -> float:
        return self.gamma * self.step_scale

    @property
    def max_in_flight(self) -> int:
        counts = [r.in_flight for r in self.records] + [self.final_in_flight]
        return max(counts)

    def iterate(self, t: int) -> np.ndarray:
        try:
            return self.snapshots[t]
        except KeyError:
            raise CadenceError(
                f"x_{t} was not retained (snapshot_every={self.snapshot_every})"
            ) from None

    def require_full_history(self) -> None:
        missing = [t for t in range(self.T + 1) if t not in self.snapshots]
        if missing:
            raise CadenceError(
                f"{len(missing)} iterates missing (first x_{missing[0]}); rerun with snapshot_every=1"
            )

    def assigned_indices(self) -> List[int]:
        """Assigned-process index of every job, in ``job_id`` order.

        The initial set shares index 0. The ``j``-th job handed out while
        processing step ``s`` gets ``s + 1 + j``, so a batch flushed at
        ``s`` with model ``x_{s+1}`` has delays ``0 .. b-1``.
        """
        indices: List[int] = []
        previous, offset = None, 0
        for job in self.jobs:
            if job.assigned_step < 0:
                indices.append(0)
                continue
            offset = offset + 1 if job.assigned_step == previous else 0
            previous = job.assigned_step
            indices.append(job.assigned_step + 1 + offset)
        return indices

    def assigned_sequence(self) -> Tuple[np.ndarray, np.ndarray]:
        """``(k_s, alpha_s)`` for assigned indices ``s = 1 .. T`` at positions ``0 .. T-1``.

        Indices no job was given carry ``-1`` in both arrays.
        """
        workers = np.full(self.T, -1, dtype=np.int64)
        models = np.full(self.T, -1, dtype=np.int64)
        for job, index in zip(self.jobs, self.assigned_indices()):
            if not 1 <= index <= self.T:
                continue
            if workers[index - 1] >= 0:
                raise InvariantError(f"assigned index {index} given to two jobs")
            workers[index - 1] = job.worker
            models[index - 1] = job.model_index
        return workers, models

    def received_sequence(self) -> Tuple[np.ndarray, np.ndarray]:
        """``(i_t, pi_t)`` for ``t = 0 .. T-1``."""
        return (
            np.array([r.worker for r in self.records], dtype=np.int64),
            np.array([r.model_index for r in self.records], dtype=np.int64),
        )

    def received_job_ids(self) -> List[int]:
        by_step = {step: jid for jid, step in enumerate(self.received_step) if step >= 0}
        return [by_step[t] for t in range(self.T)]


@dataclass
class SimState:
    cfg: RunConfig
    obj: ObjectiveHandle
    strategy: AssignmentStrategy
    timing: TimingModel
    x: np.ndarray
    trace: Trace
    ledger: JobLedger = field(default_factory=JobLedger)
    queue: List[Tuple[float, int, int, CompletionEvent]] = field(default_factory=list)
    worker_free: List[float] = field(default_factory=list)
    timing_rngs: List[RandomStream] = field(default_factory=list)
    grad_rng: Optional[RandomStream] = None
    t: int = 0
    time: float = 0.0

    @property
    def gamma_eff(self) -> float:
        return self.trace.gamma_eff


def _realize_gradient(state: SimState, worker: int, x: np.ndarray) -> np.ndarray:
    batch = state.cfg.batch_size
    if batch is None or batch >= state.obj.m:
        return local_grad(state.obj, x, worker)
    return stochastic_grad(state.obj, x, worker, batch, state.grad_rng)


def _schedule(state: SimState, worker: int, model_index: int, x: np.ndarray, step: int) -> Job:
    job = Job(worker, model_index, len(state.trace.jobs), step)
    gradient = _realize_gradient(state, worker, x)
    state.ledger.assign(job)
    state.trace.jobs.append(job)
    state.trace.received_step.append(-1)
    if state.cfg.keep_gradients:
        state.trace.job_gradients[job.job_id] = gradient
    if state.strategy.sequential:
        duration = 0.0
    else:
        duration = sample_compute_time(state.timing, worker, state.timing_rngs[worker])
    start = max(state.time, state.worker_free[worker])
    event = CompletionEvent(start + duration, job, gradient)
    state.worker_free[worker] = event.time
    heapq.heappush(state.queue, (*event.sort_key, event))
    return job


def init_run(cfg: RunConfig) -> SimState:
    """Draw ``x_0``, build the strategy and schedule the initial job set.

    Raises
    ------
    ConfigurationError
        If the configuration or the strategy/dataset combination is invalid.
    """
    errors = cfg.validate()
    if errors:
        raise ConfigurationError("; ".join(errors))
    dataset = cfg.dataset
    obj = ObjectiveHandle(dataset, cfg.lam)
    strategy = build_strategy(cfg.strategy, dataset.n, cfg.seed)
    x0 = RandomStream(cfg.seed, "init").standard_normal(dataset.d)
    trace = Trace(
        gamma=cfg.gamma,
        step_scale=strategy.step_scale,
        n=dataset.n,
        d=dataset.d,
        snapshot_every=cfg.snapshot_every,
    )
    trace.snapshots[0] = x0.copy()
    state = SimState(
        cfg=cfg,
        obj=obj,
        strategy=strategy,
        timing=cfg.resolved_timing(),
        x=x0,
        trace=trace,
        worker_free=[0.0] * dataset.n,
        timing_rngs=[RandomStream(cfg.seed, "timing", i) for i in range(dataset.n)],
        grad_rng=RandomStream(cfg.seed, "gradients"),
    )
    for worker in strategy.initial_assignments():
        _schedule(state, int(worker), 0, x0, -1)
    logger.debug(
        "init %s gamma=%g T=%d seed=%d: %d initial jobs",
        cfg.strategy.label(), cfg.gamma, cfg.T, cfg.seed, len(state.queue),
    )
    return state


def step(state: SimState, strategy: Optional[AssignmentStrategy] = None) -> IterationRecord:
    """Run one server iteration and return its record."""
    strategy = strategy or state.strategy
    if not state.queue:
        raise InvariantError(f"event queue empty at t={state.t}")
    if len(state.queue) != state.ledger.in_flight_count:
        raise InvariantError("event queue out of sync with the job ledger")
    t, x_t = state.t, state.x
    in_flight = len(state.queue)
    *_, event = heapq.heappop(state.queue)
    if event.time < state.time:
        raise InvariantError(f"event at {event.time} precedes current time {state.time}")
    state.time = event.time
    job = event.job

    loss, grad_norm_sq = math.nan, math.nan
    if t % state.cfg.metrics_every == 0:
        loss, grad_norm_sq = loss_and_grad_norm_sq(state.obj, x_t)

    x_next = x_t - state.gamma_eff * event.gradient
    state.ledger.receive(job, t)
    state.trace.received_step[job.job_id] = t
    if (t + 1) % state.cfg.snapshot_every == 0:
        state.trace.snapshots[t + 1] = x_next

    assignments = strategy.on_receive(job, t)
    for worker, alpha in assignments:
        if alpha > t + 1 or alpha < 0:
            raise ContractViolation(
                f"{strategy.kind} assigned model index {alpha} at t={t} (allowed 0..{t + 1})"
            )
        if not 0 <= worker < state.obj.n:
            raise ContractViolation(f"{strategy.kind} assigned unknown worker {worker}")
        if alpha == t + 1:
            x_alpha = x_next
        else:
            try:
                x_alpha = state.trace.iterate(alpha)
            except CadenceError as exc:
                raise ContractViolation(f"stale model x_{alpha} is no longer available") from exc
        _schedule(state, int(worker), int(alpha), x_alpha, t)

    record = IterationRecord(
        t=t,
        time=state.time,
        worker=job.worker,
        model_index=job.model_index,
        in_flight=in_flight,
        assignments=tuple((int(k), int(a)) for k, a in assignments),
        grad_norm_sq=grad_norm_sq,
        loss=loss,
    )
    state.trace.records.append(record)
    state.x = x_next
    state.t = t + 1

    norm = float(np.linalg.norm(x_next))
    if not norm <= DIVERGENCE_NORM:
        state.trace.final_in_flight = len(state.queue)
        raise DivergenceError(
            f"||x|| = {norm:.3e} exceeds {DIVERGENCE_NORM:.0e} at t={t + 1}", trace=state.trace
        )
    return record


def finish(state: SimState) -> Trace:
    """Close the trace: record ``A_{T+1} \\ R_T`` and the final in-flight count."""
    trace = state.trace
    trace.unfinished = sorted(state.ledger.in_flight(), key=lambda job: job.job_id)
    trace.final_in_flight = len(trace.unfinished)
    if state.t not in trace.snapshots:
        trace.snapshots[state.t] = state.x
    return trace


def run(cfg: RunConfig) -> Trace:
    """Run ``cfg.T`` iterations and return the complete trace."""
    state = init_run(cfg)
    for _ in range(cfg.T):
        step(state, state.strategy)
    trace = finish(state)
    logger.debug("run finished: T=%d sim_time=%.3f in_flight=%d", trace.T, state.time, trace.final_in_flight)
    return trace


def in_flight_profile(trace: Trace) -> List[int]:
    """``|A_{t+1} \\ R_t|`` for ``t = 0 .. T`` rebuilt from the ledger alone."""
    # job is in flight for t in [assigned_step + 1, received_step]
    delta = np.zeros(trace.T + 2, dtype=np.int64)
    for job, received in zip(trace.jobs, trace.received_step):
        last = trace.T if received == -1 else received
        delta[job.assigned_step + 1] += 1
        delta[last + 1] -= 1
    return np.cumsum(delta)[: trace.T + 1].tolist()


def ledger_is_consistent(trace: Trace) -> bool:
    """``R_t`` is a subset of ``A_t`` for every ``t``: no job is received before it exists."""
    return all(
        received == -1 or received > job.assigned_step
        for job, received in zip(trace.jobs, trace.received_step)
    )


def make_run_config(
    dataset: Dataset,
    strategy: StrategySpec,
    gamma: float,
    T: int,
    *,
    timing_kind: str = "fixed",
    speeds: Optional[Sequence[float]] = None,
    **kwargs,
) -> RunConfig:
    """Convenience constructor filling in the default per-worker speeds."""
    timing = (
        TimingModel(timing_kind, tuple(float(v) for v in speeds))
        if speeds is not None
        else TimingModel.default(timing_kind, dataset.n)
    )
    return RunConfig(dataset=dataset, strategy=strategy, gamma=gamma, T=T, timing=timing, **kwargs)
