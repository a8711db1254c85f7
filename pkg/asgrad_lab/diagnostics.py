# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Post-hoc analysis of simulation traces.

Two index processes are studied:

* ``received``: ``(i_t, pi_t)`` for ``t = 0 .. T-1``, the order in which
  gradients are applied.
* ``assigned``: the post-initial assignments ``(k_s, alpha_s)`` by assigned
  index ``s = 1 .. T`` (see :meth:`Trace.assigned_indices`). A batch of
  ``b`` jobs flushed at one step occupies ``b`` consecutive indices; an
  index no job was given contributes nothing.

Expectations are plug-in means over the supplied traces (one per seed).
Every quantity here is a pure function of immutable traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .engine import Trace, in_flight_profile
from .errors import IncompleteTraceError, ParameterError
from .log import get_logger
from .objective import ObjectiveHandle, all_local_grads, global_grad, global_loss

logger = get_logger("diagnostics")

PROCESSES = ("received", "assigned")
TraceArg = Union[Trace, Sequence[Trace]]


@dataclass(frozen=True)
class DelayStats:
    tau_avg: float
    tau_max: int
    tilde_tau_avg: float
    tilde_tau_max: int
    tau_c: int

    def as_rows(self) -> List[Tuple[str, float]]:
        return [
            ("tau_avg", self.tau_avg),
            ("tau_max", self.tau_max),
            ("tilde_tau_avg", self.tilde_tau_avg),
            ("tilde_tau_max", self.tilde_tau_max),
            ("tau_c", self.tau_c),
        ]


@dataclass(frozen=True)
class CorrelationReport:
    tau: int
    process: str
    sigma_sq_per_chunk: List[float] = field(default_factory=list)
    nu_sq: Optional[float] = None
    num_runs: int = 1

    @property
    def sigma_sq_mean(self) -> float:
        return float(np.mean(self.sigma_sq_per_chunk)) if self.sigma_sq_per_chunk else 0.0


def _as_list(traces: TraceArg) -> List[Trace]:
    items = [traces] if isinstance(traces, Trace) else list(traces)
    if not items:
        raise ParameterError("at least one trace is required")
    return items


def _check_process(process: str) -> None:
    if process not in PROCESSES:
        raise ParameterError(f"process must be one of {PROCESSES}, got {process!r}")


def _index_sequence(trace: Trace, process: str) -> Tuple[np.ndarray, np.ndarray]:
    """``(workers, model_indices)`` of the chosen process, ``T`` long; ``-1`` marks a gap."""
    if process == "received":
        return trace.received_sequence()
    return trace.assigned_sequence()


class _GradientCache:
    """Per-iterate matrix of centred local gradients ``grad f_i(x) - grad f(x)``."""

    def __init__(self, trace: Trace, obj: ObjectiveHandle) -> None:
        self.trace = trace
        self.obj = obj
        self._cache: Dict[int, np.ndarray] = {}

    def centred(self, t: int) -> np.ndarray:
        if t not in self._cache:
            grads = all_local_grads(self.obj, self.trace.iterate(t))
            self._cache[t] = grads - grads.mean(axis=0)
        return self._cache[t]


def delay_stats(trace: Trace) -> DelayStats:
    """Average/maximum delays of both processes and the concurrency.

    ``tau_avg`` counts every assigned job: received ones contribute
    ``t - pi_t`` and unfinished ones ``T - j``.

    Raises
    ------
    IncompleteTraceError
        If the trace has no unfinished-job set (partial run).
    """
    if trace.unfinished is None:
        raise IncompleteTraceError("trace has no unfinished-job set; was the run completed?")
    T = trace.T
    delays = [r.t - r.model_index for r in trace.records]
    delays += [T - job.model_index for job in trace.unfinished]
    total = len(trace.jobs)
    tau_avg = sum(delays) / total if total else 0.0
    tau_max = max(delays, default=0)

    _, models = trace.assigned_sequence()
    tilde = [s + 1 - int(alpha) for s, alpha in enumerate(models) if alpha >= 0]
    tilde_avg = sum(tilde) / len(tilde) if tilde else 0.0
    profile = in_flight_profile(trace)
    return DelayStats(
        tau_avg=tau_avg,
        tau_max=int(tau_max),
        tilde_tau_avg=tilde_avg,
        tilde_tau_max=int(max(tilde, default=0)),
        tau_c=int(max(profile, default=0)),
    )


def _chunk_profile(cache: _GradientCache, workers: np.ndarray, start: int, tau: int) -> np.ndarray:
    """Squared norms of the partial sums for ``j = 0 .. tau-1`` of one chunk."""
    centred = cache.centred(start)
    chunk = workers[start : start + tau]
    picked = np.where((chunk >= 0)[:, None], centred[np.maximum(chunk, 0)], 0.0)
    if picked.shape[0] == 0:
        return np.zeros(tau)
    norms = np.sum(np.cumsum(picked, axis=0) ** 2, axis=1)
    if norms.shape[0] < tau:
        norms = np.concatenate([norms, np.full(tau - norms.shape[0], norms[-1])])
    return norms


def sequence_correlation(
    traces: TraceArg,
    tau: int,
    process: str,
    obj: ObjectiveHandle,
) -> CorrelationReport:
    """Per-chunk sequence correlation ``sigma^2_{k,tau}``.

    For chunk ``k`` the partial sums run over ``t = k*tau .. min(k*tau+j, T-1)``
    of ``grad f_{idx_t}(x_{k*tau}) - grad f(x_{k*tau})``; their squared norms
    are averaged over traces and maximized over ``j < tau``.

    Raises
    ------
    CadenceError
        If some ``x_{k*tau}`` was not retained.
    """
    _check_process(process)
    items = _as_list(traces)
    if tau < 1:
        raise ParameterError(f"tau must be >= 1, got {tau}")
    T = items[0].T
    if any(trace.T != T for trace in items):
        raise ParameterError("traces must share the iteration budget T")
    chunks = math.ceil(T / tau)
    caches = [_GradientCache(trace, obj) for trace in items]
    sequences = [_index_sequence(trace, process)[0] for trace in items]
    sigma: List[float] = []
    for k in range(chunks):
        profiles = [
            _chunk_profile(cache, workers, k * tau, tau)
            for cache, workers in zip(caches, sequences)
        ]
        sigma.append(float(np.max(np.mean(profiles, axis=0))))
    nu_sq: Optional[float] = None
    if all(t in trace.snapshots for trace in items for t in range(T + 1)):
        nu_sq = delay_variance(items, process, obj)
    return CorrelationReport(
        tau=tau, process=process, sigma_sq_per_chunk=sigma, nu_sq=nu_sq, num_runs=len(items)
    )


def _delay_variance_single(trace: Trace, process: str, obj: ObjectiveHandle) -> float:
    trace.require_full_history()
    cache = _GradientCache(trace, obj)
    workers, models = _index_sequence(trace, process)
    count = workers.shape[0]
    drift = np.zeros((count + 1, trace.d))
    for j in range(count):
        step = cache.centred(int(models[j]))[workers[j]] if workers[j] >= 0 else 0.0
        drift[j + 1] = drift[j] + step
    total = 0.0
    if process == "received":
        # window j = pi_t .. t-1 for received steps t = 0 .. T-1
        for t in range(count):
            window = drift[t] - drift[models[t]]
            total += float(window @ window)
    else:
        # assigned index s at position s - 1, window j = max(alpha_s, 1) .. s - 1
        for s in range(1, count + 1):
            if workers[s - 1] < 0:
                continue
            lo = max(int(models[s - 1]), 1)
            if lo <= s - 1:
                window = drift[s - 1] - drift[lo - 1]
                total += float(window @ window)
    return total


def delay_variance(traces: TraceArg, process: str, obj: ObjectiveHandle) -> float:
    """Delay variance ``nu^2`` of one process, averaged over traces.

    Received process::

        nu^2 = sum_t || sum_{j=pi_t}^{t-1} (grad f_{i_j}(x_{pi_j}) - grad f(x_{pi_j})) ||^2

    Raises
    ------
    CadenceError
        Unless every iterate ``x_0 .. x_T`` was retained.
    """
    _check_process(process)
    items = _as_list(traces)
    return float(np.mean([_delay_variance_single(trace, process, obj) for trace in items]))


def virtual_iterates(trace: Trace, tau: int, obj: ObjectiveHandle) -> Tuple[np.ndarray, float]:
    """Full-gradient shadow sequence restarted onto the real iterate every ``tau`` steps.

    Returns
    -------
    tuple[numpy.ndarray, float]
        The ``(T+1, d)`` sequence and ``max_t ||x_t - x~_t||``.
    """
    if tau < 1:
        raise ParameterError(f"tau must be >= 1, got {tau}")
    trace.require_full_history()
    gamma = trace.gamma_eff
    shadow = np.empty((trace.T + 1, trace.d))
    shadow[0] = trace.iterate(0)
    gap = 0.0
    for t in range(trace.T):
        if (t + 1) % tau == 0:
            shadow[t + 1] = trace.iterate(t + 1)
        else:
            shadow[t + 1] = shadow[t] - gamma * global_grad(obj, trace.iterate(t))
        gap = max(gap, float(np.linalg.norm(trace.iterate(t + 1) - shadow[t + 1])))
    return shadow, gap


def _require_gradients(trace: Trace) -> None:
    missing = [job.job_id for job in trace.jobs if job.job_id not in trace.job_gradients]
    if missing:
        raise IncompleteTraceError(
            f"{len(missing)} job gradients were not stored (first job id {missing[0]})"
        )


def assigned_virtual_iterates(trace: Trace, obj: ObjectiveHandle) -> Tuple[np.ndarray, float]:
    """Virtual sequence following the assignment process, and its identity residual.

    ``y_0 = x_0`` and ``y_{s+1} = y_s - gamma * g`` for the job of assigned
    index ``s``; ``y_1`` subtracts the whole initial set. The residual is
    ``max_t ||(x_t - y_t) - gamma * sum_{A_t \\ R_t} g||``, which vanishes up
    to rounding. ``A_t`` holds the jobs of index below ``t``; a job received
    before its index is reached counts negatively until then.

    Raises
    ------
    IncompleteTraceError
        If any job gradient was not stored.
    """
    _require_gradients(trace)
    trace.require_full_history()
    gamma = trace.gamma_eff
    T = trace.T
    entering: Dict[int, List[int]] = {}
    for job, index in zip(trace.jobs, trace.assigned_indices()):
        entering.setdefault(index + 1, []).append(job.job_id)
    received_at = {step: jid for jid, step in enumerate(trace.received_step) if step >= 0}
    zero = np.zeros(trace.d)
    ys = np.empty((T + 1, trace.d))
    y = trace.iterate(0).copy()
    in_flight = zero.copy()
    residual = 0.0
    for t in range(T + 1):
        ys[t] = y
        diff = (trace.iterate(t) - y) - gamma * in_flight
        residual = max(residual, float(np.linalg.norm(diff)))
        arriving = sum((trace.job_gradients[j] for j in entering.get(t + 1, [])), zero)
        y = y - gamma * arriving
        in_flight = in_flight + arriving
        if t in received_at:
            in_flight = in_flight - trace.job_gradients[received_at[t]]
    return ys, residual


def received_process_bound(F0: float, L: float, gamma: float, T: int, sigma_sq: float, Phi: float) -> float:
    """Received-process bound ``5 F0/(gamma T) + 25 L gamma sigma^2 + 35000 L^2 gamma^2 Phi``."""
    return 5.0 * F0 / (gamma * T) + 25.0 * L * gamma * sigma_sq + 35000.0 * L**2 * gamma**2 * Phi


def assigned_process_bound(
    F1: float,
    L: float,
    gamma: float,
    T: int,
    sigma_sq: float,
    tau_c: float,
    G: float,
    Phi_tilde: float,
) -> float:
    """Assigned-process bound.

    ``7 F1/(gamma T) + 2600 L^2 gamma^2 (tau_c - 1)^2 G^2 + 2600 L gamma sigma^2
    + 106000 L^2 gamma^2 Phi_tilde``.
    """
    return (
        7.0 * F1 / (gamma * T)
        + 2600.0 * L**2 * gamma**2 * (tau_c - 1) ** 2 * G**2
        + 2600.0 * L * gamma * sigma_sq
        + 106000.0 * L**2 * gamma**2 * Phi_tilde
    )


def phi_from_report(report: CorrelationReport, T: int) -> float:
    """``mean_k sigma^2_{k,tau} + nu^2 / T``."""
    nu_sq = report.nu_sq if report.nu_sq is not None else 0.0
    return report.sigma_sq_mean + (nu_sq / T if T > 0 else 0.0)


def received_process_conditions(L: float, gamma: float, tau_max: float, tau_c: float) -> Dict[str, bool]:
    return {
        "6*L*gamma<=1": 6.0 * L * gamma <= 1.0,
        "20*L*gamma*sqrt(tau_max*tau_c)<=1": 20.0 * L * gamma * math.sqrt(tau_max * tau_c) <= 1.0,
    }


def assigned_process_conditions(L: float, gamma: float, tilde_tau_max: float, tau_c: float) -> Dict[str, bool]:
    return {
        "6*L*gamma<=1": 6.0 * L * gamma <= 1.0,
        "30*L*gamma*max(tilde_tau_max,tau_c)<=1": 30.0 * L * gamma * max(tilde_tau_max, tau_c) <= 1.0,
    }


def default_correlation_period(
    L: float,
    gamma: float,
    T: int,
    rule: str = "received",
    n: int = 1,
    b: int = 1,
) -> int:
    """Correlation period for the diagnostics, clamped to ``[1, T]``.

    ``rule`` selects ``floor(1/(20 L gamma))`` (``received``),
    ``b * floor(1/(20 L gamma))`` (``waiting``), ``n * floor(1/(20 L n gamma))``
    (``reshuffling``), ``floor(1/(30 L gamma))`` (``assigned``) or
    ``n * floor(1/(30 L n gamma))`` (``shuffled``).
    """
    if not (L > 0 and gamma > 0):
        raise ParameterError("L and gamma must be positive")
    rules = {
        "received": lambda: math.floor(1.0 / (20.0 * L * gamma)),
        "waiting": lambda: b * math.floor(1.0 / (20.0 * L * gamma)),
        "reshuffling": lambda: n * math.floor(1.0 / (20.0 * L * n * gamma)),
        "assigned": lambda: math.floor(1.0 / (30.0 * L * gamma)),
        "shuffled": lambda: n * math.floor(1.0 / (30.0 * L * n * gamma)),
    }
    if rule not in rules:
        raise ParameterError(f"unknown correlation-period rule {rule!r}")
    return int(min(max(rules[rule](), 1), max(T, 1)))


def period_rule_for(kind: str) -> str:
    return {
        "pure_waiting": "waiting",
        "random_waiting": "waiting",
        "minibatch": "waiting",
        "reshuffling": "reshuffling",
        "shuffled": "shuffled",
        "random": "assigned",
    }.get(kind, "received")


def optimality_gaps(trace: Trace, obj: ObjectiveHandle) -> Tuple[float, float]:
    """Lower estimates ``(F0, F1)`` of ``f(x_0) - f*`` and ``f(y_1) - f*``.

    ``f*`` is replaced by the smallest loss seen along the trajectory.
    ``F1`` is NaN when the initial job gradients were not stored.
    """
    losses = [r.loss for r in trace.records if math.isfinite(r.loss)]
    f0 = global_loss(obj, trace.iterate(0))
    final = max(trace.snapshots)
    losses.append(global_loss(obj, trace.snapshots[final]))
    f_min = min(losses + [f0])
    initial = [job.job_id for job in trace.jobs if job.assigned_step < 0]
    if all(jid in trace.job_gradients for jid in initial):
        y1 = trace.iterate(0) - trace.gamma_eff * sum(
            (trace.job_gradients[j] for j in initial), np.zeros(trace.d)
        )
        f1 = global_loss(obj, y1)
        f_min = min(f_min, f1)
        F1 = f1 - f_min
    else:
        F1 = math.nan
    return f0 - f_min, F1


def delay_sum_check(trace: Trace) -> Tuple[int, int]:
    """``(sum_t tau_t, (tau_c - 1) * T)``; the first never exceeds the second."""
    lhs = sum(r.t - r.model_index for r in trace.records)
    tau_c = max(in_flight_profile(trace), default=1)
    return lhs, (tau_c - 1) * trace.T


def trajectory_probes(trace: Trace, count: int = 16) -> List[np.ndarray]:
    """Up to ``count`` retained iterates, evenly spread over the run."""
    keys = sorted(trace.snapshots)
    if len(keys) <= count:
        return [trace.snapshots[k] for k in keys]
    picks = np.linspace(0, len(keys) - 1, count).round().astype(int)
    return [trace.snapshots[keys[i]] for i in sorted(set(picks.tolist()))]
