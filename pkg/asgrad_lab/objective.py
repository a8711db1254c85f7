# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Regularized logistic regression split across workers.

Worker ``i`` holds

    f_i(x) = (1/m) sum_j log(1 + exp(-b_ij a_ij.x)) + lam * sum_k x_k^2 / (1 + x_k^2)

and the global objective is ``f = (1/n) sum_i f_i``. All functions are
pure apart from the :class:`~asgrad_lab.rng.RandomStream` handed to
:func:`stochastic_grad`.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import DimensionError, ParameterError, WorkerIndexError
from .rng import RandomStream


@dataclass(frozen=True)
class ObjectiveHandle:
    dataset: Dataset
    lam: float = 0.1
    # b_ij * a_ij, shape (n, m, d)
    signed: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.lam >= 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        signed = self.dataset.labels[..., None] * self.dataset.features
        signed.flags.writeable = False
        object.__setattr__(self, "signed", signed)

    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def m(self) -> int:
        return self.dataset.m

    @property
    def d(self) -> int:
        return self.dataset.d


def softplus(u: np.ndarray) -> np.ndarray:
    """``log(1 + exp(u))`` without overflow, branching at ``u = 0``."""
    u = np.asarray(u, dtype=np.float64)
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


def regularizer(x: np.ndarray) -> float:
    sq = x * x
    return float(np.sum(sq / (1.0 + sq)))


def regularizer_grad(x: np.ndarray) -> np.ndarray:
    return 2.0 * x / (1.0 + x * x) ** 2


def _check(obj: ObjectiveHandle, x: np.ndarray, worker: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (obj.d,):
        raise DimensionError(f"expected a vector of length {obj.d}, got shape {x.shape}")
    if worker is not None and not 0 <= worker < obj.n:
        raise WorkerIndexError(f"worker {worker} outside [0, {obj.n})")
    return x


def local_loss(obj: ObjectiveHandle, x: np.ndarray, worker: int) -> float:
    x = _check(obj, x, worker)
    margins = obj.signed[worker] @ x
    return float(np.mean(softplus(-margins))) + obj.lam * regularizer(x)


def _logistic_grad(signed: np.ndarray, x: np.ndarray) -> np.ndarray:
    # mean over rows of -sigmoid(-z.x) * z
    weights = expit(-(signed @ x))
    return -(weights @ signed) / signed.shape[0]


def local_grad(obj: ObjectiveHandle, x: np.ndarray, worker: int) -> np.ndarray:
    x = _check(obj, x, worker)
    return _logistic_grad(obj.signed[worker], x) + obj.lam * regularizer_grad(x)


def stochastic_grad(
    obj: ObjectiveHandle,
    x: np.ndarray,
    worker: int,
    batch_size: int,
    rng: RandomStream,
) -> np.ndarray:
    """Mini-batch gradient of ``f_i``.

    ``batch_size`` samples are drawn uniformly without replacement from the
    worker's shard; the regularizer gradient is always exact. A full batch
    returns :func:`local_grad` itself and consumes no randomness.
    """
    if not 1 <= batch_size <= obj.m:
        raise ParameterError(f"batch_size must lie in [1, {obj.m}], got {batch_size}")
    if batch_size == obj.m:
        return local_grad(obj, x, worker)
    x = _check(obj, x, worker)
    rows = rng.sample_without_replacement(obj.m, batch_size)
    return _logistic_grad(obj.signed[worker][rows], x) + obj.lam * regularizer_grad(x)


def global_grad(obj: ObjectiveHandle, x: np.ndarray) -> np.ndarray:
    """``(1/n) sum_i local_grad(x, i)``, accumulated in worker order."""
    x = _check(obj, x)
    total = functools.reduce(np.add, (local_grad(obj, x, i) for i in range(obj.n)))
    return total / obj.n


def global_loss(obj: ObjectiveHandle, x: np.ndarray) -> float:
    x = _check(obj, x)
    margins = np.einsum("imd,d->im", obj.signed, x)
    return float(np.mean(softplus(-margins))) + obj.lam * regularizer(x)


def all_local_grads(obj: ObjectiveHandle, x: np.ndarray) -> np.ndarray:
    """Every worker's exact gradient at ``x`` as an ``(n, d)`` matrix."""
    x = _check(obj, x)
    weights = expit(-np.einsum("imd,d->im", obj.signed, x))
    data_part = -np.einsum("im,imd->id", weights, obj.signed) / obj.m
    return data_part + obj.lam * regularizer_grad(x)


def loss_and_grad_norm_sq(obj: ObjectiveHandle, x: np.ndarray) -> Tuple[float, float]:
    """``(f(x), ||grad f(x)||^2)`` in one pass over the data."""
    x = _check(obj, x)
    margins = np.einsum("imd,d->im", obj.signed, x)
    loss = float(np.mean(softplus(-margins))) + obj.lam * regularizer(x)
    weights = expit(-margins)
    grad = -np.einsum("im,imd->d", weights, obj.signed) / (obj.n * obj.m)
    grad = grad + obj.lam * regularizer_grad(x)
    return loss, float(grad @ grad)


def _probe_list(probe_points: Iterable[np.ndarray]) -> List[np.ndarray]:
    probes = [np.asarray(p, dtype=np.float64) for p in probe_points]
    if not probes:
        raise ParameterError("at least one probe point is required")
    return probes


def estimate_constants(
    obj: ObjectiveHandle, probe_points: Sequence[np.ndarray]
) -> Tuple[float, float]:
    """Empirical heterogeneity and gradient-size constants.

    Returns
    -------
    tuple[float, float]
        ``(zeta_sq_hat, g_hat)``: the maxima over probes and workers of
        ``||grad f_i(x) - grad f(x)||^2`` and ``||grad f_i(x)||``. Both are
        lower estimates of the true suprema over all of R^d.
    """
    zeta_sq, g_max = 0.0, 0.0
    for x in _probe_list(probe_points):
        grads = all_local_grads(obj, x)
        diffs = grads - grads.mean(axis=0)
        zeta_sq = max(zeta_sq, float(np.max(np.sum(diffs * diffs, axis=1))))
        g_max = max(g_max, float(np.max(np.linalg.norm(grads, axis=1))))
    return zeta_sq, g_max


def estimate_smoothness(obj: ObjectiveHandle, probe_points: Sequence[np.ndarray]) -> float:
    """Max over distinct probe pairs of ``||grad f(x) - grad f(y)|| / ||x - y||``.

    A single probe gives no pair; the analytic upper bound is returned then.
    """
    probes = _probe_list(probe_points)
    grads = [all_local_grads(obj, x).mean(axis=0) for x in probes]
    best = 0.0
    for a in range(len(probes)):
        for b in range(a + 1, len(probes)):
            step = float(np.linalg.norm(probes[a] - probes[b]))
            if step > 0.0:
                best = max(best, float(np.linalg.norm(grads[a] - grads[b])) / step)
    return best if best > 0.0 else smoothness_upper_bound(obj)


def smoothness_upper_bound(obj: ObjectiveHandle) -> float:
    """``max_i ||A_i||_2^2 / (4m) + 2 lam``, a valid constant for every f_i."""
    spectral = max(
        float(np.linalg.norm(obj.dataset.features[i], ord=2)) ** 2 for i in range(obj.n)
    )
    return spectral / (4.0 * obj.m) + 2.0 * obj.lam


def estimate_gradient_variance(
    obj: ObjectiveHandle,
    probe_points: Sequence[np.ndarray],
    batch_size: int,
    rng: RandomStream,
    draws: int = 32,
) -> float:
    """Largest mean squared deviation of ``stochastic_grad`` from ``local_grad``."""
    if batch_size >= obj.m:
        return 0.0
    worst = 0.0
    for x in _probe_list(probe_points):
        for i in range(obj.n):
            exact = local_grad(obj, x, i)
            acc = 0.0
            for _ in range(draws):
                delta = stochastic_grad(obj, x, i, batch_size, rng) - exact
                acc += float(delta @ delta)
            worst = max(worst, acc / draws)
    return worst
