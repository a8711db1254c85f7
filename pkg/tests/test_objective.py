# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from asgrad_lab.errors import DimensionError, ParameterError, WorkerIndexError
from asgrad_lab.objective import (
    ObjectiveHandle,
    all_local_grads,
    estimate_constants,
    estimate_gradient_variance,
    estimate_smoothness,
    global_grad,
    global_loss,
    local_grad,
    local_loss,
    loss_and_grad_norm_sq,
    regularizer,
    regularizer_grad,
    smoothness_upper_bound,
    softplus,
    stochastic_grad,
)
from asgrad_lab.rng import RandomStream


def _central_difference(func, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        grad[k] = (func(x + e) - func(x - e)) / (2 * h)
    return grad


@pytest.mark.parametrize("source", ["small_dataset", "libsvm_dataset"])
def test_local_grad_matches_finite_differences(request, source):
    obj = ObjectiveHandle(request.getfixturevalue(source), lam=0.1)
    rng = RandomStream(11, "probes")
    for _ in range(100):
        x = rng.standard_normal(obj.d)
        worker = rng.uniform_index(obj.n)
        numeric = _central_difference(lambda z: local_loss(obj, z, worker), x)
        exact = local_grad(obj, x, worker)
        assert np.linalg.norm(numeric - exact) <= 1e-5 * max(1.0, np.linalg.norm(exact))


def test_local_loss_at_origin_is_log_two(small_objective, libsvm_dataset):
    zero = np.zeros(small_objective.d)
    for worker in range(small_objective.n):
        assert local_loss(small_objective, zero, worker) == pytest.approx(np.log(2.0), rel=1e-12)
    other = ObjectiveHandle(libsvm_dataset, lam=0.1)
    assert local_loss(other, np.zeros(other.d), 2) == pytest.approx(np.log(2.0), rel=1e-12)


def test_regularizer_grad_matches_finite_differences():
    x = np.array([-2.0, -0.3, 0.0, 0.7, 5.0])
    numeric = _central_difference(regularizer, x)
    assert np.allclose(numeric, regularizer_grad(x), atol=1e-8)


def test_global_quantities_are_worker_averages(small_objective):
    x = RandomStream(2, "probes").standard_normal(small_objective.d)
    grads = all_local_grads(small_objective, x)
    for worker in range(small_objective.n):
        assert np.allclose(grads[worker], local_grad(small_objective, x, worker), atol=1e-12)
    assert np.allclose(global_grad(small_objective, x), grads.mean(axis=0), atol=1e-12)
    losses = [local_loss(small_objective, x, i) for i in range(small_objective.n)]
    assert global_loss(small_objective, x) == pytest.approx(np.mean(losses), rel=1e-12)
    loss, norm_sq = loss_and_grad_norm_sq(small_objective, x)
    g = global_grad(small_objective, x)
    assert loss == pytest.approx(global_loss(small_objective, x), rel=1e-12)
    assert norm_sq == pytest.approx(float(g @ g), rel=1e-10)


def test_softplus_is_stable_at_extremes():
    values = softplus(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(values))
    assert values[0] == pytest.approx(0.0, abs=1e-300)
    assert values[1] == pytest.approx(np.log(2.0))
    assert values[2] == pytest.approx(1000.0)


def test_full_batch_uses_no_randomness(small_objective):
    x = np.zeros(small_objective.d)
    rng = RandomStream(0, "gradients")
    reference = RandomStream(0, "gradients")
    full = stochastic_grad(small_objective, x, 1, small_objective.m, rng)
    assert np.array_equal(full, local_grad(small_objective, x, 1))
    assert rng.uniform_index(1000) == reference.uniform_index(1000)


def test_stochastic_grad_is_unbiased(small_objective):
    x = RandomStream(4, "probes").standard_normal(small_objective.d)
    rng = RandomStream(9, "gradients")
    draws = np.array([stochastic_grad(small_objective, x, 0, 5, rng) for _ in range(10_000)])
    error = np.abs(draws.mean(axis=0) - local_grad(small_objective, x, 0))
    assert np.all(error <= 3.0 * stats.sem(draws, axis=0))


def test_stochastic_grad_rejects_bad_batch(small_objective):
    x = np.zeros(small_objective.d)
    with pytest.raises(ParameterError):
        stochastic_grad(small_objective, x, 0, 0, RandomStream(0, "gradients"))
    with pytest.raises(ParameterError):
        stochastic_grad(small_objective, x, 0, small_objective.m + 1, RandomStream(0, "gradients"))


def test_shape_and_worker_errors(small_objective):
    with pytest.raises(DimensionError):
        local_grad(small_objective, np.zeros(small_objective.d + 1), 0)
    with pytest.raises(WorkerIndexError):
        local_grad(small_objective, np.zeros(small_objective.d), small_objective.n)
    with pytest.raises(IndexError):
        local_loss(small_objective, np.zeros(small_objective.d), -1)


def test_smoothness_estimate_below_upper_bound(small_objective):
    stream = RandomStream(1, "probes")
    probes = [stream.standard_normal(small_objective.d) for _ in range(6)]
    estimate = estimate_smoothness(small_objective, probes)
    assert 0.0 < estimate <= smoothness_upper_bound(small_objective) + 1e-12
    assert estimate_smoothness(small_objective, probes[:1]) == smoothness_upper_bound(small_objective)


def test_constants_vanish_for_identical_shards(homogeneous_dataset):
    obj = ObjectiveHandle(homogeneous_dataset)
    zeta_sq, g_hat = estimate_constants(obj, [np.ones(obj.d), np.zeros(obj.d)])
    assert zeta_sq == pytest.approx(0.0, abs=1e-20)
    assert g_hat > 0.0


def test_gradient_variance_zero_for_full_batch(small_objective):
    probes = [np.zeros(small_objective.d)]
    rng = RandomStream(0, "probes")
    assert estimate_gradient_variance(small_objective, probes, small_objective.m, rng) == 0.0
    assert estimate_gradient_variance(small_objective, probes, 2, rng, draws=8) > 0.0
