# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

from __future__ import annotations

import math

import numpy as np
import pytest

from asgrad_lab.data import SynConfig, generate_synthetic, split_points
from asgrad_lab.engine import (
    TimingModel,
    finish,
    in_flight_profile,
    init_run,
    ledger_is_consistent,
    make_run_config,
    run,
    sample_compute_time,
    step,
)
from asgrad_lab.errors import (
    CadenceError,
    ConfigurationError,
    ContractViolation,
    DivergenceError,
    WorkerIndexError,
)
from asgrad_lab.objective import ObjectiveHandle, local_grad
from asgrad_lab.rng import RandomStream
from asgrad_lab.schedulers import PureStrategy, parse_strategy


def test_two_worker_fixed_timing_schedule(two_worker_dataset, simulate):
    # s = (1, 2): worker 0 finishes at 1, 2, 3, 4; worker 1 at 2, 4; ties pop worker 0 first
    trace = simulate(two_worker_dataset, "pure", T=6)
    assert [r.worker for r in trace.records] == [0, 0, 1, 0, 0, 1]
    assert [r.delay for r in trace.records] == [0, 0, 2, 1, 0, 2]
    assert [r.time for r in trace.records] == [1.0, 2.0, 2.0, 3.0, 4.0, 4.0]
    assert [r.in_flight for r in trace.records] == [2] * 6
    assert trace.final_in_flight == 2
    assert [job.model_index for job in trace.unfinished] == [5, 6]


def test_update_rule_replays_from_stored_gradients(small_dataset, simulate):
    trace = simulate(small_dataset, "random", gamma=0.05, T=25)
    received = trace.received_job_ids()
    x = trace.iterate(0)
    for t in range(trace.T):
        x = x - trace.gamma_eff * trace.job_gradients[received[t]]
        assert np.allclose(x, trace.iterate(t + 1), atol=1e-12)


def test_gradients_are_taken_at_the_assigned_model(small_dataset, simulate):
    trace = simulate(small_dataset, "pure", gamma=0.05, T=20)
    obj = ObjectiveHandle(small_dataset, 0.1)
    for job in trace.jobs:
        expected = local_grad(obj, trace.iterate(job.model_index), job.worker)
        assert np.allclose(trace.job_gradients[job.job_id], expected, atol=1e-12)


def test_runs_are_deterministic(small_dataset, simulate):
    a = simulate(small_dataset, "shuffled", T=40, timing_kind="poisson", batch_size=4, seed=3)
    b = simulate(small_dataset, "shuffled", T=40, timing_kind="poisson", batch_size=4, seed=3)
    c = simulate(small_dataset, "shuffled", T=40, timing_kind="poisson", batch_size=4, seed=4)
    assert a.records == b.records
    assert np.array_equal(a.iterate(40), b.iterate(40))
    assert not np.array_equal(a.iterate(40), c.iterate(40))


@pytest.mark.parametrize("strategy", ["pure", "random", "shuffled", "pure-wait:b=2", "random-wait:b=2"])
def test_in_flight_profile_matches_records(small_dataset, simulate, strategy):
    trace = simulate(small_dataset, strategy, T=30, timing_kind="uniform")
    profile = in_flight_profile(trace)
    assert profile[:-1] == [r.in_flight for r in trace.records]
    assert profile[-1] == trace.final_in_flight
    assert ledger_is_consistent(trace)
    assert all(r.model_index <= r.t for r in trace.records)


def test_async_strategies_keep_every_worker_busy(small_dataset, simulate):
    trace = simulate(small_dataset, "random", T=30)
    assert {r.in_flight for r in trace.records} == {small_dataset.n}


def test_reshuffling_is_sequential_sgd(small_dataset, simulate):
    trace = simulate(small_dataset, "rr", gamma=0.05, T=12)
    assert all(r.delay == 0 for r in trace.records)
    assert all(r.in_flight == 1 for r in trace.records)
    obj = ObjectiveHandle(small_dataset, 0.1)
    x = trace.iterate(0)
    for record in trace.records:
        x = x - 0.05 * local_grad(obj, x, record.worker)
    assert np.allclose(x, trace.iterate(12), atol=1e-12)
    workers = [r.worker for r in trace.records]
    for epoch in range(3):
        assert sorted(workers[4 * epoch : 4 * epoch + 4]) == [0, 1, 2, 3]


def test_minibatch_is_averaged_sgd(small_dataset, simulate):
    b = 2
    trace = simulate(small_dataset, f"minibatch:b={b}", gamma=0.1, T=10)
    assert [r.model_index for r in trace.records] == [(t // b) * b for t in range(10)]
    obj = ObjectiveHandle(small_dataset, 0.1)
    for start in range(0, 10, b):
        batch = [r.worker for r in trace.records[start : start + b]]
        assert len(set(batch)) == b
        x = trace.iterate(start)
        expected = x - 0.1 * np.mean([local_grad(obj, x, i) for i in batch], axis=0)
        assert np.allclose(trace.iterate(start + b), expected, atol=1e-12)


def test_zero_iterations(small_dataset, simulate):
    trace = simulate(small_dataset, "pure", T=0)
    assert trace.records == []
    assert trace.final_in_flight == small_dataset.n
    assert list(trace.snapshots) == [0]


def test_snapshot_cadence(small_dataset, simulate):
    trace = simulate(small_dataset, "pure", T=10, snapshot_every=3)
    assert sorted(trace.snapshots) == [0, 3, 6, 9, 10]
    with pytest.raises(CadenceError):
        trace.iterate(1)
    with pytest.raises(CadenceError):
        trace.require_full_history()


def test_metrics_cadence(small_dataset, simulate):
    trace = simulate(small_dataset, "pure", T=6, metrics_every=2)
    finite = [math.isfinite(r.grad_norm_sq) for r in trace.records]
    assert finite == [True, False, True, False, True, False]


def test_divergence_carries_partial_trace(small_dataset, simulate):
    with pytest.raises(DivergenceError) as excinfo:
        simulate(small_dataset, "pure", gamma=1e18, T=50)
    partial = excinfo.value.trace
    assert partial is not None
    assert 1 <= partial.T < 50
    assert partial.unfinished is None
    assert excinfo.value.exit_code == 3


def test_invalid_configuration(small_dataset):
    cfg = make_run_config(small_dataset, parse_strategy("pure-wait:b=9"), 0.01, 5)
    with pytest.raises(ConfigurationError):
        run(cfg)
    with pytest.raises(ConfigurationError):
        run(make_run_config(small_dataset, parse_strategy("pure"), -1.0, 5))
    with pytest.raises(ConfigurationError):
        run(make_run_config(small_dataset, parse_strategy("pure"), 0.01, 5, speeds=[1.0]))


class _FutureModelStrategy(PureStrategy):
    def on_receive(self, completed, t):
        return [(completed.worker, t + 2)]


def test_strategy_may_not_look_ahead(small_dataset):
    state = init_run(make_run_config(small_dataset, parse_strategy("pure"), 0.01, 3))
    bad = _FutureModelStrategy(state.strategy.spec, small_dataset.n, RandomStream(0, "strategy"))
    with pytest.raises(ContractViolation):
        step(state, bad)


def test_stepwise_driver_matches_run(small_dataset):
    cfg = make_run_config(small_dataset, parse_strategy("random"), 0.02, 15, seed=2)
    state = init_run(cfg)
    for _ in range(15):
        step(state)
    stepped = finish(state)
    whole = run(cfg)
    assert stepped.records == whole.records


def test_compute_time_models():
    rng = RandomStream(0, "timing", 1)
    fixed = TimingModel("fixed", (1.0, 3.0))
    assert sample_compute_time(fixed, 1, rng) == 3.0
    uniform = TimingModel("uniform", (1.0, 3.0))
    draws = [sample_compute_time(uniform, 1, rng) for _ in range(200)]
    assert all(0.0 < v <= 3.0 for v in draws)
    normal = TimingModel("normal", (1.0, 3.0))
    assert all(sample_compute_time(normal, 0, rng) >= 1.0 for _ in range(50))
    poisson = TimingModel("poisson", (1.0, 2.0))
    assert all(sample_compute_time(poisson, 0, rng) >= 1e-6 for _ in range(50))
    with pytest.raises(WorkerIndexError):
        sample_compute_time(fixed, 2, rng)
    assert TimingModel.default("fixed", 3).s == (1.0, 2.0, 3.0)


def test_minibatch_matches_direct_loop_on_point_clients():
    points = split_points(generate_synthetic(SynConfig(n=8, m=8, d=20, seed=1)))
    b, steps, gamma = 8, 50, 0.2
    trace = run(make_run_config(points, parse_strategy(f"minibatch:b={b}"), gamma, b * steps, seed=6))
    obj = ObjectiveHandle(points, 0.1)
    draws = RandomStream(6, "strategy")
    x = trace.iterate(0)
    for q in range(steps):
        batch = draws.sample_without_replacement(points.n, b)
        x = x - gamma * np.mean([local_grad(obj, x, int(i)) for i in batch], axis=0)
        reference = trace.iterate((q + 1) * b)
        assert np.linalg.norm(x - reference) <= 1e-12 * max(1.0, np.linalg.norm(reference))


def test_reshuffling_matches_direct_loop_exactly(small_dataset):
    n, epochs, gamma = small_dataset.n, 5, 0.05
    trace = run(make_run_config(small_dataset, parse_strategy("rr"), gamma, n * epochs, seed=2))
    obj = ObjectiveHandle(small_dataset, 0.1)
    stream = RandomStream(2, "strategy")
    x = trace.iterate(0)
    for _ in range(epochs):
        for worker in stream.permutation(n):
            x = x - gamma * local_grad(obj, x, int(worker))
    assert np.array_equal(x, trace.iterate(n * epochs))
