# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

from __future__ import annotations

from collections import Counter

import pytest

from asgrad_lab.engine import Job
from asgrad_lab.errors import ParameterError
from asgrad_lab.rng import RandomStream
from asgrad_lab.schedulers import (
    MinibatchStrategy,
    PureWaitingStrategy,
    ReshufflingStrategy,
    ShuffledStrategy,
    StrategySpec,
    build_strategy,
    canonical_kind,
    parse_strategy,
)


@pytest.mark.parametrize(
    "text, expected",
    [
        ("pure", StrategySpec("pure")),
        ("pure-wait:b=4", StrategySpec("pure_waiting", b=4)),
        ("random", StrategySpec("random")),
        ("random-wait:b=2", StrategySpec("random_waiting", b=2)),
        ("shuffled", StrategySpec("shuffled", mode="every_cycle")),
        ("shuffled:mode=once", StrategySpec("shuffled", mode="once")),
        ("minibatch:b=3", StrategySpec("minibatch", b=3)),
        ("rr", StrategySpec("reshuffling", mode="every_epoch")),
        ("rr:mode=once", StrategySpec("reshuffling", mode="once")),
    ],
)
def test_parse_strategy(text, expected):
    spec = parse_strategy(text)
    assert spec == expected
    assert parse_strategy(spec.label()) == spec


@pytest.mark.parametrize(
    "text",
    ["sgd", "pure-wait", "pure:b=2", "shuffled:mode=never", "minibatch:b=x", "random-wait:b"],
)
def test_parse_strategy_rejects(text):
    with pytest.raises(ParameterError):
        parse_strategy(text)


def test_canonical_kind_aliases():
    assert canonical_kind("RR") == "reshuffling"
    assert canonical_kind("pure-wait") == "pure_waiting"


def test_build_strategy_checks_b_against_n():
    with pytest.raises(ParameterError):
        build_strategy(parse_strategy("pure-wait:b=5"), n=4, seed=0)


def _receive(strategy, workers):
    out = []
    for t, worker in enumerate(workers):
        out.append(strategy.on_receive(Job(worker, 0, t, -1), t))
    return out


def test_pure_returns_sender_on_fresh_model():
    strategy = build_strategy(parse_strategy("pure"), n=3, seed=0)
    assert strategy.initial_assignments() == [0, 1, 2]
    assert _receive(strategy, [2, 0, 1]) == [[(2, 1)], [(0, 2)], [(1, 3)]]


def test_pure_waiting_flushes_every_b_receipts():
    strategy = PureWaitingStrategy(StrategySpec("pure_waiting", b=2), 3, RandomStream(0, "strategy"))
    assert strategy.step_scale == 0.5
    out = _receive(strategy, [1, 0, 2, 2])
    assert out == [[], [(1, 2), (0, 2)], [], [(2, 4), (2, 4)]]


def test_random_replays_single_draws():
    strategy = build_strategy(parse_strategy("random"), n=5, seed=7)
    replay = RandomStream(7, "strategy")
    out = _receive(strategy, [0] * 20)
    assert [pairs[0][0] for pairs in out] == [replay.uniform_index(5) for _ in range(20)]
    assert [pairs[0][1] for pairs in out] == list(range(1, 21))


def test_random_waiting_assigns_b_draws_at_round_start():
    strategy = build_strategy(parse_strategy("random-wait:b=3"), n=4, seed=2)
    replay = RandomStream(2, "strategy")
    out = _receive(strategy, [0, 1, 2, 3, 0, 1])
    assert out[0] == [] and out[1] == []
    assert out[2] == [(replay.uniform_index(4), 3) for _ in range(3)]
    assert out[5] == [(replay.uniform_index(4), 6) for _ in range(3)]


@pytest.mark.parametrize("mode", ["cycle", "once"])
def test_shuffled_is_fair_over_cycles(mode):
    n, cycles = 5, 4
    strategy = build_strategy(parse_strategy(f"shuffled:mode={mode}"), n=n, seed=3)
    out = _receive(strategy, [0] * (n * cycles))
    workers = [pairs[0][0] for pairs in out]
    for c in range(cycles):
        assert sorted(workers[c * n : (c + 1) * n]) == list(range(n))
    if mode == "once":
        assert workers[:n] == workers[n : 2 * n]


def test_shuffled_accepts_fixed_permutation():
    spec = StrategySpec("shuffled", mode="once")
    strategy = ShuffledStrategy(spec, 3, RandomStream(0, "strategy"), permutation=[2, 0, 1])
    assert [p[0][0] for p in _receive(strategy, [0] * 6)] == [2, 0, 1, 2, 0, 1]
    with pytest.raises(ParameterError):
        ShuffledStrategy(spec, 3, RandomStream(0, "strategy"), permutation=[0, 0, 1])


def test_minibatch_redraws_after_whole_batch():
    strategy = MinibatchStrategy(StrategySpec("minibatch", b=3), 6, RandomStream(1, "strategy"))
    first = strategy.initial_assignments()
    assert len(set(first)) == 3
    out = _receive(strategy, first)
    assert out[0] == [] and out[1] == []
    batch = out[2]
    assert len({worker for worker, _ in batch}) == 3
    assert {alpha for _, alpha in batch} == {3}
    assert strategy.sequential and strategy.step_scale == pytest.approx(1 / 3)


def test_reshuffling_covers_each_epoch():
    strategy = ReshufflingStrategy(StrategySpec("reshuffling", mode="every_epoch"), 4, RandomStream(5, "strategy"))
    workers = strategy.initial_assignments()
    out = _receive(strategy, [0] * 11)
    workers += [pairs[0][0] for pairs in out]
    assert sorted(workers[:4]) == [0, 1, 2, 3]
    assert sorted(workers[4:8]) == [0, 1, 2, 3]
    assert sorted(workers[8:12]) == [0, 1, 2, 3]
    assert [pairs[0][1] for pairs in out] == list(range(1, 12))


def test_reshuffling_once_repeats_order():
    strategy = build_strategy(parse_strategy("rr:mode=once"), n=3, seed=9)
    workers = strategy.initial_assignments() + [p[0][0] for p in _receive(strategy, [0] * 5)]
    assert workers[:3] == workers[3:]
    assert Counter(workers) == Counter({0: 2, 1: 2, 2: 2})


def test_random_assignment_counts_are_balanced():
    n, total = 10, 5000
    strategy = build_strategy(parse_strategy("random"), n=n, seed=11)
    counts = Counter(pairs[0][0] for pairs in _receive(strategy, [0] * total))
    slack = 4 * (total * (1 / n) * (1 - 1 / n)) ** 0.5
    assert all(abs(counts[w] - total / n) <= slack for w in range(n))


def test_shuffled_assigns_each_worker_once_per_cycle():
    n, cycles = 10, 50
    strategy = build_strategy(parse_strategy("shuffled"), n=n, seed=12)
    counts = Counter(pairs[0][0] for pairs in _receive(strategy, [0] * (n * cycles)))
    assert counts == Counter({w: cycles for w in range(n)})
