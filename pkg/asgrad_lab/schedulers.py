# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Server-side job-assignment strategies.

A strategy decides which worker computes the next gradient and at which
model index. The engine calls :meth:`AssignmentStrategy.on_receive` exactly
once per received job, in receipt order, and schedules whatever
``(worker, model_index)`` pairs come back.

Supported strategy strings (see :func:`parse_strategy`)::

    pure
    pure-wait:b=4
    random
    random-wait:b=4
    shuffled:mode=cycle|once
    minibatch:b=32
    rr:mode=epoch|once
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, ClassVar, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvariantError, ParameterError
from .log import get_logger
from .rng import RandomStream

if TYPE_CHECKING:
    from .engine import Job

logger = get_logger("schedulers")

Assignment = Tuple[int, int]

_ALIASES: Dict[str, str] = {
    "pure": "pure",
    "pure-wait": "pure_waiting",
    "pure_waiting": "pure_waiting",
    "random": "random",
    "random-wait": "random_waiting",
    "random_waiting": "random_waiting",
    "shuffled": "shuffled",
    "minibatch": "minibatch",
    "rr": "reshuffling",
    "reshuffling": "reshuffling",
}
_GRAMMAR_NAMES: Dict[str, str] = {
    "pure": "pure",
    "pure_waiting": "pure-wait",
    "random": "random",
    "random_waiting": "random-wait",
    "shuffled": "shuffled",
    "minibatch": "minibatch",
    "reshuffling": "rr",
}
_MODES: Dict[str, Dict[str, str]] = {
    "shuffled": {"cycle": "every_cycle", "every_cycle": "every_cycle", "once": "once"},
    "reshuffling": {"epoch": "every_epoch", "every_epoch": "every_epoch", "once": "once"},
}
_DEFAULT_MODES = {"shuffled": "every_cycle", "reshuffling": "every_epoch"}
_BATCHED = frozenset({"pure_waiting", "random_waiting", "minibatch"})


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    b: Optional[int] = None
    mode: Optional[str] = None

    def label(self) -> str:
        """Render back to the CLI grammar."""
        name = _GRAMMAR_NAMES[self.kind]
        if self.kind in _BATCHED:
            return f"{name}:b={self.b}"
        if self.kind in _MODES:
            short = {"every_cycle": "cycle", "every_epoch": "epoch", "once": "once"}[self.mode or ""]
            return f"{name}:mode={short}"
        return name

    def validate(self, n: int) -> List[str]:
        errors: List[str] = []
        if self.kind not in _GRAMMAR_NAMES:
            errors.append(f"unknown strategy kind {self.kind!r}")
            return errors
        if self.kind in _BATCHED:
            if self.b is None or not 1 <= self.b <= n:
                errors.append(f"{self.label()}: b must lie in [1, n={n}]")
        elif self.b is not None:
            errors.append(f"{self.kind} takes no b parameter")
        if self.kind in _MODES:
            if self.mode not in _MODES[self.kind].values():
                errors.append(f"{self.kind}: unknown mode {self.mode!r}")
        elif self.mode is not None:
            errors.append(f"{self.kind} takes no mode parameter")
        return errors


def canonical_kind(name: str) -> str:
    """Map a grammar name or alias (``rr``, ``pure-wait``, ...) to its kind."""
    kind = _ALIASES.get(name.strip().lower())
    if kind is None:
        valid = ", ".join(sorted(_GRAMMAR_NAMES.values()))
        raise ParameterError(f"unknown strategy {name!r}; valid strategies: {valid}")
    return kind


def parse_strategy(text: str) -> StrategySpec:
    """Parse ``name[:key=value,...]`` into a :class:`StrategySpec`.

    Raises
    ------
    ParameterError
        For unknown names, unknown keys or malformed values.
    """
    name, _, params = text.strip().partition(":")
    kind = canonical_kind(name)
    b: Optional[int] = None
    mode: Optional[str] = _DEFAULT_MODES.get(kind)
    for item in filter(None, (p.strip() for p in params.split(","))):
        key, sep, value = item.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ParameterError(f"strategy parameter {item!r} must look like key=value")
        if key == "b" and kind in _BATCHED:
            try:
                b = int(value)
            except ValueError:
                raise ParameterError(f"b must be an integer, got {value!r}") from None
        elif key == "mode" and kind in _MODES:
            if value not in _MODES[kind]:
                valid = "|".join(k for k in _MODES[kind] if "_" not in k)
                raise ParameterError(f"{name}: mode must be {valid}, got {value!r}")
            mode = _MODES[kind][value]
        else:
            raise ParameterError(f"{name} does not accept parameter {key!r}")
    if kind in _BATCHED and b is None:
        raise ParameterError(f"{name} requires b, e.g. {name}:b=4")
    return StrategySpec(kind=kind, b=b, mode=mode)


class AssignmentStrategy(ABC):
    """Base class; one instance per run, owning its random stream."""

    kind: ClassVar[str]
    # Clients-as-points reductions run with zero compute time.
    sequential: ClassVar[bool] = False

    def __init__(self, spec: StrategySpec, n: int, rng: RandomStream) -> None:
        self.spec = spec
        self.n = n
        self.rng = rng

    @property
    def step_scale(self) -> float:
        """Factor applied to gamma for each per-gradient sub-update."""
        return 1.0

    def initial_assignments(self) -> List[int]:
        """Workers of the initial set, all at model index 0."""
        return list(range(self.n))

    @abstractmethod
    def on_receive(self, completed: "Job", t: int) -> List[Assignment]:
        """React to the job received at iteration ``t``."""


class PureStrategy(AssignmentStrategy):
    kind = "pure"

    def on_receive(self, completed: "Job", t: int) -> List[Assignment]:
        return [(completed.worker, t + 1)]


class _WaitingMixin:
    b: int

    def _round_model(self, t: int) -> int:
        return ((t + 1) // self.b) * self.b


class PureWaitingStrategy(_WaitingMixin, AssignmentStrategy):
    kind = "pure_waiting"

    def __init__(self, spec: StrategySpec, n: int, rng: RandomStream) -> None:
        super().__init__(spec, n, rng)
        self.b = int(spec.b or 1)
        self.buffer: List[int] = []

    @property
    def step_scale(self) -> float:
        return 1.0 / self.b

    def on_receive(self, completed: "Job", t: int) -> List[Assignment]:
        self.buffer.append(completed.worker)
        if len(self.buffer) > self.b:
            raise InvariantError(f"waiting buffer holds {len(self.buffer)} > b={self.b} receipts")
        if len(self.buffer) < self.b:
            return []
        alpha = self._round_model(t)
        flushed, self.buffer = self.buffer, []
        return [(worker, alpha) for worker in flushed]


class RandomStrategy(AssignmentStrategy):
    kind = "random"

    def on_receive(self, completed: "Job", t: int) -> List[Assignment]:
        return [(self.rng.uniform_index(self.n), t + 1)]


class RandomWaitingStrategy(_WaitingMixin, AssignmentStrategy):
    """Buffered random assignment; the b draws are independent, with replacement."""

    kind = "random_waiting"

    def __init__(self, spec: StrategySpec, n: int, rng: RandomStream) -> None:
        super().__init__(spec, n, rng)
        self.b = int(spec.b or 1)
        self.pending = 0

    @property
    def step_scale(self) -> float:
        return 1.0 / self.b

    def on_receive(self, completed: "Job", t: int) -> List[Assignment]:
        self.pending += 1
        if self.pending > self.b:
            raise InvariantError(f"waiting buffer holds {self.pending} > b={self.b} receipts")
        if self.pending < self.b:
            return []
        self.pending = 0
        alpha = self._round_model(t)
        return [(self.rng.uniform_index(self.n), alpha) for _ in range(self.b)]


class ShuffledStrategy(AssignmentStrategy):
    """Assign workers following a permutation ``chi``, cursor ``r``.

    With ``mode="every_cycle"`` a fresh permutation is drawn each time the
    cursor wraps; ``mode="once"`` keeps the first one.
    """

    kind = "shuffled"

    def __init__(
        self,
        spec: StrategySpec,
        n: int,
        rng: RandomStream,
        permutation: Optional[Sequence[int]] = None,
    ) -> None:
        super().__init__(spec, n, rng)
        self.chi = np.asarray(permutation) if permutation is not None else rng.permutation(n)
        if sorted(self.chi.tolist()) != list(range(n)):
            raise ParameterError(f"{self.chi.tolist()} is not a permutation of range({n})")
        self.cursor = 0

    def on_receive(self, completed: "Job", t: int) -> List[Assignment]:
        worker = int(self.chi[self.cursor])
        self.cursor += 1
        if self.cursor == self.n:
            self.cursor = 0
            if self.spec.mode == "every_cycle":
                self.chi = self.rng.permutation(self.n)
        return [(worker, t + 1)]


class MinibatchStrategy(AssignmentStrategy):
    """Mini-batch SGD over clients that are single data points."""

    kind = "minibatch"
    sequential = True

    def __init__(self, spec: StrategySpec, n: int, rng: RandomStream) -> None:
        super().__init__(spec, n, rng)
        self.b = int(spec.b or 1)
        self.outstanding = 0

    @property
    def step_scale(self) -> float:
        return 1.0 / self.b

    def _draw_batch(self) -> List[int]:
        self.outstanding = self.b
        return [int(i) for i in self.rng.sample_without_replacement(self.n, self.b)]

    def initial_assignments(self) -> List[int]:
        return self._draw_batch()

    def on_receive(self, completed: "Job", t: int) -> List[Assignment]:
        self.outstanding -= 1
        if self.outstanding < 0:
            raise InvariantError("minibatch received more jobs than it assigned")
        if self.outstanding > 0:
            return []
        return [(worker, t + 1) for worker in self._draw_batch()]


class ReshufflingStrategy(AssignmentStrategy):
    """Sequential pass over a permutation of the clients, one job in flight."""

    kind = "reshuffling"
    sequential = True

    def __init__(self, spec: StrategySpec, n: int, rng: RandomStream) -> None:
        super().__init__(spec, n, rng)
        self.order = rng.permutation(n)
        self.cursor = 0

    def initial_assignments(self) -> List[int]:
        self.cursor = 1
        return [int(self.order[0])]

    def on_receive(self, completed: "Job", t: int) -> List[Assignment]:
        if self.cursor == self.n:
            self.cursor = 0
            if self.spec.mode == "every_epoch":
                self.order = self.rng.permutation(self.n)
        worker = int(self.order[self.cursor])
        self.cursor += 1
        return [(worker, t + 1)]


STRATEGY_CLASSES: Dict[str, Callable[..., AssignmentStrategy]] = {
    "pure": PureStrategy,
    "pure_waiting": PureWaitingStrategy,
    "random": RandomStrategy,
    "random_waiting": RandomWaitingStrategy,
    "shuffled": ShuffledStrategy,
    "minibatch": MinibatchStrategy,
    "reshuffling": ReshufflingStrategy,
}


def build_strategy(spec: StrategySpec, n: int, seed: int) -> AssignmentStrategy:
    """Instantiate the strategy for ``spec`` on its own ``"strategy"`` stream."""
    errors = spec.validate(n)
    if errors:
        raise ParameterError("; ".join(errors))
    strategy = STRATEGY_CLASSES[spec.kind](spec, n, RandomStream(seed, "strategy"))
    logger.debug("built strategy %s for n=%d", spec.label(), n)
    return strategy
