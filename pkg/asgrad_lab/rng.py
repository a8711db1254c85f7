# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Pinned, counter-based random streams.

Every random draw in a run comes from a :class:`RandomStream` backed by
numpy's Philox-4x64 bit generator. Streams are keyed by ``(seed,
component, index)`` through :class:`numpy.random.SeedSequence`, so each
concern (initial point, gradient batches, strategy, per-worker timing,
per-worker data generation) owns an independent, reproducible stream and
adding draws to one never shifts another.
"""

from __future__ import annotations

from typing import Dict

import numpy as np

# Component tags are part of the reproducibility contract; never renumber.
COMPONENTS: Dict[str, int] = {
    "init": 0,
    "gradients": 1,
    "strategy": 2,
    "timing": 3,
    "data": 4,
    "probes": 5,
}


class RandomStream:
    """Seeded wrapper around a Philox ``numpy.random.Generator``."""

    def __init__(self, seed: int, component: str = "init", index: int = 0) -> None:
        if component not in COMPONENTS:
            raise KeyError(f"unknown random component {component!r}")
        self.seed = int(seed)
        self.component = component
        self.index = int(index)
        sequence = np.random.SeedSequence(
            entropy=self.seed & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(COMPONENTS[component], self.index),
        )
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, component={self.component!r}, index={self.index})"

    def uniform_index(self, n: int) -> int:
        """One uniform draw from ``[0, n)``."""
        return int(self.generator.integers(0, n))

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of ``range(n)`` (Fisher-Yates inside numpy)."""
        return self.generator.permutation(n)

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``[0, n)`` in draw order."""
        return self.generator.permutation(n)[:k]

    def standard_normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def normal(self, mean: float, std: float) -> float:
        return float(self.generator.normal(mean, std))

    def poisson(self, lam: float) -> float:
        return float(self.generator.poisson(lam))

    def uniform(self, low: float, high: float, size=None):
        return self.generator.uniform(low, high, size)
