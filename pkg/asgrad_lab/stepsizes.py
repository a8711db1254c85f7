# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Tuned stepsizes per assignment strategy.

Each rule is the minimum over a handful of branches: hard caps that keep
the convergence guarantee valid, and the T-dependent branches that balance
the bound's terms. All hidden constants are set to 1. A branch whose
denominator vanishes (e.g. ``sigma_sq = 0`` for full gradients) is
inactive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

from .errors import ParameterError
from .schedulers import canonical_kind


@dataclass(frozen=True)
class StepsizeParams:
    L: float
    T: int
    F0: Optional[float] = None
    F1: Optional[float] = None
    sigma_sq: float = 0.0
    zeta_sq: float = 0.0
    G: float = 0.0
    tau_max: float = 0.0
    tau_c: float = 1.0
    n: int = 1
    b: int = 1

    def require(self, name: str) -> float:
        value = getattr(self, name)
        if value is None:
            raise ParameterError(f"this stepsize rule needs {name}")
        return float(value)


def _ratio(num: float, den: float) -> float:
    return math.inf if den <= 0 else num / den


def _root(value: float, power: float) -> float:
    return math.inf if math.isinf(value) else value ** power


def _pure(p: StepsizeParams) -> List[float]:
    F0 = p.require("F0")
    return [
        _ratio(1.0, 6 * p.L),
        _ratio(1.0, 20 * p.L * math.sqrt(p.tau_max * p.tau_c)),
        _root(_ratio(F0, p.L * p.sigma_sq * p.T), 0.5),
    ]


def _pure_waiting(p: StepsizeParams) -> List[float]:
    F0 = p.require("F0")
    return [
        _ratio(p.b, 6 * p.L),
        _ratio(p.b, 20 * p.L * math.sqrt(p.b * p.tau_max * p.tau_c)),
        _root(_ratio(F0 * p.b, p.L * p.sigma_sq * p.T), 0.5),
    ]


def _minibatch(p: StepsizeParams) -> List[float]:
    F0 = p.require("F0")
    return [
        _ratio(1.0, 20 * p.L),
        _root(_ratio(F0 * p.b, p.L * p.zeta_sq * p.T), 0.5),
    ]


def _reshuffling(p: StepsizeParams) -> List[float]:
    F0 = p.require("F0")
    return [
        _ratio(1.0, 20 * p.L * p.n),
        _root(_ratio(F0, p.L**2 * p.n * p.T * p.zeta_sq), 1.0 / 3.0),
    ]


def _random(p: StepsizeParams) -> List[float]:
    F1 = p.require("F1")
    return [
        _ratio(1.0, 6 * p.L),
        _ratio(1.0, 30 * p.L * p.tau_c),
        _root(_ratio(F1, p.L * p.sigma_sq * p.T), 0.5),
        _root(_ratio(F1, p.L * p.zeta_sq * p.T), 0.5),
        _root(_ratio(F1, p.L**2 * p.tau_c**2 * p.G**2 * p.T), 1.0 / 3.0),
    ]


def _random_waiting(p: StepsizeParams) -> List[float]:
    F1 = p.require("F1")
    return [
        _ratio(p.b, 6 * p.L),
        _ratio(p.b, 30 * p.L * max(p.b, p.tau_c)),
        _root(_ratio(F1 * p.b, p.L * p.sigma_sq * p.T), 0.5),
        _root(_ratio(F1 * p.b, p.L * p.zeta_sq * p.T), 0.5),
        _root(_ratio(F1 * p.b**2, p.L**2 * p.tau_c**2 * p.G**2 * p.T), 1.0 / 3.0),
    ]


def _shuffled(p: StepsizeParams) -> List[float]:
    F1 = p.require("F1")
    return [
        _ratio(1.0, 30 * p.L * p.n),
        _root(_ratio(F1, p.L**2 * p.n * p.zeta_sq * p.T), 1.0 / 3.0),
        _root(_ratio(F1, p.L**2 * p.n**2 * p.G**2 * p.zeta_sq * p.T), 1.0 / 3.0),
    ]


def _pure_bounded(p: StepsizeParams) -> List[float]:
    F1 = p.require("F1")
    return [
        _ratio(1.0, 6 * p.L),
        _ratio(1.0, 30 * p.L * p.tau_c),
        _root(_ratio(F1, p.L * p.sigma_sq * p.T), 0.5),
        _root(_ratio(F1, p.L**2 * p.tau_c**2 * p.G**2 * p.T), 1.0 / 3.0),
    ]


def _pure_waiting_bounded(p: StepsizeParams) -> List[float]:
    F1 = p.require("F1")
    return [
        _ratio(p.b, 6 * p.L),
        _ratio(p.b, 30 * p.L * max(p.b, p.tau_c)),
        _root(_ratio(F1 * p.b, p.L * p.sigma_sq * p.T), 0.5),
        _root(_ratio(F1 * p.b**2, p.L**2 * p.tau_c**2 * p.G**2 * p.T), 1.0 / 3.0),
    ]


STEPSIZE_RULES: Dict[str, Callable[[StepsizeParams], List[float]]] = {
    "pure": _pure,
    "pure_waiting": _pure_waiting,
    "random": _random,
    "random_waiting": _random_waiting,
    "shuffled": _shuffled,
    "minibatch": _minibatch,
    "reshuffling": _reshuffling,
}

BOUNDED_GRADIENT_RULES: Dict[str, Callable[[StepsizeParams], List[float]]] = {
    "pure": _pure_bounded,
    "pure_waiting": _pure_waiting_bounded,
}


def recommended_stepsize(
    method: str,
    params: StepsizeParams,
    assume_bounded_gradients: bool = False,
) -> float:
    """Tuned stepsize for ``method`` (a strategy kind or grammar name).

    With ``assume_bounded_gradients`` the pure strategies use the rule
    derived under a gradient-norm bound ``G`` instead of the delay bound.

    Raises
    ------
    ParameterError
        For unknown methods, missing inputs, or if every branch is inactive.
    """
    try:
        kind = canonical_kind(method)
    except ParameterError:
        raise ParameterError(f"no stepsize rule for method {method!r}") from None
    if not params.L > 0 or params.T < 1:
        raise ParameterError("stepsize rules need L > 0 and T >= 1")
    rules = BOUNDED_GRADIENT_RULES if assume_bounded_gradients and kind in BOUNDED_GRADIENT_RULES else STEPSIZE_RULES
    gamma = min(rules[kind](params))
    if math.isinf(gamma):
        raise ParameterError(f"every stepsize branch of {kind} is inactive for {params}")
    return gamma
