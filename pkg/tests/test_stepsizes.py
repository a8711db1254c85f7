# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

from __future__ import annotations

import pytest

from asgrad_lab.errors import ParameterError
from asgrad_lab.stepsizes import StepsizeParams, recommended_stepsize


def test_pure_rule_takes_the_delay_branch():
    params = StepsizeParams(L=1.0, T=100, F0=1.0, sigma_sq=0.0, tau_max=4, tau_c=4)
    assert recommended_stepsize("pure", params) == pytest.approx(1 / 80)


def test_pure_rule_noise_branch():
    params = StepsizeParams(L=1.0, T=10_000, F0=1.0, sigma_sq=1.0, tau_max=1, tau_c=1)
    assert recommended_stepsize("pure", params) == pytest.approx(0.01)


def test_waiting_rule_scales_with_b():
    base = StepsizeParams(L=1.0, T=100, F0=1.0, tau_max=1, tau_c=1, b=1)
    waiting = StepsizeParams(L=1.0, T=100, F0=1.0, tau_max=1, tau_c=1, b=4)
    assert recommended_stepsize("pure-wait", base) == pytest.approx(1 / 20)
    assert recommended_stepsize("pure_waiting", waiting) == pytest.approx(4 / 40)


def test_reduction_rules():
    rr = StepsizeParams(L=1.0, T=1000, F0=1.0, zeta_sq=1.0, n=10)
    assert recommended_stepsize("rr", rr) == pytest.approx(0.005)
    minibatch = StepsizeParams(L=1.0, T=100, F0=1.0, zeta_sq=100.0, b=4)
    assert recommended_stepsize("minibatch", minibatch) == pytest.approx(0.02)


def test_assigned_rules_use_F1():
    shuffled = StepsizeParams(L=1.0, T=100, F1=1.0, n=2)
    assert recommended_stepsize("shuffled", shuffled) == pytest.approx(1 / 60)
    random = StepsizeParams(L=1.0, T=100, F1=1.0, tau_c=5)
    assert recommended_stepsize("random", random) == pytest.approx(1 / 150)
    with pytest.raises(ParameterError, match="F1"):
        recommended_stepsize("random", StepsizeParams(L=1.0, T=100, F0=1.0))


def test_bounded_gradient_variant():
    params = StepsizeParams(L=1.0, T=100, F0=1.0, F1=1.0, tau_max=100, tau_c=2)
    assert recommended_stepsize("pure", params) == pytest.approx(1 / (20 * 100**0.5 * 2**0.5))
    assert recommended_stepsize("pure", params, assume_bounded_gradients=True) == pytest.approx(1 / 60)


def test_invalid_inputs():
    with pytest.raises(ParameterError):
        recommended_stepsize("adam", StepsizeParams(L=1.0, T=10, F0=1.0))
    with pytest.raises(ParameterError):
        recommended_stepsize("pure", StepsizeParams(L=0.0, T=10, F0=1.0))
    with pytest.raises(ParameterError):
        recommended_stepsize("pure", StepsizeParams(L=1.0, T=0, F0=1.0))
