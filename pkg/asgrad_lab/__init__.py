# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Asynchronous SGD simulator: job-assignment strategies, traces and delay diagnostics."""

__version__ = "0.3.0"
