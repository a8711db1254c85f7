#!/usr/bin/env python3
# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Run the AsGrad lab command line: ``python3 asgrad.py <command> ...``."""

from asgrad_lab.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
