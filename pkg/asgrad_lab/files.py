# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""File helpers shared by the exporters."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Union


def write_file_atomic(path: Union[str, Path], data: Union[str, bytes]) -> Path:
    """Write ``data`` to ``path`` through a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, bytes):
        with open(tmp, "wb") as handle:
            handle.write(data)
    else:
        with open(tmp, "w", encoding="utf-8", newline="") as handle:
            handle.write(data)
    os.replace(tmp, path)
    return path
