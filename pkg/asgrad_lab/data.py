# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Worker-partitioned datasets.

Two sources are supported:

* ``generate_synthetic``: the heterogeneous logistic generator driven by
  two knobs ``alpha`` (label-model spread) and ``beta`` (feature spread).
* ``load_libsvm``: sparse LibSVM text files, densified and split into
  ``n`` contiguous shards.

Datasets round-trip through a flat little-endian binary container::

    b"ASGD" | u32 n | u32 m | u32 d | f64 features[n*m*d] | i8 labels[n*m]

Synthetic draw order
--------------------
Worker ``i`` draws from its own stream ``RandomStream(seed, "data", i)``
in this order: ``B_i``, ``v_i`` (d values), ``a_i`` (m x d values,
sample-major then coordinate), ``u_i``, ``c_i``, ``w_i`` (d values), then
``m`` uniforms deciding the labels. Workers are generated in index order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ParameterError, ParseError
from .files import write_file_atomic
from .log import get_logger
from .rng import RandomStream

logger = get_logger("data")

MAGIC = b"ASGD"
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class Dataset:
    """Feature/label shards, one per worker.

    ``features`` has shape ``(n, m, d)`` and ``labels`` shape ``(n, m)``
    with values in ``{-1.0, +1.0}``. Both arrays are made read-only.
    """

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64, order="C")
        labels = np.array(self.labels, dtype=np.float64, order="C")
        if features.ndim != 3:
            raise ParameterError(f"features must be n x m x d, got shape {features.shape}")
        if labels.shape != features.shape[:2]:
            raise ParameterError(
                f"labels shape {labels.shape} does not match features {features.shape[:2]}"
            )
        if min(features.shape) < 1:
            raise ParameterError(f"dataset dimensions must be >= 1, got {features.shape}")
        if not np.all(np.isfinite(features)):
            raise ParameterError("features contain non-finite values")
        if not np.all(np.abs(labels) == 1.0):
            raise ParameterError("labels must lie in {-1, +1}")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[2]

    def describe(self) -> str:
        return f"n={self.n} m={self.m} d={self.d}"


@dataclass(frozen=True)
class SynConfig:
    alpha: float = 1.0
    beta: float = 1.0
    n: int = 10
    m: int = 200
    d: int = 300
    seed: int = 0
    require_both_labels: bool = False

    def validate(self) -> List[str]:
        errors: List[str] = []
        if self.alpha < 0:
            errors.append(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            errors.append(f"beta must be >= 0, got {self.beta}")
        for name in ("n", "m", "d"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1, got {getattr(self, name)}")
        return errors


def generate_synthetic(cfg: SynConfig) -> Dataset:
    """Generate a heterogeneous logistic-regression dataset.

    Parameters
    ----------
    cfg:
        Generator settings. ``N(mu, v)`` below means mean ``mu`` and
        variance ``v``.

    Returns
    -------
    Dataset
        ``B_i ~ N(0, beta)``, ``v_i ~ N(B_i, 1)``, ``a_ij ~ N(v_i, S)`` with
        ``S_kk = k**-1.2`` (1-based ``k``), ``u_i ~ N(0, alpha)``,
        ``c_i ~ N(u_i, 1)``, ``w_i ~ N(u_i, 1)``,
        ``p_ij = sigmoid(w_i . a_ij + c_i)`` and ``b_ij = -1`` with
        probability ``p_ij``, else ``+1``.

    Raises
    ------
    ParameterError
        If the settings are invalid, or if ``require_both_labels`` is set
        and some shard came out single-labelled.
    """
    errors = cfg.validate()
    if errors:
        raise ParameterError("; ".join(errors))
    n, m, d = cfg.n, cfg.m, cfg.d
    coord_std = np.arange(1, d + 1, dtype=np.float64) ** -0.6
    features = np.empty((n, m, d))
    labels = np.empty((n, m))
    for i in range(n):
        rng = RandomStream(cfg.seed, "data", i)
        big_b = np.sqrt(cfg.beta) * rng.standard_normal()
        v = big_b + rng.standard_normal(d)
        a = v + rng.standard_normal((m, d)) * coord_std
        u = np.sqrt(cfg.alpha) * rng.standard_normal()
        c = u + rng.standard_normal()
        w = u + rng.standard_normal(d)
        p = expit(a @ w + c)
        draws = rng.uniform(0.0, 1.0, m)
        features[i] = a
        labels[i] = np.where(draws < p, -1.0, 1.0)
    dataset = Dataset(features, labels)
    logger.debug(
        "generated Syn(%s,%s) %s seed=%d", cfg.alpha, cfg.beta, dataset.describe(), cfg.seed
    )
    if cfg.require_both_labels:
        check_label_balance(dataset)
    return dataset


def check_label_balance(dataset: Dataset) -> None:
    """Reject a dataset in which some shard carries a single label."""
    for i in range(dataset.n):
        values = np.unique(dataset.labels[i])
        if values.size < 2:
            raise ParameterError(
                f"shard {i} contains only label {values[0]:+.0f}; pick another seed"
            )


def split_points(dataset: Dataset, limit: Optional[int] = None) -> Dataset:
    """Re-partition so that every data point is its own client (m = 1).

    Points are taken worker-major in storage order; ``limit`` keeps only
    the first ``limit`` points.
    """
    total = dataset.n * dataset.m
    count = total if limit is None else limit
    if not 1 <= count <= total:
        raise ParameterError(f"limit must lie in [1, {total}], got {count}")
    flat_x = dataset.features.reshape(total, dataset.d)[:count]
    flat_y = dataset.labels.reshape(total)[:count]
    return Dataset(flat_x.reshape(count, 1, dataset.d), flat_y.reshape(count, 1))


def _normalise_labels(raw: np.ndarray, path: Path) -> np.ndarray:
    values = set(np.unique(raw).tolist())
    if values <= {-1.0, 1.0}:
        return raw
    if values <= {0.0, 1.0}:
        return np.where(raw > 0, 1.0, -1.0)
    if len(values) == 2:
        low, high = sorted(values)
        logger.warning("%s: mapping labels %s -> -1 and %s -> +1", path, low, high)
        return np.where(raw == high, 1.0, -1.0)
    raise ParameterError(f"{path}: expected binary labels, found {sorted(values)[:5]}")


def load_libsvm(path: Union[str, Path], n: int, d: Optional[int] = None) -> Dataset:
    """Load a LibSVM file and split it into ``n`` contiguous worker shards.

    Parameters
    ----------
    path:
        Text file with lines ``label idx:val ...`` and 1-based indices.
    n:
        Number of workers.
    d:
        Declared dimension. Defaults to the maximum index present.

    Returns
    -------
    Dataset
        Shards of ``m = total // n`` samples in file order; the remainder
        is discarded.
    """
    path = Path(path)
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    raw_labels: List[float] = []
    rows: List[dict[int, float]] = []
    max_index = 0
    try:
        handle = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot open LibSVM file {path}: {exc}") from exc
    with handle:
        for line_number, line in enumerate(handle, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            tokens = body.split()
            try:
                label = float(tokens[0])
            except ValueError:
                raise ParseError(path, line_number, f"bad label {tokens[0]!r}") from None
            row: dict[int, float] = {}
            for token in tokens[1:]:
                key, sep, value = token.partition(":")
                if not sep:
                    raise ParseError(path, line_number, f"expected idx:val, got {token!r}")
                if key == "qid":
                    continue
                try:
                    index, val = int(key), float(value)
                except ValueError:
                    raise ParseError(path, line_number, f"bad feature {token!r}") from None
                if index < 1:
                    raise ParseError(path, line_number, f"indices are 1-based, got {index}")
                if d is not None and index > d:
                    raise ParseError(path, line_number, f"index {index} exceeds declared d={d}")
                row[index - 1] = val
                max_index = max(max_index, index)
            raw_labels.append(label)
            rows.append(row)
    total = len(rows)
    if total < n:
        raise ParameterError(f"{path}: {total} samples cannot fill {n} workers")
    dim = d if d is not None else max(max_index, 1)
    m = total // n
    dense = np.zeros((n * m, dim))
    for r, row in enumerate(rows[: n * m]):
        for index, val in row.items():
            dense[r, index] = val
    labels = _normalise_labels(np.asarray(raw_labels[: n * m], dtype=np.float64), path)
    if total != n * m:
        logger.debug("%s: discarding %d trailing samples", path, total - n * m)
    return Dataset(dense.reshape(n, m, dim), labels.reshape(n, m))


def write_flat_binary(path: Union[str, Path], features: np.ndarray, labels: np.ndarray) -> Path:
    """Write the ``ASGD`` container for an ``(n, m, d)`` tensor and ``(n, m)`` labels."""
    features = np.asarray(features, dtype="<f8")
    n, m, d = features.shape
    payload = (
        _HEADER.pack(MAGIC, n, m, d)
        + np.ascontiguousarray(features).tobytes()
        + np.asarray(labels, dtype="i1").reshape(n, m).tobytes()
    )
    return write_file_atomic(path, payload)


def read_flat_binary(path: Union[str, Path]) -> tuple[np.ndarray, np.ndarray]:
    """Read an ``ASGD`` container; returns ``(features, labels)`` as stored."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise ConfigurationError(f"{path}: truncated header")
    magic, n, m, d = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ConfigurationError(f"{path}: bad magic {magic!r}")
    n_feat = n * m * d
    expected = _HEADER.size + 8 * n_feat + n * m
    if len(blob) != expected:
        raise ConfigurationError(f"{path}: expected {expected} bytes, found {len(blob)}")
    features = np.frombuffer(blob, dtype="<f8", count=n_feat, offset=_HEADER.size)
    labels = np.frombuffer(blob, dtype="i1", count=n * m, offset=_HEADER.size + 8 * n_feat)
    return features.reshape(n, m, d).astype(np.float64), labels.reshape(n, m).astype(np.int8)


def save_dataset(path: Union[str, Path], dataset: Dataset) -> Path:
    return write_flat_binary(path, dataset.features, dataset.labels)


def load_dataset(path: Union[str, Path]) -> Dataset:
    features, labels = read_flat_binary(path)
    return Dataset(features, labels.astype(np.float64))
