"""Dense vector helpers and seeded random streams.

Vectors are plain 1-D ``float64`` numpy arrays. Every reduction over workers
goes through :func:`mean_reduce` so the summation order is fixed and runs are
bitwise reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

PURPOSES = {"data": 0, "noise": 1, "compressor": 2, "init": 3, "probe": 4}

# spawn keys must be non-negative, so the server gets a reserved worker slot
SERVER = -1
_SERVER_KEY = 2**32


def as_vector(values, dim: int | None = None) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {x.shape[0]}")
    return x


def _check_same_dim(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y`` as a new vector."""
    x = as_vector(x)
    y = as_vector(y)
    _check_same_dim(x, y)
    return alpha * x + y


def mean_reduce(vectors: Sequence) -> np.ndarray:
    """Elementwise mean, accumulated in ascending list order.

    The sum is taken relative to the first vector, so averaging N identical
    copies returns that vector exactly.
    """
    if len(vectors) == 0:
        raise ValueError("mean_reduce needs at least one vector")
    first = as_vector(vectors[0])
    if len(vectors) == 1:
        return first.copy()
    shift = np.zeros_like(first)
    for v in vectors[1:]:
        v = as_vector(v)
        _check_same_dim(first, v)
        shift += v - first
    return first + shift / len(vectors)


def sq_norm(x) -> float:
    """Squared Euclidean norm, summed with a correctly rounded ``fsum``."""
    x = as_vector(x)
    return math.fsum((x * x).tolist())


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


@dataclass(frozen=True)
class RngStream:
    """A named random stream derived from one master seed.

    Streams are keyed by ``(purpose, worker)``; :meth:`generator` optionally
    folds in an iteration index so that a draw depends only on
    ``(seed, purpose, worker, t)`` and never on how many draws happened
    before it.
    """

    seed: int
    worker: int = 0
    purpose: str = "data"

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown rng purpose {self.purpose!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def _key(self) -> tuple[int, int]:
        worker = _SERVER_KEY if self.worker == SERVER else self.worker
        if worker < 0:
            raise ValueError(f"invalid worker index {self.worker}")
        return PURPOSES[self.purpose], worker

    def generator(self, t: int | None = None) -> np.random.Generator:
        key = self._key() if t is None else (*self._key(), t)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))

    def child(self, worker: int, purpose: str | None = None) -> "RngStream":
        return RngStream(self.seed, worker, purpose or self.purpose)
