"""Contraction compressors: identity, top-k, random-k, sign and blockwise sign.

Each operator returns an in-memory payload (:class:`Dense`, :class:`Sparse` or
:class:`SignScale`); :func:`decompress` turns a payload back into the dense
vector it stands for. Wire encodings live in :mod:`liecsgd.harness`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from .numerics import RngStream, as_vector

KINDS = ("identity", "top-k", "random-k", "sign", "blockwise-sign")

# midpoint of the 0.24-0.40 range measured for sign compressors in practice
DEFAULT_SIGN_DELTA = 0.3


@dataclass(frozen=True, eq=False)
class Dense:
    values: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class Sparse:
    dim: int
    indices: np.ndarray  # uint32, strictly ascending
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class SignScale:
    dim: int
    bounds: np.ndarray  # uint32 exclusive end offset of each block; last == dim
    scales: np.ndarray
    bits: np.ndarray  # packed MSB-first, bit set means +1, zero padded

    @property
    def num_blocks(self) -> int:
        return int(self.bounds.shape[0])


Payload = Union[Dense, Sparse, SignScale]


class PayloadError(ValueError):
    pass


def _check_k(k: int, d: int) -> None:
    if not 1 <= k <= d:
        raise ValueError(f"k must satisfy 1 <= k <= d={d}, got {k}")


def compress_identity(x) -> Dense:
    return Dense(as_vector(x).copy())


def compress_topk(x, k: int) -> Sparse:
    """Keep the ``k`` largest-magnitude coordinates; ties go to the lower index."""
    x = as_vector(x)
    d = x.shape[0]
    _check_k(k, d)
    order = np.argsort(-np.abs(x), kind="stable")
    idx = np.sort(order[:k]).astype(np.uint32)
    return Sparse(d, idx, x[idx])


def compress_randk(x, k: int, rng: np.random.Generator) -> Sparse:
    """Keep a uniformly random ``k``-subset of coordinates, unscaled."""
    x = as_vector(x)
    d = x.shape[0]
    _check_k(k, d)
    idx = np.sort(rng.choice(d, size=k, replace=False)).astype(np.uint32)
    return Sparse(d, idx, x[idx])


@lru_cache(maxsize=64)
def block_bounds(d: int, num_blocks: int) -> np.ndarray:
    """End offsets of ``num_blocks`` contiguous blocks whose sizes differ by at most one."""
    if not 1 <= num_blocks <= d:
        raise ValueError(f"num_blocks must satisfy 1 <= num_blocks <= d={d}, got {num_blocks}")
    base, extra = divmod(d, num_blocks)
    sizes = np.full(num_blocks, base, dtype=np.int64)
    sizes[:extra] += 1
    bounds = np.cumsum(sizes).astype(np.uint32)
    bounds.flags.writeable = False
    return bounds


def compress_blockwise_sign(x, num_blocks: int) -> SignScale:
    x = as_vector(x)
    d = x.shape[0]
    bounds = block_bounds(d, num_blocks)
    starts = np.concatenate(([0], bounds[:-1].astype(np.int64)))
    sizes = bounds.astype(np.int64) - starts
    a = np.abs(x)
    # mean taken relative to each block's first entry so constant blocks are exact fixed points
    first = a[starts]
    scales = first + np.add.reduceat(a - np.repeat(first, sizes), starts) / sizes
    bits = np.packbits(x >= 0)
    return SignScale(d, bounds, scales, bits)


def compress_sign(x) -> SignScale:
    """Scaled sign: every coordinate becomes ``||x||_1 / d`` times its sign (sign(0) = +1)."""
    x = as_vector(x)
    if x.shape[0] < 1:
        raise ValueError("sign compression needs d >= 1")
    return compress_blockwise_sign(x, 1)


def validate_payload(p: Payload, d: int) -> None:
    if isinstance(p, Dense):
        if p.values.ndim != 1 or p.values.shape[0] != d:
            raise PayloadError(f"dense payload has {p.values.shape[0]} values, expected {d}")
    elif isinstance(p, Sparse):
        if p.dim != d:
            raise PayloadError(f"sparse payload dimension {p.dim} != {d}")
        if p.indices.shape != p.values.shape:
            raise PayloadError("sparse payload has mismatched index and value counts")
        idx = p.indices.astype(np.int64)
        if idx.size and (idx[-1] >= d or idx[0] < 0):
            raise PayloadError("sparse index out of range")
        if np.any(np.diff(idx) <= 0):
            raise PayloadError("sparse indices are not strictly ascending")
    elif isinstance(p, SignScale):
        if p.dim != d:
            raise PayloadError(f"sign payload dimension {p.dim} != {d}")
        if p.bounds.shape[0] < 1 or p.scales.shape != p.bounds.shape:
            raise PayloadError("sign payload needs one scale per block")
        b = p.bounds.astype(np.int64)
        if b[-1] != d or b[0] < 1 or np.any(np.diff(b) <= 0):
            raise PayloadError("sign payload block bounds are not a partition of [0, d)")
        if p.bits.shape[0] != (d + 7) // 8:
            raise PayloadError(f"sign payload carries {p.bits.shape[0]} bytes of bits, expected {(d + 7) // 8}")
    else:
        raise PayloadError(f"unknown payload type {type(p).__name__}")


def decompress(p: Payload, d: int, check: bool = True) -> np.ndarray:
    if check:
        validate_payload(p, d)
    if isinstance(p, Dense):
        return np.array(p.values, dtype=np.float64)
    if isinstance(p, Sparse):
        out = np.zeros(d)
        out[p.indices.astype(np.int64)] = p.values
        return out
    b = p.bounds.astype(np.int64)
    sizes = np.diff(np.concatenate(([0], b)))
    signs = np.where(np.unpackbits(p.bits, count=d).astype(bool), 1.0, -1.0)
    return np.repeat(np.asarray(p.scales, dtype=np.float64), sizes) * signs


@dataclass(frozen=True)
class CompressorSpec:
    """Which operator to apply and its parameters.

    ``nominal_delta`` is the contraction constant used for the averaging
    period and the error-bound monitors. Left as ``None`` it defaults to 1
    for identity, k/d for the sparsifiers and 0.3 for the sign operators.
    """

    kind: str = "identity"
    k: int | None = None
    num_blocks: int | None = None
    nominal_delta: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown compressor kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("top-k", "random-k") and (self.k is None or self.k < 1):
            raise ValueError(f"{self.kind} needs a positive k")
        if self.kind == "blockwise-sign" and (self.num_blocks is None or self.num_blocks < 1):
            raise ValueError("blockwise-sign needs a positive num_blocks")
        if self.nominal_delta is not None and not 0 < self.nominal_delta <= 1:
            raise ValueError(f"nominal_delta must lie in (0, 1], got {self.nominal_delta}")

    def delta(self, dim: int) -> float:
        if self.kind in ("top-k", "random-k"):
            _check_k(self.k, dim)
        if self.kind == "blockwise-sign" and self.num_blocks > dim:
            raise ValueError(f"num_blocks={self.num_blocks} exceeds d={dim}")
        if self.nominal_delta is not None:
            return self.nominal_delta
        if self.kind == "identity":
            return 1.0
        if self.kind in ("top-k", "random-k"):
            return self.k / dim
        return DEFAULT_SIGN_DELTA

    @property
    def randomized(self) -> bool:
        return self.kind == "random-k"

    def compress(self, x, rng: np.random.Generator | None = None) -> Payload:
        if self.kind == "identity":
            return compress_identity(x)
        if self.kind == "top-k":
            return compress_topk(x, self.k)
        if self.kind == "random-k":
            if rng is None:
                raise ValueError("random-k needs an rng")
            return compress_randk(x, self.k, rng)
        if self.kind == "sign":
            return compress_sign(x)
        return compress_blockwise_sign(x, self.num_blocks)

    def __call__(self, x, rng: np.random.Generator | None = None) -> np.ndarray:
        x = as_vector(x)
        return decompress(self.compress(x, rng), x.shape[0])

    def describe(self) -> str:
        if self.kind in ("top-k", "random-k"):
            return f"{self.kind}:k={self.k}"
        if self.kind == "blockwise-sign":
            return f"{self.kind}:num_blocks={self.num_blocks}"
        return self.kind


def parse_spec(text: str) -> CompressorSpec:
    """Parse ``kind[:key=value,...]``, e.g. ``top-k:k=10`` or ``sign:nominal_delta=0.25``."""
    kind, _, rest = text.strip().partition(":")
    kwargs = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"bad compressor option {item!r}")
        key = key.strip()
        if key in ("k", "num_blocks"):
            kwargs[key] = int(value)
        elif key == "nominal_delta":
            kwargs[key] = float(value)
        else:
            raise ValueError(f"unknown compressor option {key!r}")
    return CompressorSpec(kind.strip(), **kwargs)


def measure_delta(spec: CompressorSpec, dim: int, samples: int, rng) -> float:
    """Empirical contraction constant ``1 - mean ||x - C(x)||^2 / ||x||^2`` over Gaussian x."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    spec.delta(dim)
    ratios = []
    for _ in range(samples):
        x = gen.standard_normal(dim)
        nx = float(np.dot(x, x))
        if nx == 0.0:
            continue
        r = x - spec(x, gen)
        ratios.append(float(np.dot(r, r)) / nx)
    if not ratios:
        return float("nan")
    return 1.0 - float(np.mean(ratios))
