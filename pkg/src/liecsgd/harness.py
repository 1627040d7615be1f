"""Simulated worker/server fabric: wire frames, byte accounting, metrics.

Frame layout (all integers little-endian, all values 32-bit floats)::

    tag      u8      0x00 dense, 0x01 sparse, 0x02 sign-scale
    dim      u32
    dense:   dim x f32
    sparse:  u32 count k, k x u32 ascending indices, k x f32 values
    sign:    u32 block count b, b x (u32 end offset, f32 scale),
             ceil(dim / 8) bytes of sign bits, MSB first, zero padded
"""
from __future__ import annotations

import csv
import io
import os
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .compressors import Dense, Payload, SignScale, Sparse, decompress

TAG_DENSE = 0x00
TAG_SPARSE = 0x01
TAG_SIGN = 0x02

_HEADER = struct.Struct("<BI")
_U32 = struct.Struct("<I")

CSV_COLUMNS = (
    "t",
    "loss",
    "grad_sq",
    "err_sq",
    "disagreement",
    "uplink_bytes",
    "downlink_bytes",
    "avg_bytes",
    "round_ms",
)


class DecodeError(ValueError):
    """Malformed wire frame; ``offset`` is the byte position of the problem."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


def frame_length(p: Payload) -> int:
    if isinstance(p, Dense):
        return 5 + 4 * p.dim
    if isinstance(p, Sparse):
        return 9 + 8 * int(p.indices.shape[0])
    if isinstance(p, SignScale):
        return 9 + 8 * p.num_blocks + (p.dim + 7) // 8
    raise TypeError(f"unknown payload type {type(p).__name__}")


def encode(p: Payload) -> bytes:
    if isinstance(p, Dense):
        return _HEADER.pack(TAG_DENSE, p.dim) + np.asarray(p.values, dtype="<f4").tobytes()
    if isinstance(p, Sparse):
        k = int(p.indices.shape[0])
        return b"".join(
            (
                _HEADER.pack(TAG_SPARSE, p.dim),
                _U32.pack(k),
                np.asarray(p.indices, dtype="<u4").tobytes(),
                np.asarray(p.values, dtype="<f4").tobytes(),
            )
        )
    if isinstance(p, SignScale):
        table = np.empty(p.num_blocks, dtype=[("end", "<u4"), ("scale", "<f4")])
        table["end"] = p.bounds
        table["scale"] = p.scales
        return b"".join(
            (
                _HEADER.pack(TAG_SIGN, p.dim),
                _U32.pack(p.num_blocks),
                table.tobytes(),
                np.asarray(p.bits, dtype=np.uint8).tobytes(),
            )
        )
    raise TypeError(f"unknown payload type {type(p).__name__}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(bytes(data))
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise DecodeError(self.pos, f"truncated frame while reading {what} ({n} bytes needed, {len(self.data) - self.pos} left)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def floats(self, n: int, what: str) -> np.ndarray:
        start = self.pos
        vals = np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise DecodeError(start + 4 * bad, f"non-finite {what}")
        return vals


def decode(data: bytes) -> Payload:
    r = _Reader(data)
    tag = r.take(1, "tag")[0]
    if tag not in (TAG_DENSE, TAG_SPARSE, TAG_SIGN):
        raise DecodeError(0, f"unknown frame tag 0x{tag:02x}")
    d = r.u32("dimension")
    if tag == TAG_DENSE:
        if 4 * d > len(r.data) - r.pos:
            raise DecodeError(r.pos, f"truncated dense body for dimension {d}")
        p = Dense(r.floats(d, "dense values"))
    elif tag == TAG_SPARSE:
        at = r.pos
        k = r.u32("sparse count")
        if k > d:
            raise DecodeError(at, f"sparse count {k} exceeds dimension {d}")
        at = r.pos
        idx = np.frombuffer(r.take(4 * k, "sparse indices"), dtype="<u4").astype(np.uint32)
        if k and int(idx.max()) >= d:
            raise DecodeError(at, "sparse index out of range")
        if np.any(np.diff(idx.astype(np.int64)) <= 0):
            raise DecodeError(at, "sparse indices not strictly ascending")
        p = Sparse(d, idx, r.floats(k, "sparse values"))
    else:
        at = r.pos
        b = r.u32("block count")
        if b < 1 or b > d:
            raise DecodeError(at, f"block count {b} invalid for dimension {d}")
        at = r.pos
        table = np.frombuffer(r.take(8 * b, "block table"), dtype=[("end", "<u4"), ("scale", "<f4")])
        ends = table["end"].astype(np.int64)
        if ends[0] < 1 or ends[-1] != d or np.any(np.diff(ends) <= 0):
            raise DecodeError(at, "block bounds do not partition the dimension")
        scales = table["scale"].astype(np.float64)
        if not np.all(np.isfinite(scales)):
            raise DecodeError(at, "non-finite block scale")
        nbytes = (d + 7) // 8
        at = r.pos
        bits = np.frombuffer(r.take(nbytes, "sign bits"), dtype=np.uint8).copy()
        if d % 8 and bits[-1] & ((1 << (8 - d % 8)) - 1):
            raise DecodeError(at + nbytes - 1, "non-zero padding bits")
        p = SignScale(d, ends.astype(np.uint32), scales, bits)
    if r.pos != len(r.data):
        raise DecodeError(r.pos, f"{len(r.data) - r.pos} trailing bytes")
    return p


@dataclass
class TrafficCounter:
    uplink: int = 0
    downlink: int = 0
    model_uplink: int = 0
    model_downlink: int = 0
    frames: int = 0

    @property
    def avg(self) -> int:
        return self.model_uplink + self.model_downlink


class Channel:
    """Lossless in-process transport with per-direction byte counters.

    In ``"wire"`` fidelity every frame is actually encoded and decoded, so the
    receiver sees 32-bit rounded values. In ``"lossless"`` fidelity the payload
    is handed over untouched; byte accounting is identical in both modes.
    Model-average traffic on sync rounds is counted separately from gradients.
    """

    def __init__(self, fidelity: str = "lossless"):
        if fidelity not in ("lossless", "wire"):
            raise ValueError(f"fidelity must be 'lossless' or 'wire', got {fidelity!r}")
        self.fidelity = fidelity
        self.round = TrafficCounter()
        self.total = TrafficCounter()
        self._lock = threading.Lock()

    def begin_round(self) -> None:
        self.round = TrafficCounter()

    def _count(self, attr: str, nbytes: int, frames: int) -> None:
        with self._lock:
            for c in (self.round, self.total):
                setattr(c, attr, getattr(c, attr) + nbytes)
                c.frames += frames

    def _deliver(self, p: Payload) -> Payload:
        if self.fidelity == "lossless":
            return p
        return decode(encode(p))

    def send(self, direction: str, p: Payload, recipients: int = 1, model: bool = False) -> Payload:
        """Deliver ``p`` (to ``recipients`` peers for a broadcast) and count its bytes."""
        if direction not in ("uplink", "downlink"):
            raise ValueError(f"unknown direction {direction!r}")
        attr = ("model_" if model else "") + direction
        self._count(attr, frame_length(p) * recipients, recipients)
        return self._deliver(p)

    def uplink(self, p: Payload, model: bool = False) -> np.ndarray:
        return self._unpack(self.send("uplink", p, model=model))

    def broadcast(self, p: Payload, recipients: int, model: bool = False) -> np.ndarray:
        return self._unpack(self.send("downlink", p, recipients, model=model))

    def _unpack(self, p: Payload) -> np.ndarray:
        # decoded frames are validated by decode(); lossless payloads come from our own compressors
        return decompress(p, p.dim, check=False)


def channel_send(channel: Channel, direction: str, frame: bytes, model: bool = False) -> bytes:
    """Send an already encoded frame; returns the bytes the peer receives."""
    attr = ("model_" if model else "") + direction
    if direction not in ("uplink", "downlink"):
        raise ValueError(f"unknown direction {direction!r}")
    channel._count(attr, len(frame), 1)
    return bytes(frame)


@dataclass
class IterationRecord:
    """Metrics of one round; model quantities are taken after the round's update."""

    t: int
    loss: float
    grad_sq: float
    err_sq: float
    disagreement: float
    uplink_bytes: int
    downlink_bytes: int
    avg_bytes: int
    round_ms: float
    sync: bool = False
    grad_norm_max: float = 0.0
    worker_err_sq: float = 0.0
    server_err_sq: float = 0.0
    extra: dict = field(default_factory=dict)

    def csv_row(self) -> list[str]:
        return [
            str(self.t),
            repr(float(self.loss)),
            repr(float(self.grad_sq)),
            repr(float(self.err_sq)),
            repr(float(self.disagreement)),
            str(self.uplink_bytes),
            str(self.downlink_bytes),
            str(self.avg_bytes),
            repr(float(self.round_ms)),
        ]


def summarize(rows) -> dict:
    """Summary of per-iteration rows (records or parsed CSV dicts)."""
    get = (lambda r, k: getattr(r, k)) if rows and not isinstance(rows[0], dict) else (lambda r, k: r[k])
    if not rows:
        return {
            "iterations": 0,
            "final_loss": None,
            "min_grad_sq": None,
            "peak_err_sq": None,
            "total_uplink_bytes": 0,
            "total_downlink_bytes": 0,
            "total_avg_bytes": 0,
        }
    return {
        "iterations": len(rows),
        "final_loss": float(get(rows[-1], "loss")),
        "min_grad_sq": float(min(get(r, "grad_sq") for r in rows)),
        "peak_err_sq": float(max(get(r, "err_sq") for r in rows)),
        "total_uplink_bytes": int(sum(get(r, "uplink_bytes") for r in rows)),
        "total_downlink_bytes": int(sum(get(r, "downlink_bytes") for r in rows)),
        "total_avg_bytes": int(sum(get(r, "avg_bytes") for r in rows)),
    }


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return parse_metrics_csv(fh.read())


def parse_metrics_csv(text: str) -> list[dict]:
    """Parse metrics CSV text back into typed row dicts."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    ints = {"t", "uplink_bytes", "downlink_bytes", "avg_bytes"}
    return [{k: (int(v) if k in ints else float(v)) for k, v in row.items()} for row in reader]


def metrics_flush(records, path: str | os.PathLike | None = None) -> tuple[str, dict]:
    """Render records as CSV (optionally writing it to ``path``) and summarise them."""
    text = records_to_csv(records)
    summary = summarize(list(records))
    if path is not None:
        try:
            os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
            with open(path, "w", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise OSError(f"could not write metrics to {os.fspath(path)}: {exc}") from exc
    return text, summary
