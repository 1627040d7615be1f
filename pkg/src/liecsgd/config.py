"""Flat ``key = value`` experiment configs with a versioned schema.

Example::

    schema_version = 1
    algorithm = liec
    problem = quadratic
    dim = 100
    workers = 8
    sigma = 1.0
    compressor = top-k
    k = 10
    lr = 0.02
    iterations = 2000

Blank lines and ``#`` comments are ignored. Unknown keys, duplicate keys and
values of the wrong type are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .algorithms import ALGORITHMS, ScheduleSpec, default_period
from .compressors import KINDS, CompressorSpec
from .problems import Problem, make_logistic, make_quadratic

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment config; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    algorithm: str = "liec"
    # problem
    problem: str = "quadratic"
    dim: int = 100
    workers: int = 8
    sigma: float = 1.0
    condition: float = 10.0
    center_scale: float = 1.0
    samples_per_worker: int = 200
    l2: float = 1e-3
    heterogeneous: bool = False
    problem_seed: int = 0
    x0_scale: float = 0.0
    # compressors; server_* default to the worker-side values
    compressor: str = "identity"
    k: int | None = None
    num_blocks: int | None = None
    nominal_delta: float | None = None
    server_compressor: str | None = None
    server_k: int | None = None
    server_num_blocks: int | None = None
    server_nominal_delta: float | None = None
    # optimisation
    schedule: str = "constant"
    lr: float = 0.01
    period: int | None = None
    iterations: int = 1000
    # run bookkeeping
    seed: int = 0
    repeats: int = 1
    fidelity: str = "lossless"
    out: str = "results"
    record_timing: bool = False
    tail_fraction: float = 0.0
    speedup_tolerance: float = 0.2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {self.schema_version}, expected {SCHEMA_VERSION}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"unknown algorithm {self.algorithm!r}; expected one of {sorted(ALGORITHMS)}")
        if self.problem not in ("quadratic", "logistic"):
            raise ConfigError("problem", f"unknown problem {self.problem!r}")
        for name in ("dim", "workers", "iterations", "repeats", "samples_per_worker"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.sigma < 0:
            raise ConfigError("sigma", "must be >= 0")
        if self.condition < 1:
            raise ConfigError("condition", "must be >= 1")
        if self.seed < 0 or self.problem_seed < 0:
            raise ConfigError("seed", "must be non-negative")
        if self.fidelity not in ("lossless", "wire"):
            raise ConfigError("fidelity", f"expected lossless or wire, got {self.fidelity!r}")
        if self.schedule not in ("constant", "corollary1"):
            raise ConfigError("schedule", f"unknown schedule {self.schedule!r}")
        if self.schedule == "constant" and self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if self.period is not None and self.period < 1:
            raise ConfigError("period", "must be >= 1")
        if not 0 <= self.tail_fraction < 1:
            raise ConfigError("tail_fraction", "must lie in [0, 1)")
        for side in ("", "server_"):
            kind = getattr(self, side + "compressor")
            if kind is not None and kind not in KINDS:
                raise ConfigError(side + "compressor", f"unknown compressor {kind!r}; expected one of {KINDS}")
        for side, spec in (("", self.worker_spec), ("server_", self.server_spec)):
            try:
                spec.delta(self.dim)
            except ValueError as exc:
                raise ConfigError(side + "compressor", str(exc)) from None

    @property
    def worker_spec(self) -> CompressorSpec:
        try:
            return CompressorSpec(self.compressor, self.k, self.num_blocks, self.nominal_delta)
        except ValueError as exc:
            raise ConfigError("compressor", str(exc)) from None

    @property
    def server_spec(self) -> CompressorSpec:
        if self.server_compressor is None and self.server_k is None and self.server_num_blocks is None and self.server_nominal_delta is None:
            return self.worker_spec
        try:
            return CompressorSpec(
                self.server_compressor or self.compressor,
                self.server_k if self.server_k is not None else self.k,
                self.server_num_blocks if self.server_num_blocks is not None else self.num_blocks,
                self.server_nominal_delta if self.server_nominal_delta is not None else self.nominal_delta,
            )
        except ValueError as exc:
            raise ConfigError("server_compressor", str(exc)) from None

    @property
    def averaging_period(self) -> int:
        return self.period if self.period is not None else default_period(self.worker_spec, self.dim)

    def build_problem(self) -> Problem:
        if self.problem == "quadratic":
            return make_quadratic(
                self.dim,
                self.workers,
                condition=self.condition,
                sigma=self.sigma,
                seed=self.problem_seed,
                homogeneous=not self.heterogeneous,
                center_scale=self.center_scale,
            )
        return make_logistic(
            self.dim, self.workers, self.samples_per_worker, seed=self.problem_seed, l2=self.l2, homogeneous=not self.heterogeneous
        )

    def schedule_spec(self, problem: Problem) -> ScheduleSpec:
        if self.schedule == "constant":
            return ScheduleSpec("constant", lr=self.lr)
        return ScheduleSpec("corollary1", T=self.iterations, N=self.workers, L=problem.L, delta=self.worker_spec.delta(self.dim))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_TYPES = {}
for _f in fields(ExperimentConfig):
    _t = _f.type.replace(" | None", "")
    _TYPES[_f.name] = {"int": int, "float": float, "bool": bool, "str": str}[_t]


def _convert(key: str, raw: str):
    typ = _TYPES[key]
    if raw.lower() in ("none", "null", ""):
        if dict((f.name, f.default) for f in fields(ExperimentConfig))[key] is None:
            return None
        raise ConfigError(key, "value required")
    try:
        if typ is bool:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str, **overrides) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        if key not in _TYPES:
            raise ConfigError(key, f"unknown key (line {lineno})")
        if key in values:
            raise ConfigError(key, f"duplicate key (line {lineno})")
        values[key] = _convert(key, raw.strip().strip('"').strip("'"))
    if "schema_version" not in values:
        raise ConfigError("schema_version", "missing; add 'schema_version = 1'")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("path", f"cannot read {path}: {exc}") from None
    return parse_config(text, **overrides)
