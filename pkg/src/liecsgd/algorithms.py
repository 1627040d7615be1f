"""Optimisation loops over the simulated parameter server.

All four methods share one round structure: workers draw stochastic
gradients, send (possibly compressed) vectors up, the server reduces them in
worker order and broadcasts a (possibly compressed) vector back.

* ``psgd``: full-precision averaging in both directions.
* ``memsgd``: worker-side compression with per-worker residual memory.
* ``doublesqueeze``: MEM-SGD workers plus a compressing server that keeps its
  own residual.
* ``liec``: both directions compressed; each worker folds its own
  compression residual straight back into the same round's update, and only
  the server keeps an error vector. Every ``period``-th round exchanges full
  gradients and local models, resets the server error and unifies models.

States are mutated in place; every iteration function returns the round's
:class:`~liecsgd.harness.IterationRecord`.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .compressors import CompressorSpec, Dense
from .harness import Channel, IterationRecord
from .numerics import SERVER, RngStream, as_vector, check_finite, mean_reduce, sq_norm
from .problems import Problem, full_grad, stoch_grad

DIVERGENCE_NORM = 1e8


class Diverged(RuntimeError):
    pass


@dataclass
class WorkerState:
    x: np.ndarray
    residual: np.ndarray | None = None  # e^i, memory-based baselines only
    local_error: np.ndarray | None = None  # g - p^i, lives for one LIEC round


@dataclass
class ServerState:
    error: np.ndarray
    period: int = 1
    t: int = 0

    def is_sync(self) -> bool:
        return (self.t + 1) % self.period == 0


@dataclass
class VirtualSequence:
    """Uncompressed SGD driven by the same stochastic gradients as the LIEC run."""

    x_hat: np.ndarray

    def advance(self, grads, eta: float) -> None:
        self.x_hat = self.x_hat - eta * mean_reduce(grads)


def virtual_check(vs: VirtualSequence, x_bar, e, eta: float) -> float:
    """``max_j |x_bar - x_hat - eta * e|``; exactly zero when the identity holds."""
    return float(np.max(np.abs(as_vector(x_bar) - vs.x_hat - eta * as_vector(e)), initial=0.0))


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "constant"
    lr: float | None = None
    T: int | None = None
    N: int | None = None
    L: float | None = None
    delta: float | None = None

    def eta(self) -> float:
        if self.kind == "constant":
            if self.lr is None or self.lr <= 0:
                raise ValueError("constant schedule needs a positive lr")
            return float(self.lr)
        if self.kind == "corollary1":
            return corollary1_lr(self.T, self.N, self.L, self.delta)
        raise ValueError(f"unknown schedule kind {self.kind!r}")


def corollary1_lr(T: int, N: int, L: float, delta: float) -> float:
    """Step size ``1 / (sqrt(T/N) + L + T^(1/3) / delta^(2/3))``."""
    for name, v in (("T", T), ("N", N), ("L", L), ("delta", delta)):
        if v is None or v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    if delta > 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    return 1.0 / (math.sqrt(T / N) + L + T ** (1.0 / 3.0) / delta ** (2.0 / 3.0))


def theorem1_threshold(L: float, delta: float) -> float:
    """Iteration count beyond which the corollary step size satisfies ``eta < delta / (10 L)``.

    ``eta <= delta^(2/3) / T^(1/3)``, which is below ``delta / (10 L)`` once
    ``T >= 1000 L^3 / delta``.
    """
    return 1000.0 * L**3 / delta


def default_period(spec: CompressorSpec, dim: int) -> int:
    if spec.kind in ("top-k", "random-k") and spec.nominal_delta is None:
        return max(1, dim // spec.k)
    return max(1, int(math.floor(1.0 / spec.delta(dim))))


def lemma1_bound(delta: float, N: int, M: float) -> float:
    """Server-error bound ``4(1-d)(2(2-d) + d^2 (N-1)) M^2 / (d^2 N)``."""
    return 4 * (1 - delta) * (2 * (2 - delta) + delta**2 * (N - 1)) * M**2 / (delta**2 * N)


def lemma2_bound(delta: float, eta: float, M: float) -> float:
    """Model-disagreement bound ``(1-d)(1-d+d^2) eta^2 M^2 / d^2``."""
    return (1 - delta) * (1 - delta + delta**2) * eta**2 * M**2 / delta**2


def _gen(seed: int, worker: int, t: int, spec: CompressorSpec):
    return RngStream(seed, worker, "compressor").generator(t) if spec.randomized else None


def _finish_record(t, problem, workers, err_sq, channel, started, timed, grads, sync, **extra) -> IterationRecord:
    xs = [w.x for w in workers]
    x_bar = mean_reduce(xs)
    check_finite(x_bar, f"averaged model at round {t}")
    if not np.linalg.norm(x_bar) <= DIVERGENCE_NORM:
        raise Diverged(f"||x_bar|| = {np.linalg.norm(x_bar):.3e} exceeds {DIVERGENCE_NORM:.0e} at round {t}")
    disagreement = sum(sq_norm(x_bar - x) for x in xs) / len(xs)
    c = channel.round
    return IterationRecord(
        t=t,
        loss=problem.loss(x_bar),
        grad_sq=sq_norm(full_grad(problem, x_bar)),
        err_sq=err_sq,
        disagreement=disagreement,
        uplink_bytes=c.uplink,
        downlink_bytes=c.downlink,
        avg_bytes=c.avg,
        round_ms=(time.perf_counter() - started) * 1e3 if timed else 0.0,
        sync=sync,
        grad_norm_max=max(math.sqrt(sq_norm(g)) for g in grads),
        **extra,
    )


def _gradients(problem, workers, t, rng):
    grads = []
    for i, w in enumerate(workers):
        g = stoch_grad(problem, i, w.x, t, rng).g
        check_finite(g, f"gradient of worker {i} at round {t}")
        grads.append(g)
    return grads


def liec_iteration(
    workers: list[WorkerState],
    server: ServerState,
    problem: Problem,
    compressor_w: CompressorSpec,
    compressor_s: CompressorSpec,
    eta: float,
    rng: RngStream,
    channel: Channel,
    virtual: VirtualSequence | None = None,
    timed: bool = False,
) -> IterationRecord:
    started = time.perf_counter()
    t = server.t
    N = len(workers)
    sync = server.is_sync()
    channel.begin_round()
    grads = _gradients(problem, workers, t, rng)

    sent = []
    models = []
    for i, (w, g) in enumerate(zip(workers, grads)):
        if sync:
            # full gradient, so p^i = g^i; 32-bit transport rounding is not a compression residual
            sent.append(channel.uplink(Dense(g)))
            models.append(channel.uplink(Dense(w.x), model=True))
            w.local_error = np.zeros_like(g)
        else:
            sent.append(channel.uplink(compressor_w.compress(g, _gen(rng.seed, i, t, compressor_w))))
            # the worker keeps what the server actually received
            w.local_error = g - sent[-1]

    v = server.error + mean_reduce(sent)
    if sync:
        p = channel.broadcast(Dense(v), N)
        x_avg = channel.broadcast(Dense(mean_reduce(models)), N, model=True)
        server.error = np.zeros_like(v)
    else:
        p = channel.broadcast(compressor_s.compress(v, _gen(rng.seed, SERVER, t, compressor_s)), N)
        server.error = v - p

    for w in workers:
        base = x_avg if sync else w.x
        w.x = base - eta * (p + w.local_error)
        w.local_error = None

    if virtual is not None:
        virtual.advance(grads, eta)
    server.t += 1
    e_sq = sq_norm(server.error)
    return _finish_record(t, problem, workers, e_sq, channel, started, timed, grads, sync, server_err_sq=e_sq)


def psgd_iteration(workers, server, problem, compressor_w, compressor_s, eta, rng, channel, virtual=None, timed=False):
    started = time.perf_counter()
    t = server.t
    channel.begin_round()
    grads = _gradients(problem, workers, t, rng)
    avg = channel.broadcast(Dense(mean_reduce([channel.uplink(Dense(g)) for g in grads])), len(workers))
    for w in workers:
        w.x = w.x - eta * avg
    server.t += 1
    return _finish_record(t, problem, workers, 0.0, channel, started, timed, grads, False)


def _memory_uplink(workers, grads, compressor_w, rng, t, channel):
    sent = []
    for i, (w, g) in enumerate(zip(workers, grads)):
        if w.residual is None:
            w.residual = np.zeros_like(g)
        u = g + w.residual
        p_i = channel.uplink(compressor_w.compress(u, _gen(rng.seed, i, t, compressor_w)))
        w.residual = u - p_i
        sent.append(p_i)
    return sent


def memsgd_iteration(workers, server, problem, compressor_w, compressor_s, eta, rng, channel, virtual=None, timed=False):
    started = time.perf_counter()
    t = server.t
    channel.begin_round()
    grads = _gradients(problem, workers, t, rng)
    sent = _memory_uplink(workers, grads, compressor_w, rng, t, channel)
    avg = channel.broadcast(Dense(mean_reduce(sent)), len(workers))
    for w in workers:
        w.x = w.x - eta * avg
    server.t += 1
    err = sq_norm(mean_reduce([w.residual for w in workers]))
    return _finish_record(t, problem, workers, err, channel, started, timed, grads, False, worker_err_sq=err)


def doublesqueeze_iteration(workers, server, problem, compressor_w, compressor_s, eta, rng, channel, virtual=None, timed=False):
    started = time.perf_counter()
    t = server.t
    channel.begin_round()
    grads = _gradients(problem, workers, t, rng)
    sent = _memory_uplink(workers, grads, compressor_w, rng, t, channel)
    v = mean_reduce(sent) + server.error
    p = channel.broadcast(compressor_s.compress(v, _gen(rng.seed, SERVER, t, compressor_s)), len(workers))
    server.error = v - p
    for w in workers:
        w.x = w.x - eta * p
    server.t += 1
    worker_mean = mean_reduce([w.residual for w in workers])
    return _finish_record(
        t,
        problem,
        workers,
        sq_norm(worker_mean + server.error),
        channel,
        started,
        timed,
        grads,
        False,
        worker_err_sq=sq_norm(worker_mean),
        server_err_sq=sq_norm(server.error),
    )


ALGORITHMS = {
    "liec": liec_iteration,
    "psgd": psgd_iteration,
    "memsgd": memsgd_iteration,
    "doublesqueeze": doublesqueeze_iteration,
}


@dataclass
class Monitor:
    """Worst-case tracker for one per-round inequality ``observed <= bound``."""

    name: str
    tolerance: float = 0.0
    violations: int = 0
    checked: int = 0
    worst_observed: float = 0.0
    worst_bound: float = math.inf
    worst_ratio: float = 0.0
    first_violation: int | None = None

    def observe(self, t: int, observed: float, bound: float) -> None:
        self.checked += 1
        ratio = observed / bound if bound > 0 else (0.0 if observed == 0 else math.inf)
        if ratio >= self.worst_ratio:
            self.worst_ratio = ratio
            self.worst_observed = observed
            self.worst_bound = bound
        if observed > bound + self.tolerance:
            self.violations += 1
            if self.first_violation is None:
                self.first_violation = t

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def report(self) -> dict:
        return {
            "name": self.name,
            "observed": self.worst_observed,
            "bound": self.worst_bound,
            "worst_ratio": self.worst_ratio,
            "checked": self.checked,
            "violations": self.violations,
            "first_violation": self.first_violation,
            "passed": self.passed,
        }


@dataclass
class RunResult:
    algorithm: str
    records: list[IterationRecord]
    workers: list[WorkerState]
    server: ServerState
    eta: float
    delta: float
    virtual: VirtualSequence | None = None
    monitors: dict[str, Monitor] = field(default_factory=dict)
    diverged: str | None = None

    @property
    def x_bar(self) -> np.ndarray:
        return mean_reduce([w.x for w in self.workers])

    @property
    def passed(self) -> bool:
        return self.diverged is None and all(m.passed for m in self.monitors.values())


def run(
    algorithm: str,
    problem: Problem,
    T: int,
    eta: float,
    seed: int = 0,
    compressor: CompressorSpec | None = None,
    server_compressor: CompressorSpec | None = None,
    period: int | None = None,
    fidelity: str = "lossless",
    x0=None,
    monitors: bool = True,
    timed: bool = False,
    lemma_delta: float | None = None,
    callback=None,
) -> RunResult:
    """Run ``T`` rounds of ``algorithm`` and collect records plus invariant monitors.

    For LIEC the monitors are: the virtual-sequence identity (lossless
    fidelity only), the sync-round invariants, and the server-error / disagreement bounds evaluated with
    ``M`` replaced by the running maximum stochastic-gradient norm.
    ``lemma_delta`` overrides the contraction constant used by the bounds.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {sorted(ALGORITHMS)}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if eta <= 0:
        raise ValueError("eta must be positive")
    step = ALGORITHMS[algorithm]
    comp_w = compressor or CompressorSpec("identity")
    comp_s = server_compressor or comp_w
    d, N = problem.dim, problem.workers
    delta = comp_w.delta(d)
    comp_s.delta(d)
    H = period if period is not None else default_period(comp_w, d)
    if H < 1:
        raise ValueError("period must be >= 1")
    x0 = np.zeros(d) if x0 is None else as_vector(x0, d).copy()

    workers = [WorkerState(x0.copy()) for _ in range(N)]
    server = ServerState(np.zeros(d), period=H if algorithm == "liec" else 1)
    rng = RngStream(seed, 0, "data")
    channel = Channel(fidelity)
    liec = algorithm == "liec"
    virtual = VirtualSequence(x0.copy()) if liec else None

    mons: dict[str, Monitor] = {}
    if monitors and liec:
        mons = {
            "sync_error_reset": Monitor("sync_error_reset"),
            "sync_model_agreement": Monitor("sync_model_agreement"),
        }
        # the identity is exact algebra; 32-bit rounding of the model average breaks it on the wire
        if fidelity == "lossless":
            mons["virtual_sequence"] = Monitor("virtual_sequence")
        # the error bounds need an unbiased-up-to-delta compressor on both sides
        # and a period no longer than floor(1/delta)
        unbiased = {comp_w.kind, comp_s.kind} <= {"identity", "random-k"}
        bound_delta = delta if lemma_delta is None else lemma_delta
        if lemma_delta is not None or (unbiased and H <= math.floor(1.0 / delta + 1e-12)):
            mons["lemma1_error_bound"] = Monitor("lemma1_error_bound")
            mons["lemma2_disagreement_bound"] = Monitor("lemma2_disagreement_bound")

    result = RunResult(algorithm, [], workers, server, eta, delta, virtual, mons)
    m_hat = 0.0
    for _ in range(T):
        try:
            rec = step(workers, server, problem, comp_w, comp_s, eta, rng, channel, virtual=virtual, timed=timed)
        except (Diverged, FloatingPointError) as exc:
            result.diverged = str(exc)
            break
        result.records.append(rec)
        if mons:
            t = rec.t
            x_bar = result.x_bar
            if "virtual_sequence" in mons:
                dev = virtual_check(virtual, x_bar, server.error, eta)
                mons["virtual_sequence"].observe(t, dev, 1e-10 * max(1.0, float(np.max(np.abs(x_bar)))))
            if rec.sync:
                mons["sync_error_reset"].observe(t, float(np.max(np.abs(server.error))), 0.0)
                spread = max(float(np.max(np.abs(w.x - workers[0].x))) for w in workers)
                mons["sync_model_agreement"].observe(t, spread, 0.0)
            m_hat = max(m_hat, rec.grad_norm_max)
            if "lemma1_error_bound" in mons:
                mons["lemma1_error_bound"].observe(t, rec.err_sq, lemma1_bound(bound_delta, N, m_hat))
                mons["lemma2_disagreement_bound"].observe(t, rec.disagreement, lemma2_bound(bound_delta, eta, m_hat))
        if callback is not None:
            callback(rec, result)
    return result
