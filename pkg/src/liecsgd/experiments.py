"""Experiment runner: repeated runs, worker-count sweeps and the contract suite.

Output layout::

    <out>/<algorithm>/<seed>/metrics.csv
    <out>/<algorithm>/<seed>/summary.json
    <out>/<algorithm>/summary.json          # mean and sample std over repeats
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .algorithms import Monitor, RunResult, lemma1_bound, lemma2_bound, run
from .compressors import CompressorSpec, measure_delta
from .config import ExperimentConfig
from .harness import metrics_flush
from .numerics import RngStream
from .problems import make_quadratic

AGGREGATE_KEYS = ("final_loss", "tail_loss", "min_grad_sq", "peak_err_sq", "total_uplink_bytes", "total_downlink_bytes", "total_avg_bytes")


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list[dict]
    aggregate: dict
    root: str
    ok: bool = True
    diverged: bool = False
    failures: list[str] = field(default_factory=list)


def tail_loss(records, fraction: float) -> float | None:
    """Mean loss over the last ``fraction`` of rounds (the last round when 0)."""
    if not records:
        return None
    n = max(1, int(round(len(records) * fraction)))
    return float(np.mean([r.loss for r in records[-n:]]))


def initial_point(cfg: ExperimentConfig, dim: int, seed: int):
    """Starting model: zero, or ``x0_scale`` times a seeded Gaussian draw."""
    if cfg.x0_scale == 0:
        return None
    return cfg.x0_scale * RngStream(seed, 0, "init").generator().standard_normal(dim)


def _run_one(cfg: ExperimentConfig, seed: int, problem) -> tuple[RunResult, float]:
    eta = cfg.schedule_spec(problem).eta()
    started = time.perf_counter()
    result = run(
        cfg.algorithm,
        problem,
        cfg.iterations,
        eta,
        seed=seed,
        compressor=cfg.worker_spec,
        server_compressor=cfg.server_spec,
        period=cfg.averaging_period,
        fidelity=cfg.fidelity,
        x0=initial_point(cfg, problem.dim, seed),
        timed=cfg.record_timing,
    )
    return result, time.perf_counter() - started


def aggregate(summaries: list[dict]) -> dict:
    out = {"repeats": len(summaries)}
    for key in AGGREGATE_KEYS:
        vals = [s[key] for s in summaries if s.get(key) is not None]
        if not vals:
            out[key] = {"mean": None, "std": None}
            continue
        arr = np.asarray(vals, dtype=np.float64)
        out[key] = {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if arr.size > 1 else None}
    return out


def _dump(path: str, obj) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, write: bool = True) -> ExperimentResult:
    """Run ``cfg.repeats`` seeds (``seed, seed+1, ...``) and write per-run and aggregate files."""
    problem = cfg.build_problem()
    seeds = [cfg.seed + r for r in range(cfg.repeats)]
    root = os.path.join(cfg.out, cfg.algorithm)

    if jobs > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(lambda s: _run_one(cfg, s, problem), seeds))
    else:
        outcomes = [_run_one(cfg, s, problem) for s in seeds]

    runs = []
    failures = []
    for seed, (result, wall) in zip(seeds, outcomes):
        run_dir = os.path.join(root, str(seed))
        csv_path = os.path.join(run_dir, "metrics.csv") if write else None
        _, summary = metrics_flush(result.records, csv_path)
        summary["tail_loss"] = tail_loss(result.records, cfg.tail_fraction)
        summary.update(
            seed=seed,
            algorithm=cfg.algorithm,
            eta=result.eta,
            delta=result.delta,
            period=cfg.averaging_period if cfg.algorithm == "liec" else None,
            fidelity=cfg.fidelity,
            problem=problem.describe(),
            compressor=cfg.worker_spec.describe(),
            server_compressor=cfg.server_spec.describe(),
            diverged=result.diverged is not None,
            divergence=result.diverged,
            monitors={k: m.report() for k, m in result.monitors.items()},
        )
        if cfg.record_timing:
            summary["wall_s"] = wall
        if result.diverged is not None:
            failures.append(f"seed {seed}: diverged: {result.diverged}")
        failures += [f"seed {seed}: monitor {k} failed" for k, m in result.monitors.items() if not m.passed]
        if write:
            _dump(os.path.join(run_dir, "summary.json"), summary)
        summary["_result"] = result
        summary["_wall_s"] = wall
        runs.append(summary)

    agg = aggregate(runs)
    agg.update(algorithm=cfg.algorithm, seeds=seeds, homogeneous=problem.homogeneous)
    if write:
        os.makedirs(root, exist_ok=True)
        _dump(os.path.join(root, "summary.json"), agg)
        with open(os.path.join(root, "config.txt"), "w") as fh:
            fh.write(cfg.to_text())
    diverged = any(r["diverged"] for r in runs)
    return ExperimentResult(cfg, runs, agg, root, ok=not failures, diverged=diverged, failures=failures)


def run_speedup_sweep(cfg: ExperimentConfig, worker_counts, jobs: int = 1, write: bool = True) -> dict:
    """Rerun ``cfg`` for each N with ``lr * N`` as step size and ``iterations // N`` rounds.

    ``cfg.lr`` and ``cfg.iterations`` are read as the single-worker values.
    Rows report the repeat-averaged final loss (tail-averaged when
    ``tail_fraction > 0``); ``agree`` is set when the relative spread
    ``(max - min) / mean`` is within ``speedup_tolerance``.
    """
    counts = [int(n) for n in worker_counts]
    if not counts or min(counts) < 1:
        raise ValueError("worker_counts must be a non-empty list of positive integers")
    rows = []
    for n in counts:
        sub = cfg.replace(
            workers=n,
            lr=cfg.lr * n,
            iterations=max(1, cfg.iterations // n),
            out=os.path.join(cfg.out, "sweep", f"N{n}"),
        )
        started = time.perf_counter()
        res = run_experiment(sub, jobs=jobs, write=write)
        rows.append(
            {
                "workers": n,
                "iterations": sub.iterations,
                "eta": sub.lr,
                "final_loss": res.aggregate["tail_loss"]["mean"],
                "final_loss_std": res.aggregate["tail_loss"]["std"],
                "last_loss": res.aggregate["final_loss"]["mean"],
                "wall_s": time.perf_counter() - started,
                "ok": res.ok,
            }
        )
    table = {"algorithm": cfg.algorithm, "rows": rows, "tolerance": cfg.speedup_tolerance}
    if len(rows) > 1:
        losses = np.array([r["final_loss"] for r in rows], dtype=np.float64)
        spread = float((losses.max() - losses.min()) / losses.mean())
        table["relative_spread"] = spread
        table["agree"] = bool(spread <= cfg.speedup_tolerance)
    if write:
        root = os.path.join(cfg.out, "sweep")
        os.makedirs(root, exist_ok=True)
        _dump(os.path.join(root, "speedup.json"), table)
        with open(os.path.join(root, "speedup.csv"), "w") as fh:
            fh.write("workers,iterations,eta,final_loss,final_loss_std,wall_s\n")
            for r in rows:
                fh.write(f"{r['workers']},{r['iterations']},{r['eta']!r},{r['final_loss']!r},{r['final_loss_std']!r},{r['wall_s']:.3f}\n")
    return table


def bound_monitors(records, delta: float, N: int, eta: float) -> tuple[Monitor, Monitor]:
    """Replay the server-error and disagreement bounds over finished records."""
    m1 = Monitor("lemma1_error_bound")
    m2 = Monitor("lemma2_disagreement_bound")
    m_hat = 0.0
    for r in records:
        m_hat = max(m_hat, r.grad_norm_max)
        m1.observe(r.t, r.err_sq, lemma1_bound(delta, N, m_hat))
        m2.observe(r.t, r.disagreement, lemma2_bound(delta, eta, m_hat))
    return m1, m2


def _entry(name: str, observed: float, bound: float, passed: bool, **extra) -> dict:
    return {"name": name, "observed": float(observed), "bound": float(bound), "passed": bool(passed), **extra}


def run_contract_suite(lemma1_delta: float | None = None, seed: int = 0, scale: float = 1.0) -> dict:
    """Bundle the runtime invariants into one pass/fail report.

    ``lemma1_delta`` replaces the contraction constant fed to the server-error
    bound only, which lets a test mis-set it and watch that single entry fail.
    ``scale`` shrinks the iteration counts for quick checks.
    """
    entries = []
    T = lambda n: max(20, int(n * scale))  # noqa: E731

    quad = make_quadratic(100, 8, condition=10.0, sigma=1.0, seed=seed)
    topk = CompressorSpec("top-k", k=10)
    res = run("liec", quad, T(1000), 0.02, seed=seed, compressor=topk, period=10)
    for key in ("virtual_sequence", "sync_error_reset", "sync_model_agreement"):
        m = res.monitors[key]
        entries.append(_entry(key, m.worst_observed, m.worst_bound, m.passed, checked=m.checked))

    randk = CompressorSpec("random-k", k=25)
    eta = 0.02
    res = run("liec", quad, T(2000), eta, seed=seed, compressor=randk, period=4, monitors=False)
    m1, _ = bound_monitors(res.records, lemma1_delta if lemma1_delta is not None else 0.25, 8, eta)
    _, m2 = bound_monitors(res.records, 0.25, 8, eta)
    for m in (m1, m2):
        entries.append(_entry(m.name, m.worst_observed, m.worst_bound, m.passed, violations=m.violations, checked=m.checked))

    samples = max(500, int(4000 * scale))
    dr = measure_delta(randk, 100, samples, RngStream(seed, 0, "probe"))
    entries.append(_entry("contraction_random_k", abs(dr - 0.25), 0.01, abs(dr - 0.25) <= 0.01, delta=dr))
    dt = measure_delta(CompressorSpec("top-k", k=25), 100, samples, RngStream(seed, 1, "probe"))
    entries.append(_entry("contraction_top_k", dt, 1.0, 0.25 <= dt < 1.0, lower=0.25))

    small = make_quadratic(20, 4, condition=5.0, sigma=0.5, seed=seed)
    ident = CompressorSpec("identity")
    ref = _trajectory("psgd", small, T(300), ident, seed)
    for alg in ("liec", "memsgd", "doublesqueeze"):
        traj = _trajectory(alg, small, T(300), ident, seed, period=5)
        diff = float(np.max(np.abs(traj - ref)))
        entries.append(_entry(f"identity_collapse_{alg}", diff, 0.0, np.array_equal(traj, ref)))

    return {"schema_version": 1, "passed": all(e["passed"] for e in entries), "entries": entries}


def _trajectory(alg, problem, T, spec, seed, period=None) -> np.ndarray:
    xs = []
    run(alg, problem, T, 0.05, seed=seed, compressor=spec, period=period, monitors=False, callback=lambda rec, res: xs.append(res.x_bar))
    return np.array(xs)
