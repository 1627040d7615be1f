"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (visible even when pytest
captures output) and then asserts. Run with ``pytest tests/test_acceptance.py``.
"""
import math
import time

import mpmath
import numpy as np
import pytest

from liecsgd.algorithms import corollary1_lr, lemma1_bound, lemma2_bound, run, theorem1_threshold
from liecsgd.compressors import CompressorSpec, compress_blockwise_sign, compress_randk, compress_sign, decompress, measure_delta
from liecsgd.config import parse_config
from liecsgd.experiments import run_experiment, run_speedup_sweep
from liecsgd.harness import encode, records_to_csv
from liecsgd.numerics import RngStream
from liecsgd.problems import fd_gradient, full_grad, make_logistic, make_quadratic

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    def report(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:>2}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return report


@pytest.fixture(scope="module")
def quad():
    """The standard noisy quadratic: d=100, N=8, condition 10, sigma 1."""
    return make_quadratic(100, 8, condition=10.0, sigma=1.0, seed=0)


def test_01_virtual_sequence(verdict, quad):
    start = time.perf_counter()
    res = run("liec", quad, 2000, 0.02, seed=0, compressor=CompressorSpec("top-k", k=10), period=10)
    wall = time.perf_counter() - start
    m = res.monitors["virtual_sequence"]
    ok = m.passed and m.checked == 2000 and wall < 5.0 and res.diverged is None
    verdict(1, "virtual-sequence identity", ok, f"worst deviation {m.worst_observed:.3g} vs allowance {m.worst_bound:.3g}, {wall:.2f} s")


def test_02_identity_collapse(verdict):
    p = make_quadratic(10, 3, condition=5.0, sigma=1.0, seed=1)

    def traj(alg):
        xs = []
        run(alg, p, 1000, 0.05, seed=2, period=7, monitors=False, callback=lambda r, s: xs.append(s.x_bar))
        return np.array(xs)

    start = time.perf_counter()
    ref = traj("psgd")
    same = {alg: np.array_equal(traj(alg), ref) for alg in ("liec", "memsgd", "doublesqueeze")}
    wall = time.perf_counter() - start
    verdict(2, "identity-compressor collapse", all(same.values()) and wall < 2.0, f"bitwise equal {same}, {wall:.2f} s")


def test_03_contraction_statistics(verdict):
    start = time.perf_counter()
    dr = measure_delta(CompressorSpec("random-k", k=25), 100, 10_000, RngStream(0, 0, "probe"))
    dt = measure_delta(CompressorSpec("top-k", k=25), 100, 10_000, RngStream(0, 1, "probe"))
    wall = time.perf_counter() - start
    ok = abs(dr - 0.25) <= 0.01 and 0.25 <= dt < 1.0 and wall < 5.0
    verdict(3, "contraction statistics", ok, f"random-k {dr:.4f}, top-k {dt:.4f}, {wall:.2f} s")


def test_04_random_k_unbiasedness(verdict):
    x = np.array([1.0, -2.0, 3.0, 0.5, 4.0, -1.5, 2.5, 0.0])
    k, n = 2, 100_000
    gen = RngStream(4, 0, "compressor").generator()
    draws = np.array([decompress(compress_randk(x, k, gen), x.size) for _ in range(n)])
    se = draws.std(axis=0, ddof=1) / math.sqrt(n)
    z = np.abs(draws.mean(axis=0) - (k / x.size) * x) / np.where(se > 0, se, 1.0)
    ok = bool(np.all(z <= 3.0))
    verdict(4, "random-k unbiasedness", ok, f"max |z| = {z.max():.2f} over {x.size} coordinates")


@pytest.fixture(scope="module")
def lemma_run(quad):
    return run("liec", quad, 5000, 0.02, seed=0, compressor=CompressorSpec("random-k", k=25), period=4)


def test_05_lemma1_bound(verdict, lemma_run):
    m_hat, worst, violations = 0.0, 0.0, 0
    for r in lemma_run.records:
        m_hat = max(m_hat, r.grad_norm_max)
        b = lemma1_bound(0.25, 8, m_hat)
        worst = max(worst, r.err_sq / b)
        violations += r.err_sq > b
    ok = violations == 0 and len(lemma_run.records) == 5000 and lemma_run.monitors["lemma1_error_bound"].passed
    verdict(5, "server-error bound", ok, f"{violations} violations, worst observed/bound {worst:.3f}")


def test_06_lemma2_bound(verdict, lemma_run):
    m_hat, worst, violations = 0.0, 0.0, 0
    for r in lemma_run.records:
        m_hat = max(m_hat, r.grad_norm_max)
        b = lemma2_bound(0.25, lemma_run.eta, m_hat)
        worst = max(worst, r.disagreement / b)
        violations += r.disagreement > b
    ok = violations == 0 and lemma_run.monitors["lemma2_disagreement_bound"].passed
    verdict(6, "disagreement bound", ok, f"{violations} violations, worst observed/bound {worst:.3f}")


def test_07_sync_invariants(verdict):
    p = make_quadratic(20, 4, condition=5.0, sigma=1.0, seed=2)
    H = 10
    checked, bad = 0, 0

    def check(rec, res):
        nonlocal checked, bad
        if (rec.t + 1) % H == 0:
            checked += 1
            e = float(np.linalg.norm(res.server.error))
            spread = max(float(np.linalg.norm(w.x - v.x)) for w in res.workers for v in res.workers)
            bad += e != 0.0 or spread != 0.0

    res = run("liec", p, 10_000, 0.02, seed=0, compressor=CompressorSpec("top-k", k=2), period=H, monitors=False, callback=check)
    ok = checked == 1000 and bad == 0 and res.diverged is None
    verdict(7, "sync-round invariants", ok, f"{checked} sync rounds checked, {bad} with nonzero error or model spread")


def test_08_error_norm_ordering(verdict, quad):
    spec = CompressorSpec("top-k", k=10)
    liec = run("liec", quad, 5000, 0.02, seed=0, compressor=spec, period=10, monitors=False)
    ds = run("doublesqueeze", quad, 5000, 0.02, seed=0, compressor=spec)
    a = float(np.mean([r.err_sq for r in liec.records]))
    b = float(np.mean([r.err_sq for r in ds.records]))
    verdict(8, "error-norm ordering", a * 2 <= b and a < b, f"LIEC {a:.4g} vs DoubleSqueeze {b:.4g} (factor {b / a:.1f})")


def test_09_sign_compression_ratio(verdict):
    d = 2**20
    x = np.random.default_rng(9).standard_normal(d)
    sign = len(encode(compress_sign(x)))
    block = len(encode(compress_blockwise_sign(x, 10)))
    r1, r10 = 4 * d / sign, 4 * d / block
    ok = sign <= 4 * d / 31.5 and r10 >= 31.0
    verdict(9, "sign compression ratio", ok, f"sign {sign} bytes ({r1:.3f}x), 10 blocks {block} bytes ({r10:.3f}x)")


SPEEDUP_CONFIG = """\
schema_version = 1
algorithm = liec
problem = quadratic
dim = 100
sigma = 1.0
condition = 2
compressor = sign
period = 100
lr = 0.0125
iterations = 16000
repeats = 3
tail_fraction = 0.1
speedup_tolerance = 0.2
"""


def test_10_linear_speedup(verdict, tmp_path):
    # lr is the single-worker rate 1/80; the sweep scales it to N/80 and runs 16000/N rounds
    cfg = parse_config(SPEEDUP_CONFIG, out=str(tmp_path))
    start = time.perf_counter()
    table = run_speedup_sweep(cfg, [1, 2, 4, 8], write=False)
    wall = time.perf_counter() - start
    losses = ", ".join(f"N={r['workers']}: {r['final_loss']:.4f}" for r in table["rows"])
    ok = table["agree"] and wall < 60.0
    verdict(10, "linear speedup", ok, f"relative spread {table['relative_spread']:.3f} ({losses}), {wall:.1f} s")


def test_11_gradient_oracle(verdict):
    q = make_quadratic(50, 4, condition=10.0, sigma=1.0, seed=3)
    lg = make_logistic(50, 4, 50, seed=3)
    pts = np.random.default_rng(11).standard_normal((10, 50))
    rq = max(np.linalg.norm(fd_gradient(q, x) - full_grad(q, x)) / np.linalg.norm(full_grad(q, x)) for x in pts)
    rl = max(np.linalg.norm(fd_gradient(lg, x) - full_grad(lg, x)) / np.linalg.norm(full_grad(lg, x)) for x in pts)
    verdict(11, "gradient-oracle fidelity", rq <= 1e-5 and rl <= 1e-4, f"quadratic {rq:.2e}, logistic {rl:.2e}")


def _reference_lr(T, N, L, delta):
    with mpmath.workdps(40):
        T, N, L, delta = (mpmath.mpf(v) for v in (T, N, L, delta))
        return 1 / (mpmath.sqrt(T / N) + L + mpmath.cbrt(T) / delta ** (mpmath.mpf(2) / 3))


def test_12_corollary1_schedule(verdict):
    gen = np.random.default_rng(12)
    worst_rel, gate_failures = 0.0, 0
    for _ in range(100):
        T = int(10 ** gen.uniform(0, 9))
        N = int(gen.integers(1, 1025))
        L = float(10 ** gen.uniform(-3, 3))
        delta = float(gen.uniform(1e-3, 1.0))
        eta = corollary1_lr(T, N, L, delta)
        ref = _reference_lr(T, N, L, delta)
        worst_rel = max(worst_rel, float(abs(eta - ref) / ref))
        # beyond T >= 1000 L^3 / delta the step size clears the eta < delta / (10 L) gate
        threshold = theorem1_threshold(L, delta)
        assert threshold == 1000 * L**3 / delta
        for T_gate in (math.ceil(threshold), math.ceil(threshold) * 3, max(T, math.ceil(threshold))):
            gate_failures += not corollary1_lr(T_gate, N, L, delta) < delta / (10 * L)
    ok = worst_rel < 5e-13 and gate_failures == 0
    verdict(12, "step-size schedule", ok, f"worst relative error {worst_rel:.2e} (12 digits), {gate_failures} gate failures")


DETERMINISM_CONFIG = """\
schema_version = 1
algorithm = liec
dim = 100
workers = 8
condition = 10
sigma = 1.0
compressor = random-k
k = 25
period = 4
lr = 0.02
iterations = 500
repeats = 4
"""


def test_13_determinism(verdict, tmp_path):
    cfg = parse_config(DETERMINISM_CONFIG)
    serial = run_experiment(cfg.replace(out=str(tmp_path / "serial")), jobs=1)
    run_experiment(cfg.replace(out=str(tmp_path / "threaded")), jobs=4)
    run_experiment(cfg.replace(out=str(tmp_path / "again")), jobs=2)
    same = 0
    for seed in serial.aggregate["seeds"]:
        a = (tmp_path / "serial" / "liec" / str(seed) / "metrics.csv").read_bytes()
        b = (tmp_path / "threaded" / "liec" / str(seed) / "metrics.csv").read_bytes()
        c = (tmp_path / "again" / "liec" / str(seed) / "metrics.csv").read_bytes()
        same += a == b == c
    # the criterion-1 run repeated in-process reproduces its CSV too
    p = make_quadratic(100, 8, condition=10.0, sigma=1.0, seed=0)
    spec = CompressorSpec("top-k", k=10)
    t1 = records_to_csv(run("liec", p, 300, 0.02, compressor=spec, period=10).records)
    t2 = records_to_csv(run("liec", p, 300, 0.02, compressor=spec, period=10).records)
    ok = same == cfg.repeats and t1 == t2
    verdict(13, "determinism", ok, f"{same}/{cfg.repeats} seeds byte-identical across 1, 2 and 4 threads")
