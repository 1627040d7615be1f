"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 invariant failure or divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .compressors import measure_delta, parse_spec
from .config import ConfigError, load_config
from .experiments import run_contract_suite, run_experiment, run_speedup_sweep
from .numerics import RngStream

log = logging.getLogger("liecsgd")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2


def _overrides(args) -> dict:
    return {"seed": args.seed, "out": args.out, "fidelity": args.fidelity}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="flat key = value experiment config")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--fidelity", choices=("lossless", "wire"), help="channel fidelity (overrides the config)")
    p.add_argument("--jobs", type=int, default=1, help="repeats run on this many threads")


def cmd_run(args) -> int:
    cfg = load_config(args.config, **_overrides(args))
    res = run_experiment(cfg, jobs=args.jobs)
    agg = res.aggregate
    print(f"{cfg.algorithm}: {len(res.runs)} run(s) -> {res.root}")
    print(f"final_loss mean={agg['final_loss']['mean']!r} std={agg['final_loss']['std']!r}")
    for msg in res.failures:
        print(f"FAIL {msg}", file=sys.stderr)
    return EXIT_OK if res.ok else EXIT_INVARIANT


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, **_overrides(args))
    try:
        counts = [int(s) for s in args.workers.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("--workers", f"expected a comma separated list of integers, got {args.workers!r}") from None
    table = run_speedup_sweep(cfg, counts, jobs=args.jobs)
    print(f"{'N':>4} {'T':>8} {'eta':>10} {'final_loss':>14} {'wall_s':>8}")
    for r in table["rows"]:
        print(f"{r['workers']:>4} {r['iterations']:>8} {r['eta']:>10.4g} {r['final_loss']:>14.6g} {r['wall_s']:>8.2f}")
    if "agree" in table:
        print(f"relative spread {table['relative_spread']:.3f} (tolerance {table['tolerance']}): {'agree' if table['agree'] else 'DISAGREE'}")
    ok = all(r["ok"] for r in table["rows"]) and table.get("agree", True)
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_contracts(args) -> int:
    report = run_contract_suite(seed=args.seed or 0, scale=args.scale)
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    for e in report["entries"]:
        print(f"{'PASS' if e['passed'] else 'FAIL'} {e['name']}: observed {e['observed']:.6g} bound {e['bound']:.6g}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_INVARIANT


def cmd_measure_delta(args) -> int:
    try:
        spec = parse_spec(args.spec)
        spec.delta(args.dim)
    except ValueError as exc:
        raise ConfigError("spec", str(exc)) from None
    delta = measure_delta(spec, args.dim, args.samples, RngStream(args.seed or 0, 0, "probe"))
    print(json.dumps({"compressor": spec.describe(), "dim": args.dim, "samples": args.samples, "delta": delta, "nominal_delta": spec.delta(args.dim)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liecsgd", description="Simulated parameter-server runs for LIEC-SGD and its baselines.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="linear-speedup sweep over worker counts")
    _add_run_flags(p)
    p.add_argument("--workers", default="1,2,4,8", help="comma separated worker counts")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("contracts", help="run the invariant contract suite")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--scale", type=float, default=1.0, help="shrink iteration counts (e.g. 0.2 for a smoke run)")
    p.set_defaults(func=cmd_contracts)

    p = sub.add_parser("measure-delta", help="empirical contraction constant of a compressor")
    p.add_argument("spec", help="e.g. top-k:k=25, random-k:k=25, sign, blockwise-sign:num_blocks=10")
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_measure_delta)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
