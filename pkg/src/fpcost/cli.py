"""Command-line interface.

Exit codes: 0 success, 1 assertion/convergence failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from . import io as fio
from . import fp, pathcost
from .step import SinkhornOptions, solve_step

USAGE_ERROR = 2
ASSERTION_ERROR = 1


def _fail_usage(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return USAGE_ERROR


def _cmd_run(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
    except OSError as exc:
        return _fail_usage(f"cannot read config: {exc}")
    except json.JSONDecodeError as exc:
        return _fail_usage(f"config is not valid JSON (line {exc.lineno}, "
                           f"column {exc.colno}): {exc.msg}")
    try:
        config = harness.config_from_dict(doc)
    except harness.ConfigError as exc:
        return _fail_usage(str(exc))
    result = harness.run_experiment(config)
    for check in result["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        print(f"{status} {result['scenario']}:{check['name']}")
    return 0 if result["passed"] else ASSERTION_ERROR


def _cmd_step(args) -> int:
    try:
        mu1 = fio.load_measure(args.mu1, h_max=args.h)
        mu2 = fio.load_measure(args.mu2, h_max=args.h)
    except (OSError, ValueError) as exc:
        return _fail_usage(str(exc))
    if args.h <= 0:
        return _fail_usage("--h must be positive")
    result = solve_step(mu1, mu2, args.h, SinkhornOptions())
    print(fio.dumps(fio.step_result_to_dict(result)))
    if args.dump_kernel:
        fio.dump_kernel(result.kernel, args.dump_kernel)
    return 0 if result.converged else ASSERTION_ERROR


def _cmd_path(args) -> int:
    try:
        ladder = [float(v) for v in args.ladder.split(",") if v]
    except ValueError:
        return _fail_usage(f"bad ladder {args.ladder!r}: expected h1,h2,...")
    if not ladder:
        return _fail_usage("ladder must be nonempty")
    try:
        path = fio.load_path(args.path, h_max=max(ladder))
        report = pathcost.energy_ladder(path, ladder)
    except (OSError, ValueError) as exc:
        return _fail_usage(str(exc))
    print(fio.dumps(fio.ladder_report_to_dict(report)))
    if args.csv:
        Path(args.csv).write_text(fio.ladder_report_csv(report))
    return 0


def _cmd_fp(args) -> int:
    try:
        drift_doc = json.loads(args.drift)
    except json.JSONDecodeError as exc:
        return _fail_usage(f"--drift is not valid JSON: {exc.msg}")
    try:
        mu0 = fio.load_measure(args.mu0)
        drift = harness.build_drift(mu0.grid, drift_doc)
        path = fp.fp_solve(mu0, drift, (0.0, args.t), dt=args.dt)
    except (OSError, ValueError, harness.ConfigError) as exc:
        return _fail_usage(str(exc))
    doc = {"p": path.grid.p, "n": path.grid.n, "t0": path.t0,
           "dt": path.dt, "frames": path.frames}
    if args.out:
        Path(args.out).write_text(fio.dumps(doc) + "\n")
    else:
        print(fio.dumps(doc))
    return 0


def _cmd_verify_appendix(args) -> int:
    kinds = [k for k in args.kinds.split(",") if k]
    bad = [k for k in kinds if k not in harness.KINDS]
    if bad:
        return _fail_usage(f"unknown kinds {bad}; expected {harness.KINDS}")
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    failed = False
    for kind in kinds:
        for _ in range(args.count):
            spec = harness.random_spec(kind, rng)
            cf = harness.closed_form_value(spec)
            val = harness.oracle_constrained_min(spec)
            rel = abs(val - cf) / max(abs(cf), 1e-2)
            worst = max(worst, rel)
            if rel > 1e-2:
                failed = True
                print(f"FAIL {kind}: oracle {val!r} vs closed form {cf!r}")
    print(f"worst relative deviation: {fio.format_float(worst)}")
    return ASSERTION_ERROR if failed else 0


def _cmd_report(args) -> int:
    src = Path(args.dir) / "report.json"
    if not src.exists():
        return _fail_usage(f"no report.json under {args.dir}")
    try:
        results = json.loads(src.read_text())
    except json.JSONDecodeError as exc:
        return _fail_usage(f"corrupt report.json: {exc.msg}")
    written = harness.emit_report(results, args.dir, formats=(args.format,))
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpcost",
        description="Entropic step costs, path functionals, and "
                    "Fokker-Planck scenarios on the torus grid.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario from a JSON config")
    p.add_argument("config")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("step", help="solve a single entropic step")
    p.add_argument("--mu1", required=True)
    p.add_argument("--mu2", required=True)
    p.add_argument("--h", type=float, required=True)
    p.add_argument("--dump-kernel", default=None)
    p.set_defaults(func=_cmd_step)

    p = sub.add_parser("path", help="energy ladder along a measure path")
    p.add_argument("--path", required=True)
    p.add_argument("--ladder", required=True, help="comma-separated scales")
    p.add_argument("--csv", default=None, help="also write a CSV report")
    p.set_defaults(func=_cmd_path)

    p = sub.add_parser("fp", help="solve the Fokker-Planck equation")
    p.add_argument("--drift", required=True, help="drift spec as JSON")
    p.add_argument("--mu0", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_fp)

    p = sub.add_parser("verify-appendix",
                       help="cross-check oracles against closed forms")
    p.add_argument("--kinds", default=",".join(harness.KINDS))
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_verify_appendix)

    p = sub.add_parser("report", help="re-emit a merged report")
    p.add_argument("dir")
    p.add_argument("--format", choices=("json", "csv"), required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (RuntimeError, fp.LadderDivergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ASSERTION_ERROR


if __name__ == "__main__":
    sys.exit(main())
