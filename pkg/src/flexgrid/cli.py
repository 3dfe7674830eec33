"""Command line entry point: ``flexgrid run | report | consolidate | oracle-check``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .experiment import ExperimentConfig, ExperimentError, ReportError, emit_reports, run_experiment


def _run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    out = run_experiment(cfg, args.out)
    print(f"run written to {out}")
    print((out / "summary.txt").read_text(), end="")
    return 0


def _report(args) -> int:
    for path in emit_reports(args.run):
        print(path)
    return 0


def _consolidate(args) -> int:
    paths = [p for p in emit_reports(args.run) if p.name == "consolidated_response.csv"]
    if not paths:
        print(f"{args.run}: no events to consolidate", file=sys.stderr)
        return 1
    print(paths[0])
    return 0


def _oracle_check(args) -> int:
    from .checks import dispatch_gap_check, heatmap_shift_check, toy_fit_check

    ok = True
    fit = toy_fit_check(args.seed)
    passed = fit.max_abs_error <= 0.02 and fit.sign_agreement >= 0.99
    ok &= passed
    print(
        f"fqi-vs-dp     {'PASS' if passed else 'FAIL'}  max|dQ|={fit.max_abs_error:.4g} kWh  "
        f"sign agreement={fit.sign_agreement:.4f}  ({fit.seconds:.1f} s)"
    )
    gaps = dispatch_gap_check(args.seed, args.instances)
    ratio = sum(g.heuristic.objective for g in gaps) / max(sum(g.oracle.objective for g in gaps), 1e-12)
    bau_exact = all(g.ratio == 1.0 for g in gaps if g.kappa_is_bau)
    passed = ratio <= 1.3 and bau_exact
    ok &= passed
    per = np.array([g.ratio for g in gaps if not g.kappa_is_bau])
    print(
        f"dispatch-gap  {'PASS' if passed else 'FAIL'}  aggregate ratio={ratio:.3f}  "
        f"median per-instance={np.median(per):.3f}  kappa=BAU exact={bau_exact}"
    )
    shift = heatmap_shift_check()
    passed = shift.post_level - shift.base_level >= 0.5 * shift.offset and abs(shift.crossing_minute) <= 30
    ok &= passed
    print(
        f"heatmap-shift {'PASS' if passed else 'FAIL'}  boundary {shift.base_level:.2f} -> {shift.post_level:.2f} degC  "
        f"crossing at {shift.crossing_minute:+d} min"
    )
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexgrid", description="Advantage-ranked demand response on simulated houses.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run the full experiment")
    p.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
    p.add_argument("--out", type=Path, required=True, help="artifact directory")
    p.set_defaults(func=_run)

    p = sub.add_parser("report", help="rebuild reports of a finished run")
    p.add_argument("--run", type=Path, required=True)
    p.set_defaults(func=_report)

    p = sub.add_parser("consolidate", help="rebuild the consolidated event response of a run")
    p.add_argument("--run", type=Path, required=True)
    p.set_defaults(func=_consolidate)

    p = sub.add_parser("oracle-check", help="compare learner and dispatcher against exact solutions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=50)
    p.set_defaults(func=_oracle_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ExperimentError as exc:
        print(f"flexgrid {args.verb}: {exc}", file=sys.stderr)
        return 2
    except (ReportError, ValueError, OSError) as exc:
        print(f"flexgrid {args.verb}: [{args.verb}] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
