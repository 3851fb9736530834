"""Command line entry points.

Verbs:
  run     one experiment (one preset, one seed) with artifact output
  ablate  the preset suite across seeds, plus the comparison table
  check   the acceptance suite (prints one pass/fail line per criterion)
  render  dump depth maps for a saved checkpoint

System entropy is consulted only when `run` is invoked without --seed;
the drawn seed is recorded in report.json so the run stays reproducible.
"""

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .experiment import (PRESETS, SUITE_PRESETS, StageError, ablation_suite,
                         load_config, run_experiment, write_pgm)
from .reconstructor import load_params, predict_records

__all__ = ["main"]


def _fresh_seed() -> int:
    return int(np.random.SeedSequence().entropy % (2 ** 32))


def _all_finite(node) -> bool:
    if isinstance(node, dict):
        return all(_all_finite(v) for v in node.values())
    if isinstance(node, list):
        return all(_all_finite(v) for v in node)
    if isinstance(node, bool) or node is None or isinstance(node, str):
        return True
    if isinstance(node, (int, float)):
        return math.isfinite(node)
    return False


def _check_run_dir(run_dir: Path) -> list:
    """Validate one run directory; returns a list of problems (empty = ok)."""
    problems = []
    report_path = run_dir / "report.json"
    try:
        raw = report_path.read_bytes()
        report = json.loads(raw)
    except (OSError, ValueError) as e:
        return [f"{report_path}: unreadable ({e})"]
    again = (json.dumps(report, sort_keys=True, indent=1) + "\n").encode()
    if again != raw:
        problems.append(f"{report_path}: not in canonical form")
    if not _all_finite(report):
        problems.append(f"{report_path}: non-finite value")
    try:
        lines = (run_dir / "trace.jsonl").read_bytes().splitlines()
    except OSError as e:
        problems.append(f"{run_dir / 'trace.jsonl'}: unreadable ({e})")
        lines = None
    if lines is not None and len(lines) != report.get("n_trace_steps", -1):
        problems.append(f"{run_dir}: trace line count {len(lines)} != "
                        f"n_trace_steps {report.get('n_trace_steps')}")
    try:
        load_params(run_dir / "checkpoint.bin")
    except (OSError, ValueError) as e:
        problems.append(f"{run_dir / 'checkpoint.bin'}: {e}")
    return problems


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else _fresh_seed()
    preset = args.preset if args.preset is not None else cfg.variant
    out = args.out if args.out is not None else cfg.output_dir
    art = run_experiment(cfg, seed, preset=preset, out_dir=out)
    run_dir = Path(out) / preset / f"seed{seed:03d}"
    print(f"run complete: preset={preset} seed={seed} -> {run_dir}")
    for k, v in sorted(art.eval_final.aggregates.items()):
        print(f"  {k}: {v:.6g}")
    if args.check:
        problems = _check_run_dir(run_dir)
        if problems:
            for p in problems:
                print(f"check FAILED: {p}", file=sys.stderr)
            return 1
        print("artifact check: ok")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        seeds = [args.seed]
    elif args.seeds is not None:
        seeds = list(range(args.seeds))
    else:
        seeds = list(cfg.seeds)
    presets = SUITE_PRESETS
    if args.preset is not None:
        for name in args.preset.split(","):
            if name not in PRESETS:
                print(f"unknown preset {name!r} (known: {sorted(PRESETS)})",
                      file=sys.stderr)
                return 2
        presets = tuple(args.preset.split(","))
    out = args.out if args.out is not None else cfg.output_dir
    rows, _ = ablation_suite(cfg, seeds=seeds, out_dir=out, presets=presets,
                             jobs=args.jobs)
    print(f"suite complete: {len(presets)} presets x {len(seeds)} seeds "
          f"-> {Path(out) / 'table.csv'}")
    if args.check:
        problems = []
        for r in rows:
            problems += _check_run_dir(
                Path(out) / r["preset"] / f"seed{r['seed']:03d}")
        if problems:
            for p in problems:
                print(f"check FAILED: {p}", file=sys.stderr)
            return 1
        print("artifact check: ok")
    return 0


def _cmd_check(args) -> int:
    from .acceptance import run_acceptance
    criteria = None
    if args.criteria:
        criteria = sorted({int(c) for c in args.criteria.split(",")})
    return run_acceptance(criteria=criteria, out_dir=args.out,
                          jobs=args.jobs)


def _cmd_render(args) -> int:
    params = load_params(args.checkpoint)
    out = Path(args.out if args.out is not None else "render_out")
    out.mkdir(parents=True, exist_ok=True)
    recs = predict_records(params)
    lines = ["# gray = round(65535 * (value - lo) / (hi - lo)); "
             "invalid pixels are gray 0",
             "# file lo hi"]
    for vid, rec in sorted(recs.items()):
        name = f"view{vid:02d}_depth.pgm"
        if rec.valid.any():
            lo = float(rec.depth[rec.valid].min())
            hi = float(rec.depth[rec.valid].max())
        else:
            lo, hi = 0.0, 1.0
        write_pgm(out / name, rec.depth, rec.valid, lo, hi)
        lines.append(f"{name} {lo!r} {hi!r}")
    (out / "mapping.txt").write_bytes(("\n".join(lines) + "\n").encode())
    print(f"wrote {len(recs)} views to {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="viewgraft",
        description="Graft a misaligned inserted view into a multi-view "
                    "heightfield scene via test-time adaptation.")
    sub = p.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    run_p.add_argument("--config", help="JSON config path (default: "
                                        "built-in defaults)")
    run_p.add_argument("--seed", type=int,
                       help="run seed (default: drawn from system entropy "
                            "and recorded in report.json)")
    run_p.add_argument("--preset", choices=sorted(PRESETS),
                       help="ablation preset (default: config variant)")
    run_p.add_argument("--out", help="output directory")
    run_p.add_argument("--check", action="store_true",
                       help="validate the written artifacts; exit status "
                            "reflects the outcome")
    run_p.set_defaults(fn=_cmd_run)

    ab_p = sub.add_parser("ablate", help="run the ablation suite")
    ab_p.add_argument("--config", help="JSON config path")
    ab_p.add_argument("--seeds", type=int, help="number of seeds (0..k-1)")
    ab_p.add_argument("--seed", type=int, help="run a single seed instead")
    ab_p.add_argument("--preset",
                      help="comma-separated preset subset (default: the "
                           "seven-preset comparison suite)")
    ab_p.add_argument("--out", help="output directory")
    ab_p.add_argument("--jobs", type=int, default=1,
                      help="parallel seed workers")
    ab_p.add_argument("--check", action="store_true",
                      help="validate all written artifacts")
    ab_p.set_defaults(fn=_cmd_ablate)

    ck_p = sub.add_parser("check", help="run the acceptance suite")
    ck_p.add_argument("--criteria",
                      help="comma-separated criterion numbers "
                           "(default: all)")
    ck_p.add_argument("--out", help="scratch directory for suite artifacts")
    ck_p.add_argument("--jobs", type=int, default=1,
                      help="parallel seed workers for the heavy criteria")
    ck_p.set_defaults(fn=_cmd_check)

    rd_p = sub.add_parser("render", help="dump depth maps for a checkpoint")
    rd_p.add_argument("checkpoint", help="checkpoint.bin path")
    rd_p.add_argument("--out", help="output directory")
    rd_p.set_defaults(fn=_cmd_render)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
