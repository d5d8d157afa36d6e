"""Command line entry point: ``uavtse run|sweep|plot``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .experiment import MODES, ConfigError, RunConfig, load_config, run_experiment, summary_row, write_run


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["horizon_steps"] = args.steps
    if getattr(args, "lam", None) is not None:
        overrides["lam"] = args.lam
    return dataclasses.replace(cfg, **overrides)


def cmd_run(args) -> int:
    cfg = dataclasses.replace(_config(args), out_dir=str(args.out))
    result = run_experiment(cfg)
    print(f"wrote CSV files and figures to {args.out}")
    for key in sorted(k for k in result.metrics if not k.startswith("rmse_density_cell")):
        print(f"  {key} = {result.metrics[key]!r}")
    return 0


def _sweep_one(job):
    cfg, out = job
    result = run_experiment(cfg)
    write_run(result, out)
    return summary_row(cfg.seed, cfg.mode, result.metrics)


def cmd_sweep(args) -> int:
    base = _config(args)
    modes = [args.mode] if args.mode else list(MODES)
    out = Path(args.out)
    jobs = [(dataclasses.replace(base, seed=s, mode=m, out_dir=None), out / f"seed_{s:03d}" / m)
            for s in range(args.seeds) for m in modes]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    out.mkdir(parents=True, exist_ok=True)
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fields, lineterminator="\n", restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    print(f"wrote {len(rows)} runs and {out / 'summary.csv'}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_run

    for path in plot_run(args.run_dir, args.out):
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uavtse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="TOML run configuration")
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--steps", type=int, help="estimation horizon in steps")
        sp.add_argument("--lam", type=float, help="planner weight on free-flow speed uncertainty")

    r = sub.add_parser("run", help="run one experiment and write its CSV files and figures")
    common(r)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", type=Path, required=True)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run seeds 0..N-1 in each mode")
    common(s)
    s.add_argument("--seeds", type=int, required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", help="render SVG figures from a run directory")
    pl.add_argument("--from", dest="run_dir", type=Path, required=True)
    pl.add_argument("--out", type=Path, help="figure directory (default: the run directory)")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
