"""Command line entry point.

    saddlelmm run <config> -o <dir>
    saddlelmm compare <config> -o <dir>
    saddlelmm export <field-file> -o <dir>
    saddlelmm presets list

``<config>`` is a YAML file or the name of a built-in preset.  The log
level is taken from the ``SADDLELMM_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys

from .config import PRESETS, ConfigFile, load_config, preset_names, serialize_config
from .driver import METHOD_PRESETS, find_sequence
from .report import COMPARE_METHODS, compare_methods, export_field_file, write_comparison, write_summary
from .stepsize import ConfigError

log = logging.getLogger("saddlelmm")

LOG_ENV = "SADDLELMM_LOG"


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def select_runs(cfg: ConfigFile, labels: list[str] | None) -> ConfigFile:
    """Restrict a plan to ``labels`` plus everything they depend on."""
    if not labels:
        return cfg
    by_label = {run["label"]: run for run in cfg.runs}
    unknown = [lab for lab in labels if lab not in by_label]
    if unknown:
        raise ConfigError(f"unknown run label(s): {', '.join(unknown)}")
    keep, stack = set(), list(labels)
    while stack:
        lab = stack.pop()
        if lab in keep:
            continue
        keep.add(lab)
        stack.extend(by_label[lab].get("support", []))
    new = copy.deepcopy(cfg)
    new.runs = [run for run in new.runs if run["label"] in keep]
    return new


def _load(args) -> ConfigFile:
    cfg = load_config(args.config)
    if getattr(args, "method", None):
        cfg = cfg.with_method(args.method)
    if getattr(args, "resolution", None):
        cfg = copy.deepcopy(cfg)
        cfg.domain["resolution"] = args.resolution
    only = args.only.split(",") if getattr(args, "only", None) else None
    return select_runs(cfg, only)


def cmd_run(args) -> int:
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.yaml"), "w") as fh:
        fh.write(serialize_config(cfg))
    results = find_sequence(cfg.plan())
    summary = write_summary(results, args.out, plots=not args.no_plots)
    for label, entry in summary["entries"].items():
        if entry["converged"]:
            print(f"{label}: converged  E = {entry['energy']:.6f}  iterations = {entry['iterations']}  "
                  f"phi evals = {entry['phi_evals']}")
        else:
            print(f"{label}: {entry['status']}  ({entry.get('error', '')})")
    return 0 if summary["all_converged"] else 1


def cmd_compare(args) -> int:
    cfg = _load(args)
    methods = args.methods.split(",") if args.methods else list(COMPARE_METHODS)
    bad = [m for m in methods if m not in METHOD_PRESETS]
    if bad:
        raise ConfigError(f"unknown method(s) {', '.join(bad)}; choose from {', '.join(METHOD_PRESETS)}")
    report = compare_methods(cfg, methods)
    write_comparison(report, args.out, plots=not args.no_plots)
    print(f"{'label':6s} {'method':16s} {'status':20s} {'iters':>6s} {'evals':>6s} {'solves':>7s} {'time':>8s} {'energy':>12s}")
    for r in report.rows:
        print(f"{r.label:6s} {r.method:16s} {r.status:20s} {r.iterations:6d} {r.phi_evals:6d} "
              f"{r.linear_solves:7d} {r.wall_time:8.2f} {r.energy:12.6f}")
    wins, n = report.fewer_evals()
    if n:
        print(f"CG-StrongWolfe used fewer evaluations than SD-Armijo on {wins} of {n} rows converged under every method")
    return 0 if all(r.converged for r in report.rows) else 1


def cmd_export(args) -> int:
    for path in export_field_file(args.record, args.out, plots=not args.no_plots):
        print(path)
    return 0


def cmd_presets(args) -> int:
    if args.action == "list":
        for name in preset_names():
            print(f"{name:22s} {PRESETS[name]}")
        return 0
    print(serialize_config(load_config(args.action)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="saddlelmm", description="Multiple unstable solutions of semilinear elliptic problems")
    sub = ap.add_subparsers(dest="command", required=True)

    def plan_args(p):
        p.add_argument("config", help="YAML configuration file or preset name")
        p.add_argument("-o", "--out", required=True, help="output directory")
        p.add_argument("--only", help="comma separated run labels (dependencies are added)")
        p.add_argument("--resolution", type=int, help="override the grid resolution")
        p.add_argument("--no-plots", action="store_true", help="write CSV files only")

    p = sub.add_parser("run", help="run a plan and write records")
    plan_args(p)
    p.add_argument("--method", choices=sorted(METHOD_PRESETS), help="replace the method section by a preset")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run a plan under several method presets")
    plan_args(p)
    p.add_argument("--methods", help=f"comma separated method presets (default {','.join(COMPARE_METHODS)})")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export", help="plot data for a solution field file")
    p.add_argument("record", help="<label>.field file written by run")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("presets", help="list presets or print one as YAML")
    p.add_argument("action", help="'list' or a preset name")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
