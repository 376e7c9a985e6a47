"""Command-line front end: run one simulation, sweep a parameter grid, or
validate a scenario file.

Exit codes: 0 success, 2 scenario/schema error, 3 internal-consistency abort.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .core import InternalConsistencyError, MalformedInputError, SimulationError
from .engine import RunConfig, run
from .scenario import ScenarioError, load_scenario

EXIT_SCHEMA = 2
EXIT_INTERNAL = 3


def _bool_flag(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _fusion_types(value: str) -> tuple[bool, bool]:
    parts = {p.strip() for p in value.split(",") if p.strip()}
    unknown = parts - {"a", "b"}
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown fusion types {sorted(unknown)}")
    return ("a" in parts, "b" in parts)


_STRATEGY_ALIASES = {"broadcast": "broadcast", "request": "request",
                     "adaptive": "adaptive"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coopvru",
        description="Cooperative VRU perception and intention detection simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one configuration")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--coop", type=_bool_flag, default=True, metavar="on|off")
    p_run.add_argument("--strategy", choices=sorted(_STRATEGY_ALIASES), default="adaptive")
    p_run.add_argument("--fusion", type=_fusion_types, default=(True, True),
                       metavar="a,b", help="enabled fusion types (default a,b)")
    p_run.add_argument("--track-fusion", choices=("ci", "naive"), default="ci")
    p_run.add_argument("--out", default=None, help="output directory for reports")
    p_run.add_argument("--trace", action="store_true",
                       help="record per-tick stage order in the report")

    p_sweep = sub.add_parser("sweep", help="run seeds x parameter grid in parallel")
    p_sweep.add_argument("--scenario", required=True)
    p_sweep.add_argument("--seeds", type=int, required=True,
                         help="number of seeds (0..n-1)")
    p_sweep.add_argument("--grid", default="",
                         help="e.g. coop=on|off,strategy=adaptive|broadcast")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    p_val = sub.add_parser("validate", help="check a scenario file")
    p_val.add_argument("--scenario", required=True)
    return parser


def _parse_grid(spec: str) -> list[dict]:
    """'coop=on|off,strategy=adaptive|broadcast' -> list of config overrides."""
    if not spec.strip():
        return [{}]
    axes = []
    for part in spec.split(","):
        if "=" not in part:
            raise MalformedInputError(f"grid entry {part!r} is not param=values")
        name, values = part.split("=", 1)
        name = name.strip()
        choices = [v.strip() for v in values.split("|") if v.strip()]
        if name == "coop":
            axes.append([("coop", v == "on") for v in choices])
        elif name == "strategy":
            axes.append([("strategy", v) for v in choices])
        elif name == "track_fusion":
            axes.append([("track_fusion", v) for v in choices])
        elif name == "fusion":
            axes.append([("fusion", _fusion_types(v)) for v in choices])
        else:
            raise MalformedInputError(f"unknown grid parameter {name!r}")
    return [dict(combo) for combo in itertools.product(*axes)]


def _config_from(scenario: str, seed: int, overrides: dict, out_dir=None,
                 **kw) -> RunConfig:
    fusion = overrides.pop("fusion", kw.pop("fusion", (True, True)))
    return RunConfig(
        scenario_path=scenario,
        seed=seed,
        fusion_a=fusion[0],
        fusion_b=fusion[1],
        out_dir=out_dir,
        **{**kw, **overrides},
    )


def _sweep_one(args: tuple) -> dict:
    scenario, seed, override_items, out_dir = args
    overrides = dict(override_items)
    config = _config_from(scenario, seed, dict(overrides), out_dir)
    report = run(config)
    row = {"seed": seed, "out": out_dir}
    row.update({k: (v if not isinstance(v, tuple) else "".join(
        n for n, f in zip("ab", v) if f)) for k, v in overrides.items()})
    row["warning_lead_s"] = report.warning_lead
    row["coverage_overall"] = report.coverage_overall
    row["runtime_s"] = report.runtime_s
    return row


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "validate":
            load_scenario(args.scenario)
            print(f"{args.scenario}: ok")
            return 0
        if args.command == "run":
            config = _config_from(
                args.scenario, args.seed, {}, args.out,
                coop=args.coop, strategy=args.strategy, fusion=args.fusion,
                track_fusion=args.track_fusion, trace=args.trace,
            )
            report = run(config)
            lead = "missed" if report.warning_lead is None else f"{report.warning_lead:.2f} s"
            print(f"ticks={report.n_ticks} coverage={report.coverage_overall:.3f} "
                  f"warning_lead={lead} runtime={report.runtime_s:.2f} s")
            if args.out:
                print(f"reports written to {args.out}")
            return 0
        if args.command == "sweep":
            combos = _parse_grid(args.grid)
            jobs = []
            for i, overrides in enumerate(combos):
                for seed in range(args.seeds):
                    tag = "_".join(
                        f"{k}-{v}" if not isinstance(v, tuple) else
                        f"{k}-{''.join(n for n, f in zip('ab', v) if f)}"
                        for k, v in overrides.items()) or "base"
                    out_dir = os.path.join(args.out, f"{tag}_seed{seed}")
                    jobs.append((args.scenario, seed, tuple(sorted(overrides.items())),
                                 out_dir))
            if args.jobs > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                    rows = list(pool.map(_sweep_one, jobs))
            else:
                rows = [_sweep_one(j) for j in jobs]
            os.makedirs(args.out, exist_ok=True)
            summary = os.path.join(args.out, "summary.csv")
            fields = sorted({k for row in rows for k in row})
            with open(summary, "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=fields)
                w.writeheader()
                w.writerows(rows)
            print(f"{len(rows)} runs -> {summary}")
            return 0
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except InternalConsistencyError as exc:
        print(f"internal consistency abort: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except MalformedInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    return 0


if __name__ == "__main__":
    sys.exit(main())
