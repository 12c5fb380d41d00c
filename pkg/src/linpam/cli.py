"""Command-line entry point ``linpam``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import AllDiverged, ConfigError
from .harness import (
    MODELS,
    TwinExperimentConfig,
    sweep,
    tune_regularization,
    write_metrics_csv,
    write_summary_json,
    write_sweep_csv,
)
from .sampling import resolve_seed


def parse_beta_grid(text: str) -> tuple:
    """``"a:b:step"`` (inclusive) or a single value."""
    parts = text.split(":")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"bad beta grid {text!r}") from exc
    if len(vals) == 1:
        return (vals[0],)
    if len(vals) != 3 or vals[2] <= 0 or vals[1] < vals[0]:
        raise ConfigError(f"beta grid must be a:b:step with step > 0, got {text!r}")
    a, b, step = vals
    count = int(round((b - a) / step)) + 1
    return tuple(round(a + i * step, 12) for i in range(count))


def parse_taper_grid(text: str) -> tuple:
    """Comma-separated radii; ``none`` or ``inf`` means no taper."""
    if text.strip().lower() == "none":
        return (None,)
    out = []
    for item in text.split(","):
        item = item.strip()
        if item.lower() in ("none", "inf"):
            out.append(None)
        else:
            try:
                out.append(float(item))
            except ValueError as exc:
                raise ConfigError(f"bad taper radius {item!r}") from exc
    return tuple(out)


def _parse_param(text: str):
    if "=" not in text:
        raise ConfigError(f"model parameter must be key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        value = json.loads(value)
    except json.JSONDecodeError:
        pass
    return key.strip(), value


def _run_parser(sub, model: str):
    p = sub.add_parser(model, help=f"twin experiment on the {model} model")
    p.add_argument("--filter", default="un-enkf",
                   choices=["un-enkf", "cons-enkf", "un-smf", "cons-smf"])
    p.add_argument("--M", type=int, default=20, help="ensemble size")
    p.add_argument("--r", type=int, default=None, help="number of invariants (synthetic)")
    p.add_argument("--cycles", type=int, default=2000)
    p.add_argument("--spinup", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None, help="falls back to LINPAM_SEED, then 0")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--beta-grid", default="1.0:1.2:0.01")
    p.add_argument("--taper-grid", default="2,4,8,16,32,inf")
    p.add_argument("--spread-def", default="trace", choices=["trace", "sqrt"])
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="extra model parameter, e.g. sigma_e=0.5 (repeatable)")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(model=model)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linpam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for model in MODELS:
        _run_parser(sub, model)
    sw = sub.add_parser("sweep", help="tuned sweep over ensemble sizes and invariant counts")
    sw.add_argument("--config", required=True, help="JSON configuration file")
    sw.add_argument("--out", default=None, help="output directory (overrides the config)")
    return parser


def _experiment(args) -> int:
    params = dict(_parse_param(t) for t in args.param)
    if args.r is not None:
        params["r"] = args.r
    config = TwinExperimentConfig(
        model=args.model, filter=args.filter, M=args.M, model_params=params,
        cycles=args.cycles, spinup=args.spinup, seed=resolve_seed(args.seed), reps=args.reps,
        beta_grid=parse_beta_grid(args.beta_grid), taper_grid=parse_taper_grid(args.taper_grid),
        spread_def=args.spread_def)
    out = Path(args.out or "linpam_out")
    out.mkdir(parents=True, exist_ok=True)
    try:
        beta, radius, runs = tune_regularization(config)
    except AllDiverged as exc:
        print(f"all grid points diverged: {exc}", file=sys.stderr)
        return 2
    for i, run in enumerate(runs):
        write_metrics_csv(run, out / ("metrics.csv" if i == 0 else f"metrics_rep{i}.csv"))
    write_summary_json(runs, out / "summary.json",
                       tuned={"beta": beta, "radius": radius if radius is not None else "inf"})
    avg = sum(r.rmse_avg for r in runs) / len(runs)
    print(f"{config.model} {config.filter} M={config.M} beta={beta} "
          f"radius={radius if radius is not None else 'inf'} rmse_avg={avg:.6g}")
    return 0


def _sweep(args) -> int:
    data = json.loads(Path(args.config).read_text())
    if not isinstance(data, dict):
        raise ConfigError("sweep configuration must be a JSON object")
    grid = data.pop("sweep", {}) or {}
    unknown = set(grid) - {"M", "r"}
    if unknown:
        raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
    out = Path(args.out or data.pop("out", None) or "linpam_out")
    data.pop("out", None)
    if "seed" not in data:
        data["seed"] = resolve_seed(None)
    config = TwinExperimentConfig.from_dict(data)
    rows = sweep(config, grid.get("M"), grid.get("r"))
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    for row in rows:
        print(f"{row['model']} {row['filter']} M={row['M']} r={row['r']} "
              f"rmse_avg={row['rmse_avg']:.6g} diverged={row['diverged']}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "sweep":
            return _sweep(args)
        return _experiment(args)
    except ConfigError as exc:
        parser.error(str(exc))
    return 1


if __name__ == "__main__":
    sys.exit(main())
