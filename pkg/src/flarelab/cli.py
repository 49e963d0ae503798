"""Command line entry point: ``flarelab run | sweep | report``.

Every :class:`ExperimentConfig` field is also a flag (``--num-malicious 16``).
A YAML or JSON file passed with ``--config`` supplies the base values, using
the field names as keys; flags given on the command line override it.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import statistics
import sys
from pathlib import Path

import yaml

from .harness import ConfigError, ExperimentConfig, resolve_output_dir, run_experiment, summarize

EXIT_CONFIG = 2
SUMMARY_METRICS = ("gacc", "srec", "asr", "weighted_error")

_SCALARS = {"int": int, "float": float, "str": str}


def _field_arg(f: dataclasses.Field) -> dict:
    kind = str(f.type).replace(" ", "")
    if kind.startswith("list["):
        return {"type": _SCALARS[kind[5:-1]], "nargs": "*"}
    return {"type": _SCALARS[kind.split("|")[0]]}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML/JSON file keyed by config field names")
    g = p.add_argument_group("experiment config")
    for f in dataclasses.fields(ExperimentConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, **_field_arg(f))


def load_config_file(path: Path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML/JSON: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping of field names to values")
    return raw


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = load_config_file(args.config) if args.config else {}
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    try:
        cfg = ExperimentConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def _print_rows(rows: list[dict], out=None) -> None:
    if not rows:
        return
    w = csv.DictWriter(out or sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def _run_dir(base: Path | None, cfg: ExperimentConfig) -> str | None:
    if base is None:
        return None
    return str(base / f"{cfg.aggregator}_m{cfg.num_malicious}_s{cfg.seed}")


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    art = run_experiment(cfg)
    _print_rows([summarize(art)])
    if art.early_stop:
        print(f"note: {art.early_stop}", file=sys.stderr)
    return 0


def _mean_std(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return None, None
    return statistics.fmean(vals), (statistics.stdev(vals) if len(vals) > 1 else 0.0)


def group_summary(rows: list[dict]) -> list[dict]:
    """Mean and sample stdev of final metrics per (aggregator, num_malicious)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["aggregator"], int(r["num_malicious"])), []).append(r)
    out = []
    for (name, m), rs in sorted(groups.items()):
        row = {"aggregator": name, "num_malicious": m, "runs": len(rs)}
        for k in SUMMARY_METRICS:
            mean, std = _mean_std([None if r[k] in (None, "") else float(r[k]) for r in rs])
            row[f"{k}_mean"], row[f"{k}_std"] = mean, std
        out.append(row)
    return out


def cmd_sweep(args) -> int:
    base = config_from_args(args)
    seeds = args.seed_list if args.seed_list else list(range(base.seed, base.seed + args.seeds))
    grid_m = args.malicious or [base.num_malicious]
    names = args.aggregators or [base.aggregator]
    root = resolve_output_dir(base)
    configs = [
        base.replace(aggregator=a, num_malicious=m, seed=s)
        for a in names for m in grid_m for s in seeds
    ]
    for c in configs:  # fail on any bad grid point before spending compute
        c.validate()
    rows = []
    for c in configs:
        c = c.replace(output_dir=_run_dir(root, c))
        rows.append(summarize(run_experiment(c, persist=c.output_dir is not None)))
        print(f"done {c.aggregator} M={c.num_malicious} seed={c.seed}", file=sys.stderr)
    summary = group_summary(rows)
    _print_rows(summary)
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        with (root / "runs.csv").open("w", newline="") as fh:
            _print_rows(rows, fh)
        with (root / "summary.csv").open("w", newline="") as fh:
            _print_rows(summary, fh)
    return 0


def collect_runs(paths) -> list[dict]:
    """Final-round metrics of every run directory (holding rounds.csv and run.json) under ``paths``."""
    rows = []
    for p in paths:
        for rounds in sorted(Path(p).rglob("rounds.csv")):
            meta = rounds.with_name("run.json")
            if not meta.exists():
                logging.warning("skipping %s: no run.json next to it", rounds)
                continue
            cfg = json.loads(meta.read_text())["config"]
            with rounds.open() as fh:
                last = None
                for last in csv.DictReader(fh):
                    pass
            if last is None:
                continue
            rows.append({
                "aggregator": cfg["aggregator"],
                "num_malicious": cfg["num_malicious"],
                "seed": cfg["seed"],
                **{k: last[k] for k in SUMMARY_METRICS},
                "bl_size": last["bl_size"],
            })
    return rows


def cmd_report(args) -> int:
    rows = collect_runs(args.paths)
    if not rows:
        print("no runs found", file=sys.stderr)
        return 1
    summary = group_summary(rows)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            _print_rows(summary, fh)
    _print_rows(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flarelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_config_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="grid over seeds, poison counts and aggregators")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--seeds", type=int, default=4, help="number of consecutive seeds from --seed")
    p_sweep.add_argument("--seed-list", type=int, nargs="+", help="explicit seeds (overrides --seeds)")
    p_sweep.add_argument("--malicious", type=int, nargs="+", help="values of num_malicious to sweep")
    p_sweep.add_argument("--aggregators", nargs="+", help="aggregation rules to sweep")
    p_sweep.set_defaults(func=cmd_sweep)

    p_rep = sub.add_parser("report", help="summarize run directories into one table")
    p_rep.add_argument("paths", nargs="+", type=Path)
    p_rep.add_argument("--out", type=Path, help="also write the summary CSV here")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
