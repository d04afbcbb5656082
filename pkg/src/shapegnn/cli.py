"""Command line entry point: ``shapegnn {generate,trial,grid,transfer,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error (including
feature-dimension mismatches), 4 numerical
failure, 5 one or more grid cells failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import SyntheticSpec, generate_synthetic, write_csv
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .experiment import (
    TABLE1_FILTERS,
    TABLE1_KNN,
    TABLE1_MIN_PER_STEP,
    TABLE1_TEMPORAL,
    GridConfig,
    TrialConfig,
    collect_reports,
    run_grid,
    run_transfer,
    run_trial,
    trend_tables,
    write_trends,
)

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CELLS = 2, 3, 4, 5

log = logging.getLogger("shapegnn")


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _trial_doc(args, doc: dict) -> dict:
    if "config" in doc and "config_hash" in doc:
        doc = dict(doc["config"])
    doc = dict(doc)
    if getattr(args, "data", None):
        doc["dataset"] = {"path": args.data}
    doc.setdefault("dataset", {"synthetic": {}})
    for flag, key in (("seed", "seed"), ("out", "out"), ("model", "model"), ("strategy", "strategy"), ("filter", "filter_pct")):
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    return doc


def cmd_generate(args) -> int:
    doc = _read_json(args.config)
    overrides = {
        "n_time_steps": args.steps,
        "points_per_step": args.points,
        "d": args.d,
        "label_ratio": args.label_ratio,
        "field": args.field,
        "noise_sd": args.noise,
        "seed": args.seed,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        spec = SyntheticSpec(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad synthetic spec: {exc}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = generate_synthetic(spec)
    write_csv(table, out, provenance=f"synthetic {json.dumps(spec.to_dict(), sort_keys=True)}")
    print(f"wrote {out} ({table.n} nodes, {table.n_labeled} labeled)")
    return 0


def cmd_trial(args) -> int:
    cfg = TrialConfig.from_dict(_trial_doc(args, _read_json(args.config)))
    report = run_trial(cfg)
    print(f"{cfg.config_hash}: MAE {report.mae_mm:.6f} mm ({report.mae_um:.3f} um) over {report.n_eval} nodes")
    return 0


def cmd_grid(args) -> int:
    doc = _read_json(args.config)
    if "base" not in doc:
        doc = {"base": doc} if doc else {"base": {}}
    base = _trial_doc(argparse.Namespace(data=args.data, model=args.model), doc["base"])
    base.pop("out", None)
    doc["base"] = base
    if args.table1:
        doc["filter_pct"] = TABLE1_FILTERS
        doc["min_per_step"] = TABLE1_MIN_PER_STEP
        doc["strategies"] = TABLE1_KNN if args.table1 == "knn" else TABLE1_TEMPORAL
    if args.strategy:
        doc["strategies"] = [args.strategy]
    if args.filter is not None:
        doc["filter_pct"] = [args.filter]
    if args.seeds:
        doc["seeds"] = list(range(args.seeds))
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    if args.out:
        doc["out"] = args.out
    grid = GridConfig.from_dict(doc)
    result = run_grid(grid, jobs=args.jobs)
    for name, table in result.trends.items():
        print(f"trend {name}:")
        for r in table.rows:
            print(f"  {r.axis_value:g}: {1000 * r.mean_mae_mm:.3f} +- {1000 * r.std_mae_mm:.3f} um (n={r.n_seeds})")
    if result.failures:
        print(f"{len(result.failures)} cell(s) failed; see {Path(grid.out) / 'failures.json'}", file=sys.stderr)
        return EXIT_CELLS
    return 0


def cmd_transfer(args) -> int:
    cfg = None
    if args.checkpoint is None:
        cfg = TrialConfig.from_dict(_trial_doc(args, _read_json(args.config)))
    result = run_transfer(cfg, args.target, strategy=args.target_strategy, checkpoint=args.checkpoint)
    rep = result.target
    groups = ", ".join(f"group {g}: {v:.6f}" for g, v in sorted(rep.group_mae_mm.items()))
    print(f"transfer MAE {rep.mae_mm:.6f} mm ({groups})")
    if result.source is not None:
        print(f"training MAE {result.source.mae_mm:.6f} mm")
    return 0


def cmd_report(args) -> int:
    reports = collect_reports(args.dir)
    if not reports:
        raise DataError(f"no trial reports under {args.dir}")
    trends = trend_tables(reports)
    write_trends(trends, Path(args.out or args.dir))
    for name, table in trends.items():
        print(f"trend {name}: {len(table.rows)} rows")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shapegnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset CSV")
    g.add_argument("--config", help="JSON file with SyntheticSpec fields")
    g.add_argument("--out", required=True, help="output CSV path")
    g.add_argument("--seed", type=int)
    g.add_argument("--steps", type=int, help="number of time steps")
    g.add_argument("--points", type=int, help="points per time step")
    g.add_argument("--d", type=int, help="feature dimension")
    g.add_argument("--label-ratio", type=float)
    g.add_argument("--field", choices=["constant", "linear", "smooth"])
    g.add_argument("--noise", type=float, help="label noise sd [mm]")
    g.set_defaults(func=cmd_generate)

    def trial_flags(sp, strategy=True):
        sp.add_argument("--config", help="JSON trial config (a manifest.json also works)")
        sp.add_argument("--data", help="dataset CSV; overrides the config's dataset")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--model", choices=["gcn", "svr"])
        if strategy:
            sp.add_argument("--strategy", help="knn:K | temporal:T | hybrid:K,T")
        sp.add_argument("--filter", type=float, help="filter percentage")

    t = sub.add_parser("trial", help="run one trial")
    trial_flags(t)
    t.set_defaults(func=cmd_trial)

    gr = sub.add_parser("grid", help="run a sweep and write trend tables")
    trial_flags(gr)
    gr.add_argument("--jobs", type=int, default=1, help="parallel cells (default 1, reproducible)")
    gr.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    gr.add_argument("--table1", choices=["knn", "temporal"], help="fill axes with the trial-plan ranges")
    gr.set_defaults(func=cmd_grid)

    tr = sub.add_parser("transfer", help="apply a trained model to another geometry")
    trial_flags(tr)
    tr.add_argument("--target", required=True, help="target geometry CSV")
    tr.add_argument("--checkpoint", help="existing model.ckpt; skips training")
    tr.add_argument("--target-strategy", default="knn:8", help="graph strategy for the target (default knn:8)")
    tr.set_defaults(func=cmd_transfer)

    rp = sub.add_parser("report", help="re-aggregate trial reports in a directory")
    rp.add_argument("dir")
    rp.add_argument("--out", help="where to write trend files (default: dir)")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
