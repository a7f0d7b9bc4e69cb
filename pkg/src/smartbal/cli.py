"""Command line entry point: ``run``, ``sweep`` and ``analyze``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from dataclasses import asdict, replace
from pathlib import Path

from .io import export_run, export_summary, load_config, read_csv, write_csv
from .metrics import KPI_NAMES, boxplot
from .montecarlo import EnsembleConfig, SimConfig, run_ensemble, run_simulation, single_run_spec

log = logging.getLogger("smartbal")

SCATTER_FIELDS = ["e_rmse", "e_half", "tau_active", "e_eff", "risk_class"]
BOX_COLUMNS = ["group", "kpi", "count", "median", "q1", "q3", "whisker_low", "whisker_high", "outliers"]


def _config(path) -> dict:
    return load_config(path) if path else {}


def cmd_run(args) -> int:
    cfg = _config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    spec = single_run_spec(cfg)
    result = run_simulation(spec, SimConfig.from_dict(cfg), seed)
    paths = export_run(result, args.out)
    print(f"run written to {paths['kpis.json'].parent}")
    if result.failed:
        print(f"run failed: {result.error}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args.config)
    ens = EnsembleConfig.from_dict(cfg)
    if args.seed is not None:
        ens = replace(ens, seed=args.seed)
    if args.no_exclusion:
        ens = replace(ens, exclusion_rule=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_ensemble(ens, workers=args.workers, out_dir=out)
    export_summary(results, out / "summary.csv")
    failed = sum(r.failed for r in results)
    print(f"{len(results)} runs ({failed} failed) written to {out}")
    return 0


def _load_runs(root: Path) -> list[tuple[dict, Path]]:
    run_dirs = sorted(p.parent for p in root.glob("**/kpis.json"))
    return [(json.loads((d / "kpis.json").read_text()), d) for d in run_dirs]


def _group_key(doc: dict, axis: str) -> str:
    scenario = doc["scenario"]
    if axis not in scenario:
        raise ValueError(f"unknown axis {axis!r}; choose from {sorted(scenario)}")
    return str(scenario[axis])


def _dump(stem: Path, header: list[str], records: list[dict]) -> None:
    write_csv(stem.with_suffix(".csv"), header, ([r[c] for c in header] for r in records))
    stem.with_suffix(".json").write_text(json.dumps(records, indent=2) + "\n")


def cmd_analyze(args) -> int:
    root = Path(args.input)
    runs = _load_runs(root)
    if not runs:
        print(f"no runs found under {root}", file=sys.stderr)
        return 1
    values = defaultdict(lambda: defaultdict(list))
    scatter = []
    for doc, run_dir in runs:
        if doc["failed"] or (doc["excluded"] and not args.no_exclusion):
            continue
        group = _group_key(doc, args.group_by)
        for name in KPI_NAMES:
            rel = doc["relative"].get(name)
            if rel is not None:
                values[group][f"{name}_rel"].append(rel)
        for row in read_csv(run_dir / "agents.csv"):
            rec = {"group": group, "run_index": doc["run_index"], "agent": int(row["agent"])}
            for f in SCATTER_FIELDS:
                v = row[f]
                rec[f] = v if f == "risk_class" else (float(v) if v != "" else None)
            scatter.append(rec)

    boxes = []
    for group in sorted(values):
        for kpi, vals in values[group].items():
            stats = asdict(boxplot(vals))
            boxes.append({"group": group, "kpi": kpi, **stats, "outliers": list(stats["outliers"])})
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "boxplots", BOX_COLUMNS, [
        {**b, "outliers": " ".join(f"{x:.9g}" for x in b["outliers"])} for b in boxes])
    (out / "boxplots.json").write_text(json.dumps(boxes, indent=2) + "\n")
    _dump(out / "scatter", ["group", "run_index", "agent", *SCATTER_FIELDS], scatter)
    print(f"{len(boxes)} box records, {len(scatter)} BRP records written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smartbal", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a single run and its reference")
    run.add_argument("--config")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="out/run")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="simulate an ensemble")
    sweep.add_argument("--config")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--out", default="out/sweep")
    sweep.add_argument("--workers", type=int, default=1)
    sweep.add_argument("--no-exclusion", action="store_true",
                       help="keep runs matched by the exclusion rule in the statistics")
    sweep.set_defaults(func=cmd_sweep)

    analyze = sub.add_parser("analyze", help="aggregate exported runs")
    analyze.add_argument("--in", dest="input", required=True)
    analyze.add_argument("--group-by", default="nrt")
    analyze.add_argument("--out")
    analyze.add_argument("--no-exclusion", action="store_true")
    analyze.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
