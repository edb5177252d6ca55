"""Command-line front end: simulate, extract, correlate, sweep, train, estimate, report.

Every subcommand is a pure function of its file inputs, flags, and seed;
re-runs produce byte-identical outputs. Exit codes: 0 success, 1 runtime
error, 2 configuration/schema error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION, __version__
from .analysis import ENERGY_SWEEP, IMPEDANCE_SWEEP, SweepConfig, correlation_report, window_sweep
from .config import load_config
from .core import ConfigError, SchemaError, SohkitError, load_ocv_csv, load_rpt_table
from .estimation import (evaluate, grid_search_armax, load_model, parse_scenario,
                         predict, run_scenario, save_model)
from .indicators import INDICATOR_NAMES
from .pipeline import (EVALUATION_CSV_HEADER, build_matrices, capacities_from_rpts,
                       extract_from_manifest, load_campaign_records, read_indicator_csv,
                       write_correlation_csv, write_evaluation_csv, write_feature_csv,
                       write_indicator_csv, write_sweep_csv)
from .preprocessing import FEATURE_NAMES
from .simulator import (AnomalySchedule, CellSpec, ImpedanceBump, simulate_campaign)


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _parse_feature_list(text, allowed, what):
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    for n in names:
        if n not in allowed:
            raise ConfigError(f"unknown {what} {n!r}; expected one of {', '.join(allowed)}")
    if not names:
        raise ConfigError(f"empty {what} list")
    return names


def cmd_simulate(args) -> int:
    spec_path = _require(args.spec, "spec file")
    with open(spec_path, "r", encoding="utf-8") as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{spec_path}: not valid JSON ({exc})") from None
    seed = args.seed if args.seed is not None else int(spec.get("seed", 0))
    specs, plans = [], []
    try:
        for cell in spec["cells"]:
            kwargs = {k: v for k, v in cell.items() if k not in ("batches", "anomaly", "impedance_bump", "fade_step")}
            if "anomaly" in cell and cell["anomaly"] is not None:
                a = cell["anomaly"]
                kwargs["anomaly"] = AnomalySchedule(tuple(a["cycles"]), a.get("offset_V", 0.6),
                                                    a.get("start_frac", 0.10))
            if "impedance_bump" in cell and cell["impedance_bump"] is not None:
                kwargs["impedance_bump"] = ImpedanceBump(**cell["impedance_bump"])
            if "fade_step" in cell and cell["fade_step"] is not None:
                kwargs["fade_step"] = tuple(cell["fade_step"])
            specs.append(CellSpec(**kwargs))
            plans.append([int(n) for n in cell["batches"]])
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{spec_path}: bad cell spec: {exc}") from None
    campaign = simulate_campaign(specs, plans, rpt_every=int(spec.get("rpt_every", 1)),
                                 seed=seed, out_dir=args.out)
    print(f"simulated {len(campaign.entries)} cycles for {len(specs)} cells into {args.out}",
          file=sys.stderr)
    return 0


def cmd_extract(args) -> int:
    manifest = _require(args.manifest, "manifest")
    config = load_config(args.config)
    features = INDICATOR_NAMES
    if args.features:
        features = _parse_feature_list(args.features, INDICATOR_NAMES, "indicator")
    ocv = None
    if args.ocv_charge:
        ocv = load_ocv_csv(_require(args.ocv_charge, "OCV file"), "charge")
    elif args.features and "Z_chg2" in features:
        raise ConfigError("Z_chg2 needs a fresh-cell charge OCV curve (--ocv-charge)")
    print(f"extracting indicators from {manifest}", file=sys.stderr)
    indicators, _ = extract_from_manifest(
        manifest, config, ocv, features=features, invert_current=args.invert_current,
        jobs=args.jobs, log=sys.stderr)
    write_indicator_csv(args.out, indicators)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _matrices_from_files(args, feature_set):
    indicators = read_indicator_csv(_require(args.indicators, "indicator table"))
    rpts = load_rpt_table(_require(args.rpt, "RPT table"))
    config = load_config(args.config)
    blocks = ()
    if getattr(args, "manifest", None):
        from .core import load_manifest
        _, blocks = load_manifest(_require(args.manifest, "manifest"))
    capacities = capacities_from_rpts(rpts, indicators)
    return build_matrices(indicators, capacities, feature_set, config.outlier_decades, blocks), config


def cmd_correlate(args) -> int:
    feature_set = FEATURE_NAMES
    if args.features:
        feature_set = _parse_feature_list(args.features, FEATURE_NAMES, "feature")
    matrices, _ = _matrices_from_files(args, feature_set)
    rows = correlation_report(sorted(matrices.values(), key=lambda m: m.cell_id),
                              pooled=not args.no_pooled)
    write_correlation_csv(args.out, rows)
    if args.features_out:
        write_feature_csv(args.features_out, matrices)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    manifest = _require(args.manifest, "manifest")
    rpts = load_rpt_table(_require(args.rpt, "RPT table"))
    records, _ = load_campaign_records(manifest, jobs=args.jobs)
    if args.cell:
        records = [r for r in records if r.cell_id == args.cell]
        if not records:
            raise ConfigError(f"no cycles for cell {args.cell!r}")
    preset = IMPEDANCE_SWEEP if args.kind == "impedance" else ENERGY_SWEEP
    sweep = SweepConfig(
        v_start=args.start if args.start is not None else preset.v_start,
        width=args.width if args.width is not None else preset.width,
        stride=args.stride if args.stride is not None else preset.stride,
        count=args.count if args.count is not None else preset.count,
    )
    cells = sorted({r.cell_id for r in records})
    from .preprocessing import augment_capacity
    by_cell = {}
    for r in rpts:
        by_cell.setdefault(r.cell_id, []).append(r)
    results = []
    for cell in cells:
        cell_records = [r for r in records if r.cell_id == cell]
        capacity = augment_capacity(by_cell[cell], [r.cycle_index for r in cell_records], cell)
        results.append(window_sweep(cell_records, capacity, args.kind, sweep))
    if len(results) == 1:
        write_sweep_csv(args.out, results[0])
        best = results[0].best
    else:
        # multi-cell sweep: one block per cell, prefixed by a comment line
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("cell_id,v_lo,v_hi,r,n,flag\n")
            for cell, res in zip(cells, results):
                for row in res.rows:
                    fh.write(f"{cell},{row.v_lo!r},{row.v_hi!r},"
                             f"{'nan' if not np.isfinite(row.r) else repr(row.r)},{row.n},{row.flag}\n")
        best = results[0].best
    if best:
        print(f"best window: [{best[0]:.3f}, {best[1]:.3f}] V", file=sys.stderr)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    feature_set = _parse_feature_list(args.features, FEATURE_NAMES, "feature")
    matrices, config = _matrices_from_files(args, feature_set)
    kind, train_cell = parse_scenario(args.scenario)
    out = Path(args.out)

    orders = tuple(int(x) for x in args.armax_orders.split(",")) if args.armax_orders else (1, 0, 2)
    if args.model == "armax" and args.armax_grid:
        lo, hi = (int(x) for x in args.armax_grid.split(":"))
        grid = [(a, b, c) for a in range(lo, hi + 1) for b in range(lo, hi + 1)
                for c in range(lo, hi + 1)]
        if train_cell is None:
            raise ConfigError("--armax-grid needs --scenario single:<cell>")
        validate_cell = args.validate_cell or sorted(c for c in matrices if c != train_cell)[0]
        best, points = grid_search_armax(matrices[train_cell], matrices[validate_cell],
                                         grid, target=config.target)
        for p in points:
            status = "failed" if p.failed else f"rmse={p.rmse_pct:.6g}"
            print(f"grid {p.orders}: {status}", file=sys.stderr)
        print(f"selected orders {best} over {len(points)} grid points", file=sys.stderr)
        orders = best

    models, _reports = run_scenario(matrices, args.scenario, model_kind=args.model,
                                    armax_orders=orders, target=config.target)
    if kind == "single_train":
        model = next(iter(models.values()))
        if out.suffix == ".json":
            out.parent.mkdir(parents=True, exist_ok=True)
            save_model(out, model)
        else:
            out.mkdir(parents=True, exist_ok=True)
            save_model(out / "model.json", model)
    else:
        out.mkdir(parents=True, exist_ok=True)
        for cell, model in sorted(models.items()):
            save_model(out / f"model_{cell}.json", model)
    print(f"wrote model(s) to {out}", file=sys.stderr)
    return 0


def cmd_estimate(args) -> int:
    model = load_model(_require(args.model, "model file"))
    matrices, config = _matrices_from_files(args, tuple(model.features))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test_cells = [c for c in sorted(matrices) if c not in model.trained_on]
    if args.cells:
        test_cells = [c.strip() for c in args.cells.split(",")]
    if not test_cells:
        raise ConfigError("no test cells left after excluding training cells")
    for cell in test_cells:
        if cell not in matrices:
            raise ConfigError(f"cell {cell!r} not present in the indicator table")
        m = matrices[cell]
        yhat = predict(model, m)
        if model.target == "Q":
            report = evaluate(m.q_Ah, yhat, cell, m.cycles)
        else:
            q_fresh = m.q_Ah[0] / (1 - m.q_loss_pct[0] / 100.0)
            report = evaluate(m.q_Ah, q_fresh * (1 - yhat / 100.0), cell, m.cycles)
        write_evaluation_csv(out / f"eval_{cell}.csv", report)
        print(f"{cell}: rmse {report.rmse_pct:.4f} %, max APE {report.max_ape_pct:.4f} %",
              file=sys.stderr)
    print(f"wrote evaluation CSVs to {out}", file=sys.stderr)
    return 0


def read_evaluation_csv(path):
    """Parse an evaluation CSV back into summary numbers."""
    apes, cells = [], set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().strip()
        if header != EVALUATION_CSV_HEADER:
            raise SchemaError(f"{path}: unexpected evaluation CSV header {header!r}")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != 5 or parts[1] == "ALL":
                continue
            cells.add(parts[0])
            apes.append(float(parts[4]))
    if len(cells) != 1:
        raise SchemaError(f"{path}: expected exactly one cell, got {sorted(cells)}")
    ape = np.asarray(apes)
    return cells.pop(), ape


def validate_report_json(obj) -> None:
    """Check a report against the shipped schema (required keys and types)."""
    from importlib import resources
    schema = json.loads(resources.files("sohkit.data").joinpath("report.schema.json").read_text())
    for key in schema["required"]:
        if key not in obj:
            raise SchemaError(f"report missing required key {key!r}")
    if not isinstance(obj["cells"], dict):
        raise SchemaError("report 'cells' must be an object")
    for cell, entry in obj["cells"].items():
        for key in schema["cell_required"]:
            if key not in entry:
                raise SchemaError(f"report cell {cell}: missing {key!r}")


def cmd_report(args) -> int:
    paths = sorted(Path(p) for p in args.eval)
    if len(paths) == 1 and paths[0].is_dir():
        paths = sorted(paths[0].glob("eval_*.csv"))
    if not paths:
        raise ConfigError("no evaluation CSVs given")
    cells = {}
    for p in paths:
        cell, ape = read_evaluation_csv(_require(p, "evaluation CSV"))
        cells[cell] = {
            "n": int(len(ape)),
            "max_ape_pct": float(np.max(ape)),
            "rmse_pct": float(np.sqrt(np.mean(ape ** 2))),
        }
    worst = max(cells, key=lambda c: cells[c]["max_ape_pct"])
    report = {
        "schema_version": SCHEMA_VERSION,
        "cells": cells,
        "worst_cell": worst,
        "max_ape_pct": cells[worst]["max_ape_pct"],
    }
    validate_report_json(report)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sohkit",
        description="Battery SOH indicator extraction and capacity-fade estimation.",
        epilog="Defaults for windows, peak detection, outlier threshold, and the "
               "regression target live in the committed reference config "
               "(sohkit/data/default.ini); --config overrides any subset.")
    parser.add_argument("--version", action="version",
                        version=f"sohkit {__version__} (schema {SCHEMA_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic aging campaign")
    p.add_argument("--spec", required=True, help="campaign spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("extract", help="compute per-cycle SOH indicators")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="indicator CSV path")
    p.add_argument("--config", default=None)
    p.add_argument("--features", default=None,
                   help=f"comma list out of {','.join(INDICATOR_NAMES)}")
    p.add_argument("--ocv-charge", default=None, help="fresh-cell charge OCV CSV (for Z_chg2)")
    p.add_argument("--invert-current", action="store_true",
                   help="dataset uses positive charging current")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("correlate", help="Pearson correlation of features vs capacity loss")
    p.add_argument("--indicators", required=True)
    p.add_argument("--rpt", required=True)
    p.add_argument("--manifest", default=None, help="manifest with feature blocklists")
    p.add_argument("--config", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--no-pooled", action="store_true")
    p.add_argument("--features-out", default=None, help="also write the feature matrix CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("sweep", help="voltage-window sensitivity sweep")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rpt", required=True)
    p.add_argument("--kind", choices=("impedance", "energy_ch"), required=True)
    p.add_argument("--cell", default=None)
    p.add_argument("--start", type=float, default=None)
    p.add_argument("--width", type=float, default=None)
    p.add_argument("--stride", type=float, default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="fit a capacity estimator")
    p.add_argument("--indicators", required=True)
    p.add_argument("--rpt", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--scenario", required=True, help="single:<cell> or loo")
    p.add_argument("--features", required=True)
    p.add_argument("--model", choices=("lrm", "armax"), default="lrm")
    p.add_argument("--armax-orders", default=None, help="nAR,nX,nMA (default 1,0,2)")
    p.add_argument("--armax-grid", default=None, help="order grid, e.g. 0:3")
    p.add_argument("--validate-cell", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="apply a trained model to test cells")
    p.add_argument("--model", required=True)
    p.add_argument("--indicators", required=True)
    p.add_argument("--rpt", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--cells", default=None, help="comma list; default: all except training cells")
    p.add_argument("--out", required=True, help="output directory for eval CSVs")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("report", help="consolidate evaluation CSVs into a summary JSON")
    p.add_argument("--eval", nargs="+", required=True, help="eval CSVs or a directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SohkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
