"""Extraction pipeline: cycles in, indicator tables / feature matrices out.

Glue between the file formats and the pure indicator functions; used by the
CLI subcommands and callable directly for in-memory campaigns.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (CycleRecord, OcvCurve, PipelineError, SchemaError,
                   ingest_cycle_csv, load_manifest)
from .indicators import (INDICATOR_NAMES, IndicatorVector, VoltageWindow,
                         averaged_charging_impedance, charging_impedance_with_ocv,
                         cycle_resistance, instantaneous_charging_impedance,
                         power_autocorrelation, power_series, windowed_energy)
from .preprocessing import FEATURE_NAMES, augment_capacity, build_feature_matrix
from .segmentation import PeakConfig, apply_phase_bounds, detect_acceleration_peaks, segment_phases


@dataclass(frozen=True)
class IndicatorConfig:
    """Windows and detector parameters for indicator extraction."""

    charge_window: VoltageWindow = VoltageWindow(3.6, 3.9, "rising")
    discharge_window: VoltageWindow = VoltageWindow(3.85, 3.4, "falling")
    impedance_window: VoltageWindow = VoltageWindow(3.8, 3.9, "rising")
    peaks: PeakConfig = PeakConfig()
    tau_max_s: float = 3000.0
    outlier_decades: float = 1.0
    nominal_capacity_Ah: float = 4.85
    target: str = "Q"
    exit_policy: str = "first"


def extract_cycle_indicators(record: CycleRecord, config: IndicatorConfig,
                             ocv_charge: OcvCurve | None = None,
                             features=INDICATOR_NAMES) -> dict:
    """Compute indicator values for one cycle; nan marks invalid entries.

    Cycles without manifest or simulator phase bounds are segmented first.
    Restricting ``features`` skips the unneeded computations.
    """
    if record.phases:
        phases = record.phases
    else:
        bounds = segment_phases(record.raw, record.cc_a_rate, config.nominal_capacity_Ah)
        phases = apply_phase_bounds(record.raw, bounds)
    cca = phases["CC_A"]
    discharge = phases["DISCHARGE"]
    out = dict.fromkeys(INDICATOR_NAMES, float("nan"))

    if len(discharge) >= 2:
        if "P_autocorr" in features:
            power = power_series(discharge)
            # The indicator is the zero-delay value; the full +-tau curve is
            # only needed for reporting, so extraction evaluates lag 0 alone.
            _, _, out["P_autocorr"] = power_autocorrelation(power, 0.0, discharge.dt_s)
        if "R" in features:
            peaks = detect_acceleration_peaks(discharge, config.peaks)
            out["R"] = cycle_resistance(peaks).r_ohm
        if "E_dis" in features:
            out["E_dis"], _ = windowed_energy(discharge, config.discharge_window,
                                              config.exit_policy)
    if len(cca) >= 2:
        if "Z_chg" in features:
            z_t, z_v = instantaneous_charging_impedance(cca, record.cc_a_rate)
            out["Z_chg"] = averaged_charging_impedance(z_t, z_v, cca, config.impedance_window)
        if "Z_chg2" in features and ocv_charge is not None:
            out["Z_chg2"] = charging_impedance_with_ocv(
                cca, ocv_charge, config.impedance_window,
                nominal_capacity_Ah=config.nominal_capacity_Ah)
        if "E_ch" in features:
            out["E_ch"], _ = windowed_energy(cca, config.charge_window, config.exit_policy)
    return out


def extract_indicators(records, config: IndicatorConfig, ocv_charge: OcvCurve | None = None,
                       on_error: str = "mask", log=None, features=INDICATOR_NAMES) -> dict:
    """Extract per-cycle indicators for many cycles, grouped by cell.

    Per-cycle failures are logged and leave a fully masked row when
    ``on_error="mask"`` (the CLI behavior); "raise" propagates. Output rows
    are ordered by (cell_id, cycle_index) regardless of input order.
    """
    rows = {}
    n_ok = 0
    for record in records:
        try:
            vals = extract_cycle_indicators(record, config, ocv_charge, features)
            n_ok += 1
        except Exception as exc:  # noqa: BLE001 - per-cycle isolation is the contract
            if on_error == "raise":
                raise
            if log is not None:
                print(f"warning: {record.cell_id} cycle {record.cycle_index}: {exc}", file=log)
            vals = dict.fromkeys(INDICATOR_NAMES, float("nan"))
        rows.setdefault(record.cell_id, []).append((record.cycle_index, record.batch_index, vals))
    if n_ok == 0:
        raise PipelineError("indicator extraction failed for every cycle")

    out = {}
    for cell, items in sorted(rows.items()):
        items.sort(key=lambda it: it[0])
        cycles = np.array([c for c, _, _ in items])
        batches = np.array([b for _, b, _ in items])
        values = {name: np.array([vals[name] for _, _, vals in items])
                  for name in INDICATOR_NAMES}
        out[cell] = IndicatorVector(cell, cycles, batches, values)
    return out


def capacities_from_rpts(rpts, indicators: dict) -> dict:
    """Augmented per-cycle capacity series for each cell with indicators."""
    by_cell = {}
    for r in rpts:
        by_cell.setdefault(r.cell_id, []).append(r)
    out = {}
    for cell, ind in indicators.items():
        if cell not in by_cell:
            raise PipelineError(f"no RPT rows for cell {cell}")
        out[cell] = augment_capacity(by_cell[cell], ind.cycles, cell)
    return out


def build_matrices(indicators: dict, capacities: dict, feature_set=FEATURE_NAMES,
                   outlier_decades: float = 1.0, blocks=()) -> dict:
    """Per-cell feature matrices honoring manifest feature blocklists."""
    blocked = {}
    for b in blocks:
        blocked.setdefault(b.cell_id, set()).update(b.exclude_features)
    out = {}
    for cell, ind in indicators.items():
        out[cell] = build_feature_matrix(
            ind, capacities[cell], feature_set, outlier_decades,
            exclude_features=tuple(blocked.get(cell, ())))
    return out


def load_campaign_records(manifest_path, invert_current: bool = False,
                          duplicate_policy: str = "reject", jobs: int = 1):
    """Load every cycle referenced by a manifest; returns (records, blocks).

    Cycle files resolve relative to the manifest location. With jobs > 1 the
    files are parsed in a process pool; output order is by (cell, cycle)
    either way.
    """
    manifest_path = Path(manifest_path)
    entries, blocks = load_manifest(manifest_path)
    base = manifest_path.parent
    args = [(str(base / e.file), e, invert_current, duplicate_policy) for e in entries]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ingest_one, args, chunksize=8))
    else:
        results = [_ingest_one(a) for a in args]
    records = [rec for rec, _ in results]
    records.sort(key=lambda r: (r.cell_id, r.cycle_index))
    return records, blocks


def _ingest_one(arg):
    path, entry, invert, dup = arg
    return ingest_cycle_csv(path, entry, invert_current=invert, duplicate_policy=dup)


def extract_from_manifest(manifest_path, config: IndicatorConfig,
                          ocv_charge: OcvCurve | None = None,
                          features=INDICATOR_NAMES, invert_current: bool = False,
                          duplicate_policy: str = "reject", jobs: int = 1, log=None):
    """Ingest and extract indicators for a whole manifest, cycle-parallel.

    Each cycle is read and reduced to its indicator row inside the worker, so
    memory stays flat and --jobs scales the whole per-cycle pipeline. Output
    rows are ordered by (cell, cycle) regardless of job count; per-cycle
    failures are logged and masked, and only a run with zero successful
    cycles raises.
    """
    manifest_path = Path(manifest_path)
    entries, blocks = load_manifest(manifest_path)
    base = manifest_path.parent
    args = [(str(base / e.file), e, invert_current, duplicate_policy,
             config, ocv_charge, tuple(features)) for e in entries]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_extract_one, args, chunksize=4))
    else:
        results = [_extract_one(a) for a in args]

    rows = {}
    n_ok = 0
    for entry, vals, err in results:
        if err is not None:
            if log is not None:
                print(f"warning: {entry.cell_id} cycle {entry.cycle_index}: {err}", file=log)
            vals = dict.fromkeys(INDICATOR_NAMES, float("nan"))
        else:
            n_ok += 1
        rows.setdefault(entry.cell_id, []).append((entry.cycle_index, entry.batch_index, vals))
    if n_ok == 0:
        raise PipelineError("indicator extraction failed for every cycle")
    out = {}
    for cell, items in sorted(rows.items()):
        items.sort(key=lambda it: it[0])
        cycles = np.array([c for c, _, _ in items])
        batches = np.array([b for _, b, _ in items])
        values = {name: np.array([vals[name] for _, _, vals in items])
                  for name in INDICATOR_NAMES}
        out[cell] = IndicatorVector(cell, cycles, batches, values)
    return out, blocks


def _extract_one(arg):
    path, entry, invert, dup, config, ocv_charge, features = arg
    try:
        record, _ = ingest_cycle_csv(path, entry, invert_current=invert, duplicate_policy=dup)
        vals = extract_cycle_indicators(record, config, ocv_charge, features)
        return entry, vals, None
    except Exception as exc:  # noqa: BLE001 - per-cycle isolation is the contract
        return entry, None, str(exc)


# ---------------------------------------------------------------------------
# table serialization (external interfaces)

INDICATOR_CSV_HEADER = ("cell_id,cycle,batch,P_autocorr_W2,R_ohm,Z_chg_ohm,"
                        "Z_chg2_ohm,E_ch_J,E_dis_J,valid_mask")
FEATURE_CSV_HEADER = "cell_id,cycle,dP_autocorr,dR,dZ_norm,dE_ch,dE_dis,Q_Ah,Q_loss_pct"
CORRELATION_CSV_HEADER = "scope,feature,r,n"
SWEEP_CSV_HEADER = "v_lo,v_hi,r,n,flag"
EVALUATION_CSV_HEADER = "cell_id,cycle,Q_true_Ah,Q_est_Ah,ape_pct"


def _fmt(x: float) -> str:
    if not np.isfinite(x):
        return "nan"
    return repr(float(x))


def write_indicator_csv(path, indicators: dict) -> None:
    """One row per (cell, cycle); valid_mask is six 0/1 chars, one per
    indicator column in header order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(INDICATOR_CSV_HEADER + "\n")
        for cell in sorted(indicators):
            ind = indicators[cell]
            for k in range(len(ind.cycles)):
                vals = [ind.values[name][k] for name in INDICATOR_NAMES]
                mask = "".join("1" if ind.valid[name][k] else "0" for name in INDICATOR_NAMES)
                fh.write(f"{cell},{ind.cycles[k]},{ind.batches[k]},"
                         + ",".join(_fmt(v) for v in vals) + f",{mask}\n")


def read_indicator_csv(path) -> dict:
    path = Path(path)
    rows = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().strip()
        if header != INDICATOR_CSV_HEADER:
            raise SchemaError(f"{path}: unexpected indicator CSV header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 10:
                raise SchemaError(f"{path}: expected 10 fields, got {len(parts)}")
            cell = parts[0]
            cyc, batch = int(parts[1]), int(parts[2])
            vals = [float(p) for p in parts[3:9]]
            mask = parts[9]
            rows.setdefault(cell, []).append((cyc, batch, vals, mask))
    out = {}
    for cell, items in sorted(rows.items()):
        items.sort(key=lambda it: it[0])
        cycles = np.array([c for c, _, _, _ in items])
        batches = np.array([b for _, b, _, _ in items])
        values, valid = {}, {}
        for j, name in enumerate(INDICATOR_NAMES):
            values[name] = np.array([vals[j] for _, _, vals, _ in items])
            valid[name] = np.array([m[j] == "1" for _, _, _, m in items])
        out[cell] = IndicatorVector(cell, cycles, batches, values, valid)
    return out


def write_feature_csv(path, matrices: dict) -> None:
    names = FEATURE_NAMES
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(FEATURE_CSV_HEADER + "\n")
        for cell in sorted(matrices):
            m = matrices[cell]
            for k in range(len(m)):
                cols = []
                for name in names:
                    if name in m.feature_names:
                        cols.append(_fmt(m.X[k, m.feature_names.index(name)]))
                    else:
                        cols.append("nan")
                fh.write(f"{cell},{m.cycles[k]}," + ",".join(cols)
                         + f",{_fmt(m.q_Ah[k])},{_fmt(m.q_loss_pct[k])}\n")


def write_correlation_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CORRELATION_CSV_HEADER + "\n")
        for row in rows:
            fh.write(f"{row.scope},{row.feature},{_fmt(row.r)},{row.n}\n")


def write_sweep_csv(path, result) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(SWEEP_CSV_HEADER + "\n")
        for row in result.rows:
            fh.write(f"{_fmt(row.v_lo)},{_fmt(row.v_hi)},{_fmt(row.r)},{row.n},{row.flag}\n")


def write_evaluation_csv(path, report) -> None:
    """Per-cycle evaluation rows plus a summary row (cycle column 'ALL')."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(EVALUATION_CSV_HEADER + "\n")
        for k in range(len(report.cycles)):
            fh.write(f"{report.cell_id},{report.cycles[k]},{_fmt(report.q_true[k])},"
                     f"{_fmt(report.q_est[k])},{_fmt(report.ape_pct[k])}\n")
        fh.write(f"{report.cell_id},ALL,,,{_fmt(report.max_ape_pct)}\n")
