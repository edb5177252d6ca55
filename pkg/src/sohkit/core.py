"""Shared domain types, units, and file I/O.

Sign convention: cell current is negative while charging and positive while
discharging. Voltages are volts, times are seconds from cycle start,
capacities are ampere-hours. All types are immutable after construction and
safe to share across threads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOLTAGE_MIN_V = 0.5
VOLTAGE_MAX_V = 5.0
PHASE_NAMES = ("CC_A", "CV_4V0", "CC_B", "CV_4V2", "DISCHARGE")

CYCLE_CSV_COLUMNS = ("time_s", "voltage_V", "current_A")
RPT_CSV_HEADER = "cell_id,rpt_index,preceding_cycle,capacity_Ah"


class SohkitError(Exception):
    """Base class for toolkit errors."""


class CsvParseError(SohkitError):
    """A row could not be parsed; message carries the file row number."""


class SchemaError(SohkitError):
    """A file or table does not match the documented schema."""


class IntegrityError(SohkitError):
    """Data violates an invariant (non-monotone time, bad sign, ...)."""


class SegmentationError(SohkitError):
    """Phase boundaries could not be located."""


class ConfigError(SohkitError):
    """Invalid or missing configuration."""


class PipelineError(SohkitError):
    """A pipeline stage cannot proceed (e.g. every value masked)."""


class FitError(SohkitError):
    """Model fitting failed (rank deficiency, non-convergence)."""


class UndefinedCorrelationError(SohkitError):
    """Pearson correlation undefined (constant input)."""


def percent_change(reference: float, value: float, mode: str) -> float:
    """Percentage change of ``value`` relative to ``reference``.

    mode="loss" returns (ref - value) / ref * 100; mode="increase" returns
    (value - ref) / ref * 100. The two modes are antisymmetric.
    """
    if reference == 0:
        raise ValueError("percent_change reference must be nonzero")
    if mode == "loss":
        return (reference - value) / reference * 100.0
    if mode == "increase":
        return (value - reference) / reference * 100.0
    raise ValueError(f"unknown mode {mode!r}, expected 'loss' or 'increase'")


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SampleSeries:
    """Equal-length time/voltage/current channels, SOC optional.

    Time is seconds relative to cycle start and strictly increasing after
    ingestion. Construction only checks shapes; monotonicity and range checks
    are the ingestion layer's job so that slicing stays cheap.
    """

    time_s: np.ndarray
    voltage_V: np.ndarray
    current_A: np.ndarray
    soc: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "time_s", _readonly(self.time_s))
        object.__setattr__(self, "voltage_V", _readonly(self.voltage_V))
        object.__setattr__(self, "current_A", _readonly(self.current_A))
        if self.soc is not None:
            object.__setattr__(self, "soc", _readonly(self.soc))
        n = len(self.time_s)
        if len(self.voltage_V) != n or len(self.current_A) != n:
            raise IntegrityError("channel lengths differ")
        if self.soc is not None and len(self.soc) != n:
            raise IntegrityError("soc length differs from time")

    def __len__(self) -> int:
        return len(self.time_s)

    @property
    def duration_s(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(self.time_s[-1] - self.time_s[0])

    @property
    def dt_s(self) -> float:
        """Nominal sample step (median of time differences)."""
        if len(self) < 2:
            raise IntegrityError("need at least 2 samples to infer dt")
        return float(np.median(np.diff(self.time_s)))

    def slice(self, start: int, stop: int) -> "SampleSeries":
        return SampleSeries(
            self.time_s[start:stop],
            self.voltage_V[start:stop],
            self.current_A[start:stop],
            None if self.soc is None else self.soc[start:stop],
        )


@dataclass(frozen=True)
class CycleRecord:
    """One aging cycle: raw series plus (possibly empty) phase map."""

    cell_id: str
    cycle_index: int
    batch_index: int
    cc_a_rate: float
    raw: SampleSeries
    phases: dict = field(default_factory=dict)
    phase_bounds: dict | None = None

    def __post_init__(self):
        if self.cycle_index < 1:
            raise IntegrityError(f"cycle_index must be >= 1, got {self.cycle_index}")
        if self.batch_index < 1:
            raise IntegrityError(f"batch_index must be >= 1, got {self.batch_index}")

    def validate_phases(self, eps_i: float = 0.02) -> None:
        """Check the phase-level invariants (CC-A constant, discharge sign)."""
        cca = self.phases.get("CC_A")
        if cca is not None and len(cca) > 0:
            med = float(np.median(cca.current_A))
            if med >= 0:
                raise IntegrityError(f"{self.cell_id} cycle {self.cycle_index}: CC_A current not negative")
            if np.any(np.abs(cca.current_A - med) > eps_i * abs(med)):
                raise IntegrityError(f"{self.cell_id} cycle {self.cycle_index}: CC_A current not constant")
        dis = self.phases.get("DISCHARGE")
        if dis is not None and len(dis) > 0 and float(np.mean(dis.current_A)) <= 0:
            raise IntegrityError(f"{self.cell_id} cycle {self.cycle_index}: discharge mean current not positive")


@dataclass(frozen=True)
class RptRecord:
    cell_id: str
    rpt_index: int
    preceding_cycle: int
    capacity_Ah: float

    def __post_init__(self):
        if self.capacity_Ah <= 0:
            raise IntegrityError(f"RPT capacity must be positive, got {self.capacity_Ah}")


@dataclass(frozen=True)
class CapacitySeries:
    """Per-cycle capacities for one cell, anchored to its fresh capacity."""

    cell_id: str
    cycles: np.ndarray
    q_Ah: np.ndarray
    q_fresh_Ah: float

    def __post_init__(self):
        object.__setattr__(self, "cycles", np.asarray(self.cycles, dtype=np.int64))
        object.__setattr__(self, "q_Ah", _readonly(self.q_Ah))
        self.cycles.setflags(write=False)
        if len(self.cycles) != len(self.q_Ah):
            raise IntegrityError("cycles and q_Ah lengths differ")

    @property
    def q_loss_pct(self) -> np.ndarray:
        return (self.q_fresh_Ah - self.q_Ah) / self.q_fresh_Ah * 100.0


@dataclass(frozen=True)
class OcvCurve:
    """Open-circuit voltage vs SOC for one direction, linear interpolation."""

    direction: str
    soc_grid: np.ndarray
    ocv: np.ndarray

    def __post_init__(self):
        if self.direction not in ("charge", "discharge"):
            raise IntegrityError(f"bad OCV direction {self.direction!r}")
        object.__setattr__(self, "soc_grid", _readonly(self.soc_grid))
        object.__setattr__(self, "ocv", _readonly(self.ocv))
        if len(self.soc_grid) != len(self.ocv):
            raise IntegrityError("soc_grid and ocv lengths differ")
        if len(self.soc_grid) < 2:
            raise IntegrityError("OCV curve needs at least 2 points")
        if np.any(np.diff(self.soc_grid) <= 0):
            raise IntegrityError("OCV soc grid must be strictly increasing")
        if np.any(np.diff(self.ocv) <= 0):
            raise IntegrityError(f"{self.direction} OCV must be strictly increasing with soc")

    def interp(self, soc):
        return np.interp(soc, self.soc_grid, self.ocv)


@dataclass(frozen=True)
class SampleFlag:
    row: int          # 1-based file row (header is row 1) or sample index + 2
    channel: str
    value: float
    reason: str


@dataclass
class ValidationReport:
    path: str
    flags: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flags


@dataclass(frozen=True)
class ManifestEntry:
    cell_id: str
    cycle_index: int
    batch_index: int
    cc_a_rate: float
    file: str
    phases: dict | None = None


@dataclass(frozen=True)
class FeatureBlock:
    """Manifest-level exclusion of unreliable features for one cell."""

    cell_id: str
    exclude_features: tuple


def ingest_cycle_csv(path, entry: ManifestEntry, invert_current: bool = False,
                     duplicate_policy: str = "reject"):
    """Read one cycle CSV and return ``(CycleRecord, ValidationReport)``.

    The CSV schema is ``time_s,voltage_V,current_A[,soc]`` with a header row.
    Out-of-range samples are flagged in the report, never dropped; duplicate
    timestamps are rejected or merged (keep first) per ``duplicate_policy``.
    Row numbers in errors and flags are 1-based file rows (header is row 1).
    """
    path = Path(path)
    report = ValidationReport(path=str(path))
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().strip().lstrip("﻿")
        cols = [c.strip() for c in header.split(",")]
        if cols[:3] != list(CYCLE_CSV_COLUMNS):
            raise SchemaError(f"{path}: expected header time_s,voltage_V,current_A[,soc], got {header!r}")
        has_soc = len(cols) == 4 and cols[3] == "soc"
        if len(cols) > 3 and not has_soc:
            raise SchemaError(f"{path}: unknown extra columns {cols[3:]}")
        ncols = 4 if has_soc else 3

        times, volts, amps, socs = [], [], [], []
        rownum = 1
        for line in fh:
            rownum += 1
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != ncols:
                raise CsvParseError(f"{path} row {rownum}: expected {ncols} fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise CsvParseError(f"{path} row {rownum}: malformed numeric value in {line!r}") from None
            times.append(vals[0])
            volts.append(vals[1])
            amps.append(vals[2])
            if has_soc:
                socs.append(vals[3])

    t = np.asarray(times)
    v = np.asarray(volts)
    i = np.asarray(amps)
    s = np.asarray(socs) if has_soc else None

    dt = np.diff(t)
    if np.any(dt < 0):
        bad = int(np.argmax(dt < 0)) + 1
        raise IntegrityError(f"{path} row {bad + 2}: time goes backwards")
    dup = dt == 0
    if np.any(dup):
        bad = int(np.argmax(dup)) + 1
        if duplicate_policy == "reject":
            raise IntegrityError(f"{path} row {bad + 2}: duplicate timestamp")
        if duplicate_policy != "merge":
            raise ConfigError(f"unknown duplicate_policy {duplicate_policy!r}")
        keep = np.concatenate(([True], dt > 0))
        for idx in np.nonzero(~keep)[0]:
            report.flags.append(SampleFlag(int(idx) + 2, "time_s", float(t[idx]), "duplicate timestamp merged"))
        t, v, i = t[keep], v[keep], i[keep]
        if s is not None:
            s = s[keep]

    if invert_current:
        i = -i

    for idx in np.nonzero((v < VOLTAGE_MIN_V) | (v > VOLTAGE_MAX_V))[0]:
        report.flags.append(SampleFlag(int(idx) + 2, "voltage_V", float(v[idx]), "voltage out of range"))
    if s is not None:
        for idx in np.nonzero((s < 0.0) | (s > 1.0))[0]:
            report.flags.append(SampleFlag(int(idx) + 2, "soc", float(s[idx]), "soc out of range"))

    raw = SampleSeries(t, v, i, s)
    phases = {}
    bounds = None
    if entry.phases:
        bounds = {name: (int(a), int(b)) for name, (a, b) in entry.phases.items()}
        phases = {name: raw.slice(a, b) for name, (a, b) in bounds.items()}
    record = CycleRecord(entry.cell_id, entry.cycle_index, entry.batch_index,
                         entry.cc_a_rate, raw, phases, bounds)
    if phases:
        record.validate_phases()
    return record, report


def write_cycle_csv(path, series: SampleSeries) -> None:
    """Write a cycle CSV; floats use shortest round-trip representation."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if series.soc is not None:
            fh.write("time_s,voltage_V,current_A,soc\n")
            for t, v, i, s in zip(series.time_s, series.voltage_V, series.current_A, series.soc):
                fh.write(f"{float(t)!r},{float(v)!r},{float(i)!r},{float(s)!r}\n")
        else:
            fh.write("time_s,voltage_V,current_A\n")
            for t, v, i in zip(series.time_s, series.voltage_V, series.current_A):
                fh.write(f"{float(t)!r},{float(v)!r},{float(i)!r}\n")


def load_manifest(path):
    """Load a cycle manifest JSON: ``(entries, blocks)``.

    The manifest is a JSON array; objects with a ``file`` key describe cycles,
    objects with an ``exclude_features`` key are per-cell feature blocklists.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise SchemaError(f"{path}: manifest must be a JSON array")
    entries, blocks = [], []
    for k, obj in enumerate(data):
        if "exclude_features" in obj:
            try:
                blocks.append(FeatureBlock(obj["cell_id"], tuple(obj["exclude_features"])))
            except KeyError as exc:
                raise SchemaError(f"{path}[{k}]: blocklist entry missing {exc}") from None
            continue
        try:
            phases = obj.get("phases")
            if phases is not None:
                phases = {name: (int(a), int(b)) for name, (a, b) in phases.items()}
            entries.append(ManifestEntry(
                cell_id=obj["cell_id"],
                cycle_index=int(obj["cycle_index"]),
                batch_index=int(obj["batch_index"]),
                cc_a_rate=float(obj["cc_a_rate"]),
                file=obj["file"],
                phases=phases,
            ))
        except KeyError as exc:
            raise SchemaError(f"{path}[{k}]: manifest entry missing key {exc}") from None
    return entries, blocks


def write_manifest(path, entries, blocks=()) -> None:
    items = []
    for e in entries:
        obj = {"cell_id": e.cell_id, "cycle_index": e.cycle_index, "batch_index": e.batch_index,
               "cc_a_rate": e.cc_a_rate, "file": e.file}
        if e.phases is not None:
            obj["phases"] = {name: [int(a), int(b)] for name, (a, b) in e.phases.items()}
        items.append(obj)
    for b in blocks:
        items.append({"cell_id": b.cell_id, "exclude_features": list(b.exclude_features)})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(items, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_rpt_table(path):
    """Read an RPT CSV (``cell_id,rpt_index,preceding_cycle,capacity_Ah``)."""
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().strip().lstrip("﻿")
        if header != RPT_CSV_HEADER:
            raise SchemaError(f"{path}: expected header {RPT_CSV_HEADER!r}, got {header!r}")
        rownum = 1
        for line in fh:
            rownum += 1
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise CsvParseError(f"{path} row {rownum}: expected 4 fields")
            try:
                records.append(RptRecord(parts[0], int(parts[1]), int(parts[2]), float(parts[3])))
            except ValueError:
                raise CsvParseError(f"{path} row {rownum}: malformed value") from None
    by_cell = {}
    for r in records:
        by_cell.setdefault(r.cell_id, []).append(r)
    for cell, rs in by_cell.items():
        rs = sorted(rs, key=lambda r: r.rpt_index)
        pre = [r.preceding_cycle for r in rs]
        if any(b <= a for a, b in zip(pre, pre[1:])):
            raise IntegrityError(f"{path}: preceding_cycle not strictly increasing for cell {cell}")
    return records


def write_rpt_table(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(RPT_CSV_HEADER + "\n")
        for r in records:
            fh.write(f"{r.cell_id},{r.rpt_index},{r.preceding_cycle},{float(r.capacity_Ah)!r}\n")


def load_ocv_csv(path, direction: str) -> OcvCurve:
    """Read an OCV CSV (``soc,ocv_V``); direction comes from caller/filename."""
    path = Path(path)
    soc, ocv = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().strip().lstrip("﻿")
        if header != "soc,ocv_V":
            raise SchemaError(f"{path}: expected header 'soc,ocv_V', got {header!r}")
        rownum = 1
        for line in fh:
            rownum += 1
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise CsvParseError(f"{path} row {rownum}: expected 2 fields")
            try:
                soc.append(float(parts[0]))
                ocv.append(float(parts[1]))
            except ValueError:
                raise CsvParseError(f"{path} row {rownum}: malformed value") from None
    return OcvCurve(direction, np.asarray(soc), np.asarray(ocv))


def write_ocv_csv(path, curve: OcvCurve) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("soc,ocv_V\n")
        for s, v in zip(curve.soc_grid, curve.ocv):
            fh.write(f"{float(s)!r},{float(v)!r}\n")
