"""Correlation screening and voltage-window sensitivity sweeps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, UndefinedCorrelationError
from .indicators import (VoltageWindow, averaged_charging_impedance,
                         instantaneous_charging_impedance, windowed_energy)


def pearson(x, y) -> float:
    """Pearson's correlation coefficient r.

    r = sum((x - xbar)(y - ybar)) / sqrt(sum((x - xbar)^2) sum((y - ybar)^2)).
    Symmetric in its arguments; raises for constant input or length mismatch.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-D series")
    if len(x) < 2:
        raise ValueError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.dot(dx, dy) / np.sqrt(sxx * syy))


@dataclass(frozen=True)
class CorrelationRow:
    scope: str      # cell id or "ALL"
    feature: str
    r: float        # nan when undefined
    n: int


def correlation_report(matrices, pooled: bool = True):
    """Per-cell and optionally pooled r between each feature and capacity loss.

    Pooling concatenates every cell's incremental rows (already zero-based per
    cell) before correlating. Features blocked for a cell are simply absent
    from its rows; per-entry correlation errors are reported as nan rather
    than aborting the table.
    """
    if not matrices:
        raise ConfigError("correlation_report needs at least one cell")
    rows = []
    for m in matrices:
        for j, name in enumerate(m.feature_names):
            try:
                r = pearson(m.X[:, j], m.q_loss_pct)
            except UndefinedCorrelationError:
                r = float("nan")
            rows.append(CorrelationRow(m.cell_id, name, r, len(m)))
    if pooled:
        all_names = sorted({n for m in matrices for n in m.feature_names})
        for name in all_names:
            xs, ys = [], []
            for m in matrices:
                if name in m.feature_names:
                    j = m.feature_names.index(name)
                    xs.append(m.X[:, j])
                    ys.append(m.q_loss_pct)
            x = np.concatenate(xs)
            y = np.concatenate(ys)
            try:
                r = pearson(x, y)
            except UndefinedCorrelationError:
                r = float("nan")
            rows.append(CorrelationRow("ALL", name, r, len(x)))
    return rows


@dataclass(frozen=True)
class SweepConfig:
    """Enumeration of overlapping voltage sub-windows: lo_k = start + k * stride."""

    v_start: float
    width: float
    stride: float
    count: int

    def windows(self):
        return [(self.v_start + k * self.stride, self.v_start + k * self.stride + self.width)
                for k in range(self.count)]


# Fifteen 0.05 V sub-intervals stepped by 0.025 V from 3.6 V; the charging
# impedance sensitivity preset.
IMPEDANCE_SWEEP = SweepConfig(v_start=3.6, width=0.05, stride=0.025, count=15)
# Charging-energy sensitivity preset: 0.025 V-wide contiguous sub-intervals.
ENERGY_SWEEP = SweepConfig(v_start=3.6, width=0.025, stride=0.025, count=12)


@dataclass(frozen=True)
class SweepRow:
    v_lo: float
    v_hi: float
    r: float
    n: int
    flag: str       # "ok" or "insufficient-data"


@dataclass(frozen=True)
class SweepResult:
    rows: tuple
    best: tuple | None   # (v_lo, v_hi) with max |r| among ok rows


def window_sweep(cycles, capacity, kind: str, sweep: SweepConfig) -> SweepResult:
    """Correlate a windowed CC-a indicator with capacity loss per sub-window.

    kind="impedance" averages Z_chg_ist inside each window; kind="energy_ch"
    integrates power. All cycles must share one charging C-rate. Windows with
    fewer than 3 valid cycles are flagged insufficient-data.
    """
    if kind not in ("impedance", "energy_ch"):
        raise ConfigError(f"unknown sweep kind {kind!r}")
    if not cycles:
        raise ConfigError("window_sweep needs at least one cycle")
    rates = {c.cc_a_rate for c in cycles}
    if len(rates) > 1:
        raise ConfigError(f"window_sweep cycles mix C-rates {sorted(rates)}; sweep one rate at a time")
    loss_by_cycle = {int(c): ql for c, ql in zip(capacity.cycles, capacity.q_loss_pct)}

    prepared = []
    for rec in cycles:
        cca = rec.phases.get("CC_A")
        if cca is None or len(cca) < 2 or rec.cycle_index not in loss_by_cycle:
            continue
        if kind == "impedance":
            zt, zv = instantaneous_charging_impedance(cca, rec.cc_a_rate)
            prepared.append((rec, cca, zt, zv))
        else:
            prepared.append((rec, cca, None, None))

    rows = []
    best = None
    best_r = -1.0
    for v_lo, v_hi in sweep.windows():
        window = VoltageWindow(v_lo, v_hi, "rising")
        vals, losses = [], []
        for rec, cca, zt, zv in prepared:
            if kind == "impedance":
                val = averaged_charging_impedance(zt, zv, cca, window)
            else:
                val, _ = windowed_energy(cca, window)
            if np.isfinite(val):
                vals.append(val)
                losses.append(loss_by_cycle[rec.cycle_index])
        n = len(vals)
        if n < 3:
            rows.append(SweepRow(v_lo, v_hi, float("nan"), n, "insufficient-data"))
            continue
        try:
            r = pearson(np.array(vals), np.array(losses))
        except UndefinedCorrelationError:
            rows.append(SweepRow(v_lo, v_hi, float("nan"), n, "insufficient-data"))
            continue
        rows.append(SweepRow(v_lo, v_hi, r, n, "ok"))
        if abs(r) > best_r:
            best_r = abs(r)
            best = (v_lo, v_hi)
    return SweepResult(tuple(rows), best)
