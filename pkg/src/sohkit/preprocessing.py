"""Outlier removal, incremental features, impedance normalization, capacity augmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CapacitySeries, PipelineError
from .indicators import IndicatorVector

# raw indicator -> incremental feature column
FEATURE_SOURCES = {
    "dP_autocorr": "P_autocorr",
    "dR": "R",
    "dZ_norm": "Z_chg",
    "dE_ch": "E_ch",
    "dE_dis": "E_dis",
}
FEATURE_NAMES = tuple(FEATURE_SOURCES)


def remove_outliers(values: np.ndarray, valid: np.ndarray | None = None,
                    threshold_decades: float = 1.0, label: str = "feature"):
    """Mask entries deviating from the mean by more than ``threshold_decades``.

    Entries with |value| outside [mean / 10^d, mean * 10^d], where the mean is
    over absolute values of currently valid entries, are masked invalid. The
    mean is recomputed once after the first masking pass and the band applied
    once more; there is no iteration to a fixpoint. Unmasked values are never
    altered.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.isfinite(values) if valid is None else (np.asarray(valid, bool) & np.isfinite(values))
    if mask.sum() < 3:
        raise PipelineError(f"{label}: need at least 3 valid values for outlier removal")
    factor = 10.0 ** threshold_decades

    for _ in range(2):
        mean = float(np.mean(np.abs(values[mask])))
        lo, hi = mean / factor, mean * factor
        out = mask & ((np.abs(values) < lo) | (np.abs(values) > hi))
        if not np.any(out):
            break
        mask = mask & ~out
        if not np.any(mask):
            raise PipelineError(f"{label}: outlier removal masked every value")
    return mask


def incremental(values: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Subtract the first valid entry from every valid entry.

    Invalid entries stay nan, so the first valid element of the result is
    exactly zero. Idempotent: applying it twice changes nothing.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.isfinite(values) if valid is None else (np.asarray(valid, bool) & np.isfinite(values))
    if not np.any(mask):
        raise PipelineError("incremental: no valid entries")
    base = values[np.argmax(mask)]
    out = np.full_like(values, np.nan)
    out[mask] = values[mask] - base
    return out


def normalize_impedance(dz: np.ndarray, z_fresh: float) -> np.ndarray:
    """Divide an incremental impedance series by the fresh-cell impedance."""
    if not z_fresh > 0:
        raise ValueError(f"z_fresh must be positive, got {z_fresh}")
    return np.asarray(dz, dtype=np.float64) / z_fresh


def augment_capacity(rpts, cycles, cell_id: str | None = None) -> CapacitySeries:
    """Per-cycle capacities by linear interpolation between RPT anchors.

    Q_i = (i - c_j) / (c_{j+1} - c_j) * (Q_{j+1} - Q_j) + Q_j for cycle i in
    batch j, where c_j is the aging cycle preceding RPT j. Exact at anchors;
    cycles outside the RPT span raise (no extrapolation).
    """
    rpts = sorted(rpts, key=lambda r: r.rpt_index)
    if len(rpts) < 2:
        raise PipelineError("augment_capacity needs at least 2 RPTs")
    if cell_id is None:
        cell_id = rpts[0].cell_id
    if any(r.cell_id != cell_id for r in rpts):
        raise PipelineError("augment_capacity: RPTs from multiple cells")
    anchors_c = np.array([r.preceding_cycle for r in rpts], dtype=np.float64)
    anchors_q = np.array([r.capacity_Ah for r in rpts], dtype=np.float64)
    cycles = np.asarray(sorted(cycles), dtype=np.int64)
    if len(cycles) == 0:
        raise PipelineError("augment_capacity: empty cycle set")
    if cycles[0] < anchors_c[0] or cycles[-1] > anchors_c[-1]:
        raise PipelineError(
            f"cell {cell_id}: cycles [{cycles[0]}, {cycles[-1]}] outside RPT span "
            f"[{anchors_c[0]:.0f}, {anchors_c[-1]:.0f}]; no extrapolation")
    q = np.empty(len(cycles))
    seg = np.searchsorted(anchors_c, cycles, side="right") - 1
    seg = np.clip(seg, 0, len(rpts) - 2)
    c0, c1 = anchors_c[seg], anchors_c[seg + 1]
    q0, q1 = anchors_q[seg], anchors_q[seg + 1]
    q = (cycles - c0) / (c1 - c0) * (q1 - q0) + q0
    # anchor cycles must reproduce the measured capacity bit-for-bit
    at_anchor = np.isin(cycles, anchors_c.astype(np.int64))
    if np.any(at_anchor):
        lookup = {int(c): qq for c, qq in zip(anchors_c, anchors_q)}
        q[at_anchor] = [lookup[int(c)] for c in cycles[at_anchor]]
    return CapacitySeries(cell_id, cycles, q, q_fresh_Ah=float(anchors_q[0]))


@dataclass
class FeatureMatrix:
    """Aligned incremental features and capacity target for one cell."""

    cell_id: str
    cycles: np.ndarray
    feature_names: tuple
    X: np.ndarray               # (n_rows, n_features)
    q_Ah: np.ndarray
    q_loss_pct: np.ndarray

    def __post_init__(self):
        self.cycles = np.asarray(self.cycles, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.q_Ah = np.asarray(self.q_Ah, dtype=np.float64)
        self.q_loss_pct = np.asarray(self.q_loss_pct, dtype=np.float64)
        if self.X.shape != (len(self.cycles), len(self.feature_names)):
            raise PipelineError("feature matrix shape mismatch")

    def __len__(self):
        return len(self.cycles)

    def target(self, name: str) -> np.ndarray:
        if name == "Q":
            return self.q_Ah
        if name == "Q_loss":
            return self.q_loss_pct
        raise ValueError(f"unknown target {name!r}")


def build_feature_matrix(ind: IndicatorVector, capacity: CapacitySeries,
                         feature_set=FEATURE_NAMES, outlier_decades: float = 1.0,
                         exclude_features=()) -> FeatureMatrix:
    """Outlier-mask, difference, normalize, and align indicators with capacity.

    Rows with any invalid requested feature are dropped (no imputation),
    mirroring gaps left by unreliable measurements. Features listed in
    ``exclude_features`` (per-cell blocklist) are omitted from the output.
    """
    if capacity.cell_id != ind.cell_id:
        raise PipelineError(f"indicator cell {ind.cell_id} vs capacity cell {capacity.cell_id}")
    names = tuple(f for f in feature_set if f not in exclude_features)
    if not names:
        raise PipelineError(f"cell {ind.cell_id}: no features left after exclusions")

    cap_by_cycle = {int(c): (q, ql) for c, q, ql in
                    zip(capacity.cycles, capacity.q_Ah, capacity.q_loss_pct)}
    columns = {}
    row_ok = np.ones(len(ind.cycles), dtype=bool)
    for name in names:
        src = FEATURE_SOURCES.get(name)
        if src is None:
            raise PipelineError(f"unknown feature {name!r}")
        if src not in ind.values:
            raise PipelineError(f"cell {ind.cell_id}: indicator {src} was not extracted")
        vals = ind.values[src]
        mask = remove_outliers(vals, ind.valid.get(src), outlier_decades,
                               label=f"{ind.cell_id}/{src}")
        delta = incremental(vals, mask)
        if name == "dZ_norm":
            z_fresh = float(vals[np.argmax(mask)])
            delta = normalize_impedance(delta, z_fresh)
        columns[name] = delta
        row_ok &= mask

    has_cap = np.array([int(c) in cap_by_cycle for c in ind.cycles])
    row_ok &= has_cap
    if not np.any(row_ok):
        raise PipelineError(f"cell {ind.cell_id}: no cycle has all requested features and capacity")

    cycles = ind.cycles[row_ok]
    X = np.column_stack([columns[name][row_ok] for name in names])
    q = np.array([cap_by_cycle[int(c)][0] for c in cycles])
    ql = np.array([cap_by_cycle[int(c)][1] for c in cycles])
    return FeatureMatrix(ind.cell_id, cycles, names, X, q, ql)
