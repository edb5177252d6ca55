"""Split raw cycles into charge/discharge phases and find discharge current peaks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SampleSeries, SegmentationError

CC_EPS_I = 0.02            # CC constancy tolerance, fraction of median current
CV_CUTOFF_A = 0.05         # end-of-charge current cutoff (50 mA)
CCB_RATE = 0.25            # CC-b is a C/4 phase


@dataclass(frozen=True)
class PeakConfig:
    """Acceleration-peak detector parameters (1 Hz defaults)."""

    i_step_min_A: float = 0.5
    w_step: int = 3
    hold_min: int = 5
    baseline_len: int = 10


@dataclass(frozen=True)
class AccelerationPeak:
    index: int                 # sample index of peak onset (first plateau sample)
    delta_V: float             # baseline voltage mean minus plateau minimum
    delta_I: float             # plateau mean minus baseline mean
    pre_window: tuple          # [start, end) baseline sample range
    soc_at_peak: float | None = None


def segment_phases(raw: SampleSeries, cc_a_rate: float, nominal_capacity_Ah: float,
                   eps_i: float = CC_EPS_I, cv_cutoff_A: float = CV_CUTOFF_A):
    """Locate phase boundaries in one full cycle.

    Returns a dict phase name -> half-open sample index range [start, end).
    The ranges partition the cycle. CC_A is the maximal constant-current
    prefix below 4.0 V; CV_4V0 lasts until the current magnitude falls to the
    C/4 CC-b level (empty for cells charged at C/4); CC_B runs to 4.2 V;
    CV_4V2 to the start of discharge (protocol cutoff |I| < 50 mA); the
    remainder is the discharge.
    """
    v = raw.voltage_V
    i = raw.current_A
    n = len(raw)
    if n == 0:
        raise SegmentationError("empty series")

    pos = i > 0
    if not np.any(pos):
        raise SegmentationError("discharge phase not found (no positive current)")
    dis_start = int(np.argmax(pos))
    if dis_start == 0:
        raise SegmentationError("cycle starts with discharge; no charge phase")

    charge_v = v[:dis_start]
    over = charge_v >= 4.0
    if not np.any(over):
        raise SegmentationError("CC-A endpoint not found (no 4.0 V crossing)")
    idx_v40 = int(np.argmax(over))
    if idx_v40 == 0:
        raise SegmentationError("CC-A endpoint not found (charge starts at or above 4.0 V)")

    med = float(np.median(i[:idx_v40]))
    if med >= 0:
        raise SegmentationError("charge current not negative under sign convention")
    off = np.abs(i[:idx_v40] - med) > eps_i * abs(med)
    cc_a_end = int(np.argmax(off)) if np.any(off) else idx_v40

    i_ccb = CCB_RATE * nominal_capacity_Ah
    absi = np.abs(i[cc_a_end:dis_start])
    low = absi <= i_ccb
    if not np.any(low):
        raise SegmentationError("CC-B level never reached after CC-A")
    cv1_end = cc_a_end + int(np.argmax(low))

    over42 = v[cv1_end:dis_start] >= 4.2
    if not np.any(over42):
        raise SegmentationError("CC-B endpoint not found (no 4.2 V crossing)")
    cc_b_end = cv1_end + int(np.argmax(over42))

    if float(np.mean(i[dis_start:])) <= 0:
        raise SegmentationError("discharge mean current not positive")

    return {
        "CC_A": (0, cc_a_end),
        "CV_4V0": (cc_a_end, cv1_end),
        "CC_B": (cv1_end, cc_b_end),
        "CV_4V2": (cc_b_end, dis_start),
        "DISCHARGE": (dis_start, n),
    }


def apply_phase_bounds(raw: SampleSeries, bounds: dict) -> dict:
    """Slice a raw series into phase series per a bounds map."""
    return {name: raw.slice(a, b) for name, (a, b) in bounds.items()}


def detect_acceleration_peaks(discharge: SampleSeries, config: PeakConfig):
    """Find discharge current steps (acceleration events).

    A peak is a current rise of at least ``i_step_min_A`` completed within
    ``w_step`` samples that stays elevated for at least ``hold_min`` samples.
    ``delta_I`` is plateau mean minus baseline mean; ``delta_V`` is baseline
    voltage mean minus the plateau's minimum voltage. The baseline window is
    up to ``baseline_len`` samples ending at the last low sample before the
    rise (clipped at the series start). Candidates whose baseline-to-plateau
    ranges overlap are resolved by keeping the larger ``delta_I`` (ties keep
    the earlier onset).
    """
    i = discharge.current_A
    v = discharge.voltage_V
    n = len(i)
    if n < 2:
        return []

    step = config.i_step_min_A
    rise = np.zeros(n, dtype=bool)
    for w in range(1, config.w_step + 1):
        if n > w:
            rise[w:] |= (i[w:] - i[:-w]) >= step
    # only consider samples that actually rose from their predecessor
    rise[1:] &= i[1:] > i[:-1]
    rise[0] = False
    cand_idx = np.nonzero(rise)[0]
    if cand_idx.size == 0:
        return []

    candidates = []
    for onset in cand_idx:
        onset = int(onset)
        # anchor: nearest earlier sample a full step below the onset
        anchor = -1
        for w in range(1, config.w_step + 1):
            a = onset - w
            if a < 0:
                break
            if i[onset] - i[a] >= step:
                anchor = a
                break
        if anchor < 0:
            continue
        base_start = max(0, anchor - config.baseline_len + 1)
        base_end = anchor + 1
        base_i = float(np.mean(i[base_start:base_end]))
        thresh = base_i + 0.5 * step
        plateau_end = onset
        while plateau_end < n and i[plateau_end] >= thresh:
            plateau_end += 1
        if plateau_end - onset < config.hold_min:
            continue
        delta_i = float(np.mean(i[onset:plateau_end])) - base_i
        if delta_i <= step * (1.0 - 1e-12):
            continue
        delta_v = float(np.mean(v[base_start:base_end])) - float(np.min(v[onset:plateau_end]))
        if delta_v <= 0:
            continue
        soc = None
        if discharge.soc is not None:
            soc = float(discharge.soc[onset])
        candidates.append((onset, plateau_end, base_start, base_end, delta_i, delta_v, soc))

    # resolve overlapping [base_start, plateau_end) ranges by larger delta_I
    kept = []
    for cand in candidates:
        if kept and cand[2] < kept[-1][1]:
            if cand[4] > kept[-1][4]:
                kept[-1] = cand
            continue
        kept.append(cand)

    return [
        AccelerationPeak(index=onset, delta_V=dv, delta_I=di,
                         pre_window=(bs, be), soc_at_peak=soc)
        for onset, _pe, bs, be, di, dv, soc in kept
    ]
