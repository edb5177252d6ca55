"""The five SOH indicators and auxiliary derived quantities.

Computed per aging cycle: power autocorrelation at zero delay (discharge),
mean acceleration-peak resistance (discharge), averaged charging impedance
with and without an OCV reference (CC-a), and windowed charge/discharge
energies. All functions are pure and operate on immutable series.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import IntegrityError, OcvCurve, SampleSeries

# stride (seconds) for instantaneous charging impedance, keyed by C-rate
IMPEDANCE_DT_BY_RATE = {0.25: 60.0, 0.5: 30.0, 1.0: 1.0}

INDICATOR_NAMES = ("P_autocorr", "R", "Z_chg", "Z_chg2", "E_ch", "E_dis")


@dataclass(frozen=True)
class VoltageWindow:
    """Voltage interval traversed in a fixed direction."""

    v_start: float
    v_end: float
    direction: str  # "rising" or "falling"

    def __post_init__(self):
        # equal bounds are allowed as a degenerate zero-width window
        if self.direction == "rising":
            if self.v_start > self.v_end:
                raise IntegrityError("rising window requires v_start <= v_end")
        elif self.direction == "falling":
            if self.v_start < self.v_end:
                raise IntegrityError("falling window requires v_start >= v_end")
        else:
            raise IntegrityError(f"bad window direction {self.direction!r}")


@dataclass
class IndicatorVector:
    """Per-cell, per-cycle indicator values with validity masks."""

    cell_id: str
    cycles: np.ndarray
    batches: np.ndarray
    values: dict = field(default_factory=dict)   # name -> float array (nan where invalid)
    valid: dict = field(default_factory=dict)    # name -> bool array

    def __post_init__(self):
        self.cycles = np.asarray(self.cycles, dtype=np.int64)
        self.batches = np.asarray(self.batches, dtype=np.int64)
        for name, arr in self.values.items():
            arr = np.asarray(arr, dtype=np.float64)
            self.values[name] = arr
            if name not in self.valid:
                self.valid[name] = np.isfinite(arr)
            if len(arr) != len(self.cycles):
                raise IntegrityError(f"indicator {name}: length mismatch")
        for name, m in self.valid.items():
            if np.any(m & ~np.isfinite(self.values[name])):
                raise IntegrityError(f"indicator {name}: non-finite value marked valid")


def power_series(discharge: SampleSeries) -> np.ndarray:
    """Elementwise cell power V(t) * I(t) in watts."""
    return discharge.voltage_V * discharge.current_A


def power_autocorrelation(power: np.ndarray, tau_max_s: float, dt_s: float = 1.0):
    """Unnormalized autocorrelation of the power signal over +-tau_max.

    rho(tau) = sum_{t=tau+1..T} (P(t) - Pbar)(P(t - tau) - Pbar) at integer
    sample lags; tau_max in seconds converts to a lag count via floor. The
    indicator is rho(0), the sum of squared deviations from the mean.

    Returns (lags_s, rho, p_autocorr) with lags running -L..L and rho
    symmetric.
    """
    p = np.asarray(power, dtype=np.float64)
    if len(p) < 2:
        raise ValueError("power series must have at least 2 samples")
    if dt_s <= 0:
        raise ValueError("dt_s must be positive")
    duration = (len(p) - 1) * dt_s
    if tau_max_s < 0 or tau_max_s > duration:
        raise ValueError(f"tau_max {tau_max_s} s outside [0, {duration}] s")
    lag_max = int(np.floor(tau_max_s / dt_s))
    x = p - p.mean()
    pos = np.empty(lag_max + 1)
    pos[0] = float(np.dot(x, x))
    for lag in range(1, lag_max + 1):
        pos[lag] = float(np.dot(x[lag:], x[:-lag]))
    rho = np.concatenate((pos[:0:-1], pos))
    lags_s = np.arange(-lag_max, lag_max + 1, dtype=np.float64) * dt_s
    return lags_s, rho, float(pos[0])


@dataclass(frozen=True)
class CycleResistance:
    r_ohm: float                  # nan when no peaks were available
    valid: bool
    per_peak_ohm: np.ndarray
    per_peak_soc: np.ndarray      # nan where SOC unknown


def cycle_resistance(peaks) -> CycleResistance:
    """Mean of per-peak resistances delta_V / delta_I over one discharge.

    An empty peak list yields an invalid (masked) result, not an error.
    """
    if not peaks:
        return CycleResistance(float("nan"), False, np.empty(0), np.empty(0))
    r = np.array([p.delta_V / p.delta_I for p in peaks], dtype=np.float64)
    soc = np.array([float("nan") if p.soc_at_peak is None else p.soc_at_peak for p in peaks])
    return CycleResistance(float(np.mean(r)), True, r, soc)


def impedance_stride_s(cc_a_rate: float) -> float:
    """Difference interval for Z_chg_ist; nearest table entry by C-rate."""
    rates = np.array(sorted(IMPEDANCE_DT_BY_RATE))
    nearest = float(rates[np.argmin(np.abs(rates - cc_a_rate))])
    return IMPEDANCE_DT_BY_RATE[nearest]


def instantaneous_charging_impedance(cc_a: SampleSeries, cc_a_rate: float):
    """Strided voltage differences over the constant CC-a current.

    Z(t_k) = -(V(t_k) - V(t_{k-1})) / I_ch with t_k spaced by the C-rate
    dependent interval. Returns (times, z); both empty when the phase is
    shorter than one stride (the caller masks the indicator).
    """
    n = len(cc_a)
    if n < 2:
        return np.empty(0), np.empty(0)
    dt = cc_a.dt_s
    stride = max(1, int(round(impedance_stride_s(cc_a_rate) / dt)))
    if n <= stride:
        return np.empty(0), np.empty(0)
    i_ch = float(np.mean(cc_a.current_A))
    if i_ch >= 0:
        raise IntegrityError("CC-A current must be negative (charging)")
    idx = np.arange(stride, n, stride)
    z = -(cc_a.voltage_V[idx] - cc_a.voltage_V[idx - stride]) / i_ch
    return cc_a.time_s[idx].copy(), z


def _crossing_time(time, volt, level, rising: bool, start: int = 0, last: bool = False):
    """Sub-sample time of the first (or last) crossing of ``level``.

    Crossing means the level is passed between consecutive samples in the
    requested direction; linear interpolation locates it. Returns (t, index)
    of the bracketing right sample, or None.
    """
    if len(volt) < start + 2:
        return None
    v0 = volt[start:-1]
    v1 = volt[start + 1:]
    if rising:
        hits = (v0 < level) & (v1 >= level)
    else:
        hits = (v0 > level) & (v1 <= level)
    where = np.nonzero(hits)[0]
    if where.size == 0:
        return None
    k = int(where[-1] if last else where[0]) + start
    va, vb = volt[k], volt[k + 1]
    frac = 0.0 if vb == va else (level - va) / (vb - va)
    t = time[k] + frac * (time[k + 1] - time[k])
    return float(t), k + 1


def window_interval(phase: SampleSeries, window: VoltageWindow, exit_policy: str = "first"):
    """Locate [t_in, t_fin] for a voltage window in a phase.

    Entry is the first crossing of v_start in the window direction; the exit
    is the first subsequent crossing of v_end ("first", default) or the last
    one in the phase ("last"). Returns (t_in, t_fin) or None when either
    crossing is missing.
    """
    rising = window.direction == "rising"
    hit_in = _crossing_time(phase.time_s, phase.voltage_V, window.v_start, rising)
    if hit_in is None:
        return None
    t_in, k_in = hit_in
    hit_fin = _crossing_time(phase.time_s, phase.voltage_V, window.v_end, rising,
                             start=k_in - 1, last=(exit_policy == "last"))
    if hit_fin is None:
        return None
    t_fin, _ = hit_fin
    if t_fin < t_in:
        return None
    return t_in, t_fin


def averaged_charging_impedance(z_times: np.ndarray, z_values: np.ndarray,
                                phase: SampleSeries, window: VoltageWindow) -> float:
    """Mean of Z_chg_ist samples whose timestamps fall inside the window.

    Returns nan (masked) when the window crossings are missing or no strided
    sample lands inside.
    """
    interval = window_interval(phase, window)
    if interval is None or len(z_values) == 0:
        return float("nan")
    t_in, t_fin = interval
    sel = (z_times >= t_in) & (z_times <= t_fin)
    if not np.any(sel):
        return float("nan")
    return float(np.mean(z_values[sel]))


def overpotential_impedance_series(cc_a: SampleSeries, ocv_charge: OcvCurve,
                                   soc: np.ndarray | None = None,
                                   nominal_capacity_Ah: float | None = None) -> np.ndarray:
    """Per-sample zero-order-ECM impedance -(V - OCV(SOC)) / I during CC-a.

    Uses the series' SOC channel when present; otherwise coulomb-counts from
    the protocol anchor SOC = 0.20 at charge start, which needs the nominal
    capacity. Negative values (charge-OCV hysteresis artifact at the start of
    charge) are kept here; window averaging excludes them.
    """
    if soc is None:
        soc = cc_a.soc
    if soc is None:
        if nominal_capacity_Ah is None:
            raise IntegrityError("SOC channel absent and no nominal capacity for coulomb counting")
        dt = np.diff(cc_a.time_s, prepend=cc_a.time_s[0])
        soc = 0.20 - np.cumsum(cc_a.current_A * dt) / (3600.0 * nominal_capacity_Ah)
    i_ch = float(np.mean(cc_a.current_A))
    if i_ch >= 0:
        raise IntegrityError("CC-A current must be negative (charging)")
    return -(cc_a.voltage_V - ocv_charge.interp(soc)) / i_ch


def charging_impedance_with_ocv(cc_a: SampleSeries, ocv_charge: OcvCurve,
                                window: VoltageWindow,
                                nominal_capacity_Ah: float | None = None) -> float:
    """OCV-referenced charging impedance averaged over the voltage window.

    Negative per-sample values are excluded before averaging; returns nan
    when the window is missing or every sample in it is negative.
    """
    if len(cc_a) < 2:
        return float("nan")
    z = overpotential_impedance_series(cc_a, ocv_charge, nominal_capacity_Ah=nominal_capacity_Ah)
    interval = window_interval(cc_a, window)
    if interval is None:
        return float("nan")
    t_in, t_fin = interval
    sel = (cc_a.time_s >= t_in) & (cc_a.time_s <= t_fin) & (z >= 0)
    if not np.any(sel):
        return float("nan")
    return float(np.mean(z[sel]))


def pseudo_dv(z_values: np.ndarray, delta_t_s: float) -> np.ndarray:
    """Differential-voltage surrogate: scale impedance by 3600 / delta_t."""
    if delta_t_s <= 0:
        raise ValueError("delta_t_s must be positive")
    return (3600.0 / delta_t_s) * np.asarray(z_values, dtype=np.float64)


def windowed_energy(phase: SampleSeries, window: VoltageWindow,
                    exit_policy: str = "first"):
    """Trapezoidal integral of |V * I| over a voltage window.

    Returns (energy_J, elapsed_s); both nan (masked) when a crossing is
    missing. Endpoint power values are linearly interpolated at the
    sub-sample crossing times, so adjacent windows add exactly.
    """
    interval = window_interval(phase, window, exit_policy)
    if interval is None:
        return float("nan"), float("nan")
    t_in, t_fin = interval
    t = phase.time_s
    p = phase.voltage_V * phase.current_A
    p_in = float(np.interp(t_in, t, p))
    p_fin = float(np.interp(t_fin, t, p))
    inside = (t > t_in) & (t < t_fin)
    tt = np.concatenate(([t_in], t[inside], [t_fin]))
    pp = np.concatenate(([p_in], p[inside], [p_fin]))
    energy = abs(float(np.trapezoid(pp, tt)))
    return energy, float(t_fin - t_in)


def ocv_hysteresis(charge: OcvCurve, discharge: OcvCurve):
    """Pointwise OCV gap (charge minus discharge) on the union SOC grid."""
    lo = max(charge.soc_grid[0], discharge.soc_grid[0])
    hi = min(charge.soc_grid[-1], discharge.soc_grid[-1])
    if lo >= hi:
        raise ValueError("OCV curves have disjoint SOC supports")
    grid = np.union1d(charge.soc_grid, discharge.soc_grid)
    grid = grid[(grid >= lo) & (grid <= hi)]
    return grid, charge.interp(grid) - discharge.interp(grid)
