"""Synthetic multi-cell aging campaigns with exact ground truth.

Zero-order equivalent-circuit cell: V = OCV(SOC) -/+ R*|I| with direction
dependent OCV (static hysteresis), linear capacity fade and resistance
growth, the CC-CV charge protocol (CC-a to 4.0 V, CV, C/4 CC-b to 4.2 V, CV
to 50 mA) and a committed pulse-train discharge template between SOC 0.80
and 0.20. Every cycle comes with a ground-truth ledger entry (capacity,
resistance, phase boundaries, planted peak inventory) so the extraction
pipeline can be verified end to end.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from .core import (CycleRecord, ManifestEntry, OcvCurve, RptRecord, SampleSeries,
                   SohkitError, write_cycle_csv, write_manifest, write_ocv_csv,
                   write_rpt_table)

TEMPLATE_PERIOD_S = 1369
PULSE_BASE_C = 0.2
PULSE_SLOT_S = 16
PULSE_OFFSET_S = 11       # pulse starts this many samples into each slot
PULSE_LEN_S = 5

# charge-direction OCV anchors; exactly collinear between SOC 0.20 and 0.75
# so windowed charge energy is linear in capacity and C-rate independent
OCV_SOC_ANCHORS = np.array([0.00, 0.05, 0.10, 0.20, 0.25, 0.30, 0.40, 0.50,
                            0.60, 0.70, 0.75, 0.80, 0.90, 1.00])
OCV_V_ANCHORS = np.array([2.700, 2.950, 3.100, 3.300, 3.356, 3.412, 3.524, 3.636,
                          3.748, 3.860, 3.916, 4.190, 4.300, 4.400])
# hysteresis bump, largest below 20 % SOC
HYST_SOC_ANCHORS = np.array([0.00, 0.10, 0.20, 0.30, 0.40, 0.60, 1.00])
HYST_V_ANCHORS = np.array([0.300, 0.290, 0.250, 0.100, 0.030, 0.022, 0.020])


class SimulationError(SohkitError):
    """Cell spec drives the model outside its valid range."""


def load_template() -> np.ndarray:
    """Committed 1369 s repeating discharge current template (C-rate units)."""
    with resources.files("sohkit.data").joinpath("udds_current_template.csv").open("r") as fh:
        fh.readline()
        vals = [float(line.split(",")[1]) for line in fh if line.strip()]
    if len(vals) != TEMPLATE_PERIOD_S:
        raise SimulationError(f"template must have {TEMPLATE_PERIOD_S} rows, got {len(vals)}")
    return np.asarray(vals)


class OcvModel:
    """Monotone piecewise-cubic OCV pair with static hysteresis."""

    def __init__(self, hysteresis_scale: float = 1.0):
        self.hysteresis_scale = float(hysteresis_scale)
        self._charge = PchipInterpolator(OCV_SOC_ANCHORS, OCV_V_ANCHORS)
        self._hyst = PchipInterpolator(HYST_SOC_ANCHORS, HYST_V_ANCHORS)
        self._charge_anti = self._charge.antiderivative()
        self._soc_dense = np.linspace(0.0, 1.0, 20001)
        self._ocv_dense = self._charge(self._soc_dense)

    def charge(self, soc):
        return self._charge(soc)

    def discharge(self, soc):
        return self._charge(soc) - self.hysteresis_scale * self._hyst(soc)

    def charge_inverse(self, v: float) -> float:
        return float(np.interp(v, self._ocv_dense, self._soc_dense))

    def charge_antiderivative(self, soc):
        """Integral of the charge OCV over SOC (for analytic energy oracles)."""
        return self._charge_anti(soc)

    def curves(self, n: int = 201):
        soc = np.linspace(0.0, 1.0, n)
        return (OcvCurve("charge", soc, self.charge(soc)),
                OcvCurve("discharge", soc, self.discharge(soc)))


@dataclass(frozen=True)
class AnomalySchedule:
    """Measurement-side voltage offset on selected cycles.

    The offset switches on ``start_frac`` of the way into CC-a and stays on
    through the end of charge; only the recorded voltage is affected, not the
    protocol.
    """

    cycles: tuple
    offset_V: float = 0.6
    start_frac: float = 0.10


@dataclass(frozen=True)
class ImpedanceBump:
    """Extra charge overpotential growing per cycle, localized above ocv_lo.

    The term ramps from 0 at ocv_lo to its full value at ocv_hi and saturates
    above, so only voltage windows overlapping the ramp see the planted
    impedance growth.
    """

    ocv_lo: float = 3.775
    ocv_hi: float = 3.835
    extra_V_per_cycle: float = 1e-4


@dataclass(frozen=True)
class CellSpec:
    cell_id: str
    cc_a_rate: float
    nominal_capacity_Ah: float = 4.85
    r0_ohm: float = 0.030
    r_growth_ohm_per_cycle: float = 4.0e-5
    fade_Ah_per_cycle: float = 0.007275      # 0.15 %/cycle of the default capacity
    sigma_v_V: float = 0.0
    sigma_i_A: float = 0.0
    hysteresis_scale: float = 1.0
    cv_time_constant_s: float = 240.0
    anomaly: AnomalySchedule | None = None
    impedance_bump: ImpedanceBump | None = None
    fade_step: tuple | None = None           # (cycle, extra_drop_Ah) one-off event

    def __post_init__(self):
        if self.r_growth_ohm_per_cycle < 0 or self.fade_Ah_per_cycle < 0:
            raise SimulationError("rates must be non-negative")

    def capacity_at(self, cycle: int) -> float:
        q = self.nominal_capacity_Ah - self.fade_Ah_per_cycle * cycle
        if self.fade_step is not None and cycle >= self.fade_step[0]:
            q -= self.fade_step[1]
        if q <= 0:
            raise SimulationError(f"{self.cell_id}: capacity non-positive at cycle {cycle}")
        return q

    def resistance_at(self, cycle: int) -> float:
        return self.r0_ohm + self.r_growth_ohm_per_cycle * (cycle - 1)


@dataclass(frozen=True)
class PlantedPeak:
    onset: int          # discharge-local sample index of the pulse start
    delta_I: float
    delta_V: float
    soc: float


@dataclass
class CycleTruth:
    cell_id: str
    cycle_index: int
    q_Ah: float
    r_ohm: float
    bounds: dict
    peaks: list = field(default_factory=list)
    anomalous: bool = False
    soc_end_charge: float = 0.0


_TEMPLATE_CACHE = None


def _template() -> np.ndarray:
    global _TEMPLATE_CACHE
    if _TEMPLATE_CACHE is None:
        _TEMPLATE_CACHE = load_template()
    return _TEMPLATE_CACHE


def simulate_cycle(spec: CellSpec, cycle_index: int, rng_seed, ocv: OcvModel | None = None,
                   peak_baseline_len: int = 10):
    """Generate one aging cycle: ``(CycleRecord, CycleTruth)``.

    Deterministic in (spec, cycle_index, rng_seed). Ground-truth phase
    boundaries and the planted peak inventory are computed from the model,
    not from any detector.
    """
    if ocv is None:
        ocv = OcvModel(spec.hysteresis_scale)
    rng = np.random.default_rng(rng_seed)
    q = spec.capacity_at(cycle_index)
    r = spec.resistance_at(cycle_index)
    q_nom = spec.nominal_capacity_Ah
    i_cca = spec.cc_a_rate * q_nom
    i_ccb = 0.25 * q_nom
    tau = spec.cv_time_constant_s
    gamma = 0.0
    bump = spec.impedance_bump
    if bump is not None:
        gamma = bump.extra_V_per_cycle * (cycle_index - 1)

    def bump_term(ocv_values):
        if gamma == 0.0:
            return 0.0
        ramp = np.clip((ocv_values - bump.ocv_lo) / (bump.ocv_hi - bump.ocv_lo), 0.0, 1.0)
        return gamma * ramp

    def charge_v(soc, abs_i):
        base = ocv.charge(soc)
        return base + r * abs_i + bump_term(base)

    # CC-a: constant current until the terminal voltage reaches 4.0 V
    v_dense = ocv._ocv_dense + r * i_cca + bump_term(ocv._ocv_dense)
    if v_dense[-1] < 4.0:
        raise SimulationError(f"{spec.cell_id}: 4.0 V unreachable during CC-a")
    soc_cca_end = float(np.interp(4.0, v_dense, ocv._soc_dense))
    if soc_cca_end <= 0.20:
        raise SimulationError(f"{spec.cell_id}: charge starts at or above 4.0 V")
    k_soc = i_cca / (3600.0 * q)
    t_star = (soc_cca_end - 0.20) / k_soc
    n_cca = int(np.ceil(t_star))
    t_cca = np.arange(n_cca, dtype=np.float64)
    soc_cca = 0.20 + k_soc * t_cca
    v_cca = charge_v(soc_cca, i_cca)
    i_arr = [np.full(n_cca, -i_cca)]
    v_arr = [v_cca]
    soc_arr = [soc_cca]
    soc_last = float(soc_cca[-1])

    # CV at 4.0 V: exponential current decay down to the CC-b level
    if i_cca > i_ccb:
        t1 = tau * np.log(i_cca / i_ccb)
        n_cv1 = max(0, int(np.ceil(t1)) - 1)
    else:
        n_cv1 = 0
    if n_cv1 > 0:
        kk = np.arange(1, n_cv1 + 1, dtype=np.float64)
        i_cv1 = i_cca * np.exp(-kk / tau)
        soc_cv1 = soc_last + tau * i_cca * (1.0 - np.exp(-kk / tau)) / (3600.0 * q)
        i_arr.append(-i_cv1)
        v_arr.append(np.full(n_cv1, 4.0))
        soc_arr.append(soc_cv1)
        soc_last = float(soc_cv1[-1])

    # CC-b at C/4 until 4.2 V
    soc_ccb0 = soc_last + i_ccb / (3600.0 * q)
    v_dense_b = ocv._ocv_dense + r * i_ccb + bump_term(ocv._ocv_dense)
    if v_dense_b[-1] < 4.2:
        raise SimulationError(f"{spec.cell_id}: 4.2 V unreachable during CC-b")
    soc_ccb_end = float(np.interp(4.2, v_dense_b, ocv._soc_dense))
    if soc_ccb_end >= 1.0:
        raise SimulationError(f"{spec.cell_id}: SOC would exceed 1 during CC-b")
    k_b = i_ccb / (3600.0 * q)
    n_ccb = max(1, int(np.ceil((soc_ccb_end - soc_ccb0) / k_b)))
    kk = np.arange(n_ccb, dtype=np.float64)
    soc_ccb = soc_ccb0 + k_b * kk
    i_arr.append(np.full(n_ccb, -i_ccb))
    v_arr.append(charge_v(soc_ccb, i_ccb))
    soc_arr.append(soc_ccb)
    soc_last = float(soc_ccb[-1])

    # CV at 4.2 V until the current falls below 50 mA
    t2 = tau * np.log(i_ccb / 0.05)
    n_cv2 = max(1, int(np.floor(t2)))
    kk = np.arange(1, n_cv2 + 1, dtype=np.float64)
    i_cv2 = i_ccb * np.exp(-kk / tau)
    soc_cv2 = soc_last + tau * i_ccb * (1.0 - np.exp(-kk / tau)) / (3600.0 * q)
    i_arr.append(-i_cv2)
    v_arr.append(np.full(n_cv2, 4.2))
    soc_arr.append(soc_cv2)
    soc_end_charge = float(soc_cv2[-1])
    if soc_end_charge >= 1.0:
        raise SimulationError(f"{spec.cell_id}: SOC left [0, 1] during charge")

    # discharge: repeated pulse template until SOC falls to 0.20
    tmpl = _template()
    need = int((soc_end_charge - 0.20) * 3600.0 * q / (q_nom * float(tmpl.mean()))) + 2 * TEMPLATE_PERIOD_S
    reps = int(np.ceil(need / TEMPLATE_PERIOD_S))
    c_dis = np.tile(tmpl, reps)
    i_dis = c_dis * q_nom
    soc_dis = soc_end_charge - np.concatenate(([0.0], np.cumsum(i_dis[:-1]))) / (3600.0 * q)
    below = soc_dis <= 0.20
    if not np.any(below):
        raise SimulationError(f"{spec.cell_id}: discharge never reaches 20 % SOC")
    n_dis = int(np.argmax(below)) + 1
    i_dis = i_dis[:n_dis]
    soc_dis = soc_dis[:n_dis]
    v_dis = ocv.discharge(soc_dis) - r * i_dis
    i_arr.append(i_dis)
    v_arr.append(v_dis)
    soc_arr.append(soc_dis)

    current = np.concatenate(i_arr)
    voltage = np.concatenate(v_arr)
    soc = np.concatenate(soc_arr)
    n_total = len(current)
    n_charge = n_total - n_dis
    bounds = {
        "CC_A": (0, n_cca),
        "CV_4V0": (n_cca, n_cca + n_cv1),
        "CC_B": (n_cca + n_cv1, n_cca + n_cv1 + n_ccb),
        "CV_4V2": (n_cca + n_cv1 + n_ccb, n_charge),
        "DISCHARGE": (n_charge, n_total),
    }

    # planted peak inventory from the template structure (noise-free arrays)
    peaks = []
    base_i_a = PULSE_BASE_C * q_nom
    n_slots = (TEMPLATE_PERIOD_S - 9) // PULSE_SLOT_S
    for rep in range(reps):
        for slot in range(n_slots):
            start = rep * TEMPLATE_PERIOD_S + slot * PULSE_SLOT_S + PULSE_OFFSET_S
            if start + PULSE_LEN_S > n_dis:
                break
            if start < peak_baseline_len:
                continue
            level = float(c_dis[start]) * q_nom
            base_v = float(np.mean(v_dis[start - peak_baseline_len:start]))
            plat_min = float(np.min(v_dis[start:start + PULSE_LEN_S]))
            peaks.append(PlantedPeak(onset=start, delta_I=level - base_i_a,
                                     delta_V=base_v - plat_min, soc=float(soc_dis[start])))

    anomalous = spec.anomaly is not None and cycle_index in spec.anomaly.cycles
    if spec.sigma_v_V > 0:
        voltage = voltage + rng.normal(0.0, spec.sigma_v_V, n_total)
    if spec.sigma_i_A > 0:
        current = current + rng.normal(0.0, spec.sigma_i_A, n_total)
    if anomalous:
        a0 = int(spec.anomaly.start_frac * n_cca)
        voltage = voltage.copy()
        voltage[a0:n_charge] += spec.anomaly.offset_V

    time_s = np.arange(n_total, dtype=np.float64)
    raw = SampleSeries(time_s, voltage, current, soc)
    phases = {name: raw.slice(a, b) for name, (a, b) in bounds.items()}
    record = CycleRecord(spec.cell_id, cycle_index, 1, spec.cc_a_rate, raw, phases, bounds)
    truth = CycleTruth(spec.cell_id, cycle_index, q, r, bounds, peaks, anomalous, soc_end_charge)
    return record, truth


def batch_of_cycle(batch_plan, cycle_index: int) -> int:
    """1-based batch index of an aging cycle under a batch plan."""
    edge = 0
    for j, n in enumerate(batch_plan, start=1):
        edge += n
        if cycle_index <= edge:
            return j
    raise SimulationError(f"cycle {cycle_index} beyond batch plan (total {edge})")


def rpt_records(spec: CellSpec, batch_plan, rpt_every: int = 1):
    """RPT table for one cell: a fresh RPT plus one per ``rpt_every`` batches."""
    records = [RptRecord(spec.cell_id, 1, 0, spec.capacity_at(0))]
    cum = 0
    idx = 2
    for j, n in enumerate(batch_plan, start=1):
        cum += n
        if j % rpt_every == 0 or j == len(batch_plan):
            records.append(RptRecord(spec.cell_id, idx, cum, spec.capacity_at(cum)))
            idx += 1
    return records


def iter_campaign_cycles(specs, batch_plans, seed: int = 0):
    """Yield (spec_ordinal, CycleRecord, CycleTruth) for a whole campaign.

    Cells are seeded independently (campaign seed XOR cell ordinal) so
    per-cell streams do not depend on simulation order.
    """
    for ordinal, spec in enumerate(specs):
        plan = batch_plans[ordinal] if isinstance(batch_plans, (list, tuple)) else batch_plans[spec.cell_id]
        total = sum(plan)
        if spec.fade_Ah_per_cycle * total >= spec.nominal_capacity_Ah:
            raise SimulationError(f"{spec.cell_id}: fade over campaign exceeds nominal capacity")
        ocv = OcvModel(spec.hysteresis_scale)
        cell_seed = seed ^ ordinal
        for cycle in range(1, total + 1):
            record, truth = simulate_cycle(spec, cycle, (cell_seed, cycle), ocv=ocv)
            record = CycleRecord(record.cell_id, cycle, batch_of_cycle(plan, cycle),
                                 spec.cc_a_rate, record.raw, record.phases, record.phase_bounds)
            yield ordinal, record, truth


@dataclass
class SimulatedCampaign:
    specs: list
    batch_plans: list
    seed: int
    entries: list = field(default_factory=list)       # ManifestEntry per cycle
    rpts: list = field(default_factory=list)
    truths: dict = field(default_factory=dict)        # cell_id -> [CycleTruth]
    ocv_charge: OcvCurve | None = None
    ocv_discharge: OcvCurve | None = None
    out_dir: Path | None = None


def simulate_campaign(specs, batch_plans, rpt_every: int = 1, seed: int = 0,
                      out_dir=None) -> SimulatedCampaign:
    """Simulate a campaign; optionally emit the full on-disk file tree.

    The tree contains cycles/<cell>_c<idx>.csv, manifest.json (with true
    phase bounds), rpt.csv, ocv_charge.csv / ocv_discharge.csv, and
    ledger.json with the ground truth. RPT capacities are noise-free samples
    of the true fade curve.
    """
    campaign = SimulatedCampaign(list(specs), list(batch_plans), seed)
    ocv_model = OcvModel(specs[0].hysteresis_scale)
    campaign.ocv_charge, campaign.ocv_discharge = ocv_model.curves()
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "cycles").mkdir(parents=True, exist_ok=True)
        campaign.out_dir = out_dir

    for ordinal, spec in enumerate(specs):
        plan = batch_plans[ordinal]
        campaign.rpts.extend(rpt_records(spec, plan, rpt_every))
        campaign.truths[spec.cell_id] = []

    for ordinal, record, truth in iter_campaign_cycles(specs, batch_plans, seed):
        spec = specs[ordinal]
        rel = f"cycles/{spec.cell_id}_c{record.cycle_index:04d}.csv"
        campaign.entries.append(ManifestEntry(
            spec.cell_id, record.cycle_index, record.batch_index, spec.cc_a_rate,
            rel, phases={k: tuple(v) for k, v in record.phase_bounds.items()}))
        campaign.truths[spec.cell_id].append(truth)
        if out_dir is not None:
            try:
                write_cycle_csv(out_dir / rel, record.raw)
            except OSError as exc:
                raise SohkitError(f"failed writing {out_dir / rel}: {exc}") from exc

    if out_dir is not None:
        write_manifest(out_dir / "manifest.json", campaign.entries)
        write_rpt_table(out_dir / "rpt.csv", campaign.rpts)
        write_ocv_csv(out_dir / "ocv_charge.csv", campaign.ocv_charge)
        write_ocv_csv(out_dir / "ocv_discharge.csv", campaign.ocv_discharge)
        _write_ledger(out_dir / "ledger.json", campaign)
    return campaign


def _write_ledger(path, campaign: SimulatedCampaign) -> None:
    cells = {}
    for spec in campaign.specs:
        entries = []
        for t in campaign.truths[spec.cell_id]:
            entries.append({
                "cycle": t.cycle_index,
                "q_Ah": t.q_Ah,
                "r_ohm": t.r_ohm,
                "anomalous": t.anomalous,
                "soc_end_charge": t.soc_end_charge,
                "bounds": {k: list(v) for k, v in t.bounds.items()},
                "peaks": [{"onset": p.onset, "delta_I": p.delta_I,
                           "delta_V": p.delta_V, "soc": p.soc} for p in t.peaks],
            })
        cells[spec.cell_id] = {"q_fresh_Ah": spec.capacity_at(0), "cycles": entries}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"seed": campaign.seed, "cells": cells}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def five_cell_specs(**overrides):
    """Five-cell campaign mirroring the experimental rate structure."""
    rates = {"V4": 0.25, "W5": 0.5, "W7": 0.25, "W8": 0.5, "W9": 1.0}
    return [CellSpec(cell_id=cid, cc_a_rate=rate, **overrides) for cid, rate in rates.items()]
