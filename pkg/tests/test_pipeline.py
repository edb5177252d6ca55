import numpy as np
import pytest

from sohkit.core import PipelineError, SampleSeries, CycleRecord
from sohkit.indicators import INDICATOR_NAMES
from sohkit.pipeline import (IndicatorConfig, build_matrices, capacities_from_rpts,
                             extract_cycle_indicators, extract_indicators,
                             read_indicator_csv, write_indicator_csv)


class TestExtract:
    def test_all_indicators_valid_on_clean_campaign(self, small_campaign, small_indicators):
        for cell, ind in small_indicators.items():
            n = sum(1 for r in small_campaign.records if r.cell_id == cell)
            assert len(ind.cycles) == n
            for name in INDICATOR_NAMES:
                assert np.all(ind.valid[name]), (cell, name)

    def test_rows_ordered_by_cell_and_cycle(self, small_indicators):
        assert list(small_indicators) == sorted(small_indicators)
        for ind in small_indicators.values():
            assert np.all(np.diff(ind.cycles) > 0)

    def test_indicator_values_decline_with_age(self, small_indicators):
        for cell, ind in small_indicators.items():
            e = ind.values["E_ch"]
            assert e[-1] < e[0]
            assert ind.values["R"][-1] > ind.values["R"][0]

    def test_zero_delay_autocorr_equals_full_call(self, small_campaign):
        rec = small_campaign.records[0]
        from sohkit.indicators import power_autocorrelation, power_series
        cfg = IndicatorConfig()
        vals = extract_cycle_indicators(rec, cfg)
        p = power_series(rec.phases["DISCHARGE"])
        _, _, p0 = power_autocorrelation(p, 3000.0, 1.0)
        assert vals["P_autocorr"] == p0

    def test_feature_subset_skips_other_columns(self, small_campaign):
        cfg = IndicatorConfig()
        rec = small_campaign.records[0]
        vals = extract_cycle_indicators(rec, cfg, features=("E_ch", "E_dis"))
        assert np.isfinite(vals["E_ch"]) and np.isfinite(vals["E_dis"])
        assert np.isnan(vals["P_autocorr"]) and np.isnan(vals["R"])

    def test_z2_needs_ocv_curve(self, small_campaign):
        cfg = IndicatorConfig()
        rec = small_campaign.records[0]
        vals = extract_cycle_indicators(rec, cfg, ocv_charge=None)
        assert np.isnan(vals["Z_chg2"])
        vals = extract_cycle_indicators(rec, cfg, ocv_charge=small_campaign.ocv_charge)
        assert np.isfinite(vals["Z_chg2"])

    def test_z2_recovers_simulator_resistance(self, small_campaign, small_indicators):
        truth_r = {t.cycle_index: t.r_ohm for t in small_campaign.truths["W8"]}
        ind = small_indicators["W8"]
        for cyc, z2 in zip(ind.cycles, ind.values["Z_chg2"]):
            assert z2 == pytest.approx(truth_r[int(cyc)], rel=0.02)

    def test_failed_cycle_masked_and_run_continues(self, small_campaign, capsys):
        import sys
        bad_raw = SampleSeries(np.arange(5.0), np.full(5, 3.0), np.full(5, -1.0))
        bad = CycleRecord("ZZ", 1, 1, 0.5, bad_raw)  # no phases, unsegmentable
        records = list(small_campaign.records[:3]) + [bad]
        out = extract_indicators(records, IndicatorConfig(), on_error="mask", log=sys.stderr)
        assert "ZZ" in out
        assert not any(out["ZZ"].valid[name][0] for name in INDICATOR_NAMES)
        assert "ZZ cycle 1" in capsys.readouterr().err

    def test_all_cycles_failing_raises(self):
        bad_raw = SampleSeries(np.arange(5.0), np.full(5, 3.0), np.full(5, -1.0))
        bad = CycleRecord("ZZ", 1, 1, 0.5, bad_raw)
        with pytest.raises(PipelineError):
            extract_indicators([bad], IndicatorConfig(), on_error="mask")

    def test_on_error_raise_propagates(self):
        bad_raw = SampleSeries(np.arange(5.0), np.full(5, 3.0), np.full(5, -1.0))
        bad = CycleRecord("ZZ", 1, 1, 0.5, bad_raw)
        with pytest.raises(Exception):
            extract_indicators([bad], IndicatorConfig(), on_error="raise")


class TestIndicatorCsv:
    def test_roundtrip(self, small_indicators, tmp_path):
        p = tmp_path / "ind.csv"
        write_indicator_csv(p, small_indicators)
        back = read_indicator_csv(p)
        assert set(back) == set(small_indicators)
        for cell in back:
            a, b = small_indicators[cell], back[cell]
            assert np.array_equal(a.cycles, b.cycles)
            for name in INDICATOR_NAMES:
                assert np.array_equal(a.valid[name], b.valid[name])
                va, vb = a.values[name], b.values[name]
                mask = a.valid[name]
                assert np.array_equal(va[mask], vb[mask])


class TestMatrices:
    def test_row_count_equals_fully_valid_cycles(self, small_campaign, small_indicators):
        caps = capacities_from_rpts(small_campaign.rpts, small_indicators)
        mats = build_matrices(small_indicators, caps)
        for cell, m in mats.items():
            assert len(m) == len(small_indicators[cell].cycles)

    def test_blocklist_applied(self, small_campaign, small_indicators):
        from sohkit.core import FeatureBlock
        caps = capacities_from_rpts(small_campaign.rpts, small_indicators)
        mats = build_matrices(small_indicators, caps,
                              blocks=[FeatureBlock("W7", ("dR",))])
        assert "dR" not in mats["W7"].feature_names
        assert "dR" in mats["W8"].feature_names

    def test_missing_rpt_rejected(self, small_indicators):
        with pytest.raises(PipelineError):
            capacities_from_rpts([], small_indicators)

    def test_augmented_capacity_matches_truth_for_linear_fade(self, small_campaign,
                                                              small_indicators):
        caps = capacities_from_rpts(small_campaign.rpts, small_indicators)
        for cell, series in caps.items():
            truth = {t.cycle_index: t.q_Ah for t in small_campaign.truths[cell]}
            for cyc, q in zip(series.cycles, series.q_Ah):
                assert q == pytest.approx(truth[int(cyc)], abs=1e-12)
