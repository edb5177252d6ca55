import numpy as np
import pytest

from sohkit.analysis import (ENERGY_SWEEP, IMPEDANCE_SWEEP, SweepConfig,
                             correlation_report, pearson, window_sweep)
from sohkit.core import ConfigError, UndefinedCorrelationError
from sohkit.preprocessing import FeatureMatrix


def brute_pearson(x, y):
    n = len(x)
    xb = sum(x) / n
    yb = sum(y) / n
    num = sum((a - xb) * (b - yb) for a, b in zip(x, y))
    den = (sum((a - xb) ** 2 for a in x) * sum((b - yb) ** 2 for b in y)) ** 0.5
    return num / den


class TestPearson:
    def test_perfect_line(self):
        x = np.arange(10.0)
        assert pearson(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-12)

    def test_anti_line(self):
        x = np.arange(10.0)
        assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_four_point_case_matches_oracle(self):
        x = [1.0, 2.0, 3.0, 4.0]
        y = [1.0, 3.0, 2.0, 5.0]
        assert pearson(x, y) == pytest.approx(brute_pearson(x, y), abs=1e-12)

    def test_random_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(0, 3, 30)
            y = rng.normal(1, 2, 30)
            assert pearson(x, y) == pytest.approx(brute_pearson(list(x), list(y)), abs=1e-12)

    def test_constant_input_rejected(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson(np.ones(5), np.arange(5.0))

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(0, 1, 25), rng.normal(0, 1, 25)
        assert pearson(x, y) == pearson(y, x)

    def test_affine_invariance(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(0, 1, 25), rng.normal(0, 1, 25)
        r = pearson(x, y)
        assert pearson(3.0 * x + 7.0, y) == pytest.approx(r, abs=1e-12)
        assert pearson(x, 0.5 * y - 2.0) == pytest.approx(r, abs=1e-12)

    def test_sign_of_slope(self):
        x = np.arange(20.0)
        for a in (-2.0, 0.5, 4.0):
            assert pearson(x, a * x + 1) == pytest.approx(np.sign(a), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pearson(np.arange(3.0), np.arange(4.0))


def matrix(cell, x_cols, q_loss, names=("dE_ch",)):
    n = len(q_loss)
    q = 4.85 * (1 - np.asarray(q_loss) / 100.0)
    return FeatureMatrix(cell, np.arange(1, n + 1), tuple(names),
                         np.column_stack(x_cols), q, np.asarray(q_loss, float))


class TestCorrelationReport:
    def test_single_cell_single_feature(self):
        loss = np.linspace(0, 10, 8)
        m = matrix("A", [2.0 * loss], loss)
        rows = correlation_report([m], pooled=False)
        assert len(rows) == 1
        assert rows[0].scope == "A" and rows[0].feature == "dE_ch"
        assert rows[0].r == pytest.approx(1.0, abs=1e-12)

    def test_pooled_equals_per_cell_for_identical_linear_fade(self):
        loss = np.linspace(0, 10, 8)
        m1 = matrix("A", [3.0 * loss], loss)
        m2 = matrix("B", [3.0 * loss], loss)
        rows = correlation_report([m1, m2], pooled=True)
        by_scope = {(r.scope, r.feature): r.r for r in rows}
        assert by_scope[("ALL", "dE_ch")] == pytest.approx(1.0, abs=1e-12)
        assert by_scope[("A", "dE_ch")] == pytest.approx(1.0, abs=1e-12)

    def test_pooled_single_cell_equals_per_cell(self):
        rng = np.random.default_rng(3)
        loss = np.sort(rng.uniform(0, 12, 15))
        m = matrix("A", [loss + rng.normal(0, 1, 15)], loss)
        rows = correlation_report([m], pooled=True)
        per = next(r for r in rows if r.scope == "A")
        pooled = next(r for r in rows if r.scope == "ALL")
        assert pooled.r == per.r and pooled.n == per.n

    def test_blocked_feature_absent(self):
        loss = np.linspace(0, 10, 8)
        m1 = matrix("A", [loss, 2 * loss], loss, names=("dE_ch", "dR"))
        m2 = matrix("W7", [loss], loss, names=("dE_ch",))  # dR blocked for W7
        rows = correlation_report([m1, m2], pooled=True)
        assert not any(r.scope == "W7" and r.feature == "dR" for r in rows)
        pooled_dr = next(r for r in rows if r.scope == "ALL" and r.feature == "dR")
        assert pooled_dr.n == 8  # only cell A contributes

    def test_constant_feature_reported_as_nan(self):
        loss = np.linspace(0, 10, 8)
        m = matrix("A", [np.zeros(8)], loss)
        rows = correlation_report([m], pooled=False)
        assert np.isnan(rows[0].r)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            correlation_report([])


class TestSweepConfigs:
    def test_impedance_preset_enumerates_fifteen(self):
        wins = IMPEDANCE_SWEEP.windows()
        assert len(wins) == 15
        assert wins[0] == (3.6, 3.65)
        assert wins[1] == (3.625, 3.675)
        lows = [w[0] for w in wins]
        assert np.allclose(np.diff(lows), 0.025)
        assert all(hi - lo == pytest.approx(0.05) for lo, hi in wins)

    def test_energy_preset(self):
        wins = ENERGY_SWEEP.windows()
        assert len(wins) == 12
        assert wins[0] == (3.6, 3.625)
        assert wins[-1][1] == pytest.approx(3.9)


class TestWindowSweep:
    def test_single_window_matches_direct_computation(self, small_campaign,
                                                      small_indicators):
        from sohkit.pipeline import capacities_from_rpts
        caps = capacities_from_rpts(small_campaign.rpts, small_indicators)
        recs = [r for r in small_campaign.records if r.cell_id == "W8"]
        res = window_sweep(recs, caps["W8"], "impedance",
                           SweepConfig(3.8, 0.1, 0.1, 1))
        assert len(res.rows) == 1
        ind = small_indicators["W8"]
        from sohkit.analysis import pearson as p
        direct = p(ind.values["Z_chg"], caps["W8"].q_loss_pct)
        assert res.rows[0].r == pytest.approx(direct, rel=1e-9)

    def test_insufficient_data_flagged(self, small_campaign):
        from sohkit.preprocessing import augment_capacity
        recs = [r for r in small_campaign.records if r.cell_id == "W8"][:2]
        rpts = [r for r in small_campaign.rpts if r.cell_id == "W8"]
        cap = augment_capacity(rpts, [r.cycle_index for r in recs], "W8")
        res = window_sweep(recs, cap, "energy_ch", SweepConfig(3.6, 0.05, 0.05, 2))
        assert all(row.flag == "insufficient-data" for row in res.rows)
        assert res.best is None

    def test_mixed_rates_rejected(self, small_campaign):
        from sohkit.preprocessing import augment_capacity
        recs = small_campaign.records[:30]
        rpts = [r for r in small_campaign.rpts if r.cell_id == "V4"]
        cap = augment_capacity(rpts, range(1, 25), "V4")
        with pytest.raises(ConfigError, match="C-rates"):
            window_sweep(recs, cap, "impedance", IMPEDANCE_SWEEP)
